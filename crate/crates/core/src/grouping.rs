//! Per-class k-means grouping.
//!
//! Each class is split into `G` groups by Lloyd's algorithm with
//! D²-weighted seeding and several restarts. Groups are computed once from
//! the raw (optionally PCA-reduced) features and then frozen; at training
//! time only membership is used and group centers are recomputed from the
//! current embedding via [`group_centers`].

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data_io::{csv_to_error, DatasetManifest};
use crate::error::{Error, Result};
use crate::numerics::{mean_of, pca_fit, pca_transform, sq_dist, FeatureMatrix, RngSeed};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub groups: usize,
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: RngSeed,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            groups: 5,
            max_iters: 100,
            restarts: 5,
            seed: RngSeed(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingConfig {
    pub kmeans: KMeansConfig,
    /// Target PCA dimension before clustering, capped at the input
    /// dimension. `None` clusters the raw features.
    pub pca_dim: Option<usize>,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            kmeans: KMeansConfig::default(),
            pca_dim: Some(64),
        }
    }
}

/// Groups of one class. Group `g` may be empty when the class has fewer
/// than `G` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGroups {
    /// `None` for an empty group.
    pub centroids: Vec<Option<Vec<f64>>>,
    /// Row indices of each group's members, ascending.
    pub members: Vec<Vec<usize>>,
    /// Final k-means objective `Σ_g Σ_x ‖x − μ_g‖²`.
    pub objective: f64,
}

impl ClassGroups {
    pub fn nonempty_groups(&self) -> impl Iterator<Item = usize> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(g, _)| g)
    }
}

/// Frozen intra-class partition: every row belongs to exactly one
/// `(class, group)` pair and groups never span classes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupModel {
    groups_per_class: usize,
    classes: Vec<ClassGroups>,
    assignment: Vec<(usize, usize)>,
}

impl GroupModel {
    pub fn groups_per_class(&self) -> usize {
        self.groups_per_class
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_samples(&self) -> usize {
        self.assignment.len()
    }

    /// `(class, group)` of row `i`.
    pub fn assignment(&self, i: usize) -> (usize, usize) {
        self.assignment[i]
    }

    pub fn class_groups(&self, class: usize) -> Result<&ClassGroups> {
        self.classes
            .get(class)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))
    }

    /// Build a model from externally supplied group ids (one per row);
    /// centroids are the member means of `features`.
    pub fn from_assignments(features: &FeatureMatrix, manifest: &DatasetManifest, groups: &[usize]) -> Result<Self> {
        if groups.len() != manifest.len() || features.n_samples() != manifest.len() {
            return Err(Error::DimensionMismatch {
                expected: manifest.len(),
                found: groups.len().min(features.n_samples()),
            });
        }
        let g_count = groups.iter().max().map_or(1, |m| m + 1);
        let mut classes: Vec<ClassGroups> = (0..manifest.n_classes())
            .map(|_| ClassGroups {
                centroids: vec![None; g_count],
                members: vec![Vec::new(); g_count],
                objective: 0.0,
            })
            .collect();
        let mut assignment = Vec::with_capacity(groups.len());
        for (i, &g) in groups.iter().enumerate() {
            let c = manifest.class_of(i);
            classes[c].members[g].push(i);
            assignment.push((c, g));
        }
        for cg in &mut classes {
            let mut objective = 0.0;
            for g in 0..g_count {
                if cg.members[g].is_empty() {
                    continue;
                }
                let rows: Vec<&[f64]> = cg.members[g].iter().map(|&i| features.row(i)).collect();
                let mu = mean_of(&rows)?;
                objective += rows.iter().map(|r| sq_dist(r, &mu)).sum::<f64>();
                cg.centroids[g] = Some(mu);
            }
            cg.objective = objective;
        }
        Ok(Self {
            groups_per_class: g_count,
            classes,
            assignment,
        })
    }

    /// Model from the manifest's own `group` column.
    pub fn from_manifest(features: &FeatureMatrix, manifest: &DatasetManifest) -> Result<Self> {
        let groups: Option<Vec<usize>> = manifest.rows().iter().map(|r| r.group).collect();
        let groups = groups.ok_or_else(|| Error::invalid("manifest has rows without a group"))?;
        Self::from_assignments(features, manifest, &groups)
    }

    pub fn groups(&self) -> Vec<usize> {
        self.assignment.iter().map(|&(_, g)| g).collect()
    }
}

/// One Lloyd run on a point set.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Objective after every completed iteration.
    pub history: Vec<f64>,
}

impl KMeansRun {
    pub fn objective(&self) -> f64 {
        *self.history.last().unwrap_or(&0.0)
    }
}

/// Lloyd's algorithm with D²-weighted seeding. Requires `points.len() ≥ k ≥ 1`.
///
/// Assignment ties go to the lowest centroid index. An empty cluster takes
/// the point farthest from its current centroid.
pub fn lloyd(points: &[&[f64]], k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> KMeansRun {
    assert!(k >= 1 && points.len() >= k);
    let mut centroids = seed_centroids(points, k, rng);
    let mut assignment: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = Vec::new();

    for _ in 0..max_iters.max(1) {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty_clusters(points, &mut next, &centroids, k);
        let changed = next != assignment;
        assignment = next;
        centroids = recompute_centroids(points, &assignment, k);
        history.push(objective(points, &assignment, &centroids));
        if !changed {
            break;
        }
    }
    KMeansRun {
        assignment,
        centroids,
        history,
    }
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (g, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (g, d);
        }
    }
    best
}

fn seed_centroids(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap();
            }
            pick
        } else {
            // all remaining points coincide with a chosen center
            let rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            rest[rng.random_range(0..rest.len())]
        };
        chosen.push(pick);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[pick]));
        }
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

fn repair_empty_clusters(points: &[&[f64]], assignment: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&g| counts[g] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let g = assignment[i];
            if counts[g] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[g]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        match far {
            Some(i) => assignment[i] = empty,
            None => return,
        }
    }
}

fn recompute_centroids(points: &[&[f64]], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &g) in points.iter().zip(assignment) {
        counts[g] += 1;
        sums[g].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            let inv = 1.0 / c as f64;
            s.iter_mut().for_each(|v| *v *= inv);
        }
    }
    sums
}

fn objective(points: &[&[f64]], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &g)| sq_dist(p, &centroids[g]))
        .sum()
}

/// Run k-means independently inside every class of `manifest` (rows of
/// `features` aligned with manifest rows). The best of `restarts` runs by
/// final objective is kept. Classes with at most `G` samples put each sample
/// in its own group and leave the remaining groups empty.
pub fn kmeans_per_class(
    features: &FeatureMatrix,
    manifest: &DatasetManifest,
    cfg: &KMeansConfig,
) -> Result<GroupModel> {
    if cfg.groups == 0 {
        return Err(Error::invalid("number of groups must be at least 1"));
    }
    if cfg.max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if manifest.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    if features.n_samples() != manifest.len() {
        return Err(Error::DimensionMismatch {
            expected: manifest.len(),
            found: features.n_samples(),
        });
    }
    let g_count = cfg.groups;
    let classes: Vec<ClassGroups> = (0..manifest.n_classes())
        .into_par_iter()
        .map(|c| {
            let rows = manifest.rows_of_class(c);
            let points: Vec<&[f64]> = rows.iter().map(|&i| features.row(i)).collect();
            let mut members = vec![Vec::new(); g_count];
            let mut centroids = vec![None; g_count];
            if rows.len() <= g_count {
                for (g, &i) in rows.iter().enumerate() {
                    members[g].push(i);
                    centroids[g] = Some(features.row(i).to_vec());
                }
                return ClassGroups {
                    centroids,
                    members,
                    objective: 0.0,
                };
            }
            let class_seed = cfg.seed.derive(c as u64);
            let mut best: Option<KMeansRun> = None;
            for r in 0..cfg.restarts.max(1) {
                let run = lloyd(&points, g_count, cfg.max_iters, &mut class_seed.derive(r as u64).rng());
                if best.as_ref().is_none_or(|b| run.objective() < b.objective()) {
                    best = Some(run);
                }
            }
            let best = best.unwrap();
            for (&i, &g) in rows.iter().zip(&best.assignment) {
                members[g].push(i);
            }
            for (g, c) in best.centroids.into_iter().enumerate() {
                if !members[g].is_empty() {
                    centroids[g] = Some(c);
                }
            }
            ClassGroups {
                centroids,
                members,
                objective: *best.history.last().unwrap(),
            }
        })
        .collect();

    let mut assignment = vec![(0, 0); manifest.len()];
    for (c, cg) in classes.iter().enumerate() {
        for (g, ms) in cg.members.iter().enumerate() {
            for &i in ms {
                assignment[i] = (c, g);
            }
        }
    }
    Ok(GroupModel {
        groups_per_class: g_count,
        classes,
        assignment,
    })
}

/// Optional global PCA followed by per-class k-means.
pub fn cluster(features: &FeatureMatrix, manifest: &DatasetManifest, cfg: &GroupingConfig) -> Result<GroupModel> {
    match cfg.pca_dim {
        Some(k) if k < features.dim() && features.n_samples() >= 2 => {
            let pca = pca_fit(features, k.max(1), cfg.kmeans.seed.derive(u64::MAX))?;
            let reduced = pca_transform(&pca, features)?;
            kmeans_per_class(&reduced, manifest, &cfg.kmeans)
        }
        _ => kmeans_per_class(features, manifest, &cfg.kmeans),
    }
}

/// Mean of each nonempty group of `class`, computed from `embedded` (rows
/// aligned with the model's rows).
pub fn group_centers(embedded: &FeatureMatrix, model: &GroupModel, class: usize) -> Result<Vec<Vec<f64>>> {
    let cg = model.class_groups(class)?;
    if embedded.n_samples() != model.n_samples() {
        return Err(Error::DimensionMismatch {
            expected: model.n_samples(),
            found: embedded.n_samples(),
        });
    }
    cg.nonempty_groups()
        .map(|g| {
            let rows: Vec<&[f64]> = cg.members[g].iter().map(|&i| embedded.row(i)).collect();
            mean_of(&rows)
        })
        .collect()
}

/// Write `sample_id,class,group` rows.
pub fn write_groups_csv(path: impl AsRef<Path>, model: &GroupModel, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_to_error(path, e))?;
    w.write_record(["sample_id", "class", "group"])
        .map_err(|e| csv_to_error(path, e))?;
    for (i, row) in manifest.rows().iter().enumerate() {
        let (_, g) = model.assignment(i);
        w.write_record([row.sample_id.to_string().as_str(), &row.class, &g.to_string()])
            .map_err(|e| csv_to_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a group CSV and return one group id per manifest row.
pub fn read_groups_csv(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let index: std::collections::HashMap<u64, usize> = manifest
        .rows()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.sample_id, i))
        .collect();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_to_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_to_error(path, e))?;
    if header.iter().collect::<Vec<_>>() != ["sample_id", "class", "group"] {
        return Err(parse_err(1, "header must be `sample_id,class,group`".into()));
    }
    let mut groups: Vec<Option<usize>> = vec![None; manifest.len()];
    for record in reader.records() {
        let record = record.map_err(|e| csv_to_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id: u64 = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid sample_id `{}`", &record[0])))?;
        let &row = index
            .get(&id)
            .ok_or_else(|| parse_err(line, format!("sample_id {id} not in manifest")))?;
        if manifest.rows()[row].class != record[1] {
            return Err(parse_err(
                line,
                format!("class `{}` disagrees with manifest", &record[1]),
            ));
        }
        let g: usize = record[2]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid group `{}`", &record[2])))?;
        if groups[row].replace(g).is_some() {
            return Err(parse_err(line, format!("duplicate sample_id {id}")));
        }
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            g.ok_or_else(|| {
                Error::invalid(format!(
                    "{}: no group for sample_id {}",
                    path.display(),
                    manifest.rows()[i].sample_id
                ))
            })
        })
        .collect()
}
