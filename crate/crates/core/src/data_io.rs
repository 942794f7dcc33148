//! Feature and manifest files, synthetic datasets, and role splits.
//!
//! Feature file layout (all integers little-endian):
//!
//! | offset | size        | field                          |
//! |--------|-------------|--------------------------------|
//! | 0      | 8           | magic `GSTRSFTR`               |
//! | 8      | 4           | version `u32` (currently 1)    |
//! | 12     | 8           | `n` rows, `u64`                |
//! | 20     | 8           | `dim` columns, `u64`           |
//! | 28     | 4·n·dim     | `f32` values, row-major        |
//!
//! Manifests are CSV with the header `sample_id,class,group,role`; `group`
//! and `role` may be blank. Row `i` of a manifest describes row `i` of the
//! matching feature file.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, FeatureMatrix, RngSeed};

pub const FEATURE_MAGIC: &[u8; 8] = b"GSTRSFTR";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 28;
const MANIFEST_HEADER: [&str; 4] = ["sample_id", "class", "group", "role"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Query => "query",
            Role::Gallery => "gallery",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Role::Train),
            "query" => Ok(Role::Query),
            "gallery" => Ok(Role::Gallery),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub sample_id: u64,
    pub class: String,
    pub group: Option<usize>,
    pub role: Option<Role>,
}

/// Per-sample identity: class label, optional group, optional role.
///
/// Classes are indexed `0..n_classes` in sorted label order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    rows: Vec<ManifestRow>,
    class_names: Vec<String>,
    class_of_row: Vec<usize>,
}

impl DatasetManifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("manifest"));
        }
        let mut seen = HashSet::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if !seen.insert(r.sample_id) {
                return Err(Error::invalid(format!(
                    "duplicate sample_id {} at row {i}",
                    r.sample_id
                )));
            }
            if r.class.is_empty() {
                return Err(Error::invalid(format!("empty class at row {i}")));
            }
        }
        let class_names: Vec<String> = rows
            .iter()
            .map(|r| r.class.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let class_of_row = rows
            .iter()
            .map(|r| class_names.binary_search(&r.class).unwrap())
            .collect();
        Ok(Self {
            rows,
            class_names,
            class_of_row,
        })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Class index of row `i`.
    pub fn class_of(&self, i: usize) -> usize {
        self.class_of_row[i]
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_names.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    /// Row indices of every sample in class `c`, ascending.
    pub fn rows_of_class(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.class_of_row[i] == c).collect()
    }

    pub fn rows_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rows[i].role == Some(role)).collect()
    }

    pub fn has_complete_groups(&self) -> bool {
        self.rows.iter().all(|r| r.group.is_some())
    }

    /// Sub-manifest restricted to `indices` (in that order).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.rows[i].clone()).collect())
    }

    fn with_rows(&self, rows: Vec<ManifestRow>) -> Self {
        Self {
            rows,
            class_names: self.class_names.clone(),
            class_of_row: self.class_of_row.clone(),
        }
    }
}

pub fn save_features(path: impl AsRef<Path>, features: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * features.as_slice().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.n_samples() as u64).to_le_bytes());
    buf.extend_from_slice(&(features.dim() as u64).to_le_bytes());
    for v in features.as_slice() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|(offset, message)| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    })
}

fn decode_features(bytes: &[u8]) -> std::result::Result<FeatureMatrix, (u64, String)> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err((
            bytes.len() as u64,
            format!(
                "truncated header: expected {FEATURE_HEADER_LEN} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..8] != FEATURE_MAGIC {
        return Err((0, "bad magic, expected GSTRSFTR".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err((8, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let dim = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    if n == 0 {
        return Err((12, "empty matrix (n = 0)".into()));
    }
    if dim == 0 {
        return Err((20, "empty matrix (dim = 0)".into()));
    }
    let expected = n
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(FEATURE_HEADER_LEN as u64))
        .ok_or((12, "matrix size overflows".to_string()))?;
    if bytes.len() as u64 != expected {
        return Err((
            bytes.len().min(expected as usize) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let payload = &bytes[FEATURE_HEADER_LEN..];
    let mut data = Vec::with_capacity((n * dim) as usize);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(((FEATURE_HEADER_LEN + 4 * i) as u64, "non-finite value".into()));
        }
        data.push(v as f64);
    }
    FeatureMatrix::new(data, n as usize, dim as usize).map_err(|e| (0, e.to_string()))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_to_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_to_error(path, e))?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(parse_err(1, format!("header must be `{}`", MANIFEST_HEADER.join(","))));
    }

    let mut rows = Vec::new();
    let mut seen: BTreeMap<u64, u64> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_to_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let sample_id: u64 = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid sample_id `{}`", &record[0])))?;
        if let Some(first) = seen.insert(sample_id, line) {
            return Err(parse_err(
                line,
                format!("duplicate sample_id {sample_id} (first seen on line {first})"),
            ));
        }
        let class = record[1].to_string();
        if class.is_empty() {
            return Err(parse_err(line, "empty class".into()));
        }
        let group = match &record[2] {
            "" => None,
            g => Some(
                g.parse::<usize>()
                    .map_err(|_| parse_err(line, format!("invalid group `{g}`")))?,
            ),
        };
        let role = match &record[3] {
            "" => None,
            r => Some(r.parse::<Role>().map_err(|m| parse_err(line, m))?),
        };
        rows.push(ManifestRow {
            sample_id,
            class,
            group,
            role,
        });
    }
    DatasetManifest::new(rows)
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_to_error(path, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_to_error(path, e))?;
    for r in manifest.rows() {
        let group = r.group.map(|g| g.to_string()).unwrap_or_default();
        let role = r.role.map(|r| r.to_string()).unwrap_or_default();
        w.write_record([r.sample_id.to_string().as_str(), &r.class, &group, &role])
            .map_err(|e| csv_to_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_to_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Parameters of a synthetic dataset with controlled intra-class structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub groups_per_class: usize,
    pub samples_per_group: usize,
    pub raw_dim: usize,
    pub class_separation: f64,
    pub group_separation: f64,
    pub noise_sigma: f64,
    pub seed: RngSeed,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            groups_per_class: 3,
            samples_per_group: 20,
            raw_dim: 32,
            class_separation: 8.0,
            group_separation: 4.0,
            noise_sigma: 1.0,
            seed: RngSeed(0),
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.groups_per_class == 0 || self.samples_per_group == 0 {
            return Err(Error::invalid("synthetic counts must be at least 1"));
        }
        if self.raw_dim == 0 {
            return Err(Error::invalid("raw_dim must be at least 1"));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.class_separation) || !ok(self.group_separation) || !ok(self.noise_sigma) {
            return Err(Error::invalid("separations and noise must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Draw a dataset of Gaussian clouds: class means on a sphere of radius
/// `class_separation`, group means offset from their class mean by
/// `group_separation` along mutually orthogonal directions (when
/// `groups_per_class ≤ raw_dim`), samples with isotropic noise.
///
/// Ground-truth groups are recorded in the manifest; roles are left blank.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(FeatureMatrix, DatasetManifest)> {
    spec.validate()?;
    let mut rng = spec.seed.rng();
    let dim = spec.raw_dim;
    let width = (spec.n_classes - 1).to_string().len();
    let gaussian =
        |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).collect() };

    let n = spec.n_classes * spec.groups_per_class * spec.samples_per_group;
    let mut data = Vec::with_capacity(n * dim);
    let mut rows = Vec::with_capacity(n);
    for c in 0..spec.n_classes {
        let class_mean = scaled_unit(gaussian(&mut rng), spec.class_separation);
        let mut directions: Vec<Vec<f64>> = Vec::with_capacity(spec.groups_per_class);
        for _ in 0..spec.groups_per_class {
            let mut d = gaussian(&mut rng);
            if directions.len() < dim {
                for b in &directions {
                    let p = dot(&d, b);
                    d.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
            }
            directions.push(scaled_unit(d, 1.0));
        }
        for (g, dir) in directions.iter().enumerate() {
            let group_mean: Vec<f64> = class_mean
                .iter()
                .zip(dir)
                .map(|(m, d)| m + spec.group_separation * d)
                .collect();
            for _ in 0..spec.samples_per_group {
                let noise = gaussian(&mut rng);
                data.extend(group_mean.iter().zip(&noise).map(|(m, z)| m + spec.noise_sigma * z));
                rows.push(ManifestRow {
                    sample_id: rows.len() as u64,
                    class: format!("c{c:0width$}"),
                    group: Some(g),
                    role: None,
                });
            }
        }
    }
    Ok((FeatureMatrix::new(data, n, dim)?, DatasetManifest::new(rows)?))
}

fn scaled_unit(mut v: Vec<f64>, scale: f64) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x *= scale / n);
    }
    v
}

/// Per class, mark `floor(train_fraction · n)` randomly chosen rows as
/// `train` and clear the role of the rest.
pub fn split_train(manifest: &DatasetManifest, train_fraction: f64, seed: RngSeed) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::invalid("train_fraction must be in (0, 1)"));
    }
    let mut rows = manifest.rows().to_vec();
    for c in 0..manifest.n_classes() {
        let mut members = manifest.rows_of_class(c);
        members.shuffle(&mut seed.derive(c as u64).rng());
        let n_train = (train_fraction * members.len() as f64).floor() as usize;
        for (k, &i) in members.iter().enumerate() {
            rows[i].role = if k < n_train { Some(Role::Train) } else { None };
        }
    }
    Ok(manifest.with_rows(rows))
}

/// Assign `query`/`gallery` roles to every row not marked `train`.
///
/// Per class with `n ≥ 2` eligible rows, `max(1, floor(query_fraction · n))`
/// become queries (capped at `n − 1`) and the rest gallery. A class with a
/// single eligible row is left gallery-only.
pub fn split_roles(manifest: &DatasetManifest, query_fraction: f64, seed: RngSeed) -> Result<DatasetManifest> {
    if !(query_fraction > 0.0 && query_fraction < 1.0) {
        return Err(Error::invalid("query_fraction must be in (0, 1)"));
    }
    let mut rows = manifest.rows().to_vec();
    for c in 0..manifest.n_classes() {
        let mut members: Vec<usize> = manifest
            .rows_of_class(c)
            .into_iter()
            .filter(|&i| rows[i].role != Some(Role::Train))
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() == 1 {
            log::warn!(
                "class `{}` has a single evaluation sample; kept gallery-only",
                manifest.class_names()[c]
            );
            rows[members[0]].role = Some(Role::Gallery);
            continue;
        }
        members.shuffle(&mut seed.derive(c as u64).rng());
        let n = members.len();
        let n_query = ((query_fraction * n as f64).floor() as usize).clamp(1, n - 1);
        for (k, &i) in members.iter().enumerate() {
            rows[i].role = Some(if k < n_query { Role::Query } else { Role::Gallery });
        }
    }
    Ok(manifest.with_rows(rows))
}
