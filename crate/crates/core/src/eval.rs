//! Retrieval, re-identification and classification metrics.
//!
//! Average precision is the mean of precision@k over the ranks `k` that
//! hold a relevant item, divided by the number of relevant items in the
//! whole gallery.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ClassifierHead, EmbeddingModel};
use crate::numerics::{check_same_dim, sq_dist, FeatureMatrix};

/// A gallery ranked for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query_id: u64,
    /// Gallery ids, nearest first.
    pub gallery_ids: Vec<u64>,
    /// Relevance of each ranked item.
    pub relevant: Vec<bool>,
}

impl RankedResult {
    /// Result with ids `0..n` in the given relevance order.
    pub fn from_relevance(relevant: Vec<bool>) -> Self {
        Self {
            query_id: 0,
            gallery_ids: (0..relevant.len() as u64).collect(),
            relevant,
        }
    }

    pub fn n_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }

    /// 1-based rank of the first relevant item.
    pub fn first_match(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }
}

/// Gallery rows ordered by squared distance to `query`; ties go to the
/// smaller entry of `gallery_ids`.
pub fn rank_gallery(query: &[f64], gallery: &FeatureMatrix, gallery_ids: &[u64]) -> Result<Vec<usize>> {
    if gallery_ids.len() != gallery.n_samples() {
        return Err(Error::DimensionMismatch {
            expected: gallery.n_samples(),
            found: gallery_ids.len(),
        });
    }
    check_same_dim(query, gallery.row(0))?;
    let d: Vec<f64> = gallery.rows().map(|g| sq_dist(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.n_samples()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(gallery_ids[a].cmp(&gallery_ids[b])));
    Ok(order)
}

/// Average precision, or `None` when nothing is relevant.
pub fn average_precision(result: &RankedResult) -> Option<f64> {
    let r = result.n_relevant();
    if r == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, _) in result.relevant.iter().enumerate().filter(|(_, &rel)| rel) {
        hits += 1;
        sum += hits as f64 / (k + 1) as f64;
    }
    Some(sum / r as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionAtK {
    pub value: f64,
    /// Cutoff actually used.
    pub k: usize,
    /// Whether the requested cutoff exceeded the gallery size.
    pub clamped: bool,
}

pub fn precision_at_k(result: &RankedResult, k: usize) -> Result<PrecisionAtK> {
    if k == 0 {
        return Err(Error::invalid("precision cutoff K must be at least 1"));
    }
    let n = result.relevant.len();
    if n == 0 {
        return Err(Error::Empty("gallery"));
    }
    let used = k.min(n);
    let hits = result.relevant[..used].iter().filter(|&&r| r).count();
    Ok(PrecisionAtK {
        value: hits as f64 / used as f64,
        k: used,
        clamped: k > n,
    })
}

/// `cmc[k−1]` = fraction of queries whose first relevant item is at rank
/// `≤ k`, for `k = 1..=max_rank`.
pub fn cmc_curve(results: &[RankedResult], max_rank: usize) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let mut counts = vec![0usize; max_rank];
    for r in results {
        let first = r
            .first_match()
            .ok_or_else(|| Error::invalid(format!("query {} has no relevant gallery item", r.query_id)))?;
        if first <= max_rank {
            counts[first - 1] += 1;
        }
    }
    let n = results.len() as f64;
    let mut acc = 0usize;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect())
}

/// Fraction of rows whose predicted class equals the label.
pub fn classification_accuracy(
    head: &ClassifierHead,
    model: &EmbeddingModel,
    features: &FeatureMatrix,
    labels: &[usize],
) -> Result<f64> {
    if labels.len() != features.n_samples() {
        return Err(Error::DimensionMismatch {
            expected: features.n_samples(),
            found: labels.len(),
        });
    }
    let emb = model.embed(features)?;
    let correct = emb.rows().zip(labels).filter(|(f, &l)| head.predict(f) == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Embedded query or gallery set with ids and class labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSet<'a> {
    pub features: &'a FeatureMatrix,
    pub ids: &'a [u64],
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub topk: Vec<usize>,
    /// Drop gallery items whose id equals the query id.
    pub exclude_identical_id: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    /// `(requested K, mean precision@K)`.
    pub precision_at: Vec<(usize, f64)>,
    pub cmc: Vec<f64>,
    pub classification_accuracy: Option<f64>,
    pub n_queries: usize,
    /// Queries without any relevant gallery item; left out of every metric.
    pub excluded_queries: usize,
}

/// Rank the gallery for every query and aggregate metrics in query order.
pub fn evaluate(query: LabeledSet<'_>, gallery: LabeledSet<'_>, options: &EvalOptions) -> Result<EvalReport> {
    for set in [&query, &gallery] {
        if set.ids.len() != set.features.n_samples() || set.labels.len() != set.features.n_samples() {
            return Err(Error::invalid("ids and labels must have one entry per row"));
        }
    }
    if query.features.dim() != gallery.features.dim() {
        return Err(Error::DimensionMismatch {
            expected: gallery.features.dim(),
            found: query.features.dim(),
        });
    }
    let results: Vec<RankedResult> = (0..query.features.n_samples())
        .into_par_iter()
        .map(|q| {
            let order = rank_gallery(query.features.row(q), gallery.features, gallery.ids)?;
            let qid = query.ids[q];
            let kept = order
                .into_iter()
                .filter(|&g| !(options.exclude_identical_id && gallery.ids[g] == qid));
            let (ids, rel) = kept
                .map(|g| (gallery.ids[g], gallery.labels[g] == query.labels[q]))
                .unzip();
            Ok(RankedResult {
                query_id: qid,
                gallery_ids: ids,
                relevant: rel,
            })
        })
        .collect::<Result<_>>()?;

    let (scored, excluded): (Vec<RankedResult>, Vec<RankedResult>) =
        results.into_iter().partition(|r| r.n_relevant() > 0);
    for r in &excluded {
        log::warn!(
            "query {} has no relevant gallery item; excluded from metrics",
            r.query_id
        );
    }
    if scored.is_empty() {
        return Err(Error::invalid("no query has a relevant gallery item"));
    }
    let n = scored.len() as f64;
    let map = scored.iter().filter_map(average_precision).sum::<f64>() / n;
    let mut precision_at = Vec::with_capacity(options.topk.len());
    let mut warned = false;
    for &k in &options.topk {
        let mut sum = 0.0;
        for r in &scored {
            let p = precision_at_k(r, k)?;
            if p.clamped && !warned {
                log::warn!("precision cutoff {k} exceeds gallery size {}; clamped", p.k);
                warned = true;
            }
            sum += p.value;
        }
        precision_at.push((k, sum / n));
    }
    let max_rank = scored.iter().map(|r| r.relevant.len()).max().unwrap_or(0);
    let cmc = cmc_curve(&scored, max_rank)?;
    Ok(EvalReport {
        map,
        precision_at,
        cmc,
        classification_accuracy: None,
        n_queries: scored.len(),
        excluded_queries: excluded.len(),
    })
}

impl EvalReport {
    /// CSV with header `metric,k,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,k,value\n");
        s.push_str(&format!("mAP,,{}\n", self.map));
        for (k, v) in &self.precision_at {
            s.push_str(&format!("precision,{k},{v}\n"));
        }
        for (i, v) in self.cmc.iter().enumerate() {
            s.push_str(&format!("cmc,{},{v}\n", i + 1));
        }
        if let Some(a) = self.classification_accuracy {
            s.push_str(&format!("accuracy,,{a}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path.as_ref(), e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>10}", "metric", "value")?;
        writeln!(f, "{:<16} {:>10.4}", "mAP", self.map)?;
        for (k, v) in &self.precision_at {
            writeln!(f, "{:<16} {:>10.4}", format!("precision@{k}"), v)?;
        }
        for k in [1usize, 5, 10, 20, 50] {
            if let Some(v) = self.cmc.get(k - 1) {
                writeln!(f, "{:<16} {:>10.4}", format!("cmc@{k}"), v)?;
            }
        }
        if let Some(a) = self.classification_accuracy {
            writeln!(f, "{:<16} {:>10.4}", "accuracy", a)?;
        }
        write!(f, "{:<16} {:>10}", "queries", self.n_queries)?;
        if self.excluded_queries > 0 {
            write!(f, " ({} excluded)", self.excluded_queries)?;
        }
        Ok(())
    }
}
