//! Triplet-family losses with analytic gradients with respect to the
//! embedded features.
//!
//! All distance terms are squared Euclidean. Hinge terms have the form
//! `½·max(‖x − c‖² + margin − ‖y − c‖², 0)` where `c` is an anchor, `x` the
//! sample pulled toward it and `y` the contrast sample pushed away. When the
//! anchor is a mean of samples, its gradient is distributed back onto every
//! sample it averages (unless centers are frozen), so the gradients here are
//! the exact derivatives of the loss values.
//!
//! Gradient maps are keyed by sample index; for a [`TripletContext`] built
//! from an embedded matrix, that is the matrix row.

pub mod grad_check;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ClassifierHead, DenseGrads};
use crate::numerics::{check_same_dim, sq_dist, FeatureMatrix};

/// Margins and softmax fusion weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Margin of the plain and mean-valued triplet losses.
    pub alpha: f64,
    /// Inter-class margin of the ICV loss.
    pub alpha1: f64,
    /// Inter-group margin of the ICV loss.
    pub alpha2: f64,
    /// Weight of the softmax term; `1 − omega` weighs the triplet term.
    pub omega: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            alpha1: 1.0,
            alpha2: 0.3,
            omega: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and ≥ 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::invalid("omega must be in [0, 1]"));
        }
        if self.alpha2 > self.alpha1 {
            log::warn!(
                "inter-group margin alpha2 = {} exceeds inter-class margin alpha1 = {}",
                self.alpha2,
                self.alpha1
            );
        }
        Ok(())
    }
}

/// Per-part values of a composite loss (unweighted).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub softmax: f64,
    pub inter: f64,
    pub intra: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient per sample index. Samples in no active term are absent.
    pub grads: BTreeMap<usize, Vec<f64>>,
    /// Hinge terms with strictly positive slack.
    pub active_terms: usize,
    pub breakdown: LossBreakdown,
    /// Piecewise regime: hinge activity bits and chosen contrast samples.
    pub regime: Vec<u64>,
}

impl LossOutput {
    pub fn grad(&self, sample: usize) -> Option<&[f64]> {
        self.grads.get(&sample).map(Vec::as_slice)
    }

    fn add_grad(&mut self, sample: usize, scale: f64, v: impl Iterator<Item = f64>) {
        let dim_hint = v.size_hint().0;
        let entry = self.grads.entry(sample).or_insert_with(|| vec![0.0; dim_hint]);
        for (e, x) in entry.iter_mut().zip(v) {
            *e += scale * x;
        }
    }

    /// `self ← self + weight · other` (values, gradients and breakdown).
    pub fn accumulate(&mut self, other: &LossOutput, weight: f64) {
        self.value += weight * other.value;
        self.active_terms += other.active_terms;
        self.breakdown.softmax += other.breakdown.softmax;
        self.breakdown.inter += other.breakdown.inter;
        self.breakdown.intra += other.breakdown.intra;
        for (&k, g) in &other.grads {
            self.add_grad(k, weight, g.iter().copied());
        }
        self.regime.extend_from_slice(&other.regime);
    }

    /// Gradients as an `n × dim` row-major buffer (missing rows are zero).
    pub fn dense_grads(&self, n: usize, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * dim];
        for (&k, g) in &self.grads {
            out[k * dim..(k + 1) * dim].copy_from_slice(g);
        }
        out
    }
}

/// Plain triplet loss `½·max(‖a−p‖² + α − ‖a−n‖², 0)`.
///
/// Gradient keys: `0` anchor, `1` positive, `2` negative.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], alpha: f64) -> Result<LossOutput> {
    check_same_dim(anchor, positive)?;
    check_same_dim(anchor, negative)?;
    let slack = sq_dist(anchor, positive) + alpha - sq_dist(anchor, negative);
    let mut out = LossOutput {
        regime: vec![u64::from(slack > 0.0)],
        ..LossOutput::default()
    };
    if slack > 0.0 {
        out.value = 0.5 * slack;
        out.breakdown.inter = out.value;
        out.active_terms = 1;
        out.add_grad(0, 1.0, negative.iter().zip(positive).map(|(n, p)| n - p));
        out.add_grad(1, 1.0, positive.iter().zip(anchor).map(|(p, a)| p - a));
        out.add_grad(2, 1.0, anchor.iter().zip(negative).map(|(a, n)| a - n));
    }
    Ok(out)
}

/// Arithmetic mean, summed in list order.
pub fn mean_anchor<R: AsRef<[f64]>>(positives: &[R]) -> Result<Vec<f64>> {
    crate::numerics::mean_of(positives).map_err(|e| match e {
        Error::Empty(_) => Error::Empty("positive set"),
        other => other,
    })
}

/// Position of the vector closest to `anchor`; lowest position on ties.
pub fn hardest_negative<'a, R: AsRef<[f64]>>(anchor: &[f64], negatives: &'a [R]) -> Result<(usize, &'a [f64])> {
    let mut best: Option<(usize, f64)> = None;
    for (i, n) in negatives.iter().enumerate() {
        let n = n.as_ref();
        check_same_dim(anchor, n)?;
        let d = sq_dist(anchor, n);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    let (i, _) = best.ok_or(Error::Empty("negative set"))?;
    Ok((i, negatives[i].as_ref()))
}

/// How an anchor is formed from a set of positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    /// Mean of the set.
    Mean,
    /// The given sample, which must belong to the set.
    Member(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Positive {
    id: usize,
    group: usize,
    vector: Vec<f64>,
}

/// One class's slice of a batch: its positives (with group ids), the
/// negatives from other classes, and how anchors are formed.
///
/// Positives and negatives are kept sorted by sample index, which fixes
/// both the summation order of means and the tie rule for hardest samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletContext {
    pub class: usize,
    positives: Vec<Positive>,
    negatives: Vec<(usize, Vec<f64>)>,
    class_anchor: Anchor,
    group_anchors: BTreeMap<usize, Anchor>,
    frozen_centers: bool,
}

impl TripletContext {
    /// Context over rows of `embedded`: `positives` are `(row, group)`
    /// pairs, `negatives` are rows of other classes.
    pub fn from_rows(
        class: usize,
        embedded: &FeatureMatrix,
        positives: &[(usize, usize)],
        negatives: &[usize],
    ) -> Result<Self> {
        let n = embedded.n_samples();
        if let Some(&bad) = positives.iter().map(|(r, _)| r).chain(negatives).find(|&&r| r >= n) {
            return Err(Error::invalid(format!("row {bad} out of range for {n} samples")));
        }
        let mut pos: Vec<Positive> = positives
            .iter()
            .map(|&(id, group)| Positive {
                id,
                group,
                vector: embedded.row(id).to_vec(),
            })
            .collect();
        let mut neg: Vec<(usize, Vec<f64>)> = negatives.iter().map(|&id| (id, embedded.row(id).to_vec())).collect();
        pos.sort_by_key(|p| p.id);
        neg.sort_by_key(|n| n.0);
        Self::build(class, pos, neg)
    }

    /// Context over explicit vectors. Positives get sample indices
    /// `0..N^p` in the given order, negatives `N^p..N^p + N^n`.
    pub fn from_vectors(positives: &[(usize, Vec<f64>)], negatives: &[Vec<f64>]) -> Result<Self> {
        let np = positives.len();
        let pos = positives
            .iter()
            .enumerate()
            .map(|(id, (group, v))| Positive {
                id,
                group: *group,
                vector: v.clone(),
            })
            .collect();
        let neg = negatives.iter().enumerate().map(|(k, v)| (np + k, v.clone())).collect();
        Self::build(0, pos, neg)
    }

    fn build(class: usize, positives: Vec<Positive>, negatives: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        let first = positives.first().ok_or(Error::Empty("positive set"))?;
        if negatives.is_empty() {
            return Err(Error::NoNegatives(class));
        }
        let dim = first.vector.len();
        for v in positives
            .iter()
            .map(|p| &p.vector)
            .chain(negatives.iter().map(|n| &n.1))
        {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
        }
        Ok(Self {
            class,
            positives,
            negatives,
            class_anchor: Anchor::Mean,
            group_anchors: BTreeMap::new(),
            frozen_centers: false,
        })
    }

    /// Same structure with vectors re-read from `embedded`.
    pub fn refreshed(&self, embedded: &FeatureMatrix) -> Result<Self> {
        let mut out = self.clone();
        for p in &mut out.positives {
            p.vector = embedded.row(p.id).to_vec();
        }
        for n in &mut out.negatives {
            n.1 = embedded.row(n.0).to_vec();
        }
        Ok(out)
    }

    pub fn with_class_anchor(mut self, anchor: Anchor) -> Result<Self> {
        if let Anchor::Member(id) = anchor {
            if !self.positives.iter().any(|p| p.id == id) {
                return Err(Error::invalid(format!("anchor {id} is not a positive")));
            }
        }
        self.class_anchor = anchor;
        Ok(self)
    }

    pub fn with_group_anchor(mut self, group: usize, anchor: Anchor) -> Result<Self> {
        if let Anchor::Member(id) = anchor {
            if !self.positives.iter().any(|p| p.id == id && p.group == group) {
                return Err(Error::invalid(format!("anchor {id} is not in group {group}")));
            }
        }
        self.group_anchors.insert(group, anchor);
        Ok(self)
    }

    /// Treat anchors as constants during differentiation.
    pub fn with_frozen_centers(mut self, frozen: bool) -> Self {
        self.frozen_centers = frozen;
        self
    }

    pub fn n_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn n_negatives(&self) -> usize {
        self.negatives.len()
    }

    pub fn dim(&self) -> usize {
        self.positives[0].vector.len()
    }

    pub fn positive_ids(&self) -> Vec<usize> {
        self.positives.iter().map(|p| p.id).collect()
    }

    pub fn negative_ids(&self) -> Vec<usize> {
        self.negatives.iter().map(|n| n.0).collect()
    }

    /// Distinct group ids present among the positives, ascending.
    pub fn groups(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.positives.iter().map(|p| p.group).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    /// `c^p`, the mean of all positives.
    pub fn mean_anchor(&self) -> Vec<f64> {
        let vs: Vec<&[f64]> = self.positives.iter().map(|p| p.vector.as_slice()).collect();
        mean_anchor(&vs).expect("context has positives")
    }

    /// `c^{p,g}`, the mean of the positives in group `g`.
    pub fn group_mean(&self, group: usize) -> Option<Vec<f64>> {
        let vs: Vec<&[f64]> = self
            .positives
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.vector.as_slice())
            .collect();
        mean_anchor(&vs).ok()
    }

    /// The anchor actually used for the inter-class term.
    pub fn class_anchor(&self) -> Vec<f64> {
        let all: Vec<usize> = (0..self.positives.len()).collect();
        self.anchor_vector(&self.anchor_weights(self.class_anchor, &all))
    }

    fn anchor_weights(&self, anchor: Anchor, set: &[usize]) -> Vec<(usize, f64)> {
        match anchor {
            Anchor::Mean => {
                let w = 1.0 / set.len() as f64;
                set.iter().map(|&k| (k, w)).collect()
            }
            Anchor::Member(id) => {
                let k = set
                    .iter()
                    .copied()
                    .find(|&k| self.positives[k].id == id)
                    .expect("anchor member validated on construction");
                vec![(k, 1.0)]
            }
        }
    }

    fn anchor_vector(&self, weights: &[(usize, f64)]) -> Vec<f64> {
        if let [(k, w)] = weights {
            if *w == 1.0 {
                return self.positives[*k].vector.clone();
            }
        }
        let mut c = vec![0.0; self.dim()];
        for &(k, _) in weights {
            c.iter_mut().zip(&self.positives[k].vector).for_each(|(a, v)| *a += v);
        }
        let inv = 1.0 / weights.len() as f64;
        c.iter_mut().for_each(|a| *a *= inv);
        c
    }

    /// Hinge terms `½·max(‖p_i − c‖² + margin − ‖y − c‖², 0)` for every
    /// subject position `i`, with `c` the weighted anchor and `y` the given
    /// contrast vector. Adds value and gradients into `out` and returns the
    /// value contributed.
    fn anchored_hinges(
        &self,
        anchor: &[(usize, f64)],
        subjects: &[usize],
        contrast: (usize, &[f64]),
        margin: f64,
        out: &mut LossOutput,
    ) -> f64 {
        let c = self.anchor_vector(anchor);
        let (contrast_id, y) = contrast;
        let far = sq_dist(y, &c);
        let mut total = 0.0;
        for &i in subjects {
            let p = &self.positives[i];
            let slack = sq_dist(&p.vector, &c) + margin - far;
            out.regime.push(u64::from(slack > 0.0));
            if slack <= 0.0 {
                continue;
            }
            total += 0.5 * slack;
            out.active_terms += 1;
            // ∂/∂p_i (direct) = p_i − c ; ∂/∂y = c − y ; ∂/∂c = y − p_i
            out.add_grad(p.id, 1.0, p.vector.iter().zip(&c).map(|(a, b)| a - b));
            out.add_grad(contrast_id, 1.0, c.iter().zip(y).map(|(a, b)| a - b));
            if !self.frozen_centers {
                for &(k, w) in anchor {
                    let pk = self.positives[k].id;
                    out.add_grad(pk, w, y.iter().zip(&p.vector).map(|(a, b)| a - b));
                }
            }
        }
        out.value += total;
        total
    }
}

/// Mean-valued triplet loss over one context: every positive is compared
/// against the class anchor and the single hardest negative (closest to
/// the anchor).
pub fn mean_valued_triplet_loss(ctx: &TripletContext, alpha: f64) -> Result<LossOutput> {
    let mut out = LossOutput::default();
    inter_term(ctx, alpha, &mut out)?;
    Ok(out)
}

fn inter_term(ctx: &TripletContext, alpha: f64, out: &mut LossOutput) -> Result<()> {
    let all: Vec<usize> = (0..ctx.positives.len()).collect();
    let weights = ctx.anchor_weights(ctx.class_anchor, &all);
    let anchor = ctx.anchor_vector(&weights);
    let negs: Vec<&[f64]> = ctx.negatives.iter().map(|n| n.1.as_slice()).collect();
    let (pos, y) = hardest_negative(&anchor, &negs)?;
    let neg_id = ctx.negatives[pos].0;
    out.regime.push(neg_id as u64);
    let v = ctx.anchored_hinges(&weights, &all, (neg_id, y), alpha, out);
    out.breakdown.inter += v;
    Ok(())
}

/// ICV triplet loss: the inter-class mean-valued term with margin `alpha1`
/// plus, for every group `g`, hinge terms pulling its members toward the
/// group anchor `c^{p,g}` by margin `alpha2` relative to the same-class
/// sample outside `g` that is closest to `c^{p,g}`.
///
/// A context with a single group has no intra-class terms.
pub fn icv_triplet_loss(ctx: &TripletContext, alpha1: f64, alpha2: f64) -> Result<LossOutput> {
    let mut out = LossOutput::default();
    inter_term(ctx, alpha1, &mut out)?;
    for g in ctx.groups() {
        let members: Vec<usize> = (0..ctx.positives.len())
            .filter(|&k| ctx.positives[k].group == g)
            .collect();
        let outside: Vec<usize> = (0..ctx.positives.len())
            .filter(|&k| ctx.positives[k].group != g)
            .collect();
        if outside.is_empty() {
            continue;
        }
        let anchor = ctx.group_anchors.get(&g).copied().unwrap_or(Anchor::Mean);
        let weights = ctx.anchor_weights(anchor, &members);
        let center = ctx.anchor_vector(&weights);
        let candidates: Vec<&[f64]> = outside.iter().map(|&k| ctx.positives[k].vector.as_slice()).collect();
        let (pos, y) = hardest_negative(&center, &candidates)?;
        let contrast_id = ctx.positives[outside[pos]].id;
        out.regime.push(contrast_id as u64);
        let v = ctx.anchored_hinges(&weights, &members, (contrast_id, y), alpha2, &mut out);
        out.breakdown.intra += v;
    }
    Ok(out)
}

/// Softmax cross-entropy and its head parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxOutput {
    pub loss: LossOutput,
    pub head_grads: DenseGrads,
}

/// Mean over rows of `−log softmax(V·f + c0)[label]`, stabilized by
/// subtracting the largest logit. Gradients are keyed by row.
pub fn softmax_cross_entropy(
    head: &ClassifierHead,
    embedded: &FeatureMatrix,
    labels: &[usize],
) -> Result<SoftmaxOutput> {
    let n = embedded.n_samples();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if embedded.dim() != head.d_in() {
        return Err(Error::DimensionMismatch {
            expected: head.d_in(),
            found: embedded.dim(),
        });
    }
    let n_classes = head.n_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let d = embedded.dim();
    let inv_n = 1.0 / n as f64;
    let mut out = LossOutput::default();
    let mut head_grads = DenseGrads {
        weight: vec![0.0; n_classes * d],
        bias: vec![0.0; n_classes],
    };
    let mut total = 0.0;
    for (i, (f, &label)) in embedded.rows().zip(labels).enumerate() {
        let logits = head.logits(f);
        let (arg_max, &max) = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let rest: f64 = exps
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != arg_max)
            .map(|(_, e)| e)
            .sum();
        let log_z = max + rest.ln_1p();
        total += log_z - logits[label];

        let z_sum = 1.0 + rest;
        let mut delta: Vec<f64> = exps.iter().map(|e| e / z_sum * inv_n).collect();
        delta[label] -= inv_n;
        let mut gf = vec![0.0; d];
        for (c, &dc) in delta.iter().enumerate() {
            head_grads.bias[c] += dc;
            let row = head.linear.weight_row(c);
            let gw = &mut head_grads.weight[c * d..(c + 1) * d];
            for k in 0..d {
                gw[k] += dc * f[k];
                gf[k] += dc * row[k];
            }
        }
        out.grads.insert(i, gf);
    }
    out.value = total * inv_n;
    out.breakdown.softmax = out.value;
    out.active_terms = n;
    Ok(SoftmaxOutput { loss: out, head_grads })
}

/// Which triplet objective is fused with the softmax term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TripletTerm {
    /// Inter-class term only, margin `alpha`.
    MeanValued { alpha: f64 },
    /// Inter-class plus intra-class (group) terms.
    Icv { alpha1: f64, alpha2: f64 },
}

/// `omega · softmax + (1 − omega) · Σ_contexts triplet`.
///
/// Context sample indices and softmax rows both refer to rows of
/// `embedded`.
pub fn joint_loss(
    contexts: &[TripletContext],
    head: &ClassifierHead,
    embedded: &FeatureMatrix,
    labels: &[usize],
    omega: f64,
    term: TripletTerm,
) -> Result<SoftmaxOutput> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::invalid("omega must be in [0, 1]"));
    }
    let soft = softmax_cross_entropy(head, embedded, labels)?;
    let mut triplet = LossOutput::default();
    for ctx in contexts {
        let part = match term {
            TripletTerm::MeanValued { alpha } => mean_valued_triplet_loss(ctx, alpha)?,
            TripletTerm::Icv { alpha1, alpha2 } => icv_triplet_loss(ctx, alpha1, alpha2)?,
        };
        triplet.accumulate(&part, 1.0);
    }
    let mut out = LossOutput::default();
    out.accumulate(&soft.loss, omega);
    out.accumulate(&triplet, 1.0 - omega);
    let mut head_grads = soft.head_grads;
    head_grads
        .weight
        .iter_mut()
        .chain(head_grads.bias.iter_mut())
        .for_each(|g| *g *= omega);
    Ok(SoftmaxOutput { loss: out, head_grads })
}

/// Joint softmax + ICV triplet objective with weights from `config`.
pub fn gs_trs_loss(
    contexts: &[TripletContext],
    head: &ClassifierHead,
    embedded: &FeatureMatrix,
    labels: &[usize],
    config: &LossConfig,
) -> Result<SoftmaxOutput> {
    config.validate()?;
    joint_loss(
        contexts,
        head,
        embedded,
        labels,
        config.omega,
        TripletTerm::Icv {
            alpha1: config.alpha1,
            alpha2: config.alpha2,
        },
    )
}
