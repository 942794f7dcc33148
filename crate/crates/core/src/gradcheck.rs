//! Randomized finite-difference checks of every analytic gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::losses::grad_check::{grad_check, GradCheckReport, Probe};
use crate::losses::{
    gs_trs_loss, icv_triplet_loss, mean_valued_triplet_loss, softmax_cross_entropy, triplet_loss, LossConfig,
    LossOutput, TripletContext,
};
use crate::model::{backprop_embedding, ClassifierHead, Dense, EmbeddingModel};
use crate::numerics::{FeatureMatrix, RngSeed};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn probe(out: &LossOutput) -> Probe {
    Probe {
        value: out.value,
        regime: out.regime.clone(),
    }
}

/// Random context shape: dimension, positives with groups, negative count.
struct Shape {
    dim: usize,
    groups: Vec<usize>,
    n_neg: usize,
}

impl Shape {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let dim = rng.random_range(4..=16);
        let np = rng.random_range(3..=8);
        let g = rng.random_range(2..=4usize).min(np);
        let mut groups: Vec<usize> = (0..np)
            .map(|i| if i < g { i } else { rng.random_range(0..g) })
            .collect();
        groups.sort_unstable();
        Self {
            dim,
            groups,
            n_neg: rng.random_range(2..=6),
        }
    }

    fn rows(&self) -> usize {
        self.groups.len() + self.n_neg
    }

    fn context(&self, x: &[f64]) -> TripletContext {
        let d = self.dim;
        let pos: Vec<(usize, Vec<f64>)> = self
            .groups
            .iter()
            .enumerate()
            .map(|(i, &g)| (g, x[i * d..(i + 1) * d].to_vec()))
            .collect();
        let np = self.groups.len();
        let neg: Vec<Vec<f64>> = (0..self.n_neg)
            .map(|j| x[(np + j) * d..(np + j + 1) * d].to_vec())
            .collect();
        TripletContext::from_vectors(&pos, &neg).expect("valid random context")
    }
}

fn check_triplet(rng: &mut ChaCha8Rng, fault: bool) -> GradCheckReport {
    let d = rng.random_range(4..=16);
    let x = gaussian(rng, 3 * d);
    let alpha = 1.0;
    let f = |x: &[f64]| probe(&triplet_loss(&x[..d], &x[d..2 * d], &x[2 * d..], alpha).unwrap());
    let out = triplet_loss(&x[..d], &x[d..2 * d], &x[2 * d..], alpha).unwrap();
    let mut g = out.dense_grads(3, d);
    if fault {
        g.iter_mut().for_each(|v| *v *= 1.01);
    }
    grad_check(f, &x, &g, STEP, TOLERANCE)
}

fn check_mean_valued(rng: &mut ChaCha8Rng, fault: bool) -> GradCheckReport {
    let s = Shape::draw(rng);
    let x = gaussian(rng, s.rows() * s.dim);
    let f = |x: &[f64]| probe(&mean_valued_triplet_loss(&s.context(x), 1.0).unwrap());
    let out = mean_valued_triplet_loss(&s.context(&x), 1.0).unwrap();
    let mut g = out.dense_grads(s.rows(), s.dim);
    if fault {
        g.iter_mut().for_each(|v| *v *= 1.01);
    }
    grad_check(f, &x, &g, STEP, TOLERANCE)
}

fn check_icv(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = Shape::draw(rng);
    let x = gaussian(rng, s.rows() * s.dim);
    let (a1, a2) = (1.0, 0.5);
    let f = |x: &[f64]| probe(&icv_triplet_loss(&s.context(x), a1, a2).unwrap());
    let out = icv_triplet_loss(&s.context(&x), a1, a2).unwrap();
    grad_check(f, &x, &out.dense_grads(s.rows(), s.dim), STEP, TOLERANCE)
}

/// Split `x` into an `n × d` embedding followed by head weights and bias.
fn unpack_head(x: &[f64], n: usize, d: usize, classes: usize) -> (FeatureMatrix, ClassifierHead) {
    let emb = FeatureMatrix::new(x[..n * d].to_vec(), n, d).unwrap();
    let w = n * d + classes * d;
    let linear = Dense {
        weight: x[n * d..w].to_vec(),
        bias: x[w..w + classes].to_vec(),
        in_dim: d,
        out_dim: classes,
    };
    (emb, ClassifierHead { linear })
}

fn labels_for(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n)
        .map(|i| if i < classes { i } else { rng.random_range(0..classes) })
        .collect()
}

fn check_softmax(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let d = rng.random_range(4..=16);
    let n = rng.random_range(3..=14);
    let classes = rng.random_range(2..=5usize).min(n);
    let labels = labels_for(rng, n, classes);
    let x = gaussian(rng, n * d + classes * d + classes);
    let f = |x: &[f64]| {
        let (emb, head) = unpack_head(x, n, d, classes);
        Probe::smooth(softmax_cross_entropy(&head, &emb, &labels).unwrap().loss.value)
    };
    let (emb, head) = unpack_head(&x, n, d, classes);
    let out = softmax_cross_entropy(&head, &emb, &labels).unwrap();
    let mut g = out.loss.dense_grads(n, d);
    g.extend_from_slice(&out.head_grads.weight);
    g.extend_from_slice(&out.head_grads.bias);
    grad_check(f, &x, &g, STEP, TOLERANCE)
}

fn batch_contexts(emb: &FeatureMatrix, labels: &[usize], groups: &[usize], classes: usize) -> Vec<TripletContext> {
    (0..classes)
        .map(|c| {
            let pos: Vec<(usize, usize)> = (0..labels.len())
                .filter(|&i| labels[i] == c)
                .map(|i| (i, groups[i]))
                .collect();
            let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != c).collect();
            TripletContext::from_rows(c, emb, &pos, &neg).unwrap()
        })
        .collect()
}

fn check_gs_trs(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = Shape::draw(rng);
    let d = s.dim;
    let n = s.rows();
    let classes = rng.random_range(2..=3usize);
    let mut labels = vec![0; s.groups.len()];
    labels.extend((0..s.n_neg).map(|j| {
        1 + if j < classes - 1 {
            j
        } else {
            rng.random_range(0..classes - 1)
        }
    }));
    let mut groups = s.groups.clone();
    groups.extend((0..s.n_neg).map(|_| rng.random_range(0..2)));
    let cfg = LossConfig {
        alpha: 1.0,
        alpha1: 1.0,
        alpha2: 0.5,
        omega: rng.random_range(0.1..0.9),
    };
    let x = gaussian(rng, n * d + classes * d + classes);
    let eval = |x: &[f64]| {
        let (emb, head) = unpack_head(x, n, d, classes);
        let ctxs = batch_contexts(&emb, &labels, &groups, classes);
        gs_trs_loss(&ctxs, &head, &emb, &labels, &cfg).unwrap()
    };
    let f = |x: &[f64]| probe(&eval(x).loss);
    let out = eval(&x);
    let mut g = out.loss.dense_grads(n, d);
    g.extend_from_slice(&out.head_grads.weight);
    g.extend_from_slice(&out.head_grads.bias);
    grad_check(f, &x, &g, STEP, TOLERANCE)
}

fn model_params(m: &EmbeddingModel) -> Vec<f64> {
    let mut p = Vec::new();
    if let Some(h) = &m.hidden {
        p.extend_from_slice(&h.weight);
        p.extend_from_slice(&h.bias);
    }
    p.extend_from_slice(&m.output.weight);
    p.extend_from_slice(&m.output.bias);
    p
}

fn with_params(m: &EmbeddingModel, x: &[f64]) -> EmbeddingModel {
    let mut out = m.clone();
    let mut at = 0;
    let mut take = |v: &mut Vec<f64>| {
        let n = v.len();
        v.copy_from_slice(&x[at..at + n]);
        at += n;
    };
    if let Some(h) = out.hidden.as_mut() {
        take(&mut h.weight);
        take(&mut h.bias);
    }
    take(&mut out.output.weight);
    take(&mut out.output.bias);
    out
}

fn check_backprop(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let d_in = rng.random_range(4..=16);
    let d_out = rng.random_range(2..=8);
    let hidden = rng.random_bool(0.5).then(|| rng.random_range(2..=8));
    let normalize = rng.random_bool(0.5);
    let n = rng.random_range(2..=6);
    let model = EmbeddingModel::new_random(d_in, hidden, d_out, normalize, RngSeed(rng.random())).unwrap();
    let inputs = FeatureMatrix::new(gaussian(rng, n * d_in), n, d_in).unwrap();
    let weights = FeatureMatrix::new(gaussian(rng, n * d_out), n, d_out).unwrap();
    let f = |x: &[f64]| {
        let out = with_params(&model, x).embed(&inputs).unwrap();
        Probe::smooth(out.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum())
    };
    let g = backprop_embedding(&model, &inputs, &weights).unwrap();
    let mut analytic = Vec::new();
    if let Some(h) = &g.hidden {
        analytic.extend_from_slice(&h.weight);
        analytic.extend_from_slice(&h.bias);
    }
    analytic.extend_from_slice(&g.output.weight);
    analytic.extend_from_slice(&g.output.bias);
    grad_check(f, &model_params(&model), &analytic, STEP, TOLERANCE)
}

/// `trials` random instances of each checked function. With `inject_fault`
/// the plain and mean-valued triplet gradients are scaled by 1.01.
pub fn run_suite(seed: RngSeed, trials: usize, inject_fault: bool) -> Vec<SuiteReport> {
    type Check = fn(&mut ChaCha8Rng, bool) -> GradCheckReport;
    let checks: [(&'static str, Check); 6] = [
        ("triplet_loss", check_triplet),
        ("mean_valued_triplet_loss", check_mean_valued),
        ("icv_triplet_loss", |r, _| check_icv(r)),
        ("softmax_cross_entropy", |r, _| check_softmax(r)),
        ("gs_trs_loss", |r, _| check_gs_trs(r)),
        ("backprop_embedding", |r, _| check_backprop(r)),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(k, (name, check))| {
            let mut report = GradCheckReport::empty(TOLERANCE);
            for t in 0..trials {
                let mut rng = seed.derive(k as u64).derive(t as u64).rng();
                report.merge(check(&mut rng, inject_fault));
            }
            SuiteReport { name, report }
        })
        .collect()
}
