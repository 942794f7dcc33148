//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exits nonzero on a harness error, or on any FAIL when
//! `GSTRS_ACCEPTANCE_STRICT=1`.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use common::{gaussian, random_orthogonal};
use gstrs::data_io::{generate_synthetic, split_roles, split_train, DatasetManifest, Role, SynthSpec};
use gstrs::eval::{average_precision, cmc_curve, evaluate, EvalOptions, EvalReport, LabeledSet, RankedResult};
use gstrs::grouping::{kmeans_per_class, lloyd, KMeansConfig};
use gstrs::losses::{
    gs_trs_loss, icv_triplet_loss, mean_anchor, mean_valued_triplet_loss, softmax_cross_entropy, triplet_loss,
    LossConfig, LossOutput, TripletContext,
};
use gstrs::model::{backprop_embedding, Checkpoint, ClassifierHead, Dense, EmbeddingModel};
use gstrs::trainer::{train, LossMode, TrainConfig};
use gstrs::{FeatureMatrix, RngSeed};

struct Outcome {
    pass: bool,
    detail: String,
    notes: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
            notes: Vec::new(),
        }
    }
}

type Criterion = (&'static str, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("AC1", "gradient oracle", Duration::from_secs(5), ac1_gradients),
        (
            "AC2",
            "closed-form loss values",
            Duration::from_secs(1),
            ac2_closed_form,
        ),
        ("AC3", "identity reductions", Duration::from_secs(1), ac3_reductions),
        ("AC4", "invariance suite", Duration::from_secs(10), ac4_invariances),
        ("AC5", "k-means recovery", Duration::from_secs(5), ac5_kmeans),
        ("AC6", "synthetic end-to-end", Duration::from_secs(180), ac6_end_to_end),
        ("AC7", "training determinism", Duration::from_secs(120), ac7_determinism),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        let t = Instant::now();
        let mut out = run();
        let dt = t.elapsed();
        if dt > budget {
            out.pass = false;
            out.detail.push_str(&format!("; over time budget {budget:?}"));
        }
        if !out.pass {
            failed += 1;
        }
        println!(
            "{id} {} {name}: {} [{:.2} s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            dt.as_secs_f64()
        );
        for n in &out.notes {
            println!("    {n}");
        }
    }
    println!("{} of 7 criteria passed", 7 - failed);
    if failed > 0 && std::env::var("GSTRS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- AC1

const STEP: f64 = 1e-5;

type Probed<'a> = &'a dyn Fn(&[f64]) -> (f64, Vec<u64>);

/// Max relative error of central differences against `analytic`, skipping
/// coordinates whose ±step probes change the loss regime.
fn fd_error(f: Probed<'_>, x: &[f64], analytic: &[f64]) -> (f64, usize) {
    let base = f(x).1;
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut y = x.to_vec();
    for i in 0..x.len() {
        y[i] = x[i] + STEP;
        let (fp, rp) = f(&y);
        y[i] = x[i] - STEP;
        let (fm, rm) = f(&y);
        y[i] = x[i];
        if rp != base || rm != base {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    (worst, skipped)
}

fn regime(o: &LossOutput) -> (f64, Vec<u64>) {
    (o.value, o.regime.clone())
}

struct Instance {
    dim: usize,
    groups: Vec<usize>,
    n_neg: usize,
}

impl Instance {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let dim = rng.random_range(4..=16);
        let np = rng.random_range(3..=8);
        let g = rng.random_range(2..=4usize).min(np);
        let groups = (0..np)
            .map(|i| if i < g { i } else { rng.random_range(0..g) })
            .collect();
        Self {
            dim,
            groups,
            n_neg: rng.random_range(2..=6),
        }
    }

    fn n(&self) -> usize {
        self.groups.len() + self.n_neg
    }

    fn context(&self, x: &[f64]) -> TripletContext {
        let d = self.dim;
        let np = self.groups.len();
        let pos: Vec<(usize, Vec<f64>)> = (0..np)
            .map(|i| (self.groups[i], x[i * d..(i + 1) * d].to_vec()))
            .collect();
        let neg: Vec<Vec<f64>> = (np..self.n()).map(|i| x[i * d..(i + 1) * d].to_vec()).collect();
        TripletContext::from_vectors(&pos, &neg).unwrap()
    }
}

fn head_from(x: &[f64], d: usize, classes: usize) -> ClassifierHead {
    ClassifierHead {
        linear: Dense {
            weight: x[..classes * d].to_vec(),
            bias: x[classes * d..classes * d + classes].to_vec(),
            in_dim: d,
            out_dim: classes,
        },
    }
}

fn ac1_gradients() -> Outcome {
    let trials = 100;
    let mut rows = Vec::new();
    let mut all_ok = true;
    let mut record = |name: &str, errs: Vec<(f64, usize)>| {
        let worst = errs.iter().map(|e| e.0).fold(0.0, f64::max);
        let skipped: usize = errs.iter().map(|e| e.1).sum();
        all_ok &= worst < 1e-5;
        rows.push(format!(
            "{name:<26} max rel err {worst:.2e} ({skipped} kink coords skipped)"
        ));
    };

    let rng_for = |k: u64, t: u64| RngSeed(2024).derive(k).derive(t).rng();

    record(
        "triplet_loss",
        (0..trials)
            .map(|t| {
                let mut rng = rng_for(0, t);
                let d = rng.random_range(4..=16);
                let x = gaussian(&mut rng, 3 * d);
                let f = |x: &[f64]| regime(&triplet_loss(&x[..d], &x[d..2 * d], &x[2 * d..], 1.0).unwrap());
                let g = triplet_loss(&x[..d], &x[d..2 * d], &x[2 * d..], 1.0)
                    .unwrap()
                    .dense_grads(3, d);
                fd_error(&f, &x, &g)
            })
            .collect(),
    );
    record(
        "mean_valued_triplet_loss",
        (0..trials)
            .map(|t| {
                let mut rng = rng_for(1, t);
                let s = Instance::draw(&mut rng);
                let x = gaussian(&mut rng, s.n() * s.dim);
                let f = |x: &[f64]| regime(&mean_valued_triplet_loss(&s.context(x), 1.0).unwrap());
                let g = mean_valued_triplet_loss(&s.context(&x), 1.0)
                    .unwrap()
                    .dense_grads(s.n(), s.dim);
                fd_error(&f, &x, &g)
            })
            .collect(),
    );
    record(
        "icv_triplet_loss",
        (0..trials)
            .map(|t| {
                let mut rng = rng_for(2, t);
                let s = Instance::draw(&mut rng);
                let x = gaussian(&mut rng, s.n() * s.dim);
                let f = |x: &[f64]| regime(&icv_triplet_loss(&s.context(x), 1.0, 0.5).unwrap());
                let g = icv_triplet_loss(&s.context(&x), 1.0, 0.5)
                    .unwrap()
                    .dense_grads(s.n(), s.dim);
                fd_error(&f, &x, &g)
            })
            .collect(),
    );
    record(
        "softmax_cross_entropy",
        (0..trials)
            .map(|t| {
                let mut rng = rng_for(3, t);
                let d = rng.random_range(4..=16);
                let n = rng.random_range(3..=12);
                let c = rng.random_range(2..=5usize);
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
                let x = gaussian(&mut rng, n * d + c * d + c);
                let eval = |x: &[f64]| {
                    let emb = FeatureMatrix::new(x[..n * d].to_vec(), n, d).unwrap();
                    softmax_cross_entropy(&head_from(&x[n * d..], d, c), &emb, &labels).unwrap()
                };
                let out = eval(&x);
                let mut g = out.loss.dense_grads(n, d);
                g.extend(out.head_grads.weight.iter().chain(&out.head_grads.bias));
                fd_error(&|x: &[f64]| (eval(x).loss.value, Vec::new()), &x, &g)
            })
            .collect(),
    );
    record(
        "gs_trs_loss",
        (0..trials)
            .map(|t| {
                let mut rng = rng_for(4, t);
                let s = Instance::draw(&mut rng);
                let (n, d) = (s.n(), s.dim);
                let classes = 3;
                let mut labels = vec![0usize; s.groups.len()];
                labels.extend((0..s.n_neg).map(|j| 1 + j % 2));
                let mut groups = s.groups.clone();
                groups.extend((0..s.n_neg).map(|_| rng.random_range(0..2usize)));
                let cfg = LossConfig {
                    alpha: 1.0,
                    alpha1: 1.0,
                    alpha2: 0.5,
                    omega: rng.random_range(0.1..0.9),
                };
                let x = gaussian(&mut rng, n * d + classes * d + classes);
                let eval = |x: &[f64]| {
                    let emb = FeatureMatrix::new(x[..n * d].to_vec(), n, d).unwrap();
                    let ctxs: Vec<TripletContext> = (0..classes)
                        .map(|c| {
                            let pos: Vec<(usize, usize)> =
                                (0..n).filter(|&i| labels[i] == c).map(|i| (i, groups[i])).collect();
                            let neg: Vec<usize> = (0..n).filter(|&i| labels[i] != c).collect();
                            TripletContext::from_rows(c, &emb, &pos, &neg).unwrap()
                        })
                        .collect();
                    gs_trs_loss(&ctxs, &head_from(&x[n * d..], d, classes), &emb, &labels, &cfg).unwrap()
                };
                let out = eval(&x);
                let mut g = out.loss.dense_grads(n, d);
                g.extend(out.head_grads.weight.iter().chain(&out.head_grads.bias));
                fd_error(&|x: &[f64]| regime(&eval(x).loss), &x, &g)
            })
            .collect(),
    );
    record(
        "backprop_embedding",
        (0..trials)
            .map(|t| {
                let mut rng = rng_for(5, t);
                let d_in = rng.random_range(4..=16);
                let d_out = rng.random_range(2..=8);
                let hidden = (t % 2 == 1).then(|| rng.random_range(2..=8));
                let normalize = t % 4 < 2;
                let n = rng.random_range(2..=6);
                let model = EmbeddingModel::new_random(d_in, hidden, d_out, normalize, RngSeed(rng.random())).unwrap();
                let inputs = FeatureMatrix::new(gaussian(&mut rng, n * d_in), n, d_in).unwrap();
                let r = FeatureMatrix::new(gaussian(&mut rng, n * d_out), n, d_out).unwrap();
                let flat = |m: &EmbeddingModel| -> Vec<f64> {
                    let mut p = Vec::new();
                    if let Some(h) = &m.hidden {
                        p.extend(h.weight.iter().chain(&h.bias));
                    }
                    p.extend(m.output.weight.iter().chain(&m.output.bias));
                    p
                };
                let rebuild = |x: &[f64]| {
                    let mut m = model.clone();
                    let mut at = 0;
                    let mut fill = |v: &mut Vec<f64>| {
                        let k = v.len();
                        v.copy_from_slice(&x[at..at + k]);
                        at += k;
                    };
                    if let Some(h) = m.hidden.as_mut() {
                        fill(&mut h.weight);
                        fill(&mut h.bias);
                    }
                    fill(&mut m.output.weight);
                    fill(&mut m.output.bias);
                    m
                };
                let f = |x: &[f64]| {
                    let y = rebuild(x).embed(&inputs).unwrap();
                    (
                        y.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum(),
                        Vec::new(),
                    )
                };
                let g = backprop_embedding(&model, &inputs, &r).unwrap();
                let mut analytic = Vec::new();
                if let Some(h) = &g.hidden {
                    analytic.extend(h.weight.iter().chain(&h.bias));
                }
                analytic.extend(g.output.weight.iter().chain(&g.output.bias));
                fd_error(&f, &flat(&model), &analytic)
            })
            .collect(),
    );
    let mut out = Outcome::new(all_ok, format!("6 functions × {trials} instances, tolerance 1e-5"));
    out.notes = rows;
    out
}

// ---------------------------------------------------------------- AC2

fn ac2_closed_form() -> Outcome {
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();

    let t = triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[1.2, 0.0], 1.0).unwrap();
    checks.push(("triplet ½(1 + 1 − 1.44)", t.value, 0.28));

    let ctx = TripletContext::from_vectors(&[(0, vec![1.0, 0.0]), (0, vec![-1.0, 0.0])], &[vec![1.2, 0.0]]).unwrap();
    checks.push((
        "mean-valued, c = 0",
        mean_valued_triplet_loss(&ctx, 1.0).unwrap().value,
        0.56,
    ));

    let head = ClassifierHead {
        linear: Dense::zeros(3, 4),
    };
    let emb = FeatureMatrix::from_rows(&[[0.3, -0.2, 0.9]]).unwrap();
    checks.push((
        "softmax, 4 equal logits",
        softmax_cross_entropy(&head, &emb, &[1]).unwrap().loss.value,
        4f64.ln(),
    ));

    // two groups of two in 2-D, evaluated term by term
    let p = [[1.0, 0.0], [0.6, 0.4], [-0.4, 0.2], [0.0, -0.2]];
    let n = [[0.5, 0.1], [2.0, 2.0]];
    let ctx = TripletContext::from_vectors(
        &[
            (0, p[0].to_vec()),
            (0, p[1].to_vec()),
            (1, p[2].to_vec()),
            (1, p[3].to_vec()),
        ],
        &[n[0].to_vec(), n[1].to_vec()],
    )
    .unwrap();
    let sq = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let c = [0.3, 0.1];
    let hn = if sq(n[0], c) <= sq(n[1], c) { n[0] } else { n[1] };
    let mut expected = 0.0;
    for pi in p {
        expected += 0.5 * (sq(pi, c) + 1.0 - sq(hn, c)).max(0.0);
    }
    let c0 = [0.8, 0.2];
    let c1 = [-0.2, 0.0];
    let x0 = if sq(p[2], c0) <= sq(p[3], c0) { p[2] } else { p[3] };
    let x1 = if sq(p[0], c1) <= sq(p[1], c1) { p[0] } else { p[1] };
    for pi in &p[..2] {
        expected += 0.5 * (sq(*pi, c0) + 0.5 - sq(x0, c0)).max(0.0);
    }
    for pi in &p[2..] {
        expected += 0.5 * (sq(*pi, c1) + 0.5 - sq(x1, c1)).max(0.0);
    }
    checks.push((
        "ICV 2×2 groups",
        icv_triplet_loss(&ctx, 1.0, 0.5).unwrap().value,
        expected,
    ));

    let worst = checks.iter().map(|(_, a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut out = Outcome::new(
        worst <= 1e-10,
        format!("{} cases, max |error| {worst:.1e}", checks.len()),
    );
    out.notes = checks
        .iter()
        .map(|(name, got, want)| format!("{name:<26} {got:.15} (expected {want:.15})"))
        .collect();
    out
}

// ---------------------------------------------------------------- AC3

fn ac3_reductions() -> Outcome {
    let mut worst = [0.0f64; 4];
    for t in 0..50u64 {
        let mut rng = RngSeed(77).derive(t).rng();
        let s = Instance::draw(&mut rng);
        let (n, d) = (s.n(), s.dim);
        let x = gaussian(&mut rng, n * d);
        let emb = FeatureMatrix::new(x.clone(), n, d).unwrap();
        let ctx = s.context(&x);
        let mut labels = vec![0usize; s.groups.len()];
        labels.extend(vec![1usize; s.n_neg]);
        let head = ClassifierHead::new_random(d, 2, RngSeed(t)).unwrap();
        let cfg = |omega| LossConfig {
            omega,
            ..LossConfig::default()
        };
        let ctxs = std::slice::from_ref(&ctx);
        let soft = softmax_cross_entropy(&head, &emb, &labels).unwrap().loss;
        let icv = icv_triplet_loss(&ctx, 1.0, 0.3).unwrap();
        let one = gs_trs_loss(ctxs, &head, &emb, &labels, &cfg(1.0)).unwrap().loss;
        let zero = gs_trs_loss(ctxs, &head, &emb, &labels, &cfg(0.0)).unwrap().loss;
        worst[0] = worst[0].max(max_diff(&one, &soft, n, d));
        worst[1] = worst[1].max(max_diff(&zero, &icv, n, d));

        let single: Vec<(usize, Vec<f64>)> = (0..s.groups.len())
            .map(|i| (0, x[i * d..(i + 1) * d].to_vec()))
            .collect();
        let negs: Vec<Vec<f64>> = (s.groups.len()..n).map(|i| x[i * d..(i + 1) * d].to_vec()).collect();
        let g1 = TripletContext::from_vectors(&single, &negs).unwrap();
        worst[2] = worst[2].max(max_diff(
            &icv_triplet_loss(&g1, 1.0, 0.3).unwrap(),
            &mean_valued_triplet_loss(&g1, 1.0).unwrap(),
            n,
            d,
        ));

        let p = &x[..d];
        let neg = &x[d..2 * d];
        let one_pos = TripletContext::from_vectors(&[(0, p.to_vec())], &[neg.to_vec()])
            .unwrap()
            .with_frozen_centers(true);
        let mv = mean_valued_triplet_loss(&one_pos, 1.0).unwrap();
        let tr = triplet_loss(p, p, neg, 1.0).unwrap();
        let mut diff = (mv.value - tr.value).abs();
        if let (Some(a), Some(b)) = (mv.grad(0), tr.grad(1)) {
            diff = diff.max(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
        worst[3] = worst[3].max(diff);
    }
    let names = ["ω=1 ⇒ softmax", "ω=0 ⇒ ICV", "G=1 ⇒ mean-valued", "N^p=1 ⇒ triplet"];
    let pass = worst.iter().all(|&w| w <= 1e-12);
    let mut out = Outcome::new(pass, "50 random instances each, tolerance 1e-12");
    out.notes = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n:<20} max |Δ| {w:.1e}"))
        .collect();
    out
}

fn max_diff(a: &LossOutput, b: &LossOutput, n: usize, d: usize) -> f64 {
    let ga = a.dense_grads(n, d);
    let gb = b.dense_grads(n, d);
    ga.iter()
        .zip(&gb)
        .map(|(x, y)| (x - y).abs())
        .fold((a.value - b.value).abs(), f64::max)
}

// ---------------------------------------------------------------- AC4

fn ac4_invariances() -> Outcome {
    let mut failures = Vec::new();
    let mut notes = Vec::new();

    // translation and orthogonal maps of every point leave distance losses unchanged
    let mut worst_t: f64 = 0.0;
    let mut worst_q: f64 = 0.0;
    for t in 0..100u64 {
        let mut rng = RngSeed(404).derive(t).rng();
        let s = Instance::draw(&mut rng);
        let (n, d) = (s.n(), s.dim);
        let x = gaussian(&mut rng, n * d);
        let shift = gaussian(&mut rng, d);
        let q = random_orthogonal(&mut rng, d);
        let moved: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + 3.0 * shift[i % d]).collect();
        let mut rotated = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            rotated.extend((0..d).map(|r| (0..d).map(|c| q[r * d + c] * row[c]).sum::<f64>()));
        }
        let losses = |x: &[f64]| {
            let ctx = s.context(x);
            [
                triplet_loss(&x[..d], &x[d..2 * d], &x[2 * d..3 * d], 1.0)
                    .unwrap()
                    .value,
                mean_valued_triplet_loss(&ctx, 1.0).unwrap().value,
                icv_triplet_loss(&ctx, 1.0, 0.3).unwrap().value,
            ]
        };
        let base = losses(&x);
        for (a, b) in base.iter().zip(losses(&moved)) {
            worst_t = worst_t.max((a - b).abs() / a.abs().max(1.0));
        }
        for (a, b) in base.iter().zip(losses(&rotated)) {
            worst_q = worst_q.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    notes.push(format!(
        "translation: max rel Δ {worst_t:.1e}; orthogonal: max rel Δ {worst_q:.1e}"
    ));
    if worst_t > 1e-9 || worst_q > 1e-9 {
        failures.push("distance-loss invariance");
    }

    // permutation of positives leaves the mean anchor unchanged
    let mut worst_p: f64 = 0.0;
    for t in 0..100u64 {
        let mut rng = RngSeed(405).derive(t).rng();
        let np = rng.random_range(1..=12);
        let d = rng.random_range(2..=16);
        let rows: Vec<Vec<f64>> = (0..np).map(|_| gaussian(&mut rng, d)).collect();
        let mut perm = rows.clone();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let a = mean_anchor(&rows).unwrap();
        let b = mean_anchor(&perm).unwrap();
        worst_p = worst_p.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    notes.push(format!("mean anchor permutation: max |Δ| {worst_p:.1e}"));
    if worst_p > 1e-12 {
        failures.push("mean anchor permutation");
    }

    // positive scaling of all embeddings leaves every metric unchanged
    let mut scale_ok = true;
    let mut cmc_ok = true;
    for t in 0..20u64 {
        let mut rng = RngSeed(406).derive(t).rng();
        let (nq, ng, d, c) = (15, 60, 8, 5);
        let qf = gaussian(&mut rng, nq * d);
        let gf = gaussian(&mut rng, ng * d);
        let ql: Vec<usize> = (0..nq).map(|i| i % c).collect();
        let gl: Vec<usize> = (0..ng).map(|i| i % c).collect();
        let qi: Vec<u64> = (1000..1000 + nq as u64).collect();
        let gi: Vec<u64> = (0..ng as u64).collect();
        let report = |scale: f64| -> EvalReport {
            let q = FeatureMatrix::new(qf.iter().map(|v| v * scale).collect(), nq, d).unwrap();
            let g = FeatureMatrix::new(gf.iter().map(|v| v * scale).collect(), ng, d).unwrap();
            evaluate(
                LabeledSet {
                    features: &q,
                    ids: &qi,
                    labels: &ql,
                },
                LabeledSet {
                    features: &g,
                    ids: &gi,
                    labels: &gl,
                },
                &EvalOptions {
                    topk: vec![1, 5, 10],
                    exclude_identical_id: false,
                },
            )
            .unwrap()
        };
        let base = report(1.0);
        for s in [0.5, 2.0, 37.0] {
            scale_ok &= report(s) == base;
        }
        cmc_ok &= base.cmc.windows(2).all(|w| w[0] <= w[1]) && (base.cmc[ng - 1] - 1.0).abs() < 1e-15;
    }
    notes.push(format!(
        "scale invariance of metrics: {scale_ok}; CMC monotone and reaching 1: {cmc_ok}"
    ));
    if !scale_ok {
        failures.push("scale invariance");
    }
    if !cmc_ok {
        failures.push("CMC monotonicity");
    }

    // AP against brute-force prefix precision on every relevance pattern up to size 8
    let mut patterns = 0;
    let mut worst_ap: f64 = 0.0;
    for n in 1..=8usize {
        for mask in 1u32..(1 << n) {
            let rel: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let brute = {
                let r = rel.iter().filter(|&&b| b).count() as f64;
                let mut s = 0.0;
                let mut prev_recall = 0.0;
                for k in 1..=n {
                    let hits = rel[..k].iter().filter(|&&b| b).count() as f64;
                    let recall = hits / r;
                    s += (hits / k as f64) * (recall - prev_recall);
                    prev_recall = recall;
                }
                s
            };
            let ap = average_precision(&RankedResult::from_relevance(rel.clone())).unwrap();
            worst_ap = worst_ap.max((ap - brute).abs());
            patterns += 1;
            let cmc = cmc_curve(&[RankedResult::from_relevance(rel)], n).unwrap();
            if !cmc.windows(2).all(|w| w[0] <= w[1]) || cmc[n - 1] != 1.0 {
                cmc_ok = false;
            }
        }
    }
    notes.push(format!(
        "AP vs brute force on {patterns} patterns: max |Δ| {worst_ap:.1e}"
    ));
    if worst_ap > 1e-12 || !cmc_ok {
        failures.push("AP brute force");
    }

    let mut out = if failures.is_empty() {
        Outcome::new(true, "all invariances hold")
    } else {
        Outcome::new(false, format!("violated: {}", failures.join(", ")))
    };
    out.notes = notes;
    out
}

// ---------------------------------------------------------------- AC5

fn ac5_kmeans() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut rng = RngSeed(55).rng();
    let n = 40;
    let pts: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let c = if i < 20 { [-3.0, 0.0] } else { [3.0, 1.0] };
            let e = gaussian(&mut rng, 2);
            [c[0] + 1.5 * e[0], c[1] + 1.5 * e[1]]
        })
        .collect();
    let (oracle, partitions) = common::best_two_partition(&pts);
    let features = FeatureMatrix::from_rows(&pts).unwrap();
    let manifest = common::single_class_manifest(n);
    let mut worst_gap: f64 = 0.0;
    for seed in 0..10 {
        let model = kmeans_per_class(
            &features,
            &manifest,
            &KMeansConfig {
                groups: 2,
                max_iters: 100,
                restarts: 5,
                seed: RngSeed(seed),
            },
        )
        .unwrap();
        let obj = model.class_groups(0).unwrap().objective;
        worst_gap = worst_gap.max(obj - oracle);
    }
    notes.push(format!(
        "oracle optimum {oracle:.9} over {partitions} separable partitions; worst k-means gap {worst_gap:.1e}"
    ));
    ok &= worst_gap <= 1e-9;

    let mut runs = 0;
    let mut violations = 0;
    for seed in 0..200u64 {
        let mut rng = RngSeed(56).derive(seed).rng();
        let n = rng.random_range(10..80);
        let d = rng.random_range(1..6);
        let k = rng.random_range(1..8usize).min(n);
        let data: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut rng, d)).collect();
        let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let run = lloyd(&refs, k, 100, &mut RngSeed(seed).rng());
        runs += 1;
        violations += run
            .history
            .windows(2)
            .filter(|w| w[1] > w[0] * (1.0 + 1e-12) + 1e-12)
            .count();
    }
    notes.push(format!("{runs} Lloyd runs, {violations} objective increases"));
    ok &= violations == 0;

    let mut out = Outcome::new(ok, "global optimum recovered and objective monotone");
    out.notes = notes;
    out
}

// ---------------------------------------------------------------- AC6

struct Split {
    features: FeatureMatrix,
    manifest: DatasetManifest,
}

fn ac6_split(seed: u64) -> Split {
    let (features, m) = generate_synthetic(&SynthSpec {
        n_classes: 10,
        groups_per_class: 3,
        samples_per_group: 20,
        raw_dim: 32,
        class_separation: 8.0,
        group_separation: 4.0,
        noise_sigma: 1.0,
        seed: RngSeed(seed),
    })
    .unwrap();
    let m = split_train(&m, 0.5, RngSeed(seed).derive(1)).unwrap();
    let manifest = split_roles(&m, 0.3, RngSeed(seed).derive(2)).unwrap();
    Split { features, manifest }
}

/// `(mAP on held-out queries, accuracy on held-out rows)`.
fn held_out_metrics(ckpt: &Checkpoint, split: &Split) -> (f64, f64) {
    let m = &split.manifest;
    let emb = ckpt.model.embed(&split.features).unwrap();
    let q = m.rows_with_role(Role::Query);
    let g = m.rows_with_role(Role::Gallery);
    let ids: Vec<u64> = m.rows().iter().map(|r| r.sample_id).collect();
    let labels: Vec<usize> = (0..m.len()).map(|i| m.class_of(i)).collect();
    let take = |rows: &[usize]| {
        (
            emb.select_rows(rows).unwrap(),
            rows.iter().map(|&i| ids[i]).collect::<Vec<_>>(),
            rows.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        )
    };
    let (qf, qi, ql) = take(&q);
    let (gf, gi, gl) = take(&g);
    let report = evaluate(
        LabeledSet {
            features: &qf,
            ids: &qi,
            labels: &ql,
        },
        LabeledSet {
            features: &gf,
            ids: &gi,
            labels: &gl,
        },
        &EvalOptions {
            topk: vec![1],
            exclude_identical_id: false,
        },
    )
    .unwrap();
    // class names of the checkpoint follow the training rows, which cover every class
    let rows: Vec<usize> = q.iter().chain(&g).copied().collect();
    let correct = rows
        .iter()
        .filter(|&&i| ckpt.head.predict(emb.row(i)) == labels[i])
        .count();
    (report.map, correct as f64 / rows.len() as f64)
}

fn ac6_end_to_end() -> Outcome {
    let seeds = 5u64;
    let modes = [
        LossMode::GstrsWMean,
        LossMode::GstrsWoMean,
        LossMode::TripletSoftmax,
        LossMode::Softmax,
    ];
    let mut map = [0.0f64; 4];
    let mut acc = [0.0f64; 4];
    let mut untrained = 0.0;
    let mut per_seed_a = true;
    let mut loss_drops = true;
    let mut notes = Vec::new();
    let splits: Vec<Split> = (0..seeds).map(ac6_split).collect();
    for (s, split) in splits.iter().enumerate() {
        let mut line = format!("seed {s}:");
        for (k, mode) in modes.iter().enumerate() {
            let cfg = TrainConfig {
                mode: *mode,
                seed: RngSeed(100 + s as u64),
                ..TrainConfig::default()
            };
            let out = train(&cfg, &split.features, &split.manifest).unwrap();
            if k == 0 {
                let (u, _) = held_out_metrics(&out.initial, split);
                untrained += u;
                line.push_str(&format!(" untrained {u:.4}"));
                let (first, last) = (out.log[0].total, out.log.last().unwrap().total);
                loss_drops &= last < first;
            }
            let (m, a) = held_out_metrics(&out.checkpoint, split);
            if k == 0 {
                let (u, _) = held_out_metrics(&out.initial, split);
                per_seed_a &= m >= 0.90 && m >= u + 0.15;
            }
            map[k] += m;
            acc[k] += a;
            line.push_str(&format!(" {mode} {m:.4}/{a:.4}"));
        }
        notes.push(line);
    }
    let n = seeds as f64;
    map.iter_mut().for_each(|v| *v /= n);
    acc.iter_mut().for_each(|v| *v /= n);
    untrained /= n;

    let a = per_seed_a && map[0] >= 0.90 && map[0] >= untrained + 0.15;
    let b = map[0] >= map[1] - 0.01 && map[1] >= map[2] - 0.01;
    let c = acc[0] >= acc[3] - 0.01;
    notes.push(format!(
        "mean mAP: W/ mean {:.4}  W/O mean {:.4}  triplet+softmax {:.4}  softmax {:.4}  untrained {:.4}",
        map[0], map[1], map[2], map[3], untrained
    ));
    notes.push(format!(
        "mean accuracy: W/ mean {:.4}  W/O mean {:.4}  triplet+softmax {:.4}  softmax {:.4}",
        acc[0], acc[1], acc[2], acc[3]
    ));
    notes.push(format!(
        "(a) {}  (b) {}  (c) {}  L_total falls over training: {loss_drops}",
        verdict(a),
        verdict(b),
        verdict(c)
    ));

    // inter-group margin sweep for the two group-sensitive modes
    for alpha2 in [0.0, 0.1, 0.3, 0.6] {
        let mut m2 = [0.0; 2];
        for (s, split) in splits.iter().enumerate() {
            for (k, mode) in [LossMode::GstrsWMean, LossMode::GstrsWoMean].iter().enumerate() {
                let mut cfg = TrainConfig {
                    mode: *mode,
                    seed: RngSeed(100 + s as u64),
                    ..TrainConfig::default()
                };
                cfg.loss.alpha2 = alpha2;
                let out = train(&cfg, &split.features, &split.manifest).unwrap();
                m2[k] += held_out_metrics(&out.checkpoint, split).0 / n;
            }
        }
        notes.push(format!(
            "sweep alpha2 = {alpha2:.1}: W/ mean {:.4}  W/O mean {:.4}",
            m2[0], m2[1]
        ));
    }

    let mut out = Outcome::new(
        a && b && c && loss_drops,
        format!("5 seeds, (a) {} (b) {} (c) {}", verdict(a), verdict(b), verdict(c)),
    );
    out.notes = notes;
    out
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

// ---------------------------------------------------------------- AC7

fn gstrs(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gstrs"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run gstrs binary")
}

fn ac7_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let synth = gstrs(
        &[
            "synth",
            "--seed",
            "7",
            "--train-fraction",
            "0.5",
            "--query-fraction",
            "0.3",
            "--out",
            "data",
        ],
        root,
    );
    if !synth.status.success() {
        return Outcome::new(
            false,
            format!("synth failed: {}", String::from_utf8_lossy(&synth.stderr)),
        );
    }
    for run in ["a", "b"] {
        let cfg = format!(
            "features = data/features.bin\nmanifest = data/manifest.csv\ncheckpoint = {run}.ckpt\nlog = {run}.csv\nseed = 3\n"
        );
        std::fs::write(root.join(format!("{run}.cfg")), cfg).unwrap();
        let out = gstrs(&["train", "--config", &format!("{run}.cfg")], root);
        if !out.status.success() {
            return Outcome::new(false, format!("train failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    let read = |f: &str| std::fs::read(root.join(f)).unwrap();
    let same_ckpt = read("a.ckpt") == read("b.ckpt");
    let same_log = read("a.csv") == read("b.csv");
    Outcome::new(
        same_ckpt && same_log,
        format!(
            "checkpoint identical: {same_ckpt} ({} bytes), log identical: {same_log}",
            read("a.ckpt").len()
        ),
    )
}
