#![allow(dead_code)]

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use gstrs::data_io::{DatasetManifest, ManifestRow};

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Row-major `d × d` orthogonal matrix from the QR factors of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(d, d, &gaussian(rng, d * d));
    let q = m.qr().q();
    (0..d)
        .flat_map(|r| (0..d).map(move |c| (r, c)))
        .map(|(r, c)| q[(r, c)])
        .collect()
}

pub fn single_class_manifest(n: usize) -> DatasetManifest {
    DatasetManifest::new(
        (0..n)
            .map(|i| ManifestRow {
                sample_id: i as u64,
                class: "a".into(),
                group: None,
                role: None,
            })
            .collect(),
    )
    .unwrap()
}

fn sse(points: &[[f64; 2]], side: &[bool]) -> Option<f64> {
    let mut total = 0.0;
    for s in [false, true] {
        let members: Vec<&[f64; 2]> = points
            .iter()
            .zip(side)
            .filter(|(_, &b)| b == s)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            return None;
        }
        let n = members.len() as f64;
        let cx = members.iter().map(|p| p[0]).sum::<f64>() / n;
        let cy = members.iter().map(|p| p[1]).sum::<f64>() / n;
        total += members
            .iter()
            .map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2))
            .sum::<f64>();
    }
    Some(total)
}

/// Minimum two-cluster sum of squares over every partition of the plane
/// point set by a line through two of its points (both endpoints placed on
/// either side). An optimal two-means partition is linearly separable, so
/// for points in general position this enumeration contains it.
pub fn best_two_partition(points: &[[f64; 2]]) -> (f64, usize) {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (points[i], points[j]);
            let base: Vec<bool> = points
                .iter()
                .map(|p| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) > 0.0)
                .collect();
            for (si, sj) in [(false, false), (false, true), (true, false), (true, true)] {
                let mut side = base.clone();
                side[i] = si;
                side[j] = sj;
                if let Some(v) = sse(points, &side) {
                    count += 1;
                    best = best.min(v);
                }
            }
        }
    }
    (best, count)
}

/// Cyclic Jacobi eigenvalues of a symmetric row-major matrix, descending.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Adjusted Rand index of two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}
