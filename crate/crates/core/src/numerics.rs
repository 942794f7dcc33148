//! Dense vector and matrix primitives shared by every other module.
//!
//! Everything computes in `f64`. Feature files store `f32` and are widened
//! on load (see [`crate::data_io`]).

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major `n_samples × dim` matrix of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n_samples: usize,
    dim: usize,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, n_samples: usize, dim: usize) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Empty("matrix"));
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if data.len() != n_samples * dim {
            return Err(Error::DimensionMismatch {
                expected: n_samples * dim,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature matrix at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { data, n_samples, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("matrix"))?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(data, rows.len(), dim)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.n_samples {
                return Err(Error::invalid(format!(
                    "row {i} out of range for {} samples",
                    self.n_samples
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(data, indices.len(), self.dim)
    }
}

/// Seed for every stochastic step (initialization, clustering, sampling).
///
/// All generators are ChaCha8 so streams are identical across platforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed for a named sub-stream.
    pub fn derive(self, stream: u64) -> RngSeed {
        RngSeed(splitmix64(
            self.0 ^ splitmix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D)),
        ))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `Σ_d (x_d − y_d)²`.
pub fn squared_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    check_same_dim(x, y)?;
    Ok(sq_dist(x, y))
}

pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub(crate) fn check_same_dim(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(())
}

/// Scale `x` to unit Euclidean norm. A zero vector is an error, never NaN.
pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm { sample: None });
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Arithmetic mean of a non-empty set of equal-length vectors, summed in
/// the order given.
pub fn mean_of<R: AsRef<[f64]>>(rows: &[R]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or(Error::Empty("vector set"))?.as_ref();
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        let r = r.as_ref();
        check_same_dim(&acc, r)?;
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Principal axes of a feature set, ordered by descending variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `dim`.
    pub components: Vec<Vec<f64>>,
    /// Sample variance (n − 1 denominator) along each component.
    pub explained_variance: Vec<f64>,
    /// Number of trailing components that carry no variance and were
    /// filled in by a seeded orthonormal completion.
    pub completed: usize,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

const RANK_TOL: f64 = 1e-10;

/// Fit the top-`k` principal components via an exact eigen-decomposition of
/// the `dim × dim` sample covariance.
///
/// Each component's sign is fixed so that its largest-magnitude entry is
/// positive. Directions with (numerically) zero variance are replaced by a
/// Gram-Schmidt completion of seeded Gaussian vectors, and counted in
/// [`PcaModel::completed`].
pub fn pca_fit(features: &FeatureMatrix, k: usize, seed: RngSeed) -> Result<PcaModel> {
    let (n, dim) = (features.n_samples(), features.dim());
    if k == 0 || k > dim {
        return Err(Error::invalid(format!("PCA target dimension {k} must be in 1..={dim}")));
    }
    if n < 2 {
        return Err(Error::invalid("PCA needs at least 2 samples"));
    }
    let mean = mean_of(&features.rows().collect::<Vec<_>>())?;

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for row in features.rows() {
        for (c, (x, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let cutoff = RANK_TOL * top.max(f64::MIN_POSITIVE);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    let mut completed = 0;
    let mut rng = seed.rng();
    for &idx in order.iter().take(k) {
        let lambda = eig.eigenvalues[idx];
        let mut v: Vec<f64> = if lambda > cutoff {
            eig.eigenvectors.column(idx).iter().copied().collect()
        } else {
            completed += 1;
            orthonormal_completion(&components, dim, &mut rng)
        };
        fix_sign(&mut v);
        let var = if lambda > cutoff {
            lambda
        } else {
            quadratic_form(&cov, &v).max(0.0)
        };
        components.push(v);
        explained_variance.push(var);
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        completed,
    })
}

/// Project rows onto the model's components: `row_i ↦ components · (row_i − mean)`.
pub fn pca_transform(model: &PcaModel, features: &FeatureMatrix) -> Result<FeatureMatrix> {
    if features.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: features.dim(),
        });
    }
    let k = model.k();
    let mut out = Vec::with_capacity(features.n_samples() * k);
    let mut centered = vec![0.0; model.dim()];
    for row in features.rows() {
        for (c, (x, m)) in centered.iter_mut().zip(row.iter().zip(&model.mean)) {
            *c = x - m;
        }
        out.extend(model.components.iter().map(|comp| dot(comp, &centered)));
    }
    FeatureMatrix::new(out, features.n_samples(), k)
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn quadratic_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let dim = v.len();
    let mut acc = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            acc += v[i] * m[(i, j)] * v[j];
        }
    }
    acc
}

fn orthonormal_completion(basis: &[Vec<f64>], dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        // two passes of classical Gram-Schmidt for numerical orthogonality
        for _ in 0..2 {
            for b in basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}
