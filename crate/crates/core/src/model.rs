//! Trainable embedding `f(x)` and linear softmax head.
//!
//! The embedding is an affine map, optionally preceded by one `tanh` hidden
//! layer, optionally followed by L2 normalization. Gradients are assembled
//! by hand; [`backprop_embedding`] is the exact chain rule through every
//! stage.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, FeatureMatrix, RngSeed};
use crate::sampling::BatchSpec;

/// Fully connected layer, `out_dim × in_dim` row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    /// Uniform in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight,
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn weight_row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.out_dim).map(|o| dot(self.weight_row(o), x) + self.bias[o]));
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseGrads {
    fn zeros_like(layer: &Dense) -> Self {
        Self {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub hidden: Option<Dense>,
    pub output: Dense,
    /// L2-normalize the outputs of [`EmbeddingModel::embed`].
    pub normalize: bool,
}

impl EmbeddingModel {
    pub fn new_random(
        d_in: usize,
        d_hidden: Option<usize>,
        d_out: usize,
        normalize: bool,
        seed: RngSeed,
    ) -> Result<Self> {
        if d_in == 0 || d_out < 2 || d_hidden == Some(0) {
            return Err(Error::invalid(
                "embedding needs d_in ≥ 1, d_out ≥ 2 and a non-empty hidden layer",
            ));
        }
        let mut rng = seed.rng();
        let hidden = d_hidden.map(|h| Dense::glorot(d_in, h, &mut rng));
        let output = Dense::glorot(d_hidden.unwrap_or(d_in), d_out, &mut rng);
        Ok(Self {
            hidden,
            output,
            normalize,
        })
    }

    pub fn identity(dim: usize, normalize: bool) -> Self {
        let mut output = Dense::zeros(dim, dim);
        for i in 0..dim {
            output.weight[i * dim + i] = 1.0;
        }
        Self {
            hidden: None,
            output,
            normalize,
        }
    }

    pub fn d_in(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).in_dim
    }

    pub fn d_out(&self) -> usize {
        self.output.out_dim
    }

    /// Embed every row, normalizing when [`EmbeddingModel::normalize`] is set.
    pub fn embed(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        Ok(self.forward(features, self.normalize)?.output)
    }

    /// Forward pass keeping the intermediates needed by [`EmbeddingModel::backward`].
    pub fn forward(&self, features: &FeatureMatrix, normalize: bool) -> Result<ForwardCache> {
        if features.dim() != self.d_in() {
            return Err(Error::DimensionMismatch {
                expected: self.d_in(),
                found: features.dim(),
            });
        }
        let n = features.n_samples();
        let d_out = self.d_out();
        let mut hidden_acts = Vec::new();
        let mut pre = Vec::with_capacity(n * d_out);
        let mut out = Vec::with_capacity(n * d_out);
        let mut norms = Vec::with_capacity(if normalize { n } else { 0 });
        let mut h = Vec::new();
        let mut z = Vec::new();
        for (i, x) in features.rows().enumerate() {
            let input = match &self.hidden {
                Some(layer) => {
                    layer.apply(x, &mut h);
                    h.iter_mut().for_each(|v| *v = v.tanh());
                    hidden_acts.extend_from_slice(&h);
                    h.as_slice()
                }
                None => x,
            };
            self.output.apply(input, &mut z);
            pre.extend_from_slice(&z);
            if normalize {
                let r = dot(&z, &z).sqrt();
                if r == 0.0 || !r.is_finite() {
                    return Err(Error::ZeroNorm { sample: Some(i) });
                }
                norms.push(r);
                out.extend(z.iter().map(|v| v / r));
            } else {
                out.extend_from_slice(&z);
            }
        }
        Ok(ForwardCache {
            hidden: hidden_acts,
            pre,
            norms,
            output: FeatureMatrix::new(out, n, d_out)?,
            normalized: normalize,
        })
    }

    /// Parameter gradients of a scalar whose gradient with respect to the
    /// forward outputs is `grad_out`.
    pub fn backward(
        &self,
        inputs: &FeatureMatrix,
        cache: &ForwardCache,
        grad_out: &FeatureMatrix,
    ) -> Result<EmbeddingGrads> {
        let n = inputs.n_samples();
        let d_out = self.d_out();
        if grad_out.n_samples() != n || grad_out.dim() != d_out {
            return Err(Error::invalid(format!(
                "gradient shape {}×{} does not match outputs {n}×{d_out}",
                grad_out.n_samples(),
                grad_out.dim()
            )));
        }
        if inputs.dim() != self.d_in() || cache.output.n_samples() != n {
            return Err(Error::invalid("inputs do not match the forward cache"));
        }
        let mut g_out = DenseGrads::zeros_like(&self.output);
        let mut g_hidden = self.hidden.as_ref().map(DenseGrads::zeros_like);
        let mut dz = vec![0.0; d_out];
        for i in 0..n {
            let g = grad_out.row(i);
            if cache.normalized {
                // y = z / r  ⇒  dz = (g − y (y·g)) / r
                let y = cache.output.row(i);
                let r = cache.norms[i];
                let yg = dot(y, g);
                for d in 0..d_out {
                    dz[d] = (g[d] - y[d] * yg) / r;
                }
            } else {
                dz.copy_from_slice(g);
            }
            let layer_in: &[f64] = match &self.hidden {
                Some(h) => &cache.hidden[i * h.out_dim..(i + 1) * h.out_dim],
                None => inputs.row(i),
            };
            accumulate_dense(&mut g_out, &dz, layer_in);
            if let (Some(layer), Some(gh)) = (&self.hidden, g_hidden.as_mut()) {
                let mut dh = vec![0.0; layer.out_dim];
                for (o, &d) in dz.iter().enumerate() {
                    let row = self.output.weight_row(o);
                    dh.iter_mut().zip(row).for_each(|(a, w)| *a += d * w);
                }
                for (k, a) in dh.iter_mut().enumerate() {
                    *a *= 1.0 - layer_in[k] * layer_in[k];
                }
                accumulate_dense(gh, &dh, inputs.row(i));
            }
        }
        Ok(EmbeddingGrads {
            hidden: g_hidden,
            output: g_out,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.output.is_finite() && self.hidden.as_ref().is_none_or(Dense::is_finite)
    }
}

fn accumulate_dense(g: &mut DenseGrads, delta: &[f64], input: &[f64]) {
    let in_dim = input.len();
    for (o, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        g.bias[o] += d;
        let row = &mut g.weight[o * in_dim..(o + 1) * in_dim];
        row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: Vec<f64>,
    pre: Vec<f64>,
    norms: Vec<f64>,
    pub output: FeatureMatrix,
    normalized: bool,
}

impl ForwardCache {
    /// Outputs before normalization (row-major).
    pub fn pre_normalization(&self) -> &[f64] {
        &self.pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub hidden: Option<DenseGrads>,
    pub output: DenseGrads,
}

/// `(dW, db)` for every layer given the gradient with respect to the
/// embedded outputs, normalizing per [`EmbeddingModel::normalize`].
pub fn backprop_embedding(
    model: &EmbeddingModel,
    inputs: &FeatureMatrix,
    grad_wrt_outputs: &FeatureMatrix,
) -> Result<EmbeddingGrads> {
    let cache = model.forward(inputs, model.normalize)?;
    model.backward(inputs, &cache, grad_wrt_outputs)
}

/// Linear softmax classifier `logits = V·f + c0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub linear: Dense,
}

impl ClassifierHead {
    pub fn new_random(d_in: usize, n_classes: usize, seed: RngSeed) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid("classifier needs at least 2 classes"));
        }
        Ok(Self {
            linear: Dense::glorot(d_in, n_classes, &mut seed.rng()),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.linear.out_dim
    }

    pub fn d_in(&self) -> usize {
        self.linear.in_dim
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_classes());
        self.linear.apply(f, &mut out);
        out
    }

    /// Argmax of the logits, lowest index on ties.
    pub fn predict(&self, f: &[f64]) -> usize {
        let logits = self.logits(f);
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: BatchSpec,
    pub weight_seed: RngSeed,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 50,
            batch: BatchSpec::default(),
            weight_seed: RngSeed(0),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

/// A named parameter slice and its gradient.
pub struct ParamBlock<'a> {
    pub name: &'static str,
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
}

/// Velocity buffers, one per parameter block in call order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

/// Classic momentum: `v ← m·v − lr·g; p ← p + v`.
///
/// Every gradient is checked before anything is updated, so a non-finite
/// block leaves all parameters untouched.
pub fn sgd_step(blocks: &mut [ParamBlock<'_>], config: &SgdConfig, state: &mut SgdState) -> Result<()> {
    for b in blocks.iter() {
        if b.values.len() != b.grads.len() {
            return Err(Error::invalid(format!("gradient shape mismatch in `{}`", b.name)));
        }
        if b.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(b.name.to_string()));
        }
    }
    if state.velocity.len() != blocks.len() {
        state.velocity = blocks.iter().map(|b| vec![0.0; b.values.len()]).collect();
    }
    let (lr, m) = (config.learning_rate, config.momentum);
    for (b, v) in blocks.iter_mut().zip(&mut state.velocity) {
        for ((p, g), vel) in b.values.iter_mut().zip(b.grads).zip(v.iter_mut()) {
            *vel = m * *vel - lr * g;
            *p += *vel;
        }
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GSTRSMDL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained model, classifier head and the class labels behind the head's
/// output indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EmbeddingModel,
    pub head: ClassifierHead,
    pub class_names: Vec<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let flags = u32::from(self.model.normalize) | (u32::from(self.model.hidden.is_some()) << 1);
        buf.extend_from_slice(&flags.to_le_bytes());
        let d_hidden = self.model.hidden.as_ref().map_or(0, |h| h.out_dim);
        for d in [self.model.d_in(), d_hidden, self.model.d_out(), self.head.n_classes()] {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let mut put = |xs: &[f64]| xs.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        if let Some(h) = &self.model.hidden {
            put(&h.weight);
            put(&h.bias);
        }
        put(&self.model.output.weight);
        put(&self.model.output.bias);
        put(&self.head.linear.weight);
        put(&self.head.linear.bias);
        for name in &self.class_names {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, (u64, String)> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err((0, "bad magic, expected GSTRSMDL".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err((8, format!("unsupported version {version}")));
        }
        let flags = r.u32()?;
        let d_in = r.u64()? as usize;
        let d_hidden = r.u64()? as usize;
        let d_out = r.u64()? as usize;
        let n_classes = r.u64()? as usize;
        let has_hidden = flags & 2 != 0;
        if has_hidden != (d_hidden > 0) || d_in == 0 || d_out < 2 || n_classes < 2 {
            return Err((16, "inconsistent dimensions".into()));
        }
        let hidden = if has_hidden {
            Some(Dense {
                weight: r.f64s(d_hidden * d_in)?,
                bias: r.f64s(d_hidden)?,
                in_dim: d_in,
                out_dim: d_hidden,
            })
        } else {
            None
        };
        let out_in = if has_hidden { d_hidden } else { d_in };
        let output = Dense {
            weight: r.f64s(d_out * out_in)?,
            bias: r.f64s(d_out)?,
            in_dim: out_in,
            out_dim: d_out,
        };
        let head = ClassifierHead {
            linear: Dense {
                weight: r.f64s(n_classes * d_out)?,
                bias: r.f64s(n_classes)?,
                in_dim: d_out,
                out_dim: n_classes,
            },
        };
        let mut class_names = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let len = r.u32()? as usize;
            let at = r.pos as u64;
            let s = std::str::from_utf8(r.take(len)?).map_err(|_| (at, "invalid UTF-8 label".to_string()))?;
            class_names.push(s.to_string());
        }
        if r.pos != bytes.len() {
            return Err((r.pos as u64, "trailing bytes".into()));
        }
        Ok(Self {
            model: EmbeddingModel {
                hidden,
                output,
                normalize: flags & 1 != 0,
            },
            head,
            class_names,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|(offset, message)| Error::Format {
            path: path.to_path_buf(),
            offset,
            message,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], (u64, String)> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or((
            self.bytes.len() as u64,
            format!(
                "expected {} bytes, found {}",
                self.pos.saturating_add(n),
                self.bytes.len()
            ),
        ))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, (u64, String)> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, (u64, String)> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, (u64, String)> {
        let at = self.pos as u64;
        let raw = self.take(n.checked_mul(8).ok_or((at, "size overflow".to_string()))?)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err((at, "non-finite parameter".into()));
        }
        Ok(vals)
    }
}
