//! Mini-batch training of the embedding and classifier head.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data_io::{DatasetManifest, Role};
use crate::error::{Error, Result};
use crate::grouping::{cluster, GroupModel, GroupingConfig};
use crate::losses::{joint_loss, LossBreakdown, LossConfig, TripletTerm};
use crate::model::{sgd_step, Checkpoint, ClassifierHead, EmbeddingModel, ParamBlock, SgdConfig, SgdState};
use crate::numerics::{FeatureMatrix, RngSeed};
use crate::sampling::{build_contexts, AnchorMode, Batch, Sampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Triplet loss around a sampled anchor.
    Triplet,
    /// Sampled-anchor triplet loss fused with softmax.
    TripletSoftmax,
    /// Group-sensitive loss with sampled class and group anchors.
    GstrsWoMean,
    /// Group-sensitive loss with mean-valued anchors.
    GstrsWMean,
    /// Softmax cross-entropy only.
    Softmax,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [
        LossMode::Triplet,
        LossMode::TripletSoftmax,
        LossMode::GstrsWoMean,
        LossMode::GstrsWMean,
        LossMode::Softmax,
    ];

    fn anchor_mode(self) -> AnchorMode {
        match self {
            LossMode::GstrsWMean => AnchorMode::Mean,
            _ => AnchorMode::Sampled,
        }
    }

    fn omega(self, cfg: &LossConfig) -> f64 {
        match self {
            LossMode::Triplet => 0.0,
            LossMode::Softmax => 1.0,
            _ => cfg.omega,
        }
    }

    fn triplet_term(self, cfg: &LossConfig) -> Option<TripletTerm> {
        match self {
            LossMode::Triplet | LossMode::TripletSoftmax => Some(TripletTerm::MeanValued { alpha: cfg.alpha }),
            LossMode::GstrsWoMean | LossMode::GstrsWMean => Some(TripletTerm::Icv {
                alpha1: cfg.alpha1,
                alpha2: cfg.alpha2,
            }),
            LossMode::Softmax => None,
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Triplet => "triplet",
            LossMode::TripletSoftmax => "triplet+softmax",
            LossMode::GstrsWoMean => "gstrs_womean",
            LossMode::GstrsWMean => "gstrs_wmean",
            LossMode::Softmax => "softmax",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown loss mode `{s}` (expected triplet, triplet+softmax, gstrs_womean, gstrs_wmean or softmax)"
            ))
        })
    }
}

/// Where training groups come from.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupSource {
    /// Per-class k-means on the training features.
    KMeans,
    /// The manifest's `group` column.
    Manifest,
    /// One group id per manifest row.
    Assigned(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub grouping: GroupingConfig,
    pub group_source: GroupSource,
    pub hidden_dim: Option<usize>,
    pub embed_dim: usize,
    pub normalize: bool,
    /// Re-cluster on the current embedding every n epochs (k-means only).
    pub regroup_every: Option<usize>,
    pub seed: RngSeed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::GstrsWMean,
            loss: LossConfig::default(),
            sgd: SgdConfig::default(),
            grouping: GroupingConfig::default(),
            group_source: GroupSource::KMeans,
            hidden_dim: None,
            embed_dim: 16,
            normalize: true,
            regroup_every: None,
            seed: RngSeed(0),
        }
    }
}

/// Mean per-batch losses of one epoch (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub softmax: f64,
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: Checkpoint,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub groups: GroupModel,
    /// Manifest rows used for training.
    pub train_rows: Vec<usize>,
}

/// Rows marked `train`, or every row when no row is.
pub fn training_rows(manifest: &DatasetManifest) -> Vec<usize> {
    let rows = manifest.rows_with_role(Role::Train);
    if rows.is_empty() {
        (0..manifest.len()).collect()
    } else {
        rows
    }
}

/// Initial model and head for `d_in`-dimensional features.
pub fn initialize(cfg: &TrainConfig, d_in: usize, class_names: Vec<String>) -> Result<Checkpoint> {
    let model = EmbeddingModel::new_random(d_in, cfg.hidden_dim, cfg.embed_dim, cfg.normalize, cfg.seed.derive(1))?;
    let head = ClassifierHead::new_random(cfg.embed_dim, class_names.len(), cfg.seed.derive(2))?;
    Ok(Checkpoint {
        model,
        head,
        class_names,
    })
}

pub fn train(cfg: &TrainConfig, features: &FeatureMatrix, manifest: &DatasetManifest) -> Result<TrainOutcome> {
    cfg.loss.validate()?;
    cfg.sgd.validate()?;
    if features.n_samples() != manifest.len() {
        return Err(Error::DimensionMismatch {
            expected: manifest.len(),
            found: features.n_samples(),
        });
    }
    let rows = training_rows(manifest);
    let train_manifest = manifest.select(&rows)?;
    let train_features = features.select_rows(&rows)?;
    let grouping = GroupingConfig {
        kmeans: crate::grouping::KMeansConfig {
            seed: cfg.seed.derive(3),
            ..cfg.grouping.kmeans
        },
        ..cfg.grouping
    };
    let mut groups = match &cfg.group_source {
        GroupSource::KMeans => cluster(&train_features, &train_manifest, &grouping)?,
        GroupSource::Manifest => GroupModel::from_manifest(&train_features, &train_manifest)?,
        GroupSource::Assigned(all) => {
            if all.len() != manifest.len() {
                return Err(Error::DimensionMismatch {
                    expected: manifest.len(),
                    found: all.len(),
                });
            }
            let sub: Vec<usize> = rows.iter().map(|&i| all[i]).collect();
            GroupModel::from_assignments(&train_features, &train_manifest, &sub)?
        }
    };
    if cfg.regroup_every.is_some() && cfg.group_source != GroupSource::KMeans {
        log::warn!("regrouping only applies to k-means grouping; ignored");
    }

    let initial = initialize(cfg, features.dim(), train_manifest.class_names().to_vec())?;
    let mut ckpt = initial.clone();
    let sampler_seed = cfg.seed.derive(4);
    let mut sampler = Sampler::new(&train_manifest, &groups, cfg.sgd.batch, sampler_seed)?;
    let mut state = SgdState::default();
    let mut log_rows = Vec::with_capacity(cfg.sgd.epochs);

    for epoch in 0..cfg.sgd.epochs {
        if let Some(every) = cfg.regroup_every {
            if every > 0 && epoch > 0 && epoch % every == 0 && cfg.group_source == GroupSource::KMeans {
                let emb = ckpt.model.embed(&train_features)?;
                let cfg_emb = GroupingConfig {
                    pca_dim: None,
                    kmeans: crate::grouping::KMeansConfig {
                        seed: grouping.kmeans.seed.derive(epoch as u64),
                        ..grouping.kmeans
                    },
                };
                groups = cluster(&emb, &train_manifest, &cfg_emb)?;
                sampler = Sampler::new(&train_manifest, &groups, cfg.sgd.batch, sampler_seed)?;
            }
        }
        let batches = sampler.epoch(epoch as u64);
        let mut sum = EpochLog {
            epoch: epoch + 1,
            softmax: 0.0,
            inter: 0.0,
            intra: 0.0,
            total: 0.0,
        };
        for batch in &batches {
            let (total, parts) = batch_step(cfg, &mut ckpt, &mut state, &train_features, batch)?;
            sum.softmax += parts.softmax;
            sum.inter += parts.inter;
            sum.intra += parts.intra;
            sum.total += total;
        }
        let n = batches.len() as f64;
        sum.softmax /= n;
        sum.inter /= n;
        sum.intra /= n;
        sum.total /= n;
        log::debug!("epoch {}: L_total = {:.6}", sum.epoch, sum.total);
        log_rows.push(sum);
    }
    Ok(TrainOutcome {
        initial,
        checkpoint: ckpt,
        log: log_rows,
        groups,
        train_rows: rows,
    })
}

fn batch_step(
    cfg: &TrainConfig,
    ckpt: &mut Checkpoint,
    state: &mut SgdState,
    features: &FeatureMatrix,
    batch: &Batch,
) -> Result<(f64, LossBreakdown)> {
    let inputs = features.select_rows(&batch.samples())?;
    let labels = batch.labels();
    let cache = ckpt.model.forward(&inputs, ckpt.model.normalize)?;
    let term = cfg.mode.triplet_term(&cfg.loss);
    let contexts = match term {
        Some(_) => build_contexts(batch, &cache.output, cfg.mode.anchor_mode())?,
        None => Vec::new(),
    };
    let term = term.unwrap_or(TripletTerm::MeanValued { alpha: 0.0 });
    let out = joint_loss(
        &contexts,
        &ckpt.head,
        &cache.output,
        &labels,
        cfg.mode.omega(&cfg.loss),
        term,
    )?;
    let grad = FeatureMatrix::new(
        out.loss.dense_grads(inputs.n_samples(), ckpt.model.d_out()),
        inputs.n_samples(),
        ckpt.model.d_out(),
    )
    .map_err(|_| Error::NonFiniteGradient("embedding outputs".into()))?;
    let g = ckpt.model.backward(&inputs, &cache, &grad)?;

    let model = &mut ckpt.model;
    let head = &mut ckpt.head.linear;
    let mut blocks = Vec::with_capacity(6);
    if let (Some(layer), Some(gh)) = (model.hidden.as_mut(), g.hidden.as_ref()) {
        blocks.push(ParamBlock {
            name: "hidden.weight",
            values: &mut layer.weight,
            grads: &gh.weight,
        });
        blocks.push(ParamBlock {
            name: "hidden.bias",
            values: &mut layer.bias,
            grads: &gh.bias,
        });
    }
    blocks.push(ParamBlock {
        name: "W",
        values: &mut model.output.weight,
        grads: &g.output.weight,
    });
    blocks.push(ParamBlock {
        name: "b",
        values: &mut model.output.bias,
        grads: &g.output.bias,
    });
    blocks.push(ParamBlock {
        name: "V",
        values: &mut head.weight,
        grads: &out.head_grads.weight,
    });
    blocks.push(ParamBlock {
        name: "c0",
        values: &mut head.bias,
        grads: &out.head_grads.bias,
    });
    sgd_step(&mut blocks, &cfg.sgd, state)?;
    Ok((out.loss.value, out.loss.breakdown))
}

/// CSV with header `epoch,L_softmax,L_inter,L_intra,L_total`.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,L_softmax,L_inter,L_intra,L_total\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.softmax, e.inter, e.intra, e.total
        ));
    }
    s
}

pub fn write_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    fs::write(path.as_ref(), log_to_csv(log)).map_err(|e| Error::io(path.as_ref(), e))
}
