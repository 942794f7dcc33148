//! `gstrs` command line: synth, cluster, train, eval and gradcheck.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data_io::{
    generate_synthetic, load_features, load_manifest, save_features, save_manifest, split_roles, split_train, Role,
    SynthSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, LabeledSet};
use crate::gradcheck::run_suite;
use crate::grouping::{cluster, read_groups_csv, write_groups_csv, GroupingConfig, KMeansConfig};
use crate::losses::LossConfig;
use crate::model::{Checkpoint, SgdConfig};
use crate::numerics::RngSeed;
use crate::sampling::BatchSpec;
use crate::trainer::{train, write_log, GroupSource, LossMode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "gstrs", version, about = "Group-sensitive triplet embedding toolkit")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic grouped dataset.
    Synth(SynthArgs),
    /// Per-class k-means grouping.
    Cluster(ClusterArgs),
    /// Train an embedding from a config file.
    Train(TrainArgs),
    /// Retrieval and classification metrics for a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    groups: usize,
    #[arg(long, default_value_t = 20)]
    per_group: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8.0)]
    class_sep: f64,
    #[arg(long, default_value_t = 4.0)]
    group_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mark this fraction of each class as training rows.
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Split the remaining rows of each class into queries and gallery.
    #[arg(long)]
    query_fraction: Option<f64>,
    /// Output directory (features.bin, manifest.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    groups: u64,
    /// PCA dimension before k-means; 0 disables PCA.
    #[arg(long, default_value_t = 64)]
    pca_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    max_iters: u64,
    /// Output CSV (sample_id,class,group).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Precision cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50",
          value_parser = clap::value_parser!(u64).range(1..))]
    topk: Vec<u64>,
    /// Write the report as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    exclude_identical_id: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Perturb the triplet gradients so the check must fail.
    #[arg(long)]
    inject_fault: bool,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("GSTRS_LOG")
        .try_init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Cluster(a) => cmd_cluster(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => return cmd_gradcheck(&a),
    };
    match result {
        Ok(()) => 0,
        Err(Error::InvalidArgument(msg)) if msg.starts_with("config") => {
            eprintln!("error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_classes: a.classes,
        groups_per_class: a.groups,
        samples_per_group: a.per_group,
        raw_dim: a.dim,
        class_separation: a.class_sep,
        group_separation: a.group_sep,
        noise_sigma: a.noise,
        seed: RngSeed(a.seed),
    };
    let (features, mut manifest) = generate_synthetic(&spec)?;
    if let Some(t) = a.train_fraction {
        manifest = split_train(&manifest, t, RngSeed(a.seed).derive(101))?;
    }
    if let Some(q) = a.query_fraction {
        manifest = split_roles(&manifest, q, RngSeed(a.seed).derive(102))?;
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    save_features(a.out.join("features.bin"), &features)?;
    save_manifest(a.out.join("manifest.csv"), &manifest)?;
    let count = |r| manifest.rows_with_role(r).len();
    println!(
        "samples {}  dim {}  classes {}  groups/class {}  train {}  query {}  gallery {}",
        manifest.len(),
        features.dim(),
        manifest.n_classes(),
        a.groups,
        count(Role::Train),
        count(Role::Query),
        count(Role::Gallery)
    );
    Ok(())
}

fn cmd_cluster(a: &ClusterArgs) -> Result<()> {
    let features = load_features(&a.features)?;
    let manifest = load_manifest(&a.manifest)?;
    let cfg = GroupingConfig {
        kmeans: KMeansConfig {
            groups: a.groups as usize,
            max_iters: a.max_iters as usize,
            restarts: a.restarts,
            seed: RngSeed(a.seed),
        },
        pca_dim: (a.pca_dim > 0).then_some(a.pca_dim),
    };
    let model = cluster(&features, &manifest, &cfg)?;
    write_groups_csv(&a.out, &model, &manifest)?;
    let objective: f64 = (0..model.n_classes())
        .map(|c| model.class_groups(c).map(|g| g.objective))
        .sum::<Result<f64>>()?;
    println!(
        "classes {}  groups/class {}  objective {:.6}",
        model.n_classes(),
        model.groups_per_class(),
        objective
    );
    Ok(())
}

/// Training run described by a `key = value` config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub features: PathBuf,
    pub manifest: PathBuf,
    pub groups_file: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub train: TrainConfig,
}

const CONFIG_KEYS: &[&str] = &[
    "features",
    "manifest",
    "groups_file",
    "checkpoint",
    "log",
    "loss",
    "alpha",
    "alpha1",
    "alpha2",
    "omega",
    "learning_rate",
    "momentum",
    "epochs",
    "classes_per_batch",
    "groups_per_class",
    "samples_per_group",
    "negative_pool_per_class",
    "grouping",
    "groups",
    "pca_dim",
    "kmeans_restarts",
    "kmeans_max_iters",
    "regroup_every",
    "embed_dim",
    "hidden_dim",
    "normalize",
    "seed",
];

fn config_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::invalid(format!("config line {line}: {msg}"))
}

impl RunConfig {
    /// Parse config text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(line_no, "expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(config_err(line_no, format!("unknown key `{k}`")));
            }
            if kv.insert(k, (line_no, v)).is_some() {
                return Err(config_err(line_no, format!("duplicate key `{k}`")));
            }
        }
        fn num<T: std::str::FromStr>(kv: &BTreeMap<&str, (usize, &str)>, k: &str, default: T) -> Result<T> {
            match kv.get(k) {
                None => Ok(default),
                Some(&(line, v)) => v
                    .parse()
                    .map_err(|_| config_err(line, format!("invalid value `{v}` for `{k}`"))),
            }
        }
        let path = |k: &str| kv.get(k).map(|&(_, v)| base.join(v));
        let required = |k: &str| path(k).ok_or_else(|| Error::invalid(format!("config: missing required key `{k}`")));
        let opt_count = |k: &str, default: usize| -> Result<Option<usize>> {
            let v: usize = num(&kv, k, default)?;
            Ok((v > 0).then_some(v))
        };

        let mode = match kv.get("loss") {
            None => LossMode::GstrsWMean,
            Some(&(line, v)) => v.parse().map_err(|e: Error| config_err(line, e))?,
        };
        let group_source = match kv.get("grouping").map(|&(l, v)| (l, v)) {
            None | Some((_, "kmeans")) => GroupSource::KMeans,
            Some((_, "manifest")) => GroupSource::Manifest,
            Some((line, "file")) => {
                if !kv.contains_key("groups_file") {
                    return Err(config_err(line, "grouping = file needs `groups_file`"));
                }
                GroupSource::Assigned(Vec::new())
            }
            Some((line, other)) => {
                return Err(config_err(
                    line,
                    format!("unknown grouping `{other}` (expected kmeans, manifest or file)"),
                ))
            }
        };
        let normalize = match kv.get("normalize") {
            None => true,
            Some(&(_, "true" | "1")) => true,
            Some(&(_, "false" | "0")) => false,
            Some(&(line, v)) => return Err(config_err(line, format!("invalid value `{v}` for `normalize`"))),
        };
        let loss = LossConfig {
            alpha: num(&kv, "alpha", 1.0)?,
            alpha1: num(&kv, "alpha1", 1.0)?,
            alpha2: num(&kv, "alpha2", 0.3)?,
            omega: num(&kv, "omega", 0.5)?,
        };
        let seed = RngSeed(num(&kv, "seed", 0)?);
        let sgd = SgdConfig {
            learning_rate: num(&kv, "learning_rate", 0.01)?,
            momentum: num(&kv, "momentum", 0.9)?,
            epochs: num(&kv, "epochs", 50)?,
            batch: BatchSpec {
                classes_per_batch: num(&kv, "classes_per_batch", 4)?,
                groups_per_class: num(&kv, "groups_per_class", 2)?,
                samples_per_group: num(&kv, "samples_per_group", 4)?,
                negative_pool: opt_count("negative_pool_per_class", 0)?,
            },
            weight_seed: seed.derive(1),
        };
        let grouping = GroupingConfig {
            kmeans: KMeansConfig {
                groups: num(&kv, "groups", 5)?,
                max_iters: num(&kv, "kmeans_max_iters", 100)?,
                restarts: num(&kv, "kmeans_restarts", 5)?,
                seed: seed.derive(3),
            },
            pca_dim: opt_count("pca_dim", 64)?,
        };
        let train = TrainConfig {
            mode,
            loss,
            sgd,
            grouping,
            group_source,
            hidden_dim: opt_count("hidden_dim", 0)?,
            embed_dim: num(&kv, "embed_dim", 16)?,
            normalize,
            regroup_every: opt_count("regroup_every", 0)?,
            seed,
        };
        loss.validate().map_err(|e| Error::invalid(format!("config: {e}")))?;
        train
            .sgd
            .validate()
            .map_err(|e| Error::invalid(format!("config: {e}")))?;
        train
            .sgd
            .batch
            .validate()
            .map_err(|e| Error::invalid(format!("config: {e}")))?;
        Ok(Self {
            features: required("features")?,
            manifest: required("manifest")?,
            groups_file: path("groups_file"),
            checkpoint: path("checkpoint").unwrap_or_else(|| base.join("model.ckpt")),
            log: path("log").unwrap_or_else(|| base.join("train_log.csv")),
            train,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut rc = RunConfig::load(&a.config)?;
    let features = load_features(&rc.features)?;
    let manifest = load_manifest(&rc.manifest)?;
    if let (GroupSource::Assigned(_), Some(p)) = (&rc.train.group_source, &rc.groups_file) {
        rc.train.group_source = GroupSource::Assigned(read_groups_csv(p, &manifest)?);
    }
    let out = train(&rc.train, &features, &manifest)?;
    out.checkpoint.save(&rc.checkpoint)?;
    write_log(&rc.log, &out.log)?;
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        println!(
            "mode {}  epochs {}  L_total {:.6} -> {:.6}",
            rc.train.mode,
            out.log.len(),
            first.total,
            last.total
        );
    }
    println!("checkpoint {}", rc.checkpoint.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let features = load_features(&a.features)?;
    let manifest = load_manifest(&a.manifest)?;
    if features.n_samples() != manifest.len() {
        return Err(Error::DimensionMismatch {
            expected: manifest.len(),
            found: features.n_samples(),
        });
    }
    let q_rows = manifest.rows_with_role(Role::Query);
    let g_rows = manifest.rows_with_role(Role::Gallery);
    if q_rows.is_empty() || g_rows.is_empty() {
        return Err(Error::invalid("manifest needs rows with role `query` and `gallery`"));
    }
    let embedded = ckpt.model.embed(&features)?;
    let ids: Vec<u64> = manifest.rows().iter().map(|r| r.sample_id).collect();
    let labels: Vec<usize> = (0..manifest.len()).map(|i| manifest.class_of(i)).collect();
    let pick = |rows: &[usize]| -> Result<_> {
        Ok((
            embedded.select_rows(rows)?,
            rows.iter().map(|&i| ids[i]).collect::<Vec<_>>(),
            rows.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        ))
    };
    let (qf, qi, ql) = pick(&q_rows)?;
    let (gf, gi, gl) = pick(&g_rows)?;
    let options = EvalOptions {
        topk: a.topk.iter().map(|&k| k as usize).collect(),
        exclude_identical_id: a.exclude_identical_id,
    };
    let mut report = evaluate(
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
        &options,
    )?;

    let eval_rows: Vec<usize> = q_rows.iter().chain(&g_rows).copied().collect();
    let known: Vec<(usize, usize)> = eval_rows
        .iter()
        .filter_map(|&i| {
            let name = &manifest.rows()[i].class;
            ckpt.class_names.iter().position(|c| c == name).map(|c| (i, c))
        })
        .collect();
    if known.len() < eval_rows.len() {
        log::warn!(
            "{} evaluation rows have classes unknown to the classifier; left out of accuracy",
            eval_rows.len() - known.len()
        );
    }
    if !known.is_empty() {
        let correct = known
            .iter()
            .filter(|&&(i, c)| ckpt.head.predict(embedded.row(i)) == c)
            .count();
        report.classification_accuracy = Some(correct as f64 / known.len() as f64);
    }
    println!("{report}");
    if let Some(p) = &a.out {
        report.write_csv(p)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> i32 {
    let reports = run_suite(RngSeed(a.seed), a.trials as usize, a.inject_fault);
    let mut ok = true;
    for s in &reports {
        let r = &s.report;
        ok &= r.passed();
        println!(
            "{:<26} max_rel_err {:.3e}  checked {:>6}  unstable {:>3}  {}",
            s.name,
            r.max_relative_error,
            r.checked,
            r.unstable.len(),
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            for w in &r.worst {
                println!(
                    "    coord {:>4}: analytic {:.9e}  numeric {:.9e}  rel {:.3e}",
                    w.coordinate, w.analytic, w.numeric, w.relative_error
                );
            }
        }
    }
    if ok {
        0
    } else {
        1
    }
}
