//! Run configuration: a TOML file overlaid by command-line flags.
//!
//! Precedence is flag, then file, then default, field by field.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use defkt_core::data::{load_mnist, synth_dataset, synth_test_set};
use defkt_core::{
    Dataset, Error, FusionStrategy, HyperParams, InputShape, ModelSpec, PartitionConfig,
    PartitionMode, Reduction, Result, SynthConfig,
};
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "DEFKT_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Synthetic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion-mnist" => Ok(DatasetKind::FashionMnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::Config(format!(
                "unknown dataset {s:?} (expected mnist, fashion-mnist or synthetic)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    CnnSmall,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "cnn-small" | "cnn" => Ok(ModelKind::CnnSmall),
            _ => Err(Error::Config(format!(
                "unknown model {s:?} (expected mlp or cnn-small)"
            ))),
        }
    }
}

/// Parses `all` or a comma-separated list of strategy names.
pub fn parse_strategies(s: &str) -> Result<Vec<FusionStrategy>> {
    if s == "all" {
        return Ok(FusionStrategy::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let strategy: FusionStrategy = part.trim().parse()?;
        if !out.contains(&strategy) {
            out.push(strategy);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    pub dims: Option<usize>,
    pub sigma: Option<f64>,
    pub test_per_class: Option<usize>,
    pub seed: Option<u64>,
}

/// The file format. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<DatasetKind>,
    pub data_dir: Option<PathBuf>,
    /// Keep only the first `n` training samples.
    pub train_subset: Option<usize>,
    pub model: Option<ModelKind>,
    pub hidden: Option<Vec<usize>>,
    pub strategy: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub eval_every: Option<usize>,
    pub out: Option<PathBuf>,
    pub train_fraction: Option<f64>,
    /// `"iid"` or `"non-iid"`.
    pub partition: Option<String>,
    pub xi: Option<usize>,
    pub clients: Option<usize>,
    pub senders: Option<usize>,
    pub rounds: Option<usize>,
    pub batch_b1: Option<usize>,
    pub batch_b2: Option<usize>,
    pub passes_m: Option<usize>,
    pub passes_e: Option<usize>,
    pub lr: Option<f64>,
    pub lr_local: Option<f64>,
    pub lr_received: Option<f64>,
    pub lr_resident: Option<f64>,
    pub momentum: Option<f64>,
    pub reduction: Option<Reduction>,
    pub split_index: Option<usize>,
    pub synthetic: Option<SyntheticSection>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Flags shared by every subcommand; each overrides the matching file key.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// TOML configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mnist, fashion-mnist or synthetic
    #[arg(long)]
    pub dataset: Option<String>,
    /// Dataset root holding mnist/ and fashion-mnist/
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// mlp or cnn-small
    #[arg(long)]
    pub model: Option<String>,
    /// defkt, fullavg, combo, a comma-separated list, or all
    #[arg(long)]
    pub strategy: Option<String>,
    /// Number of clients K
    #[arg(long)]
    pub clients: Option<usize>,
    /// Senders per round Q
    #[arg(long)]
    pub senders: Option<usize>,
    /// Rounds T
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Label segments per client; implies the non-IID partition
    #[arg(long)]
    pub xi: Option<usize>,
    /// Use the IID partition
    #[arg(long, conflicts_with = "xi")]
    pub iid: bool,
    /// Learning rate for local updates and both transfer models
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Local-update batch size
    #[arg(long)]
    pub batch_b1: Option<usize>,
    /// Transfer batch size
    #[arg(long)]
    pub batch_b2: Option<usize>,
    /// Local-update passes
    #[arg(long)]
    pub passes_m: Option<usize>,
    /// Transfer passes
    #[arg(long)]
    pub passes_e: Option<usize>,
    /// Master seed(s), comma-separated
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Idx {
        dataset: DatasetKind,
        dir: PathBuf,
        train_subset: Option<usize>,
    },
    Synthetic {
        config: SynthConfig,
        test_per_class: usize,
    },
}

impl DataSource {
    /// Training and test sets.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Idx {
                dir, train_subset, ..
            } => {
                let (train, test) = load_mnist(dir)?;
                match train_subset {
                    Some(n) if *n > train.len() => Err(Error::Config(format!(
                        "train_subset {n} exceeds the {} available samples",
                        train.len()
                    ))),
                    Some(n) => Ok((train.head(*n), test)),
                    None => Ok((train, test)),
                }
            }
            DataSource::Synthetic {
                config,
                test_per_class,
            } => Ok((
                synth_dataset(config)?,
                synth_test_set(config, *test_per_class)?,
            )),
        }
    }

    fn input(&self) -> InputShape {
        match self {
            DataSource::Idx { .. } => InputShape::image(1, 28, 28),
            DataSource::Synthetic { config, .. } => InputShape::flat(config.dims),
        }
    }

    fn classes(&self) -> usize {
        match self {
            DataSource::Idx { .. } => 10,
            DataSource::Synthetic { config, .. } => config.classes,
        }
    }
}

/// A fully resolved configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelKind,
    pub spec: ModelSpec,
    pub strategies: Vec<FusionStrategy>,
    pub partition: PartitionMode,
    pub train_fraction: f64,
    /// `hyper.seed` is overwritten per run.
    pub hyper: HyperParams,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn partition_config(&self, seed: u64) -> PartitionConfig {
        PartitionConfig {
            clients: self.hyper.clients,
            mode: self.partition,
            seed,
        }
    }

    pub fn hyper_for(&self, seed: u64) -> HyperParams {
        HyperParams {
            seed,
            ..self.hyper.clone()
        }
    }
}

fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

/// Reads `--config` if given, overlays the flags and fills defaults.
pub fn parse_config(flags: &Overrides) -> Result<RunConfig> {
    let file = match &flags.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    resolve(&file, flags)
}

pub fn resolve(file: &FileConfig, flags: &Overrides) -> Result<RunConfig> {
    let dataset = match &flags.dataset {
        Some(s) => s.parse()?,
        None => file.dataset.unwrap_or(DatasetKind::Mnist),
    };
    let synth = file.synthetic.clone().unwrap_or_default();
    if dataset != DatasetKind::Synthetic && file.synthetic.is_some() {
        return Err(Error::Config(format!(
            "[synthetic] section given for dataset {dataset}"
        )));
    }
    let data = match dataset {
        DatasetKind::Synthetic => {
            if file.train_subset.is_some() {
                return Err(Error::Config(
                    "train_subset applies only to IDX datasets".into(),
                ));
            }
            DataSource::Synthetic {
                config: SynthConfig {
                    classes: synth.classes.unwrap_or(4),
                    per_class: synth.per_class.unwrap_or(400),
                    dims: synth.dims.unwrap_or(20),
                    sigma: synth.sigma.unwrap_or(1.5),
                    seed: synth.seed.unwrap_or(0),
                },
                test_per_class: synth.test_per_class.unwrap_or(400),
            }
        }
        DatasetKind::Mnist | DatasetKind::FashionMnist => {
            let root = flags
                .data_dir
                .clone()
                .or_else(|| file.data_dir.clone())
                .unwrap_or_else(default_data_dir);
            let dir = root.join(dataset.name());
            if !dir.is_dir() {
                return Err(Error::Load {
                    path: dir,
                    reason: format!(
                        "dataset directory not found (set --data-dir or {DATA_DIR_ENV})"
                    ),
                });
            }
            DataSource::Idx {
                dataset,
                dir,
                train_subset: file.train_subset,
            }
        }
    };

    let model = match &flags.model {
        Some(s) => s.parse()?,
        None => file.model.unwrap_or(ModelKind::Mlp),
    };
    let spec = match model {
        ModelKind::Mlp => {
            let default_hidden = match data {
                DataSource::Idx { .. } => vec![200, 200],
                DataSource::Synthetic { .. } => vec![32, 32],
            };
            let hidden = file.hidden.clone().unwrap_or(default_hidden);
            ModelSpec::mlp(data.input().len(), &hidden, data.classes())?
        }
        ModelKind::CnnSmall => {
            if file.hidden.is_some() {
                return Err(Error::Config("hidden applies only to the mlp model".into()));
            }
            if matches!(data, DataSource::Synthetic { .. }) {
                return Err(Error::Config("cnn-small needs image data".into()));
            }
            ModelSpec::cnn_small(data.input(), data.classes())?
        }
    };

    let strategies = parse_strategies(
        flags
            .strategy
            .as_deref()
            .or(file.strategy.as_deref())
            .unwrap_or("all"),
    )?;

    let partition = if flags.iid {
        PartitionMode::Iid
    } else if let Some(xi) = flags.xi {
        PartitionMode::NonIid {
            classes_per_client: xi,
        }
    } else {
        match file.partition.as_deref() {
            None | Some("iid") if file.xi.is_none() => PartitionMode::Iid,
            None | Some("non-iid") => PartitionMode::NonIid {
                classes_per_client: file.xi.unwrap_or(2),
            },
            Some("iid") => return Err(Error::Config("xi given with an iid partition".into())),
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown partition {other:?} (expected iid or non-iid)"
                )))
            }
        }
    };
    if partition
        == (PartitionMode::NonIid {
            classes_per_client: 0,
        })
    {
        return Err(Error::Config("xi must be at least 1".into()));
    }

    let clients = flags.clients.or(file.clients).unwrap_or(10);
    // 20% participation: 2Q = K / 5
    let senders = flags
        .senders
        .or(file.senders)
        .unwrap_or(clients.div_ceil(10));
    let lr = flags.lr.or(file.lr).unwrap_or(0.01);
    let hyper = HyperParams {
        clients,
        senders,
        rounds: flags.rounds.or(file.rounds).unwrap_or(2500),
        local_batch: flags.batch_b1.or(file.batch_b1).unwrap_or(200),
        local_passes: flags.passes_m.or(file.passes_m).unwrap_or(1),
        local_lr: file.lr_local.filter(|_| flags.lr.is_none()).unwrap_or(lr),
        transfer_batch: flags.batch_b2.or(file.batch_b2).unwrap_or(200),
        transfer_passes: flags.passes_e.or(file.passes_e).unwrap_or(1),
        received_lr: file
            .lr_received
            .filter(|_| flags.lr.is_none())
            .unwrap_or(lr),
        resident_lr: file
            .lr_resident
            .filter(|_| flags.lr.is_none())
            .unwrap_or(lr),
        momentum: flags.momentum.or(file.momentum).unwrap_or(0.5),
        reduction: file.reduction.unwrap_or_default(),
        split_index: file.split_index,
        seed: 0,
    };
    hyper.validate()?;
    hyper.segment_split(spec.param_count())?;

    let seeds = if flags.seed.is_empty() {
        file.seeds.clone().unwrap_or_else(|| vec![0])
    } else {
        flags.seed.clone()
    };
    if seeds.is_empty() {
        return Err(Error::Config("seeds must not be empty".into()));
    }
    let eval_every = flags.eval_every.or(file.eval_every).unwrap_or(10);
    if eval_every == 0 {
        return Err(Error::Config("eval_every must be at least 1".into()));
    }
    let train_fraction = file.train_fraction.unwrap_or(0.8);
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }

    Ok(RunConfig {
        data,
        model,
        spec,
        strategies,
        partition,
        train_fraction,
        hyper,
        seeds,
        eval_every,
        output_dir: flags
            .out
            .clone()
            .or_else(|| file.out.clone())
            .unwrap_or_else(|| PathBuf::from("results")),
    })
}
