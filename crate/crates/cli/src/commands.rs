use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use defkt_core::checkpoint::{load_model, save_model};
use defkt_core::data::{partition, prepare_clients};
use defkt_core::metrics::{evaluate, write_csv};
use defkt_core::nn::init_params;
use defkt_core::{
    Dataset, Error, ExperimentSetup, FusionStrategy, HyperParams, MetricsRecord, PartitionConfig,
    PartitionMode, Result, Simulation,
};
use serde::Serialize;

use crate::config::{DataSource, ModelKind, RunConfig};

/// 1 for configuration and input problems, 2 for failures during a run.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InRound { .. } | Error::Numerical(_) | Error::Io { .. } => 2,
        Error::Config(_) | Error::Input(_) | Error::Load { .. } => 1,
    }
}

pub fn csv_name(strategy: FusionStrategy, seed: u64) -> String {
    format!("{strategy}_{seed}.csv")
}

/// Everything needed to repeat one run.
#[derive(Debug, Serialize)]
pub struct RunMetadata<'a> {
    pub strategy: FusionStrategy,
    pub seed: u64,
    pub data: &'a DataSource,
    pub model: ModelKind,
    pub architecture: String,
    pub model_fingerprint: String,
    pub param_count: usize,
    pub partition: PartitionConfig,
    pub train_fraction: f64,
    pub hyper: HyperParams,
    pub senders: usize,
    pub transfer_passes: usize,
    pub reduction: String,
    pub split_index: usize,
    pub eval_every: usize,
    pub final_record: Option<MetricsRecord>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs every (strategy, seed) pair and writes `{strategy}_{seed}.csv` plus
/// a `.json` metadata file into the output directory. Strategies share the
/// partition and initial model of each seed. Returns the CSV paths.
pub fn cmd_run(
    cfg: &RunConfig,
    save_models: bool,
    log: &mut dyn std::io::Write,
) -> Result<Vec<PathBuf>> {
    let (train, test) = cfg.data.load()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let partition = cfg.partition_config(seed);
        let setup = ExperimentSetup {
            spec: cfg.spec.clone(),
            hyper: cfg.hyper_for(seed),
            clients: prepare_clients(&train, &partition, cfg.train_fraction)?,
            test: test.clone(),
            initial: init_params(&cfg.spec, seed),
            eval_every: cfg.eval_every,
        };
        if save_models {
            save_model(
                dir.join(format!("init_{seed}.model")),
                &cfg.spec,
                &setup.initial,
            )?;
        }
        for &strategy in &cfg.strategies {
            let mut sim = Simulation::new(&setup, strategy)?;
            let timeline = sim.run(|_| {})?;
            let csv = dir.join(csv_name(strategy, seed));
            write_csv(&timeline, &csv)?;
            let meta = RunMetadata {
                strategy,
                seed,
                data: &cfg.data,
                model: cfg.model,
                architecture: cfg.spec.to_string(),
                model_fingerprint: hex(&cfg.spec.fingerprint()),
                param_count: cfg.spec.param_count(),
                partition,
                train_fraction: cfg.train_fraction,
                hyper: setup.hyper.clone(),
                senders: setup.hyper.senders,
                transfer_passes: setup.hyper.transfer_passes,
                reduction: setup.hyper.reduction.to_string(),
                split_index: setup.hyper.segment_split(cfg.spec.param_count())?,
                eval_every: cfg.eval_every,
                final_record: timeline.last().cloned(),
            };
            let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
            write_file(&csv.with_extension("json"), json.as_bytes())?;
            if save_models {
                for state in sim.states() {
                    let name = format!("{strategy}_{seed}_client{}.model", state.id);
                    save_model(dir.join(name), &cfg.spec, &state.params)?;
                }
            }
            if let Some(last) = timeline.last() {
                let _ = writeln!(
                    log,
                    "{strategy} seed {seed}: round {} global {:.4} local {:.4} scalars {} -> {}",
                    last.round,
                    last.global_acc,
                    last.local_acc,
                    last.scalars_transmitted,
                    csv.display()
                );
            }
            written.push(csv);
        }
    }
    Ok(written)
}

fn histogram_line(hist: &[usize]) -> String {
    hist.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Per-client sample counts, train/validation sizes and label histograms
/// for the first configured seed.
pub fn cmd_inspect_partition(cfg: &RunConfig) -> Result<String> {
    let (train, _) = cfg.data.load()?;
    let seed = cfg.seeds[0];
    let partition_cfg = cfg.partition_config(seed);
    let shards = partition(&train, &partition_cfg)?;
    let clients = prepare_clients(&train, &partition_cfg, cfg.train_fraction)?;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} samples, {} clients, partition {}, seed {seed}",
        train.len(),
        shards.len(),
        match cfg.partition {
            PartitionMode::Iid => "iid".to_string(),
            PartitionMode::NonIid { classes_per_client } =>
                format!("non-iid (xi = {classes_per_client})"),
        }
    );
    let _ = writeln!(out, "client samples train validation labels histogram");
    let mut total = vec![0; train.classes()];
    for (k, (shard, split)) in shards.iter().zip(&clients).enumerate() {
        let hist = shard.label_histogram();
        for (t, h) in total.iter_mut().zip(&hist) {
            *t += h;
        }
        let _ = writeln!(
            out,
            "{k} {} {} {} {} {}",
            shard.len(),
            split.train.len(),
            split.validation.len(),
            shard.distinct_labels(),
            histogram_line(&hist)
        );
    }
    let source = train.label_histogram();
    let _ = writeln!(out, "total {}", histogram_line(&total));
    let _ = writeln!(out, "source {}", histogram_line(&source));
    let _ = writeln!(out, "conserved {}", total == source);
    Ok(out)
}

/// Top-1 accuracy of a saved model on the configured test set.
pub fn cmd_eval(cfg: &RunConfig, model_file: &Path) -> Result<(f64, usize)> {
    let params = load_model(model_file, &cfg.spec)?;
    let (_, test): (Dataset, Dataset) = cfg.data.load()?;
    Ok((evaluate(&cfg.spec, &params, &test)?, test.len()))
}
