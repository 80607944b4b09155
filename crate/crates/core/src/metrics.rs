//! Top-1 evaluation, the global/local accuracy aggregates and the metrics CSV.

use std::fs;
use std::path::Path;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{ClientState, FusionStrategy};
use crate::nn::{forward, ModelSpec, ParamVector};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 1000;

pub const CSV_HEADER: [&str; 6] = [
    "round",
    "strategy",
    "seed",
    "global_acc",
    "local_acc",
    "scalars_transmitted",
];

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub strategy: FusionStrategy,
    pub seed: u64,
    pub global_acc: f64,
    pub local_acc: f64,
    /// Cumulative scalars sent over the simulated network.
    pub scalars_transmitted: u64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of samples whose arg-max logit equals the label.
pub fn count_correct(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<usize> {
    let mut correct = 0;
    let positions: Vec<usize> = (0..data.len()).collect();
    for chunk in positions.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        let logits = forward(spec, params, batch.inputs.view())?;
        correct += logits
            .rows()
            .into_iter()
            .zip(&batch.labels)
            .filter(|(row, &y)| argmax(row.view()) == y)
            .count();
    }
    Ok(correct)
}

/// Top-1 accuracy of `params` on `data`.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    Ok(count_correct(spec, params, data)? as f64 / data.len() as f64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unweighted mean over clients of each model's accuracy on the shared test set.
pub fn global_accuracy(states: &[ClientState], spec: &ModelSpec, test: &Dataset) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Input("no clients to evaluate".into()));
    }
    let accs = states
        .par_iter()
        .map(|s| evaluate(spec, &s.params, test))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&accs))
}

/// Unweighted mean over clients of each model's accuracy on its own validation set.
pub fn local_accuracy(states: &[ClientState], spec: &ModelSpec) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Input("no clients to evaluate".into()));
    }
    if let Some(s) = states.iter().find(|s| s.data.validation.is_empty()) {
        return Err(Error::Config(format!(
            "client {} has an empty validation set",
            s.id
        )));
    }
    let accs = states
        .par_iter()
        .map(|s| evaluate(spec, &s.params, &s.data.validation))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&accs))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Serializes a timeline; accuracies carry six decimals.
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.strategy.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.global_acc),
            format!("{:.6}", r.local_acc),
            r.scalars_transmitted.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn write_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str, origin: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| csv_err(origin, e))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Load {
            path: origin.to_path_buf(),
            reason: format!("unexpected header {header:?}"),
        });
    }
    let bad = |line: usize, what: &str| Error::Load {
        path: origin.to_path_buf(),
        reason: format!("record {line}: bad {what}"),
    };
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| csv_err(origin, e))?;
            Ok(MetricsRecord {
                round: rec[0].parse().map_err(|_| bad(i, "round"))?,
                strategy: rec[1].parse().map_err(|_| bad(i, "strategy"))?,
                seed: rec[2].parse().map_err(|_| bad(i, "seed"))?,
                global_acc: rec[3].parse().map_err(|_| bad(i, "global_acc"))?,
                local_acc: rec[4].parse().map_err(|_| bad(i, "local_acc"))?,
                scalars_transmitted: rec[5].parse().map_err(|_| bad(i, "scalars_transmitted"))?,
            })
        })
        .collect()
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}
