//! Soft predictions and the losses used for local training and mutual
//! knowledge transfer.
//!
//! Labels are zero-based class indices. Every loss takes a [`Reduction`]:
//! `Sum` adds the per-sample terms of a batch, `Mean` divides that sum by the
//! batch size.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    fn apply(self, total: f64, batch: usize) -> f64 {
        match self {
            Reduction::Sum => total,
            Reduction::Mean => total / batch as f64,
        }
    }

    fn scale(self, batch: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / batch as f64,
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Config(format!(
                "unknown reduction {other:?} (expected sum or mean)"
            ))),
        }
    }
}

/// Row-stochastic `B x C` matrix of per-sample class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrediction {
    probs: Array2<f64>,
}

impl SoftPrediction {
    /// Wraps probabilities, checking the row-stochastic invariant.
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() < 2 {
            return Err(Error::Input(format!(
                "soft prediction of shape {:?}",
                probs.dim()
            )));
        }
        for (z, row) in probs.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return Err(Error::Input(format!("row {z} has entries outside (0, 1]")));
            }
            if (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("row {z} sums to {}", row.sum())));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn batch_size(&self) -> usize {
        self.probs.nrows()
    }

    pub fn classes(&self) -> usize {
        self.probs.ncols()
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax(logits: ArrayView2<f64>) -> SoftPrediction {
    let mut probs = logits.to_owned();
    for mut row in probs.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
        // Saturated rows can underflow to exact zeros; keep entries positive.
        row.mapv_inplace(|p| p.max(f64::MIN_POSITIVE));
    }
    SoftPrediction { probs }
}

/// One-hot encoding of a zero-based label.
pub fn one_hot(label: usize, classes: usize) -> Result<Array1<f64>> {
    if label >= classes {
        return Err(Error::Input(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let mut h = Array1::zeros(classes);
    h[label] = 1.0;
    Ok(h)
}

fn check_labels(pred: &SoftPrediction, labels: &[usize]) {
    assert_eq!(
        pred.batch_size(),
        labels.len(),
        "prediction rows and labels differ in length"
    );
    assert!(
        labels.iter().all(|&y| y < pred.classes()),
        "label out of range for {} classes",
        pred.classes()
    );
}

fn ln_clamped(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// `−Σ_z log p_z[y_z]`, reduced over the batch.
pub fn cross_entropy(pred: &SoftPrediction, labels: &[usize], reduction: Reduction) -> f64 {
    check_labels(pred, labels);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(z, &y)| -ln_clamped(pred.probs[[z, y]]))
        .sum();
    reduction.apply(total, labels.len())
}

/// `D_KL(target ∥ pred) = Σ_z Σ_c t_zc · log(t_zc / p_zc)`, reduced over the batch.
pub fn kl_divergence(target: &SoftPrediction, pred: &SoftPrediction, reduction: Reduction) -> f64 {
    assert_eq!(
        target.probs.dim(),
        pred.probs.dim(),
        "KL arguments differ in shape"
    );
    let total: f64 = target
        .probs
        .iter()
        .zip(pred.probs.iter())
        .map(|(&t, &p)| t * (ln_clamped(t) - ln_clamped(p)))
        .sum();
    reduction.apply(total, target.batch_size())
}

/// Loss of one side of a mutual transfer: `CE(own, Y) + D_KL(peer ∥ own)`.
///
/// `mutual_loss(P1, P2, Y)` is the loss minimized by the received model and
/// `mutual_loss(P2, P1, Y)` the one minimized by the receiver's own model.
/// The peer distribution is a constant target.
pub fn mutual_loss(
    own: &SoftPrediction,
    peer: &SoftPrediction,
    labels: &[usize],
    reduction: Reduction,
) -> f64 {
    cross_entropy(own, labels, reduction) + kl_divergence(peer, own, reduction)
}

/// Gradient of [`cross_entropy`] with respect to the logits: `p − h(y)`.
pub fn cross_entropy_grad_logits(
    pred: &SoftPrediction,
    labels: &[usize],
    reduction: Reduction,
) -> Array2<f64> {
    check_labels(pred, labels);
    let mut grad = pred.probs.clone();
    for (z, &y) in labels.iter().enumerate() {
        grad[[z, y]] -= 1.0;
    }
    grad * reduction.scale(labels.len())
}

/// Gradient of [`mutual_loss`] with respect to the own model's logits:
/// `2·p_own − h(y) − p_peer` per sample.
pub fn mutual_loss_grad_logits(
    own: &SoftPrediction,
    peer: &SoftPrediction,
    labels: &[usize],
    reduction: Reduction,
) -> Array2<f64> {
    check_labels(own, labels);
    assert_eq!(
        own.probs.dim(),
        peer.probs.dim(),
        "soft predictions differ in shape"
    );
    let mut grad = &own.probs * 2.0 - &peer.probs;
    for (z, &y) in labels.iter().enumerate() {
        grad[[z, y]] -= 1.0;
    }
    grad * reduction.scale(labels.len())
}
