//! Anomaly thresholds for autoencoders: per-client mean + std of the
//! reconstruction error on the threshold-selection set, averaged by the server.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::neuralnet::{mse_per_sample, Matrix, ModelParameters};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    /// Divide by n.
    #[default]
    Population,
    /// Divide by n - 1.
    Sample,
}

/// `mean(values) + std(values)`.
pub fn mean_plus_std(values: &[f64], std: StdKind) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("threshold-selection set"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match std {
        StdKind::Population => n,
        StdKind::Sample if values.len() > 1 => n - 1.0,
        StdKind::Sample => 1.0,
    };
    Ok(mean + (ss / denom).sqrt())
}

pub fn local_threshold(
    model: &ModelParameters,
    threshold_set: &Matrix,
    std: StdKind,
) -> Result<f64> {
    if threshold_set.rows() == 0 {
        return Err(Error::Empty("threshold-selection set"));
    }
    mean_plus_std(&mse_per_sample(model, threshold_set)?, std)
}

/// Server side: plain mean of the clients' local thresholds.
pub fn global_threshold(locals: &[f64]) -> Result<f64> {
    if locals.is_empty() {
        return Err(Error::Empty("local thresholds"));
    }
    Ok(locals.iter().sum::<f64>() / locals.len() as f64)
}

/// Attack when the reconstruction error strictly exceeds the threshold.
pub fn detect(mse: f64, threshold: f64) -> Label {
    if mse > threshold {
        Label::Attack
    } else {
        Label::Benign
    }
}

pub fn detect_all(mse: &[f64], threshold: f64) -> Vec<bool> {
    mse.iter()
        .map(|&m| detect(m, threshold) == Label::Attack)
        .collect()
}

/// Threshold decision for one sample with a trained autoencoder.
pub fn detect_sample(model: &ModelParameters, threshold: f64, features: &[f64]) -> Result<Label> {
    let x = Matrix::from_rows(&[features])?;
    let mse = mse_per_sample(model, &x)?;
    Ok(detect(mse[0], threshold))
}
