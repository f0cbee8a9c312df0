//! Collaborative hyper-parameter search: every client trains each candidate
//! on its own fit split and reports a validation score; the server keeps the
//! candidate with the best average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{
    init_model, loss, predict_labels, ArchitectureSpec, ModelKind, OptimizerConfig, Preset,
};
use crate::seed;

use super::training::{no_observer, run_federated, Client, FederationConfig};

/// Share of each client's train part (taken from its end) held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub preset: Preset,
    pub l2_lambda: f64,
}

/// Every preset of `kind` crossed with the three L2 strengths, in canonical
/// order (preset-major).
pub fn preset_grid(kind: ModelKind) -> Vec<GridPoint> {
    Preset::presets_for(kind)
        .iter()
        .flat_map(|&preset| {
            OptimizerConfig::L2_GRID
                .iter()
                .map(move |&l2_lambda| GridPoint { preset, l2_lambda })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub point: GridPoint,
    /// One score per client, in client order.
    pub per_client: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub chosen: GridPoint,
    pub scores: Vec<GridScore>,
}

/// Pick the best average score. Accuracy is maximised, loss minimised; ties
/// keep the earliest point.
pub fn select_best(scores: &[GridScore], kind: ModelKind) -> Result<GridPoint> {
    let mut best: Option<&GridScore> = None;
    for s in scores {
        let better = match best {
            None => true,
            Some(b) => match kind {
                ModelKind::Classifier => s.mean > b.mean,
                ModelKind::Autoencoder => s.mean < b.mean,
            },
        };
        if better {
            best = Some(s);
        }
    }
    best.map(|s| s.point)
        .ok_or(Error::Empty("hyper-parameter grid"))
}

fn split_client(client: &Client) -> Result<(Client, crate::neuralnet::Batch)> {
    let n = client.n();
    let n_val = ((n as f64) * VALIDATION_FRACTION).floor() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::EmptyPart {
            available: n,
            parts: 2,
        });
    }
    let (fit, val) = client.train.split_at(n - n_val);
    Ok((
        Client {
            train: fit,
            ..client.clone()
        },
        val,
    ))
}

/// Run the search. `config` controls the short training run done for each
/// grid point; `seed` fixes the initial models.
pub fn collaborative_grid_search(
    clients: &[Client],
    grid: &[GridPoint],
    kind: ModelKind,
    config: &FederationConfig,
    seed: u64,
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(Error::Empty("hyper-parameter grid"));
    }
    let first = clients.first().ok_or(Error::Empty("client list"))?;
    let input_dim = first.train.inputs.cols();
    let (fit, val): (Vec<Client>, Vec<_>) = clients
        .iter()
        .map(split_client)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();

    let mut scores = Vec::with_capacity(grid.len());
    for (i, point) in grid.iter().enumerate() {
        let arch = ArchitectureSpec::preset(kind, point.preset, input_dim)?;
        let initial = init_model(&arch, seed::derive(seed, &[seed::role::GRID, i as u64]));
        let mut cfg = config.clone();
        cfg.optimizer.l2_lambda = point.l2_lambda;
        let outcome = run_federated(&fit, initial, &cfg, &mut no_observer())?;
        let per_client = val
            .iter()
            .map(|v| match kind {
                ModelKind::Classifier => validation_accuracy(&outcome.model, v),
                // Data term only, so that λ does not bias the comparison.
                ModelKind::Autoencoder => loss(&outcome.model, v, 0.0),
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = per_client.iter().sum::<f64>() / per_client.len() as f64;
        scores.push(GridScore {
            point: *point,
            per_client,
            mean,
        });
    }
    Ok(GridOutcome {
        chosen: select_best(&scores, kind)?,
        scores,
    })
}

fn validation_accuracy(
    model: &crate::neuralnet::ModelParameters,
    val: &crate::neuralnet::Batch,
) -> Result<f64> {
    let labels = val
        .labels
        .as_ref()
        .ok_or(Error::MissingLabel { seq_index: 0 })?;
    let predicted = predict_labels(model, &val.inputs)?;
    let correct = predicted
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| p == (y == 1.0))
        .count();
    Ok(correct as f64 / labels.len() as f64)
}
