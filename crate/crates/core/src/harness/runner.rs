//! Fold × repetition execution of an experiment.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{select_malicious, AttackSpec, Behaviour};
use crate::aggregation::AggregationSpec;
use crate::dataset::{
    chronological_split, generate_synthetic_fleet, load_manifest, rebalance, DevicePartition,
    DeviceStream, Mode,
};
use crate::error::{Error, Result};
use crate::federation::{
    batch_from_samples, collaborative_grid_search, evaluate, global_threshold, local_threshold,
    mean_plus_std, preset_grid, run_federated, train_local, Algorithm, Client, Confusion,
    Evaluation, FederationConfig, GridPoint, RoundMetrics, RoundRecord, StdKind,
};
use crate::neuralnet::{
    init_model, mse_per_sample, ArchitectureSpec, Batch, Matrix, ModelParameters, OptimizerConfig,
};
use crate::preprocess::{local_min_max, merge_bounds, ScalingBounds};
use crate::seed;

use super::config::{Approach, DataSource, ExperimentConfig};

/// One (fold, repetition) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub fold: usize,
    /// Index of the device held out from the federation.
    pub held_out: usize,
    pub repetition: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Training hit a non-finite value; excluded from means.
    Aborted,
}

/// One approach evaluated in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub approach: Approach,
    pub fold: usize,
    pub held_out_device: String,
    pub repetition: usize,
    /// Seed of the cell; re-running the cell with it reproduces the row.
    pub seed: u64,
    pub attack: AttackSpec,
    pub malicious_clients: Vec<usize>,
    pub aggregation: String,
    pub preset: String,
    pub l2_lambda: f64,
    pub model_dim: usize,
    pub transmissions_per_client: usize,
    pub local_steps_per_client: usize,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Evaluation>,
}

impl RunRow {
    /// File stem used for this run's round log.
    pub fn log_key(&self) -> String {
        let mut key = format!(
            "{}_fold{}_rep{}",
            self.approach.name(),
            self.fold,
            self.repetition
        );
        if self.attack.is_active() {
            key.push_str(&format!("_{}_f{}", self.attack.kind.name(), self.attack.f));
        }
        if self.aggregation != "AVG" {
            let tag: String = self
                .aggregation
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
                .collect();
            key.push('_');
            key.push_str(&tag);
        }
        key
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub key: String,
    pub seconds: f64,
}

/// Everything produced by one experiment.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub runs: Vec<RunRow>,
    /// Round logs keyed by [`RunRow::log_key`].
    pub rounds: Vec<(String, Vec<RoundRecord>)>,
    pub timings: Vec<RunTiming>,
}

impl RunOutput {
    pub fn extend(&mut self, other: RunOutput) {
        self.runs.extend(other.runs);
        self.rounds.extend(other.rounds);
        self.timings.extend(other.timings);
    }
}

/// Load or generate the raw device streams named by the config.
pub fn load_streams(config: &ExperimentConfig) -> Result<Vec<DeviceStream>> {
    let streams = match &config.data {
        DataSource::Synthetic { spec, seed } => {
            generate_synthetic_fleet(spec, seed.unwrap_or(config.seed))?
        }
        DataSource::Manifest {
            path,
            has_header,
            feature_columns,
        } => load_manifest(path, *feature_columns, *has_header)?,
    };
    if streams.len() < 2 {
        return Err(Error::config(format!(
            "need at least two devices (clients plus one held out), found {}",
            streams.len()
        )));
    }
    Ok(streams)
}

pub fn cells(config: &ExperimentConfig, n_devices: usize) -> Result<Vec<Cell>> {
    let folds: Vec<usize> = match &config.folds {
        Some(f) => f.clone(),
        None => (0..n_devices).collect(),
    };
    if let Some(bad) = folds.iter().find(|&&f| f >= n_devices) {
        return Err(Error::config(format!(
            "fold {bad} is not a device index (n = {n_devices})"
        )));
    }
    Ok(folds
        .iter()
        .enumerate()
        .flat_map(|(fold, &held_out)| {
            (0..config.repetitions).map(move |repetition| Cell {
                fold,
                held_out,
                repetition,
                seed: seed::derive(config.seed, &[fold as u64, repetition as u64]),
            })
        })
        .collect())
}

/// Run every approach of `config` on every cell.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let streams = load_streams(config)?;
    run_on_streams(config, &streams)
}

pub fn run_on_streams(config: &ExperimentConfig, streams: &[DeviceStream]) -> Result<RunOutput> {
    config.validate()?;
    config.attack.validate(streams.len() - 1)?;
    config.aggregation.validate(streams.len() - 1)?;
    let cells = cells(config, streams.len())?;
    let outputs = cells
        .par_iter()
        .map(|cell| run_cell(config, streams, *cell))
        .collect::<Result<Vec<_>>>()?;
    let mut all = RunOutput::default();
    for out in outputs {
        all.extend(out);
    }
    Ok(all)
}

/// Partitions of one cell: the K clients in device order, then the held-out device.
struct CellData {
    clients: Vec<DevicePartition>,
    held_out: DevicePartition,
}

fn prepare(config: &ExperimentConfig, streams: &[DeviceStream], cell: Cell) -> Result<CellData> {
    let mut parts = streams
        .iter()
        .enumerate()
        .map(|(device, stream)| {
            let split = chronological_split(&stream.device_id, &stream.samples, config.mode)?;
            rebalance(
                &split,
                &config.balance,
                config.mode,
                seed::derive(cell.seed, &[seed::role::PARTITION, device as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let held_out = parts.remove(cell.held_out);
    Ok(CellData {
        clients: parts,
        held_out,
    })
}

/// Scaled tensors for one set of bounds.
struct Scaled {
    train: Vec<Batch>,
    threshold_sets: Vec<Matrix>,
    tests: Vec<Batch>,
    new_device: Batch,
}

fn scale_cell(data: &CellData, bounds: &ScalingBounds, labeled_train: bool) -> Result<Scaled> {
    let scale = |part: fn(&DevicePartition) -> &Vec<crate::dataset::Sample>, labeled: bool| {
        data.clients
            .iter()
            .map(|p| batch_from_samples(part(p), bounds, labeled))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Scaled {
        train: scale(|p| &p.train, labeled_train)?,
        threshold_sets: scale(|p| &p.threshold_sel, false)?
            .into_iter()
            .map(|b| b.inputs)
            .collect(),
        tests: scale(|p| &p.test, true)?,
        new_device: batch_from_samples(&data.held_out.test, bounds, true)?,
    })
}

struct CellContext<'a> {
    config: &'a ExperimentConfig,
    cell: Cell,
    held_out_id: String,
    arch: ArchitectureSpec,
    point: GridPoint,
    initial: ModelParameters,
    std: StdKind,
}

impl CellContext<'_> {
    fn optimizer(&self, batch_size: usize) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.config.training.learning_rate(self.config.mode),
            l2_lambda: self.point.l2_lambda,
            batch_size,
        }
    }

    fn supervised(&self) -> bool {
        self.config.mode == Mode::Supervised
    }

    fn should_eval(&self, round: usize) -> bool {
        let every = self.config.training.eval_every;
        every > 0 && (round + 1) % every == 0
    }

    fn row(&self, approach: Approach) -> RunRow {
        RunRow {
            approach,
            fold: self.cell.fold,
            held_out_device: self.held_out_id.clone(),
            repetition: self.cell.repetition,
            seed: self.cell.seed,
            attack: if approach.is_federated() {
                self.config.attack
            } else {
                AttackSpec::none()
            },
            malicious_clients: Vec::new(),
            aggregation: if approach.is_federated() {
                self.config.aggregation.label()
            } else {
                AggregationSpec::AVG.label()
            },
            preset: self.point.preset.to_string(),
            l2_lambda: self.point.l2_lambda,
            model_dim: self.arch.param_count(),
            transmissions_per_client: 0,
            local_steps_per_client: 0,
            status: RunStatus::Completed,
            error: None,
            threshold: None,
            evaluation: None,
        }
    }
}

fn client_seed(cell: Cell, k: usize) -> u64 {
    seed::derive(cell.seed, &[seed::role::CLIENT, k as u64])
}

fn run_cell(config: &ExperimentConfig, streams: &[DeviceStream], cell: Cell) -> Result<RunOutput> {
    let data = prepare(config, streams, cell)?;
    let k = data.clients.len();
    let labeled_train = config.mode == Mode::Supervised;

    let global_bounds = merge_bounds(
        &data
            .clients
            .iter()
            .map(|p| local_min_max(&p.train))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let global = scale_cell(&data, &global_bounds, labeled_train)?;

    let malicious = if config.attack.is_active() {
        let mut rng = seed::derived_rng(cell.seed, &[seed::role::MALICIOUS_SELECTION]);
        select_malicious(k, config.attack.f, &mut rng)
    } else {
        Vec::new()
    };
    let behaviour = config.attack.behaviour(k)?;
    let clients: Vec<Client> = data
        .clients
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let role = if malicious.contains(&i) {
                behaviour
            } else {
                Behaviour::Honest
            };
            Client::new(
                i,
                &p.train,
                &global_bounds,
                labeled_train,
                role,
                client_seed(cell, i),
            )
        })
        .collect::<Result<_>>()?;

    let kind = config.kind();
    let input_dim = global_bounds.dim();
    let point = if config.model.grid_search {
        let grid_config = federation_config(config, Algorithm::MiniBatch, cell, 0.0)?;
        let grid_config = FederationConfig {
            epochs: config.model.grid_epochs,
            ..grid_config
        };
        let grid = preset_grid(kind);
        collaborative_grid_search(
            &clients,
            &grid,
            kind,
            &grid_config,
            seed::derive(cell.seed, &[seed::role::GRID]),
        )?
        .chosen
    } else {
        GridPoint {
            preset: config.model.preset.expect("validated"),
            l2_lambda: config.training.l2_lambda,
        }
    };
    let arch = ArchitectureSpec::preset(kind, point.preset, input_dim)?;
    let ctx = CellContext {
        config,
        cell,
        held_out_id: data.held_out.device_id.clone(),
        initial: init_model(&arch, seed::derive(cell.seed, &[seed::role::INIT])),
        arch,
        point,
        std: config.training.threshold_std,
    };

    let mut out = RunOutput::default();
    for &approach in &config.approaches {
        let started = Instant::now();
        let mut row = ctx.row(approach);
        let result = match approach {
            Approach::MiniBatch | Approach::MultiEpoch => {
                row.malicious_clients = malicious.clone();
                run_federated_approach(&ctx, approach, &clients, &global, &mut row)
            }
            Approach::Centralized => run_centralized(&ctx, &global, &mut row),
            Approach::Naive => run_naive(&ctx, &data, labeled_train, &mut row),
        };
        let rounds = match result {
            Ok(rounds) => rounds,
            Err(e @ Error::PoisonedUpdate { .. }) => {
                row.status = RunStatus::Aborted;
                row.error = Some(e.to_string());
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        let key = row.log_key();
        if config.training.log_rounds {
            out.rounds.push((key.clone(), rounds));
        }
        out.timings.push(RunTiming {
            key,
            seconds: started.elapsed().as_secs_f64(),
        });
        out.runs.push(row);
    }
    Ok(out)
}

fn federation_config(
    config: &ExperimentConfig,
    algorithm: Algorithm,
    cell: Cell,
    l2_lambda: f64,
) -> Result<FederationConfig> {
    let t = &config.training;
    Ok(FederationConfig {
        algorithm,
        epochs: t.epochs,
        rounds: t.rounds,
        optimizer: OptimizerConfig {
            learning_rate: t.learning_rate(config.mode),
            l2_lambda,
            batch_size: match algorithm {
                Algorithm::MiniBatch => t.mini_batch_size(),
                Algorithm::MultiEpoch => t.batch_size,
            },
        },
        lr_decay: t.lr_decay,
        aggregation: config.aggregation,
        dropout: t.dropout,
        server_seed: seed::derive(cell.seed, &[seed::role::SERVER]),
    })
}

/// Each client's mean + std on its own threshold set, averaged by the server.
fn federated_threshold(model: &ModelParameters, sets: &[Matrix], std: StdKind) -> Result<f64> {
    let locals = sets
        .iter()
        .map(|x| local_threshold(model, x, std))
        .collect::<Result<Vec<_>>>()?;
    global_threshold(&locals)
}

fn run_federated_approach(
    ctx: &CellContext<'_>,
    approach: Approach,
    clients: &[Client],
    data: &Scaled,
    row: &mut RunRow,
) -> Result<Vec<RoundRecord>> {
    let algorithm = match approach {
        Approach::MiniBatch => Algorithm::MiniBatch,
        _ => Algorithm::MultiEpoch,
    };
    let config = federation_config(ctx.config, algorithm, ctx.cell, ctx.point.l2_lambda)?;
    let supervised = ctx.supervised();
    let mut observer = |record: &mut RoundRecord, model: &ModelParameters| -> Result<()> {
        if ctx.should_eval(record.round) {
            let threshold = if supervised {
                None
            } else {
                Some(federated_threshold(model, &data.threshold_sets, ctx.std)?)
            };
            record.threshold = threshold;
            record.metrics = Some(evaluate(
                model,
                threshold,
                &data.tests,
                Some(&data.new_device),
            )?);
        }
        Ok(())
    };
    let outcome = run_federated(clients, ctx.initial.clone(), &config, &mut observer)?;
    let threshold = if supervised {
        None
    } else {
        Some(federated_threshold(
            &outcome.model,
            &data.threshold_sets,
            ctx.std,
        )?)
    };
    row.threshold = threshold;
    row.evaluation = Some(evaluate(
        &outcome.model,
        threshold,
        &data.tests,
        Some(&data.new_device),
    )?);
    row.transmissions_per_client = outcome.transmissions.iter().copied().max().unwrap_or(0);
    row.local_steps_per_client = outcome.local_steps.iter().copied().max().unwrap_or(0);
    Ok(outcome.rounds)
}

fn pooled_threshold(model: &ModelParameters, sets: &[Matrix], std: StdKind) -> Result<f64> {
    let mut errors = Vec::new();
    for x in sets {
        errors.extend(mse_per_sample(model, x)?);
    }
    mean_plus_std(&errors, std)
}

fn run_centralized(
    ctx: &CellContext<'_>,
    data: &Scaled,
    row: &mut RunRow,
) -> Result<Vec<RoundRecord>> {
    let train = Batch::concat(&data.train.iter().collect::<Vec<_>>())?;
    let optimizer = ctx.optimizer(ctx.config.training.batch_size);
    let supervised = ctx.supervised();
    let mut observer = |record: &mut RoundRecord, model: &ModelParameters| -> Result<()> {
        if ctx.should_eval(record.round) {
            let threshold = if supervised {
                None
            } else {
                Some(pooled_threshold(model, &data.threshold_sets, ctx.std)?)
            };
            record.threshold = threshold;
            record.metrics = Some(evaluate(
                model,
                threshold,
                &data.tests,
                Some(&data.new_device),
            )?);
        }
        Ok(())
    };
    let outcome = train_local(
        &train,
        ctx.initial.clone(),
        &optimizer,
        ctx.config.training.local_epochs(),
        seed::derive(ctx.cell.seed, &[seed::role::SHUFFLE]),
        &mut observer,
    )?;
    let threshold = if supervised {
        None
    } else {
        Some(pooled_threshold(
            &outcome.model,
            &data.threshold_sets,
            ctx.std,
        )?)
    };
    row.threshold = threshold;
    row.evaluation = Some(evaluate(
        &outcome.model,
        threshold,
        &data.tests,
        Some(&data.new_device),
    )?);
    row.local_steps_per_client = outcome.local_steps[0];
    Ok(outcome.rounds)
}

/// Field-wise mean of per-client metrics; confusion counts are summed.
pub fn mean_metrics(items: &[RoundMetrics]) -> RoundMetrics {
    let n = items.len().max(1) as f64;
    let sum = |f: fn(&RoundMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    RoundMetrics {
        accuracy: sum(|m| m.accuracy),
        tpr: sum(|m| m.tpr),
        tnr: sum(|m| m.tnr),
        f1: sum(|m| m.f1),
        confusion: items
            .iter()
            .fold(Confusion::default(), |acc, m| acc.merge(&m.confusion)),
    }
}

/// Each client trains alone with its own bounds and is tested on its own
/// test part and on the held-out device; the reported metrics are the
/// averages over clients.
fn run_naive(
    ctx: &CellContext<'_>,
    data: &CellData,
    labeled_train: bool,
    row: &mut RunRow,
) -> Result<Vec<RoundRecord>> {
    let optimizer = ctx.optimizer(ctx.config.training.batch_size);
    let supervised = ctx.supervised();
    let per_client = data
        .clients
        .par_iter()
        .enumerate()
        .map(|(k, partition)| {
            let bounds = local_min_max(&partition.train)?;
            let own = CellData {
                clients: vec![partition.clone()],
                held_out: data.held_out.clone(),
            };
            let scaled = scale_cell(&own, &bounds, labeled_train)?;
            let threshold_for = |model: &ModelParameters| -> Result<Option<f64>> {
                if supervised {
                    Ok(None)
                } else {
                    local_threshold(model, &scaled.threshold_sets[0], ctx.std).map(Some)
                }
            };
            let mut observer = |record: &mut RoundRecord, model: &ModelParameters| -> Result<()> {
                if ctx.should_eval(record.round) {
                    let threshold = threshold_for(model)?;
                    record.threshold = threshold;
                    record.metrics = Some(evaluate(
                        model,
                        threshold,
                        &scaled.tests,
                        Some(&scaled.new_device),
                    )?);
                }
                Ok(())
            };
            let outcome = train_local(
                &scaled.train[0],
                ctx.initial.clone(),
                &optimizer,
                ctx.config.training.local_epochs(),
                seed::derive(client_seed(ctx.cell, k), &[seed::role::SHUFFLE]),
                &mut observer,
            )?;
            let threshold = threshold_for(&outcome.model)?;
            let evaluation = evaluate(
                &outcome.model,
                threshold,
                &scaled.tests,
                Some(&scaled.new_device),
            )?;
            Ok((outcome, threshold, evaluation))
        })
        .collect::<Result<Vec<_>>>()?;

    let evaluations: Vec<&Evaluation> = per_client.iter().map(|(_, _, e)| e).collect();
    row.evaluation = Some(mean_evaluation(&evaluations));
    let thresholds: Vec<f64> = per_client.iter().filter_map(|(_, t, _)| *t).collect();
    if !thresholds.is_empty() {
        row.threshold = Some(thresholds.iter().sum::<f64>() / thresholds.len() as f64);
    }
    row.local_steps_per_client = per_client[0].0.local_steps[0];

    // Round log: per-epoch averages over clients.
    let epochs = per_client[0].0.rounds.len();
    let rounds = (0..epochs)
        .map(|e| {
            let records: Vec<&RoundRecord> =
                per_client.iter().map(|(o, _, _)| &o.rounds[e]).collect();
            let metrics: Vec<&Evaluation> =
                records.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let thresholds: Vec<f64> = records.iter().filter_map(|r| r.threshold).collect();
            RoundRecord {
                round: e,
                epoch: records[0].epoch,
                lr: records[0].lr,
                client_losses: records.iter().map(|r| r.client_losses[0]).collect(),
                metrics: (!metrics.is_empty()).then(|| mean_evaluation(&metrics)),
                threshold: (!thresholds.is_empty())
                    .then(|| thresholds.iter().sum::<f64>() / thresholds.len() as f64),
            }
        })
        .collect();
    Ok(rounds)
}

/// Naive-approach aggregate: each client contributes its own-device test as
/// its "known" score, so `per_device` lists those and `known` is their mean.
fn mean_evaluation(items: &[&Evaluation]) -> Evaluation {
    let own: Vec<RoundMetrics> = items.iter().map(|e| e.known).collect();
    let new: Vec<RoundMetrics> = items.iter().filter_map(|e| e.new_device).collect();
    Evaluation {
        known: mean_metrics(&own),
        per_device: own,
        new_device: (!new.is_empty()).then(|| mean_metrics(&new)),
    }
}
