//! The two federated training loops and plain local SGD.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{apply_gradient_factor, cancel_update, flip_labels, Behaviour};
use crate::aggregation::{aggregate, AggregationSpec};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::neuralnet::{
    loss_and_gradient, sgd_step, Batch, Matrix, ModelParameters, OptimizerConfig,
};
use crate::preprocess::ScalingBounds;
use crate::seed;

use super::metrics::Evaluation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// One local mini-batch step per aggregation.
    MiniBatch,
    /// `epochs` full local epochs per round, for `rounds` rounds.
    MultiEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub epochs: usize,
    /// Multi-epoch rounds `T`.
    pub rounds: usize,
    /// Per-client batch size, initial learning rate and L2 strength.
    pub optimizer: OptimizerConfig,
    /// Multiplicative learning-rate decay per multi-epoch round.
    pub lr_decay: f64,
    pub aggregation: AggregationSpec,
    /// Probability that a client misses a given aggregation.
    pub dropout: f64,
    /// Seed for the server's own randomness (resampling, dropout).
    pub server_seed: u64,
}

impl FederationConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::config("a federation needs at least one client"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.algorithm == Algorithm::MultiEpoch && self.rounds == 0 {
            return Err(Error::config(
                "multi-epoch aggregation needs at least one round",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::config("lr_decay must be positive"));
        }
        self.optimizer.validate()?;
        self.aggregation.validate(k)
    }

    /// Learning rate used during multi-epoch round `round`.
    pub fn round_lr(&self, round: usize) -> f64 {
        self.optimizer.learning_rate * self.lr_decay.powi(round as i32)
    }
}

/// Scaled features (and binary labels when present) as a dense batch.
pub fn batch_from_samples(
    samples: &[Sample],
    bounds: &ScalingBounds,
    labeled: bool,
) -> Result<Batch> {
    let rows = samples
        .iter()
        .map(|s| bounds.scale_features(&s.features))
        .collect::<Result<Vec<_>>>()?;
    let inputs = if rows.is_empty() {
        Matrix::zeros(0, bounds.dim())
    } else {
        Matrix::from_rows(&rows)?
    };
    if !labeled {
        return Ok(Batch::unlabeled(inputs));
    }
    let labels = samples
        .iter()
        .map(|s| {
            s.label
                .map(|l| f64::from(l.bit()))
                .ok_or(Error::MissingLabel {
                    seq_index: s.seq_index,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::labeled(inputs, labels)
}

/// Per-client epoch shuffling: a fresh seeded permutation every epoch, cut
/// into consecutive batches (the last one may be short).
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        EpochSampler {
            n,
            batch_size,
            rng: seed::rng(seed),
            order: Vec::new(),
            pos: n,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Indices of the next batch; starts a new epoch when the previous one is spent.
    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos >= self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos = (start + self.batch_size).min(self.n);
        &self.order[start..self.pos]
    }
}

/// One federation participant.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub train: Batch,
    pub behaviour: Behaviour,
    /// Seed of the client's shuffling stream.
    pub shuffle_seed: u64,
}

impl Client {
    /// Build a client from its (rebalanced) train samples. Label-flipping
    /// clients poison their copy of the data here, before any training.
    pub fn new(
        id: usize,
        train: &[Sample],
        bounds: &ScalingBounds,
        labeled: bool,
        behaviour: Behaviour,
        seed: u64,
    ) -> Result<Client> {
        if train.is_empty() {
            return Err(Error::Empty("client train set"));
        }
        let poisoned;
        let samples = match behaviour {
            Behaviour::FlipLabels { kind, p_poison } => {
                if !labeled {
                    return Err(Error::config("label flipping needs labeled data"));
                }
                let mut rng = seed::derived_rng(seed, &[seed::role::ATTACK]);
                poisoned = flip_labels(train, kind, p_poison, &mut rng)?;
                &poisoned[..]
            }
            _ => train,
        };
        Ok(Client {
            id,
            train: batch_from_samples(samples, bounds, labeled)?,
            behaviour,
            shuffle_seed: seed::derive(seed, &[seed::role::SHUFFLE]),
        })
    }

    pub fn n(&self) -> usize {
        self.train.len()
    }

    pub fn sampler(&self, batch_size: usize) -> EpochSampler {
        EpochSampler::new(self.n(), batch_size, self.shuffle_seed)
    }
}

/// Per-aggregation log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Aggregation index, from 0.
    pub round: usize,
    /// Data epochs completed after this aggregation.
    pub epoch: f64,
    pub lr: f64,
    /// Mean training loss of each client during the round; `None` when the
    /// client dropped out or did not train.
    pub client_losses: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Evaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

pub struct TrainingOutcome {
    pub model: ModelParameters,
    pub rounds: Vec<RoundRecord>,
    /// Models sent to the server by each client.
    pub transmissions: Vec<usize>,
    /// Local SGD steps taken by each client.
    pub local_steps: Vec<usize>,
}

/// Called after every aggregation with the new global model. May fill in
/// `metrics` / `threshold`.
pub type Observer<'a> = dyn FnMut(&mut RoundRecord, &ModelParameters) -> Result<()> + 'a;

pub fn no_observer() -> impl FnMut(&mut RoundRecord, &ModelParameters) -> Result<()> {
    |_, _| Ok(())
}

struct ClientUpdate {
    model: ModelParameters,
    loss: Option<f64>,
    steps: usize,
}

fn local_step(
    model: &ModelParameters,
    batch: &Batch,
    optimizer: &OptimizerConfig,
    lr: f64,
    behaviour: &Behaviour,
) -> Result<(ModelParameters, f64)> {
    let (loss, gradient) = loss_and_gradient(model, batch, optimizer.l2_lambda)?;
    let gradient = match behaviour {
        Behaviour::ScaleGradient { alpha } => apply_gradient_factor(&gradient, *alpha),
        _ => gradient,
    };
    Ok((sgd_step(model, &gradient, lr)?, loss))
}

fn client_round(
    client: &Client,
    sampler: &mut EpochSampler,
    global: &ModelParameters,
    optimizer: &OptimizerConfig,
    lr: f64,
    steps: usize,
) -> Result<ClientUpdate> {
    if let Behaviour::CancelModel { alpha } = client.behaviour {
        return Ok(ClientUpdate {
            model: cancel_update(global, alpha),
            loss: None,
            steps: 0,
        });
    }
    let mut model = global.clone();
    let mut total_loss = 0.0;
    for _ in 0..steps {
        let batch = client.train.select(sampler.next_batch());
        let (next, loss) = local_step(&model, &batch, optimizer, lr, &client.behaviour)?;
        model = next;
        total_loss += loss;
    }
    Ok(ClientUpdate {
        model,
        loss: Some(total_loss / steps.max(1) as f64),
        steps,
    })
}

fn check_clients(
    clients: &[Client],
    initial: &ModelParameters,
    config: &FederationConfig,
) -> Result<()> {
    config.validate(clients.len())?;
    for c in clients {
        if c.train.inputs.cols() != initial.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: initial.arch.input_dim,
                found: c.train.inputs.cols(),
            });
        }
    }
    Ok(())
}

/// Run one synchronous round: every participating client trains from the
/// current global model, then the server aggregates in client-id order.
#[allow(clippy::too_many_arguments)]
fn federated_round(
    clients: &[Client],
    samplers: &mut [EpochSampler],
    global: &ModelParameters,
    config: &FederationConfig,
    lr: f64,
    steps: usize,
    server_rng: &mut ChaCha8Rng,
    transmissions: &mut [usize],
    local_steps: &mut [usize],
) -> Result<(ModelParameters, Vec<Option<f64>>)> {
    let present: Vec<bool> = clients
        .iter()
        .map(|_| config.dropout == 0.0 || !server_rng.random_bool(config.dropout))
        .collect();
    let updates: Vec<Option<Result<ClientUpdate>>> = clients
        .par_iter()
        .zip(samplers.par_iter_mut())
        .zip(present.par_iter())
        .map(|((client, sampler), &here)| {
            // Absent clients still advance their data pointer to stay in lockstep.
            if !here {
                if config.algorithm == Algorithm::MiniBatch {
                    sampler.next_batch();
                }
                return None;
            }
            Some(
                client_round(client, sampler, global, &config.optimizer, lr, steps).map_err(|e| {
                    match e {
                        Error::PoisonedUpdate { .. } => Error::PoisonedUpdate {
                            client: Some(client.id),
                        },
                        other => other,
                    }
                }),
            )
        })
        .collect();

    let mut submitted = Vec::new();
    let mut losses = Vec::with_capacity(clients.len());
    for (i, update) in updates.into_iter().enumerate() {
        match update {
            Some(update) => {
                let update = update?;
                if !update.model.is_finite() {
                    return Err(Error::PoisonedUpdate {
                        client: Some(clients[i].id),
                    });
                }
                transmissions[i] += 1;
                local_steps[i] += update.steps;
                losses.push(update.loss);
                submitted.push(update.model);
            }
            None => losses.push(None),
        }
    }
    if submitted.is_empty() {
        return Ok((global.clone(), losses));
    }
    let spec = if submitted.len() < clients.len() {
        // Fewer submissions than configured: keep TM valid by shrinking c.
        let mut spec = config.aggregation;
        spec.trim_c = spec.trim_c.min((submitted.len() - 1) / 2);
        spec
    } else {
        config.aggregation
    };
    let next = aggregate(&spec, &submitted, server_rng)?;
    if !next.is_finite() {
        return Err(Error::PoisonedUpdate { client: None });
    }
    Ok((next, losses))
}

/// Mini-batch aggregation: every client takes a single SGD step on one
/// mini-batch, then the server aggregates; repeated for `epochs` passes over
/// the data (`epochs * ceil(n_k / B)` aggregations). Constant learning rate.
pub fn run_mini_batch(
    clients: &[Client],
    initial: ModelParameters,
    config: &FederationConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainingOutcome> {
    check_clients(clients, &initial, config)?;
    let mut samplers: Vec<EpochSampler> = clients
        .iter()
        .map(|c| c.sampler(config.optimizer.batch_size))
        .collect();
    let per_epoch = samplers
        .iter()
        .map(EpochSampler::batches_per_epoch)
        .max()
        .unwrap_or(0);
    let total = config.epochs * per_epoch;
    let lr = config.optimizer.learning_rate;
    let mut server_rng = seed::derived_rng(config.server_seed, &[seed::role::SERVER]);
    let mut transmissions = vec![0; clients.len()];
    let mut local_steps = vec![0; clients.len()];
    let mut global = initial;
    let mut rounds = Vec::with_capacity(total);
    for round in 0..total {
        let (next, client_losses) = federated_round(
            clients,
            &mut samplers,
            &global,
            config,
            lr,
            1,
            &mut server_rng,
            &mut transmissions,
            &mut local_steps,
        )?;
        global = next;
        let mut record = RoundRecord {
            round,
            epoch: (round + 1) as f64 / per_epoch as f64,
            lr,
            client_losses,
            metrics: None,
            threshold: None,
        };
        observer(&mut record, &global)?;
        rounds.push(record);
    }
    Ok(TrainingOutcome {
        model: global,
        rounds,
        transmissions,
        local_steps,
    })
}

/// Multi-epoch aggregation: `rounds` rounds of `epochs` full local epochs
/// each, one aggregation per round, learning rate decayed per round.
pub fn run_multi_epoch(
    clients: &[Client],
    initial: ModelParameters,
    config: &FederationConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainingOutcome> {
    check_clients(clients, &initial, config)?;
    let mut samplers: Vec<EpochSampler> = clients
        .iter()
        .map(|c| c.sampler(config.optimizer.batch_size))
        .collect();
    let steps = config.epochs
        * samplers
            .iter()
            .map(EpochSampler::batches_per_epoch)
            .max()
            .unwrap_or(0);
    let mut server_rng = seed::derived_rng(config.server_seed, &[seed::role::SERVER]);
    let mut transmissions = vec![0; clients.len()];
    let mut local_steps = vec![0; clients.len()];
    let mut global = initial;
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let lr = config.round_lr(round);
        let (next, client_losses) = federated_round(
            clients,
            &mut samplers,
            &global,
            config,
            lr,
            steps,
            &mut server_rng,
            &mut transmissions,
            &mut local_steps,
        )?;
        global = next;
        let mut record = RoundRecord {
            round,
            epoch: ((round + 1) * config.epochs) as f64,
            lr,
            client_losses,
            metrics: None,
            threshold: None,
        };
        observer(&mut record, &global)?;
        rounds.push(record);
    }
    Ok(TrainingOutcome {
        model: global,
        rounds,
        transmissions,
        local_steps,
    })
}

pub fn run_federated(
    clients: &[Client],
    initial: ModelParameters,
    config: &FederationConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainingOutcome> {
    match config.algorithm {
        Algorithm::MiniBatch => run_mini_batch(clients, initial, config, observer),
        Algorithm::MultiEpoch => run_multi_epoch(clients, initial, config, observer),
    }
}

/// Plain single-party SGD with per-epoch shuffling and a constant learning rate.
/// `observer` is called once per epoch.
pub fn train_local(
    train: &Batch,
    initial: ModelParameters,
    optimizer: &OptimizerConfig,
    epochs: usize,
    shuffle_seed: u64,
    observer: &mut Observer<'_>,
) -> Result<TrainingOutcome> {
    optimizer.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("train set"));
    }
    let mut sampler = EpochSampler::new(train.len(), optimizer.batch_size, shuffle_seed);
    let per_epoch = sampler.batches_per_epoch();
    let mut model = initial;
    let mut rounds = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for _ in 0..per_epoch {
            let batch = train.select(sampler.next_batch());
            let (next, loss) = local_step(
                &model,
                &batch,
                optimizer,
                optimizer.learning_rate,
                &Behaviour::Honest,
            )?;
            model = next;
            total += loss;
        }
        let mut record = RoundRecord {
            round: epoch,
            epoch: (epoch + 1) as f64,
            lr: optimizer.learning_rate,
            client_losses: vec![Some(total / per_epoch as f64)],
            metrics: None,
            threshold: None,
        };
        observer(&mut record, &model)?;
        rounds.push(record);
    }
    Ok(TrainingOutcome {
        model,
        rounds,
        transmissions: vec![0],
        local_steps: vec![epochs * per_epoch],
    })
}
