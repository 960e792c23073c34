//! Federated averaging: client sampling, weighted aggregation, IID and
//! non-IID partitioning, and in-process round execution.
//!
//! Every client trains from the broadcast weights with a fresh optimizer and
//! the run's GAN seed, numbering its local epochs globally as
//! `(round − 1)·E + e`. A single client with `α = 1` therefore replays a
//! centralized run of `R·E` epochs whose optimizers reset every `E` epochs.

mod aggregate;
mod partition;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledImageSet;
use crate::gan::{train, Gan, GanConfig, GanError, NoSink};
use crate::models::{ModelError, ParamVector};

pub use aggregate::{clients_per_round, fedavg_aggregate, sample_clients, Aggregate};
pub use partition::{partition, ClientComposition, Partition, PartitionMode};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: GanError,
    },
    #[error("round {round}: {reason}")]
    Round { round: usize, reason: String },
    #[error("audit log: {0}")]
    Audit(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportMode {
    InProcess,
    Networked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_fraction: f64,
    pub seed: u64,
    pub mode: TransportMode,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 4,
            rounds: 10,
            local_epochs: 4,
            client_fraction: 1.0,
            seed: 0,
            mode: TransportMode::InProcess,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.num_clients == 0 {
            return Err(FedError::Invalid("num_clients must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(FedError::Invalid("rounds must be at least 1".into()));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(FedError::Invalid(format!(
                "client_fraction {} outside (0, 1]",
                self.client_fraction
            )));
        }
        Ok(())
    }

    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.num_clients, self.client_fraction)
    }
}

/// One client's result for a round.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: usize,
    pub samples: usize,
    pub params: ParamVector,
    pub loss_d: f64,
    pub loss_g: f64,
}

/// Trains a copy of `template` loaded with `global` for `local_epochs` on
/// `data`. Zero epochs echo the global weights.
pub fn local_train(
    template: &Gan,
    global: &ParamVector,
    data: &LabeledImageSet,
    gan_cfg: &GanConfig,
    round: usize,
    local_epochs: usize,
    client: usize,
) -> Result<ClientUpdate, FedError> {
    let fail = |source| FedError::Client { client, source };
    if round == 0 {
        return Err(FedError::Invalid("rounds are numbered from 1".into()));
    }
    let mut gan = template.clone();
    gan.unflatten(global).map_err(fail)?;
    if local_epochs == 0 {
        return Ok(ClientUpdate {
            client,
            samples: data.len(),
            params: global.clone(),
            loss_d: 0.0,
            loss_g: 0.0,
        });
    }
    let cfg = GanConfig {
        epochs: local_epochs,
        optimizer_reset_every: None,
        ..gan_cfg.clone()
    };
    let history = train(&mut gan, data, &cfg, (round - 1) * local_epochs, &mut NoSink).map_err(fail)?;
    let n = history.records.len() as f64;
    Ok(ClientUpdate {
        client,
        samples: data.len(),
        params: gan.flatten(),
        loss_d: history.records.iter().map(|r| r.loss_d).sum::<f64>() / n,
        loss_g: history.records.iter().map(|r| r.loss_g).sum::<f64>() / n,
    })
}

/// Per-client line of a [`RoundResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub samples: usize,
    pub weight: f64,
    pub checksum: String,
    pub loss_d: f64,
    pub loss_g: f64,
}

#[derive(Clone, Debug)]
pub struct RoundResult {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub updates: Vec<ClientUpdate>,
    /// FedAvg coefficient of each update, aligned with `updates`.
    pub weights: Vec<f64>,
    pub aggregate: ParamVector,
    /// Attempts needed to complete the round (networked mode retries).
    pub attempts: usize,
}

/// Audit form of a round: everything except the weight vectors themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundAudit {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub clients: Vec<ClientRecord>,
    pub aggregate_checksum: String,
    pub attempts: usize,
}

impl RoundResult {
    /// Aggregates `updates` (any order) into a round record sorted by client.
    pub fn assemble(round: usize, sampled: Vec<usize>, mut updates: Vec<ClientUpdate>) -> Result<Self, FedError> {
        updates.sort_by_key(|u| u.client);
        let got: Vec<usize> = updates.iter().map(|u| u.client).collect();
        if got != sampled {
            return Err(FedError::Round {
                round,
                reason: format!("expected updates from {sampled:?}, got {got:?}"),
            });
        }
        let contributions: Vec<(usize, &ParamVector)> = updates.iter().map(|u| (u.samples, &u.params)).collect();
        let agg = fedavg_aggregate(&contributions)?;
        Ok(RoundResult {
            round,
            sampled,
            updates,
            weights: agg.weights,
            aggregate: agg.params,
            attempts: 1,
        })
    }

    pub fn audit(&self) -> RoundAudit {
        RoundAudit {
            round: self.round,
            sampled: self.sampled.clone(),
            clients: self
                .updates
                .iter()
                .zip(&self.weights)
                .map(|(u, &weight)| ClientRecord {
                    client: u.client,
                    samples: u.samples,
                    weight,
                    checksum: u.params.checksum_hex(),
                    loss_d: u.loss_d,
                    loss_g: u.loss_g,
                })
                .collect(),
            aggregate_checksum: self.aggregate.checksum_hex(),
            attempts: self.attempts,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_audit_line<W: Write, T: Serialize>(out: &mut W, record: &T) -> Result<(), FedError> {
    let line = serde_json::to_string(record).map_err(|e| FedError::Invalid(format!("audit encoding: {e}")))?;
    writeln!(out, "{line}")?;
    out.flush()?;
    Ok(())
}

/// One in-process round: sampled clients train concurrently from `global`
/// on their own partitions, then their weights are averaged.
pub fn run_round(
    template: &Gan,
    global: &ParamVector,
    clients: &[LabeledImageSet],
    fed: &FedConfig,
    gan_cfg: &GanConfig,
    round: usize,
) -> Result<RoundResult, FedError> {
    if clients.len() != fed.num_clients {
        return Err(FedError::Invalid(format!(
            "{} partitions for {} clients",
            clients.len(),
            fed.num_clients
        )));
    }
    let sampled = sample_clients(fed.num_clients, fed.client_fraction, fed.seed, round)?;
    let results: Vec<Result<ClientUpdate, FedError>> = std::thread::scope(|s| {
        let handles: Vec<_> = sampled
            .iter()
            .map(|&c| {
                let data = &clients[c];
                s.spawn(move || local_train(template, global, data, gan_cfg, round, fed.local_epochs, c))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(FedError::Invalid("client thread panicked".into())))
            })
            .collect()
    });
    let updates = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    RoundResult::assemble(round, sampled, updates)
}

#[derive(Clone, Debug)]
pub struct FedOutcome {
    pub initial: ParamVector,
    pub final_params: ParamVector,
    pub rounds: Vec<RoundResult>,
}

/// Runs `fed.rounds` in-process rounds from the initial weights of
/// `template`, calling `on_round` after each aggregation.
pub fn run_training(
    template: &Gan,
    clients: &[LabeledImageSet],
    fed: &FedConfig,
    gan_cfg: &GanConfig,
    on_round: &mut dyn FnMut(&RoundResult) -> Result<(), FedError>,
) -> Result<FedOutcome, FedError> {
    fed.validate()?;
    gan_cfg
        .validate()
        .map_err(|source| FedError::Client { client: 0, source })?;
    let initial = template.flatten();
    let mut global = initial.clone();
    let mut rounds = Vec::with_capacity(fed.rounds);
    for r in 1..=fed.rounds {
        let result = run_round(template, &global, clients, fed, gan_cfg, r)?;
        on_round(&result)?;
        global = result.aggregate.clone();
        log::info!(
            "round {r}/{}: clients {:?}, aggregate {}",
            fed.rounds,
            result.sampled,
            &result.aggregate.checksum_hex()[..12]
        );
        rounds.push(result);
    }
    Ok(FedOutcome {
        initial,
        final_params: global,
        rounds,
    })
}

/// Centralized configuration equivalent to a one-client federation.
pub fn centralized_equivalent(fed: &FedConfig, gan_cfg: &GanConfig) -> GanConfig {
    GanConfig {
        epochs: fed.rounds * fed.local_epochs,
        optimizer_reset_every: Some(fed.local_epochs.max(1)),
        ..gan_cfg.clone()
    }
}
