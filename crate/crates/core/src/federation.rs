//! Round protocol and multi-run scenarios.
//!
//! One round: every client trains from the current global parameters on its
//! own partition, the server scores each upload on its validation set
//! (`f_LA`), the aggregator combines the uploads, and the result is broadcast
//! back to every client. Training and scoring may run on a thread pool; all
//! randomness is keyed by `(master_seed, run, client, round)` and aggregation
//! reduces in rank order, so results do not depend on scheduling.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{f_la, AggregationReport, Aggregator, ClientUpdate};
use crate::data::{partition_non_iid, poison_labels, split_validation, Dataset, PartitionPlan, PoisonMode};
use crate::error::{FlError, Result};
use crate::model::{evaluate_accuracy, init_model, train_local, ModelSpec, ParamVector, TrainConfig};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub adversarial_fraction: f64,
    pub aggregator: Aggregator,
    pub model_spec: ModelSpec,
    /// `epochs` is the number of local epochs per round.
    pub train_config: TrainConfig,
    pub partition_plan: PartitionPlan,
    pub poison_mode: PoisonMode,
    pub master_seed: u64,
    /// Train and score clients on the rayon pool.
    pub parallel: bool,
}

impl FederationConfig {
    pub fn epochs_per_round(&self) -> usize {
        self.train_config.epochs
    }

    /// `floor(adversarial_fraction * n_clients)`.
    pub fn num_adversarial(&self) -> usize {
        // the epsilon keeps products such as 0.3 * 20 from flooring to 5
        (self.adversarial_fraction * self.n_clients as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(FlError::InvalidConfig("n_clients must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(FlError::InvalidConfig("rounds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adversarial_fraction) {
            return Err(FlError::InvalidConfig(format!(
                "adversarial_fraction {} is outside [0, 1)",
                self.adversarial_fraction
            )));
        }
        if self.num_adversarial() >= self.n_clients {
            return Err(FlError::InvalidConfig(format!(
                "{} adversaries leave no benign client among {}",
                self.num_adversarial(),
                self.n_clients
            )));
        }
        if self.partition_plan.n_clients != self.n_clients {
            return Err(FlError::InvalidConfig(format!(
                "partition plan is for {} clients, config has {}",
                self.partition_plan.n_clients, self.n_clients
            )));
        }
        self.model_spec.validate()?;
        self.train_config.validate()?;
        self.aggregator.validate()?;
        self.partition_plan.validate(self.model_spec.num_classes)
    }
}

/// Server-side data: client training pool, validation set for `f_LA`, and
/// the held-out test set for global accuracy.
#[derive(Debug, Clone)]
pub struct FederationData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl FederationData {
    /// Stratified three-way split: `test_fraction` of the whole set, then
    /// `validation_fraction` of the whole set out of the remainder.
    pub fn split(data: &Dataset, validation_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self> {
        let (rest, test) = split_validation(data, test_fraction, seed::derive(seed, &[1]))?;
        let relative = validation_fraction / (1.0 - test_fraction);
        let (train, validation) = split_validation(&rest, relative, seed::derive(seed, &[2]))?;
        Ok(Self {
            train,
            validation,
            test,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub data: Dataset,
    pub params: ParamVector,
    pub adversarial: bool,
}

#[derive(Debug, Clone)]
pub struct FederationState {
    /// Rounds completed so far.
    pub round: usize,
    pub global: ParamVector,
    pub clients: Vec<Client>,
}

impl FederationState {
    pub fn adversarial_ids(&self) -> BTreeSet<usize> {
        self.clients.iter().filter(|c| c.adversarial).map(|c| c.id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based.
    pub round_index: usize,
    /// On the held-out test set, after aggregation.
    pub global_accuracy: f64,
    /// `f_LA` per client id.
    pub per_client_accuracy: Vec<f64>,
    pub c_used: Option<f64>,
    pub b_effective: Option<f64>,
    /// Aggregation coefficient per client id.
    pub weights: Vec<f64>,
    pub discarded_ids: BTreeSet<usize>,
    pub adversarial_discarded: usize,
    pub benign_discarded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    pub run: usize,
    pub adversarial_ids: BTreeSet<usize>,
    pub rounds: Vec<RoundMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub aggregator: String,
    pub runs: Vec<RunSeries>,
    /// Mean global accuracy per round across runs.
    pub mean_global_accuracy: Vec<f64>,
}

impl ScenarioResult {
    pub fn mean_final_accuracy(&self) -> f64 {
        self.mean_global_accuracy.last().copied().unwrap_or(0.0)
    }
}

/// One repetition of a scenario: the config plus the shared server data.
pub struct Federation<'a> {
    cfg: &'a FederationConfig,
    data: &'a FederationData,
    run: usize,
}

impl<'a> Federation<'a> {
    pub fn new(cfg: &'a FederationConfig, data: &'a FederationData, run: usize) -> Result<Self> {
        cfg.validate()?;
        for (name, ds) in [("train", &data.train), ("validation", &data.validation), ("test", &data.test)] {
            if ds.dim() != cfg.model_spec.input_dim {
                return Err(FlError::InvalidConfig(format!(
                    "{name} set has {} features, model expects {}",
                    ds.dim(),
                    cfg.model_spec.input_dim
                )));
            }
            if ds.num_classes() > cfg.model_spec.num_classes {
                return Err(FlError::InvalidConfig(format!(
                    "{name} set has {} classes, model outputs {}",
                    ds.num_classes(),
                    cfg.model_spec.num_classes
                )));
            }
        }
        if data.validation.is_empty() {
            return Err(FlError::EmptyValidation);
        }
        if data.test.is_empty() {
            return Err(FlError::EmptyData);
        }
        Ok(Self { cfg, data, run })
    }

    fn seed(&self, stream: Stream, parts: &[u64]) -> u64 {
        let mut all = vec![self.run as u64];
        all.extend_from_slice(parts);
        seed::stream_seed(self.cfg.master_seed, stream, &all)
    }

    /// Adversaries are the first `floor(fraction * n)` ids of a seeded
    /// shuffle.
    pub fn choose_adversaries(&self) -> BTreeSet<usize> {
        let mut ids: Vec<usize> = (0..self.cfg.n_clients).collect();
        ids.shuffle(&mut seed::rng(self.seed(Stream::Adversary, &[])));
        ids.into_iter().take(self.cfg.num_adversarial()).collect()
    }

    /// Partitions the training pool, poisons the adversaries' partitions
    /// once, and hands every client the initial global model.
    pub fn init(&self) -> Result<FederationState> {
        let plan = PartitionPlan {
            seed: self.seed(Stream::Partition, &[self.cfg.partition_plan.seed]),
            ..self.cfg.partition_plan.clone()
        };
        let parts = partition_non_iid(&self.data.train, &plan)?;
        let adversaries = self.choose_adversaries();
        let global = init_model(&self.cfg.model_spec, self.seed(Stream::Init, &[]));
        let clients = parts
            .into_iter()
            .enumerate()
            .map(|(id, data)| {
                let adversarial = adversaries.contains(&id);
                let data = if adversarial {
                    poison_labels(&data, self.cfg.poison_mode, self.seed(Stream::Poison, &[id as u64]))?
                } else {
                    data
                };
                Ok(Client {
                    id,
                    data,
                    params: global.clone(),
                    adversarial,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FederationState {
            round: 0,
            global,
            clients,
        })
    }

    fn local_update(&self, client: &Client, round: usize) -> Result<ClientUpdate> {
        let cfg = TrainConfig {
            seed: self.seed(Stream::Train, &[client.id as u64, round as u64]),
            ..self.cfg.train_config.clone()
        };
        let trained = train_local(&client.params, &self.cfg.model_spec, &client.data, &cfg)?;
        let accuracy = f_la(&trained, &self.data.validation, &self.cfg.model_spec)?;
        Ok(ClientUpdate::new(client.id, trained, client.data.len()).with_accuracy(accuracy))
    }

    /// Local training, server scoring, aggregation and broadcast.
    pub fn run_round(&self, state: &mut FederationState) -> Result<RoundMetrics> {
        let round = state.round + 1;
        let updates: Vec<ClientUpdate> = if self.cfg.parallel {
            state
                .clients
                .par_iter()
                .map(|c| self.local_update(c, round))
                .collect::<Result<_>>()
        } else {
            state
                .clients
                .iter()
                .map(|c| self.local_update(c, round))
                .collect::<Result<_>>()
        }
        .map_err(|e| e.in_round(round))?;

        let (global, report) = self
            .cfg
            .aggregator
            .aggregate(&updates)
            .map_err(|e| e.in_round(round))?;
        let global_accuracy = evaluate_accuracy(&global, &self.cfg.model_spec, &self.data.test)
            .map_err(|e| e.in_round(round))?;

        for client in &mut state.clients {
            client.params = global.clone();
        }
        state.global = global;
        state.round = round;

        let per_client_accuracy = updates.iter().map(|u| u.accuracy.unwrap_or(0.0)).collect();
        Ok(self.metrics(round, global_accuracy, per_client_accuracy, report, state))
    }

    fn metrics(
        &self,
        round: usize,
        global_accuracy: f64,
        per_client_accuracy: Vec<f64>,
        report: AggregationReport,
        state: &FederationState,
    ) -> RoundMetrics {
        let adversaries = state.adversarial_ids();
        let adversarial_discarded = report.discarded_ids.intersection(&adversaries).count();
        RoundMetrics {
            round_index: round,
            global_accuracy,
            per_client_accuracy,
            c_used: report.c_used,
            b_effective: report.b_effective,
            weights: report.weight_list(),
            benign_discarded: report.discarded_ids.len() - adversarial_discarded,
            adversarial_discarded,
            discarded_ids: report.discarded_ids,
        }
    }

    /// All configured rounds from a fresh state.
    pub fn run(&self) -> Result<RunSeries> {
        let mut state = self.init()?;
        let adversarial_ids = state.adversarial_ids();
        let rounds = (0..self.cfg.rounds)
            .map(|_| self.run_round(&mut state))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunSeries {
            run: self.run,
            adversarial_ids,
            rounds,
        })
    }
}

/// `runs` independent repetitions plus the per-round mean test accuracy.
pub fn run_scenario(cfg: &FederationConfig, data: &FederationData, runs: usize) -> Result<ScenarioResult> {
    if runs == 0 {
        return Err(FlError::InvalidConfig("runs must be positive".into()));
    }
    let series = (0..runs)
        .map(|run| Federation::new(cfg, data, run)?.run())
        .collect::<Result<Vec<_>>>()?;
    let mean_global_accuracy = (0..cfg.rounds)
        .map(|r| series.iter().map(|s| s.rounds[r].global_accuracy).sum::<f64>() / runs as f64)
        .collect();
    Ok(ScenarioResult {
        aggregator: cfg.aggregator.label(),
        runs: series,
        mean_global_accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of "discarded" against the true adversaries, per
/// round. Precision is 1 when nothing is discarded; recall is 1 when there
/// are no adversaries.
pub fn detection_report(series: &[RoundMetrics], true_adversarial: &BTreeSet<usize>) -> Vec<DetectionScore> {
    series
        .iter()
        .map(|m| {
            let hits = m.discarded_ids.intersection(true_adversarial).count() as f64;
            let precision = if m.discarded_ids.is_empty() {
                1.0
            } else {
                hits / m.discarded_ids.len() as f64
            };
            let recall = if true_adversarial.is_empty() {
                1.0
            } else {
                hits / true_adversarial.len() as f64
            };
            DetectionScore { precision, recall }
        })
        .collect()
}

/// First round (1-based) from which every later round discards exactly the
/// adversarial set.
pub fn exact_identification_round(series: &[RoundMetrics], true_adversarial: &BTreeSet<usize>) -> Option<usize> {
    let tail = series
        .iter()
        .rev()
        .take_while(|m| &m.discarded_ids == true_adversarial)
        .count();
    (tail > 0).then(|| series[series.len() - tail].round_index)
}
