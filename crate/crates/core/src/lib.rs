//! Federated learning simulator built around induced ordered weighted
//! averaging (IOWA) aggregation with a dynamic linguistic quantifier.
//!
//! The crate is organised bottom-up:
//!
//! * [`owa`] - linguistic quantifiers, weight derivation and the IOWA sum.
//! * [`aggregation`] - the federated aggregation operators (FedAvg, W-FedAvg,
//!   AL-80, IOWA-SQ, IOWA-DQ) and the accuracy-induced client ordering.
//! * [`model`] - a small softmax/MLP classifier trained with minibatch SGD.
//! * [`data`] - synthetic blobs, IDX ingestion, non-IID partitioning and
//!   dirty-label poisoning.
//! * [`federation`] - the round protocol, multi-run scenarios and
//!   adversary-detection scoring.

pub mod aggregation;
pub mod data;
mod error;
pub mod federation;
pub mod model;
pub mod owa;
pub mod seed;

pub use aggregation::{AggregationReport, Aggregator, ClientUpdate, WFedAvgMode};
pub use data::{Dataset, PartitionPlan, PoisonMode};
pub use error::{FlError, Result};
pub use federation::{FederationConfig, RoundMetrics, RunSeries, ScenarioResult};
pub use model::{ModelSpec, ParamVector, TrainConfig};
pub use owa::{QuantifierParams, WeightVector};
