//! Clustered federated learning by inference similarity.
//!
//! The server groups clients by comparing what their models predict on a small
//! dataset it holds itself, then averages models inside each group. Two
//! clustering regimes are provided:
//!
//! - **dynamic** ([`federation::run_flis_dc`]): every round, each participant
//!   defines a cluster made of the participants whose inference similarity to it
//!   exceeds a threshold `beta`. Clusters may overlap; a client picks the cluster
//!   model with the lowest loss on its local test split.
//! - **hierarchical** ([`federation::run_flis_hc`]): after one warm-up round over
//!   all clients, average-linkage agglomerative clustering fixes a disjoint
//!   partition for the rest of the federation.
//!
//! FedAvg and SOLO baselines fall out as degenerate settings and are exposed as
//! their own runners. Everything is deterministic given the configured seed, and
//! parallel execution (feature `parallel`, on by default) yields bit-identical
//! results to sequential execution.

pub mod clustering;
pub mod data;
pub mod error;
pub mod exec;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use clustering::{AdjacencyMatrix, ClusterMode, ClusterSet, ClusteringError, InferenceMatrix, SignedMatrix};
pub use data::{ClientDataset, DataConfig, FederatedData, PartitionScheme, PartitionSpec};
pub use error::{FlisError, Result};
pub use exec::Execution;
pub use federation::{ClusterModels, FederationConfig, FederationRun, Mode, RoundRecord};
pub use metrics::RunSummary;
pub use nn::{InferenceMode, LabeledData, Matrix, ModelParams, TrainConfig};
