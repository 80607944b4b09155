//! Simulation of fully decentralized federated learning over a random
//! peer-to-peer pairing schedule.
//!
//! Clients hold private shards of a labeled dataset and a model of a shared
//! architecture. Each round some clients train locally and send their model
//! to a peer, which fuses it with its own by mutual knowledge transfer
//! ([`FusionStrategy::DefKt`]), full parameter averaging or segment
//! averaging.
//!
//! ```
//! use defkt_core::{data, nn, ExperimentSetup, FusionStrategy, HyperParams, ModelSpec};
//!
//! let cfg = data::SynthConfig { classes: 3, per_class: 30, dims: 5, sigma: 0.5, seed: 1 };
//! let train = data::synth_dataset(&cfg).unwrap();
//! let test = data::synth_test_set(&cfg, 10).unwrap();
//! let spec = ModelSpec::mlp(5, &[8], 3).unwrap();
//! let hyper = HyperParams { clients: 4, senders: 1, rounds: 3, local_batch: 10, transfer_batch: 10, ..HyperParams::default() };
//! let clients = data::partition_iid(&train, 4, 0)
//!     .unwrap()
//!     .iter()
//!     .map(|d| data::train_val_split(d, 0.8, 0).unwrap())
//!     .collect();
//! let setup = ExperimentSetup { initial: nn::init_params(&spec, 0), spec, hyper, clients, test, eval_every: 1 };
//! let timeline = defkt_core::run_experiment(&setup, FusionStrategy::DefKt, |_| {}).unwrap();
//! assert_eq!(timeline.len(), 4);
//! ```

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use data::{ClientData, Dataset, PartitionConfig, PartitionMode, SynthConfig};
pub use error::{Error, Result};
pub use federation::{
    run_experiment, run_round, select_round, ClientState, ExperimentSetup, FusionStrategy,
    HyperParams, Network, RoundPlan, Simulation,
};
pub use losses::{Reduction, SoftPrediction};
pub use metrics::MetricsRecord;
pub use nn::{
    Activation, Batch, GradVector, InputShape, Layer, ModelSpec, MomentumState, ParamVector,
};
