//! Constraint-aware federated learning simulator.
//!
//! Simulated clients train a small character model under energy,
//! communication, memory and temperature budgets. Each round a dual
//! controller turns budget violations into multipliers, and a policy maps
//! those multipliers to freezing depth, local steps, batch size and update
//! compression. A plain federated-averaging baseline runs through the same
//! code path with the knobs held at their base values.
//!
//! ```no_run
//! use cafl::config::{ExperimentConfig, Mode};
//!
//! let mut cfg = ExperimentConfig::default();
//! cfg.rounds = 5;
//! cfg.mode = Mode::Cafl;
//! let trace = cafl::fedsim::run_experiment(&cfg).unwrap();
//! println!("comm ratio in the last round: {}", trace[4].ratios[1]);
//! ```

pub mod config;
pub mod corpus;
pub mod dual;
pub mod error;
pub mod fedsim;
pub mod model;
pub mod policy;
pub mod proxy;
pub mod report;
pub mod seed;

pub use error::{Error, Result};
