//! NimbleChain: a Nakamoto-style blockchain with a fast promise path for
//! commutative transactions, plus a deterministic discrete-event simulator
//! to measure it.
//!
//! ```no_run
//! use nimblechain::{config::SimConfig, engine::simulate, metrics::Summary};
//!
//! let mut cfg = SimConfig::default();
//! cfg.duration = 200.0;
//! let (log, report) = simulate(&cfg).unwrap();
//! let summary = Summary::new(&cfg, &log, &report);
//! println!("mean promise latency {:.1}s", summary.promise_latency.mean);
//! ```

pub mod adversary;
pub mod asset;
pub mod check;
pub mod cli;
pub mod config;
pub mod engine;
pub mod metrics;
pub mod node;
pub mod types;

pub use config::{RrsVariant, Scenario, SimConfig};
pub use engine::{run, simulate, RunReport, SimError, Simulation};
pub use metrics::{Analysis, EventLog, Summary};
