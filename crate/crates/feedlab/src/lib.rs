//! Services and tooling around [`feedlab_core`]: the backend and coordination
//! HTTP endpoints, a mock platform, stub model servers, a scripted
//! participant client and a cohort simulator.
//!
//! ```no_run
//! # async fn run() -> Result<(), String> {
//! use feedlab::config::RunConfig;
//! use feedlab::sim::{simulate, SimConfig};
//!
//! let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
//! let mut cfg = RunConfig::default();
//! cfg.data_dir = dir.path().to_owned();
//! let report = simulate(&cfg, &SimConfig { cohort: 4, pages: 3, ..SimConfig::default() }).await?;
//! println!("{}", report.to_text());
//! # Ok(()) }
//! ```

pub use feedlab_core as core;

pub mod client;
pub mod config;
pub mod mock;
pub mod ops;
pub mod server;
pub mod sim;
pub mod stubs;
