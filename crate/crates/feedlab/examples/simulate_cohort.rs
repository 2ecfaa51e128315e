//! A scripted cohort against an in-process backend and mock platform.
//!
//! `cargo run -p feedlab --example simulate_cohort`

use feedlab::config::RunConfig;
use feedlab::sim::{simulate, SimConfig};

#[tokio::main]
async fn main() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.data_dir = dir.path().to_owned();
    cfg.study.allow_forced_arm = true;
    let sim = SimConfig { cohort: 8, pages: 6, forced_alternation: true, seed: 3, ..SimConfig::default() };
    print!("{}", simulate(&cfg, &sim).await?.to_text());
    Ok(())
}
