//! Offline tooling: replay a captured page through a plan, then build an
//! engagement report from a simulated run's log.
//!
//! `cargo run -p feedlab --example replay_and_report`

use feedlab::config::RunConfig;
use feedlab::core::measurement::Grouping;
use feedlab::core::payload::{serialize_feed_payload, MOCK_FORMAT_ID};
use feedlab::core::plan::shipped_plan;
use feedlab::core::platform::{generate_inventory, serve_feed_page, InventorySpec, Ranking};
use feedlab::ops;
use feedlab::sim::{simulate, SimConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inv = generate_inventory(&InventorySpec::new(2, 60, 6))?;
    let raw = serialize_feed_payload(&serve_feed_page(&inv, None, Ranking::Engagement, 20)?, MOCK_FORMAT_ID)?;
    for name in ["identity", "downrank_political", "remove_video", "insert_positive"] {
        let r = ops::replay(&raw, MOCK_FORMAT_ID, &shipped_plan(name).expect("bundled"), 0).await?;
        println!("== {name}: {} bytes in, {} out\n{}", raw.len(), r.output.len(), r.summary());
    }

    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default();
    cfg.data_dir = dir.path().to_owned();
    simulate(&cfg, &SimConfig { cohort: 6, pages: 4, ..SimConfig::default() }).await?;
    print!("{}", ops::report(&cfg, Grouping::Arm)?.to_table());
    Ok(())
}
