//! A seeded mock platform: inventory generation, paged feeds in two
//! rankings, and the same thing over HTTP.
//!
//! `cargo run -p feedlab --example mock_platform`

use std::sync::Arc;

use feedlab::core::payload::{parse_feed_payload, MOCK_FORMAT_ID};
use feedlab::core::platform::{generate_inventory, serve_feed_page, InventorySpec, Ranking};
use feedlab::sim::fetch_page;
use feedlab::stubs::spawn_local;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inv = Arc::new(generate_inventory(&InventorySpec::new(5, 120, 8))?);
    for ranking in [Ranking::Engagement, Ranking::Chronological] {
        let page = serve_feed_page(&inv, None, ranking, 5)?;
        println!("{}:", ranking.as_str());
        for p in &page.posts {
            println!("  {} [{}] likes {} {:?}", p.id, inv.topic(&p.id).unwrap_or("?"), p.metrics.likes, p.text);
        }
    }

    let (url, _server) = spawn_local(feedlab::mock::app(inv.clone())).await?;
    let http = reqwest::Client::new();
    let mut cursor = String::new();
    let mut pages = 0;
    loop {
        let page = parse_feed_payload(&fetch_page(&http, &url, &cursor, 50).await?, MOCK_FORMAT_ID)?;
        pages += 1;
        if page.cursor.is_empty() {
            break;
        }
        cursor = page.cursor;
    }
    println!("{} posts over HTTP in {pages} pages from {url}", inv.len());
    Ok(())
}
