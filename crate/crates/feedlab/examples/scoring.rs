//! Keyword scoring in process, then the same terms behind a remote scorer
//! stub, then a slow stub that misses the deadline.
//!
//! `cargo run -p feedlab --example scoring`

use std::collections::BTreeMap;
use std::time::Duration;

use feedlab::core::model::Post;
use feedlab::core::scoring::{score_posts, ScorerSpec};
use feedlab::stubs::{scorer_app, spawn_local, StubScorerConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let terms: BTreeMap<String, f64> = [("election", 0.6), ("ballot", 0.5), ("cat", 0.1)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let posts = vec![
        Post::new("1", "a", "Election night: the ballot count continues", 0),
        Post::new("2", "b", "my cat found a sunbeam", 0),
        Post::new("3", "c", "recipe for lentil soup", 0),
    ];

    let local = ScorerSpec::Keyword { terms: terms.clone() }.build()?;
    let r = score_posts(&posts, local.as_ref(), Duration::from_millis(50), None).await;
    println!("keyword: {:?}", sorted(&r.scores));

    let (url, _server) = spawn_local(scorer_app(StubScorerConfig::keywords(&terms))).await?;
    let remote = |timeout_ms| ScorerSpec::Remote {
        endpoint: format!("{url}/score"),
        timeout_ms,
        scorer_version: "demo-1".into(),
        batch_size: Some(2),
        max_concurrent_requests: 2,
    };
    let r = score_posts(&posts, remote(500).build()?.as_ref(), Duration::from_millis(500), None).await;
    println!("remote: {:?} in {}ms", sorted(&r.scores), r.elapsed_ms);

    let (slow_url, _slow) = spawn_local(scorer_app(StubScorerConfig::keywords(&terms).with_delay(Duration::from_secs(1)))).await?;
    let slow = ScorerSpec::Remote {
        endpoint: format!("{slow_url}/score"),
        timeout_ms: 2000,
        scorer_version: "demo-1".into(),
        batch_size: None,
        max_concurrent_requests: 1,
    };
    let r = score_posts(&posts, slow.build()?.as_ref(), Duration::from_millis(200), None).await;
    println!("slow remote: fallback={} reason={:?}", r.fallback, r.fallback_reason);
    Ok(())
}

fn sorted(m: &std::collections::HashMap<feedlab::core::model::PostId, f64>) -> Vec<(String, f64)> {
    let mut v: Vec<_> = m.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}
