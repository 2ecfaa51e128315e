//! One participant over HTTP: enroll, fetch mock pages, rerank through the
//! backend, report engagement and end the session.
//!
//! `cargo run -p feedlab --example http_stack`

use feedlab::client::{recruitment_params, StudyClient};
use feedlab::config::RunConfig;
use feedlab::core::measurement::EngagementKind;
use feedlab::core::payload::{parse_feed_payload, MOCK_FORMAT_ID};
use feedlab::core::protocol::{ClientEvent, ClientEventBody, EventBatch, RerankRequest};
use feedlab::sim::{fetch_page, Stack};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default();
    cfg.data_dir = dir.path().to_owned();
    let stack = Stack::spawn(&cfg).await?;
    let client = StudyClient::new(&stack.backend_url);
    let pc = client.enroll(&recruitment_params("demo-1", &[("tz", "+01:00")])).await?;
    println!("enrolled {} in {}", pc.participant_id, pc.arm);

    let http = reqwest::Client::new();
    let mut cursor = String::new();
    let mut seq = 0;
    for _ in 0..3 {
        let raw = fetch_page(&http, &stack.mock_url, &cursor, 20).await?;
        cursor = parse_feed_payload(&raw, MOCK_FORMAT_ID)?.cursor;
        let resp = client.rerank(&pc.token, &RerankRequest::new("s1", MOCK_FORMAT_ID, &raw, 500)).await?;
        let d = &resp.actions_digest;
        println!("{:?} fallback={} downranked={} released={} pending={}", resp.status, resp.fallback, d.downranked, d.released, d.deferred_pending);
        let first = parse_feed_payload(&resp.payload_bytes(), MOCK_FORMAT_ID)?.posts.into_iter().next();
        if let Some(p) = first {
            seq += 1;
            let like = ClientEvent { seq, body: ClientEventBody::Engagement { post_id: Some(p.id), kind: EngagementKind::Like, value: None, occurred_at: 0 } };
            let ack = client.send_events(&pc.token, &EventBatch { session_id: "s1".into(), events: vec![like], client_sent_at: 0 }).await?;
            println!("  acked through seq {:?}", ack.ack.highest_seq);
        }
    }
    let end = ClientEvent { seq: seq + 1, body: ClientEventBody::SessionEnd { at: 0 } };
    client.send_events(&pc.token, &EventBatch { session_id: "s1".into(), events: vec![end], client_sent_at: 0 }).await?;
    println!("{} records in the log", stack.backend.store().len());
    Ok(())
}
