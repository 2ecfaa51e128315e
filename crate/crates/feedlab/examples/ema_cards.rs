//! Survey cards every 10 posts, placed by the backend and answered with
//! the three preceding posts attached as context.
//!
//! `cargo run -p feedlab --example ema_cards`

use feedlab::client::{recruitment_params, StudyClient};
use feedlab::config::{ArmConfig, RunConfig};
use feedlab::core::coordination::ClientMode;
use feedlab::core::measurement::EmaTriggerSpec;
use feedlab::core::payload::{parse_feed_payload, MOCK_FORMAT_ID};
use feedlab::core::plan::TransformPlan;
use feedlab::core::protocol::{ClientEvent, ClientEventBody, EventBatch, RerankRequest};
use feedlab::core::store::{RecordBody, RecordFilter, RecordKind};
use feedlab::sim::{fetch_page, Stack};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut plan = TransformPlan::identity("ema-demo");
    plan.ema = Some(EmaTriggerSpec::interval(10));
    let plan_path = dir.path().join("ema.json");
    std::fs::write(&plan_path, plan.to_json_pretty())?;
    let mut cfg = RunConfig::default();
    cfg.data_dir = dir.path().join("data");
    cfg.study.arms = vec![ArmConfig { label: "ema".into(), weight: 1.0, plan: Some(plan_path.display().to_string()), mode: ClientMode::Server }];

    let stack = Stack::spawn(&cfg).await?;
    let client = StudyClient::new(&stack.backend_url);
    let pc = client.enroll(&recruitment_params("ema-1", &[])).await?;
    let http = reqwest::Client::new();
    let (mut cursor, mut events) = (String::new(), Vec::new());
    for _ in 0..4 {
        let raw = fetch_page(&http, &stack.mock_url, &cursor, 8).await?;
        cursor = parse_feed_payload(&raw, MOCK_FORMAT_ID)?.cursor;
        let resp = client.rerank(&pc.token, &RerankRequest::new("s", MOCK_FORMAT_ID, &raw, 500)).await?;
        for s in &resp.survey_insertions {
            println!("card {} at index {}: {:?}", s.card.card_id, s.position, s.card.question.text);
            let seq = events.len() as u64 + 1;
            events.push(ClientEvent { seq, body: ClientEventBody::SurveyResponse { card_id: s.card.card_id.clone(), answer: "3".into(), answered_at: 0 } });
        }
    }
    client.send_events(&pc.token, &EventBatch { session_id: "s".into(), events, client_sent_at: 0 }).await?;
    for r in stack.backend.store().scan(0, &RecordFilter::kind(RecordKind::SurveyResponse)) {
        if let RecordBody::SurveyResponse(s) = r.body {
            println!("answer {:?} to {} with context {:?}", s.answer, s.card_id, s.context_post_ids);
        }
    }
    Ok(())
}
