//! Scripted participant cohorts against a live stack.
//!
//! Each simulated participant registers through the coordination pages,
//! then scrolls `pages` pages of the mock feed. Every page goes through
//! `/v1/rerank` (server-mode arms) or the plan locally (local-mode arms),
//! and scripted likes, dwell times and survey answers go to `/v1/events`.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use feedlab_core::clock::system_clock;
use feedlab_core::coordination::{ClientMode, ParticipantConfig, FORCED_ARM_KEY};
use feedlab_core::measurement::{engagement_report, EngagementKind, EngagementReport, Grouping};
use feedlab_core::model::{FeedPage, Post};
use feedlab_core::payload::{parse_feed_payload, MOCK_FORMAT_ID};
use feedlab_core::platform::{generate_inventory, Inventory};
use feedlab_core::protocol::{Backend, ClientEvent, ClientEventBody, EventBatch, RerankRequest, RerankStatus};
use feedlab_core::rerank::{apply_transform, SessionState, TransformInputs};
use feedlab_core::scoring::{score_posts, ScoreResult};
use feedlab_core::store::RecordFilter;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;

use crate::client::{recruitment_params, ClientError, StudyClient};
use crate::config::RunConfig;
use crate::server::{app, build_backend};

/// Probabilities driving a scripted participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Script {
    pub like_p_political: f64,
    pub like_p_other: f64,
    /// Dwell per post is uniform in this range, ms.
    pub dwell_ms: (u64, u64),
    /// Chance of answering a survey card.
    pub answer_p: f64,
    /// Chance that an event batch is sent twice.
    pub retry_p: f64,
}

impl Default for Script {
    fn default() -> Self {
        Self { like_p_political: 0.15, like_p_other: 0.08, dwell_ms: (400, 6000), answer_p: 0.7, retry_p: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub cohort: usize,
    pub pages: usize,
    pub page_size: usize,
    pub seed: u64,
    pub script: Script,
    /// Assign arms round-robin through the `arm` recruitment parameter
    /// (needs `allow_forced_arm`).
    pub forced_alternation: bool,
    pub client_deadline_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            cohort: 10,
            pages: 10,
            page_size: 20,
            seed: 1,
            script: Script::default(),
            forced_alternation: false,
            client_deadline_ms: feedlab_core::protocol::DEFAULT_CLIENT_DEADLINE_MS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    /// Nearest-rank percentiles.
    pub fn from_samples(mut ms: Vec<f64>) -> Self {
        if ms.is_empty() {
            return Self::default();
        }
        ms.sort_by(f64::total_cmp);
        let rank = |p: f64| ms[((p * ms.len() as f64).ceil() as usize).clamp(1, ms.len()) - 1];
        Self { samples: ms.len(), p50_ms: rank(0.50), p95_ms: rank(0.95), p99_ms: rank(0.99), max_ms: ms[ms.len() - 1] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub participants: usize,
    pub pages: usize,
    /// Pages shown unmodified because the backend fell back.
    pub fallbacks: usize,
    /// Pages shown unmodified because the client deadline passed.
    pub client_timeouts: usize,
    pub transformed: usize,
    pub latency: LatencySummary,
    /// Stored records by kind.
    pub records: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub cohort: usize,
    pub seed: u64,
    pub pages: usize,
    pub latency: LatencySummary,
    pub fallback_rate: f64,
    pub arms: BTreeMap<String, ArmSummary>,
    pub duplicates_sent: usize,
    pub engagement: EngagementReport,
}

impl SimReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "cohort {} seed {} pages {}\nadded latency ms: p50 {:.1} p95 {:.1} p99 {:.1} max {:.1} (n={})\nfallback rate {:.3}\n",
            self.cohort,
            self.seed,
            self.pages,
            self.latency.p50_ms,
            self.latency.p95_ms,
            self.latency.p99_ms,
            self.latency.max_ms,
            self.latency.samples,
            self.fallback_rate
        );
        for (arm, a) in &self.arms {
            let records: Vec<String> = a.records.iter().map(|(k, n)| format!("{k}={n}")).collect();
            s.push_str(&format!(
                "arm {arm}: participants {} pages {} transformed {} fallbacks {} timeouts {} p95 {:.1}ms | {}\n",
                a.participants,
                a.pages,
                a.transformed,
                a.fallbacks,
                a.client_timeouts,
                a.latency.p95_ms,
                records.join(" ")
            ));
        }
        s.push_str(&self.engagement.to_table());
        s
    }

    /// Per-arm record counts, the part a rerun with the same seed repeats.
    pub fn event_counts(&self) -> BTreeMap<String, BTreeMap<String, usize>> {
        self.arms.iter().map(|(k, a)| (k.clone(), a.records.clone())).collect()
    }
}

/// Backend and mock platform served in-process on ephemeral ports.
pub struct Stack {
    pub backend_url: String,
    pub mock_url: String,
    pub backend: Arc<Backend>,
    pub inventory: Arc<Inventory>,
    handles: Vec<JoinHandle<()>>,
}

impl Stack {
    /// `cfg.listen` and `cfg.mock_listen` are ignored; `cfg.base_url` is
    /// replaced by the bound address.
    pub async fn spawn(cfg: &RunConfig) -> Result<Self, String> {
        let inventory = Arc::new(generate_inventory(&cfg.inventory_spec()).map_err(|e| e.to_string())?);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let backend_url = format!("http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        let mut cfg = cfg.clone();
        cfg.base_url = Some(backend_url.clone());
        let backend = Arc::new(build_backend(&cfg, system_clock())?);
        let router = app(backend.clone());
        let mut handles = vec![tokio::spawn(async move {
            let _ = axum::serve(listener, router).await;
        })];
        let (mock_url, h) = crate::stubs::spawn_local(crate::mock::app(inventory.clone())).await.map_err(|e| e.to_string())?;
        handles.push(h);
        Ok(Self { backend_url, mock_url, backend, inventory, handles })
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        for h in &self.handles {
            h.abort();
        }
    }
}

/// What one scripted participant did.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticipantRun {
    pub config: ParticipantConfig,
    pub pages: usize,
    pub fallbacks: usize,
    pub client_timeouts: usize,
    pub transformed: usize,
    /// Added latency per page, ms.
    pub latencies: Vec<f64>,
    pub duplicates_sent: usize,
}

/// Runs a cohort against backend and mock platform URLs. `inventory` gives
/// the scripted participants ground-truth topics; `arm_labels` feeds
/// forced alternation.
pub async fn run_simulation(
    sim: &SimConfig,
    backend_url: &str,
    mock_url: &str,
    inventory: Arc<Inventory>,
    arm_labels: &[String],
) -> Result<Vec<ParticipantRun>, ClientError> {
    // Registration is sequential so that ids and assignments repeat per seed.
    let mut enrolled = Vec::with_capacity(sim.cohort);
    for i in 0..sim.cohort {
        let client = StudyClient::new(backend_url);
        let rid = format!("sim-{}-{i:04}", sim.seed);
        let mut extra = vec![("tz", "+00:00")];
        if sim.forced_alternation && !arm_labels.is_empty() {
            extra.push((FORCED_ARM_KEY, arm_labels[i % arm_labels.len()].as_str()));
        }
        let cfg = client.enroll(&recruitment_params(&rid, &extra)).await?;
        enrolled.push((i, client, cfg));
    }
    let mut tasks = Vec::new();
    for (i, client, cfg) in enrolled {
        let sim = sim.clone();
        let mock = mock_url.to_string();
        let inventory = inventory.clone();
        tasks.push(tokio::spawn(async move { participant(&sim, i, &client, cfg, &mock, &inventory).await }));
    }
    let mut runs = Vec::new();
    for t in tasks {
        runs.push(t.await.expect("participant task")?);
    }
    Ok(runs)
}

/// Folds participant runs and the backend's log into a report.
pub fn summarize(sim: &SimConfig, runs: &[ParticipantRun], backend: &Backend) -> SimReport {
    let records = backend.store().scan(0, &RecordFilter::all());
    let arm_of = backend.coordinator().arm_map();
    let mut arms: BTreeMap<String, ArmSummary> = backend
        .coordinator()
        .study()
        .arms
        .iter()
        .map(|a| (a.label.clone(), ArmSummary::default()))
        .collect();
    let mut lat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        let a = arms.entry(r.config.arm.clone()).or_default();
        a.participants += 1;
        a.pages += r.pages;
        a.fallbacks += r.fallbacks;
        a.client_timeouts += r.client_timeouts;
        a.transformed += r.transformed;
        lat.entry(r.config.arm.clone()).or_default().extend(&r.latencies);
    }
    for rec in &records {
        if let Some(arm) = arm_of.get(&rec.participant_id) {
            *arms.entry(arm.clone()).or_default().records.entry(rec.kind().as_str().to_string()).or_default() += 1;
        }
    }
    for (arm, l) in lat {
        arms.get_mut(&arm).expect("arm present").latency = LatencySummary::from_samples(l);
    }
    let all: Vec<f64> = runs.iter().flat_map(|r| r.latencies.iter().copied()).collect();
    let pages: usize = runs.iter().map(|r| r.pages).sum();
    let unmodified: usize = runs.iter().map(|r| r.fallbacks + r.client_timeouts).sum();
    SimReport {
        cohort: runs.len(),
        seed: sim.seed,
        pages,
        latency: LatencySummary::from_samples(all),
        fallback_rate: if pages == 0 { 0.0 } else { unmodified as f64 / pages as f64 },
        arms,
        duplicates_sent: runs.iter().map(|r| r.duplicates_sent).sum(),
        engagement: engagement_report(&records, &arm_of, Grouping::Arm),
    }
}

/// Spawns a stack for `cfg`, runs the cohort, and reports.
pub async fn simulate(cfg: &RunConfig, sim: &SimConfig) -> Result<SimReport, String> {
    let stack = Stack::spawn(cfg).await?;
    let labels: Vec<String> = stack.backend.coordinator().study().arms.iter().map(|a| a.label.clone()).collect();
    let runs = run_simulation(sim, &stack.backend_url, &stack.mock_url, stack.inventory.clone(), &labels)
        .await
        .map_err(|e| e.to_string())?;
    Ok(summarize(sim, &runs, &stack.backend))
}

/// One raw `mock-v1` page from the mock platform.
pub async fn fetch_page(http: &reqwest::Client, mock: &str, cursor: &str, page_size: usize) -> Result<Vec<u8>, ClientError> {
    let url = format!("{mock}/feed");
    let resp = http
        .get(&url)
        .query(&[("cursor", cursor), ("page_size", &page_size.to_string())])
        .send()
        .await
        .map_err(|e| ClientError::BackendUnreachable { url: url.clone(), reason: e.to_string() })?;
    let status = resp.status();
    let body = resp.bytes().await.map_err(|e| ClientError::BackendUnreachable { url: url.clone(), reason: e.to_string() })?;
    if !status.is_success() {
        return Err(ClientError::Status { url, status: status.as_u16(), body: String::from_utf8_lossy(&body).into_owned() });
    }
    Ok(body.to_vec())
}

fn now_ms() -> i64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0)
}

async fn participant(
    sim: &SimConfig,
    index: usize,
    client: &StudyClient,
    cfg: ParticipantConfig,
    mock: &str,
    inventory: &Inventory,
) -> Result<ParticipantRun, ClientError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64));
    let http = reqwest::Client::new();
    let session = format!("sess-{index:04}");
    let deadline = Duration::from_millis(sim.client_deadline_ms);
    let mut out = ParticipantRun {
        config: cfg.clone(),
        pages: 0,
        fallbacks: 0,
        client_timeouts: 0,
        transformed: 0,
        latencies: Vec::new(),
        duplicates_sent: 0,
    };
    let local_plan = cfg.plan.as_ref().filter(|_| cfg.mode == ClientMode::Local);
    let local_scorer = local_plan.and_then(|p| p.scorer.as_ref()).and_then(|s| s.build().ok());
    let mut local_state = SessionState::new(cfg.participant_id.clone(), session.as_str().into());
    let mut seq = 0u64;
    let mut units_seen = 0u64;
    let mut cursor = String::new();

    for _ in 0..sim.pages {
        let raw = fetch_page(&http, mock, &cursor, sim.page_size).await?;
        let original = parse_feed_payload(&raw, MOCK_FORMAT_ID).map_err(|e| ClientError::Decode {
            url: format!("{mock}/feed"),
            reason: e.to_string(),
        })?;
        let started = Instant::now();
        let delivered: FeedPage = match local_plan {
            Some(plan) => {
                let scores = match &local_scorer {
                    Some(s) => score_posts(&original.posts, s.as_ref(), deadline, None).await,
                    None => ScoreResult::default(),
                };
                match (!scores.fallback).then(|| apply_transform(&original, &local_state, plan, &scores, &TransformInputs::default())) {
                    Some(Ok((feed, next))) => {
                        local_state = next;
                        out.transformed += 1;
                        feed.page
                    }
                    _ => {
                        local_state.record_delivered(&original.posts);
                        local_state.received_count += original.len() as u64;
                        out.fallbacks += 1;
                        original.clone()
                    }
                }
            }
            None => {
                let req = RerankRequest::new(session.as_str(), MOCK_FORMAT_ID, &raw, sim.client_deadline_ms);
                match client.rerank_within(&cfg.token, &req, deadline).await? {
                    Some(resp) => {
                        if resp.fallback {
                            out.fallbacks += 1;
                        }
                        if resp.status == RerankStatus::Transformed {
                            out.transformed += 1;
                        }
                        parse_feed_payload(&resp.payload_bytes(), MOCK_FORMAT_ID).unwrap_or_else(|_| original.clone())
                    }
                    None => {
                        out.client_timeouts += 1;
                        original.clone()
                    }
                }
            }
        };
        out.latencies.push(started.elapsed().as_secs_f64() * 1000.0);
        out.pages += 1;

        let mut events = Vec::new();
        let mut push = |body| {
            seq += 1;
            events.push(ClientEvent { seq, body });
        };
        for post in &delivered.posts {
            units_seen += 1;
            let shown_at = now_ms();
            if local_plan.is_some() && !post.is_survey_card() {
                push(ClientEventBody::Exposure { post_id: post.id.clone(), global_position: units_seen, shown_at });
            }
            if post.is_survey_card() {
                if rng.random_bool(sim.script.answer_p) {
                    let answer = rng.random_range(1..=5u8).to_string();
                    push(ClientEventBody::SurveyResponse { card_id: post.id.clone(), answer, answered_at: shown_at });
                }
                continue;
            }
            let (lo, hi) = sim.script.dwell_ms;
            let dwell = rng.random_range(lo..=hi.max(lo));
            push(ClientEventBody::Engagement {
                post_id: Some(post.id.clone()),
                kind: EngagementKind::Dwell,
                value: Some(dwell as f64),
                occurred_at: shown_at,
            });
            if rng.random_bool(like_p(&sim.script, inventory, post)) {
                push(ClientEventBody::Engagement { post_id: Some(post.id.clone()), kind: EngagementKind::Like, value: None, occurred_at: shown_at });
            }
        }
        let batch = EventBatch { session_id: session.as_str().into(), events, client_sent_at: now_ms() };
        client.send_events(&cfg.token, &batch).await?;
        if rng.random_bool(sim.script.retry_p) {
            client.send_events(&cfg.token, &batch).await?;
            out.duplicates_sent += batch.events.len();
        }
        cursor = original.cursor.clone();
        if cursor.is_empty() {
            break;
        }
    }
    seq += 1;
    let end = ClientEvent { seq, body: ClientEventBody::SessionEnd { at: now_ms() } };
    client.send_events(&cfg.token, &EventBatch { session_id: session.as_str().into(), events: vec![end], client_sent_at: now_ms() }).await?;
    Ok(out)
}

fn like_p(script: &Script, inventory: &Inventory, post: &Post) -> f64 {
    match inventory.topic(&post.id) {
        Some("political") => script.like_p_political,
        _ => script.like_p_other,
    }
}
