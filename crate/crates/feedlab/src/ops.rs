//! Offline operator tasks behind the command line: replaying a captured
//! payload through a plan, plan validation, reports, export, compaction
//! and withdrawal.

use std::path::{Path, PathBuf};
use std::time::Duration;

use feedlab_core::clock::system_clock;
use feedlab_core::coordination::Coordinator;
use feedlab_core::measurement::{engagement_report, EngagementReport, Grouping};
use feedlab_core::model::ParticipantId;
use feedlab_core::payload::{parse_feed_payload, serialize_feed_payload};
use feedlab_core::plan::TransformPlan;
use feedlab_core::rerank::{apply_transform, ActionKind, SessionState, TransformAction, TransformInputs, TransformedFeed};
use feedlab_core::scoring::{score_posts, ScoreResult};
use feedlab_core::sourcing::generate_candidate;
use feedlab_core::store::{export_csv, EventStore, RecordFilter};

use crate::config::RunConfig;

#[derive(Debug)]
pub struct Replay {
    pub feed: TransformedFeed,
    /// Bytes the participant would receive.
    pub output: Vec<u8>,
}

impl Replay {
    pub fn summary(&self) -> String {
        let mut s = format!("{} actions\n", self.feed.actions.len());
        for a in &self.feed.actions {
            s.push_str(&describe(a));
            s.push('\n');
        }
        s
    }
}

fn describe(a: &TransformAction) -> String {
    let at = |p: Option<usize>| p.map_or("-".to_string(), |p| p.to_string());
    match a.action {
        ActionKind::Downranked => match a.deferral_target {
            Some(t) => format!("downranked {} {} -> deferred until position {}", a.post_id, at(a.original_position), t + 1),
            None => format!("downranked {} {} -> {}", a.post_id, at(a.original_position), at(a.new_position)),
        },
        ActionKind::Removed => format!("removed {} {}", a.post_id, at(a.original_position)),
        ActionKind::Inserted => format!("inserted {} -> {}", a.post_id, at(a.new_position)),
        ActionKind::Edited => format!("edited {} {}{}", a.post_id, at(a.new_position), if a.fallback { " (fallback)" } else { "" }),
        ActionKind::DeferredReleased => format!("released {} -> {}", a.post_id, at(a.new_position)),
    }
}

/// Runs `plan` over one captured page as the first page of a fresh session.
/// Insertion candidates come from the plan's templates, seeded by `seed`.
pub async fn replay(raw: &[u8], format_id: &str, plan: &TransformPlan, seed: u64) -> Result<Replay, String> {
    plan.validate().map_err(|e| e.to_string())?;
    let page = parse_feed_payload(raw, format_id).map_err(|e| e.to_string())?;
    let scores = match &plan.scorer {
        Some(spec) => {
            let scorer = spec.build().map_err(|e| e.to_string())?;
            let s = score_posts(&page.posts, scorer.as_ref(), Duration::from_secs(10), None).await;
            if s.fallback {
                return Err(format!("scoring failed: {}", s.fallback_reason.unwrap_or_default()));
            }
            s
        }
        None => ScoreResult::default(),
    };
    let mut candidates = Vec::new();
    if let (Some(ins), Some(src)) = (&plan.insertions, &plan.sourcing) {
        for (k, t) in src.templates.iter().cycle().take(ins.positions.len()).enumerate() {
            candidates.push(generate_candidate(t, seed.wrapping_add(k as u64)).map_err(|e| e.to_string())?);
        }
    }
    let state = SessionState::new("replay".into(), "replay".into());
    let inputs = TransformInputs { candidates, ..TransformInputs::default() };
    let (feed, _) = apply_transform(&page, &state, plan, &scores, &inputs).map_err(|e| e.to_string())?;
    let output = if feed.actions.is_empty() {
        raw.to_vec()
    } else {
        serialize_feed_payload(&feed.page, format_id).map_err(|e| e.to_string())?
    };
    Ok(Replay { feed, output })
}

/// Loads and validates a plan file; the error names the broken rule.
pub fn validate_plan(path: &Path) -> Result<TransformPlan, String> {
    let plan = TransformPlan::load(path).map_err(|e| e.to_string())?;
    plan.validate().map_err(|e| e.to_string())?;
    Ok(plan)
}

pub fn open_store(cfg: &RunConfig) -> Result<EventStore, String> {
    EventStore::open(cfg.store_config()).map_err(|e| e.to_string())
}

fn coordinator(cfg: &RunConfig) -> Result<Coordinator, String> {
    let study = cfg.study_design().map_err(|e| e.to_string())?;
    Coordinator::new(study, system_clock(), 0)
        .and_then(|c| c.with_snapshot(cfg.registry_path()))
        .map_err(|e| e.to_string())
}

/// The engagement report over everything in the data directory.
pub fn report(cfg: &RunConfig, grouping: Grouping) -> Result<EngagementReport, String> {
    let store = open_store(cfg)?;
    let arms = coordinator(cfg)?.arm_map();
    Ok(engagement_report(&store.scan(0, &RecordFilter::all()), &arms, grouping))
}

pub fn export(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, String> {
    let store = open_store(cfg)?;
    export_csv(&store.scan(0, &RecordFilter::all()), out).map_err(|e| e.to_string())
}

/// Drops withdrawn participants' records from disk; returns how many went.
pub fn compact(cfg: &RunConfig) -> Result<usize, String> {
    open_store(cfg)?.compact().map_err(|e| e.to_string())
}

pub fn withdraw(cfg: &RunConfig, participant: &str, reason: &str) -> Result<u64, String> {
    let store = open_store(cfg)?;
    let now = system_clock().now_ms();
    store.withdraw(&ParticipantId::from(participant), reason, now).map_err(|e| e.to_string())
}
