//! The rerank round-trip and event ingestion.
//!
//! Every failure on the rerank path degrades to `pass_through`: the
//! participant receives the original payload bytes untouched.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use dashmap::DashMap;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::coordination::{Coordinator, ParticipantConfig};
use crate::measurement::{
    plan_survey_insertions, Banner, BannerKind, BannerNotifier, DeferralExpired, DiaryScheduler, EngagementEvent,
    EngagementKind, ExposureEvent, ExposureTag, IngestGap, Notifier, RerankSummary, SurveyInsertion, SurveyResponse,
};
use crate::model::{FeedPage, Millis, ParticipantId, Post, PostId, Provenance, SessionId};
use crate::payload::FormatRegistry;
use crate::plan::{ContentEdit, ShortagePolicy, TransformPlan};
use crate::remote::{RemoteRewriter, TextRewriter};
use crate::rerank::{apply_transform, resolve_rewrites, ActionKind, Placement, SessionState, TransformInputs};
use crate::scoring::{score_posts, PostScorer, ScoreCache, ScoreResult, DEFAULT_DEADLINE};
use crate::sourcing::{generate_candidate, poll_monitored_accounts, AccountSource, Backoff, CandidatePool};
use crate::store::{EventStore, NewRecord, RecordBody, RecordFilter, RecordKind, StoreError};

pub const PROTOCOL_VERSION: u32 = 1;
pub const TOKEN_HEADER: &str = "x-participant-token";
pub const DEFAULT_CLIENT_DEADLINE_MS: u64 = 500;
pub const TRANSFER_ID_PREFIX: &str = "xfer:";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("participant token missing or unknown")]
    AuthFailed,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub protocol_version: u32,
    pub session_id: SessionId,
    pub format_id: String,
    /// Base64 (standard alphabet) of the platform response body.
    pub raw_payload: String,
    pub client_deadline_ms: u64,
}

impl RerankRequest {
    pub fn new(session_id: impl Into<SessionId>, format_id: &str, raw: &[u8], client_deadline_ms: u64) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION,
            session_id: session_id.into(),
            format_id: format_id.into(),
            raw_payload: B64.encode(raw),
            client_deadline_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankStatus {
    Transformed,
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigestEntry {
    pub post_id: PostId,
    pub action: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deferral_target: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionsDigest {
    pub downranked: usize,
    pub removed: usize,
    pub inserted: usize,
    pub edited: usize,
    pub released: usize,
    /// Posts waiting in the session's deferred queue after this page.
    pub deferred_pending: usize,
    pub actions: Vec<DigestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResponse {
    pub status: RerankStatus,
    pub payload: String,
    pub actions_digest: ActionsDigest,
    pub survey_insertions: Vec<SurveyInsertion>,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default)]
    pub banners: Vec<Banner>,
    #[serde(default)]
    pub end_of_study: bool,
}

impl RerankResponse {
    pub fn payload_bytes(&self) -> Vec<u8> {
        B64.decode(&self.payload).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientEventBody {
    Engagement {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        post_id: Option<PostId>,
        kind: EngagementKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
        occurred_at: Millis,
    },
    SurveyResponse {
        card_id: PostId,
        answer: String,
        answered_at: Millis,
    },
    /// A viewport-confirmed impression reported by the client.
    Exposure {
        post_id: PostId,
        global_position: u64,
        shown_at: Millis,
    },
    SessionEnd {
        at: Millis,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub body: ClientEventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventBatch {
    pub session_id: SessionId,
    pub events: Vec<ClientEvent>,
    pub client_sent_at: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    /// Highest sequence number stored for the session.
    pub highest_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestOutcome {
    pub ack: Ack,
    pub accepted: usize,
    pub duplicates: usize,
    pub gaps: Vec<(u64, u64)>,
}

#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub server_budget: Duration,
    pub survey_seed: u64,
    pub pool_capacity: usize,
    pub candidates_per_template: u64,
    pub score_cache_capacity: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            server_budget: DEFAULT_DEADLINE,
            survey_seed: 0,
            pool_capacity: crate::sourcing::DEFAULT_POOL_CAPACITY,
            candidates_per_template: 200,
            score_cache_capacity: crate::scoring::DEFAULT_CACHE_CAPACITY,
        }
    }
}

struct SessionSlot {
    state: SessionState,
    ended: bool,
}

#[derive(Default)]
struct IngestState {
    highest: Option<u64>,
    seen: HashSet<u64>,
}

struct PlanRuntime {
    plan: TransformPlan,
    scorer: Option<Arc<dyn PostScorer>>,
    rewriter: Option<Arc<dyn TextRewriter>>,
    pool: Arc<CandidatePool>,
}

/// Server side of the rerank and event endpoints.
pub struct Backend {
    coordinator: Arc<Coordinator>,
    store: Arc<EventStore>,
    formats: FormatRegistry,
    plans: HashMap<String, PlanRuntime>,
    cache: ScoreCache,
    sessions: DashMap<(ParticipantId, SessionId), Arc<tokio::sync::Mutex<SessionSlot>>>,
    ingest: DashMap<(ParticipantId, SessionId), Arc<Mutex<IngestState>>>,
    /// Context post ids of every card handed out, per participant.
    cards: DashMap<(ParticipantId, PostId), Vec<PostId>>,
    diary: DiaryScheduler,
    exposures_since_diary: DashMap<ParticipantId, u64>,
    notifier: Arc<dyn Notifier>,
    clock: SharedClock,
    config: BackendConfig,
}

fn tag_of(p: Placement) -> ExposureTag {
    match p {
        Placement::Organic => ExposureTag::Organic,
        Placement::Downranked => ExposureTag::Downranked,
        Placement::Inserted => ExposureTag::Inserted,
        Placement::DeferredReleased => ExposureTag::DeferredReleased,
    }
}

struct Delivered {
    post_id: PostId,
    tag: ExposureTag,
    original_position: Option<u64>,
}

impl Backend {
    pub fn new(
        coordinator: Arc<Coordinator>,
        store: Arc<EventStore>,
        clock: SharedClock,
        config: BackendConfig,
    ) -> Result<Self, String> {
        let mut plans = HashMap::new();
        for arm in &coordinator.study().arms {
            let Some(plan) = &arm.plan else { continue };
            if plans.contains_key(&plan.id) {
                continue;
            }
            let scorer = plan.scorer.as_ref().map(|s| s.build()).transpose().map_err(|e| e.to_string())?;
            let rewriter = plan.edits.as_ref().and_then(|e| {
                e.edits.iter().find_map(|edit| match edit {
                    ContentEdit::RemoteRewrite { endpoint, timeout_ms } => Some(Arc::new(RemoteRewriter::new(
                        endpoint.clone(),
                        Duration::from_millis(*timeout_ms),
                    )) as Arc<dyn TextRewriter>),
                    _ => None,
                })
            });
            let mut pool = CandidatePool::new(config.pool_capacity);
            if let Some(s) = &plan.sourcing {
                if s.transfer_from_sessions {
                    pool = pool.with_transfer_rule(s.transfer_rule.clone().unwrap_or_else(|| plan.target.clone()));
                }
            }
            let pool = Arc::new(pool);
            if let Some(s) = &plan.sourcing {
                for t in &s.templates {
                    for seed in 0..config.candidates_per_template {
                        let c = generate_candidate(t, seed).map_err(|e| e.to_string())?;
                        pool.offer(c);
                    }
                }
            }
            plans.insert(plan.id.clone(), PlanRuntime { plan: plan.clone(), scorer, rewriter, pool });
        }
        Ok(Self {
            coordinator,
            store,
            formats: FormatRegistry::default(),
            plans,
            cache: ScoreCache::new(config.score_cache_capacity),
            sessions: DashMap::new(),
            ingest: DashMap::new(),
            cards: DashMap::new(),
            diary: DiaryScheduler::new(),
            exposures_since_diary: DashMap::new(),
            notifier: Arc::new(BannerNotifier { survey_base_url: "/surveys".into() }),
            clock,
            config,
        })
    }

    /// Replaces the scorer used for `plan_id` (fault injection, custom models).
    pub fn set_scorer(&mut self, plan_id: &str, scorer: Arc<dyn PostScorer>) {
        if let Some(rt) = self.plans.get_mut(plan_id) {
            rt.scorer = Some(scorer);
        }
    }

    pub fn set_rewriter(&mut self, plan_id: &str, rewriter: Arc<dyn TextRewriter>) {
        if let Some(rt) = self.plans.get_mut(plan_id) {
            rt.rewriter = Some(rewriter);
        }
    }

    pub fn set_notifier(&mut self, notifier: Arc<dyn Notifier>) {
        self.notifier = notifier;
    }

    pub fn formats_mut(&mut self) -> &mut FormatRegistry {
        &mut self.formats
    }

    pub fn coordinator(&self) -> &Arc<Coordinator> {
        &self.coordinator
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.store
    }

    pub fn pool(&self, plan_id: &str) -> Option<&Arc<CandidatePool>> {
        self.plans.get(plan_id).map(|rt| &rt.pool)
    }

    /// Pulls fresh posts from every plan's monitored accounts into its pool.
    pub async fn poll_monitored(&self, source: &dyn AccountSource, since: Millis) -> Result<usize, String> {
        let mut added = 0;
        for rt in self.plans.values() {
            let Some(s) = &rt.plan.sourcing else { continue };
            if s.monitored_accounts.is_empty() {
                continue;
            }
            let scorer: Arc<dyn PostScorer> = match &rt.scorer {
                Some(s) => s.clone(),
                None => Arc::new(crate::scoring::KeywordScorer::new(Vec::<(String, f64)>::new()).map_err(|e| e.to_string())?),
            };
            let found = poll_monitored_accounts(source, &s.monitored_accounts, scorer.as_ref(), since, self.config.server_budget, Backoff::default())
                .await
                .map_err(|e| e.to_string())?;
            for c in found {
                added += rt.pool.offer(c) as usize;
            }
        }
        Ok(added)
    }

    fn authenticate(&self, token: Option<&str>) -> Result<ParticipantConfig, ProtocolError> {
        token.and_then(|t| self.coordinator.authenticate(t)).ok_or(ProtocolError::AuthFailed)
    }

    fn slot(&self, participant: &ParticipantId, session: &SessionId) -> Arc<tokio::sync::Mutex<SessionSlot>> {
        self.sessions
            .entry((participant.clone(), session.clone()))
            .or_insert_with(|| {
                Arc::new(tokio::sync::Mutex::new(SessionSlot {
                    state: SessionState::new(participant.clone(), session.clone()),
                    ended: false,
                }))
            })
            .clone()
    }

    /// A snapshot of the session's transform state.
    pub async fn session_state(&self, participant: &ParticipantId, session: &SessionId) -> Option<SessionState> {
        let slot = self.sessions.get(&(participant.clone(), session.clone()))?.clone();
        let guard = slot.lock().await;
        Some(guard.state.clone())
    }

    pub async fn handle_rerank(&self, token: Option<&str>, req: RerankRequest) -> Result<RerankResponse, ProtocolError> {
        let started = Instant::now();
        let config = self.authenticate(token)?;
        let raw = B64.decode(&req.raw_payload).map_err(|e| ProtocolError::BadRequest(format!("raw_payload: {e}")))?;
        if req.client_deadline_ms == 0 {
            return Err(ProtocolError::BadRequest("client_deadline_ms must be > 0".into()));
        }
        let client_deadline = Duration::from_millis(req.client_deadline_ms);
        let budget = self.config.server_budget.min(client_deadline);
        let now = self.clock.now_ms();
        let slot = self.slot(&config.participant_id, &req.session_id);
        let mut slot = slot.lock().await;
        let ctx = Ctx { config: &config, session: &req.session_id, raw: &raw, started, now };

        if req.protocol_version != PROTOCOL_VERSION {
            return self.pass_through(&ctx, &mut slot, None, "unsupported protocol version", false);
        }
        if self.coordinator.study().is_over(now) {
            let mut resp = self.pass_through(&ctx, &mut slot, None, "study ended", false)?;
            resp.end_of_study = true;
            resp.banners.push(Banner {
                kind: BannerKind::EndOfStudy,
                text: "The study has ended. Thank you! Please remove the extension.".into(),
                url: Some(format!("{}/reg/debrief", self.coordinator.study().base_url)),
            });
            return Ok(resp);
        }
        let page = match self.formats.parse(&raw, &req.format_id) {
            Ok(page) => page,
            Err(e) => {
                tracing::warn!(error = %e, format = %req.format_id, "payload not parsed");
                return self.pass_through(&ctx, &mut slot, None, &format!("parse: {e}"), false);
            }
        };
        let rt = self.coordinator.study().arm(&config.arm).and_then(|a| a.plan.as_ref()).and_then(|p| self.plans.get(&p.id));
        let Some(rt) = rt else {
            return self.pass_through(&ctx, &mut slot, Some(&page), "control", false);
        };
        let plan = &rt.plan;

        let scores = match &rt.scorer {
            Some(scorer) => score_posts(&page.posts, scorer.as_ref(), budget, Some(&self.cache)).await,
            None => ScoreResult::default(),
        };
        if scores.fallback {
            let reason = format!("scoring: {}", scores.fallback_reason.as_deref().unwrap_or("fallback"));
            return self.pass_through(&ctx, &mut slot, Some(&page), &reason, true);
        }

        let mut candidates = Vec::new();
        if let Some(ins) = plan.insertions.as_ref().filter(|i| !i.positions.is_empty()) {
            let on_page: HashSet<&PostId> = page.ids().collect();
            let mut taken = rt.pool.take_candidates(ins.positions.len() + 4, ins.source);
            let (usable, rest): (Vec<_>, Vec<_>) =
                taken.drain(..).partition(|c| !on_page.contains(&c.post.id) && !slot.state.recent_post_ids.contains(&c.post.id));
            let mut usable = usable;
            let mut spare = usable.split_off(usable.len().min(ins.positions.len()));
            spare.extend(rest);
            rt.pool.restore(spare);
            if usable.len() < ins.positions.len() && ins.on_shortage == ShortagePolicy::PassThrough {
                rt.pool.restore(usable);
                return self.pass_through(&ctx, &mut slot, Some(&page), "candidate shortage", true);
            }
            candidates = usable;
        }

        let mut rewrites = HashMap::new();
        if let (Some(edits), Some(rewriter)) = (&plan.edits, &rt.rewriter) {
            if edits.edits.iter().any(|e| matches!(e, ContentEdit::RemoteRewrite { .. })) {
                let mut posts: Vec<Post> = page.posts.clone();
                posts.extend(candidates.iter().map(|c| c.post.clone()));
                posts.extend(slot.state.deferred.iter().map(|d| d.post.clone()));
                let remaining = budget.saturating_sub(started.elapsed());
                rewrites = resolve_rewrites(&posts, &edits.edits, rewriter.as_ref(), remaining).await;
            }
        }

        let inputs = TransformInputs { candidates, rewrites };
        let (feed, mut next) = match apply_transform(&page, &slot.state, plan, &scores, &inputs) {
            Ok(out) => out,
            Err(e) => {
                rt.pool.restore(inputs.candidates);
                return self.pass_through(&ctx, &mut slot, Some(&page), &format!("transform: {e}"), true);
            }
        };
        if feed.has_fallback() {
            rt.pool.restore(inputs.candidates);
            return self.pass_through(&ctx, &mut slot, Some(&page), "edit fallback", true);
        }

        let cards = match &plan.ema {
            Some(spec) => plan_survey_insertions(&feed, &slot.state, spec, Some(&scores), self.config.survey_seed),
            None => Vec::new(),
        };

        let mut units: Vec<(Post, Delivered)> = Vec::with_capacity(feed.page.len() + cards.len());
        let released: HashMap<&PostId, u64> = feed.released.iter().map(|d| (&d.post.id, d.original_position)).collect();
        for (i, post) in feed.page.posts.iter().enumerate() {
            let tag = tag_of(feed.placements[i]);
            let original_position = match feed.placements[i] {
                Placement::DeferredReleased => released.get(&post.id).map(|p| p + 1),
                Placement::Downranked => feed
                    .actions
                    .iter()
                    .find(|a| a.post_id == post.id && a.action == ActionKind::Downranked)
                    .and_then(|a| a.original_position)
                    .map(|p| feed.received_base + p as u64 + 1),
                _ => None,
            };
            units.push((post.clone(), Delivered { post_id: post.id.clone(), tag, original_position }));
        }
        for s in &cards {
            let card_post = s.card.to_post(now);
            units.insert(s.position, (card_post, Delivered { post_id: s.card.card_id.clone(), tag: ExposureTag::SurveyCard, original_position: None }));
        }

        let no_change = feed.actions.is_empty() && cards.is_empty();
        let payload = if no_change {
            raw.clone()
        } else {
            let mut out_page = FeedPage { posts: units.iter().map(|(p, _)| p.clone()).collect(), ..feed.page.clone() };
            out_page.cursor = page.cursor.clone();
            match self.formats.serialize(&out_page, &req.format_id) {
                Ok(bytes) => bytes,
                Err(e) => {
                    rt.pool.restore(inputs.candidates);
                    return self.pass_through(&ctx, &mut slot, Some(&page), &format!("serialize: {e}"), true);
                }
            }
        };
        if started.elapsed() > client_deadline {
            rt.pool.restore(inputs.candidates);
            return self.pass_through(&ctx, &mut slot, Some(&page), "deadline exceeded", true);
        }

        // Commit.
        let delivered: Vec<Delivered> = units.into_iter().map(|(_, d)| d).collect();
        let base_units = slot.state.units_delivered;
        let base_posts = slot.state.consumed_count;
        next.units_delivered = base_units + delivered.len() as u64;
        for s in &cards {
            self.cards.insert((config.participant_id.clone(), s.card.card_id.clone()), s.card.context_post_ids.clone());
        }
        slot.state = next;
        let mut digest = ActionsDigest {
            downranked: feed.action_count(ActionKind::Downranked),
            removed: feed.action_count(ActionKind::Removed),
            inserted: feed.action_count(ActionKind::Inserted),
            edited: feed.action_count(ActionKind::Edited),
            released: feed.action_count(ActionKind::DeferredReleased),
            deferred_pending: slot.state.deferred.len(),
            actions: Vec::with_capacity(feed.actions.len()),
        };
        for a in &feed.actions {
            digest.actions.push(DigestEntry {
                post_id: a.post_id.clone(),
                action: a.action,
                from: a.original_position,
                to: a.new_position,
                deferral_target: a.deferral_target,
            });
        }
        let summary = RerankSummary {
            session_id: req.session_id.clone(),
            status: "transformed".into(),
            fallback: false,
            reason: None,
            page_len: page.len(),
            downranked: digest.downranked,
            removed: digest.removed,
            inserted: digest.inserted,
            edited: digest.edited,
            released: digest.released,
            survey_cards: cards.len(),
            elapsed_us: started.elapsed().as_micros() as u64,
        };
        let mut banners = Vec::new();
        self.record_delivery(&ctx, &delivered, base_units, base_posts, summary, &mut banners)?;
        if let Some(pool) = plan.sourcing.as_ref().filter(|s| s.transfer_from_sessions).map(|_| &rt.pool) {
            for post in &feed.removed {
                offer_transfer(pool, post, &req.session_id, scores.score_of(&post.id));
            }
        }
        Ok(RerankResponse {
            status: RerankStatus::Transformed,
            payload: B64.encode(&payload),
            actions_digest: digest,
            survey_insertions: cards,
            fallback: false,
            reason: None,
            banners,
            end_of_study: false,
        })
    }

    fn pass_through(
        &self,
        ctx: &Ctx<'_>,
        slot: &mut SessionSlot,
        page: Option<&FeedPage>,
        reason: &str,
        fallback: bool,
    ) -> Result<RerankResponse, ProtocolError> {
        let base_units = slot.state.units_delivered;
        let base_posts = slot.state.consumed_count;
        let mut delivered = Vec::new();
        if let Some(page) = page {
            for p in &page.posts {
                delivered.push(Delivered { post_id: p.id.clone(), tag: ExposureTag::Organic, original_position: None });
            }
            slot.state.record_delivered(&page.posts);
            slot.state.received_count += page.len() as u64;
            slot.state.units_delivered += page.len() as u64;
        }
        let summary = RerankSummary {
            session_id: ctx.session.clone(),
            status: "pass_through".into(),
            fallback,
            reason: Some(reason.into()),
            page_len: page.map_or(0, FeedPage::len),
            elapsed_us: ctx.started.elapsed().as_micros() as u64,
            ..RerankSummary::default()
        };
        let mut banners = Vec::new();
        self.record_delivery(ctx, &delivered, base_units, base_posts, summary, &mut banners)?;
        Ok(RerankResponse {
            status: RerankStatus::PassThrough,
            payload: B64.encode(ctx.raw),
            actions_digest: ActionsDigest { deferred_pending: slot.state.deferred.len(), ..ActionsDigest::default() },
            survey_insertions: Vec::new(),
            fallback,
            reason: Some(reason.into()),
            banners,
            end_of_study: false,
        })
    }

    fn record_delivery(
        &self,
        ctx: &Ctx<'_>,
        delivered: &[Delivered],
        base_units: u64,
        base_posts: u64,
        summary: RerankSummary,
        banners: &mut Vec<Banner>,
    ) -> Result<(), ProtocolError> {
        let pid = &ctx.config.participant_id;
        let mut records = Vec::with_capacity(delivered.len() + 2);
        let mut post_n = base_posts;
        for (i, d) in delivered.iter().enumerate() {
            let post_position = (d.tag != ExposureTag::SurveyCard).then(|| {
                post_n += 1;
                post_n
            });
            let e = ExposureEvent {
                participant_id: pid.clone(),
                session_id: ctx.session.clone(),
                post_id: d.post_id.clone(),
                global_position: base_units + i as u64 + 1,
                post_position,
                shown_at: ctx.now,
                action_tag: d.tag,
                original_position: d.original_position,
            };
            records.push(NewRecord::new(pid.clone(), ctx.now, RecordBody::Exposure(e)).in_session(ctx.session.clone(), None));
        }
        records.push(NewRecord::new(pid.clone(), ctx.now, RecordBody::Rerank(summary)).in_session(ctx.session.clone(), None));

        let posts = post_n - base_posts;
        let since = {
            let mut c = self.exposures_since_diary.entry(pid.clone()).or_insert(0);
            *c += posts;
            *c
        };
        if let Some(d) = self.diary.due_diary_surveys(pid, &ctx.config.timezone, &ctx.config.survey_schedule, ctx.now, since) {
            self.exposures_since_diary.insert(pid.clone(), 0);
            let contact = ctx.config.contact.as_ref().filter(|c| c.consented).map(|c| c.email.as_str());
            banners.extend(self.notifier.notify(&d, contact));
            records.push(NewRecord::new(pid.clone(), ctx.now, RecordBody::DiaryDispatch(d)));
        }
        self.store.append_batch(records)?;
        Ok(())
    }

    fn ingest_state(&self, participant: &ParticipantId, session: &SessionId) -> Arc<Mutex<IngestState>> {
        self.ingest
            .entry((participant.clone(), session.clone()))
            .or_insert_with(|| {
                // Rebuild from the log so retries stay idempotent across restarts.
                let filter = RecordFilter {
                    kinds: Some(
                        [RecordKind::Engagement, RecordKind::SurveyResponse, RecordKind::ClientExposure, RecordKind::DeferralExpired]
                            .into(),
                    ),
                    ..RecordFilter::all().participant(participant.clone()).session(session.clone())
                };
                let mut st = IngestState::default();
                for r in self.store.scan(0, &filter) {
                    if let Some(seq) = r.seq {
                        st.seen.insert(seq);
                        st.highest = st.highest.max(Some(seq));
                    }
                }
                Arc::new(Mutex::new(st))
            })
            .clone()
    }

    pub async fn ingest_event_batch(&self, token: Option<&str>, batch: EventBatch) -> Result<IngestOutcome, ProtocolError> {
        let config = self.authenticate(token)?;
        let pid = config.participant_id.clone();
        let now = self.clock.now_ms();
        let state = self.ingest_state(&pid, &batch.session_id);
        let mut events = batch.events;
        events.sort_by_key(|e| e.seq);

        let mut session_end = None;
        let outcome = {
            let mut st = state.lock();
            let mut records = Vec::new();
            let mut duplicates = 0;
            let mut gaps = Vec::new();
            let mut batch_seen = HashSet::new();
            let mut highest = st.highest;
            for ev in &events {
                if st.seen.contains(&ev.seq) || !batch_seen.insert(ev.seq) {
                    duplicates += 1;
                    continue;
                }
                let expected = highest.map_or(1, |h| h + 1);
                if ev.seq > expected {
                    gaps.push((expected, ev.seq));
                    let gap = IngestGap { session_id: batch.session_id.clone(), expected_seq: expected, received_seq: ev.seq };
                    records.push(NewRecord::new(pid.clone(), now, RecordBody::IngestGap(gap)).in_session(batch.session_id.clone(), None));
                }
                highest = highest.max(Some(ev.seq));
                let body = match &ev.body {
                    ClientEventBody::Engagement { post_id, kind, value, occurred_at } => RecordBody::Engagement(EngagementEvent {
                        participant_id: pid.clone(),
                        post_id: post_id.clone(),
                        kind: *kind,
                        value: *value,
                        occurred_at: *occurred_at,
                    }),
                    ClientEventBody::SurveyResponse { card_id, answer, answered_at } => {
                        let context =
                            self.cards.get(&(pid.clone(), card_id.clone())).map(|c| c.clone()).unwrap_or_default();
                        RecordBody::SurveyResponse(SurveyResponse {
                            participant_id: pid.clone(),
                            card_id: card_id.clone(),
                            answer: answer.clone(),
                            context_post_ids: context,
                            answered_at: *answered_at,
                        })
                    }
                    ClientEventBody::Exposure { post_id, global_position, shown_at } => RecordBody::ClientExposure(ExposureEvent {
                        participant_id: pid.clone(),
                        session_id: batch.session_id.clone(),
                        post_id: post_id.clone(),
                        global_position: *global_position,
                        post_position: None,
                        shown_at: *shown_at,
                        action_tag: ExposureTag::Organic,
                        original_position: None,
                    }),
                    ClientEventBody::SessionEnd { at } => {
                        session_end = Some(*at);
                        continue;
                    }
                };
                records.push(NewRecord::new(pid.clone(), now, body).in_session(batch.session_id.clone(), Some(ev.seq)));
            }
            let accepted = records.iter().filter(|r| r.seq.is_some()).count();
            self.store.append_batch(records)?;
            for ev in &events {
                st.seen.insert(ev.seq);
            }
            st.highest = highest;
            IngestOutcome { ack: Ack { highest_seq: st.highest }, accepted, duplicates, gaps }
        };
        if session_end.is_some() {
            self.end_session(&pid, &batch.session_id).await?;
        }
        Ok(outcome)
    }

    /// Closes a session: whatever is still deferred is logged as expired.
    pub async fn end_session(&self, participant: &ParticipantId, session: &SessionId) -> Result<usize, ProtocolError> {
        let slot = self.slot(participant, session);
        let mut slot = slot.lock().await;
        if slot.ended {
            return Ok(0);
        }
        slot.ended = true;
        let consumed = slot.state.consumed_count;
        let now = self.clock.now_ms();
        let expired = slot.state.expire_deferred();
        let records: Vec<NewRecord> = expired
            .iter()
            .map(|e| {
                NewRecord::new(
                    participant.clone(),
                    now,
                    RecordBody::DeferralExpired(DeferralExpired {
                        session_id: session.clone(),
                        post_id: e.post.id.clone(),
                        original_position: e.original_position + 1,
                        target_position: e.target_position + 1,
                        consumed_at_end: consumed,
                    }),
                )
                .in_session(session.clone(), None)
            })
            .collect();
        let n = records.len();
        self.store.append_batch(records)?;
        Ok(n)
    }
}

fn offer_transfer(pool: &CandidatePool, post: &Post, session: &SessionId, score: Option<f64>) -> bool {
    let mut copy = post.clone();
    copy.id = PostId(format!("{TRANSFER_ID_PREFIX}{}", post.id));
    copy.provenance = Provenance::Transferred;
    let offered = pool.offer_to_transfer_pool(&copy, session, score);
    if offered {
        tracing::debug!(post = %post.id, "offered to transfer pool");
    }
    offered
}

struct Ctx<'a> {
    config: &'a ParticipantConfig,
    session: &'a SessionId,
    raw: &'a [u8],
    started: Instant,
    now: Millis,
}
