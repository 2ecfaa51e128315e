//! In-feed survey scheduling, diary waves, and the measurement records
//! written to the event log.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use chrono::{Datelike, FixedOffset, TimeZone, Utc};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Millis, OpaqueField, ParticipantId, Post, PostId, SessionId, SURVEY_ID_PREFIX};
use crate::plan::PostPredicate;
use crate::rerank::{SessionState, TransformedFeed};
use crate::scoring::ScoreResult;
use crate::store::{EventRecord, RecordBody};

pub const DEFAULT_CONTEXT_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("survey trigger invalid: {0}")]
pub struct EmaSpecError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmaTrigger {
    /// After the first post on a page matching the predicate.
    Event { predicate: PostPredicate },
    /// Whenever the consumed-post count reaches a multiple of `n`.
    Interval { n: u64 },
    /// At most one card per page, with probability `p`.
    Random { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyQuestion {
    pub text: String,
    pub scale: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<CardStyle>,
}

impl Default for SurveyQuestion {
    fn default() -> Self {
        Self {
            text: "How much did you want to see the post above?".into(),
            scale: ["Not at all", "A little", "Somewhat", "Very much"].map(String::from).to_vec(),
            style: None,
        }
    }
}

/// Rendering hints for the client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardStyle {
    pub accent: String,
    pub accent_dark: String,
    #[serde(default)]
    pub animate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaTriggerSpec {
    #[serde(flatten)]
    pub trigger: EmaTrigger,
    #[serde(default)]
    pub question: SurveyQuestion,
    /// Number of preceding posts recorded as card context.
    #[serde(default = "default_context_window")]
    pub context_window: usize,
    /// Cards are never added to control pages unless this is set.
    #[serde(default)]
    pub allow_in_control: bool,
}

fn default_context_window() -> usize {
    DEFAULT_CONTEXT_WINDOW
}

impl EmaTriggerSpec {
    pub fn interval(n: u64) -> Self {
        Self::new(EmaTrigger::Interval { n })
    }

    pub fn new(trigger: EmaTrigger) -> Self {
        Self { trigger, question: SurveyQuestion::default(), context_window: DEFAULT_CONTEXT_WINDOW, allow_in_control: false }
    }

    pub fn validate(&self) -> Result<(), EmaSpecError> {
        match &self.trigger {
            EmaTrigger::Interval { n: 0 } => return Err(EmaSpecError("interval_n must be >= 1".into())),
            EmaTrigger::Random { p } if !(0.0..=1.0).contains(p) => {
                return Err(EmaSpecError(format!("random_p={p} outside [0, 1]")))
            }
            _ => {}
        }
        if self.question.text.trim().is_empty() {
            return Err(EmaSpecError("question text is empty".into()));
        }
        if self.question.scale.is_empty() {
            return Err(EmaSpecError("response scale is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyCard {
    pub card_id: PostId,
    pub question: SurveyQuestion,
    /// Up to K post ids delivered immediately before the card, oldest first.
    pub context_post_ids: Vec<PostId>,
    pub trigger: String,
}

impl SurveyCard {
    /// The card as a synthetic feed unit for the payload.
    pub fn to_post(&self, created_at: Millis) -> Post {
        let mut post = Post::new(self.card_id.clone(), "study", self.question.text.clone(), created_at);
        let meta = serde_json::json!({
            "scale": self.question.scale,
            "context": self.context_post_ids,
            "style": self.question.style,
        });
        post.extra.push(OpaqueField { name: "survey".into(), raw_json: meta.to_string() });
        post
    }
}

/// A card and the index it occupies in the delivered unit sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyInsertion {
    pub position: usize,
    pub card: SurveyCard,
}

fn derived_seed(seed: u64, session: &SessionId, at: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(session.as_str().as_bytes());
    h.update(at.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Picks survey card slots for a transformed page delivered after `state`
/// (the session state before the page).
///
/// Returned positions index the final unit sequence (posts plus cards), in
/// ascending order.
pub fn plan_survey_insertions(
    page: &TransformedFeed,
    state: &SessionState,
    spec: &EmaTriggerSpec,
    scores: Option<&ScoreResult>,
    rng_seed: u64,
) -> Vec<SurveyInsertion> {
    let posts = &page.page.posts;
    let base = state.consumed_count;
    // Indices of posts (within the page) a card follows.
    let after: Vec<usize> = match &spec.trigger {
        EmaTrigger::Interval { n } => posts
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_survey_card())
            .scan(base, |count, (i, _)| {
                *count += 1;
                Some((i, *count))
            })
            .filter(|(_, count)| count % n == 0)
            .map(|(i, _)| i)
            .collect(),
        EmaTrigger::Event { predicate } => posts
            .iter()
            .position(|p| !p.is_survey_card() && predicate.matches(p, scores.and_then(|s| s.score_of(&p.id))))
            .into_iter()
            .collect(),
        EmaTrigger::Random { p } => {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(rng_seed, &state.session_id, base));
            if posts.is_empty() || *p <= 0.0 || !rng.random_bool(p.min(1.0)) {
                Vec::new()
            } else {
                vec![rng.random_range(0..posts.len())]
            }
        }
    };

    let k = spec.context_window;
    let trigger = match spec.trigger {
        EmaTrigger::Event { .. } => "event",
        EmaTrigger::Interval { .. } => "interval",
        EmaTrigger::Random { .. } => "random",
    };
    after
        .into_iter()
        .enumerate()
        .map(|(n, i)| {
            let mut context: Vec<PostId> =
                posts[..=i].iter().rev().filter(|p| !p.is_survey_card()).take(k).map(|p| p.id.clone()).collect();
            if context.len() < k {
                let need = k - context.len();
                context.extend(state.recent_post_ids.iter().rev().take(need).cloned());
            }
            context.reverse();
            let unit = state.units_delivered + (i + 1 + n) as u64;
            SurveyInsertion {
                position: i + 1 + n,
                card: SurveyCard {
                    card_id: PostId(format!("{SURVEY_ID_PREFIX}{}:{unit}", state.session_id)),
                    question: spec.question.clone(),
                    context_post_ids: context,
                    trigger: trigger.into(),
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiaryCadence {
    Daily,
    Weekly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiarySpec {
    pub cadence: DiaryCadence,
    /// Local hour (0..=23) at which a new period begins.
    #[serde(default)]
    pub local_hour: u32,
    pub survey_ref: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveySchedule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_survey_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_survey_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diary: Option<DiarySpec>,
    /// Posts that must be consumed between two diary waves.
    #[serde(default)]
    pub min_exposure_gate: u64,
}

impl SurveySchedule {
    pub fn validate(&self) -> Result<(), String> {
        match &self.diary {
            Some(d) if d.local_hour > 23 => Err(format!("diary local_hour {} outside 0..=23", d.local_hour)),
            _ => Ok(()),
        }
    }
}

/// Parses a fixed UTC offset such as `+02:00`, `-0530` or `Z`.
pub fn parse_utc_offset(tz: &str) -> Option<FixedOffset> {
    let tz = tz.trim();
    if tz.eq_ignore_ascii_case("z") || tz.eq_ignore_ascii_case("utc") || tz.is_empty() {
        return FixedOffset::east_opt(0);
    }
    let (sign, rest) = match tz.as_bytes()[0] {
        b'+' => (1, &tz[1..]),
        b'-' => (-1, &tz[1..]),
        _ => return None,
    };
    let digits: String = rest.chars().filter(|c| *c != ':').collect();
    if digits.len() != 4 || !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let h: i32 = digits[..2].parse().ok()?;
    let m: i32 = digits[2..].parse().ok()?;
    if h > 14 || m > 59 {
        return None;
    }
    FixedOffset::east_opt(sign * (h * 3600 + m * 60))
}

/// The diary period containing `now` in the participant's local time.
pub fn diary_period(spec: &DiarySpec, tz: FixedOffset, now: Millis) -> String {
    let local = tz.timestamp_millis_opt(now).single().unwrap_or_else(|| Utc.timestamp_millis_opt(0).unwrap().with_timezone(&tz));
    let shifted = local - chrono::Duration::hours(spec.local_hour as i64);
    match spec.cadence {
        DiaryCadence::Daily => shifted.format("%Y-%m-%d").to_string(),
        DiaryCadence::Weekly => {
            let w = shifted.iso_week();
            format!("{}-W{:02}", w.year(), w.week())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiaryDispatch {
    pub participant_id: ParticipantId,
    pub survey_ref: String,
    pub period: String,
    pub dispatched_at: Millis,
}

/// Tracks the last dispatched period per participant so each period yields
/// at most one dispatch.
#[derive(Debug, Default)]
pub struct DiaryScheduler {
    last: Mutex<HashMap<ParticipantId, String>>,
}

impl DiaryScheduler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeds the dedup table from previously recorded dispatches.
    pub fn restore<'a>(&self, dispatches: impl IntoIterator<Item = &'a DiaryDispatch>) {
        let mut last = self.last.lock();
        for d in dispatches {
            last.insert(d.participant_id.clone(), d.period.clone());
        }
    }

    pub fn due_diary_surveys(
        &self,
        participant: &ParticipantId,
        timezone: &str,
        schedule: &SurveySchedule,
        now: Millis,
        exposure_count_since_last: u64,
    ) -> Option<DiaryDispatch> {
        let diary = schedule.diary.as_ref()?;
        if exposure_count_since_last < schedule.min_exposure_gate {
            return None;
        }
        let tz = parse_utc_offset(timezone).unwrap_or_else(|| FixedOffset::east_opt(0).expect("utc"));
        let period = diary_period(diary, tz, now);
        let mut last = self.last.lock();
        if last.get(participant) == Some(&period) {
            return None;
        }
        last.insert(participant.clone(), period.clone());
        Some(DiaryDispatch { participant_id: participant.clone(), survey_ref: diary.survey_ref.clone(), period, dispatched_at: now })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BannerKind {
    Diary,
    EndOfStudy,
    StudyError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Banner {
    pub kind: BannerKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

/// Delivery channel for diary dispatches.
pub trait Notifier: Send + Sync {
    /// Returns a banner to show in-page, if this channel uses one.
    fn notify(&self, dispatch: &DiaryDispatch, contact: Option<&str>) -> Option<Banner>;
}

/// Shows diary invitations as an in-page banner.
#[derive(Debug, Clone)]
pub struct BannerNotifier {
    pub survey_base_url: String,
}

impl Notifier for BannerNotifier {
    fn notify(&self, d: &DiaryDispatch, _contact: Option<&str>) -> Option<Banner> {
        Some(Banner {
            kind: BannerKind::Diary,
            text: "A short survey is ready for you.".into(),
            url: Some(format!("{}/{}?participant={}&period={}", self.survey_base_url, d.survey_ref, d.participant_id, d.period)),
        })
    }
}

pub trait EmailSender: Send + Sync {
    fn send(&self, to: &str, subject: &str, body: &str);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoopEmailSender;

impl EmailSender for NoopEmailSender {
    fn send(&self, _to: &str, _subject: &str, _body: &str) {}
}

/// Sends diary invitations by email when a contact address was given.
pub struct EmailNotifier<S: EmailSender> {
    pub sender: S,
}

impl<S: EmailSender> Notifier for EmailNotifier<S> {
    fn notify(&self, d: &DiaryDispatch, contact: Option<&str>) -> Option<Banner> {
        if let Some(to) = contact {
            self.sender.send(to, "Study survey", &format!("Survey {} for period {}", d.survey_ref, d.period));
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureTag {
    Organic,
    Downranked,
    Inserted,
    DeferredReleased,
    SurveyCard,
}

impl ExposureTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ExposureTag::Organic => "organic",
            ExposureTag::Downranked => "downranked",
            ExposureTag::Inserted => "inserted",
            ExposureTag::DeferredReleased => "deferred_released",
            ExposureTag::SurveyCard => "survey_card",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureEvent {
    pub participant_id: ParticipantId,
    pub session_id: SessionId,
    pub post_id: PostId,
    /// 1-based index in the session's delivered unit stream (posts and cards).
    pub global_position: u64,
    /// 1-based index among delivered posts; absent for survey cards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_position: Option<u64>,
    pub shown_at: Millis,
    pub action_tag: ExposureTag,
    /// For down-ranked and released posts, where the post was originally.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_position: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngagementKind {
    Like,
    Share,
    Comment,
    Click,
    Report,
    Dwell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementEvent {
    pub participant_id: ParticipantId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_id: Option<PostId>,
    pub kind: EngagementKind,
    /// Dwell time in ms for `dwell`; unused otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub occurred_at: Millis,
}

impl EngagementEvent {
    pub fn validate(&self) -> Result<(), String> {
        match (self.kind, self.value) {
            (EngagementKind::Dwell, None) => Err("dwell event without value".into()),
            (EngagementKind::Dwell, Some(v)) if !v.is_finite() || v < 0.0 => Err(format!("dwell value {v} must be >= 0")),
            (EngagementKind::Dwell, _) => Ok(()),
            (_, Some(v)) if !v.is_finite() => Err("non-finite value".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub participant_id: ParticipantId,
    pub card_id: PostId,
    pub answer: String,
    pub context_post_ids: Vec<PostId>,
    pub answered_at: Millis,
}

/// Per-request outcome of the rerank path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankSummary {
    pub session_id: SessionId,
    pub status: String,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub page_len: usize,
    pub downranked: usize,
    pub removed: usize,
    pub inserted: usize,
    pub edited: usize,
    pub released: usize,
    pub survey_cards: usize,
    pub elapsed_us: u64,
}

/// A deferred post whose target lay beyond the end of its session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeferralExpired {
    pub session_id: SessionId,
    pub post_id: PostId,
    pub original_position: u64,
    pub target_position: u64,
    pub consumed_at_end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestGap {
    pub session_id: SessionId,
    pub expected_seq: u64,
    pub received_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Grouping {
    #[default]
    Arm,
    Participant,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReportRow {
    pub group: String,
    pub participants: usize,
    pub exposures: u64,
    pub likes: u64,
    pub likes_per_1k: f64,
    pub mean_dwell_ms: f64,
    pub survey_responses: u64,
    pub removals: u64,
    pub insertions: u64,
    pub requests: u64,
    pub fallbacks: u64,
    pub fallback_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EngagementReport {
    pub rows: Vec<ReportRow>,
}

pub const UNASSIGNED_GROUP: &str = "unassigned";

#[derive(Default)]
struct Acc {
    participants: HashSet<ParticipantId>,
    exposures: u64,
    likes: u64,
    dwell_total: f64,
    dwell_n: u64,
    responses: u64,
    removals: u64,
    insertions: u64,
    requests: u64,
    fallbacks: u64,
}

/// Aggregates engagement per arm (or participant) from a store scan.
///
/// Client events repeating an already seen (participant, session, seq) are
/// counted once. Survey-card exposures are not counted as exposures.
pub fn engagement_report(
    records: &[EventRecord],
    arms: &BTreeMap<ParticipantId, String>,
    grouping: Grouping,
) -> EngagementReport {
    let mut groups: BTreeMap<String, Acc> = BTreeMap::new();
    if grouping == Grouping::Arm {
        for arm in arms.values() {
            groups.entry(arm.clone()).or_default();
        }
    }
    let mut seen = HashSet::new();
    for r in records {
        if let (Some(session), Some(seq)) = (&r.session_id, r.seq) {
            if !seen.insert((r.participant_id.clone(), session.clone(), seq)) {
                continue;
            }
        }
        let group = match grouping {
            Grouping::Arm => arms.get(&r.participant_id).cloned().unwrap_or_else(|| UNASSIGNED_GROUP.into()),
            Grouping::Participant => r.participant_id.to_string(),
        };
        let acc = groups.entry(group).or_default();
        let mut counted = true;
        match &r.body {
            RecordBody::Exposure(e) | RecordBody::ClientExposure(e) if e.action_tag != ExposureTag::SurveyCard => {
                acc.exposures += 1
            }
            RecordBody::Engagement(e) => match e.kind {
                EngagementKind::Like => acc.likes += 1,
                EngagementKind::Dwell => {
                    acc.dwell_total += e.value.unwrap_or(0.0);
                    acc.dwell_n += 1;
                }
                _ => {}
            },
            RecordBody::SurveyResponse(_) => acc.responses += 1,
            RecordBody::Rerank(s) => {
                acc.requests += 1;
                acc.fallbacks += s.fallback as u64;
                acc.removals += s.removed as u64;
                acc.insertions += s.inserted as u64;
            }
            _ => counted = false,
        }
        if counted {
            acc.participants.insert(r.participant_id.clone());
        }
    }
    let ratio = |a: f64, b: u64| if b == 0 { 0.0 } else { a / b as f64 };
    EngagementReport {
        rows: groups
            .into_iter()
            .map(|(group, a)| ReportRow {
                group,
                participants: a.participants.len(),
                exposures: a.exposures,
                likes: a.likes,
                likes_per_1k: ratio(a.likes as f64 * 1000.0, a.exposures),
                mean_dwell_ms: ratio(a.dwell_total, a.dwell_n),
                survey_responses: a.responses,
                removals: a.removals,
                insertions: a.insertions,
                requests: a.requests,
                fallbacks: a.fallbacks,
                fallback_rate: ratio(a.fallbacks as f64, a.requests),
            })
            .collect(),
    }
}

const REPORT_HEADER: [&str; 12] = [
    "group",
    "participants",
    "exposures",
    "likes",
    "likes_per_1k",
    "mean_dwell_ms",
    "survey_responses",
    "removals",
    "insertions",
    "requests",
    "fallbacks",
    "fallback_rate",
];

impl EngagementReport {
    pub fn row(&self, group: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.group == group)
    }

    fn cells(r: &ReportRow) -> [String; 12] {
        [
            r.group.clone(),
            r.participants.to_string(),
            r.exposures.to_string(),
            r.likes.to_string(),
            format!("{:.2}", r.likes_per_1k),
            format!("{:.1}", r.mean_dwell_ms),
            r.survey_responses.to_string(),
            r.removals.to_string(),
            r.insertions.to_string(),
            r.requests.to_string(),
            r.fallbacks.to_string(),
            format!("{:.4}", r.fallback_rate),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER).expect("in-memory csv");
        for r in &self.rows {
            w.write_record(Self::cells(r)).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<[String; 12]> = self.rows.iter().map(Self::cells).collect();
        let mut widths = REPORT_HEADER.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[&str]| {
            for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                if i == 0 {
                    let _ = write!(out, "{c:<w$}");
                } else {
                    let _ = write!(out, "  {c:>w$}");
                }
            }
            out.push('\n');
        };
        line(&mut out, &REPORT_HEADER);
        for r in &rows {
            line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}
