//! Insertion candidates: generated posts, posts from monitored accounts, and
//! posts transferred from other participants' feeds.

use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Attachment, AttachmentKind, Millis, Post, PostId, Provenance, SessionId, SocialMetrics, Visibility};
use crate::plan::TargetRule;
use crate::scoring::{score_posts, PostScorer};

pub const DEFAULT_POOL_CAPACITY: usize = 1_000;
pub const MAX_POLL_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SourcingError {
    #[error("template invalid: {0}")]
    TemplateInvalid(String),
    #[error("platform unreachable after {attempts} attempts: {last}")]
    PlatformUnreachable { attempts: u32, last: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateOrigin {
    Template { template_id: String },
    MonitoredAccount { account_id: String },
    Transfer { session_id: SessionId, original_post_id: PostId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePost {
    pub post: Post,
    pub origin: CandidateOrigin,
    pub eligibility_score: f64,
    /// Scoring fell back; `eligibility_score` is 0 and carries no signal.
    #[serde(default)]
    pub unscored: bool,
}

impl CandidatePost {
    pub fn generated(mut post: Post, template_id: impl Into<String>, eligibility_score: f64) -> Self {
        post.provenance = Provenance::Generated;
        Self {
            post,
            origin: CandidateOrigin::Template { template_id: template_id.into() },
            eligibility_score,
            unscored: false,
        }
    }

    pub fn source(&self) -> CandidateSource {
        match self.origin {
            CandidateOrigin::Template { .. } => CandidateSource::Generated,
            CandidateOrigin::MonitoredAccount { .. } => CandidateSource::Monitored,
            CandidateOrigin::Transfer { .. } => CandidateSource::Transferred,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    #[default]
    Any,
    Generated,
    Monitored,
    Transferred,
}

impl CandidateSource {
    pub fn accepts(self, other: CandidateSource) -> bool {
        self == CandidateSource::Any || self == other
    }
}

/// A generated-post template. `text` may contain `{slot}` placeholders
/// filled from `slots`; metric ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostTemplate {
    pub id: String,
    pub author: String,
    pub text: String,
    #[serde(default)]
    pub slots: BTreeMap<String, Vec<String>>,
    pub likes: [u64; 2],
    pub comments: [u64; 2],
    pub shares: [u64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attachment: Option<AttachmentSpec>,
    #[serde(default)]
    pub created_at: Millis,
    #[serde(default = "default_eligibility")]
    pub eligibility_score: f64,
}

fn default_eligibility() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachmentSpec {
    pub kind: AttachmentKind,
    /// `{seed}` is replaced by the generation seed.
    pub uri: String,
}

impl PostTemplate {
    pub fn validate(&self) -> Result<(), SourcingError> {
        let bad = |m: String| Err(SourcingError::TemplateInvalid(format!("{}: {m}", self.id)));
        if self.id.is_empty() {
            return Err(SourcingError::TemplateInvalid("template id is empty".into()));
        }
        if self.text.trim().is_empty() {
            return bad("empty text pattern".into());
        }
        for (name, [lo, hi]) in [("likes", self.likes), ("comments", self.comments), ("shares", self.shares)] {
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        for slot in placeholders(&self.text) {
            match self.slots.get(slot) {
                Some(v) if !v.is_empty() => {}
                _ => return bad(format!("slot `{slot}` has no values")),
            }
        }
        if !(0.0..=1.0).contains(&self.eligibility_score) {
            return bad("eligibility_score outside [0, 1]".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SourcingError> {
        let t: PostTemplate = serde_json::from_str(text).map_err(|e| SourcingError::TemplateInvalid(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }
}

fn placeholders(text: &str) -> impl Iterator<Item = &str> {
    text.split('{').skip(1).filter_map(|rest| rest.split_once('}').map(|(name, _)| name))
}

/// Builds a post from `template`; identical `(template, seed)` give identical posts.
pub fn generate_candidate(template: &PostTemplate, seed: u64) -> Result<CandidatePost, SourcingError> {
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(template.text.len());
    let mut rest = template.text.as_str();
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        match rest[open + 1..].find('}') {
            Some(close) => {
                let name = &rest[open + 1..open + 1 + close];
                let choices = &template.slots[name];
                text.push_str(&choices[rng.random_range(0..choices.len())]);
                rest = &rest[open + close + 2..];
            }
            None => {
                text.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    text.push_str(rest);
    let mut draw = |[lo, hi]: [u64; 2]| rng.random_range(lo..=hi);
    let metrics = SocialMetrics { likes: draw(template.likes), comments: draw(template.comments), shares: draw(template.shares) };
    let attachments = template
        .attachment
        .iter()
        .map(|a| Attachment { kind: a.kind, uri: a.uri.replace("{seed}", &seed.to_string()) })
        .collect();
    let post = Post {
        id: PostId(format!("gen:{}:{seed}", template.id)),
        author: template.author.clone(),
        text,
        created_at: template.created_at,
        metrics,
        attachments,
        provenance: Provenance::Generated,
        visibility: Visibility::Public,
        extra: Vec::new(),
    };
    Ok(CandidatePost::generated(post, template.id.clone(), template.eligibility_score))
}

struct PoolEntry {
    candidate: CandidatePost,
    seq: u64,
}

struct PoolInner {
    entries: Vec<PoolEntry>,
    seen: HashSet<PostId>,
    next_seq: u64,
}

/// Scored candidate queue shared by every session handler.
///
/// Ids are admitted at most once for the pool's lifetime, so a taken
/// candidate can never be offered again.
pub struct CandidatePool {
    capacity: usize,
    transfer_rule: Option<TargetRule>,
    inner: Mutex<PoolInner>,
}

impl CandidatePool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            transfer_rule: None,
            inner: Mutex::new(PoolInner { entries: Vec::new(), seen: HashSet::new(), next_seq: 0 }),
        }
    }

    pub fn with_transfer_rule(mut self, rule: TargetRule) -> Self {
        self.transfer_rule = Some(rule);
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds a candidate. Rejects restricted posts and ids seen before. At
    /// capacity the lowest-eligibility entry is evicted, or the newcomer is
    /// rejected if it would itself be the lowest.
    pub fn offer(&self, candidate: CandidatePost) -> bool {
        if candidate.post.visibility != Visibility::Public {
            return false;
        }
        let mut inner = self.inner.lock();
        if inner.seen.contains(&candidate.post.id) {
            return false;
        }
        if inner.entries.len() >= self.capacity {
            let (idx, lowest) = inner
                .entries
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    a.candidate.eligibility_score.total_cmp(&b.candidate.eligibility_score).then(b.seq.cmp(&a.seq))
                })
                .map(|(i, e)| (i, e.candidate.eligibility_score))
                .expect("pool at capacity is non-empty");
            if candidate.eligibility_score <= lowest {
                return false;
            }
            inner.entries.swap_remove(idx);
        }
        inner.seen.insert(candidate.post.id.clone());
        let seq = inner.next_seq;
        inner.next_seq += 1;
        inner.entries.push(PoolEntry { candidate, seq });
        true
    }

    /// Offers a post removed from (or down-ranked in) another session's feed.
    /// Accepted only if public, eligible under the transfer rule and new.
    pub fn offer_to_transfer_pool(&self, post: &Post, origin: &SessionId, score: Option<f64>) -> bool {
        if post.visibility != Visibility::Public {
            return false;
        }
        let eligible = self.transfer_rule.as_ref().is_some_and(|r| r.matches(post, score));
        if !eligible {
            return false;
        }
        let mut copy = post.clone();
        copy.provenance = Provenance::Transferred;
        self.offer(CandidatePost {
            post: copy,
            origin: CandidateOrigin::Transfer { session_id: origin.clone(), original_post_id: post.id.clone() },
            eligibility_score: score.unwrap_or(0.0).clamp(0.0, 1.0),
            unscored: score.is_none(),
        })
    }

    /// Removes and returns up to `n` of the highest-eligibility candidates
    /// accepted by `source` (oldest first among ties).
    pub fn take_candidates(&self, n: usize, source: CandidateSource) -> Vec<CandidatePost> {
        let mut inner = self.inner.lock();
        let mut eligible: Vec<usize> = (0..inner.entries.len())
            .filter(|&i| source.accepts(inner.entries[i].candidate.source()))
            .collect();
        eligible.sort_by(|&a, &b| {
            let (a, b) = (&inner.entries[a], &inner.entries[b]);
            b.candidate.eligibility_score.total_cmp(&a.candidate.eligibility_score).then(a.seq.cmp(&b.seq))
        });
        eligible.truncate(n);
        let mut picked: Vec<(u64, CandidatePost)> = Vec::with_capacity(eligible.len());
        eligible.sort_unstable_by(|a, b| b.cmp(a));
        for i in eligible {
            let e = inner.entries.remove(i);
            picked.push((e.seq, e.candidate));
        }
        picked.sort_by(|a, b| b.1.eligibility_score.total_cmp(&a.1.eligibility_score).then(a.0.cmp(&b.0)));
        picked.into_iter().map(|(_, c)| c).collect()
    }

    /// Puts back candidates that were taken but not delivered.
    pub fn restore(&self, candidates: Vec<CandidatePost>) {
        let mut inner = self.inner.lock();
        for c in candidates {
            if inner.entries.len() >= self.capacity {
                break;
            }
            let seq = inner.next_seq;
            inner.next_seq += 1;
            inner.entries.push(PoolEntry { candidate: c, seq });
        }
    }
}

impl Default for CandidatePool {
    fn default() -> Self {
        Self::new(DEFAULT_POOL_CAPACITY)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct PlatformError(pub String);

/// Read access to account timelines on the (mock) platform.
#[async_trait]
pub trait AccountSource: Send + Sync {
    async fn account_posts(&self, account: &str, since: Millis) -> Result<Vec<Post>, PlatformError>;
}

#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub initial: Duration,
    pub max_attempts: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { initial: Duration::from_millis(50), max_attempts: MAX_POLL_ATTEMPTS }
    }
}

/// Collects posts newer than `since` from `accounts` and scores them.
/// Platform calls are retried with exponential backoff. If scoring falls
/// back, candidates carry eligibility 0 and `unscored = true`.
pub async fn poll_monitored_accounts(
    source: &dyn AccountSource,
    accounts: &[String],
    scorer: &dyn PostScorer,
    since: Millis,
    deadline: Duration,
    backoff: Backoff,
) -> Result<Vec<CandidatePost>, SourcingError> {
    let mut collected = Vec::new();
    for account in accounts {
        let mut delay = backoff.initial;
        let mut attempt = 0;
        let posts = loop {
            attempt += 1;
            match source.account_posts(account, since).await {
                Ok(posts) => break posts,
                Err(e) if attempt >= backoff.max_attempts => {
                    return Err(SourcingError::PlatformUnreachable { attempts: attempt, last: e.0 });
                }
                Err(e) => {
                    tracing::debug!(account, attempt, error = %e, "monitored account poll failed, retrying");
                    tokio::time::sleep(delay).await;
                    delay *= 2;
                }
            }
        };
        collected.extend(posts.into_iter().filter(|p| p.created_at > since).map(|p| (account.clone(), p)));
    }
    let posts: Vec<Post> = collected.iter().map(|(_, p)| p.clone()).collect();
    let result = score_posts(&posts, scorer, deadline, None).await;
    Ok(collected
        .into_iter()
        .filter(|(_, p)| p.visibility == Visibility::Public)
        .map(|(account, mut post)| {
            let score = result.score_of(&post.id);
            post.provenance = Provenance::Monitored;
            CandidatePost {
                post,
                origin: CandidateOrigin::MonitoredAccount { account_id: account },
                eligibility_score: score.unwrap_or(0.0),
                unscored: result.fallback,
            }
        })
        .collect())
}
