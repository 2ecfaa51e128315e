//! Post scorers and the deadline-bounded scoring call used on the feed path.
//!
//! A scorer either answers inside the deadline or the call reports
//! `fallback = true` with no scores; callers then deliver the original feed.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::num::NonZeroUsize;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Post, PostId};
use crate::remote::RemoteScorer;

pub const DEFAULT_DEADLINE: Duration = Duration::from_millis(300);
pub const DEFAULT_CACHE_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("remote scorer unreachable: {0}")]
    RemoteUnreachable(String),
    #[error("remote scorer returned an invalid response: {0}")]
    InvalidResponse(String),
    #[error("scorer config invalid: {0}")]
    InvalidConfig(String),
}

#[async_trait]
pub trait PostScorer: Send + Sync {
    /// Stable identity of the scorer and its parameters, used as a cache key.
    fn fingerprint(&self) -> &str;

    async fn score(&self, posts: &[Post]) -> Result<HashMap<PostId, f64>, ScoreError>;
}

/// Serializable scorer configuration, as carried in a transform plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    Keyword {
        terms: BTreeMap<String, f64>,
    },
    Remote {
        endpoint: String,
        timeout_ms: u64,
        #[serde(default)]
        scorer_version: String,
        /// Posts per request. `None` sends the whole page in one request.
        #[serde(default)]
        batch_size: Option<usize>,
        #[serde(default = "default_max_concurrent")]
        max_concurrent_requests: usize,
    },
}

fn default_max_concurrent() -> usize {
    4
}

impl ScorerSpec {
    pub fn validate(&self) -> Result<(), ScoreError> {
        match self {
            ScorerSpec::Keyword { terms } => {
                if let Some((t, w)) = terms.iter().find(|(_, w)| !w.is_finite()) {
                    return Err(ScoreError::InvalidConfig(format!("keyword weight for `{t}` is not finite ({w})")));
                }
                Ok(())
            }
            ScorerSpec::Remote { timeout_ms, max_concurrent_requests, batch_size, .. } => {
                if *timeout_ms == 0 {
                    return Err(ScoreError::InvalidConfig("remote timeout must be > 0".into()));
                }
                if *max_concurrent_requests == 0 {
                    return Err(ScoreError::InvalidConfig("max_concurrent_requests must be >= 1".into()));
                }
                if *batch_size == Some(0) {
                    return Err(ScoreError::InvalidConfig("batch_size must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    pub fn build(&self) -> Result<Arc<dyn PostScorer>, ScoreError> {
        self.validate()?;
        Ok(match self {
            ScorerSpec::Keyword { terms } => Arc::new(KeywordScorer::new(terms.iter().map(|(t, w)| (t.clone(), *w)))?),
            ScorerSpec::Remote { endpoint, timeout_ms, scorer_version, batch_size, max_concurrent_requests } => {
                Arc::new(RemoteScorer::new(
                    endpoint.clone(),
                    Duration::from_millis(*timeout_ms),
                    scorer_version.clone(),
                    *batch_size,
                    *max_concurrent_requests,
                ))
            }
        })
    }
}

/// Lowercased whole-word tokens: maximal runs of alphanumeric characters.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

/// `min(1, sum of the weights of every matched token occurrence)`, floored at 0.
///
/// Matching is case-insensitive on whole tokens.
pub fn keyword_score(text: &str, terms: &HashMap<String, f64>) -> f64 {
    let total: f64 = tokens(text).filter_map(|t| terms.get(&t)).sum();
    if total > 0.0 { total.min(1.0) } else { 0.0 }
}

#[derive(Debug, Clone)]
pub struct KeywordScorer {
    terms: HashMap<String, f64>,
    fingerprint: String,
}

impl KeywordScorer {
    pub fn new<I, S>(terms: I) -> Result<Self, ScoreError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut map = HashMap::new();
        for (t, w) in terms {
            let t: String = t.into();
            if !w.is_finite() {
                return Err(ScoreError::InvalidConfig(format!("keyword weight for `{t}` is not finite")));
            }
            map.insert(t.to_lowercase(), w);
        }
        let mut sorted: Vec<_> = map.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        let fingerprint = format!(
            "keyword:{}",
            sorted.iter().map(|(t, w)| format!("{t}={w}")).collect::<Vec<_>>().join(",")
        );
        Ok(Self { terms: map, fingerprint })
    }

    pub fn score_text(&self, text: &str) -> f64 {
        keyword_score(text, &self.terms)
    }
}

#[async_trait]
impl PostScorer for KeywordScorer {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    async fn score(&self, posts: &[Post]) -> Result<HashMap<PostId, f64>, ScoreError> {
        Ok(posts.iter().map(|p| (p.id.clone(), self.score_text(&p.text))).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub scores: HashMap<PostId, f64>,
    pub elapsed_ms: u64,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
}

impl ScoreResult {
    pub fn fallback(elapsed: Duration, reason: impl Into<String>) -> Self {
        Self {
            scores: HashMap::new(),
            elapsed_ms: elapsed.as_millis() as u64,
            fallback: true,
            fallback_reason: Some(reason.into()),
        }
    }

    pub fn score_of(&self, id: &PostId) -> Option<f64> {
        self.scores.get(id).copied()
    }
}

type CacheKey = (String, PostId, u64);

/// Shared LRU of `(scorer fingerprint, post id, text hash) -> score`.
pub struct ScoreCache {
    inner: Mutex<LruCache<CacheKey, f64>>,
}

impl ScoreCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("nonzero");
        Self { inner: Mutex::new(LruCache::new(cap)) }
    }

    fn key(fingerprint: &str, post: &Post) -> CacheKey {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        post.text.hash(&mut h);
        (fingerprint.to_owned(), post.id.clone(), h.finish())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for ScoreCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAPACITY)
    }
}

/// Scores `posts` within `deadline`.
///
/// Any scorer error, timeout or malformed score turns into `fallback = true`
/// with an empty score map. Emitted scores are clamped to `[0, 1]` and only
/// ids from `posts` are kept.
pub async fn score_posts(
    posts: &[Post],
    scorer: &dyn PostScorer,
    deadline: Duration,
    cache: Option<&ScoreCache>,
) -> ScoreResult {
    let start = Instant::now();
    if posts.is_empty() {
        return ScoreResult::default();
    }

    let mut scores = HashMap::with_capacity(posts.len());
    let mut misses = Vec::new();
    match cache {
        Some(cache) => {
            let mut lru = cache.inner.lock();
            for post in posts {
                match lru.get(&ScoreCache::key(scorer.fingerprint(), post)) {
                    Some(s) => {
                        scores.insert(post.id.clone(), *s);
                    }
                    None => misses.push(post.clone()),
                }
            }
        }
        None => misses.extend(posts.iter().cloned()),
    }

    if !misses.is_empty() {
        let fresh = match tokio::time::timeout(deadline, scorer.score(&misses)).await {
            Ok(Ok(fresh)) => fresh,
            Ok(Err(e)) => {
                tracing::warn!(error = %e, "scorer failed, passing feed through");
                return ScoreResult::fallback(start.elapsed(), e.to_string());
            }
            Err(_) => {
                tracing::warn!(deadline_ms = deadline.as_millis() as u64, "scorer missed deadline, passing feed through");
                return ScoreResult::fallback(start.elapsed(), "deadline exceeded");
            }
        };
        let mut accepted = Vec::with_capacity(misses.len());
        for post in &misses {
            if let Some(&s) = fresh.get(&post.id) {
                if !s.is_finite() {
                    return ScoreResult::fallback(start.elapsed(), format!("non-finite score for {}", post.id));
                }
                accepted.push((post, s.clamp(0.0, 1.0)));
            }
        }
        if let Some(cache) = cache {
            let mut lru = cache.inner.lock();
            for (post, s) in &accepted {
                lru.put(ScoreCache::key(scorer.fingerprint(), post), *s);
            }
        }
        scores.extend(accepted.into_iter().map(|(p, s)| (p.id.clone(), s)));
    }

    ScoreResult { scores, elapsed_ms: start.elapsed().as_millis() as u64, fallback: false, fallback_reason: None }
}
