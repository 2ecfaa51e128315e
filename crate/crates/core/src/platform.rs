//! Synthetic platform inventory and paginated feeds in the `mock-v1` format.

use std::collections::HashMap;

use async_trait::async_trait;
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Attachment, AttachmentKind, FeedPage, Millis, Post, PostId};
use crate::sourcing::{AccountSource, PlatformError as SourceError};

pub const DEFAULT_PAGE_SIZE: usize = 20;

pub const POLITICAL_TERMS: &[&str] = &[
    "election", "senate", "ballot", "congress", "campaign", "partisan", "policy", "candidate", "vote", "parliament",
];
pub const POSITIVE_TERMS: &[&str] =
    &["grateful", "sunny", "friends", "celebrate", "wonderful", "hopeful", "kindness", "laughing", "delighted", "cheerful"];
pub const NEUTRAL_TERMS: &[&str] =
    &["coffee", "train", "recipe", "weather", "meeting", "garden", "library", "bicycle", "podcast", "laptop"];
const FILLER: &[&str] = &["today", "just", "the", "about", "really", "some", "new", "this", "with", "again", "my", "our"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlatformError {
    #[error("inventory spec invalid: {0}")]
    SpecInvalid(String),
    #[error("invalid cursor `{0}`")]
    InvalidCursor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventorySpec {
    pub seed: u64,
    pub n_posts: usize,
    pub n_accounts: usize,
    /// Proportions over topic labels; must sum to 1.
    pub topic_mix: IndexMap<String, f64>,
    pub likes_mu: f64,
    pub likes_sigma: f64,
    #[serde(default = "default_attachment_p")]
    pub attachment_p: f64,
    #[serde(default = "default_start")]
    pub start_at: Millis,
    #[serde(default = "default_span")]
    pub span_ms: Millis,
}

fn default_attachment_p() -> f64 {
    0.2
}

fn default_start() -> Millis {
    1_700_000_000_000
}

fn default_span() -> Millis {
    7 * 24 * 3_600_000
}

impl InventorySpec {
    pub fn new(seed: u64, n_posts: usize, n_accounts: usize) -> Self {
        Self {
            seed,
            n_posts,
            n_accounts,
            topic_mix: [("political".to_string(), 0.3), ("positive".to_string(), 0.3), ("neutral".to_string(), 0.4)]
                .into_iter()
                .collect(),
            likes_mu: 3.0,
            likes_sigma: 1.2,
            attachment_p: default_attachment_p(),
            start_at: default_start(),
            span_ms: default_span(),
        }
    }

    pub fn validate(&self) -> Result<(), PlatformError> {
        let bad = |m: String| Err(PlatformError::SpecInvalid(m));
        if self.n_accounts == 0 {
            return bad("n_accounts must be >= 1".into());
        }
        if self.n_posts < self.n_accounts {
            return bad(format!("n_posts {} < n_accounts {}", self.n_posts, self.n_accounts));
        }
        if self.topic_mix.is_empty() || self.topic_mix.values().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("topic proportions must be non-negative".into());
        }
        let total: f64 = self.topic_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("topic proportions sum to {total}"));
        }
        if !self.likes_sigma.is_finite() || self.likes_sigma < 0.0 || !self.likes_mu.is_finite() {
            return bad("likes distribution parameters invalid".into());
        }
        if !(0.0..=1.0).contains(&self.attachment_p) {
            return bad("attachment_p outside [0, 1]".into());
        }
        if self.span_ms <= 0 {
            return bad("span_ms must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    #[default]
    Engagement,
    Chronological,
}

impl Ranking {
    pub fn as_str(self) -> &'static str {
        match self {
            Ranking::Engagement => "engagement",
            Ranking::Chronological => "chronological",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "engagement" => Some(Ranking::Engagement),
            "chronological" => Some(Ranking::Chronological),
            _ => None,
        }
    }
}

fn vocabulary(topic: &str) -> &'static [&'static str] {
    match topic {
        "political" => POLITICAL_TERMS,
        "positive" => POSITIVE_TERMS,
        _ => NEUTRAL_TERMS,
    }
}

#[derive(Debug, Clone)]
pub struct Inventory {
    pub posts: Vec<Post>,
    /// Hidden ground-truth topic of every post.
    pub topics: HashMap<PostId, String>,
    pub accounts: Vec<String>,
    engagement_order: Vec<usize>,
    chronological_order: Vec<usize>,
}

pub fn generate_inventory(spec: &InventorySpec) -> Result<Inventory, PlatformError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<&String> = spec.topic_mix.keys().collect();
    let topic_dist = WeightedIndex::new(spec.topic_mix.values()).map_err(|e| PlatformError::SpecInvalid(e.to_string()))?;
    let likes_dist = LogNormal::new(spec.likes_mu, spec.likes_sigma).map_err(|e| PlatformError::SpecInvalid(e.to_string()))?;
    let accounts: Vec<String> = (0..spec.n_accounts).map(|i| format!("acct{i:03}")).collect();
    let mut posts = Vec::with_capacity(spec.n_posts);
    let mut topics = HashMap::with_capacity(spec.n_posts);
    for i in 0..spec.n_posts {
        let topic = labels[topic_dist.sample(&mut rng)].clone();
        // The first n_accounts posts cover every account once.
        let author = if i < spec.n_accounts { accounts[i].clone() } else { accounts[rng.random_range(0..spec.n_accounts)].clone() };
        let vocab = vocabulary(&topic);
        let mut words: Vec<&str> = Vec::with_capacity(8);
        for _ in 0..2 {
            words.push(vocab[rng.random_range(0..vocab.len())]);
        }
        for _ in 0..rng.random_range(3..7) {
            words.push(FILLER[rng.random_range(0..FILLER.len())]);
        }
        words.shuffle(&mut rng);
        let text = words.join(" ");
        let likes = likes_dist.sample(&mut rng).floor().min(1e12) as u64;
        let comments = rng.random_range(0..=likes / 10 + 1);
        let shares = rng.random_range(0..=likes / 20 + 1);
        let created_at = spec.start_at + rng.random_range(0..spec.span_ms);
        let id = PostId(format!("m{i:06}"));
        let mut post = Post::new(id.clone(), author, text, created_at).with_metrics(likes, comments, shares);
        if rng.random_bool(spec.attachment_p) {
            let kind = [AttachmentKind::Link, AttachmentKind::Image, AttachmentKind::Video][rng.random_range(0..3)];
            post.attachments.push(Attachment { kind, uri: format!("https://media.mock/{}/{id}", kind.as_str()) });
        }
        topics.insert(id, topic);
        posts.push(post);
    }
    Ok(Inventory::from_posts(posts, topics, accounts))
}

impl Inventory {
    pub fn from_posts(posts: Vec<Post>, topics: HashMap<PostId, String>, accounts: Vec<String>) -> Self {
        let mut engagement_order: Vec<usize> = (0..posts.len()).collect();
        engagement_order.sort_by(|&a, &b| {
            let (a, b) = (&posts[a], &posts[b]);
            b.metrics.likes.cmp(&a.metrics.likes).then(b.created_at.cmp(&a.created_at)).then(a.id.cmp(&b.id))
        });
        let mut chronological_order: Vec<usize> = (0..posts.len()).collect();
        chronological_order.sort_by(|&a, &b| {
            let (a, b) = (&posts[a], &posts[b]);
            b.created_at.cmp(&a.created_at).then(a.id.cmp(&b.id))
        });
        Self { posts, topics, accounts, engagement_order, chronological_order }
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn topic(&self, id: &PostId) -> Option<&str> {
        self.topics.get(id).map(String::as_str)
    }

    pub fn ranked(&self, ranking: Ranking) -> impl Iterator<Item = &Post> {
        let order = match ranking {
            Ranking::Engagement => &self.engagement_order,
            Ranking::Chronological => &self.chronological_order,
        };
        order.iter().map(|&i| &self.posts[i])
    }

    /// Posts by `account` newer than `since`, newest first.
    pub fn account_posts(&self, account: &str, since: Millis) -> Vec<Post> {
        self.ranked(Ranking::Chronological).filter(|p| p.author == account && p.created_at > since).cloned().collect()
    }
}

pub fn encode_cursor(ranking: Ranking, offset: usize) -> String {
    URL_SAFE_NO_PAD.encode(format!("{}:{offset}", ranking.as_str()))
}

pub fn decode_cursor(cursor: &str) -> Result<(Ranking, usize), PlatformError> {
    let invalid = || PlatformError::InvalidCursor(cursor.to_owned());
    let raw = URL_SAFE_NO_PAD.decode(cursor).map_err(|_| invalid())?;
    let text = String::from_utf8(raw).map_err(|_| invalid())?;
    let (r, off) = text.split_once(':').ok_or_else(invalid)?;
    Ok((Ranking::parse(r).ok_or_else(invalid)?, off.parse().map_err(|_| invalid())?))
}

/// One page of the ranked inventory. `cursor` of `None` starts at the top;
/// the returned page's cursor is empty past the last page.
pub fn serve_feed_page(
    inventory: &Inventory,
    cursor: Option<&str>,
    ranking: Ranking,
    page_size: usize,
) -> Result<FeedPage, PlatformError> {
    let offset = match cursor.filter(|c| !c.is_empty()) {
        None => 0,
        Some(c) => {
            let (r, off) = decode_cursor(c)?;
            if r != ranking || off > inventory.len() {
                return Err(PlatformError::InvalidCursor(c.to_owned()));
            }
            off
        }
    };
    let posts: Vec<Post> = inventory.ranked(ranking).skip(offset).take(page_size).cloned().collect();
    let end = offset + posts.len();
    let next = if end >= inventory.len() || posts.is_empty() { String::new() } else { encode_cursor(ranking, end) };
    Ok(FeedPage::new(next, posts))
}

#[async_trait]
impl AccountSource for Inventory {
    async fn account_posts(&self, account: &str, since: Millis) -> Result<Vec<Post>, SourceError> {
        Ok(Inventory::account_posts(self, account, since))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_under_seed() {
        let a = generate_inventory(&InventorySpec::new(1, 100, 10)).unwrap();
        let b = generate_inventory(&InventorySpec::new(1, 100, 10)).unwrap();
        assert_eq!(a.posts, b.posts);
        assert_ne!(a.posts, generate_inventory(&InventorySpec::new(2, 100, 10)).unwrap().posts);
    }

    #[test]
    fn topic_fraction_within_two_sigma() {
        let inv = generate_inventory(&InventorySpec::new(1, 1_000, 50)).unwrap();
        let political = inv.topics.values().filter(|t| *t == "political").count() as f64 / 1000.0;
        assert!((political - 0.3).abs() <= 0.03, "{political}");
    }

    #[test]
    fn single_account() {
        let inv = generate_inventory(&InventorySpec::new(1, 40, 1)).unwrap();
        assert!(inv.posts.iter().all(|p| p.author == "acct000"));
    }

    #[test]
    fn invalid_specs() {
        let mut s = InventorySpec::new(1, 5, 10);
        assert!(generate_inventory(&s).is_err());
        s.n_posts = 50;
        s.topic_mix.insert("political".into(), 0.9);
        assert!(matches!(generate_inventory(&s), Err(PlatformError::SpecInvalid(_))));
    }

    #[test]
    fn engagement_ranking_descends() {
        let inv = generate_inventory(&InventorySpec::new(3, 200, 10)).unwrap();
        let page = serve_feed_page(&inv, None, Ranking::Engagement, 20).unwrap();
        let max = inv.posts.iter().map(|p| p.metrics.likes).max().unwrap();
        assert_eq!(page.posts[0].metrics.likes, max);
        assert!(page.posts.windows(2).all(|w| w[0].metrics.likes >= w[1].metrics.likes));
        let chrono = serve_feed_page(&inv, None, Ranking::Chronological, 20).unwrap();
        assert!(chrono.posts.windows(2).all(|w| w[0].created_at >= w[1].created_at));
    }

    #[test]
    fn walking_cursors_partitions_inventory() {
        let inv = generate_inventory(&InventorySpec::new(4, 95, 7)).unwrap();
        for ranking in [Ranking::Engagement, Ranking::Chronological] {
            let mut seen = HashSet::new();
            let mut cursor: Option<String> = None;
            loop {
                let page = serve_feed_page(&inv, cursor.as_deref(), ranking, 10).unwrap();
                for p in &page.posts {
                    assert!(seen.insert(p.id.clone()));
                }
                if page.cursor.is_empty() {
                    break;
                }
                cursor = Some(page.cursor);
            }
            assert_eq!(seen.len(), inv.len());
        }
    }

    #[test]
    fn bad_cursors() {
        let inv = generate_inventory(&InventorySpec::new(4, 30, 3)).unwrap();
        assert!(serve_feed_page(&inv, Some("%%%"), Ranking::Engagement, 10).is_err());
        let chrono = encode_cursor(Ranking::Chronological, 10);
        assert!(matches!(
            serve_feed_page(&inv, Some(&chrono), Ranking::Engagement, 10),
            Err(PlatformError::InvalidCursor(_))
        ));
        assert!(serve_feed_page(&inv, Some(&encode_cursor(Ranking::Engagement, 31)), Ranking::Engagement, 10).is_err());
    }

    #[test]
    fn only_political_posts_use_political_terms() {
        let inv = generate_inventory(&InventorySpec::new(5, 300, 10)).unwrap();
        for p in &inv.posts {
            let has = p.text.split(' ').any(|w| POLITICAL_TERMS.contains(&w));
            assert_eq!(has, inv.topic(&p.id) == Some("political"), "{}", p.text);
        }
    }
}
