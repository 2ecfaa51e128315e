//! The feed transform: remove, down-rank with deferred reinsertion, insert
//! sourced candidates and edit content, as a pure function of the page, the
//! session state, the plan and the scores.
//!
//! Positions come in three flavours. *Local* positions are indices into one
//! page. *Global* positions count posts delivered to the session so far, so
//! the post at local index `i` of a page delivered at `consumed_count = c`
//! sits at global position `c + i`. *Original* positions count posts received
//! from the platform, so every organic post has a distinct one. A post
//! down-ranked by `k` waits for global position `original + k`.
//!
//! Down-ranked posts and released deferred posts are *pins*: they want a
//! fixed global position. Everything else that survives flows around them in
//! original relative order. A pin is placed in the current page only if the
//! page is long enough to hold it at (or after) its target; otherwise it
//! waits in the session's deferred queue. A pin is therefore never delivered
//! before its target position.

use std::collections::{HashMap, HashSet, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FeedPage, ParticipantId, Post, PostId, SessionId};
use crate::remote::TextRewriter;
use crate::plan::{ContentEdit, EditScope, Metric, PlanError, PostPredicate, TransformPlan};
use crate::scoring::ScoreResult;
use crate::sourcing::CandidatePost;

/// Most recent delivered post ids kept per session for survey context.
pub const RECENT_IDS_CAPACITY: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransformError {
    #[error(transparent)]
    PlanInvalid(#[from] PlanError),
    #[error("scores are a fallback result; deliver the original feed instead")]
    FallbackScores,
    #[error("duplicate post id `{0}`")]
    DuplicatePostId(PostId),
    #[error("insertion position {position} out of range for page of {len}")]
    PositionOutOfRange { position: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeferredEntry {
    pub target_position: u64,
    pub original_position: u64,
    /// Insertion order, for FIFO among equal targets.
    pub seq: u64,
    pub post: Post,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub participant_id: ParticipantId,
    pub session_id: SessionId,
    pub consumed_count: u64,
    /// Platform posts received so far, delivered or not.
    #[serde(default)]
    pub received_count: u64,
    /// Ascending by `(target_position, seq)`.
    pub deferred: Vec<DeferredEntry>,
    pub next_seq: u64,
    /// Feed units (posts and survey cards) delivered so far.
    pub units_delivered: u64,
    pub recent_post_ids: VecDeque<PostId>,
    pub exposure_log_cursor: u64,
}

impl SessionState {
    pub fn new(participant_id: ParticipantId, session_id: SessionId) -> Self {
        Self {
            participant_id,
            session_id,
            consumed_count: 0,
            received_count: 0,
            deferred: Vec::new(),
            next_seq: 0,
            units_delivered: 0,
            recent_post_ids: VecDeque::new(),
            exposure_log_cursor: 0,
        }
    }

    fn enqueue(&mut self, target_position: u64, original_position: u64, post: Post) -> DeferredEntry {
        let seq = self.next_seq;
        self.next_seq += 1;
        let entry = DeferredEntry { target_position, original_position, seq, post };
        let at = self.deferred.partition_point(|e| (e.target_position, e.seq) <= (target_position, seq));
        self.deferred.insert(at, entry.clone());
        entry
    }

    /// Records that `posts` (in order) were handed to the participant.
    pub fn record_delivered<'a>(&mut self, posts: impl IntoIterator<Item = &'a Post>) {
        for p in posts {
            if p.is_survey_card() {
                continue;
            }
            self.consumed_count += 1;
            if self.recent_post_ids.len() == RECENT_IDS_CAPACITY {
                self.recent_post_ids.pop_front();
            }
            self.recent_post_ids.push_back(p.id.clone());
        }
    }

    /// Drops everything still deferred; used when the session ends.
    pub fn expire_deferred(&mut self) -> Vec<DeferredEntry> {
        std::mem::take(&mut self.deferred)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Downranked,
    Removed,
    Inserted,
    Edited,
    DeferredReleased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformAction {
    pub post_id: PostId,
    pub action: ActionKind,
    /// Local index in the input page (organic posts only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_position: Option<usize>,
    /// Local index in the output page.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_position: Option<usize>,
    /// Global position a deferred post waits for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deferral_target: Option<u64>,
    /// Content for inserted, released and edited posts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post: Option<Post>,
    /// Set when an edit could not be applied (e.g. rewriter missed its deadline).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

impl TransformAction {
    fn new(post_id: PostId, action: ActionKind) -> Self {
        Self {
            post_id,
            action,
            original_position: None,
            new_position: None,
            deferral_target: None,
            post: None,
            fallback: false,
        }
    }
}

/// How each output post got where it is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Organic,
    Downranked,
    Inserted,
    DeferredReleased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedFeed {
    pub page: FeedPage,
    pub placements: Vec<Placement>,
    /// Whether each output post satisfies the plan's target rule.
    pub targeted: Vec<bool>,
    pub actions: Vec<TransformAction>,
    /// Posts removed from this page, in order.
    pub removed: Vec<Post>,
    /// Posts newly pushed into the deferred queue.
    pub newly_deferred: Vec<DeferredEntry>,
    /// Deferred posts taken out of the queue (placed or removed).
    pub released: Vec<DeferredEntry>,
    /// Global position of the first output post.
    pub base_position: u64,
    /// Original position of the first input post.
    pub received_base: u64,
}

impl TransformedFeed {
    pub fn action_count(&self, kind: ActionKind) -> usize {
        self.actions.iter().filter(|a| a.action == kind).count()
    }

    pub fn has_fallback(&self) -> bool {
        self.actions.iter().any(|a| a.fallback)
    }
}

/// Extra inputs resolved by the caller before the (pure) transform runs.
#[derive(Debug, Clone, Default)]
pub struct TransformInputs {
    /// Insertion candidates, assigned to the plan's positions in order.
    pub candidates: Vec<CandidatePost>,
    /// Replacement text from a remote rewriter, by post id.
    pub rewrites: HashMap<PostId, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PinClass {
    Released,
    Downranked,
}

struct Pin {
    target: u64,
    class: PinClass,
    order: u64,
    original_position: u64,
    input_index: Option<usize>,
    post: Post,
    entry_seq: Option<u64>,
}

fn local_target(target: u64, base: u64) -> usize {
    target.saturating_sub(base) as usize
}

/// Applies `plan` to `page` for the session in `state`.
pub fn apply_transform(
    page: &FeedPage,
    state: &SessionState,
    plan: &TransformPlan,
    scores: &ScoreResult,
    inputs: &TransformInputs,
) -> Result<(TransformedFeed, SessionState), TransformError> {
    plan.validate()?;
    if scores.fallback {
        return Err(TransformError::FallbackScores);
    }
    let base = state.consumed_count;
    let received = state.received_count;
    let mut next = state.clone();
    next.received_count += page.len() as u64;
    let mut actions = Vec::new();
    let mut removed = Vec::new();
    let score_of = |p: &Post| scores.score_of(&p.id);

    // Classify and remove.
    let mut flow: Vec<(usize, Post, bool)> = Vec::with_capacity(page.len());
    let mut pins: Vec<Pin> = Vec::new();
    for (i, post) in page.posts.iter().enumerate() {
        let score = score_of(post);
        let targeted = plan.target.matches(post, score);
        if plan.removal.as_ref().is_some_and(|r| r.matches(post, score, targeted)) {
            let mut a = TransformAction::new(post.id.clone(), ActionKind::Removed);
            a.original_position = Some(i);
            actions.push(a);
            removed.push(post.clone());
            continue;
        }
        match (&plan.downrank, targeted) {
            (Some(policy), true) => {
                let original = received + i as u64;
                pins.push(Pin {
                    target: original + policy.offset(score),
                    class: PinClass::Downranked,
                    order: i as u64,
                    original_position: original,
                    input_index: Some(i),
                    post: post.clone(),
                    entry_seq: None,
                });
            }
            _ => flow.push((i, post.clone(), targeted)),
        }
    }
    for entry in &state.deferred {
        pins.push(Pin {
            target: entry.target_position,
            class: PinClass::Released,
            order: entry.seq,
            original_position: entry.original_position,
            input_index: None,
            post: entry.post.clone(),
            entry_seq: Some(entry.seq),
        });
    }
    pins.sort_by(|a, b| (a.target, a.class, a.order).cmp(&(b.target, b.class, b.order)));

    // Decide which pins land in this page. Including pin k needs its target to
    // fit once the k pins before it are placed: local target <= |flow| + k.
    let mut placed: Vec<Pin> = Vec::new();
    let mut released = Vec::new();
    let mut waiting = Vec::new();
    let mut closed = false;
    for pin in pins {
        let fits = !closed && local_target(pin.target, base) <= flow.len() + placed.len();
        if !fits {
            closed = true;
            waiting.push(pin);
            continue;
        }
        if pin.class == PinClass::Released {
            let entry = DeferredEntry {
                target_position: pin.target,
                original_position: pin.original_position,
                seq: pin.entry_seq.unwrap_or_default(),
                post: pin.post.clone(),
            };
            released.push(entry);
            // Deferred posts were targeted when they were down-ranked.
            if plan.removal.as_ref().is_some_and(|r| r.matches(&pin.post, score_of(&pin.post), true)) {
                let mut a = TransformAction::new(pin.post.id.clone(), ActionKind::Removed);
                a.deferral_target = Some(pin.target);
                actions.push(a);
                removed.push(pin.post);
                continue;
            }
        }
        placed.push(pin);
    }

    // Lay out pins among the flow. Pin k goes to the first free index at or
    // after its local target.
    let total = flow.len() + placed.len();
    let mut layout: Vec<(Post, Placement, bool, Option<usize>)> = Vec::with_capacity(total);
    let mut flow_iter = flow.into_iter();
    let mut pin_iter = placed.into_iter().peekable();
    let mut pin_meta: Vec<(PostId, PinClass, Option<usize>, u64)> = Vec::new();
    for i in 0..total {
        let take_pin = pin_iter.peek().is_some_and(|p| local_target(p.target, base) <= i);
        if take_pin {
            let pin = pin_iter.next().expect("peeked");
            let placement = match pin.class {
                PinClass::Released => Placement::DeferredReleased,
                PinClass::Downranked => Placement::Downranked,
            };
            pin_meta.push((pin.post.id.clone(), pin.class, pin.input_index, pin.target));
            layout.push((pin.post, placement, true, pin.input_index));
        } else {
            let (idx, post, targeted) = flow_iter.next().expect("pin feasibility guarantees flow");
            layout.push((post, Placement::Organic, targeted, Some(idx)));
        }
    }

    // Pins that did not fit: down-ranks are deferred, queue entries stay.
    next.deferred.clear();
    let mut newly_deferred = Vec::new();
    for pin in waiting {
        match pin.class {
            PinClass::Released => next.deferred.push(DeferredEntry {
                target_position: pin.target,
                original_position: pin.original_position,
                seq: pin.entry_seq.unwrap_or_default(),
                post: pin.post,
            }),
            PinClass::Downranked => {
                let mut a = TransformAction::new(pin.post.id.clone(), ActionKind::Downranked);
                a.original_position = pin.input_index;
                a.deferral_target = Some(pin.target);
                actions.push(a);
                newly_deferred.push(next.enqueue(pin.target, pin.original_position, pin.post));
            }
        }
    }
    next.deferred.sort_by_key(|e| (e.target_position, e.seq));

    // Insert candidates at their requested final indices, ascending.
    let mut present: HashSet<PostId> = layout.iter().map(|(p, ..)| p.id.clone()).collect();
    let mut positions: Vec<usize> = plan.insertions.as_ref().map(|p| p.positions.clone()).unwrap_or_default();
    positions.sort_unstable();
    let mut inserted_ids = HashSet::new();
    for (pos, cand) in positions.into_iter().zip(inputs.candidates.iter()) {
        if !present.insert(cand.post.id.clone()) {
            return Err(TransformError::DuplicatePostId(cand.post.id.clone()));
        }
        let at = pos.min(layout.len());
        let targeted = plan.target.matches(&cand.post, Some(cand.eligibility_score));
        inserted_ids.insert(cand.post.id.clone());
        layout.insert(at, (cand.post.clone(), Placement::Inserted, targeted, None));
    }

    // Content edits.
    let mut edited: HashMap<PostId, bool> = HashMap::new();
    if let Some(edit_plan) = plan.edits.as_ref().filter(|e| !e.edits.is_empty()) {
        for (post, _, targeted, _) in layout.iter_mut() {
            let in_scope = match &edit_plan.scope {
                EditScope::Targeted => *targeted,
                EditScope::All => true,
                EditScope::Matching { predicate } => predicate.matches(post, score_of(post)),
            };
            if !in_scope || post.is_survey_card() {
                continue;
            }
            let (out, fallback) = apply_edits_resolved(post, &edit_plan.edits, &inputs.rewrites);
            if out != *post || fallback {
                *post = out;
                edited.insert(post.id.clone(), fallback);
            }
        }
    }

    // Final positions for the audit trail.
    let final_index: HashMap<PostId, usize> = layout.iter().enumerate().map(|(i, (p, ..))| (p.id.clone(), i)).collect();
    for (id, class, input_index, target) in pin_meta {
        let kind = match class {
            PinClass::Released => ActionKind::DeferredReleased,
            PinClass::Downranked => ActionKind::Downranked,
        };
        let mut a = TransformAction::new(id.clone(), kind);
        a.original_position = input_index;
        a.new_position = final_index.get(&id).copied();
        if class == PinClass::Released {
            a.deferral_target = Some(target);
            a.post = layout.get(a.new_position.unwrap_or(usize::MAX)).map(|(p, ..)| p.clone());
        }
        actions.push(a);
    }
    for (i, (post, ..)) in layout.iter().enumerate() {
        if inserted_ids.contains(&post.id) {
            let mut a = TransformAction::new(post.id.clone(), ActionKind::Inserted);
            a.new_position = Some(i);
            a.post = Some(post.clone());
            actions.push(a);
        }
        if let Some(&fallback) = edited.get(&post.id) {
            let mut a = TransformAction::new(post.id.clone(), ActionKind::Edited);
            a.new_position = Some(i);
            a.post = Some(post.clone());
            a.fallback = fallback;
            actions.push(a);
        }
    }

    let mut out_page = FeedPage { cursor: page.cursor.clone(), posts: Vec::with_capacity(layout.len()), fetched_at: page.fetched_at, extra: page.extra.clone() };
    let mut placements = Vec::with_capacity(layout.len());
    let mut targeted = Vec::with_capacity(layout.len());
    for (post, placement, t, _) in layout {
        out_page.posts.push(post);
        placements.push(placement);
        targeted.push(t);
    }
    next.record_delivered(&out_page.posts);

    Ok((
        TransformedFeed { page: out_page, placements, targeted, actions, removed, newly_deferred, released, base_position: base, received_base: received },
        next,
    ))
}

/// Deferred posts due in a page of `page.len()` posts delivered at the
/// session's current position, with the local index each one should occupy.
///
/// Entries fit greedily in target order: the k-th released entry needs its
/// local target ≤ page length + k. Released entries leave the queue.
pub fn release_due_deferred(state: &SessionState, page: &FeedPage) -> (Vec<(usize, Post)>, SessionState) {
    let base = state.consumed_count;
    let mut next = state.clone();
    let mut out = Vec::new();
    let mut last: Option<usize> = None;
    let mut keep = Vec::new();
    let mut closed = false;
    for entry in &state.deferred {
        let t = local_target(entry.target_position, base);
        if !closed && t <= page.len() + out.len() {
            let at = last.map_or(t, |l| t.max(l + 1));
            last = Some(at);
            out.push((at, entry.post.clone()));
        } else {
            closed = true;
            keep.push(entry.clone());
        }
    }
    next.deferred = keep;
    (out, next)
}

/// Drops every post matching `exclusion`; survivors keep their order.
pub fn remove_posts(page: &FeedPage, exclusion: &PostPredicate, scores: Option<&ScoreResult>) -> (FeedPage, Vec<Post>) {
    let mut kept = page.clone();
    let (gone, stay): (Vec<Post>, Vec<Post>) = page
        .posts
        .iter()
        .cloned()
        .partition(|p| exclusion.matches(p, scores.and_then(|s| s.score_of(&p.id))));
    kept.posts = stay;
    (kept, gone)
}

/// Inserts candidates so that each ends at its requested final index.
/// Insertions are resolved in ascending position order.
pub fn insert_posts(page: &FeedPage, insertions: &[(usize, CandidatePost)]) -> Result<FeedPage, TransformError> {
    let mut out = page.clone();
    let mut ids: HashSet<PostId> = page.ids().cloned().collect();
    let mut sorted: Vec<&(usize, CandidatePost)> = insertions.iter().collect();
    sorted.sort_by_key(|(pos, _)| *pos);
    for (pos, cand) in sorted {
        if *pos > out.posts.len() {
            return Err(TransformError::PositionOutOfRange { position: *pos, len: out.posts.len() });
        }
        if !ids.insert(cand.post.id.clone()) {
            return Err(TransformError::DuplicatePostId(cand.post.id.clone()));
        }
        out.posts.insert(*pos, cand.post.clone());
    }
    Ok(out)
}

/// Single-pass whole-token substitution. Keys match case-insensitively;
/// separators between tokens are preserved.
pub fn substitute_tokens(text: &str, map: &HashMap<String, String>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut token = String::new();
    let flush = |token: &mut String, out: &mut String| {
        if !token.is_empty() {
            match map.get(&token.to_lowercase()) {
                Some(rep) => out.push_str(rep),
                None => out.push_str(token),
            }
            token.clear();
        }
    };
    for c in text.chars() {
        if c.is_alphanumeric() {
            token.push(c);
        } else {
            flush(&mut token, &mut out);
            out.push(c);
        }
    }
    flush(&mut token, &mut out);
    out
}

fn scale(v: u64, factor: f64) -> u64 {
    // f64::round rounds half away from zero.
    (v as f64 * factor).round() as u64
}

fn apply_edits_resolved(post: &Post, edits: &[ContentEdit], rewrites: &HashMap<PostId, String>) -> (Post, bool) {
    let mut out = post.clone();
    let mut fallback = false;
    for edit in edits {
        match edit {
            ContentEdit::Substitute { map } => {
                let lower: HashMap<String, String> = map.iter().map(|(k, v)| (k.to_lowercase(), v.clone())).collect();
                out.text = substitute_tokens(&out.text, &lower);
            }
            ContentEdit::SetMetric { metric, value } => for_metrics(&mut out, *metric, |_| *value),
            ContentEdit::ScaleMetric { metric, factor } => for_metrics(&mut out, *metric, |v| scale(v, *factor)),
            ContentEdit::ReplaceAttachment { attachment, uri } => {
                for a in out.attachments.iter_mut().filter(|a| a.kind == *attachment) {
                    a.uri = uri.clone();
                }
            }
            ContentEdit::RemoteRewrite { .. } => match rewrites.get(&post.id) {
                Some(text) => out.text = text.clone(),
                None => fallback = true,
            },
        }
    }
    if fallback {
        // A failed rewrite leaves the post untouched.
        return (post.clone(), true);
    }
    (out, false)
}

fn for_metrics(post: &mut Post, metric: Metric, f: impl Fn(u64) -> u64) {
    let m = &mut post.metrics;
    match metric {
        Metric::Likes => m.likes = f(m.likes),
        Metric::Comments => m.comments = f(m.comments),
        Metric::Shares => m.shares = f(m.shares),
        Metric::All => {
            m.likes = f(m.likes);
            m.comments = f(m.comments);
            m.shares = f(m.shares);
        }
    }
}

/// Applies local edits. Remote rewrites are never resolved here, so a
/// `RemoteRewrite` edit reports `fallback = true` and leaves the post as is;
/// use [`apply_edits_with_rewriter`] to resolve them.
pub fn apply_edits(post: &Post, edits: &[ContentEdit]) -> (Post, bool) {
    apply_edits_resolved(post, edits, &HashMap::new())
}

/// Fetches replacement text for `posts` if `edits` contain a remote rewrite.
/// A rewriter error or a missed deadline yields an empty map, which makes the
/// affected edits fall back to leaving posts unedited.
pub async fn resolve_rewrites(
    posts: &[Post],
    edits: &[ContentEdit],
    rewriter: &dyn TextRewriter,
    deadline: Duration,
) -> HashMap<PostId, String> {
    if posts.is_empty() || !edits.iter().any(|e| matches!(e, ContentEdit::RemoteRewrite { .. })) {
        return HashMap::new();
    }
    match tokio::time::timeout(deadline, rewriter.rewrite(posts)).await {
        Ok(Ok(texts)) => texts,
        Ok(Err(e)) => {
            tracing::warn!(error = %e, "rewriter failed, leaving posts unedited");
            HashMap::new()
        }
        Err(_) => {
            tracing::warn!("rewriter missed deadline, leaving posts unedited");
            HashMap::new()
        }
    }
}

/// Applies `edits` to one post, resolving remote rewrites within `deadline`.
pub async fn apply_edits_with_rewriter(
    post: &Post,
    edits: &[ContentEdit],
    rewriter: &dyn TextRewriter,
    deadline: Duration,
) -> (Post, bool) {
    let rewrites = resolve_rewrites(std::slice::from_ref(post), edits, rewriter, deadline).await;
    apply_edits_resolved(post, edits, &rewrites)
}

/// Rebuilds the output page from the input page and the action records alone.
pub fn replay_actions(input: &FeedPage, feed: &TransformedFeed) -> Vec<Post> {
    let gone: HashSet<&PostId> = feed
        .actions
        .iter()
        .filter(|a| matches!(a.action, ActionKind::Removed | ActionKind::Downranked) && a.original_position.is_some())
        .map(|a| &a.post_id)
        .collect();
    let mut slots: HashMap<usize, Post> = HashMap::new();
    for a in &feed.actions {
        let Some(pos) = a.new_position else { continue };
        match a.action {
            ActionKind::Downranked => {
                if let Some(i) = a.original_position {
                    slots.insert(pos, input.posts[i].clone());
                }
            }
            ActionKind::DeferredReleased | ActionKind::Inserted => {
                if let Some(p) = &a.post {
                    slots.insert(pos, p.clone());
                }
            }
            _ => {}
        }
    }
    let mut flow = input.posts.iter().filter(|p| !gone.contains(&p.id)).cloned();
    let total = input.posts.len() - gone.len() + slots.len();
    let mut out: Vec<Post> = (0..total)
        .map(|i| slots.remove(&i).or_else(|| flow.next()).expect("action records are complete"))
        .collect();
    for a in feed.actions.iter().filter(|a| a.action == ActionKind::Edited) {
        if let (Some(pos), Some(p)) = (a.new_position, &a.post) {
            out[pos] = p.clone();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{OffsetPolicy, RemovalRule, TargetRule};

    fn page(n: usize) -> FeedPage {
        FeedPage::new("c", (0..n).map(|i| Post::new(format!("p{i}"), "a", format!("post {i}"), i as i64)).collect())
    }

    fn state() -> SessionState {
        SessionState::new("u".into(), "s".into())
    }

    fn target_ids(ids: &[&str]) -> TargetRule {
        TargetRule { threshold: None, predicate: Some(PostPredicate::Ids { ids: ids.iter().map(|s| PostId::from(*s)).collect() }) }
    }

    fn ids(p: &FeedPage) -> Vec<&str> {
        p.posts.iter().map(|p| p.id.as_str()).collect()
    }

    #[test]
    fn identity_plan_is_identity() {
        let input = page(5);
        let (out, st) = apply_transform(&input, &state(), &TransformPlan::identity("id"), &ScoreResult::default(), &TransformInputs::default()).unwrap();
        assert_eq!(out.page, input);
        assert!(out.actions.is_empty());
        assert_eq!(st.consumed_count, 5);
        assert!(st.deferred.is_empty());
    }

    #[test]
    fn local_downrank_by_two() {
        let mut plan = TransformPlan::identity("d");
        plan.target = target_ids(&["p2"]);
        plan.downrank = Some(OffsetPolicy::Fixed { offset: 2 });
        let (out, _) = apply_transform(&page(5), &state(), &plan, &ScoreResult::default(), &TransformInputs::default()).unwrap();
        assert_eq!(ids(&out.page), ["p0", "p1", "p3", "p4", "p2"]);
        let a = &out.actions[0];
        assert_eq!((a.action, a.original_position, a.new_position), (ActionKind::Downranked, Some(2), Some(4)));
    }

    #[test]
    fn downrank_by_hundred_defers() {
        let mut plan = TransformPlan::identity("d");
        plan.target = target_ids(&["p2"]);
        plan.downrank = Some(OffsetPolicy::Fixed { offset: 100 });
        let (out, st) = apply_transform(&page(5), &state(), &plan, &ScoreResult::default(), &TransformInputs::default()).unwrap();
        assert_eq!(ids(&out.page), ["p0", "p1", "p3", "p4"]);
        assert_eq!(st.deferred.len(), 1);
        assert_eq!((st.deferred[0].target_position, st.deferred[0].post.id.as_str()), (102, "p2"));
        assert_eq!(out.actions[0].deferral_target, Some(102));
        assert_eq!(st.consumed_count, 4);
    }

    fn deferred_state(entries: &[(u64, &str)], consumed: u64) -> SessionState {
        let mut st = state();
        st.consumed_count = consumed;
        for (t, id) in entries {
            st.enqueue(*t, t - 100, Post::new(*id, "a", "x", 0));
        }
        st
    }

    #[test]
    fn release_single() {
        let st = deferred_state(&[(102, "p2")], 100);
        let (rel, next) = release_due_deferred(&st, &page(5));
        assert_eq!(rel.len(), 1);
        assert_eq!((rel[0].0, rel[0].1.id.as_str()), (2, "p2"));
        assert!(next.deferred.is_empty());
    }

    #[test]
    fn release_empty_queue() {
        let st = state();
        let (rel, next) = release_due_deferred(&st, &page(5));
        assert!(rel.is_empty());
        assert_eq!(next, st);
    }

    #[test]
    fn release_two_ascending() {
        let st = deferred_state(&[(103, "p9"), (102, "p2")], 100);
        let (rel, _) = release_due_deferred(&st, &page(5));
        let got: Vec<_> = rel.iter().map(|(i, p)| (*i, p.id.as_str())).collect();
        assert_eq!(got, [(2, "p2"), (3, "p9")]);
    }

    #[test]
    fn released_posts_land_on_target_in_transform() {
        let mut st = deferred_state(&[(102, "q2"), (103, "q9")], 100);
        st.next_seq = 2;
        let (out, next) = apply_transform(&page(5), &st, &TransformPlan::identity("i"), &ScoreResult::default(), &TransformInputs::default()).unwrap();
        assert_eq!(ids(&out.page), ["p0", "p1", "q2", "q9", "p2", "p3", "p4"]);
        assert_eq!(next.consumed_count, 107);
        assert_eq!(out.action_count(ActionKind::DeferredReleased), 2);
    }

    #[test]
    fn equal_targets_keep_fifo() {
        let st = deferred_state(&[(101, "a"), (101, "b")], 100);
        let (rel, _) = release_due_deferred(&st, &page(3));
        let got: Vec<_> = rel.iter().map(|(i, p)| (*i, p.id.as_str())).collect();
        assert_eq!(got, [(1, "a"), (2, "b")]);
    }

    #[test]
    fn remove_by_predicate() {
        let p = page(3);
        let pred = PostPredicate::Ids { ids: vec!["p1".into()] };
        let (kept, gone) = remove_posts(&p, &pred, None);
        assert_eq!(ids(&kept), ["p0", "p2"]);
        assert_eq!(gone[0].id.as_str(), "p1");
        let none = PostPredicate::Ids { ids: vec![] };
        assert_eq!(remove_posts(&p, &none, None).0, p);
        let all = PostPredicate::Not { of: Box::new(none) };
        let (kept, gone) = remove_posts(&p, &all, None);
        assert!(kept.is_empty());
        assert_eq!(gone.len(), 3);
    }

    fn cand(id: &str) -> CandidatePost {
        CandidatePost::generated(Post::new(id, "gen", "hello", 0), "t", 0.5)
    }

    #[test]
    fn insert_examples() {
        let p = page(2);
        assert_eq!(ids(&insert_posts(&p, &[(1, cand("q"))]).unwrap()), ["p0", "q", "p1"]);
        assert_eq!(insert_posts(&p, &[]).unwrap(), p);
        assert_eq!(ids(&insert_posts(&p, &[(3, cand("r")), (0, cand("q"))]).unwrap()), ["q", "p0", "p1", "r"]);
        assert!(matches!(insert_posts(&p, &[(4, cand("q"))]), Err(TransformError::PositionOutOfRange { .. })));
        assert!(matches!(insert_posts(&p, &[(0, cand("p1"))]), Err(TransformError::DuplicatePostId(_))));
    }

    #[test]
    fn edit_examples() {
        let post = Post::new("p", "a", "this is awful", 0).with_metrics(500, 3, 1);
        let sub = ContentEdit::Substitute { map: [("awful".into(), "challenging".into())].into() };
        assert_eq!(apply_edits(&post, &[sub]).0.text, "this is challenging");
        assert_eq!(apply_edits(&post, &[]).0, post);
        let scaled = apply_edits(&post, &[ContentEdit::ScaleMetric { metric: Metric::Likes, factor: 0.1 }]).0;
        assert_eq!(scaled.metrics.likes, 50);
        assert_eq!(scaled.id, post.id);
    }

    #[test]
    fn scaling_rounds_half_away_from_zero() {
        assert_eq!(scale(5, 0.5), 3);
        assert_eq!(scale(15, 0.1), 2);
        assert_eq!(scale(14, 0.1), 1);
    }

    #[test]
    fn substitution_is_single_pass_and_keeps_separators() {
        let map: HashMap<String, String> = [("bad".to_string(), "not bad".to_string()), ("not".to_string(), "never".to_string())].into();
        assert_eq!(substitute_tokens("Bad, not-bad!", &map), "not bad, never-not bad!");
    }

    #[test]
    fn missing_rewrite_leaves_post_and_flags() {
        let post = Post::new("p", "a", "text", 0).with_metrics(10, 0, 0);
        let edits = [
            ContentEdit::SetMetric { metric: Metric::Likes, value: 0 },
            ContentEdit::RemoteRewrite { endpoint: "http://x".into(), timeout_ms: 10 },
        ];
        let (out, fallback) = apply_edits(&post, &edits);
        assert!(fallback);
        assert_eq!(out, post);
    }

    #[test]
    fn released_post_can_be_removed_by_plan() {
        let st = deferred_state(&[(101, "v")], 100);
        let mut plan = TransformPlan::identity("r");
        plan.removal = Some(RemovalRule { use_target: false, predicate: Some(PostPredicate::Ids { ids: vec!["v".into()] }) });
        let (out, next) = apply_transform(&page(3), &st, &plan, &ScoreResult::default(), &TransformInputs::default()).unwrap();
        assert_eq!(ids(&out.page), ["p0", "p1", "p2"]);
        assert_eq!(out.removed[0].id.as_str(), "v");
        assert!(next.deferred.is_empty());
    }

    #[test]
    fn fallback_scores_rejected() {
        let r = apply_transform(&page(1), &state(), &TransformPlan::identity("i"), &ScoreResult::fallback(Default::default(), "x"), &TransformInputs::default());
        assert_eq!(r.unwrap_err(), TransformError::FallbackScores);
    }

    #[test]
    fn replay_reproduces_output() {
        let mut st = deferred_state(&[(101, "v")], 100);
        st.next_seq = 1;
        let mut plan = TransformPlan::identity("mix");
        plan.target = target_ids(&["p0", "p3"]);
        plan.downrank = Some(OffsetPolicy::Fixed { offset: 3 });
        plan.insertions = Some(crate::plan::InsertionPlan { positions: vec![1], ..Default::default() });
        plan.edits = Some(crate::plan::EditPlan { scope: EditScope::All, edits: vec![ContentEdit::SetMetric { metric: Metric::Shares, value: 9 }] });
        let inputs = TransformInputs { candidates: vec![cand("g")], rewrites: HashMap::new() };
        let input = page(6);
        let (out, _) = apply_transform(&input, &st, &plan, &ScoreResult::default(), &inputs).unwrap();
        assert_eq!(replay_actions(&input, &out), out.page.posts);
    }
}
