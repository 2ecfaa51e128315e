//! Naive list-insertion model of the feed transform, plus a generator of
//! random pages, session states and plans. Shared by the core property
//! tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::HashMap;

use feedlab_core::model::{AttachmentKind, Post, PostId};
use feedlab_core::plan::{
    ContentEdit, EditPlan, EditScope, InsertionPlan, Metric, OffsetPolicy, PostPredicate, RemovalRule, ShortagePolicy,
    TargetRule, TransformPlan,
};
use feedlab_core::rerank::{replay_actions, DeferredEntry, Placement, SessionState, TransformInputs};
use feedlab_core::scoring::ScoreResult;
use feedlab_core::sourcing::CandidatePost;
use feedlab_core::{apply_transform, FeedPage};
use proptest::prelude::*;

const WORDS: &[&str] = &["election", "garden", "coffee", "ballot", "puppy", "weather", "music", "senate"];

#[derive(Debug, Clone)]
pub struct Case {
    pub page: FeedPage,
    pub state: SessionState,
    pub plan: TransformPlan,
    pub scores: ScoreResult,
    pub candidates: Vec<CandidatePost>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expected {
    pub posts: Vec<Post>,
    pub deferred: Vec<(u64, u64, u64, PostId)>,
    pub removed: Vec<PostId>,
}

fn post(id: String, words: &[usize], likes: u64, video: bool) -> Post {
    let text = words.iter().map(|w| WORDS[*w % WORDS.len()]).collect::<Vec<_>>().join(" ");
    let p = Post::new(id, "acct", text, 0).with_metrics(likes, 1, 1);
    if video {
        p.with_attachment(AttachmentKind::Video, "v.mp4")
    } else {
        p
    }
}

fn arb_post() -> impl Strategy<Value = (Vec<usize>, u64, bool)> {
    (prop::collection::vec(0usize..WORDS.len(), 1..5), 0u64..500, prop::bool::weighted(0.15))
}

fn arb_plan() -> impl Strategy<Value = TransformPlan> {
    let target = prop_oneof![
        (0.0f64..=1.0).prop_map(|t| TargetRule { threshold: Some(t), predicate: None }),
        Just(TargetRule {
            threshold: None,
            predicate: Some(PostPredicate::ContainsAny { terms: vec!["election".into(), "Senate".into()] }),
        }),
        (0.0f64..=1.0).prop_map(|t| TargetRule {
            threshold: Some(t),
            predicate: Some(PostPredicate::ContainsAny { terms: vec!["ballot".into()] }),
        }),
    ];
    let downrank = prop_oneof![
        Just(None),
        (1u64..250).prop_map(|o| Some(OffsetPolicy::Fixed { offset: o })),
        (1u64..120).prop_map(|k| Some(OffsetPolicy::ScoreBased { scale: k })),
    ];
    let removal = prop_oneof![
        2 => Just(None),
        1 => Just(Some(RemovalRule { use_target: false, predicate: Some(PostPredicate::HasAttachment { attachment: AttachmentKind::Video }) })),
        1 => (100u64..500).prop_map(|l| Some(RemovalRule { use_target: false, predicate: Some(PostPredicate::MinLikes { likes: l }) })),
        1 => Just(Some(RemovalRule { use_target: true, predicate: None })),
    ];
    let insertions = prop_oneof![
        Just(None),
        prop::collection::vec(0usize..220, 0..6).prop_map(|positions| Some(InsertionPlan {
            positions,
            on_shortage: ShortagePolicy::Partial,
            ..Default::default()
        })),
    ];
    let edits = prop_oneof![
        Just(None),
        (0u64..50, prop::bool::ANY).prop_map(|(v, all)| Some(EditPlan {
            scope: if all { EditScope::All } else { EditScope::Targeted },
            edits: vec![ContentEdit::SetMetric { metric: Metric::Shares, value: v }],
        })),
        (0.0f64..3.0).prop_map(|f| Some(EditPlan {
            scope: EditScope::Targeted,
            edits: vec![ContentEdit::ScaleMetric { metric: Metric::Likes, factor: f }],
        })),
    ];
    (target, downrank, removal, insertions, edits).prop_map(|(target, downrank, mut removal, insertions, edits)| {
        if downrank.is_some() && removal.as_ref().is_some_and(|r: &RemovalRule| r.use_target) {
            removal = None;
        }
        let mut plan = TransformPlan::identity("random");
        plan.target = target;
        plan.downrank = downrank;
        plan.removal = removal;
        plan.insertions = insertions;
        plan.edits = edits;
        plan
    })
}

/// Random cases: pages of up to `max_page` posts, a session already some way
/// in with a queue of deferred posts (some overdue), and a random plan.
pub fn arb_case(max_page: usize) -> impl Strategy<Value = Case> {
    let posts = prop::collection::vec(arb_post(), 0..=max_page);
    let deferred = prop::collection::vec((arb_post(), 0u64..300, 1u64..260), 0..12);
    let cands = prop::collection::vec((arb_post(), 0.0f64..=1.0), 0..6);
    (posts, deferred, cands, (0u64..600, -40i64..120), arb_plan(), prop::collection::vec(prop::option::weighted(0.9, 0.0f64..=1.0), 0..=max_page + 12))
        .prop_map(|(posts, deferred, cands, (consumed, lead), plan, score_list)| {
            let page = FeedPage::new(
                "cur",
                posts.into_iter().enumerate().map(|(i, (w, l, v))| post(format!("p{i}"), &w, l, v)).collect(),
            );
            let mut state = SessionState::new("P1".into(), "S1".into());
            state.consumed_count = consumed;
            state.units_delivered = consumed;
            state.received_count = consumed.saturating_add_signed(lead);
            let mut entries: Vec<DeferredEntry> = deferred
                .into_iter()
                .enumerate()
                .map(|(i, ((w, l, v), back, off))| {
                    let original = consumed.saturating_sub(back);
                    DeferredEntry {
                        target_position: original + off,
                        original_position: original,
                        seq: i as u64,
                        post: post(format!("d{i}"), &w, l, v),
                    }
                })
                .collect();
            entries.sort_by_key(|e| (e.target_position, e.seq));
            state.next_seq = entries.len() as u64;
            state.deferred = entries;
            let candidates = cands
                .into_iter()
                .enumerate()
                .map(|(i, ((w, l, v), s))| CandidatePost::generated(post(format!("c{i}"), &w, l, v), "t", s))
                .collect();
            let mut scores = ScoreResult::default();
            let ids = page.posts.iter().map(|p| p.id.clone()).chain(state.deferred.iter().map(|e| e.post.id.clone()));
            for (id, s) in ids.zip(score_list) {
                if let Some(s) = s {
                    scores.scores.insert(id, s);
                }
            }
            Case { page, state, plan, scores, candidates }
        })
}

fn edit(post: &mut Post, edits: &[ContentEdit]) {
    for e in edits {
        match e {
            ContentEdit::SetMetric { metric: Metric::Shares, value } => post.metrics.shares = *value,
            ContentEdit::ScaleMetric { metric: Metric::Likes, factor } => {
                post.metrics.likes = (post.metrics.likes as f64 * factor).round() as u64
            }
            other => panic!("oracle does not model {other:?}"),
        }
    }
}

/// Builds the expected output by inserting into a plain list one post at a time.
pub fn oracle(case: &Case) -> Expected {
    let Case { page, state, plan, scores, candidates } = case;
    let base = state.consumed_count;
    let score = |p: &Post| scores.scores.get(&p.id).copied();
    let removes = |p: &Post, t: bool| plan.removal.as_ref().is_some_and(|r| r.matches(p, score(p), t));

    // (post, targeted)
    let mut list: Vec<(Post, bool)> = Vec::new();
    let mut removed = Vec::new();
    // (target, class, order, original, post); class 0 = queued, 1 = new down-rank
    let mut pins: Vec<(u64, u8, u64, u64, Post)> = Vec::new();
    for (i, p) in page.posts.iter().enumerate() {
        let t = plan.target.matches(p, score(p));
        if removes(p, t) {
            removed.push(p.id.clone());
        } else if let (Some(off), true) = (plan.downrank, t) {
            let original = state.received_count + i as u64;
            pins.push((original + off.offset(score(p)), 1, i as u64, original, p.clone()));
        } else {
            list.push((p.clone(), t));
        }
    }
    for e in &state.deferred {
        pins.push((e.target_position, 0, e.seq, e.original_position, e.post.clone()));
    }
    pins.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));

    let mut waiting = Vec::new();
    let mut last: Option<usize> = None;
    let mut stopped = false;
    for pin in pins {
        let local = pin.0.saturating_sub(base) as usize;
        let at = last.map_or(local, |l| local.max(l + 1));
        if stopped || at > list.len() {
            stopped = true;
            waiting.push(pin);
            continue;
        }
        if pin.1 == 0 && removes(&pin.4, true) {
            removed.push(pin.4.id.clone());
            continue;
        }
        list.insert(at, (pin.4, true));
        last = Some(at);
    }

    let mut next_seq = state.next_seq;
    let mut deferred: Vec<(u64, u64, u64, PostId)> = waiting
        .into_iter()
        .map(|(target, class, order, original, p)| {
            let seq = if class == 0 {
                order
            } else {
                next_seq += 1;
                next_seq - 1
            };
            (target, seq, original, p.id)
        })
        .collect();
    deferred.sort();

    if let Some(ins) = &plan.insertions {
        let mut positions = ins.positions.clone();
        positions.sort_unstable();
        for (pos, c) in positions.into_iter().zip(candidates) {
            let at = pos.min(list.len());
            let t = plan.target.matches(&c.post, Some(c.eligibility_score));
            list.insert(at, (c.post.clone(), t));
        }
    }

    if let Some(e) = &plan.edits {
        for (p, t) in list.iter_mut() {
            if matches!(e.scope, EditScope::All) || *t {
                edit(p, &e.edits);
            }
        }
    }

    Expected { posts: list.into_iter().map(|(p, _)| p).collect(), deferred, removed }
}

fn ids(posts: &[Post]) -> Vec<&str> {
    posts.iter().map(|p| p.id.as_str()).collect()
}

/// Runs the real transform on `case` and checks it against the oracle and
/// the structural invariants. Returns a description of the first mismatch.
pub fn check_case(case: &Case) -> Result<(), String> {
    let inputs = TransformInputs { candidates: case.candidates.clone(), rewrites: HashMap::new() };
    let (out, next) = apply_transform(&case.page, &case.state, &case.plan, &case.scores, &inputs)
        .map_err(|e| format!("transform failed: {e}"))?;
    let want = oracle(case);

    if out.page.posts != want.posts {
        return Err(format!("page mismatch\n got  {:?}\n want {:?}", ids(&out.page.posts), ids(&want.posts)));
    }
    let mut got_deferred: Vec<(u64, u64, u64, PostId)> =
        next.deferred.iter().map(|e| (e.target_position, e.seq, e.original_position, e.post.id.clone())).collect();
    got_deferred.sort();
    if got_deferred != want.deferred {
        return Err(format!("deferred mismatch\n got  {got_deferred:?}\n want {:?}", want.deferred));
    }
    let mut got_removed: Vec<PostId> = out.removed.iter().map(|p| p.id.clone()).collect();
    let mut want_removed = want.removed.clone();
    got_removed.sort();
    want_removed.sort();
    if got_removed != want_removed {
        return Err(format!("removed mismatch {got_removed:?} vs {want_removed:?}"));
    }

    // Conservation: nothing appears or vanishes beyond inserted candidates.
    let used = case.plan.insertions.as_ref().map_or(0, |i| i.positions.len()).min(case.candidates.len());
    let mut before: Vec<String> = case
        .page
        .posts
        .iter()
        .map(|p| p.id.0.clone())
        .chain(case.state.deferred.iter().map(|e| e.post.id.0.clone()))
        .chain(case.candidates.iter().take(used).map(|c| c.post.id.0.clone()))
        .collect();
    let mut after: Vec<String> = out
        .page
        .posts
        .iter()
        .map(|p| p.id.0.clone())
        .chain(out.removed.iter().map(|p| p.id.0.clone()))
        .chain(next.deferred.iter().map(|e| e.post.id.0.clone()))
        .collect();
    before.sort();
    after.sort();
    if before != after {
        return Err("posts not conserved".into());
    }

    // Stability: organic posts keep their relative order.
    let organic: Vec<&str> = out
        .page
        .posts
        .iter()
        .zip(&out.placements)
        .filter(|(_, pl)| **pl == Placement::Organic)
        .map(|(p, _)| p.id.as_str())
        .collect();
    let order: HashMap<&str, usize> = case.page.posts.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    if organic.windows(2).any(|w| order[w[0]] >= order[w[1]]) {
        return Err(format!("organic order not preserved: {organic:?}"));
    }

    // No pinned post is delivered before its target.
    let targets: HashMap<&str, u64> = out
        .actions
        .iter()
        .filter_map(|a| a.new_position.and(a.deferral_target).map(|t| (a.post_id.as_str(), t)))
        .collect();
    let base = case.state.consumed_count;
    let offsets: HashMap<&str, u64> = case
        .page
        .posts
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let s = case.scores.scores.get(&p.id).copied();
            case.plan.downrank.map(|d| (p.id.as_str(), case.state.received_count + i as u64 + d.offset(s)))
        })
        .collect();
    for (i, (p, pl)) in out.page.posts.iter().zip(&out.placements).enumerate() {
        let target = match pl {
            Placement::DeferredReleased => targets.get(p.id.as_str()).copied(),
            Placement::Downranked => offsets.get(p.id.as_str()).copied(),
            _ => None,
        };
        if let Some(t) = target {
            if base + (i as u64) < t {
                return Err(format!("{} delivered at {} before target {t}", p.id, base + i as u64));
            }
        }
    }

    // The action records alone rebuild the output.
    if replay_actions(&case.page, &out) != out.page.posts {
        return Err("replay of actions differs from output".into());
    }
    if next.consumed_count != base + out.page.posts.len() as u64 {
        return Err("consumed count not advanced by page length".into());
    }
    if next.received_count != case.state.received_count + case.page.len() as u64 {
        return Err("received count not advanced by input length".into());
    }
    Ok(())
}
