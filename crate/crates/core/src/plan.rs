//! Declarative experiment configuration ([`TransformPlan`]) and its JSON
//! document format.
//!
//! Plans are versioned documents validated on load:
//!
//! ```json
//! {
//!   "version": 1,
//!   "id": "downrank-political",
//!   "scorer": {"kind": "keyword", "terms": {"election": 0.5}},
//!   "target": {"threshold": 0.5},
//!   "downrank": {"kind": "fixed", "offset": 100}
//! }
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurement::EmaTriggerSpec;
use crate::model::{AttachmentKind, Post, PostId};
use crate::scoring::{tokens, ScorerSpec};
use crate::sourcing::{CandidateSource, PostTemplate};

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("plan invalid: {0}")]
    Invalid(String),
    #[error("unsupported plan version {0} (expected {PLAN_VERSION})")]
    UnsupportedVersion(u32),
    #[error("plan document is not valid JSON: {0}")]
    Json(String),
    #[error("cannot read plan: {0}")]
    Io(String),
}

fn invalid(msg: impl Into<String>) -> PlanError {
    PlanError::Invalid(msg.into())
}

/// Predicate over a post and its (optional) score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PostPredicate {
    Ids { ids: Vec<PostId> },
    Authors { authors: Vec<String> },
    HasAttachment { attachment: AttachmentKind },
    /// Any of the terms appears as a whole token (case-insensitive).
    ContainsAny { terms: Vec<String> },
    ScoreAtLeast { threshold: f64 },
    MinLikes { likes: u64 },
    All { of: Vec<PostPredicate> },
    Any { of: Vec<PostPredicate> },
    Not { of: Box<PostPredicate> },
}

impl PostPredicate {
    pub fn matches(&self, post: &Post, score: Option<f64>) -> bool {
        match self {
            PostPredicate::Ids { ids } => ids.contains(&post.id),
            PostPredicate::Authors { authors } => authors.iter().any(|a| *a == post.author),
            PostPredicate::HasAttachment { attachment } => post.attachments.iter().any(|a| a.kind == *attachment),
            PostPredicate::ContainsAny { terms } => {
                let wanted: HashSet<String> = terms.iter().map(|t| t.to_lowercase()).collect();
                tokens(&post.text).any(|t| wanted.contains(&t))
            }
            PostPredicate::ScoreAtLeast { threshold } => score.is_some_and(|s| s >= *threshold),
            PostPredicate::MinLikes { likes } => post.metrics.likes >= *likes,
            PostPredicate::All { of } => of.iter().all(|p| p.matches(post, score)),
            PostPredicate::Any { of } => of.iter().any(|p| p.matches(post, score)),
            PostPredicate::Not { of } => !of.matches(post, score),
        }
    }

    fn validate(&self) -> Result<(), PlanError> {
        match self {
            PostPredicate::ScoreAtLeast { threshold } if !(0.0..=1.0).contains(threshold) => {
                Err(invalid(format!("score threshold {threshold} outside [0, 1]")))
            }
            PostPredicate::All { of } | PostPredicate::Any { of } => of.iter().try_for_each(Self::validate),
            PostPredicate::Not { of } => of.validate(),
            _ => Ok(()),
        }
    }
}

/// Which posts an experiment targets: score at or above a threshold, an explicit predicate, or both an explicit predicate.
/// With both set, both must hold. With neither, nothing is targeted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<PostPredicate>,
}

impl TargetRule {
    pub fn is_empty(&self) -> bool {
        self.threshold.is_none() && self.predicate.is_none()
    }

    pub fn matches(&self, post: &Post, score: Option<f64>) -> bool {
        if self.is_empty() {
            return false;
        }
        let by_score = self.threshold.is_none_or(|t| score.is_some_and(|s| s >= t));
        let by_pred = self.predicate.as_ref().is_none_or(|p| p.matches(post, score));
        by_score && by_pred
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffsetPolicy {
    Fixed { offset: u64 },
    /// Offset `ceil(scale * score)`, at least one position.
    ScoreBased { scale: u64 },
}

impl OffsetPolicy {
    pub fn offset(&self, score: Option<f64>) -> u64 {
        match *self {
            OffsetPolicy::Fixed { offset } => offset,
            OffsetPolicy::ScoreBased { scale } => {
                let s = score.unwrap_or(0.0).clamp(0.0, 1.0);
                ((scale as f64 * s).ceil() as u64).max(1)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RemovalRule {
    /// Remove every targeted post.
    #[serde(default)]
    pub use_target: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<PostPredicate>,
}

impl RemovalRule {
    pub fn matches(&self, post: &Post, score: Option<f64>, targeted: bool) -> bool {
        (self.use_target && targeted) || self.predicate.as_ref().is_some_and(|p| p.matches(post, score))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortagePolicy {
    /// Deliver the original feed when the pool cannot fill every slot.
    #[default]
    PassThrough,
    /// Insert what is available.
    Partial,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InsertionPlan {
    /// Final local indices in the rewritten page.
    pub positions: Vec<usize>,
    #[serde(default)]
    pub source: CandidateSource,
    #[serde(default)]
    pub on_shortage: ShortagePolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Likes,
    Comments,
    Shares,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContentEdit {
    /// Single-pass whole-token dictionary substitution (case-insensitive keys).
    Substitute { map: BTreeMap<String, String> },
    SetMetric { metric: Metric, value: u64 },
    /// Multiply, rounding half away from zero.
    ScaleMetric { metric: Metric, factor: f64 },
    ReplaceAttachment { attachment: AttachmentKind, uri: String },
    /// Text supplied by a remote rewriter, resolved before the transform runs.
    RemoteRewrite { endpoint: String, timeout_ms: u64 },
}

impl ContentEdit {
    pub fn validate(&self) -> Result<(), PlanError> {
        match self {
            ContentEdit::Substitute { map } => check_substitution_acyclic(map),
            ContentEdit::ScaleMetric { factor, .. } if !(factor.is_finite() && *factor >= 0.0) => {
                Err(invalid(format!("metric scale factor {factor} must be finite and >= 0")))
            }
            ContentEdit::RemoteRewrite { timeout_ms: 0, .. } => Err(invalid("rewriter timeout must be > 0")),
            _ => Ok(()),
        }
    }
}

fn check_substitution_acyclic(map: &BTreeMap<String, String>) -> Result<(), PlanError> {
    let lower: HashMap<String, Vec<String>> = map
        .iter()
        .map(|(k, v)| (k.to_lowercase(), tokens(v).collect()))
        .collect();
    if let Some(k) = lower.keys().find(|k| tokens(k).count() != 1) {
        return Err(invalid(format!("substitution key `{k}` must be a single token")));
    }
    // Depth-first search for a cycle over key -> keys appearing in its value.
    fn visit<'a>(
        k: &'a str,
        g: &'a HashMap<String, Vec<String>>,
        state: &mut HashMap<&'a str, u8>,
    ) -> Option<&'a str> {
        match state.get(k) {
            Some(1) => return Some(k),
            Some(2) => return None,
            _ => {}
        }
        state.insert(k, 1);
        for next in g.get(k).into_iter().flatten() {
            if g.contains_key(next.as_str()) {
                if let Some(c) = visit(next, g, state) {
                    return Some(c);
                }
            }
        }
        state.insert(k, 2);
        None
    }
    let mut state = HashMap::new();
    for k in lower.keys() {
        if let Some(c) = visit(k, &lower, &mut state) {
            return Err(invalid(format!("substitution map is cyclic through `{c}`")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditScope {
    #[default]
    Targeted,
    All,
    Matching { predicate: PostPredicate },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    #[serde(default)]
    pub scope: EditScope,
    pub edits: Vec<ContentEdit>,
}

/// Where insertion candidates come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourcingPlan {
    #[serde(default)]
    pub templates: Vec<PostTemplate>,
    #[serde(default)]
    pub monitored_accounts: Vec<String>,
    /// Accept removed/down-ranked posts from other sessions into the transfer pool.
    #[serde(default)]
    pub transfer_from_sessions: bool,
    /// Eligibility rule for transfer offers; defaults to the plan's target rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_rule: Option<TargetRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformPlan {
    pub version: u32,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerSpec>,
    #[serde(default)]
    pub target: TargetRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downrank: Option<OffsetPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removal: Option<RemovalRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertions: Option<InsertionPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edits: Option<EditPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema: Option<EmaTriggerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sourcing: Option<SourcingPlan>,
}

/// Plans bundled with the crate, by file stem.
pub const SHIPPED_PLANS: [(&str, &str); 4] = [
    ("identity", include_str!("../plans/identity.json")),
    ("downrank_political", include_str!("../plans/downrank_political.json")),
    ("remove_video", include_str!("../plans/remove_video.json")),
    ("insert_positive", include_str!("../plans/insert_positive.json")),
];

/// A bundled plan by file stem (`downrank_political`) or plan id (`downrank-political`).
pub fn shipped_plan(name: &str) -> Option<TransformPlan> {
    SHIPPED_PLANS.iter().find_map(|(stem, text)| {
        let plan = TransformPlan::from_json(text).expect("shipped plans validate");
        (*stem == name || plan.id == name).then_some(plan)
    })
}

impl TransformPlan {
    /// A plan with no rules: every transform is the identity.
    pub fn identity(id: impl Into<String>) -> Self {
        Self {
            version: PLAN_VERSION,
            id: id.into(),
            description: None,
            scorer: None,
            target: TargetRule::default(),
            downrank: None,
            removal: None,
            insertions: None,
            edits: None,
            ema: None,
            sourcing: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| PlanError::Json(e.to_string()))?;
        if probe.version != PLAN_VERSION {
            return Err(PlanError::UnsupportedVersion(probe.version));
        }
        let plan: TransformPlan = serde_json::from_str(text).map_err(|e| PlanError::Json(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlanError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PlanError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization")
    }

    /// Checks every structural invariant; the error names the first violation.
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.version != PLAN_VERSION {
            return Err(PlanError::UnsupportedVersion(self.version));
        }
        if self.id.trim().is_empty() {
            return Err(invalid("plan id must not be empty"));
        }
        if let Some(t) = self.target.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid(format!("target threshold {t} outside [0, 1]")));
            }
        }
        if let Some(p) = &self.target.predicate {
            p.validate()?;
        }
        if let Some(scorer) = &self.scorer {
            scorer.validate().map_err(|e| invalid(e.to_string()))?;
        }
        match self.downrank {
            Some(OffsetPolicy::Fixed { offset: 0 }) => return Err(invalid("fixed_offset must be >= 1")),
            Some(OffsetPolicy::ScoreBased { scale: 0 }) => return Err(invalid("score-based scale K must be >= 1")),
            _ => {}
        }
        if let Some(removal) = &self.removal {
            if removal.use_target && self.downrank.is_some() {
                return Err(invalid("downrank and removal cannot both apply to the target rule"));
            }
            if let Some(p) = &removal.predicate {
                p.validate()?;
            }
        }
        if let Some(edits) = &self.edits {
            edits.edits.iter().try_for_each(ContentEdit::validate)?;
            if let EditScope::Matching { predicate } = &edits.scope {
                predicate.validate()?;
            }
        }
        if let Some(ema) = &self.ema {
            ema.validate().map_err(|e| invalid(e.to_string()))?;
        }
        if let Some(sourcing) = &self.sourcing {
            for t in &sourcing.templates {
                t.validate().map_err(|e| invalid(e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_plans_validate() {
        for (stem, text) in SHIPPED_PLANS {
            let plan = TransformPlan::from_json(text).unwrap();
            assert_eq!(shipped_plan(stem), Some(plan.clone()));
            assert_eq!(shipped_plan(&plan.id), Some(plan));
        }
        assert_eq!(shipped_plan("nope"), None);
    }

    #[test]
    fn threshold_out_of_range_is_named() {
        let err = TransformPlan::from_json(r#"{"version":1,"id":"x","target":{"threshold":1.5}}"#).unwrap_err();
        assert!(err.to_string().contains("threshold 1.5"), "{err}");
    }

    #[test]
    fn unknown_version() {
        assert_eq!(
            TransformPlan::from_json(r#"{"version":7,"id":"x"}"#).unwrap_err(),
            PlanError::UnsupportedVersion(7)
        );
    }

    #[test]
    fn downrank_and_target_removal_are_exclusive() {
        let text = r#"{"version":1,"id":"x","target":{"threshold":0.5},
            "downrank":{"kind":"fixed","offset":3},"removal":{"use_target":true}}"#;
        assert!(matches!(TransformPlan::from_json(text), Err(PlanError::Invalid(_))));
    }

    #[test]
    fn zero_offset_rejected() {
        let text = r#"{"version":1,"id":"x","downrank":{"kind":"fixed","offset":0}}"#;
        assert!(TransformPlan::from_json(text).is_err());
    }

    #[test]
    fn cyclic_substitution_rejected() {
        let edit = ContentEdit::Substitute { map: [("bad".into(), "good".into()), ("good".into(), "bad".into())].into() };
        assert!(edit.validate().is_err());
        let chain = ContentEdit::Substitute { map: [("awful".into(), "bad".into()), ("bad".into(), "meh".into())].into() };
        assert!(chain.validate().is_ok());
    }

    #[test]
    fn target_rule_combines_with_and() {
        let post = Post::new("p", "a", "election night", 0);
        let rule = TargetRule {
            threshold: Some(0.5),
            predicate: Some(PostPredicate::ContainsAny { terms: vec!["Election".into()] }),
        };
        assert!(rule.matches(&post, Some(0.7)));
        assert!(!rule.matches(&post, Some(0.2)));
        assert!(!rule.matches(&post, None));
        assert!(!TargetRule::default().matches(&post, Some(1.0)));
    }

    #[test]
    fn score_based_offset() {
        let p = OffsetPolicy::ScoreBased { scale: 50 };
        assert_eq!(p.offset(Some(0.5)), 25);
        assert_eq!(p.offset(Some(0.51)), 26);
        assert_eq!(p.offset(Some(0.0)), 1);
        assert_eq!(OffsetPolicy::Fixed { offset: 100 }.offset(None), 100);
    }
}
