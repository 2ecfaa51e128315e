//! Building blocks for feed-reranking field experiments: payload parsing,
//! post scoring, feed transforms, candidate sourcing, registration and
//! assignment, in-feed surveys, and a durable event log.
//!
//! ```
//! use feedlab_core::model::{FeedPage, Post};
//! use feedlab_core::plan::TransformPlan;
//! use feedlab_core::rerank::{apply_transform, SessionState, TransformInputs};
//! use feedlab_core::scoring::ScoreResult;
//!
//! let page = FeedPage::new("c1", vec![Post::new("p0", "a", "hello", 0)]);
//! let state = SessionState::new("u1".into(), "s1".into());
//! let plan = TransformPlan::identity("noop");
//! let (out, next) = apply_transform(&page, &state, &plan, &ScoreResult::default(), &TransformInputs::default()).unwrap();
//! assert_eq!(out.page.posts, page.posts);
//! assert_eq!(next.consumed_count, 1);
//! ```

pub mod clock;
pub mod coordination;
pub mod measurement;
pub mod model;
pub mod payload;
pub mod plan;
pub mod platform;
pub mod protocol;
pub mod remote;
pub mod rerank;
pub mod scoring;
pub mod sourcing;
pub mod store;

pub use model::{FeedPage, ParticipantId, Post, PostId, SessionId};
pub use plan::TransformPlan;
pub use rerank::{apply_transform, SessionState, TransformedFeed};
