//! Down-rank keyword-matched posts across several pages of one session and
//! watch them come back 100 positions later.
//!
//! `cargo run -p feedlab --example transform_session`

use feedlab::core::platform::{generate_inventory, serve_feed_page, InventorySpec, Ranking};
use feedlab::core::plan::shipped_plan;
use feedlab::core::rerank::{apply_transform, ActionKind, SessionState, TransformInputs};
use feedlab::core::scoring::score_posts;
use std::time::Duration;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inv = generate_inventory(&InventorySpec::new(7, 400, 10))?;
    let plan = shipped_plan("downrank_political").expect("bundled");
    let scorer = plan.scorer.as_ref().expect("keyword scorer").build()?;
    let mut state = SessionState::new("P-demo".into(), "s1".into());
    let mut cursor = String::new();

    for page_no in 0..8 {
        let page = serve_feed_page(&inv, Some(&cursor), Ranking::Engagement, 20)?;
        cursor = page.cursor.clone();
        let scores = score_posts(&page.posts, scorer.as_ref(), Duration::from_secs(1), None).await;
        let (feed, next) = apply_transform(&page, &state, &plan, &scores, &TransformInputs::default())?;
        println!(
            "page {page_no}: in {} out {} deferred {} released {} (pending {})",
            page.len(),
            feed.page.len(),
            feed.action_count(ActionKind::Downranked),
            feed.action_count(ActionKind::DeferredReleased),
            next.deferred.len()
        );
        for a in feed.actions.iter().filter(|a| a.action == ActionKind::DeferredReleased) {
            println!("  released {} at local index {:?}", a.post_id, a.new_position);
        }
        state = next;
    }
    Ok(())
}
