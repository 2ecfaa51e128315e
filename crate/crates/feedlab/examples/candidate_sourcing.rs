//! Insertion candidates from post templates, a shared pool that never hands
//! the same candidate out twice, and a page with the candidates inserted.
//!
//! `cargo run -p feedlab --example candidate_sourcing`

use feedlab::core::model::FeedPage;
use feedlab::core::plan::shipped_plan;
use feedlab::core::platform::{generate_inventory, serve_feed_page, InventorySpec, Ranking};
use feedlab::core::rerank::{apply_transform, SessionState, TransformInputs};
use feedlab::core::scoring::ScoreResult;
use feedlab::core::sourcing::{generate_candidate, CandidatePool, CandidateSource};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let plan = shipped_plan("insert_positive").expect("bundled");
    let template = &plan.sourcing.as_ref().expect("templates").templates[0];
    let pool = CandidatePool::new(16);
    for seed in 0..6 {
        let c = generate_candidate(template, seed)?;
        println!("generated {} {:?}", c.post.id, c.post.text);
        pool.offer(c);
    }

    let inv = generate_inventory(&InventorySpec::new(1, 50, 5))?;
    let page: FeedPage = serve_feed_page(&inv, None, Ranking::Chronological, 10)?;
    for participant in ["P-a", "P-b"] {
        let candidates = pool.take_candidates(2, CandidateSource::Generated);
        let state = SessionState::new(participant.into(), "s".into());
        let inputs = TransformInputs { candidates, ..TransformInputs::default() };
        let (feed, _) = apply_transform(&page, &state, &plan, &ScoreResult::default(), &inputs)?;
        let ids: Vec<&str> = feed.page.posts.iter().map(|p| p.id.as_str()).collect();
        println!("{participant}: {ids:?}");
    }
    println!("{} candidates left in the pool", pool.len());
    Ok(())
}
