//! Stand-in model servers speaking the remote scorer and rewriter wire
//! formats. Scores come from a fixed table, falling back to keyword
//! weights; every reply can be held back by an artificial delay.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use feedlab_core::remote::{RewriteResponse, ScoreRequest, ScoreResponse};
use feedlab_core::scoring::keyword_score;

#[derive(Debug, Clone, Default)]
pub struct StubScorerConfig {
    pub delay: Duration,
    /// Exact scores by post id.
    pub table: HashMap<String, f64>,
    /// Keyword weights for ids missing from the table.
    pub terms: HashMap<String, f64>,
}

impl StubScorerConfig {
    pub fn keywords(terms: &BTreeMap<String, f64>) -> Self {
        Self { terms: terms.iter().map(|(k, v)| (k.clone(), *v)).collect(), ..Self::default() }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

/// `POST /score`
pub fn scorer_app(config: StubScorerConfig) -> Router {
    Router::new().route("/score", post(score)).with_state(Arc::new(config))
}

async fn score(State(cfg): State<Arc<StubScorerConfig>>, Json(req): Json<ScoreRequest>) -> Json<ScoreResponse> {
    if !cfg.delay.is_zero() {
        tokio::time::sleep(cfg.delay).await;
    }
    let scores = req
        .posts
        .into_iter()
        .map(|p| {
            let s = cfg.table.get(&p.id).copied().unwrap_or_else(|| keyword_score(&p.text, &cfg.terms));
            (p.id, s)
        })
        .collect();
    Json(ScoreResponse { scores })
}

#[derive(Debug, Clone, Default)]
pub struct StubRewriterConfig {
    pub delay: Duration,
    /// Whole-word replacements applied to each text.
    pub replacements: HashMap<String, String>,
}

/// `POST /rewrite`
pub fn rewriter_app(config: StubRewriterConfig) -> Router {
    Router::new().route("/rewrite", post(rewrite)).with_state(Arc::new(config))
}

async fn rewrite(State(cfg): State<Arc<StubRewriterConfig>>, Json(req): Json<ScoreRequest>) -> Json<RewriteResponse> {
    if !cfg.delay.is_zero() {
        tokio::time::sleep(cfg.delay).await;
    }
    let map: HashMap<String, String> = cfg.replacements.iter().map(|(k, v)| (k.to_lowercase(), v.clone())).collect();
    let texts = req
        .posts
        .into_iter()
        .map(|p| (p.id, feedlab_core::rerank::substitute_tokens(&p.text, &map)))
        .collect();
    Json(RewriteResponse { texts })
}

/// Binds `router` on an ephemeral local port and serves it in the background.
pub async fn spawn_local(router: Router) -> std::io::Result<(String, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let url = format!("http://{}", listener.local_addr()?);
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router).await;
    });
    Ok((url, handle))
}
