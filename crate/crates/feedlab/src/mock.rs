//! Synthetic platform over HTTP.
//!
//! - `GET /feed?cursor=&ranking=&page_size=` returns a `mock-v1` page
//! - `GET /accounts/{id}/posts?since=` returns the account's posts as JSON
//! - `GET /` is a small page that fetches and lists the feed

use std::sync::Arc;

use async_trait::async_trait;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use feedlab_core::model::{Millis, Post};
use feedlab_core::payload::{serialize_feed_payload, MOCK_FORMAT_ID};
use feedlab_core::platform::{serve_feed_page, Inventory, Ranking, DEFAULT_PAGE_SIZE};
use feedlab_core::sourcing::{AccountSource, PlatformError};
use serde::Deserialize;
use serde_json::json;

pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Debug, Default, Deserialize)]
struct FeedQuery {
    cursor: Option<String>,
    ranking: Option<String>,
    page_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct SinceQuery {
    since: Option<Millis>,
}

pub fn app(inventory: Arc<Inventory>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/feed", get(feed))
        .route("/accounts/{id}/posts", get(account_posts))
        .with_state(inventory)
}

fn bad(msg: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": msg }))).into_response()
}

async fn feed(State(inv): State<Arc<Inventory>>, Query(q): Query<FeedQuery>) -> Response {
    let ranking = match q.ranking.as_deref() {
        None => Ranking::Engagement,
        Some(r) => match Ranking::parse(r) {
            Some(r) => r,
            None => return bad(format!("unknown ranking `{r}`")),
        },
    };
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        return bad(format!("page_size must be in 1..={MAX_PAGE_SIZE}"));
    }
    match serve_feed_page(&inv, q.cursor.as_deref(), ranking, page_size) {
        Ok(page) => {
            let body = serialize_feed_payload(&page, MOCK_FORMAT_ID).expect("mock format is registered");
            ([(header::CONTENT_TYPE, "application/json")], body).into_response()
        }
        Err(e) => bad(e.to_string()),
    }
}

async fn account_posts(State(inv): State<Arc<Inventory>>, Path(id): Path<String>, Query(q): Query<SinceQuery>) -> Response {
    if !inv.accounts.contains(&id) {
        return (StatusCode::NOT_FOUND, Json(json!({ "error": format!("unknown account `{id}`") }))).into_response();
    }
    Json(inv.account_posts(&id, q.since.unwrap_or(0))).into_response()
}

async fn index() -> Html<&'static str> {
    Html(
        r#"<!doctype html><html><head><meta charset="utf-8"><title>mock feed</title></head><body>
<h1>Home</h1><ol id="feed"></ol><button id="more">more</button>
<script>
let cursor = "";
async function load() {
  const r = await fetch("/feed?cursor=" + encodeURIComponent(cursor));
  const page = await r.json();
  for (const p of page.posts) {
    const li = document.createElement("li");
    li.textContent = p.author + ": " + p.text + " (" + p.metrics.likes + " likes)";
    document.getElementById("feed").appendChild(li);
  }
  cursor = page.cursor;
  document.getElementById("more").disabled = !cursor;
}
document.getElementById("more").onclick = load;
load();
</script></body></html>"#,
    )
}

/// Reads monitored accounts from a running mock platform.
pub struct HttpAccountSource {
    base: String,
    client: reqwest::Client,
}

impl HttpAccountSource {
    pub fn new(base: impl Into<String>) -> Self {
        Self { base: base.into().trim_end_matches('/').to_string(), client: reqwest::Client::new() }
    }
}

#[async_trait]
impl AccountSource for HttpAccountSource {
    async fn account_posts(&self, account: &str, since: Millis) -> Result<Vec<Post>, PlatformError> {
        let url = format!("{}/accounts/{account}/posts", self.base);
        let resp = self
            .client
            .get(url)
            .query(&[("since", since)])
            .send()
            .await
            .map_err(|e| PlatformError(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(PlatformError(format!("status {}", resp.status())));
        }
        resp.json().await.map_err(|e| PlatformError(e.to_string()))
    }
}
