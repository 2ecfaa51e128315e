//! HTTP clients for remote classifier and text-rewriter services.
//!
//! Scorer wire protocol: `POST {"posts":[{"id","text"}],"scorer_version":".."}`
//! answered by `{"scores":{"<id>":0.42}}`. The rewriter takes the same request
//! body and answers `{"texts":{"<id>":"new text"}}`.

use std::collections::HashMap;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::model::{Post, PostId};
use crate::scoring::{PostScorer, ScoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePost {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub posts: Vec<WirePost>,
    #[serde(default)]
    pub scorer_version: String,
}

impl ScoreRequest {
    pub fn from_posts(posts: &[Post], scorer_version: &str) -> Self {
        Self {
            posts: posts.iter().map(|p| WirePost { id: p.id.0.clone(), text: p.text.clone() }).collect(),
            scorer_version: scorer_version.to_owned(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: HashMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewriteResponse {
    pub texts: HashMap<String, String>,
}

fn http_client(timeout: Duration) -> reqwest::Client {
    reqwest::Client::builder().timeout(timeout).build().expect("http client")
}

pub struct RemoteScorer {
    endpoint: String,
    scorer_version: String,
    batch_size: Option<usize>,
    max_concurrent: usize,
    client: reqwest::Client,
    fingerprint: String,
}

impl RemoteScorer {
    pub fn new(
        endpoint: String,
        timeout: Duration,
        scorer_version: String,
        batch_size: Option<usize>,
        max_concurrent: usize,
    ) -> Self {
        let fingerprint = format!("remote:{endpoint}:{scorer_version}");
        Self {
            endpoint,
            scorer_version,
            batch_size,
            max_concurrent: max_concurrent.max(1),
            client: http_client(timeout),
            fingerprint,
        }
    }

    async fn score_batch(&self, posts: &[Post]) -> Result<HashMap<PostId, f64>, ScoreError> {
        let body = ScoreRequest::from_posts(posts, &self.scorer_version);
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .await
            .map_err(|e| ScoreError::RemoteUnreachable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ScoreError::RemoteUnreachable(format!("status {}", resp.status())));
        }
        let parsed: ScoreResponse = resp.json().await.map_err(|e| ScoreError::InvalidResponse(e.to_string()))?;
        Ok(parsed.scores.into_iter().map(|(k, v)| (PostId(k), v)).collect())
    }
}

#[async_trait]
impl PostScorer for RemoteScorer {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    async fn score(&self, posts: &[Post]) -> Result<HashMap<PostId, f64>, ScoreError> {
        let Some(size) = self.batch_size else {
            return self.score_batch(posts).await;
        };
        let batches: Vec<_> = posts.chunks(size).map(|chunk| self.score_batch(chunk)).collect();
        let parts: Vec<HashMap<PostId, f64>> = stream::iter(batches)
            .buffer_unordered(self.max_concurrent)
            .try_collect()
            .await?;
        Ok(parts.into_iter().flatten().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RewriteError {
    #[error("rewriter unreachable: {0}")]
    Unreachable(String),
    #[error("rewriter returned an invalid response: {0}")]
    InvalidResponse(String),
}

/// Produces replacement text for posts (e.g. an LLM reframing service).
#[async_trait]
pub trait TextRewriter: Send + Sync {
    async fn rewrite(&self, posts: &[Post]) -> Result<HashMap<PostId, String>, RewriteError>;
}

pub struct RemoteRewriter {
    endpoint: String,
    client: reqwest::Client,
}

impl RemoteRewriter {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self { endpoint: endpoint.into(), client: http_client(timeout) }
    }
}

#[async_trait]
impl TextRewriter for RemoteRewriter {
    async fn rewrite(&self, posts: &[Post]) -> Result<HashMap<PostId, String>, RewriteError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&ScoreRequest::from_posts(posts, ""))
            .send()
            .await
            .map_err(|e| RewriteError::Unreachable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(RewriteError::Unreachable(format!("status {}", resp.status())));
        }
        let parsed: RewriteResponse = resp.json().await.map_err(|e| RewriteError::InvalidResponse(e.to_string()))?;
        Ok(parsed.texts.into_iter().map(|(k, v)| (PostId(k), v)).collect())
    }
}
