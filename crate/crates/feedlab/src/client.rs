//! A scripted stand-in for the browser extension: one cookie jar per
//! instance, speaking the coordination and backend endpoints.

use std::time::Duration;

use feedlab_core::coordination::{ParticipantConfig, RegState, RegistrationSession};
use feedlab_core::protocol::{EventBatch, RerankRequest, RerankResponse, TOKEN_HEADER};
use reqwest::header::ACCEPT;
use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::server::{EnterReply, EventsReply};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("backend unreachable at {url}: {reason}")]
    BackendUnreachable { url: String, reason: String },
    #[error("{url}: status {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("{url}: response not understood: {reason}")]
    Decode { url: String, reason: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

/// One simulated browser profile.
#[derive(Debug, Clone)]
pub struct StudyClient {
    base: String,
    http: reqwest::Client,
}

impl StudyClient {
    pub fn new(base: impl Into<String>) -> Self {
        let http = reqwest::Client::builder()
            .cookie_store(true)
            .redirect(reqwest::redirect::Policy::none())
            .pool_max_idle_per_host(4)
            .build()
            .expect("http client");
        Self { base: base.into().trim_end_matches('/').to_string(), http }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        if path.starts_with("http://") || path.starts_with("https://") {
            path.to_string()
        } else {
            format!("{}{path}", self.base)
        }
    }

    async fn send<T: DeserializeOwned>(&self, url: String, req: reqwest::RequestBuilder) -> Result<T, ClientError> {
        let resp = req
            .header(ACCEPT, "application/json")
            .send()
            .await
            .map_err(|e| ClientError::BackendUnreachable { url: url.clone(), reason: e.to_string() })?;
        let status = resp.status();
        let body = resp.bytes().await.map_err(|e| ClientError::BackendUnreachable { url: url.clone(), reason: e.to_string() })?;
        if !status.is_success() {
            return Err(ClientError::Status { url, status: status.as_u16(), body: String::from_utf8_lossy(&body).into_owned() });
        }
        serde_json::from_slice(&body).map_err(|e| ClientError::Decode { url, reason: e.to_string() })
    }

    /// `GET /reg/enter` with survey-redirect parameters.
    pub async fn enter(&self, params: &[(String, String)]) -> Result<EnterReply, ClientError> {
        let url = self.url("/reg/enter");
        self.send(url.clone(), self.http.get(&url).query(params)).await
    }

    pub async fn consent(&self, registration_id: &str, accept: bool) -> Result<RegState, ClientError> {
        #[derive(serde::Deserialize)]
        struct Reply {
            state: RegState,
        }
        let url = self.url("/reg/consent");
        let form = [("registration_id", registration_id), ("decision", if accept { "accept" } else { "decline" })];
        let r: Reply = self.send(url.clone(), self.http.post(&url).form(&form)).await?;
        Ok(r.state)
    }

    pub async fn instructions(&self) -> Result<RegistrationSession, ClientError> {
        let url = self.url("/reg/instructions");
        self.send(url.clone(), self.http.get(&url)).await
    }

    /// Opens a recovery link (absolute or path).
    pub async fn recover(&self, link: &str) -> Result<RegistrationSession, ClientError> {
        let url = self.url(link);
        self.send(url.clone(), self.http.get(&url)).await
    }

    /// The extension's first-run claim, using this profile's cookie.
    pub async fn claim(&self) -> Result<ParticipantConfig, ClientError> {
        let url = self.url("/v1/config");
        self.send(url.clone(), self.http.get(&url)).await
    }

    /// Enter, consent, read instructions and claim.
    pub async fn enroll(&self, params: &[(String, String)]) -> Result<ParticipantConfig, ClientError> {
        let e = self.enter(params).await?;
        if e.state == RegState::Entered {
            self.consent(&e.registration_id, true).await?;
        }
        self.instructions().await?;
        self.claim().await
    }

    pub async fn rerank(&self, token: &str, req: &RerankRequest) -> Result<RerankResponse, ClientError> {
        let url = self.url("/v1/rerank");
        self.send(url.clone(), self.http.post(&url).header(TOKEN_HEADER, token).json(req)).await
    }

    /// Like [`rerank`](Self::rerank) but gives up after `deadline`; `None`
    /// means the page should be shown unmodified.
    pub async fn rerank_within(
        &self,
        token: &str,
        req: &RerankRequest,
        deadline: Duration,
    ) -> Result<Option<RerankResponse>, ClientError> {
        match tokio::time::timeout(deadline, self.rerank(token, req)).await {
            Ok(r) => r.map(Some),
            Err(_) => Ok(None),
        }
    }

    pub async fn send_events(&self, token: &str, batch: &EventBatch) -> Result<EventsReply, ClientError> {
        let url = self.url("/v1/events");
        self.send(url.clone(), self.http.post(&url).header(TOKEN_HEADER, token).json(batch)).await
    }
}

/// Survey-redirect parameters for a recruitment id.
pub fn recruitment_params(recruitment_id: &str, extra: &[(&str, &str)]) -> Vec<(String, String)> {
    let mut v = vec![(feedlab_core::coordination::RECRUITMENT_KEY.to_string(), recruitment_id.to_string())];
    v.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    v
}
