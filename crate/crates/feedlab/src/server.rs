//! HTTP surface of the backend and the coordination service.
//!
//! | route | handler |
//! |---|---|
//! | `POST /v1/rerank` | [`Backend::handle_rerank`] |
//! | `POST /v1/events` | [`Backend::ingest_event_batch`] |
//! | `GET /v1/config` | claim via the `flc` cookie, or re-read via token header |
//! | `GET /reg/enter` | start registration, set the cookie |
//! | `POST /reg/consent` | record the consent decision |
//! | `GET /reg/instructions` | install instructions and recovery link |
//! | `GET /reg/recover/{entry}` | rebuild the cookie in another browser |
//! | `GET /reg/debrief` | end-of-study page |
//! | `GET /healthz` | liveness |

use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Form, Json, Router};
use feedlab_core::clock::SharedClock;
use feedlab_core::coordination::{
    BeginOutcome, CoordError, Coordinator, RegState, RegistrationSession, COOKIE_MAX_AGE_SECS, COOKIE_NAME,
};
use feedlab_core::protocol::{Ack, Backend, BackendConfig, EventBatch, ProtocolError, RerankRequest, TOKEN_HEADER};
use feedlab_core::store::EventStore;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;

/// Builds the backend, coordinator and store described by `cfg`.
pub fn build_backend(cfg: &RunConfig, clock: SharedClock) -> Result<Backend, String> {
    std::fs::create_dir_all(&cfg.data_dir).map_err(|e| format!("{}: {e}", cfg.data_dir.display()))?;
    let study = cfg.study_design().map_err(|e| e.to_string())?;
    let coord = Coordinator::new(study, clock.clone(), cfg.seed ^ 0x5eed)
        .and_then(|c| c.with_snapshot(cfg.registry_path()))
        .map_err(|e| e.to_string())?;
    let store = EventStore::open(cfg.store_config()).map_err(|e| e.to_string())?;
    let bc = BackendConfig {
        server_budget: std::time::Duration::from_millis(cfg.server_budget_ms),
        survey_seed: cfg.seed,
        ..BackendConfig::default()
    };
    Backend::new(Arc::new(coord), Arc::new(store), clock, bc)
}

pub fn app(backend: Arc<Backend>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/rerank", post(rerank))
        .route("/v1/events", post(events))
        .route("/v1/config", get(config))
        .route("/reg/enter", get(enter))
        .route("/reg/consent", post(consent))
        .route("/reg/instructions", get(instructions))
        .route("/reg/recover/{entry}", get(recover))
        .route("/reg/debrief", get(debrief))
        .with_state(backend)
}

type Shared = State<Arc<Backend>>;

fn token(headers: &HeaderMap) -> Option<&str> {
    headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok())
}

/// The `flc` value from a `Cookie` header.
pub fn cookie_entry(headers: &HeaderMap) -> Option<String> {
    headers.get_all(header::COOKIE).iter().filter_map(|v| v.to_str().ok()).flat_map(|v| v.split(';')).find_map(|kv| {
        let (k, v) = kv.trim().split_once('=')?;
        (k == COOKIE_NAME && !v.is_empty()).then(|| v.to_string())
    })
}

pub fn set_cookie_value(entry: &str) -> String {
    format!("{COOKIE_NAME}={entry}; HttpOnly; Path=/; Max-Age={COOKIE_MAX_AGE_SECS}; SameSite=Lax")
}

fn wants_json(headers: &HeaderMap) -> bool {
    headers.get(header::ACCEPT).and_then(|v| v.to_str().ok()).is_some_and(|v| v.contains("application/json"))
}

fn protocol_error(e: ProtocolError) -> Response {
    let status = match &e {
        ProtocolError::AuthFailed => StatusCode::UNAUTHORIZED,
        ProtocolError::BadRequest(_) => StatusCode::BAD_REQUEST,
        ProtocolError::Store(_) => StatusCode::SERVICE_UNAVAILABLE,
    };
    (status, Json(json!({ "error": e.to_string() }))).into_response()
}

fn coord_status(e: &CoordError) -> StatusCode {
    match e {
        CoordError::NoPersistentEntry | CoordError::UnknownRegistration => StatusCode::NOT_FOUND,
        CoordError::NotConsented | CoordError::Ineligible(_) => StatusCode::FORBIDDEN,
        CoordError::NotInstructed => StatusCode::CONFLICT,
        CoordError::MissingRecruitmentId | CoordError::UnknownArm(_) => StatusCode::BAD_REQUEST,
        CoordError::WeightsInvalid(_) | CoordError::Snapshot(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn coord_error(e: CoordError) -> Response {
    let hint = match e {
        CoordError::NoPersistentEntry => Some("open the recovery link from your registration email, or restart from the survey"),
        CoordError::NotInstructed => Some("open /reg/instructions first"),
        _ => None,
    };
    (coord_status(&e), Json(json!({ "error": e.to_string(), "hint": hint }))).into_response()
}

async fn rerank(State(b): Shared, headers: HeaderMap, Json(req): Json<RerankRequest>) -> Response {
    match b.handle_rerank(token(&headers), req).await {
        Ok(resp) => Json(resp).into_response(),
        Err(e) => protocol_error(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventsReply {
    pub ack: Ack,
    pub accepted: usize,
    pub duplicates: usize,
    pub gaps: Vec<(u64, u64)>,
}

async fn events(State(b): Shared, headers: HeaderMap, Json(batch): Json<EventBatch>) -> Response {
    match b.ingest_event_batch(token(&headers), batch).await {
        Ok(o) => Json(EventsReply { ack: o.ack, accepted: o.accepted, duplicates: o.duplicates, gaps: o.gaps }).into_response(),
        Err(e) => protocol_error(e),
    }
}

async fn config(State(b): Shared, headers: HeaderMap) -> Response {
    let coord = b.coordinator();
    if let Some(t) = token(&headers) {
        return match coord.authenticate(t) {
            Some(cfg) => Json(cfg).into_response(),
            None => protocol_error(ProtocolError::AuthFailed),
        };
    }
    match coord.claim_config(cookie_entry(&headers).as_deref()) {
        Ok(cfg) => Json(cfg).into_response(),
        Err(e) => coord_error(e),
    }
}

fn page(title: &str, body: &str) -> Html<String> {
    Html(format!(
        "<!doctype html><html><head><meta charset=\"utf-8\"><title>{title}</title></head><body><h1>{title}</h1>{body}</body></html>"
    ))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn consent_page(registration_id: &str, recovery_url: &str) -> Html<String> {
    page(
        "Study consent",
        &format!(
            "<p>Please read the study information and choose whether to take part.</p>\
             <form method=\"post\" action=\"/reg/consent\">\
             <input type=\"hidden\" name=\"registration_id\" value=\"{id}\">\
             <button name=\"decision\" value=\"accept\">I agree</button> \
             <button name=\"decision\" value=\"decline\">I do not agree</button></form>\
             <p>If you switch browsers, continue here: <a href=\"{rec}\">{rec}</a></p>",
            id = escape(registration_id),
            rec = escape(recovery_url),
        ),
    )
}

fn with_cookie(entry: &str, resp: impl IntoResponse) -> Response {
    let mut resp = resp.into_response();
    if let Ok(v) = HeaderValue::from_str(&set_cookie_value(entry)) {
        resp.headers_mut().append(header::SET_COOKIE, v);
    }
    resp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnterReply {
    pub registration_id: String,
    pub state: RegState,
    pub resumed: bool,
    pub recovery_url: String,
}

async fn enter(State(b): Shared, headers: HeaderMap, Query(params): Query<IndexMap<String, String>>) -> Response {
    let coord = b.coordinator();
    let out: BeginOutcome = match coord.begin_registration(params) {
        Ok(o) => o,
        Err(CoordError::Ineligible(why)) => {
            return (StatusCode::FORBIDDEN, page("Thank you", &format!("<p>You do not qualify for this study ({}).</p>", escape(&why))))
                .into_response()
        }
        Err(e) => return coord_error(e),
    };
    let recovery_url = coord.issue_recovery_link(&out.registration_id).unwrap_or_default();
    let entry = out.persistent_entry_value.clone();
    if wants_json(&headers) {
        let reply = EnterReply { registration_id: out.registration_id, state: out.state, resumed: out.resumed, recovery_url };
        return with_cookie(&entry, Json(reply));
    }
    let body = match out.state {
        RegState::Entered => consent_page(&out.registration_id, &recovery_url).into_response(),
        RegState::Declined => declined_page().into_response(),
        _ => Redirect::to("/reg/instructions").into_response(),
    };
    with_cookie(&entry, body)
}

fn declined_page() -> Html<String> {
    page("Thank you", "<p>You chose not to take part. No data about you will be collected.</p>")
}

#[derive(Debug, Deserialize)]
struct ConsentForm {
    registration_id: String,
    decision: String,
}

async fn consent(State(b): Shared, headers: HeaderMap, Form(f): Form<ConsentForm>) -> Response {
    let accepted = matches!(f.decision.as_str(), "accept" | "yes" | "true");
    match b.coordinator().record_consent(&f.registration_id, accepted) {
        Ok(state) if wants_json(&headers) => Json(json!({ "state": state })).into_response(),
        Ok(RegState::Declined) => declined_page().into_response(),
        Ok(_) => Redirect::to("/reg/instructions").into_response(),
        Err(e) => coord_error(e),
    }
}

fn instructions_page(coord: &Coordinator, r: &RegistrationSession) -> Html<String> {
    let rec = coord.issue_recovery_link(&r.registration_id).unwrap_or_default();
    page(
        "Install the study extension",
        &format!(
            "<ol><li>Install the extension: <a href=\"{ext}\">{ext}</a></li>\
             <li>Once installed, it contacts this server once to set itself up.</li></ol>\
             <p>Different browser? Open <a href=\"{rec}\">{rec}</a> there.</p>",
            ext = escape(&coord.study().extension_store_url),
            rec = escape(&rec),
        ),
    )
}

async fn instructions(State(b): Shared, headers: HeaderMap) -> Response {
    let coord = b.coordinator();
    let entry = cookie_entry(&headers);
    match coord.view_instructions(entry.as_deref()) {
        Ok(r) if wants_json(&headers) => Json(r).into_response(),
        Ok(r) => instructions_page(coord, &r).into_response(),
        Err(CoordError::NotConsented) => match entry.and_then(|e| coord.registration_by_entry(&e)) {
            Some(r) if r.state == RegState::Entered => {
                let rec = coord.issue_recovery_link(&r.registration_id).unwrap_or_default();
                (StatusCode::FORBIDDEN, consent_page(&r.registration_id, &rec)).into_response()
            }
            _ => (StatusCode::FORBIDDEN, declined_page()).into_response(),
        },
        Err(e) => coord_error(e),
    }
}

async fn recover(
    State(b): Shared,
    headers: HeaderMap,
    UrlPath(entry): UrlPath<String>,
    Query(params): Query<IndexMap<String, String>>,
) -> Response {
    let coord = b.coordinator();
    let r = match coord.open_recovery(&entry, params) {
        Ok(r) => r,
        Err(e) => return coord_error(e),
    };
    let entry = r.persistent_entry_value.clone();
    if wants_json(&headers) {
        return with_cookie(&entry, Json(r));
    }
    let body = match r.state {
        RegState::Entered => {
            let rec = coord.issue_recovery_link(&r.registration_id).unwrap_or_default();
            consent_page(&r.registration_id, &rec).into_response()
        }
        RegState::Declined => declined_page().into_response(),
        _ => instructions_page(coord, &r).into_response(),
    };
    with_cookie(&entry, body)
}

async fn debrief() -> Html<String> {
    page(
        "The study has ended",
        "<p>Thank you for taking part. Please remove the study extension from your browser's extension settings.</p>",
    )
}

/// Serves `app` on `listener` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cookie_is_found_among_others() {
        let mut h = HeaderMap::new();
        h.append(header::COOKIE, HeaderValue::from_static("a=1; flc=abc; b=2"));
        assert_eq!(cookie_entry(&h).as_deref(), Some("abc"));
        let mut h = HeaderMap::new();
        h.append(header::COOKIE, HeaderValue::from_static("flc="));
        assert_eq!(cookie_entry(&h), None);
    }

    #[test]
    fn cookie_attributes() {
        let v = set_cookie_value("t0k");
        assert!(v.starts_with("flc=t0k;"));
        for attr in ["HttpOnly", "Path=/", "Max-Age=2592000"] {
            assert!(v.contains(attr), "{v}");
        }
    }

    #[test]
    fn html_is_escaped() {
        assert_eq!(escape("<a href=\"x\">&"), "&lt;a href=&quot;x&quot;&gt;&amp;");
    }
}
