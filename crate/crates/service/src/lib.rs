//! HTTP/JSON service over campaign files in one directory.
//!
//! Mutations on a campaign run one at a time. Each response carries the campaign
//! revision, and a mutation sent with `If-Match: <revision>` is refused with 409 when
//! the campaign has moved on. Reads never wait for a running mutation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use sprayopt::api::{
    CampaignView, CreateCampaign, Created, ErrorBody, Ignition, PhaseChange, Revisioned,
    ServerConfig, SessionStarted,
};
use sprayopt::campaign::{
    json_rows, parse_results_csv, CampaignConfig, CampaignState, ParsedRow, ResultRow,
};
use sprayopt::oracle::{shipped_design, EquipmentState, ProcessOracle};
use sprayopt::Error;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Used for campaigns created without a config.
    pub defaults: CampaignConfig,
}

struct Entry {
    /// Held for the whole of a mutation, including persistence.
    writer: tokio::sync::Mutex<()>,
    current: RwLock<Arc<CampaignState>>,
}

impl Entry {
    fn new(state: CampaignState) -> Self {
        Entry {
            writer: tokio::sync::Mutex::new(()),
            current: RwLock::new(Arc::new(state)),
        }
    }

    fn snapshot(&self) -> Arc<CampaignState> {
        self.current.read().expect("campaign lock poisoned").clone()
    }
}

pub struct AppState {
    config: ServiceConfig,
    campaigns: Mutex<HashMap<String, Arc<Entry>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> std::io::Result<Self> {
        std::fs::create_dir_all(&config.data_dir)?;
        Ok(AppState {
            config,
            campaigns: Mutex::new(HashMap::new()),
        })
    }

    fn path(&self, id: &str) -> PathBuf {
        campaign_path(&self.config.data_dir, id)
    }

    async fn entry(&self, id: &str) -> Result<Arc<Entry>, ApiError> {
        if !valid_id(id) {
            return Err(Error::NotFound(format!("campaign {id}")).into());
        }
        if let Some(e) = self.campaigns.lock().expect("registry poisoned").get(id) {
            return Ok(e.clone());
        }
        let path = self.path(id);
        let state = tokio::task::spawn_blocking(move || CampaignState::load(&path)).await??;
        let mut map = self.campaigns.lock().expect("registry poisoned");
        Ok(map
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Entry::new(state)))
            .clone())
    }

    /// Runs `f` on a copy of the campaign and publishes the copy if it succeeded.
    async fn mutate<T, F>(
        &self,
        id: &str,
        expected: Option<u64>,
        f: F,
    ) -> Result<(u64, T), ApiError>
    where
        F: FnOnce(&mut CampaignState) -> sprayopt::Result<T> + Send + 'static,
        T: Send + 'static,
    {
        let entry = self.entry(id).await?;
        let _guard = entry.writer.lock().await;
        let before = entry.snapshot();
        if let Some(expected) = expected {
            if expected != before.revision {
                return Err(ApiError::Stale {
                    expected,
                    current: before.revision,
                });
            }
        }
        let path = self.path(id);
        let (after, out) = tokio::task::spawn_blocking(move || -> sprayopt::Result<_> {
            let mut state = (*before).clone();
            let out = f(&mut state)?;
            if state != *before {
                state.save(&path)?;
            }
            Ok((state, out))
        })
        .await??;
        let revision = after.revision;
        *entry.current.write().expect("campaign lock poisoned") = Arc::new(after);
        Ok((revision, out))
    }
}

pub fn campaign_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub enum ApiError {
    Core(Error),
    Stale {
        expected: u64,
        current: u64,
    },
    BadRequest(String),
    Rows {
        revision: u64,
        report: sprayopt::campaign::IngestReport,
    },
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Core(e)
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Core(e) => {
                let status = match &e {
                    Error::NotFound(_) => StatusCode::NOT_FOUND,
                    Error::Phase(_) | Error::MigrationRequired { .. } => StatusCode::CONFLICT,
                    Error::InvalidArgument(_) | Error::Json(_) | Error::Csv(_) => {
                        StatusCode::UNPROCESSABLE_ENTITY
                    }
                    Error::NumericalFailure { .. } | Error::FittingFailure(_) | Error::Io(_) => {
                        StatusCode::INTERNAL_SERVER_ERROR
                    }
                };
                (status, error_body(e.category(), e.to_string()))
            }
            ApiError::Stale { expected, current } => {
                let mut body = error_body(
                    "stale-revision",
                    format!("revision {expected} is stale; campaign is at {current}"),
                );
                body.revision = Some(current);
                (StatusCode::CONFLICT, body)
            }
            ApiError::BadRequest(msg) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                error_body("bad-request", msg),
            ),
            ApiError::Rows { revision, report } => {
                let n = report.rejected();
                let mut body = error_body("invalid-argument", format!("{n} row(s) rejected"));
                body.revision = Some(revision);
                body.report = Some(report);
                (StatusCode::UNPROCESSABLE_ENTITY, body)
            }
            ApiError::Internal(msg) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                error_body("internal", msg),
            ),
        };
        if status.is_server_error() {
            tracing::error!(category = %body.category, "{}", body.message);
        }
        (status, Json(body)).into_response()
    }
}

fn error_body(category: &str, message: String) -> ErrorBody {
    ErrorBody {
        category: category.into(),
        message,
        revision: None,
        report: None,
    }
}

/// JSON body plus an `ETag` holding the revision.
fn reply<T: Serialize>(status: StatusCode, revision: u64, data: T) -> Response {
    let mut resp = (status, Json(Revisioned { revision, data })).into_response();
    if let Ok(v) = HeaderValue::from_str(&format!("\"{revision}\"")) {
        resp.headers_mut().insert(header::ETAG, v);
    }
    resp
}

fn expected_revision(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    let Some(v) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let text = v.to_str().unwrap_or_default().trim().trim_matches('"');
    text.parse()
        .map(Some)
        .map_err(|_| ApiError::BadRequest(format!("If-Match '{text}' is not a revision number")))
}

/// Results as CSV (`text/csv` or `text/plain`) or as a JSON list of rows.
fn parse_rows(headers: &HeaderMap, body: &str) -> Result<Vec<ParsedRow>, ApiError> {
    let ctype = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("application/json");
    if ctype.starts_with("text/csv") || ctype.starts_with("text/plain") {
        Ok(parse_results_csv(body)?)
    } else {
        let rows: Vec<ResultRow> = serde_json::from_str(body)
            .map_err(|e| ApiError::BadRequest(format!("results body: {e}")))?;
        Ok(json_rows(rows))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/config", get(server_config))
        .route("/campaigns", get(list_campaigns).post(create_campaign))
        .route("/campaigns/{id}", get(get_campaign))
        .route("/campaigns/{id}/session", post(ignite).delete(new_session))
        .route("/campaigns/{id}/batch", post(propose))
        .route("/campaigns/{id}/batch/{idx}/drop", post(drop_candidate))
        .route("/campaigns/{id}/results", post(ingest))
        .route("/campaigns/{id}/finish", post(finish))
        .route("/campaigns/{id}/whatif", post(what_if))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(
    listener: tokio::net::TcpListener,
    config: ServiceConfig,
) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(config)?);
    tracing::info!(addr = ?listener.local_addr()?, "campaign service listening");
    axum::serve(listener, router(state)).await
}

async fn server_config(State(app): State<Arc<AppState>>) -> Json<ServerConfig> {
    Json(ServerConfig::new(app.config.defaults.clone()))
}

async fn list_campaigns(State(app): State<Arc<AppState>>) -> Result<Json<Vec<String>>, ApiError> {
    let dir = app.config.data_dir.clone();
    let ids = tokio::task::spawn_blocking(move || -> std::io::Result<Vec<String>> {
        let mut ids: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()?
                    .strip_suffix(".json")
                    .map(str::to_string)
            })
            .filter(|id| valid_id(id))
            .collect();
        ids.sort();
        Ok(ids)
    })
    .await?
    .map_err(Error::from)?;
    Ok(Json(ids))
}

async fn create_campaign(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateCampaign>,
) -> Result<Response, ApiError> {
    let id = req.id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    if !valid_id(&id) {
        return Err(ApiError::BadRequest(format!(
            "campaign id '{id}' must be 1-64 of [A-Za-z0-9_-]"
        )));
    }
    let config = req.config.unwrap_or_else(|| app.config.defaults.clone());
    let path = app.path(&id);
    let state = {
        let id = id.clone();
        tokio::task::spawn_blocking(move || -> sprayopt::Result<CampaignState> {
            let initial = match req.initial {
                Some(initial) => initial,
                None => ProcessOracle::shipped().generate_initialization(
                    &shipped_design(),
                    &EquipmentState::default(),
                    req.init_seed,
                )?,
            };
            CampaignState::new(id, config, initial)
        })
        .await??
    };
    let mut map = app.campaigns.lock().expect("registry poisoned");
    if map.contains_key(&id) || path.exists() {
        return Err(Error::Phase(format!("campaign {id} already exists")).into());
    }
    state.save(&path)?;
    let revision = state.revision;
    map.insert(id.clone(), Arc::new(Entry::new(state)));
    tracing::info!(%id, "campaign created");
    Ok(reply(StatusCode::CREATED, revision, Created { id }))
}

async fn get_campaign(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let state = app.entry(&id).await?.snapshot();
    let view = tokio::task::spawn_blocking(move || -> sprayopt::Result<CampaignView> {
        Ok(CampaignView {
            incumbent: state.incumbent()?,
            state: (*state).clone(),
        })
    })
    .await??;
    Ok(reply(StatusCode::OK, view.state.revision, view))
}

async fn ignite(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    Json(req): Json<Ignition>,
) -> Result<Response, ApiError> {
    let (rev, started) = app
        .mutate(&id, expected_revision(&headers)?, move |s| {
            let delta_b = s.start_session(req.x_c_b, &[req.v_b])?;
            let session_id = s
                .session
                .as_ref()
                .map(|x| x.session_id.clone())
                .unwrap_or_default();
            Ok(SessionStarted {
                delta_b,
                session_id,
            })
        })
        .await?;
    tracing::info!(%id, delta_b = started.delta_b, "session started");
    Ok(reply(StatusCode::OK, rev, started))
}

async fn new_session(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let (rev, phase) = app
        .mutate(&id, expected_revision(&headers)?, |s| {
            s.request_new_session()?;
            Ok(PhaseChange { phase: s.phase })
        })
        .await?;
    Ok(reply(StatusCode::OK, rev, phase))
}

async fn propose(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let (rev, pending) = app
        .mutate(&id, expected_revision(&headers)?, |s| s.propose().cloned())
        .await?;
    tracing::info!(%id, batch = pending.batch_id, "batch proposed");
    Ok(reply(StatusCode::OK, rev, pending))
}

async fn drop_candidate(
    State(app): State<Arc<AppState>>,
    UrlPath((id, idx)): UrlPath<(String, usize)>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let (rev, phase) = app
        .mutate(&id, expected_revision(&headers)?, move |s| {
            s.drop_candidate(idx)?;
            Ok(PhaseChange { phase: s.phase })
        })
        .await?;
    Ok(reply(StatusCode::OK, rev, phase))
}

async fn ingest(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: String,
) -> Result<Response, ApiError> {
    let rows = parse_rows(&headers, &body)?;
    let (rev, report) = app
        .mutate(&id, expected_revision(&headers)?, move |s| s.ingest(rows))
        .await?;
    tracing::info!(%id, rows = report.rows.len(), rejected = report.rejected(), "results ingested");
    if report.rejected() > 0 {
        return Err(ApiError::Rows {
            revision: rev,
            report,
        });
    }
    Ok(reply(StatusCode::OK, rev, report))
}

async fn finish(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let (rev, incumbent) = app
        .mutate(&id, expected_revision(&headers)?, |s| s.finish())
        .await?;
    Ok(reply(StatusCode::OK, rev, incumbent))
}

async fn what_if(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: String,
) -> Result<Response, ApiError> {
    let rows = parse_rows(&headers, &body)?;
    let state = app.entry(&id).await?.snapshot();
    let rev = state.revision;
    let outcome = tokio::task::spawn_blocking(move || state.what_if(rows)).await??;
    if outcome.report.rejected() > 0 {
        return Err(ApiError::Rows {
            revision: rev,
            report: outcome.report,
        });
    }
    Ok(reply(StatusCode::OK, rev, outcome))
}
