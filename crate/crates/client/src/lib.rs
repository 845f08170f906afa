//! Typed client for the campaign service.
//!
//! Every call returns the campaign revision alongside the payload. Pass a revision to
//! the mutating calls to have the server refuse the change when the campaign moved on.

use reqwest::header::{CONTENT_TYPE, IF_MATCH};
use reqwest::{RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;

use sprayopt::acquisition::Incumbent;
use sprayopt::api::{
    CampaignView, CreateCampaign, Created, ErrorBody, Ignition, PhaseChange, Revisioned,
    ServerConfig, SessionStarted,
};
use sprayopt::campaign::{IngestReport, PendingBatch, ResultRow, WhatIf};
use sprayopt::process::ControllableInputs;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The server answered with an error body.
    #[error("{category} ({status}): {message}")]
    Api {
        status: StatusCode,
        category: String,
        message: String,
        body: Box<ErrorBody>,
    },
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("unexpected response ({status}): {text}")]
    Decode { status: StatusCode, text: String },
}

impl ClientError {
    /// Machine-parsable category, matching the server's vocabulary where it has one.
    pub fn category(&self) -> &str {
        match self {
            ClientError::Api { category, .. } => category,
            ClientError::Http(_) => "connection",
            ClientError::Decode { .. } => "protocol",
        }
    }

    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } | ClientError::Decode { status, .. } => Some(*status),
            ClientError::Http(e) => e.status(),
        }
    }

    /// Per-row detail of a rejected ingest.
    pub fn report(&self) -> Option<&IngestReport> {
        match self {
            ClientError::Api { body, .. } => body.report.as_ref(),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<Revisioned<T>, ClientError>;

/// Results body: CSV text as exported for the lab, or JSON rows.
#[derive(Debug, Clone)]
pub enum Results {
    Csv(String),
    Rows(Vec<ResultRow>),
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        Client {
            base: base_url.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn campaign(&self, id: &str, rest: &str) -> String {
        self.url(&format!("/campaigns/{id}{rest}"))
    }

    pub async fn server_config(&self) -> std::result::Result<ServerConfig, ClientError> {
        decode(self.http.get(self.url("/config"))).await
    }

    pub async fn list(&self) -> std::result::Result<Vec<String>, ClientError> {
        decode(self.http.get(self.url("/campaigns"))).await
    }

    pub async fn create(&self, req: &CreateCampaign) -> Result<Created> {
        decode(self.http.post(self.url("/campaigns")).json(req)).await
    }

    pub async fn get(&self, id: &str) -> Result<CampaignView> {
        decode(self.http.get(self.campaign(id, ""))).await
    }

    pub async fn ignite(
        &self,
        id: &str,
        x_c_b: ControllableInputs,
        v_b: f64,
        revision: Option<u64>,
    ) -> Result<SessionStarted> {
        let req = self
            .http
            .post(self.campaign(id, "/session"))
            .json(&Ignition { x_c_b, v_b });
        decode(if_match(req, revision)).await
    }

    pub async fn new_session(&self, id: &str, revision: Option<u64>) -> Result<PhaseChange> {
        decode(if_match(
            self.http.delete(self.campaign(id, "/session")),
            revision,
        ))
        .await
    }

    pub async fn propose(&self, id: &str, revision: Option<u64>) -> Result<PendingBatch> {
        decode(if_match(
            self.http.post(self.campaign(id, "/batch")),
            revision,
        ))
        .await
    }

    pub async fn drop_candidate(
        &self,
        id: &str,
        index: usize,
        revision: Option<u64>,
    ) -> Result<PhaseChange> {
        let req = self
            .http
            .post(self.campaign(id, &format!("/batch/{index}/drop")));
        decode(if_match(req, revision)).await
    }

    pub async fn ingest(
        &self,
        id: &str,
        results: &Results,
        revision: Option<u64>,
    ) -> Result<IngestReport> {
        let req = with_results(self.http.post(self.campaign(id, "/results")), results);
        decode(if_match(req, revision)).await
    }

    pub async fn finish(&self, id: &str, revision: Option<u64>) -> Result<Incumbent> {
        decode(if_match(
            self.http.post(self.campaign(id, "/finish")),
            revision,
        ))
        .await
    }

    /// Incumbent and next-batch preview the results would produce; nothing is stored.
    pub async fn what_if(&self, id: &str, results: &Results) -> Result<WhatIf> {
        decode(with_results(
            self.http.post(self.campaign(id, "/whatif")),
            results,
        ))
        .await
    }
}

fn if_match(req: RequestBuilder, revision: Option<u64>) -> RequestBuilder {
    match revision {
        Some(r) => req.header(IF_MATCH, format!("\"{r}\"")),
        None => req,
    }
}

fn with_results(req: RequestBuilder, results: &Results) -> RequestBuilder {
    match results {
        Results::Csv(text) => req.header(CONTENT_TYPE, "text/csv").body(text.clone()),
        Results::Rows(rows) => req.json(rows),
    }
}

async fn decode<T: DeserializeOwned>(req: RequestBuilder) -> std::result::Result<T, ClientError> {
    let resp = req.send().await?;
    let status = resp.status();
    let text = resp.text().await?;
    if status.is_success() {
        return serde_json::from_str(&text).map_err(|_| ClientError::Decode { status, text });
    }
    match serde_json::from_str::<ErrorBody>(&text) {
        Ok(body) => Err(ClientError::Api {
            status,
            category: body.category.clone(),
            message: body.message.clone(),
            body: Box::new(body),
        }),
        Err(_) => Err(ClientError::Decode { status, text }),
    }
}
