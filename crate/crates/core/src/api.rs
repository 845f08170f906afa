//! Request and response bodies of the campaign HTTP service.

use serde::{Deserialize, Serialize};

use crate::acquisition::{ConstraintBand, Incumbent};
use crate::campaign::{CampaignConfig, CampaignState, IngestReport, Phase, RESULT_COLUMNS};
use crate::optimizer::EvaluatedExperiment;
use crate::process::ControllableInputs;

/// Every response body: the campaign revision after the call, plus the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revisioned<T> {
    pub revision: u64,
    pub data: T,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CreateCampaign {
    /// Server-assigned when absent.
    pub id: Option<String>,
    /// Server defaults when absent.
    pub config: Option<CampaignConfig>,
    /// Initialization experiments. When absent, the shipped design is measured on the
    /// simulated process with `init_seed`.
    pub initial: Option<Vec<EvaluatedExperiment>>,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignView {
    pub state: CampaignState,
    pub incumbent: Incumbent,
}

/// Gun ignition at an already evaluated setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ignition {
    pub x_c_b: ControllableInputs,
    #[serde(rename = "V_b")]
    pub v_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStarted {
    pub delta_b: f64,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandInfo {
    #[serde(flatten)]
    pub band: ConstraintBand,
    pub unit: String,
}

/// Server-side definitions clients should not duplicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub bands: Vec<BandInfo>,
    pub result_columns: Vec<String>,
    pub defaults: CampaignConfig,
}

impl ServerConfig {
    pub fn new(defaults: CampaignConfig) -> Self {
        ServerConfig {
            bands: defaults
                .constraints
                .bands
                .iter()
                .map(|b| BandInfo {
                    band: *b,
                    unit: b.output.unit().into(),
                })
                .collect(),
            result_columns: RESULT_COLUMNS.iter().map(|c| c.to_string()).collect(),
            defaults,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// Same vocabulary as `Error::category`, plus `stale-revision` and `bad-request`.
    pub category: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<u64>,
    /// Row detail when an ingest had rejected rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<IngestReport>,
}
