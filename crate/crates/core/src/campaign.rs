//! Human-in-the-loop campaign: sessions, proposals, lab results and persistence.
//!
//! A campaign moves through `NeedsIgnition → ReadyToPropose → AwaitingResults →
//! {ReadyToPropose, Terminated}`; `ReadyToPropose → NeedsIgnition` opens a new session.
//! Every mutation bumps `revision`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::acquisition::{ConstraintSpec, Incumbent, Measurements};
use crate::error::{Error, Result};
use crate::optimizer::{
    best_feasible, check_termination, propose_batch, BatchProposal, CandidatePool,
    EvaluatedExperiment, ModelConfig, OptimizerConfig, ProposalContext,
};
use crate::oracle::voltage_records;
use crate::process::{
    estimate_offset_repeated, expand_candidates, fit_voltage_model, generate_candidates,
    CandidateScheme, ControllableInputs, CostConfig, DomainBounds, InputVector, Powder,
    VoltageModel, DEFAULT_CANDIDATE_COUNT,
};

pub const CAMPAIGN_FORMAT_VERSION: u32 = 1;

/// Session id carried by the initialization experiments.
pub const INITIALIZATION_SESSION: &str = "init";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    NeedsIgnition,
    ReadyToPropose,
    AwaitingResults,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub constraints: ConstraintSpec,
    pub cost: CostConfig,
    pub bounds: DomainBounds,
    pub powder: Powder,
    pub candidate_count: usize,
    pub candidate_scheme: CandidateScheme,
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            constraints: ConstraintSpec::default(),
            cost: CostConfig::default(),
            bounds: DomainBounds::default(),
            powder: Powder::A,
            candidate_count: DEFAULT_CANDIDATE_COUNT,
            candidate_scheme: CandidateScheme::default(),
            seed: 0,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.model.fit.validate()?;
        self.constraints.validate()?;
        self.cost.validate()?;
        self.bounds.validate()?;
        if self.candidate_count == 0 {
            return Err(Error::invalid("candidate count must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub ignition: ControllableInputs,
    pub ignition_voltages: Vec<f64>,
    pub voltage_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    pub batch_id: u64,
    pub proposal: BatchProposal,
    pub dropped: Vec<bool>,
    /// Results accepted so far, by candidate index.
    pub results: Vec<Option<Measurements>>,
}

impl PendingBatch {
    fn is_complete(&self) -> bool {
        self.dropped
            .iter()
            .zip(&self.results)
            .all(|(d, r)| *d || r.is_some())
    }
}

/// What happened to one proposed batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub batch_id: u64,
    pub session_id: String,
    pub proposal: BatchProposal,
    pub dropped: Vec<bool>,
    pub incumbent: Incumbent,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub format_version: u32,
    pub id: String,
    pub revision: u64,
    pub config: CampaignConfig,
    pub history: Vec<EvaluatedExperiment>,
    pub pending_batch: Option<PendingBatch>,
    pub session: Option<Session>,
    pub phase: Phase,
    pub trace: Vec<BatchSummary>,
    pub next_batch_id: u64,
    session_count: u64,
    /// `(batch_id, candidate_index)` of every row already taken in.
    ingested: BTreeSet<(u64, usize)>,
}

/// One line of lab results. Dropped rows need no measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ResultRow {
    pub batch_id: u64,
    pub candidate_index: usize,
    #[serde(default)]
    pub microhardness_HV: Option<f64>,
    #[serde(default)]
    pub porosity_pct: Option<f64>,
    #[serde(default)]
    pub application_rate: Option<f64>,
    #[serde(default)]
    pub deposition_efficiency_pct: Option<f64>,
    #[serde(default)]
    pub measured_voltage_V: Option<f64>,
    #[serde(default)]
    pub dropped_flag: bool,
}

pub const RESULT_COLUMNS: [&str; 8] = [
    "batch_id",
    "candidate_index",
    "microhardness_HV",
    "porosity_pct",
    "application_rate",
    "deposition_efficiency_pct",
    "measured_voltage_V",
    "dropped_flag",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Accepted,
    Dropped,
    Duplicate,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowOutcome {
    /// 1-based line in the submitted CSV (header is line 1) or position in a JSON list.
    pub line: usize,
    pub candidate_index: Option<usize>,
    pub status: RowStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: Vec<RowOutcome>,
    /// Every pending candidate has a result or was dropped; history was extended.
    pub batch_complete: bool,
    pub phase: Phase,
}

impl IngestReport {
    pub fn rejected(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.status == RowStatus::Rejected)
            .count()
    }
}

/// Parsed CSV row or the reason it could not be parsed.
pub type ParsedRow = (usize, std::result::Result<ResultRow, String>);

/// Parses results CSV text, keeping malformed lines as per-row errors.
pub fn parse_results_csv(text: &str) -> Result<Vec<ParsedRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    for required in ["batch_id", "candidate_index"] {
        if col(required).is_none() {
            return Err(Error::invalid(format!(
                "results CSV lacks the {required} column"
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = record
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map_or(i + 2, |p| p.line() as usize);
        let parsed = record.map_err(|e| e.to_string()).and_then(|r| {
            let field = |name: &str| col(name).and_then(|c| r.get(c)).filter(|s| !s.is_empty());
            let num = |name: &str| -> std::result::Result<Option<f64>, String> {
                field(name)
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| format!("{name}: '{s}' is not a number"))
                    })
                    .transpose()
            };
            let int = |name: &str| -> std::result::Result<u64, String> {
                let s = field(name).ok_or_else(|| format!("{name} is missing"))?;
                s.parse::<u64>()
                    .map_err(|_| format!("{name}: '{s}' is not a non-negative integer"))
            };
            let dropped = match field("dropped_flag")
                .map(str::to_ascii_lowercase)
                .as_deref()
            {
                None | Some("0") | Some("false") | Some("no") => false,
                Some("1") | Some("true") | Some("yes") => true,
                Some(other) => return Err(format!("dropped_flag: '{other}' is not a flag")),
            };
            Ok(ResultRow {
                batch_id: int("batch_id")?,
                candidate_index: int("candidate_index")? as usize,
                microhardness_HV: num("microhardness_HV")?,
                porosity_pct: num("porosity_pct")?,
                application_rate: num("application_rate")?,
                deposition_efficiency_pct: num("deposition_efficiency_pct")?,
                measured_voltage_V: num("measured_voltage_V")?,
                dropped_flag: dropped,
            })
        });
        rows.push((line, parsed));
    }
    Ok(rows)
}

pub fn write_results_csv<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Proposal table for the lab: one row per candidate.
pub fn write_proposal_csv<W: std::io::Write>(pending: &PendingBatch, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "candidate_index",
        "primary_gas_flow",
        "secondary_gas_flow",
        "gun_current",
        "carrier_gas_flow",
        "powder_feed_rate",
        "standoff_distance",
        "predicted_voltage_V",
        "fp",
        "improvement",
        "alpha",
        "acquisition_used",
    ])?;
    for (i, (c, d)) in pending
        .proposal
        .candidates
        .iter()
        .zip(&pending.proposal.diagnostics)
        .enumerate()
    {
        let mut row = vec![i.to_string()];
        row.extend(c.controllable.to_array().iter().map(|v| v.to_string()));
        row.extend([c.voltage, d.fp, d.improvement, d.alpha()].map(|v| v.to_string()));
        row.push(d.acquisition.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of a what-if evaluation; the campaign itself is not changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub report: IngestReport,
    pub incumbent: Incumbent,
    pub preview: Option<BatchProposal>,
}

impl CampaignState {
    /// New campaign seeded with initialization experiments, which are re-tagged with
    /// the initialization session.
    pub fn new(
        id: impl Into<String>,
        config: CampaignConfig,
        initial: Vec<EvaluatedExperiment>,
    ) -> Result<Self> {
        config.validate()?;
        if initial.len() < 2 {
            return Err(Error::invalid(
                "a campaign needs at least 2 initialization experiments",
            ));
        }
        let mut history = initial;
        for e in &mut history {
            e.session_id = INITIALIZATION_SESSION.into();
            e.feasible = config.constraints.is_satisfied(&e.measurements)?;
            e.cost = config.cost.eval_unchecked(&e.x.controllable);
        }
        Ok(CampaignState {
            format_version: CAMPAIGN_FORMAT_VERSION,
            id: id.into(),
            revision: 0,
            config,
            history,
            pending_batch: None,
            session: None,
            phase: Phase::NeedsIgnition,
            trace: Vec::new(),
            next_batch_id: 1,
            session_count: 0,
            ingested: BTreeSet::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as u32;
        if found != CAMPAIGN_FORMAT_VERSION {
            return Err(Error::MigrationRequired {
                kind: "campaign".into(),
                found,
                supported: CAMPAIGN_FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::NotFound(format!("campaign file {}", path.display()))
            }
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    fn bump(&mut self) {
        self.revision += 1;
    }

    fn grid(&self) -> Result<Vec<ControllableInputs>> {
        generate_candidates(
            &self.config.bounds,
            self.config.candidate_count,
            &self.config.candidate_scheme,
        )
    }

    fn max_grid_cost(&self) -> Result<f64> {
        Ok(self
            .grid()?
            .iter()
            .map(|c| self.config.cost.eval_unchecked(c))
            .fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn incumbent(&self) -> Result<Incumbent> {
        Ok(best_feasible(&self.history, self.max_grid_cost()?))
    }

    /// Voltage model trained on the initialization experiments.
    pub fn voltage_model(&self) -> Result<VoltageModel> {
        let init: Vec<EvaluatedExperiment> = self
            .history
            .iter()
            .filter(|e| e.session_id == INITIALIZATION_SESSION)
            .cloned()
            .collect();
        let fit = crate::gp::FitConfig {
            seed: self.config.seed,
            ..self.config.model.fit.clone()
        };
        fit_voltage_model(&voltage_records(&init), &self.config.bounds, &fit)
    }

    /// Ignites at a previously evaluated setting and estimates the session offset from
    /// the mean of `voltages`.
    pub fn start_session(&mut self, ignition: ControllableInputs, voltages: &[f64]) -> Result<f64> {
        if !matches!(self.phase, Phase::NeedsIgnition | Phase::ReadyToPropose) {
            return Err(Error::Phase(format!(
                "cannot start a session while {:?}",
                self.phase
            )));
        }
        if voltages.is_empty() || voltages.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "ignition needs at least one finite voltage reading",
            ));
        }
        if !self.history.iter().any(|e| e.x.controllable == ignition) {
            return Err(Error::invalid(
                "ignition settings must match an evaluated experiment",
            ));
        }
        let model = self.voltage_model()?;
        let offset = estimate_offset_repeated(&model, &ignition, self.config.powder, voltages)?;
        self.session_count += 1;
        self.session = Some(Session {
            session_id: format!("session-{}", self.session_count),
            ignition,
            ignition_voltages: voltages.to_vec(),
            voltage_offset: offset,
        });
        self.phase = Phase::ReadyToPropose;
        self.bump();
        Ok(offset)
    }

    /// Leaves `ReadyToPropose` so the next session can be ignited.
    pub fn request_new_session(&mut self) -> Result<()> {
        if self.phase != Phase::ReadyToPropose {
            return Err(Error::Phase(format!(
                "cannot request a new session while {:?}",
                self.phase
            )));
        }
        self.phase = Phase::NeedsIgnition;
        self.bump();
        Ok(())
    }

    /// Candidate pool for the current session: the grid minus evaluated settings, with
    /// drift-corrected voltages.
    pub fn candidate_pool(&self) -> Result<CandidatePool> {
        let session = self
            .session
            .as_ref()
            .ok_or_else(|| Error::Phase("no active session; ignite first".into()))?;
        let evaluated: Vec<&ControllableInputs> = self
            .history
            .iter()
            .filter(|e| e.x.powder == self.config.powder)
            .map(|e| &e.x.controllable)
            .collect();
        let grid: Vec<ControllableInputs> = self
            .grid()?
            .into_iter()
            .filter(|c| !evaluated.contains(&c))
            .collect();
        let model = self.voltage_model()?;
        let candidates: Vec<InputVector> =
            expand_candidates(&grid, self.config.powder, &model, session.voltage_offset);
        Ok(CandidatePool::new(candidates, &self.config.cost))
    }

    fn compute_proposal(&self) -> Result<BatchProposal> {
        let pool = self.candidate_pool()?;
        let ctx = ProposalContext {
            spec: &self.config.constraints,
            bounds: &self.config.bounds,
            optimizer: &self.config.optimizer,
            model: &self.config.model,
            seed: self
                .config
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(self.next_batch_id),
        };
        propose_batch(&self.history, &pool, &ctx)
    }

    pub fn propose(&mut self) -> Result<&PendingBatch> {
        if self.phase != Phase::ReadyToPropose {
            return Err(Error::Phase(format!(
                "cannot propose while {:?}",
                self.phase
            )));
        }
        let proposal = self.compute_proposal()?;
        let n = proposal.candidates.len();
        self.pending_batch = Some(PendingBatch {
            batch_id: self.next_batch_id,
            proposal,
            dropped: vec![false; n],
            results: vec![None; n],
        });
        self.next_batch_id += 1;
        self.phase = Phase::AwaitingResults;
        self.bump();
        Ok(self.pending_batch.as_ref().expect("just set"))
    }

    /// Marks a pending candidate as not run.
    pub fn drop_candidate(&mut self, index: usize) -> Result<()> {
        let pending = self
            .pending_batch
            .as_mut()
            .ok_or_else(|| Error::Phase("no pending batch".into()))?;
        if index >= pending.dropped.len() {
            return Err(Error::invalid(format!("batch has no candidate {index}")));
        }
        if pending.results[index].is_some() {
            return Err(Error::invalid(format!(
                "candidate {index} already has results"
            )));
        }
        pending.dropped[index] = true;
        let complete = pending.is_complete();
        self.bump();
        if complete {
            self.complete_batch()?;
        }
        Ok(())
    }

    /// Takes in lab results. Valid rows are applied even when others are rejected;
    /// rows already ingested are reported as duplicates and ignored.
    pub fn ingest(&mut self, rows: Vec<ParsedRow>) -> Result<IngestReport> {
        let mut outcomes = Vec::with_capacity(rows.len());
        let mut changed = false;
        let mut seen_in_call = BTreeSet::new();
        for (line, parsed) in rows {
            let outcome = match parsed {
                Err(msg) => RowOutcome {
                    line,
                    candidate_index: None,
                    status: RowStatus::Rejected,
                    message: Some(msg),
                },
                Ok(row) => {
                    let key = (row.batch_id, row.candidate_index);
                    let status = if self.ingested.contains(&key) || !seen_in_call.insert(key) {
                        Ok(RowStatus::Duplicate)
                    } else {
                        self.apply_row(&row)
                    };
                    if matches!(status, Ok(RowStatus::Accepted | RowStatus::Dropped)) {
                        self.ingested.insert(key);
                        changed = true;
                    }
                    match status {
                        Ok(status) => RowOutcome {
                            line,
                            candidate_index: Some(row.candidate_index),
                            status,
                            message: None,
                        },
                        Err(msg) => RowOutcome {
                            line,
                            candidate_index: Some(row.candidate_index),
                            status: RowStatus::Rejected,
                            message: Some(msg),
                        },
                    }
                }
            };
            outcomes.push(outcome);
        }
        let all_duplicates = outcomes.iter().all(|o| o.status == RowStatus::Duplicate);
        if self.phase != Phase::AwaitingResults && !all_duplicates && !changed {
            return Err(Error::Phase(format!(
                "no batch awaits results (phase {:?})",
                self.phase
            )));
        }
        let mut batch_complete = false;
        if changed {
            self.bump();
            if self
                .pending_batch
                .as_ref()
                .is_some_and(PendingBatch::is_complete)
            {
                self.complete_batch()?;
                batch_complete = true;
            }
        }
        Ok(IngestReport {
            rows: outcomes,
            batch_complete,
            phase: self.phase,
        })
    }

    fn apply_row(&mut self, row: &ResultRow) -> std::result::Result<RowStatus, String> {
        let pending = self
            .pending_batch
            .as_mut()
            .ok_or("no batch awaits results")?;
        if row.batch_id != pending.batch_id {
            return Err(format!(
                "batch {} is not pending (pending is {})",
                row.batch_id, pending.batch_id
            ));
        }
        let i = row.candidate_index;
        if i >= pending.results.len() {
            return Err(format!("batch {} has no candidate {i}", row.batch_id));
        }
        if row.dropped_flag {
            if pending.results[i].is_some() {
                return Err(format!("candidate {i} already has results"));
            }
            pending.dropped[i] = true;
            return Ok(RowStatus::Dropped);
        }
        if pending.dropped[i] {
            return Err(format!("candidate {i} was dropped"));
        }
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| format!("{name} is required"));
        let m = Measurements {
            microhardness: need(row.microhardness_HV, "microhardness_HV")?,
            porosity: need(row.porosity_pct, "porosity_pct")?,
            application_rate: row.application_rate,
            deposition_efficiency: row.deposition_efficiency_pct,
            voltage: need(row.measured_voltage_V, "measured_voltage_V")?,
        };
        let values = [
            Some(m.microhardness),
            Some(m.porosity),
            m.application_rate,
            m.deposition_efficiency,
            Some(m.voltage),
        ];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err("measurements must be finite".into());
        }
        self.config
            .constraints
            .is_satisfied(&m)
            .map_err(|e| e.to_string())?;
        pending.results[i] = Some(m);
        Ok(RowStatus::Accepted)
    }

    fn complete_batch(&mut self) -> Result<()> {
        let pending = self
            .pending_batch
            .take()
            .expect("complete_batch needs a pending batch");
        let session_id = self
            .session
            .as_ref()
            .map_or_else(String::new, |s| s.session_id.clone());
        for (cand, result) in pending.proposal.candidates.iter().zip(&pending.results) {
            if let Some(m) = result {
                self.history.push(EvaluatedExperiment::new(
                    (cand.controllable, cand.powder),
                    *m,
                    &self.config.constraints,
                    &self.config.cost,
                    session_id.clone(),
                )?);
            }
        }
        let terminated = check_termination(&pending.proposal, &self.config.optimizer);
        self.trace.push(BatchSummary {
            batch_id: pending.batch_id,
            session_id,
            incumbent: self.incumbent()?,
            proposal: pending.proposal,
            dropped: pending.dropped,
            terminated,
        });
        self.phase = if terminated {
            Phase::Terminated
        } else {
            Phase::ReadyToPropose
        };
        Ok(())
    }

    /// Operator stop. Any pending batch is abandoned.
    pub fn finish(&mut self) -> Result<Incumbent> {
        if self.phase == Phase::Terminated {
            return self.incumbent();
        }
        self.pending_batch = None;
        self.phase = Phase::Terminated;
        self.bump();
        self.incumbent()
    }

    /// Applies hypothetical results to a copy: unreported pending candidates count as
    /// dropped, and a preview batch is proposed when the copy could propose.
    pub fn what_if(&self, rows: Vec<ParsedRow>) -> Result<WhatIf> {
        let mut copy = self.clone();
        let report = copy.ingest(rows)?;
        if let Some(pending) = copy.pending_batch.as_mut() {
            for (d, r) in pending.dropped.iter_mut().zip(&pending.results) {
                *d |= r.is_none();
            }
            copy.complete_batch()?;
        }
        let preview = if copy.phase == Phase::ReadyToPropose {
            Some(copy.compute_proposal()?)
        } else {
            None
        };
        Ok(WhatIf {
            report,
            incumbent: copy.incumbent()?,
            preview,
        })
    }
}

/// Wraps JSON rows as parsed rows numbered from 1.
pub fn json_rows(rows: Vec<ResultRow>) -> Vec<ParsedRow> {
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| (i + 1, Ok(r)))
        .collect()
}
