//! The single JSON config file shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sprayopt::acquisition::ConstraintSpec;
use sprayopt::campaign::CampaignConfig;
use sprayopt::optimizer::{ModelConfig, OptimizerConfig, SimulationSettings};
use sprayopt::oracle::{
    parse_design_csv, shipped_design, DesignPoint, EquipmentState, NoiseSpec, OracleDocument,
    ProcessOracle,
};
use sprayopt::process::{
    CandidateScheme, CostConfig, DomainBounds, Powder, DEFAULT_CANDIDATE_COUNT,
};
use sprayopt::Error;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub version: u32,
    pub domain_bounds: DomainBounds,
    pub constraints: ConstraintSpec,
    pub cost: CostConfig,
    pub optimizer: OptimizerSection,
    pub oracle: OracleSection,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub search: OptimizerConfig,
    pub model: ModelConfig,
    pub candidate_count: usize,
    pub candidate_scheme: CandidateScheme,
    pub powder: Powder,
    /// Seed of real campaigns; simulations take `--seed`.
    pub campaign_seed: u64,
}

/// Simulated process used by `simulate`, `sweep` and `sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub noise: NoiseSpec,
    /// Voltage offset of the optimization session relative to the initialization session.
    pub session_offset: f64,
    pub voltage_reading_sd: f64,
    pub ignition_repeats: usize,
}

/// Each entry can be overridden by SPRAYOPT_DATA_DIR, SPRAYOPT_SERVER_URL,
/// SPRAYOPT_ORACLE_WEIGHTS and SPRAYOPT_DESIGN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Campaign files of `serve`.
    pub data_dir: PathBuf,
    /// Service the `campaign` commands talk to.
    pub server_url: String,
    /// Oracle weight file; the shipped weights when absent.
    pub oracle_weights: Option<PathBuf>,
    /// Initialization design CSV; the shipped design when absent.
    pub design: Option<PathBuf>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            version: CONFIG_VERSION,
            domain_bounds: DomainBounds::default(),
            constraints: ConstraintSpec::default(),
            cost: CostConfig::default(),
            optimizer: OptimizerSection::default(),
            oracle: OracleSection::default(),
            paths: Paths::default(),
        }
    }
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            search: OptimizerConfig::default(),
            model: ModelConfig::default(),
            candidate_count: DEFAULT_CANDIDATE_COUNT,
            candidate_scheme: CandidateScheme::default(),
            powder: Powder::A,
            campaign_seed: 0,
        }
    }
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            noise: NoiseSpec::default(),
            session_offset: 2.0,
            voltage_reading_sd: 0.0,
            ignition_repeats: 1,
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: PathBuf::from("campaigns"),
            server_url: "http://127.0.0.1:8080".into(),
            oracle_weights: None,
            design: None,
        }
    }
}

impl Paths {
    fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("SPRAYOPT_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("SPRAYOPT_SERVER_URL") {
            self.server_url = v;
        }
        if let Some(v) = get("SPRAYOPT_ORACLE_WEIGHTS") {
            self.oracle_weights = Some(v.into());
        }
        if let Some(v) = get("SPRAYOPT_DESIGN") {
            self.design = Some(v.into());
        }
    }
}

impl AppConfig {
    /// Defaults when `path` is absent; path entries then take environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => {
                        Error::NotFound(format!("config file {}", p.display()))
                    }
                    _ => Error::Io(e),
                })?;
                Self::from_json(&text)?
            }
            None => AppConfig::default(),
        };
        config
            .paths
            .apply_env(|k| std::env::var(k).ok().filter(|v| !v.is_empty()));
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CONFIG_VERSION {
            return Err(Error::MigrationRequired {
                kind: "config".into(),
                found,
                supported: CONFIG_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.campaign().validate()?;
        self.oracle.noise.validate()?;
        if !(self.oracle.session_offset.is_finite() && self.oracle.voltage_reading_sd >= 0.0) {
            return Err(Error::InvalidArgument(
                "oracle session offset must be finite and reading sd non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn campaign(&self) -> CampaignConfig {
        CampaignConfig {
            optimizer: self.optimizer.search.clone(),
            model: self.optimizer.model.clone(),
            constraints: self.constraints.clone(),
            cost: self.cost.clone(),
            bounds: self.domain_bounds.clone(),
            powder: self.optimizer.powder,
            candidate_count: self.optimizer.candidate_count,
            candidate_scheme: self.optimizer.candidate_scheme.clone(),
            seed: self.optimizer.campaign_seed,
        }
    }

    pub fn simulation(&self) -> SimulationSettings {
        SimulationSettings {
            optimizer: self.optimizer.search.clone(),
            model: self.optimizer.model.clone(),
            constraints: self.constraints.clone(),
            bounds: self.domain_bounds.clone(),
            powder: self.optimizer.powder,
            candidate_count: self.optimizer.candidate_count,
            candidate_scheme: self.optimizer.candidate_scheme.clone(),
            session: self.session(),
            ignition_repeats: self.oracle.ignition_repeats,
        }
    }

    pub fn session(&self) -> EquipmentState {
        EquipmentState {
            voltage_offset: self.oracle.session_offset,
            ignition_noise_sd: self.oracle.voltage_reading_sd,
        }
    }

    pub fn oracle(&self) -> Result<ProcessOracle, Error> {
        let doc = match &self.paths.oracle_weights {
            Some(p) => OracleDocument::from_json(&std::fs::read_to_string(p)?)?,
            None => OracleDocument::shipped(),
        };
        ProcessOracle::new(
            &doc,
            self.oracle.noise,
            self.constraints.clone(),
            self.cost.clone(),
        )
    }

    pub fn design(&self) -> Result<Vec<DesignPoint>, Error> {
        match &self.paths.design {
            Some(p) => parse_design_csv(&std::fs::read_to_string(p)?),
            None => Ok(shipped_design()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = AppConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(AppConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let c =
            AppConfig::from_json(r#"{"version": 1, "optimizer": {"search": {"batch_size": 10}}}"#)
                .unwrap();
        assert_eq!(c.optimizer.search.batch_size, 10);
        assert_eq!(c.optimizer.search.pi, OptimizerConfig::default().pi);
        assert_eq!(c.paths, Paths::default());
    }

    #[test]
    fn version_and_unknown_sections_are_checked() {
        assert!(matches!(
            AppConfig::from_json(r#"{"version": 2}"#),
            Err(Error::MigrationRequired { found: 2, .. })
        ));
        assert!(matches!(
            AppConfig::from_json(r#"{}"#),
            Err(Error::MigrationRequired { found: 0, .. })
        ));
        assert!(matches!(
            AppConfig::from_json(r#"{"version": 1, "plots": {}}"#),
            Err(Error::Json(_))
        ));
    }

    #[test]
    fn env_overrides_touch_only_paths() {
        let mut p = Paths::default();
        p.apply_env(|k| match k {
            "SPRAYOPT_DATA_DIR" => Some("/srv/c".into()),
            "SPRAYOPT_SERVER_URL" => Some("http://h:1".into()),
            _ => None,
        });
        assert_eq!(p.data_dir, PathBuf::from("/srv/c"));
        assert_eq!(p.server_url, "http://h:1");
        assert!(p.design.is_none());
    }
}
