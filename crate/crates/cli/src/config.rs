//! Run configuration files.

use std::path::{Path, PathBuf};

use laplace_mh::lgm::{HyperPrior, PriorDensity};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Manski,
    Dismap,
    OracleManski,
    OracleDismap,
}

impl ModelKind {
    pub fn is_econ(self) -> bool {
        matches!(self, ModelKind::Manski | ModelKind::OracleManski)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub gal: PathBuf,
    /// Area table for the econometric models, long-format counts
    /// (`id, disease, observed, expected`) for disease mapping.
    pub csv: PathBuf,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariates: Vec<String>,
}

fn default_id_column() -> String {
    "id".into()
}

/// Chain settings. Missing entries fall back to the model's defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burnin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_sd: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<PriorDensity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<PriorDensity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_v: Option<PriorDensity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_s: Option<PriorDensity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_precision: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub data: DataConfig,
    /// Adds spatially lagged covariates to the econometric model.
    #[serde(default)]
    pub lagged: bool,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub priors: PriorOverrides,
    /// Extra latent quantities to report: coefficient names for the
    /// econometric models, `"shared"` for the shared disease field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_latent: Option<Vec<String>>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_output() -> PathBuf {
    "output".into()
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError::Config(message.into())
}

pub fn prior(field: &str, density: PriorDensity) -> Result<HyperPrior, CliError> {
    HyperPrior::new(density).map_err(|e| config_error(format!("priors.{field}: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| config_error(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    /// Reads `path` and resolves relative data and output paths against the
    /// directory holding the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data.gal, &mut config.data.csv, &mut config.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    fn check(&self) -> Result<(), CliError> {
        let p = &self.priors;
        let econ_only = [("precision", p.precision.is_some()), ("beta_precision", p.beta_precision.is_some())];
        let dismap_only = [
            ("delta", p.delta.is_some()),
            ("tau_v", p.tau_v.is_some()),
            ("tau_s", p.tau_s.is_some()),
            ("alpha_precision", p.alpha_precision.is_some()),
        ];
        let foreign = if self.model.is_econ() { &dismap_only[..] } else { &econ_only[..] };
        if let Some((name, _)) = foreign.iter().find(|(_, set)| *set) {
            return Err(config_error(format!("priors.{name} does not apply to model {:?}", self.model)));
        }
        for (name, value) in [("beta_precision", p.beta_precision), ("alpha_precision", p.alpha_precision)] {
            if let Some(v) = value {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(config_error(format!("priors.{name} must be positive, got {v}")));
                }
            }
        }
        for (name, density) in [("precision", p.precision), ("delta", p.delta), ("tau_v", p.tau_v), ("tau_s", p.tau_s)] {
            if let Some(d) = density {
                prior(name, d)?;
            }
        }
        if self.model.is_econ() {
            if self.data.response.is_none() {
                return Err(config_error("data.response is required for the econometric models"));
            }
            if self.data.covariates.is_empty() {
                return Err(config_error("data.covariates must name at least one column"));
            }
        } else if self.data.response.is_some() || !self.data.covariates.is_empty() {
            return Err(config_error("data.response and data.covariates apply only to the econometric models"));
        } else if self.lagged {
            return Err(config_error("lagged applies only to the econometric models"));
        }
        if self.workers == Some(0) {
            return Err(config_error("workers must be positive"));
        }
        if let Some(names) = &self.track_latent {
            if !self.model.is_econ() {
                if let Some(bad) = names.iter().find(|n| *n != "shared") {
                    return Err(config_error(format!("track_latent: unknown entry {bad:?} (expected \"shared\")")));
                }
            }
        }
        Ok(())
    }

    /// Whether the shared disease field is reported.
    pub fn track_shared(&self) -> bool {
        match &self.track_latent {
            Some(names) => names.iter().any(|n| n == "shared"),
            None => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const COLUMBUS: &str = r#"{
        "model": "manski",
        "data": {"gal": "columbus.gal", "csv": "columbus.csv", "response": "CRIME", "covariates": ["INC", "HOVAL"]},
        "chain": {"burnin": 500, "iterations": 5500, "thin": 5, "seed": 1, "proposal_sd": [0.25, 0.25]}
    }"#;

    #[test]
    fn parses_minimal_config() {
        let c = RunConfig::parse(COLUMBUS).unwrap();
        assert_eq!(c.model, ModelKind::Manski);
        assert_eq!(c.data.id_column, "id");
        assert_eq!(c.chain.proposal_sd.as_deref(), Some(&[0.25, 0.25][..]));
        assert_eq!(c.output, PathBuf::from("output"));
    }

    #[test]
    fn rejects_unknown_fields_and_foreign_priors() {
        let bad = COLUMBUS.replace("\"thin\"", "\"thinning\"");
        assert!(matches!(RunConfig::parse(&bad), Err(CliError::Config(_))));
        let foreign = COLUMBUS.replace(
            "\"chain\"",
            "\"priors\": {\"tau_v\": {\"kind\": \"gamma\", \"shape\": 1, \"rate\": 1}}, \"chain\"",
        );
        assert!(matches!(RunConfig::parse(&foreign), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_prior_is_a_config_error() {
        let bad = COLUMBUS.replace(
            "\"chain\"",
            "\"priors\": {\"precision\": {\"kind\": \"gamma\", \"shape\": -1, \"rate\": 1}}, \"chain\"",
        );
        assert!(matches!(RunConfig::parse(&bad), Err(CliError::Config(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, COLUMBUS).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.data.gal, dir.path().join("columbus.gal"));
        assert_eq!(c.output, dir.path().join("output"));
    }
}
