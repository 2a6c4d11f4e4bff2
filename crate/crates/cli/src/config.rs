//! Scenario configuration. The schema is strict: unknown keys and
//! mismatched format versions are rejected.

use std::path::{Path, PathBuf};

use macrohydro::steady::BoundaryData;
use macrohydro::ThermoModel;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub format_version: u32,
    pub model: ModelConfig,
    pub mesh: MeshConfig,
    pub bc: BcConfig,
    #[serde(default)]
    pub tasks: Vec<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub n: usize,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BcKind {
    Q,
    Theta,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BcConfig {
    pub kind: BcKind,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Steady,
    Linop,
    Covariance,
    Simulate,
    Verify,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    EulerMaruyama,
    CrankNicolson,
}

/// Simulation settings. Omitted step counts are derived from the
/// relaxation time `1/|abscissa|`: burn-in of 10 relaxation times, one
/// record per tenth of a relaxation time, 200 records.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeName>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.format_version != FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                cfg.format_version
            )));
        }
        if cfg.mesh.n < 2 {
            return Err(CliError::Config("mesh.n must be at least 2".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
        Ok((Self::from_json(text)?, bytes))
    }

    pub fn boundary(&self) -> BoundaryData {
        match self.bc.kind {
            BcKind::Q => BoundaryData::densities(self.bc.left.clone(), self.bc.right.clone()),
            BcKind::Theta => BoundaryData::conjugates(self.bc.left.clone(), self.bc.right.clone()),
        }
    }
}

fn number(params: &Map<String, Value>, key: &str, default: f64) -> Result<f64, CliError> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| CliError::Config(format!("model.params.{key} must be a number"))),
    }
}

fn matrix(params: &Map<String, Value>, key: &str, default: [[f64; 2]; 2]) -> Result<DMatrix<f64>, CliError> {
    let bad = || CliError::Config(format!("model.params.{key} must be a square array of numbers"));
    match params.get(key) {
        None => Ok(DMatrix::from_fn(2, 2, |i, j| default[i][j])),
        Some(Value::Array(rows)) => {
            let m = rows.len();
            let mut out = DMatrix::zeros(m, m);
            for (i, row) in rows.iter().enumerate() {
                let row = row.as_array().ok_or_else(bad)?;
                if row.len() != m {
                    return Err(bad());
                }
                for (j, v) in row.iter().enumerate() {
                    out[(i, j)] = v.as_f64().ok_or_else(bad)?;
                }
            }
            Ok(out)
        }
        Some(_) => Err(bad()),
    }
}

fn check_keys(params: &Map<String, Value>, model: &str, allowed: &[&str]) -> Result<(), CliError> {
    for key in params.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(CliError::Config(format!(
                "unknown parameter `{key}` for model `{model}` (expected one of: {})",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

/// Builds a built-in model from its name and parameters.
pub fn build_model(cfg: &ModelConfig) -> Result<ThermoModel, CliError> {
    let p = &cfg.params;
    let invalid = |e: macrohydro::Error| CliError::Config(format!("model `{}`: {e}", cfg.name));
    match cfg.name.as_str() {
        "sep" => {
            check_keys(p, "sep", &["mobility"])?;
            ThermoModel::sep_with_mobility(number(p, "mobility", 1.0)?).map_err(invalid)
        }
        "gaussian" => {
            check_keys(p, "gaussian", &["susceptibility", "mobility"])?;
            ThermoModel::gaussian_with(number(p, "susceptibility", 1.0)?, number(p, "mobility", 1.0)?).map_err(invalid)
        }
        "twocomp" => {
            check_keys(p, "twocomp", &["hessian", "onsager", "antisymmetry"])?;
            let h = matrix(p, "hessian", ThermoModel::TWOCOMP_HESSIAN)?;
            let a = matrix(p, "onsager", ThermoModel::TWOCOMP_ONSAGER)?;
            let model = ThermoModel::twocomp_with(h, a).map_err(invalid)?;
            match number(p, "antisymmetry", 0.0)? {
                0.0 => Ok(model),
                mag => model.with_antisymmetric_onsager(mag).map_err(invalid),
            }
        }
        "linear_mobility" => {
            check_keys(p, "linear_mobility", &[])?;
            Ok(ThermoModel::linear_mobility())
        }
        other => Err(CliError::Config(format!(
            "unknown model `{other}` (expected sep, gaussian, twocomp or linear_mobility)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{"format_version": 1, "model": {"name": "sep"}, "mesh": {"n": 8},
        "bc": {"kind": "q", "left": [0.3], "right": [0.7]}}"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ScenarioConfig::from_json(BASE).unwrap();
        assert!(cfg.tasks.is_empty());
        assert_eq!(build_model(&cfg.model).unwrap().name(), "sep");
    }

    #[test]
    fn unknown_key_is_named() {
        let text = BASE.replace("\"mesh\"", "\"colour\": 1, \"mesh\"");
        let err = ScenarioConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("colour"));
        assert_eq!(err.exit_code(), crate::error::EXIT_CONFIG);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let text = BASE.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(ScenarioConfig::from_json(&text).is_err());
    }

    #[test]
    fn unknown_model_parameter_is_named() {
        let model = ModelConfig {
            name: "gaussian".into(),
            params: serde_json::from_str(r#"{"stiffness": 2}"#).unwrap(),
        };
        assert!(build_model(&model).unwrap_err().to_string().contains("stiffness"));
    }

    #[test]
    fn twocomp_matrices() {
        let model = ModelConfig {
            name: "twocomp".into(),
            params: serde_json::from_str(r#"{"hessian": [[1, 0], [0, 1]], "antisymmetry": 0.001}"#).unwrap(),
        };
        let m = build_model(&model).unwrap();
        assert_eq!(m.m(), 2);
    }
}
