//! The `--config` document. Every section is optional and falls back to defaults.

use std::path::Path;

use aqpim_core::quantizer::PqConfig;
use aqpim_sim::{ModelShape, PimConfig, Scenario, ScenarioKind, SweepAxis, Workload};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pq: PqConfig,
    pub pim: PimConfig,
    pub scenarios: Vec<ScenarioSpec>,
    pub sweep: Option<SweepSpec>,
    pub fidelity: FidelitySpec,
}

/// A preset name or a full shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Shape(ModelShape),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset("mistral-7b".into())
    }
}

impl ModelSpec {
    pub fn resolve(&self) -> CliResult<ModelShape> {
        match self {
            ModelSpec::Shape(s) => Ok(s.clone()),
            ModelSpec::Preset(name) => match name.as_str() {
                "mistral-7b" => Ok(ModelShape::mistral_7b()),
                "mha-7b" => Ok(ModelShape::mha_7b()),
                _ => Err(CliError::Config(format!(
                    "unknown model preset {name:?} (known: mistral-7b, mha-7b)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: String,
    pub model: ModelSpec,
    pub batch: usize,
    pub seq_in: usize,
    pub seq_out: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: "aqpim".into(),
            model: ModelSpec::default(),
            batch: 1,
            seq_in: 4096,
            seq_out: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn resolve(&self) -> CliResult<Scenario> {
        let kind: ScenarioKind = self
            .kind
            .parse()
            .map_err(|_| CliError::UnknownScenario(self.kind.clone()))?;
        let workload = Workload::new(self.model.resolve()?, self.batch, self.seq_in, self.seq_out);
        workload.validate()?;
        Ok(Scenario { kind, workload })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelitySpec {
    pub arms: Vec<String>,
    pub seeds: usize,
    /// Queries drawn per head and seed.
    pub queries: usize,
}

impl Default for FidelitySpec {
    fn default() -> Self {
        Self {
            arms: ["standard", "no-weighting", "no-presort", "full"].map(String::from).to_vec(),
            seeds: 5,
            queries: 16,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.pq.validate()?;
        cfg.pim.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => CliError::InputNotFound(p.to_path_buf()),
                    _ => CliError::Io(format!("{}: {e}", p.display())),
                })?;
                Self::from_json(&text)
            }
        }
    }
}
