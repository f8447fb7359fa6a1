//! Run configuration files.

use std::path::{Path, PathBuf};

use ci3p3_core::scenario::{builtin, Scenario};
use ci3p3_core::simulator::Variant;
use ci3p3_core::{DesignParams, DoseGrid};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub grid: Option<DoseGrid>,
    #[serde(default)]
    pub params: DesignParams,
    #[serde(default)]
    pub variant: Variant,
    /// Builtin ids (`study2`, `study1/sc3`) or paths to `.csv`/`.json` scenario files.
    #[serde(default)]
    pub scenarios: Vec<String>,
    #[serde(default)]
    pub n_reps: Option<u32>,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: ConfigFile =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                path.display(),
                cfg.schema_version
            )));
        }
        cfg.params.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Scenario references resolved relative to `base`.
    pub fn resolve_scenarios(&self, base: &Path) -> Result<Vec<Scenario>, CliError> {
        let mut out = Vec::new();
        for r in &self.scenarios {
            out.extend(load_scenarios(r, base)?);
        }
        Ok(out)
    }
}

pub fn load_scenarios(reference: &str, base: &Path) -> Result<Vec<Scenario>, CliError> {
    if reference.starts_with("study1") || reference.starts_with("study2") {
        return builtin(reference).map_err(|e| CliError::Config(e.to_string()));
    }
    let path = base.join(reference);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let scenario = if path.extension().is_some_and(|e| e == "json") {
        Scenario::from_json(&text)
    } else {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Scenario::from_csv(&id, &text)
    };
    scenario.map(|s| vec![s]).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
