//! Resolved run configuration and the reproducibility manifest embedded in
//! every output.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use canova_core::estimators::Method;
use canova_core::inference::{Fallback, Statistic};
use canova_core::nuisance::LearnerConfig;
use canova_core::seed::derive_seed;
use canova_core::simulation::{DgpKind, StudyConfig};
use canova_core::{EstimandSpec, Schema};
use serde::{Deserialize, Serialize};

pub const MANIFEST_PREFIX: &str = "# manifest: ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Estimate,
    Test,
    Screen,
    Simulate,
    Generate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<CommandKind>,
    pub input: Option<PathBuf>,
    pub outcome: Option<String>,
    pub schema: Option<Schema>,
    pub estimands: Vec<EstimandSpec>,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub folds: usize,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub learner: LearnerConfig,
    pub permutations: usize,
    pub statistic: Statistic,
    pub fallback: Fallback,
    pub force_interaction_gate: bool,
    pub format: Option<Format>,
    pub study: Option<StudyConfig>,
    pub dgp: Option<DgpKind>,
    pub n: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            input: None,
            outcome: None,
            schema: None,
            estimands: Vec::new(),
            methods: Vec::new(),
            alpha: 0.05,
            folds: 5,
            seed: 0,
            learner: LearnerConfig::default(),
            permutations: 999,
            statistic: Statistic::PlugIn,
            fallback: Fallback::Point,
            force_interaction_gate: false,
            format: None,
            study: None,
            dgp: None,
            n: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub fold_plan: u64,
    pub monte_carlo: u64,
    pub randomization: u64,
    pub data: u64,
}

impl DerivedSeeds {
    pub fn from_master(seed: u64) -> Self {
        DerivedSeeds {
            fold_plan: derive_seed(seed, &[1]),
            monte_carlo: derive_seed(seed, &[2]),
            randomization: derive_seed(seed, &[3]),
            data: derive_seed(seed, &[4]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub derived_seeds: DerivedSeeds,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Self {
        Manifest {
            tool: "canova".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            derived_seeds: DerivedSeeds::from_master(config.seed),
        }
    }

    pub fn csv_line(&self) -> anyhow::Result<String> {
        Ok(format!(
            "{MANIFEST_PREFIX}{}\n",
            serde_json::to_string(self)?
        ))
    }
}

/// Load a run configuration from a TOML or JSON file, or recover it from the
/// manifest of a previous output (JSON with a `manifest` key, or CSV whose
/// first line carries the manifest).
pub fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    if let Some(rest) = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix(MANIFEST_PREFIX))
    {
        let m: Manifest = serde_json::from_str(rest).context("parsing embedded manifest")?;
        return Ok(m.config);
    }
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let value: serde_json::Value =
            serde_json::from_str(trimmed).context("parsing JSON config")?;
        if let Some(m) = value.get("manifest") {
            let m: Manifest =
                serde_json::from_value(m.clone()).context("parsing embedded manifest")?;
            return Ok(m.config);
        }
        return serde_json::from_value(value).context("parsing JSON config");
    }
    if path.extension().is_some_and(|e| e == "csv") {
        bail!("{} has no manifest line", path.display());
    }
    toml::from_str(&text).context("parsing TOML config")
}
