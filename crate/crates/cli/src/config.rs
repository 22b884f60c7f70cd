use std::path::{Path, PathBuf};

use plvio::estimator::Variant;
use plvio::evaluation::{MonteCarloSetup, NeesMode};
use plvio::simulator::SimConfig;
use plvio::triangulation::GnSettings;
use plvio::update::UpdateConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObsCheckConfig {
    /// Start of the diagnostic window in seconds.
    pub t0: f64,
    pub frames: usize,
}

impl Default for ObsCheckConfig {
    fn default() -> Self {
        Self { t0: 2.0, frames: 6 }
    }
}

/// Experiment description loaded from JSON. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    /// Derived from the simulator's pixel noise and focal length when absent.
    pub update: Option<UpdateConfig>,
    pub gn: GnSettings,
    pub variants: Vec<Variant>,
    pub out_dir: PathBuf,
    /// Overrides `sim.seed`.
    pub seed: Option<u64>,
    /// Overrides `sim.runs`.
    pub runs: Option<usize>,
    pub nees: NeesMode,
    pub obscheck: ObsCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            update: None,
            gn: GnSettings::default(),
            variants: Variant::ALL.to_vec(),
            out_dir: PathBuf::from("out"),
            seed: None,
            runs: None,
            nees: NeesMode::Pose,
            obscheck: ObsCheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.sim.validate()?;
        self.update_config().validate()?;
        if self.variants.is_empty() {
            return Err(CliError::Usage("variants must not be empty".into()));
        }
        if self.runs() == 0 {
            return Err(CliError::Usage("runs must be at least 1".into()));
        }
        if self.obscheck.frames < 2 {
            return Err(CliError::Usage("obscheck.frames must be at least 2".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.sim.seed)
    }

    pub fn runs(&self) -> usize {
        self.runs.unwrap_or(self.sim.runs)
    }

    pub fn update_config(&self) -> UpdateConfig {
        self.update.unwrap_or_else(|| self.sim.update_config())
    }

    pub fn setup(&self) -> MonteCarloSetup {
        MonteCarloSetup { sim: self.sim.clone(), update: self.update_config(), gn: self.gn, nees: self.nees }
    }
}
