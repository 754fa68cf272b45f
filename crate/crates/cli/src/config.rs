use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use dr_ensemble::consensus::{ConsensusSettings, Mode, StepSchedule, Topology, DEFAULT_THRESHOLD};
use dr_ensemble::ingest::{Binning, EnsembleSpec, TariffSchedule};
use dr_ensemble::math::DEFAULT_INTERIOR_EPS;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Closed-form backward recursion over the ensemble aggregates.
    Centralized,
    /// Gossip negotiation of the whole stack.
    Global,
    /// Gossip negotiation stage by stage.
    Local,
    /// One state-independent row per stage, re-solved for the realized joint state.
    Trivial,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Centralized, Scheme::Global, Scheme::Local, Scheme::Trivial];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Centralized => "centralized",
            Scheme::Global => "global",
            Scheme::Local => "local",
            Scheme::Trivial => "trivial",
        }
    }

    pub fn is_decentralized(self) -> bool {
        matches!(self, Scheme::Global | Scheme::Local)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .with_context(|| format!("unknown scheme {s:?}; expected centralized, global, local or trivial"))
    }
}

/// Where the building's Markov model comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    /// A model written by `ingest`; takes precedence over `power_csv`.
    pub model: Option<PathBuf>,
    /// `timestamp,power_kw` readings.
    pub power_csv: Option<PathBuf>,
    pub binning: Binning,
    pub smoothing: f64,
    /// Length of the built-in synthetic series used when no file is given.
    pub synthetic_days: usize,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource { model: None, power_csv: None, binning: Binning::EqualWidth, smoothing: 1.0, synthetic_days: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub noise_magnitude: f64,
    pub gamma_range: [f64; 2],
    pub resample_gamma_per_stage: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { noise_magnitude: 0.05, gamma_range: [16.0, 24.0], resample_gamma_per_stage: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub threshold: f64,
    pub schedule: StepSchedule,
    pub mode: Mode,
    pub topology: Topology,
    /// Clock rate of every unit (events per unit time).
    pub rate: f64,
    pub max_iterations: usize,
    pub interior_eps: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            threshold: DEFAULT_THRESHOLD,
            // with 1/k the case study needs ~50x more rounds to agree within 0.01
            schedule: StepSchedule::ScaledHarmonic { a: 0.02, b: 0.0 },
            mode: Mode::Synchronous,
            topology: Topology::Uniform,
            rate: 1.0,
            max_iterations: 200_000,
            interior_eps: DEFAULT_INTERIOR_EPS,
        }
    }
}

impl ConsensusConfig {
    pub fn settings(&self) -> ConsensusSettings {
        ConsensusSettings {
            schedule: self.schedule,
            mode: self.mode,
            threshold: self.threshold,
            max_iterations: self.max_iterations,
            interior_eps: self.interior_eps,
        }
    }
}

/// Everything one experiment needs. Missing fields take the case-study defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "S")]
    pub states: usize,
    #[serde(rename = "L")]
    pub stage_count: usize,
    #[serde(rename = "N")]
    pub units: usize,
    /// Drawn from the OS and recorded in the summary when absent.
    pub seed: Option<u64>,
    pub schemes: Vec<Scheme>,
    pub consensus: ConsensusConfig,
    pub ensemble: EnsembleConfig,
    pub tariff: TariffSchedule,
    pub data: DataSource,
    pub replicas: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            states: 20,
            stage_count: 20,
            units: 100,
            seed: None,
            schemes: Scheme::ALL.to_vec(),
            consensus: ConsensusConfig::default(),
            ensemble: EnsembleConfig::default(),
            tariff: TariffSchedule::constant(0.2),
            data: DataSource::default(),
            replicas: 20,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).context("malformed experiment config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        ExperimentConfig::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.states < 2 {
            bail!("S must be at least 2");
        }
        if self.stage_count < 2 {
            bail!("L must be at least 2");
        }
        if self.units == 0 {
            bail!("N must be at least 1");
        }
        if self.schemes.is_empty() {
            bail!("at least one scheme is required");
        }
        if !(self.consensus.threshold > 0.0) {
            bail!("consensus threshold must be positive");
        }
        if self.replicas == 0 {
            bail!("replicas must be at least 1");
        }
        if self.consensus.max_iterations == 0 {
            bail!("consensus iteration cap must be positive");
        }
        if self.schemes.iter().any(|s| s.is_decentralized()) && self.units < 2 {
            bail!("decentralized schemes need at least 2 units");
        }
        self.ensemble_spec(0).validate()?;
        Ok(())
    }

    pub fn ensemble_spec(&self, seed: u64) -> EnsembleSpec {
        EnsembleSpec {
            units: self.units,
            noise_magnitude: self.ensemble.noise_magnitude,
            gamma_range: self.ensemble.gamma_range,
            seed,
            resample_gamma_per_stage: self.ensemble.resample_gamma_per_stage,
        }
    }
}
