//! Experiment configuration (JSON).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bdp_core::inference::EstimatorKind;
use bdp_core::model::{validate_admissible, ModelFile, ParamSpace, ParamVector, StructuralFunctions, ThetaFile};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Trajectory,
    BiasNaive,
    Consistency,
    EstimatorMeans,
    NullTest,
    Diagnostics,
}

/// How observed paths are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Original chain, rejection-sampled on survival to the horizon.
    #[default]
    Survival,
    /// The Doob-transformed chain, simulated directly.
    QProcess,
}

/// Which information matrix feeds standard errors and Wald tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoSource {
    /// Plug-in from the path's sufficient statistics at the estimate.
    #[default]
    Observed,
    /// Stationary (population) matrix at the estimate.
    Population,
}

/// A model file path (relative to the config file) or an inline model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Path(PathBuf),
    Inline(ModelFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: ModelRef,
    /// Generating parameter; defaults to the model file's `theta`.
    #[serde(default)]
    pub theta0: Option<ThetaFile>,
    pub x0: usize,
    pub horizons: Vec<f64>,
    #[serde(default = "one")]
    pub replicates: u64,
    #[serde(default)]
    pub base_seed: u64,
    /// Simulate birth mechanisms; estimators then run on both the marked and unmarked views.
    #[serde(default)]
    pub marked: bool,
    #[serde(default)]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    /// Condition on survival to this time instead of the horizon (must be >= every horizon).
    #[serde(default)]
    pub survival_horizon: Option<f64>,
    /// Tested mechanism for `null-test`, 1-based.
    #[serde(default)]
    pub mechanism: Option<usize>,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default)]
    pub information: InfoSource,
    /// Extra perturbed starts for root finding.
    #[serde(default)]
    pub multistart: usize,
    /// Window end `t` for the fixed-window RN derivative in `diagnostics`.
    #[serde(default)]
    pub rn_time: Option<f64>,
}

fn one() -> u64 {
    1
}

fn default_attempts() -> usize {
    10_000
}

fn default_levels() -> Vec<f64> {
    bdp_core::asymptotics::DEFAULT_LEVELS.to_vec()
}

/// A config with its model resolved and validated.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub model: ModelFile,
    pub spec: StructuralFunctions,
    pub theta0: ParamVector,
}

impl Resolved {
    pub fn horizon(&self) -> f64 {
        self.config.horizons[0]
    }

    /// Zero-based tested mechanism, if any.
    pub fn tested(&self) -> Option<usize> {
        self.config.mechanism.map(|m| m - 1)
    }

    /// Reporting scale of coordinate `beta_i`: `N^(i+1)` for SIS, 1 otherwise.
    pub fn beta_scale(&self, i: usize) -> f64 {
        match self.model.family {
            bdp_core::model::Family::Sis => (self.model.n as f64).powi(i as i32 + 1),
            bdp_core::model::Family::Custom => 1.0,
        }
    }

    pub fn estimators(&self) -> Vec<EstimatorKind> {
        if !self.config.estimators.is_empty() {
            return self.config.estimators.clone();
        }
        match self.config.experiment {
            Experiment::BiasNaive => vec![EstimatorKind::Naive],
            Experiment::EstimatorMeans => vec![EstimatorKind::Naive, EstimatorKind::ConditionalMle, EstimatorKind::Qmle],
            _ => vec![EstimatorKind::ConditionalMle],
        }
    }
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading model file {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing model file {}", path.display()))
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut config: ExperimentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let ModelRef::Path(p) = &config.model {
        if p.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            config.model = ModelRef::Path(base.join(p));
        }
    }
    Ok(config)
}

pub fn resolve(config: ExperimentConfig) -> Result<Resolved> {
    let model = match &config.model {
        ModelRef::Path(p) => load_model(p)?,
        ModelRef::Inline(m) => m.clone(),
    };
    let spec = model.structural()?;
    if config.replicates == 0 {
        bail!(ConfigError("replicates must be at least 1".into()));
    }
    if config.horizons.is_empty() || config.horizons.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        bail!(ConfigError("horizons must be a nonempty list of positive numbers".into()));
    }
    if config.x0 == 0 || config.x0 > spec.capacity() {
        bail!(ConfigError(format!("x0 must lie in 1..={}", spec.capacity())));
    }
    if let Some(t) = config.survival_horizon {
        if config.horizons.iter().any(|h| *h > t) {
            bail!(ConfigError("survival_horizon must be at least every horizon".into()));
        }
    }
    if config.levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        bail!(ConfigError("levels must lie in (0, 1)".into()));
    }
    let theta_file = config.theta0.clone().unwrap_or_else(|| model.theta.clone());
    let mut theta0 = ParamVector::new(theta_file.beta, theta_file.mu);
    if config.experiment == Experiment::NullTest {
        let Some(m) = config.mechanism else {
            bail!(ConfigError("null-test requires `mechanism` (1-based)".into()));
        };
        if m == 0 || m > spec.mechanisms() {
            bail!(ConfigError(format!("mechanism must lie in 1..={}", spec.mechanisms())));
        }
        theta0 = theta0.with_space(ParamSpace::Test(m - 1));
    } else if let Some(m) = config.mechanism {
        if m == 0 || m > spec.mechanisms() {
            bail!(ConfigError(format!("mechanism must lie in 1..={}", spec.mechanisms())));
        }
    }
    validate_admissible(&spec, &theta0).into_result()?;
    Ok(Resolved { config, model, spec, theta0 })
}

/// A configuration problem (as opposed to an I/O or model error).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}
