//! Experiment configuration files (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::covsteer::SteeringProblem;
use crate::distributions::{Distribution, EmpiricalSet, GaussianSpec, GmmSpec};
use crate::error::{Error, Result};
use crate::metrics::LogdetReading;
use crate::policy::{LipschitzBudget, PolicyStack};
use crate::systems::{Obstacle, ObstacleField, SystemSpec};
use crate::tensor::Tensor;
use crate::trainer::{Problem, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum SystemConfig {
    #[serde(rename = "double_integrator_2d")]
    DoubleIntegrator2d {
        dt: f64,
        horizon: usize,
    },
    #[serde(rename = "saturating_drift_2d")]
    SaturatingDrift2d {
        horizon: usize,
        #[serde(default = "one")]
        input_gain: f64,
    },
    SingleIntegrator {
        state_dim: usize,
        dt: f64,
        horizon: usize,
    },
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        dt: f64,
        horizon: usize,
    },
}

fn one() -> f64 {
    1.0
}

impl SystemConfig {
    pub fn build(&self) -> Result<SystemSpec<f64>> {
        let field = |e: Error| match e {
            Error::Config { .. } => e,
            other => Error::config("system", other.to_string()),
        };
        match self {
            Self::DoubleIntegrator2d { dt, horizon } => {
                SystemSpec::double_integrator_2d(*dt, *horizon).map_err(field)
            }
            Self::SaturatingDrift2d {
                horizon,
                input_gain,
            } => SystemSpec::saturating_drift_2d(*input_gain, *horizon).map_err(field),
            Self::SingleIntegrator {
                state_dim,
                dt,
                horizon,
            } => SystemSpec::single_integrator(*state_dim, *dt, *horizon).map_err(field),
            Self::Linear { a, b, dt, horizon } => {
                let a = matrix("system.a", a)?;
                let b = matrix("system.b", b)?;
                SystemSpec::linear(&a, b, *dt, *horizon).map_err(field)
            }
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Self::DoubleIntegrator2d { horizon, .. }
            | Self::SaturatingDrift2d { horizon, .. }
            | Self::SingleIntegrator { horizon, .. }
            | Self::Linear { horizon, .. } => *horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DistributionConfig {
    /// Give either `cov` or `diag`.
    Gaussian {
        mean: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cov: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diag: Option<Vec<f64>>,
    },
    /// One entry of `covs` or `diags` per component.
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covs: Option<Vec<Vec<Vec<f64>>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diags: Option<Vec<Vec<f64>>>,
    },
    /// CSV of samples; a relative path is resolved against the config file.
    Samples { path: PathBuf },
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    Tensor::from_rows(rows).map_err(|e| Error::config(field, e.to_string()))
}

fn covariance(
    field: &str,
    cov: &Option<Vec<Vec<f64>>>,
    diag: &Option<Vec<f64>>,
) -> Result<Tensor<f64>> {
    match (cov, diag) {
        (Some(c), None) => matrix(field, c),
        (None, Some(d)) => Ok(Tensor::diag(d)),
        _ => Err(Error::config(field, "give exactly one of `cov` and `diag`")),
    }
}

impl DistributionConfig {
    pub fn build(&self, field: &str, base: &Path) -> Result<Distribution<f64>> {
        let wrap = |e: Error| match e {
            Error::Config { .. } => e,
            other => Error::config(field, other.to_string()),
        };
        match self {
            Self::Gaussian { mean, cov, diag } => {
                let cov = covariance(field, cov, diag)?;
                Ok(Distribution::Gaussian(
                    GaussianSpec::new(mean.clone(), cov).map_err(wrap)?,
                ))
            }
            Self::Gmm {
                weights,
                means,
                covs,
                diags,
            } => {
                let count = means.len();
                let cov_at = |i: usize| -> Result<Tensor<f64>> {
                    match (covs, diags) {
                        (Some(c), None) if c.len() == count => matrix(field, &c[i]),
                        (None, Some(d)) if d.len() == count => Ok(Tensor::diag(&d[i])),
                        _ => Err(Error::config(
                            field,
                            "give exactly one of `covs` and `diags`, one per mean",
                        )),
                    }
                };
                let components = (0..count)
                    .map(|i| GaussianSpec::new(means[i].clone(), cov_at(i)?).map_err(wrap))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Distribution::Gmm(
                    GmmSpec::new(weights.clone(), components).map_err(wrap)?,
                ))
            }
            Self::Samples { path } => {
                let full = if path.is_absolute() {
                    path.clone()
                } else {
                    base.join(path)
                };
                let set = EmpiricalSet::from_csv(&full).map_err(|e| {
                    Error::config(field, format!("cannot load {}: {e}", full.display()))
                })?;
                Ok(Distribution::Empirical(set))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub center: Vec<f64>,
    pub radius: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstaclesConfig {
    /// State coordinates the potential is evaluated on.
    pub position: Vec<usize>,
    #[serde(default)]
    pub obstacle: Vec<ObstacleConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub widths: Vec<usize>,
    pub alpha: f64,
    /// Uniform budget `L_π`; derived as `(1 − L_φ)/σ_B` per step when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out samples for the metrics report.
    pub samples: usize,
    pub logdet_reading: LogdetReading,
    /// Write wall-clock columns as 0 so reruns are byte-identical.
    pub reproducible: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            logdet_reading: LogdetReading::Total,
            reproducible: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub starts: usize,
    pub iterations: usize,
    pub cuts_per_octave: usize,
    pub octaves: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            starts: 5,
            iterations: 2000,
            cuts_per_octave: 4,
            octaves: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub lambda: f64,
    pub system: SystemConfig,
    pub source: DistributionConfig,
    pub target: DistributionConfig,
    pub policy: PolicyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacles: Option<ObstaclesConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    /// Directory relative sample paths resolve against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Everything a run needs, built and validated from a config.
#[derive(Clone, Debug)]
pub struct Assembly {
    pub problem: Problem,
    pub stack: PolicyStack<f64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("line {}", text[..s.start].matches('\n').count() + 1))
                .unwrap_or_else(|| "file".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn obstacle_field(&self) -> Result<ObstacleField<f64>> {
        match &self.obstacles {
            None => Ok(ObstacleField::empty()),
            Some(o) => {
                let list = o
                    .obstacle
                    .iter()
                    .map(|c| Obstacle {
                        center: c.center.clone(),
                        radius: c.radius,
                        weight: c.weight,
                    })
                    .collect();
                ObstacleField::new(o.position.clone(), list)
                    .map_err(|e| Error::config("obstacles", e.to_string()))
            }
        }
    }

    pub fn budget(&self, system: &SystemSpec<f64>) -> Result<LipschitzBudget<f64>> {
        let alpha = self.policy.alpha;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config(
                "policy.alpha",
                format!("α = {alpha} must lie in the open interval (0, 1)"),
            ));
        }
        let budget = match self.policy.lipschitz {
            Some(l) => LipschitzBudget::uniform(alpha, l, system.horizon()),
            None => LipschitzBudget::derive(alpha, system)
                .map_err(|e| Error::config("policy", e.to_string()))?,
        };
        budget.check(system).map_err(|e| match e {
            Error::Config { message, .. } => Error::config("policy.lipschitz", message),
            other => Error::config("policy.lipschitz", other.to_string()),
        })?;
        Ok(budget)
    }

    /// Validates every section and builds the problem and the initial policies.
    pub fn assemble(&self) -> Result<Assembly> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::config("name", "use letters, digits, '-' or '_'"));
        }
        self.train.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("train.{field}"), message),
            other => other,
        })?;
        if self.eval.samples == 0 || self.eval.samples > crate::metrics::MAX_W2_SAMPLES {
            return Err(Error::config(
                "eval.samples",
                format!("must lie in 1..={}", crate::metrics::MAX_W2_SAMPLES),
            ));
        }
        let system = self.system.build()?;
        let source = self.source.build("source", &self.base_dir)?;
        let target = self.target.build("target", &self.base_dir)?;
        if let Err(e) = target.as_target() {
            return Err(Error::config("target", e.to_string()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("lambda", "λ must be positive"));
        }
        let obstacles = self.obstacle_field()?;
        let budget = self.budget(&system)?;
        let problem = Problem::new(system, source, target, obstacles, self.lambda).map_err(
            |e| match e {
                Error::Config { .. } => e,
                other => Error::config("source/target", other.to_string()),
            },
        )?;
        let stack = PolicyStack::init(&self.policy.widths, budget, &problem.system, self.train.seed)
            .map_err(|e| match e {
                Error::Config { message, .. } => Error::config("policy.widths", message),
                other => Error::config("policy.widths", other.to_string()),
            })?;
        Ok(Assembly { problem, stack })
    }

    /// The linear-Gaussian benchmark problem; errors explain why a config has none.
    pub fn steering_problem(&self) -> Result<SteeringProblem> {
        let system = self.system.build()?;
        let Some(a) = system.a_matrix() else {
            return Err(Error::config(
                "system",
                format!(
                    "the affine benchmark needs linear dynamics; `{}` is nonlinear",
                    system.name()
                ),
            ));
        };
        let b = system.input_matrix(0)?.clone();
        let gaussian = |d: &DistributionConfig, field: &str| -> Result<GaussianSpec<f64>> {
            match d.build(field, &self.base_dir)? {
                Distribution::Gaussian(g) => Ok(g),
                _ => Err(Error::config(
                    field,
                    "the affine benchmark needs Gaussian source and target distributions",
                )),
            }
        };
        let source = gaussian(&self.source, "source")?;
        let target = gaussian(&self.target, "target")?;
        SteeringProblem::new(a, b, source, target, self.lambda, system.horizon())
    }
}
