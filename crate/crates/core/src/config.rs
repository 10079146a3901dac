//! Experiment configuration: benchmark selection, strategy, safety
//! threshold, model hyperparameters and run bookkeeping. Serializes to TOML
//! for the CLI (`docs in README`); every field is plain data so configs
//! round-trip losslessly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::HyperBounds;
use crate::learner::{Criterion, SafetyBudget};
use crate::trajectory::NxConfig;

/// Trajectory-selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sal,
    RandomSafe,
    Fisher,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Sal => "sal",
            Strategy::RandomSafe => "random_safe",
            Strategy::Fisher => "fisher",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sal" => Ok(Strategy::Sal),
            "random_safe" => Ok(Strategy::RandomSafe),
            "fisher" => Ok(Strategy::Fisher),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected sal, random_safe or fisher)"
            ))),
        }
    }
}

/// One GP's hyperparameters: signal variance, per-dimension inverse squared
/// lengthscales, observation-noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSpec {
    pub signal_variance: f64,
    pub inv_lengthscales_sq: Vec<f64>,
    pub noise_variance: f64,
}

/// Fixed hyperparameters, or marginal-likelihood training on a cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HyperMode {
    Fixed {
        f: HyperSpec,
        g: HyperSpec,
    },
    Trained {
        bounds_f: HyperBounds,
        bounds_g: HyperBounds,
        init_f: HyperSpec,
        init_g: HyperSpec,
        /// Retrain every `cadence` iterations (1 = every iteration,
        /// 10 = every tenth).
        cadence: usize,
        restarts: usize,
    },
}

/// Per-iteration metric evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Number of seeded uniform embedded points in the RMSE grid.
    pub rmse_grid: usize,
    /// Number of seeded random trajectories for the coverage metric.
    pub coverage_trajectories: usize,
    /// Evaluate metrics every `every` exploration iterations (0 = never).
    pub every: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            rmse_grid: 1000,
            coverage_trajectories: 1000,
            every: 1,
        }
    }
}

/// Full description of an experiment run (or a seed sweep over one setup).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Benchmark id: "exp1" or "exp2".
    pub benchmark: String,
    pub strategy: Strategy,
    pub criterion: Criterion,
    /// Per-trajectory unsafe-probability threshold. Exactly one of `alpha`
    /// and `budget` must be set; a budget resolves to `alpha = delta / N`.
    pub alpha: Option<f64>,
    pub budget: Option<SafetyBudget>,
    /// Number of planned trajectories N.
    pub n_iterations: usize,
    /// Number of initial safe trajectories n0.
    pub n_init: usize,
    pub nx: NxConfig,
    pub hypers: HyperMode,
    /// Seeds for repeated runs; `run` executes one log per seed.
    pub seeds: Vec<u64>,
    /// Monte-Carlo samples for the safety constraint during acquisition.
    pub n_mc: usize,
    /// Monte-Carlo samples for final reporting.
    pub n_mc_report: usize,
    /// Multistart count for the acquisition optimizer.
    pub n_restarts: usize,
    /// Evaluation budget per start for the local pattern search.
    pub local_steps: usize,
    /// Half-width of the initialization box, as a fraction of the domain
    /// extent, centered on the expert-provided safe point.
    pub init_box_fraction: f64,
    /// After initial training, refit on actively gathered data only.
    pub drop_initial_data: bool,
    /// Disable observation noise in the benchmark system.
    pub noiseless: bool,
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    /// Baseline configuration for a benchmark with fixed hyperparameters.
    pub fn for_benchmark(benchmark: &str) -> Result<Self> {
        let (nx, f, g) = match benchmark {
            "exp1" => (
                NxConfig::contiguous(2, 1, 0, 5)?,
                HyperSpec {
                    signal_variance: 1.0,
                    inv_lengthscales_sq: vec![2.25; 2],
                    noise_variance: 0.25,
                },
                HyperSpec {
                    signal_variance: 4.0,
                    inv_lengthscales_sq: vec![2.25; 2],
                    noise_variance: 1.0,
                },
            ),
            "exp2" => (
                NxConfig::contiguous(2, 2, 0, 5)?,
                HyperSpec {
                    signal_variance: 1.0,
                    inv_lengthscales_sq: vec![2.25; 4],
                    noise_variance: 0.25,
                },
                HyperSpec {
                    signal_variance: 4.0,
                    inv_lengthscales_sq: vec![2.25; 4],
                    noise_variance: 0.00025,
                },
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown benchmark '{other}' (expected exp1 or exp2)"
                )))
            }
        };
        Ok(ExperimentConfig {
            benchmark: benchmark.to_string(),
            strategy: Strategy::Sal,
            criterion: Criterion::Determinant,
            alpha: Some(0.2),
            budget: None,
            n_iterations: 50,
            n_init: 10,
            nx,
            hypers: HyperMode::Fixed { f, g },
            seeds: vec![1, 2, 3, 4, 5],
            n_mc: 1000,
            n_mc_report: 10_000,
            n_restarts: 20,
            local_steps: 50,
            init_box_fraction: 0.05,
            drop_initial_data: false,
            noiseless: false,
            metrics: MetricsConfig::default(),
        })
    }

    /// The safety threshold actually used: explicit `alpha`, or the
    /// budget rule `alpha = delta / N`.
    pub fn resolve_alpha(&self) -> Result<f64> {
        match (&self.alpha, &self.budget) {
            (Some(a), None) => Ok(*a),
            (None, Some(b)) => Ok(crate::learner::alpha_for_budget(b)),
            (Some(_), Some(_)) => Err(Error::Config("set either alpha or budget, not both".into())),
            (None, None) => Err(Error::Config("one of alpha or budget is required".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.nx.validate()?;
        let alpha = self.resolve_alpha()?;
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0, 1], got {alpha}"
            )));
        }
        if self.n_init == 0 {
            return Err(Error::Config("n_init must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.n_mc == 0 || self.n_mc_report == 0 {
            return Err(Error::Config(
                "Monte-Carlo sample counts must be positive".into(),
            ));
        }
        if self.n_restarts == 0 || self.local_steps == 0 {
            return Err(Error::Config(
                "n_restarts and local_steps must be positive".into(),
            ));
        }
        if !(self.init_box_fraction > 0.0 && self.init_box_fraction <= 0.5) {
            return Err(Error::Config(
                "init_box_fraction must be in (0, 0.5]".into(),
            ));
        }
        let d = self.nx.embedded_dim();
        match &self.hypers {
            HyperMode::Fixed { f, g } => {
                for (name, h) in [("f", f), ("g", g)] {
                    if h.inv_lengthscales_sq.len() != d {
                        return Err(Error::Config(format!(
                            "{name}-hyperparameters list {} lengthscales for embedded dim {d}",
                            h.inv_lengthscales_sq.len()
                        )));
                    }
                    if h.signal_variance <= 0.0 || h.noise_variance <= 0.0 {
                        return Err(Error::Config(format!(
                            "{name}-hyperparameters must be strictly positive"
                        )));
                    }
                }
            }
            HyperMode::Trained {
                bounds_f,
                bounds_g,
                cadence,
                ..
            } => {
                bounds_f
                    .validate()
                    .map_err(|e| Error::Config(e.to_string()))?;
                bounds_g
                    .validate()
                    .map_err(|e| Error::Config(e.to_string()))?;
                if bounds_f.input_dim() != d || bounds_g.input_dim() != d {
                    return Err(Error::Config(format!(
                        "hyperparameter bounds must cover the embedded dim {d}"
                    )));
                }
                if *cadence == 0 {
                    return Err(Error::Config("training cadence must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
