//! JSON configurations of the subcommands that are not experiment specs.

use nalgebra::DVector;
use pdmplab::event_engine::EventStrategy;
use pdmplab::experiments::{ExperimentSpec, RefreshSetting};
use pdmplab::flows::FlowConfig;
use pdmplab::potentials::{PotentialConfig, PotentialRef};
use pdmplab::samplers::SamplerKind;
use serde::{Deserialize, Serialize};

use crate::CliError;

fn bad(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn build_potential(cfg: &PotentialConfig) -> Result<PotentialRef, CliError> {
    cfg.build().map_err(|e| bad("potential", e))
}

fn vector(field: &str, v: &Option<Vec<f64>>, dim: usize) -> Result<Option<DVector<f64>>, CliError> {
    match v {
        None => Ok(None),
        Some(v) if v.len() != dim => Err(bad(field, format!("has length {}, potential has dimension {dim}", v.len()))),
        Some(v) => Ok(Some(DVector::from_column_slice(v))),
    }
}

fn default_horizon() -> f64 {
    10.0
}

fn default_gamma() -> f64 {
    0.1
}

/// A single sampler run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub sampler: SamplerKind,
    pub potential: PotentialConfig,
    pub eps: f64,
    #[serde(default)]
    pub refresh: RefreshSetting,
    /// Stop on entering `L_gamma` when set.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub v0: Option<Vec<f64>>,
    #[serde(default)]
    pub engine: Option<EventStrategy>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
}

fn default_max_events() -> usize {
    100_000
}

pub struct SimulateInputs {
    pub potential: PotentialRef,
    pub x0: DVector<f64>,
    pub v0: Option<DVector<f64>>,
}

impl SimulateConfig {
    pub fn resolve(&self) -> Result<SimulateInputs, CliError> {
        let potential = build_potential(&self.potential)?;
        let dim = potential.dim();
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(bad("eps", format!("must be positive, got {}", self.eps)));
        }
        if !(self.horizon > 0.0) {
            return Err(bad("horizon", format!("must be positive, got {}", self.horizon)));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) {
                return Err(bad("gamma", format!("must be positive, got {g}")));
            }
        }
        if let RefreshSetting::Fixed { rho } = self.refresh {
            if !(rho >= 0.0) {
                return Err(bad("refresh.rho", format!("must be >= 0, got {rho}")));
            }
        }
        if let Some(engine) = &self.engine {
            engine.validate().map_err(|e| bad("engine", e))?;
        }
        let x0 = match vector("x0", &self.x0, dim)? {
            Some(x) => x,
            None => pdmplab::experiments::start_on_ray(potential.as_ref(), &pdmplab::linalg::basis(dim, 0), 2.0)
                .map_err(|e| bad("x0", e))?,
        };
        let v0 = vector("v0", &self.v0, dim)?;
        Ok(SimulateInputs { potential, x0, v0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    BpsSnapping,
    BpsRefresh,
    BpsHighRefresh,
    Rwm,
    ZigZag,
}

/// A single limit-flow integration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRunConfig {
    pub flow: FlowKind,
    pub potential: PotentialConfig,
    pub x0: Vec<f64>,
    /// Start velocity; tangent for `bps_snapping`.
    #[serde(default)]
    pub v0: Option<Vec<f64>>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Refresh rate of the shared schedule for `bps_refresh`.
    #[serde(default)]
    pub refresh_rate: f64,
    /// Proposal scale for `rwm`.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_step: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

pub struct FlowInputs {
    pub potential: PotentialRef,
    pub x0: DVector<f64>,
    pub v0: Option<DVector<f64>>,
}

impl FlowRunConfig {
    pub fn flow_config(&self) -> Result<FlowConfig, CliError> {
        let d = FlowConfig::default();
        let cfg = FlowConfig { tol: self.tol.unwrap_or(d.tol), max_step: self.max_step.unwrap_or(d.max_step), horizon: self.horizon };
        cfg.validate().map_err(|e| bad("tol/max_step/horizon", e))?;
        Ok(cfg)
    }

    pub fn resolve(&self) -> Result<FlowInputs, CliError> {
        let p = build_potential(&self.potential)?;
        let dim = p.dim();
        let x0 = vector("x0", &Some(self.x0.clone()), dim)?.expect("present");
        let v0 = vector("v0", &self.v0, dim)?;
        if !(self.gamma > 0.0) {
            return Err(bad("gamma", format!("must be positive, got {}", self.gamma)));
        }
        if !(self.refresh_rate >= 0.0) {
            return Err(bad("refresh_rate", format!("must be >= 0, got {}", self.refresh_rate)));
        }
        match self.flow {
            FlowKind::BpsSnapping | FlowKind::BpsRefresh if v0.is_none() => {
                return Err(bad("v0", "required for this flow"));
            }
            FlowKind::Rwm if !self.sigma.is_some_and(|s| s > 0.0) => {
                return Err(bad("sigma", "a positive proposal scale is required for rwm"));
            }
            _ => {}
        }
        Ok(FlowInputs { potential: p, x0, v0 })
    }
}

fn default_rho_grid() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(k as f64 / 4.0)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceConfig {
    pub experiment: ExperimentSpec,
    #[serde(default = "default_rho_grid")]
    pub rho_grid: Vec<f64>,
}

fn default_points() -> usize {
    20
}

fn default_drift_replicas() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub sampler: SamplerKind,
    pub potential: PotentialConfig,
    pub eps: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_drift_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DriftConfig {
    pub fn validate(&self) -> Result<PotentialRef, CliError> {
        if !matches!(self.sampler, SamplerKind::Fec | SamplerKind::Coordinate) {
            return Err(bad("sampler", "drift diagnostics are defined for fec and coordinate"));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(bad("eps", format!("must lie in (0, 1), got {}", self.eps)));
        }
        if !(self.gamma > 0.0) {
            return Err(bad("gamma", format!("must be positive, got {}", self.gamma)));
        }
        if self.points == 0 {
            return Err(bad("points", "must be at least 1"));
        }
        if self.replicas < 2 {
            return Err(bad("replicas", "must be at least 2"));
        }
        build_potential(&self.potential)
    }
}
