//! Replicated studies: jump-count scaling in `eps`, trajectory gaps to the
//! limit flows, refresh-rate balance, drift diagnostics for jump chains, and
//! the sign-flip inequality on piecewise-linear rate paths.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_engine::{CostCounters, EventStrategy, RaySpec, DEFAULT_HORIZON};
use crate::flows::{flow_bps_with_refresh, flow_zigzag_procedure, FlowConfig, FlowTrajectory};
use crate::linalg::{basis, quad_form};
use crate::potentials::{normal, sample_band_points, BandSpec, Potential, PotentialConfig, PotentialRef};
use crate::rng::{exp1, normal_vector, stream};
use crate::samplers::{fec_velocity, run_until_hit, select_coordinate, simulate, EventKind, EventRecord, RefreshPolicy, RunOptions, Sampler, SamplerKind};

/// Velocity refreshment across an `eps` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum RefreshSetting {
    #[default]
    None,
    Fixed { rho: f64 },
    /// `rho = eps^-exponent`; the default exponent is 1/4.
    Tuned {
        #[serde(default = "default_tuned_exponent")]
        exponent: f64,
    },
}

fn default_tuned_exponent() -> f64 {
    0.25
}

impl RefreshSetting {
    pub fn rate(&self, eps: f64) -> Option<f64> {
        match *self {
            RefreshSetting::None => None,
            RefreshSetting::Fixed { rho } => Some(rho),
            RefreshSetting::Tuned { exponent } => Some(eps.powf(-exponent)),
        }
    }

    pub fn policy(&self, eps: f64) -> RefreshPolicy {
        self.rate(eps).map_or(RefreshPolicy::None, RefreshPolicy::Rate)
    }
}

fn default_start_level() -> f64 {
    2.0
}

fn default_horizon() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sampler: SamplerKind,
    pub potential: PotentialConfig,
    pub eps_grid: Vec<f64>,
    #[serde(default)]
    pub refresh: RefreshSetting,
    pub gamma: f64,
    pub replicas: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    /// Explicit start; by default `x* + r e_1` with `U = U* + start_level`.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default = "default_start_level")]
    pub start_level: f64,
    /// Event simulation; exact inversion for quadratic targets by default.
    #[serde(default)]
    pub engine: Option<EventStrategy>,
    /// Count jumps only up to the first refresh, the horizon or the band
    /// exit, whichever comes first, instead of up to the level-set hit.
    #[serde(default)]
    pub band_localized: bool,
}

impl ExperimentSpec {
    /// Checks every field; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Err(Error::Configuration(format!("{name}: {msg}")));
        if self.eps_grid.is_empty() {
            return field("eps_grid", "must not be empty".into());
        }
        if self.eps_grid.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return field("eps_grid", "entries must be positive".into());
        }
        if self.eps_grid.windows(2).any(|w| w[1] >= w[0]) {
            return field("eps_grid", "must be strictly decreasing".into());
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return field("gamma", format!("must be positive, got {}", self.gamma));
        }
        if self.replicas == 0 {
            return field("replicas", "must be at least 1".into());
        }
        if !(self.horizon > 0.0) {
            return field("horizon", format!("must be positive, got {}", self.horizon));
        }
        if !(self.start_level > 0.0) {
            return field("start_level", "must be positive".into());
        }
        match self.refresh {
            RefreshSetting::Fixed { rho } if !(rho >= 0.0) || !rho.is_finite() => {
                return field("refresh.rho", format!("must be >= 0, got {rho}"));
            }
            RefreshSetting::Tuned { exponent } if !exponent.is_finite() => {
                return field("refresh.exponent", "must be finite".into());
            }
            _ => {}
        }
        let p = self.potential.build().map_err(|e| Error::Configuration(format!("potential: {e}")))?;
        if let Some(start) = &self.start {
            if start.len() != p.dim() {
                return field("start", format!("has length {}, potential has dimension {}", start.len(), p.dim()));
            }
        }
        if let Some(engine) = &self.engine {
            engine.validate().map_err(|e| Error::Configuration(format!("engine: {e}")))?;
            if *engine == EventStrategy::Exact && !p.is_quadratic() {
                return field("engine", "exact inversion needs a quadratic potential".into());
            }
        }
        Ok(())
    }

    pub fn band(&self) -> Result<BandSpec> {
        BandSpec::new(self.gamma)
    }

    pub fn strategy(&self, p: &dyn Potential) -> EventStrategy {
        self.engine.unwrap_or_else(|| EventStrategy::auto(p))
    }

    pub fn start_point(&self, p: &dyn Potential) -> Result<DVector<f64>> {
        match &self.start {
            Some(s) => Ok(DVector::from_column_slice(s)),
            None => start_on_ray(p, &basis(p.dim(), 0), self.start_level),
        }
    }
}

/// `x* + r d` with `U = U* + level`, found by bisection on `r`.
pub fn start_on_ray(p: &dyn Potential, direction: &DVector<f64>, level: f64) -> Result<DVector<f64>> {
    let x_star = p.minimiser();
    let target = p.min_value() + level;
    let at = |r: f64| p.value(&(&x_star + direction * r));
    let mut hi = 1.0;
    while at(hi) < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Domain("level is not reached along the start direction".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(&x_star + direction * hi)
}

/// One replica at one `eps`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub epsilon: f64,
    pub replica: usize,
    pub jumps_bounce: u64,
    pub jumps_refresh: u64,
    pub jumps_flip: u64,
    pub deriv_evals: u64,
    pub hit: bool,
    pub hit_time: Option<f64>,
    #[serde(skip)]
    pub coordinate_events: Vec<u64>,
}

impl RunRow {
    pub fn total_jumps(&self) -> u64 {
        self.jumps_bounce + self.jumps_refresh + self.jumps_flip
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsSummary {
    pub epsilon: f64,
    pub mean_jumps: f64,
    pub se: f64,
    pub mean_bounce: f64,
    pub mean_refresh: f64,
    pub mean_flip: f64,
    pub mean_deriv_evals: f64,
    pub hit_fraction: f64,
    /// Whether this point entered the slope fit.
    pub included: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingResult {
    pub rows: Vec<RunRow>,
    pub summary: Vec<EpsSummary>,
    pub slope: Option<SlopeFit>,
}

pub const MIN_HIT_FRACTION: f64 = 0.95;

pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Weighted least squares of `log y` on `log x` with weights `(y / se)^2`
/// (inverse delta-method variances of `log y`), and a 95% normal interval.
pub fn fit_log_log_slope(points: &[(f64, f64, f64)]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|(x, y, se)| *x > 0.0 && *y > 0.0 && se.is_finite())
        .map(|&(x, y, se)| {
            let w = if se > 0.0 { (y / se).powi(2) } else { 1e12 };
            (x.ln(), y.ln(), w)
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let xbar = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let ybar = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - xbar).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - xbar) * (p.1 - ybar)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let se = (1.0 / sxx).sqrt();
    Some(SlopeFit { slope, intercept: ybar - slope * xbar, se, ci_lo: slope - 1.96 * se, ci_hi: slope + 1.96 * se })
}

fn replica_run(spec: &ExperimentSpec, p: &PotentialRef, band: &BandSpec, eps_index: usize, replica: usize) -> Result<RunRow> {
    let eps = spec.eps_grid[eps_index];
    let mut rng = stream(spec.seed, &[eps_index as u64, replica as u64]);
    let sampler = Sampler::new(spec.sampler, p.clone(), eps, spec.strategy(p.as_ref()))?;
    let x0 = spec.start_point(p.as_ref())?;
    let (refresh, horizon) = if spec.band_localized {
        // jumps before the first refresh: no refresh can happen before it
        let first = spec.refresh.rate(eps).filter(|r| *r > 0.0).map_or(f64::INFINITY, |r| exp1(&mut rng) / r);
        (RefreshPolicy::None, spec.horizon.min(first))
    } else {
        (spec.refresh.policy(eps), spec.horizon)
    };
    let opts = RunOptions { horizon, ..Default::default() };
    let run = run_until_hit(&sampler, band, x0, None, refresh, &opts, &mut rng)?;
    let counters: CostCounters = if spec.band_localized {
        run.counters_at_exit.unwrap_or(run.counters)
    } else {
        run.counters
    };
    let flips = if spec.sampler == SamplerKind::ZigZag { counters.accepted_jumps } else { 0 };
    Ok(RunRow {
        epsilon: eps,
        replica,
        jumps_bounce: counters.accepted_jumps - flips,
        jumps_refresh: counters.refresh_jumps,
        jumps_flip: flips,
        deriv_evals: counters.deriv_evals,
        hit: run.hit,
        hit_time: run.hit_time,
        coordinate_events: run.coordinate_events,
    })
}

/// Jump counts to `L_gamma` across the `eps` grid with a weighted log-log fit.
///
/// Only `eps` values whose hit fraction reaches [`MIN_HIT_FRACTION`] enter
/// the fit; in band-localized mode every point is used.
pub fn run_scaling_study(spec: &ExperimentSpec) -> Result<ScalingResult> {
    spec.validate()?;
    let p = spec.potential.build()?;
    let band = spec.band()?;
    let jobs: Vec<(usize, usize)> =
        (0..spec.eps_grid.len()).flat_map(|i| (0..spec.replicas).map(move |j| (i, j))).collect();
    let rows: Vec<RunRow> = jobs
        .par_iter()
        .map(|&(i, j)| replica_run(spec, &p, &band, i, j))
        .collect::<Result<Vec<_>>>()?;
    let mut summary = Vec::new();
    for (i, &eps) in spec.eps_grid.iter().enumerate() {
        let block = &rows[i * spec.replicas..(i + 1) * spec.replicas];
        let used: Vec<&RunRow> = block.iter().filter(|r| spec.band_localized || r.hit).collect();
        let hit_fraction = block.iter().filter(|r| r.hit).count() as f64 / block.len() as f64;
        let col = |f: &dyn Fn(&RunRow) -> u64| used.iter().map(|r| f(r) as f64).collect::<Vec<_>>();
        let (mean, se) = mean_se(&col(&|r| r.total_jumps()));
        let included = (spec.band_localized || hit_fraction >= MIN_HIT_FRACTION) && !used.is_empty();
        if !included {
            log::warn!("eps = {eps:e}: hit fraction {hit_fraction:.3} below {MIN_HIT_FRACTION}; excluded from the fit");
        }
        summary.push(EpsSummary {
            epsilon: eps,
            mean_jumps: mean,
            se,
            mean_bounce: mean_se(&col(&|r| r.jumps_bounce)).0,
            mean_refresh: mean_se(&col(&|r| r.jumps_refresh)).0,
            mean_flip: mean_se(&col(&|r| r.jumps_flip)).0,
            mean_deriv_evals: mean_se(&col(&|r| r.deriv_evals)).0,
            hit_fraction,
            included,
        });
    }
    let pts: Vec<(f64, f64, f64)> =
        summary.iter().filter(|s| s.included).map(|s| (s.epsilon, s.mean_jumps, s.se)).collect();
    let slope = fit_log_log_slope(&pts);
    Ok(ScalingResult { rows, summary, slope })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub epsilon: f64,
    pub replica: usize,
    pub sup_gap: f64,
    /// End of the comparison window `min(T, tau_flow, tau_sampler)`.
    pub window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapResult {
    pub rows: Vec<GapRow>,
    /// `(eps, median sup-gap)` in grid order.
    pub medians: Vec<(f64, f64)>,
}

/// Refresh schedule on `[0, horizon]` at rate `rho` with standard normal draws.
pub fn draw_schedule<R: Rng + ?Sized>(rho: f64, horizon: f64, dim: usize, rng: &mut R) -> Vec<(f64, DVector<f64>)> {
    let mut out = Vec::new();
    if !(rho > 0.0) {
        return out;
    }
    let mut t = exp1(rng) / rho;
    while t <= horizon {
        out.push((t, normal_vector(dim, rng)));
        t += exp1(rng) / rho;
    }
    out
}

/// Sup-distance between a sampler path and a trajectory on the common grid
/// `k * stride <= window`.
pub fn sup_gap(samples: &[(f64, DVector<f64>)], flow: &FlowTrajectory, window: f64) -> f64 {
    samples
        .iter()
        .filter(|(t, _)| *t <= window)
        .filter_map(|(t, x)| flow.position_at(*t).map(|y| (x - y).norm()))
        .fold(0.0, f64::max)
}

/// Start velocity, refresh schedule and BPS flow of one replica.
struct SharedReplica {
    v0: DVector<f64>,
    schedule: Vec<(f64, DVector<f64>)>,
    flow: Option<FlowTrajectory>,
}

/// Sup-gaps between sampler runs and their limit flow, with per-`eps` medians.
///
/// BPS runs use a refresh schedule shared with the flow, drawn per replica
/// and reused across `eps`; Zig-Zag runs compare against the procedure flow.
/// The horizon `T = spec.horizon` and the grid stride is `T / 1000`.
pub fn run_trajectory_gap(spec: &ExperimentSpec) -> Result<GapResult> {
    spec.validate()?;
    let p = spec.potential.build()?;
    let band = spec.band()?;
    let x0 = spec.start_point(p.as_ref())?;
    let horizon = spec.horizon;
    let stride = horizon / 1000.0;
    let cfg = FlowConfig { tol: 1e-10, max_step: stride.max(1e-3), horizon };
    let rho = match (spec.sampler, spec.refresh) {
        (SamplerKind::Bps, RefreshSetting::Fixed { rho }) => rho,
        (SamplerKind::Bps, RefreshSetting::None) | (SamplerKind::ZigZag, RefreshSetting::None) => 0.0,
        (SamplerKind::Bps | SamplerKind::ZigZag, _) => {
            return Err(Error::Configuration(
                "refresh: the shared schedule needs a fixed rate that does not depend on eps".into(),
            ))
        }
        (other, _) => {
            return Err(Error::Configuration(format!("sampler: no limit flow for {}", other.name())));
        }
    };
    let dim = p.dim();
    let zz_flow = if spec.sampler == SamplerKind::ZigZag {
        Some(flow_zigzag_procedure(&x0, p.as_ref(), &band, &cfg)?)
    } else {
        None
    };
    // per replica: start velocity, schedule and flow, shared across eps
    let shared: Vec<SharedReplica> = (0..spec.replicas)
        .into_par_iter()
        .map(|j| -> Result<_> {
            let mut rng = stream(spec.seed, &[u64::MAX, j as u64]);
            let probe = Sampler::new(spec.sampler, p.clone(), 1.0, spec.strategy(p.as_ref()))?;
            let v0 = probe.draw_velocity(&mut rng);
            let schedule = draw_schedule(rho, horizon, dim, &mut rng);
            let flow = if spec.sampler == SamplerKind::Bps {
                Some(flow_bps_with_refresh(&x0, &v0, &schedule, p.as_ref(), &band, horizon, &cfg)?)
            } else {
                None
            };
            Ok(SharedReplica { v0, schedule, flow })
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> =
        (0..spec.eps_grid.len()).flat_map(|i| (0..spec.replicas).map(move |j| (i, j))).collect();
    let rows: Vec<GapRow> = jobs
        .par_iter()
        .map(|&(i, j)| -> Result<GapRow> {
            let eps = spec.eps_grid[i];
            let SharedReplica { v0, schedule, flow } = &shared[j];
            let flow = flow.as_ref().or(zz_flow.as_ref()).expect("a flow exists for every sampler kind here");
            let mut rng = stream(spec.seed, &[i as u64, j as u64]);
            let sampler = Sampler::new(spec.sampler, p.clone(), eps, spec.strategy(p.as_ref()))?;
            let opts = RunOptions { horizon, sample_stride: Some(stride), ..Default::default() };
            let refresh = RefreshPolicy::Schedule(schedule.clone());
            let run = simulate(&sampler, Some(&band), x0.clone(), Some(v0.clone()), refresh, &opts, &mut rng)?;
            let window = horizon.min(run.hit_time.unwrap_or(horizon)).min(flow.end_time());
            Ok(GapRow { epsilon: eps, replica: j, sup_gap: sup_gap(&run.samples, flow, window), window })
        })
        .collect::<Result<_>>()?;
    let medians = spec
        .eps_grid
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let gaps: Vec<f64> = rows[i * spec.replicas..(i + 1) * spec.replicas].iter().map(|r| r.sup_gap).collect();
            (eps, median(&gaps))
        })
        .collect();
    Ok(GapResult { rows, medians })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub rho: f64,
    pub mean_bounces: f64,
    pub mean_refreshes: f64,
    pub mean_total: f64,
    pub se_total: f64,
    pub bounces_per_refresh: f64,
    pub mean_hit_time: f64,
    /// `(refreshes + bounces) / hit time`, pooled over replicas.
    pub jumps_per_unit_time: f64,
    pub hit_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceResult {
    pub epsilon: f64,
    pub rows: Vec<BalanceRow>,
    /// Index of the smallest mean total jump count to `L_gamma`.
    pub argmin: usize,
}

/// BPS cost to reach `L_gamma` over a grid of refresh rates at `eps_grid[0]`.
pub fn run_refresh_balance(spec: &ExperimentSpec, rho_grid: &[f64]) -> Result<BalanceResult> {
    spec.validate()?;
    if spec.sampler != SamplerKind::Bps {
        return Err(Error::Configuration("sampler: refresh balance is defined for bps only".into()));
    }
    if rho_grid.is_empty() || rho_grid.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Configuration("rho_grid: needs positive rates".into()));
    }
    let eps = spec.eps_grid[0];
    let p = spec.potential.build()?;
    let band = spec.band()?;
    let x0 = spec.start_point(p.as_ref())?;
    let mut rows = Vec::new();
    for (k, &rho) in rho_grid.iter().enumerate() {
        let runs: Vec<(u64, u64, Option<f64>)> = (0..spec.replicas)
            .into_par_iter()
            .map(|j| -> Result<_> {
                let mut rng = stream(spec.seed, &[k as u64, j as u64]);
                let sampler = Sampler::new(SamplerKind::Bps, p.clone(), eps, spec.strategy(p.as_ref()))?;
                let opts = RunOptions { horizon: spec.horizon, ..Default::default() };
                let r = run_until_hit(&sampler, &band, x0.clone(), None, RefreshPolicy::Rate(rho), &opts, &mut rng)?;
                Ok((r.counters.accepted_jumps, r.counters.refresh_jumps, r.hit_time))
            })
            .collect::<Result<_>>()?;
        let hits: Vec<_> = runs.iter().filter(|r| r.2.is_some()).collect();
        let b: Vec<f64> = hits.iter().map(|r| r.0 as f64).collect();
        let f: Vec<f64> = hits.iter().map(|r| r.1 as f64).collect();
        let tot: Vec<f64> = hits.iter().map(|r| (r.0 + r.1) as f64).collect();
        let time: f64 = hits.iter().map(|r| r.2.unwrap()).sum();
        let (mean_total, se_total) = mean_se(&tot);
        let mean_bounces = mean_se(&b).0;
        let mean_refreshes = mean_se(&f).0;
        rows.push(BalanceRow {
            rho,
            mean_bounces,
            mean_refreshes,
            mean_total,
            se_total,
            bounces_per_refresh: mean_bounces / mean_refreshes,
            mean_hit_time: time / hits.len() as f64,
            jumps_per_unit_time: tot.iter().sum::<f64>() / time,
            hit_fraction: hits.len() as f64 / runs.len() as f64,
        });
    }
    let argmin = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.mean_total.is_finite())
        .min_by(|a, b| a.1.mean_total.total_cmp(&b.1.mean_total))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Sampling("no refresh rate produced a hit".into()))?;
    Ok(BalanceResult { epsilon: eps, rows, argmin })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftPoint {
    pub x: Vec<f64>,
    /// Monte Carlo estimate of `(P V(x) - V(x)) / V(x)` with `V = exp(U)`.
    pub relative_drift: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftResult {
    pub points: Vec<DriftPoint>,
    /// `-max_x relative_drift`; positive when every point contracts.
    pub beta_hat: f64,
    /// Frequency of one-step increases of `U` above `gamma / 2`.
    pub tail_frequency: f64,
    pub tail_se: f64,
    /// `2 exp(-gamma / (2 eps))`.
    pub tail_bound: f64,
}

/// Velocity law `Q_x` of the FEC or Coordinate jump chain.
pub fn jump_chain_velocity<R: Rng + ?Sized>(kind: SamplerKind, p: &dyn Potential, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let singular = || Error::Singularity("gradient vanishes".into());
    match kind {
        SamplerKind::Fec => Ok(fec_velocity(&normal(p, x).ok_or_else(singular)?, rng)),
        SamplerKind::Coordinate => {
            let g = p.grad(x);
            let m = select_coordinate(&g, rng).ok_or_else(singular)?;
            Ok(basis(p.dim(), m) * -g[m].signum())
        }
        other => Err(Error::Configuration(format!("sampler: no jump-chain kernel for {}", other.name()))),
    }
}

/// Drift of `V = exp(U)` under one step of the FEC or Coordinate jump
/// chain at `points` band locations, `replicas` draws each.
pub fn run_drift_diagnostic(
    kind: SamplerKind,
    p: &PotentialRef,
    band: &BandSpec,
    eps: f64,
    points: usize,
    replicas: usize,
    seed: u64,
) -> Result<DriftResult> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("eps must lie in (0, 1), got {eps}")));
    }
    if replicas < 2 || points == 0 {
        return Err(Error::Domain("need at least one point and two replicas".into()));
    }
    let mut rng = stream(seed, &[u64::MAX]);
    let xs = sample_band_points(p.as_ref(), band, points, &mut rng)?;
    let strategy = EventStrategy::auto(p.as_ref());
    let per_point: Vec<(DriftPoint, u64)> = xs
        .par_iter()
        .enumerate()
        .map(|(k, x)| -> Result<_> {
            let mut rng = stream(seed, &[k as u64]);
            let u0 = p.value(x);
            let mut ratios = Vec::with_capacity(replicas);
            let mut tail = 0u64;
            for _ in 0..replicas {
                let v = jump_chain_velocity(kind, p.as_ref(), x, &mut rng)?;
                let ray = RaySpec::new(p.as_ref(), x.clone(), v.clone(), eps)?;
                let affine = if strategy == EventStrategy::Exact { Some(ray.affine_coefficients()?) } else { None };
                let mut c = CostCounters::default();
                let t = strategy
                    .propose(&ray, affine, eps, v.norm(), DEFAULT_HORIZON, &mut rng, &mut c)?
                    .ok_or_else(|| Error::Sampling("no event before the guard horizon".into()))?;
                let du = p.value(&ray.position(t)) - u0;
                if du > band.gamma / 2.0 {
                    tail += 1;
                }
                ratios.push(du.exp());
            }
            let (m, se) = mean_se(&ratios);
            Ok((DriftPoint { x: x.iter().copied().collect(), relative_drift: m - 1.0, se }, tail))
        })
        .collect::<Result<_>>()?;
    let total = (points * replicas) as f64;
    let tails: u64 = per_point.iter().map(|p| p.1).sum();
    let freq = tails as f64 / total;
    let points: Vec<DriftPoint> = per_point.into_iter().map(|p| p.0).collect();
    let worst = points.iter().map(|p| p.relative_drift).fold(f64::NEG_INFINITY, f64::max);
    Ok(DriftResult {
        points,
        beta_hat: -worst,
        tail_frequency: freq,
        tail_se: (freq.max(1.0 / total) * (1.0 - freq) / total).sqrt(),
        tail_bound: 2.0 * (-band.gamma / (2.0 * eps)).exp(),
    })
}

/// Piece of a right-continuous piecewise-linear path, `f(t) = f0 + slope (t - t0)` on `[t0, t1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearPiece {
    pub t0: f64,
    pub t1: f64,
    pub f0: f64,
    pub slope: f64,
}

impl LinearPiece {
    pub fn end_value(&self) -> f64 {
        self.f0 + self.slope * (self.t1 - self.t0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignFlipReport {
    pub sup_sq: f64,
    pub int_pos: f64,
    pub int_abs: f64,
    pub flips: usize,
    pub m: f64,
    pub big_m: f64,
    /// `sup f^2 / (2 M int f+)`.
    pub ratio_sup: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub holds: bool,
}

/// Simpson's rule on `[a, b]` (exact for the linear pieces used here).
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
}

/// Integrals of `f+` and `|f|` over a piece, split at its zero crossing.
fn piece_integrals(p: &LinearPiece) -> (f64, f64) {
    let f = |t: f64| p.f0 + p.slope * (t - p.t0);
    let mut cuts = vec![p.t0];
    if p.slope != 0.0 {
        let root = p.t0 - p.f0 / p.slope;
        if root > p.t0 && root < p.t1 {
            cuts.push(root);
        }
    }
    cuts.push(p.t1);
    let mut pos = 0.0;
    let mut abs = 0.0;
    for w in cuts.windows(2) {
        pos += simpson(|t| f(t).max(0.0), w[0], w[1]);
        abs += simpson(|t| f(t).abs(), w[0], w[1]);
    }
    (pos, abs)
}

/// Checks the sign-flip inequalities on a piecewise-linear path:
/// `sup |f|^2 <= 2 M int f+` and
/// `m^2/(2M) (1 + M/m)^-1 T^2/(1 + N) <= int |f| <= (1 + M/m) int f+`,
/// each within the relative `slack`.
///
/// The path must start at zero, have slopes in `[m, M]` with `m > 0`, and
/// at every discontinuity jump from a positive value to its negative.
pub fn check_signflip_lemma(pieces: &[LinearPiece], m: f64, big_m: f64, slack: f64) -> Result<SignFlipReport> {
    let bad = |msg: String| Err(Error::Domain(format!("malformed path: {msg}")));
    if pieces.is_empty() {
        return bad("no pieces".into());
    }
    if !(m > 0.0 && m <= big_m) {
        return bad(format!("slope bounds must satisfy 0 < m <= M, got m = {m}, M = {big_m}"));
    }
    if pieces[0].f0.abs() > 1e-12 {
        return bad(format!("f(0) = {} is not zero", pieces[0].f0));
    }
    let mut flips = 0;
    for (k, p) in pieces.iter().enumerate() {
        if !(p.t1 > p.t0) {
            return bad(format!("piece {k} has empty span"));
        }
        if p.slope < m * (1.0 - 1e-12) || p.slope > big_m * (1.0 + 1e-12) {
            return bad(format!("piece {k} slope {} outside [{m}, {big_m}]", p.slope));
        }
        if k > 0 {
            let prev = &pieces[k - 1];
            if (p.t0 - prev.t1).abs() > 1e-12 * (1.0 + p.t0.abs()) {
                return bad(format!("gap between pieces {} and {k}", k - 1));
            }
            let left = prev.end_value();
            let tol = 1e-9 * (1.0 + left.abs());
            if (p.f0 - left).abs() <= tol {
                continue;
            }
            if !(left > 0.0) || (p.f0 + left).abs() > tol {
                return bad(format!("discontinuity at t = {} is not a sign flip", p.t0));
            }
            flips += 1;
        }
    }
    let t_total = pieces.last().unwrap().t1 - pieces[0].t0;
    let sup_sq = pieces
        .iter()
        .map(|p| p.f0.abs().max(p.end_value().abs()))
        .fold(0.0, f64::max)
        .powi(2);
    let (int_pos, int_abs) = pieces.iter().map(piece_integrals).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let ratio_sup = if int_pos > 0.0 { sup_sq / (2.0 * big_m * int_pos) } else { f64::INFINITY };
    let lower_bound = m * m / (2.0 * big_m) / (1.0 + big_m / m) * t_total * t_total / (1.0 + flips as f64);
    let upper_bound = (1.0 + big_m / m) * int_pos;
    let holds = ratio_sup <= 1.0 + slack
        && lower_bound <= int_abs * (1.0 + slack)
        && int_abs <= upper_bound * (1.0 + slack);
    Ok(SignFlipReport { sup_sq, int_pos, int_abs, flips, m, big_m, ratio_sup, lower_bound, upper_bound, holds })
}

/// Signed rate path `lambda_t = v . grad U(x_t)` of a BPS run on a quadratic
/// target, rebuilt from its event records (no refreshes). Pieces are linear
/// with slope `v^T H v`.
pub fn bps_lambda_path(
    p: &dyn Potential,
    x0: &DVector<f64>,
    v0: &DVector<f64>,
    events: &[EventRecord],
    t_end: f64,
) -> Result<Vec<LinearPiece>> {
    if !p.is_quadratic() {
        return Err(Error::Domain("rate paths are piecewise linear only for quadratic targets".into()));
    }
    let h = p.hess(x0)?;
    let mut pieces = Vec::with_capacity(events.len() + 1);
    let (mut t, mut x, mut v) = (0.0, x0.clone(), v0.clone());
    for ev in events.iter().filter(|e| e.time <= t_end) {
        if ev.kind != EventKind::Bounce {
            return Err(Error::Domain("refresh events break the sign-flip structure".into()));
        }
        if ev.time > t {
            pieces.push(LinearPiece { t0: t, t1: ev.time, f0: v.dot(&p.grad(&x)), slope: quad_form(&h, &v) });
        }
        t = ev.time;
        x = ev.x.clone();
        v = ev.v_post.clone();
    }
    if t_end > t {
        pieces.push(LinearPiece { t0: t, t1: t_end, f0: v.dot(&p.grad(&x)), slope: quad_form(&h, &v) });
    }
    Ok(pieces)
}
