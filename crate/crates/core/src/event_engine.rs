//! First arrival of an inhomogeneous Poisson process with intensity
//! `eps^-1 (lambda_t)_+` along a free-flight ray.
//!
//! Two routes are provided. When the potential is quadratic the signed rate
//! is affine in time and the integrated rate is inverted in closed form.
//! Otherwise candidates are drawn from a windowed envelope and thinned.
//! Both routes account their derivative evaluations in [`CostCounters`].

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::quad_form;
use crate::potentials::Potential;
use crate::rng::{exp1, open_unit};

/// Hard time guard for rays whose integrated rate never reaches the draw.
pub const DEFAULT_HORIZON: f64 = 1e6;

/// A signed pre-intensity `lambda(t)` with its time derivative.
pub trait SignedRate {
    fn value(&self, t: f64) -> f64;
    fn slope(&self, t: f64) -> Result<f64>;
}

/// The ray `x + v t` with signed rate `lambda_t = v . grad U(x + v t)`.
#[derive(Debug, Clone)]
pub struct RaySpec<'a> {
    pub origin: DVector<f64>,
    pub velocity: DVector<f64>,
    pub eps: f64,
    pub potential: &'a dyn Potential,
}

impl<'a> RaySpec<'a> {
    pub fn new(
        potential: &'a dyn Potential,
        origin: DVector<f64>,
        velocity: DVector<f64>,
        eps: f64,
    ) -> Result<Self> {
        for len in [origin.len(), velocity.len()] {
            if len != potential.dim() {
                return Err(Error::DimensionMismatch { expected: potential.dim(), got: len });
            }
        }
        if !(velocity.norm() > 0.0) {
            return Err(Error::Domain("ray velocity must be nonzero".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("eps must be positive, got {eps}")));
        }
        Ok(Self { origin, velocity, eps, potential })
    }

    pub fn position(&self, t: f64) -> DVector<f64> {
        &self.origin + &self.velocity * t
    }

    /// `(a, b)` with `lambda_t = a + b t`; requires a constant Hessian.
    pub fn affine_coefficients(&self) -> Result<(f64, f64)> {
        if !self.potential.is_quadratic() {
            return Err(Error::Domain("exact inversion needs a quadratic potential".into()));
        }
        let a = self.velocity.dot(&self.potential.grad(&self.origin));
        let b = quad_form(&self.potential.hess(&self.origin)?, &self.velocity);
        Ok((a, b))
    }
}

impl SignedRate for RaySpec<'_> {
    fn value(&self, t: f64) -> f64 {
        self.velocity.dot(&self.potential.grad(&self.position(t)))
    }

    fn slope(&self, t: f64) -> Result<f64> {
        Ok(quad_form(&self.potential.hess(&self.position(t))?, &self.velocity))
    }
}

/// Single-coordinate rate `v_i d_i U(x + v t)` used by the Zig-Zag clocks.
#[derive(Debug, Clone)]
pub struct CoordinateRate<'r, 'a> {
    pub ray: &'r RaySpec<'a>,
    pub index: usize,
}

impl SignedRate for CoordinateRate<'_, '_> {
    fn value(&self, t: f64) -> f64 {
        self.ray.velocity[self.index] * self.ray.potential.grad(&self.ray.position(t))[self.index]
    }

    fn slope(&self, t: f64) -> Result<f64> {
        let h = self.ray.potential.hess(&self.ray.position(t))?;
        Ok(self.ray.velocity[self.index] * (h.row(self.index) * &self.ray.velocity)[(0, 0)])
    }
}

/// Cost accounting: accepted jumps `N_T`, candidates `M_T`, windows `W_T`,
/// derivative evaluations and refreshes.
///
/// `deriv_evals` always equals `C_cand * candidates + C_win * windows` for
/// the configuration that produced the counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CostCounters {
    pub accepted_jumps: u64,
    pub candidates: u64,
    pub windows: u64,
    pub deriv_evals: u64,
    pub refresh_jumps: u64,
}

impl CostCounters {
    pub fn record_candidate(&mut self, c_cand: u64) {
        self.candidates += 1;
        self.deriv_evals += c_cand;
    }

    pub fn record_window(&mut self, c_win: u64) {
        self.windows += 1;
        self.deriv_evals += c_win;
    }

    pub fn record_jump(&mut self) {
        self.accepted_jumps += 1;
    }

    pub fn record_refresh(&mut self) {
        self.refresh_jumps += 1;
    }

    pub fn merge(&mut self, other: &CostCounters) {
        self.accepted_jumps += other.accepted_jumps;
        self.candidates += other.candidates;
        self.windows += other.windows;
        self.deriv_evals += other.deriv_evals;
        self.refresh_jumps += other.refresh_jumps;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MajorantStrategy {
    /// `max(0, lambda(t_k) + margin + (1 + mu) |lambda'(t_k)| (t - t_k))`.
    Affine,
    /// `max(lambda(t_k), lambda(t_k + delta))_+ + margin`, valid for increasing rates.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConfig {
    /// Window length; `None` uses `0.1 eps^(1/2) / |v|`.
    pub window: Option<f64>,
    pub strategy: MajorantStrategy,
    pub c_cand: u64,
    pub c_win: u64,
    pub margin: f64,
    pub curvature_inflation: f64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            window: None,
            strategy: MajorantStrategy::Affine,
            c_cand: 1,
            c_win: 1,
            margin: 0.0,
            curvature_inflation: 0.5,
        }
    }
}

impl EnvelopeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.window {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Domain(format!("window length must be positive, got {w}")));
            }
        }
        if self.c_cand < 1 {
            return Err(Error::Domain("C_cand must be at least 1".into()));
        }
        if !(self.curvature_inflation > -1.0) || !(self.margin >= 0.0) {
            return Err(Error::Domain("envelope inflation must exceed -1 and margin be >= 0".into()));
        }
        Ok(())
    }

    pub fn window_length(&self, eps: f64, speed: f64) -> f64 {
        self.window.unwrap_or_else(|| 0.1 * eps.sqrt() / speed.max(f64::MIN_POSITIVE))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstEventResult {
    /// `None` when no event happens before the horizon.
    pub time: Option<f64>,
    /// Signed rate `lambda` at the event time.
    pub rate: f64,
}

/// First `t` with `int_0^t (a + b s)_+ ds = mass`, or `None` if the
/// integrated rate stays below `mass` forever.
pub fn affine_first_arrival(a: f64, b: f64, mass: f64) -> Option<f64> {
    if mass <= 0.0 {
        return Some(0.0);
    }
    if b > 0.0 {
        if a >= 0.0 {
            // stable form of (-a + sqrt(a^2 + 2 b m)) / b
            Some(2.0 * mass / (a + (a * a + 2.0 * b * mass).sqrt()))
        } else {
            Some(-a / b + (2.0 * mass / b).sqrt())
        }
    } else if b == 0.0 {
        (a > 0.0).then(|| mass / a)
    } else {
        if a <= 0.0 {
            return None;
        }
        let disc = a * a + 2.0 * b * mass;
        (disc >= 0.0).then(|| 2.0 * mass / (a + disc.sqrt()))
    }
}

/// Integrated positive part `int_0^t (a + b s)_+ ds`.
pub fn affine_positive_mass(a: f64, b: f64, t: f64) -> f64 {
    if b == 0.0 {
        return a.max(0.0) * t;
    }
    let root = -a / b;
    if b > 0.0 {
        if root <= 0.0 {
            a * t + 0.5 * b * t * t
        } else if t > root {
            0.5 * b * (t - root) * (t - root)
        } else {
            0.0
        }
    } else {
        let end = root.min(t).max(0.0);
        a * end + 0.5 * b * end * end
    }
}

/// Exact first event on a quadratic ray from a uniform draw `u`.
///
/// Solves `Lambda+_t = eps (-ln u)` for `lambda_t = a + b t`. Counts one
/// candidate and one accepted jump.
pub fn first_event_exact_affine(
    ray: &RaySpec<'_>,
    u: f64,
    counters: &mut CostCounters,
) -> Result<FirstEventResult> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("uniform draw must lie in (0,1), got {u}")));
    }
    let (a, b) = ray.affine_coefficients()?;
    if !(b > 0.0) {
        return Err(Error::ConvexityViolation(format!("v^T H v = {b} is not positive")));
    }
    let mass = ray.eps * (-u.ln());
    let t = affine_first_arrival(a, b, mass).expect("b > 0 always yields an arrival");
    counters.record_candidate(1);
    counters.record_jump();
    Ok(FirstEventResult { time: Some(t), rate: a + b * t })
}

/// Thinning proposal for a generic signed rate on `[0, horizon]`.
///
/// Records windows and candidates but not jumps: callers decide whether the
/// returned time becomes a jump (competing clocks may discard it).
pub fn thinning_proposal<S: SignedRate, R: Rng + ?Sized>(
    rate: &S,
    eps: f64,
    window: f64,
    cfg: &EnvelopeConfig,
    horizon: f64,
    rng: &mut R,
    counters: &mut CostCounters,
) -> Result<FirstEventResult> {
    let mut start = 0.0;
    while start < horizon {
        let end = (start + window).min(horizon);
        counters.record_window(cfg.c_win);
        let (a0, b) = match cfg.strategy {
            MajorantStrategy::Affine => (
                rate.value(start) + cfg.margin,
                (1.0 + cfg.curvature_inflation) * rate.slope(start)?.abs(),
            ),
            MajorantStrategy::Constant => {
                let top = rate.value(start).max(rate.value(end)).max(0.0);
                (top + cfg.margin, 0.0)
            }
        };
        let mut s = start;
        loop {
            let a_s = a0 + b * (s - start);
            let Some(dt) = affine_first_arrival(a_s, b, eps * exp1(rng)) else {
                break;
            };
            if s + dt > end {
                break;
            }
            s += dt;
            counters.record_candidate(cfg.c_cand);
            let lam = rate.value(s);
            let env = (a0 + b * (s - start)).max(0.0);
            if lam > env * (1.0 + 1e-12) + 1e-300 {
                return Err(Error::EnvelopeViolation { time: s, rate: lam, envelope: env });
            }
            if open_unit(rng) * env <= lam.max(0.0) {
                return Ok(FirstEventResult { time: Some(s), rate: lam });
            }
        }
        start = end;
    }
    Ok(FirstEventResult { time: None, rate: rate.value(horizon.min(DEFAULT_HORIZON)) })
}

/// First event along `ray` by windowed thinning, or no event before `horizon`.
pub fn first_event_thinning<R: Rng + ?Sized>(
    ray: &RaySpec<'_>,
    cfg: &EnvelopeConfig,
    horizon: f64,
    rng: &mut R,
    counters: &mut CostCounters,
) -> Result<FirstEventResult> {
    cfg.validate()?;
    let window = cfg.window_length(ray.eps, ray.velocity.norm());
    let res = thinning_proposal(ray, ray.eps, window, cfg, horizon, rng, counters)?;
    if res.time.is_some() {
        counters.record_jump();
    }
    Ok(res)
}

/// All arrivals on `[0, horizon]` along a fixed ray (the velocity is never
/// changed). Used for compensator checks.
pub fn thinning_arrivals<R: Rng + ?Sized>(
    ray: &RaySpec<'_>,
    cfg: &EnvelopeConfig,
    horizon: f64,
    rng: &mut R,
    counters: &mut CostCounters,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let window = cfg.window_length(ray.eps, ray.velocity.norm());
    let mut arrivals = Vec::new();
    let mut t0 = 0.0;
    loop {
        let shifted = Shifted { inner: ray, offset: t0 };
        let res = thinning_proposal(&shifted, ray.eps, window, cfg, horizon - t0, rng, counters)?;
        match res.time {
            Some(dt) => {
                t0 += dt;
                counters.record_jump();
                arrivals.push(t0);
            }
            None => return Ok(arrivals),
        }
    }
}

struct Shifted<'s, S> {
    inner: &'s S,
    offset: f64,
}

impl<S: SignedRate> SignedRate for Shifted<'_, S> {
    fn value(&self, t: f64) -> f64 {
        self.inner.value(t + self.offset)
    }

    fn slope(&self, t: f64) -> Result<f64> {
        self.inner.slope(t + self.offset)
    }
}

/// How samplers simulate their event clocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EventStrategy {
    Exact,
    Thinning(EnvelopeConfig),
}

impl EventStrategy {
    /// Exact inversion for quadratic potentials, thinning otherwise.
    pub fn auto(p: &dyn Potential) -> Self {
        if p.is_quadratic() {
            EventStrategy::Exact
        } else {
            EventStrategy::Thinning(EnvelopeConfig::default())
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EventStrategy::Exact => Ok(()),
            EventStrategy::Thinning(cfg) => cfg.validate(),
        }
    }

    /// Proposed arrival for `rate`, which must be affine with coefficients
    /// `affine` in exact mode. Counts candidates and windows only.
    pub fn propose<S: SignedRate, R: Rng + ?Sized>(
        &self,
        rate: &S,
        affine: Option<(f64, f64)>,
        eps: f64,
        speed: f64,
        horizon: f64,
        rng: &mut R,
        counters: &mut CostCounters,
    ) -> Result<Option<f64>> {
        match self {
            EventStrategy::Exact => {
                let (a, b) = affine.ok_or_else(|| {
                    Error::Domain("exact inversion needs a quadratic potential".into())
                })?;
                counters.record_candidate(1);
                Ok(affine_first_arrival(a, b, eps * exp1(rng)).filter(|&t| t <= horizon))
            }
            EventStrategy::Thinning(cfg) => {
                let window = cfg.window_length(eps, speed);
                Ok(thinning_proposal(rate, eps, window, cfg, horizon, rng, counters)?.time)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostSandwich {
    /// Smallest per-run ratio `derivEvals / N_T`.
    pub ratio_low: f64,
    /// Largest per-run ratio.
    pub ratio_high: f64,
    pub runs_used: usize,
}

/// Empirical constants `A <= derivEvals / N_T <= B` over runs with at least
/// one accepted jump. Meaningful with a hundred or more runs.
pub fn cost_sandwich_report(runs: &[CostCounters]) -> Result<CostSandwich> {
    let ratios: Vec<f64> = runs
        .iter()
        .filter(|c| c.accepted_jumps > 0)
        .map(|c| c.deriv_evals as f64 / c.accepted_jumps as f64)
        .collect();
    if ratios.is_empty() {
        return Err(Error::UndefinedRatio("no run has an accepted jump".into()));
    }
    Ok(CostSandwich {
        ratio_low: ratios.iter().cloned().fold(f64::INFINITY, f64::min),
        ratio_high: ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        runs_used: ratios.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::GaussianPotential;
    use crate::rng::seeded;
    use nalgebra::DMatrix;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    /// Trapezoid quadrature of `(a + b s)_+` on a fine grid.
    fn quad_positive(a: f64, b: f64, t: f64) -> f64 {
        let n = 200_000;
        let h = t / n as f64;
        let f = |s: f64| (a + b * s).max(0.0);
        let mut acc = 0.5 * (f(0.0) + f(t));
        for i in 1..n {
            acc += f(i as f64 * h);
        }
        acc * h
    }

    #[test]
    fn affine_examples() {
        let one_d = GaussianPotential::isotropic(1);
        let mut c = CostCounters::default();
        let u = (-0.5f64).exp();
        // a = 0, b = 1
        let ray = RaySpec::new(&one_d, dv(&[0.0]), dv(&[1.0]), 1.0).unwrap();
        let r = first_event_exact_affine(&ray, u, &mut c).unwrap();
        assert!((r.time.unwrap() - 1.0).abs() < 1e-14);
        // a = -1, b = 1: tangency at t = 1, then sqrt(2 * 0.5)
        let ray = RaySpec::new(&one_d, dv(&[-1.0]), dv(&[1.0]), 1.0).unwrap();
        let t = first_event_exact_affine(&ray, u, &mut c).unwrap().time.unwrap();
        assert!((t - 2.0).abs() < 1e-14);
        assert!((quad_positive(-1.0, 1.0, t) - 0.5).abs() < 1e-6);
        // a = 1, b = 1, eps = 0.01, E = 1
        let ray = RaySpec::new(&one_d, dv(&[1.0]), dv(&[1.0]), 0.01).unwrap();
        let t = first_event_exact_affine(&ray, (-1.0f64).exp(), &mut c).unwrap().time.unwrap();
        assert!((t - (-1.0 + 1.02f64.sqrt())).abs() < 1e-15);
        assert!((quad_positive(1.0, 1.0, t) - 0.01).abs() < 1e-9);
        assert_eq!(c.candidates, 3);
        assert_eq!(c.accepted_jumps, 3);
    }

    #[test]
    fn affine_errors() {
        let p = GaussianPotential::isotropic(1);
        let mut c = CostCounters::default();
        let ray = RaySpec::new(&p, dv(&[1.0]), dv(&[1.0]), 1.0).unwrap();
        for u in [0.0, 1.0, -0.2, 1.5] {
            assert!(matches!(first_event_exact_affine(&ray, u, &mut c), Err(Error::Domain(_))));
        }
        let pe = crate::potentials::PowerExponentialPotential::new(DMatrix::identity(1, 1), 1.5)
            .unwrap();
        let ray = RaySpec::new(&pe, dv(&[1.0]), dv(&[1.0]), 1.0).unwrap();
        assert!(first_event_exact_affine(&ray, 0.5, &mut c).is_err());
    }

    #[test]
    fn affine_inversion_is_exact() {
        let mut rng = seeded(1);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(-3.0..3.0);
            let b: f64 = rng.random_range(0.01..5.0);
            let eps: f64 = 10f64.powf(rng.random_range(-5.0..0.0));
            let e = exp1(&mut rng);
            let t = affine_first_arrival(a, b, eps * e).unwrap();
            let back = affine_positive_mass(a, b, t);
            // the rounding of t itself contributes lambda(t) * ulp(t)
            let floor = (a + b * t).max(0.0) * t * f64::EPSILON;
            assert!((back - eps * e).abs() <= 1e-12 * eps * e + floor, "a={a} b={b} eps={eps}");
        }
    }

    #[test]
    fn affine_nonincreasing_rates() {
        assert_eq!(affine_first_arrival(-1.0, 0.0, 1.0), None);
        assert_eq!(affine_first_arrival(2.0, 0.0, 1.0), Some(0.5));
        assert_eq!(affine_first_arrival(-1.0, -1.0, 1.0), None);
        // total mass a^2 / (2|b|) = 0.5
        assert_eq!(affine_first_arrival(1.0, -1.0, 0.6), None);
        let t = affine_first_arrival(1.0, -1.0, 0.3).unwrap();
        assert!((affine_positive_mass(1.0, -1.0, t) - 0.3).abs() < 1e-14);
    }

    #[test]
    fn accounting_identity() {
        let mut c = CostCounters::default();
        for _ in 0..7 {
            c.record_candidate(2);
        }
        for _ in 0..3 {
            c.record_window(1);
        }
        assert_eq!(c.deriv_evals, 17);
    }

    fn ks_distance(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn thinning_matches_exact_law() {
        let p = GaussianPotential::isotropic(2);
        let ray = RaySpec::new(&p, dv(&[2.0, 0.0]), dv(&[1.0, 0.0]), 0.1).unwrap();
        let cfg = EnvelopeConfig { window: Some(0.05), ..Default::default() };
        let mut rng = seeded(21);
        let mut c = CostCounters::default();
        let n = 10_000;
        let thin: Vec<f64> = (0..n)
            .map(|_| first_event_thinning(&ray, &cfg, 1e3, &mut rng, &mut c).unwrap().time.unwrap())
            .collect();
        let exact: Vec<f64> = (0..n)
            .map(|_| {
                first_event_exact_affine(&ray, open_unit(&mut rng), &mut c).unwrap().time.unwrap()
            })
            .collect();
        let d = ks_distance(thin, exact);
        assert!(d < 0.02, "KS distance {d}");
    }

    #[test]
    fn thinning_constant_majorant_matches_exact_law() {
        let p = GaussianPotential::isotropic(2);
        let ray = RaySpec::new(&p, dv(&[-1.0, 0.5]), dv(&[1.0, 0.2]), 0.05).unwrap();
        let cfg = EnvelopeConfig {
            window: Some(0.02),
            strategy: MajorantStrategy::Constant,
            ..Default::default()
        };
        let mut rng = seeded(22);
        let mut c = CostCounters::default();
        let n = 10_000;
        let thin: Vec<f64> = (0..n)
            .map(|_| first_event_thinning(&ray, &cfg, 1e3, &mut rng, &mut c).unwrap().time.unwrap())
            .collect();
        let exact: Vec<f64> = (0..n)
            .map(|_| {
                first_event_exact_affine(&ray, open_unit(&mut rng), &mut c).unwrap().time.unwrap()
            })
            .collect();
        assert!(ks_distance(thin, exact) < 0.02);
    }

    #[test]
    fn thinning_no_event_on_tiny_horizon() {
        // a = 0 at the tangency start; the integrated rate over 1e-6 is ~1e-12
        let p = GaussianPotential::isotropic(2);
        let ray = RaySpec::new(&p, dv(&[0.0, 1.0]), dv(&[1.0, 0.0]), 1.0).unwrap();
        let mut rng = seeded(2);
        let mut c = CostCounters::default();
        let r = first_event_thinning(&ray, &EnvelopeConfig::default(), 1e-6, &mut rng, &mut c)
            .unwrap();
        assert_eq!(r.time, None);
        assert_eq!(c.accepted_jumps, 0);
        assert!(c.windows >= 1);
    }

    #[test]
    fn thinning_detects_invalid_envelope() {
        let p = GaussianPotential::isotropic(1);
        let ray = RaySpec::new(&p, dv(&[0.0]), dv(&[1.0]), 0.5).unwrap();
        let cfg = EnvelopeConfig {
            window: Some(10.0),
            curvature_inflation: -0.9,
            ..Default::default()
        };
        let mut rng = seeded(3);
        let mut c = CostCounters::default();
        let mut saw_violation = false;
        for _ in 0..50 {
            if let Err(Error::EnvelopeViolation { .. }) =
                first_event_thinning(&ray, &cfg, 100.0, &mut rng, &mut c)
            {
                saw_violation = true;
                break;
            }
        }
        assert!(saw_violation);
    }

    #[test]
    fn compensator_identity() {
        let p = GaussianPotential::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
        let ray = RaySpec::new(&p, dv(&[-1.0, 0.5]), dv(&[0.8, 0.4]), 0.2).unwrap();
        let horizon = 2.0;
        let cfg = EnvelopeConfig::default();
        let mut rng = seeded(4);
        let reps = 10_000;
        let counts: Vec<f64> = (0..reps)
            .map(|_| {
                let mut c = CostCounters::default();
                let arrivals = thinning_arrivals(&ray, &cfg, horizon, &mut rng, &mut c).unwrap();
                assert_eq!(c.accepted_jumps as usize, arrivals.len());
                assert!(c.accepted_jumps <= c.candidates);
                arrivals.len() as f64
            })
            .collect();
        let mean = counts.iter().sum::<f64>() / reps as f64;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        // quadrature of eps^-1 (lambda)_+ along the ray
        let n = 100_000;
        let h = horizon / n as f64;
        let integral: f64 = (0..n)
            .map(|i| ray.value((i as f64 + 0.5) * h).max(0.0) * h)
            .sum::<f64>()
            / ray.eps;
        assert!((mean - integral).abs() <= 3.0 * se, "mean {mean} vs {integral} (se {se})");
    }

    #[test]
    fn rate_is_monotone_on_band_rays() {
        let p = crate::potentials::PowerExponentialPotential::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            1.5,
        )
        .unwrap();
        let band = crate::potentials::BandSpec::new(0.3).unwrap();
        let mut rng = seeded(5);
        let points = crate::potentials::sample_band_points(&p, &band, 100, &mut rng).unwrap();
        for x in points {
            let v = crate::rng::normal_vector(2, &mut rng);
            let ray = RaySpec::new(&p, x, v, 1.0).unwrap();
            let mut prev = ray.value(0.0);
            for k in 1..=20 {
                let cur = ray.value(0.01 * k as f64);
                assert!(cur > prev - 1e-12);
                prev = cur;
            }
        }
    }

    #[test]
    fn sandwich_report() {
        let exact = CostCounters { accepted_jumps: 4, candidates: 4, windows: 0, deriv_evals: 4, refresh_jumps: 0 };
        let r = cost_sandwich_report(&vec![exact; 100]).unwrap();
        assert_eq!((r.ratio_low, r.ratio_high), (1.0, 1.0));
        assert!(matches!(cost_sandwich_report(&[]), Err(Error::UndefinedRatio(_))));
        assert!(matches!(
            cost_sandwich_report(&[CostCounters::default()]),
            Err(Error::UndefinedRatio(_))
        ));
    }

    #[test]
    fn sandwich_ratio_bounded_for_affine_majorant() {
        let p = GaussianPotential::isotropic(2);
        let cfg = EnvelopeConfig::default();
        let mut rng = seeded(6);
        let mut runs = Vec::new();
        for _ in 0..200 {
            let x = crate::rng::normal_vector(2, &mut rng) + dv(&[2.0, 0.0]);
            let v = crate::rng::normal_vector(2, &mut rng);
            let ray = RaySpec::new(&p, x, v, 0.01).unwrap();
            let mut c = CostCounters::default();
            first_event_thinning(&ray, &cfg, 1e3, &mut rng, &mut c).unwrap();
            runs.push(c);
        }
        let r = cost_sandwich_report(&runs).unwrap();
        assert!(r.ratio_low >= 1.0 && r.ratio_high.is_finite(), "{r:?}");
    }
}
