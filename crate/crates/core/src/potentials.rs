//! Convex targets `U`, their derivatives, the `eps` scaling and the level-set
//! and energy-band geometry used for hitting times.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, eigenvalue_range, require_spd};
use crate::rng::{self, std_normal};

/// A convex potential `U` on `R^N` with a unique minimiser.
///
/// Implementations must be pure: evaluation never mutates shared state, so a
/// single potential can be shared by any number of concurrent runs.
pub trait Potential: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hess(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
    fn minimiser(&self) -> DVector<f64>;

    /// True iff the Hessian is constant.
    fn is_quadratic(&self) -> bool {
        false
    }

    fn min_value(&self) -> f64 {
        self.value(&self.minimiser())
    }

    /// `(inner, eps)` when this potential is `eps^-1 * inner`.
    fn scale_parts(&self) -> Option<(PotentialRef, f64)> {
        None
    }
}

pub type PotentialRef = Arc<dyn Potential>;

/// Unit gradient direction `n(x)`; `None` at a critical point.
pub fn normal(p: &dyn Potential, x: &DVector<f64>) -> Option<DVector<f64>> {
    linalg::unit(&p.grad(x))
}

pub fn check_dim(p: &dyn Potential, x: &DVector<f64>) -> Result<()> {
    if x.len() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: x.len() });
    }
    Ok(())
}

/// `U(x) = x^T P x / 2` with a symmetric positive definite precision `P`.
#[derive(Debug, Clone)]
pub struct GaussianPotential {
    precision: DMatrix<f64>,
}

impl GaussianPotential {
    pub fn new(precision: DMatrix<f64>) -> Result<Self> {
        require_spd(&precision, "precision")?;
        Ok(Self { precision })
    }

    pub fn isotropic(dim: usize) -> Self {
        Self { precision: DMatrix::identity(dim, dim) }
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
}

impl Potential for GaussianPotential {
    fn dim(&self) -> usize {
        self.precision.nrows()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * linalg::quad_form(&self.precision, x)
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.precision * x
    }

    fn hess(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.precision.clone())
    }

    fn minimiser(&self) -> DVector<f64> {
        DVector::zeros(self.dim())
    }

    fn is_quadratic(&self) -> bool {
        true
    }
}

/// `U(x) = (x^T P x / 2)^(beta_tail / 2)` with `beta_tail > 1`.
///
/// Subquadratic for `beta_tail < 2`, superquadratic above. For
/// `beta_tail < 2` the Hessian blows up at the origin, so queries within
/// `1e-10` of it are rejected.
#[derive(Debug, Clone)]
pub struct PowerExponentialPotential {
    precision: DMatrix<f64>,
    beta_tail: f64,
}

impl PowerExponentialPotential {
    pub const SINGULAR_RADIUS: f64 = 1e-10;

    pub fn new(precision: DMatrix<f64>, beta_tail: f64) -> Result<Self> {
        require_spd(&precision, "precision")?;
        if !(beta_tail > 1.0) || !beta_tail.is_finite() {
            return Err(Error::Domain(format!("beta_tail must exceed 1, got {beta_tail}")));
        }
        Ok(Self { precision, beta_tail })
    }

    pub fn beta_tail(&self) -> f64 {
        self.beta_tail
    }

    fn half_quad(&self, x: &DVector<f64>) -> f64 {
        0.5 * linalg::quad_form(&self.precision, x)
    }
}

impl Potential for PowerExponentialPotential {
    fn dim(&self) -> usize {
        self.precision.nrows()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.half_quad(x).powf(0.5 * self.beta_tail)
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let q = self.half_quad(x);
        if q <= 0.0 {
            // continuous extension at the minimiser
            return DVector::zeros(self.dim());
        }
        let h = 0.5 * self.beta_tail;
        (&self.precision * x) * (h * q.powf(h - 1.0))
    }

    fn hess(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h = 0.5 * self.beta_tail;
        let q = self.half_quad(x);
        if self.beta_tail < 2.0 && x.norm() < Self::SINGULAR_RADIUS {
            return Err(Error::Singularity(format!(
                "Hessian of power-exponential potential (beta_tail={}) is unbounded at the minimiser",
                self.beta_tail
            )));
        }
        if q <= 0.0 {
            let scale = if self.beta_tail == 2.0 { 1.0 } else { 0.0 };
            return Ok(&self.precision * scale);
        }
        let ax = &self.precision * x;
        let first = &self.precision * (h * q.powf(h - 1.0));
        let second = (&ax * ax.transpose()) * (h * (h - 1.0) * q.powf(h - 2.0));
        Ok(first + second)
    }

    fn minimiser(&self) -> DVector<f64> {
        DVector::zeros(self.dim())
    }

    fn is_quadratic(&self) -> bool {
        self.beta_tail == 2.0
    }
}

/// `U_eps = eps^-1 U`.
#[derive(Debug, Clone)]
pub struct ScaledPotential {
    inner: PotentialRef,
    eps: f64,
}

impl ScaledPotential {
    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn inner(&self) -> &PotentialRef {
        &self.inner
    }
}

impl Potential for ScaledPotential {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.inner.value(x) / self.eps
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.grad(x) / self.eps
    }

    fn hess(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.inner.hess(x)? / self.eps)
    }

    fn minimiser(&self) -> DVector<f64> {
        self.inner.minimiser()
    }

    fn is_quadratic(&self) -> bool {
        self.inner.is_quadratic()
    }

    fn scale_parts(&self) -> Option<(PotentialRef, f64)> {
        Some((self.inner.clone(), self.eps))
    }
}

/// Returns the potential `eps^-1 U`. Nested scalings are flattened, so
/// scaling by `e1` and then `e2` equals scaling once by `e1 * e2`.
pub fn scaled_potential(p: PotentialRef, eps: f64) -> Result<ScaledPotential> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    match p.scale_parts() {
        Some((inner, e0)) => Ok(ScaledPotential { inner, eps: e0 * eps }),
        None => Ok(ScaledPotential { inner: p, eps }),
    }
}

/// JSON description of a potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PotentialConfig {
    Gaussian {
        precision: Vec<Vec<f64>>,
    },
    PowerExponential {
        precision: Vec<Vec<f64>>,
        beta_tail: f64,
    },
}

impl PotentialConfig {
    pub fn build(&self) -> Result<PotentialRef> {
        match self {
            PotentialConfig::Gaussian { precision } => {
                Ok(Arc::new(GaussianPotential::new(linalg::matrix_from_rows(precision)?)?))
            }
            PotentialConfig::PowerExponential { precision, beta_tail } => Ok(Arc::new(
                PowerExponentialPotential::new(linalg::matrix_from_rows(precision)?, *beta_tail)?,
            )),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PotentialConfig::Gaussian { precision }
            | PotentialConfig::PowerExponential { precision, .. } => precision.len(),
        }
    }
}

/// Level set `L_gamma = {U <= U* + gamma}` and band
/// `B_gamma = {U* + gamma <= U <= U* + 1/gamma}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub gamma: f64,
}

impl BandSpec {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    /// Absolute threshold `U* + gamma`.
    pub fn level(&self, p: &dyn Potential) -> f64 {
        p.min_value() + self.gamma
    }

    pub fn upper_level(&self, p: &dyn Potential) -> f64 {
        p.min_value() + 1.0 / self.gamma
    }

    pub fn in_band(&self, p: &dyn Potential, x: &DVector<f64>) -> bool {
        let u = p.value(x);
        u >= self.level(p) && u <= self.upper_level(p)
    }
}

/// Membership in `L_gamma`; inclusive at the boundary. Evaluate on the
/// unscaled potential: the hitting set does not depend on `eps`.
pub fn in_level_set(b: &BandSpec, p: &dyn Potential, x: &DVector<f64>) -> bool {
    p.value(x) <= b.level(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandBounds {
    pub eta_lo: f64,
    pub eta_hi: f64,
    pub kappa_lo: f64,
    pub kappa_hi: f64,
    pub samples: usize,
}

const MAX_EMPTY_PROPOSALS: usize = 1_000_000;

/// Distance from `x*` along `dir` at which `U` reaches `target`.
fn radial_reach(p: &dyn Potential, dir: &DVector<f64>, target: f64) -> f64 {
    let x0 = p.minimiser();
    let at = |r: f64| p.value(&(&x0 + dir * r));
    let mut hi = 1.0;
    let mut guard = 0;
    while at(hi) < target && guard < 200 {
        hi *= 2.0;
        guard += 1;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Isotropic Gaussian proposal scale covering the band's outer shell.
fn proposal_scale(p: &dyn Potential, b: &BandSpec) -> f64 {
    let target = b.upper_level(p);
    let n = p.dim();
    let mut s = 0.0f64;
    for i in 0..n {
        for sign in [-1.0, 1.0] {
            let dir = linalg::basis(n, i) * sign;
            s = s.max(radial_reach(p, &dir, target));
        }
    }
    s
}

/// Rejection-samples `count` points of `B_gamma` from a Gaussian proposal
/// centred at `x*`.
pub fn sample_band_points<R: Rng + ?Sized>(
    p: &dyn Potential,
    b: &BandSpec,
    count: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    if b.level(p) > b.upper_level(p) {
        return Err(Error::Sampling(format!("band is empty for gamma={}", b.gamma)));
    }
    let centre = p.minimiser();
    let scale = proposal_scale(p, b);
    let mut out = Vec::with_capacity(count);
    let mut proposals = 0usize;
    while out.len() < count {
        let z = DVector::from_fn(p.dim(), |_, _| std_normal(rng));
        let x = &centre + z * scale;
        proposals += 1;
        if b.in_band(p, &x) {
            out.push(x);
        } else if out.is_empty() && proposals >= MAX_EMPTY_PROPOSALS {
            return Err(Error::Sampling(format!(
                "no band point found after {MAX_EMPTY_PROPOSALS} proposals"
            )));
        }
    }
    Ok(out)
}

/// Empirical gradient-norm and Hessian-eigenvalue ranges over `samples`
/// band points. With a fixed seed the draws are nested, so increasing
/// `samples` can only widen the reported ranges towards the true extremes.
pub fn estimate_band_bounds(
    p: &dyn Potential,
    b: &BandSpec,
    samples: usize,
    seed: u64,
) -> Result<BandBounds> {
    if samples == 0 {
        return Err(Error::Sampling("at least one band sample is required".into()));
    }
    let mut rng = rng::seeded(seed);
    let points = sample_band_points(p, b, samples, &mut rng)?;
    let mut bounds = BandBounds {
        eta_lo: f64::INFINITY,
        eta_hi: 0.0,
        kappa_lo: f64::INFINITY,
        kappa_hi: f64::NEG_INFINITY,
        samples,
    };
    for x in &points {
        let g = p.grad(x).norm();
        bounds.eta_lo = bounds.eta_lo.min(g);
        bounds.eta_hi = bounds.eta_hi.max(g);
        let (lo, hi) = eigenvalue_range(&p.hess(x)?);
        bounds.kappa_lo = bounds.kappa_lo.min(lo);
        bounds.kappa_hi = bounds.kappa_hi.max(hi);
    }
    Ok(bounds)
}

/// First `s` in `[0, s_max]` with `U(x + s v) <= level`, assuming `U(x) > level`.
///
/// `U` is convex along the ray, so the segment minimum is either an endpoint
/// or the unique root of the directional derivative. Convexity lower bounds
/// from the two endpoint tangents give a cheap rejection before any root
/// finding. The returned crossing is accurate to `1e-10` in `s`.
pub fn ray_level_crossing(
    p: &dyn Potential,
    x: &DVector<f64>,
    v: &DVector<f64>,
    s_max: f64,
    level: f64,
) -> Option<f64> {
    if !(s_max > 0.0) {
        return None;
    }
    let u_at = |s: f64| p.value(&(x + v * s));
    let slope_at = |s: f64| v.dot(&p.grad(&(x + v * s)));
    let u0 = p.value(x);
    if u0 <= level {
        return Some(0.0);
    }
    let u1 = u_at(s_max);
    let bracket_end = if u1 <= level {
        s_max
    } else {
        let d0 = slope_at(0.0);
        if d0 >= 0.0 {
            return None;
        }
        let d1 = slope_at(s_max);
        if d1 <= 0.0 {
            // monotone decreasing on the segment and the end is above level
            return None;
        }
        // tangent lines at both ends bound U from below
        let s_cross = (u1 - u0 - d1 * s_max) / (d0 - d1);
        let lower = u0 + d0 * s_cross.clamp(0.0, s_max);
        if lower > level {
            return None;
        }
        let (mut lo, mut hi) = (0.0, s_max);
        for _ in 0..200 {
            if hi - lo <= 1e-13 * (1.0 + s_max) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if slope_at(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s_min = 0.5 * (lo + hi);
        if u_at(s_min) > level {
            return None;
        }
        s_min
    };
    let (mut lo, mut hi) = (0.0, bracket_end);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if u_at(mid) <= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn iso(n: usize) -> PotentialRef {
        Arc::new(GaussianPotential::isotropic(n))
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn random_unit<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
        let z = crate::rng::normal_vector(n, rng);
        &z / z.norm()
    }

    #[test]
    fn scaling_identity_and_half() {
        let p = iso(2);
        let s1 = scaled_potential(p.clone(), 1.0).unwrap();
        let x = dv(&[0.3, -1.2]);
        assert_eq!(s1.value(&x), p.value(&x));
        let s = scaled_potential(p, 0.5).unwrap();
        assert!((s.value(&dv(&[1.0, 0.0])) - 1.0).abs() < 1e-15);
        let g = s.grad(&dv(&[1.0, 0.0]));
        assert_eq!(g, dv(&[2.0, 0.0]));
        assert_eq!(s.minimiser(), dv(&[0.0, 0.0]));
        assert_eq!(s.dim(), 2);
    }

    #[test]
    fn scaling_rejects_nonpositive_eps() {
        assert!(matches!(scaled_potential(iso(1), 0.0), Err(Error::Domain(_))));
        assert!(matches!(scaled_potential(iso(1), -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn scaling_composes() {
        let mut rng = seeded(11);
        for _ in 0..50 {
            let e1: f64 = rng.random_range(0.01..3.0);
            let e2: f64 = rng.random_range(0.01..3.0);
            let twice: PotentialRef = Arc::new(scaled_potential(iso(3), e1).unwrap());
            let twice = scaled_potential(twice, e2).unwrap();
            let once = scaled_potential(iso(3), e1 * e2).unwrap();
            let x = crate::rng::normal_vector(3, &mut rng);
            let (a, b) = (twice.value(&x), once.value(&x));
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn power_exponential_scaling_equivalence() {
        // eps = r^-beta turns eps^-1 U(x) into U(r x)
        let r = 2.0f64;
        let beta = 1.5;
        let p: PotentialRef =
            Arc::new(PowerExponentialPotential::new(DMatrix::identity(2, 2), beta).unwrap());
        let scaled = scaled_potential(p.clone(), r.powf(-beta)).unwrap();
        let mut rng = seeded(5);
        for _ in 0..20 {
            let x = crate::rng::normal_vector(2, &mut rng);
            let lhs = scaled.value(&x);
            let rhs = p.value(&(&x * r));
            assert!((lhs - rhs).abs() <= 1e-12 * rhs);
        }
    }

    #[test]
    fn power_exponential_homogeneity() {
        let mut rng = seeded(9);
        for &beta in &[1.3, 1.5, 2.0, 3.0] {
            let p = PowerExponentialPotential::new(DMatrix::identity(3, 3), beta).unwrap();
            for _ in 0..50 {
                let r: f64 = rng.random_range(0.1..5.0);
                let x = crate::rng::normal_vector(3, &mut rng);
                let lhs = p.value(&(&x * r));
                let rhs = r.powf(beta) * p.value(&x);
                assert!((lhs - rhs).abs() <= 1e-12 * rhs);
            }
        }
    }

    fn check_derivatives(p: &dyn Potential, seed: u64) {
        let mut rng = seeded(seed);
        let n = p.dim();
        let delta = 1e-5;
        for _ in 0..100 {
            let x = crate::rng::normal_vector(n, &mut rng) * 1.5;
            let e = random_unit(n, &mut rng);
            let fd = (p.value(&(&x + &e * delta)) - p.value(&(&x - &e * delta))) / (2.0 * delta);
            let g = p.grad(&x);
            assert!(
                (fd - g.dot(&e)).abs() <= 1e-6 * (1.0 + g.norm()),
                "gradient fd mismatch at {x}"
            );
            let hfd = (p.grad(&(&x + &e * delta)) - p.grad(&(&x - &e * delta))) / (2.0 * delta);
            let h = p.hess(&x).unwrap();
            let he = &h * &e;
            assert!(
                (hfd - &he).norm() <= 1e-5 * (1.0 + he.norm()),
                "hessian fd mismatch at {x}"
            );
            assert!(crate::linalg::asymmetry(&h) < 1e-12);
            let (lo, _) = eigenvalue_range(&h);
            assert!(lo > 0.0);
        }
        assert!(p.grad(&p.minimiser()).norm() <= 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let prec = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 1.5]);
        check_derivatives(&GaussianPotential::new(prec.clone()).unwrap(), 1);
        check_derivatives(&PowerExponentialPotential::new(prec.clone(), 1.5).unwrap(), 2);
        check_derivatives(&PowerExponentialPotential::new(prec, 3.0).unwrap(), 3);
    }

    #[test]
    fn power_exponential_origin_behaviour() {
        let sub = PowerExponentialPotential::new(DMatrix::identity(2, 2), 1.5).unwrap();
        let zero = DVector::zeros(2);
        assert_eq!(sub.grad(&zero), zero);
        assert!(matches!(sub.hess(&zero), Err(Error::Singularity(_))));
        assert!(matches!(sub.hess(&dv(&[1e-11, 0.0])), Err(Error::Singularity(_))));
        assert!(sub.hess(&dv(&[1e-3, 0.0])).is_ok());
        let sup = PowerExponentialPotential::new(DMatrix::identity(2, 2), 3.0).unwrap();
        assert_eq!(sup.hess(&zero).unwrap(), DMatrix::zeros(2, 2));
        assert!(PowerExponentialPotential::new(DMatrix::identity(2, 2), 1.0).is_err());
    }

    #[test]
    fn level_set_membership() {
        let p = iso(2);
        let b = BandSpec::new(0.5).unwrap();
        assert!(in_level_set(&b, p.as_ref(), &dv(&[0.0, 0.0])));
        assert!(in_level_set(&b, p.as_ref(), &dv(&[1.0, 0.0])));
        assert!(!in_level_set(&b, p.as_ref(), &dv(&[2.0, 0.0])));
        // level set and band only share the lower boundary
        let mut rng = seeded(4);
        for _ in 0..200 {
            let x = crate::rng::normal_vector(2, &mut rng) * 2.0;
            if in_level_set(&b, p.as_ref(), &x) && b.in_band(p.as_ref(), &x) {
                assert_eq!(p.value(&x), b.level(p.as_ref()));
            }
        }
    }

    #[test]
    fn band_bounds_isotropic() {
        let p = iso(2);
        let b = BandSpec::new(0.5).unwrap();
        let bounds = estimate_band_bounds(p.as_ref(), &b, 20_000, 1).unwrap();
        assert!((bounds.eta_lo - 1.0).abs() < 0.02, "{bounds:?}");
        assert!((bounds.eta_hi - 2.0).abs() < 0.02, "{bounds:?}");
        assert!((bounds.kappa_lo - 1.0).abs() < 1e-12);
        assert!((bounds.kappa_hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn band_bounds_anisotropic_and_degenerate() {
        let p = GaussianPotential::new(DMatrix::from_diagonal(&dv(&[1.0, 4.0]))).unwrap();
        let b = BandSpec::new(0.5).unwrap();
        let bounds = estimate_band_bounds(&p, &b, 500, 2).unwrap();
        assert!((bounds.kappa_lo - 1.0).abs() < 1e-12);
        assert!((bounds.kappa_hi - 4.0).abs() < 1e-12);
        assert!(matches!(estimate_band_bounds(&p, &b, 0, 2), Err(Error::Sampling(_))));
    }

    #[test]
    fn band_bounds_widen_monotonically() {
        let p = iso(3);
        let b = BandSpec::new(0.4).unwrap();
        let small = estimate_band_bounds(p.as_ref(), &b, 100, 8).unwrap();
        let large = estimate_band_bounds(p.as_ref(), &b, 1000, 8).unwrap();
        assert!(large.eta_lo <= small.eta_lo);
        assert!(large.eta_hi >= small.eta_hi);
    }

    #[test]
    fn ray_crossing_cases() {
        let p = iso(2);
        // straight through the origin: crosses |x| = 1 at s = 1
        let s = ray_level_crossing(p.as_ref(), &dv(&[2.0, 0.0]), &dv(&[-1.0, 0.0]), 5.0, 0.5).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        // tangent ray that dips inside then leaves again: minimum at s = 2
        let s = ray_level_crossing(p.as_ref(), &dv(&[-2.0, 0.5]), &dv(&[1.0, 0.0]), 4.0, 0.5).unwrap();
        let expected = 2.0 - (1.0f64 - 0.25).sqrt();
        assert!((s - expected).abs() < 1e-9);
        // misses the unit disc
        assert!(ray_level_crossing(p.as_ref(), &dv(&[-2.0, 1.5]), &dv(&[1.0, 0.0]), 4.0, 0.5).is_none());
        // segment too short
        assert!(ray_level_crossing(p.as_ref(), &dv(&[2.0, 0.0]), &dv(&[-1.0, 0.0]), 0.5, 0.5).is_none());
    }
}
