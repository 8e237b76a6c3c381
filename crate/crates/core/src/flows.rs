//! Deterministic limit flows.
//!
//! * [`flow_bps_snapping`]: geodesic motion on a level set,
//!   `x' = v`, `v' = -(v^T H v / |grad U|^2) grad U`.
//! * [`flow_bps_with_refresh`]: free flight to the tangency set, snapping
//!   in between, and `B+` jumps at prescribed refresh times.
//! * [`flow_bps_high_refresh`] and [`flow_rwm_baseline`]: normalised
//!   steepest descent at constant speed.
//! * [`flow_zigzag_procedure`]: the piecewise-smooth Zig-Zag limit driven
//!   by box QPs on the tangency coordinates.
//!
//! Smooth pieces use an adaptive Dormand-Prince 5(4) pair with event
//! functions located by bisection on the step length.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::boxqp::{solve_boxqp, BoxQpProblem};
use crate::error::{Error, Result};
use crate::linalg::sign;
use crate::potentials::{check_dim, normal, ray_level_crossing, BandSpec, Potential};

/// Stop distance from the minimiser.
pub const SINGULAR_BALL: f64 = 1e-8;
const EVENT_TIME_TOL: f64 = 1e-12;

/// Receives `(t, y, f(y))` for each accepted integrator point.
type Sink<'a> = dyn FnMut(f64, &DVector<f64>, &DVector<f64>) + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Local error tolerance (absolute and relative) of the integrator.
    pub tol: f64,
    pub max_step: f64,
    /// Time guard for flows that are expected to stop on their own.
    pub horizon: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_step: 0.05, horizon: 1e3 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.max_step > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::Domain("flow tolerances, step and horizon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMarker {
    TangencyHit,
    Refresh,
    ZzBoundaryHit(usize),
    /// The tangency set after re-solving the velocity QP.
    ZzDirectionRecompute { tangency: Vec<usize> },
    LevelSetHit,
}

impl FlowMarker {
    pub fn label(&self) -> String {
        match self {
            FlowMarker::TangencyHit => "tangency_hit".into(),
            FlowMarker::Refresh => "refresh".into(),
            FlowMarker::ZzBoundaryHit(j) => format!("zz_boundary_hit_{j}"),
            FlowMarker::ZzDirectionRecompute { .. } => "zz_direction_recompute".into(),
            FlowMarker::LevelSetHit => "level_set_hit".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Horizon,
    LevelSetHit,
    Singularity,
}

/// Position sample with the right derivative `v` and left derivative `v_left`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub v_left: DVector<f64>,
}

/// Zig-Zag limit state at the start of a smooth piece.
#[derive(Debug, Clone, PartialEq)]
pub struct ZzFlowState {
    pub t: f64,
    pub x: DVector<f64>,
    /// Tangency coordinates `K`; the rest form `J`.
    pub tangency: Vec<usize>,
    pub v: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub samples: Vec<FlowSample>,
    pub markers: Vec<(f64, FlowMarker)>,
    pub terminal: Terminal,
    pub zz_pieces: Vec<ZzFlowState>,
}

impl FlowTrajectory {
    fn new() -> Self {
        Self { samples: Vec::new(), markers: Vec::new(), terminal: Terminal::Horizon, zz_pieces: Vec::new() }
    }

    fn push(&mut self, t: f64, x: &DVector<f64>, v: &DVector<f64>) {
        if let Some(last) = self.samples.last_mut() {
            if t <= last.t {
                last.x.copy_from(x);
                last.v.copy_from(v);
                return;
            }
        }
        self.samples.push(FlowSample { t, x: x.clone(), v: v.clone(), v_left: v.clone() });
    }

    /// Records the left derivative for a sample about to be pushed at `t`.
    fn push_left(&mut self, t: f64, x: &DVector<f64>, v_left: &DVector<f64>) {
        self.push(t, x, v_left);
    }

    fn mark(&mut self, t: f64, m: FlowMarker) {
        self.markers.push((t, m));
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    pub fn hit_time(&self) -> Option<f64> {
        self.markers.iter().find(|(_, m)| *m == FlowMarker::LevelSetHit).map(|(t, _)| *t)
    }

    pub fn final_position(&self) -> Option<&DVector<f64>> {
        self.samples.last().map(|s| &s.x)
    }

    /// Cubic Hermite interpolation of the position; `None` outside the span.
    pub fn position_at(&self, t: f64) -> Option<DVector<f64>> {
        let first = self.samples.first()?;
        let last = self.samples.last()?;
        if t < first.t || t > last.t {
            return None;
        }
        let i = self.samples.partition_point(|s| s.t <= t);
        if i == self.samples.len() {
            return Some(last.x.clone());
        }
        let (a, b) = (&self.samples[i - 1], &self.samples[i]);
        let h = b.t - a.t;
        let s = (t - a.t) / h;
        let (s2, s3) = (s * s, s * s * s);
        Some(
            &a.x * (2.0 * s3 - 3.0 * s2 + 1.0)
                + &a.v * (h * (s3 - 2.0 * s2 + s))
                + &b.x * (3.0 * s2 - 2.0 * s3)
                + &b.v_left * (h * (s3 - s2)),
        )
    }

    /// Polygonal length through densely interpolated positions.
    pub fn path_length(&self) -> f64 {
        let mut total = 0.0;
        for w in self.samples.windows(2) {
            let sub = 16;
            let mut prev = w[0].x.clone();
            for k in 1..=sub {
                let t = w[0].t + (w[1].t - w[0].t) * k as f64 / sub as f64;
                let cur = self.position_at(t).expect("inside span");
                total += (&cur - &prev).norm();
                prev = cur;
            }
        }
        total
    }
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

type Rhs<'a> = dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + 'a;
type Events<'a> = dyn Fn(&DVector<f64>) -> Result<Vec<f64>> + 'a;

/// One Dormand-Prince step; returns the fifth-order update, the error
/// vector and the derivative at the new point.
fn dp_step(
    f: &Rhs<'_>,
    y: &DVector<f64>,
    k1: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
    k.push(k1.clone());
    for (stage, row) in A.iter().enumerate().skip(1) {
        let mut yi = y.clone();
        for (j, a) in row.iter().enumerate().take(stage) {
            if *a != 0.0 {
                yi.axpy(h * a, &k[j], 1.0);
            }
        }
        if stage == 6 {
            let k7 = f(&yi)?;
            let mut err = DVector::zeros(y.len());
            for (j, kj) in k.iter().enumerate() {
                err.axpy(h * (A[6].get(j).copied().unwrap_or(0.0) - B4[j]), kj, 1.0);
            }
            err.axpy(-h * B4[6], &k7, 1.0);
            return Ok((yi, err, k7));
        }
        k.push(f(&yi)?);
    }
    unreachable!("the tableau has seven stages")
}

/// Outcome of integrating one smooth piece.
struct Piece {
    t: f64,
    y: DVector<f64>,
    /// Index of the event that stopped the piece, if any.
    event: Option<usize>,
}

/// Integrates `y' = f(y)` from `t0` to `t_end`, stopping at the first event
/// function that crosses from negative to nonnegative. Each accepted point
/// is reported through `sink(t, y, f(y))`.
fn integrate(
    f: &Rhs<'_>,
    events: &Events<'_>,
    y0: DVector<f64>,
    t0: f64,
    t_end: f64,
    cfg: &FlowConfig,
    sink: &mut Sink<'_>,
) -> Result<Piece> {
    let mut t = t0;
    let mut y = y0;
    let mut dy = f(&y)?;
    let mut g = events(&y)?;
    let mut h = (cfg.max_step * 0.1).min(t_end - t0);
    sink(t, &y, &dy);
    let mut rejections = 0usize;
    while t < t_end {
        h = h.min(cfg.max_step).min(t_end - t);
        if h < 1e-14 * (1.0 + t.abs()) {
            if t_end - t <= 1e-14 * (1.0 + t.abs()) {
                break;
            }
            return Err(Error::Integration(format!("step size underflow at t = {t}")));
        }
        let (y_new, err, dy_new) = dp_step(f, &y, &dy, h)?;
        let mut ratio = 0.0f64;
        for i in 0..y.len() {
            let scale = cfg.tol * (1.0 + y[i].abs().max(y_new[i].abs()));
            ratio = ratio.max(err[i].abs() / scale);
        }
        if !ratio.is_finite() {
            return Err(Error::Integration(format!("non-finite state near t = {t}")));
        }
        if ratio > 1.0 {
            rejections += 1;
            if rejections > 10_000 {
                return Err(Error::Integration("too many rejected steps".into()));
            }
            h *= (0.9 * ratio.powf(-0.2)).clamp(0.1, 0.9);
            continue;
        }
        let g_new = events(&y_new)?;
        let fired = |gv: &[f64]| (0..g.len()).find(|&i| g[i] < 0.0 && gv[i] >= 0.0);
        if fired(&g_new).is_some() {
            // shrink the step until the first crossing is bracketed to EVENT_TIME_TOL
            let (mut lo, mut hi) = (0.0, h);
            let mut hit = (y_new.clone(), dy_new.clone(), g_new.clone());
            while hi - lo > EVENT_TIME_TOL {
                let mid = 0.5 * (lo + hi);
                let (ym, _, dym) = dp_step(f, &y, &dy, mid)?;
                let gm = events(&ym)?;
                if fired(&gm).is_some() {
                    hi = mid;
                    hit = (ym, dym, gm);
                } else {
                    lo = mid;
                }
            }
            let idx = fired(&hit.2).expect("bracket keeps the event");
            sink(t + hi, &hit.0, &hit.1);
            return Ok(Piece { t: t + hi, y: hit.0, event: Some(idx) });
        }
        t += h;
        y = y_new;
        dy = dy_new;
        g = g_new;
        sink(t, &y, &dy);
        h *= (0.9 * ratio.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
    }
    Ok(Piece { t, y, event: None })
}

fn singular_gap(p: &dyn Potential, x: &DVector<f64>) -> f64 {
    SINGULAR_BALL - (x - p.minimiser()).norm()
}

fn check_start(p: &dyn Potential, x0: &DVector<f64>, band: Option<&BandSpec>) -> Result<()> {
    check_dim(p, x0)?;
    if singular_gap(p, x0) >= 0.0 {
        return Err(Error::Singularity("start lies at the minimiser".into()));
    }
    if let Some(b) = band {
        let u = p.value(x0);
        if u <= b.level(p) {
            return Err(Error::Precondition(format!("start has U = {u} inside the level set")));
        }
    }
    Ok(())
}

/// `w - 2 (w . n)_+ n`.
pub fn reflect_positive(w: &DVector<f64>, n: &DVector<f64>) -> DVector<f64> {
    let d = n.dot(w);
    if d > 0.0 {
        w - n * (2.0 * d)
    } else {
        w.clone()
    }
}

/// First root of `lambda_t = v . grad U(x + v t)` on `[0, t_max]`.
///
/// Returns `Some(0)` when the start is already tangent (to `1e-12`
/// relative), and `None` when there is no bracket.
pub fn tangency_event_locator(
    x: &DVector<f64>,
    v: &DVector<f64>,
    t_max: f64,
    p: &dyn Potential,
) -> Option<f64> {
    let lam = |t: f64| v.dot(&p.grad(&(x + v * t)));
    let l0 = lam(0.0);
    let scale = v.norm() * p.grad(x).norm();
    if l0.abs() <= 1e-12 * scale {
        return Some(0.0);
    }
    if l0 > 0.0 || !(t_max > 0.0) || lam(t_max) < 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (0.0, t_max);
    while hi - lo > EVENT_TIME_TOL {
        let mid = 0.5 * (lo + hi);
        if lam(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn snapping_rhs<'a>(p: &'a dyn Potential) -> impl Fn(&DVector<f64>) -> Result<DVector<f64>> + 'a {
    move |y: &DVector<f64>| {
        let n = y.len() / 2;
        let x = y.rows(0, n).into_owned();
        let v = y.rows(n, n).into_owned();
        let g = p.grad(&x);
        let g2 = g.norm_squared();
        if !(g2 > 0.0) {
            return Err(Error::Singularity("gradient vanishes on the snapping flow".into()));
        }
        let h = p.hess(&x)?;
        let xi = v.dot(&(&h * &v)) / g2;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&v);
        out.rows_mut(n, n).copy_from(&(g * -xi));
        Ok(out)
    }
}

/// Snapping flow over `[t0, t_end]`, appending to `traj`. Returns the end
/// state and whether the run must stop.
fn snap_segment(
    p: &dyn Potential,
    x: DVector<f64>,
    v: DVector<f64>,
    t0: f64,
    t_end: f64,
    level: Option<f64>,
    cfg: &FlowConfig,
    traj: &mut FlowTrajectory,
) -> Result<(DVector<f64>, DVector<f64>, Option<Terminal>)> {
    let n = x.len();
    let mut y0 = DVector::zeros(2 * n);
    y0.rows_mut(0, n).copy_from(&x);
    y0.rows_mut(n, n).copy_from(&v);
    let rhs = snapping_rhs(p);
    let events = |y: &DVector<f64>| -> Result<Vec<f64>> {
        let x = y.rows(0, n).into_owned();
        let mut g = vec![singular_gap(p, &x)];
        if let Some(level) = level {
            g.push(level - p.value(&x));
        }
        Ok(g)
    };
    let mut sink = |t: f64, y: &DVector<f64>, _: &DVector<f64>| {
        traj.push(t, &y.rows(0, n).into_owned(), &y.rows(n, n).into_owned());
    };
    let piece = integrate(&rhs, &events, y0, t0, t_end, cfg, &mut sink)?;
    let x = piece.y.rows(0, n).into_owned();
    let v = piece.y.rows(n, n).into_owned();
    let stop = match piece.event {
        Some(0) => Some(Terminal::Singularity),
        Some(_) => {
            traj.mark(piece.t, FlowMarker::LevelSetHit);
            Some(Terminal::LevelSetHit)
        }
        None => None,
    };
    Ok((x, v, stop))
}

/// Snapping flow from a tangent start `(x0, v0)` over `[0, horizon]`.
pub fn flow_bps_snapping(
    x0: &DVector<f64>,
    v0: &DVector<f64>,
    p: &dyn Potential,
    horizon: f64,
    cfg: &FlowConfig,
) -> Result<FlowTrajectory> {
    cfg.validate()?;
    check_start(p, x0, None)?;
    check_dim(p, v0)?;
    let g = p.grad(x0);
    if v0.dot(&g).abs() > 1e-8 * g.norm() * v0.norm() {
        return Err(Error::Precondition("snapping flow needs a tangent start v . grad U = 0".into()));
    }
    let mut traj = FlowTrajectory::new();
    let (_, _, stop) = snap_segment(p, x0.clone(), v0.clone(), 0.0, horizon, None, cfg, &mut traj)?;
    traj.terminal = stop.unwrap_or(Terminal::Horizon);
    Ok(traj)
}

/// Low-refresh BPS limit sharing the refresh schedule `(T_n, W_n)` with a
/// sampler run started from `(x0, v0)`.
///
/// The start velocity passes through `B+` as if refreshed at time zero.
pub fn flow_bps_with_refresh(
    x0: &DVector<f64>,
    v0: &DVector<f64>,
    schedule: &[(f64, DVector<f64>)],
    p: &dyn Potential,
    band: &BandSpec,
    horizon: f64,
    cfg: &FlowConfig,
) -> Result<FlowTrajectory> {
    cfg.validate()?;
    check_start(p, x0, Some(band))?;
    check_dim(p, v0)?;
    let level = band.level(p);
    let mut traj = FlowTrajectory::new();
    let mut x = x0.clone();
    let n0 = normal(p, &x).ok_or_else(|| Error::Singularity("start at a critical point".into()))?;
    let mut v = reflect_positive(v0, &n0);
    let mut t = 0.0;
    traj.push(t, &x, &v);
    let mut next = schedule.iter().filter(|(tn, _)| *tn > 0.0).peekable();
    loop {
        let stop_at = next.peek().map_or(horizon, |(tn, _)| tn.min(horizon));
        // free flight until tangency, the level set or the next stop
        let span = stop_at - t;
        let tangency = tangency_event_locator(&x, &v, span, p);
        let flight = tangency.unwrap_or(span);
        if let Some(s) = ray_level_crossing(p, &x, &v, flight, level) {
            x += &v * s;
            t += s;
            traj.push(t, &x, &v);
            traj.mark(t, FlowMarker::LevelSetHit);
            traj.terminal = Terminal::LevelSetHit;
            return Ok(traj);
        }
        x += &v * flight;
        t += flight;
        traj.push(t, &x, &v);
        if tangency.is_some() {
            traj.mark(t, FlowMarker::TangencyHit);
            let n = normal(p, &x).ok_or_else(|| Error::Singularity("flow reached the minimiser".into()))?;
            let speed = v.norm();
            let mut vt = &v - &n * n.dot(&v);
            if vt.norm() > 0.0 {
                vt *= speed / vt.norm();
            }
            let (xe, ve, stop) = snap_segment(p, x, vt, t, stop_at, Some(level), cfg, &mut traj)?;
            x = xe;
            v = ve;
            t = traj.end_time();
            if let Some(stop) = stop {
                traj.terminal = stop;
                return Ok(traj);
            }
        }
        if stop_at >= horizon {
            traj.terminal = Terminal::Horizon;
            return Ok(traj);
        }
        let (_, w) = next.next().expect("peeked");
        let n = normal(p, &x).ok_or_else(|| Error::Singularity("flow reached the minimiser".into()))?;
        let v_left = v.clone();
        v = reflect_positive(w, &n);
        traj.push_left(t, &x, &v_left);
        traj.push(t, &x, &v);
        traj.mark(t, FlowMarker::Refresh);
    }
}

fn descent_flow(x0: &DVector<f64>, p: &dyn Potential, speed: f64, band: &BandSpec, cfg: &FlowConfig) -> Result<FlowTrajectory> {
    cfg.validate()?;
    check_start(p, x0, Some(band))?;
    let level = band.level(p);
    let rhs = move |x: &DVector<f64>| -> Result<DVector<f64>> {
        normal(p, x)
            .map(|n| n * -speed)
            .ok_or_else(|| Error::Singularity("gradient vanishes on the descent flow".into()))
    };
    let events = |x: &DVector<f64>| -> Result<Vec<f64>> { Ok(vec![singular_gap(p, x), level - p.value(x)]) };
    let mut traj = FlowTrajectory::new();
    let mut sink = |t: f64, x: &DVector<f64>, dx: &DVector<f64>| traj.push(t, x, dx);
    let piece = integrate(&rhs, &events, x0.clone(), 0.0, cfg.horizon, cfg, &mut sink)?;
    traj.terminal = match piece.event {
        Some(0) => Terminal::Singularity,
        Some(_) => {
            traj.mark(piece.t, FlowMarker::LevelSetHit);
            Terminal::LevelSetHit
        }
        None => Terminal::Horizon,
    };
    Ok(traj)
}

/// High-refresh BPS limit `x' = -n(x) / sqrt(2 pi)` until `L_gamma`.
pub fn flow_bps_high_refresh(x0: &DVector<f64>, p: &dyn Potential, band: &BandSpec, cfg: &FlowConfig) -> Result<FlowTrajectory> {
    descent_flow(x0, p, 1.0 / (2.0 * PI).sqrt(), band, cfg)
}

/// Random-walk Metropolis fluid limit `x' = -(sigma / sqrt(2 pi)) n(x)`.
pub fn flow_rwm_baseline(
    x0: &DVector<f64>,
    p: &dyn Potential,
    sigma: f64,
    band: &BandSpec,
    cfg: &FlowConfig,
) -> Result<FlowTrajectory> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    descent_flow(x0, p, sigma / (2.0 * PI).sqrt(), band, cfg)
}

/// Strict row diagonal dominance of `h` on the rows in `rows`.
pub fn diagonally_dominant(h: &DMatrix<f64>, rows: &[usize]) -> bool {
    rows.iter().all(|&i| {
        let off: f64 = (0..h.ncols()).filter(|&j| j != i).map(|j| h[(i, j)].abs()).sum();
        h[(i, i)] - off > 0.0
    })
}

/// Tangency coordinate, its velocity and whether it is clipped.
type QpLabel = (usize, f64, bool);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Member {
    /// Non-tangency coordinate with its velocity.
    Free(f64),
    Tangent,
}

fn tangency_threshold(g: &DVector<f64>) -> f64 {
    1e-8 * (1.0 + g.norm())
}

/// Velocity field of the Zig-Zag limit for a fixed partition, with the QP
/// labels of the tangency coordinates.
fn zz_velocity(
    p: &dyn Potential,
    x: &DVector<f64>,
    members: &[Member],
) -> Result<(DVector<f64>, Vec<QpLabel>)> {
    let n = members.len();
    let mut v = DVector::zeros(n);
    let k: Vec<usize> = (0..n).filter(|&i| members[i] == Member::Tangent).collect();
    let j: Vec<usize> = (0..n).filter(|&i| members[i] != Member::Tangent).collect();
    for &i in &j {
        if let Member::Free(vi) = members[i] {
            v[i] = vi;
        }
    }
    if k.is_empty() {
        return Ok((v, Vec::new()));
    }
    let h = p.hess(x)?;
    let hkk = DMatrix::from_fn(k.len(), k.len(), |a, b| h[(k[a], k[b])]);
    let c = DVector::from_fn(k.len(), |a, _| j.iter().map(|&l| h[(k[a], l)] * v[l]).sum());
    let sol = solve_boxqp(&BoxQpProblem { h: hkk.clone(), c: c.clone() })?;
    if diagonally_dominant(&h, &k) {
        let closed = hkk.cholesky().map(|ch| ch.solve(&(-&c)));
        if let Some(closed) = closed {
            let gap = (&closed - &sol.v).amax();
            if gap > 1e-8 {
                return Err(Error::QpFailure(format!("QP and closed form differ by {gap:e} under diagonal dominance")));
            }
        }
    }
    let mut labels = Vec::with_capacity(k.len());
    for (a, &i) in k.iter().enumerate() {
        v[i] = sol.v[a];
        labels.push((i, sol.v[a], sol.labels[a].is_clipped()));
    }
    Ok((v, labels))
}

/// Zig-Zag fluid limit from `x0` until `L_gamma` (or `cfg.horizon`).
///
/// Non-tangency coordinates move at unit speed against their partial
/// derivative. When one reaches `d_j U = 0` it joins the tangency set, the
/// QP is re-solved and clipped coordinates leave with their clipped velocity.
pub fn flow_zigzag_procedure(x0: &DVector<f64>, p: &dyn Potential, band: &BandSpec, cfg: &FlowConfig) -> Result<FlowTrajectory> {
    cfg.validate()?;
    check_start(p, x0, Some(band))?;
    let n = x0.len();
    let level = band.level(p);
    let mut traj = FlowTrajectory::new();
    let mut x = x0.clone();
    let mut t = 0.0;
    let g0 = p.grad(&x);
    let thr = tangency_threshold(&g0);
    let mut members: Vec<Member> = g0
        .iter()
        .map(|gi| if gi.abs() <= thr { Member::Tangent } else { Member::Free(-sign(*gi)) })
        .collect();
    let mut v_left: Option<DVector<f64>> = None;
    loop {
        // re-solve until no tangency coordinate is clipped
        let mut v;
        let mut recomputed = false;
        loop {
            let (vv, labels) = zz_velocity(p, &x, &members)?;
            v = vv;
            let clipped: Vec<_> = labels.iter().filter(|(_, _, c)| *c).collect();
            if clipped.is_empty() {
                break;
            }
            for (i, vi, _) in clipped {
                members[*i] = Member::Free(*vi);
            }
            recomputed = true;
        }
        let tangency: Vec<usize> = (0..n).filter(|&i| members[i] == Member::Tangent).collect();
        if recomputed || !traj.zz_pieces.is_empty() {
            traj.mark(t, FlowMarker::ZzDirectionRecompute { tangency: tangency.clone() });
        }
        traj.zz_pieces.push(ZzFlowState { t, x: x.clone(), tangency, v: v.clone() });
        if let Some(vl) = v_left.take() {
            traj.push_left(t, &x, &vl);
        }
        let frozen = members.clone();
        let rhs = |y: &DVector<f64>| -> Result<DVector<f64>> { Ok(zz_velocity(p, y, &frozen)?.0) };
        let events = |y: &DVector<f64>| -> Result<Vec<f64>> {
            let g = p.grad(y);
            let thr = tangency_threshold(&g);
            let mut out = vec![singular_gap(p, y), level - p.value(y)];
            for i in 0..n {
                out.push(match frozen[i] {
                    Member::Free(vi) => vi * g[i],
                    Member::Tangent => g[i].abs() - 10.0 * thr,
                });
            }
            Ok(out)
        };
        let mut sink = |ts: f64, y: &DVector<f64>, dy: &DVector<f64>| traj.push(ts, y, dy);
        let piece = integrate(&rhs, &events, x.clone(), t, cfg.horizon, cfg, &mut sink)?;
        x = piece.y;
        t = piece.t;
        match piece.event {
            None => {
                traj.terminal = Terminal::Horizon;
                return Ok(traj);
            }
            Some(0) => {
                traj.terminal = Terminal::Singularity;
                return Ok(traj);
            }
            Some(1) => {
                traj.mark(t, FlowMarker::LevelSetHit);
                traj.terminal = Terminal::LevelSetHit;
                return Ok(traj);
            }
            Some(e) => {
                let i = e - 2;
                v_left = Some(traj.samples.last().expect("piece pushed samples").v.clone());
                match members[i] {
                    Member::Free(_) => {
                        traj.mark(t, FlowMarker::ZzBoundaryHit(i));
                        members[i] = Member::Tangent;
                    }
                    Member::Tangent => {
                        members[i] = Member::Free(-sign(p.grad(&x)[i]));
                    }
                }
            }
        }
    }
}
