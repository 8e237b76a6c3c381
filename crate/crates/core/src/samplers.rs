//! The Bouncy Particle, Forward Event-Chain, Zig-Zag and Coordinate samplers
//! as event-driven state machines on `(x, v)` targeting `exp(-U / eps)`.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_engine::{CoordinateRate, CostCounters, EventStrategy, RaySpec};
use crate::linalg::{basis, sign};
use crate::potentials::{check_dim, normal, ray_level_crossing, BandSpec, PotentialRef};
use crate::rng::{exp1, normal_vector, open_unit, rademacher_vector, rayleigh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Bps,
    Fec,
    ZigZag,
    Coordinate,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Bps => "bps",
            SamplerKind::Fec => "fec",
            SamplerKind::ZigZag => "zig_zag",
            SamplerKind::Coordinate => "coordinate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdmpState {
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub t: f64,
    pub eps: f64,
    pub kind: SamplerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Bounce,
    Refresh,
    FecUpdate,
    ZzFlip(usize),
    CsSwitch(usize),
}

impl EventKind {
    pub fn label(self) -> String {
        match self {
            EventKind::Bounce => "bounce".into(),
            EventKind::Refresh => "refresh".into(),
            EventKind::FecUpdate => "fec_update".into(),
            EventKind::ZzFlip(i) => format!("zz_flip_{i}"),
            EventKind::CsSwitch(n) => format!("cs_switch_{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub x: DVector<f64>,
    pub v_pre: DVector<f64>,
    pub v_post: DVector<f64>,
}

/// Velocity refreshment. `Schedule` fixes the times `T_n` and the draws
/// `W_n` in advance so that several runs can share them.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum RefreshPolicy {
    #[default]
    None,
    Rate(f64),
    Schedule(Vec<(f64, DVector<f64>)>),
}

impl RefreshPolicy {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            RefreshPolicy::None => Ok(()),
            RefreshPolicy::Rate(rho) if *rho >= 0.0 && rho.is_finite() => Ok(()),
            RefreshPolicy::Rate(rho) => Err(Error::Domain(format!("refresh rate must be >= 0, got {rho}"))),
            RefreshPolicy::Schedule(items) => {
                let mut prev = 0.0;
                for (t, w) in items {
                    if !(*t >= prev) {
                        return Err(Error::Domain("refresh schedule must be nondecreasing".into()));
                    }
                    if w.len() != dim {
                        return Err(Error::DimensionMismatch { expected: dim, got: w.len() });
                    }
                    prev = *t;
                }
                Ok(())
            }
        }
    }
}

/// Cursor over a [`RefreshPolicy`] during one run.
#[derive(Debug, Clone)]
pub struct RefreshClock {
    policy: RefreshPolicy,
    cursor: usize,
    pending: Option<f64>,
}

impl RefreshClock {
    pub fn new(policy: RefreshPolicy) -> Self {
        Self { policy, cursor: 0, pending: None }
    }

    /// Absolute time of the next refresh after `now` and its prescribed draw.
    fn peek<R: Rng + ?Sized>(&mut self, now: f64, rng: &mut R) -> Option<(f64, Option<DVector<f64>>)> {
        match &self.policy {
            RefreshPolicy::None => None,
            RefreshPolicy::Rate(rho) if *rho <= 0.0 => None,
            RefreshPolicy::Rate(rho) => {
                let t = *self.pending.get_or_insert_with(|| now + exp1(rng) / rho);
                Some((t, None))
            }
            RefreshPolicy::Schedule(items) => {
                while self.cursor < items.len() && items[self.cursor].0 < now {
                    self.cursor += 1;
                }
                items.get(self.cursor).map(|(t, w)| (*t, Some(w.clone())))
            }
        }
    }

    fn consume(&mut self) {
        self.pending = None;
        if matches!(self.policy, RefreshPolicy::Schedule(_)) {
            self.cursor += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Action {
    Bounce,
    Flip(usize),
    Refresh(Option<DVector<f64>>),
    Horizon,
}

/// The next scheduled event, `dt` after the current state time.
#[derive(Debug, Clone, PartialEq)]
struct Plan {
    dt: f64,
    action: Action,
}

/// A sampler for `exp(-U / eps)` with a fixed event-simulation strategy.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub kind: SamplerKind,
    pub potential: PotentialRef,
    pub eps: f64,
    pub strategy: EventStrategy,
}

impl Sampler {
    pub fn new(kind: SamplerKind, potential: PotentialRef, eps: f64, strategy: EventStrategy) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Domain(format!("eps must be positive, got {eps}")));
        }
        strategy.validate()?;
        if strategy == EventStrategy::Exact && !potential.is_quadratic() {
            return Err(Error::Configuration("exact inversion needs a quadratic potential".into()));
        }
        Ok(Self { kind, potential, eps, strategy })
    }

    /// Exact inversion when available, thinning otherwise.
    pub fn with_auto_strategy(kind: SamplerKind, potential: PotentialRef, eps: f64) -> Result<Self> {
        let strategy = EventStrategy::auto(potential.as_ref());
        Self::new(kind, potential, eps, strategy)
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    /// Velocity law used at initialisation and refreshment.
    pub fn draw_velocity<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        match self.kind {
            SamplerKind::Bps | SamplerKind::Fec => normal_vector(n, rng),
            SamplerKind::ZigZag => rademacher_vector(n, rng),
            SamplerKind::Coordinate => {
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                basis(n, rng.random_range(0..n)) * s
            }
        }
    }

    pub fn check_velocity(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        let ok = match self.kind {
            SamplerKind::Bps | SamplerKind::Fec => v.norm() > 0.0 && v.iter().all(|c| c.is_finite()),
            SamplerKind::ZigZag => v.iter().all(|c| c.abs() == 1.0),
            SamplerKind::Coordinate => {
                v.iter().filter(|c| **c != 0.0).count() == 1 && v.iter().all(|c| *c == 0.0 || c.abs() == 1.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("velocity {v:?} is not valid for {}", self.kind.name())))
        }
    }

    pub fn initial_state<R: Rng + ?Sized>(
        &self,
        x: DVector<f64>,
        v: Option<DVector<f64>>,
        rng: &mut R,
    ) -> Result<PdmpState> {
        check_dim(self.potential.as_ref(), &x)?;
        let v = match v {
            Some(v) => v,
            None => self.draw_velocity(rng),
        };
        self.check_velocity(&v)?;
        Ok(PdmpState { x, v, t: 0.0, eps: self.eps, kind: self.kind })
    }

    fn ray<'a>(&'a self, s: &PdmpState) -> Result<RaySpec<'a>> {
        RaySpec::new(self.potential.as_ref(), s.x.clone(), s.v.clone(), self.eps)
    }

    fn plan<R: Rng + ?Sized>(
        &self,
        s: &PdmpState,
        until: f64,
        clock: &mut RefreshClock,
        rng: &mut R,
        counters: &mut CostCounters,
    ) -> Result<Plan> {
        let refresh = clock.peek(s.t, rng);
        let to_horizon = (until - s.t).max(0.0);
        let to_refresh = refresh.as_ref().map_or(f64::INFINITY, |(t, _)| (t - s.t).max(0.0));
        let cap = to_horizon.min(to_refresh);
        let ray = self.ray(s)?;
        let exact = self.strategy == EventStrategy::Exact;
        let jump = match self.kind {
            SamplerKind::ZigZag => {
                let g = self.potential.grad(&s.x);
                let hv = if exact { Some(self.potential.hess(&s.x)? * &s.v) } else { None };
                let mut best: Option<(f64, usize)> = None;
                for i in 0..self.dim() {
                    let limit = best.map_or(cap, |(t, _)| t);
                    let affine = hv.as_ref().map(|hv| (s.v[i] * g[i], s.v[i] * hv[i]));
                    let rate = CoordinateRate { ray: &ray, index: i };
                    let t = self.strategy.propose(&rate, affine, self.eps, 1.0, limit, rng, counters)?;
                    if let Some(t) = t {
                        if best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, i));
                        }
                    }
                }
                best.map(|(t, i)| (t, Action::Flip(i)))
            }
            _ => {
                let affine = if exact {
                    let (a, b) = ray.affine_coefficients()?;
                    if !(b > 0.0) {
                        return Err(Error::ConvexityViolation(format!("v^T H v = {b} is not positive")));
                    }
                    Some((a, b))
                } else {
                    None
                };
                let speed = s.v.norm();
                self.strategy
                    .propose(&ray, affine, self.eps, speed, cap, rng, counters)?
                    .map(|t| (t, Action::Bounce))
            }
        };
        Ok(match jump {
            Some((dt, action)) => Plan { dt, action },
            None if to_refresh <= to_horizon => {
                Plan { dt: to_refresh, action: Action::Refresh(refresh.and_then(|(_, w)| w)) }
            }
            None => Plan { dt: to_horizon, action: Action::Horizon },
        })
    }

    fn apply<R: Rng + ?Sized>(
        &self,
        s: &mut PdmpState,
        plan: Plan,
        clock: &mut RefreshClock,
        rng: &mut R,
        counters: &mut CostCounters,
    ) -> Result<Option<EventRecord>> {
        s.x += &s.v * plan.dt;
        s.t += plan.dt;
        let v_pre = s.v.clone();
        let kind = match plan.action {
            Action::Horizon => return Ok(None),
            Action::Refresh(w) => {
                clock.consume();
                s.v = match w {
                    Some(w) => w,
                    None => self.draw_velocity(rng),
                };
                counters.record_refresh();
                EventKind::Refresh
            }
            Action::Flip(i) => {
                s.v[i] = -s.v[i];
                counters.record_jump();
                EventKind::ZzFlip(i)
            }
            Action::Bounce => {
                let kind = self.bounce(s, rng)?;
                counters.record_jump();
                kind
            }
        };
        Ok(Some(EventRecord { time: s.t, kind, x: s.x.clone(), v_pre, v_post: s.v.clone() }))
    }

    fn bounce<R: Rng + ?Sized>(&self, s: &mut PdmpState, rng: &mut R) -> Result<EventKind> {
        let singular = || Error::Singularity(format!("gradient vanishes at {:?}", s.x.as_slice()));
        match self.kind {
            SamplerKind::Bps => {
                let n = normal(self.potential.as_ref(), &s.x).ok_or_else(singular)?;
                s.v = reflect(&s.v, &n);
                Ok(EventKind::Bounce)
            }
            SamplerKind::Fec => {
                let n = normal(self.potential.as_ref(), &s.x).ok_or_else(singular)?;
                s.v = fec_velocity(&n, rng);
                Ok(EventKind::FecUpdate)
            }
            SamplerKind::Coordinate => {
                let g = self.potential.grad(&s.x);
                let m = select_coordinate(&g, rng).ok_or_else(singular)?;
                s.v = basis(self.dim(), m) * -sign(g[m]);
                Ok(EventKind::CsSwitch(m))
            }
            SamplerKind::ZigZag => unreachable!("zig-zag events are flips"),
        }
    }

    /// Advances to the next event, or to `until` if nothing happens first.
    pub fn step<R: Rng + ?Sized>(
        &self,
        s: &mut PdmpState,
        until: f64,
        clock: &mut RefreshClock,
        rng: &mut R,
        counters: &mut CostCounters,
    ) -> Result<Option<EventRecord>> {
        let plan = self.plan(s, until, clock, rng, counters)?;
        self.apply(s, plan, clock, rng, counters)
    }
}

/// `v - 2 n (n^T v)` for a unit normal `n`.
pub fn reflect(v: &DVector<f64>, n: &DVector<f64>) -> DVector<f64> {
    v - n * (2.0 * n.dot(v))
}

/// `-xi n + (I - n n^T) w` with `xi ~ Rayleigh(1)` and `w ~ N(0, I)`.
pub fn fec_velocity<R: Rng + ?Sized>(n: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let xi = rayleigh(rng);
    let w = normal_vector(n.len(), rng);
    let tangential = &w - n * n.dot(&w);
    tangential - n * xi
}

/// Index `m` drawn with probability `|g_m| / sum |g_k|`.
pub fn select_coordinate<R: Rng + ?Sized>(g: &DVector<f64>, rng: &mut R) -> Option<usize> {
    let total: f64 = g.iter().map(|c| c.abs()).sum();
    if !(total > 0.0) {
        return None;
    }
    let target = open_unit(rng) * total;
    let mut acc = 0.0;
    let mut last = None;
    for (m, c) in g.iter().enumerate() {
        if *c == 0.0 {
            continue;
        }
        acc += c.abs();
        last = Some(m);
        if target <= acc {
            return Some(m);
        }
    }
    last
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub horizon: f64,
    pub record_events: bool,
    pub max_recorded_events: usize,
    pub sample_stride: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { horizon: 1e3, record_events: false, max_recorded_events: 100_000, sample_stride: None }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_state: PdmpState,
    pub hit: bool,
    pub hit_time: Option<f64>,
    /// First time the path leaves `B_gamma`, either into `L_gamma` or above it.
    pub band_exit_time: Option<f64>,
    /// Counters frozen at the band exit.
    pub counters_at_exit: Option<CostCounters>,
    pub counters: CostCounters,
    /// Per-coordinate flip counts (Zig-Zag) or switch counts (Coordinate).
    pub coordinate_events: Vec<u64>,
    pub events: Vec<EventRecord>,
    pub samples: Vec<(f64, DVector<f64>)>,
}

impl RunResult {
    pub fn total_jumps(&self) -> u64 {
        self.counters.accepted_jumps + self.counters.refresh_jumps
    }
}

struct SampleGrid {
    stride: f64,
    next: f64,
}

impl SampleGrid {
    fn emit(&mut self, from: &PdmpState, dt: f64, out: &mut Vec<(f64, DVector<f64>)>) {
        let end = from.t + dt;
        while self.next <= end {
            out.push((self.next, &from.x + &from.v * (self.next - from.t)));
            self.next += self.stride;
        }
    }
}

/// Runs until the path enters `L_gamma` or `opts.horizon` elapses.
///
/// Entry is detected inside flights as well as at events. Fails with a
/// precondition error when `x0` already lies in `L_gamma`.
pub fn run_until_hit<R: Rng + ?Sized>(
    sampler: &Sampler,
    band: &BandSpec,
    x0: DVector<f64>,
    v0: Option<DVector<f64>>,
    refresh: RefreshPolicy,
    opts: &RunOptions,
    rng: &mut R,
) -> Result<RunResult> {
    simulate(sampler, Some(band), x0, v0, refresh, opts, rng)
}

/// Runs for `opts.horizon` time units, optionally stopping at `L_gamma`.
pub fn simulate<R: Rng + ?Sized>(
    sampler: &Sampler,
    band: Option<&BandSpec>,
    x0: DVector<f64>,
    v0: Option<DVector<f64>>,
    refresh: RefreshPolicy,
    opts: &RunOptions,
    rng: &mut R,
) -> Result<RunResult> {
    let p = sampler.potential.as_ref();
    if !(opts.horizon >= 0.0) {
        return Err(Error::Domain(format!("horizon must be >= 0, got {}", opts.horizon)));
    }
    refresh.validate(sampler.dim())?;
    let mut state = sampler.initial_state(x0, v0, rng)?;
    let levels = band.map(|b| (b.level(p), b.upper_level(p)));
    let mut band_exit_time = None;
    let mut counters = CostCounters::default();
    let mut counters_at_exit = None;
    if let Some((lo, hi)) = levels {
        let u0 = p.value(&state.x);
        if u0 <= lo {
            return Err(Error::Precondition(format!("start has U = {u0} inside the level set U <= {lo}")));
        }
        if u0 > hi {
            band_exit_time = Some(0.0);
            counters_at_exit = Some(counters);
        }
    }
    let mut clock = RefreshClock::new(refresh);
    let mut grid = opts.sample_stride.map(|stride| SampleGrid { stride, next: 0.0 });
    let mut samples = Vec::new();
    let mut events = Vec::new();
    let mut coordinate_events = vec![0u64; sampler.dim()];
    let mut hit_time = None;

    loop {
        let plan = sampler.plan(&state, opts.horizon, &mut clock, rng, &mut counters)?;
        if let Some((lo, hi)) = levels {
            if band_exit_time.is_none() && p.value(&(&state.x + &state.v * plan.dt)) > hi {
                let s = upward_crossing(p, &state.x, &state.v, plan.dt, hi);
                band_exit_time = Some(state.t + s);
                counters_at_exit = Some(counters);
            }
            if let Some(s) = ray_level_crossing(p, &state.x, &state.v, plan.dt, lo) {
                if let Some(g) = grid.as_mut() {
                    g.emit(&state, s, &mut samples);
                }
                state.x += &state.v * s;
                state.t += s;
                hit_time = Some(state.t);
                if band_exit_time.is_none() {
                    band_exit_time = hit_time;
                    counters_at_exit = Some(counters);
                }
                break;
            }
        }
        if let Some(g) = grid.as_mut() {
            g.emit(&state, plan.dt, &mut samples);
        }
        let Some(ev) = sampler.apply(&mut state, plan, &mut clock, rng, &mut counters)? else {
            break;
        };
        match ev.kind {
            EventKind::ZzFlip(i) | EventKind::CsSwitch(i) => coordinate_events[i] += 1,
            _ => {}
        }
        if opts.record_events && events.len() < opts.max_recorded_events {
            events.push(ev);
        }
    }

    Ok(RunResult {
        final_state: state,
        hit: hit_time.is_some(),
        hit_time,
        band_exit_time,
        counters_at_exit,
        counters,
        coordinate_events,
        events,
        samples,
    })
}

/// First `s` in `(0, s_max]` with `U(x + s v) > level`, given `U(x) <= level`
/// and `U(x + s_max v) > level`. Convexity along the ray makes it unique.
fn upward_crossing(
    p: &dyn crate::potentials::Potential,
    x: &DVector<f64>,
    v: &DVector<f64>,
    s_max: f64,
    level: f64,
) -> f64 {
    let (mut lo, mut hi) = (0.0, s_max);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if p.value(&(x + v * mid)) > level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}
