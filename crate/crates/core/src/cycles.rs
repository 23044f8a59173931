//! Synthetic driving cycles: random walk, stop-and-go sinusoid, piecewise
//! plateaus, IDM signal approach, and eco-glide signal approach.
//!
//! Every generator ends in [`enforce_bounds`], so all cycles satisfy
//! `0 ≤ v ≤ V_MAX` and `A_MIN ≤ Δv/dt ≤ A_MAX`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::INPUT_BOUNDS;
use crate::oracle::{DrivingCycle, OracleError};

pub const A_MIN: f64 = INPUT_BOUNDS[1].0;
pub const A_MAX: f64 = INPUT_BOUNDS[1].1;
pub const V_MAX: f64 = INPUT_BOUNDS[0].1;
/// Speeds below this count as idle.
pub const IDLE_SPEED: f64 = 0.1;

#[derive(Debug, Error)]
pub enum CycleError {
    #[error("invalid cycle spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RandomWalk,
    Sinusoidal,
    Piecewise,
    IdmApproach,
    EcoGlide,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::RandomWalk,
        Strategy::Sinusoidal,
        Strategy::Piecewise,
        Strategy::IdmApproach,
        Strategy::EcoGlide,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Strategy::RandomWalk => "random_walk",
            Strategy::Sinusoidal => "sinusoidal",
            Strategy::Piecewise => "piecewise",
            Strategy::IdmApproach => "idm_approach",
            Strategy::EcoGlide => "eco_glide",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Strategy {
    type Err = CycleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.token() == s)
            .ok_or_else(|| CycleError::Spec(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomWalkParams {
    pub accel_range: (f64, f64),
    pub initial_speed: f64,
}

impl Default for RandomWalkParams {
    fn default() -> Self {
        Self {
            accel_range: (-1.5, 3.0),
            initial_speed: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidalParams {
    pub mean: f64,
    pub amplitude: f64,
    /// Seconds.
    pub period: f64,
    /// Standard deviation of additive Gaussian noise, m/s.
    pub noise: f64,
}

impl Default for SinusoidalParams {
    fn default() -> Self {
        Self {
            mean: 10.0,
            amplitude: 8.0,
            period: 60.0,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiecewiseParams {
    pub speed_range: (f64, f64),
    /// Plateau durations, seconds.
    pub hold_range: (f64, f64),
    /// Magnitude of ramp accelerations and decelerations, m/s².
    pub accel_range: (f64, f64),
}

impl Default for PiecewiseParams {
    fn default() -> Self {
        Self {
            speed_range: (0.0, 30.0),
            hold_range: (10.0, 60.0),
            accel_range: (0.5, 2.5),
        }
    }
}

/// Intelligent driver model constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Time headway, s.
    pub headway: f64,
    pub a_max: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    pub delta: f64,
    /// Jam distance, m.
    pub s0: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 15.0,
            headway: 1.5,
            a_max: 1.5,
            b: 2.0,
            delta: 4.0,
            s0: 2.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<(), CycleError> {
        let ok = [self.v0, self.headway, self.a_max, self.b, self.delta]
            .iter()
            .all(|p| p.is_finite() && *p > 0.0)
            && self.s0.is_finite()
            && self.s0 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CycleError::Spec("IDM parameters must be positive".into()))
        }
    }

    /// IDM acceleration at speed `v` with an optional leader `(gap, approach rate)`.
    pub fn acceleration(&self, v: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / self.v0).powf(self.delta);
        let interaction = match leader {
            None => 0.0,
            Some((gap, dv)) => {
                let s_star = self.s0 + (v * self.headway + v * dv / (2.0 * (self.a_max * self.b).sqrt())).max(0.0);
                (s_star / gap.max(1e-3)).powi(2)
            }
        };
        self.a_max * (free - interaction)
    }
}

/// Single signal ahead of the vehicle: red from t = 0 until `red_duration`, then green.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalParams {
    /// Distance from the start to the stop line, m.
    pub distance: f64,
    pub red_duration: f64,
    pub initial_speed: f64,
}

impl Default for SignalParams {
    fn default() -> Self {
        Self {
            distance: 250.0,
            red_duration: 45.0,
            initial_speed: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlideParams {
    /// Deceleration into the glide, m/s².
    pub decel: f64,
    /// Acceleration after the stop line, m/s².
    pub resume_accel: f64,
    /// Glides slower than this are infeasible and fall back to IDM.
    pub min_speed: f64,
}

impl Default for GlideParams {
    fn default() -> Self {
        Self {
            decel: 1.0,
            resume_accel: 1.5,
            min_speed: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleSpec {
    pub strategy: Strategy,
    /// Seconds; the cycle has `round(duration / dt)` samples.
    pub duration: f64,
    pub dt: f64,
    pub seed: u64,
    pub random_walk: RandomWalkParams,
    pub sinusoidal: SinusoidalParams,
    pub piecewise: PiecewiseParams,
    pub idm: IdmParams,
    pub signal: SignalParams,
    pub glide: GlideParams,
}

impl Default for CycleSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::RandomWalk,
            duration: 600.0,
            dt: 1.0,
            seed: 0,
            random_walk: RandomWalkParams::default(),
            sinusoidal: SinusoidalParams::default(),
            piecewise: PiecewiseParams::default(),
            idm: IdmParams::default(),
            signal: SignalParams::default(),
            glide: GlideParams::default(),
        }
    }
}

impl CycleSpec {
    pub fn new(strategy: Strategy, duration: f64, seed: u64) -> Self {
        Self {
            strategy,
            duration,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CycleError> {
        if !(self.dt > 0.0 && self.dt.is_finite() && self.duration.is_finite() && self.duration >= self.dt) {
            return Err(CycleError::Spec(format!(
                "need duration ≥ dt > 0, got duration {} and dt {}",
                self.duration, self.dt
            )));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Clamps each step to the speed and acceleration bounds, walking forward from
/// the first sample.
pub fn enforce_bounds(targets: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(targets.len());
    let mut prev: Option<f64> = None;
    for &t in targets {
        let v = match prev {
            None => t.clamp(0.0, V_MAX),
            Some(p) => t.clamp((p + A_MIN * dt).max(0.0), (p + A_MAX * dt).min(V_MAX)),
        };
        out.push(v);
        prev = Some(v);
    }
    out
}

fn finish(targets: Vec<f64>, dt: f64) -> Result<DrivingCycle, CycleError> {
    Ok(DrivingCycle::new(enforce_bounds(&targets, dt), dt)?)
}

/// `v(t+1) = max(0, v(t) + a·dt)` with `a ~ U(accel_range)`, capped at `V_MAX`.
pub fn random_walk(spec: &CycleSpec) -> Result<DrivingCycle, CycleError> {
    spec.validate()?;
    let (lo, hi) = spec.random_walk.accel_range;
    if !(lo < hi && lo >= A_MIN && hi <= A_MAX) {
        return Err(CycleError::Spec(format!("random-walk accel range ({lo}, {hi}) outside bounds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut v = spec.random_walk.initial_speed.clamp(0.0, V_MAX);
    let mut speeds = Vec::with_capacity(spec.samples());
    speeds.push(v);
    while speeds.len() < spec.samples() {
        let a = rng.gen_range(lo..hi);
        v = (v + a * spec.dt).clamp(0.0, V_MAX);
        speeds.push(v);
    }
    finish(speeds, spec.dt)
}

/// `v(t) = mean + amplitude·sin(2πt/period) + noise`, clamped at zero.
pub fn sinusoidal(spec: &CycleSpec) -> Result<DrivingCycle, CycleError> {
    spec.validate()?;
    let p = &spec.sinusoidal;
    if !(p.period > 0.0 && p.noise >= 0.0 && p.amplitude >= 0.0 && p.amplitude <= p.mean) {
        return Err(CycleError::Spec("sinusoid needs 0 ≤ amplitude ≤ mean, period > 0, noise ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, p.noise).map_err(|e| CycleError::Spec(e.to_string()))?;
    let targets = (0..spec.samples())
        .map(|i| {
            let t = i as f64 * spec.dt;
            let eps = if p.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (p.mean + p.amplitude * (2.0 * std::f64::consts::PI * t / p.period).sin() + eps).max(0.0)
        })
        .collect();
    finish(targets, spec.dt)
}

/// A constant-speed plateau reached by a ramp from the previous plateau.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub speed: f64,
    /// Ramp length into this plateau, seconds; stretched when the ramp would
    /// exceed the acceleration bounds.
    pub ramp: f64,
    pub hold: f64,
}

/// Speeds of a linear ramp from `from` to `to` (exclusive of `from`), at least
/// `duration` long and never steeper than the acceleration bounds.
pub fn ramp(from: f64, to: f64, duration: f64, dt: f64) -> Vec<f64> {
    let dv = to - from;
    let bound = if dv >= 0.0 { A_MAX } else { -A_MIN };
    let needed = (dv.abs() / (bound * dt) - 1e-9).ceil().max(0.0) as usize;
    let steps = ((duration / dt).round() as usize).max(needed);
    (1..=steps).map(|k| from + dv * k as f64 / steps as f64).collect()
}

/// Cycle from explicit plateaus; the first segment's ramp starts from rest at `start`.
pub fn piecewise_from_segments(start: f64, segments: &[Segment], dt: f64) -> Result<DrivingCycle, CycleError> {
    let mut speeds = vec![start];
    for s in segments {
        let from = *speeds.last().expect("non-empty");
        speeds.extend(ramp(from, s.speed, s.ramp, dt));
        let hold = (s.hold / dt).round() as usize;
        speeds.extend(std::iter::repeat_n(s.speed, hold));
    }
    finish(speeds, dt)
}

/// Random plateaus joined by constant-acceleration ramps, truncated to the requested duration.
pub fn piecewise(spec: &CycleSpec) -> Result<DrivingCycle, CycleError> {
    spec.validate()?;
    let p = &spec.piecewise;
    let ok = p.speed_range.0 >= 0.0
        && p.speed_range.0 <= p.speed_range.1
        && p.speed_range.1 <= V_MAX
        && p.hold_range.0 > 0.0
        && p.hold_range.0 <= p.hold_range.1
        && p.accel_range.0 > 0.0
        && p.accel_range.0 <= p.accel_range.1;
    if !ok {
        return Err(CycleError::Spec("invalid piecewise ranges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let n = spec.samples();
    let mut v = 0.0;
    let mut segments = Vec::new();
    let mut t = 0.0;
    while t < n as f64 * spec.dt {
        let speed = draw(&mut rng, p.speed_range);
        let accel = draw(&mut rng, p.accel_range);
        let segment = Segment {
            speed,
            ramp: (speed - v).abs() / accel,
            hold: draw(&mut rng, p.hold_range),
        };
        t += segment.ramp + segment.hold;
        v = speed;
        segments.push(segment);
    }
    let full = piecewise_from_segments(0.0, &segments, spec.dt)?;
    Ok(DrivingCycle::new(full.speeds()[..n.min(full.len())].to_vec(), spec.dt)?)
}

/// IDM driver approaching a signal: a stopped virtual leader sits on the stop
/// line while red and disappears at green.
pub fn idm_approach(spec: &CycleSpec) -> Result<DrivingCycle, CycleError> {
    spec.validate()?;
    spec.idm.validate()?;
    let sig = &spec.signal;
    if !(sig.distance > 0.0 && sig.red_duration >= 0.0 && sig.initial_speed >= 0.0) {
        return Err(CycleError::Spec("invalid signal parameters".into()));
    }
    let dt = spec.dt;
    let mut x = 0.0;
    let mut v = sig.initial_speed.min(V_MAX);
    let mut speeds = vec![v];
    for i in 1..spec.samples() {
        let t = (i - 1) as f64 * dt;
        let leader = (t < sig.red_duration && x < sig.distance).then_some((sig.distance - x, v));
        let a = spec.idm.acceleration(v, leader).clamp(A_MIN, A_MAX);
        let next = (v + a * dt).clamp(0.0, V_MAX);
        x += 0.5 * (v + next) * dt;
        v = next;
        speeds.push(v);
    }
    finish(speeds, dt)
}

/// Outcome of [`eco_glide`].
#[derive(Debug, Clone, PartialEq)]
pub struct GlideOutcome {
    pub cycle: DrivingCycle,
    /// Coast speed reached before the stop line; `None` when no glide was needed.
    pub coast_speed: Option<f64>,
    /// Set when no glide reaches the line at green and IDM behavior was used.
    pub fell_back: bool,
}

/// Time to the stop line when decelerating from `v0` to `vc` at `decel`, then
/// holding `vc`.
fn glide_arrival(v0: f64, vc: f64, decel: f64, distance: f64) -> f64 {
    let t_d = (v0 - vc) / decel;
    let d_d = 0.5 * (v0 + vc) * t_d;
    if d_d >= distance {
        // reaches the line while still braking
        let disc = (v0 * v0 - 2.0 * decel * distance).max(0.0);
        return (v0 - disc.sqrt()) / decel;
    }
    t_d + (distance - d_d) / vc
}

/// Parametric glide: slow early to a coast speed chosen so the stop line is
/// reached as the light turns green, then accelerate back to the initial speed.
pub fn eco_glide(spec: &CycleSpec) -> Result<GlideOutcome, CycleError> {
    spec.validate()?;
    let sig = &spec.signal;
    let g = &spec.glide;
    if !(g.decel > 0.0 && g.resume_accel > 0.0 && g.min_speed > 0.0) {
        return Err(CycleError::Spec("invalid glide parameters".into()));
    }
    if !(sig.distance > 0.0 && sig.red_duration >= 0.0) {
        return Err(CycleError::Spec("invalid signal parameters".into()));
    }
    let v0 = sig.initial_speed.min(V_MAX);
    let dt = spec.dt;
    let n = spec.samples();
    if v0 > 0.0 && sig.distance / v0 >= sig.red_duration {
        return Ok(GlideOutcome {
            cycle: finish(vec![v0; n], dt)?,
            coast_speed: None,
            fell_back: false,
        });
    }
    let feasible = v0 > g.min_speed && glide_arrival(v0, g.min_speed, g.decel, sig.distance) >= sig.red_duration;
    if !feasible {
        return Ok(GlideOutcome {
            cycle: idm_approach(spec)?,
            coast_speed: None,
            fell_back: true,
        });
    }
    // arrival time decreases in the coast speed
    let (mut lo, mut hi) = (g.min_speed, v0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if glide_arrival(v0, mid, g.decel, sig.distance) >= sig.red_duration {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let vc = lo;
    let t_d = (v0 - vc) / g.decel;
    let t_line = glide_arrival(v0, vc, g.decel, sig.distance);
    let speeds = (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            if t <= t_d {
                v0 - g.decel * t
            } else if t <= t_line {
                vc
            } else {
                (vc + g.resume_accel * (t - t_line)).min(v0)
            }
        })
        .collect();
    Ok(GlideOutcome {
        cycle: finish(speeds, dt)?,
        coast_speed: Some(vc),
        fell_back: false,
    })
}

/// Dispatches on `spec.strategy`.
pub fn generate(spec: &CycleSpec) -> Result<DrivingCycle, CycleError> {
    match spec.strategy {
        Strategy::RandomWalk => random_walk(spec),
        Strategy::Sinusoidal => sinusoidal(spec),
        Strategy::Piecewise => piecewise(spec),
        Strategy::IdmApproach => idm_approach(spec),
        Strategy::EcoGlide => eco_glide(spec).map(|g| g.cycle),
    }
}

/// Seconds with speed below [`IDLE_SPEED`].
pub fn idle_seconds(c: &DrivingCycle) -> f64 {
    c.speeds().iter().filter(|&&v| v < IDLE_SPEED).count() as f64 * c.dt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCycle {
    pub strategy: Strategy,
    /// Position within its strategy.
    pub index: usize,
    pub cycle: DrivingCycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    pub duration: f64,
    pub dt: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            duration: 600.0,
            dt: 1.0,
        }
    }
}

/// Per-cycle spec for the suite: strategy parameters are drawn from `seed`,
/// the strategy, and the index, so suites with different `n` share prefixes.
pub fn suite_spec(strategy: Strategy, index: usize, seed: u64, opts: &SuiteOptions) -> CycleSpec {
    let tag = Strategy::ALL.iter().position(|s| *s == strategy).expect("listed") as u64;
    let cycle_seed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag << 32)
        .wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(cycle_seed);
    let mut spec = CycleSpec {
        strategy,
        duration: opts.duration,
        dt: opts.dt,
        seed: cycle_seed,
        ..CycleSpec::default()
    };
    match strategy {
        Strategy::RandomWalk => {
            spec.random_walk.initial_speed = rng.gen_range(0.0..10.0);
        }
        Strategy::Sinusoidal => {
            let mean = rng.gen_range(6.0..20.0);
            spec.sinusoidal = SinusoidalParams {
                mean,
                amplitude: rng.gen_range(0.3..1.0) * mean,
                period: rng.gen_range(30.0..120.0),
                noise: rng.gen_range(0.0..1.0),
            };
        }
        Strategy::Piecewise => {}
        Strategy::IdmApproach | Strategy::EcoGlide => {
            spec.signal = SignalParams {
                distance: rng.gen_range(150.0..400.0),
                red_duration: rng.gen_range(20.0..60.0),
                initial_speed: rng.gen_range(10.0..18.0),
            };
            spec.idm.v0 = spec.signal.initial_speed;
        }
    }
    spec
}

/// `n_per_strategy` cycles of each strategy, grouped by strategy.
pub fn generate_suite(n_per_strategy: usize, seed: u64, opts: &SuiteOptions) -> Result<Vec<LabeledCycle>, CycleError> {
    if n_per_strategy == 0 {
        return Err(CycleError::Spec("need at least one cycle per strategy".into()));
    }
    let mut out = Vec::with_capacity(5 * n_per_strategy);
    for strategy in Strategy::ALL {
        for index in 0..n_per_strategy {
            let cycle = generate(&suite_spec(strategy, index, seed, opts))?;
            out.push(LabeledCycle { strategy, index, cycle });
        }
    }
    Ok(out)
}
