//! Receding-horizon eco-driving on a differentiable emission model.
//!
//! The decision variable is the acceleration sequence `a_0..a_{N-1}`. Speeds
//! and positions follow `v(t+1) = v(t) + a(t)·dt` and the trapezoidal
//! position update, so every state constraint is linear in `a` and is stored
//! as a row `g·a ≤ h`. The solver runs projected gradient on the box with a
//! quadratic penalty on the rows, then restores exact feasibility by
//! alternating projections.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{FactorVector, Fuel, VehicleType};
use crate::surrogate::{SurrogateError, SurrogateFamily};

/// Weight on speed relative to emissions; with `w_e = 1` both terms are about
/// 1–2 per second for a car cruising at 10–15 m/s.
pub const DEFAULT_SPEED_WEIGHT: f64 = 0.1;
/// Constraint tolerance of returned trajectories.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EcoError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("infeasible problem; violated: {}", describe(.0))]
    Infeasible(Vec<Violation>),
    #[error(transparent)]
    Model(#[from] SurrogateError),
}

fn describe(v: &[Violation]) -> String {
    v.iter().map(|v| format!("{:?} by {:.3e}", v.constraint, v.amount)).collect::<Vec<_>>().join(", ")
}

/// Per-step emission with its partial derivatives in speed and acceleration.
pub trait EmissionModel: Sync {
    fn emission_with_grad(&self, v: f64, a: f64, x: &FactorVector) -> Result<(f64, f64, f64), SurrogateError>;
}

impl EmissionModel for SurrogateFamily {
    fn emission_with_grad(&self, v: f64, a: f64, x: &FactorVector) -> Result<(f64, f64, f64), SurrogateError> {
        self.predict_with_grad(v, a, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcoProblem {
    pub horizon: usize,
    pub dt: f64,
    pub w_e: f64,
    pub w_v: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    /// Initial position, m.
    pub q1: f64,
    /// Initial speed, m/s.
    pub q2: f64,
    /// Terminal position window `[q3, q4]`, m.
    pub q3: f64,
    pub q4: f64,
    /// Minimum terminal speed, m/s.
    pub q5: f64,
    pub env: FactorVector,
}

impl Default for EcoProblem {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 1.0,
            w_e: 1.0,
            w_v: DEFAULT_SPEED_WEIGHT,
            v_min: 0.0,
            v_max: 20.0,
            a_min: -3.0,
            a_max: 2.0,
            q1: 0.0,
            q2: 10.0,
            q3: 0.0,
            q4: f64::INFINITY,
            q5: 0.0,
            env: FactorVector {
                grade: 0.0,
                temp: 60.0,
                humidity: 55.0,
                vtype: VehicleType::PassengerCar,
                fuel: Fuel::Gasoline,
                age: 2019,
            },
        }
    }
}

impl EcoProblem {
    pub fn validate(&self) -> Result<(), EcoError> {
        let bad = |m: String| Err(EcoError::Problem(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.w_e >= 0.0 && self.w_v >= 0.0 && self.w_e.is_finite() && self.w_v.is_finite()) {
            return bad("weights must be finite and non-negative".into());
        }
        if !(self.a_min < 0.0 && 0.0 < self.a_max && self.a_min.is_finite() && self.a_max.is_finite()) {
            return bad(format!("need a_min < 0 < a_max, got [{}, {}]", self.a_min, self.a_max));
        }
        if !(self.v_min <= self.q2 && self.q2 <= self.v_max && self.v_max.is_finite()) {
            return bad(format!("need v_min ≤ q2 ≤ v_max, got {} ≤ {} ≤ {}", self.v_min, self.q2, self.v_max));
        }
        if !(self.q3 <= self.q4) || self.q1.is_nan() || self.q3.is_nan() || self.q5.is_nan() {
            return bad(format!("need q3 ≤ q4, got [{}, {}]", self.q3, self.q4));
        }
        self.env.validate().map_err(|e| EcoError::Problem(e.to_string()))
    }
}

/// Which of the constraints a row or violation refers to; `t` is the time index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    /// `x(t) ≥ x(0)`.
    PositionMonotone(usize),
    SpeedMin(usize),
    SpeedMax(usize),
    AccelMin(usize),
    AccelMax(usize),
    /// `x(N) ≥ q3`.
    TerminalMin,
    /// `x(N) ≤ q4`.
    TerminalMax,
    /// `v(N) ≥ q5`.
    TerminalSpeed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `N + 1` positions.
    pub positions: Vec<f64>,
    /// `N + 1` speeds.
    pub speeds: Vec<f64>,
    /// `N` accelerations.
    pub accels: Vec<f64>,
    /// `N` per-step emissions, grams.
    pub emissions: Vec<f64>,
    pub total_emission: f64,
    pub objective: f64,
    pub violations: Vec<Violation>,
}

impl Trajectory {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    /// `t, x, v, a, e_step`; the final row has empty `a` and `e_step`.
    pub fn to_csv(&self, dt: f64) -> String {
        let mut out = String::from("t_s,x_m,v_mps,a_mps2,e_step_g\n");
        for i in 0..self.speeds.len() {
            let (a, e) = match (self.accels.get(i), self.emissions.get(i)) {
                (Some(a), Some(e)) => (a.to_string(), e.to_string()),
                _ => (String::new(), String::new()),
            };
            let _ = writeln!(out, "{},{},{},{},{}", i as f64 * dt, self.positions[i], self.speeds[i], a, e);
        }
        out
    }
}

/// A linear constraint `g·a ≤ h`.
#[derive(Debug, Clone)]
struct Row {
    g: Vec<f64>,
    h: f64,
    label: Constraint,
}

impl Row {
    fn excess(&self, a: &[f64]) -> f64 {
        self.g.iter().zip(a).map(|(g, a)| g * a).sum::<f64>() - self.h
    }
}

/// State constraints c5, c6, c8, c9 as rows over `a`.
fn constraint_rows(p: &EcoProblem) -> Vec<Row> {
    let n = p.horizon;
    let dt = p.dt;
    let mut rows = Vec::with_capacity(3 * n + 3);
    // x(t) − q1 = t·dt·q2 + dt²·Σ_{s<t} (t − s − ½)·a_s
    let pos = |t: usize| -> Vec<f64> {
        (0..n)
            .map(|s| if s < t { dt * dt * (t as f64 - s as f64 - 0.5) } else { 0.0 })
            .collect()
    };
    let vel = |t: usize| -> Vec<f64> { (0..n).map(|s| if s < t { dt } else { 0.0 }).collect() };
    for t in 1..=n {
        let gv = vel(t);
        rows.push(Row {
            g: gv.clone(),
            h: p.v_max - p.q2,
            label: Constraint::SpeedMax(t),
        });
        rows.push(Row {
            g: gv.iter().map(|g| -g).collect(),
            h: p.q2 - p.v_min,
            label: Constraint::SpeedMin(t),
        });
        rows.push(Row {
            g: pos(t).iter().map(|g| -g).collect(),
            h: t as f64 * dt * p.q2,
            label: Constraint::PositionMonotone(t),
        });
    }
    let drift = p.q1 + n as f64 * dt * p.q2;
    if p.q4.is_finite() {
        rows.push(Row {
            g: pos(n),
            h: p.q4 - drift,
            label: Constraint::TerminalMax,
        });
    }
    if p.q3.is_finite() {
        rows.push(Row {
            g: pos(n).iter().map(|g| -g).collect(),
            h: drift - p.q3,
            label: Constraint::TerminalMin,
        });
    }
    rows.push(Row {
        g: vel(n).iter().map(|g| -g).collect(),
        h: p.q2 - p.q5,
        label: Constraint::TerminalSpeed,
    });
    rows
}

/// Integrates the dynamics and scores `a_seq`. Violations are reported, not repaired.
pub fn rollout(a_seq: &[f64], p: &EcoProblem, model: &dyn EmissionModel) -> Result<Trajectory, EcoError> {
    p.validate()?;
    if a_seq.len() != p.horizon {
        return Err(EcoError::Problem(format!(
            "need {} accelerations, got {}",
            p.horizon,
            a_seq.len()
        )));
    }
    let n = p.horizon;
    let mut positions = Vec::with_capacity(n + 1);
    let mut speeds = Vec::with_capacity(n + 1);
    let mut emissions = Vec::with_capacity(n);
    let (mut x, mut v) = (p.q1, p.q2);
    positions.push(x);
    speeds.push(v);
    let mut objective = 0.0;
    for &a in a_seq {
        let (e, _, _) = model.emission_with_grad(v, a, &p.env)?;
        emissions.push(e * p.dt);
        objective += p.w_e * e - p.w_v * v;
        let next = v + a * p.dt;
        x += 0.5 * (v + next) * p.dt;
        v = next;
        positions.push(x);
        speeds.push(v);
    }
    let violations = violations_of(&positions, &speeds, a_seq, p, FEASIBILITY_TOL);
    Ok(Trajectory {
        total_emission: emissions.iter().sum(),
        positions,
        speeds,
        accels: a_seq.to_vec(),
        emissions,
        objective,
        violations,
    })
}

/// Checks c5–c9 on explicit states.
fn violations_of(x: &[f64], v: &[f64], a: &[f64], p: &EcoProblem, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut check = |amount: f64, constraint: Constraint| {
        if amount > tol {
            out.push(Violation { constraint, amount });
        }
    };
    let n = a.len();
    for t in 0..=n {
        check(x[0] - x[t], Constraint::PositionMonotone(t));
        check(p.v_min - v[t], Constraint::SpeedMin(t));
        check(v[t] - p.v_max, Constraint::SpeedMax(t));
    }
    for (t, &a) in a.iter().enumerate() {
        check(p.a_min - a, Constraint::AccelMin(t));
        check(a - p.a_max, Constraint::AccelMax(t));
    }
    check(p.q3 - x[n], Constraint::TerminalMin);
    check(x[n] - p.q4, Constraint::TerminalMax);
    check(p.q5 - v[n], Constraint::TerminalSpeed);
    out
}

/// Objective `Σ (w_e·M(a_t, v_t) − w_v·v_t)` and its gradient in `a` by adjoint accumulation.
pub fn objective_and_gradient(
    a_seq: &[f64],
    p: &EcoProblem,
    model: &dyn EmissionModel,
) -> Result<(f64, Vec<f64>), EcoError> {
    let n = a_seq.len();
    let mut grad = vec![0.0; n];
    let mut d_v = vec![0.0; n];
    let mut v = p.q2;
    let mut j = 0.0;
    for t in 0..n {
        let (e, de_dv, de_da) = model.emission_with_grad(v, a_seq[t], &p.env)?;
        j += p.w_e * e - p.w_v * v;
        grad[t] = p.w_e * de_da;
        d_v[t] = p.w_e * de_dv - p.w_v;
        v += a_seq[t] * p.dt;
    }
    // v_t depends on a_s for every s < t with ∂v_t/∂a_s = dt
    let mut lambda = 0.0;
    for t in (0..n).rev() {
        grad[t] += p.dt * lambda;
        lambda += d_v[t];
    }
    Ok((j, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Penalty stages; the weight grows by `penalty_growth` per stage.
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// Cross-check against exhaustive search on `grid_levels` accelerations
    /// per step when the horizon is at most `grid_max_horizon`.
    pub grid_check: bool,
    pub grid_levels: usize,
    pub grid_max_horizon: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            outer_iterations: 6,
            inner_iterations: 150,
            initial_penalty: 1.0,
            penalty_growth: 10.0,
            grid_check: true,
            grid_levels: 5,
            grid_max_horizon: 8,
        }
    }
}

fn clamp_box(a: &mut [f64], p: &EcoProblem) {
    for v in a.iter_mut() {
        *v = v.clamp(p.a_min, p.a_max);
    }
}

fn max_excess(rows: &[Row], a: &[f64]) -> f64 {
    rows.iter().map(|r| r.excess(a)).fold(0.0, f64::max)
}

/// Alternating projections onto the rows and the box. Returns the final
/// point and its largest row excess.
fn restore_feasibility(rows: &[Row], p: &EcoProblem, a: &[f64]) -> (Vec<f64>, f64) {
    let mut a = a.to_vec();
    clamp_box(&mut a, p);
    let norms: Vec<f64> = rows.iter().map(|r| r.g.iter().map(|g| g * g).sum()).collect();
    let target = 1e-3 * FEASIBILITY_TOL;
    for _ in 0..20_000 {
        if max_excess(rows, &a) <= target {
            break;
        }
        for (r, &nn) in rows.iter().zip(&norms) {
            let ex = r.excess(&a);
            if ex > 0.0 && nn > 0.0 {
                // aim slightly inside so the box clamp does not undo the step
                let step = (ex + 0.5 * target) / nn;
                for (ai, gi) in a.iter_mut().zip(&r.g) {
                    *ai -= step * gi;
                }
            }
        }
        clamp_box(&mut a, p);
    }
    let ex = max_excess(rows, &a);
    (a, ex)
}

fn infeasibility(rows: &[Row], a: &[f64]) -> Vec<Violation> {
    rows.iter()
        .filter_map(|r| {
            let ex = r.excess(a);
            (ex > FEASIBILITY_TOL).then_some(Violation {
                constraint: r.label,
                amount: ex,
            })
        })
        .collect()
}

fn penalized(
    a: &[f64],
    p: &EcoProblem,
    rows: &[Row],
    mu: f64,
    model: &dyn EmissionModel,
) -> Result<(f64, Vec<f64>), EcoError> {
    let (mut f, mut g) = objective_and_gradient(a, p, model)?;
    for r in rows {
        let ex = r.excess(a);
        if ex > 0.0 {
            f += mu * ex * ex;
            for (gi, ri) in g.iter_mut().zip(&r.g) {
                *gi += 2.0 * mu * ex * ri;
            }
        }
    }
    Ok((f, g))
}

/// Projected gradient with backtracking on the penalized objective.
fn descend(
    a0: &[f64],
    p: &EcoProblem,
    rows: &[Row],
    mu: f64,
    iters: usize,
    model: &dyn EmissionModel,
) -> Result<Vec<f64>, EcoError> {
    let mut a = a0.to_vec();
    let (mut f, mut g) = penalized(&a, p, rows, mu, model)?;
    let mut eta = 1.0 / (1.0 + mu * p.dt.powi(4) * (p.horizon as f64).powi(3));
    for _ in 0..iters {
        let mut accepted = false;
        while eta > 1e-14 {
            let mut cand: Vec<f64> = a.iter().zip(&g).map(|(a, g)| a - eta * g).collect();
            clamp_box(&mut cand, p);
            let step: Vec<f64> = cand.iter().zip(&a).map(|(c, a)| c - a).collect();
            let lin: f64 = step.iter().zip(&g).map(|(s, g)| s * g).sum();
            let sq: f64 = step.iter().map(|s| s * s).sum();
            if sq == 0.0 {
                return Ok(a);
            }
            let (fc, gc) = penalized(&cand, p, rows, mu, model)?;
            if fc <= f + lin + 0.5 * sq / eta {
                a = cand;
                f = fc;
                g = gc;
                eta *= 1.5;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(a)
}

/// Best feasible action sequence on a `levels`-point grid per step, if any.
pub fn grid_search(
    p: &EcoProblem,
    levels: usize,
    model: &dyn EmissionModel,
) -> Result<Option<(Vec<f64>, f64)>, EcoError> {
    p.validate()?;
    if levels < 2 {
        return Err(EcoError::Problem("grid search needs at least 2 levels".into()));
    }
    let n = p.horizon;
    let grid: Vec<f64> = (0..levels)
        .map(|k| p.a_min + (p.a_max - p.a_min) * k as f64 / (levels - 1) as f64)
        .collect();
    let rows = constraint_rows(p);
    let total = levels.checked_pow(n as u32).ok_or_else(|| EcoError::Problem("grid too large".into()))?;
    let best = (0..total)
        .into_par_iter()
        .map(|code| {
            let mut c = code;
            let a: Vec<f64> = (0..n)
                .map(|_| {
                    let k = c % levels;
                    c /= levels;
                    grid[k]
                })
                .collect();
            if max_excess(&rows, &a) > FEASIBILITY_TOL {
                return Ok(None);
            }
            let (j, _) = objective_and_gradient(&a, p, model)?;
            Ok(Some((a, j)))
        })
        .try_reduce(|| None, |x, y| Ok::<_, EcoError>(better(x, y)))?;
    Ok(best)
}

fn better(x: Option<(Vec<f64>, f64)>, y: Option<(Vec<f64>, f64)>) -> Option<(Vec<f64>, f64)> {
    match (x, y) {
        (None, y) => y,
        (x, None) => x,
        // ties break toward the lexicographically smaller sequence for determinism
        (Some(x), Some(y)) => {
            if y.1 < x.1 || (y.1 == x.1 && y.0.partial_cmp(&x.0) == Some(std::cmp::Ordering::Less)) {
                Some(y)
            } else {
                Some(x)
            }
        }
    }
}

/// Pointwise speed-maximizing sequence: full acceleration until `v_max`.
pub fn max_speed_sequence(p: &EcoProblem) -> Vec<f64> {
    let mut v = p.q2;
    (0..p.horizon)
        .map(|_| {
            let a = ((p.v_max - v) / p.dt).clamp(p.a_min, p.a_max);
            v += a * p.dt;
            a
        })
        .collect()
}

/// Minimizes the horizon objective from `init` (or zeros). The result is
/// feasible within [`FEASIBILITY_TOL`] and no worse than a feasible `init`.
pub fn solve_horizon(
    p: &EcoProblem,
    init: Option<&[f64]>,
    model: &dyn EmissionModel,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, Trajectory), EcoError> {
    p.validate()?;
    let n = p.horizon;
    let rows = constraint_rows(p);
    let start: Vec<f64> = match init {
        Some(a) if a.len() == n => a.to_vec(),
        Some(a) => return Err(EcoError::Problem(format!("need {n} initial accelerations, got {}", a.len()))),
        None => vec![0.0; n],
    };
    let (feasible_start, ex) = restore_feasibility(&rows, p, &start);
    if ex > FEASIBILITY_TOL {
        return Err(EcoError::Infeasible(infeasibility(&rows, &feasible_start)));
    }

    if p.w_e == 0.0 {
        let bang = max_speed_sequence(p);
        if max_excess(&rows, &bang) <= FEASIBILITY_TOL {
            let traj = rollout(&bang, p, model)?;
            return Ok((bang, traj));
        }
    }

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let mut boxed = start.clone();
    clamp_box(&mut boxed, p);
    if max_excess(&rows, &boxed) <= FEASIBILITY_TOL {
        candidates.push(boxed);
    }
    candidates.push(feasible_start.clone());
    let mut seeds = vec![feasible_start];
    if opts.grid_check && n <= opts.grid_max_horizon {
        if let Some((a, _)) = grid_search(p, opts.grid_levels, model)? {
            candidates.push(a.clone());
            seeds.push(a);
        }
    }
    for seed in seeds {
        let mut a = seed;
        let mut mu = opts.initial_penalty;
        for _ in 0..opts.outer_iterations.max(1) {
            a = descend(&a, p, &rows, mu, opts.inner_iterations, model)?;
            let (fixed, ex) = restore_feasibility(&rows, p, &a);
            if ex <= FEASIBILITY_TOL {
                candidates.push(fixed);
            }
            mu *= opts.penalty_growth;
        }
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for c in candidates {
        let (j, _) = objective_and_gradient(&c, p, model)?;
        best = better(best, Some((c, j)));
    }
    let (a, _) = best.expect("the restored start is always a candidate");
    let traj = rollout(&a, p, model)?;
    Ok((a, traj))
}

/// Supplies the horizon problem at each closed-loop step.
pub trait HorizonSchedule {
    /// `None` ends the run early.
    fn problem_at(&self, step: usize, x: f64, v: f64) -> Option<EcoProblem>;
}

/// Same problem every step, with the terminal window carried along relative
/// to the current position.
pub struct StaticSchedule(pub EcoProblem);

impl HorizonSchedule for StaticSchedule {
    fn problem_at(&self, _step: usize, x: f64, v: f64) -> Option<EcoProblem> {
        let b = &self.0;
        Some(EcoProblem {
            q1: x,
            q2: v,
            q3: x + (b.q3 - b.q1),
            q4: x + (b.q4 - b.q1),
            ..b.clone()
        })
    }
}

/// Approach to a signal at `stop_line` that turns green at step `green_step`.
/// While red, the horizon ends exactly at the green step and the vehicle must
/// then be within `approach_window` metres short of the line with at least
/// `exit_speed`. After green, the base horizon runs with only `x(N) ≥ x(0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntersectionSchedule {
    pub base: EcoProblem,
    pub stop_line: f64,
    pub green_step: usize,
    pub approach_window: f64,
    pub exit_speed: f64,
}

impl Default for IntersectionSchedule {
    fn default() -> Self {
        Self {
            base: EcoProblem {
                horizon: 10,
                v_max: 15.0,
                q2: 15.0,
                ..EcoProblem::default()
            },
            stop_line: 250.0,
            green_step: 40,
            approach_window: 15.0,
            exit_speed: 3.0,
        }
    }
}

impl HorizonSchedule for IntersectionSchedule {
    fn problem_at(&self, step: usize, x: f64, v: f64) -> Option<EcoProblem> {
        let mut p = EcoProblem {
            q1: x,
            q2: v.clamp(self.base.v_min, self.base.v_max),
            ..self.base.clone()
        };
        if step < self.green_step && x < self.stop_line {
            p.horizon = self.green_step - step;
            p.q3 = self.stop_line - self.approach_window;
            p.q4 = self.stop_line;
            p.q5 = self.exit_speed;
        } else {
            p.q3 = x;
            p.q4 = f64::INFINITY;
            p.q5 = p.v_min;
        }
        Some(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    /// Applied trajectory; its objective uses the step-0 problem's weights.
    pub trajectory: Trajectory,
    /// Step and violated constraints if a horizon became infeasible.
    pub failure: Option<(usize, Vec<Violation>)>,
}

/// Applies the first action of each horizon solution and re-solves, warm
/// starting from the previous solution shifted by one step.
pub fn run_receding_horizon(
    schedule: &dyn HorizonSchedule,
    q1: f64,
    q2: f64,
    total_steps: usize,
    model: &dyn EmissionModel,
    opts: &SolverOptions,
) -> Result<ClosedLoop, EcoError> {
    let (mut x, mut v) = (q1, q2);
    let mut positions = vec![x];
    let mut speeds = vec![v];
    let mut accels = Vec::with_capacity(total_steps);
    let mut emissions = Vec::with_capacity(total_steps);
    let mut objective = 0.0;
    let mut warm: Vec<f64> = Vec::new();
    let mut failure = None;
    let mut weights: Option<EcoProblem> = None;
    for step in 0..total_steps {
        let Some(p) = schedule.problem_at(step, x, v) else {
            break;
        };
        let w = weights.get_or_insert_with(|| p.clone());
        let init: Vec<f64> = (0..p.horizon)
            .map(|k| warm.get(k + 1).or(warm.last()).copied().unwrap_or(0.0))
            .collect();
        let (a_seq, _) = match solve_horizon(&p, Some(&init), model, opts) {
            Ok(s) => s,
            Err(EcoError::Infeasible(v)) => {
                failure = Some((step, v));
                break;
            }
            Err(e) => return Err(e),
        };
        let a = a_seq[0];
        let (e, _, _) = model.emission_with_grad(v, a, &p.env)?;
        objective += w.w_e * e - w.w_v * v;
        emissions.push(e * p.dt);
        let next = v + a * p.dt;
        x += 0.5 * (v + next) * p.dt;
        v = next;
        accels.push(a);
        positions.push(x);
        speeds.push(v);
        warm = a_seq;
    }
    Ok(ClosedLoop {
        trajectory: Trajectory {
            total_emission: emissions.iter().sum(),
            positions,
            speeds,
            accels,
            emissions,
            objective,
            violations: Vec::new(),
        },
        failure,
    })
}

/// Emission of an explicit speed profile, step `t` evaluated at
/// `(v_t, (v_{t+1} − v_t)/dt)`, matching closed-loop accounting.
pub fn profile_emission(
    speeds: &[f64],
    dt: f64,
    env: &FactorVector,
    model: &dyn EmissionModel,
) -> Result<f64, EcoError> {
    let mut total = 0.0;
    for w in speeds.windows(2) {
        let (e, _, _) = model.emission_with_grad(w[0], (w[1] - w[0]) / dt, env)?;
        total += e * dt;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Grade,
    Temperature,
    Humidity,
}

/// Values held for the parameters not being swept.
pub const SWEEP_FIXED: (f64, f64, f64) = (0.0, 60.0, 55.0);

/// Solves `base` once per value of `param`, holding the other two of grade,
/// temperature and humidity at [`SWEEP_FIXED`].
pub fn environment_sweep(
    base: &EcoProblem,
    param: SweepParameter,
    values: &[f64],
    model: &dyn EmissionModel,
    opts: &SolverOptions,
) -> Result<Vec<Trajectory>, EcoError> {
    values
        .par_iter()
        .map(|&value| {
            let mut p = base.clone();
            (p.env.grade, p.env.temp, p.env.humidity) = SWEEP_FIXED;
            match param {
                SweepParameter::Grade => p.env.grade = value,
                SweepParameter::Temperature => p.env.temp = value,
                SweepParameter::Humidity => p.env.humidity = value,
            }
            solve_horizon(&p, None, model, opts).map(|(_, t)| t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `e = 1 + 0.02·v² + 0.3·max(a, 0)² + 0.1·a`, smooth enough for checks.
    struct Quadratic;

    impl EmissionModel for Quadratic {
        fn emission_with_grad(&self, v: f64, a: f64, _: &FactorVector) -> Result<(f64, f64, f64), SurrogateError> {
            let ap = a.max(0.0);
            Ok((1.0 + 0.02 * v * v + 0.3 * ap * ap + 0.1 * a, 0.04 * v, 0.6 * ap + 0.1))
        }
    }

    fn problem(n: usize) -> EcoProblem {
        EcoProblem {
            horizon: n,
            ..EcoProblem::default()
        }
    }

    #[test]
    fn rollout_kinematics() {
        let p = problem(4);
        let t = rollout(&[0.0; 4], &p, &Quadratic).unwrap();
        assert_eq!(t.speeds, vec![10.0; 5]);
        assert_eq!(*t.positions.last().unwrap(), 40.0);
        let p = EcoProblem {
            horizon: 2,
            q2: 5.0,
            ..EcoProblem::default()
        };
        let t = rollout(&[1.0, -1.0], &p, &Quadratic).unwrap();
        assert_eq!(t.speeds, vec![5.0, 6.0, 5.0]);
        assert_eq!(t.positions, vec![0.0, 5.5, 11.0]);
    }

    #[test]
    fn rollout_objective_is_hand_sum() {
        let p = EcoProblem {
            horizon: 3,
            q2: 4.0,
            w_v: 0.5,
            ..EcoProblem::default()
        };
        let a = [1.0, 0.5, -2.0];
        let t = rollout(&a, &p, &Quadratic).unwrap();
        let mut v = 4.0;
        let mut j = 0.0;
        for a in a {
            j += Quadratic.emission_with_grad(v, a, &p.env).unwrap().0 - 0.5 * v;
            v += a;
        }
        assert!((t.objective - j).abs() < 1e-12);
    }

    #[test]
    fn rollout_reports_violations() {
        let p = EcoProblem {
            horizon: 3,
            q2: 1.0,
            ..EcoProblem::default()
        };
        let t = rollout(&[-1.0, -1.0, 0.0], &p, &Quadratic).unwrap();
        assert!(t.violations.iter().any(|v| v.constraint == Constraint::SpeedMin(2)));
        assert!(rollout(&[0.0], &p, &Quadratic).is_err());
    }

    #[test]
    fn rows_match_rollout_states() {
        let p = EcoProblem {
            horizon: 6,
            q1: 3.0,
            q2: 7.0,
            q3: 10.0,
            q4: 60.0,
            q5: 2.0,
            ..EcoProblem::default()
        };
        let a = [0.3, -1.2, 2.0, 0.0, -0.7, 1.1];
        let t = rollout(&a, &p, &Quadratic).unwrap();
        for r in constraint_rows(&p) {
            let expected = match r.label {
                Constraint::SpeedMax(k) => t.speeds[k] - p.v_max,
                Constraint::SpeedMin(k) => p.v_min - t.speeds[k],
                Constraint::PositionMonotone(k) => p.q1 - t.positions[k],
                Constraint::TerminalMax => t.positions[6] - p.q4,
                Constraint::TerminalMin => p.q3 - t.positions[6],
                Constraint::TerminalSpeed => p.q5 - t.speeds[6],
                _ => unreachable!(),
            };
            assert!((r.excess(&a) - expected).abs() < 1e-9, "{:?}", r.label);
        }
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let p = EcoProblem {
            horizon: 5,
            q2: 6.0,
            ..EcoProblem::default()
        };
        let a = [0.4, -0.3, 1.0, 0.2, -0.5];
        let (_, g) = objective_and_gradient(&a, &p, &Quadratic).unwrap();
        for s in 0..5 {
            let h = 1e-6;
            let mut ap = a;
            ap[s] += h;
            let mut am = a;
            am[s] -= h;
            let fd = (objective_and_gradient(&ap, &p, &Quadratic).unwrap().0
                - objective_and_gradient(&am, &p, &Quadratic).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[s]).abs() < 1e-6 * (1.0 + fd.abs()), "{s}: {fd} vs {}", g[s]);
        }
    }

    #[test]
    fn speed_weight_only_gives_bang_trajectory() {
        let p = EcoProblem {
            horizon: 8,
            w_e: 0.0,
            q2: 12.0,
            v_max: 17.0,
            ..EcoProblem::default()
        };
        let (a, t) = solve_horizon(&p, None, &Quadratic, &SolverOptions::default()).unwrap();
        assert_eq!(a, vec![2.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.speeds, vec![12.0, 14.0, 16.0, 17.0, 17.0, 17.0, 17.0, 17.0, 17.0]);
    }

    #[test]
    fn solution_is_feasible_and_beats_start() {
        let p = EcoProblem {
            horizon: 12,
            q2: 8.0,
            q3: 80.0,
            q4: 90.0,
            q5: 5.0,
            ..EcoProblem::default()
        };
        let (a, t) = solve_horizon(&p, None, &Quadratic, &SolverOptions::default()).unwrap();
        assert!(t.is_feasible(), "{:?}", t.violations);
        let start = rollout(&vec![0.0; 12], &p, &Quadratic).unwrap();
        assert!(!start.is_feasible());
        assert_eq!(a.len(), 12);
        let guess = vec![0.0; 12];
        let p2 = EcoProblem {
            q3: 0.0,
            q4: f64::INFINITY,
            q5: 0.0,
            ..p.clone()
        };
        let (_, t2) = solve_horizon(&p2, Some(&guess), &Quadratic, &SolverOptions::default()).unwrap();
        assert!(t2.objective <= rollout(&guess, &p2, &Quadratic).unwrap().objective + 1e-12);
    }

    #[test]
    fn grid_cross_check() {
        let p = EcoProblem {
            horizon: 5,
            q2: 8.0,
            q3: 35.0,
            q4: 45.0,
            ..EcoProblem::default()
        };
        let no_grid = SolverOptions {
            grid_check: false,
            ..SolverOptions::default()
        };
        let (_, t) = solve_horizon(&p, None, &Quadratic, &no_grid).unwrap();
        let (_, j_grid) = grid_search(&p, 5, &Quadratic).unwrap().unwrap();
        assert!(t.objective - j_grid <= 0.02 * j_grid.abs(), "{} vs {}", t.objective, j_grid);
    }

    #[test]
    fn infeasible_problem_is_reported() {
        let p = EcoProblem {
            horizon: 3,
            q2: 5.0,
            q3: 500.0,
            q4: 600.0,
            ..EcoProblem::default()
        };
        match solve_horizon(&p, None, &Quadratic, &SolverOptions::default()) {
            Err(EcoError::Infeasible(v)) => assert!(v.iter().any(|v| v.constraint == Constraint::TerminalMin)),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn problem_validation() {
        let mut p = problem(3);
        p.q3 = 10.0;
        p.q4 = 5.0;
        assert!(p.validate().is_err());
        let mut p = problem(0);
        assert!(p.validate().is_err());
        p.horizon = 2;
        p.a_min = 0.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn receding_horizon_static_matches_open_loop() {
        let base = problem(15);
        let (_, open) = solve_horizon(&base, None, &Quadratic, &SolverOptions::default()).unwrap();
        let closed = run_receding_horizon(&StaticSchedule(base.clone()), 0.0, 10.0, 15, &Quadratic, &SolverOptions::default())
            .unwrap();
        assert!(closed.failure.is_none());
        let rel = (closed.trajectory.objective - open.objective).abs() / open.objective.abs();
        assert!(rel <= 0.05, "{} vs {}", closed.trajectory.objective, open.objective);
    }

    #[test]
    fn intersection_run_respects_the_line() {
        let sched = IntersectionSchedule::default();
        let run = run_receding_horizon(&sched, 0.0, 15.0, 60, &Quadratic, &SolverOptions::default()).unwrap();
        assert!(run.failure.is_none(), "{:?}", run.failure);
        let t = &run.trajectory;
        assert_eq!(t.accels.len(), 60);
        for k in 0..=sched.green_step {
            assert!(t.positions[k] <= sched.stop_line + FEASIBILITY_TOL);
        }
        assert!(t.positions[sched.green_step] >= sched.stop_line - sched.approach_window - FEASIBILITY_TOL);
        assert!(t.speeds.iter().all(|&v| v >= -FEASIBILITY_TOL && v <= 15.0 + FEASIBILITY_TOL));
    }

    #[test]
    fn sweep_holds_fixed_values() {
        let base = EcoProblem {
            horizon: 4,
            ..EcoProblem::default()
        };
        let one = environment_sweep(&base, SweepParameter::Temperature, &[60.0], &Quadratic, &SolverOptions::default())
            .unwrap();
        let (_, direct) = solve_horizon(&base, None, &Quadratic, &SolverOptions::default()).unwrap();
        assert_eq!(one, vec![direct]);
    }

    #[test]
    fn csv_export() {
        let t = rollout(&[1.0, 0.0], &problem(2), &Quadratic).unwrap();
        let csv = t.to_csv(1.0);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().ends_with(",,"));
    }
}
