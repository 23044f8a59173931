//! Cycle-total comparison of a model against the reference over scenarios × cycles.
//!
//! Each evaluation yields one signed percentage error
//! `(model total − reference total) / reference total × 100`. Aggregates are
//! computed over the sorted error list, so they do not depend on evaluation order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycles::{LabeledCycle, Strategy};
use crate::factors::FactorVector;
use crate::oracle::{DrivingCycle, OpModeTable};
use crate::surrogate::{SurrogateError, SurrogateFamily};

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("no scenarios or no cycles to evaluate")]
    Empty,
    #[error("every evaluation was skipped (non-positive reference totals)")]
    AllSkipped,
    #[error(transparent)]
    Model(#[from] SurrogateError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that can total the grams emitted over a cycle.
pub trait CycleModel: Sync {
    fn cycle_total(&self, cycle: &DrivingCycle, x: &FactorVector) -> Result<f64, ValidationError>;
}

impl CycleModel for OpModeTable {
    fn cycle_total(&self, cycle: &DrivingCycle, x: &FactorVector) -> Result<f64, ValidationError> {
        Ok(self.cycle_emission(cycle, x))
    }
}

impl CycleModel for SurrogateFamily {
    fn cycle_total(&self, cycle: &DrivingCycle, x: &FactorVector) -> Result<f64, ValidationError> {
        PerStep(|v, a, x: &FactorVector| self.predict(v, a, x)).cycle_total(cycle, x)
    }
}

/// Adapts a per-step emission function `(v, a, x) -> grams per second` to a cycle total.
pub struct PerStep<F>(pub F);

impl<F> CycleModel for PerStep<F>
where
    F: Fn(f64, f64, &FactorVector) -> Result<f64, SurrogateError> + Sync,
{
    fn cycle_total(&self, cycle: &DrivingCycle, x: &FactorVector) -> Result<f64, ValidationError> {
        let mut total = 0.0;
        for (v, a) in cycle.steps() {
            total += (self.0)(v, a, x)? * cycle.dt();
        }
        Ok(total)
    }
}

/// Sum of per-step emissions over the cycle.
pub fn cycle_total(model: &dyn CycleModel, cycle: &DrivingCycle, x: &FactorVector) -> Result<f64, ValidationError> {
    model.cycle_total(cycle, x)
}

/// One `(scenario, cycle)` comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scenario: usize,
    pub cycle: usize,
    pub strategy: Strategy,
    pub x: FactorVector,
    pub reference: f64,
    pub predicted: f64,
    /// Signed percentage error.
    pub error: f64,
}

/// The four error statistics over a set of signed percentage errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub n: usize,
    pub mape: f64,
    pub mpe: f64,
    /// Median; the mean of the two central values for even `n`.
    pub mdpe: f64,
    /// Population standard deviation.
    pub stdpe: f64,
}

/// Aggregates signed percentage errors. `None` for an empty list.
pub fn summarize_errors(errors: &[f64]) -> Option<ErrorSummary> {
    if errors.is_empty() {
        return None;
    }
    let mut e = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len();
    let nf = n as f64;
    let mpe = e.iter().sum::<f64>() / nf;
    let mut abs: Vec<f64> = e.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let mape = abs.iter().sum::<f64>() / nf;
    let mdpe = if n % 2 == 1 {
        e[n / 2]
    } else {
        0.5 * (e[n / 2 - 1] + e[n / 2])
    };
    let var = e.iter().map(|v| (v - mpe) * (v - mpe)).sum::<f64>() / nf;
    Some(ErrorSummary {
        n,
        mape,
        mpe,
        mdpe,
        stdpe: var.sqrt(),
    })
}

/// Counts per bin `[edges[i], edges[i+1])`, plus errors below the first or at/above the last edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    /// Bins of width 5 % from −50 % to +50 %.
    pub fn default_edges() -> Vec<f64> {
        (0..=20).map(|i| -50.0 + 5.0 * i as f64).collect()
    }

    pub fn build(edges: Vec<f64>, errors: &[f64]) -> Self {
        let bins = edges.len().saturating_sub(1);
        let mut h = Self {
            counts: vec![0; bins],
            edges,
            underflow: 0,
            overflow: 0,
        };
        for &e in errors {
            if bins == 0 || e < h.edges[0] {
                h.underflow += 1;
            } else if e >= h.edges[bins] {
                h.overflow += 1;
            } else {
                // last edge strictly greater than e
                let i = h.edges.partition_point(|&edge| edge <= e) - 1;
                h.counts[i] += 1;
            }
        }
        h
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub overall: ErrorSummary,
    /// Evaluations dropped because the reference total was not positive.
    pub skipped: usize,
    pub by_strategy: BTreeMap<String, ErrorSummary>,
    /// Factor name → factor value → summary.
    pub by_factor: BTreeMap<String, BTreeMap<String, ErrorSummary>>,
    pub histogram: Histogram,
}

fn factor_values(x: &FactorVector) -> [(&'static str, String); 6] {
    [
        ("grade", x.grade.to_string()),
        ("temperature", x.temp.to_string()),
        ("humidity", x.humidity.to_string()),
        ("age", x.age.to_string()),
        ("vehicle_type", x.vtype.to_string()),
        ("fuel", x.fuel.to_string()),
    ]
}

/// Aggregates evaluations into overall, per-strategy, and per-factor statistics.
pub fn aggregate(evals: &[Evaluation], skipped: usize, edges: Vec<f64>) -> Result<ErrorStats, ValidationError> {
    let errors: Vec<f64> = evals.iter().map(|e| e.error).collect();
    let overall = summarize_errors(&errors).ok_or(if skipped > 0 {
        ValidationError::AllSkipped
    } else {
        ValidationError::Empty
    })?;
    let mut strat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut fact: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for e in evals {
        strat.entry(e.strategy.to_string()).or_default().push(e.error);
        for (name, value) in factor_values(&e.x) {
            fact.entry(name.to_string()).or_default().entry(value).or_default().push(e.error);
        }
    }
    let summarize = |v: &Vec<f64>| summarize_errors(v).expect("groups are non-empty");
    Ok(ErrorStats {
        overall,
        skipped,
        by_strategy: strat.iter().map(|(k, v)| (k.clone(), summarize(v))).collect(),
        by_factor: fact
            .iter()
            .map(|(k, m)| (k.clone(), m.iter().map(|(v, e)| (v.clone(), summarize(e))).collect()))
            .collect(),
        histogram: Histogram::build(edges, &errors),
    })
}

/// Evaluates `model` against `reference` on every `(scenario, cycle)` pair.
/// Returns the statistics and the per-evaluation list in scenario-major order.
pub fn evaluate(
    model: &dyn CycleModel,
    reference: &dyn CycleModel,
    scenarios: &[FactorVector],
    cycles: &[LabeledCycle],
) -> Result<(ErrorStats, Vec<Evaluation>), ValidationError> {
    if scenarios.is_empty() || cycles.is_empty() {
        return Err(ValidationError::Empty);
    }
    let pairs: Vec<(usize, usize)> = (0..scenarios.len())
        .flat_map(|s| (0..cycles.len()).map(move |c| (s, c)))
        .collect();
    let results: Vec<Option<Evaluation>> = pairs
        .par_iter()
        .map(|&(s, c)| {
            let x = &scenarios[s];
            let cycle = &cycles[c].cycle;
            let reference = reference.cycle_total(cycle, x)?;
            if !(reference > 0.0) {
                return Ok(None);
            }
            let predicted = model.cycle_total(cycle, x)?;
            Ok(Some(Evaluation {
                scenario: s,
                cycle: c,
                strategy: cycles[c].strategy,
                x: *x,
                reference,
                predicted,
                error: (predicted - reference) / reference * 100.0,
            }))
        })
        .collect::<Result<_, ValidationError>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let evals: Vec<Evaluation> = results.into_iter().flatten().collect();
    Ok((aggregate(&evals, skipped, Histogram::default_edges())?, evals))
}

fn summary_row(out: &mut String, label: &str, s: &ErrorSummary) {
    let _ = writeln!(
        out,
        "{label:<28} {:>7} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
        s.n, s.mape, s.mpe, s.mdpe, s.stdpe
    );
}

/// Human-readable summary table.
pub fn render_table(stats: &ErrorStats) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>7} {:>9} {:>9} {:>9} {:>9}",
        "group", "n", "MAPE%", "MPE%", "MdPE%", "StdPE%"
    );
    summary_row(&mut out, "overall", &stats.overall);
    for (k, s) in &stats.by_strategy {
        summary_row(&mut out, &format!("strategy={k}"), s);
    }
    for (factor, values) in &stats.by_factor {
        for (v, s) in values {
            summary_row(&mut out, &format!("{factor}={v}"), s);
        }
    }
    if stats.skipped > 0 {
        let _ = writeln!(out, "skipped (non-positive reference): {}", stats.skipped);
    }
    out
}

/// Writes the JSON report and returns the rendered table.
pub fn report(stats: &ErrorStats, json_path: &Path) -> Result<String, ValidationError> {
    fs::write(json_path, serde_json::to_string_pretty(stats)?)?;
    Ok(render_table(stats))
}

pub fn read_report(json_path: &Path) -> Result<ErrorStats, ValidationError> {
    Ok(serde_json::from_str(&fs::read_to_string(json_path)?)?)
}

/// Raw per-evaluation errors as CSV.
pub fn errors_csv(evals: &[Evaluation]) -> String {
    let mut out = String::from("scenario,cycle,strategy,grade,temp,humidity,vtype,fuel,age,reference_g,predicted_g,error_pct\n");
    for e in evals {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            e.scenario,
            e.cycle,
            e.strategy,
            e.x.grade,
            e.x.temp,
            e.x.humidity,
            e.x.vtype,
            e.x.fuel,
            e.x.age,
            e.reference,
            e.predicted,
            e.error
        );
    }
    out
}
