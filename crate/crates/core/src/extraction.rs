//! Per-second emissions recovered by differencing cycle-level totals.
//!
//! For a speed `v` and acceleration `a`, a baseline cycle holds `v` for `n`
//! steps and a custom cycle appends one more step at `v + a·dt`. The two
//! cycles agree everywhere except the appended transition, so the difference
//! of their totals is the emission of that single step.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetPartition, EmissionRecord, PartitionSink, Provenance};
use crate::factors::{DynamicsPoint, FactorGrid, FactorVector};
use crate::oracle::{DrivingCycle, OpModeTable, OracleError};

/// Bumped whenever extracted values would change for identical inputs.
pub const EXTRACTION_VERSION: u32 = 1;

pub const DEFAULT_BASELINE_STEPS: usize = 5;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("v = {v}, a = {a} gives negative speed {next} after dt = {dt}")]
    InvalidCombination { v: f64, a: f64, dt: f64, next: f64 },
    #[error("baseline must have at least one step")]
    EmptyBaseline,
    #[error("scenario range {start}..{end} exceeds the {count} scenarios of the grid")]
    BadRange { start: usize, end: usize, count: usize },
    #[error("extraction aborted at scenario {scenario} after {completed} completed scenarios: {source}")]
    Aborted {
        scenario: usize,
        completed: usize,
        #[source]
        source: DatasetError,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Baseline cycle plus the custom cycle with one appended transition.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclePair {
    pub baseline: DrivingCycle,
    pub custom: DrivingCycle,
    pub n: usize,
    pub dt: f64,
}

pub fn build_cycle_pair(v: f64, a: f64, n: usize, dt: f64) -> Result<CyclePair, ExtractionError> {
    if n == 0 {
        return Err(ExtractionError::EmptyBaseline);
    }
    let next = v + a * dt;
    if !(DynamicsPoint { v, a }).is_valid(dt) {
        return Err(ExtractionError::InvalidCombination { v, a, dt, next });
    }
    let baseline = DrivingCycle::constant(v, n, dt)?;
    let mut speeds = baseline.speeds().to_vec();
    speeds.push(next.max(0.0));
    let custom = DrivingCycle::new(speeds, dt)?;
    Ok(CyclePair {
        baseline,
        custom,
        n,
        dt,
    })
}

/// Grams emitted while applying `a` at `v` for one step under `x`.
pub fn instantaneous_emission(
    v: f64,
    a: f64,
    x: &FactorVector,
    oracle: &OpModeTable,
    n: usize,
    dt: f64,
) -> Result<f64, ExtractionError> {
    let pair = build_cycle_pair(v, a, n, dt)?;
    Ok(oracle.cycle_emission(&pair.custom, x) - oracle.cycle_emission(&pair.baseline, x))
}

/// Test hook that drops every `stride`-th record of the selected scenarios,
/// standing in for corrupted or lost batch output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropHook {
    pub stride: usize,
    pub scenarios: Option<Range<usize>>,
}

impl DropHook {
    fn drops(&self, scenario: usize, record: usize) -> bool {
        self.stride > 0
            && self.scenarios.as_ref().is_none_or(|r| r.contains(&scenario))
            && record.is_multiple_of(self.stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractOptions {
    /// Scenario indices to visit; the whole grid when `None`.
    pub scenarios: Option<Range<usize>>,
    pub baseline_steps: usize,
    pub drop: Option<DropHook>,
    /// Worker threads; the global pool when `None`.
    pub jobs: Option<usize>,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            scenarios: None,
            baseline_steps: DEFAULT_BASELINE_STEPS,
            drop: None,
            jobs: None,
        }
    }
}

/// What was observed over one extraction run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub scenario_start: usize,
    pub scenario_end: usize,
    pub scenarios_written: usize,
    pub scenarios_skipped: usize,
    pub records_written: u64,
    pub records_dropped: u64,
    pub failed: Vec<String>,
    /// `true` when every requested scenario was already present.
    pub idempotent_skip: bool,
    pub baseline_steps: usize,
    /// `running` for `n > 1`; `start (no distinct start physics)` for `n = 1`.
    pub emission_stage: String,
    pub extraction_version: u32,
}

fn stage_label(n: usize) -> &'static str {
    if n == 1 {
        "start (no distinct start physics)"
    } else {
        "running"
    }
}

/// Extracts one scenario (one checkpoint unit) into a partition.
pub fn extract_scenario(
    grid: &FactorGrid,
    index: usize,
    oracle: &OpModeTable,
    baseline_steps: usize,
    drop: Option<&DropHook>,
) -> Result<(DatasetPartition, u64), ExtractionError> {
    let count = grid.scenario_count();
    let x = grid.scenario(index).ok_or(ExtractionError::BadRange {
        start: index,
        end: index + 1,
        count,
    })?;
    let mut records = Vec::with_capacity(grid.dynamics_count());
    let mut dropped = 0;
    for (i, d) in grid.dynamics().enumerate() {
        if drop.is_some_and(|h| h.drops(index, i)) {
            dropped += 1;
            continue;
        }
        let e = instantaneous_emission(d.v, d.a, &x, oracle, baseline_steps, grid.dt)?;
        records.push(EmissionRecord { v: d.v, a: d.a, x, e });
    }
    let provenance = Provenance {
        descriptor: format!("scenarios {index}..{}", index + 1),
        extraction_version: EXTRACTION_VERSION,
    };
    // Grid enumeration never repeats a key.
    let partition = DatasetPartition::from_unique(records, provenance);
    Ok((partition, dropped))
}

/// Extracts the listed scenarios in parallel into one record list, in the
/// order given.
pub fn extract_records(
    grid: &FactorGrid,
    oracle: &OpModeTable,
    scenarios: &[usize],
    baseline_steps: usize,
) -> Result<Vec<EmissionRecord>, ExtractionError> {
    let parts: Vec<DatasetPartition> = scenarios
        .par_iter()
        .map(|&i| extract_scenario(grid, i, oracle, baseline_steps, None).map(|(p, _)| p))
        .collect::<Result<_, _>>()?;
    Ok(parts.into_iter().flat_map(DatasetPartition::into_records).collect())
}

/// Sweeps the requested scenarios, writing one partition per scenario to
/// `sink`. Scenarios already present in the sink are skipped, so a rerun
/// resumes where an aborted run stopped.
pub fn extract_dataset(
    grid: &FactorGrid,
    oracle: &OpModeTable,
    sink: &dyn PartitionSink,
    opts: &ExtractOptions,
) -> Result<ExtractionReport, ExtractionError> {
    let count = grid.scenario_count();
    let range = opts.scenarios.clone().unwrap_or(0..count);
    if range.start > range.end || range.end > count {
        return Err(ExtractionError::BadRange {
            start: range.start,
            end: range.end,
            count,
        });
    }
    let written = AtomicUsize::new(0);
    let skipped = AtomicUsize::new(0);
    let records = AtomicU64::new(0);
    let dropped = AtomicU64::new(0);

    let work = |index: usize| -> Result<(), ExtractionError> {
        let abort = |source| ExtractionError::Aborted {
            scenario: index,
            completed: written.load(Ordering::SeqCst),
            source,
        };
        if sink.contains(index).map_err(abort)? {
            skipped.fetch_add(1, Ordering::SeqCst);
            return Ok(());
        }
        let (partition, n_dropped) =
            extract_scenario(grid, index, oracle, opts.baseline_steps, opts.drop.as_ref())?;
        sink.put(index, &partition).map_err(abort)?;
        written.fetch_add(1, Ordering::SeqCst);
        records.fetch_add(partition.len() as u64, Ordering::SeqCst);
        dropped.fetch_add(n_dropped, Ordering::SeqCst);
        Ok(())
    };

    match opts.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .expect("thread pool");
            pool.install(|| range.clone().into_par_iter().try_for_each(work))?
        }
        None => range.clone().into_par_iter().try_for_each(work)?,
    }

    let scenarios_written = written.into_inner();
    let scenarios_skipped = skipped.into_inner();
    Ok(ExtractionReport {
        scenario_start: range.start,
        scenario_end: range.end,
        scenarios_written,
        scenarios_skipped,
        records_written: records.into_inner(),
        records_dropped: dropped.into_inner(),
        failed: Vec::new(),
        idempotent_skip: scenarios_written == 0 && scenarios_skipped > 0,
        baseline_steps: opts.baseline_steps,
        emission_stage: stage_label(opts.baseline_steps).to_string(),
        extraction_version: EXTRACTION_VERSION,
    })
}

/// Number of records a run over `range` produces without drops.
pub fn planned_records(grid: &FactorGrid, range: Range<usize>) -> u64 {
    grid.dynamics_count() as u64 * range.len() as u64
}
