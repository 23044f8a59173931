//! `extract`, `stats` and `gen-cycles`.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use vemis::cycles::{generate_suite, SuiteOptions};
use vemis::dataset::{load, summarize, DirectorySink, Format, LoadOptions};
use vemis::extraction::{extract_dataset, ExtractOptions, ExtractionError, DEFAULT_BASELINE_STEPS};
use vemis::{FactorGrid, OpModeTable};

use crate::manifest::{json_with_manifest, resolve, write_atomic, RunManifest, DEFAULT_SEED};
use crate::UsageError;

pub const DEFAULT_CYCLES_PER_STRATEGY: usize = 20;

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractArgs {
    /// Half-open scenario index range `start..end` [default: the whole grid]
    #[arg(long)]
    pub scenarios: Option<String>,
    /// Output directory for partition files and the run report
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Partition file format: csv or binary [default: csv]
    #[arg(long)]
    pub format: Option<String>,
    /// Constant-speed baseline length n [default: 5]
    #[arg(long)]
    pub baseline_steps: Option<usize>,
    /// Grid definition (TOML) [default: built-in grid]
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Directory with rates.csv and modifiers.csv [default: built-in tables]
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Recorded in the manifest; extraction itself is deterministic
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn parse_range(s: &str) -> Result<Range<usize>, UsageError> {
    let bad = || UsageError(format!("scenario range `{s}`: expected start..end"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let start = a.trim().parse().map_err(|_| bad())?;
    let end = b.trim().parse().map_err(|_| bad())?;
    if start > end {
        return Err(bad());
    }
    Ok(start..end)
}

pub fn load_grid(path: Option<&Path>) -> Result<FactorGrid> {
    match path {
        Some(p) => FactorGrid::from_file(p).map_err(|e| UsageError(format!("grid {}: {e}", p.display())).into()),
        None => Ok(FactorGrid::default()),
    }
}

pub fn load_oracle(dir: Option<&Path>) -> Result<OpModeTable> {
    OpModeTable::import_or_default(dir).context("loading reference tables")
}

pub fn extract(flags: &ExtractArgs, config: Option<&Path>) -> Result<ExitCode> {
    let a = resolve(flags, config, "extract")?;
    let out = a.out.clone().ok_or_else(|| UsageError("extract needs --out".into()))?;
    let format = match a.format.as_deref().unwrap_or("csv") {
        "csv" => Format::Csv,
        "binary" | "nmre" => Format::Binary,
        other => return Err(UsageError(format!("unknown format `{other}` (csv or binary)")).into()),
    };
    let grid = load_grid(a.grid.as_deref())?;
    let oracle = load_oracle(a.oracle.as_deref())?;
    let range = match &a.scenarios {
        Some(s) => parse_range(s)?,
        None => 0..grid.scenario_count(),
    };
    let report_path = out.join(format!("extract_{}_{}.json", range.start, range.end));
    let mut manifest = RunManifest::new("extract", config, &a, a.seed.unwrap_or(DEFAULT_SEED))?.output(&out);
    for p in [a.grid.as_deref(), a.oracle.as_deref()].into_iter().flatten() {
        manifest = manifest.input(p);
    }

    let mut sink = DirectorySink::new(&out, format);
    sink.comments.push(format!("manifest: {}", manifest.to_json()));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let opts = ExtractOptions {
        scenarios: Some(range.clone()),
        baseline_steps: a.baseline_steps.unwrap_or(DEFAULT_BASELINE_STEPS),
        drop: None,
        jobs: None,
    };
    let report = match extract_dataset(&grid, &oracle, &sink, &opts) {
        Err(e @ ExtractionError::BadRange { .. }) => return Err(UsageError(e.to_string()).into()),
        other => other?,
    };
    write_atomic(&report_path, json_with_manifest(&manifest, "report", &report)?.as_bytes())?;
    if report.idempotent_skip {
        println!(
            "all {} scenarios in {}..{} already extracted; nothing to do",
            report.scenarios_skipped, range.start, range.end
        );
    } else {
        println!(
            "extracted {} records from {} scenarios ({} already present) into {}",
            report.records_written,
            report.scenarios_written,
            report.scenarios_skipped,
            out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsArgs {
    /// Partition files or directories of them
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub data: Vec<PathBuf>,
    /// JSON output for the curves and ratios
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn stats(flags: &StatsArgs, config: Option<&Path>) -> Result<ExitCode> {
    let a = resolve(flags, config, "stats")?;
    if a.data.is_empty() {
        return Err(UsageError("stats needs at least one data path".into()).into());
    }
    let (part, rep) = load(&a.data, &LoadOptions::default())?;
    let s = summarize(&part)?;
    println!("{} records from {} files", rep.records, rep.files);
    for (factor, points) in &s.curves {
        println!("{factor}: max/min cell mean {:.3}", s.ratios[factor]);
        for p in points {
            println!("  {:<12} {:>12.6} g  (n={})", p.value, p.mean, p.count);
        }
    }
    if let Some(out) = &a.out {
        let mut manifest = RunManifest::new("stats", config, &a, DEFAULT_SEED)?.output(out);
        for d in &a.data {
            manifest = manifest.input(d);
        }
        write_atomic(out, json_with_manifest(&manifest, "stats", &s)?.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenCyclesArgs {
    /// Cycles per strategy [default: 20]
    #[arg(long)]
    pub count: Option<usize>,
    /// Cycle duration in seconds [default: 600]
    #[arg(long)]
    pub duration: Option<f64>,
    /// Sample interval in seconds [default: 1]
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, one `<strategy>_<index>.csv` per cycle
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gen_cycles(flags: &GenCyclesArgs, config: Option<&Path>) -> Result<ExitCode> {
    let a = resolve(flags, config, "gen-cycles")?;
    let out = a.out.clone().ok_or_else(|| UsageError("gen-cycles needs --out".into()))?;
    let defaults = SuiteOptions::default();
    let opts = SuiteOptions {
        duration: a.duration.unwrap_or(defaults.duration),
        dt: a.dt.unwrap_or(defaults.dt),
    };
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let suite = generate_suite(a.count.unwrap_or(DEFAULT_CYCLES_PER_STRATEGY), seed, &opts)
        .map_err(|e| UsageError(e.to_string()))?;
    let manifest = RunManifest::new("gen-cycles", config, &a, seed)?.output(&out);
    let header = manifest.comment_line();
    for c in &suite {
        let path = out.join(format!("{}_{:03}.csv", c.strategy, c.index));
        write_atomic(&path, (header.clone() + &c.cycle.to_csv()).as_bytes())?;
    }
    println!("wrote {} cycles to {}", suite.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("0..1").unwrap(), 0..1);
        assert_eq!(parse_range(" 3 .. 3").unwrap(), 3..3);
        assert!(parse_range("5..2").is_err());
        assert!(parse_range("7").is_err());
        assert!(parse_range("a..2").is_err());
    }
}
