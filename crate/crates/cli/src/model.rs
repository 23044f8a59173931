//! `train`, `predict` and `validate`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use vemis::cycles::{generate_suite, Strategy, SuiteOptions};
use vemis::dataset::{load, LoadOptions};
use vemis::factors::{continuous_inputs, DynamicsPoint};
use vemis::surrogate::train_family;
use vemis::validation::{errors_csv, evaluate, render_table, CycleModel};
use vemis::{DrivingCycle, FactorGrid, FactorVector, LabeledCycle, SurrogateFamily, TrainConfig, VehicleClass};

use crate::data::{load_grid, load_oracle};
use crate::manifest::{json_with_manifest, resolve, write_atomic, RunManifest, DEFAULT_SEED};
use crate::UsageError;

pub const DEFAULT_VALIDATION_SCENARIOS: usize = 27;
pub const DEFAULT_VALIDATION_CYCLES: usize = 25;

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Partition files or directories of them
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub data: Vec<PathBuf>,
    /// Model file to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch training log (CSV) [default: <out>.log.csv]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Train only these classes, e.g. passenger_car/gasoline (repeatable) [default: all present]
    #[arg(long = "class")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    /// [default: 300]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 1024]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Learning rate at the last epoch under cosine annealing [default: --learning-rate]
    #[arg(long)]
    pub final_learning_rate: Option<f64>,
    /// Scale applied to the Glorot-uniform initial weights [default: 0.97]
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reference tables embedded as the idling fallback [default: built-in tables]
    #[arg(long)]
    pub oracle: Option<PathBuf>,
}

fn parse_class(s: &str) -> Result<VehicleClass, UsageError> {
    s.parse().map_err(|e| UsageError(format!("class `{s}`: {e}")))
}

pub fn train(flags: &TrainArgs, config: Option<&Path>) -> Result<ExitCode> {
    let a = resolve(flags, config, "train")?;
    if a.data.is_empty() {
        return Err(UsageError("train needs at least one data path".into()).into());
    }
    let out = a.out.clone().ok_or_else(|| UsageError("train needs --out".into()))?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let classes: Vec<VehicleClass> = a.classes.iter().map(|s| parse_class(s)).collect::<Result<_, _>>()?;
    let d = TrainConfig::default();
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let learning_rate = a.learning_rate.unwrap_or(d.learning_rate);
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        learning_rate,
        final_learning_rate: a.final_learning_rate.unwrap_or(learning_rate),
        init_scale: a.init_scale.unwrap_or(d.init_scale),
        seed,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let oracle = load_oracle(a.oracle.as_deref())?;

    let (part, _) = load(&a.data, &LoadOptions::default())?;
    let records: Vec<_> = part
        .into_records()
        .into_iter()
        .filter(|r| classes.is_empty() || classes.contains(&r.x.class()))
        .collect();
    if records.is_empty() {
        bail!("no records left after filtering; nothing to train");
    }

    let mut manifest = RunManifest::new("train", config, &a, seed)?.output(&out).output(&log_path);
    for p in a.data.iter().chain(a.oracle.as_ref()) {
        manifest = manifest.input(p);
    }
    let (mut family, logs) = train_family(&records, &cfg, Some(oracle))?;
    family.metadata = manifest.to_json();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let bytes = family.save(&out).with_context(|| format!("writing {}", out.display()))?;

    let mut log = manifest.comment_line();
    log.push_str("class,epoch,train_mape_pct\n");
    for (class, l) in &logs {
        for (i, m) in l.epoch_mape.iter().enumerate() {
            let _ = writeln!(log, "{class},{},{m}", i + 1);
        }
        println!(
            "{class}: {} samples, training MAPE {:.2}% -> {:.2}%",
            l.samples, l.initial_mape, l.final_mape
        );
    }
    write_atomic(&log_path, log.as_bytes())?;
    println!("wrote {} ({} entries, {bytes} bytes)", out.display(), family.entries().len());
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictArgs {
    /// Model file
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Speed, m/s
    #[arg(long, allow_negative_numbers = true)]
    pub v: Option<f64>,
    /// Acceleration, m/s²
    #[arg(long, allow_negative_numbers = true)]
    pub a: Option<f64>,
    /// Road grade, % [default: 0]
    #[arg(long, allow_negative_numbers = true)]
    pub grade: Option<f64>,
    /// °F [default: 60]
    #[arg(long, allow_negative_numbers = true)]
    pub temp: Option<f64>,
    /// % [default: 55]
    #[arg(long)]
    pub humidity: Option<f64>,
    /// vtype/fuel [default: passenger_car/gasoline]
    #[arg(long)]
    pub class: Option<String>,
    /// Model year [default: 2019]
    #[arg(long)]
    pub age: Option<i32>,
}

pub fn predict(flags: &PredictArgs, config: Option<&Path>) -> Result<ExitCode> {
    let a = resolve(flags, config, "predict")?;
    let path = a.model.clone().ok_or_else(|| UsageError("predict needs --model".into()))?;
    let (v, acc) = match (a.v, a.a) {
        (Some(v), Some(acc)) => (v, acc),
        _ => return Err(UsageError("predict needs --v and --a".into()).into()),
    };
    let class = parse_class(a.class.as_deref().unwrap_or("passenger_car/gasoline"))?;
    let x = FactorVector::new(
        a.grade.unwrap_or(0.0),
        a.temp.unwrap_or(60.0),
        a.humidity.unwrap_or(55.0),
        class.vtype,
        class.fuel,
        a.age.unwrap_or(2019),
    )
    .map_err(|e| UsageError(e.to_string()))?;
    let family = SurrogateFamily::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let m = family.entry(class)?;
    if m.is_extrapolation(&continuous_inputs(&x, &DynamicsPoint { v, a: acc })) {
        eprintln!("warning: inputs outside the training range of {class}");
    }
    let (e, de_dv, de_da) = family.predict_with_grad(v, acc, &x)?;
    let floor = family.floor.value(&x)?;
    println!("emission_g_per_s {e}");
    println!("de_dv {de_dv}");
    println!("de_da {de_da}");
    println!("idling_floor {floor}{}", if e == floor { " (active)" } else { "" });
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateArgs {
    /// Model file; `oracle` evaluates the reference against itself
    #[arg(long)]
    pub model: Option<String>,
    /// Reference tables directory [default: built-in tables]
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Number of generated cycles, spread evenly over the five strategies [default: 25]
    #[arg(long)]
    pub cycles: Option<usize>,
    /// Read cycles written by gen-cycles instead of generating them
    #[arg(long)]
    pub cycles_dir: Option<PathBuf>,
    /// Number of scenarios, spread evenly over the model's classes [default: 27]
    #[arg(long)]
    pub scenarios: Option<usize>,
    /// Generated cycle duration in seconds [default: 600]
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fail (exit 1) unless overall MAPE is below this percentage
    #[arg(long)]
    pub gate: Option<f64>,
    /// JSON report [default: none]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-evaluation errors as CSV [default: none]
    #[arg(long)]
    pub errors: Option<PathBuf>,
    /// Grid definition (TOML) [default: built-in grid]
    #[arg(long)]
    pub grid: Option<PathBuf>,
}

/// `n` scenario indices at evenly spaced midpoints of the classes' index ranges.
pub fn spread_scenarios(grid: &FactorGrid, classes: &[VehicleClass], n: usize) -> Vec<usize> {
    let pool: Vec<usize> = classes
        .iter()
        .filter_map(|&c| grid.scenario_range_for(c))
        .flatten()
        .collect();
    if pool.is_empty() {
        return Vec::new();
    }
    (0..n).map(|i| pool[((2 * i + 1) * pool.len()) / (2 * n)]).collect()
}

/// `n` cycles taken round-robin over the strategies.
pub fn generated_cycles(n: usize, seed: u64, opts: &SuiteOptions) -> Result<Vec<LabeledCycle>> {
    let per = n.div_ceil(Strategy::ALL.len());
    let mut suite = generate_suite(per, seed, opts).map_err(|e| UsageError(e.to_string()))?;
    let rank = |s: Strategy| Strategy::ALL.iter().position(|&t| t == s).unwrap();
    suite.sort_by_key(|c| (c.index, rank(c.strategy)));
    suite.truncate(n);
    Ok(suite)
}

/// Cycles named `<strategy>_<index>.csv`, in name order.
pub fn read_cycles(dir: &Path) -> Result<Vec<LabeledCycle>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((strategy, index)) = stem.rsplit_once('_') else {
            bail!("{}: expected <strategy>_<index>.csv", p.display());
        };
        let strategy: Strategy = strategy
            .parse()
            .map_err(|_| anyhow::anyhow!("{}: unknown strategy `{strategy}`", p.display()))?;
        let index = index.parse().with_context(|| format!("{}: bad index", p.display()))?;
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let cycle = DrivingCycle::from_csv(&text).with_context(|| format!("parsing {}", p.display()))?;
        out.push(LabeledCycle { strategy, index, cycle });
    }
    if out.is_empty() {
        bail!("no cycle files in {}", dir.display());
    }
    Ok(out)
}

pub fn validate(flags: &ValidateArgs, config: Option<&Path>) -> Result<ExitCode> {
    let a = resolve(flags, config, "validate")?;
    let model_arg = a
        .model
        .clone()
        .ok_or_else(|| UsageError("validate needs --model (a model file or `oracle`)".into()))?;
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let grid = load_grid(a.grid.as_deref())?;
    let oracle = load_oracle(a.oracle.as_deref())?;
    let family = if model_arg == "oracle" {
        None
    } else {
        let p = Path::new(&model_arg);
        Some(SurrogateFamily::load(p).with_context(|| format!("loading model {}", p.display()))?)
    };
    let model: &dyn CycleModel = match &family {
        Some(f) => f,
        None => &oracle,
    };
    let classes: Vec<VehicleClass> = match &family {
        Some(f) => f.entries().keys().copied().collect(),
        None => VehicleClass::all(),
    };
    let n_scenarios = a.scenarios.unwrap_or(DEFAULT_VALIDATION_SCENARIOS);
    let scenarios: Vec<FactorVector> = spread_scenarios(&grid, &classes, n_scenarios)
        .into_iter()
        .filter_map(|i| grid.scenario(i))
        .collect();
    let cycles = match &a.cycles_dir {
        Some(dir) => read_cycles(dir)?,
        None => {
            let opts = SuiteOptions {
                duration: a.duration.unwrap_or(SuiteOptions::default().duration),
                ..SuiteOptions::default()
            };
            generated_cycles(a.cycles.unwrap_or(DEFAULT_VALIDATION_CYCLES), seed, &opts)?
        }
    };
    let (stats, evals) = evaluate(model, &oracle, &scenarios, &cycles)?;

    let mut manifest = RunManifest::new("validate", config, &a, seed)?;
    if family.is_some() {
        manifest = manifest.input(Path::new(&model_arg));
    }
    for p in [a.cycles_dir.as_deref(), a.oracle.as_deref(), a.grid.as_deref()].into_iter().flatten() {
        manifest = manifest.input(p);
    }
    for p in [a.out.as_deref(), a.errors.as_deref()].into_iter().flatten() {
        manifest = manifest.output(p);
    }
    print!("{}", render_table(&stats));
    let o = &stats.overall;
    println!(
        "n {}  MAPE {:.3}%  MPE {:.3}%  MdPE {:.3}%  StdPE {:.3}%",
        o.n, o.mape, o.mpe, o.mdpe, o.stdpe
    );
    if let Some(out) = &a.out {
        write_atomic(out, json_with_manifest(&manifest, "stats", &stats)?.as_bytes())?;
    }
    if let Some(path) = &a.errors {
        write_atomic(path, (manifest.comment_line() + &errors_csv(&evals)).as_bytes())?;
    }
    if let Some(gate) = a.gate {
        if !(o.mape < gate) {
            eprintln!("gate failed: MAPE {:.3}% is not below {gate}%", o.mape);
            return Ok(ExitCode::from(1));
        }
        println!("gate passed: MAPE {:.3}% < {gate}%", o.mape);
    }
    Ok(ExitCode::SUCCESS)
}
