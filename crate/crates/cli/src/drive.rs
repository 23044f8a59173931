//! `ecodrive`: closed-loop intersection approach or single-horizon environment sweep.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use vemis::ecodrive::{
    environment_sweep, run_receding_horizon, EcoError, IntersectionSchedule, SweepParameter, Violation,
};
use vemis::{EcoProblem, SolverOptions, SurrogateFamily};

use crate::manifest::{resolve, write_atomic, RunManifest, DEFAULT_SEED};
use crate::UsageError;

pub const DEFAULT_CLOSED_LOOP_STEPS: usize = 90;
pub const DEFAULT_GRADE_VALUES: [f64; 3] = [-5.0, 0.0, 5.0];

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcodriveArgs {
    /// Model file
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// intersection (receding horizon) or sweep [default: intersection]
    #[arg(long)]
    pub mode: Option<String>,
    /// Closed-loop steps in intersection mode [default: 90]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Swept parameter in sweep mode: grade, temperature or humidity [default: grade]
    #[arg(long)]
    pub sweep: Option<String>,
    /// Comma-separated sweep values [default for grade: -5,0,5]
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub values: Option<Vec<f64>>,
    /// Output directory for trajectory CSVs
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Recorded in the manifest; the solver is deterministic
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sweep base problem (config file only)
    #[arg(skip)]
    pub problem: Option<EcoProblem>,
    /// Intersection scenario (config file only)
    #[arg(skip)]
    pub intersection: Option<IntersectionSchedule>,
    /// Solver settings (config file only)
    #[arg(skip)]
    pub solver: Option<SolverOptions>,
}

fn listing(v: &[Violation]) -> String {
    v.iter()
        .map(|v| format!("  {:?} violated by {:.3e}", v.constraint, v.amount))
        .collect::<Vec<_>>()
        .join("\n")
}

fn sweep_name(p: SweepParameter) -> &'static str {
    match p {
        SweepParameter::Grade => "grade",
        SweepParameter::Temperature => "temperature",
        SweepParameter::Humidity => "humidity",
    }
}

pub fn ecodrive(flags: &EcodriveArgs, config: Option<&Path>) -> Result<ExitCode> {
    let a = resolve(flags, config, "ecodrive")?;
    let model_path = a.model.clone().ok_or_else(|| UsageError("ecodrive needs --model".into()))?;
    let out = a.out.clone().ok_or_else(|| UsageError("ecodrive needs --out".into()))?;
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let solver = a.solver.clone().unwrap_or_default();
    let family = SurrogateFamily::load(&model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let manifest = RunManifest::new("ecodrive", config, &a, seed)?
        .input(&model_path)
        .output(&out);
    let header = manifest.comment_line();

    match a.mode.as_deref().unwrap_or("intersection") {
        "intersection" => {
            let sched = a.intersection.clone().unwrap_or_default();
            let steps = a.steps.unwrap_or(DEFAULT_CLOSED_LOOP_STEPS);
            let run = run_receding_horizon(&sched, sched.base.q1, sched.base.q2, steps, &family, &solver)?;
            let t = &run.trajectory;
            let path = out.join("intersection.csv");
            write_atomic(&path, (header + &t.to_csv(sched.base.dt)).as_bytes())?;
            if let Some((step, violations)) = &run.failure {
                eprintln!("infeasible horizon at step {step}:\n{}", listing(violations));
                return Ok(ExitCode::from(1));
            }
            println!(
                "{} steps, {:.1} m, total emission {:.3} g -> {}",
                t.accels.len(),
                t.positions.last().copied().unwrap_or_default(),
                t.total_emission,
                path.display()
            );
        }
        "sweep" => {
            let param: SweepParameter = toml::Value::String(a.sweep.clone().unwrap_or_else(|| "grade".into()))
                .try_into()
                .map_err(|_| UsageError("--sweep must be grade, temperature or humidity".into()))?;
            let values = match (&a.values, param) {
                (Some(v), _) if !v.is_empty() => v.clone(),
                (_, SweepParameter::Grade) => DEFAULT_GRADE_VALUES.to_vec(),
                _ => return Err(UsageError("--values is required for this sweep".into()).into()),
            };
            let base = a.problem.clone().unwrap_or_default();
            let runs = match environment_sweep(&base, param, &values, &family, &solver) {
                Err(EcoError::Infeasible(v)) => {
                    eprintln!("infeasible problem:\n{}", listing(&v));
                    return Ok(ExitCode::from(1));
                }
                Err(EcoError::Problem(m)) => return Err(UsageError(m).into()),
                other => other?,
            };
            for (value, t) in values.iter().zip(&runs) {
                let path = out.join(format!("sweep_{}_{value}.csv", sweep_name(param)));
                write_atomic(&path, (header.clone() + &t.to_csv(base.dt)).as_bytes())?;
                println!(
                    "{} = {value}: emission {:.3} g, objective {:.3}, final speed {:.2} m/s -> {}",
                    sweep_name(param),
                    t.total_emission,
                    t.objective,
                    t.speeds.last().copied().unwrap_or_default(),
                    path.display()
                );
            }
        }
        other => return Err(UsageError(format!("unknown mode `{other}` (intersection or sweep)")).into()),
    }
    Ok(ExitCode::SUCCESS)
}
