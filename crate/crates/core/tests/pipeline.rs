//! Library pipeline at toy scale: extract, persist, reload, train, validate, drive.

use proptest::prelude::*;

use vemis::cycles::{generate_suite, SuiteOptions};
use vemis::dataset::{load, split, DirectorySink, Format, LoadOptions, MemorySink};
use vemis::ecodrive::{environment_sweep, solve_horizon, SweepParameter, SWEEP_FIXED};
use vemis::extraction::{extract_dataset, ExtractOptions};
use vemis::validation::evaluate;
use vemis::*;

fn short() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn extract_reload_train_validate_drive() {
    let grid = FactorGrid::default();
    let oracle = OpModeTable::default();
    let car = VehicleClass::new(VehicleType::PassengerCar, Fuel::Gasoline).unwrap();
    let start = grid.scenario_range_for(car).unwrap().start;
    let dir = tempfile::tempdir().unwrap();
    let opts = ExtractOptions {
        scenarios: Some(start..start + 3),
        ..ExtractOptions::default()
    };
    let sink = DirectorySink::new(dir.path(), Format::Binary);
    let report = extract_dataset(&grid, &oracle, &sink, &opts).unwrap();
    assert_eq!(report.records_written, 3 * 4_791);

    // files on disk hold exactly what an in-memory run produces
    let mem = MemorySink::default();
    extract_dataset(&grid, &oracle, &mem, &opts).unwrap();
    let (disk, rep) = load(&[dir.path().to_path_buf()], &LoadOptions::default()).unwrap();
    assert_eq!(rep.files, 3);
    assert_eq!(disk.records(), mem.merged().records());

    let (train, test) = split(&disk, (0.8, 0.2), 1).unwrap();
    let (family, logs) = vemis::surrogate::train_family(train.records(), &short(), Some(oracle.clone())).unwrap();
    assert!(logs[&car].final_mape < logs[&car].initial_mape);
    let path = dir.path().join("toy.nmnn");
    family.save(&path).unwrap();
    let family = SurrogateFamily::load(&path).unwrap();
    for r in test.records().iter().take(200) {
        assert!(family.predict(r.v, r.a, &r.x).unwrap() >= family.floor.value(&r.x).unwrap());
    }

    let scenarios: Vec<FactorVector> = (start..start + 2).map(|i| grid.scenario(i).unwrap()).collect();
    let cycles = generate_suite(1, 5, &SuiteOptions { duration: 120.0, dt: 1.0 }).unwrap();
    let (stats, evals) = evaluate(&family, &oracle, &scenarios, &cycles).unwrap();
    assert_eq!(evals.len(), 10);
    assert_eq!(stats.by_strategy.len(), 5);
    assert!(stats.overall.mape.is_finite());

    let base = EcoProblem {
        horizon: 6,
        ..EcoProblem::default()
    };
    let one = environment_sweep(&base, SweepParameter::Grade, &[0.0], &family, &SolverOptions::default()).unwrap();
    let mut fixed = base.clone();
    (fixed.env.grade, fixed.env.temp, fixed.env.humidity) = SWEEP_FIXED;
    let (_, direct) = solve_horizon(&fixed, None, &family, &SolverOptions::default()).unwrap();
    assert_eq!(one, vec![direct]);
    assert!(one[0].is_feasible());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scenario_indices_round_trip(i in 0usize..22_869) {
        let g = FactorGrid::default();
        let x = g.scenario(i).unwrap();
        let r = g.scenario_range_for(x.class()).unwrap();
        prop_assert!(r.contains(&i));
        prop_assert_eq!(r.len(), 2_541);
        prop_assert!(x.validate().is_ok());
    }

    #[test]
    fn reference_totals_are_additive(split_at in 1usize..59, seed in 0u64..50) {
        let suite = generate_suite(1, seed, &SuiteOptions { duration: 60.0, dt: 1.0 }).unwrap();
        let oracle = OpModeTable::default();
        let x = FactorGrid::default().scenario(seed as usize * 400).unwrap();
        for c in &suite {
            let s = c.cycle.speeds();
            let head = DrivingCycle::new(s[..split_at].to_vec(), 1.0).unwrap();
            let tail = DrivingCycle::new(s[split_at..].to_vec(), 1.0).unwrap();
            let whole = oracle.cycle_emission(&c.cycle, &x);
            let joined = oracle.cycle_emission(&head.concat(&tail).unwrap(), &x);
            prop_assert!((whole - joined).abs() <= 1e-9 * whole);
        }
    }
}
