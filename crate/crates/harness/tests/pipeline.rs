use pimlosc::pde::Benchmark;
use pimlosc::reference::solve;
use pimlosc_harness::config::ExperimentConfig;
use pimlosc_harness::pipeline::{read_grid, read_records, reference_request, run_experiment, RECORDS_FILE};
use pimlosc_harness::report::generate_report;
use pimlosc_harness::sweep::{run_sweep, SweepAxis};
use std::path::Path;

fn small(dir: &Path, pinn_epochs: usize, osc_epochs: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(&format!(
        r#"
benchmark = "burgers"
seed = 4
grid.k_t = 8
grid.k_x = 16
pinn.hidden = [6, 6]
pinn.residual_points = 40
pinn.boundary_points = 20
pinn.lbfgs_epochs = {pinn_epochs}
oscillator.hidden = 4
oscillator.epochs = {osc_epochs}
"#
    ))
    .unwrap();
    c.paths.cache = dir.join("cache");
    c.paths.out = dir.join("out");
    c
}

#[test]
fn untrained_pipeline_completes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 0, 0);
    let rec = run_experiment(&cfg).unwrap();
    assert!(rec.metrics.primary.values().iter().all(|v| v.is_finite()));
    assert_eq!(rec.oscillator_final_loss, None);
    for p in [
        &rec.artifacts.pinn_checkpoint,
        &rec.artifacts.training_grid,
        &rec.artifacts.oscillator_checkpoint,
        &rec.artifacts.rollout_grid,
        &rec.artifacts.reference_grid,
    ] {
        assert!(p.exists(), "{}", p.display());
    }
    let rolled = read_grid(&rec.artifacts.rollout_grid).unwrap();
    let reference = read_grid(&rec.artifacts.reference_grid).unwrap();
    assert_eq!(rolled.k_t(), 2);
    assert_eq!(rolled.times, reference.times[8..]);
    assert_eq!(rolled.xs, reference.xs);
}

#[test]
fn same_seed_same_numbers() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&small(a.path(), 5, 30)).unwrap();
    let again = run_experiment(&small(a.path(), 5, 30)).unwrap();
    let rb = run_experiment(&small(b.path(), 5, 30)).unwrap();
    assert_eq!(ra.metrics, again.metrics);
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(ra.run_id, rb.run_id);
    assert_eq!(read_records(&a.path().join("out").join(RECORDS_FILE)).unwrap().len(), 2);
}

#[test]
fn cached_reference_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 0, 0);
    let rec = run_experiment(&cfg).unwrap();
    let cached = read_grid(&rec.artifacts.reference_grid).unwrap();
    let fresh = solve(&reference_request(&cfg, None).unwrap()).unwrap();
    assert_eq!(cached, fresh);
}

#[test]
fn single_point_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 3, 10);
    let direct = run_experiment(&cfg).unwrap();
    let sweep = run_sweep(&cfg, &SweepAxis::DeltaT(vec![cfg.oscillator.delta_t])).unwrap();
    assert_eq!(sweep.rows.len(), 1);
    assert_eq!(sweep.records[0].metrics, direct.metrics);
    assert_eq!(sweep.rows[0].mean, direct.metrics.primary.values());
    assert!(dir.path().join("out/sweep.csv").exists());
}

#[test]
fn report_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 0, 0);
    let rec = run_experiment(&cfg).unwrap();
    let records = read_records(&cfg.paths.out.join(RECORDS_FILE)).unwrap();
    let files = generate_report(&records, &dir.path().join("report")).unwrap();
    let text = std::fs::read_to_string(&files.metrics_csv).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with(&rec.run_id));
    let pred = read_grid(&files.predictions[0]).unwrap();
    assert_eq!(pred.k_t(), 10);
    assert!(std::fs::read_to_string(&files.heatmaps[0]).unwrap().contains("<line"));

    std::fs::remove_file(&rec.artifacts.rollout_grid).unwrap();
    let err = generate_report(&records, &dir.path().join("report")).unwrap_err();
    assert!(err.to_string().contains(&rec.run_id), "{err}");
}

#[test]
fn parametric_config_trains_across_viscosities() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 0, 2);
    cfg.benchmark = Benchmark::BurgersParametric;
    cfg.parametric.train_nu = vec![0.01, 0.02];
    let rec = run_experiment(&cfg).unwrap();
    assert_eq!(rec.test_nu, Some(0.05));
    assert_eq!(std::fs::read_dir(dir.path().join("cache/pinn")).unwrap().count(), 9);
}
