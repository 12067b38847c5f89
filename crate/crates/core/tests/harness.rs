use std::path::Path;

use frob::harness::{
    detect_break_point, emit_report, execute_run, load_data, reference_config, run_fewshot_sweep, run_occ,
    ExperimentConfig, Outcome, RunSpec, OCC_TEST_SET,
};
use frob::training::AblationMode;

fn quick() -> ExperimentConfig {
    let mut c = reference_config();
    c.datasets.normal.size = 300;
    c.datasets.in_test_size = 150;
    c.datasets.outlier.size = 200;
    for t in &mut c.datasets.tests {
        t.size = 150;
    }
    c.schedule.phase_a_epochs = 3;
    c.schedule.phase_b_epochs = 2;
    c.schedule.phase_c_epochs = 3;
    c.schedule.boundary_pool_size = 64;
    c.model.classifier_hidden = vec![8];
    c.model.generator_hidden = vec![8];
    c.budget.pgd_steps = 5;
    c
}

#[test]
fn shipped_reference_file_matches_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let loaded = ExperimentConfig::from_file(&path, &[]).unwrap();
    assert_eq!(loaded, reference_config());
}

#[test]
fn unknown_keys_name_their_dotted_path() {
    let err = ExperimentConfig::load(Some("[schedule]\nphase_q_epochs = 3\n"), &[]).unwrap_err();
    assert!(err.to_string().contains("schedule.phase_q_epochs"), "{err}");
    let err = ExperimentConfig::load(None, &[("model.widht".into(), "3".into())]).unwrap_err();
    assert!(err.to_string().contains("model.widht"), "{err}");
}

#[test]
fn fingerprint_ignores_output_directory() {
    let a = quick();
    let b = ExperimentConfig { output: "elsewhere".into(), ..quick() };
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = ExperimentConfig { seed: 99, ..quick() };
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn only_boundary_modes_report_a_boundary_pool() {
    let config = quick();
    let data = load_data(&config).unwrap();
    for mode in AblationMode::ALL {
        let run = execute_run(&config, &data, &RunSpec::new(mode, 16, config.seed));
        assert!(run.error.is_none(), "{mode}: {:?}", run.error);
        assert_eq!(run.boundary_pool.is_some(), mode.uses_boundary(), "{mode}");
        assert_eq!(run.metrics.len(), config.datasets.tests.len());
    }
}

#[test]
fn single_count_sweep_equals_a_direct_run() {
    let config = quick();
    let data = load_data(&config).unwrap();
    let sweep = run_fewshot_sweep(&config, &data, AblationMode::Iii, &[16]).unwrap();
    let direct = execute_run(&config, &data, &RunSpec::new(AblationMode::Iii, 16, config.seed));
    assert_eq!(sweep.entries, vec![direct]);
}

#[test]
fn sweep_rejects_bad_counts() {
    let config = quick();
    let data = load_data(&config).unwrap();
    assert!(run_fewshot_sweep(&config, &data, AblationMode::Ii, &[4, 8]).is_err());
    assert!(run_fewshot_sweep(&config, &data, AblationMode::Ii, &[]).is_err());
    assert!(run_fewshot_sweep(&config, &data, AblationMode::Ii, &[100_000]).is_err());
}

#[test]
fn report_round_trips_and_plots_follow_sweep_order() {
    let config = quick();
    let data = load_data(&config).unwrap();
    let sweep = run_fewshot_sweep(&config, &data, AblationMode::Ii, &[16, 4, 0]).unwrap();
    let outcome = Outcome::Sweep { sweeps: vec![sweep] };
    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(&outcome, dir.path()).unwrap();
    assert!(written.iter().all(|p| p.starts_with(dir.path())));
    let back: Outcome =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    assert_eq!(back, outcome);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3 * config.datasets.tests.len());
    let plot = std::fs::read_to_string(dir.path().join("plots/ii_ring_auroc.csv")).unwrap();
    let counts: Vec<usize> = plot.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(counts, vec![16, 4, 0]);
    assert_eq!(std::fs::read_dir(dir.path().join("runs")).unwrap().count(), 3);
}

#[test]
fn one_class_mean_is_the_mean_of_the_classes() {
    let config = quick();
    let data = load_data(&config).unwrap();
    let occ = run_occ(&config, &data).unwrap();
    assert_eq!(occ.per_class.len(), 3);
    let aurocs: Vec<f64> = occ.per_class.iter().map(|r| r.metric(OCC_TEST_SET).unwrap().auroc).collect();
    let mean = aurocs.iter().sum::<f64>() / aurocs.len() as f64;
    assert!((occ.mean_auroc - mean).abs() < 1e-12);
    assert!(aurocs.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn one_class_needs_two_classes() {
    let mut config = quick();
    config.datasets.normal.means.truncate(1);
    let data = load_data(&config).unwrap();
    assert!(run_occ(&config, &data).is_err());
}

#[test]
fn break_point_needs_a_chance_level_count() {
    assert_eq!(detect_break_point(&[(1830, 0.61), (800, 0.51), (400, 0.50)], 0.55), Some(800));
    assert_eq!(detect_break_point(&[(64, 0.9), (8, 0.8), (0, 0.7)], 0.55), None);
    assert_eq!(detect_break_point(&[(64, 0.65), (8, 0.60), (0, 0.58)], 0.7), None);
    assert_eq!(detect_break_point(&[(64, 0.54), (8, 0.60)], 0.55), Some(64));
    assert_eq!(detect_break_point(&[], 0.55), None);
}
