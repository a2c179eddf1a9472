use std::path::Path;

use fbsde_core::harness::{
    run_early_horizon, run_experiment, ExperimentConfig, Table1Config, TABLE1,
};
use fbsde_core::Error;

fn small_config(seed: u64) -> ExperimentConfig {
    let mut c = TABLE1[1].config(seed);
    c.solver.m = 100;
    c.solver.dt = 1e-2;
    c.solver.repetitions = 3;
    c.importance_sampling.enabled = true;
    c.importance_sampling.n_paths = Some(500);
    c
}

fn run_on(threads: usize, config: &ExperimentConfig) -> String {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| run_experiment(config).unwrap().to_json().unwrap())
}

#[test]
fn repeated_runs_are_byte_identical() {
    let c = small_config(11);
    assert_eq!(run_on(2, &c), run_on(2, &c));
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let c = small_config(12);
    let one = run_on(1, &c);
    assert_eq!(one, run_on(3, &c));
    assert_eq!(one, run_on(4, &c));
}

#[test]
fn different_seeds_give_different_results() {
    assert_ne!(run_on(1, &small_config(1)), run_on(1, &small_config(2)));
}

#[test]
fn experiment_summary_is_consistent() {
    let c = small_config(5);
    let res = run_experiment(&c).unwrap();
    assert_eq!(res.repetitions.len(), 3);
    assert_eq!(res.estimates.len() + res.failed, 3);
    let reference = res.reference.unwrap();
    assert!((reference - TABLE1[1].v_ref).abs() < 0.01);
    let is = res.importance_sampling.unwrap();
    assert!(is.variance_reduction_min <= is.variance_reduction_mean);
    assert_eq!(res.diagnostics.active_profile.len(), 100);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed = if text.contains("\"rows\"") {
            Table1Config::from_json(&text).map(|_| ())
        } else {
            ExperimentConfig::from_json(&text).map(|_| ())
        };
        assert!(parsed.is_ok(), "{}: {:?}", path.display(), parsed.err());
        seen += 1;
    }
    assert!(seen >= 5, "only {seen} configs found in {}", dir.display());
}

#[test]
fn zero_repetitions_are_rejected() {
    let mut c = small_config(0);
    c.solver.repetitions = 0;
    match run_experiment(&c) {
        Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "solver.R"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn unknown_fields_are_reported_with_their_path() {
    let mut value = serde_json::to_value(small_config(0)).unwrap();
    value["solver"]["bogus"] = serde_json::json!(1);
    let err = ExperimentConfig::from_json(&value.to_string()).unwrap_err();
    assert!(err.to_string().contains("solver"), "{err}");
}

#[test]
fn stopping_modes_agree_on_an_exit_dominated_problem() {
    // Every path leaves before T, so the early-horizon run (per-trajectory on the
    // grid cut at T̃, identity drift change) must match the freeze-all run.
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let text = std::fs::read_to_string(dir.join("early_horizon.json")).unwrap();
    let base = ExperimentConfig::from_json(&text).unwrap();
    let mut freeze = base.clone();
    freeze.drift_change = None;
    freeze.solver.ridge = 1e-6;
    let frozen = run_experiment(&freeze).unwrap();
    let early = run_early_horizon(&base).unwrap();
    let horizon = early.diagnostics.effective_horizon.unwrap();
    assert!(horizon < base.problem.horizon, "T̃ = {horizon}");
    // With exit certain, ψ = 1 and V = −log(1 + ε) exactly; the only error
    // left is the 1e−6 ridge on the freeze-all regressions.
    let exact = -(1.0 + base.problem.epsilon).ln();
    for (mode, r) in [("freeze-all", &frozen), ("early horizon", &early)] {
        assert!(
            r.estimates.iter().all(|v| (v - exact).abs() < 1e-5),
            "{mode}: {:?} vs {exact}",
            r.estimates
        );
    }
    assert!((frozen.reference.unwrap() - exact).abs() < 1e-4);
}
