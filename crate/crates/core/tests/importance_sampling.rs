use fbsde_core::basis::{BasisSet, CoefficientSchedule};
use fbsde_core::control::{importance_sample, importance_sample_with_vanilla_seed, make_policy};
use fbsde_core::model::make_double_well;
use fbsde_core::sde::{FeedbackControl, TimeGrid};
use rand::{Rng, SeedableRng};

#[test]
fn random_bounded_policies_leave_the_estimate_unbiased() {
    let spec = make_double_well(1.0, 0.01, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 1e-2).unwrap();
    let n = grid.n_steps();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for trial in 0..5u64 {
        let centres: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.random_range(-1.8..0.4)]).collect();
        let alpha: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        let basis = BasisSet::stationary(0.1, &centres, n).unwrap();
        let policy =
            make_policy(basis, CoefficientSchedule::constant(alpha, n), &spec, 1.0).unwrap();
        let report =
            importance_sample(&spec, &grid, &[-1.0], 10_000, 100 + trial, &policy).unwrap();
        let se = ((report.sample_variance + report.vanilla_variance) / 10_000.0).sqrt();
        let gap = (report.estimate - report.vanilla_estimate).abs();
        assert!(
            gap < 3.0 * se,
            "trial {trial}: tilted {} vs plain {} (se {se})",
            report.estimate,
            report.vanilla_estimate
        );
        assert!(report.ess > 0.0 && report.ess <= 10_000.0 + 1e-6);
    }
}

#[test]
fn zero_policy_reproduces_the_plain_estimator() {
    let spec = make_double_well(1.0, 0.01, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 1e-2).unwrap();
    let n = grid.n_steps();
    let basis = BasisSet::stationary(0.1, &[vec![-1.0], vec![0.0]], n).unwrap();
    let policy = make_policy(
        basis,
        CoefficientSchedule::constant(vec![0.0, 0.0], n),
        &spec,
        1.0,
    )
    .unwrap();
    let report =
        importance_sample_with_vanilla_seed(&spec, &grid, &[-1.0], 2000, 3, 3, &policy).unwrap();
    assert_eq!(report.estimate, report.vanilla_estimate);
    assert_eq!(report.sample_variance, report.vanilla_variance);
    assert_eq!(report.variance_reduction_factor, 1.0);
    assert!((report.ess - 2000.0).abs() < 1e-9);
    assert_eq!(report.clipped_fraction, 0.0);
}

#[test]
fn unclipped_control_is_the_negative_scaled_gradient() {
    let sigma = 0.7;
    let spec = make_double_well(sigma, 0.01, 1.0).unwrap();
    let n = 10;
    let centres = [vec![-1.2], vec![-0.4], vec![0.3]];
    let alpha = vec![0.8, -1.1, 0.4];
    let basis = BasisSet::stationary(0.1, &centres, n).unwrap();
    let policy = make_policy(
        basis.clone(),
        CoefficientSchedule::constant(alpha.clone(), n),
        &spec,
        1e6,
    )
    .unwrap();
    let h = 1e-6;
    for x in [-1.5, -0.9, -0.2, 0.1] {
        let fd =
            (basis.combine(3, &alpha, &[x + h]) - basis.combine(3, &alpha, &[x - h])) / (2.0 * h);
        let mut u = [0.0];
        policy.raw_control(&[x], 3, &mut u);
        assert!(
            (u[0] + sigma * fd).abs() < 1e-6,
            "x = {x}: u = {} vs {}",
            u[0],
            -sigma * fd
        );
        let mut clipped = [0.0];
        assert!(!policy.control(&[x], 3, &mut clipped));
        assert_eq!(clipped, u);
    }
}

#[test]
fn clipping_projects_onto_the_ball() {
    let spec = make_double_well(1.0, 0.01, 1.0).unwrap();
    let basis = BasisSet::stationary(0.1, &[vec![0.0]], 4).unwrap();
    let policy = make_policy(
        basis,
        CoefficientSchedule::constant(vec![50.0], 4),
        &spec,
        0.25,
    )
    .unwrap();
    let mut raw = [0.0];
    policy.raw_control(&[0.2], 0, &mut raw);
    let mut u = [0.0];
    assert!(policy.control(&[0.2], 0, &mut u));
    assert!((u[0].abs() - 0.25).abs() < 1e-15);
    assert_eq!(u[0].signum(), raw[0].signum());
}
