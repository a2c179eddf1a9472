//! Feedback control from a fitted value function and the importance-sampling
//! estimator it drives.
//!
//! Under the tilted dynamics `dX = (b + σu)dt + σdB`,
//! `E[exp(−W)] = E_Q[exp(−L^u − W^u)]` with the discrete log-likelihood
//! `L^u = Σ u·ξ√Δt + ½Σ|u|²Δt` accumulated on the same increments that drive the
//! controlled paths.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, CoefficientSchedule};
use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::sde::{
    derive_seed, simulate_controlled, FeedbackControl, LogLikelihoods, TimeGrid, TrajectoryBatch,
    ZeroControl,
};

pub const DEFAULT_CLIP: f64 = 1e3;
/// Tag for the seed of the uncontrolled comparison ensemble.
pub const VANILLA_SEED_TAG: u64 = 0x0076_616e_696c_6c61;

/// `u(x, t_n) = −σ(x)ᵀ∇V_K(x, t_n)`, scaled back onto the ball `|u| ≤ clip`.
#[derive(Debug, Clone)]
pub struct ControlPolicy {
    basis: BasisSet,
    coeffs: CoefficientSchedule,
    spec: ProblemSpec,
    clip: f64,
    /// For each step, the fitted step whose coefficients are used (if any).
    source: Vec<Option<usize>>,
}

impl ControlPolicy {
    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn coeffs(&self) -> &CoefficientSchedule {
        &self.coeffs
    }

    /// Step whose coefficients serve step `n`: the nearest fitted step at or after `n`.
    pub fn source_step(&self, n: usize) -> Option<usize> {
        self.source.get(n).copied().flatten()
    }

    /// Unclipped `−σᵀ∇V_K`; zero where no fitted step is available.
    pub fn raw_control(&self, x: &[f64], step: usize, out: &mut [f64]) {
        let Some(src) = self.source_step(step) else {
            out.fill(0.0);
            return;
        };
        let d = self.spec.dim();
        let q = self.spec.noise_dim();
        let mut grad = vec![0.0; d];
        let mut sig = vec![0.0; d * q];
        let alpha = self.coeffs.alphas_at(src).expect("source steps are fitted");
        self.basis.combine_grad_into(src, alpha, x, &mut grad);
        self.spec.diffusion(x, &mut sig);
        for (j, o) in out.iter_mut().enumerate() {
            *o = -(0..d).map(|i| sig[i * q + j] * grad[i]).sum::<f64>();
        }
    }
}

impl FeedbackControl for ControlPolicy {
    fn control(&self, x: &[f64], step: usize, out: &mut [f64]) -> bool {
        self.raw_control(x, step, out);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.clip {
            let s = self.clip / norm;
            out.iter_mut().for_each(|v| *v *= s);
            true
        } else if !norm.is_finite() {
            out.fill(0.0);
            true
        } else {
            false
        }
    }
}

pub fn make_policy(
    basis: BasisSet,
    coeffs: CoefficientSchedule,
    spec: &ProblemSpec,
    clip: f64,
) -> Result<ControlPolicy> {
    if clip.is_nan() || clip <= 0.0 {
        return Err(Error::invalid("clip", "must be positive"));
    }
    if coeffs.valid_from() > coeffs.valid_to() {
        return Err(Error::StaleCoefficients {
            step: 0,
            valid_from: coeffs.valid_from(),
        });
    }
    if coeffs.len() != basis.len() || coeffs.n_steps() != basis.n_steps() {
        return Err(Error::invalid(
            "coeffs",
            "coefficient schedule does not match the basis",
        ));
    }
    if basis.dim() != spec.dim() {
        return Err(Error::invalid(
            "basis",
            "basis dimension differs from the problem",
        ));
    }
    let source = (0..=coeffs.n_steps())
        .map(|n| {
            let s = n.max(coeffs.valid_from());
            (s <= coeffs.valid_to()).then_some(s)
        })
        .collect();
    Ok(ControlPolicy {
        basis,
        coeffs,
        spec: spec.clone(),
        clip,
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ISReport {
    pub n_paths: usize,
    /// Estimate of `E[exp(−W_τ)]`.
    pub estimate: f64,
    /// `−log(estimate)`.
    pub free_energy: f64,
    /// Unbiased sample variance of the per-path weights `exp(−L − W)`.
    pub sample_variance: f64,
    pub standard_error: f64,
    pub vanilla_estimate: f64,
    pub vanilla_variance: f64,
    /// `vanilla_variance / sample_variance` (1 when both vanish).
    pub variance_reduction_factor: f64,
    /// Effective sample size of the likelihood ratios `exp(−L)`.
    pub ess: f64,
    /// Share of controlled steps at which the clip was active.
    pub clipped_fraction: f64,
    pub max_log_weight: f64,
    pub min_log_weight: f64,
    pub exit_fraction: f64,
    /// Per-path `−L − W`, kept out of the JSON report.
    #[serde(skip)]
    pub log_weights: Vec<f64>,
}

impl ISReport {
    /// Rows `path,log_weight,weight`.
    pub fn write_weights_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["path", "log_weight", "weight"])?;
        for (m, lw) in self.log_weights.iter().enumerate() {
            w.write_record([m.to_string(), lw.to_string(), lw.exp().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and unbiased variance of `exp(l_i)` computed with a max shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpMoments {
    pub mean: f64,
    pub variance: f64,
    pub log_mean: f64,
}

pub fn exp_moments(logs: &[f64]) -> Result<ExpMoments> {
    let m = logs.len();
    if m == 0 {
        return Err(Error::EstimatorFailure("no samples".into()));
    }
    let shift = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::EstimatorFailure(format!(
            "all weights degenerate (max log-weight {shift})"
        )));
    }
    let scaled: Vec<f64> = logs.iter().map(|l| (l - shift).exp()).collect();
    let mean_s = scaled.iter().sum::<f64>() / m as f64;
    let var_s = if m > 1 {
        scaled.iter().map(|w| (w - mean_s).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let log_mean = shift + mean_s.ln();
    if !log_mean.is_finite() {
        return Err(Error::EstimatorFailure(
            "weights underflow to zero; the policy is badly mismatched".into(),
        ));
    }
    Ok(ExpMoments {
        mean: log_mean.exp(),
        variance: var_s * (2.0 * shift).exp(),
        log_mean,
    })
}

/// `vanilla / controlled`, with `0 / 0 = 1` (both estimators exact).
pub fn variance_ratio(vanilla: f64, controlled: f64) -> f64 {
    if controlled > 0.0 {
        vanilla / controlled
    } else if vanilla > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// `(Σw)² / Σw²` for `w = exp(l)`.
pub fn effective_sample_size(logs: &[f64]) -> f64 {
    let shift = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return 0.0;
    }
    let (s1, s2) = logs.iter().fold((0.0, 0.0), |(a, b), l| {
        let w = (l - shift).exp();
        (a + w, b + w * w)
    });
    s1 * s1 / s2
}

/// `−L − W` for each path, with `W = Σ fΔt + g(X̂_stop)`.
fn log_weights(spec: &ProblemSpec, batch: &TrajectoryBatch, lik: &LogLikelihoods) -> Vec<f64> {
    (0..batch.n_paths())
        .map(|m| {
            -lik.log_likelihood[m]
                - lik.running_cost[m]
                - spec.terminal_cost(batch.stopped_state(m))
        })
        .collect()
}

/// Runs `M` controlled paths and `M` uncontrolled comparison paths on a
/// separate seed stream.
pub fn importance_sample(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    policy: &dyn FeedbackControl,
) -> Result<ISReport> {
    importance_sample_with_vanilla_seed(
        spec,
        grid,
        x0,
        n_paths,
        seed,
        derive_seed(seed, VANILLA_SEED_TAG),
        policy,
    )
}

/// As [`importance_sample`] with an explicit seed for the uncontrolled run.
pub fn importance_sample_with_vanilla_seed(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    vanilla_seed: u64,
    policy: &dyn FeedbackControl,
) -> Result<ISReport> {
    let (batch, lik) = simulate_controlled(spec, grid, x0, n_paths, seed, policy)?;
    batch.ensure_finite()?;
    let (vanilla, vanilla_lik) =
        simulate_controlled(spec, grid, x0, n_paths, vanilla_seed, &ZeroControl)?;
    vanilla.ensure_finite()?;

    let lw = log_weights(spec, &batch, &lik);
    let moments = exp_moments(&lw)?;
    let vanilla_moments = exp_moments(&log_weights(spec, &vanilla, &vanilla_lik))?;
    let ratios: Vec<f64> = lik.log_likelihood.iter().map(|l| -l).collect();
    let controlled: usize = lik.controlled_steps.iter().sum();
    let clipped: usize = lik.clipped_steps.iter().sum();

    Ok(ISReport {
        n_paths,
        estimate: moments.mean,
        free_energy: -moments.log_mean,
        sample_variance: moments.variance,
        standard_error: (moments.variance / n_paths as f64).sqrt(),
        vanilla_estimate: vanilla_moments.mean,
        vanilla_variance: vanilla_moments.variance,
        variance_reduction_factor: variance_ratio(vanilla_moments.variance, moments.variance),
        ess: effective_sample_size(&ratios),
        clipped_fraction: if controlled > 0 {
            clipped as f64 / controlled as f64
        } else {
            0.0
        },
        max_log_weight: lw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_log_weight: lw.iter().copied().fold(f64::INFINITY, f64::min),
        exit_fraction: batch.exit_fraction(),
        log_weights: lw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSet;
    use crate::model::make_double_well;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single_centre_policy(mu: f64, alpha: f64, clip: f64) -> ControlPolicy {
        let spec = make_double_well(1.0, 0.01, 0.1).unwrap();
        let basis = BasisSet::stationary(0.1, &[vec![mu]], 10).unwrap();
        let coeffs = CoefficientSchedule::constant(vec![alpha], 10);
        make_policy(basis, coeffs, &spec, clip).unwrap()
    }

    #[test]
    fn zero_coefficients_give_zero_control() {
        let p = single_centre_policy(-1.0, 0.0, 10.0);
        let mut u = [1.0];
        for x in [-2.0, -1.0, -0.1] {
            assert!(!p.control(&[x], 3, &mut u));
            assert_eq!(u[0], 0.0);
        }
    }

    #[test]
    fn control_vanishes_at_the_centre() {
        let p = single_centre_policy(-0.7, 3.0, 10.0);
        let mut u = [1.0];
        p.control(&[-0.7], 0, &mut u);
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let p = single_centre_policy(-1.0, 1e4, 2.0);
        let mut u = [0.0];
        assert!(p.control(&[-0.8], 5, &mut u));
        assert_relative_eq!(u[0].abs(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn source_step_uses_next_fitted_step() {
        let spec = make_double_well(1.0, 0.01, 0.1).unwrap();
        let basis = BasisSet::stationary(0.1, &[vec![-1.0]], 10).unwrap();
        let mut coeffs = CoefficientSchedule::unfitted(1, 10);
        for n in 1..=9 {
            coeffs.set(n, &[n as f64]);
        }
        let p = make_policy(basis.clone(), coeffs, &spec, 1.0).unwrap();
        assert_eq!(p.source_step(0), Some(1));
        assert_eq!(p.source_step(4), Some(4));
        assert_eq!(p.source_step(9), Some(9));
        assert_eq!(p.source_step(10), None);
        assert_eq!(p.source_step(11), None);

        let unfitted = CoefficientSchedule::unfitted(1, 10);
        assert!(matches!(
            make_policy(basis, unfitted, &spec, 1.0),
            Err(Error::StaleCoefficients { .. })
        ));
    }

    #[test]
    fn exp_moments_are_shift_invariant() {
        let logs = [-1000.0, -1001.0, -999.5];
        let m = exp_moments(&logs).unwrap();
        let direct: Vec<f64> = logs.iter().map(|l| (l + 1000.0f64).exp()).collect();
        let mean = direct.iter().sum::<f64>() / 3.0;
        assert_relative_eq!(m.log_mean, mean.ln() - 1000.0, epsilon = 1e-12);
        // The mean itself underflows but its logarithm stays exact.
        assert_eq!(m.mean, 0.0);
        assert!(exp_moments(&[f64::NEG_INFINITY; 3]).is_err());
        assert!(exp_moments(&[]).is_err());
    }

    #[test]
    fn ess_of_equal_weights_is_the_count() {
        assert_relative_eq!(effective_sample_size(&[0.0; 17]), 17.0, epsilon = 1e-12);
        assert_relative_eq!(
            effective_sample_size(&[0.0, f64::NEG_INFINITY]),
            1.0,
            epsilon = 1e-12
        );
    }

    proptest! {
        #[test]
        fn ess_never_exceeds_sample_count(logs in prop::collection::vec(-30.0f64..30.0, 1..50)) {
            let ess = effective_sample_size(&logs);
            prop_assert!(ess <= logs.len() as f64 * (1.0 + 1e-12));
            prop_assert!(ess >= 1.0 - 1e-12);
        }

        #[test]
        fn control_matches_value_gradient(x in -2.0f64..0.0, n in 0usize..10) {
            let spec = make_double_well(1.0, 0.01, 0.1).unwrap();
            let basis = BasisSet::stationary(0.1, &[vec![-1.2], vec![-0.6], vec![-0.1]], 10).unwrap();
            let coeffs = CoefficientSchedule::constant(vec![0.4, -1.3, 2.1], 10);
            let p = make_policy(basis.clone(), coeffs.clone(), &spec, 1e6).unwrap();
            let mut u = [0.0];
            p.control(&[x], n, &mut u);
            let src = p.source_step(n).unwrap();
            let h = 1e-6;
            let fd = (basis.eval_value(&coeffs, src, &[x + h]).unwrap()
                - basis.eval_value(&coeffs, src, &[x - h]).unwrap()) / (2.0 * h);
            prop_assert!((u[0] + fd).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
    }
}
