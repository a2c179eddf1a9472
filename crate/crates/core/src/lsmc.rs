//! Backward least-squares Monte Carlo recursion for the decoupled FBSDE
//!
//! ```text
//! dY = −h(s, X, Y, Z) ds + Z·dB,   Y_τ = g(X_τ)
//! ```
//!
//! run over a stored forward ensemble. Each step regresses
//! `Ŷ_{n+1} + Δt·h(X̂_n, Ŷ_{n+1}, Ẑ)` onto the basis evaluated at `X̂_n`; the
//! fitted coefficients define `V_K(·, t_n)` and, through its gradient, the
//! control `−σᵀ∇V_K`. The free energy is the mean of the step-0 data.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, CoefficientSchedule};
use crate::error::{Error, Result};
use crate::model::{DriftFn, ProblemSpec};
use crate::sde::TrajectoryBatch;

type DriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> Result<f64> + Send + Sync>;

/// Backward driver `h(s, x, y, z)`.
#[derive(Clone)]
pub struct Driver {
    eval: DriverFn,
}

impl std::fmt::Debug for Driver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Driver")
    }
}

impl Driver {
    pub fn new(
        eval: impl Fn(f64, &[f64], f64, &[f64]) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            eval: Arc::new(eval),
        }
    }

    #[inline]
    pub fn evaluate(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> Result<f64> {
        (self.eval)(t, x, y, z)
    }
}

/// `h(s, x, y, z) = −½|z|² + f(x, s)`.
pub fn free_energy_driver(spec: &ProblemSpec) -> Driver {
    let spec = spec.clone();
    Driver::new(move |t, x, _y, z| {
        let zz: f64 = z.iter().map(|v| v * v).sum();
        Ok(-0.5 * zz + spec.running_cost(x, t))
    })
}

/// Driver for a forward ensemble simulated with drift `b₀` instead of `b`:
/// `h̃ = h + σ(x)⁻¹(b(x) − b₀(x))·z`.
pub fn drift_changed_driver(spec: &ProblemSpec, b0: DriftFn) -> Result<Driver> {
    let d = spec.dim();
    if spec.noise_dim() != d {
        return Err(Error::Model(format!(
            "drift change needs a square diffusion matrix, got {d}×{}",
            spec.noise_dim()
        )));
    }
    let base = free_energy_driver(spec);
    let spec = spec.clone();
    Ok(Driver::new(move |t, x, y, z| {
        let h = base.evaluate(t, x, y, z)?;
        let mut b = vec![0.0; d];
        let mut b_new = vec![0.0; d];
        let mut sig = vec![0.0; d * d];
        spec.drift(x, t, &mut b);
        b0(x, t, &mut b_new);
        spec.diffusion(x, &mut sig);
        let diff = DVector::from_iterator(d, b.iter().zip(&b_new).map(|(p, q)| p - q));
        let shift = if d == 1 {
            if sig[0] == 0.0 {
                return Err(Error::Model(format!("σ is singular at x = {x:?}")));
            }
            DVector::from_element(1, diff[0] / sig[0])
        } else {
            DMatrix::from_row_slice(d, d, &sig)
                .lu()
                .solve(&diff)
                .ok_or_else(|| Error::Model(format!("σ is singular at x = {x:?}")))?
        };
        Ok(h + shift.iter().zip(z).map(|(s, zi)| s * zi).sum::<f64>())
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ZScheme {
    /// `Ẑ_{n+1} = σᵀ∇V_K(X̂_{n+1}, t_{n+1})`.
    #[default]
    GradientAnsatz,
    /// `Ẑ_n = E[ξ_{n+1} Ŷ_{n+1} | F_n] / √Δt`, by a second regression.
    MartingaleIncrement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StoppingMode {
    /// Every path stays in every regression; exited paths sit at their exit state.
    #[default]
    FreezeAll,
    /// Each backward path starts from `g` at its own exit step and leaves the
    /// regressions thereafter. Needs an unfrozen batch.
    PerTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsmcConfig {
    #[serde(default)]
    pub z_scheme: ZScheme,
    #[serde(default)]
    pub stopping_mode: StoppingMode,
    /// Singular values below `rank_tolerance · s_max` are dropped.
    #[serde(default = "default_rank_tolerance")]
    pub rank_tolerance: f64,
    /// Tikhonov weight added to the least-squares problem.
    #[serde(default)]
    pub ridge: f64,
}

pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-6;

/// Fitted values beyond this magnitude are treated as a blown-up recursion.
const DIVERGENCE_BOUND: f64 = 1e12;

fn default_rank_tolerance() -> f64 {
    DEFAULT_RANK_TOLERANCE
}

impl Default for LsmcConfig {
    fn default() -> Self {
        Self {
            z_scheme: ZScheme::default(),
            stopping_mode: StoppingMode::default(),
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
            ridge: 0.0,
        }
    }
}

impl LsmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rank_tolerance > 0.0 && self.rank_tolerance.is_finite()) {
            return Err(Error::invalid("rank_tolerance", "must be positive"));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::invalid("ridge", "must be non-negative"));
        }
        Ok(())
    }
}

/// Per-step regression record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// `M_n`, trajectories in the regression.
    pub active: usize,
    pub rank: usize,
    pub residual_norm: f64,
    /// `s_max / s_min` over all singular values (infinite if one vanishes).
    pub condition: f64,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsmcSolution {
    pub coeffs: CoefficientSchedule,
    pub y0_samples: Vec<f64>,
    pub gamma_estimate: f64,
    /// Entry `n` describes the regression at step `n`, `n = 0..N`.
    pub diagnostics: Vec<StepDiagnostics>,
    pub ridge: f64,
}

impl LsmcSolution {
    pub fn max_rank(&self) -> usize {
        self.diagnostics.iter().map(|d| d.rank).max().unwrap_or(0)
    }

    pub fn rank_deficient_steps(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.rank_deficient).count()
    }

    /// Standard error of `gamma_estimate` from the spread of `Ŷ₀` samples.
    pub fn gamma_std_error(&self) -> f64 {
        let m = self.y0_samples.len();
        if m < 2 {
            return 0.0;
        }
        let var = self
            .y0_samples
            .iter()
            .map(|y| (y - self.gamma_estimate).powi(2))
            .sum::<f64>()
            / (m - 1) as f64;
        (var / m as f64).sqrt()
    }

    /// Rows `step,active,rank,residual_norm,condition,rank_deficient`.
    pub fn write_diagnostics_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "step",
            "active",
            "rank",
            "residual_norm",
            "condition",
            "rank_deficient",
        ])?;
        for d in &self.diagnostics {
            w.write_record([
                d.step.to_string(),
                d.active.to_string(),
                d.rank.to_string(),
                d.residual_norm.to_string(),
                d.condition.to_string(),
                u8::from(d.rank_deficient).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares fit shared by several right-hand sides.
pub(crate) struct Regression {
    pub coeffs: Vec<DVector<f64>>,
    pub rank: usize,
    pub condition: f64,
}

/// Truncated-SVD solve of `min ‖Aα − b‖² + ridge‖α‖²` for each `b`.
///
/// On full-rank problems with `ridge = 0` this is the normal-equations minimiser
/// `(AᵀA)⁻¹Aᵀb`; otherwise it is the minimum-norm solution on the kept subspace.
pub(crate) fn solve_least_squares(
    a: DMatrix<f64>,
    rhs: &[DVector<f64>],
    rank_tol: f64,
    ridge: f64,
) -> Regression {
    let (rows, k) = a.shape();
    // A tall design is first reduced to its k × k triangular factor, so the SVD
    // only ever sees a small matrix: A = QR, R = UΣVᵀ, and Uᵀ(Qᵀb) replaces Aᵀb.
    let (small, projected): (DMatrix<f64>, Vec<DVector<f64>>) = if rows > k {
        let qr = a.qr();
        let projected = rhs
            .iter()
            .map(|b| {
                let mut qtb = b.clone();
                qr.q_tr_mul(&mut qtb);
                qtb.rows(0, k).into_owned()
            })
            .collect();
        (qr.r(), projected)
    } else {
        (a, rhs.to_vec())
    };
    let dense = faer::Mat::<f64>::from_fn(small.nrows(), k, |i, j| small[(i, j)]);
    let Ok(svd) = dense.thin_svd() else {
        return Regression {
            coeffs: rhs
                .iter()
                .map(|_| DVector::from_element(k, f64::NAN))
                .collect(),
            rank: 0,
            condition: f64::INFINITY,
        };
    };
    let (u, v) = (svd.U(), svd.V());
    let s: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let s_max = s.iter().copied().fold(0.0, f64::max);
    let s_min = if s.len() < k {
        0.0
    } else {
        s.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let cut = rank_tol * s_max;
    let kept: Vec<usize> = (0..s.len()).filter(|&i| s[i] > cut && s[i] > 0.0).collect();
    let coeffs = projected
        .iter()
        .map(|b| {
            let mut alpha = DVector::zeros(k);
            for &i in &kept {
                let proj: f64 = (0..b.len()).map(|r| u[(r, i)] * b[r]).sum();
                let w = proj * s[i] / (s[i] * s[i] + ridge);
                for j in 0..k {
                    alpha[j] += w * v[(j, i)];
                }
            }
            alpha
        })
        .collect();
    Regression {
        coeffs,
        rank: kept.len(),
        condition: if s_min > 0.0 {
            s_max / s_min
        } else {
            f64::INFINITY
        },
    }
}

/// Least squares on the rows of one step. With fewer rows than basis functions
/// the minimum-norm fit interpolates the data, and its gradient, fed back
/// through `−½|Ẑ|²`, blows up within a few steps; when the basis carries the
/// constant function such steps fit the sample mean instead.
fn regress(
    a: DMatrix<f64>,
    rhs: &[DVector<f64>],
    basis: &BasisSet,
    config: &LsmcConfig,
) -> Regression {
    let (rows, k) = a.shape();
    if basis.has_constant() && rows < k {
        let coeffs = rhs
            .iter()
            .map(|b| {
                let mut alpha = DVector::zeros(k);
                alpha[k - 1] = b.mean();
                alpha
            })
            .collect();
        return Regression {
            coeffs,
            rank: 1,
            condition: f64::INFINITY,
        };
    }
    solve_least_squares(a, rhs, config.rank_tolerance, config.ridge)
}

fn design_matrix(
    basis: &BasisSet,
    batch: &TrajectoryBatch,
    n: usize,
    rows: &[usize],
) -> DMatrix<f64> {
    let k = basis.len();
    let mut flat = vec![0.0; rows.len() * k];
    flat.par_chunks_mut(k)
        .zip(rows.par_iter())
        .for_each(|(row, &m)| basis.eval_into(n, batch.state(m, n), row));
    DMatrix::from_row_slice(rows.len(), k, &flat)
}

fn validate_inputs(
    batch: &TrajectoryBatch,
    basis: &BasisSet,
    spec: &ProblemSpec,
    config: &LsmcConfig,
) -> Result<()> {
    config.validate()?;
    batch.ensure_finite()?;
    if basis.n_steps() != batch.n_steps() {
        return Err(Error::invalid(
            "basis",
            format!(
                "basis has {} steps, batch has {}",
                basis.n_steps(),
                batch.n_steps()
            ),
        ));
    }
    if basis.dim() != batch.dim()
        || spec.dim() != batch.dim()
        || spec.noise_dim() != batch.noise_dim()
    {
        return Err(Error::invalid(
            "batch",
            "dimensions disagree with the problem or basis",
        ));
    }
    if config.stopping_mode == StoppingMode::PerTrajectory && batch.is_frozen() {
        return Err(Error::invalid(
            "stopping_mode",
            "per-trajectory mode needs an unfrozen forward batch",
        ));
    }
    Ok(())
}

/// Writes `σ(x)ᵀ v` into `out`.
fn sigma_transpose_times(
    spec: &ProblemSpec,
    x: &[f64],
    v: &[f64],
    sig: &mut [f64],
    out: &mut [f64],
) {
    let q = out.len();
    spec.diffusion(x, sig);
    for (j, o) in out.iter_mut().enumerate() {
        *o = v
            .iter()
            .enumerate()
            .map(|(i, vi)| sig[i * q + j] * vi)
            .sum();
    }
}

/// Runs the backward recursion from step `N` down to the step-0 read-out.
pub fn backward_solve(
    batch: &TrajectoryBatch,
    basis: &BasisSet,
    driver: &Driver,
    spec: &ProblemSpec,
    config: &LsmcConfig,
) -> Result<LsmcSolution> {
    validate_inputs(batch, basis, spec, config)?;
    let n_steps = batch.n_steps();
    let n_paths = batch.n_paths();
    let d = batch.dim();
    let q = batch.noise_dim();
    let k = basis.len();
    let dt = batch.grid().dt();
    let sqrt_dt = dt.sqrt();
    let per_trajectory = config.stopping_mode == StoppingMode::PerTrajectory;

    let stop: Vec<usize> = (0..n_paths)
        .map(|m| {
            if per_trajectory {
                batch.stop_step(m)
            } else {
                n_steps
            }
        })
        .collect();

    // Terminal data at each path's own stop step.
    let mut y = vec![0.0; n_paths];
    let mut z = vec![0.0; n_paths * q];
    y.par_iter_mut()
        .zip(z.par_chunks_mut(q))
        .enumerate()
        .for_each(|(m, (ym, zm))| {
            let x = batch.state(m, stop[m]);
            *ym = spec.terminal_cost(x);
            let mut grad = vec![0.0; d];
            let mut sig = vec![0.0; d * q];
            spec.terminal_cost_grad(x, &mut grad);
            sigma_transpose_times(spec, x, &grad, &mut sig, zm);
        });

    // Without running cost, V = −ε log E[exp(−g/ε)] lies between the extremes
    // of g. An estimate far outside that range can only come from a feedback
    // blow-up in Ẑ, so it is reported as divergence rather than returned.
    let plausible = spec.has_zero_running_cost().then(|| {
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let margin = (hi - lo).max(1.0);
        (lo - margin, hi + margin)
    });

    let inside = |m: usize, n: usize| batch.exit_step(m).is_none_or(|e| e > n);

    let mut coeffs = CoefficientSchedule::unfitted(k, n_steps);
    let mut diagnostics = Vec::with_capacity(n_steps);

    for n in (0..n_steps).rev() {
        let t = batch.grid().time(n);
        // Paths whose Ŷ_n comes from the regression.
        let continuing: Vec<usize> = (0..n_paths).filter(|&m| stop[m] > n).collect();
        // Paths that stop exactly here contribute their terminal value as data.
        let rows: Vec<usize> = (0..n_paths).filter(|&m| stop[m] >= n).collect();
        if rows.is_empty() {
            return Err(Error::NoActiveTrajectories { step: n });
        }
        let a = design_matrix(basis, batch, n, &rows);

        // Z used inside h at this step.
        let z_step: Vec<f64> = match config.z_scheme {
            ZScheme::GradientAnsatz => z.clone(),
            ZScheme::MartingaleIncrement => {
                let mut z_n = vec![0.0; n_paths * q];
                if !continuing.is_empty() {
                    // Regress ξ·(Ŷ_{n+1} − Ȳ_n) rather than ξ·Ŷ_{n+1}: the two have the
                    // same conditional mean, but the centred form does not carry the
                    // O(Var Ŷ / Δt) noise of the level into the estimate.
                    let a_cont = design_matrix(basis, batch, n, &continuing);
                    let y_cont =
                        DVector::from_iterator(continuing.len(), continuing.iter().map(|&m| y[m]));
                    let level =
                        regress(a_cont.clone(), std::slice::from_ref(&y_cont), basis, config);
                    let y_bar = &a_cont * &level.coeffs[0];
                    let rhs: Vec<DVector<f64>> = (0..q)
                        .map(|j| {
                            DVector::from_iterator(
                                continuing.len(),
                                continuing
                                    .iter()
                                    .enumerate()
                                    .map(|(r, &m)| batch.increment(m, n)[j] * (y[m] - y_bar[r])),
                            )
                        })
                        .collect();
                    let fit = regress(a_cont.clone(), &rhs, basis, config);
                    for j in 0..q {
                        let pred = &a_cont * &fit.coeffs[j];
                        for (r, &m) in continuing.iter().enumerate() {
                            z_n[m * q + j] = pred[r] / sqrt_dt;
                        }
                    }
                }
                z_n
            }
        };

        let data: Vec<f64> = rows
            .par_iter()
            .map(|&m| {
                // Once a path has left the domain the stopped value process is
                // constant, so the driver only acts while X̂_n is inside.
                if stop[m] == n || !inside(m, n) {
                    Ok(y[m])
                } else {
                    let x = batch.state(m, n);
                    Ok(y[m] + dt * driver.evaluate(t, x, y[m], &z_step[m * q..(m + 1) * q])?)
                }
            })
            .collect::<Result<_>>()?;

        if n == 0 {
            // X̂_0 is deterministic, so the projection onto F_0 is the sample mean.
            let fit = solve_least_squares(a, &[], config.rank_tolerance, config.ridge);
            let gamma = data.iter().sum::<f64>() / data.len() as f64;
            if !gamma.is_finite() {
                return Err(Error::NonFiniteRegression { step: 0 });
            }
            if let Some((lo, hi)) = plausible {
                if !(lo..=hi).contains(&gamma) {
                    return Err(Error::ImplausibleValue {
                        value: gamma,
                        lo,
                        hi,
                    });
                }
            }
            let residual = data.iter().map(|v| (v - gamma).powi(2)).sum::<f64>().sqrt();
            diagnostics.push(StepDiagnostics {
                step: 0,
                active: rows.len(),
                rank: fit.rank,
                residual_norm: residual,
                condition: fit.condition,
                rank_deficient: false,
            });
            diagnostics.reverse();
            return Ok(LsmcSolution {
                coeffs,
                y0_samples: data,
                gamma_estimate: gamma,
                diagnostics,
                ridge: config.ridge,
            });
        }

        let b = DVector::from_vec(data);
        let fit = regress(a.clone(), std::slice::from_ref(&b), basis, config);
        let alpha = &fit.coeffs[0];
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteRegression { step: n });
        }
        let fitted = &a * alpha;
        let residual_norm = (&fitted - &b).norm();
        coeffs.set(n, alpha.as_slice());
        diagnostics.push(StepDiagnostics {
            step: n,
            active: rows.len(),
            rank: fit.rank,
            residual_norm,
            condition: fit.condition,
            rank_deficient: fit.rank < k.min(rows.len()),
        });

        let alpha = alpha.as_slice();
        let updates: Vec<(usize, f64, Vec<f64>)> = rows
            .par_iter()
            .enumerate()
            .filter(|(_, &m)| stop[m] > n)
            .map(|(r, &m)| {
                let x = batch.state(m, n);
                let zm = match config.z_scheme {
                    ZScheme::GradientAnsatz => {
                        let mut grad = vec![0.0; d];
                        let mut sig = vec![0.0; d * q];
                        let mut out = vec![0.0; q];
                        basis.combine_grad_into(n, alpha, x, &mut grad);
                        sigma_transpose_times(spec, x, &grad, &mut sig, &mut out);
                        out
                    }
                    ZScheme::MartingaleIncrement => z_step[m * q..(m + 1) * q].to_vec(),
                };
                (m, fitted[r], zm)
            })
            .collect();
        for (m, ym, zm) in updates {
            if ym.is_nan() || ym.abs() > DIVERGENCE_BOUND || zm.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRegression { step: n });
            }
            y[m] = ym;
            z[m * q..(m + 1) * q].copy_from_slice(&zm);
        }
    }
    unreachable!("the backward loop always returns at step 0")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::adaptive_basis;
    use crate::model::make_double_well;
    use crate::sde::{simulate_forward, TimeGrid};
    use approx::assert_relative_eq;

    #[test]
    fn free_energy_driver_examples() {
        let spec = ProblemSpec::new(2, 2, 1.0).unwrap();
        let h = free_energy_driver(&spec);
        assert_eq!(h.evaluate(0.0, &[0.0, 0.0], 0.0, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(
            h.evaluate(0.0, &[0.0, 0.0], 0.0, &[1.0, 1.0]).unwrap(),
            -1.0
        );
        let spec = ProblemSpec::new(1, 1, 1.0)
            .unwrap()
            .with_running_cost(|x, _| x[0]);
        let h = free_energy_driver(&spec);
        assert_eq!(h.evaluate(0.3, &[2.0], 5.0, &[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn drift_changed_driver_examples() {
        let spec = make_double_well(1.0, 0.01, 1.0).unwrap();
        let same = drift_changed_driver(&spec, spec.drift_fn().clone()).unwrap();
        let h = free_energy_driver(&spec);
        for x in [-1.3, -0.2, 0.4] {
            for z in [-2.0, 0.0, 0.7] {
                assert_eq!(
                    same.evaluate(0.0, &[x], 0.0, &[z]).unwrap(),
                    h.evaluate(0.0, &[x], 0.0, &[z]).unwrap()
                );
            }
        }

        // σ = 2, b − b₀ = 1, z = 3 with h(z) = −4.5 → correction 1.5
        let spec = ProblemSpec::new(1, 1, 1.0)
            .unwrap()
            .with_drift(|_, _, out| out[0] = 1.0)
            .with_constant_diffusion(vec![2.0])
            .unwrap();
        let shifted =
            drift_changed_driver(&spec, Arc::new(|_, _, out: &mut [f64]| out[0] = 0.0)).unwrap();
        let base = free_energy_driver(&spec)
            .evaluate(0.0, &[0.0], 0.0, &[3.0])
            .unwrap();
        let changed = shifted.evaluate(0.0, &[0.0], 0.0, &[3.0]).unwrap();
        assert_relative_eq!(changed - base, 1.5, epsilon = 1e-14);
    }

    #[test]
    fn drift_change_rejects_singular_sigma() {
        let spec = ProblemSpec::new(1, 1, 1.0).unwrap();
        let h =
            drift_changed_driver(&spec, Arc::new(|_, _, out: &mut [f64]| out[0] = 1.0)).unwrap();
        assert!(matches!(
            h.evaluate(0.0, &[0.0], 0.0, &[1.0]),
            Err(Error::Model(_))
        ));
        let rect = ProblemSpec::new(2, 1, 1.0).unwrap();
        assert!(
            drift_changed_driver(&rect, Arc::new(|_, _, out: &mut [f64]| out.fill(0.0))).is_err()
        );
    }

    #[test]
    fn full_rank_solution_satisfies_normal_equations() {
        let a = DMatrix::from_fn(40, 4, |i, j| {
            (0.05 * i as f64 - 1.0).powi(j as i32) + 0.1 * ((i * j) as f64).sin()
        });
        let b = DVector::from_fn(40, |i, _| (i as f64 * 0.21).cos());
        let fit = solve_least_squares(a.clone(), std::slice::from_ref(&b), 1e-12, 0.0);
        assert_eq!(fit.rank, 4);
        let normal = a.transpose() * (&a * &fit.coeffs[0] - &b);
        assert!(normal.amax() < 1e-10);
        let direct = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * &b;
        assert!((direct - &fit.coeffs[0]).amax() < 1e-9);
    }

    #[test]
    fn exactly_rank_one_designs_are_fitted() {
        // Every row identical: the fit must reproduce a constant response.
        for (rows, k) in [(50, 11), (5, 3), (200, 11)] {
            let a = DMatrix::from_element(rows, k, 0.7);
            let b = DVector::from_element(rows, 0.134);
            let fit = solve_least_squares(a.clone(), std::slice::from_ref(&b), 1e-6, 0.0);
            assert_eq!(fit.rank, 1);
            assert!((&a * &fit.coeffs[0] - &b).amax() < 1e-12);
            assert!(fit.condition > 1e12);
        }
    }

    #[test]
    fn duplicated_columns_give_minimum_norm_solution() {
        let col = DVector::from_fn(10, |i, _| 1.0 + i as f64);
        let a = DMatrix::from_columns(&[col.clone(), col.clone()]);
        let fit = solve_least_squares(a, std::slice::from_ref(&col), 1e-10, 0.0);
        assert_eq!(fit.rank, 1);
        assert_relative_eq!(fit.coeffs[0][0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(fit.coeffs[0][1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn underdetermined_steps_fit_the_mean_when_a_constant_is_available() {
        let basis = BasisSet::stationary(0.1, &[vec![-1.0], vec![0.0], vec![1.0]], 1).unwrap();
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.2, 0.0, 0.0, 0.3, 1.0]);
        let b = DVector::from_vec(vec![1.0, 3.0]);
        let config = LsmcConfig::default();
        // Without the constant the minimum-norm interpolant is used.
        let fit = regress(a.clone(), std::slice::from_ref(&b), &basis, &config);
        assert!((&a * &fit.coeffs[0] - &b).amax() < 1e-12);

        let basis = basis.with_constant();
        let a = DMatrix::from_row_slice(2, 4, &[1.0, 0.2, 0.0, 1.0, 0.0, 0.3, 1.0, 1.0]);
        let fit = regress(a.clone(), std::slice::from_ref(&b), &basis, &config);
        assert_eq!(fit.rank, 1);
        assert_eq!(fit.coeffs[0].as_slice(), &[0.0, 0.0, 0.0, 2.0]);
        // With enough rows the ordinary fit is used.
        let a = DMatrix::from_fn(8, 4, |i, j| {
            if j == 3 {
                1.0
            } else {
                (-((i as f64 * 0.3 - 1.0) - (j as f64 - 1.0)).powi(2) / 0.2).exp()
            }
        });
        let b = DVector::from_fn(8, |i, _| i as f64);
        let fit = regress(a, std::slice::from_ref(&b), &basis, &config);
        assert_eq!(fit.rank, 4);
    }

    #[test]
    fn implausible_estimates_are_rejected() {
        // g ∈ {0, 1} with an absurd driver: the estimate leaves [min g − 1, max g + 1].
        let spec = ProblemSpec::new(1, 1, 0.1)
            .unwrap()
            .with_constant_diffusion(vec![1.0])
            .unwrap()
            .with_terminal_cost(|x| if x[0] > 0.0 { 1.0 } else { 0.0 });
        let grid = TimeGrid::new(0.1, 0.01).unwrap();
        let batch = simulate_forward(&spec, &grid, &[0.0], 50, 3, true).unwrap();
        let basis = BasisSet::stationary(0.1, &[vec![0.0]], grid.n_steps())
            .unwrap()
            .with_constant();
        let driver = Driver::new(|_, _, _, _| Ok(-1e3));
        let err =
            backward_solve(&batch, &basis, &driver, &spec, &LsmcConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ImplausibleValue { .. }), "{err}");
        let ok = backward_solve(
            &batch,
            &basis,
            &free_energy_driver(&spec),
            &spec,
            &LsmcConfig::default(),
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&ok.gamma_estimate));
    }

    #[test]
    fn per_trajectory_mode_needs_unfrozen_batch() {
        let spec = make_double_well(1.0, 0.01, 0.1).unwrap();
        let grid = TimeGrid::new(0.1, 0.01).unwrap();
        let batch = simulate_forward(&spec, &grid, &[-1.0], 20, 1, true).unwrap();
        let basis = adaptive_basis(&spec, &grid, &[-1.0], 3, 0.1, 1).unwrap();
        let config = LsmcConfig {
            stopping_mode: StoppingMode::PerTrajectory,
            ..Default::default()
        };
        let err =
            backward_solve(&batch, &basis, &free_energy_driver(&spec), &spec, &config).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn diagnostics_cover_every_step() {
        let spec = make_double_well(1.0, 0.01, 0.5).unwrap();
        let grid = TimeGrid::new(0.5, 0.01).unwrap();
        let batch = simulate_forward(&spec, &grid, &[-1.0], 100, 4, true).unwrap();
        let basis = adaptive_basis(&spec, &grid, &[-1.0], 4, 0.1, 4).unwrap();
        let sol = backward_solve(
            &batch,
            &basis,
            &free_energy_driver(&spec),
            &spec,
            &LsmcConfig::default(),
        )
        .unwrap();
        assert_eq!(sol.diagnostics.len(), grid.n_steps());
        for (n, d) in sol.diagnostics.iter().enumerate() {
            assert_eq!(d.step, n);
            assert_eq!(d.active, 100);
        }
        assert_eq!(sol.coeffs.valid_from(), 1);
        assert_eq!(sol.coeffs.valid_to(), grid.n_steps() - 1);
        let mean = sol.y0_samples.iter().sum::<f64>() / 100.0;
        assert_eq!(sol.gamma_estimate, mean);
        let mut buf = Vec::new();
        sol.write_diagnostics_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().count(),
            grid.n_steps() + 1
        );
    }
}
