//! Gaussian radial basis with time-dependent centres and the value-function ansatz
//! `V_K(x, t_n) = Σ_k α_k(t_n) φ_k(x)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::sde::{derive_seed, simulate_forward, TimeGrid};

pub const DEFAULT_DELTA: f64 = 0.1;

/// Seed tag separating centre trajectories from the regression ensemble.
const CENTRE_SEED_TAG: u64 = 0xC3A7_2E11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    GaussianRbf,
}

/// `K` Gaussians `φ_k(x) = exp(−|μ_k(n) − x|² / (2δ))` whose centres move with `n`,
/// optionally followed by the constant function `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    kind: BasisKind,
    k: usize,
    constant: bool,
    dim: usize,
    n_steps: usize,
    delta: f64,
    centres: Vec<f64>,
}

impl BasisSet {
    /// `centres` is laid out `[n][k][i]` for `n = 0..=n_steps`.
    pub fn new(
        delta: f64,
        k: usize,
        dim: usize,
        n_steps: usize,
        centres: Vec<f64>,
    ) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::invalid("delta", "must be positive"));
        }
        if k == 0 {
            return Err(Error::invalid("K", "need at least one basis function"));
        }
        if centres.len() != (n_steps + 1) * k * dim {
            return Err(Error::invalid(
                "centres",
                format!(
                    "expected {} entries, got {}",
                    (n_steps + 1) * k * dim,
                    centres.len()
                ),
            ));
        }
        if centres.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("centres", "must be finite"));
        }
        Ok(Self {
            kind: BasisKind::GaussianRbf,
            k,
            constant: false,
            dim,
            n_steps,
            delta,
            centres,
        })
    }

    /// Same centres at every step.
    pub fn stationary(delta: f64, centres: &[Vec<f64>], n_steps: usize) -> Result<Self> {
        let dim = centres.first().map_or(0, Vec::len);
        if centres.iter().any(|c| c.len() != dim) {
            return Err(Error::invalid("centres", "inconsistent dimensions"));
        }
        let flat: Vec<f64> = centres.iter().flatten().copied().collect();
        let all = flat.repeat(n_steps + 1);
        Self::new(delta, centres.len(), dim, n_steps, all)
    }

    /// Appends `φ ≡ 1` after the Gaussians.
    pub fn with_constant(mut self) -> Self {
        self.constant = true;
        self
    }

    pub fn has_constant(&self) -> bool {
        self.constant
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    /// Number of basis functions, including the constant if present.
    pub fn len(&self) -> usize {
        self.k + usize::from(self.constant)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_gaussians(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[inline]
    pub fn centre(&self, n: usize, k: usize) -> &[f64] {
        let off = (n * self.k + k) * self.dim;
        &self.centres[off..off + self.dim]
    }

    /// Restricts to steps `0..=n_steps`.
    pub fn truncated(&self, n_steps: usize) -> Result<Self> {
        let n = n_steps.min(self.n_steps);
        let mut out = Self::new(
            self.delta,
            self.k,
            self.dim,
            n,
            self.centres[..(n + 1) * self.k * self.dim].to_vec(),
        )?;
        out.constant = self.constant;
        Ok(out)
    }

    /// Writes `(φ_k(x))_k` into `out`.
    #[inline]
    pub fn eval_into(&self, n: usize, x: &[f64], out: &mut [f64]) {
        let scale = 0.5 / self.delta;
        for (k, o) in out.iter_mut().enumerate().take(self.k) {
            let c = self.centre(n, k);
            let r2: f64 = c.iter().zip(x).map(|(ci, xi)| (ci - xi) * (ci - xi)).sum();
            *o = (-r2 * scale).exp();
        }
        if self.constant {
            out[self.k] = 1.0;
        }
    }

    pub fn eval_basis(&self, n: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(n, x, &mut out);
        out
    }

    /// Row-major `K × d` gradients `∇φ_k(x) = φ_k(x)(μ_k − x)/δ`.
    pub fn eval_basis_grad(&self, n: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len() * self.dim];
        let mut phi = vec![0.0; self.len()];
        self.eval_into(n, x, &mut phi);
        for k in 0..self.k {
            let c = self.centre(n, k);
            for i in 0..self.dim {
                out[k * self.dim + i] = phi[k] * (c[i] - x[i]) / self.delta;
            }
        }
        out
    }

    /// `Σ_k α_k ∇φ_k(x)` with the supplied coefficients.
    pub fn combine_grad_into(&self, n: usize, alpha: &[f64], x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let scale = 0.5 / self.delta;
        for (k, &a) in alpha.iter().enumerate().take(self.k) {
            let c = self.centre(n, k);
            let r2: f64 = c.iter().zip(x).map(|(ci, xi)| (ci - xi) * (ci - xi)).sum();
            let w = a * (-r2 * scale).exp() / self.delta;
            for i in 0..self.dim {
                out[i] += w * (c[i] - x[i]);
            }
        }
    }

    /// `Σ_k α_k φ_k(x)`.
    pub fn combine(&self, n: usize, alpha: &[f64], x: &[f64]) -> f64 {
        let scale = 0.5 / self.delta;
        let offset = if self.constant { alpha[self.k] } else { 0.0 };
        offset
            + alpha
                .iter()
                .enumerate()
                .take(self.k)
                .map(|(k, &a)| {
                    let c = self.centre(n, k);
                    let r2: f64 = c.iter().zip(x).map(|(ci, xi)| (ci - xi) * (ci - xi)).sum();
                    a * (-r2 * scale).exp()
                })
                .sum::<f64>()
    }

    pub fn eval_value(&self, coeffs: &CoefficientSchedule, n: usize, x: &[f64]) -> Result<f64> {
        Ok(self.combine(n, coeffs.alphas_at(n)?, x))
    }

    pub fn eval_value_grad(
        &self,
        coeffs: &CoefficientSchedule,
        n: usize,
        x: &[f64],
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.combine_grad_into(n, coeffs.alphas_at(n)?, x, &mut out);
        Ok(out)
    }
}

/// Centres `μ_k(n) = X^(k)_n` read off `K` extra frozen forward paths, drawn from a
/// seed stream separate from the regression ensemble.
pub fn adaptive_centres(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x0: &[f64],
    k: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("K", "need at least one basis function"));
    }
    let batch = simulate_forward(spec, grid, x0, k, derive_seed(seed, CENTRE_SEED_TAG), true)?;
    batch.ensure_finite()?;
    let d = spec.dim();
    let n_steps = grid.n_steps();
    let mut centres = Vec::with_capacity((n_steps + 1) * k * d);
    for n in 0..=n_steps {
        for j in 0..k {
            centres.extend_from_slice(batch.state(j, n));
        }
    }
    Ok(centres)
}

/// Builds a [`BasisSet`] with adaptive centres.
pub fn adaptive_basis(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x0: &[f64],
    k: usize,
    delta: f64,
    seed: u64,
) -> Result<BasisSet> {
    let centres = adaptive_centres(spec, grid, x0, k, seed)?;
    BasisSet::new(delta, k, spec.dim(), grid.n_steps(), centres)
}

/// Fitted `α_k(t_n)`, valid on steps `valid_from..=valid_to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSchedule {
    k: usize,
    n_steps: usize,
    alphas: Vec<f64>,
    valid_from: usize,
    valid_to: usize,
}

impl CoefficientSchedule {
    /// All-zero schedule with nothing fitted yet.
    pub fn unfitted(k: usize, n_steps: usize) -> Self {
        Self {
            k,
            n_steps,
            alphas: vec![0.0; (n_steps + 1) * k],
            valid_from: n_steps + 1,
            valid_to: 0,
        }
    }

    /// Uses the same `α` on every step `0..=n_steps`.
    pub fn constant(alpha: Vec<f64>, n_steps: usize) -> Self {
        let k = alpha.len();
        Self {
            k,
            n_steps,
            alphas: alpha.repeat(n_steps + 1),
            valid_from: 0,
            valid_to: n_steps,
        }
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn valid_from(&self) -> usize {
        self.valid_from
    }

    pub fn valid_to(&self) -> usize {
        self.valid_to
    }

    pub fn is_fitted(&self, n: usize) -> bool {
        n >= self.valid_from && n <= self.valid_to
    }

    pub fn set(&mut self, n: usize, alpha: &[f64]) {
        self.alphas[n * self.k..(n + 1) * self.k].copy_from_slice(alpha);
        if self.valid_from > self.valid_to {
            self.valid_from = n;
            self.valid_to = n;
        } else {
            self.valid_from = self.valid_from.min(n);
            self.valid_to = self.valid_to.max(n);
        }
    }

    pub fn alphas_at(&self, n: usize) -> Result<&[f64]> {
        if !self.is_fitted(n) {
            return Err(Error::StaleCoefficients {
                step: n,
                valid_from: self.valid_from,
            });
        }
        Ok(&self.alphas[n * self.k..(n + 1) * self.k])
    }

    /// Rows `step,k,alpha` for every fitted step.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "k", "alpha"])?;
        if self.valid_from <= self.valid_to {
            for n in self.valid_from..=self.valid_to {
                for (k, a) in self.alphas[n * self.k..(n + 1) * self.k].iter().enumerate() {
                    w.write_record([n.to_string(), k.to_string(), a.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}
