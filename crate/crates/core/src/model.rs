//! Problem definition for stopped diffusions.
//!
//! A [`ProblemSpec`] bundles the coefficients of
//!
//! ```text
//! dX_s = b(X_s, s) ds + σ(X_s) dB_s,   X_0 = x
//! ```
//!
//! together with the path functional
//! `W = ∫_0^τ f(X_s, s) ds + g(X_τ)`, where `τ = τ_O ∧ T` is the first exit time
//! from the open set `O` capped at the horizon `T`. Everything downstream only
//! evaluates these functions, so any problem expressible this way can be
//! simulated and solved.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// `b(x, t)` written into a `d`-vector.
pub type DriftFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;
/// `σ(x)` written into a row-major `d × m` buffer.
pub type DiffusionFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type RunningCostFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
pub type TerminalCostFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type TerminalGradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type DomainFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Step used for central differences of `g` when no analytic gradient is given.
const TERMINAL_FD_STEP: f64 = 1e-6;

/// Full definition of the stochastic control problem.
///
/// Immutable once built; clones share the underlying closures.
#[derive(Clone)]
pub struct ProblemSpec {
    dim: usize,
    noise_dim: usize,
    horizon: f64,
    drift: DriftFn,
    diffusion: DiffusionFn,
    running_cost: RunningCostFn,
    running_cost_is_zero: bool,
    terminal_cost: TerminalCostFn,
    terminal_grad: Option<TerminalGradFn>,
    domain: DomainFn,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    /// Starts a problem with zero drift, zero noise, zero costs and `O = ℝ^d`.
    pub fn new(dim: usize, noise_dim: usize, horizon: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if noise_dim == 0 || noise_dim > dim {
            return Err(Error::invalid(
                "noise_dim",
                format!("must lie in 1..={dim}"),
            ));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid("horizon", "must be a positive finite time"));
        }
        Ok(Self {
            dim,
            noise_dim,
            horizon,
            drift: Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)),
            diffusion: Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
            running_cost: Arc::new(|_, _| 0.0),
            running_cost_is_zero: true,
            terminal_cost: Arc::new(|_| 0.0),
            terminal_grad: Some(Arc::new(|_, out: &mut [f64]| out.fill(0.0))),
            domain: Arc::new(|_| true),
        })
    }

    pub fn with_drift(
        mut self,
        drift: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Arc::new(drift);
        self
    }

    pub fn with_drift_fn(mut self, drift: DriftFn) -> Self {
        self.drift = drift;
        self
    }

    pub fn with_diffusion(
        mut self,
        diffusion: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Arc::new(diffusion);
        self
    }

    /// Constant diffusion matrix, row-major `d × m`.
    pub fn with_constant_diffusion(self, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != self.dim * self.noise_dim {
            return Err(Error::invalid(
                "diffusion",
                format!(
                    "expected {} entries, got {}",
                    self.dim * self.noise_dim,
                    matrix.len()
                ),
            ));
        }
        Ok(self.with_diffusion(move |_, out| out.copy_from_slice(&matrix)))
    }

    pub fn with_running_cost(
        mut self,
        f: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_cost = Arc::new(f);
        self.running_cost_is_zero = false;
        self
    }

    /// Sets `g`. Its gradient falls back to central differences unless
    /// [`with_terminal_gradient`](Self::with_terminal_gradient) is also called.
    pub fn with_terminal_cost(mut self, g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_cost = Arc::new(g);
        self.terminal_grad = None;
        self
    }

    pub fn with_terminal_gradient(
        mut self,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.terminal_grad = Some(Arc::new(grad));
        self
    }

    pub fn with_domain(mut self, inside: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.domain = Arc::new(inside);
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid("horizon", "must be a positive finite time"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn drift_fn(&self) -> &DriftFn {
        &self.drift
    }

    #[inline]
    pub fn drift(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.drift)(x, t, out)
    }

    #[inline]
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    #[inline]
    pub fn running_cost(&self, x: &[f64], t: f64) -> f64 {
        (self.running_cost)(x, t)
    }

    /// Whether `f ≡ 0` is known structurally, which lets callers skip evaluations.
    pub fn has_zero_running_cost(&self) -> bool {
        self.running_cost_is_zero
    }

    #[inline]
    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        (self.terminal_cost)(x)
    }

    /// `∇g(x)`, analytic when available, else central differences.
    pub fn terminal_cost_grad(&self, x: &[f64], out: &mut [f64]) {
        if let Some(grad) = &self.terminal_grad {
            grad(x, out);
            return;
        }
        let mut probe = x.to_vec();
        for i in 0..self.dim {
            let xi = x[i];
            probe[i] = xi + TERMINAL_FD_STEP;
            let up = self.terminal_cost(&probe);
            probe[i] = xi - TERMINAL_FD_STEP;
            let down = self.terminal_cost(&probe);
            probe[i] = xi;
            out[i] = (up - down) / (2.0 * TERMINAL_FD_STEP);
        }
    }

    #[inline]
    pub fn in_domain(&self, x: &[f64]) -> bool {
        (self.domain)(x)
    }
}

/// Overdamped Langevin dynamics in `U(x) = (x² − 1)²` with the regularised
/// exit cost `g^ε(x) = −log(1_{x ≥ 0} + ε)` and domain `O = {x < 0}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWell {
    pub sigma: f64,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 0.01;

impl DoubleWell {
    pub fn new(sigma: f64, epsilon: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid("sigma", "must be positive"));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::invalid("epsilon", "must lie in (0, 1)"));
        }
        Ok(Self { sigma, epsilon })
    }

    pub fn potential(x: f64) -> f64 {
        let s = x * x - 1.0;
        s * s
    }

    pub fn drift(x: f64) -> f64 {
        -4.0 * x * (x * x - 1.0)
    }

    pub fn exited(x: f64) -> bool {
        x >= 0.0
    }

    pub fn terminal_cost(&self, x: f64) -> f64 {
        if Self::exited(x) {
            -(1.0 + self.epsilon).ln()
        } else {
            -self.epsilon.ln()
        }
    }

    /// The control problem over horizon `T`.
    pub fn problem(&self, horizon: f64) -> Result<ProblemSpec> {
        self.problem_with_push(horizon, 0.0)
    }

    /// Same problem but with drift `b(x) + push`; used as the forward drift `b₀`
    /// when sampling exits under a changed measure.
    pub fn problem_with_push(&self, horizon: f64, push: f64) -> Result<ProblemSpec> {
        if !push.is_finite() {
            return Err(Error::invalid("drift_change", "push must be finite"));
        }
        let epsilon = self.epsilon;
        let inside = -epsilon.ln();
        let outside = -(1.0 + epsilon).ln();
        Ok(ProblemSpec::new(1, 1, horizon)?
            .with_drift(move |x, _, out| out[0] = Self::drift(x[0]) + push)
            .with_constant_diffusion(vec![self.sigma])?
            .with_terminal_cost(move |x| if Self::exited(x[0]) { outside } else { inside })
            // g^ε is piecewise constant: zero gradient away from the jump.
            .with_terminal_gradient(|_, out| out[0] = 0.0)
            .with_domain(|x| !Self::exited(x[0])))
    }

    pub fn exit_probability(&self, gamma_eps: f64) -> ExitProbability {
        exit_probability_from_value(gamma_eps, self.epsilon)
    }
}

pub fn make_double_well(sigma: f64, epsilon: f64, horizon: f64) -> Result<ProblemSpec> {
    DoubleWell::new(sigma, epsilon)?.problem(horizon)
}

/// Exit probability recovered from the regularised free energy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExitProbability {
    pub probability: f64,
    /// Set when `exp(−γ^ε) − ε` was negative and the value was clamped to zero.
    pub clamped: bool,
}

/// `P(τ_O < T) = exp(−γ^ε) − ε`, clamped at zero with a flag when statistical
/// error pushes `γ^ε` past the regularisation floor.
pub fn exit_probability_from_value(gamma_eps: f64, epsilon: f64) -> ExitProbability {
    let p = (-gamma_eps).exp() - epsilon;
    if p < 0.0 {
        ExitProbability {
            probability: 0.0,
            clamped: true,
        }
    } else {
        ExitProbability {
            probability: p,
            clamped: false,
        }
    }
}
