//! One-dimensional finite-difference reference solver.
//!
//! Solves `ψ_t = ½σ²ψ_xx + b(x)ψ_x` on `(x_min, 0)` with `ψ(·, 0) = 0`,
//! `ψ(0, t) = 1` and a zero-flux wall at `x_min`, so that `ψ(x, T)` is the
//! probability of reaching `0` before `T` from `x`. The time stepping is
//! Crank–Nicolson, started with a few implicit-Euler substeps to damp the
//! corner discontinuity at `(0, 0)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProblemSpec;

pub const DEFAULT_DOMAIN_LENGTH: f64 = 3.5;
pub const DEFAULT_N_X: usize = 700;
pub const DEFAULT_DT_PDE: f64 = 1e-3;

/// Values outside `[−BOUND_TOL, 1 + BOUND_TOL]` abort the solve.
const BOUND_TOL: f64 = 1e-6;
/// Number of implicit-Euler substeps replacing the first Crank–Nicolson step.
const SMOOTHING_SUBSTEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeGrid {
    pub x_min: f64,
    pub x_max: f64,
    /// Number of spatial nodes, both ends included.
    pub n_x: usize,
    pub dt_pde: f64,
}

impl Default for PdeGrid {
    fn default() -> Self {
        Self {
            x_min: -DEFAULT_DOMAIN_LENGTH,
            x_max: 0.0,
            n_x: DEFAULT_N_X,
            dt_pde: DEFAULT_DT_PDE,
        }
    }
}

impl PdeGrid {
    pub fn new(domain_length: f64, n_x: usize, dt_pde: f64) -> Result<Self> {
        let grid = Self {
            x_min: -domain_length,
            x_max: 0.0,
            n_x,
            dt_pde,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 3 {
            return Err(Error::invalid("n_x", "need at least 3 nodes"));
        }
        if !(self.dt_pde > 0.0 && self.dt_pde.is_finite()) {
            return Err(Error::invalid("dt_pde", "must be positive"));
        }
        if !(self.x_min.is_finite() && self.x_min < self.x_max) {
            return Err(Error::invalid("x_min", "must lie below x_max"));
        }
        if self.x_max != 0.0 {
            return Err(Error::invalid("x_max", "the absorbing boundary sits at 0"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    /// Number of time steps covering `horizon`, at least one.
    pub fn n_t(&self, horizon: f64) -> usize {
        ((horizon / self.dt_pde).round() as usize).max(1)
    }

    /// The same domain with `Δx` and `dt_pde` halved.
    pub fn refined(&self) -> Self {
        Self {
            n_x: 2 * self.n_x - 1,
            dt_pde: 0.5 * self.dt_pde,
            ..*self
        }
    }
}

/// `ψ(·, T)` on the grid nodes, with a record of the solver's invariant checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeSolution {
    pub x: Vec<f64>,
    pub psi: Vec<f64>,
    pub horizon: f64,
    pub n_t: usize,
    /// Largest excursion of `ψ` outside `[0, 1]` over all time slices.
    pub max_bound_violation: f64,
    /// Largest decrease `ψ(x, t_n) − ψ(x, t_{n+1})` over all nodes and steps.
    pub max_time_decrease: f64,
}

impl PdeSolution {
    /// `ψ(x, T)` by linear interpolation; `x ≥ x_max` gives 1.
    pub fn value_at(&self, x: f64) -> Result<f64> {
        let first = self.x[0];
        let last = *self.x.last().expect("grid has nodes");
        if !x.is_finite() || x < first {
            return Err(Error::invalid(
                "x",
                format!("{x} lies outside [{first}, {last}]"),
            ));
        }
        if x >= last {
            return Ok(1.0);
        }
        let dx = self.x[1] - self.x[0];
        let i = (((x - first) / dx).floor() as usize).min(self.x.len() - 2);
        let w = (x - self.x[i]) / dx;
        Ok((1.0 - w) * self.psi[i] + w * self.psi[i + 1])
    }

    /// `−log(ψ(x, T) + ε)`.
    pub fn reference_value(&self, x: f64, epsilon: f64) -> Result<f64> {
        Ok(value_from_probability(self.value_at(x)?, epsilon))
    }

    /// Rows `x,psi`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "psi"])?;
        for (x, p) in self.x.iter().zip(&self.psi) {
            w.write_record([x.to_string(), p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `−log(ψ + ε)`.
pub fn value_from_probability(psi: f64, epsilon: f64) -> f64 {
    -(psi + epsilon).ln()
}

/// Tridiagonal rows `lower·ψ_{i−1} + diag·ψ_i + upper·ψ_{i+1}` of the generator.
struct Generator {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl Generator {
    fn new(spec: &ProblemSpec, grid: &PdeGrid) -> Self {
        let n = grid.n_x;
        let h = grid.dx();
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut b = [0.0];
        let mut sig = [0.0];
        for i in 1..n - 1 {
            let x = [grid.node(i)];
            spec.drift(&x, 0.0, &mut b);
            spec.diffusion(&x, &mut sig);
            let a = 0.5 * sig[0] * sig[0] / (h * h);
            let c = b[0] / (2.0 * h);
            lower[i] = a - c;
            diag[i] = -2.0 * a;
            upper[i] = a + c;
        }
        Self { lower, diag, upper }
    }

    fn apply(&self, psi: &[f64], i: usize) -> f64 {
        self.lower[i] * psi[i - 1] + self.diag[i] * psi[i] + self.upper[i] * psi[i + 1]
    }
}

/// Factored system for `(I − θτ·L)ψ_new = rhs` with the boundary rows built in.
struct StepMatrix {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    /// Multiplier applied to the interior row-1 right-hand side to form row 0.
    wall_factor: f64,
}

impl StepMatrix {
    fn new(gen: &Generator, theta_tau: f64) -> Self {
        let n = gen.diag.len();
        let mut lower = vec![0.0; n];
        let mut diag = vec![1.0; n];
        let mut upper = vec![0.0; n];
        for i in 1..n - 1 {
            lower[i] = -theta_tau * gen.lower[i];
            diag[i] = 1.0 - theta_tau * gen.diag[i];
            upper[i] = -theta_tau * gen.upper[i];
        }
        // Zero flux at the wall: 3ψ₀ − 4ψ₁ + ψ₂ = 0. The ψ₂ entry is eliminated
        // with row 1 (l₁ψ₀ + d₁ψ₁ + u₁ψ₂ = r₁) to keep the system tridiagonal.
        let wall_factor = 1.0 / upper[1];
        diag[0] = 3.0 - lower[1] * wall_factor;
        upper[0] = -4.0 - diag[1] * wall_factor;
        Self {
            lower,
            diag,
            upper,
            wall_factor,
        }
    }

    /// Thomas algorithm; `rhs` holds the interior right-hand sides on entry.
    fn solve(&self, rhs: &mut [f64], scratch: &mut [f64]) {
        let n = rhs.len();
        rhs[0] = -rhs[1] * self.wall_factor;
        rhs[n - 1] = 1.0;
        scratch[0] = self.upper[0] / self.diag[0];
        rhs[0] /= self.diag[0];
        for i in 1..n {
            let denom = self.diag[i] - self.lower[i] * scratch[i - 1];
            scratch[i] = self.upper[i] / denom;
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= scratch[i] * rhs[i + 1];
        }
    }
}

fn check_inputs(spec: &ProblemSpec, grid: &PdeGrid) -> Result<()> {
    grid.validate()?;
    if spec.dim() != 1 || spec.noise_dim() != 1 {
        return Err(Error::invalid(
            "spec",
            "the reference solver is one-dimensional",
        ));
    }
    let mut sig = [0.0];
    for i in 0..grid.n_x {
        spec.diffusion(&[grid.node(i)], &mut sig);
        if !(sig[0].is_finite() && sig[0] != 0.0) {
            return Err(Error::Model(format!("σ vanishes at x = {}", grid.node(i))));
        }
    }
    Ok(())
}

/// `ψ(·, T)` for the exit problem of `spec` through `x = 0` before `T = spec.horizon()`.
pub fn solve_exit_probability(spec: &ProblemSpec, grid: &PdeGrid) -> Result<PdeSolution> {
    check_inputs(spec, grid)?;
    let horizon = spec.horizon();
    let n_x = grid.n_x;
    let n_t = grid.n_t(horizon);
    let tau = horizon / n_t as f64;
    let gen = Generator::new(spec, grid);

    let mut psi = vec![0.0; n_x];
    let mut next = vec![0.0; n_x];
    let mut scratch = vec![0.0; n_x];
    let mut max_bound_violation: f64 = 0.0;
    let mut max_time_decrease: f64 = 0.0;

    let mut track = |old: &[f64], new: &[f64], t: f64| -> Result<()> {
        for (i, (&p, &q)) in old.iter().zip(new).enumerate() {
            let excess = (-q).max(q - 1.0).max(0.0);
            if excess > BOUND_TOL || !q.is_finite() {
                return Err(Error::PdeUnstable {
                    value: q,
                    x: grid.node(i),
                    t,
                });
            }
            max_bound_violation = max_bound_violation.max(excess);
            max_time_decrease = max_time_decrease.max(p - q);
        }
        Ok(())
    };

    // Implicit-Euler substeps over the first step.
    let sub = tau / SMOOTHING_SUBSTEPS as f64;
    let implicit = StepMatrix::new(&gen, sub);
    for s in 0..SMOOTHING_SUBSTEPS {
        next.copy_from_slice(&psi);
        implicit.solve(&mut next, &mut scratch);
        track(&psi, &next, (s + 1) as f64 * sub)?;
        std::mem::swap(&mut psi, &mut next);
    }

    let cn = StepMatrix::new(&gen, 0.5 * tau);
    for step in 1..n_t {
        for i in 1..n_x - 1 {
            next[i] = psi[i] + 0.5 * tau * gen.apply(&psi, i);
        }
        cn.solve(&mut next, &mut scratch);
        track(&psi, &next, (step + 1) as f64 * tau)?;
        std::mem::swap(&mut psi, &mut next);
    }

    Ok(PdeSolution {
        x: (0..n_x).map(|i| grid.node(i)).collect(),
        psi,
        horizon,
        n_t,
        max_bound_violation,
        max_time_decrease,
    })
}

/// `V_ref = −log(ψ(x, T) + ε)`.
pub fn reference_value(spec: &ProblemSpec, grid: &PdeGrid, x: f64, epsilon: f64) -> Result<f64> {
    solve_exit_probability(spec, grid)?.reference_value(x, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_double_well;
    use approx::assert_relative_eq;

    #[test]
    fn grid_validation() {
        assert!(PdeGrid::new(3.5, 2, 1e-3).is_err());
        assert!(PdeGrid::new(3.5, 10, 0.0).is_err());
        assert!(PdeGrid::new(-1.0, 10, 1e-3).is_err());
        let g = PdeGrid::default();
        assert_eq!(g.n_t(5.0), 5000);
        assert_relative_eq!(g.node(g.n_x - 1), 0.0, epsilon = 1e-12);
        let r = g.refined();
        assert_relative_eq!(r.dx(), 0.5 * g.dx(), epsilon = 1e-15);
    }

    #[test]
    fn value_conversion_examples() {
        assert_relative_eq!(
            value_from_probability(1.0, 0.01),
            -(1.01f64).ln(),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            value_from_probability(0.0, 0.01),
            4.605170185988091,
            epsilon = 1e-12
        );
    }

    #[test]
    fn tiny_horizon_leaves_interior_at_zero() {
        let spec = make_double_well(1.0, 0.01, 1e-6).unwrap();
        let grid = PdeGrid::new(3.5, 700, 1e-6).unwrap();
        let sol = solve_exit_probability(&spec, &grid).unwrap();
        assert_eq!(sol.n_t, 1);
        assert!(sol.value_at(-1.0).unwrap() < 1e-12);
        assert!(sol.value_at(-0.5).unwrap() < 1e-12);
        assert_eq!(sol.value_at(0.0).unwrap(), 1.0);
    }

    #[test]
    fn pure_diffusion_matches_reflection_formula() {
        // Brownian motion, wall far away: P(hit 0 before T from x) = erfc(|x| / √(2T)).
        let spec = ProblemSpec::new(1, 1, 0.5)
            .unwrap()
            .with_constant_diffusion(vec![1.0])
            .unwrap();
        let grid = PdeGrid::new(8.0, 1601, 1e-4).unwrap();
        let sol = solve_exit_probability(&spec, &grid).unwrap();
        for x in [-0.3_f64, -0.7, -1.2] {
            let exact = erfc(x.abs() / (2.0 * 0.5_f64).sqrt());
            assert_relative_eq!(sol.value_at(x).unwrap(), exact, epsilon = 5e-4);
        }
    }

    /// Complementary error function by series/continued fraction (test oracle).
    fn erfc(x: f64) -> f64 {
        if x < 2.0 {
            let mut sum = 0.0;
            let mut term = x;
            let mut k = 0.0;
            while term.abs() > 1e-17 {
                sum += term / (2.0 * k + 1.0);
                k += 1.0;
                term *= -x * x / k;
            }
            1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
        } else {
            let mut f = 0.0;
            for n in (1..60).rev() {
                f = n as f64 / 2.0 / (x + f);
            }
            (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f)
        }
    }

    #[test]
    fn zero_flux_wall_preserves_constants() {
        // With ψ ≡ 1 already reached, the solution stays 1.
        let spec = make_double_well(1.0, 0.01, 200.0).unwrap();
        let grid = PdeGrid::new(3.5, 141, 0.1).unwrap();
        let sol = solve_exit_probability(&spec, &grid).unwrap();
        for &p in &sol.psi {
            assert_relative_eq!(p, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn double_well_invariants() {
        let spec = make_double_well(1.0, 0.01, 1.0).unwrap();
        let sol = solve_exit_probability(&spec, &PdeGrid::default()).unwrap();
        assert!(sol.max_bound_violation <= 1e-8);
        assert!(sol.max_time_decrease <= 1e-8);
        for w in sol.psi.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "ψ increases towards the boundary");
        }
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 701);
    }

    #[test]
    fn rejects_multidimensional_problems() {
        let spec = ProblemSpec::new(2, 2, 1.0).unwrap();
        assert!(solve_exit_probability(&spec, &PdeGrid::default())
            .unwrap_err()
            .is_validation());
        let degenerate = ProblemSpec::new(1, 1, 1.0).unwrap();
        assert!(matches!(
            solve_exit_probability(&degenerate, &PdeGrid::default()),
            Err(Error::Model(_))
        ));
    }
}
