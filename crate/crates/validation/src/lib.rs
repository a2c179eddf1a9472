//! Fixtures shared by the acceptance suite: the Ornstein–Uhlenbeck problem with
//! a closed-form free energy and small statistics helpers.

use fbsde_core::harness::{mean_and_variance, solve_once, SolveSettings};
use fbsde_core::lsmc::{LsmcConfig, ZScheme};
use fbsde_core::model::ProblemSpec;
use fbsde_core::sde::TimeGrid;
use fbsde_core::Result;

/// `dX = (−X + push) dt + dB` on ℝ with `g(x) = x²` over `T = 1`.
pub fn ou_quadratic(push: f64) -> Result<ProblemSpec> {
    Ok(ProblemSpec::new(1, 1, 1.0)?
        .with_drift(move |x, _, out| out[0] = -x[0] + push)
        .with_constant_diffusion(vec![1.0])?
        .with_terminal_cost(|x| x[0] * x[0])
        .with_terminal_gradient(|x, out| out[0] = 2.0 * x[0]))
}

/// `−log E[exp(−X_T²)]` for `X_T ~ N(m, v)`, `m = x₀e^{−T}`, `v = (1 − e^{−2T})/2`,
/// with `x₀ = 1`, `T = 1`: `½ log(1 + 2v) + m²/(1 + 2v)`.
pub fn ou_quadratic_oracle() -> f64 {
    let m = (-1.0f64).exp();
    let v = (1.0 - (-2.0f64).exp()) / 2.0;
    0.5 * (1.0 + 2.0 * v).ln() + m * m / (1.0 + 2.0 * v)
}

/// Solver settings for the OU problem: a wider basis than the double well needs.
pub fn ou_settings(z_scheme: ZScheme) -> SolveSettings {
    SolveSettings {
        k: 10,
        m: 1000,
        delta: 0.5,
        constant_basis: true,
        lsmc: LsmcConfig {
            z_scheme,
            ..LsmcConfig::default()
        },
    }
}

/// `Δt = 10⁻²` grid on `[0, 1]`.
pub fn ou_grid() -> Result<TimeGrid> {
    TimeGrid::new(1.0, 0.01)
}

/// `(mean, unbiased variance)` of `reps` independent OU fits, optionally
/// simulated under the pushed drift with the matching driver.
pub fn ou_repeated(
    z_scheme: ZScheme,
    push: Option<f64>,
    reps: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    let spec = ou_quadratic(0.0)?;
    let forward = push.map(ou_quadratic).transpose()?;
    let grid = ou_grid()?;
    let settings = ou_settings(z_scheme);
    let gammas = (0..reps)
        .map(|r| {
            solve_once(&spec, forward.as_ref(), &grid, &[1.0], &settings, seed + r)
                .map(|fit| fit.solution.gamma_estimate)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_variance(&gammas))
}

/// `|a − b|` in units of the combined standard error of two means over `n` runs each.
pub fn separation(a: (f64, f64), b: (f64, f64), n: usize) -> f64 {
    (a.0 - b.0).abs() / ((a.1 + b.1) / n as f64).sqrt()
}
