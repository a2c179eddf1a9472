//! Euler–Maruyama simulation of stopped trajectories.
//!
//! Every trajectory draws its Gaussian increments from its own counter-based
//! ChaCha stream keyed by `(seed, path index)`, so a batch is bit-identical no
//! matter how many rayon workers generate it. All `N·m` increments of a path are
//! drawn even after it exits, which keeps streams aligned between controlled and
//! uncontrolled runs with the same seed.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ProblemSpec;

/// Mixes a master seed with a purpose tag (SplitMix64 finaliser).
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent substream for path `index` under `seed`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform grid `t_n = n·Δt`, `n = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    /// `N = ⌊T/Δt⌋`, treating ratios within round-off of an integer as exact.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid("horizon", "must be positive"));
        }
        let ratio = horizon / dt;
        let nearest = ratio.round();
        let n = if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest
        } else {
            ratio.floor()
        };
        if n < 1.0 {
            return Err(Error::invalid("dt", "must not exceed the horizon"));
        }
        Self::from_steps(dt, n as usize)
    }

    pub fn from_steps(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if n_steps == 0 {
            return Err(Error::invalid("n_steps", "must be positive"));
        }
        Ok(Self { dt, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn truncated(&self, n_steps: usize) -> Result<Self> {
        Self::from_steps(self.dt, n_steps.min(self.n_steps))
    }
}

/// A feedback control `u(x, t_n)` used to tilt the forward drift by `σu`.
pub trait FeedbackControl: Sync {
    /// Writes `u(x, t_n)` into `out` (length `m`) and returns whether the value was clipped.
    fn control(&self, x: &[f64], step: usize, out: &mut [f64]) -> bool;
}

/// `u ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroControl;

impl FeedbackControl for ZeroControl {
    fn control(&self, _x: &[f64], _step: usize, out: &mut [f64]) -> bool {
        out.fill(0.0);
        false
    }
}

/// Constant control vector.
#[derive(Debug, Clone)]
pub struct ConstantControl(pub Vec<f64>);

impl FeedbackControl for ConstantControl {
    fn control(&self, _x: &[f64], _step: usize, out: &mut [f64]) -> bool {
        out.copy_from_slice(&self.0);
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PathFailure {
    pub path: usize,
    /// First step whose state was non-finite.
    pub step: usize,
}

/// `M` discretised paths with their driving increments and exit information.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    dim: usize,
    noise_dim: usize,
    grid: TimeGrid,
    states: Vec<f64>,
    increments: Vec<f64>,
    exit_step: Vec<Option<usize>>,
    frozen: bool,
    failures: Vec<PathFailure>,
}

impl TrajectoryBatch {
    pub fn n_paths(&self) -> usize {
        self.exit_step.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// `X̂_n` of path `m`.
    #[inline]
    pub fn state(&self, m: usize, n: usize) -> &[f64] {
        let off = (m * (self.grid.n_steps + 1) + n) * self.dim;
        &self.states[off..off + self.dim]
    }

    /// `ξ_{n+1}` of path `m`, i.e. the draw that moves `X̂_n` to `X̂_{n+1}`.
    #[inline]
    pub fn increment(&self, m: usize, n: usize) -> &[f64] {
        let off = (m * self.grid.n_steps + n) * self.noise_dim;
        &self.increments[off..off + self.noise_dim]
    }

    pub fn exit_step(&self, m: usize) -> Option<usize> {
        self.exit_step[m]
    }

    pub fn exit_steps(&self) -> &[Option<usize>] {
        &self.exit_step
    }

    /// `min(exit step, N)`: the step at which path `m` is stopped.
    pub fn stop_step(&self, m: usize) -> usize {
        self.exit_step[m].map_or(self.grid.n_steps, |e| e.min(self.grid.n_steps))
    }

    pub fn stopped_state(&self, m: usize) -> &[f64] {
        self.state(m, self.stop_step(m))
    }

    pub fn failures(&self) -> &[PathFailure] {
        &self.failures
    }

    /// Fails if any path diverged.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.failures.first() {
            None => Ok(()),
            Some(first) => Err(Error::SimulationFailed {
                failed: self.failures.len(),
                total: self.n_paths(),
                first_path: first.path,
                first_step: first.step,
            }),
        }
    }

    pub fn exit_fraction(&self) -> f64 {
        let exited = self.exit_step.iter().filter(|e| e.is_some()).count();
        exited as f64 / self.n_paths() as f64
    }

    /// Keeps the first `n_steps` steps. Exits after the cut are forgotten.
    pub fn truncated(&self, n_steps: usize) -> Result<Self> {
        let grid = self.grid.truncated(n_steps)?;
        let n_new = grid.n_steps;
        let n_old = self.grid.n_steps;
        let mut states = Vec::with_capacity(self.n_paths() * (n_new + 1) * self.dim);
        let mut increments = Vec::with_capacity(self.n_paths() * n_new * self.noise_dim);
        for m in 0..self.n_paths() {
            let s = m * (n_old + 1) * self.dim;
            states.extend_from_slice(&self.states[s..s + (n_new + 1) * self.dim]);
            let i = m * n_old * self.noise_dim;
            increments.extend_from_slice(&self.increments[i..i + n_new * self.noise_dim]);
        }
        Ok(Self {
            dim: self.dim,
            noise_dim: self.noise_dim,
            grid,
            states,
            increments,
            exit_step: self
                .exit_step
                .iter()
                .map(|e| e.filter(|&s| s <= n_new))
                .collect(),
            frozen: self.frozen,
            failures: self
                .failures
                .iter()
                .copied()
                .filter(|f| f.step <= n_new)
                .collect(),
        })
    }

    /// Regenerates the states from the stored increments under the same dynamics.
    pub fn replay(&self, spec: &ProblemSpec, control: &dyn FeedbackControl) -> Result<Self> {
        let x0 = self.state(0, 0).to_vec();
        let out = run_paths(
            spec,
            &self.grid,
            &x0,
            self.n_paths(),
            self.frozen,
            control,
            Noise::Stored(self),
        )?;
        Ok(out.0)
    }

    /// Rows `path,step,t,x_0..x_{d-1},exited`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        header.push("exited".into());
        w.write_record(&header)?;
        for m in 0..self.n_paths() {
            for n in 0..=self.grid.n_steps {
                let mut rec = vec![m.to_string(), n.to_string(), self.grid.time(n).to_string()];
                rec.extend(self.state(m, n).iter().map(|v| v.to_string()));
                let exited = self.exit_step[m].is_some_and(|e| e <= n);
                rec.push(u8::from(exited).to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-path Girsanov and cost accumulators from a controlled run, all stopped at `τ`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogLikelihoods {
    /// `L^u = Σ u_n·ξ_{n+1}√Δt + ½ Σ |u_n|² Δt`.
    pub log_likelihood: Vec<f64>,
    /// `Σ f(X̂_n, t_n) Δt`.
    pub running_cost: Vec<f64>,
    pub clipped_steps: Vec<usize>,
    /// Steps at which the control was applied (before the stop).
    pub controlled_steps: Vec<usize>,
}

struct PathOutput {
    states: Vec<f64>,
    increments: Vec<f64>,
    exit: Option<usize>,
    failure: Option<usize>,
    log_likelihood: f64,
    running_cost: f64,
    clipped: usize,
    controlled: usize,
}

fn validate_start(spec: &ProblemSpec, x0: &[f64], n_paths: usize) -> Result<()> {
    if n_paths == 0 {
        return Err(Error::invalid("M", "need at least one trajectory"));
    }
    if x0.len() != spec.dim() {
        return Err(Error::invalid(
            "x0",
            format!("expected {} components", spec.dim()),
        ));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("x0", "must be finite"));
    }
    if !spec.in_domain(x0) {
        return Err(Error::invalid(
            "x0",
            "initial state must lie inside the domain",
        ));
    }
    Ok(())
}

enum Noise<'a> {
    Seeded(u64),
    Stored(&'a TrajectoryBatch),
}

fn run_paths(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: usize,
    freeze: bool,
    control: &dyn FeedbackControl,
    noise: Noise<'_>,
) -> Result<(TrajectoryBatch, LogLikelihoods)> {
    validate_start(spec, x0, n_paths)?;
    let d = spec.dim();
    let q = spec.noise_dim();
    let n_steps = grid.n_steps;
    let dt = grid.dt;
    let sqrt_dt = dt.sqrt();
    let track_cost = !spec.has_zero_running_cost();

    let outputs: Vec<PathOutput> = (0..n_paths)
        .into_par_iter()
        .map(|m| {
            let mut states = Vec::with_capacity((n_steps + 1) * d);
            let increments: Vec<f64> = match noise {
                Noise::Seeded(seed) => {
                    let mut rng = path_rng(seed, m as u64);
                    (0..n_steps * q)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                }
                Noise::Stored(batch) => {
                    let off = m * batch.grid.n_steps * q;
                    batch.increments[off..off + n_steps * q].to_vec()
                }
            };
            states.extend_from_slice(x0);
            let mut x = x0.to_vec();
            let mut next = vec![0.0; d];
            let mut b = vec![0.0; d];
            let mut sig = vec![0.0; d * q];
            let mut u = vec![0.0; q];
            let mut exit = None;
            let mut failure = None;
            let mut log_likelihood = 0.0;
            let mut running_cost = 0.0;
            let mut clipped = 0;
            let mut controlled = 0;

            for n in 0..n_steps {
                let xi = &increments[n * q..(n + 1) * q];
                if failure.is_some() || (freeze && exit.is_some()) {
                    states.extend_from_slice(&x);
                    continue;
                }
                let t = grid.time(n);
                let active = exit.is_none();
                spec.drift(&x, t, &mut b);
                spec.diffusion(&x, &mut sig);
                if active {
                    if control.control(&x, n, &mut u) {
                        clipped += 1;
                    }
                    controlled += 1;
                    let mut uxi = 0.0;
                    let mut uu = 0.0;
                    for j in 0..q {
                        uxi += u[j] * xi[j];
                        uu += u[j] * u[j];
                    }
                    log_likelihood += uxi * sqrt_dt + 0.5 * uu * dt;
                    if track_cost {
                        running_cost += spec.running_cost(&x, t) * dt;
                    }
                } else {
                    u.fill(0.0);
                }
                for i in 0..d {
                    let row = &sig[i * q..(i + 1) * q];
                    let mut tilt = 0.0;
                    let mut shock = 0.0;
                    for j in 0..q {
                        tilt += row[j] * u[j];
                        shock += row[j] * xi[j];
                    }
                    next[i] = x[i] + dt * (b[i] + tilt) + sqrt_dt * shock;
                }
                if next.iter().any(|v| !v.is_finite()) {
                    failure = Some(n + 1);
                    states.extend_from_slice(&x);
                    continue;
                }
                std::mem::swap(&mut x, &mut next);
                states.extend_from_slice(&x);
                if exit.is_none() && !spec.in_domain(&x) {
                    exit = Some(n + 1);
                }
            }
            PathOutput {
                states,
                increments,
                exit,
                failure,
                log_likelihood,
                running_cost,
                clipped,
                controlled,
            }
        })
        .collect();

    let mut states = Vec::with_capacity(n_paths * (n_steps + 1) * d);
    let mut increments = Vec::with_capacity(n_paths * n_steps * q);
    let mut exit_step = Vec::with_capacity(n_paths);
    let mut failures = Vec::new();
    let mut lik = LogLikelihoods::default();
    for (m, out) in outputs.into_iter().enumerate() {
        states.extend_from_slice(&out.states);
        increments.extend_from_slice(&out.increments);
        exit_step.push(out.exit);
        if let Some(step) = out.failure {
            failures.push(PathFailure { path: m, step });
        }
        lik.log_likelihood.push(out.log_likelihood);
        lik.running_cost.push(out.running_cost);
        lik.clipped_steps.push(out.clipped);
        lik.controlled_steps.push(out.controlled);
    }
    let batch = TrajectoryBatch {
        dim: d,
        noise_dim: q,
        grid: *grid,
        states,
        increments,
        exit_step,
        frozen: freeze,
        failures,
    };
    Ok((batch, lik))
}

/// Generates `M` uncontrolled paths started at `x0`.
///
/// With `freeze`, each path is held at its first state outside the domain.
pub fn simulate_forward(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    freeze: bool,
) -> Result<TrajectoryBatch> {
    simulate_with(spec, grid, x0, n_paths, seed, freeze, &ZeroControl).map(|(b, _)| b)
}

/// Generates `M` frozen paths under the drift `b + σu` and the per-path log-likelihood
/// of the change of measure.
pub fn simulate_controlled(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    control: &dyn FeedbackControl,
) -> Result<(TrajectoryBatch, LogLikelihoods)> {
    simulate_with(spec, grid, x0, n_paths, seed, true, control)
}

fn simulate_with(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    freeze: bool,
    control: &dyn FeedbackControl,
) -> Result<(TrajectoryBatch, LogLikelihoods)> {
    run_paths(
        spec,
        grid,
        x0,
        n_paths,
        freeze,
        control,
        Noise::Seeded(seed),
    )
}
