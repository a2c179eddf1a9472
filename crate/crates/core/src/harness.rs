//! Experiment orchestration: repeated fit → (optional) importance sampling runs
//! on the double-well exit problem, PDE reference values, the four standard
//! benchmark rows and the early-horizon workflow.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{adaptive_basis, BasisSet, DEFAULT_DELTA};
use crate::control::{importance_sample, make_policy, ISReport, DEFAULT_CLIP};
use crate::error::{Error, Result};
use crate::lsmc::{
    backward_solve, drift_changed_driver, free_energy_driver, LsmcConfig, LsmcSolution,
    StoppingMode, ZScheme, DEFAULT_RANK_TOLERANCE,
};
use crate::model::{DoubleWell, ProblemSpec, DEFAULT_EPSILON};
use crate::pde::{
    solve_exit_probability, PdeGrid, DEFAULT_DOMAIN_LENGTH, DEFAULT_DT_PDE, DEFAULT_N_X,
};
use crate::sde::{derive_seed, simulate_forward, TimeGrid, TrajectoryBatch};

/// Tag for the seed of a repetition's importance-sampling run.
const IS_SEED_TAG: u64 = 0x6973;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub sigma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "default_x0")]
    pub x0: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_x0() -> f64 {
    -1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub dt: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Append `φ ≡ 1` to the Gaussian basis.
    #[serde(default = "default_true")]
    pub constant_basis: bool,
    #[serde(default)]
    pub z_scheme: ZScheme,
    #[serde(default)]
    pub stopping_mode: StoppingMode,
    #[serde(default = "default_rank_tolerance")]
    pub rank_tolerance: f64,
    #[serde(default)]
    pub ridge: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "R", default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_true() -> bool {
    true
}

fn default_rank_tolerance() -> f64 {
    DEFAULT_RANK_TOLERANCE
}

fn default_repetitions() -> usize {
    1
}

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

impl SolverConfig {
    pub fn lsmc(&self) -> LsmcConfig {
        LsmcConfig {
            z_scheme: self.z_scheme,
            stopping_mode: self.stopping_mode,
            rank_tolerance: self.rank_tolerance,
            ridge: self.ridge,
        }
    }
}

/// Forward drift `b₀ = b + push` used in place of `b` when simulating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftChange {
    pub push: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ImportanceConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Paths per importance-sampling run; defaults to the solver's `M`.
    #[serde(rename = "M", default)]
    pub n_paths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_domain_length")]
    pub domain_length: f64,
    #[serde(default = "default_n_x")]
    pub n_x: usize,
    #[serde(default = "default_dt_pde")]
    pub dt_pde: f64,
}

fn default_domain_length() -> f64 {
    DEFAULT_DOMAIN_LENGTH
}

fn default_n_x() -> usize {
    DEFAULT_N_X
}

fn default_dt_pde() -> f64 {
    DEFAULT_DT_PDE
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            domain_length: DEFAULT_DOMAIN_LENGTH,
            n_x: DEFAULT_N_X,
            dt_pde: DEFAULT_DT_PDE,
        }
    }
}

impl ReferenceConfig {
    pub fn grid(&self) -> Result<PdeGrid> {
        PdeGrid::new(self.domain_length, self.n_x, self.dt_pde)
            .map_err(|e| prefix_field("reference", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for CSV/JSON artifacts; the command line may override it.
    #[serde(default)]
    pub dir: Option<String>,
    /// Also dump the forward batch of the first repetition (large).
    #[serde(default)]
    pub trajectories: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub id: String,
    pub problem: ProblemConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub drift_change: Option<DriftChange>,
    #[serde(default)]
    pub importance_sampling: ImportanceConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

fn default_id() -> String {
    "experiment".into()
}

/// Deserialises with the JSON path of the first offending field in the error.
fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() || field == "." {
            Error::Json(inner)
        } else {
            Error::invalid(field, inner.to_string())
        }
    })
}

fn prefix_field(prefix: &str, err: Error) -> Error {
    match err {
        Error::InvalidParameter { field, reason } => Error::InvalidParameter {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = parse_json(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if !(p.sigma.is_finite() && p.sigma > 0.0) {
            return Err(Error::invalid("problem.sigma", "must be positive"));
        }
        if !(p.epsilon > 0.0 && p.epsilon < 1.0) {
            return Err(Error::invalid("problem.epsilon", "must lie in (0, 1)"));
        }
        if !(p.horizon.is_finite() && p.horizon > 0.0) {
            return Err(Error::invalid("problem.T", "must be positive"));
        }
        if !(p.x0.is_finite() && p.x0 < 0.0) {
            return Err(Error::invalid(
                "problem.x0",
                "must lie inside the domain x < 0",
            ));
        }
        let s = &self.solver;
        if s.k == 0 {
            return Err(Error::invalid(
                "solver.K",
                "need at least one basis function",
            ));
        }
        if s.m == 0 {
            return Err(Error::invalid("solver.M", "need at least one trajectory"));
        }
        if !(s.dt.is_finite() && s.dt > 0.0) {
            return Err(Error::invalid("solver.dt", "must be positive"));
        }
        TimeGrid::new(p.horizon, s.dt)
            .map_err(|_| Error::invalid("solver.dt", "leaves no time step before T"))?;
        if !(s.delta.is_finite() && s.delta > 0.0) {
            return Err(Error::invalid("solver.delta", "must be positive"));
        }
        if s.repetitions == 0 {
            return Err(Error::invalid("solver.R", "need at least one repetition"));
        }
        if s.clip.is_nan() || s.clip <= 0.0 {
            return Err(Error::invalid("solver.clip", "must be positive"));
        }
        s.lsmc().validate().map_err(|e| prefix_field("solver", e))?;
        if let Some(dc) = &self.drift_change {
            if !dc.push.is_finite() {
                return Err(Error::invalid("drift_change.push", "must be finite"));
            }
        }
        if self.importance_sampling.n_paths == Some(0) {
            return Err(Error::invalid(
                "importance_sampling.M",
                "need at least one trajectory",
            ));
        }
        if self.reference.enabled {
            self.reference.grid()?;
        }
        if self.id.is_empty() {
            return Err(Error::invalid("id", "must not be empty"));
        }
        Ok(())
    }

    pub fn double_well(&self) -> Result<DoubleWell> {
        DoubleWell::new(self.problem.sigma, self.problem.epsilon)
            .map_err(|e| prefix_field("problem", e))
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.problem.horizon, self.solver.dt)
    }

    pub fn spec(&self) -> Result<ProblemSpec> {
        self.double_well()?.problem(self.problem.horizon)
    }

    /// Simulation dynamics: `b₀ = b + push` under a drift change, otherwise `b`.
    pub fn forward_spec(&self) -> Result<Option<ProblemSpec>> {
        self.drift_change
            .map(|dc| {
                self.double_well()?
                    .problem_with_push(self.problem.horizon, dc.push)
            })
            .transpose()
    }

    /// Settings used by [`solve_once`].
    pub fn settings(&self) -> SolveSettings {
        SolveSettings {
            k: self.solver.k,
            m: self.solver.m,
            delta: self.solver.delta,
            constant_basis: self.solver.constant_basis,
            lsmc: self.solver.lsmc(),
        }
    }
}

/// Problem-independent parameters of one fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveSettings {
    pub k: usize,
    pub m: usize,
    pub delta: f64,
    pub constant_basis: bool,
    pub lsmc: LsmcConfig,
}

/// Output of one fit.
#[derive(Debug, Clone)]
pub struct Fit {
    pub batch: TrajectoryBatch,
    pub basis: BasisSet,
    pub solution: LsmcSolution,
}

/// Simulates the forward ensemble (under `forward` if given, else under `spec`),
/// builds the adaptive basis from the same dynamics and runs the backward
/// recursion with the matching driver.
pub fn solve_once(
    spec: &ProblemSpec,
    forward: Option<&ProblemSpec>,
    grid: &TimeGrid,
    x0: &[f64],
    settings: &SolveSettings,
    seed: u64,
) -> Result<Fit> {
    let sim = forward.unwrap_or(spec);
    let freeze = settings.lsmc.stopping_mode == StoppingMode::FreezeAll;
    let batch = simulate_forward(sim, grid, x0, settings.m, seed, freeze)?;
    fit_batch(spec, forward, batch, x0, settings, seed)
}

fn fit_batch(
    spec: &ProblemSpec,
    forward: Option<&ProblemSpec>,
    batch: TrajectoryBatch,
    x0: &[f64],
    settings: &SolveSettings,
    seed: u64,
) -> Result<Fit> {
    let sim = forward.unwrap_or(spec);
    let mut basis = adaptive_basis(sim, batch.grid(), x0, settings.k, settings.delta, seed)?;
    if settings.constant_basis {
        basis = basis.with_constant();
    }
    let driver = match forward {
        Some(f) => drift_changed_driver(spec, f.drift_fn().clone())?,
        None => free_energy_driver(spec),
    };
    let solution = backward_solve(&batch, &basis, &driver, spec, &settings.lsmc)?;
    Ok(Fit {
        batch,
        basis,
        solution,
    })
}

/// `T̃ = max_m (τ_m ∧ T)`; fails if no path exited.
pub fn effective_horizon(batch: &TrajectoryBatch) -> Result<f64> {
    Ok(effective_horizon_step(batch)? as f64 * batch.grid().dt())
}

fn effective_horizon_step(batch: &TrajectoryBatch) -> Result<usize> {
    if batch.exit_steps().iter().all(Option::is_none) {
        return Err(Error::NoExits);
    }
    Ok((0..batch.n_paths())
        .map(|m| batch.stop_step(m))
        .max()
        .unwrap_or(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub seed: u64,
    pub gamma: Option<f64>,
    pub gamma_std_error: Option<f64>,
    pub error: Option<String>,
    pub max_rank: usize,
    pub rank_deficient_steps: usize,
    pub exit_fraction: f64,
    pub effective_horizon: Option<f64>,
    pub importance_sampling: Option<ISReport>,
}

impl RepetitionResult {
    fn failed(repetition: usize, seed: u64, err: &Error) -> Self {
        Self {
            repetition,
            seed,
            gamma: None,
            gamma_std_error: None,
            error: Some(err.to_string()),
            max_rank: 0,
            rank_deficient_steps: 0,
            exit_fraction: 0.0,
            effective_horizon: None,
            importance_sampling: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    pub free_energy_mean: f64,
    pub free_energy_variance: f64,
    pub variance_reduction_mean: f64,
    pub variance_reduction_min: f64,
    pub ess_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    /// Number of basis functions in each regression.
    pub basis_size: usize,
    /// Largest numerical rank of `A_n` over all steps and repetitions.
    pub max_rank: usize,
    /// Share of regressions whose design matrix was rank deficient.
    pub rank_deficient_fraction: f64,
    /// Set when some design matrix lost rank; `K` can then be lowered to `max_rank`.
    pub rank_warning: bool,
    /// `M_n` per step `n` for the first successful repetition.
    pub active_profile: Vec<usize>,
    /// Mean `T̃` over repetitions when early stopping was used.
    pub effective_horizon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub id: String,
    pub repetitions: Vec<RepetitionResult>,
    /// Successful estimates in repetition order.
    pub estimates: Vec<f64>,
    pub failed: usize,
    /// `V̄`.
    pub mean: f64,
    /// `S²`, unbiased; zero with a single estimate.
    pub variance: f64,
    pub reference: Option<f64>,
    /// `exp(−V̄) − ε`, clamped at zero.
    pub exit_probability: f64,
    pub importance_sampling: Option<ImportanceSummary>,
    pub diagnostics: DiagnosticsSummary,
}

impl ExperimentResult {
    pub fn relative_error(&self) -> Option<f64> {
        self.reference.map(|r| (self.mean - r).abs() / r.abs())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean and unbiased variance.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, var)
}

/// `V_ref` for the configured problem, or `None` when disabled.
pub fn reference_for(config: &ExperimentConfig) -> Result<Option<f64>> {
    if !config.reference.enabled {
        return Ok(None);
    }
    let sol = solve_exit_probability(&config.spec()?, &config.reference.grid()?)?;
    sol.reference_value(config.problem.x0, config.problem.epsilon)
        .map(Some)
}

/// Importance sampling of the original dynamics under the policy of `fit`,
/// with `importance_sampling.M` paths (default `M`) on a stream derived from
/// the fit's `seed`.
pub fn importance_run(config: &ExperimentConfig, fit: &Fit, seed: u64) -> Result<ISReport> {
    let spec = config.spec()?;
    let policy = make_policy(
        fit.basis.clone(),
        fit.solution.coeffs.clone(),
        &spec,
        config.solver.clip,
    )?;
    let m = config
        .importance_sampling
        .n_paths
        .unwrap_or(config.solver.m);
    importance_sample(
        &spec,
        &config.grid()?,
        &[config.problem.x0],
        m,
        derive_seed(seed, IS_SEED_TAG),
        &policy,
    )
}

/// One fit of the configured problem (under the drift change, if any) with `seed`.
pub fn fit_config(config: &ExperimentConfig, seed: u64) -> Result<Fit> {
    config.validate()?;
    solve_once(
        &config.spec()?,
        config.forward_spec()?.as_ref(),
        &config.grid()?,
        &[config.problem.x0],
        &config.settings(),
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Standard,
    EarlyHorizon,
}

struct RepetitionOutput {
    result: RepetitionResult,
    active_profile: Vec<usize>,
    steps: usize,
}

fn run_repetition(config: &ExperimentConfig, mode: Mode, r: usize) -> Result<RepetitionOutput> {
    let seed = config.solver.seed.wrapping_add(r as u64);
    let spec = config.spec()?;
    let forward = config.forward_spec()?;
    let grid = config.grid()?;
    let x0 = [config.problem.x0];
    let mut settings = config.settings();

    let (fit, t_tilde) = match mode {
        Mode::Standard => (
            solve_once(&spec, forward.as_ref(), &grid, &x0, &settings, seed)?,
            None,
        ),
        Mode::EarlyHorizon => {
            settings.lsmc.stopping_mode = StoppingMode::PerTrajectory;
            let sim = forward.as_ref().unwrap_or(&spec);
            let full = simulate_forward(sim, &grid, &x0, settings.m, seed, false)?;
            let n_tilde = effective_horizon_step(&full)?;
            if n_tilde == 0 {
                return Err(Error::NoExits);
            }
            let batch = full.truncated(n_tilde)?;
            let fit = fit_batch(&spec, forward.as_ref(), batch, &x0, &settings, seed)?;
            (fit, Some(n_tilde as f64 * grid.dt()))
        }
    };

    let importance_sampling = if config.importance_sampling.enabled {
        Some(importance_run(config, &fit, seed)?)
    } else {
        None
    };

    let sol = &fit.solution;
    Ok(RepetitionOutput {
        active_profile: sol.diagnostics.iter().map(|d| d.active).collect(),
        steps: sol.diagnostics.len(),
        result: RepetitionResult {
            repetition: r,
            seed,
            gamma: Some(sol.gamma_estimate),
            gamma_std_error: Some(sol.gamma_std_error()),
            error: None,
            max_rank: sol.max_rank(),
            rank_deficient_steps: sol.rank_deficient_steps(),
            exit_fraction: fit.batch.exit_fraction(),
            effective_horizon: t_tilde,
            importance_sampling,
        },
    })
}

fn run(config: &ExperimentConfig, mode: Mode) -> Result<ExperimentResult> {
    config.validate()?;
    if mode == Mode::EarlyHorizon && config.drift_change.is_none() {
        return Err(Error::invalid(
            "drift_change",
            "early-horizon mode needs a drift change (use push = 0 for the identity)",
        ));
    }
    let reps = config.solver.repetitions;
    let outputs: Vec<(usize, Result<RepetitionOutput>)> = (0..reps)
        .into_par_iter()
        .map(|r| (r, run_repetition(config, mode, r)))
        .collect();

    let mut repetitions = Vec::with_capacity(reps);
    let mut estimates = Vec::new();
    let mut first_error: Option<Error> = None;
    let mut first_profile = None;
    let mut deficient = 0usize;
    let mut regressions = 0usize;
    let mut horizons = Vec::new();
    let mut fatal = false;
    for (r, out) in outputs {
        let seed = config.solver.seed.wrapping_add(r as u64);
        match out {
            Ok(o) => {
                estimates.push(
                    o.result
                        .gamma
                        .expect("successful repetitions carry an estimate"),
                );
                deficient += o.result.rank_deficient_steps;
                regressions += o.steps;
                horizons.extend(o.result.effective_horizon);
                first_profile.get_or_insert(o.active_profile);
                repetitions.push(o.result);
            }
            Err(e) => {
                fatal |= e.is_validation() || matches!(e, Error::NoExits);
                repetitions.push(RepetitionResult::failed(r, seed, &e));
                first_error.get_or_insert(e);
            }
        }
    }
    let failed = reps - estimates.len();
    if let Some(e) = first_error {
        if fatal {
            return Err(e);
        }
        if 2 * failed > reps {
            return Err(Error::ExperimentFailed {
                failed,
                total: reps,
                first: e.to_string(),
            });
        }
    }

    let (mean, variance) = mean_and_variance(&estimates);
    let importance_sampling = config.importance_sampling.enabled.then(|| {
        let reports: Vec<&ISReport> = repetitions
            .iter()
            .filter_map(|r| r.importance_sampling.as_ref())
            .collect();
        let fe: Vec<f64> = reports.iter().map(|r| r.free_energy).collect();
        let (free_energy_mean, free_energy_variance) = mean_and_variance(&fe);
        let vrf: Vec<f64> = reports
            .iter()
            .map(|r| r.variance_reduction_factor)
            .collect();
        ImportanceSummary {
            free_energy_mean,
            free_energy_variance,
            variance_reduction_mean: mean_and_variance(&vrf).0,
            variance_reduction_min: vrf.iter().copied().fold(f64::INFINITY, f64::min),
            ess_mean: mean_and_variance(&reports.iter().map(|r| r.ess).collect::<Vec<_>>()).0,
        }
    });
    let basis_size = config.solver.k + usize::from(config.solver.constant_basis);
    let max_rank = repetitions.iter().map(|r| r.max_rank).max().unwrap_or(0);
    Ok(ExperimentResult {
        id: config.id.clone(),
        repetitions,
        estimates,
        failed,
        mean,
        variance,
        reference: reference_for(config)?,
        exit_probability: DoubleWell::new(config.problem.sigma, config.problem.epsilon)?
            .exit_probability(mean)
            .probability,
        importance_sampling,
        diagnostics: DiagnosticsSummary {
            basis_size,
            max_rank,
            rank_deficient_fraction: if regressions > 0 {
                deficient as f64 / regressions as f64
            } else {
                0.0
            },
            rank_warning: deficient > 0,
            active_profile: first_profile.unwrap_or_default(),
            effective_horizon: (!horizons.is_empty()).then(|| mean_and_variance(&horizons).0),
        },
    })
}

/// `R` repetitions of the full pipeline with seeds `seed + r`.
///
/// Failed repetitions are recorded; the experiment fails only when more than
/// half of them fail.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run(config, Mode::Standard)
}

/// Simulates under the changed drift, cuts the horizon at `T̃`, and solves with
/// per-trajectory stopping and the drift-changed driver.
pub fn run_early_horizon(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run(config, Mode::EarlyHorizon)
}

/// Published numbers for one benchmark row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedRow {
    pub id: &'static str,
    pub sigma: f64,
    pub horizon: f64,
    pub dt: f64,
    pub k: usize,
    pub m: usize,
    pub v_ref: f64,
    pub v_mean: f64,
    pub v_variance: f64,
}

pub const TABLE1: [PublishedRow; 4] = [
    PublishedRow {
        id: "row1",
        sigma: 1.0,
        horizon: 5.0,
        dt: 1e-3,
        k: 8,
        m: 300,
        v_ref: 0.3949,
        v_mean: 0.3748,
        v_variance: 1e-3,
    },
    PublishedRow {
        id: "row2",
        sigma: 1.0,
        horizon: 1.0,
        dt: 1e-3,
        k: 5,
        m: 300,
        v_ref: 1.7450,
        v_mean: 1.6446,
        v_variance: 0.0248,
    },
    PublishedRow {
        id: "row3",
        sigma: 0.6,
        horizon: 1.0,
        dt: 1e-4,
        k: 5,
        m: 400,
        v_ref: 4.3030,
        v_mean: 4.5779,
        v_variance: 1e-3,
    },
    PublishedRow {
        id: "row4",
        sigma: 0.5,
        horizon: 1.0,
        dt: 1e-4,
        k: 6,
        m: 450,
        v_ref: 4.5793,
        v_mean: 4.6044,
        v_variance: 5e-4,
    },
];

impl PublishedRow {
    /// Experiment configuration for this row with `R = 20` from `seed`.
    pub fn config(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            id: self.id.to_string(),
            problem: ProblemConfig {
                sigma: self.sigma,
                epsilon: DEFAULT_EPSILON,
                horizon: self.horizon,
                x0: -1.0,
            },
            solver: SolverConfig {
                k: self.k,
                m: self.m,
                dt: self.dt,
                delta: DEFAULT_DELTA,
                constant_basis: true,
                z_scheme: ZScheme::default(),
                stopping_mode: StoppingMode::default(),
                rank_tolerance: DEFAULT_RANK_TOLERANCE,
                ridge: 0.0,
                seed,
                repetitions: 20,
                clip: DEFAULT_CLIP,
            },
            drift_change: None,
            importance_sampling: ImportanceConfig::default(),
            reference: ReferenceConfig::default(),
            outputs: OutputConfig::default(),
        }
    }
}

/// Set of experiments making up the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Config {
    pub rows: Vec<ExperimentConfig>,
}

impl Table1Config {
    pub fn standard(seed: u64) -> Self {
        Self {
            rows: TABLE1.iter().map(|r| r.config(seed)).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = parse_json(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::invalid("rows", "need at least one row"));
        }
        for (i, row) in self.rows.iter().enumerate() {
            row.validate()
                .map_err(|e| prefix_field(&format!("rows[{i}]"), e))?;
        }
        Ok(())
    }
}

/// Rows `config_id,V_ref,V_mean,S2`.
pub fn write_table1_csv<W: Write>(results: &[ExperimentResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["config_id", "V_ref", "V_mean", "S2"])?;
    for r in results {
        w.write_record([
            r.id.clone(),
            r.reference.map(|v| v.to_string()).unwrap_or_default(),
            r.mean.to_string(),
            r.variance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
