//! Subcommand implementations. Each validates its whole input before the
//! first file is written.

use std::path::Path;

use serde::Serialize;

use fbsde_core::control::ISReport;
use fbsde_core::harness::{
    fit_config, importance_run, run_early_horizon, run_experiment, write_table1_csv,
    ExperimentConfig, ExperimentResult, Fit, Table1Config, TABLE1,
};
use fbsde_core::lsmc::StoppingMode;
use fbsde_core::model::DoubleWell;
use fbsde_core::pde::{
    solve_exit_probability, PdeGrid, DEFAULT_DOMAIN_LENGTH, DEFAULT_DT_PDE, DEFAULT_N_X,
};
use fbsde_core::sde::simulate_forward;

use crate::output::Outputs;
use crate::{CliError, Common, ConfigArgs, OptionalConfigArgs, ReferenceArgs};

fn read_config(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))
}

fn invalid_in(path: &Path, e: fbsde_core::Error) -> CliError {
    match CliError::from(e) {
        CliError::Invalid(m) => CliError::Invalid(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Parses and validates an experiment configuration, applying `--seed`.
fn load_experiment(path: &Path, common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut config =
        ExperimentConfig::from_json(&read_config(path)?).map_err(|e| invalid_in(path, e))?;
    if let Some(seed) = common.seed {
        config.solver.seed = seed;
    }
    config.validate().map_err(|e| invalid_in(path, e))?;
    Ok(config)
}

#[derive(Serialize)]
struct SimulationSummary<'a> {
    id: &'a str,
    seed: u64,
    n_paths: usize,
    n_steps: usize,
    dt: f64,
    drift_push: Option<f64>,
    exit_fraction: f64,
    /// Mean of `τ ∧ T` over all paths.
    mean_stopping_time: f64,
    mean_stopped_state: f64,
    failed_paths: usize,
}

pub fn simulate(args: &ConfigArgs) -> Result<(), CliError> {
    let config = load_experiment(&args.config, &args.common)?;
    let out = Outputs::new("simulate", &args.common, config.outputs.dir.as_deref());
    let spec = match config.forward_spec()? {
        Some(f) => f,
        None => config.spec()?,
    };
    let grid = config.grid()?;
    let freeze = config.solver.stopping_mode == StoppingMode::FreezeAll;
    let seed = config.solver.seed;
    let batch = simulate_forward(
        &spec,
        &grid,
        &[config.problem.x0],
        config.solver.m,
        seed,
        freeze,
    )?;
    let m = batch.n_paths() as f64;
    let summary = SimulationSummary {
        id: &config.id,
        seed,
        n_paths: batch.n_paths(),
        n_steps: grid.n_steps(),
        dt: grid.dt(),
        drift_push: config.drift_change.map(|d| d.push),
        exit_fraction: batch.exit_fraction(),
        mean_stopping_time: (0..batch.n_paths())
            .map(|i| batch.stop_step(i) as f64 * grid.dt())
            .sum::<f64>()
            / m,
        mean_stopped_state: (0..batch.n_paths())
            .map(|i| batch.stopped_state(i)[0])
            .sum::<f64>()
            / m,
        failed_paths: batch.failures().len(),
    };
    println!(
        "{}: {} paths, exit fraction {:.4}, mean τ∧T {:.4}",
        summary.id, summary.n_paths, summary.exit_fraction, summary.mean_stopping_time
    );
    out.json("summary.json", &summary)?;
    if config.outputs.trajectories {
        out.csv("trajectories.csv", |w| batch.write_csv(w))?;
    }
    out.metadata(Some(seed))
}

#[derive(Serialize)]
struct SolveResult<'a> {
    id: &'a str,
    seed: u64,
    gamma_estimate: f64,
    gamma_std_error: f64,
    basis_size: usize,
    max_rank: usize,
    rank_deficient_steps: usize,
    exit_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    importance_sampling: Option<&'a ISReport>,
}

impl<'a> SolveResult<'a> {
    fn new(
        config: &'a ExperimentConfig,
        fit: &Fit,
        importance_sampling: Option<&'a ISReport>,
    ) -> Self {
        Self {
            id: &config.id,
            seed: config.solver.seed,
            gamma_estimate: fit.solution.gamma_estimate,
            gamma_std_error: fit.solution.gamma_std_error(),
            basis_size: fit.basis.len(),
            max_rank: fit.solution.max_rank(),
            rank_deficient_steps: fit.solution.rank_deficient_steps(),
            exit_fraction: fit.batch.exit_fraction(),
            importance_sampling,
        }
    }
}

fn write_fit(out: &Outputs, config: &ExperimentConfig, fit: &Fit) -> Result<(), CliError> {
    out.csv("coefficients.csv", |w| fit.solution.coeffs.write_csv(w))?;
    out.csv("diagnostics.csv", |w| fit.solution.write_diagnostics_csv(w))?;
    if config.outputs.trajectories {
        out.csv("trajectories.csv", |w| fit.batch.write_csv(w))?;
    }
    Ok(())
}

pub fn solve(args: &ConfigArgs) -> Result<(), CliError> {
    let config = load_experiment(&args.config, &args.common)?;
    let out = Outputs::new("solve", &args.common, config.outputs.dir.as_deref());
    let fit = fit_config(&config, config.solver.seed)?;
    let result = SolveResult::new(&config, &fit, None);
    println!(
        "{}: gamma_estimate {:.6} (± {:.6}), max rank {} of {}",
        config.id,
        result.gamma_estimate,
        result.gamma_std_error,
        result.max_rank,
        result.basis_size
    );
    if result.rank_deficient_steps > 0 {
        log::warn!(
            "{} of {} regressions were rank deficient; consider K = {}",
            result.rank_deficient_steps,
            fit.solution.diagnostics.len(),
            result.max_rank
        );
    }
    write_fit(&out, &config, &fit)?;
    out.json("result.json", &result)?;
    out.metadata(Some(config.solver.seed))
}

pub fn estimate(args: &ConfigArgs) -> Result<(), CliError> {
    let config = load_experiment(&args.config, &args.common)?;
    let out = Outputs::new("estimate", &args.common, config.outputs.dir.as_deref());
    let seed = config.solver.seed;
    let fit = fit_config(&config, seed)?;
    let report = importance_run(&config, &fit, seed)?;
    println!(
        "{}: free energy {:.6} (std. error of weights {:.3e}), vanilla {:.6}, variance reduction {:.2}, ESS {:.1} of {}",
        config.id,
        report.free_energy,
        report.standard_error,
        -report.vanilla_estimate.ln(),
        report.variance_reduction_factor,
        report.ess,
        report.n_paths
    );
    if report.clipped_fraction > 0.0 {
        log::warn!(
            "control clipped on {:.2}% of steps",
            100.0 * report.clipped_fraction
        );
    }
    write_fit(&out, &config, &fit)?;
    out.csv("weights.csv", |w| report.write_weights_csv(w))?;
    out.json(
        "result.json",
        &SolveResult::new(&config, &fit, Some(&report)),
    )?;
    out.metadata(Some(seed))
}

#[derive(Serialize)]
struct ReferenceResult {
    sigma: f64,
    epsilon: f64,
    #[serde(rename = "T")]
    horizon: f64,
    x: f64,
    exit_probability: f64,
    #[serde(rename = "V_ref")]
    v_ref: f64,
    domain_length: f64,
    n_x: usize,
    dt_pde: f64,
    max_bound_violation: f64,
    max_time_decrease: f64,
}

pub fn reference(args: &ReferenceArgs) -> Result<(), CliError> {
    let (sigma, epsilon, horizon, x, grid, config_dir) = match &args.config {
        Some(path) => {
            let config = load_experiment(path, &args.common)?;
            let grid = config.reference.grid().map_err(|e| invalid_in(path, e))?;
            let p = &config.problem;
            (
                p.sigma,
                p.epsilon,
                p.horizon,
                p.x0,
                grid,
                config.outputs.dir.clone(),
            )
        }
        None => {
            let grid = PdeGrid::new(DEFAULT_DOMAIN_LENGTH, DEFAULT_N_X, DEFAULT_DT_PDE)?;
            let sigma = args.sigma.expect("clap requires --sigma without --config");
            let horizon = args.horizon.expect("clap requires --T without --config");
            (sigma, args.epsilon, horizon, args.x, grid, None)
        }
    };
    if !x.is_finite() {
        return Err(CliError::Invalid("--x must be finite".into()));
    }
    let model = DoubleWell::new(sigma, epsilon)?;
    let spec = model.problem(horizon)?;
    let out = Outputs::new("reference", &args.common, config_dir.as_deref());
    let sol = solve_exit_probability(&spec, &grid)?;
    let psi = sol.value_at(x)?;
    let result = ReferenceResult {
        sigma,
        epsilon,
        horizon,
        x,
        exit_probability: psi,
        v_ref: sol.reference_value(x, epsilon)?,
        domain_length: grid.x_max - grid.x_min,
        n_x: grid.n_x,
        dt_pde: grid.dt_pde,
        max_bound_violation: sol.max_bound_violation,
        max_time_decrease: sol.max_time_decrease,
    };
    println!("{:.4}", result.v_ref);
    log::info!("exit probability ψ(x = {x}, T = {horizon}) = {psi:.6}");
    out.json("reference.json", &result)?;
    out.csv("psi.csv", |w| sol.write_csv(w))?;
    out.metadata(None)
}

fn print_result(r: &ExperimentResult) {
    println!(
        "{}: V_mean {:.4}  S2 {:.3e}  V_ref {}  failed {}/{}  max rank {} of {}{}",
        r.id,
        r.mean,
        r.variance,
        r.reference.map_or("-".into(), |v| format!("{v:.4}")),
        r.failed,
        r.repetitions.len(),
        r.diagnostics.max_rank,
        r.diagnostics.basis_size,
        r.diagnostics
            .effective_horizon
            .map_or(String::new(), |t| format!("  mean T~ {t:.4}")),
    );
    if let Some(is) = &r.importance_sampling {
        println!(
            "  importance sampling: free energy {:.4} (var {:.3e}), variance reduction mean {:.2} min {:.2}, ESS {:.1}",
            is.free_energy_mean, is.free_energy_variance, is.variance_reduction_mean, is.variance_reduction_min, is.ess_mean
        );
    }
}

pub fn table1(args: &OptionalConfigArgs) -> Result<(), CliError> {
    let mut table = match &args.config {
        Some(path) => {
            Table1Config::from_json(&read_config(path)?).map_err(|e| invalid_in(path, e))?
        }
        None => Table1Config::standard(0),
    };
    if let Some(seed) = args.common.seed {
        for row in &mut table.rows {
            row.solver.seed = seed;
        }
    }
    table.validate()?;
    let out = Outputs::new("table1", &args.common, table.rows[0].outputs.dir.as_deref());

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for row in &table.rows {
        log::info!("running {}", row.id);
        match run_experiment(row) {
            Ok(r) => {
                print_result(&r);
                results.push(r);
            }
            Err(e) => {
                eprintln!("{}: failed: {e}", row.id);
                failures.push(format!("{}: {e}", row.id));
            }
        }
    }

    println!();
    println!(
        "{:<8} {:>8} {:>8} {:>10} | {:>8} {:>8} {:>10}",
        "config", "V_ref", "V_mean", "S2", "paper", "paper", "paper"
    );
    for r in &results {
        let published = TABLE1.iter().find(|p| p.id == r.id);
        println!(
            "{:<8} {:>8} {:>8.4} {:>10.3e} | {:>8} {:>8} {:>10}",
            r.id,
            r.reference.map_or("-".into(), |v| format!("{v:.4}")),
            r.mean,
            r.variance,
            published.map_or("-".into(), |p| format!("{:.4}", p.v_ref)),
            published.map_or("-".into(), |p| format!("{:.4}", p.v_mean)),
            published.map_or("-".into(), |p| format!("{:.1e}", p.v_variance)),
        );
    }

    out.csv("table1.csv", |w| write_table1_csv(&results, w))?;
    out.json("table1.json", &results)?;
    out.metadata(args.common.seed)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(failures.join("; ")))
    }
}

pub fn early_horizon(args: &ConfigArgs) -> Result<(), CliError> {
    let config = load_experiment(&args.config, &args.common)?;
    if config.drift_change.is_none() {
        return Err(CliError::Invalid(format!(
            "{}: early-horizon needs a `drift_change` section (use {{\"push\": 0}} for the identity)",
            args.config.display()
        )));
    }
    let out = Outputs::new("early-horizon", &args.common, config.outputs.dir.as_deref());
    let result = run_early_horizon(&config)?;
    print_result(&result);
    out.json("result.json", &result)?;
    out.metadata(Some(config.solver.seed))
}
