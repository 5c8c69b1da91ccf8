//! Batch command-line front end: configuration parsing, seed management,
//! experiment dispatch, and serialization of reports.

pub mod config;

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use mflab_core::energy::EnergyContext;
use mflab_core::grid::GridDensity;
use mflab_core::harness::{
    chaos_metric_study, convergence_study, decay_study, ito_balance_study, StudyVerdict,
};
use mflab_core::pde::{convolve_gradg, solve};
use mflab_core::potentials::{check_admissible, dyadic_samples};
use mflab_core::sde::{ensemble, init_particles, run_trajectory};

use config::FileConfig;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INCONCLUSIVE: i32 = 2;
pub const EXIT_ERROR: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "mflab",
    about = "Stochastic interacting-particle systems with log/Riesz repulsion, \
             their mean-field PDE, and modulated-energy diagnostics"
)]
pub struct Cli {
    /// Path to a TOML configuration file; omitted means all defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "mflab-out")]
    pub out: PathBuf,

    /// Worker threads; falls back to the THREADS environment variable, then
    /// to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Integrate particle trajectories (one record, or an ensemble).
    SimulateSde,
    /// Solve the mean-field PDE and write snapshots plus diagnostics.
    SolvePde,
    /// Evaluate the modulated energy of a sampled configuration.
    ModulatedEnergy,
    /// Mean-field convergence rate study over the N sweep.
    Converge,
    /// Heat-decay bound table for the PDE solution.
    Decay,
    /// Expected-value functional inequality for the modulated energy.
    ItoBalance,
    /// Numerical admissibility checks for the kernel and flow matrix.
    CheckAssumptions,
}

impl Command {
    fn dir_name(self) -> &'static str {
        match self {
            Command::SimulateSde => "simulate-sde",
            Command::SolvePde => "solve-pde",
            Command::ModulatedEnergy => "modulated-energy",
            Command::Converge => "converge",
            Command::Decay => "decay",
            Command::ItoBalance => "ito-balance",
            Command::CheckAssumptions => "check-assumptions",
        }
    }
}

fn verdict_exit(verdict: StudyVerdict) -> i32 {
    match verdict {
        StudyVerdict::Pass => EXIT_PASS,
        StudyVerdict::Fail => EXIT_FAIL,
        StudyVerdict::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

pub fn init_threads(requested: Option<usize>) {
    let threads = requested.or_else(|| {
        std::env::var("THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(k) = threads {
        // ignore the error if a pool already exists (repeated invocations)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
}

/// Run one subcommand; returns the process exit code
/// (0 pass, 1 fail, 2 inconclusive, 3 runtime error).
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(code) => code,
        Err(err) => {
            let payload = serde_json::json!({ "error": format!("{err:#}") });
            let dir = cli.out.join(cli.command.dir_name());
            if std::fs::create_dir_all(&dir).is_ok() {
                let _ = std::fs::write(
                    dir.join("error.json"),
                    serde_json::to_string_pretty(&payload).unwrap_or_default(),
                );
            }
            eprintln!("error: {err:#}");
            EXIT_ERROR
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<i32> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => String::new(),
    };
    let mut config = FileConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    let seed = config.seed.unwrap_or(1);
    let out = cli.out.join(cli.command.dir_name());
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    std::fs::write(out.join("config_echo.toml"), config.echo()?)?;
    let hash = config.hash()?;

    match cli.command {
        Command::CheckAssumptions => cmd_check_assumptions(&config, seed, &hash, &out),
        Command::SimulateSde => cmd_simulate_sde(&config, seed, &hash, &out),
        Command::SolvePde => cmd_solve_pde(&config, seed, &hash, &out),
        Command::ModulatedEnergy => cmd_modulated_energy(&config, seed, &hash, &out),
        Command::Converge => cmd_converge(&config, seed, &hash, &out),
        Command::Decay => cmd_decay(&config, seed, &hash, &out),
        Command::ItoBalance => cmd_ito_balance(&config, seed, &hash, &out),
    }
}

fn write_report<T: serde::Serialize>(
    out: &Path,
    name: &str,
    hash: &str,
    seed: u64,
    report: &T,
) -> anyhow::Result<()> {
    let payload = serde_json::json!({
        "config_sha256": hash,
        "seed": seed,
        "report": report,
    });
    std::fs::write(out.join(name), serde_json::to_string_pretty(&payload)?)?;
    Ok(())
}

fn csv_with_header(hash: &str, seed: u64, body: &str) -> String {
    format!("# config_sha256={hash} seed={seed}\n{body}")
}

/// Machine-readable verdict file backing the exit-code contract.
fn write_summary(out: &Path, verdict: StudyVerdict, lines: &[String]) -> anyhow::Result<()> {
    let payload = serde_json::json!({
        "verdict": match verdict {
            StudyVerdict::Pass => "pass",
            StudyVerdict::Fail => "fail",
            StudyVerdict::Inconclusive => "inconclusive",
        },
        "exit_code": verdict_exit(verdict),
        "criteria": lines,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&payload)?)?;
    Ok(())
}

fn cmd_check_assumptions(
    config: &FileConfig,
    seed: u64,
    hash: &str,
    out: &Path,
) -> anyhow::Result<i32> {
    let spec = config.spec()?;
    let flow = config.flow_matrix()?;
    let samples = dyadic_samples(spec.d, 4);
    let report = check_admissible(&spec, &flow, &samples)?;
    write_report(out, "admissibility.json", hash, seed, &report)?;
    for check in &report.checks {
        println!(
            "[{}] {} (fitted constant {:.6e}, worst sample {:.6e})",
            if check.pass { "pass" } else { "FAIL" },
            check.assumption,
            check.fitted_constant,
            check.worst_sample
        );
    }
    Ok(if report.all_pass() { EXIT_PASS } else { EXIT_FAIL })
}

fn cmd_simulate_sde(
    config: &FileConfig,
    seed: u64,
    hash: &str,
    out: &Path,
) -> anyhow::Result<i32> {
    let spec = config.spec()?;
    let flow = config.flow_matrix()?;
    let law = config.initial_law()?;
    let sde = config.sde_config(seed);
    if config.sde.runs <= 1 {
        let record = run_trajectory(&sde, &spec, &flow, &law)?;
        std::fs::write(
            out.join("positions.csv"),
            csv_with_header(hash, seed, &record.positions_csv()),
        )?;
        std::fs::write(out.join("trajectory.json"), record.sidecar_json()?)?;
        println!(
            "[pass] simulate-sde: N = {}, T = {}, min pairwise distance over run = {:.3e}, truncation events = {}",
            sde.n_particles,
            sde.t_final,
            record.min_dist_over_run,
            record.events.len()
        );
    } else {
        let stats = ensemble(&sde, &spec, &flow, &law, config.sde.runs, seed)?;
        write_report(out, "ensemble.json", hash, seed, &stats)?;
        println!(
            "[pass] simulate-sde ensemble: {} runs ({} failures), final inertia {:.6e} +- {:.2e}",
            config.sde.runs,
            stats.failures.len(),
            stats.inertia_mean.last().unwrap(),
            stats.inertia_se.last().unwrap()
        );
    }
    Ok(EXIT_PASS)
}

fn cmd_solve_pde(config: &FileConfig, seed: u64, hash: &str, out: &Path) -> anyhow::Result<i32> {
    let spec = config.spec()?;
    let flow = config.flow_matrix()?;
    let law = config.initial_law()?;
    let mu0 = GridDensity::from_law(&law, config.grid.box_size, config.grid.n)?;
    let u0 = convolve_gradg(&mu0, &spec, &flow, config.kernel_rep(), config.dynamics.coupling);
    let max_u0 = u0
        .iter()
        .flat_map(|c| c.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let pde = config.pde_config(max_u0 * 3f64.sqrt());
    let series = solve(&mu0, &pde, &spec, &flow)?;
    series.write_to_dir(out)?;
    write_report(out, "run_meta.json", hash, seed, &pde)?;
    let mass_drift = series
        .diagnostics
        .iter()
        .map(|d| (d.mass - 1.0).abs())
        .fold(0.0, f64::max);
    println!(
        "[pass] solve-pde: {} snapshots to T = {}, dt = {:.4e}, max |mass - 1| = {:.2e}",
        series.snapshots.len(),
        pde.t_final,
        pde.dt,
        mass_drift
    );
    Ok(EXIT_PASS)
}

fn cmd_modulated_energy(
    config: &FileConfig,
    seed: u64,
    hash: &str,
    out: &Path,
) -> anyhow::Result<i32> {
    let spec = config.spec()?;
    let law = config.initial_law()?;
    let mu = GridDensity::from_law(&law, config.grid.box_size, config.grid.n)?;
    let state = init_particles(&law, config.sde.n_particles, seed)?;
    let ctx = EnergyContext::new(&spec, &mu)?;
    let report = ctx.modulated_energy(state.positions.view())?;
    write_report(out, "modulated_energy.json", hash, seed, &report)?;
    let csv = format!(
        "t,n,f_n,particle_particle,cross,mu_mu,eta,sobolev_surrogate\n{},{},{},{},{},{},{},{}\n",
        0.0,
        config.sde.n_particles,
        report.total,
        report.particle_particle,
        report.cross,
        report.mu_mu,
        report.eta_used,
        report.sobolev_surrogate
    );
    std::fs::write(out.join("modulated_energy.csv"), csv_with_header(hash, seed, &csv))?;
    println!(
        "[pass] modulated-energy: N = {}, F_N = {:+.6e} (pp {:+.3e}, cross {:+.3e}, mumu {:+.3e}), surrogate {:.3e}",
        config.sde.n_particles,
        report.total,
        report.particle_particle,
        report.cross,
        report.mu_mu,
        report.sobolev_surrogate
    );
    Ok(EXIT_PASS)
}

fn cmd_converge(config: &FileConfig, seed: u64, hash: &str, out: &Path) -> anyhow::Result<i32> {
    let plan = config.experiment_plan(seed)?;
    let report = convergence_study(&plan)?;
    write_report(out, "convergence.json", hash, seed, &report)?;
    std::fs::write(out.join("convergence.csv"), csv_with_header(hash, seed, &report.csv()))?;
    let verdict = report.verdict();
    println!(
        "[{}] converge: beta_hat = {:.3} +- {:.3}, R^2 = {:.3} (floors: rate > {}, R^2 >= {})",
        match verdict {
            StudyVerdict::Pass => "pass",
            StudyVerdict::Fail => "FAIL",
            StudyVerdict::Inconclusive => "inconclusive",
        },
        report.beta_hat,
        report.beta_se,
        report.r_squared,
        report.rate_floor,
        report.r_squared_floor
    );
    let mut lines = vec![format!(
        "beta_hat {:.4} (floor {}), R^2 {:.4} (floor {})",
        report.beta_hat, report.rate_floor, report.r_squared, report.r_squared_floor
    )];
    let mut exit = verdict_exit(verdict);
    if config.study.with_chaos {
        let chaos = chaos_metric_study(&plan)?;
        write_report(out, "chaos_metric.json", hash, seed, &chaos)?;
        let cv = chaos.verdict();
        println!(
            "[{}] chaos-metric: rate = {:.3}, R^2 = {:.3}, eta-halving change = {:.2}%",
            match cv {
                StudyVerdict::Pass => "pass",
                StudyVerdict::Fail => "FAIL",
                StudyVerdict::Inconclusive => "inconclusive",
            },
            chaos.rate,
            chaos.rate_r_squared,
            100.0 * chaos.eta_halving_relative_change
        );
        lines.push(format!(
            "chaos metric rate {:.4}, R^2 {:.4}",
            chaos.rate, chaos.rate_r_squared
        ));
        exit = exit.max(verdict_exit(cv));
    }
    let overall = match exit {
        0 => StudyVerdict::Pass,
        1 => StudyVerdict::Fail,
        _ => StudyVerdict::Inconclusive,
    };
    write_summary(out, overall, &lines)?;
    Ok(exit)
}

fn cmd_decay(config: &FileConfig, seed: u64, hash: &str, out: &Path) -> anyhow::Result<i32> {
    let plan = config.experiment_plan(seed)?;
    let report = decay_study(&plan)?;
    write_report(out, "decay.json", hash, seed, &report)?;
    std::fs::write(out.join("decay.csv"), csv_with_header(hash, seed, &report.csv()))?;
    let verdict = report.verdict();
    println!(
        "[{}] decay: max ratio = {:.6} (threshold {})",
        match verdict {
            StudyVerdict::Pass => "pass",
            _ => "FAIL",
        },
        report.max_ratio,
        report.ratio_threshold
    );
    write_summary(
        out,
        verdict,
        &[format!("max ratio {:.6} vs threshold {}", report.max_ratio, report.ratio_threshold)],
    )?;
    Ok(verdict_exit(verdict))
}

fn cmd_ito_balance(config: &FileConfig, seed: u64, hash: &str, out: &Path) -> anyhow::Result<i32> {
    let plan = config.experiment_plan(seed)?;
    let report = ito_balance_study(&plan)?;
    write_report(out, "ito_balance.json", hash, seed, &report)?;
    std::fs::write(out.join("ito_balance.csv"), csv_with_header(hash, seed, &report.csv()))?;
    let verdict = report.verdict();
    for row in &report.rows {
        println!(
            "[{}] ito-balance t = {}: LHS {:+.4e} vs RHS {:+.4e} (margin {:.2} SE)",
            if row.margin_mean <= report.se_margin * row.margin_se { "pass" } else { "FAIL" },
            row.t,
            row.lhs_mean,
            row.rhs_mean,
            row.margin_in_se
        );
    }
    let lines: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("t {}: margin {:.3} SE", r.t, r.margin_in_se))
        .collect();
    write_summary(out, verdict, &lines)?;
    Ok(verdict_exit(verdict))
}
