//! `covsteer`: plan, verify and simulate covariance-steering policies from a
//! JSON scenario file.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covsteer::config::{self, Scenario};
use covsteer::linearize::ConstraintKind;
use covsteer::moments::{propagate, Policy};
use covsteer::montecarlo::{enumerate_exact, simulate, OracleError};
use covsteer::scp::{self, ScpError};

#[derive(Parser)]
#[command(name = "covsteer", version, about = "Covariance steering for linear systems with random parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    /// Monte Carlo seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo sample count, overriding the config.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the SCP loop and write the policy, moments and trace.
    Plan { config: PathBuf },
    /// Check a policy against the terminal targets and chance constraints.
    Verify { config: PathBuf, policy: PathBuf },
    /// Closed-loop Monte Carlo of a policy.
    Simulate { config: PathBuf, policy: PathBuf },
    /// Compare the moment engine with exhaustive enumeration.
    Oracle {
        config: PathBuf,
        /// Policy to propagate; the config's initial policy when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

/// Exit 1 for a run that completed but failed its goal, 2 for bad input.
enum Failure {
    Unmet(String),
    Input(String),
}

impl Failure {
    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::Input(format!("{}: {e}", path.display()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan { config } => plan(config, &cli.overrides),
        Command::Verify { config, policy } => verify(config, policy, &cli.overrides),
        Command::Simulate { config, policy } => run_simulation(config, policy, &cli.overrides),
        Command::Oracle { config, policy } => oracle(config, policy.as_deref(), &cli.overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Unmet(msg)) => {
            eprintln!("covsteer: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("covsteer: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load(path: &Path, over: &Overrides) -> Result<Scenario, Failure> {
    let mut s = config::load(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    if let Some(seed) = over.seed {
        s.config.monte_carlo.seed = seed;
    }
    if let Some(n) = over.samples {
        s.config.monte_carlo.samples = n;
    }
    if let Some(out) = &over.out {
        s.output_dir = out.clone();
    }
    std::fs::create_dir_all(&s.output_dir).map_err(|e| Failure::io(&s.output_dir, e))?;
    Ok(s)
}

fn load_policy(path: &Path, s: &Scenario) -> Result<Policy, Failure> {
    let p = &s.problem;
    let policy = config::read_policy(path).map_err(Failure::Input)?;
    policy
        .check_shape(p.horizon, p.n_u(), p.n_x())
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(policy)
}

fn plan(path: &Path, over: &Overrides) -> Result<(), Failure> {
    let s = load(path, over)?;
    let out = match scp::run(&s.problem, &s.initial_policy, &s.config.scp) {
        Ok(o) => o,
        Err(e @ (ScpError::Settings(_) | ScpError::Moments(_) | ScpError::Assemble(_))) => {
            return Err(Failure::Input(e.to_string()))
        }
        Err(e) => return Err(Failure::Unmet(e.to_string())),
    };
    let dir = &s.output_dir;
    output::write_json(&dir.join("policy.json"), &out.policy)?;
    output::write_with(&dir.join("moments.csv"), |w| output::moments_csv(w, &out.tables))?;
    output::write_with(&dir.join("scp_trace.csv"), |w| out.trace.write_csv(w))?;
    output::write_json(&dir.join("feasibility.json"), &out.report)?;

    let rep = &out.report;
    println!(
        "plan: {} after {} iterations, final delta {:.3e}",
        if out.converged { "converged" } else { "not converged" },
        out.trace.len(),
        out.trace.last_delta().unwrap_or(f64::NAN)
    );
    output::print_report(rep);
    println!("wrote {}", dir.display());
    if !out.converged {
        return Err(Failure::Unmet("SCP did not converge".into()));
    }
    if !rep.passed {
        return Err(Failure::Unmet("converged policy fails the feasibility check".into()));
    }
    Ok(())
}

fn verify(path: &Path, policy_path: &Path, over: &Overrides) -> Result<(), Failure> {
    let s = load(path, over)?;
    let policy = load_policy(policy_path, &s)?;
    let rep = scp::verify_feasibility(&s.problem, &policy, &s.config.scp.tolerances)
        .map_err(|e| Failure::Input(e.to_string()))?;
    output::write_json(&s.output_dir.join("verify.json"), &rep)?;
    output::print_report(&rep);
    if rep.passed {
        Ok(())
    } else {
        Err(Failure::Unmet("policy is infeasible".into()))
    }
}

fn run_simulation(path: &Path, policy_path: &Path, over: &Overrides) -> Result<(), Failure> {
    let s = load(path, over)?;
    let policy = load_policy(policy_path, &s)?;
    let mc = &s.config.monte_carlo;
    let batch = simulate(&s.problem, &policy, mc.samples, mc.seed, mc.keep_trajectories).map_err(|e| match e {
        OracleError::NotSamplable(_) | OracleError::TooFewSamples(_) => Failure::Input(e.to_string()),
        other => Failure::Unmet(other.to_string()),
    })?;
    let tables = propagate(&s.problem, &policy).map_err(|e| Failure::Input(e.to_string()))?;
    let dir = &s.output_dir;
    output::write_with(&dir.join("mc_summary.csv"), |w| batch.write_summary_csv(w))?;
    output::write_with(&dir.join("mc_violations.csv"), |w| batch.write_violations_csv(w))?;
    output::write_with(&dir.join("mc_trajectories.csv"), |w| batch.write_trajectories_csv(w))?;
    output::write_with(&dir.join("ellipses.csv"), |w| {
        output::ellipses_csv(w, &batch, &tables, s.ellipse_states, mc.ellipse_sigma, mc.ellipse_points)
    })?;

    let last = batch.stats.last().expect("at least the initial step");
    println!("simulate: {} samples, seed {}", batch.n_samples, batch.seed);
    println!("  terminal mean     {}", output::fmt_vec(last.mean.as_slice()));
    println!("  predicted mean    {}", output::fmt_vec(tables[s.problem.horizon].state_mean().as_slice()));
    for v in batch.worst_violations() {
        let kind = match v.kind {
            ConstraintKind::State => "state",
            ConstraintKind::Input => "input",
        };
        println!(
            "  worst {kind} constraint {}: rate {:.4} at k={} (delta {})",
            v.index, v.rate, v.k, v.delta
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn oracle(path: &Path, policy_path: Option<&Path>, over: &Overrides) -> Result<(), Failure> {
    let s = load(path, over)?;
    let policy = match policy_path {
        Some(p) => load_policy(p, &s)?,
        None => s.initial_policy.clone(),
    };
    let exact = enumerate_exact(&s.problem, &policy).map_err(|e| Failure::Input(e.to_string()))?;
    let tables = propagate(&s.problem, &policy).map_err(|e| Failure::Input(e.to_string()))?;
    let err = output::max_table_gap(&exact, &tables);
    println!("oracle: max |engine - enumeration| = {err:.3e} over {} steps", tables.len());
    if err <= 1e-9 {
        Ok(())
    } else {
        Err(Failure::Unmet(format!("moment engine disagrees with enumeration by {err:.3e}")))
    }
}
