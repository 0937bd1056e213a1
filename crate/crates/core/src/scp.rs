//! Sequential convex programming outer loop and the feasibility check for
//! its fixed points.

use covsteer_conic::{solve_with_warm_start, SolveStatus, SolverError, SolverSettings, WarmStart};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::linearize::{ConstraintKind, ReferencePoint};
use crate::moments::{expected_cost, propagate, MomentError, MomentTable, Policy};
use crate::problem::{max_eigenvalue, SteeringProblem, TerminalMode};
use crate::subproblem::{assemble, condense, extract_policy, AssembleError};

#[derive(Debug, Error)]
pub enum ScpError {
    #[error(transparent)]
    Moments(#[from] MomentError),
    #[error(transparent)]
    Assemble(#[from] AssembleError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid SCP settings: {0}")]
    Settings(String),
    #[error("infeasible linearization; adjust initial guess, Δ_R, or terminal mode (solver status {0:?})")]
    InfeasibleLinearization(SolveStatus),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScpSettings {
    /// Stop when `Σ_k ‖v_k − v̂_k‖ + ‖vec(L_k − L̂_k)‖` drops below this.
    pub epsilon: f64,
    /// Δ_R
    pub trust_weight: f64,
    pub max_iters: usize,
    /// Double Δ_R when the subproblem fails or the delta grows twice in a row.
    pub adapt_trust_weight: bool,
    pub solver: SolverSettings,
    pub tolerances: FeasibilityTolerances,
}

impl Default for ScpSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            trust_weight: 10.0,
            max_iters: 60,
            adapt_trust_weight: false,
            // the condensed subproblem is small, so a long ADMM run is cheap
            solver: SolverSettings {
                max_iters: 200_000,
                ..SolverSettings::default()
            },
            tolerances: FeasibilityTolerances::default(),
        }
    }
}

impl ScpSettings {
    pub fn validate(&self) -> Result<(), ScpError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ScpError::Settings(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.trust_weight > 0.0 && self.trust_weight.is_finite()) {
            return Err(ScpError::Settings(format!(
                "trust_weight must be positive, got {}",
                self.trust_weight
            )));
        }
        if self.max_iters == 0 {
            return Err(ScpError::Settings("max_iters must be at least 1".into()));
        }
        self.solver.validate().map_err(ScpError::Settings)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeasibilityTolerances {
    /// On `‖μ[x_N] − μ_F‖∞`.
    pub terminal_mean: f64,
    /// On `λ_max(Σ_N − Σ_F)`, or the largest entry gap in equality mode.
    pub terminal_cov: f64,
    /// Smallest accepted chance-constraint margin is `-cantelli`.
    pub cantelli: f64,
}

impl Default for FeasibilityTolerances {
    fn default() -> Self {
        Self {
            terminal_mean: 1e-3,
            terminal_cov: 1e-6,
            cantelli: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScpIteration {
    pub iteration: usize,
    pub delta: f64,
    pub objective: f64,
    pub solver_status: SolveStatus,
    pub solver_iters: usize,
    pub factorizations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Exact terminal errors of the linearization point.
    pub terminal_mean_error: f64,
    pub terminal_cov_excess: f64,
    pub trust_weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScpTrace {
    pub iterations: Vec<ScpIteration>,
}

impl ScpTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn last_delta(&self) -> Option<f64> {
        self.iterations.last().map(|it| it.delta)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# covsteer scp-trace v1")?;
        writeln!(
            w,
            "iteration,delta,objective,solver_status,solver_iters,factorizations,primal_residual,dual_residual,terminal_mean_error,terminal_cov_excess,trust_weight"
        )?;
        for it in &self.iterations {
            writeln!(
                w,
                "{},{:e},{:e},{},{},{},{:e},{:e},{:e},{:e},{}",
                it.iteration,
                it.delta,
                it.objective,
                status_name(it.solver_status),
                it.solver_iters,
                it.factorizations,
                it.primal_residual,
                it.dual_residual,
                it.terminal_mean_error,
                it.terminal_cov_excess,
                it.trust_weight
            )?;
        }
        Ok(())
    }
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::MaxIters => "max_iters",
        SolveStatus::PrimalInfeasibleCert => "primal_infeasible",
        SolveStatus::DualInfeasibleCert => "dual_infeasible",
    }
}

#[derive(Clone, Debug)]
pub struct ScpOutcome {
    pub policy: Policy,
    pub converged: bool,
    pub trace: ScpTrace,
    /// Exact moments under `policy`.
    pub tables: Vec<MomentTable>,
    pub report: FeasibilityReport,
}

/// Runs the outer loop from `guess`.
///
/// On convergence the last solved policy is returned. Otherwise the
/// cheapest iterate that passed `verify_feasibility` is returned, or the last
/// one when none did.
pub fn run(problem: &SteeringProblem, guess: &Policy, settings: &ScpSettings) -> Result<ScpOutcome, ScpError> {
    settings.validate()?;
    problem.validate().map_err(MomentError::from)?;
    guess.check_shape(problem.horizon, problem.n_u(), problem.n_x())?;

    let tol = &settings.tolerances;
    let mut trust = settings.trust_weight;
    let mut hat = guess.clone();
    let mut warm: Option<WarmStart> = None;
    let mut trace = ScpTrace::default();
    let mut best: Option<(f64, Policy)> = None;
    let mut growth = 0usize;
    let mut solved_once = false;

    let consider = |policy: &Policy, tables: &[MomentTable], best: &mut Option<(f64, Policy)>| {
        if check(problem, tables, policy, tol).passed {
            let cost = expected_cost(problem, tables, policy);
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                *best = Some((cost, policy.clone()));
            }
        }
    };

    for iteration in 0..settings.max_iters {
        let reference = ReferencePoint::new(problem, hat.clone())?;
        consider(&hat, &reference.tables, &mut best);
        let (mean_err, cov_excess) = terminal_errors(problem, &reference.tables);

        let sub = assemble(problem, &reference, trust)?;
        let cond = condense(&sub)?;
        let sol = solve_with_warm_start(&cond.program, &settings.solver, warm.as_ref())?;
        let rep = &sol.report;
        let usable = rep.status == SolveStatus::Optimal
            || (rep.status == SolveStatus::MaxIters
                && rep.primal_residual <= 100.0 * rep.primal_tolerance
                && rep.dual_residual <= 100.0 * rep.dual_tolerance);
        if !usable {
            if settings.adapt_trust_weight {
                trace.iterations.push(ScpIteration {
                    iteration,
                    delta: f64::NAN,
                    objective: rep.objective,
                    solver_status: rep.status,
                    solver_iters: rep.iterations,
                    factorizations: rep.factorizations,
                    primal_residual: rep.primal_residual,
                    dual_residual: rep.dual_residual,
                    terminal_mean_error: mean_err,
                    terminal_cov_excess: cov_excess,
                    trust_weight: trust,
                });
                trust *= 2.0;
                warm = None;
                continue;
            }
            if !solved_once {
                return Err(ScpError::InfeasibleLinearization(rep.status));
            }
            break;
        }
        solved_once = true;
        let next = extract_policy(problem, &sub.layout, &cond.expand(&sol.x)).policy;
        let delta = next.distance(&hat);
        if let Some(prev) = trace.last_delta() {
            growth = if delta > prev { growth + 1 } else { 0 };
        }
        trace.iterations.push(ScpIteration {
            iteration,
            delta,
            objective: rep.objective,
            solver_status: rep.status,
            solver_iters: rep.iterations,
            factorizations: rep.factorizations,
            primal_residual: rep.primal_residual,
            dual_residual: rep.dual_residual,
            terminal_mean_error: mean_err,
            terminal_cov_excess: cov_excess,
            trust_weight: trust,
        });
        warm = Some(sol.warm_start());
        hat = next;
        if delta < settings.epsilon {
            let tables = propagate(problem, &hat)?;
            let report = check(problem, &tables, &hat, tol);
            return Ok(ScpOutcome {
                policy: hat,
                converged: true,
                trace,
                tables,
                report,
            });
        }
        if settings.adapt_trust_weight && growth >= 2 {
            trust *= 2.0;
            growth = 0;
        }
    }

    if solved_once {
        let tables = propagate(problem, &hat)?;
        consider(&hat, &tables, &mut best);
    }
    let policy = best.map(|(_, p)| p).unwrap_or(hat);
    let tables = propagate(problem, &policy)?;
    let report = check(problem, &tables, &policy, tol);
    Ok(ScpOutcome {
        policy,
        converged: false,
        trace,
        tables,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstraintMargin {
    pub kind: ConstraintKind,
    pub index: usize,
    pub k: usize,
    /// `β − αᵀμ − c·√(αᵀΣα)`; nonnegative means satisfied.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub terminal_mean_gap: f64,
    pub terminal_mean_ok: bool,
    pub terminal_mode: TerminalMode,
    /// `λ_max(Σ_N − Σ_F)` or, in equality mode, the largest entry gap.
    pub terminal_cov_excess: f64,
    pub terminal_cov_ok: bool,
    pub margins: Vec<ConstraintMargin>,
    pub min_margin: f64,
    pub passed: bool,
}

/// Propagates `policy` exactly and checks the terminal targets and every
/// chance constraint against the resulting moments.
pub fn verify_feasibility(
    problem: &SteeringProblem,
    policy: &Policy,
    tol: &FeasibilityTolerances,
) -> Result<FeasibilityReport, MomentError> {
    let tables = propagate(problem, policy)?;
    Ok(check(problem, &tables, policy, tol))
}

fn terminal_errors(problem: &SteeringProblem, tables: &[MomentTable]) -> (f64, f64) {
    let last = &tables[problem.horizon];
    let mean_gap = (last.state_mean() - &problem.mu_f).amax();
    let diff = problem.steered_block(&(last.state_cov() - &problem.sigma_f));
    let excess = match problem.terminal_mode {
        TerminalMode::PsdInequality => max_eigenvalue(&diff),
        TerminalMode::Equality => diff.amax(),
    };
    (mean_gap, excess)
}

pub(crate) fn cantelli_margin(alpha: &DVector<f64>, beta: f64, factor: f64, mean: &DVector<f64>, cov: &nalgebra::DMatrix<f64>) -> f64 {
    let var = (alpha.transpose() * cov * alpha)[(0, 0)].max(0.0);
    beta - alpha.dot(mean) - factor * var.sqrt()
}

fn check(problem: &SteeringProblem, tables: &[MomentTable], policy: &Policy, tol: &FeasibilityTolerances) -> FeasibilityReport {
    let (mean_gap, excess) = terminal_errors(problem, tables);
    let mut margins = Vec::new();
    for k in 0..problem.horizon {
        let mu = tables[k].state_mean();
        let sig = tables[k].state_cov();
        for (index, c) in problem.state_constraints.iter().enumerate() {
            margins.push(ConstraintMargin {
                kind: ConstraintKind::State,
                index,
                k,
                margin: cantelli_margin(&c.alpha(), c.beta, c.cantelli_factor(), mu, sig),
            });
        }
        if problem.input_constraints.is_empty() {
            continue;
        }
        let l = &policy.gains[k];
        let u_mean = &policy.feedforward[k] + l * mu;
        let u_cov = l * sig * l.transpose();
        for (index, c) in problem.input_constraints.iter().enumerate() {
            margins.push(ConstraintMargin {
                kind: ConstraintKind::Input,
                index,
                k,
                margin: cantelli_margin(&c.alpha(), c.beta, c.cantelli_factor(), &u_mean, &u_cov),
            });
        }
    }
    let min_margin = margins.iter().map(|m| m.margin).fold(f64::INFINITY, f64::min);
    let terminal_mean_ok = mean_gap <= tol.terminal_mean;
    let terminal_cov_ok = excess <= tol.terminal_cov;
    FeasibilityReport {
        terminal_mean_gap: mean_gap,
        terminal_mean_ok,
        terminal_mode: problem.terminal_mode,
        terminal_cov_excess: excess,
        terminal_cov_ok,
        passed: terminal_mean_ok && terminal_cov_ok && min_margin >= -tol.cantelli,
        margins,
        min_margin,
    }
}
