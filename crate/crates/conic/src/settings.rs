use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iters: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Over-relaxation factor α ∈ (0, 2).
    pub alpha: f64,
    /// Initial penalty ρ; equality rows use `rho * rho_eq_scale`.
    pub rho: f64,
    pub rho_eq_scale: f64,
    pub adaptive_rho: bool,
    /// Minimum number of iterations between refactorizations.
    pub adaptive_rho_interval: usize,
    /// Proximal term on x in the linear-system step.
    pub sigma: f64,
    pub scaling_iters: usize,
    pub check_interval: usize,
    pub eps_prim_inf: f64,
    pub eps_dual_inf: f64,
    /// Records one log entry per termination check.
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            alpha: 1.6,
            rho: 1.0,
            rho_eq_scale: 1e3,
            adaptive_rho: true,
            adaptive_rho_interval: 50,
            sigma: 1e-6,
            scaling_iters: 10,
            check_interval: 10,
            eps_prim_inf: 1e-6,
            eps_dual_inf: 1e-6,
            verbose: false,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.eps_abs > 0.0 && self.eps_rel > 0.0) {
            return Err("solver tolerances must be positive".into());
        }
        if self.max_iters == 0 {
            return Err("max_iters must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err("alpha must lie in (0, 2)".into());
        }
        if !(self.rho > 0.0 && self.sigma > 0.0) {
            return Err("rho and sigma must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIters,
    PrimalInfeasibleCert,
    DualInfeasibleCert,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub objective: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub objective: f64,
    /// Tolerances the residuals were measured against at exit.
    pub primal_tolerance: f64,
    pub dual_tolerance: f64,
    pub factorizations: usize,
    pub log: Vec<IterationLog>,
}

impl SolveReport {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Writes the iteration log as CSV.
    pub fn write_log_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,primal_residual,dual_residual,gap,objective,rho")?;
        for l in &self.log {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e}",
                l.iteration, l.primal_residual, l.dual_residual, l.gap, l.objective, l.rho
            )?;
        }
        Ok(())
    }
}
