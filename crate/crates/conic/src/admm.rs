//! Operator-splitting solver.
//!
//! Each iteration solves one quasi-definite linear system with a cached
//! sparse LDLᵀ factorization, then projects the slack onto the cone product:
//!
//! ```text
//! [P + σI   Aᵀ  ] [x̃]   [σxᵏ − q          ]
//! [A      −ρ⁻¹I ] [ν ] = [b − sᵏ + ρ⁻¹yᵏ   ]
//! s̃ = sᵏ − ρ⁻¹(ν + yᵏ)
//! xᵏ⁺¹ = αx̃ + (1−α)xᵏ
//! sᵏ⁺¹ = Π_K(αs̃ + (1−α)sᵏ + ρ⁻¹yᵏ)
//! yᵏ⁺¹ = yᵏ + ρ(αs̃ + (1−α)sᵏ − sᵏ⁺¹)
//! ```
//!
//! The iterate `y` lives in the polar cone; the reported dual is `z = −y ∈ K*`,
//! so that at optimality `Px + q + Aᵀz = 0`.

use clarabel::algebra::CscMatrix as KktMatrix;
use clarabel::qdldl::{QDLDLFactorisation, QDLDLSettingsBuilder};
use thiserror::Error;

use crate::cone::Cone;
use crate::program::ConicProgram;
use crate::settings::{IterationLog, SolveReport, SolveStatus, SolverSettings};
use crate::sparse::{dot, inf_norm, CscMatrix};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const SCALE_MIN: f64 = 1e-4;
const SCALE_MAX: f64 = 1e4;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver settings: {0}")]
    Settings(String),
    #[error("KKT factorization failed: {0}")]
    Factorization(String),
    #[error("warm start has wrong dimensions")]
    WarmStartShape,
}

/// Primal-dual point in the caller's (unscaled) coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub report: SolveReport,
}

impl Solution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            x: self.x.clone(),
            s: self.s.clone(),
            z: self.z.clone(),
        }
    }
}

pub fn solve(program: &ConicProgram, settings: &SolverSettings) -> Result<Solution, SolverError> {
    solve_with_warm_start(program, settings, None)
}

pub fn solve_with_warm_start(
    program: &ConicProgram,
    settings: &SolverSettings,
    warm: Option<&WarmStart>,
) -> Result<Solution, SolverError> {
    settings.validate().map_err(SolverError::Settings)?;
    let mut ws = Workspace::new(program, settings)?;
    if let Some(w) = warm {
        ws.load_warm_start(w)?;
    }
    Ok(ws.run())
}

struct Scaling {
    d: Vec<f64>,
    e: Vec<f64>,
    c: f64,
}

fn limit(norm: f64) -> f64 {
    if norm < SCALE_MIN {
        1.0
    } else {
        norm.min(SCALE_MAX)
    }
}

/// Ruiz equilibration with uniform scaling inside SOC and PSD blocks.
fn equilibrate(
    p: &mut CscMatrix,
    q: &mut [f64],
    a: &mut CscMatrix,
    b: &mut [f64],
    cones: &[(Cone, std::ops::Range<usize>)],
    iters: usize,
) -> Scaling {
    let n = q.len();
    let m = b.len();
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    for _ in 0..iters {
        let pc = p.col_inf_norms();
        let ac = a.col_inf_norms();
        let dd: Vec<f64> = (0..n)
            .map(|j| 1.0 / limit(pc[j].max(ac[j])).sqrt())
            .collect();
        let ar = a.row_inf_norms();
        let mut de: Vec<f64> = ar.iter().map(|&r| 1.0 / limit(r).sqrt()).collect();
        for (cone, range) in cones {
            if cone.is_symmetric_block() && !range.is_empty() {
                let block = ar[range.clone()].iter().fold(0.0_f64, |acc, v| acc.max(*v));
                let v = 1.0 / limit(block).sqrt();
                de[range.clone()].iter_mut().for_each(|x| *x = v);
            }
        }
        p.scale(&dd, &dd);
        a.scale(&de, &dd);
        for j in 0..n {
            q[j] *= dd[j];
            d[j] *= dd[j];
        }
        for i in 0..m {
            b[i] *= de[i];
            e[i] *= de[i];
        }
    }
    let pc = p.col_inf_norms();
    let mean_pc = if n > 0 {
        pc.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let c = 1.0 / limit(mean_pc.max(inf_norm(q)));
    let ones = vec![1.0; n];
    let cs = vec![c; n];
    p.scale(&cs, &ones);
    q.iter_mut().for_each(|v| *v *= c);
    Scaling { d, e, c }
}

struct Workspace<'a> {
    prog: &'a ConicProgram,
    settings: &'a SolverSettings,
    cones: Vec<(Cone, std::ops::Range<usize>)>,
    n: usize,
    m: usize,
    scale: Scaling,
    p: CscMatrix,
    q: Vec<f64>,
    a: CscMatrix,
    b: Vec<f64>,
    rho: Vec<f64>,
    rho_base: f64,
    is_eq: Vec<bool>,
    kkt: QDLDLFactorisation<f64>,
    rho_diag_idx: Vec<usize>,
    factorizations: usize,
    x: Vec<f64>,
    s: Vec<f64>,
    y: Vec<f64>,
}

impl<'a> Workspace<'a> {
    fn new(prog: &'a ConicProgram, settings: &'a SolverSettings) -> Result<Self, SolverError> {
        let n = prog.num_vars();
        let m = prog.num_rows();
        let cones = prog.cone_ranges();
        let mut p = prog.p.clone();
        let mut q = prog.q.clone();
        let mut a = prog.a.clone();
        let mut b = prog.b.clone();
        let scale = equilibrate(&mut p, &mut q, &mut a, &mut b, &cones, settings.scaling_iters);

        let mut is_eq = vec![false; m];
        for (cone, range) in &cones {
            if matches!(cone, Cone::Zero(_)) {
                is_eq[range.clone()].iter_mut().for_each(|v| *v = true);
            }
        }
        let rho_base = settings.rho;
        let rho: Vec<f64> = is_eq
            .iter()
            .map(|&eq| if eq { rho_base * settings.rho_eq_scale } else { rho_base })
            .collect();

        let (kkt_mat, rho_diag_idx) = build_kkt(&p, &a, settings.sigma, &rho);
        let mut signs = vec![1i8; n + m];
        signs[n..].iter_mut().for_each(|s| *s = -1);
        let opts = QDLDLSettingsBuilder::default()
            .Dsigns(signs)
            .build()
            .map_err(|e| SolverError::Factorization(e.to_string()))?;
        let kkt = QDLDLFactorisation::new(&kkt_mat, Some(opts))
            .map_err(|e| SolverError::Factorization(format!("{e:?}")))?;

        Ok(Self {
            prog,
            settings,
            cones,
            n,
            m,
            scale,
            p,
            q,
            a,
            b,
            rho,
            rho_base,
            is_eq,
            kkt,
            rho_diag_idx,
            factorizations: 1,
            x: vec![0.0; n],
            s: vec![0.0; m],
            y: vec![0.0; m],
        })
    }

    fn load_warm_start(&mut self, w: &WarmStart) -> Result<(), SolverError> {
        if w.x.len() != self.n || w.s.len() != self.m || w.z.len() != self.m {
            return Err(SolverError::WarmStartShape);
        }
        let Scaling { d, e, c } = &self.scale;
        for j in 0..self.n {
            self.x[j] = w.x[j] / d[j];
        }
        for i in 0..self.m {
            self.s[i] = w.s[i] * e[i];
            self.y[i] = -c * w.z[i] / e[i];
        }
        Ok(())
    }

    fn update_rho(&mut self, rho_base: f64) -> Result<(), SolverError> {
        self.rho_base = rho_base;
        let eq_scale = self.settings.rho_eq_scale;
        for (r, &eq) in self.rho.iter_mut().zip(&self.is_eq) {
            *r = if eq { rho_base * eq_scale } else { rho_base };
        }
        let vals: Vec<f64> = self.rho.iter().map(|r| -1.0 / r).collect();
        self.kkt.update_values(&self.rho_diag_idx, &vals);
        self.kkt
            .refactor()
            .map_err(|e| SolverError::Factorization(format!("{e:?}")))?;
        self.factorizations += 1;
        Ok(())
    }

    fn unscaled(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let Scaling { d, e, c } = &self.scale;
        let x = self.x.iter().zip(d).map(|(v, d)| v * d).collect();
        let s = self.s.iter().zip(e).map(|(v, e)| v / e).collect();
        let z = self.y.iter().zip(e).map(|(v, e)| -v * e / c).collect();
        (x, s, z)
    }

    fn run(mut self) -> Solution {
        let st = self.settings;
        let (n, m) = (self.n, self.m);
        let alpha = st.alpha;
        let mut rhs = vec![0.0; n + m];
        let mut s_hat = vec![0.0; m];
        let mut x_prev = vec![0.0; n];
        let mut y_prev = vec![0.0; m];
        let mut log = Vec::new();
        let mut last_rho_update = 0usize;
        let mut status = SolveStatus::MaxIters;
        let mut iterations = st.max_iters;
        let mut res = Residuals::default();

        for iter in 1..=st.max_iters {
            x_prev.copy_from_slice(&self.x);
            y_prev.copy_from_slice(&self.y);

            for j in 0..n {
                rhs[j] = st.sigma * self.x[j] - self.q[j];
            }
            for i in 0..m {
                rhs[n + i] = self.b[i] - self.s[i] + self.y[i] / self.rho[i];
            }
            self.kkt.solve(&mut rhs);
            for j in 0..n {
                self.x[j] = alpha * rhs[j] + (1.0 - alpha) * self.x[j];
            }
            for i in 0..m {
                let s_tilde = self.s[i] - (rhs[n + i] + self.y[i]) / self.rho[i];
                s_hat[i] = alpha * s_tilde + (1.0 - alpha) * self.s[i];
                self.s[i] = s_hat[i] + self.y[i] / self.rho[i];
            }
            for (cone, range) in &self.cones {
                cone.project(&mut self.s[range.clone()]);
            }
            for i in 0..m {
                self.y[i] += self.rho[i] * (s_hat[i] - self.s[i]);
            }

            let check = iter % st.check_interval.max(1) == 0 || iter == st.max_iters;
            if !check {
                continue;
            }
            res = self.residuals();
            if st.verbose {
                log.push(IterationLog {
                    iteration: iter,
                    primal_residual: res.primal,
                    dual_residual: res.dual,
                    gap: res.gap,
                    objective: res.objective,
                    rho: self.rho_base,
                });
            }
            if res.converged() {
                status = SolveStatus::Optimal;
                iterations = iter;
                break;
            }
            if self.primal_infeasible(&y_prev) {
                status = SolveStatus::PrimalInfeasibleCert;
                iterations = iter;
                break;
            }
            if self.dual_infeasible(&x_prev) {
                status = SolveStatus::DualInfeasibleCert;
                iterations = iter;
                break;
            }
            if st.adaptive_rho && iter - last_rho_update >= st.adaptive_rho_interval {
                let ratio = self.rho_ratio();
                if !(0.2..=5.0).contains(&ratio) {
                    let new_rho = (self.rho_base * ratio).clamp(RHO_MIN, RHO_MAX);
                    if new_rho != self.rho_base && self.update_rho(new_rho).is_ok() {
                        last_rho_update = iter;
                    }
                }
            }
        }

        let (x, s, z) = self.unscaled();
        let report = SolveReport {
            status,
            iterations,
            primal_residual: res.primal,
            dual_residual: res.dual,
            gap: res.gap,
            objective: self.prog.objective(&x),
            primal_tolerance: res.primal_tol,
            dual_tolerance: res.dual_tol,
            factorizations: self.factorizations,
            log,
        };
        Solution { x, s, z, report }
    }

    fn residuals(&self) -> Residuals {
        let prog = self.prog;
        let (x, s, z) = self.unscaled();
        let mut ax = vec![0.0; self.m];
        prog.a.mul_vec(&x, &mut ax);
        let mut px = vec![0.0; self.n];
        prog.p.mul_vec(&x, &mut px);
        let mut atz = vec![0.0; self.n];
        prog.a.tmul_vec(&z, &mut atz);

        let rp: Vec<f64> = (0..self.m).map(|i| ax[i] + s[i] - prog.b[i]).collect();
        let rd: Vec<f64> = (0..self.n).map(|j| px[j] + prog.q[j] + atz[j]).collect();
        let xpx = dot(&x, &px);
        let qx = dot(&prog.q, &x);
        let bz = dot(&prog.b, &z);
        let eps_abs = self.settings.eps_abs;
        let eps_rel = self.settings.eps_rel;
        Residuals {
            primal: inf_norm(&rp),
            dual: inf_norm(&rd),
            gap: (xpx + qx + bz).abs(),
            objective: 0.5 * xpx + qx + prog.constant,
            primal_tol: eps_abs
                + eps_rel * inf_norm(&ax).max(inf_norm(&s)).max(inf_norm(&prog.b)),
            dual_tol: eps_abs
                + eps_rel * inf_norm(&px).max(inf_norm(&prog.q)).max(inf_norm(&atz)),
            gap_tol: eps_abs + eps_rel * xpx.abs().max(qx.abs()).max(bz.abs()),
        }
    }

    /// `sqrt(relative primal residual / relative dual residual)` in scaled space.
    fn rho_ratio(&self) -> f64 {
        let mut ax = vec![0.0; self.m];
        self.a.mul_vec(&self.x, &mut ax);
        let mut px = vec![0.0; self.n];
        self.p.mul_vec(&self.x, &mut px);
        let mut aty = vec![0.0; self.n];
        self.a.tmul_vec(&self.y, &mut aty);
        let rp: Vec<f64> = (0..self.m).map(|i| ax[i] + self.s[i] - self.b[i]).collect();
        let rd: Vec<f64> = (0..self.n).map(|j| px[j] + self.q[j] - aty[j]).collect();
        let tiny = 1e-30;
        let prim = inf_norm(&rp) / (inf_norm(&ax).max(inf_norm(&self.s)).max(inf_norm(&self.b)) + tiny);
        let dual = inf_norm(&rd) / (inf_norm(&px).max(inf_norm(&self.q)).max(inf_norm(&aty)) + tiny);
        (prim / (dual + tiny)).sqrt()
    }

    fn primal_infeasible(&self, y_prev: &[f64]) -> bool {
        if self.m == 0 {
            return false;
        }
        let e = &self.scale.e;
        let cert: Vec<f64> = (0..self.m)
            .map(|i| -(self.y[i] - y_prev[i]) * e[i])
            .collect();
        let norm = inf_norm(&cert);
        if norm < 1e-10 {
            return false;
        }
        let eps = self.settings.eps_prim_inf * norm;
        let mut atz = vec![0.0; self.n];
        self.prog.a.tmul_vec(&cert, &mut atz);
        if inf_norm(&atz) > eps || dot(&self.prog.b, &cert) >= -eps {
            return false;
        }
        self.cones
            .iter()
            .all(|(cone, r)| cone.distance_dual(&cert[r.clone()]) <= eps)
    }

    fn dual_infeasible(&self, x_prev: &[f64]) -> bool {
        let d = &self.scale.d;
        let dx: Vec<f64> = (0..self.n).map(|j| (self.x[j] - x_prev[j]) * d[j]).collect();
        let norm = inf_norm(&dx);
        if norm < 1e-10 {
            return false;
        }
        let eps = self.settings.eps_dual_inf * norm;
        let mut pdx = vec![0.0; self.n];
        self.prog.p.mul_vec(&dx, &mut pdx);
        if inf_norm(&pdx) > eps || dot(&self.prog.q, &dx) >= -eps {
            return false;
        }
        let mut adx = vec![0.0; self.m];
        self.prog.a.mul_vec(&dx, &mut adx);
        let neg: Vec<f64> = adx.iter().map(|v| -v).collect();
        self.cones.iter().all(|(cone, r)| match cone {
            Cone::Zero(_) => inf_norm(&neg[r.clone()]) <= eps,
            _ => cone.distance(&neg[r.clone()]) <= eps,
        })
    }
}

#[derive(Default, Clone, Copy)]
struct Residuals {
    primal: f64,
    dual: f64,
    gap: f64,
    objective: f64,
    primal_tol: f64,
    dual_tol: f64,
    gap_tol: f64,
}

impl Residuals {
    fn converged(&self) -> bool {
        self.primal <= self.primal_tol && self.dual <= self.dual_tol && self.gap <= self.gap_tol
    }
}

/// Upper triangle of `[P + σI, Aᵀ; A, −diag(1/ρ)]` and the positions of the
/// `−1/ρ` entries in its value array.
fn build_kkt(p: &CscMatrix, a: &CscMatrix, sigma: f64, rho: &[f64]) -> (KktMatrix<f64>, Vec<usize>) {
    let n = p.ncols;
    let m = a.nrows;
    let at = a.transpose();
    let dim = n + m;
    let mut colptr = Vec::with_capacity(dim + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    let mut rho_idx = Vec::with_capacity(m);
    colptr.push(0);
    for j in 0..n {
        let mut diag_seen = false;
        for k in p.colptr[j]..p.colptr[j + 1] {
            let r = p.rowval[k];
            if r > j {
                break;
            }
            if r == j {
                diag_seen = true;
                rowval.push(r);
                nzval.push(p.nzval[k] + sigma);
            } else {
                rowval.push(r);
                nzval.push(p.nzval[k]);
            }
        }
        if !diag_seen {
            rowval.push(j);
            nzval.push(sigma);
        }
        colptr.push(rowval.len());
    }
    for i in 0..m {
        for k in at.colptr[i]..at.colptr[i + 1] {
            rowval.push(at.rowval[k]);
            nzval.push(at.nzval[k]);
        }
        rho_idx.push(rowval.len());
        rowval.push(n + i);
        nzval.push(-1.0 / rho[i]);
        colptr.push(rowval.len());
    }
    (KktMatrix::new(dim, dim, colptr, rowval, nzval), rho_idx)
}
