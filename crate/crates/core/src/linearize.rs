//! First-order models of the moment recursions and chance constraints around a
//! reference policy and its exact moments.
//!
//! Every nonlinear term is a product of constant matrices and decision
//! variables, `C₀ X₁ C₁ X₂ …`. Its first-order expansion at the hats is
//! `Σᵢ (∏_{<i} ĥ) (Xᵢ − X̂ᵢ) (∏_{>i} ĥ) + ∏ ĥ`, which is what `lin(x, y)` and
//! `lin(x, y, z)` denote.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

use crate::moments::{MomentError, MomentTable, Policy};
use crate::problem::SteeringProblem;
use crate::system::{indices_up_to, MultiIndex};

/// Floor on `λ̂` before it enters `1/(2√λ̂)`.
pub const LAMBDA_FLOOR: f64 = 1e-9;

/// A block of decision variables.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKey {
    /// `μ[x_t Pₐ]`, `n_x × 1`.
    Mean { t: usize, a: MultiIndex },
    /// `Σ[x_t Pₐ, x_t P_b]` with `a ≤ b`, `n_x × n_x`; symmetric when `a = b`.
    Cov { t: usize, a: MultiIndex, b: MultiIndex },
    /// `Σ[x_t Pₐ, P_b]`, `n_x × 1`.
    CrossCov { t: usize, a: MultiIndex, b: MultiIndex },
    /// `L_k`, `n_u × n_x`.
    Gain { k: usize },
    /// `v_k`, `n_u × 1`.
    Feedforward { k: usize },
    /// Epigraph of `‖v_k − v̂_k‖₂`.
    EpiFeedforward { k: usize },
    /// Epigraph of `‖vec(L_k − L̂_k)‖₂`.
    EpiGain { k: usize },
}

impl VarKey {
    /// Canonical key for `Σ[x_t P_c, x_t P_d]` and whether it is stored transposed.
    pub fn cov(t: usize, c: &MultiIndex, d: &MultiIndex) -> (VarKey, bool) {
        if c <= d {
            (VarKey::Cov { t, a: c.clone(), b: d.clone() }, false)
        } else {
            (VarKey::Cov { t, a: d.clone(), b: c.clone() }, true)
        }
    }

    pub fn shape(&self, n_x: usize, n_u: usize) -> (usize, usize) {
        match self {
            VarKey::Mean { .. } | VarKey::CrossCov { .. } => (n_x, 1),
            VarKey::Cov { .. } => (n_x, n_x),
            VarKey::Gain { .. } => (n_u, n_x),
            VarKey::Feedforward { .. } => (n_u, 1),
            VarKey::EpiFeedforward { .. } | VarKey::EpiGain { .. } => (1, 1),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        matches!(self, VarKey::Cov { a, b, .. } if a == b)
    }

    /// Time index of a moment block, or the step of a policy block.
    pub fn time(&self) -> usize {
        match self {
            VarKey::Mean { t, .. } | VarKey::Cov { t, .. } | VarKey::CrossCov { t, .. } => *t,
            VarKey::Gain { k }
            | VarKey::Feedforward { k }
            | VarKey::EpiFeedforward { k }
            | VarKey::EpiGain { k } => *k,
        }
    }
}

/// Reference policy with its exact moment tables.
#[derive(Clone, Debug)]
pub struct ReferencePoint {
    pub policy: Policy,
    pub tables: Vec<MomentTable>,
}

impl ReferencePoint {
    pub fn new(problem: &SteeringProblem, policy: Policy) -> Result<Self, MomentError> {
        let tables = crate::moments::propagate(problem, &policy)?;
        Ok(Self { policy, tables })
    }

    /// Hat value of a variable block as a matrix.
    pub fn value(&self, key: &VarKey) -> DMatrix<f64> {
        block_value(&self.tables, &self.policy, key)
    }
}

/// Value of a variable block read from moment tables and a policy.
pub fn block_value(tables: &[MomentTable], policy: &Policy, key: &VarKey) -> DMatrix<f64> {
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    match key {
        VarKey::Mean { t, a } => col(&tables[*t].mean[a]),
        VarKey::Cov { t, a, b } => tables[*t].xx[&(a.clone(), b.clone())].clone(),
        VarKey::CrossCov { t, a, b } => col(&tables[*t].xp[&(a.clone(), b.clone())]),
        VarKey::Gain { k } => policy.gains[*k].clone(),
        VarKey::Feedforward { k } => col(&policy.feedforward[*k]),
        VarKey::EpiFeedforward { .. } | VarKey::EpiGain { .. } => DMatrix::zeros(1, 1),
    }
}

/// `Y = constant + Σ_X J_X vec(X)`, with `vec` column-major.
///
/// For a symmetric block the Jacobian acts on the full matrix; both triangles
/// refer to the same variables.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineExpr {
    pub constant: DMatrix<f64>,
    pub jac: BTreeMap<VarKey, DMatrix<f64>>,
}

impl AffineExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            constant: DMatrix::zeros(rows, cols),
            jac: BTreeMap::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.constant.nrows()
    }

    pub fn cols(&self) -> usize {
        self.constant.ncols()
    }

    /// Adds `left · op(X) · right` where `op` is the identity or a transpose.
    pub fn add_term(
        &mut self,
        key: &VarKey,
        var_shape: (usize, usize),
        left: &DMatrix<f64>,
        transposed: bool,
        right: &DMatrix<f64>,
    ) {
        let (rows, cols) = (self.rows(), self.cols());
        let (vr, vc) = var_shape;
        let jac = self
            .jac
            .entry(key.clone())
            .or_insert_with(|| DMatrix::zeros(rows * cols, vr * vc));
        for s in 0..cols {
            for r in 0..rows {
                let out = r + s * rows;
                for q in 0..vc {
                    for p in 0..vr {
                        // Y[r,s] += L[r,·] op(X) R[·,s]
                        let c = if transposed {
                            left[(r, q)] * right[(p, s)]
                        } else {
                            left[(r, p)] * right[(q, s)]
                        };
                        if c != 0.0 {
                            jac[(out, p + q * vr)] += c;
                        }
                    }
                }
            }
        }
    }

    /// Evaluates the expression at the given variable values.
    pub fn eval(&self, value: impl Fn(&VarKey) -> DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (key, jac) in &self.jac {
            let x = value(key);
            let vx = DVector::from_column_slice(x.as_slice());
            let y = jac * vx;
            for (o, v) in out.iter_mut().zip(y.iter()) {
                *o += v;
            }
        }
        out
    }
}

/// A factor in a product term.
#[derive(Clone, Debug)]
pub enum Factor {
    Const(DMatrix<f64>),
    Var { key: VarKey, transposed: bool },
}

impl Factor {
    pub fn var(key: VarKey) -> Self {
        Factor::Var { key, transposed: false }
    }

    pub fn var_t(key: VarKey) -> Self {
        Factor::Var { key, transposed: true }
    }
}

/// Adds the first-order expansion of `scale · ∏ factors` at the hats.
pub fn add_product(
    expr: &mut AffineExpr,
    scale: f64,
    factors: &[Factor],
    hat: &impl Fn(&VarKey) -> DMatrix<f64>,
) {
    if scale == 0.0 {
        return;
    }
    if factors.iter().any(|f| matches!(f, Factor::Const(m) if m.iter().all(|v| *v == 0.0))) {
        return;
    }
    let values: Vec<DMatrix<f64>> = factors
        .iter()
        .map(|f| match f {
            Factor::Const(m) => m.clone(),
            Factor::Var { key, transposed } => {
                let v = hat(key);
                if *transposed {
                    v.transpose()
                } else {
                    v
                }
            }
        })
        .collect();
    let n = values.len();
    // prefix[i] = ∏_{<i}, suffix[i] = ∏_{≥i}
    let mut prefix: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    prefix.push(DMatrix::identity(values[0].nrows(), values[0].nrows()));
    for v in &values {
        let next = prefix.last().unwrap() * v;
        prefix.push(next);
    }
    let mut suffix: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); n + 1];
    let last_cols = values[n - 1].ncols();
    suffix[n] = DMatrix::identity(last_cols, last_cols);
    for i in (0..n).rev() {
        suffix[i] = &values[i] * &suffix[i + 1];
    }
    let n_vars = factors.iter().filter(|f| matches!(f, Factor::Var { .. })).count();
    let full = &prefix[n] * scale;
    expr.constant += full * (1.0 - n_vars as f64);
    for (i, f) in factors.iter().enumerate() {
        if let Factor::Var { key, transposed } = f {
            let (r, c) = values[i].shape();
            let shape = if *transposed { (c, r) } else { (r, c) };
            let left = &prefix[i] * scale;
            expr.add_term(key, shape, &left, *transposed, &suffix[i + 1]);
        }
    }
}

/// `lin(x, y) = (x−x̂)ŷ + x̂(y−ŷ) + x̂ŷ`.
pub fn lin2(x: &DMatrix<f64>, y: &DMatrix<f64>, xh: &DMatrix<f64>, yh: &DMatrix<f64>) -> DMatrix<f64> {
    (x - xh) * yh + xh * (y - yh) + xh * yh
}

/// `lin(x, y, z) = (x−x̂)ŷẑ + x̂(y−ŷ)ẑ + x̂ŷ(z−ẑ) + x̂ŷẑ`.
pub fn lin3(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
    xh: &DMatrix<f64>,
    yh: &DMatrix<f64>,
    zh: &DMatrix<f64>,
) -> DMatrix<f64> {
    (x - xh) * yh * zh + xh * (y - yh) * zh + xh * yh * (z - zh) + xh * yh * zh
}

/// `output = expr` after linearization.
#[derive(Clone, Debug)]
pub struct LinearizedEquation {
    pub output: VarKey,
    pub expr: AffineExpr,
}

fn term_matrices(problem: &SteeringProblem) -> Vec<(Option<usize>, &DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>)> {
    problem.system.terms().map(|t| (t.param, t.a, t.b, t.d)).collect()
}

fn shifted(a: &MultiIndex, p: Option<usize>) -> MultiIndex {
    crate::moments::shifted(a, p)
}

/// Linearized mean, covariance and cross-covariance recursions for every
/// lattice entry at `t = 1..=N`.
pub fn linearize_dynamics(
    problem: &SteeringProblem,
    reference: &ReferencePoint,
) -> Result<Vec<LinearizedEquation>, MomentError> {
    let mut out = Vec::new();
    for t in 0..problem.horizon {
        out.extend(linearize_step(problem, reference, t)?);
    }
    Ok(out)
}

/// Linearized equations producing time `t + 1` from time `t`.
pub fn linearize_step(
    problem: &SteeringProblem,
    reference: &ReferencePoint,
    t: usize,
) -> Result<Vec<LinearizedEquation>, MomentError> {
    let n_x = problem.n_x();
    let params = &problem.params;
    let terms = term_matrices(problem);
    let hat = |k: &VarKey| reference.value(k);
    let gain = VarKey::Gain { k: t };
    let ff = VarKey::Feedforward { k: t };
    let max_next = problem.horizon - t - 1;
    let idx = indices_up_to(problem.n_p(), max_next);
    let mut out = Vec::new();

    for a in &idx {
        let mut e = AffineExpr::zeros(n_x, 1);
        for &(p, am, bm, _) in &terms {
            let c = shifted(a, p);
            let mu = VarKey::Mean { t, a: c.clone() };
            add_product(&mut e, 1.0, &[Factor::Const(am.clone()), Factor::var(mu.clone())], &hat);
            add_product(
                &mut e,
                1.0,
                &[Factor::Const(bm.clone()), Factor::var(gain.clone()), Factor::var(mu)],
                &hat,
            );
            add_product(
                &mut e,
                params.joint_moment(&c)?,
                &[Factor::Const(bm.clone()), Factor::var(ff.clone())],
                &hat,
            );
        }
        out.push(LinearizedEquation {
            output: VarKey::Mean { t: t + 1, a: a.clone() },
            expr: e,
        });
    }

    for (ia, a) in idx.iter().enumerate() {
        for b in &idx[ia..] {
            let mut e = AffineExpr::zeros(n_x, n_x);
            for &(pc, ac, bc, gc) in &terms {
                let c = shifted(a, pc);
                for &(pd, ad, bd, gd) in &terms {
                    let d = shifted(b, pd);
                    let (scd, tr) = VarKey::cov(t, &c, &d);
                    let sig = Factor::Var { key: scd, transposed: tr };
                    let adt = Factor::Const(ad.transpose());
                    let bdt = Factor::Const(bd.transpose());
                    let acf = Factor::Const(ac.clone());
                    let bcf = Factor::Const(bc.clone());
                    let l = Factor::var(gain.clone());
                    let lt = Factor::var_t(gain.clone());
                    let v = Factor::var(ff.clone());
                    let vt = Factor::var_t(ff.clone());
                    // M_c Σ[c,d] M_dᵀ
                    add_product(&mut e, 1.0, &[acf.clone(), sig.clone(), adt.clone()], &hat);
                    add_product(&mut e, 1.0, &[bcf.clone(), l.clone(), sig.clone(), adt.clone()], &hat);
                    add_product(&mut e, 1.0, &[acf.clone(), sig.clone(), lt.clone(), bdt.clone()], &hat);
                    add_product(&mut e, 1.0, &[bcf.clone(), l.clone(), sig, lt.clone(), bdt.clone()], &hat);
                    // M_c Σxp[c,d] n_dᵀ
                    let xcd = Factor::var(VarKey::CrossCov { t, a: c.clone(), b: d.clone() });
                    add_product(&mut e, 1.0, &[acf.clone(), xcd.clone(), vt.clone(), bdt.clone()], &hat);
                    add_product(&mut e, 1.0, &[bcf.clone(), l.clone(), xcd, vt.clone(), bdt.clone()], &hat);
                    // n_c Σxp[d,c]ᵀ M_dᵀ
                    let xdc = Factor::var_t(VarKey::CrossCov { t, a: d.clone(), b: c.clone() });
                    add_product(&mut e, 1.0, &[bcf.clone(), v.clone(), xdc.clone(), adt], &hat);
                    add_product(&mut e, 1.0, &[bcf.clone(), v.clone(), xdc, lt, bdt.clone()], &hat);
                    // n_c n_dᵀ Cov(P_c, P_d)
                    add_product(&mut e, params.param_cov(&c, &d)?, &[bcf, v, vt, bdt], &hat);
                    // G_c G_dᵀ E[P_c P_d]
                    if gc.ncols() > 0 {
                        e.constant += (gc * gd.transpose()) * params.joint_moment2(&c, &d)?;
                    }
                }
            }
            out.push(LinearizedEquation {
                output: VarKey::Cov { t: t + 1, a: a.clone(), b: b.clone() },
                expr: e,
            });
        }
        for b in &idx {
            let mut e = AffineExpr::zeros(n_x, 1);
            for &(p, am, bm, _) in &terms {
                let c = shifted(a, p);
                let xcb = VarKey::CrossCov { t, a: c.clone(), b: b.clone() };
                add_product(&mut e, 1.0, &[Factor::Const(am.clone()), Factor::var(xcb.clone())], &hat);
                add_product(
                    &mut e,
                    1.0,
                    &[Factor::Const(bm.clone()), Factor::var(gain.clone()), Factor::var(xcb)],
                    &hat,
                );
                add_product(
                    &mut e,
                    params.param_cov(&c, b)?,
                    &[Factor::Const(bm.clone()), Factor::var(ff.clone())],
                    &hat,
                );
            }
            out.push(LinearizedEquation {
                output: VarKey::CrossCov { t: t + 1, a: a.clone(), b: b.clone() },
                expr: e,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    State,
    Input,
}

/// `expr ≤ 0`, the convexified Cantelli bound of one chance constraint at step `k`.
#[derive(Clone, Debug)]
pub struct LinearizedInequality {
    pub kind: ConstraintKind,
    pub index: usize,
    pub k: usize,
    pub lambda_hat: f64,
    pub expr: AffineExpr,
}

/// Convexified chance constraints for `k = 0..N−1`.
///
/// `√(αᵀΣα)` is replaced by its tangent at `λ̂`, `√λ̂/2 + αᵀΣα/(2√λ̂)`, which
/// never lies below the square root.
pub fn cantelli_constraints(problem: &SteeringProblem, reference: &ReferencePoint) -> Vec<LinearizedInequality> {
    let hat = |k: &VarKey| reference.value(k);
    let e = MultiIndex::empty();
    let mut out = Vec::new();
    for k in 0..problem.horizon {
        let sig_key = VarKey::Cov { t: k, a: e.clone(), b: e.clone() };
        let mu_key = VarKey::Mean { t: k, a: e.clone() };
        let sig_hat = reference.tables[k].state_cov();
        for (index, c) in problem.state_constraints.iter().enumerate() {
            let alpha = c.alpha();
            let lam = (alpha.transpose() * sig_hat * &alpha)[0].max(LAMBDA_FLOOR);
            let cf = c.cantelli_factor();
            let mut expr = AffineExpr::zeros(1, 1);
            expr.constant[(0, 0)] = cf * lam.sqrt() / 2.0 - c.beta;
            let at = DMatrix::from_row_slice(1, alpha.len(), alpha.as_slice());
            let ac = DMatrix::from_column_slice(alpha.len(), 1, alpha.as_slice());
            add_product(
                &mut expr,
                cf / (2.0 * lam.sqrt()),
                &[Factor::Const(at.clone()), Factor::var(sig_key.clone()), Factor::Const(ac)],
                &hat,
            );
            add_product(&mut expr, 1.0, &[Factor::Const(at), Factor::var(mu_key.clone())], &hat);
            out.push(LinearizedInequality {
                kind: ConstraintKind::State,
                index,
                k,
                lambda_hat: lam,
                expr,
            });
        }
        let l_hat = &reference.policy.gains[k];
        for (index, c) in problem.input_constraints.iter().enumerate() {
            let alpha = c.alpha();
            let la = l_hat.transpose() * &alpha;
            let lam = (la.transpose() * sig_hat * &la)[0].max(LAMBDA_FLOOR);
            let cf = c.cantelli_factor();
            let mut expr = AffineExpr::zeros(1, 1);
            expr.constant[(0, 0)] = cf * lam.sqrt() / 2.0 - c.beta;
            let at = DMatrix::from_row_slice(1, alpha.len(), alpha.as_slice());
            let ac = DMatrix::from_column_slice(alpha.len(), 1, alpha.as_slice());
            let gain = VarKey::Gain { k };
            add_product(
                &mut expr,
                cf / (2.0 * lam.sqrt()),
                &[
                    Factor::Const(at.clone()),
                    Factor::var(gain.clone()),
                    Factor::var(sig_key.clone()),
                    Factor::var_t(gain.clone()),
                    Factor::Const(ac),
                ],
                &hat,
            );
            add_product(&mut expr, 1.0, &[Factor::Const(at.clone()), Factor::var(VarKey::Feedforward { k })], &hat);
            add_product(
                &mut expr,
                1.0,
                &[Factor::Const(at), Factor::var(gain), Factor::var(mu_key.clone())],
                &hat,
            );
            out.push(LinearizedInequality {
                kind: ConstraintKind::Input,
                index,
                k,
                lambda_hat: lam,
                expr,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn lin_helpers_match_product_at_hats() {
        assert_eq!(lin2(&s(2.0), &s(3.0), &s(2.0), &s(3.0))[(0, 0)], 6.0);
        let h = 0.25;
        let v = lin3(&s(1.0 + h), &s(2.0), &s(3.0), &s(1.0), &s(2.0), &s(3.0));
        assert_eq!(v[(0, 0)], 6.0 + 6.0 * h);
    }

    #[test]
    fn product_expansion_matches_lin3() {
        // x·y·zᵀ with matrix factors
        let xh = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let yh = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.7]);
        let kx = VarKey::Gain { k: 0 };
        let ky = VarKey::Cov { t: 0, a: MultiIndex::empty(), b: MultiIndex::empty() };
        let hat = |k: &VarKey| if *k == kx { xh.clone() } else { yh.clone() };
        let mut e = AffineExpr::zeros(2, 2);
        add_product(&mut e, 1.0, &[Factor::var(kx.clone()), Factor::var(ky.clone()), Factor::var_t(kx.clone())], &hat);
        let x = DMatrix::from_row_slice(2, 2, &[1.1, 1.9, -0.8, 0.4]);
        let y = DMatrix::from_row_slice(2, 2, &[0.2, 0.15, 0.15, 0.9]);
        let got = e.eval(|k| if *k == kx { x.clone() } else { y.clone() });
        let want = lin3(&x, &y, &x.transpose(), &xh, &yh, &xh.transpose());
        assert!((got - want).amax() < 1e-14);
    }

    #[test]
    fn product_expansion_handles_vectors() {
        // B·v·vᵀ·Bᵀ with v a column
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let vh = s(0.5);
        let kv = VarKey::Feedforward { k: 0 };
        let hat = |_: &VarKey| vh.clone();
        let mut e = AffineExpr::zeros(2, 2);
        add_product(
            &mut e,
            2.0,
            &[Factor::Const(b.clone()), Factor::var(kv.clone()), Factor::var_t(kv.clone()), Factor::Const(b.transpose())],
            &hat,
        );
        let at_hat = e.eval(|_| vh.clone());
        assert!((at_hat - &b * b.transpose() * 0.5).amax() < 1e-15);
        // derivative of 2 v² b bᵀ at v = 0.5 is 2·2·0.5 = 2 per unit v
        let at = e.eval(|_| s(0.6));
        assert!((at - &b * b.transpose() * (0.5 + 0.2)).amax() < 1e-14);
    }
}
