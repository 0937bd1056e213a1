//! Exact forward propagation of the mixed state/parameter moment hierarchy.
//!
//! With `Pₐ = ∏_{j∈a} pⱼ`, the closed loop gives
//! `x_{t+1}Pₐ = Σ_c (M_c x_t P_c + n_c P_c + G_c w_t P_c)` where `c` ranges over
//! `a` (nominal term) and `a ∪ {j}` (the `pⱼ` term), `M_c = A_c + B_c L`,
//! `n_c = B_c v` and `G_c = D_c`. Taking means and covariances of this
//! identity yields the recursions below. Order `ℓ` at time `t + 1` consumes
//! order `ℓ + 1` at time `t`, so time `t` keeps orders up to `N − t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::problem::{min_eigenvalue, ProblemError, SteeringProblem};
use crate::system::{indices_up_to, MultiIndex, ParameterSet, SystemError, UncertainSystem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("hierarchy underfilled: {0} missing")]
    HierarchyUnderfilled(String),
    #[error("numerical symmetry breach at t={time}: asymmetry {asymmetry:.3e}")]
    SymmetryBreach { time: usize, asymmetry: f64 },
    #[error("policy shape: {0}")]
    PolicyShape(String),
}

pub type PairKey = (MultiIndex, MultiIndex);

/// Moments of `x_t` at one time step.
///
/// `xx[(a, b)] = Cov(x Pₐ, x P_b)` is stored for both orderings of every pair;
/// `xp[(a, b)] = Cov(x Pₐ, P_b)`. The recursion for `xp` never lowers the order
/// of `b`, so `b` is kept up to `xp_order = max(max_order, 1)`, which exposes
/// `Cov(x_N, pⱼ)` at the final time.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTable {
    pub time: usize,
    pub max_order: usize,
    pub xp_order: usize,
    pub mean: BTreeMap<MultiIndex, DVector<f64>>,
    pub xx: BTreeMap<PairKey, DMatrix<f64>>,
    pub xp: BTreeMap<PairKey, DVector<f64>>,
}

impl MomentTable {
    pub fn mean(&self, a: &MultiIndex) -> Result<&DVector<f64>, MomentError> {
        self.mean
            .get(a)
            .ok_or_else(|| MomentError::HierarchyUnderfilled(format!("mean{a} at t={}", self.time)))
    }

    pub fn xx(&self, a: &MultiIndex, b: &MultiIndex) -> Result<&DMatrix<f64>, MomentError> {
        self.xx.get(&(a.clone(), b.clone())).ok_or_else(|| {
            MomentError::HierarchyUnderfilled(format!("xx{a}{b} at t={}", self.time))
        })
    }

    pub fn xp(&self, a: &MultiIndex, b: &MultiIndex) -> Result<&DVector<f64>, MomentError> {
        self.xp.get(&(a.clone(), b.clone())).ok_or_else(|| {
            MomentError::HierarchyUnderfilled(format!("xp{a}{b} at t={}", self.time))
        })
    }

    /// `μ[x_t]`
    pub fn state_mean(&self) -> &DVector<f64> {
        &self.mean[&MultiIndex::empty()]
    }

    /// `Σ[x_t, x_t]`
    pub fn state_cov(&self) -> &DMatrix<f64> {
        &self.xx[&(MultiIndex::empty(), MultiIndex::empty())]
    }

    /// Multi-indices present at this time, by order.
    pub fn indices(&self) -> Vec<MultiIndex> {
        let mut v: Vec<_> = self.mean.keys().cloned().collect();
        v.sort_by(|a, b| a.order().cmp(&b.order()).then(a.cmp(b)));
        v
    }

    pub fn to_json(&self) -> serde_json::Value {
        let row_major = |m: &DMatrix<f64>| -> Vec<f64> {
            (0..m.nrows())
                .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
                .collect()
        };
        serde_json::json!({
            "time": self.time,
            "max_order": self.max_order,
            "xp_order": self.xp_order,
            "mean": self.mean.iter().map(|(a, v)| serde_json::json!({
                "index": a, "value": v.as_slice()
            })).collect::<Vec<_>>(),
            "xx": self.xx.iter().map(|((a, b), m)| serde_json::json!({
                "a": a, "b": b, "rows": m.nrows(), "cols": m.ncols(), "values": row_major(m)
            })).collect::<Vec<_>>(),
            "xp": self.xp.iter().map(|((a, b), v)| serde_json::json!({
                "a": a, "b": b, "value": v.as_slice()
            })).collect::<Vec<_>>(),
        })
    }
}

/// Affine state feedback `u_k = L_k x_k + v_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolicyFile", try_from = "PolicyFile")]
pub struct Policy {
    pub gains: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
}

/// On-disk layout: `{"L": [N × n_u × n_x rows], "v": [N × n_u]}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(rename = "L")]
    l: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<f64>>,
}

impl From<Policy> for PolicyFile {
    fn from(p: Policy) -> Self {
        Self {
            l: p
                .gains
                .iter()
                .map(|g| (0..g.nrows()).map(|i| g.row(i).iter().copied().collect()).collect())
                .collect(),
            v: p.feedforward.iter().map(|v| v.as_slice().to_vec()).collect(),
        }
    }
}

impl TryFrom<PolicyFile> for Policy {
    type Error = String;

    fn try_from(f: PolicyFile) -> Result<Self, String> {
        if f.l.len() != f.v.len() {
            return Err(format!("L has {} steps but v has {}", f.l.len(), f.v.len()));
        }
        let mut gains = Vec::with_capacity(f.l.len());
        for (k, rows) in f.l.iter().enumerate() {
            let n_u = rows.len();
            let n_x = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != n_x) {
                return Err(format!("L[{k}] is ragged"));
            }
            if n_u != f.v[k].len() {
                return Err(format!("L[{k}] has {n_u} rows but v[{k}] has {}", f.v[k].len()));
            }
            gains.push(DMatrix::from_fn(n_u, n_x, |i, j| rows[i][j]));
        }
        let feedforward = f.v.into_iter().map(DVector::from_vec).collect();
        Ok(Policy { gains, feedforward })
    }
}

impl Policy {
    pub fn zeros(horizon: usize, n_u: usize, n_x: usize) -> Self {
        Self {
            gains: vec![DMatrix::zeros(n_u, n_x); horizon],
            feedforward: vec![DVector::zeros(n_u); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    /// `Σ_k ‖v_k − v̂_k‖₂ + ‖vec(L_k − L̂_k)‖₂`
    pub fn distance(&self, other: &Policy) -> f64 {
        self.gains
            .iter()
            .zip(&other.gains)
            .map(|(a, b)| (a - b).norm())
            .chain(self.feedforward.iter().zip(&other.feedforward).map(|(a, b)| (a - b).norm()))
            .sum()
    }

    pub fn check_shape(&self, horizon: usize, n_u: usize, n_x: usize) -> Result<(), MomentError> {
        if self.gains.len() != horizon || self.feedforward.len() != horizon {
            return Err(MomentError::PolicyShape(format!(
                "expected {horizon} steps, got {} gains and {} feedforwards",
                self.gains.len(),
                self.feedforward.len()
            )));
        }
        for k in 0..horizon {
            let g = &self.gains[k];
            if g.nrows() != n_u || g.ncols() != n_x {
                return Err(MomentError::PolicyShape(format!(
                    "L[{k}] is {}x{}, expected {n_u}x{n_x}",
                    g.nrows(),
                    g.ncols()
                )));
            }
            if self.feedforward[k].len() != n_u {
                return Err(MomentError::PolicyShape(format!(
                    "v[{k}] has length {}, expected {n_u}",
                    self.feedforward[k].len()
                )));
            }
        }
        Ok(())
    }
}

/// Moments at `t = 0` for orders `0..=N`.
pub fn init_table(problem: &SteeringProblem) -> Result<MomentTable, MomentError> {
    let s0 = &problem.sigma0;
    let asym = (s0 - s0.transpose()).amax();
    if asym > 1e-12 {
        return Err(ProblemError::InitialCovariance(format!("asymmetry {asym:.3e}")).into());
    }
    if min_eigenvalue(s0) < -1e-10 {
        return Err(ProblemError::InitialCovariance("negative eigenvalue".into()).into());
    }
    init_table_with(
        &problem.params,
        problem.n_p(),
        problem.horizon,
        &problem.mu0,
        &problem.sigma0,
    )
}

/// Moments of `x₀ ~ (μ₀, Σ₀)` independent of the parameters, for orders `0..=max_order`.
pub fn init_table_with(
    params: &ParameterSet,
    n_p: usize,
    max_order: usize,
    mu0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
) -> Result<MomentTable, MomentError> {
    let idx = indices_up_to(n_p, max_order);
    let xp_order = max_order.max(1);
    let idx_p = indices_up_to(n_p, xp_order);
    let mm = mu0 * mu0.transpose();
    let second = sigma0 + &mm;
    let mut mean = BTreeMap::new();
    let mut xx = BTreeMap::new();
    let mut xp = BTreeMap::new();
    for a in &idx {
        let ea = params.joint_moment(a)?;
        mean.insert(a.clone(), mu0 * ea);
        for b in &idx {
            let eb = params.joint_moment(b)?;
            let eab = params.joint_moment2(a, b)?;
            xx.insert((a.clone(), b.clone()), &second * eab - &mm * (ea * eb));
        }
        for b in &idx_p {
            xp.insert((a.clone(), b.clone()), mu0 * params.param_cov(a, b)?);
        }
    }
    Ok(MomentTable {
        time: 0,
        max_order,
        xp_order,
        mean,
        xx,
        xp,
    })
}

/// Closed-loop pieces of one term of the dynamics.
pub(crate) struct ClosedTerm<'a> {
    pub param: Option<usize>,
    pub m: DMatrix<f64>,
    pub n: DVector<f64>,
    pub g: &'a DMatrix<f64>,
}

pub(crate) fn closed_terms<'a>(
    sys: &'a UncertainSystem,
    gain: &DMatrix<f64>,
    ff: &DVector<f64>,
) -> Vec<ClosedTerm<'a>> {
    sys.terms()
        .map(|t| ClosedTerm {
            param: t.param,
            m: t.a + t.b * gain,
            n: t.b * ff,
            g: t.d,
        })
        .collect()
}

/// Index `c` that term `param` contributes to target `a`.
pub(crate) fn shifted(a: &MultiIndex, param: Option<usize>) -> MultiIndex {
    match param {
        None => a.clone(),
        Some(j) => a.with(j),
    }
}

fn next_indices(table: &MomentTable, n_p: usize) -> Result<Vec<MultiIndex>, MomentError> {
    if table.max_order == 0 {
        return Err(MomentError::HierarchyUnderfilled(format!(
            "order 1 at t={} (cannot step past the horizon)",
            table.time
        )));
    }
    Ok(indices_up_to(n_p, table.max_order - 1))
}

/// `μ_{t+1}[a] = Σ_c M_c μ_t[c] + n_c E[P_c]`.
pub fn step_mean(
    table: &MomentTable,
    gain: &DMatrix<f64>,
    ff: &DVector<f64>,
    params: &ParameterSet,
    sys: &UncertainSystem,
) -> Result<BTreeMap<MultiIndex, DVector<f64>>, MomentError> {
    let terms = closed_terms(sys, gain, ff);
    let mut out = BTreeMap::new();
    for a in next_indices(table, sys.n_p())? {
        let mut acc = DVector::zeros(sys.n_x());
        for t in &terms {
            let c = shifted(&a, t.param);
            acc += &t.m * table.mean(&c)?;
            acc += &t.n * params.joint_moment(&c)?;
        }
        out.insert(a, acc);
    }
    Ok(out)
}

type CovMaps = (BTreeMap<PairKey, DMatrix<f64>>, BTreeMap<PairKey, DVector<f64>>);

/// Covariance families at `t + 1`:
///
/// ```text
/// Σ'[a,b] = Σ_{c,d} M_c Σ[c,d] M_dᵀ + M_c Σxp[c,d] n_dᵀ + n_c Σxp[d,c]ᵀ M_dᵀ
///                 + n_c n_dᵀ Cov(P_c,P_d) + G_c G_dᵀ E[P_c P_d]
/// Σxp'[a,b] = Σ_c M_c Σxp[c,b] + n_c Cov(P_c,P_b)
/// ```
pub fn step_cov(
    table: &MomentTable,
    gain: &DMatrix<f64>,
    ff: &DVector<f64>,
    params: &ParameterSet,
    sys: &UncertainSystem,
) -> Result<CovMaps, MomentError> {
    let terms = closed_terms(sys, gain, ff);
    let idx = next_indices(table, sys.n_p())?;
    let idx_p = indices_up_to(sys.n_p(), (table.max_order - 1).max(1));
    let n_x = sys.n_x();
    let time = table.time + 1;
    let mut xx = BTreeMap::new();
    let mut xp = BTreeMap::new();

    for (ia, a) in idx.iter().enumerate() {
        for b in &idx[ia..] {
            let mut acc = DMatrix::zeros(n_x, n_x);
            for tc in &terms {
                let c = shifted(a, tc.param);
                for td in &terms {
                    let d = shifted(b, td.param);
                    acc += &tc.m * table.xx(&c, &d)? * td.m.transpose();
                    let xp_cd = table.xp(&c, &d)?;
                    let xp_dc = table.xp(&d, &c)?;
                    acc += (&tc.m * xp_cd) * td.n.transpose();
                    acc += &tc.n * (&td.m * xp_dc).transpose();
                    let pc = params.param_cov(&c, &d)?;
                    if pc != 0.0 {
                        acc += (&tc.n * td.n.transpose()) * pc;
                    }
                    if tc.g.ncols() > 0 {
                        let e = params.joint_moment2(&c, &d)?;
                        if e != 0.0 {
                            acc += (tc.g * td.g.transpose()) * e;
                        }
                    }
                }
            }
            if a == b {
                let asym = (&acc - acc.transpose()).amax();
                if asym > 1e-9 * acc.amax().max(1.0) {
                    return Err(MomentError::SymmetryBreach { time, asymmetry: asym });
                }
                let sym = (&acc + acc.transpose()) * 0.5;
                xx.insert((a.clone(), a.clone()), sym);
            } else {
                xx.insert((b.clone(), a.clone()), acc.transpose());
                xx.insert((a.clone(), b.clone()), acc);
            }
        }
        for b in &idx_p {
            let mut acc = DVector::zeros(n_x);
            for tc in &terms {
                let c = shifted(a, tc.param);
                acc += &tc.m * table.xp(&c, b)?;
                let pc = params.param_cov(&c, b)?;
                if pc != 0.0 {
                    acc += &tc.n * pc;
                }
            }
            xp.insert((a.clone(), b.clone()), acc);
        }
    }
    Ok((xx, xp))
}

/// One full step of the hierarchy.
pub fn step(
    table: &MomentTable,
    gain: &DMatrix<f64>,
    ff: &DVector<f64>,
    params: &ParameterSet,
    sys: &UncertainSystem,
) -> Result<MomentTable, MomentError> {
    let mean = step_mean(table, gain, ff, params, sys)?;
    let (xx, xp) = step_cov(table, gain, ff, params, sys)?;
    Ok(MomentTable {
        time: table.time + 1,
        max_order: table.max_order - 1,
        xp_order: (table.max_order - 1).max(1),
        mean,
        xx,
        xp,
    })
}

/// Tables for `t = 0..=N` under `policy`.
pub fn propagate(problem: &SteeringProblem, policy: &Policy) -> Result<Vec<MomentTable>, MomentError> {
    policy.check_shape(problem.horizon, problem.n_u(), problem.n_x())?;
    let mut tables = Vec::with_capacity(problem.horizon + 1);
    tables.push(init_table(problem)?);
    for k in 0..problem.horizon {
        let next = step(
            &tables[k],
            &policy.gains[k],
            &policy.feedforward[k],
            &problem.params,
            &problem.system,
        )?;
        tables.push(next);
    }
    Ok(tables)
}

/// `Σ_k μᵀQμ + (v + Lμ)ᵀR(v + Lμ) + tr(ΣQ) + tr(LΣLᵀR)`.
pub fn expected_cost(problem: &SteeringProblem, tables: &[MomentTable], policy: &Policy) -> f64 {
    let (q, r) = (&problem.q, &problem.r);
    (0..problem.horizon)
        .map(|k| {
            let mu = tables[k].state_mean();
            let sig = tables[k].state_cov();
            let l = &policy.gains[k];
            let u = &policy.feedforward[k] + l * mu;
            (mu.transpose() * q * mu)[0]
                + (u.transpose() * r * &u)[0]
                + (sig * q).trace()
                + (l * sig * l.transpose() * r).trace()
        })
        .sum()
}

/// JSON dump of a moment trajectory.
pub fn tables_to_json(tables: &[MomentTable]) -> serde_json::Value {
    serde_json::Value::Array(tables.iter().map(MomentTable::to_json).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::ParameterDistribution;

    /// Ā=1, Ã=1, B=0, D̄=1, p and w are ±1, x₀=1.
    fn scalar_fixture(horizon: usize) -> SteeringProblem {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = UncertainSystem::new(
            one.clone(),
            DMatrix::zeros(1, 1),
            one.clone(),
            vec![one],
            vec![DMatrix::zeros(1, 1)],
            vec![DMatrix::zeros(1, 1)],
        )
        .unwrap();
        SteeringProblem::new(
            sys,
            vec![ParameterDistribution::TwoPoint { value: 1.0 }],
            horizon,
            DVector::from_element(1, 1.0),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn scalar_fixture_matches_hand_enumeration() {
        // outcomes: x1 = x0 + p x0 + w0 = 1 + p + w0, x2 = (1+p) x1 + w1
        let mut ex2 = 0.0;
        let mut ex2sq = 0.0;
        let mut ex2p = 0.0;
        for p in [-1.0, 1.0] {
            for w0 in [-1.0, 1.0] {
                for w1 in [-1.0, 1.0] {
                    let x1 = 1.0 + p + w0;
                    let x2: f64 = (1.0 + p) * x1 + w1;
                    ex2 += x2 / 8.0;
                    ex2sq += x2 * x2 / 8.0;
                    ex2p += x2 * p / 8.0;
                }
            }
        }
        let prob = scalar_fixture(2);
        let tables = propagate(&prob, &Policy::zeros(2, 1, 1)).unwrap();
        let e = MultiIndex::empty();
        let p = MultiIndex::new([0]);
        assert!((tables[1].state_mean()[0] - 1.0).abs() < 1e-12);
        assert!((tables[1].mean(&p).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!((tables[1].state_cov()[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((tables[2].state_mean()[0] - ex2).abs() < 1e-12);
        assert!((tables[2].state_cov()[(0, 0)] - (ex2sq - ex2 * ex2)).abs() < 1e-12);
        assert!((tables[2].xp(&e, &p).unwrap()[0] - ex2p).abs() < 1e-12);
        assert_eq!(ex2, 2.0);
        assert_eq!(ex2sq - ex2 * ex2, 7.0);
        assert_eq!(ex2p, 2.0);
    }

    #[test]
    fn triangular_schedule() {
        let prob = scalar_fixture(3);
        let tables = propagate(&prob, &Policy::zeros(3, 1, 1)).unwrap();
        for (t, tab) in tables.iter().enumerate() {
            assert_eq!(tab.max_order, 3 - t);
            assert_eq!(tab.mean.len(), 4 - t);
            assert_eq!(tab.xx.len(), (4 - t) * (4 - t));
        }
        assert!(step(&tables[3], &DMatrix::zeros(1, 1), &DVector::zeros(1), &prob.params, &prob.system).is_err());
    }

    #[test]
    fn zero_horizon_returns_initial_table() {
        let prob = scalar_fixture(0);
        let tables = propagate(&prob, &Policy::zeros(0, 1, 1)).unwrap();
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].state_cov()[(0, 0)], 0.0);
        assert_eq!(tables[0].state_mean()[0], 1.0);
    }

    #[test]
    fn policy_json_roundtrip() {
        let mut p = Policy::zeros(2, 2, 3);
        p.gains[1][(1, 2)] = 0.5;
        p.feedforward[0][1] = -2.0;
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.starts_with("{\"L\":[[[0.0,0.0,0.0],[0.0,0.0,0.0]]"));
        let back: Policy = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<Policy>("{\"L\":[[[1.0]]],\"v\":[]}").is_err());
    }

    #[test]
    fn policy_shape_is_checked() {
        let prob = scalar_fixture(2);
        let err = propagate(&prob, &Policy::zeros(1, 1, 1)).unwrap_err();
        assert!(matches!(err, MomentError::PolicyShape(_)));
    }
}
