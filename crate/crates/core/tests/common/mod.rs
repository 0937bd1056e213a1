//! Reference computations shared by the integration tests. Nothing here calls
//! into the moment engine; the oracles rebuild every quantity from sampled or
//! enumerated trajectories, or from plain LTI algebra.

#![allow(dead_code)]

use covsteer::moments::{MomentTable, Policy};
use covsteer::problem::{NoiseDistribution, SteeringProblem};
use covsteer::system::{MultiIndex, ParameterDistribution, UncertainSystem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..=scale))
}

pub fn uniform_vector(rng: &mut impl Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..=scale))
}

pub fn random_policy(rng: &mut impl Rng, horizon: usize, n_u: usize, n_x: usize, gain: f64, ff: f64) -> Policy {
    Policy {
        gains: (0..horizon).map(|_| uniform_matrix(rng, n_u, n_x, gain)).collect(),
        feedforward: (0..horizon).map(|_| uniform_vector(rng, n_u, ff)).collect(),
    }
}

/// Small random system with two-point parameters and noise and a
/// deterministic initial state.
pub fn random_two_point_problem(rng: &mut impl Rng) -> SteeringProblem {
    let n_x = rng.random_range(1..=2);
    let n_u = rng.random_range(1..=2);
    let n_p = rng.random_range(1..=2);
    let n_w = rng.random_range(0..=2);
    let horizon = rng.random_range(1..=4);
    let a = DMatrix::identity(n_x, n_x) * 0.5 + uniform_matrix(rng, n_x, n_x, 0.5);
    let b = uniform_matrix(rng, n_x, n_u, 1.0);
    let d = uniform_matrix(rng, n_x, n_w, 0.5);
    let at = (0..n_p).map(|_| uniform_matrix(rng, n_x, n_x, 0.4)).collect();
    let bt = (0..n_p).map(|_| uniform_matrix(rng, n_x, n_u, 0.4)).collect();
    let dt = (0..n_p).map(|_| uniform_matrix(rng, n_x, n_w, 0.3)).collect();
    let sys = UncertainSystem::new(a, b, d, at, bt, dt).unwrap();
    let dists = (0..n_p)
        .map(|_| ParameterDistribution::TwoPoint {
            value: rng.random_range(0.5..1.5),
        })
        .collect();
    let mut prob = SteeringProblem::new(
        sys,
        dists,
        horizon,
        uniform_vector(rng, n_x, 1.0),
        DMatrix::zeros(n_x, n_x),
        DVector::zeros(n_x),
        DMatrix::identity(n_x, n_x),
    )
    .unwrap();
    prob.noise = NoiseDistribution::TwoPoint;
    prob
}

fn two_point_values(problem: &SteeringProblem) -> Vec<f64> {
    problem
        .params
        .distributions()
        .iter()
        .map(|d| match d {
            ParameterDistribution::TwoPoint { value } => *value,
            other => panic!("enumeration needs two-point parameters, got {other:?}"),
        })
        .collect()
}

/// Every equally likely outcome: the parameter vector and the trajectory
/// `x_0..x_N` under `policy`.
pub fn enumerate_outcomes(problem: &SteeringProblem, policy: &Policy) -> Vec<(Vec<f64>, Vec<DVector<f64>>)> {
    let values = two_point_values(problem);
    let sys = &problem.system;
    let (n_p, n_w, horizon) = (values.len(), sys.n_w(), problem.horizon);
    let draws = n_p + horizon * n_w;
    let mut out = Vec::with_capacity(1 << draws);
    for outcome in 0u32..(1u32 << draws) {
        let sign = |i: usize| if outcome & (1 << i) != 0 { 1.0 } else { -1.0 };
        let p: Vec<f64> = (0..n_p).map(|j| sign(j) * values[j]).collect();
        let mut a = sys.a_bar.clone();
        let mut b = sys.b_bar.clone();
        let mut d = sys.d_bar.clone();
        for j in 0..n_p {
            a += &sys.a_tilde[j] * p[j];
            b += &sys.b_tilde[j] * p[j];
            d += &sys.d_tilde[j] * p[j];
        }
        let mut traj = vec![problem.mu0.clone()];
        for k in 0..horizon {
            let x = &traj[k];
            let u = &policy.gains[k] * x + &policy.feedforward[k];
            let w = DVector::from_fn(n_w, |i, _| sign(n_p + k * n_w + i));
            traj.push(&a * x + &b * u + &d * w);
        }
        out.push((p, traj));
    }
    out
}

fn prod(a: &MultiIndex, p: &[f64]) -> f64 {
    a.indices().iter().map(|&j| p[j]).product()
}

/// Largest gap between the engine tables and the enumerated expectations over
/// every stored entry.
pub fn max_table_error(problem: &SteeringProblem, policy: &Policy, tables: &[MomentTable]) -> f64 {
    let outcomes = enumerate_outcomes(problem, policy);
    let w = 1.0 / outcomes.len() as f64;
    let expect_vec = |t: usize, f: &dyn Fn(&[f64]) -> f64| -> DVector<f64> {
        let n_x = problem.n_x();
        let mut acc = DVector::zeros(n_x);
        for (p, traj) in &outcomes {
            acc += &traj[t] * (f(p) * w);
        }
        acc
    };
    let mut worst = 0.0f64;
    for (t, table) in tables.iter().enumerate() {
        for (a, m) in &table.mean {
            let e = expect_vec(t, &|p| prod(a, p));
            worst = worst.max((m - e).amax());
        }
        for ((a, b), m) in &table.xx {
            let mut second = DMatrix::zeros(problem.n_x(), problem.n_x());
            for (p, traj) in &outcomes {
                second += &traj[t] * traj[t].transpose() * (prod(a, p) * prod(b, p) * w);
            }
            let ma = expect_vec(t, &|p| prod(a, p));
            let mb = expect_vec(t, &|p| prod(b, p));
            worst = worst.max((m - (second - ma * mb.transpose())).amax());
        }
        for ((a, b), v) in &table.xp {
            let cross = expect_vec(t, &|p| prod(a, p) * prod(b, p));
            let ma = expect_vec(t, &|p| prod(a, p));
            let pb: f64 = outcomes.iter().map(|(p, _)| prod(b, p) * w).sum();
            worst = worst.max((v - (cross - ma * pb)).amax());
        }
    }
    worst
}

/// Mean and covariance of `x_{k+1} = A x_k + B(L_k x_k + v_k) + D w_k` for a
/// time-invariant system with white unit noise.
pub fn lti_propagate(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
    mu0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    policy: &Policy,
) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let mut out = vec![(mu0.clone(), sigma0.clone())];
    for k in 0..policy.gains.len() {
        let (mu, sig) = out.last().unwrap();
        let m = a + b * &policy.gains[k];
        let mu_next = &m * mu + b * &policy.feedforward[k];
        let sig_next = &m * sig * m.transpose() + d * d.transpose();
        out.push((mu_next, sig_next));
    }
    out
}

/// `cf·√(αᵀΣα) + αᵀμ − β`, the Cantelli surrogate of `Pr(αᵀy ≤ β) ≥ 1 − δ`.
pub fn cantelli_value(alpha: &DVector<f64>, beta: f64, delta: f64, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let cf = ((1.0 - delta) / delta).sqrt();
    cf * alpha.dot(&(cov * alpha)).sqrt() + alpha.dot(mean) - beta
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.max()
}
