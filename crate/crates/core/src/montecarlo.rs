//! Sampling and enumeration oracles for the closed loop
//! `x_{k+1} = A(p) x_k + B(p) u_k + D(p) w_k`, `u_k = L_k x_k + v_k`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

use crate::linearize::ConstraintKind;
use crate::moments::{MomentError, MomentTable, Policy};
use crate::problem::{NoiseDistribution, SteeringProblem};
use crate::system::{indices_up_to, MultiIndex, ParameterDistribution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("oracle requires a samplable kind (parameter {0} has an explicit moment table)")]
    NotSamplable(usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Moments(#[from] MomentError),
    #[error("enumeration needs {draws} binary draws, budget is {budget}")]
    Budget { draws: usize, budget: usize },
    #[error("enumeration requires two_point {0}")]
    NotTwoPoint(String),
    #[error("enumeration requires a deterministic initial state (sigma0 = 0)")]
    RandomInitialState,
}

pub const ENUMERATION_BUDGET: usize = 24;
pub const MAX_DUMPED_TRAJECTORIES: usize = 1000;
const CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeStats {
    pub time: usize,
    pub mean: DVector<f64>,
    pub mean_se: DVector<f64>,
    /// Unbiased sample covariance.
    pub cov: DMatrix<f64>,
    pub cov_se: DMatrix<f64>,
    /// Column `j` holds the sample mean of `x_t p_j`.
    pub param_mean: DMatrix<f64>,
    pub param_mean_se: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViolationRate {
    pub kind: ConstraintKind,
    pub index: usize,
    pub k: usize,
    pub count: usize,
    pub rate: f64,
    pub delta: f64,
}

impl ViolationRate {
    /// Binomial standard error at the nominal risk `δ`.
    pub fn nominal_se(&self, n: usize) -> f64 {
        (self.delta * (1.0 - self.delta) / n as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationBatch {
    pub n_samples: usize,
    pub seed: u64,
    pub stats: Vec<TimeStats>,
    pub violations: Vec<ViolationRate>,
    /// The first `min(keep, n_samples)` trajectories.
    pub trajectories: Vec<Vec<DVector<f64>>>,
}

/// Symmetric square root of a PSD matrix, negative eigenvalues clamped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(0.5 * (m + m.transpose()));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn draw_param<R: Rng>(d: &ParameterDistribution, rng: &mut R) -> f64 {
    match *d {
        ParameterDistribution::Gaussian { std } => std * rng.sample::<f64, _>(StandardNormal),
        // half-open [lo, hi)
        ParameterDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        ParameterDistribution::TwoPoint { value } => {
            if rng.random::<bool>() {
                value
            } else {
                -value
            }
        }
        ParameterDistribution::Explicit { .. } => unreachable!("checked by the caller"),
    }
}

fn draw_noise<R: Rng>(d: NoiseDistribution, rng: &mut R) -> f64 {
    match d {
        NoiseDistribution::Gaussian => rng.sample(StandardNormal),
        NoiseDistribution::TwoPoint => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
    }
}

struct Sample {
    traj: Vec<DVector<f64>>,
    p: Vec<f64>,
}

struct Sampler<'a> {
    problem: &'a SteeringProblem,
    policy: &'a Policy,
    sqrt0: DMatrix<f64>,
    seed: u64,
}

impl Sampler<'_> {
    /// Sample `i` uses its own ChaCha stream, so results do not depend on how
    /// samples are split across threads.
    fn draw(&self, i: usize) -> Sample {
        let prob = self.problem;
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        let n_x = prob.n_x();
        let z = DVector::from_fn(n_x, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p: Vec<f64> = prob.params.distributions().iter().map(|d| draw_param(d, &mut rng)).collect();
        let (a, b, d) = prob.system.realize(&p);
        let mut x = &prob.mu0 + &self.sqrt0 * z;
        let mut traj = Vec::with_capacity(prob.horizon + 1);
        traj.push(x.clone());
        for k in 0..prob.horizon {
            let u = &self.policy.gains[k] * &x + &self.policy.feedforward[k];
            let w = DVector::from_fn(d.ncols(), |_, _| draw_noise(prob.noise, &mut rng));
            x = &a * &x + &b * u + &d * w;
            traj.push(x.clone());
        }
        Sample { traj, p }
    }
}

/// Sums `f` over fixed-size chunks in parallel and combines the partials in
/// chunk order, so the floating-point result is reproducible.
fn chunked<T: Send>(n: usize, f: impl Fn(std::ops::Range<usize>) -> T + Sync, mut combine: impl FnMut(&mut T, T)) -> T {
    let chunks = n.div_ceil(CHUNK);
    let mut parts: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect();
    let mut acc = parts.remove(0);
    for p in parts {
        combine(&mut acc, p);
    }
    acc
}

fn check_samplable(problem: &SteeringProblem) -> Result<(), OracleError> {
    for (j, d) in problem.params.distributions().iter().enumerate() {
        if !d.is_samplable() {
            return Err(OracleError::NotSamplable(j));
        }
    }
    Ok(())
}

struct FirstPass {
    sx: Vec<DVector<f64>>,
    sxp: Vec<DMatrix<f64>>,
    violations: Vec<usize>,
}

struct SecondPass {
    cc: Vec<DMatrix<f64>>,
    cc2: Vec<DMatrix<f64>>,
    xp2: Vec<DMatrix<f64>>,
}

/// Closed-loop Monte Carlo. `x_0 ~ N(μ_0, Σ_0)`, one parameter draw per
/// sample, i.i.d. noise per step. Violations are strict: `αᵀy > β`.
pub fn simulate(
    problem: &SteeringProblem,
    policy: &Policy,
    n_samples: usize,
    seed: u64,
    keep: usize,
) -> Result<SimulationBatch, OracleError> {
    check_samplable(problem)?;
    if n_samples < 2 {
        return Err(OracleError::TooFewSamples(n_samples));
    }
    policy.check_shape(problem.horizon, problem.n_u(), problem.n_x())?;
    let sampler = Sampler {
        problem,
        policy,
        sqrt0: psd_sqrt(&problem.sigma0),
        seed,
    };
    let (n_x, n_p, horizon) = (problem.n_x(), problem.n_p(), problem.horizon);
    let times = horizon + 1;
    let slots: Vec<(ConstraintKind, usize, usize)> = (0..horizon)
        .flat_map(|k| {
            let s = (0..problem.state_constraints.len()).map(move |i| (ConstraintKind::State, i, k));
            let u = (0..problem.input_constraints.len()).map(move |i| (ConstraintKind::Input, i, k));
            s.chain(u)
        })
        .collect();

    let first = chunked(
        n_samples,
        |range| {
            let mut acc = FirstPass {
                sx: vec![DVector::zeros(n_x); times],
                sxp: vec![DMatrix::zeros(n_x, n_p); times],
                violations: vec![0; slots.len()],
            };
            for i in range {
                let s = sampler.draw(i);
                for (t, x) in s.traj.iter().enumerate() {
                    acc.sx[t] += x;
                    for (j, pj) in s.p.iter().enumerate() {
                        let mut col = acc.sxp[t].column_mut(j);
                        col += x * *pj;
                    }
                }
                for (slot, &(kind, idx, k)) in slots.iter().enumerate() {
                    let x = &s.traj[k];
                    let value = match kind {
                        ConstraintKind::State => {
                            let c = &problem.state_constraints[idx];
                            (c.alpha().dot(x), c.beta)
                        }
                        ConstraintKind::Input => {
                            let c = &problem.input_constraints[idx];
                            let u = &policy.gains[k] * x + &policy.feedforward[k];
                            (c.alpha().dot(&u), c.beta)
                        }
                    };
                    if value.0 > value.1 {
                        acc.violations[slot] += 1;
                    }
                }
            }
            acc
        },
        |a, b| {
            for t in 0..times {
                a.sx[t] += &b.sx[t];
                a.sxp[t] += &b.sxp[t];
            }
            for (x, y) in a.violations.iter_mut().zip(b.violations) {
                *x += y;
            }
        },
    );
    let nf = n_samples as f64;
    let means: Vec<DVector<f64>> = first.sx.iter().map(|s| s / nf).collect();
    let pmeans: Vec<DMatrix<f64>> = first.sxp.iter().map(|s| s / nf).collect();

    let second = chunked(
        n_samples,
        |range| {
            let mut acc = SecondPass {
                cc: vec![DMatrix::zeros(n_x, n_x); times],
                cc2: vec![DMatrix::zeros(n_x, n_x); times],
                xp2: vec![DMatrix::zeros(n_x, n_p); times],
            };
            for i in range {
                let s = sampler.draw(i);
                for (t, x) in s.traj.iter().enumerate() {
                    let c = x - &means[t];
                    let outer = &c * c.transpose();
                    acc.cc2[t] += outer.component_mul(&outer);
                    acc.cc[t] += outer;
                    for (j, pj) in s.p.iter().enumerate() {
                        let d = x * *pj - pmeans[t].column(j);
                        let mut col = acc.xp2[t].column_mut(j);
                        col += d.component_mul(&d);
                    }
                }
            }
            acc
        },
        |a, b| {
            for t in 0..times {
                a.cc[t] += &b.cc[t];
                a.cc2[t] += &b.cc2[t];
                a.xp2[t] += &b.xp2[t];
            }
        },
    );

    let stats = (0..times)
        .map(|t| {
            let cov = &second.cc[t] / (nf - 1.0);
            let biased = &second.cc[t] / nf;
            let fourth = &second.cc2[t] / nf;
            let cov_se = DMatrix::from_fn(n_x, n_x, |i, j| {
                ((fourth[(i, j)] - biased[(i, j)].powi(2)).max(0.0) / nf).sqrt()
            });
            let mean_se = DVector::from_fn(n_x, |i, _| (cov[(i, i)].max(0.0) / nf).sqrt());
            let param_mean_se = second.xp2[t].map(|v| (v / (nf - 1.0) / nf).sqrt());
            TimeStats {
                time: t,
                mean: means[t].clone(),
                mean_se,
                cov,
                cov_se,
                param_mean: pmeans[t].clone(),
                param_mean_se,
            }
        })
        .collect();

    let violations = slots
        .iter()
        .zip(&first.violations)
        .map(|(&(kind, index, k), &count)| {
            let delta = match kind {
                ConstraintKind::State => problem.state_constraints[index].delta,
                ConstraintKind::Input => problem.input_constraints[index].delta,
            };
            ViolationRate {
                kind,
                index,
                k,
                count,
                rate: count as f64 / nf,
                delta,
            }
        })
        .collect();

    let trajectories = (0..keep.min(n_samples).min(MAX_DUMPED_TRAJECTORIES))
        .map(|i| sampler.draw(i).traj)
        .collect();

    Ok(SimulationBatch {
        n_samples,
        seed,
        stats,
        violations,
        trajectories,
    })
}

impl SimulationBatch {
    /// Worst empirical violation rate per constraint, over all steps.
    pub fn worst_violations(&self) -> Vec<&ViolationRate> {
        let mut worst: BTreeMap<(u8, usize), &ViolationRate> = BTreeMap::new();
        for v in &self.violations {
            let key = (matches!(v.kind, ConstraintKind::Input) as u8, v.index);
            let e = worst.entry(key).or_insert(v);
            if v.rate > e.rate {
                *e = v;
            }
        }
        worst.into_values().collect()
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n_x = self.stats.first().map_or(0, |s| s.mean.len());
        writeln!(w, "# covsteer mc-summary v1 samples={} seed={}", self.n_samples, self.seed)?;
        let mut header = vec!["time".to_string()];
        header.extend((0..n_x).map(|i| format!("mean_{i}")));
        for j in 0..n_x {
            for i in 0..=j {
                header.push(format!("cov_{i}_{j}"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for s in &self.stats {
            let mut row = vec![s.time.to_string()];
            row.extend(s.mean.iter().map(|v| format!("{v:e}")));
            for j in 0..n_x {
                for i in 0..=j {
                    row.push(format!("{:e}", s.cov[(i, j)]));
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_violations_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# covsteer mc-violations v1 samples={}", self.n_samples)?;
        writeln!(w, "kind,index,k,count,rate,delta")?;
        for v in &self.violations {
            let kind = match v.kind {
                ConstraintKind::State => "state",
                ConstraintKind::Input => "input",
            };
            writeln!(w, "{kind},{},{},{},{:e},{}", v.index, v.k, v.count, v.rate, v.delta)?;
        }
        Ok(())
    }

    pub fn write_trajectories_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n_x = self.stats.first().map_or(0, |s| s.mean.len());
        writeln!(w, "# covsteer mc-trajectories v1")?;
        let cols: Vec<String> = (0..n_x).map(|i| format!("x_{i}")).collect();
        writeln!(w, "sample,time,{}", cols.join(","))?;
        for (s, traj) in self.trajectories.iter().enumerate() {
            for (t, x) in traj.iter().enumerate() {
                let vals: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
                writeln!(w, "{s},{t},{}", vals.join(","))?;
            }
        }
        Ok(())
    }
}

/// `count` points on the `scale`-sigma ellipse of a 2×2 covariance.
pub fn covariance_ellipse(center: [f64; 2], cov: &DMatrix<f64>, scale: f64, count: usize) -> Vec<[f64; 2]> {
    let root = psd_sqrt(cov);
    (0..count)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let (s, c) = th.sin_cos();
            [
                center[0] + scale * (root[(0, 0)] * c + root[(0, 1)] * s),
                center[1] + scale * (root[(1, 0)] * c + root[(1, 1)] * s),
            ]
        })
        .collect()
}

/// Exact moment tables by exhaustive enumeration of every `±` outcome of the
/// parameters and the noise, for two-point laws and a deterministic `x_0`.
///
/// The tables carry the same index sets as the propagated ones.
pub fn enumerate_exact(problem: &SteeringProblem, policy: &Policy) -> Result<Vec<MomentTable>, OracleError> {
    let mut values = Vec::new();
    for (j, d) in problem.params.distributions().iter().enumerate() {
        match d {
            ParameterDistribution::TwoPoint { value } => values.push(*value),
            _ => return Err(OracleError::NotTwoPoint(format!("parameter {j}"))),
        }
    }
    let (n_x, n_w, n_p, horizon) = (problem.n_x(), problem.system.n_w(), problem.n_p(), problem.horizon);
    if n_w > 0 && problem.noise != NoiseDistribution::TwoPoint {
        return Err(OracleError::NotTwoPoint("noise".into()));
    }
    if problem.sigma0.iter().any(|&v| v != 0.0) {
        return Err(OracleError::RandomInitialState);
    }
    let draws = n_p + horizon * n_w;
    if draws > ENUMERATION_BUDGET {
        return Err(OracleError::Budget {
            draws,
            budget: ENUMERATION_BUDGET,
        });
    }
    policy.check_shape(horizon, problem.n_u(), n_x)?;

    let sets: Vec<(Vec<MultiIndex>, Vec<MultiIndex>)> = (0..=horizon)
        .map(|t| {
            let order = horizon - t;
            (indices_up_to(n_p, order), indices_up_to(n_p, order.max(1)))
        })
        .collect();
    let weight = 0.5f64.powi(draws as i32);

    // raw sums: E[xPa], E[xPa (xPb)ᵀ], E[xPa Pb], E[Pb]
    struct Raw {
        x: BTreeMap<MultiIndex, DVector<f64>>,
        xx: BTreeMap<(MultiIndex, MultiIndex), DMatrix<f64>>,
        xp: BTreeMap<(MultiIndex, MultiIndex), DVector<f64>>,
        p: BTreeMap<MultiIndex, f64>,
    }
    let mut raw: Vec<Raw> = sets
        .iter()
        .map(|(idx, idx_p)| Raw {
            x: idx.iter().map(|a| (a.clone(), DVector::zeros(n_x))).collect(),
            xx: idx
                .iter()
                .flat_map(|a| idx.iter().map(move |b| ((a.clone(), b.clone()), DMatrix::zeros(n_x, n_x))))
                .collect(),
            xp: idx
                .iter()
                .flat_map(|a| idx_p.iter().map(move |b| ((a.clone(), b.clone()), DVector::zeros(n_x))))
                .collect(),
            p: idx_p.iter().map(|b| (b.clone(), 0.0)).collect(),
        })
        .collect();

    let product = |a: &MultiIndex, p: &[f64]| a.indices().iter().map(|&j| p[j]).product::<f64>();
    for outcome in 0u64..(1u64 << draws) {
        let bit = |i: usize| if outcome >> i & 1 == 1 { 1.0 } else { -1.0 };
        let p: Vec<f64> = (0..n_p).map(|j| bit(j) * values[j]).collect();
        let (a, b, d) = problem.system.realize(&p);
        let mut x = problem.mu0.clone();
        for t in 0..=horizon {
            let r = &mut raw[t];
            let (idx, idx_p) = &sets[t];
            let pa: Vec<f64> = idx.iter().map(|m| product(m, &p)).collect();
            for (ia, ma) in idx.iter().enumerate() {
                let xa = &x * pa[ia];
                *r.x.get_mut(ma).unwrap() += &xa * weight;
                for (ib, mb) in idx.iter().enumerate() {
                    *r.xx.get_mut(&(ma.clone(), mb.clone())).unwrap() += &xa * (&x * pa[ib]).transpose() * weight;
                }
                for mb in idx_p {
                    *r.xp.get_mut(&(ma.clone(), mb.clone())).unwrap() += &xa * (product(mb, &p) * weight);
                }
            }
            for mb in idx_p {
                *r.p.get_mut(mb).unwrap() += product(mb, &p) * weight;
            }
            if t < horizon {
                let u = &policy.gains[t] * &x + &policy.feedforward[t];
                let w = DVector::from_fn(n_w, |i, _| bit(n_p + t * n_w + i));
                x = &a * &x + &b * u + &d * w;
            }
        }
    }

    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(t, r)| {
            let order = horizon - t;
            let xx = r
                .xx
                .iter()
                .map(|((a, b), m)| ((a.clone(), b.clone()), m - &r.x[a] * r.x[b].transpose()))
                .collect();
            let xp = r
                .xp
                .iter()
                .map(|((a, b), v)| ((a.clone(), b.clone()), v - &r.x[a] * r.p[b]))
                .collect();
            MomentTable {
                time: t,
                max_order: order,
                xp_order: order.max(1),
                mean: r.x,
                xx,
                xp,
            }
        })
        .collect())
}
