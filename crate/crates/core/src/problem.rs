//! Problem data for finite-horizon covariance steering.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::system::{ParameterDistribution, ParameterSet, SystemError, UncertainSystem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("{block}: expected {expected}, got {got}")]
    Shape {
        block: String,
        expected: String,
        got: String,
    },
    #[error("invalid initial covariance: {0}")]
    InitialCovariance(String),
    #[error("{0} must be symmetric positive definite")]
    NotPositiveDefinite(String),
    #[error("{0} must be symmetric positive semidefinite")]
    NotPositiveSemidefinite(String),
    #[error("{block}[{index}]: {reason}")]
    Constraint {
        block: String,
        index: usize,
        reason: String,
    },
    #[error("expected {expected} parameter distributions, got {got}")]
    ParameterCount { expected: usize, got: usize },
    #[error("offset_state {index} is out of range or not an invariant unit state")]
    OffsetState { index: usize },
}

/// `Pr(αᵀy ≤ β) ≥ 1 − δ` for `y` the state or the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceConstraint {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub delta: f64,
}

impl ChanceConstraint {
    pub fn new(alpha: Vec<f64>, beta: f64, delta: f64) -> Self {
        Self { alpha, beta, delta }
    }

    pub fn alpha(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.alpha)
    }

    /// `√((1−δ)/δ)`
    pub fn cantelli_factor(&self) -> f64 {
        ((1.0 - self.delta) / self.delta).sqrt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    Equality,
    /// `Σ[x_N, x_N] ⪯ Σ_F`
    #[default]
    PsdInequality,
}

/// Law of each component of `w_k`: zero mean, unit variance, i.i.d. over
/// components and steps. Only the samplers care which one it is.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
    /// `±1` with probability ½ each.
    TwoPoint,
}

#[derive(Clone, Debug)]
pub struct SteeringProblem {
    pub system: UncertainSystem,
    pub params: ParameterSet,
    pub horizon: usize,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub mu_f: DVector<f64>,
    pub sigma_f: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub state_constraints: Vec<ChanceConstraint>,
    pub input_constraints: Vec<ChanceConstraint>,
    pub terminal_mode: TerminalMode,
    pub noise: NoiseDistribution,
    /// A state held at the constant 1 to carry affine terms. It gets no
    /// feedback, no cost, and is left out of the terminal covariance target.
    pub offset_state: Option<usize>,
}

impl SteeringProblem {
    /// Problem with default weights `Q = 10⁻²I`, `R = 10⁻¹I` and no chance constraints.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        system: UncertainSystem,
        dists: Vec<ParameterDistribution>,
        horizon: usize,
        mu0: DVector<f64>,
        sigma0: DMatrix<f64>,
        mu_f: DVector<f64>,
        sigma_f: DMatrix<f64>,
    ) -> Result<Self, ProblemError> {
        if dists.len() != system.n_p() {
            return Err(ProblemError::ParameterCount {
                expected: system.n_p(),
                got: dists.len(),
            });
        }
        let params = ParameterSet::new(dists, 2 * horizon + 2)?;
        let (n_x, n_u) = (system.n_x(), system.n_u());
        let prob = Self {
            system,
            params,
            horizon,
            mu0,
            sigma0,
            mu_f,
            sigma_f,
            q: DMatrix::identity(n_x, n_x) * 1e-2,
            r: DMatrix::identity(n_u, n_u) * 1e-1,
            state_constraints: Vec::new(),
            input_constraints: Vec::new(),
            terminal_mode: TerminalMode::default(),
            noise: NoiseDistribution::default(),
            offset_state: None,
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn n_x(&self) -> usize {
        self.system.n_x()
    }
    pub fn n_u(&self) -> usize {
        self.system.n_u()
    }
    pub fn n_p(&self) -> usize {
        self.system.n_p()
    }

    /// States whose covariance is steered (all but the offset state).
    pub fn steered_states(&self) -> Vec<usize> {
        (0..self.n_x()).filter(|&i| Some(i) != self.offset_state).collect()
    }

    /// Restriction of a square matrix to the steered states.
    pub fn steered_block(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let idx = self.steered_states();
        DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        self.system.validate()?;
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let vec_len = |block: &str, v: &DVector<f64>, n: usize| {
            if v.len() != n {
                Err(ProblemError::Shape {
                    block: block.into(),
                    expected: format!("length {n}"),
                    got: format!("length {}", v.len()),
                })
            } else {
                Ok(())
            }
        };
        let square = |block: &str, m: &DMatrix<f64>, n: usize| {
            if m.nrows() != n || m.ncols() != n {
                Err(ProblemError::Shape {
                    block: block.into(),
                    expected: format!("{n}x{n}"),
                    got: format!("{}x{}", m.nrows(), m.ncols()),
                })
            } else {
                Ok(())
            }
        };
        vec_len("mu0", &self.mu0, n_x)?;
        vec_len("mu_f", &self.mu_f, n_x)?;
        square("sigma0", &self.sigma0, n_x)?;
        square("sigma_f", &self.sigma_f, n_x)?;
        square("q", &self.q, n_x)?;
        square("r", &self.r, n_u)?;

        let asym = (&self.sigma0 - self.sigma0.transpose()).amax();
        if asym > 1e-12 {
            return Err(ProblemError::InitialCovariance(format!(
                "asymmetry {asym:.3e} exceeds 1e-12"
            )));
        }
        let min_eig = min_eigenvalue(&self.sigma0);
        if min_eig < -1e-10 {
            return Err(ProblemError::InitialCovariance(format!(
                "eigenvalue {min_eig:.3e} is negative"
            )));
        }
        if !is_symmetric(&self.q) || min_eigenvalue(&self.q) < -1e-12 {
            return Err(ProblemError::NotPositiveSemidefinite("q".into()));
        }
        if !is_symmetric(&self.r) || min_eigenvalue(&self.r) <= 0.0 {
            return Err(ProblemError::NotPositiveDefinite("r".into()));
        }
        if !is_symmetric(&self.sigma_f) || min_eigenvalue(&self.sigma_f) < -1e-12 {
            return Err(ProblemError::NotPositiveSemidefinite("sigma_f".into()));
        }
        for (block, list, n) in [
            ("state_constraints", &self.state_constraints, n_x),
            ("input_constraints", &self.input_constraints, n_u),
        ] {
            for (index, c) in list.iter().enumerate() {
                let bad = |reason: String| ProblemError::Constraint {
                    block: block.into(),
                    index,
                    reason,
                };
                if c.alpha.len() != n {
                    return Err(bad(format!("alpha has length {}, expected {n}", c.alpha.len())));
                }
                if !(c.delta > 0.0 && c.delta < 1.0) {
                    return Err(bad(format!("delta {} must lie in (0, 1)", c.delta)));
                }
                if !c.beta.is_finite() || c.alpha.iter().any(|a| !a.is_finite()) {
                    return Err(bad("coefficients must be finite".into()));
                }
            }
        }
        if let Some(i) = self.offset_state {
            if !self.offset_state_is_invariant(i) {
                return Err(ProblemError::OffsetState { index: i });
            }
        }
        // every moment the recursions touch must exist
        for j in 0..self.n_p() {
            self.params.raw_moment(j, 2 * self.horizon + 2)?;
        }
        Ok(())
    }

    fn offset_state_is_invariant(&self, i: usize) -> bool {
        let sys = &self.system;
        if i >= sys.n_x() || self.mu0[i] != 1.0 || self.mu_f[i] != 1.0 {
            return false;
        }
        let unit_row = (0..sys.n_x()).all(|c| sys.a_bar[(i, c)] == if c == i { 1.0 } else { 0.0 });
        let zero_row = |m: &DMatrix<f64>| (0..m.ncols()).all(|c| m[(i, c)] == 0.0);
        unit_row
            && zero_row(&sys.b_bar)
            && zero_row(&sys.d_bar)
            && sys.a_tilde.iter().chain(&sys.b_tilde).chain(&sys.d_tilde).all(zero_row)
            && (0..sys.n_x()).all(|c| self.sigma0[(i, c)] == 0.0)
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax())
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(0.5 * (m + m.transpose())).eigenvalues.min()
}

pub(crate) fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(0.5 * (m + m.transpose())).eigenvalues.max()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> SteeringProblem {
        let sys = UncertainSystem::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            vec![DMatrix::from_element(1, 1, 0.5)],
            vec![DMatrix::zeros(1, 1)],
            vec![DMatrix::zeros(1, 1)],
        )
        .unwrap();
        SteeringProblem::new(
            sys,
            vec![ParameterDistribution::TwoPoint { value: 1.0 }],
            3,
            DVector::from_element(1, 1.0),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn accepts_well_formed_problem() {
        let p = scalar();
        assert_eq!(p.params.cached_order(), 8);
        assert_eq!(p.steered_states(), vec![0]);
    }

    #[test]
    fn rejects_bad_blocks() {
        let mut p = scalar();
        p.q = DMatrix::identity(2, 2);
        let err = p.validate().unwrap_err();
        assert!(err.to_string().starts_with("q:"), "{err}");

        let mut p = scalar();
        p.r = DMatrix::zeros(1, 1);
        assert_eq!(p.validate().unwrap_err(), ProblemError::NotPositiveDefinite("r".into()));

        let mut p = scalar();
        p.sigma0 = DMatrix::from_element(1, 1, -1.0);
        assert!(matches!(p.validate(), Err(ProblemError::InitialCovariance(_))));

        let mut p = scalar();
        p.state_constraints.push(ChanceConstraint::new(vec![1.0], 1.0, 1.5));
        assert!(matches!(p.validate(), Err(ProblemError::Constraint { .. })));

        let mut p = scalar();
        p.offset_state = Some(0);
        assert!(matches!(p.validate(), Err(ProblemError::OffsetState { index: 0 })));
    }

    #[test]
    fn cantelli_factor_values() {
        assert_eq!(ChanceConstraint::new(vec![1.0], 0.0, 0.5).cantelli_factor(), 1.0);
        assert!((ChanceConstraint::new(vec![1.0], 0.0, 0.2).cantelli_factor() - 2.0).abs() < 1e-15);
    }
}
