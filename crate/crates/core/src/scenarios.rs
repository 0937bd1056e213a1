//! Builders for the planar spacecraft and the linearized kinematic bicycle.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{NoiseDistribution, ProblemError, SteeringProblem};
use crate::system::{ParameterDistribution, SystemError, UncertainSystem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("{0}")]
    Parameter(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Planar spacecraft with state `(ν_x, ν_y, X, Y)`, body-frame thrust input,
/// uncertain heading `Ψ` and thrust noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpacecraftParams {
    pub theta_x: f64,
    pub theta_w: f64,
    pub dt: f64,
    pub mass: f64,
    pub horizon: usize,
    pub psi: ParameterDistribution,
    pub force_noise: NoiseDistribution,
}

impl Default for SpacecraftParams {
    fn default() -> Self {
        Self::mixed()
    }
}

impl SpacecraftParams {
    fn with_intensities(theta_x: f64, theta_w: f64) -> Self {
        Self {
            theta_x,
            theta_w,
            dt: 0.2,
            mass: 1.0,
            horizon: 10,
            psi: ParameterDistribution::Uniform { lo: -1.0, hi: 1.0 },
            force_noise: NoiseDistribution::Gaussian,
        }
    }

    /// Thrust noise only.
    pub fn additive() -> Self {
        Self::with_intensities(0.0, 1.2)
    }

    /// Heading uncertainty only.
    pub fn multiplicative() -> Self {
        Self::with_intensities(0.3, 0.0)
    }

    pub fn mixed() -> Self {
        Self::with_intensities(0.5, 0.2)
    }
}

pub fn spacecraft_system(p: &SpacecraftParams) -> Result<UncertainSystem, ScenarioError> {
    if !(p.dt > 0.0 && p.mass > 0.0) {
        return Err(ScenarioError::Parameter(format!(
            "spacecraft needs dt > 0 and mass > 0, got dt={} mass={}",
            p.dt, p.mass
        )));
    }
    if !(p.theta_x >= 0.0 && p.theta_w >= 0.0) {
        return Err(ScenarioError::Parameter(format!(
            "noise intensities must be nonnegative, got theta_x={} theta_w={}",
            p.theta_x, p.theta_w
        )));
    }
    let dt = p.dt;
    let mut a = DMatrix::identity(4, 4);
    a[(2, 0)] = dt;
    a[(3, 1)] = dt;
    let mut b = DMatrix::zeros(4, 2);
    b[(0, 0)] = dt / p.mass;
    b[(1, 1)] = dt / p.mass;
    let mut d = DMatrix::zeros(4, 2);
    d[(0, 0)] = p.theta_w * dt / p.mass;
    d[(1, 1)] = p.theta_w * dt / p.mass;
    // small-angle rotation of body velocity into the inertial position rates
    let mut a1 = DMatrix::zeros(4, 4);
    a1[(2, 1)] = -p.theta_x * dt;
    a1[(3, 0)] = p.theta_x * dt;
    Ok(UncertainSystem::new(
        a,
        b,
        d,
        vec![a1],
        vec![DMatrix::zeros(4, 2)],
        vec![DMatrix::zeros(4, 2)],
    )?)
}

pub fn build_spacecraft(p: &SpacecraftParams) -> Result<SteeringProblem, ScenarioError> {
    let sys = spacecraft_system(p)?;
    let mut prob = SteeringProblem::new(
        sys,
        vec![p.psi.clone()],
        p.horizon,
        DVector::from_vec(vec![1.0, -1.0, 1.5, 1.5]),
        DMatrix::identity(4, 4) * 0.001,
        DVector::zeros(4),
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.2, 1.0, 0.12, 0.12])),
    )?;
    prob.noise = p.force_noise;
    Ok(prob)
}

/// Lateral path-tracking model with state `(φ, e_ψ, e_y)`, steering-rate
/// input and uncertain forward speed `ν̄_x + θ_x ν̃_x`.
///
/// The yaw-rate reference enters as a constant drift. It is carried by a
/// fourth state pinned at 1, so the built problem has `n_x = 4` and
/// `offset_state = Some(3)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BicycleParams {
    pub nu_x: f64,
    pub d_f: f64,
    pub d_r: f64,
    pub dt: f64,
    pub theta_x: f64,
    pub psi_dot_ref: f64,
    pub horizon: usize,
    pub nu_tilde: ParameterDistribution,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            nu_x: 15.0,
            d_f: 1.5,
            d_r: 1.5,
            dt: 0.1,
            theta_x: 1.5,
            psi_dot_ref: 1.0,
            horizon: 10,
            nu_tilde: ParameterDistribution::Gaussian { std: 1.0 },
        }
    }
}

pub const BICYCLE_OFFSET_STATE: usize = 3;

pub fn bicycle_system(p: &BicycleParams) -> Result<UncertainSystem, ScenarioError> {
    let wb = p.d_f + p.d_r;
    if !(wb > 0.0) {
        return Err(ScenarioError::Parameter(format!("wheelbase d_f + d_r must be positive, got {wb}")));
    }
    if !(p.dt > 0.0) {
        return Err(ScenarioError::Parameter(format!("dt must be positive, got {}", p.dt)));
    }
    let (dt, rear) = (p.dt, p.d_r / wb);
    let mut a = DMatrix::identity(4, 4);
    a[(1, 0)] = p.nu_x * dt / wb;
    a[(2, 0)] = rear * p.nu_x * dt;
    a[(2, 1)] = p.nu_x * dt;
    a[(1, 3)] = -p.psi_dot_ref * dt;
    let b = DMatrix::from_column_slice(4, 1, &[dt, rear * dt, 0.0, 0.0]);
    let mut a1 = DMatrix::zeros(4, 4);
    a1[(1, 0)] = p.theta_x * dt / wb;
    a1[(2, 0)] = p.theta_x * rear * dt;
    a1[(2, 1)] = p.theta_x * dt;
    Ok(UncertainSystem::new(
        a,
        b,
        DMatrix::zeros(4, 0),
        vec![a1],
        vec![DMatrix::zeros(4, 1)],
        vec![DMatrix::zeros(4, 0)],
    )?)
}

pub fn build_bicycle(p: &BicycleParams) -> Result<SteeringProblem, ScenarioError> {
    let sys = bicycle_system(p)?;
    let mut prob = SteeringProblem::new(
        sys,
        vec![p.nu_tilde.clone()],
        p.horizon,
        DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.001, 0.001, 0.1, 0.0])),
        DVector::from_vec(vec![0.3, 0.0, 0.0, 1.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.002, 0.01, 0.0])),
    )?;
    prob.offset_state = Some(BICYCLE_OFFSET_STATE);
    prob.validate()?;
    Ok(prob)
}
