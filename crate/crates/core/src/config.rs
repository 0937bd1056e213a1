//! JSON scenario files.
//!
//! A file names a system (a builder with its physical parameters, or raw
//! matrices), optional overrides of the problem data, and the SCP, solver
//! and Monte Carlo settings. Every rejection carries the path of the
//! offending field.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::moments::Policy;
use crate::problem::{ChanceConstraint, NoiseDistribution, ProblemError, SteeringProblem, TerminalMode};
use crate::scenarios::{build_bicycle, build_spacecraft, BicycleParams, ScenarioError, SpacecraftParams};
use crate::scp::ScpSettings;
use crate::system::{ParameterDistribution, UncertainSystem};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl ToString) -> Self {
        Self::Invalid {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

/// Row-major matrix.
pub type Rows = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSystem {
    pub a_bar: Rows,
    pub b_bar: Rows,
    pub d_bar: Rows,
    #[serde(default)]
    pub a_tilde: Vec<Rows>,
    #[serde(default)]
    pub b_tilde: Vec<Rows>,
    #[serde(default)]
    pub d_tilde: Vec<Rows>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "snake_case")]
pub enum SystemSpec {
    Spacecraft(SpacecraftParams),
    Bicycle(BicycleParams),
    Custom(CustomSystem),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloSettings {
    pub samples: usize,
    pub seed: u64,
    pub keep_trajectories: usize,
    /// State pair for the covariance ellipses; defaults to the position
    /// states of the builder, else `[0, 1]`.
    pub ellipse_states: Option<[usize; 2]>,
    pub ellipse_sigma: f64,
    pub ellipse_points: usize,
}

impl Default for MonteCarloSettings {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            keep_trajectories: 100,
            ellipse_states: None,
            ellipse_sigma: 2.0,
            ellipse_points: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub system: SystemSpec,
    /// One law per parameter; builders supply their own when absent.
    pub parameters: Option<Vec<ParameterDistribution>>,
    pub horizon: Option<usize>,
    pub mu0: Option<Vec<f64>>,
    pub sigma0: Option<Rows>,
    pub mu_f: Option<Vec<f64>>,
    pub sigma_f: Option<Rows>,
    pub q: Option<Rows>,
    pub r: Option<Rows>,
    pub noise: Option<NoiseDistribution>,
    #[serde(default)]
    pub state_constraints: Vec<ChanceConstraint>,
    #[serde(default)]
    pub input_constraints: Vec<ChanceConstraint>,
    pub terminal_mode: Option<TerminalMode>,
    pub offset_state: Option<usize>,
    #[serde(default)]
    pub scp: ScpSettings,
    #[serde(default)]
    pub monte_carlo: MonteCarloSettings,
    pub output_dir: Option<PathBuf>,
    /// Policy JSON used as the SCP starting point, relative to the config file.
    pub initial_policy: Option<PathBuf>,
}

/// A parsed and validated scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub problem: SteeringProblem,
    pub initial_policy: Policy,
    pub ellipse_states: [usize; 2],
    pub output_dir: PathBuf,
}

pub fn parse(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::at(path, e.into_inner())
    })
}

pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let config = parse(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    build(config, base)
}

fn matrix(path: &str, rows: &Rows) -> Result<DMatrix<f64>, ConfigError> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m {
            return Err(ConfigError::at(
                format!("{path}[{i}]"),
                format!("row has {} entries, expected {m}", r.len()),
            ));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(ConfigError::at(format!("{path}[{i}][{j}]"), "entry must be finite"));
        }
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn matrix_cols(path: &str, rows: &Rows, cols: usize) -> Result<DMatrix<f64>, ConfigError> {
    // a matrix with zero columns cannot state its row count with empty rows alone
    if cols == 0 {
        return Ok(DMatrix::zeros(rows.len(), 0));
    }
    matrix(path, rows)
}

fn vector(path: &str, v: &[f64]) -> Result<DVector<f64>, ConfigError> {
    if let Some(j) = v.iter().position(|x| !x.is_finite()) {
        return Err(ConfigError::at(format!("{path}[{j}]"), "entry must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

fn problem_error(e: ProblemError) -> ConfigError {
    match &e {
        ProblemError::Shape { block, expected, got } => {
            ConfigError::at(block.clone(), format!("expected {expected}, got {got}"))
        }
        ProblemError::Constraint { block, index, reason } => ConfigError::at(format!("{block}[{index}]"), reason),
        ProblemError::InitialCovariance(_) => ConfigError::at("sigma0", &e),
        ProblemError::NotPositiveDefinite(b) | ProblemError::NotPositiveSemidefinite(b) => {
            ConfigError::at(b.clone(), &e)
        }
        ProblemError::ParameterCount { .. } => ConfigError::at("parameters", &e),
        ProblemError::OffsetState { .. } => ConfigError::at("offset_state", &e),
        ProblemError::System(_) => ConfigError::at("system", &e),
    }
}

fn scenario_error(e: ScenarioError) -> ConfigError {
    match e {
        ScenarioError::Problem(p) => problem_error(p),
        other => ConfigError::at("system", other),
    }
}

pub fn build(config: ScenarioConfig, base: &Path) -> Result<Scenario, ConfigError> {
    let (mut problem, default_ellipse) = match &config.system {
        SystemSpec::Spacecraft(p) => {
            let mut p = p.clone();
            if let Some(n) = config.horizon {
                p.horizon = n;
            }
            if let Some(d) = &config.parameters {
                if d.len() != 1 {
                    return Err(ConfigError::at("parameters", "the spacecraft has exactly one parameter"));
                }
                p.psi = d[0].clone();
            }
            (build_spacecraft(&p).map_err(scenario_error)?, [2, 3])
        }
        SystemSpec::Bicycle(p) => {
            let mut p = p.clone();
            if let Some(n) = config.horizon {
                p.horizon = n;
            }
            if let Some(d) = &config.parameters {
                if d.len() != 1 {
                    return Err(ConfigError::at("parameters", "the bicycle has exactly one parameter"));
                }
                p.nu_tilde = d[0].clone();
            }
            (build_bicycle(&p).map_err(scenario_error)?, [1, 2])
        }
        SystemSpec::Custom(c) => {
            let prob = custom_problem(&config, c)?;
            let second = prob.n_x().saturating_sub(1).min(1);
            (prob, [0, second])
        }
    };

    if let Some(v) = &config.mu0 {
        problem.mu0 = vector("mu0", v)?;
    }
    if let Some(v) = &config.mu_f {
        problem.mu_f = vector("mu_f", v)?;
    }
    if let Some(m) = &config.sigma0 {
        problem.sigma0 = matrix("sigma0", m)?;
    }
    if let Some(m) = &config.sigma_f {
        problem.sigma_f = matrix("sigma_f", m)?;
    }
    if let Some(m) = &config.q {
        problem.q = matrix("q", m)?;
    }
    if let Some(m) = &config.r {
        problem.r = matrix("r", m)?;
    }
    if let Some(n) = config.noise {
        problem.noise = n;
    }
    if let Some(mode) = config.terminal_mode {
        problem.terminal_mode = mode;
    }
    if config.offset_state.is_some() {
        problem.offset_state = config.offset_state;
    }
    problem.state_constraints = config.state_constraints.clone();
    problem.input_constraints = config.input_constraints.clone();
    problem.validate().map_err(problem_error)?;
    config.scp.validate().map_err(|e| ConfigError::at("scp", e))?;

    let mc = &config.monte_carlo;
    let ellipse_states = mc.ellipse_states.unwrap_or(default_ellipse);
    if ellipse_states.iter().any(|&i| i >= problem.n_x()) {
        return Err(ConfigError::at(
            "monte_carlo.ellipse_states",
            format!("state index out of range for n_x = {}", problem.n_x()),
        ));
    }
    if !(mc.ellipse_sigma > 0.0) || mc.ellipse_points == 0 {
        return Err(ConfigError::at("monte_carlo", "ellipse_sigma and ellipse_points must be positive"));
    }

    let initial_policy = match &config.initial_policy {
        None => Policy::zeros(problem.horizon, problem.n_u(), problem.n_x()),
        Some(p) => {
            let file = base.join(p);
            let policy = read_policy(&file).map_err(|e| ConfigError::at("initial_policy", e))?;
            policy
                .check_shape(problem.horizon, problem.n_u(), problem.n_x())
                .map_err(|e| ConfigError::at("initial_policy", e))?;
            policy
        }
    };
    let output_dir = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    Ok(Scenario {
        config,
        problem,
        initial_policy,
        ellipse_states,
        output_dir,
    })
}

fn custom_problem(config: &ScenarioConfig, c: &CustomSystem) -> Result<SteeringProblem, ConfigError> {
    let a = matrix("system.a_bar", &c.a_bar)?;
    let b = matrix("system.b_bar", &c.b_bar)?;
    let n_w = c.d_bar.first().map_or(0, Vec::len);
    let d = matrix_cols("system.d_bar", &c.d_bar, n_w)?;
    let list = |name: &str, l: &[Rows], cols: Option<usize>| -> Result<Vec<DMatrix<f64>>, ConfigError> {
        l.iter()
            .enumerate()
            .map(|(j, m)| {
                let path = format!("system.{name}[{j}]");
                match cols {
                    Some(n) => matrix_cols(&path, m, n),
                    None => matrix(&path, m),
                }
            })
            .collect()
    };
    let n_p = c.a_tilde.len();
    let fill = |l: Vec<DMatrix<f64>>, r: usize, k: usize| {
        if l.is_empty() {
            vec![DMatrix::zeros(r, k); n_p]
        } else {
            l
        }
    };
    let a_t = list("a_tilde", &c.a_tilde, None)?;
    let b_t = fill(list("b_tilde", &c.b_tilde, None)?, b.nrows(), b.ncols());
    let d_t = fill(list("d_tilde", &c.d_tilde, Some(n_w))?, d.nrows(), n_w);
    let sys = UncertainSystem::new(a, b, d, a_t, b_t, d_t).map_err(|e| ConfigError::at("system", e))?;

    let need = |name: &str| ConfigError::at(name, "required for a custom system");
    let dists = config.parameters.clone().unwrap_or_default();
    let horizon = config.horizon.ok_or_else(|| need("horizon"))?;
    let mu0 = vector("mu0", config.mu0.as_ref().ok_or_else(|| need("mu0"))?)?;
    let mu_f = vector("mu_f", config.mu_f.as_ref().ok_or_else(|| need("mu_f"))?)?;
    let sigma0 = matrix("sigma0", config.sigma0.as_ref().ok_or_else(|| need("sigma0"))?)?;
    let sigma_f = matrix("sigma_f", config.sigma_f.as_ref().ok_or_else(|| need("sigma_f"))?)?;
    SteeringProblem::new(sys, dists, horizon, mu0, sigma0, mu_f, sigma_f).map_err(problem_error)
}

pub fn read_policy(path: &Path) -> Result<Policy, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| format!("{}: {}: {}", path.display(), e.path(), e.inner()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build_str(s: &str) -> Result<Scenario, ConfigError> {
        build(parse(s)?, Path::new("."))
    }

    #[test]
    fn builder_defaults() {
        let s = build_str(r#"{"system": {"builder": "spacecraft"}}"#).unwrap();
        assert_eq!(s.problem.horizon, 10);
        assert_eq!(s.ellipse_states, [2, 3]);
        let s = build_str(r#"{"system": {"builder": "bicycle", "theta_x": 0.0}, "horizon": 6}"#).unwrap();
        assert_eq!(s.problem.horizon, 6);
        assert_eq!(s.problem.offset_state, Some(3));
    }

    #[test]
    fn unknown_field_names_its_path() {
        let err = build_str(r#"{"system": {"builder": "spacecraft"}, "scp": {"epsilonn": 1}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("scp"), "{msg}");
        assert!(msg.contains("epsilonn"), "{msg}");
    }

    #[test]
    fn wrong_q_shape_names_the_block() {
        let err = build_str(r#"{"system": {"builder": "spacecraft"}, "q": [[1,0,0],[0,1,0],[0,0,1]]}"#).unwrap_err();
        assert!(err.to_string().starts_with("q:"), "{err}");
    }

    #[test]
    fn ragged_rows_are_located() {
        let err = build_str(r#"{"system": {"builder": "spacecraft"}, "r": [[1, 0], [0]]}"#).unwrap_err();
        assert!(err.to_string().starts_with("r[1]"), "{err}");
    }

    #[test]
    fn bad_distribution_path() {
        let err = build_str(r#"{"system": {"builder": "spacecraft", "psi": {"kind": "beta"}}}"#).unwrap_err();
        assert!(err.to_string().starts_with("system"), "{err}");
    }

    #[test]
    fn custom_system_requires_targets() {
        let text = r#"{
            "system": {"builder": "custom", "a_bar": [[1]], "b_bar": [[1]], "d_bar": [[0.1]],
                       "a_tilde": [[[0.1]]]},
            "parameters": [{"kind": "two_point", "value": 1}],
            "horizon": 3, "mu0": [1], "sigma0": [[0]], "mu_f": [0]
        }"#;
        let err = build_str(text).unwrap_err();
        assert!(err.to_string().starts_with("sigma_f"), "{err}");
        let ok = text.replace(r#""mu_f": [0]"#, r#""mu_f": [0], "sigma_f": [[1]]"#);
        let s = build_str(&ok).unwrap();
        assert_eq!(s.problem.n_p(), 1);
        assert_eq!(s.problem.system.b_tilde[0].shape(), (1, 1));
    }

    #[test]
    fn missing_policy_file() {
        let err = build_str(r#"{"system": {"builder": "spacecraft"}, "initial_policy": "nope.json"}"#).unwrap_err();
        assert!(err.to_string().starts_with("initial_policy"), "{err}");
    }
}
