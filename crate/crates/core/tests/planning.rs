mod common;

use common::*;
use covsteer::linearize::{cantelli_constraints, ReferencePoint};
use covsteer::moments::{propagate, Policy};
use covsteer::problem::{ChanceConstraint, TerminalMode};
use covsteer::scenarios::{build_spacecraft, SpacecraftParams};
use covsteer::scp::{run, verify_feasibility, ScpError, ScpSettings};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn constrained(beta: f64) -> covsteer::problem::SteeringProblem {
    let mut prob = build_spacecraft(&SpacecraftParams::mixed()).unwrap();
    prob.state_constraints.push(ChanceConstraint::new(vec![0.0, 0.0, 1.0, 0.0], beta, 0.1));
    prob
}

#[test]
fn restart_from_a_converged_policy_stops_at_once() {
    let prob = build_spacecraft(&SpacecraftParams::mixed()).unwrap();
    let settings = ScpSettings::default();
    let first = run(&prob, &Policy::zeros(10, 2, 4), &settings).unwrap();
    assert!(first.converged);
    let again = run(&prob, &first.policy, &settings).unwrap();
    assert!(again.converged);
    assert_eq!(again.trace.len(), 1);
    assert!(again.policy.distance(&first.policy) < 1e-3);
}

#[test]
fn planning_is_deterministic() {
    let prob = constrained(1.95);
    let settings = ScpSettings::default();
    let a = run(&prob, &Policy::zeros(10, 2, 4), &settings).unwrap();
    let b = run(&prob, &Policy::zeros(10, 2, 4), &settings).unwrap();
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.trace.iterations, b.trace.iterations);
}

#[test]
fn unreachable_first_step_is_reported() {
    // X₁ = 1.7 regardless of the input, so 3σ above it cannot sit below 1.75
    let err = run(&constrained(1.75), &Policy::zeros(10, 2, 4), &ScpSettings::default()).unwrap_err();
    assert!(matches!(err, ScpError::InfeasibleLinearization(_)));
    assert!(err.to_string().contains("infeasible linearization"));
}

#[test]
fn perturbed_policy_fails_the_mean_check() {
    let prob = build_spacecraft(&SpacecraftParams::mixed()).unwrap();
    let settings = ScpSettings::default();
    let out = run(&prob, &Policy::zeros(10, 2, 4), &settings).unwrap();
    assert!(out.report.passed);
    let mut bad = out.policy.clone();
    bad.feedforward[0][0] += 1.0;
    let rep = verify_feasibility(&prob, &bad, &settings.tolerances).unwrap();
    assert!(!rep.terminal_mean_ok && !rep.passed);
    assert!(rep.terminal_mean_gap > 0.1);
}

#[test]
fn equality_mode_hits_a_reachable_target() {
    let mut prob = build_spacecraft(&SpacecraftParams::mixed()).unwrap();
    let settings = ScpSettings::default();
    let relaxed = run(&prob, &Policy::zeros(10, 2, 4), &settings).unwrap();
    // a target produced by a nearby policy is reachable by construction
    let mut nearby = relaxed.policy.clone();
    for k in 0..10 {
        nearby.gains[k][(0, 0)] += 0.01;
        nearby.gains[k][(1, 3)] -= 0.01;
        nearby.feedforward[k][0] += 0.01;
    }
    let target = propagate(&prob, &nearby).unwrap();
    prob.terminal_mode = TerminalMode::Equality;
    prob.mu_f = target[10].state_mean().clone();
    prob.sigma_f = target[10].state_cov().clone();
    let out = run(&prob, &relaxed.policy, &settings).unwrap();
    assert!(out.converged && out.report.passed);
    let sig = out.tables[10].state_cov();
    assert!((sig - &prob.sigma_f).amax() < 1e-6, "{sig}");
}

#[test]
fn trace_csv_has_one_row_per_iteration() {
    let prob = build_spacecraft(&SpacecraftParams::mixed()).unwrap();
    let out = run(&prob, &Policy::zeros(10, 2, 4), &ScpSettings::default()).unwrap();
    let mut buf = Vec::new();
    out.trace.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, out.trace.len() + 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The tangent of the square root never lies below it, so the convexified
    /// bound is at least as strict as the exact one for any covariance.
    #[test]
    fn convexified_bound_is_conservative(seed in 0u64..10_000, scale in 0.0..3.0f64) {
        let mut rng = rng(seed);
        let prob = constrained(2.0);
        let policy = random_policy(&mut rng, 10, 2, 4, 0.3, 1.0);
        let reference = ReferencePoint::new(&prob, policy).unwrap();
        let cons = cantelli_constraints(&prob, &reference);
        let g = uniform_matrix(&mut rng, 4, 4, scale);
        let sigma: DMatrix<f64> = &g * g.transpose();
        for c in &cons {
            let mut tables = reference.tables.clone();
            let key = (covsteer::system::MultiIndex::empty(), covsteer::system::MultiIndex::empty());
            tables[c.k].xx.insert(key, sigma.clone());
            let lin = c.expr.eval(|k| covsteer::linearize::block_value(&tables, &reference.policy, k))[(0, 0)];
            let con = &prob.state_constraints[c.index];
            let exact = cantelli_value(&con.alpha(), con.beta, con.delta, tables[c.k].state_mean(), &sigma);
            prop_assert!(lin >= exact - 1e-12, "k={} lin {lin} exact {exact}", c.k);
        }
    }
}
