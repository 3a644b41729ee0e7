#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use embedded_mpc::linalg::{Mat, Vector};
use embedded_mpc::lti::{discretize, ConstraintRow, ContinuousPlant, Equilibrium, PolytopicConstraints};
use embedded_mpc::ocp::{CompactOcp, CostWeights, OcpMatrices, OcpSpec};
use embedded_mpc::qp::{solve_enumerate, QpProblem, QpSolution};
use embedded_mpc::terminal::{synthesize, TerminalData, TerminalOptions};
use embedded_mpc::{Scenario, ScenarioFile};
use rand::Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

pub fn load(name: &str, overrides: &[&str]) -> Scenario {
    let ovs: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ScenarioFile::load(&scenario_path(name), &ovs)
        .and_then(|f| f.build())
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn double_integrator() -> ContinuousPlant {
    ContinuousPlant::new(
        Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        Mat::from_row_slice(2, 1, &[0.0, 1.0]),
        Mat::from_row_slice(1, 2, &[1.0, 0.0]),
        Mat::zeros(1, 1),
    )
    .unwrap()
}

/// Clohessy-Wiltshire relative motion with mean motion `w`.
pub fn hcw(w: f64) -> ContinuousPlant {
    let mut a = Mat::zeros(6, 6);
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
    }
    a[(3, 0)] = 3.0 * w * w;
    a[(3, 4)] = 2.0 * w;
    a[(4, 3)] = -2.0 * w;
    a[(5, 2)] = -w * w;
    let mut b = Mat::zeros(6, 3);
    let mut c = Mat::zeros(3, 6);
    for i in 0..3 {
        b[(i + 3, i)] = 1.0;
        c[(i, i)] = 1.0;
    }
    ContinuousPlant::new(a, b, c, Mat::zeros(3, 3)).unwrap()
}

fn random_spd<R: Rng>(rng: &mut R, k: usize, floor: f64) -> Mat {
    let l = Mat::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    &l * l.transpose() + Mat::identity(k, k) * floor
}

fn random_row<R: Rng>(rng: &mut R, k: usize) -> ConstraintRow {
    let coeffs: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    ConstraintRow::new(coeffs, -rng.random_range(0.3..1.5))
}

/// A small random OCP around the origin equilibrium with a measured state for
/// which the QP is feasible, together with its enumerated optimum.
pub struct RandomCase {
    pub spec: OcpSpec,
    pub terminal: TerminalData,
    pub compact: CompactOcp,
    pub xi: Vector,
    pub problem: QpProblem,
    pub optimum: QpSolution,
}

pub fn random_case<R: Rng>(rng: &mut R) -> RandomCase {
    loop {
        if let Some(case) = try_random_case(rng) {
            return case;
        }
    }
}

fn try_random_case<R: Rng>(rng: &mut R) -> Option<RandomCase> {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=2);
    let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let b = Mat::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let c = Mat::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
    let plant = ContinuousPlant::new(a, b, c, Mat::zeros(1, m)).ok()?;
    let disc = discretize(&plant, rng.random_range(0.1..0.5)).ok()?;

    let n_state_rows = rng.random_range(0..=2);
    let n_input_rows = rng.random_range(1..=2);
    let per_stage = n_state_rows + n_input_rows;
    let horizon = rng.random_range(1..=(12 / per_stage).min(5));
    let constraints = PolytopicConstraints::new(
        n,
        m,
        (0..n_state_rows).map(|_| random_row(rng, n)).collect(),
        (0..n_input_rows).map(|_| random_row(rng, m)).collect(),
    )
    .ok()?;
    let weights = CostWeights::new(random_spd(rng, n, 0.2), Mat::zeros(n, m), random_spd(rng, m, 0.2)).ok()?;
    let terminal = synthesize(&disc, &weights, &constraints, &TerminalOptions::default()).ok()?;
    let spec = OcpSpec::new(horizon, disc, weights, constraints, &terminal, false).ok()?;
    let eq = Equilibrium {
        xi_bar: Vector::zeros(n),
        nu_bar: Vector::zeros(m),
    };
    let compact = CompactOcp::with_matrices(Arc::new(OcpMatrices::new(&spec)), &spec, &eq).ok()?;
    let xi = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let problem = QpProblem::from_compact(&compact, &xi).ok()?;
    let optimum = solve_enumerate(&problem).ok()?;
    Some(RandomCase {
        spec,
        terminal,
        compact,
        xi,
        problem,
        optimum,
    })
}
