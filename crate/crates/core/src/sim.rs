//! Closed-loop simulation of plant, flow controller and reference governor on
//! one outer time grid.
//!
//! Each outer step of length `h_plant` applies `ν = ν̄_r + z₀` with zero-order
//! hold, advances the governor by one RK4 step with the predicted terminal
//! block frozen, moves the plant exactly, refreshes the reference-dependent
//! OCP data, then integrates the flow over the same interval in substeps.

use std::sync::Arc;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::erg::Governor;
use crate::error::{Error, Result};
use crate::flow::{control_output, default_rk4_step, init_state, FlowIntegrator, PrimalDualState, Stepper};
use crate::linalg::{self, Vector};
use crate::lti::{constraint_values, discretize, Equilibrium};
use crate::ocp::{kkt_residual, CompactOcp, OcpMatrices, OcpSpec};
use crate::scenario::Scenario;
use crate::terminal::{synthesize, verify_discretization, SynthesisReport, TerminalData};
use crate::trace::{SimTrace, TraceRow};

pub use crate::trace::format_float;

/// Terminal margin below this is flagged as a loss of recursive feasibility.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { t: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub synthesis: SynthesisReport,
    /// Outcome of the step-size condition with the scenario's `ε`.
    pub discretization_check: bool,
    /// Fraction of sampled terminal-set members whose successor is a member.
    pub sampled_invariance: f64,
    /// First time the terminal margin fell below `−FEASIBILITY_TOLERANCE`.
    pub feasibility_violation: Option<(f64, f64)>,
    pub h_plant: f64,
    pub h_flow: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub trace: SimTrace,
    pub status: RunStatus,
    pub diagnostics: Diagnostics,
}

/// Everything built once per scenario.
pub struct ClosedLoop {
    pub scenario: Scenario,
    pub spec: OcpSpec,
    pub matrices: Arc<OcpMatrices>,
    pub governor: Governor,
    pub terminal: TerminalData,
    pub h_flow: f64,
}

impl ClosedLoop {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let disc = discretize(&scenario.plant, scenario.tau)?;
        let terminal = synthesize(&disc, &scenario.weights, &scenario.constraints, &scenario.terminal)?;
        let spec = OcpSpec::new(
            scenario.horizon,
            disc,
            scenario.weights.clone(),
            scenario.constraints.clone(),
            &terminal,
            scenario.include_terminal_rows,
        )?;
        let matrices = Arc::new(OcpMatrices::new(&spec));
        crate::ocp::warn_if_not_strongly_convex(&matrices);
        let governor = Governor::new(&scenario.plant, scenario.constraints.clone(), terminal.clone(), scenario.erg.clone())?;
        let h_flow = match (scenario.h_flow, scenario.stepper) {
            (Some(h), _) => h.min(scenario.h_plant),
            (None, Stepper::ImplicitEuler) => scenario.h_plant,
            (None, Stepper::Rk4) => default_rk4_step(&matrices, scenario.flow.alpha).min(scenario.h_plant),
        };
        Ok(Self {
            scenario: scenario.clone(),
            spec,
            matrices,
            governor,
            terminal,
            h_flow,
        })
    }

    pub fn compact(&self, eq: &Equilibrium) -> Result<CompactOcp> {
        CompactOcp::with_matrices(Arc::clone(&self.matrices), &self.spec, eq)
    }

    fn diagnostics(&self) -> Result<Diagnostics> {
        let s = &self.scenario;
        let synthesis = self.terminal.report(&self.spec.plant, &s.weights);
        let discretization_check = verify_discretization(
            &s.plant,
            &self.terminal.k,
            &self.terminal.p,
            &s.weights.q,
            &s.weights.r,
            s.tau,
            s.check_epsilon,
        )?;
        let eq = self.governor.equilibrium(&s.gamma);
        let sampled_invariance = match self.terminal.thresholds(&eq) {
            Ok(_) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s.output.seed);
                let samples = self.terminal.sample_members(&eq, 200, &mut rng)?;
                let phi = self.terminal.closed_loop(&self.spec.plant);
                let ok = samples
                    .iter()
                    .filter(|x| {
                        let next = &eq.xi_bar + &phi * (*x - &eq.xi_bar);
                        self.terminal
                            .normalized_margins(&next, &eq)
                            .map(|m| m.iter().all(|v| *v >= -1e-9))
                            .unwrap_or(false)
                    })
                    .count();
                ok as f64 / samples.len() as f64
            }
            Err(_) => f64::NAN,
        };
        Ok(Diagnostics {
            synthesis,
            discretization_check,
            sampled_invariance,
            feasibility_violation: None,
            h_plant: s.h_plant,
            h_flow: self.h_flow,
        })
    }
}

struct LoopState {
    t: f64,
    xi: Vector,
    r: Vector,
    eq: Equilibrium,
    compact: CompactOcp,
    p: PrimalDualState,
    rdot: Vector,
}

/// Runs the scenario to `t_end`.
pub fn run(scenario: &Scenario) -> Result<SimOutcome> {
    let cl = ClosedLoop::new(scenario)?;
    run_closed_loop(&cl)
}

pub fn run_closed_loop(cl: &ClosedLoop) -> Result<SimOutcome> {
    let s = &cl.scenario;
    let mut diagnostics = cl.diagnostics()?;
    let r0 = if s.erg_enabled { s.r0.clone() } else { s.gamma.clone() };
    if s.erg_enabled && !cl.governor.is_admissible(&r0) {
        let values = cl.governor.steady_values(&r0);
        let (row, margin) = values
            .iter()
            .enumerate()
            .zip(&s.erg.delta)
            .find(|((_, v), d)| **v > -**d)
            .map(|((i, v), _)| (i, *v))
            .unwrap_or((0, 0.0));
        return Err(Error::Inadmissible {
            row,
            margin,
            required: -s.erg.delta[row],
        });
    }
    let state_values = constraint_values(&s.constraints, &s.xi0, &Vector::zeros(s.plant.m()));
    if state_values.rows(0, s.constraints.n_state_rows()).iter().any(|v| *v > 0.0) {
        warn!("initial state violates a state constraint");
    }
    let eq = cl.governor.equilibrium(&r0);
    let compact = cl.compact(&eq)?;
    let p = init_state(&compact, &s.xi0, s.init);
    let plant_step = discretize(&s.plant, s.h_plant)?;
    let mut flow = FlowIntegrator::new(s.flow, s.stepper, cl.h_flow)?;

    let mut st = LoopState {
        t: 0.0,
        xi: s.xi0.clone(),
        r: r0.clone(),
        eq,
        compact,
        p,
        rdot: Vector::zeros(s.plant.l()),
    };
    st.rdot = governor_rate(cl, &st);

    let steps = (s.t_end / s.h_plant).round().max(1.0) as usize;
    let log_every = ((s.log_interval / s.h_plant).round() as usize).max(1);
    let mut trace = SimTrace::new(s.plant.n(), s.plant.m(), s.plant.l());
    let mut status = RunStatus::Completed;
    info!(
        "{}: {steps} outer steps of {:.3e} s, flow step {:.3e} s ({:?})",
        s.name, s.h_plant, cl.h_flow, s.stepper
    );

    for k in 0..=steps {
        if k % log_every == 0 || k == steps {
            let row = log_row(cl, &st)?;
            if row.term_margin < -FEASIBILITY_TOLERANCE && diagnostics.feasibility_violation.is_none() {
                warn!("{}: terminal margin {:.3e} at t = {:.4}", s.name, row.term_margin, row.t);
                diagnostics.feasibility_violation = Some((row.t, row.term_margin));
            }
            trace.rows.push(row);
        }
        if k == steps {
            break;
        }
        if let Err(reason) = outer_step(cl, &mut st, &plant_step, &mut flow, k + 1) {
            warn!("{}: run stopped at t = {:.4}: {reason}", s.name, st.t);
            status = RunStatus::Diverged { t: st.t, reason };
            break;
        }
    }
    Ok(SimOutcome {
        trace,
        status,
        diagnostics,
    })
}

fn governor_rate(cl: &ClosedLoop, st: &LoopState) -> Vector {
    if !cl.scenario.erg_enabled {
        return Vector::zeros(st.r.len());
    }
    let x_n = st.compact.terminal_state(&st.p.z);
    cl.governor
        .reference_derivative(&x_n, &st.r, &cl.scenario.gamma)
        .unwrap_or_else(|_| Vector::zeros(st.r.len()))
}

/// Re-expresses `z` around a new steady state so that the absolute predicted
/// trajectory is unchanged.
fn reshift(compact: &CompactOcp, p: &mut PrimalDualState, old: &Equilibrium, new: &Equilibrium) {
    let lay = compact.layout();
    let dx = &old.xi_bar - &new.xi_bar;
    let du = &old.nu_bar - &new.nu_bar;
    for k in 0..lay.horizon {
        let mut u = p.z.rows_mut(lay.input_offset(k), lay.m);
        u += &du;
        let mut x = p.z.rows_mut(lay.state_offset(k + 1), lay.n);
        x += &dx;
    }
}


fn outer_step(
    cl: &ClosedLoop,
    st: &mut LoopState,
    plant_step: &crate::lti::DiscretePlant,
    flow: &mut FlowIntegrator,
    index: usize,
) -> std::result::Result<(), String> {
    let s = &cl.scenario;
    let h = s.h_plant;
    let nu = control_output(&st.compact, &st.p, &st.eq);

    if s.erg_enabled {
        let x_n = st.compact.terminal_state(&st.p.z);
        let f = |r: &Vector| {
            cl.governor
                .reference_derivative(&x_n, r, &s.gamma)
                .unwrap_or_else(|_| Vector::zeros(r.len()))
        };
        let k1 = f(&st.r);
        let k2 = f(&(&st.r + &k1 * (0.5 * h)));
        let k3 = f(&(&st.r + &k2 * (0.5 * h)));
        let k4 = f(&(&st.r + &k3 * h));
        let next = &st.r + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next != st.r {
            st.r = next;
            let eq_new = cl.governor.equilibrium(&st.r);
            reshift(&st.compact, &mut st.p, &st.eq, &eq_new);
            st.eq = eq_new;
            st.compact = cl.compact(&st.eq).map_err(|e| format!("reference left the admissible set: {e}"))?;
        }
    }

    st.xi = plant_step.step(&st.xi, &nu);
    st.t = index as f64 * h;
    if !st.xi.iter().all(|v| v.is_finite()) {
        return Err("plant state became non-finite".into());
    }
    flow.advance(&st.compact, &mut st.p, &st.xi, h).map_err(|e| e.to_string())?;
    if !st.p.is_finite() {
        return Err("controller state became non-finite".into());
    }
    st.rdot = governor_rate(cl, st);
    Ok(())
}

fn log_row(cl: &ClosedLoop, st: &LoopState) -> Result<TraceRow> {
    let s = &cl.scenario;
    let nu = control_output(&st.compact, &st.p, &st.eq);
    let psi = s.plant.output(&st.xi, &nu);
    let kkt = kkt_residual(&st.compact, &st.p, &st.xi)?;
    let x_n = st.compact.terminal_state(&st.p.z);
    let term_margin = cl
        .terminal
        .normalized_margins(&x_n, &st.eq)
        .map(|m| m.into_iter().fold(f64::INFINITY, f64::min))
        .unwrap_or(f64::NEG_INFINITY);
    let cviol = constraint_values(&s.constraints, &st.xi, &nu)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(TraceRow {
        t: st.t,
        xi: st.xi.iter().copied().collect(),
        nu: nu.iter().copied().collect(),
        r: st.r.iter().copied().collect(),
        psi: psi.iter().copied().collect(),
        kkt_res: kkt,
        term_margin,
        max_cviol: cviol,
        rdot_norm: st.rdot.norm(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub settling_time: Option<f64>,
    pub max_constraint_value: f64,
    pub max_kkt_after_settling: Option<f64>,
    pub min_terminal_margin: f64,
    pub final_error: f64,
}

/// Summary of a trace against the target `gamma`. A diverged run has no
/// settling time.
pub fn metrics(trace: &SimTrace, gamma: &[f64], diverged: bool) -> Result<Metrics> {
    let first = trace.rows.first().ok_or_else(|| Error::Trace("empty trace".into()))?;
    let err = |row: &TraceRow| -> f64 { row.psi.iter().zip(gamma).map(|(p, g)| (p - g).abs()).fold(0.0, f64::max) };
    let band = 0.01 * err(first);
    let settling_time = if diverged {
        None
    } else {
        let mut since = None;
        for row in &trace.rows {
            if err(row) <= band {
                since.get_or_insert(row.t);
            } else {
                since = None;
            }
        }
        since
    };
    let max_kkt_after_settling = settling_time.map(|ts| {
        trace
            .rows
            .iter()
            .filter(|r| r.t >= ts)
            .map(|r| r.kkt_res)
            .fold(0.0, f64::max)
    });
    Ok(Metrics {
        settling_time,
        max_constraint_value: trace.rows.iter().map(|r| r.max_cviol).fold(f64::NEG_INFINITY, f64::max),
        max_kkt_after_settling,
        min_terminal_margin: trace.rows.iter().map(|r| r.term_margin).fold(f64::INFINITY, f64::min),
        final_error: err(trace.rows.last().expect("nonempty")),
    })
}

impl Metrics {
    /// `key = value` lines with round-trip float formatting.
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), format_float);
        format!(
            "settling_time = {}\nmax_constraint_value = {}\nmax_kkt_after_settling = {}\nmin_terminal_margin = {}\nfinal_error = {}\n",
            opt(self.settling_time),
            format_float(self.max_constraint_value),
            opt(self.max_kkt_after_settling),
            format_float(self.min_terminal_margin),
            format_float(self.final_error),
        )
    }
}

/// Largest `|ψ_a(t) − ψ_b(t)|` over rows with matching times.
pub fn max_output_gap(a: &SimTrace, b: &SimTrace) -> f64 {
    a.rows
        .iter()
        .zip(&b.rows)
        .filter(|(x, y)| (x.t - y.t).abs() <= 1e-9 * (1.0 + x.t.abs()))
        .map(|(x, y)| linalg::vec_inf(&(Vector::from_vec(x.psi.clone()) - Vector::from_vec(y.psi.clone()))))
        .fold(0.0, f64::max)
}
