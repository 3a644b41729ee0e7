//! Primal-dual gradient flow on `p = (z, λ, μ)`:
//! `ż = −α∇_zL`, `λ̇ = α(Gz − g)`, `μ̇ = α(h − P_N(h, μ))`, with the control
//! `ν = ν̄_r + z₀`.
//!
//! Two integrators are provided. The default is the implicit Euler step of
//! the flow, i.e. the resolvent `(I + hαT)⁻¹` of the KKT operator `T`. It keeps
//! `μ ≥ 0` exactly and is stable at any step, which matters because the flow is
//! very stiff for large `α` and heavily weighted inputs. Classical RK4 with
//! multiplier clamping is kept for comparison.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Cholesky, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::lti::Equilibrium;
use crate::ocp::{lagrangian_gradient, CompactOcp, OcpMatrices};

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualState {
    pub z: Vector,
    pub lambda: Vector,
    pub mu: Vector,
}

impl PrimalDualState {
    pub fn zeros(n_z: usize, n_lambda: usize, n_h: usize) -> Self {
        Self {
            z: Vector::zeros(n_z),
            lambda: Vector::zeros(n_lambda),
            mu: Vector::zeros(n_h),
        }
    }

    /// `self + a·d`.
    pub fn axpy(&self, a: f64, d: &PrimalDualState) -> Self {
        Self {
            z: &self.z + &d.z * a,
            lambda: &self.lambda + &d.lambda * a,
            mu: &self.mu + &d.mu * a,
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            z: &self.z * a,
            lambda: &self.lambda * a,
            mu: &self.mu * a,
        }
    }

    pub fn clamp_mu(&mut self) {
        self.mu.apply(|v| *v = v.max(0.0));
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().chain(self.lambda.iter()).chain(self.mu.iter()).all(|v| v.is_finite())
    }

    pub fn min_mu(&self) -> f64 {
        self.mu.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn norm_inf(&self) -> f64 {
        linalg::vec_inf(&self.z).max(linalg::vec_inf(&self.lambda)).max(linalg::vec_inf(&self.mu))
    }

    pub fn distance_squared(&self, other: &PrimalDualState) -> f64 {
        (&self.z - &other.z).norm_squared()
            + (&self.lambda - &other.lambda).norm_squared()
            + (&self.mu - &other.mu).norm_squared()
    }

    pub fn dot(&self, other: &PrimalDualState) -> f64 {
        self.z.dot(&other.z) + self.lambda.dot(&other.lambda) + self.mu.dot(&other.mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub alpha: f64,
}

impl FlowParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidModel(format!("flow rate alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

/// `P_N(h, μ)` componentwise: `hᵢ` where `μᵢ = 0` and `hᵢ < 0`, zero otherwise.
pub fn normal_cone_projection(h: &Vector, mu: &Vector) -> Result<Vector> {
    if h.len() != mu.len() {
        return Err(Error::Dimension(format!("h has {} rows, mu has {}", h.len(), mu.len())));
    }
    if let Some((i, v)) = mu.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::Contract(format!("normal cone is empty: mu[{i}] = {v}")));
    }
    Ok(Vector::from_iterator(
        h.len(),
        h.iter().zip(mu.iter()).map(|(hi, mi)| if *mi == 0.0 && *hi < 0.0 { *hi } else { 0.0 }),
    ))
}

/// Right-hand side of the flow at `p` for measured state `xi`.
pub fn flow_field(compact: &CompactOcp, p: &PrimalDualState, params: &FlowParams, xi: &Vector) -> PrimalDualState {
    let alpha = params.alpha;
    let h = compact.ineq_values(&p.z);
    let mu_dot = Vector::from_iterator(
        h.len(),
        h.iter()
            .zip(p.mu.iter())
            .map(|(hi, mi)| if *mi <= 0.0 && *hi < 0.0 { 0.0 } else { alpha * hi }),
    );
    PrimalDualState {
        z: lagrangian_gradient(compact, p, xi) * (-alpha),
        lambda: compact.eq_residual(&p.z, xi) * alpha,
        mu: mu_dot,
    }
}

/// `ν = ν̄_r + z₀`.
pub fn control_output(compact: &CompactOcp, p: &PrimalDualState, eq: &Equilibrium) -> Vector {
    &eq.nu_bar + compact.layout().input(&p.z, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Zeros,
    #[default]
    Rollout,
}

/// Initial controller state. The rollout applies the terminal gain from `xi`,
/// pulling each input radially toward `ν̄_r` just enough to satisfy the input
/// rows, so the guess satisfies the dynamics rows exactly.
pub fn init_state(compact: &CompactOcp, xi: &Vector, mode: InitMode) -> PrimalDualState {
    let lay = compact.layout();
    let mut p = PrimalDualState::zeros(lay.n_z(), lay.n_lambda(), compact.n_h());
    if mode == InitMode::Zeros {
        return p;
    }
    let m = &compact.matrices;
    let eq = &compact.equilibrium;
    let rows = m.constraints.input_rows();
    let base: Vec<f64> = rows
        .iter()
        .map(|r| r.eval(&eq.nu_bar))
        .collect();
    let (a, b) = (&m.a, &m.b);
    let mut chi = compact.shifted_state(xi);
    for k in 0..lay.horizon {
        let mut mu = &m.terminal_gain * &chi;
        let mut theta: f64 = 1.0;
        for (row, v0) in rows.iter().zip(&base) {
            let slope: f64 = row.coeffs.iter().zip(mu.iter()).map(|(c, u)| c * u).sum();
            if slope > 0.0 && *v0 < 0.0 {
                theta = theta.min(-v0 / slope);
            }
        }
        mu *= theta;
        chi = a * &chi + b * &mu;
        p.z.rows_mut(lay.input_offset(k), lay.m).copy_from(&mu);
        p.z.rows_mut(lay.state_offset(k + 1), lay.n).copy_from(&chi);
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepper {
    #[default]
    ImplicitEuler,
    Rk4,
}

/// `0.1/(α·L̂)`, the explicit step used when none is given.
pub fn default_rk4_step(matrices: &OcpMatrices, alpha: f64) -> f64 {
    0.1 / (alpha * matrices.lipschitz_estimate().max(1e-12))
}

const NEWTON_MAX_ITER: usize = 40;
const MAX_SPLIT_DEPTH: u32 = 8;
const CACHE_LIMIT: usize = 512;

type FactorKey = (u64, Vec<u64>);

/// Fixed-step integrator for the flow. Holds a factorization cache for the
/// implicit step keyed by the step size and active pattern.
#[derive(Debug, Clone)]
pub struct FlowIntegrator {
    pub params: FlowParams,
    pub stepper: Stepper,
    pub h_flow: f64,
    cache: HashMap<FactorKey, Cholesky<f64, Dyn>>,
    cache_owner: usize,
}

impl FlowIntegrator {
    pub fn new(params: FlowParams, stepper: Stepper, h_flow: f64) -> Result<Self> {
        if !(h_flow > 0.0 && h_flow.is_finite()) {
            return Err(Error::InvalidModel(format!("flow step must be positive, got {h_flow}")));
        }
        Ok(Self {
            params,
            stepper,
            h_flow,
            cache: HashMap::new(),
            cache_owner: 0,
        })
    }

    /// Integrates over `duration` with equal substeps no longer than `h_flow`.
    pub fn advance(&mut self, compact: &CompactOcp, p: &mut PrimalDualState, xi: &Vector, duration: f64) -> Result<()> {
        if duration <= 0.0 {
            return Ok(());
        }
        let steps = (duration / self.h_flow).ceil().max(1.0) as usize;
        let h = duration / steps as f64;
        for _ in 0..steps {
            self.step(compact, p, xi, h)?;
        }
        Ok(())
    }

    /// One step of length `h`.
    pub fn step(&mut self, compact: &CompactOcp, p: &mut PrimalDualState, xi: &Vector, h: f64) -> Result<()> {
        match self.stepper {
            Stepper::Rk4 => rk4_step(compact, p, &self.params, xi, h),
            Stepper::ImplicitEuler => self.implicit_step(compact, p, xi, h, 0)?,
        }
        if !p.is_finite() {
            return Err(Error::Contract("flow state became non-finite".into()));
        }
        Ok(())
    }

    /// Steps until `‖flow_field‖∞ < tol`; returns the elapsed flow time.
    pub fn converge(
        &mut self,
        compact: &CompactOcp,
        p: &mut PrimalDualState,
        xi: &Vector,
        tol: f64,
        max_time: f64,
    ) -> Result<f64> {
        let mut t = 0.0;
        loop {
            let field = flow_field(compact, p, &self.params, xi);
            if field.norm_inf() < tol {
                return Ok(t);
            }
            if t >= max_time {
                return Err(Error::QpNoConvergence(format!(
                    "flow field still {:.3e} after {t} time units",
                    field.norm_inf()
                )));
            }
            self.step(compact, p, xi, self.h_flow)?;
            t += self.h_flow;
        }
    }

    fn implicit_step(&mut self, compact: &CompactOcp, p: &mut PrimalDualState, xi: &Vector, h: f64, depth: u32) -> Result<()> {
        let solved = if compact.terminal_rows.is_empty() {
            self.resolvent_linear(compact, p, xi, h)
        } else {
            resolvent_newton(compact, p, &self.params, xi, h)
        };
        match solved {
            Some(next) => {
                *p = next;
                Ok(())
            }
            None if depth < MAX_SPLIT_DEPTH => {
                self.implicit_step(compact, p, xi, 0.5 * h, depth + 1)?;
                self.implicit_step(compact, p, xi, 0.5 * h, depth + 1)
            }
            None => Err(Error::QpNoConvergence("implicit flow step did not settle its active pattern".into())),
        }
    }

    /// Resolvent for linear rows: semismooth Newton on the active pattern
    /// `{i : μᵢ + s·hᵢ(z⁺) > 0}`, `s = hα`.
    fn resolvent_linear(&mut self, compact: &CompactOcp, p: &PrimalDualState, xi: &Vector, h: f64) -> Option<PrimalDualState> {
        let m = &compact.matrices;
        let owner = Arc::as_ptr(m) as usize;
        if owner != self.cache_owner || self.cache.len() > CACHE_LIMIT {
            self.cache.clear();
            self.cache_owner = owner;
        }
        let s = h * self.params.alpha;
        let g = compact.eq_rhs(xi);
        let q = compact.linear_term(xi);
        let c = &m.ineq_matrix;
        let c0 = &compact.ineq_offset;
        let rhs0 = &p.z - &q * s - m.eq_matrix.tr_mul(&(&p.lambda - &g * s)) * s;

        let pattern_of = |z: &Vector| -> Vec<bool> {
            let hv = c * z + c0;
            hv.iter().zip(p.mu.iter()).map(|(hi, mi)| mi + s * hi > 0.0).collect()
        };
        let mut active = pattern_of(&p.z);
        for _ in 0..NEWTON_MAX_ITER {
            let chol = self.factor(m, s, &active)?;
            let mut rhs = rhs0.clone();
            for (i, on) in active.iter().enumerate() {
                if *on {
                    let w = s * (p.mu[i] + s * c0[i]);
                    rhs.axpy(-w, &c.row(i).transpose(), 1.0);
                }
            }
            let z = chol.solve(&rhs);
            let next_active = pattern_of(&z);
            if next_active == active {
                let hv = c * &z + c0;
                let mu = Vector::from_iterator(hv.len(), hv.iter().zip(p.mu.iter()).map(|(hi, mi)| (mi + s * hi).max(0.0)));
                let lambda = &p.lambda + (&m.eq_matrix * &z - &g) * s;
                return Some(PrimalDualState { z, lambda, mu });
            }
            active = next_active;
        }
        None
    }

    fn factor(&mut self, m: &OcpMatrices, s: f64, active: &[bool]) -> Option<&Cholesky<f64, Dyn>> {
        let mut bits = vec![0u64; active.len().div_ceil(64)];
        for (i, on) in active.iter().enumerate() {
            if *on {
                bits[i / 64] |= 1 << (i % 64);
            }
        }
        let key = (s.to_bits(), bits);
        if !self.cache.contains_key(&key) {
            let mut sys = base_system(m, s);
            for (i, on) in active.iter().enumerate() {
                if *on {
                    let row = m.ineq_matrix.row(i);
                    sys += row.transpose() * row * (s * s);
                }
            }
            let chol = sys.cholesky()?;
            self.cache.insert(key.clone(), chol);
        }
        self.cache.get(&key)
    }
}

/// `I + sH + s²GᵀG`.
fn base_system(m: &OcpMatrices, s: f64) -> Mat {
    let n = m.cost_hessian.nrows();
    Mat::identity(n, n) + &m.cost_hessian * s + m.eq_matrix.tr_mul(&m.eq_matrix) * (s * s)
}

/// Resolvent with quadratic terminal rows: Newton on the reduced equation in
/// `z⁺`, Jacobian rebuilt every iteration.
fn resolvent_newton(compact: &CompactOcp, p: &PrimalDualState, params: &FlowParams, xi: &Vector, h: f64) -> Option<PrimalDualState> {
    let m = &compact.matrices;
    let s = h * params.alpha;
    let g = compact.eq_rhs(xi);
    let q = compact.linear_term(xi);
    let base = base_system(m, s);
    let rhs0 = &p.z - &q * s - m.eq_matrix.tr_mul(&(&p.lambda - &g * s)) * s;
    let n_z = compact.n_z();
    let mut z = p.z.clone();
    let scale = 1.0 + linalg::vec_inf(&rhs0);
    for _ in 0..NEWTON_MAX_ITER {
        let hv = compact.ineq_values(&z);
        let mu_next = Vector::from_iterator(hv.len(), hv.iter().zip(p.mu.iter()).map(|(hi, mi)| (mi + s * hi).max(0.0)));
        let residual = &base * &z - &rhs0 + compact.ineq_jacobian_t_times(&z, &mu_next) * s;
        if linalg::vec_inf(&residual) <= 1e-13 * scale {
            let lambda = &p.lambda + (&m.eq_matrix * &z - &g) * s;
            return Some(PrimalDualState { z, lambda, mu: mu_next });
        }
        let mut jac = base.clone();
        for i in 0..hv.len() {
            if mu_next[i] <= 0.0 {
                continue;
            }
            let grad = compact.ineq_gradient(&z, i);
            jac += &grad * grad.transpose() * (s * s);
        }
        let lay = compact.layout();
        let off = lay.state_offset(lay.horizon);
        let n_lin = m.n_linear_rows();
        for (j, row) in compact.terminal_rows.iter().enumerate() {
            let w = mu_next[n_lin + j];
            if w > 0.0 {
                let mut blk = jac.view_mut((off, off), (lay.n, lay.n));
                blk += &row.shape * (2.0 * s * w);
            }
        }
        let step = jac.lu().solve(&residual)?;
        debug_assert_eq!(step.len(), n_z);
        z -= step;
        if !z.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    None
}

/// Classical RK4 with multipliers clamped at every stage point.
pub fn rk4_step(compact: &CompactOcp, p: &mut PrimalDualState, params: &FlowParams, xi: &Vector, h: f64) {
    let stage = |base: &PrimalDualState, a: f64, d: &PrimalDualState| {
        let mut s = base.axpy(a, d);
        s.clamp_mu();
        s
    };
    let k1 = flow_field(compact, p, params, xi);
    let k2 = flow_field(compact, &stage(p, 0.5 * h, &k1), params, xi);
    let k3 = flow_field(compact, &stage(p, 0.5 * h, &k2), params, xi);
    let k4 = flow_field(compact, &stage(p, h, &k3), params, xi);
    let sum = k1.axpy(2.0, &k2).axpy(2.0, &k3).axpy(1.0, &k4);
    *p = p.axpy(h / 6.0, &sum);
    p.clamp_mu();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{ConstraintRow, DiscretePlant, PolytopicConstraints};
    use crate::ocp::{build_compact, kkt_residual, CostWeights, OcpSpec};
    use crate::terminal;

    fn scalar_problem(lo: f64) -> CompactOcp {
        let plant = DiscretePlant {
            a: Mat::from_element(1, 1, 1.0),
            b: Mat::from_element(1, 1, 1.0),
            tau: 1.0,
        };
        let w = CostWeights::new(Mat::from_element(1, 1, 1.0), Mat::zeros(1, 1), Mat::from_element(1, 1, 1.0)).unwrap();
        let cons = PolytopicConstraints::new(1, 1, vec![], vec![ConstraintRow::new(vec![-1.0], lo)]).unwrap();
        let term = terminal::synthesize(&plant, &w, &cons, &terminal::TerminalOptions::default()).unwrap();
        let spec = OcpSpec::new(2, plant, w, cons, &term, false).unwrap();
        let eq = Equilibrium {
            xi_bar: Vector::zeros(1),
            nu_bar: Vector::zeros(1),
        };
        build_compact(&spec, &eq).unwrap()
    }

    #[test]
    fn projection_matches_table() {
        let h = Vector::from_vec(vec![-1.0, 2.0, -3.0]);
        let mu = Vector::from_vec(vec![0.5, 0.0, 0.0]);
        assert_eq!(normal_cone_projection(&h, &mu).unwrap(), Vector::from_vec(vec![0.0, 0.0, -3.0]));
        let pos = Vector::from_vec(vec![1.0, 1.0, 1.0]);
        assert_eq!(normal_cone_projection(&h, &pos).unwrap(), Vector::zeros(3));
        let neg = Vector::from_vec(vec![1.0, -1e-12, 1.0]);
        assert!(matches!(normal_cone_projection(&h, &neg), Err(Error::Contract(_))));
    }

    #[test]
    fn field_scales_with_alpha() {
        let c = scalar_problem(-0.5);
        let mut p = PrimalDualState::zeros(c.n_z(), c.n_lambda(), c.n_h());
        p.z[0] = 0.2;
        p.lambda[1] = -0.3;
        let xi = Vector::from_vec(vec![1.0]);
        let f1 = flow_field(&c, &p, &FlowParams::new(3.0).unwrap(), &xi);
        let f2 = flow_field(&c, &p, &FlowParams::new(6.0).unwrap(), &xi);
        assert!(f2.distance_squared(&f1.scaled(2.0)) < 1e-24);
    }

    #[test]
    fn control_output_adds_first_block() {
        let c = scalar_problem(-0.5);
        let mut p = PrimalDualState::zeros(c.n_z(), c.n_lambda(), c.n_h());
        let eq = c.equilibrium.clone();
        assert_eq!(control_output(&c, &p, &eq)[0], 0.0);
        p.z[0] = 0.3;
        assert_eq!(control_output(&c, &p, &eq)[0], 0.3);
    }

    #[test]
    fn rollout_is_dynamics_feasible_and_respects_inputs() {
        let c = scalar_problem(-0.5);
        let xi = Vector::from_vec(vec![3.0]);
        let p = init_state(&c, &xi, InitMode::Rollout);
        assert!(linalg::vec_inf(&c.eq_residual(&p.z, &xi)) <= 1e-12);
        // the only rows are u ≥ −0.5
        let h = c.ineq_values(&p.z);
        assert!(h.iter().all(|v| *v <= 1e-12));
        let at_eq = init_state(&c, &Vector::zeros(1), InitMode::Rollout);
        assert_eq!(at_eq.z, Vector::zeros(c.n_z()));
        let zeros = init_state(&c, &xi, InitMode::Zeros);
        assert_eq!(zeros.norm_inf(), 0.0);
    }

    #[test]
    fn implicit_and_rk4_reach_the_same_point() {
        let c = scalar_problem(-0.5);
        let xi = Vector::from_vec(vec![3.0]);
        let params = FlowParams::new(1.0).unwrap();
        let mut imp = FlowIntegrator::new(params, Stepper::ImplicitEuler, 0.5).unwrap();
        let mut pi = init_state(&c, &xi, InitMode::Rollout);
        imp.converge(&c, &mut pi, &xi, 1e-10, 1e4).unwrap();
        let h = default_rk4_step(&c.matrices, 1.0);
        let mut rk = FlowIntegrator::new(params, Stepper::Rk4, h * 20.0).unwrap();
        let mut pr = init_state(&c, &xi, InitMode::Rollout);
        rk.converge(&c, &mut pr, &xi, 1e-10, 1e4).unwrap();
        assert!(linalg::vec_inf(&(&pi.z - &pr.z)) < 1e-8);
        assert!(kkt_residual(&c, &pi, &xi).unwrap() < 1e-9);
        // the bound is active: u₀ = −0.5
        assert!((pi.z[0] + 0.5).abs() < 1e-9);
    }
}
