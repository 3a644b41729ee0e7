//! Finite-horizon linear-quadratic OCP in compact form `min J(z) s.t. Gz = g(ξ),
//! h(z) ≤ 0`, written in coordinates shifted by the steady state of the
//! applied reference.
//!
//! Decision ordering is `z = (u₀−ν̄, x₁−ξ̄, u₁−ν̄, x₂−ξ̄, …, u_{N−1}−ν̄, x_N−ξ̄)`,
//! so `n_z = N(n+m)` and `n_λ = N n`. The cost is
//! `Σ_k τ [χ_k; μ_k]ᵀ [[Q, U], [Uᵀ, R]] [χ_k; μ_k] + χ_Nᵀ P χ_N` and the stored
//! Hessian is twice the quadratic-form matrix, so `∇J = Hz + q(ξ)`.

use std::sync::Arc;

use log::warn;

use crate::error::{Error, Result};
use crate::flow::PrimalDualState;
use crate::linalg::{self, Mat, Vector};
use crate::lti::{constraint_values, DiscretePlant, Equilibrium, PolytopicConstraints};
use crate::terminal::TerminalData;

/// Stage-cost matrices `Q` (n×n), `U` (n×m), `R` (m×m).
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: Mat,
    pub u: Mat,
    pub r: Mat,
}

impl CostWeights {
    pub fn new(q: Mat, u: Mat, r: Mat) -> Result<Self> {
        let n = q.nrows();
        let m = r.nrows();
        if !q.is_square() || !r.is_square() || u.nrows() != n || u.ncols() != m {
            return Err(Error::Dimension(format!(
                "cost shapes Q {}x{}, U {}x{}, R {}x{}",
                q.nrows(), q.ncols(), u.nrows(), u.ncols(), r.nrows(), r.ncols()
            )));
        }
        if !linalg::is_symmetric(&q, 1e-12) || !linalg::is_symmetric(&r, 1e-12) {
            return Err(Error::Cost("Q and R must be symmetric".into()));
        }
        let r_chol = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Cost("R must be positive definite".into()))?;
        let schur = &q - &u * r_chol.solve(&u.transpose());
        let min_eig = linalg::min_sym_eigenvalue(&schur);
        if min_eig < -1e-9 {
            return Err(Error::Cost(format!("Q - U R^-1 U^T has eigenvalue {min_eig:.3e} < 0")));
        }
        Ok(Self { q, u, r })
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    /// `[[Q, U], [Uᵀ, R]]`.
    pub fn stage_matrix(&self) -> Mat {
        let (n, m) = (self.n(), self.m());
        let mut w = Mat::zeros(n + m, n + m);
        w.view_mut((0, 0), (n, n)).copy_from(&self.q);
        w.view_mut((0, n), (n, m)).copy_from(&self.u);
        w.view_mut((n, 0), (m, n)).copy_from(&self.u.transpose());
        w.view_mut((n, n), (m, m)).copy_from(&self.r);
        w
    }
}

/// Everything needed to assemble the compact OCP for any applied reference.
#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub horizon: usize,
    pub plant: DiscretePlant,
    pub weights: CostWeights,
    pub terminal_cost: Mat,
    pub terminal_gain: Mat,
    pub constraints: PolytopicConstraints,
    /// Ellipsoidal terminal rows `x_N ∈ 𝒯_r`; `None` leaves them to the governor.
    pub terminal_set: Option<TerminalData>,
}

impl OcpSpec {
    pub fn new(
        horizon: usize,
        plant: DiscretePlant,
        weights: CostWeights,
        constraints: PolytopicConstraints,
        terminal: &TerminalData,
        include_terminal_rows: bool,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidModel("horizon must be at least one step".into()));
        }
        let (n, m) = (plant.n(), plant.m());
        if weights.n() != n || weights.m() != m || constraints.n() != n || constraints.m() != m {
            return Err(Error::Dimension("cost/constraint dimensions do not match the plant".into()));
        }
        let p = &terminal.p;
        if p.nrows() != n || !linalg::is_symmetric(p, 1e-9) || p.clone().cholesky().is_none() {
            return Err(Error::Cost("terminal cost P must be symmetric positive definite".into()));
        }
        Ok(Self {
            horizon,
            plant,
            weights,
            terminal_cost: terminal.p.clone(),
            terminal_gain: terminal.k.clone(),
            constraints,
            terminal_set: include_terminal_rows.then(|| terminal.clone()),
        })
    }

    pub fn include_terminal_rows(&self) -> bool {
        self.terminal_set.is_some()
    }

    pub fn layout(&self) -> DecisionLayout {
        DecisionLayout {
            n: self.plant.n(),
            m: self.plant.m(),
            horizon: self.horizon,
        }
    }
}

/// Block positions inside `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionLayout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
}

/// Which variable a block of `z` holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Input(usize),
    State(usize),
}

impl DecisionLayout {
    pub fn n_z(&self) -> usize {
        self.horizon * (self.n + self.m)
    }

    pub fn n_lambda(&self) -> usize {
        self.horizon * self.n
    }

    /// Offset of `u_k − ν̄`, `k = 0..N−1`.
    pub fn input_offset(&self, k: usize) -> usize {
        debug_assert!(k < self.horizon);
        k * (self.n + self.m)
    }

    /// Offset of `x_k − ξ̄`, `k = 1..N`.
    pub fn state_offset(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.horizon);
        (k - 1) * (self.n + self.m) + self.m
    }

    /// Blocks in storage order with their offsets and lengths.
    pub fn blocks(&self) -> Vec<(Block, usize, usize)> {
        let mut out = Vec::with_capacity(2 * self.horizon);
        for k in 0..self.horizon {
            out.push((Block::Input(k), self.input_offset(k), self.m));
            out.push((Block::State(k + 1), self.state_offset(k + 1), self.n));
        }
        out
    }

    pub fn input<'a>(&self, z: &'a Vector, k: usize) -> nalgebra::DVectorView<'a, f64> {
        z.rows(self.input_offset(k), self.m)
    }

    pub fn state<'a>(&self, z: &'a Vector, k: usize) -> nalgebra::DVectorView<'a, f64> {
        z.rows(self.state_offset(k), self.n)
    }
}

/// Quadratic terminal row `χ_Nᵀ S χ_N − Γ ≤ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticRow {
    pub shape: Mat,
    pub threshold: f64,
}

/// Reference-independent matrices of the compact OCP.
#[derive(Debug, Clone)]
pub struct OcpMatrices {
    pub layout: DecisionLayout,
    pub tau: f64,
    /// `2 ×` the quadratic-form matrix of `J`.
    pub cost_hessian: Mat,
    /// Dynamics rows `χ_{k+1} − Aχ_k − Bμ_k = 0`.
    pub eq_matrix: Mat,
    /// Linear inequality rows over `z`, stage by stage: the input rows on
    /// `u_k` followed by the state rows on `x_{k+1}`.
    pub ineq_matrix: Mat,
    pub a: Mat,
    pub b: Mat,
    pub cross: Mat,
    pub terminal_gain: Mat,
    pub constraints: PolytopicConstraints,
}

impl OcpMatrices {
    pub fn new(spec: &OcpSpec) -> Self {
        let layout = spec.layout();
        let (n, m, nh) = (layout.n, layout.m, spec.horizon);
        let tau = spec.plant.tau;
        let n_z = layout.n_z();

        let mut hess = Mat::zeros(n_z, n_z);
        let w = &spec.weights;
        for k in 0..nh {
            let iu = layout.input_offset(k);
            hess.view_mut((iu, iu), (m, m)).copy_from(&(&w.r * (2.0 * tau)));
            if k >= 1 {
                let ix = layout.state_offset(k);
                hess.view_mut((ix, ix), (n, n)).copy_from(&(&w.q * (2.0 * tau)));
                hess.view_mut((ix, iu), (n, m)).copy_from(&(&w.u * (2.0 * tau)));
                hess.view_mut((iu, ix), (m, n)).copy_from(&(w.u.transpose() * (2.0 * tau)));
            }
        }
        let ixn = layout.state_offset(nh);
        hess.view_mut((ixn, ixn), (n, n)).copy_from(&(&spec.terminal_cost * 2.0));

        let mut g = Mat::zeros(layout.n_lambda(), n_z);
        for k in 0..nh {
            let row = k * n;
            g.view_mut((row, layout.state_offset(k + 1)), (n, n)).copy_from(&Mat::identity(n, n));
            g.view_mut((row, layout.input_offset(k)), (n, m)).copy_from(&(-&spec.plant.b));
            if k >= 1 {
                g.view_mut((row, layout.state_offset(k)), (n, n)).copy_from(&(-&spec.plant.a));
            }
        }

        let cons = &spec.constraints;
        let (cx, cu) = (cons.n_state_rows(), cons.n_input_rows());
        let per_stage = cx + cu;
        let mut c = Mat::zeros(nh * per_stage, n_z);
        let input_m = cons.input_matrix();
        let state_m = cons.state_matrix();
        for k in 0..nh {
            let base = k * per_stage;
            if cu > 0 {
                c.view_mut((base, layout.input_offset(k)), (cu, m)).copy_from(&input_m);
            }
            if cx > 0 {
                c.view_mut((base + cu, layout.state_offset(k + 1)), (cx, n)).copy_from(&state_m);
            }
        }

        Self {
            layout,
            tau,
            cost_hessian: hess,
            eq_matrix: g,
            ineq_matrix: c,
            a: spec.plant.a.clone(),
            b: spec.plant.b.clone(),
            cross: spec.weights.u.clone(),
            terminal_gain: spec.terminal_gain.clone(),
            constraints: spec.constraints.clone(),
        }
    }

    pub fn n_linear_rows(&self) -> usize {
        self.ineq_matrix.nrows()
    }

    /// Rough Lipschitz bound of the flow field per unit rate:
    /// `‖H‖₂ + ‖G‖₂ + ‖C‖₂`, each norm bounded by Frobenius.
    pub fn lipschitz_estimate(&self) -> f64 {
        self.cost_hessian.norm() + self.eq_matrix.norm() + self.ineq_matrix.norm()
    }
}

/// Compact OCP for one applied reference. The measured state `ξ` enters only
/// through `g(ξ)` and the linear term `q(ξ)`, which are evaluated on demand.
#[derive(Debug, Clone)]
pub struct CompactOcp {
    pub matrices: Arc<OcpMatrices>,
    pub equilibrium: Equilibrium,
    /// Offsets `c` of the linear rows `Cz + c ≤ 0`.
    pub ineq_offset: Vector,
    pub terminal_rows: Vec<QuadraticRow>,
}

/// Assembles the compact OCP for the applied reference with steady state `equilibrium`.
/// Refuses references whose steady state is not strictly inside every constraint.
pub fn build_compact(spec: &OcpSpec, equilibrium: &Equilibrium) -> Result<CompactOcp> {
    let matrices = Arc::new(OcpMatrices::new(spec));
    CompactOcp::with_matrices(matrices, spec, equilibrium)
}

impl CompactOcp {
    /// Rebuilds only the reference-dependent offsets on top of shared matrices.
    pub fn with_matrices(matrices: Arc<OcpMatrices>, spec: &OcpSpec, equilibrium: &Equilibrium) -> Result<Self> {
        let ss_values = constraint_values(&spec.constraints, &equilibrium.xi_bar, &equilibrium.nu_bar);
        if let Some((row, margin)) = ss_values.iter().enumerate().find(|(_, v)| **v >= 0.0) {
            return Err(Error::Inadmissible {
                row,
                margin: *margin,
                required: 0.0,
            });
        }
        let cons = &spec.constraints;
        let (cx, cu) = (cons.n_state_rows(), cons.n_input_rows());
        let per_stage = cx + cu;
        let mut offset = Vector::zeros(spec.horizon * per_stage);
        for k in 0..spec.horizon {
            let base = k * per_stage;
            for j in 0..cu {
                offset[base + j] = ss_values[cx + j];
            }
            for i in 0..cx {
                offset[base + cu + i] = ss_values[i];
            }
        }
        let terminal_rows = match &spec.terminal_set {
            Some(data) => data
                .shapes
                .iter()
                .zip(&data.rows)
                .map(|(s, row)| {
                    crate::terminal::threshold(s, row, equilibrium).map(|gamma| QuadraticRow {
                        shape: s.clone(),
                        threshold: gamma,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            matrices,
            equilibrium: equilibrium.clone(),
            ineq_offset: offset,
            terminal_rows,
        })
    }

    pub fn layout(&self) -> DecisionLayout {
        self.matrices.layout
    }

    pub fn n_z(&self) -> usize {
        self.layout().n_z()
    }

    pub fn n_lambda(&self) -> usize {
        self.layout().n_lambda()
    }

    /// Total inequality count (linear rows plus terminal rows).
    pub fn n_h(&self) -> usize {
        self.matrices.n_linear_rows() + self.terminal_rows.len()
    }

    pub fn shifted_state(&self, xi: &Vector) -> Vector {
        xi - &self.equilibrium.xi_bar
    }

    /// `g(ξ) = [A(ξ − ξ̄); 0; …; 0]`.
    pub fn eq_rhs(&self, xi: &Vector) -> Vector {
        let n = self.layout().n;
        let mut g = Vector::zeros(self.n_lambda());
        g.rows_mut(0, n).copy_from(&(&self.matrices.a * self.shifted_state(xi)));
        g
    }

    /// Linear cost term: `2τUᵀ(ξ − ξ̄)` on the `u₀` block, zero elsewhere.
    pub fn linear_term(&self, xi: &Vector) -> Vector {
        let lay = self.layout();
        let mut q = Vector::zeros(self.n_z());
        let tau = self.matrices.tau;
        let v = self.matrices.cross.transpose() * self.shifted_state(xi) * (2.0 * tau);
        q.rows_mut(lay.input_offset(0), lay.m).copy_from(&v);
        q
    }

    /// `J(z)` up to the constant `τ χ₀ᵀQχ₀`.
    pub fn cost(&self, z: &Vector, xi: &Vector) -> f64 {
        0.5 * z.dot(&(&self.matrices.cost_hessian * z)) + self.linear_term(xi).dot(z)
    }

    fn terminal_block<'a>(&self, z: &'a Vector) -> nalgebra::DVectorView<'a, f64> {
        let lay = self.layout();
        lay.state(z, lay.horizon)
    }

    /// `h(z)`: linear rows then terminal rows.
    pub fn ineq_values(&self, z: &Vector) -> Vector {
        let lin = &self.matrices.ineq_matrix * z + &self.ineq_offset;
        if self.terminal_rows.is_empty() {
            return lin;
        }
        let xn = self.terminal_block(z);
        let mut out = Vector::zeros(self.n_h());
        out.rows_mut(0, lin.len()).copy_from(&lin);
        for (i, row) in self.terminal_rows.iter().enumerate() {
            out[lin.len() + i] = xn.dot(&(&row.shape * xn)) - row.threshold;
        }
        out
    }

    /// `(∂h/∂z)ᵀ μ`.
    pub fn ineq_jacobian_t_times(&self, z: &Vector, mu: &Vector) -> Vector {
        let n_lin = self.matrices.n_linear_rows();
        let mut out = self.matrices.ineq_matrix.tr_mul(&mu.rows(0, n_lin).into_owned());
        if !self.terminal_rows.is_empty() {
            let lay = self.layout();
            let xn = self.terminal_block(z).into_owned();
            let off = lay.state_offset(lay.horizon);
            for (i, row) in self.terminal_rows.iter().enumerate() {
                let g = &row.shape * &xn * (2.0 * mu[n_lin + i]);
                let mut blk = out.rows_mut(off, lay.n);
                blk += g;
            }
        }
        out
    }

    /// Gradient of the `i`-th inequality row with respect to `z`.
    pub fn ineq_gradient(&self, z: &Vector, i: usize) -> Vector {
        let n_lin = self.matrices.n_linear_rows();
        if i < n_lin {
            return self.matrices.ineq_matrix.row(i).transpose();
        }
        let lay = self.layout();
        let row = &self.terminal_rows[i - n_lin];
        let mut g = Vector::zeros(self.n_z());
        let xn = self.terminal_block(z).into_owned();
        g.rows_mut(lay.state_offset(lay.horizon), lay.n).copy_from(&(&row.shape * xn * 2.0));
        g
    }

    /// `L(p) = J(z) + λᵀ(Gz − g) + μᵀh(z)`.
    pub fn lagrangian(&self, p: &PrimalDualState, xi: &Vector) -> f64 {
        self.cost(&p.z, xi)
            + p.lambda.dot(&self.eq_residual(&p.z, xi))
            + p.mu.dot(&self.ineq_values(&p.z))
    }

    /// `Gz − g(ξ)`.
    pub fn eq_residual(&self, z: &Vector, xi: &Vector) -> Vector {
        &self.matrices.eq_matrix * z - self.eq_rhs(xi)
    }

    /// Absolute first input `ν̄ + u₀-block`.
    pub fn first_input(&self, z: &Vector) -> Vector {
        &self.equilibrium.nu_bar + self.layout().input(z, 0)
    }

    /// Absolute predicted terminal state `ξ̄ + x_N-block`.
    pub fn terminal_state(&self, z: &Vector) -> Vector {
        &self.equilibrium.xi_bar + self.terminal_block(z)
    }

    pub fn check_dims(&self, p: &PrimalDualState) -> Result<()> {
        if p.z.len() != self.n_z() || p.lambda.len() != self.n_lambda() || p.mu.len() != self.n_h() {
            return Err(Error::Dimension(format!(
                "primal-dual state ({}, {}, {}) vs problem ({}, {}, {})",
                p.z.len(),
                p.lambda.len(),
                p.mu.len(),
                self.n_z(),
                self.n_lambda(),
                self.n_h()
            )));
        }
        Ok(())
    }
}

/// `∇_z L = Hz + q(ξ) + Gᵀλ + (∂h/∂z)ᵀμ`.
pub fn lagrangian_gradient(compact: &CompactOcp, p: &PrimalDualState, xi: &Vector) -> Vector {
    let m = &compact.matrices;
    &m.cost_hessian * &p.z
        + compact.linear_term(xi)
        + m.eq_matrix.tr_mul(&p.lambda)
        + compact.ineq_jacobian_t_times(&p.z, &p.mu)
}

/// Largest of the stationarity, equality and complementarity residuals.
pub fn kkt_residual(compact: &CompactOcp, p: &PrimalDualState, xi: &Vector) -> Result<f64> {
    compact.check_dims(p)?;
    if let Some((i, v)) = p.mu.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::Contract(format!("multiplier mu[{i}] = {v} is negative")));
    }
    let stat = linalg::vec_inf(&lagrangian_gradient(compact, p, xi));
    let eq = linalg::vec_inf(&compact.eq_residual(&p.z, xi));
    let h = compact.ineq_values(&p.z);
    let comp = h
        .iter()
        .zip(p.mu.iter())
        .map(|(hi, mi)| (-hi).min(*mi).abs())
        .fold(0.0, f64::max);
    Ok(stat.max(eq).max(comp))
}

/// Logs a warning when the stacked Hessian is only semidefinite.
pub fn warn_if_not_strongly_convex(matrices: &OcpMatrices) {
    let min_eig = linalg::min_sym_eigenvalue(&matrices.cost_hessian);
    if min_eig <= 0.0 {
        warn!("stacked cost Hessian is singular (min eigenvalue {min_eig:.3e}); flow convergence relies on the dynamics rows");
    }
}
