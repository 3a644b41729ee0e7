//! Explicit reference governor: `ṙ = Δ(x_N, r)·ρ(r, γ)`.
//!
//! Steady-state constraint values are affine in the reference,
//! `vᵢ(r) = vᵢ(0) + eᵢ·r`, where `eᵢ` maps the state row through the
//! steady-state state gain (input rows through the input gain). The repulsion
//! term and the admissible projection both work with these reference-space
//! rows.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::lti::{constraint_values, ContinuousPlant, Equilibrium, PolytopicConstraints, SteadyStateMap};
use crate::qp::{solve_active_set, QpProblem};
use crate::terminal::{lyapunov_value, TerminalData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WMode {
    #[default]
    Identity,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErgParams {
    pub kappa: f64,
    pub eta: f64,
    pub delta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub w: Mat,
    pub w_mode: WMode,
}

impl ErgParams {
    pub fn new(kappa: f64, eta: f64, delta: Vec<f64>, zeta: Vec<f64>, w: Mat, w_mode: WMode) -> Result<Self> {
        if !(kappa > 0.0) || !(eta > 0.0) {
            return Err(Error::InvalidModel(format!("kappa and eta must be positive (got {kappa}, {eta})")));
        }
        if delta.len() != zeta.len() {
            return Err(Error::Dimension(format!("{} static margins vs {} influence margins", delta.len(), zeta.len())));
        }
        for (i, (d, z)) in delta.iter().zip(&zeta).enumerate() {
            if !(*d > 0.0 && z > d) {
                return Err(Error::InvalidModel(format!("row {i}: need zeta > delta > 0, got zeta {z}, delta {d}")));
            }
        }
        if !linalg::is_symmetric(&w, 1e-12) || w.clone().cholesky().is_none() {
            return Err(Error::InvalidModel("W must be symmetric positive definite".into()));
        }
        Ok(Self {
            kappa,
            eta,
            delta,
            zeta,
            w,
            w_mode,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceState {
    pub r: Vector,
}

/// Reference-space view of the constraint rows plus the terminal data.
#[derive(Debug, Clone)]
pub struct Governor {
    pub params: ErgParams,
    pub steady: SteadyStateMap,
    pub constraints: PolytopicConstraints,
    pub terminal: TerminalData,
    /// `eᵢ` as rows of an `n_h × l` matrix.
    pub row_gradients: Mat,
    /// `vᵢ(0)`.
    pub row_offsets: Vector,
}

impl Governor {
    pub fn new(plant: &ContinuousPlant, constraints: PolytopicConstraints, terminal: TerminalData, params: ErgParams) -> Result<Self> {
        let steady = SteadyStateMap::new(plant)?;
        let nh = constraints.total();
        if params.delta.len() != nh {
            return Err(Error::Dimension(format!("{} margins for {nh} constraint rows", params.delta.len())));
        }
        if params.w.nrows() != plant.l() {
            return Err(Error::Dimension(format!("W is {}x{}, reference has {} entries", params.w.nrows(), params.w.ncols(), plant.l())));
        }
        let state = constraints.state_matrix() * &steady.state_gain;
        let input = constraints.input_matrix() * &steady.input_gain;
        let mut grads = Mat::zeros(nh, plant.l());
        let cx = constraints.n_state_rows();
        grads.rows_mut(0, cx).copy_from(&state);
        grads.rows_mut(cx, nh - cx).copy_from(&input);
        let zero = steady.equilibrium(&Vector::zeros(plant.l()));
        let offsets = constraint_values(&constraints, &zero.xi_bar, &zero.nu_bar);
        Ok(Self {
            params,
            steady,
            constraints,
            terminal,
            row_gradients: grads,
            row_offsets: offsets,
        })
    }

    pub fn equilibrium(&self, r: &Vector) -> Equilibrium {
        self.steady.equilibrium(r)
    }

    /// `vᵢ(r)`, the constraint values at the steady state of `r`.
    pub fn steady_values(&self, r: &Vector) -> Vector {
        &self.row_gradients * r + &self.row_offsets
    }

    /// Whether every steady-state value clears its static margin.
    pub fn is_admissible(&self, r: &Vector) -> bool {
        self.steady_values(r).iter().zip(&self.params.delta).all(|(v, d)| *v <= -d)
    }

    /// Normalized terminal margins `(Γᵢ − Vᵢ)/Γᵢ` for the absolute state `x_n`.
    pub fn terminal_margins(&self, x_n: &Vector, r: &Vector) -> Result<Vec<f64>> {
        self.terminal.normalized_margins(x_n, &self.equilibrium(r))
    }

    /// `Δ = κ·max(minᵢ (Γᵢ − Vᵢ)/Γᵢ, 0)`.
    pub fn safety_margin(&self, x_n: &Vector, r: &Vector) -> Result<f64> {
        let min = self
            .terminal_margins(x_n, r)?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        Ok(self.params.kappa * min.max(0.0))
    }

    /// Row with the smallest normalized margin.
    fn binding_row(&self, x_n: &Vector, r: &Vector) -> Result<usize> {
        let margins = self.terminal_margins(x_n, r)?;
        Ok(margins
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0))
    }

    /// `W = (MᵀS_I M)⁻¹` with `M` the steady-state state gain; identity when singular.
    pub fn adaptive_weight(&self, row: usize) -> Mat {
        let m = &self.steady.state_gain;
        let l = m.ncols();
        let inner = m.transpose() * &self.terminal.shapes[row] * m;
        match inner.cholesky() {
            Some(ch) => linalg::symmetrize(&ch.inverse()),
            None => Mat::identity(l, l),
        }
    }

    /// `ρ = (ρ_γ + ρ_R)/max(‖ρ_γ + ρ_R‖, 1)`.
    pub fn navigation_field(&self, r: &Vector, gamma: &Vector, w: &Mat) -> Vector {
        let diff = gamma - r;
        let wnorm = diff.dot(&(w * &diff)).max(0.0).sqrt();
        let sqrt_w = sym_sqrt(w);
        let attraction = sqrt_w * &diff / wnorm.max(self.params.eta);
        let values = self.steady_values(r);
        let mut repulsion = Vector::zeros(r.len());
        for i in 0..values.len() {
            let (d, z) = (self.params.delta[i], self.params.zeta[i]);
            let weight = (z + values[i]).max(0.0) / (z - d);
            if weight == 0.0 {
                continue;
            }
            let e = self.row_gradients.row(i).transpose();
            let len = e.norm();
            if len == 0.0 {
                continue;
            }
            repulsion -= e * (weight / len);
        }
        let rho = attraction + repulsion;
        let n = rho.norm();
        rho / n.max(1.0)
    }

    /// `ṙ = Δ(x_N, r)·ρ(r, γ)`.
    pub fn reference_derivative(&self, x_n: &Vector, r: &Vector, gamma: &Vector) -> Result<Vector> {
        let delta = self.safety_margin(x_n, r)?;
        if delta == 0.0 {
            return Ok(Vector::zeros(r.len()));
        }
        let w = match self.params.w_mode {
            WMode::Identity => self.params.w.clone(),
            WMode::Adaptive => self.adaptive_weight(self.binding_row(x_n, r)?),
        };
        Ok(self.navigation_field(r, gamma, &w) * delta)
    }

    /// Same as `reference_derivative` with the terminal block given in
    /// coordinates shifted by the steady state of `r`.
    pub fn reference_derivative_shifted(&self, chi_n: &Vector, r: &Vector, gamma: &Vector) -> Vector {
        let eq = self.equilibrium(r);
        let x_n = &eq.xi_bar + chi_n;
        self.reference_derivative(&x_n, r, gamma)
            .unwrap_or_else(|_| Vector::zeros(r.len()))
    }

    /// Closest strictly admissible reference to `γ` in the `W`-norm.
    pub fn project_reference(&self, gamma: &Vector) -> Result<Vector> {
        project_affine(&self.row_gradients, &self.row_offsets, &self.params.delta, &self.params.w, gamma)
    }

    /// Largest `Vᵢ/Γᵢ` over the rows, for diagnostics.
    pub fn worst_level_ratio(&self, x_n: &Vector, r: &Vector) -> Result<f64> {
        let eq = self.equilibrium(r);
        let gammas = self.terminal.thresholds(&eq)?;
        Ok(self
            .terminal
            .shapes
            .iter()
            .zip(gammas)
            .map(|(s, g)| lyapunov_value(s, x_n, &eq) / g)
            .fold(0.0, f64::max))
    }
}

/// `argmin ‖r − γ‖²_W` over `E r + v₀ ≤ −δ`. Rows with `eᵢ = 0` are checked
/// separately.
pub fn project_affine(grads: &Mat, offsets: &Vector, delta: &[f64], w: &Mat, gamma: &Vector) -> Result<Vector> {
    let l = gamma.len();
    let mut keep = Vec::new();
    for i in 0..grads.nrows() {
        if grads.row(i).norm() == 0.0 {
            if offsets[i] > -delta[i] {
                return Err(Error::EmptyReferenceSet);
            }
        } else {
            keep.push(i);
        }
    }
    let c = Mat::from_fn(keep.len(), l, |k, j| grads[(keep[k], j)]);
    let off = Vector::from_iterator(keep.len(), keep.iter().map(|&i| offsets[i] + delta[i]));
    if (&c * gamma + &off).iter().all(|v| *v <= 0.0) {
        return Ok(gamma.clone());
    }
    let problem = QpProblem::new(w * 2.0, -(w * gamma) * 2.0, Mat::zeros(0, l), Vector::zeros(0), c, off)?;
    match solve_active_set(&problem, Some(gamma)) {
        Ok(sol) => Ok(sol.z),
        Err(Error::QpInfeasible(_)) => Err(Error::EmptyReferenceSet),
        Err(e) => Err(e),
    }
}

fn sym_sqrt(w: &Mat) -> Mat {
    let eig = linalg::symmetrize(w).symmetric_eigen();
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::discretize;
    use crate::ocp::CostWeights;
    use crate::terminal::{synthesize, TerminalOptions};

    fn di_governor(delta: f64, zeta: f64, nu_min: f64) -> Governor {
        let plant = ContinuousPlant::new(
            Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            Mat::from_row_slice(2, 1, &[0.0, 1.0]),
            Mat::from_row_slice(1, 2, &[1.0, 0.0]),
            Mat::zeros(1, 1),
        )
        .unwrap();
        let cons = PolytopicConstraints::from_boxes(&[(0.0, 20.5), (-10.0, 10.0)], &[(nu_min, 30.0)]).unwrap();
        let w = CostWeights::new(Mat::from_diagonal(&Vector::from_vec(vec![1.0, 0.01])), Mat::zeros(2, 1), Mat::from_element(1, 1, 0.01)).unwrap();
        let disc = discretize(&plant, 0.1).unwrap();
        let term = synthesize(&disc, &w, &cons, &TerminalOptions::default()).unwrap();
        let nh = cons.total();
        let params = ErgParams::new(100.0, 1e-3, vec![delta; nh], vec![zeta; nh], Mat::identity(1, 1), WMode::Identity).unwrap();
        Governor::new(&plant, cons, term, params).unwrap()
    }

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    #[test]
    fn safety_margin_center_boundary_exterior() {
        let g = di_governor(0.05, 0.2, -10.0);
        let r = v(&[10.0]);
        let eq = g.equilibrium(&r);
        assert!((g.safety_margin(&eq.xi_bar, &r).unwrap() - 100.0).abs() < 1e-12);
        // boundary of the binding ellipsoid along a random direction
        let thr = g.terminal.thresholds(&eq).unwrap();
        let dir = v(&[0.3, -1.0]);
        let reach = g
            .terminal
            .shapes
            .iter()
            .zip(&thr)
            .map(|(s, t)| (t / dir.dot(&(s * &dir))).sqrt())
            .fold(f64::INFINITY, f64::min);
        let edge = &eq.xi_bar + &dir * reach;
        assert!(g.safety_margin(&edge, &r).unwrap().abs() < 1e-9);
        let outside = &eq.xi_bar + &dir * (2.0 * reach);
        assert_eq!(g.safety_margin(&outside, &r).unwrap(), 0.0);
    }

    #[test]
    fn navigation_field_cases() {
        let g = di_governor(0.05, 0.2, -10.0);
        let w = Mat::identity(1, 1);
        assert_eq!(g.navigation_field(&v(&[10.0]), &v(&[10.0]), &w), v(&[0.0]));
        assert!((g.navigation_field(&v(&[10.0]), &v(&[15.0]), &w)[0] - 1.0).abs() < 1e-15);
        // x₁ ≤ 20.5 has value r − 20.5; put it at −ζ/2
        let r = v(&[20.5 - 0.1]);
        let rho_far_target = g.navigation_field(&r, &r, &w);
        let expected = -(0.1 / (0.2 - 0.05));
        assert!((rho_far_target[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn derivative_is_bounded_by_kappa() {
        let g = di_governor(0.05, 0.2, -10.0);
        let r = v(&[3.0]);
        let eq = g.equilibrium(&r);
        let d = g.reference_derivative(&eq.xi_bar, &r, &v(&[20.0])).unwrap();
        assert!(d.norm() <= 100.0 + 1e-12);
        assert!((d[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn projection_clamps_to_interval() {
        let g = di_governor(0.05, 0.2, -10.0);
        assert!((g.project_reference(&v(&[25.0])).unwrap()[0] - 20.45).abs() < 1e-10);
        assert!((g.project_reference(&v(&[-5.0])).unwrap()[0] - 0.05).abs() < 1e-10);
        assert_eq!(g.project_reference(&v(&[7.0])).unwrap()[0], 7.0);
    }

    #[test]
    fn empty_reference_set() {
        let g = di_governor(0.05, 0.2, -10.0);
        let grads = g.row_gradients.clone();
        let offsets = g.row_offsets.clone();
        assert!(matches!(
            project_affine(&grads, &offsets, &vec![30.0; grads.nrows()], &Mat::identity(1, 1), &v(&[1.0])),
            Err(Error::EmptyReferenceSet)
        ));
    }
}
