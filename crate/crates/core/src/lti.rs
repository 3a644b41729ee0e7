//! Continuous LTI plants, polytopic constraints, exact discretization and the
//! reference-to-equilibrium map.

use log::warn;
use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

/// `ξ̇ = A_c ξ + B_c ν`, `ψ = C_c ξ + D_c ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousPlant {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
}

impl ContinuousPlant {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::Dimension(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols())));
        }
        let m = b.ncols();
        let l = c.nrows();
        if m == 0 || l == 0 {
            return Err(Error::Dimension("B and C must be nonempty".into()));
        }
        if b.nrows() != n || c.ncols() != n || d.nrows() != l || d.ncols() != m {
            return Err(Error::Dimension(format!(
                "inconsistent shapes: A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                a.nrows(), a.ncols(), b.nrows(), b.ncols(), c.nrows(), c.ncols(), d.nrows(), d.ncols()
            )));
        }
        let plant = Self { a, b, c, d };
        for issue in plant.structural_issues() {
            warn!("{issue}");
        }
        Ok(plant)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn l(&self) -> usize {
        self.c.nrows()
    }

    pub fn output(&self, xi: &Vector, nu: &Vector) -> Vector {
        &self.c * xi + &self.d * nu
    }

    pub fn derivative(&self, xi: &Vector, nu: &Vector) -> Vector {
        &self.a * xi + &self.b * nu
    }

    /// PBH rank tests at every eigenvalue with nonnegative real part.
    /// Returns a human-readable list of failures (stabilizability of
    /// `(A_c, B_c)`, detectability of `(A_c, C_c)`); empty when both hold.
    pub fn structural_issues(&self) -> Vec<String> {
        let n = self.n();
        let mut issues = Vec::new();
        let to_complex = |m: &Mat| m.map(|v| Complex::new(v, 0.0));
        let ac = to_complex(&self.a);
        let bc = to_complex(&self.b);
        let cc = to_complex(&self.c);
        for lam in linalg::eigenvalues(&self.a) {
            if lam.re < -1e-9 {
                continue;
            }
            let shifted = nalgebra::DMatrix::<Complex<f64>>::identity(n, n) * lam - &ac;
            let mut ctrl = nalgebra::DMatrix::<Complex<f64>>::zeros(n, n + self.m());
            ctrl.view_mut((0, 0), (n, n)).copy_from(&shifted);
            ctrl.view_mut((0, n), (n, self.m())).copy_from(&bc);
            if complex_rank(&ctrl) < n {
                issues.push(format!("(A_c, B_c) fails the PBH stabilizability test at eigenvalue {lam}"));
            }
            let mut obs = nalgebra::DMatrix::<Complex<f64>>::zeros(n + self.l(), n);
            obs.view_mut((0, 0), (n, n)).copy_from(&shifted);
            obs.view_mut((n, 0), (self.l(), n)).copy_from(&cc);
            if complex_rank(&obs) < n {
                issues.push(format!("(A_c, C_c) fails the PBH detectability test at eigenvalue {lam}"));
            }
        }
        issues
    }
}

fn complex_rank(m: &nalgebra::DMatrix<Complex<f64>>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0f64, |a, s| a.max(*s));
    sv.iter().filter(|s| **s > 1e-9 * smax.max(1.0)).count()
}

/// Zero-order-hold discretization `x⁺ = A x + B u` with step `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePlant {
    pub a: Mat,
    pub b: Mat,
    pub tau: f64,
}

impl DiscretePlant {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }
}

/// Exact discretization: `A = e^{A_c τ}` and `B = ∫₀^τ e^{A_c t} dt B_c`, both
/// read off the exponential of the augmented matrix `[[A_c, B_c], [0, 0]]·τ`.
pub fn discretize(plant: &ContinuousPlant, tau: f64) -> Result<DiscretePlant> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidModel(format!("discretization step must be positive, got {tau}")));
    }
    let n = plant.n();
    let m = plant.m();
    let mut aug = Mat::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&plant.a * tau));
    aug.view_mut((0, n), (n, m)).copy_from(&(&plant.b * tau));
    let e = linalg::expm(&aug);
    let a = e.view((0, 0), (n, n)).into_owned();
    let b = e.view((0, n), (n, m)).into_owned();
    if !linalg::all_finite(&a) || !linalg::all_finite(&b) {
        return Err(Error::Discretization { tau });
    }
    Ok(DiscretePlant { a, b, tau })
}

/// One affine inequality `coeffs · v + offset ≤ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub coeffs: Vec<f64>,
    pub offset: f64,
}

impl ConstraintRow {
    pub fn new(coeffs: Vec<f64>, offset: f64) -> Self {
        Self { coeffs, offset }
    }

    pub fn eval(&self, v: &Vector) -> f64 {
        self.coeffs.iter().zip(v.iter()).map(|(a, x)| a * x).sum::<f64>() + self.offset
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// State rows `aᵢ ξ + bᵢ ≤ 0` and input rows `cⱼ ν + dⱼ ≤ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopicConstraints {
    state_rows: Vec<ConstraintRow>,
    input_rows: Vec<ConstraintRow>,
    n: usize,
    m: usize,
}

impl PolytopicConstraints {
    pub fn new(n: usize, m: usize, state_rows: Vec<ConstraintRow>, input_rows: Vec<ConstraintRow>) -> Result<Self> {
        for (kind, rows, dim) in [("state", &state_rows, n), ("input", &input_rows, m)] {
            for (i, row) in rows.iter().enumerate() {
                if row.coeffs.len() != dim {
                    return Err(Error::Dimension(format!(
                        "{kind} row {i} has {} coefficients, expected {dim}",
                        row.coeffs.len()
                    )));
                }
                if row.norm() == 0.0 {
                    return Err(Error::InvalidModel(format!("{kind} row {i} is identically zero")));
                }
                if !row.offset.is_finite() || row.coeffs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidModel(format!("{kind} row {i} has non-finite entries")));
                }
            }
        }
        Ok(Self { state_rows, input_rows, n, m })
    }

    /// Expands per-component `[lo, hi]` intervals into two rows each
    /// (`v − hi ≤ 0`, then `−v + lo ≤ 0`). Infinite bounds are skipped.
    pub fn from_boxes(state_box: &[(f64, f64)], input_box: &[(f64, f64)]) -> Result<Self> {
        let expand = |bounds: &[(f64, f64)]| -> Result<Vec<ConstraintRow>> {
            let dim = bounds.len();
            let mut rows = Vec::new();
            for (k, &(lo, hi)) in bounds.iter().enumerate() {
                if lo.is_nan() || hi.is_nan() || !(lo < hi) {
                    return Err(Error::InvalidModel(format!("box component {k} has empty interval [{lo}, {hi}]")));
                }
                if hi.is_finite() {
                    let mut c = vec![0.0; dim];
                    c[k] = 1.0;
                    rows.push(ConstraintRow::new(c, -hi));
                }
                if lo.is_finite() {
                    let mut c = vec![0.0; dim];
                    c[k] = -1.0;
                    rows.push(ConstraintRow::new(c, lo));
                }
            }
            Ok(rows)
        };
        Self::new(state_box.len(), input_box.len(), expand(state_box)?, expand(input_box)?)
    }

    pub fn state_rows(&self) -> &[ConstraintRow] {
        &self.state_rows
    }

    pub fn input_rows(&self) -> &[ConstraintRow] {
        &self.input_rows
    }

    pub fn n_state_rows(&self) -> usize {
        self.state_rows.len()
    }

    pub fn n_input_rows(&self) -> usize {
        self.input_rows.len()
    }

    /// `n_h = c_ξ + c_ν`.
    pub fn total(&self) -> usize {
        self.state_rows.len() + self.input_rows.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// State-row matrix `[a₁; …; a_{c_ξ}]`.
    pub fn state_matrix(&self) -> Mat {
        rows_matrix(&self.state_rows, self.n)
    }

    /// Input-row matrix `[c₁; …; c_{c_ν}]`.
    pub fn input_matrix(&self) -> Mat {
        rows_matrix(&self.input_rows, self.m)
    }

    /// Euclidean norm of every stacked row, state rows first.
    pub fn row_norms(&self) -> Vec<f64> {
        self.state_rows.iter().chain(&self.input_rows).map(ConstraintRow::norm).collect()
    }
}

fn rows_matrix(rows: &[ConstraintRow], dim: usize) -> Mat {
    Mat::from_fn(rows.len(), dim, |i, j| rows[i].coeffs[j])
}

/// Stacked constraint values: every state row at `xi`, then every input row at `nu`.
pub fn constraint_values(constraints: &PolytopicConstraints, xi: &Vector, nu: &Vector) -> Vector {
    let vals: Vec<f64> = constraints
        .state_rows
        .iter()
        .map(|r| r.eval(xi))
        .chain(constraints.input_rows.iter().map(|r| r.eval(nu)))
        .collect();
    Vector::from_vec(vals)
}

/// Steady state `(ξ̄_γ, ν̄_γ)` for an output reference `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub xi_bar: Vector,
    pub nu_bar: Vector,
}

/// The linear map `γ ↦ (ξ̄_γ, ν̄_γ)`, stored column-wise so it can also serve
/// as the reference-space Jacobian of steady-state constraint values.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateMap {
    /// `n × l`: `ξ̄_γ = state_gain · γ`.
    pub state_gain: Mat,
    /// `m × l`: `ν̄_γ = input_gain · γ`.
    pub input_gain: Mat,
}

impl SteadyStateMap {
    /// Builds the map by least-squares solves of
    /// `[[A_c, B_c], [C_c, D_c]] · [ξ̄; ν̄] = [0; eᵢ]` for each unit output.
    pub fn new(plant: &ContinuousPlant) -> Result<Self> {
        let (n, m, l) = (plant.n(), plant.m(), plant.l());
        let mut state_gain = Mat::zeros(n, l);
        let mut input_gain = Mat::zeros(m, l);
        for k in 0..l {
            let mut unit = Vector::zeros(l);
            unit[k] = 1.0;
            let eq = solve_stacked(plant, &unit)?;
            state_gain.set_column(k, &eq.xi_bar);
            input_gain.set_column(k, &eq.nu_bar);
        }
        Ok(Self { state_gain, input_gain })
    }

    pub fn equilibrium(&self, gamma: &Vector) -> Equilibrium {
        Equilibrium {
            xi_bar: &self.state_gain * gamma,
            nu_bar: &self.input_gain * gamma,
        }
    }
}

fn stacked_matrix(plant: &ContinuousPlant) -> Mat {
    let (n, m, l) = (plant.n(), plant.m(), plant.l());
    let mut s = Mat::zeros(n + l, n + m);
    s.view_mut((0, 0), (n, n)).copy_from(&plant.a);
    s.view_mut((0, n), (n, m)).copy_from(&plant.b);
    s.view_mut((n, 0), (l, n)).copy_from(&plant.c);
    s.view_mut((n, n), (l, m)).copy_from(&plant.d);
    s
}

fn solve_stacked(plant: &ContinuousPlant, gamma: &Vector) -> Result<Equilibrium> {
    let (n, m, l) = (plant.n(), plant.m(), plant.l());
    if gamma.len() != l {
        return Err(Error::Dimension(format!("reference has {} entries, expected {l}", gamma.len())));
    }
    let s = stacked_matrix(plant);
    let mut rhs = Vector::zeros(n + l);
    rhs.rows_mut(n, l).copy_from(gamma);
    let svd = s.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, v| a.max(*v));
    let sol = svd
        .solve(&rhs, 1e-13 * smax)
        .map_err(|e| Error::InvalidModel(format!("stacked steady-state solve failed: {e}")))?;
    let eq = Equilibrium {
        xi_bar: sol.rows(0, n).into_owned(),
        nu_bar: sol.rows(n, m).into_owned(),
    };
    let (dyn_res, out_res) = equilibrium_residuals(plant, &eq, gamma);
    let dyn_tol = 1e-10 * (1.0 + linalg::vec_inf(&eq.xi_bar));
    let out_tol = 1e-10 * (1.0 + linalg::vec_inf(gamma));
    if dyn_res > dyn_tol || out_res > out_tol {
        return Err(Error::NoEquilibrium { residual: dyn_res.max(out_res) });
    }
    Ok(eq)
}

/// `(‖A_c ξ̄ + B_c ν̄‖∞, ‖C_c ξ̄ + D_c ν̄ − γ‖∞)`.
pub fn equilibrium_residuals(plant: &ContinuousPlant, eq: &Equilibrium, gamma: &Vector) -> (f64, f64) {
    let dyn_res = linalg::vec_inf(&plant.derivative(&eq.xi_bar, &eq.nu_bar));
    let out_res = linalg::vec_inf(&(plant.output(&eq.xi_bar, &eq.nu_bar) - gamma));
    (dyn_res, out_res)
}

/// Solves the stacked steady-state system for `γ`. `A_c` may be singular.
pub fn equilibrium_map(plant: &ContinuousPlant, gamma: &Vector) -> Result<Equilibrium> {
    solve_stacked(plant, gamma)
}

/// Static safety margins `δᵢ > 0`, one per stacked constraint row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceAdmissibility {
    pub delta: Vec<f64>,
}

impl ReferenceAdmissibility {
    pub fn new(delta: Vec<f64>) -> Result<Self> {
        if let Some((i, d)) = delta.iter().enumerate().find(|(_, d)| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidModel(format!("static margin {i} must be positive, got {d}")));
        }
        Ok(Self { delta })
    }

    /// Index and value of the first row whose steady-state margin is too thin.
    pub fn first_violation(&self, values: &Vector) -> Option<(usize, f64)> {
        values
            .iter()
            .zip(&self.delta)
            .enumerate()
            .find(|(_, (v, d))| **v > -**d)
            .map(|(i, (v, _))| (i, *v))
    }
}

/// True iff every stacked constraint value at `(ξ̄_γ, ν̄_γ)` is at most `−δᵢ`.
pub fn is_strictly_admissible(
    plant: &ContinuousPlant,
    constraints: &PolytopicConstraints,
    admissibility: &ReferenceAdmissibility,
    gamma: &Vector,
) -> Result<bool> {
    if admissibility.delta.len() != constraints.total() {
        return Err(Error::Dimension(format!(
            "{} static margins for {} constraint rows",
            admissibility.delta.len(),
            constraints.total()
        )));
    }
    let eq = equilibrium_map(plant, gamma)?;
    let values = constraint_values(constraints, &eq.xi_bar, &eq.nu_bar);
    Ok(admissibility.first_violation(&values).is_none())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_integrator() -> ContinuousPlant {
        ContinuousPlant::new(
            Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            Mat::from_row_slice(2, 1, &[0.0, 1.0]),
            Mat::from_row_slice(1, 2, &[1.0, 0.0]),
            Mat::zeros(1, 1),
        )
        .unwrap()
    }

    fn di_constraints(nu_min: f64) -> PolytopicConstraints {
        PolytopicConstraints::from_boxes(&[(0.0, 20.5), (-10.0, 10.0)], &[(nu_min, 30.0)]).unwrap()
    }

    #[test]
    fn double_integrator_discretization_is_exact() {
        let d = discretize(&double_integrator(), 0.1).unwrap();
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = Mat::from_row_slice(2, 1, &[0.005, 0.1]);
        assert!(linalg::max_abs(&(d.a - a)) < 1e-15);
        assert!(linalg::max_abs(&(d.b - b)) < 1e-15);
    }

    #[test]
    fn tiny_step_is_near_identity() {
        let d = discretize(&double_integrator(), 1e-12).unwrap();
        assert!(linalg::max_abs(&(d.a - Mat::identity(2, 2))) < 1e-10);
        assert!(linalg::max_abs(&d.b) < 1e-10);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(discretize(&double_integrator(), 0.0).is_err());
        assert!(discretize(&double_integrator(), -1.0).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let r = ContinuousPlant::new(Mat::zeros(2, 2), Mat::zeros(3, 1), Mat::zeros(1, 2), Mat::zeros(1, 1));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn double_integrator_equilibrium() {
        let eq = equilibrium_map(&double_integrator(), &Vector::from_vec(vec![20.0])).unwrap();
        assert!((eq.xi_bar[0] - 20.0).abs() < 1e-12);
        assert!(eq.xi_bar[1].abs() < 1e-12);
        assert!(eq.nu_bar[0].abs() < 1e-12);
        let zero = equilibrium_map(&double_integrator(), &Vector::zeros(1)).unwrap();
        assert_eq!(linalg::vec_inf(&zero.xi_bar), 0.0);
        assert_eq!(linalg::vec_inf(&zero.nu_bar), 0.0);
    }

    #[test]
    fn inconsistent_reference_has_no_equilibrium() {
        // ψ = ξ₂ must be zero at any equilibrium of the double integrator.
        let plant = ContinuousPlant::new(
            Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            Mat::from_row_slice(2, 1, &[0.0, 1.0]),
            Mat::from_row_slice(1, 2, &[0.0, 1.0]),
            Mat::zeros(1, 1),
        )
        .unwrap();
        let err = equilibrium_map(&plant, &Vector::from_vec(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::NoEquilibrium { .. }));
    }

    #[test]
    fn constraint_values_double_integrator() {
        let cons = PolytopicConstraints::new(
            2,
            1,
            vec![ConstraintRow::new(vec![1.0, 0.0], -20.5)],
            vec![],
        )
        .unwrap();
        let v = constraint_values(&cons, &Vector::zeros(2), &Vector::zeros(1));
        assert_eq!(v[0], -20.5);
        let v = constraint_values(&cons, &Vector::from_vec(vec![20.5, 0.0]), &Vector::zeros(1));
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn zero_rows_are_rejected() {
        let r = PolytopicConstraints::new(2, 1, vec![ConstraintRow::new(vec![0.0, 0.0], 1.0)], vec![]);
        assert!(r.is_err());
    }

    #[test]
    fn box_expansion_order() {
        let cons = di_constraints(-10.0);
        assert_eq!(cons.total(), 6);
        assert_eq!(cons.state_rows()[0], ConstraintRow::new(vec![1.0, 0.0], -20.5));
        assert_eq!(cons.state_rows()[1], ConstraintRow::new(vec![-1.0, 0.0], 0.0));
        assert_eq!(cons.input_rows()[1], ConstraintRow::new(vec![-1.0], -10.0));
    }

    #[test]
    fn admissibility_cases() {
        let plant = double_integrator();
        let cons = di_constraints(-10.0);
        let adm = ReferenceAdmissibility::new(vec![0.05; 6]).unwrap();
        let g = |v: f64| Vector::from_vec(vec![v]);
        assert!(is_strictly_admissible(&plant, &cons, &adm, &g(20.0)).unwrap());
        // margins 0.5, 20, 10, 10, 30, 10
        let eq = equilibrium_map(&plant, &g(20.0)).unwrap();
        let vals = constraint_values(&cons, &eq.xi_bar, &eq.nu_bar);
        let expected = [-0.5, -20.0, -10.0, -10.0, -30.0, -10.0];
        for (v, e) in vals.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!(!is_strictly_admissible(&plant, &cons, &adm, &g(20.5)).unwrap());
        assert!(!is_strictly_admissible(&plant, &cons, &adm, &g(-1.0)).unwrap());
    }

    #[test]
    fn zero_margin_rejected() {
        assert!(ReferenceAdmissibility::new(vec![0.1, 0.0]).is_err());
    }
}
