//! Terminal ingredients: DARE cost and gain, per-row ellipsoidal shapes,
//! level-set thresholds and terminal-set membership.
//!
//! The shape for row `aᵢ` is a scaled solution of the discrete Lyapunov
//! equation of the terminal closed loop. It satisfies the decrease, cover and
//! definiteness conditions by construction, but is not the volume-maximal
//! ellipsoid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::lti::{discretize, ContinuousPlant, DiscretePlant, Equilibrium, PolytopicConstraints};
use crate::ocp::CostWeights;

const DARE_MAX_ITER: usize = 100_000;

/// Where a terminal row came from.
#[derive(Debug, Clone, PartialEq)]
pub enum RowOrigin {
    /// State row with constant offset `bᵢ`.
    State { offset: f64 },
    /// Input row `cⱼ ν + dⱼ ≤ 0` lifted through the terminal law.
    Input { coeffs: Vector, offset: f64 },
}

/// Row `aᵢ x + bᵢ(r) ≤ 0` over the terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedRow {
    pub coeffs: Vector,
    pub origin: RowOrigin,
}

impl LiftedRow {
    /// `bᵢ(r)`; for lifted input rows `dⱼ + cⱼν̄_r − cⱼKξ̄_r`.
    pub fn offset(&self, eq: &Equilibrium) -> f64 {
        match &self.origin {
            RowOrigin::State { offset } => *offset,
            RowOrigin::Input { coeffs, offset } => offset + coeffs.dot(&eq.nu_bar) - self.coeffs.dot(&eq.xi_bar),
        }
    }

    pub fn value(&self, x: &Vector, eq: &Equilibrium) -> f64 {
        self.coeffs.dot(x) + self.offset(eq)
    }

    /// `aᵢ ξ̄_r + bᵢ(r)`.
    pub fn steady_margin(&self, eq: &Equilibrium) -> f64 {
        self.value(&eq.xi_bar, eq)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalData {
    pub p: Mat,
    pub k: Mat,
    pub shapes: Vec<Mat>,
    pub rows: Vec<LiftedRow>,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalOptions {
    /// `ε = lyapunov_epsilon·‖aᵢ‖²` on the right-hand side of the Lyapunov equation.
    pub lyapunov_epsilon: f64,
}

impl Default for TerminalOptions {
    fn default() -> Self {
        Self { lyapunov_epsilon: 1e-6 }
    }
}

/// Riccati fixed point `P ← τQ + AᵀPA − (AᵀPB+τU)(τR+BᵀPB)⁻¹(BᵀPA+τUᵀ)` and
/// the gain `K = −(τR + BᵀPB)⁻¹(BᵀPA + τUᵀ)`.
pub fn solve_dare(plant: &DiscretePlant, weights: &CostWeights, tau: f64) -> Result<(Mat, Mat)> {
    let (a, b) = (&plant.a, &plant.b);
    let tq = &weights.q * tau;
    let tu = &weights.u * tau;
    let tr = &weights.r * tau;
    let n = plant.n();
    let scale = linalg::norm_inf(&tq).max(1.0);
    let mut p = &tq + Mat::identity(n, n) * (1e-6 * scale);
    // Once the step is small, keep going until it stops shrinking so slow
    // closed loops still reach rounding level.
    let mut settled = false;
    let mut last_change = f64::INFINITY;
    for _ in 0..DARE_MAX_ITER {
        let (next, _) = riccati_step(a, b, &tq, &tu, &tr, &p)?;
        let change = linalg::norm_inf(&(&next - &p));
        let size = linalg::norm_inf(&p);
        p = next;
        settled |= change <= 1e-12 * size;
        if (settled && change >= last_change) || change <= 1e-16 * size || change < 1e-290 {
            let k = gain(a, b, &tu, &tr, &p)?;
            return Ok((p, k));
        }
        last_change = change;
    }
    Err(Error::Synthesis(format!("Riccati iteration did not converge in {DARE_MAX_ITER} steps")))
}

fn riccati_step(a: &Mat, b: &Mat, tq: &Mat, tu: &Mat, tr: &Mat, p: &Mat) -> Result<(Mat, Mat)> {
    let k = gain(a, b, tu, tr, p)?;
    let cross = a.transpose() * p * b + tu;
    let next = tq + a.transpose() * p * a + &cross * &k;
    Ok((linalg::symmetrize(&next), k))
}

fn gain(a: &Mat, b: &Mat, tu: &Mat, tr: &Mat, p: &Mat) -> Result<Mat> {
    let lhs = tr + b.transpose() * p * b;
    let rhs = b.transpose() * p * a + tu.transpose();
    let chol = lhs
        .cholesky()
        .ok_or_else(|| Error::Synthesis("τR + BᵀPB is not positive definite".into()))?;
    Ok(-chol.solve(&rhs))
}

/// `‖AᵀPA − P + (AᵀPB + τU)K + τQ‖∞`.
pub fn dare_residual(plant: &DiscretePlant, weights: &CostWeights, tau: f64, p: &Mat, k: &Mat) -> f64 {
    let (a, b) = (&plant.a, &plant.b);
    let res = a.transpose() * p * a - p + (a.transpose() * p * b + &weights.u * tau) * k + &weights.q * tau;
    linalg::norm_inf(&res)
}

/// State rows unchanged, then every input row lifted to `aⱼ = cⱼK`.
pub fn lift_input_rows(constraints: &PolytopicConstraints, k: &Mat) -> Vec<LiftedRow> {
    let state = constraints.state_rows().iter().map(|row| LiftedRow {
        coeffs: Vector::from_vec(row.coeffs.clone()),
        origin: RowOrigin::State { offset: row.offset },
    });
    let input = constraints.input_rows().iter().map(|row| {
        let c = Vector::from_vec(row.coeffs.clone());
        LiftedRow {
            coeffs: k.tr_mul(&c),
            origin: RowOrigin::Input {
                coeffs: c,
                offset: row.offset,
            },
        }
    });
    state.chain(input).collect()
}

/// Feasible shape for row `a`: solve `ΦᵀS₀Φ − S₀ = −εI` with `Φ = A + BK`,
/// then scale by `β = aS₀⁻¹aᵀ` so that `S − aᵀa ⪰ 0` holds with equality in
/// the direction of `a`.
pub fn shape_matrix(row: &Vector, closed_loop: &Mat, options: &TerminalOptions) -> Result<Mat> {
    let norm2 = row.norm_squared();
    if norm2 == 0.0 {
        return Err(Error::Synthesis("terminal row is identically zero".into()));
    }
    let rho = linalg::spectral_radius(closed_loop);
    if rho >= 1.0 {
        return Err(Error::Synthesis(format!("terminal closed loop is not Schur stable (spectral radius {rho})")));
    }
    let n = closed_loop.nrows();
    let eps = options.lyapunov_epsilon * norm2;
    let s0 = linalg::discrete_lyapunov(closed_loop, &(Mat::identity(n, n) * eps))?;
    let chol = s0
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Synthesis("Lyapunov solution is not positive definite".into()))?;
    let beta = row.dot(&chol.solve(row));
    Ok(linalg::symmetrize(&(s0 * beta)))
}

/// `Γᵢ = (aᵢξ̄_r + bᵢ(r))² / (aᵢ Sᵢ⁻¹ aᵢᵀ)`; requires a strictly negative margin.
pub fn threshold(shape: &Mat, row: &LiftedRow, eq: &Equilibrium) -> Result<f64> {
    let margin = row.steady_margin(eq);
    if !(margin < 0.0) {
        return Err(Error::Inadmissible {
            row: 0,
            margin,
            required: 0.0,
        });
    }
    let chol = shape
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Synthesis("shape matrix is not positive definite".into()))?;
    let spread = row.coeffs.dot(&chol.solve(&row.coeffs));
    Ok(margin * margin / spread)
}

/// `Vᵢ(x, r) = (x − ξ̄_r)ᵀ Sᵢ (x − ξ̄_r)`.
pub fn lyapunov_value(shape: &Mat, x: &Vector, eq: &Equilibrium) -> f64 {
    let d = x - &eq.xi_bar;
    d.dot(&(shape * &d))
}

impl TerminalData {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn closed_loop(&self, plant: &DiscretePlant) -> Mat {
        &plant.a + &plant.b * &self.k
    }

    /// Terminal law `ν̄_r + K(x − ξ̄_r)`.
    pub fn control(&self, x: &Vector, eq: &Equilibrium) -> Vector {
        &eq.nu_bar + &self.k * (x - &eq.xi_bar)
    }

    pub fn thresholds(&self, eq: &Equilibrium) -> Result<Vec<f64>> {
        self.shapes
            .iter()
            .zip(&self.rows)
            .enumerate()
            .map(|(i, (s, row))| {
                threshold(s, row, eq).map_err(|e| match e {
                    Error::Inadmissible { margin, required, .. } => Error::Inadmissible { row: i, margin, required },
                    other => other,
                })
            })
            .collect()
    }

    /// `(Γᵢ − Vᵢ)/Γᵢ` for every row.
    pub fn normalized_margins(&self, x: &Vector, eq: &Equilibrium) -> Result<Vec<f64>> {
        let gammas = self.thresholds(eq)?;
        Ok(self
            .shapes
            .iter()
            .zip(gammas)
            .map(|(s, g)| (g - lyapunov_value(s, x, eq)) / g)
            .collect())
    }

    /// Uniform direction, radius scaled to the boundary of the intersection,
    /// radial fraction `u^{1/n}`. Every returned point is a member.
    pub fn sample_members<R: Rng>(&self, eq: &Equilibrium, count: usize, rng: &mut R) -> Result<Vec<Vector>> {
        let gammas = self.thresholds(eq)?;
        let n = self.p.nrows();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let dir = Vector::from_fn(n, |_, _| gaussian(rng));
            let len = dir.norm();
            if len < 1e-12 {
                continue;
            }
            let dir = dir / len;
            let reach = self
                .shapes
                .iter()
                .zip(&gammas)
                .map(|(s, g)| (g / dir.dot(&(s * &dir))).sqrt())
                .fold(f64::INFINITY, f64::min);
            let frac: f64 = rng.random::<f64>().powf(1.0 / n as f64);
            out.push(&eq.xi_bar + dir * (reach * frac));
        }
        Ok(out)
    }

    /// Residuals of the synthesis invariants.
    pub fn report(&self, plant: &DiscretePlant, weights: &CostWeights) -> SynthesisReport {
        let phi = self.closed_loop(plant);
        let n = phi.nrows();
        let shape_checks = self
            .shapes
            .iter()
            .zip(&self.rows)
            .map(|(s, row)| {
                let a = &row.coeffs;
                let cover = s - a * a.transpose();
                ShapeCheck {
                    min_eigenvalue: linalg::min_sym_eigenvalue(s),
                    decrease_max_eigenvalue: linalg::max_sym_eigenvalue(&(phi.transpose() * s * &phi - s)),
                    cover_min_eigenvalue: linalg::min_sym_eigenvalue(&cover),
                }
            })
            .collect();
        let _ = n;
        SynthesisReport {
            dare_residual: dare_residual(plant, weights, self.tau, &self.p, &self.k),
            p_norm: linalg::norm_inf(&self.p),
            p_min_eigenvalue: linalg::min_sym_eigenvalue(&self.p),
            spectral_radius: linalg::spectral_radius(&phi),
            shape_checks,
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCheck {
    pub min_eigenvalue: f64,
    pub decrease_max_eigenvalue: f64,
    pub cover_min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisReport {
    pub dare_residual: f64,
    pub p_norm: f64,
    pub p_min_eigenvalue: f64,
    pub spectral_radius: f64,
    pub shape_checks: Vec<ShapeCheck>,
}

impl SynthesisReport {
    /// DARE residual relative to `‖P‖∞` and all shape eigen-checks at `tol`.
    pub fn passes(&self, dare_tol: f64, eig_tol: f64) -> bool {
        self.dare_residual <= dare_tol * self.p_norm
            && self.p_min_eigenvalue > 0.0
            && self.spectral_radius < 1.0
            && self.shape_checks.iter().all(|c| {
                c.min_eigenvalue > 0.0 && c.decrease_max_eigenvalue <= eig_tol && c.cover_min_eigenvalue >= -eig_tol
            })
    }
}

/// Terminal membership: `Vᵢ(x, r) ≤ Γᵢ(r)` for every row, plus the smallest
/// normalized margin.
pub fn terminal_membership(x: &Vector, eq: &Equilibrium, data: &TerminalData) -> Result<(bool, f64)> {
    let margins = data.normalized_margins(x, eq)?;
    let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((min >= 0.0, min))
}

/// Full terminal synthesis for one plant.
pub fn synthesize(
    plant: &DiscretePlant,
    weights: &CostWeights,
    constraints: &PolytopicConstraints,
    options: &TerminalOptions,
) -> Result<TerminalData> {
    let (p, k) = solve_dare(plant, weights, plant.tau)?;
    let phi = &plant.a + &plant.b * &k;
    let rows = lift_input_rows(constraints, &k);
    let shapes = rows
        .iter()
        .map(|row| shape_matrix(&row.coeffs, &phi, options))
        .collect::<Result<Vec<_>>>()?;
    Ok(TerminalData {
        p,
        k,
        shapes,
        rows,
        tau: plant.tau,
    })
}

/// Step-size check: with `F = A_c + B_cK`, `E = (A+BK) − (I + τF)` and
/// `Ẽ = EᵀP + PE + 2EᵀPE + τ(FᵀPE + EᵀPF) + 2τ²FᵀPF`, returns whether
/// `ε(Q + KᵀRK) − Ẽ/τ` is positive definite.
pub fn verify_discretization(
    plant: &ContinuousPlant,
    k: &Mat,
    p: &Mat,
    q: &Mat,
    r: &Mat,
    tau: f64,
    epsilon: f64,
) -> Result<bool> {
    let disc = discretize(plant, tau)?;
    let n = plant.n();
    let f = &plant.a + &plant.b * k;
    let e = (&disc.a + &disc.b * k) - (Mat::identity(n, n) + &f * tau);
    let et = e.transpose();
    let ft = f.transpose();
    let e_tilde = &et * p + p * &e + &et * p * &e * 2.0 + (&ft * p * &e + &et * p * &f) * tau + &ft * p * &f * (2.0 * tau * tau);
    let test = (q + k.transpose() * r * k) * epsilon - e_tilde / tau;
    Ok(linalg::min_sym_eigenvalue(&test) > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::ConstraintRow;

    fn scalar_plant(a: f64, b: f64, tau: f64) -> DiscretePlant {
        DiscretePlant {
            a: Mat::from_element(1, 1, a),
            b: Mat::from_element(1, 1, b),
            tau,
        }
    }

    fn scalar_weights(q: f64, r: f64) -> CostWeights {
        CostWeights::new(Mat::from_element(1, 1, q), Mat::zeros(1, 1), Mat::from_element(1, 1, r)).unwrap()
    }

    #[test]
    fn scalar_dare_matches_quadratic_formula() {
        let plant = scalar_plant(1.0, 1.0, 1.0);
        let w = scalar_weights(1.0, 1.0);
        let (p, k) = solve_dare(&plant, &w, 1.0).unwrap();
        // p² = q(r + p) with q = r = 1
        let expected = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - expected).abs() < 1e-10);
        assert!(dare_residual(&plant, &w, 1.0, &p, &k) <= 1e-10);
        assert!((k[(0, 0)] + expected / (1.0 + expected)).abs() < 1e-10);
    }

    #[test]
    fn zero_cost_stable_plant_gives_zero_solution() {
        let plant = scalar_plant(0.5, 1.0, 1.0);
        let w = scalar_weights(0.0, 1.0);
        let (p, k) = solve_dare(&plant, &w, 1.0).unwrap();
        assert!(p[(0, 0)].abs() < 1e-12);
        assert!(k[(0, 0)].abs() < 1e-12);
        assert!(dare_residual(&plant, &w, 1.0, &p, &k) < 1e-12);
    }

    #[test]
    fn scalar_shape_is_feasible() {
        let phi = Mat::from_element(1, 1, 0.5);
        let row = Vector::from_vec(vec![1.0]);
        let s = shape_matrix(&row, &phi, &TerminalOptions::default()).unwrap();
        // β S₀ with S₀ = ε/0.75 and β = 1/S₀ gives S = 1
        assert!((s[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(0.25 * s[(0, 0)] - s[(0, 0)] <= 0.0);
    }

    #[test]
    fn unstable_closed_loop_is_rejected() {
        let phi = Mat::from_element(1, 1, 1.5);
        let row = Vector::from_vec(vec![1.0]);
        assert!(shape_matrix(&row, &phi, &TerminalOptions::default()).is_err());
    }

    #[test]
    fn threshold_unit_case() {
        let row = LiftedRow {
            coeffs: Vector::from_vec(vec![1.0]),
            origin: RowOrigin::State { offset: -1.0 },
        };
        let eq = Equilibrium {
            xi_bar: Vector::zeros(1),
            nu_bar: Vector::zeros(1),
        };
        let g = threshold(&Mat::identity(1, 1), &row, &eq).unwrap();
        assert!((g - 1.0).abs() < 1e-15);
        let boundary = Equilibrium {
            xi_bar: Vector::from_vec(vec![1.0]),
            nu_bar: Vector::zeros(1),
        };
        assert!(threshold(&Mat::identity(1, 1), &row, &boundary).is_err());
    }

    #[test]
    fn zero_gain_lifted_row_is_constant() {
        let cons = PolytopicConstraints::new(1, 1, vec![], vec![ConstraintRow::new(vec![2.0], -3.0)]).unwrap();
        let rows = lift_input_rows(&cons, &Mat::zeros(1, 1));
        let eq = Equilibrium {
            xi_bar: Vector::from_vec(vec![4.0]),
            nu_bar: Vector::from_vec(vec![0.5]),
        };
        assert_eq!(rows[0].coeffs[0], 0.0);
        // value is 2·0.5 − 3 wherever x is
        assert_eq!(rows[0].value(&Vector::from_vec(vec![-7.0]), &eq), -2.0);
        assert_eq!(rows[0].steady_margin(&eq), -2.0);
    }

    #[test]
    fn verify_discretization_tiny_step_passes() {
        let plant = ContinuousPlant::new(
            Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            Mat::from_row_slice(2, 1, &[0.0, 1.0]),
            Mat::from_row_slice(1, 2, &[1.0, 0.0]),
            Mat::zeros(1, 1),
        )
        .unwrap();
        let q = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 0.01]));
        let r = Mat::from_element(1, 1, 0.01);
        let w = CostWeights::new(q.clone(), Mat::zeros(2, 1), r.clone()).unwrap();
        let disc = discretize(&plant, 0.1).unwrap();
        let (p, k) = solve_dare(&disc, &w, 0.1).unwrap();
        for eps in [0.1, 0.5, 0.9] {
            assert!(verify_discretization(&plant, &k, &p, &q, &r, 1e-6, eps).unwrap());
        }
        assert!(!verify_discretization(&plant, &k, &p, &q, &r, 10.0, 0.5).unwrap());
    }
}
