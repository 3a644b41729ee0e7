//! Reference solvers for small convex QPs
//! `min ½zᵀHz + qᵀz  s.t.  Gz = g,  Cz + c ≤ 0`.
//!
//! `solve_enumerate` tries every active subset and is exact up to round-off;
//! `solve_active_set` is a primal active-set method for larger row counts.

use std::collections::HashSet;

use log::debug;

use crate::error::{Error, Result};
use crate::flow::PrimalDualState;
use crate::linalg::{self, Mat, Vector};
use crate::ocp::CompactOcp;

pub const ENUMERATION_LIMIT: usize = 14;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: Mat,
    pub linear: Vector,
    pub eq_matrix: Mat,
    pub eq_rhs: Vector,
    pub ineq_matrix: Mat,
    pub ineq_offset: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: Vector,
    pub lambda: Vector,
    pub mu: Vector,
    pub active_set: Vec<usize>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn to_primal_dual(&self) -> PrimalDualState {
        PrimalDualState {
            z: self.z.clone(),
            lambda: self.lambda.clone(),
            mu: self.mu.clone(),
        }
    }
}

impl QpProblem {
    pub fn new(hessian: Mat, linear: Vector, eq_matrix: Mat, eq_rhs: Vector, ineq_matrix: Mat, ineq_offset: Vector) -> Result<Self> {
        let n = hessian.nrows();
        let ok = hessian.is_square()
            && linear.len() == n
            && eq_matrix.ncols() == n
            && eq_matrix.nrows() == eq_rhs.len()
            && ineq_matrix.ncols() == n
            && ineq_matrix.nrows() == ineq_offset.len();
        if !ok {
            return Err(Error::Dimension("inconsistent QP data".into()));
        }
        if !linalg::is_symmetric(&hessian, 1e-10) {
            return Err(Error::Cost("QP Hessian is not symmetric".into()));
        }
        Ok(Self {
            hessian,
            linear,
            eq_matrix,
            eq_rhs,
            ineq_matrix,
            ineq_offset,
        })
    }

    /// The compact OCP at measured state `xi`; only linear rows are supported.
    pub fn from_compact(compact: &CompactOcp, xi: &Vector) -> Result<Self> {
        if !compact.terminal_rows.is_empty() {
            return Err(Error::Contract("the QP oracle handles linear rows only".into()));
        }
        let m = &compact.matrices;
        Self::new(
            m.cost_hessian.clone(),
            compact.linear_term(xi),
            m.eq_matrix.clone(),
            compact.eq_rhs(xi),
            m.ineq_matrix.clone(),
            compact.ineq_offset.clone(),
        )
    }

    pub fn n(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn n_eq(&self) -> usize {
        self.eq_matrix.nrows()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_matrix.nrows()
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    pub fn ineq_values(&self, z: &Vector) -> Vector {
        &self.ineq_matrix * z + &self.ineq_offset
    }

    /// Largest of stationarity, equality, primal and dual infeasibility and
    /// complementarity.
    pub fn kkt_residual(&self, z: &Vector, lambda: &Vector, mu: &Vector) -> f64 {
        let stat = &self.hessian * z + &self.linear + self.eq_matrix.tr_mul(lambda) + self.ineq_matrix.tr_mul(mu);
        let eq = &self.eq_matrix * z - &self.eq_rhs;
        let h = self.ineq_values(z);
        let mut r = linalg::vec_inf(&stat).max(linalg::vec_inf(&eq));
        for (hi, mi) in h.iter().zip(mu.iter()) {
            r = r.max(hi.max(0.0)).max((-mi).max(0.0)).max((hi * mi).abs());
        }
        r
    }

    /// Linear independence of the equality rows and the given inequality rows.
    pub fn licq_holds(&self, active: &[usize]) -> bool {
        let rows = self.n_eq() + active.len();
        if rows == 0 {
            return true;
        }
        let mut a = Mat::zeros(rows, self.n());
        a.rows_mut(0, self.n_eq()).copy_from(&self.eq_matrix);
        for (k, &i) in active.iter().enumerate() {
            a.row_mut(self.n_eq() + k).copy_from(&self.ineq_matrix.row(i));
        }
        linalg::rank(&a, 1e-10) == rows
    }

    /// Solves the equality-constrained problem with rows `working` treated as
    /// equalities. Returns `None` when the KKT matrix is singular.
    fn solve_eqp(&self, working: &[usize], rhs_z: &Vector, rhs_eq: &Vector, rhs_w: &Vector) -> Option<(Vector, Vector, Vector)> {
        let (n, ne, nw) = (self.n(), self.n_eq(), working.len());
        let dim = n + ne + nw;
        let mut k = Mat::zeros(dim, dim);
        k.view_mut((0, 0), (n, n)).copy_from(&self.hessian);
        k.view_mut((n, 0), (ne, n)).copy_from(&self.eq_matrix);
        k.view_mut((0, n), (n, ne)).copy_from(&self.eq_matrix.transpose());
        for (j, &i) in working.iter().enumerate() {
            let row = self.ineq_matrix.row(i);
            k.view_mut((n + ne + j, 0), (1, n)).copy_from(&row);
            k.view_mut((0, n + ne + j), (n, 1)).copy_from(&row.transpose());
        }
        let mut rhs = Vector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(rhs_z);
        rhs.rows_mut(n, ne).copy_from(rhs_eq);
        rhs.rows_mut(n + ne, nw).copy_from(rhs_w);
        let lu = k.lu();
        let sol = lu.solve(&rhs)?;
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        // reject numerically singular systems
        let diag_min = lu.u().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let diag_max = lu.u().diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if diag_min <= 1e-13 * diag_max.max(1.0) {
            return None;
        }
        Some((
            sol.rows(0, n).into_owned(),
            sol.rows(n, ne).into_owned(),
            sol.rows(n + ne, nw).into_owned(),
        ))
    }

    fn full_mu(&self, working: &[usize], mu_w: &Vector) -> Vector {
        let mut mu = Vector::zeros(self.n_ineq());
        for (j, &i) in working.iter().enumerate() {
            mu[i] = mu_w[j];
        }
        mu
    }
}

/// Enumerates every active subset (at most `ENUMERATION_LIMIT` rows).
pub fn solve_enumerate(problem: &QpProblem) -> Result<QpSolution> {
    let nh = problem.n_ineq();
    if nh > ENUMERATION_LIMIT {
        return Err(Error::Contract(format!("enumeration supports at most {ENUMERATION_LIMIT} rows, got {nh}")));
    }
    let scale = 1.0 + linalg::vec_inf(&problem.linear) + linalg::vec_inf(&problem.eq_rhs) + linalg::vec_inf(&problem.ineq_offset);
    let tol = FEAS_TOL * scale;
    let mut subsets: Vec<u32> = (0..(1u32 << nh)).collect();
    subsets.sort_by_key(|s| (s.count_ones(), *s));
    let mut found: Option<QpSolution> = None;
    let mut tried = 0usize;
    for mask in subsets {
        let working: Vec<usize> = (0..nh).filter(|i| mask & (1 << i) != 0).collect();
        let rhs_w = Vector::from_iterator(working.len(), working.iter().map(|&i| -problem.ineq_offset[i]));
        tried += 1;
        let Some((z, lambda, mu_w)) = problem.solve_eqp(&working, &(-&problem.linear), &problem.eq_rhs, &rhs_w) else {
            continue;
        };
        if mu_w.iter().any(|v| *v < -tol) {
            continue;
        }
        if problem.ineq_values(&z).iter().any(|v| *v > tol) {
            continue;
        }
        let mut mu = problem.full_mu(&working, &mu_w);
        mu.apply(|v| *v = v.max(0.0));
        match &found {
            None => {
                found = Some(QpSolution {
                    z,
                    lambda,
                    mu,
                    active_set: working,
                    iterations: tried,
                })
            }
            Some(prev) => {
                let gap = linalg::vec_inf(&(&prev.z - &z));
                if gap > 1e-8 * (1.0 + linalg::vec_inf(&z)) {
                    return Err(Error::QpDegenerate(format!(
                        "active sets {:?} and {:?} give primal points {gap:.3e} apart",
                        prev.active_set, working
                    )));
                }
                debug!("weakly active rows: {:?} and {:?} give the same point", prev.active_set, working);
            }
        }
    }
    found.ok_or_else(|| Error::QpInfeasible("no active subset yields a KKT point".into()))
}

/// Primal active-set method with lowest-index tie-breaking. An infeasible or
/// missing start is first repaired by an elastic (ℓ₁-penalized) problem.
pub fn solve_active_set(problem: &QpProblem, start: Option<&Vector>) -> Result<QpSolution> {
    let n = problem.n();
    let mut z0 = match start {
        Some(z) if z.len() == n => z.clone(),
        Some(z) => return Err(Error::Dimension(format!("start has length {}, expected {n}", z.len()))),
        None => Vector::zeros(n),
    };
    let scale = 1.0 + linalg::vec_inf(&problem.linear) + linalg::vec_inf(&problem.eq_rhs) + linalg::vec_inf(&problem.ineq_offset);
    let tol = FEAS_TOL * scale;
    if linalg::vec_inf(&(&problem.eq_matrix * &z0 - &problem.eq_rhs)) > tol {
        z0 = least_norm_equality_point(problem)?;
    }
    let mut iterations = 0;
    if problem.ineq_values(&z0).iter().any(|v| *v > tol) {
        let (z, its) = elastic_start(problem, &z0, tol)?;
        z0 = z;
        iterations += its;
    }
    let mut sol = primal_active_set(problem, z0, tol)?;
    sol.iterations += iterations;
    Ok(sol)
}

fn least_norm_equality_point(problem: &QpProblem) -> Result<Vector> {
    if problem.n_eq() == 0 {
        return Ok(Vector::zeros(problem.n()));
    }
    let g = &problem.eq_matrix;
    let ggt = g * g.transpose();
    let y = ggt
        .cholesky()
        .ok_or_else(|| Error::QpDegenerate("equality rows are rank deficient".into()))?
        .solve(&problem.eq_rhs);
    Ok(g.tr_mul(&y))
}

/// `min f(z) + ρ·1ᵀs + ½ε‖s‖²  s.t.  Gz = g, Cz + c − s ≤ 0, s ≥ 0`, raising
/// `ρ` until the slack vanishes.
fn elastic_start(problem: &QpProblem, z0: &Vector, tol: f64) -> Result<(Vector, usize)> {
    let (n, nh) = (problem.n(), problem.n_ineq());
    let h_scale = problem.hessian.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let eps = 1e-6 * h_scale;
    let mut rho = 1.0 + linalg::vec_inf(&problem.linear) + h_scale * (1.0 + linalg::vec_inf(z0));
    let mut z = z0.clone();
    let mut iterations = 0;
    for _ in 0..7 {
        let dim = n + nh;
        let mut hess = Mat::zeros(dim, dim);
        hess.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
        for i in 0..nh {
            hess[(n + i, n + i)] = eps;
        }
        let mut lin = Vector::from_element(dim, rho);
        lin.rows_mut(0, n).copy_from(&problem.linear);
        let mut eq = Mat::zeros(problem.n_eq(), dim);
        eq.view_mut((0, 0), (problem.n_eq(), n)).copy_from(&problem.eq_matrix);
        let mut ineq = Mat::zeros(2 * nh, dim);
        ineq.view_mut((0, 0), (nh, n)).copy_from(&problem.ineq_matrix);
        for i in 0..nh {
            ineq[(i, n + i)] = -1.0;
            ineq[(nh + i, n + i)] = -1.0;
        }
        let mut off = Vector::zeros(2 * nh);
        off.rows_mut(0, nh).copy_from(&problem.ineq_offset);
        let elastic = QpProblem {
            hessian: hess,
            linear: lin,
            eq_matrix: eq,
            eq_rhs: problem.eq_rhs.clone(),
            ineq_matrix: ineq,
            ineq_offset: off,
        };
        let slack = problem.ineq_values(&z).map(|v| v.max(0.0));
        let mut start = Vector::zeros(dim);
        start.rows_mut(0, n).copy_from(&z);
        start.rows_mut(n, nh).copy_from(&slack);
        let sol = primal_active_set(&elastic, start, tol)?;
        iterations += sol.iterations;
        z = sol.z.rows(0, n).into_owned();
        if problem.ineq_values(&z).iter().all(|v| *v <= tol) {
            return Ok((z, iterations));
        }
        rho *= 10.0;
    }
    Err(Error::QpInfeasible("elastic phase left positive slack at the largest penalty".into()))
}

fn primal_active_set(problem: &QpProblem, mut z: Vector, tol: f64) -> Result<QpSolution> {
    let n = problem.n();
    let nh = problem.n_ineq();
    let max_iter = 50 * (n + nh + 10);
    let mut working: Vec<usize> = Vec::new();
    let mut stalled: HashSet<Vec<usize>> = HashSet::new();
    for iter in 1..=max_iter {
        let grad = &problem.hessian * &z + &problem.linear;
        let eq_defect = &problem.eq_rhs - &problem.eq_matrix * &z;
        let w_defect = Vector::from_iterator(
            working.len(),
            working.iter().map(|&i| -(problem.ineq_matrix.row(i).dot(&z.transpose()) + problem.ineq_offset[i])),
        );
        let (step, lambda, mu_w) = problem
            .solve_eqp(&working, &(-grad), &eq_defect, &w_defect)
            .ok_or_else(|| Error::QpDegenerate(format!("singular working-set system for {working:?}")))?;

        let mut alpha = 1.0;
        let mut blocking = None;
        let cp = &problem.ineq_matrix * &step;
        let hz = problem.ineq_values(&z);
        for i in 0..nh {
            if working.contains(&i) || cp[i] <= 1e-14 * (1.0 + step.norm()) {
                continue;
            }
            let reach = (-hz[i]).max(0.0) / cp[i];
            if reach < alpha {
                alpha = reach;
                blocking = Some(i);
            }
        }
        let step_small = step.norm() <= 1e-12 * (1.0 + z.norm());
        if blocking.is_none() || step_small {
            if !step_small {
                z += &step;
            }
            // multipliers from this solve are valid at the new point
            let most_negative = mu_w
                .iter()
                .enumerate()
                .filter(|(_, v)| **v < -tol)
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(working[a.0].cmp(&working[b.0])));
            match most_negative {
                None => {
                    let mut mu = problem.full_mu(&working, &mu_w);
                    mu.apply(|v| *v = v.max(0.0));
                    let mut active = working.clone();
                    active.sort_unstable();
                    return Ok(QpSolution {
                        z,
                        lambda,
                        mu,
                        active_set: active,
                        iterations: iter,
                    });
                }
                Some((j, _)) => {
                    if step_small {
                        let mut key = working.clone();
                        key.sort_unstable();
                        if !stalled.insert(key.clone()) {
                            return Err(Error::QpCycle {
                                iterations: iter,
                                working_set: key,
                            });
                        }
                    } else {
                        stalled.clear();
                    }
                    working.remove(j);
                }
            }
        } else {
            z += &step * alpha;
            let i = blocking.expect("blocking row");
            if alpha > 0.0 {
                stalled.clear();
            } else {
                let mut key = working.clone();
                key.push(i);
                key.sort_unstable();
                if !stalled.insert(key.clone()) {
                    return Err(Error::QpCycle {
                        iterations: iter,
                        working_set: key,
                    });
                }
            }
            working.push(i);
        }
    }
    Err(Error::QpNoConvergence(format!("active set did not terminate in {max_iter} iterations")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(h: f64, q: f64, rows: &[(f64, f64)]) -> QpProblem {
        QpProblem::new(
            Mat::from_element(1, 1, h),
            Vector::from_vec(vec![q]),
            Mat::zeros(0, 1),
            Vector::zeros(0),
            Mat::from_iterator(rows.len(), 1, rows.iter().map(|r| r.0)),
            Vector::from_iterator(rows.len(), rows.iter().map(|r| r.1)),
        )
        .unwrap()
    }

    #[test]
    fn one_constraint_clamp() {
        // min z² s.t. z ≥ 1, Hessian 2
        let p = scalar(2.0, 0.0, &[(-1.0, 1.0)]);
        let s = solve_enumerate(&p).unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-14);
        assert!((s.mu[0] - 2.0).abs() < 1e-14);
        assert_eq!(s.active_set, vec![0]);
        let a = solve_active_set(&p, None).unwrap();
        assert!((a.z[0] - 1.0).abs() < 1e-12);
        assert!(p.kkt_residual(&a.z, &a.lambda, &a.mu) < 1e-12);
    }

    #[test]
    fn unconstrained_newton_step() {
        let h = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let q = Vector::from_vec(vec![1.0, -2.0]);
        let p = QpProblem::new(h.clone(), q.clone(), Mat::zeros(0, 2), Vector::zeros(0), Mat::zeros(0, 2), Vector::zeros(0)).unwrap();
        let s = solve_enumerate(&p).unwrap();
        let expected = -h.lu().solve(&q).unwrap();
        assert!(linalg::vec_inf(&(s.z - expected)) < 1e-14);
    }

    #[test]
    fn inactive_rows_take_one_iteration() {
        let p = scalar(2.0, -2.0, &[(1.0, -5.0)]);
        let s = solve_active_set(&p, Some(&Vector::zeros(1))).unwrap();
        assert_eq!(s.iterations, 1);
        assert!((s.z[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn infeasible_rows_are_reported() {
        // z ≤ −1 and z ≥ 1
        let p = scalar(2.0, 0.0, &[(1.0, 1.0), (-1.0, 1.0)]);
        assert!(matches!(solve_enumerate(&p), Err(Error::QpInfeasible(_))));
        assert!(matches!(solve_active_set(&p, None), Err(Error::QpInfeasible(_))));
    }

    #[test]
    fn elastic_start_recovers_from_infeasible_guess() {
        let p = scalar(2.0, 0.0, &[(-1.0, 1.0), (1.0, -3.0)]);
        let s = solve_active_set(&p, Some(&Vector::from_vec(vec![10.0]))).unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn two_variable_hand_kkt() {
        // scalar plant x₁ = ξ + u₀ with ξ = 2, cost u₀² + x₁², u₀ ≥ −0.5
        // unconstrained optimum u₀ = −1 violates the bound, so u₀ = −0.5, x₁ = 1.5
        let p = QpProblem::new(
            Mat::from_diagonal(&Vector::from_vec(vec![2.0, 2.0])),
            Vector::zeros(2),
            Mat::from_row_slice(1, 2, &[-1.0, 1.0]),
            Vector::from_vec(vec![2.0]),
            Mat::from_row_slice(1, 2, &[-1.0, 0.0]),
            Vector::from_vec(vec![-0.5]),
        )
        .unwrap();
        let s = solve_enumerate(&p).unwrap();
        assert!((s.z[0] + 0.5).abs() < 1e-14 && (s.z[1] - 1.5).abs() < 1e-14);
        // stationarity: 2x₁ + λ = 0, 2u₀ − λ − μ = 0
        assert!((s.lambda[0] + 3.0).abs() < 1e-13);
        assert!((s.mu[0] - 2.0).abs() < 1e-13);
        assert!(p.licq_holds(&s.active_set));
    }
}
