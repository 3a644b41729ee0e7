//! Dense linear-algebra helpers shared by the synthesis and simulation code.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Padé(6,6) coefficients for the matrix exponential.
const PADE6: [f64; 7] = [
    1.0,
    0.5,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

/// Matrix exponential by scaling and squaring with a degree-6 Padé approximant.
///
/// The argument is scaled so that its 1-norm is at most 1/2, where the
/// truncation error of the (6,6) approximant is below double precision.
pub fn expm(a: &Mat) -> Mat {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    let norm = norm_one(a);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil().max(0.0) as u32;
    }
    let x = a / 2f64.powi(squarings as i32);

    let id = Mat::identity(n, n);
    let mut num = &id * PADE6[0];
    let mut den = &id * PADE6[0];
    let mut power = id.clone();
    for (k, c) in PADE6.iter().enumerate().skip(1) {
        power = &power * &x;
        num += &power * *c;
        if k % 2 == 0 {
            den += &power * *c;
        } else {
            den -= &power * *c;
        }
    }
    let mut result = den
        .lu()
        .solve(&num)
        .expect("Padé denominator is nonsingular for scaled argument");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Maximum absolute column sum.
pub fn norm_one(a: &Mat) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Maximum absolute row sum.
pub fn norm_inf(a: &Mat) -> f64 {
    (0..a.nrows())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn vec_inf(v: &Vector) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn is_symmetric(a: &Mat, tol: f64) -> bool {
    a.is_square() && max_abs(&(a - a.transpose())) <= tol * (1.0 + max_abs(a))
}

/// Eigenvalues of the symmetric part of `a`, ascending.
pub fn sym_eigenvalues(a: &Mat) -> Vec<f64> {
    let mut eig: Vec<f64> = symmetrize(a).symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eig
}

pub fn min_sym_eigenvalue(a: &Mat) -> f64 {
    sym_eigenvalues(a).first().copied().unwrap_or(0.0)
}

pub fn max_sym_eigenvalue(a: &Mat) -> f64 {
    sym_eigenvalues(a).last().copied().unwrap_or(0.0)
}

pub fn spectral_radius(a: &Mat) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

pub fn eigenvalues(a: &Mat) -> Vec<Complex<f64>> {
    a.clone().complex_eigenvalues().iter().copied().collect()
}

/// Numerical rank from singular values, relative tolerance.
pub fn rank(a: &Mat, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0, |m: f64, s| m.max(*s));
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel_tol * smax).count()
}

/// Solve `phiᵀ S phi − S = −rhs` for symmetric `S` through the vectorized
/// (Kronecker) linear system.
pub fn discrete_lyapunov(phi: &Mat, rhs: &Mat) -> Result<Mat> {
    let n = phi.nrows();
    let phit = phi.transpose();
    // vec(phiᵀ S phi) = (phiᵀ ⊗ phiᵀ) vec(S)
    let kron = phit.kronecker(&phit);
    let sys = kron - Mat::identity(n * n, n * n);
    let b = Vector::from_iterator(n * n, rhs.iter().map(|v| -v));
    let sol = sys
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Synthesis("singular discrete Lyapunov operator".into()))?;
    let s = Mat::from_column_slice(n, n, sol.as_slice());
    Ok(symmetrize(&s))
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn spd_inv_sqrt(a: &Mat) -> Option<Mat> {
    let eig = symmetrize(a).symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| *v <= 0.0) {
        return None;
    }
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(a: &Mat) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| a.row(i).iter().copied().collect())
        .collect()
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_zero_is_identity() {
        let e = expm(&Mat::zeros(3, 3));
        assert_eq!(e, Mat::identity(3, 3));
    }

    #[test]
    fn expm_rotation() {
        let w = 2.3;
        let a = Mat::from_row_slice(2, 2, &[0.0, -w, w, 0.0]);
        let e = expm(&a);
        let expected = Mat::from_row_slice(2, 2, &[w.cos(), -w.sin(), w.sin(), w.cos()]);
        assert!(max_abs(&(e - expected)) < 1e-14);
    }

    #[test]
    fn expm_diagonal_large_norm() {
        let a = Mat::from_diagonal(&Vector::from_vec(vec![-30.0, 4.0, 0.1]));
        let e = expm(&a);
        for (i, v) in [-30.0f64, 4.0, 0.1].iter().enumerate() {
            assert!((e[(i, i)] - v.exp()).abs() <= 1e-13 * v.exp());
        }
    }

    #[test]
    fn lyapunov_scalar() {
        let phi = Mat::from_element(1, 1, 0.5);
        let s = discrete_lyapunov(&phi, &Mat::from_element(1, 1, 1.0)).unwrap();
        // 0.25 s - s = -1
        assert!((s[(0, 0)] - 1.0 / 0.75).abs() < 1e-14);
    }

    #[test]
    fn rank_detects_dependency() {
        let a = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert_eq!(rank(&a, 1e-12), 1);
    }
}
