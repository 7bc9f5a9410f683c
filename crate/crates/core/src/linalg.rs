//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Sum of the magnitudes of the negative eigenvalues of `(M + Mᵀ)/2`.
pub fn negative_eigen_mass(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .filter(|l| **l < 0.0)
        .map(|l| -l)
        .sum()
}

/// Projection of `(M + Mᵀ)/2` onto `{X ⪰ floor·I}` in Frobenius norm:
/// eigenvalues below `floor` are raised to `floor`.
pub fn clamp_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    symmetrize(&out)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

/// Least-squares solution of `A x = b` by SVD, truncating singular values
/// below `rcond · σ_max`.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(b, rcond * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Numerical(format!("least squares: {e}")))
}

pub fn pinv(a: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.pseudo_inverse(rcond * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Numerical(format!("pseudo-inverse: {e}")))
}

pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.exp()
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Principal square root by the Denman–Beavers iteration.
fn sqrtm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = y
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular iterate in matrix square root".into()))?;
        let zi = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular iterate in matrix square root".into()))?;
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = one_norm(&(&y_next - &y));
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * one_norm(&y) {
            return Ok(y);
        }
    }
    Err(Error::Numerical("matrix square root did not converge".into()))
}

/// Principal matrix logarithm by inverse scaling and squaring.
///
/// Fails when an eigenvalue lies on the closed negative real axis.
pub fn logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("logm of a non-square {}x{} matrix", n, a.ncols())));
    }
    for l in a.complex_eigenvalues().iter() {
        if l.im.abs() <= 1e-12 * l.norm().max(1.0) && l.re <= 0.0 {
            return Err(Error::Numerical(format!(
                "eigenvalue {:.3e}{:+.3e}i on the closed negative real axis has no principal logarithm",
                l.re, l.im
            )));
        }
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut x = a.clone();
    let mut squarings = 0;
    while one_norm(&(&x - &eye)) > 0.25 {
        if squarings == 60 {
            return Err(Error::Numerical("logm: too many square roots".into()));
        }
        x = sqrtm(&x)?;
        squarings += 1;
    }
    // log X = 2 atanh(Z), Z = (X - I)(X + I)^-1, ‖Z‖ ≲ 1/7
    let z = (&x - &eye)
        * (&x + &eye)
            .try_inverse()
            .ok_or_else(|| Error::Numerical("logm: singular X + I".into()))?;
    let z2 = &z * &z;
    let mut term = z.clone();
    let mut sum = z.clone();
    for k in 1..40 {
        term = &term * &z2;
        let add = &term / (2 * k + 1) as f64;
        sum += &add;
        if one_norm(&add) < 1e-18 * one_norm(&sum).max(1e-300) {
            break;
        }
    }
    Ok(sum * (2.0 * 2f64.powi(squarings)))
}

/// Solves the Lyapunov equation `AᵀX + XA = −Π` through its Kronecker form.
pub fn lyapunov_solve(a: &DMatrix<f64>, pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // vec(AᵀX) = (I ⊗ Aᵀ) vec X, vec(XA) = (Aᵀ ⊗ I) vec X
    let k = eye.kronecker(&a.transpose()) + a.transpose().kronecker(&eye);
    let rhs = DMatrix::from_column_slice(n * n, 1, (-pi).as_slice());
    let x = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Lyapunov equation is singular (A has eigenvalues λᵢ + λⱼ = 0)".into()))?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, x.as_slice())))
}

/// Solves `M X = B` for complex square `M`.
pub fn complex_solve(m: DMatrix<Complex<f64>>, b: &DMatrix<Complex<f64>>) -> Option<DMatrix<Complex<f64>>> {
    let lu = m.lu();
    // reject numerically singular pivots
    let u = lu.u();
    let scale = u.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if (0..u.nrows()).any(|i| u[(i, i)].norm() <= 1e-14 * scale.max(f64::MIN_POSITIVE)) {
        return None;
    }
    lu.solve(b)
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    m.map(|v| Complex::new(v, 0.0))
}

/// Serde adapter storing a matrix as an array of rows.
pub mod serde_rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
    }
}

/// Serde adapter for optional matrices.
pub mod serde_rows_opt {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Option<Vec<Vec<f64>>> = m
            .as_ref()
            .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect());
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        let rows = Option::<Vec<Vec<f64>>>::deserialize(d)?;
        rows.map(|r| super::serde_rows::from_rows(&r).map_err(serde::de::Error::custom))
            .transpose()
    }
}
