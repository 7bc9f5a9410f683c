//! Linear state-space estimation: subspace identification (PO-MOESP),
//! discrete-to-continuous conversion and frequency responses.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows};

/// Discrete-time model `x⁺ = Ad x + Bd u`, `y = Cd x + Dd u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtStateSpace {
    #[serde(with = "serde_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub d: DMatrix<f64>,
    pub ts: f64,
}

/// Continuous-time model `ẋ = A x + B u`, `y = C x + D u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtStateSpace {
    #[serde(with = "serde_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub d: DMatrix<f64>,
}

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || c.ncols() != n || d.nrows() != c.nrows() || d.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "inconsistent state-space dimensions: A {:?}, B {:?}, C {:?}, D {:?}",
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        )));
    }
    Ok(())
}

impl CtStateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        check_dims(&a, &b, &c, &d)?;
        Ok(Self { a, b, c, d })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    /// Zero-pads `B` and `D` to `n_inputs` input columns.
    pub fn pad_inputs(&self, n_inputs: usize) -> Self {
        let (n, m) = self.b.shape();
        let ny = self.c.nrows();
        let mut b = DMatrix::zeros(n, n_inputs.max(m));
        b.columns_mut(0, m).copy_from(&self.b);
        let mut d = DMatrix::zeros(ny, n_inputs.max(m));
        d.columns_mut(0, m).copy_from(&self.d);
        Self {
            a: self.a.clone(),
            b,
            c: self.c.clone(),
            d,
        }
    }
}

impl DtStateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>, ts: f64) -> Result<Self> {
        check_dims(&a, &b, &c, &d)?;
        if !(ts > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling time must be positive, got {ts}"
            )));
        }
        Ok(Self { a, b, c, d, ts })
    }

    /// Simulates from `x0` with inputs given as rows of `u`.
    pub fn simulate(&self, u: &DMatrix<f64>, x0: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = x0.clone();
        let mut y = DMatrix::zeros(u.nrows(), self.c.nrows());
        for k in 0..u.nrows() {
            let uk = DMatrix::from_iterator(u.ncols(), 1, u.row(k).iter().copied());
            let yk = &self.c * &x + &self.d * &uk;
            y.row_mut(k).copy_from(&yk.transpose());
            x = &self.a * &x + &self.b * &uk;
        }
        y
    }
}

/// Zero-order-hold discretization.
pub fn c2d(sys: &CtStateSpace, ts: f64) -> DtStateSpace {
    let n = sys.n_x();
    let m = sys.b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(&sys.b * ts));
    let e = linalg::expm(&aug);
    DtStateSpace {
        a: e.view((0, 0), (n, n)).into_owned(),
        b: e.view((0, n), (n, m)).into_owned(),
        c: sys.c.clone(),
        d: sys.d.clone(),
        ts,
    }
}

/// Inverse of [`c2d`]: `A = log(Ad)/Ts` and `B = Φ⁻¹ Bd` with
/// `Φ = ∫₀^Ts e^{Aτ} dτ` (equal to `A (Ad − I)⁻¹` when `A` is invertible).
pub fn d2c(sys: &DtStateSpace) -> Result<CtStateSpace> {
    let a = linalg::logm(&sys.a).map_err(|e| {
        Error::Numerical(format!(
            "{e}; the model cannot be converted to continuous time, try a higher sample rate"
        ))
    })? / sys.ts;
    let n = a.nrows();
    let mut aug = DMatrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&a * sys.ts));
    aug.view_mut((0, n), (n, n))
        .copy_from(&(DMatrix::identity(n, n) * sys.ts));
    let phi = linalg::expm(&aug).view((0, n), (n, n)).into_owned();
    let b = phi
        .lu()
        .solve(&sys.b)
        .ok_or_else(|| Error::Numerical("singular input integral in d2c".into()))?;
    CtStateSpace::new(a, b, sys.c.clone(), sys.d.clone())
}

/// `C (sI − A)⁻¹ B + D` at a complex point `s`.
fn transfer_at(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    s: Complex<f64>,
) -> Result<DMatrix<Complex<f64>>> {
    let n = a.nrows();
    let m = DMatrix::from_diagonal_element(n, n, s) - linalg::to_complex(a);
    let x = linalg::complex_solve(m, &linalg::to_complex(b))
        .ok_or_else(|| Error::Numerical(format!("sI - A is singular at s = {s}")))?;
    Ok(linalg::to_complex(c) * x + linalg::to_complex(d))
}

/// `H(jω) = C (jωI − A)⁻¹ B + D` on a frequency grid (rad/s).
pub fn freq_response(sys: &CtStateSpace, omegas: &[f64]) -> Result<Vec<DMatrix<Complex<f64>>>> {
    omegas
        .iter()
        .map(|&w| transfer_at(&sys.a, &sys.b, &sys.c, &sys.d, Complex::new(0.0, w)))
        .collect()
}

/// `H(e^{jωTs})` of a discrete-time model.
pub fn freq_response_dt(sys: &DtStateSpace, omegas: &[f64]) -> Result<Vec<DMatrix<Complex<f64>>>> {
    omegas
        .iter()
        .map(|&w| transfer_at(&sys.a, &sys.b, &sys.c, &sys.d, Complex::from_polar(1.0, w * sys.ts)))
        .collect()
}

/// Log-spaced grid from `lo` to `hi` (rad/s).
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n.max(2) - 1) as f64).exp())
        .collect()
}

/// `max_ω ‖H₁ − H₂‖_F / max_ω ‖H₁‖_F`.
pub fn relative_grid_deviation(h1: &[DMatrix<Complex<f64>>], h2: &[DMatrix<Complex<f64>>]) -> f64 {
    let scale = h1.iter().map(|h| h.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    h1.iter().zip(h2).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale
}

/// Subspace estimate with its diagnostics.
#[derive(Clone, Debug)]
pub struct SubspaceEstimate {
    pub model: DtStateSpace,
    /// Singular values of the weighted observability block.
    pub singular_values: Vec<f64>,
    pub warnings: Vec<String>,
}

fn to_matrix(t: &crate::autodiff::Tensor) -> DMatrix<f64> {
    t.to_dmatrix()
}

/// PO-MOESP estimate of order `n_x` with `horizon` past and future block
/// rows. The feedthrough is fixed to zero; `B` and the per-record initial
/// states are fitted by linear least squares.
pub fn subspace_id(datasets: &[Dataset], n_x: usize, horizon: usize) -> Result<SubspaceEstimate> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no records for subspace identification".into()))?;
    let (nu, ny, ts) = (first.n_u(), first.n_y(), first.ts);
    if datasets.iter().any(|d| d.n_u() != nu || d.n_y() != ny) {
        return Err(Error::Shape("records disagree on input/output dimensions".into()));
    }
    let s = horizon;
    if n_x == 0 || n_x > s * ny {
        return Err(Error::InvalidArgument(format!(
            "order {n_x} not identifiable with horizon {s} and {ny} outputs"
        )));
    }
    let mut warnings = Vec::new();
    let inputs: Vec<DMatrix<f64>> = datasets.iter().map(|d| to_matrix(&d.u)).collect();
    let outputs: Vec<DMatrix<f64>> = datasets.iter().map(|d| to_matrix(&d.y)).collect();
    let has_input = inputs.iter().any(|u| u.iter().any(|v| *v != 0.0));
    if !has_input {
        warnings.push("input carries no energy; identifying as a time series".to_string());
    }
    let nu_eff = if has_input { nu } else { 0 };

    let r1 = s * nu_eff;
    let r2 = s * (nu_eff + ny);
    let r3 = s * ny;
    let rows = r1 + r2 + r3;
    let cols: usize = datasets.iter().map(|d| d.len().saturating_sub(2 * s - 1)).sum();
    if cols < rows {
        return Err(Error::RankDeficient(format!(
            "block Hankel matrix has {cols} columns but needs at least {rows}"
        )));
    }
    // Hankel matrix stored transposed: one column of [U_f; U_p; Y_p; Y_f] per row.
    let mut ht = DMatrix::zeros(cols, rows);
    let mut col = 0;
    for (u, y) in inputs.iter().zip(&outputs) {
        let n = u.nrows();
        if n < 2 * s {
            continue;
        }
        for j in 0..=(n - 2 * s) {
            let mut r = 0;
            for i in 0..s {
                for m in 0..nu_eff {
                    ht[(col, r)] = u[(j + s + i, m)];
                    r += 1;
                }
            }
            for i in 0..s {
                for m in 0..nu_eff {
                    ht[(col, r)] = u[(j + i, m)];
                    r += 1;
                }
            }
            for i in 0..s {
                for m in 0..ny {
                    ht[(col, r)] = y[(j + i, m)];
                    r += 1;
                }
            }
            for i in 0..s {
                for m in 0..ny {
                    ht[(col, r)] = y[(j + s + i, m)];
                    r += 1;
                }
            }
            col += 1;
        }
    }
    ht /= (cols as f64).sqrt();
    let l = ht.qr().r().transpose();

    if r1 > 0 {
        let sv = l.view((0, 0), (r1, r1)).into_owned().singular_values();
        let tol = 1e-10 * sv.max();
        let rank = sv.iter().filter(|v| **v > tol).count();
        if rank < r1 {
            return Err(Error::RankDeficient(format!(
                "future input block Hankel has rank {rank} < {r1} (s * n_u); the input is not persistently exciting"
            )));
        }
    }
    let l32 = l.view((r1 + r2, r1), (r3, r2)).into_owned();
    let svd = l32.svd(true, false);
    let u_mat = svd.u.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    // nalgebra does not sort singular values
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    if sv.len() < n_x || sv[n_x - 1] <= 1e-12 * sv[0].max(f64::MIN_POSITIVE) {
        let rank = sv.iter().filter(|v| **v > 1e-12 * sv[0]).count();
        return Err(Error::RankDeficient(format!(
            "extended observability block has rank {rank} < n_x = {n_x}"
        )));
    }
    let total: f64 = sv.iter().map(|v| v * v).sum();
    let captured: f64 = sv[..n_x].iter().map(|v| v * v).sum();
    if captured < 0.5 * total {
        warnings.push(format!(
            "leading {n_x} singular values carry only {:.0}% of the output-instrument energy; no coherent linear dynamics",
            100.0 * captured / total
        ));
    }
    let mut gamma = DMatrix::zeros(r3, n_x);
    for (k, &i) in order.iter().take(n_x).enumerate() {
        gamma.set_column(k, &(u_mat.column(i) * sv[k].sqrt()));
    }
    let c = gamma.rows(0, ny).into_owned();
    let up = gamma.rows(0, r3 - ny).into_owned();
    let down = gamma.rows(ny, r3 - ny).into_owned();
    let a = linalg::lstsq(&up, &down, 1e-12)?;

    let rho = linalg::spectral_radius(&a);
    if rho >= 1.0 {
        warnings.push(format!("estimated Ad has spectral radius {rho:.4} >= 1"));
    }

    let b = fit_input_matrix(&a, &c, &inputs, &outputs, nu)?;
    for w in &warnings {
        log::warn!("subspace identification: {w}");
    }
    Ok(SubspaceEstimate {
        model: DtStateSpace::new(a, b, c, DMatrix::zeros(ny, nu), ts)?,
        singular_values: sv,
        warnings,
    })
}

/// Least-squares fit of `B` (and one initial state per record) with `D = 0`.
fn fit_input_matrix(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    inputs: &[DMatrix<f64>],
    outputs: &[DMatrix<f64>],
    nu: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let ny = c.nrows();
    let n_rec = inputs.len();
    let total: usize = inputs.iter().map(|u| u.nrows()).sum();
    let n_par = n * nu + n * n_rec;
    let mut phi = DMatrix::zeros(total * ny, n_par);
    let mut rhs = DMatrix::zeros(total * ny, 1);
    let mut row0 = 0;
    for (r, (u, y)) in inputs.iter().zip(outputs).enumerate() {
        let len = u.nrows();
        // column i*nu + m: response to e_i u_m; columns of `z` indexed alike
        let mut z = DMatrix::<f64>::zeros(n, n * nu);
        let mut ak = DMatrix::<f64>::identity(n, n);
        for k in 0..len {
            let cz = c * &z;
            let cak = c * &ak;
            for o in 0..ny {
                let row = row0 + k * ny + o;
                for p in 0..n * nu {
                    phi[(row, p)] = cz[(o, p)];
                }
                for i in 0..n {
                    phi[(row, n * nu + r * n + i)] = cak[(o, i)];
                }
                rhs[(row, 0)] = y[(k, o)];
            }
            let mut z_next = a * &z;
            for i in 0..n {
                for m in 0..nu {
                    z_next[(i, i * nu + m)] += u[(k, m)];
                }
            }
            z = z_next;
            ak = a * ak;
        }
        row0 += len * ny;
    }
    let theta = linalg::lstsq(&phi, &rhs, 1e-12)?;
    Ok(DMatrix::from_fn(n, nu, |i, m| theta[(i * nu + m, 0)]))
}
