//! Linear port-Hamiltonian realization of a continuous-time state-space
//! model.
//!
//! Pipeline: [`solve_kyp`] → [`nearest_psd`] → [`build_ph_from_ss`] →
//! [`cholesky_normalize`]; [`linear_ph_from_ct`] runs all of it and records
//! what had to be repaired on the way.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json};
use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows};
use crate::linear_ident::{freq_response, relative_grid_deviation, CtStateSpace};

/// Tuning of the alternating-projection KYP solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KypOptions {
    /// Lower bound `Q ⪰ εI`.
    pub epsilon: f64,
    /// Stop when one sweep moves the iterate by less than this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Accept a negative-eigenvalue mass of `W(Q)` up to
    /// `feasibility_tol · max(1, ‖W(Q)‖)`.
    pub feasibility_tol: f64,
    /// Consecutive growing sweeps that count as divergence.
    pub divergence_window: usize,
    /// On infeasibility, repair `Q` so that `R` stays positive semidefinite.
    pub enforce_dissipation: bool,
}

impl Default for KypOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            tol: 1e-9,
            max_sweeps: 5000,
            feasibility_tol: 1e-6,
            divergence_window: 100,
            enforce_dissipation: true,
        }
    }
}

/// Result of [`solve_kyp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KypSolution {
    #[serde(with = "serde_rows")]
    pub q: DMatrix<f64>,
    pub feasible: bool,
    pub diverged: bool,
    pub sweeps: usize,
    pub final_displacement: f64,
    /// Sweeps spent on the dissipation repair (0 if none was needed).
    pub dissipation_sweeps: usize,
    /// Negative-eigenvalue mass of the full KYP matrix at `q`.
    pub negative_mass_w: f64,
    /// Negative-eigenvalue mass of `q` itself.
    pub negative_mass_q: f64,
    /// Smallest eigenvalue of `−AᵀQ − QA`.
    pub min_eig_dissipation: f64,
}

/// `W(Q) = [[−AᵀQ − QA, Cᵀ − QB], [C − BᵀQ, 0]]`.
pub fn kyp_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let p = b.ncols();
    let mut w = DMatrix::zeros(n + p, n + p);
    w.view_mut((0, 0), (n, n)).copy_from(&(-(a.transpose() * q) - q * a));
    let off = c.transpose() - q * b;
    w.view_mut((0, n), (n, p)).copy_from(&off);
    w.view_mut((n, 0), (p, n)).copy_from(&off.transpose());
    w
}

fn sym_basis(n: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            out.push(e);
        }
    }
    out
}

fn from_coords(basis: &[DMatrix<f64>], q: &[f64]) -> DMatrix<f64> {
    let n = basis[0].nrows();
    basis
        .iter()
        .zip(q.iter())
        .fold(DMatrix::zeros(n, n), |acc, (e, c)| acc + e * *c)
}

fn stack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let len = blocks.iter().map(|b| b.len()).sum();
    DMatrix::from_iterator(len, 1, blocks.iter().flat_map(|b| b.iter().copied()))
}

struct DykstraOutcome {
    q: DMatrix<f64>,
    sweeps: usize,
    displacement: f64,
    diverged: bool,
}

/// Dykstra's alternating projections between the affine set
/// `{(F₁(Q), …, F_k(Q)) : Q ∈ origin + span(basis)}`, with `Fᵢ` affine
/// maps into symmetric blocks, and the product of PSD cones. The iteration
/// starts from the affine point closest to `map(q0)`.
///
/// `violation` scores iterates; on divergence the best-scoring one is
/// returned. `done` stops the iteration early once an iterate is good
/// enough.
fn dykstra_psd(
    map: &dyn Fn(&DMatrix<f64>) -> Vec<DMatrix<f64>>,
    violation: &dyn Fn(&DMatrix<f64>) -> f64,
    done: &dyn Fn(&DMatrix<f64>) -> bool,
    origin: &DMatrix<f64>,
    basis: &[DMatrix<f64>],
    q0: &DMatrix<f64>,
    opts: &KypOptions,
) -> Result<DykstraOutcome> {
    let zero = map(origin);
    let sizes: Vec<usize> = zero.iter().map(|b| b.nrows()).collect();
    let offset = stack(&zero);
    if basis.is_empty() {
        return Ok(DykstraOutcome {
            q: origin.clone(),
            sweeps: 0,
            displacement: 0.0,
            diverged: false,
        });
    }
    let mut m = DMatrix::zeros(offset.nrows(), basis.len());
    for (k, e) in basis.iter().enumerate() {
        m.column_mut(k).copy_from(&(stack(&map(&(origin + e))) - &offset));
    }
    let m_pinv = linalg::pinv(&m, 1e-14)?;
    let to_q = |z: &DMatrix<f64>| origin + from_coords(basis, (&m_pinv * (z - &offset)).as_slice());
    let project_cone = |z: &DMatrix<f64>| {
        let mut at = 0;
        let blocks: Vec<DMatrix<f64>> = sizes
            .iter()
            .map(|&k| {
                let b = DMatrix::from_column_slice(k, k, &z.as_slice()[at..at + k * k]);
                at += k * k;
                linalg::clamp_eigenvalues(&b, 0.0)
            })
            .collect();
        stack(&blocks)
    };

    let mut q = to_q(&stack(&map(q0)));
    if done(&q) {
        return Ok(DykstraOutcome {
            q,
            sweeps: 0,
            displacement: 0.0,
            diverged: false,
        });
    }
    let mut x = stack(&map(&q));
    let mut corr = DMatrix::zeros(x.nrows(), 1);
    let mut best = (q.clone(), violation(&q));
    let (mut last, mut growing, mut sweeps, mut displacement) = (f64::INFINITY, 0, 0, 0.0);
    let mut diverged = false;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let y = project_cone(&(&x + &corr));
        corr = &x + &corr - &y;
        q = to_q(&y);
        let x_next = stack(&map(&q));
        displacement = (&x_next - &x).norm();
        x = x_next;
        let v = violation(&q);
        if v < best.1 {
            best = (q.clone(), v);
        }
        if !displacement.is_finite() {
            diverged = true;
            break;
        }
        if displacement < opts.tol || done(&q) {
            break;
        }
        growing = if displacement > last { growing + 1 } else { 0 };
        last = displacement;
        if growing >= opts.divergence_window {
            diverged = true;
            break;
        }
    }
    Ok(DykstraOutcome {
        q: if diverged { best.0 } else { q },
        sweeps,
        displacement,
        diverged,
    })
}

/// Symmetric matrices with `QB = Cᵀ` in the least-squares sense, as a
/// particular solution plus a basis of the homogeneous solutions.
pub fn port_affine_set(b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let n = b.nrows();
    let sym = sym_basis(n);
    let mut k = DMatrix::zeros(b.len(), sym.len());
    for (i, e) in sym.iter().enumerate() {
        k.column_mut(i).copy_from_slice((e * b).as_slice());
    }
    let target = DMatrix::from_column_slice(b.len(), 1, c.transpose().as_slice());
    let particular = from_coords(&sym, linalg::lstsq(&k, &target, 1e-12)?.as_slice());
    let svd = k.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-12 * smax).count();
    // rows of v_t beyond the rank span the null space; nalgebra's thin SVD
    // keeps only min(rows, cols) of them, so complete the basis explicitly
    let range = v_t.rows(0, rank).into_owned();
    let mut null = Vec::new();
    let proj = DMatrix::<f64>::identity(sym.len(), sym.len()) - range.transpose() * &range;
    let eig = nalgebra::SymmetricEigen::new(proj);
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        if *l > 0.5 {
            null.push(from_coords(&sym, eig.eigenvectors.column(i).into_owned().as_slice()));
        }
    }
    Ok((particular, null))
}

/// Smallest step from `q` towards the solution of `AᵀQ + QA = −I` that
/// satisfies `accept` (the set is convex and, for Hurwitz `A`, contains
/// that solution). `None` when `A` is not Hurwitz.
fn toward_lyapunov_solution(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    accept: &dyn Fn(&DMatrix<f64>) -> bool,
) -> Result<Option<DMatrix<f64>>> {
    let n = a.nrows();
    let target = match linalg::lyapunov_solve(a, &DMatrix::identity(n, n)) {
        Ok(t) => t,
        Err(_) => return Ok(None),
    };
    if !accept(&target) {
        return Ok(None);
    }
    let at = |t: f64| q * (1.0 - t) + &target * t;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if accept(&at(mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(at(hi)))
}

/// Solves the KYP inequality `W(Q) ⪰ 0`, `Q ⪰ εI` for symmetric `Q`.
///
/// Because the lower-right block of `W` is zero, `W ⪰ 0` holds exactly when
/// `QB = Cᵀ` and `−AᵀQ − QA ⪰ 0`. The port equality is kept as an affine
/// set (solved in the least-squares sense when it has no exact solution)
/// and Dykstra's alternating projections run between its image
/// `{(−AᵀQ − QA, Q − εI)}` and the product of PSD cones, from `Q = I`,
/// until the iterate certifies feasibility or stalls.
///
/// Projections approach the cone from outside, so the iterate may still
/// violate the dissipation block slightly. If `opts.enforce_dissipation` is
/// set it is then polished towards `−AᵀQ − QA ⪰ εI`, first within the
/// port-consistent family and, when that family has no such point (some
/// ports observed but never driven, or a non-passive model), by the
/// shortest move towards the Lyapunov solution `AᵀQ + QA = −I`. The dissipation block is what keeps `R` positive
/// semidefinite.
pub fn solve_kyp(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, opts: &KypOptions) -> Result<KypSolution> {
    let n = a.nrows();
    let p = b.ncols();
    if a.ncols() != n || b.nrows() != n || c.ncols() != n || c.nrows() != p {
        return Err(Error::Shape(format!(
            "KYP needs square A and C of shape B^T: A {:?}, B {:?}, C {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    let eps_i = DMatrix::<f64>::identity(n, n) * opts.epsilon;
    let lyapunov = |q: &DMatrix<f64>| -(a.transpose() * q) - q * a;
    let violation = |q: &DMatrix<f64>| {
        let w = kyp_matrix(a, b, c, q);
        (
            linalg::negative_eigen_mass(&w),
            linalg::negative_eigen_mass(q),
            w.norm(),
        )
    };
    let score = |q: &DMatrix<f64>| {
        let (vw, vq, _) = violation(q);
        vw + vq
    };
    let certified = |q: &DMatrix<f64>| {
        let (vw, _, w_norm) = violation(q);
        vw <= opts.feasibility_tol * w_norm.max(1.0) && linalg::min_eigenvalue_sym(q) > 0.0
    };
    let (origin, basis) = port_affine_set(b, c)?;
    let full = dykstra_psd(
        &|q| vec![lyapunov(q), q - &eps_i],
        &score,
        &certified,
        &origin,
        &basis,
        &DMatrix::identity(n, n),
        opts,
    )?;
    let feasible = !full.diverged && certified(&full.q);
    let mut q = full.q;

    // lossless models sit exactly on the boundary, so only a violation
    // beyond roundoff triggers the polish, which then aims inside
    let violated = |q: &DMatrix<f64>| {
        let l = lyapunov(q);
        linalg::min_eigenvalue_sym(&l) < -1e-12 * l.norm().max(1.0) || linalg::min_eigenvalue_sym(q) <= 0.0
    };
    let dissipative = |q: &DMatrix<f64>| {
        linalg::min_eigenvalue_sym(&lyapunov(q)) >= 0.5 * opts.epsilon && linalg::min_eigenvalue_sym(q) > 0.0
    };
    let mut dissipation_sweeps = 0;
    if opts.enforce_dissipation && violated(&q) {
        let margin = |q: &DMatrix<f64>| vec![lyapunov(q) - &eps_i, q - &eps_i];
        let margin_violation = |q: &DMatrix<f64>| {
            linalg::negative_eigen_mass(&(lyapunov(q) - &eps_i)) + linalg::negative_eigen_mass(&(q - &eps_i))
        };
        let within = dykstra_psd(&margin, &margin_violation, &dissipative, &origin, &basis, &q, opts)?;
        dissipation_sweeps = within.sweeps;
        if dissipative(&within.q) {
            q = within.q;
        } else if let Some(repaired) = toward_lyapunov_solution(a, &q, &dissipative)? {
            q = repaired;
        }
    }
    let (neg_w, neg_q, _) = violation(&q);
    Ok(KypSolution {
        q: linalg::symmetrize(&q),
        feasible,
        diverged: full.diverged,
        sweeps: full.sweeps,
        final_displacement: full.displacement,
        dissipation_sweeps,
        negative_mass_w: neg_w,
        negative_mass_q: neg_q,
        min_eig_dissipation: linalg::min_eigenvalue_sym(&lyapunov(&q)),
    })
}

/// Floor used by [`nearest_psd`]: `1e-8 · max(1, λ_max)`.
pub fn psd_floor(m: &DMatrix<f64>) -> f64 {
    let lmax = nalgebra::SymmetricEigen::new(linalg::symmetrize(m)).eigenvalues.max();
    1e-8 * lmax.max(1.0)
}

/// Nearest symmetric PSD matrix with eigenvalues floored at [`psd_floor`],
/// so the result stays invertible.
pub fn nearest_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::clamp_eigenvalues(m, psd_floor(m))
}

/// Un-normalized port-Hamiltonian matrices with `H = ½ xᵀQx`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhMatrices {
    pub j: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub n: DMatrix<f64>,
}

/// Residuals of the construction identities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstructionResiduals {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl ConstructionResiduals {
    pub fn max(&self) -> f64 {
        self.a.max(self.b).max(self.c).max(self.d)
    }
}

impl PhMatrices {
    /// Max-abs errors of `(J−R)Q = A`, `G−P = B`, `(G+P)ᵀQ = C`, `S+N = D`.
    pub fn residuals(&self, sys: &CtStateSpace, q: &DMatrix<f64>) -> ConstructionResiduals {
        let amax = |m: DMatrix<f64>| m.amax();
        ConstructionResiduals {
            a: amax((&self.j - &self.r) * q - &sys.a),
            b: amax(&self.g - &self.p - &sys.b),
            c: amax((&self.g + &self.p).transpose() * q - &sys.c),
            d: amax(&self.s + &self.n - &sys.d),
        }
    }
}

fn cholesky(q: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    linalg::symmetrize(q).cholesky().ok_or_else(|| {
        Error::Numerical("Q is not positive definite; project it with nearest_psd before constructing".into())
    })
}

/// Splits `A, B, C, D` into port-Hamiltonian parts for a given `Q ≻ 0`:
/// `J = ½(AQ⁻¹ − Q⁻ᵀAᵀ)`, `R = −½(AQ⁻¹ + Q⁻ᵀAᵀ)`, `G = ½(Q⁻ᵀCᵀ + B)`,
/// `P = ½(Q⁻ᵀCᵀ − B)`, `S = ½(D + Dᵀ)`, `N = ½(D − Dᵀ)`.
///
/// `(J−R)Q = A`, `G−P = B` and `(G+P)ᵀQ = C` hold for any invertible `Q`;
/// `R ⪰ 0` additionally needs the Lyapunov block of the KYP inequality.
pub fn build_ph_from_ss(sys: &CtStateSpace, q: &DMatrix<f64>) -> Result<PhMatrices> {
    let n = sys.n_x();
    if q.shape() != (n, n) {
        return Err(Error::Shape(format!("Q is {:?}, expected {n}x{n}", q.shape())));
    }
    let qi = cholesky(q)?.inverse();
    let qit = qi.transpose();
    let aqi = &sys.a * &qi;
    let qiat = &qit * sys.a.transpose();
    let qict = &qit * sys.c.transpose();
    let d = &sys.d;
    if d.nrows() != d.ncols() {
        return Err(Error::Shape(format!("feedthrough must be square, got {:?}", d.shape())));
    }
    Ok(PhMatrices {
        j: (&aqi - &qiat) * 0.5,
        r: -(&aqi + &qiat) * 0.5,
        g: (&qict + &sys.b) * 0.5,
        p: (&qict - &sys.b) * 0.5,
        s: (d + d.transpose()) * 0.5,
        n: (d - d.transpose()) * 0.5,
    })
}

/// Repairs applied and checks made while building a [`LinearPH`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhDiagnostics {
    pub kyp: Option<KypSolution>,
    /// `‖Q̃ − nearest_psd(Q̃)‖_F`.
    pub q_projection_distance: f64,
    /// `‖R_lin − nearest PSD‖_F`; zero when no projection was needed.
    pub r_projection_distance: f64,
    pub r_min_eig_before_projection: f64,
    /// Relative ω-grid deviation between the source model and the
    /// realization.
    pub io_deviation: Option<f64>,
    pub warnings: Vec<String>,
}

/// Normalized linear port-Hamiltonian system
/// `ẋ = (J−R)Qx + (G−P)u`, `y = (G+P)ᵀQx + (S+N)u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearPH {
    #[serde(with = "serde_rows")]
    pub j: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub r: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub g: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub p: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub s: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub n: DMatrix<f64>,
    /// Cholesky factor of the pre-normalization `Q`.
    #[serde(with = "serde_rows")]
    pub v: DMatrix<f64>,
    pub diagnostics: PhDiagnostics,
}

/// Structural checks on a [`LinearPH`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassivityReport {
    pub min_eig_r: f64,
    pub skew_defect_j: f64,
    pub skew_defect_n: f64,
    pub p_norm: f64,
    /// Norm of each column of `P` (one per port).
    pub p_port_norms: Vec<f64>,
    pub q_projection_distance: f64,
    pub r_projection_distance: f64,
    pub kyp_feasible: Option<bool>,
}

impl LinearPH {
    pub fn n_x(&self) -> usize {
        self.j.nrows()
    }

    pub fn n_p(&self) -> usize {
        self.g.ncols()
    }

    pub fn to_state_space(&self) -> CtStateSpace {
        CtStateSpace {
            a: (&self.j - &self.r) * &self.q,
            b: &self.g - &self.p,
            c: (&self.g + &self.p).transpose() * &self.q,
            d: &self.s + &self.n,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let ph: Self = read_json(path)?;
        let (n, m) = (ph.j.nrows(), ph.g.ncols());
        let square = |x: &DMatrix<f64>, k| x.shape() == (k, k);
        if !(square(&ph.j, n) && square(&ph.r, n) && square(&ph.q, n) && square(&ph.v, n))
            || ph.g.shape() != (n, m)
            || ph.p.shape() != (n, m)
            || !square(&ph.s, m)
            || !square(&ph.n, m)
        {
            return Err(Error::format(path, "inconsistent linear port-Hamiltonian dimensions"));
        }
        Ok(ph)
    }
}

/// Normalizes by `Q = VVᵀ`: the state change `z = Vᵀx` gives
/// `J_lin = VᵀJV`, `R_lin = VᵀRV`, `G_lin = VᵀG`, `P_lin = VᵀP`, `Q_lin = I`.
pub fn cholesky_normalize(ph: &PhMatrices, q: &DMatrix<f64>) -> Result<LinearPH> {
    let v = cholesky(q)?.l();
    let vt = v.transpose();
    let n = v.nrows();
    Ok(LinearPH {
        j: &vt * &ph.j * &v,
        r: &vt * &ph.r * &v,
        g: &vt * &ph.g,
        p: &vt * &ph.p,
        q: DMatrix::identity(n, n),
        s: ph.s.clone(),
        n: ph.n.clone(),
        v,
        diagnostics: PhDiagnostics::default(),
    })
}

pub fn passivity_report(ph: &LinearPH) -> PassivityReport {
    PassivityReport {
        min_eig_r: linalg::min_eigenvalue_sym(&ph.r),
        skew_defect_j: (&ph.j + ph.j.transpose()).norm(),
        skew_defect_n: (&ph.n + ph.n.transpose()).norm(),
        p_norm: ph.p.norm(),
        p_port_norms: ph.p.column_iter().map(|c| c.norm()).collect(),
        q_projection_distance: ph.diagnostics.q_projection_distance,
        r_projection_distance: ph.diagnostics.r_projection_distance,
        kyp_feasible: ph.diagnostics.kyp.as_ref().map(|k| k.feasible),
    }
}

/// Full construction from a continuous-time model with `D = 0`: KYP solve,
/// PSD repair of `Q`, PH split, normalization and, if `R_lin` comes out
/// indefinite, its PSD projection. `omegas` is the grid on which the
/// input-output discrepancy of the result is measured.
pub fn linear_ph_from_ct(sys: &CtStateSpace, omegas: &[f64], opts: &KypOptions) -> Result<LinearPH> {
    if sys.b.ncols() != sys.c.nrows() {
        return Err(Error::Shape(format!(
            "port count mismatch: {} inputs, {} outputs; pad the inputs first",
            sys.b.ncols(),
            sys.c.nrows()
        )));
    }
    let mut warnings = Vec::new();
    let kyp = solve_kyp(&sys.a, &sys.b, &sys.c, opts)?;
    if !kyp.feasible {
        warnings.push(format!(
            "KYP inequality not satisfied (negative eigenvalue mass {:.3e}); continuing with the least-violating Q",
            kyp.negative_mass_w
        ));
    }
    let q = nearest_psd(&kyp.q);
    let q_dist = (&q - &kyp.q).norm();
    let ph = build_ph_from_ss(sys, &q)?;
    let mut lin = cholesky_normalize(&ph, &q)?;
    let r_min = linalg::min_eigenvalue_sym(&lin.r);
    let mut r_dist = 0.0;
    if r_min < 0.0 {
        let projected = linalg::clamp_eigenvalues(&lin.r, 0.0);
        r_dist = (&projected - &lin.r).norm();
        lin.r = projected;
        warnings.push(format!(
            "dissipation matrix had min eigenvalue {r_min:.3e}; projected onto the PSD cone (distance {r_dist:.3e})"
        ));
    } else {
        lin.r = linalg::symmetrize(&lin.r);
    }
    let io = if omegas.is_empty() {
        None
    } else {
        let h0 = freq_response(sys, omegas)?;
        let h1 = freq_response(&lin.to_state_space(), omegas)?;
        Some(relative_grid_deviation(&h0, &h1))
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    lin.diagnostics = PhDiagnostics {
        kyp: Some(kyp),
        q_projection_distance: q_dist,
        r_projection_distance: r_dist,
        r_min_eig_before_projection: r_min,
        io_deviation: io,
        warnings,
    };
    Ok(lin)
}
