mod common;

use common::*;
use nalgebra::{DMatrix, SymmetricEigen};
use phnn_core::dataset::{Normalizer, Role};
use phnn_core::linalg;
use phnn_core::linear_ident::{d2c, freq_response, log_grid, relative_grid_deviation, subspace_id, CtStateSpace};
use phnn_core::msd::{make_experiment_set, MsdConfig};
use phnn_core::ph_construct::*;
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, v)
}

fn random_pd(r: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let x = gaussian(r, n, n);
    &x * x.transpose() + DMatrix::identity(n, n) * 0.1
}

/// Passive system built from port-Hamiltonian parts: `A = (J−R)Q`,
/// `B = G`, `C = GᵀQ`, with `Q` of condition number at most `cond`.
fn random_passive_cond(r: &mut ChaCha8Rng, n: usize, p: usize, cond: f64) -> (CtStateSpace, DMatrix<f64>) {
    let s = gaussian(r, n, n) * 0.5;
    let j = &s - s.transpose();
    let l = gaussian(r, n, n) * 0.5;
    let rr = &l * l.transpose() + DMatrix::identity(n, n) * 0.2;
    let (u, _) = gaussian(r, n, n).qr().unpack();
    let eig = DMatrix::from_fn(n, 1, |i, _| cond.powf(i as f64 / (n - 1).max(1) as f64));
    let q = &u * DMatrix::from_diagonal(&eig.column(0)) * u.transpose();
    let g = gaussian(r, n, p);
    let sys = CtStateSpace::new((&j - &rr) * &q, g.clone(), g.transpose() * &q, DMatrix::zeros(p, p)).unwrap();
    (sys, q)
}

fn random_passive(r: &mut ChaCha8Rng, n: usize, p: usize) -> (CtStateSpace, DMatrix<f64>) {
    random_passive_cond(r, n, p, 4.0)
}

fn grid() -> Vec<f64> {
    log_grid(1e-2, 1e2, 100)
}

#[test]
fn lossless_oscillator_has_no_dissipation() {
    let a = m(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let b = m(2, 1, &[0.0, 1.0]);
    let c = m(1, 2, &[0.0, 1.0]);
    let sol = solve_kyp(&a, &b, &c, &KypOptions::default()).unwrap();
    assert!(sol.feasible);
    assert!((&sol.q - DMatrix::identity(2, 2)).amax() < 1e-9);
    let lyap = -(a.transpose() * &sol.q) - &sol.q * &a;
    assert!(lyap.amax() < 1e-9);
    let sys = CtStateSpace::new(a.clone(), b, c, DMatrix::zeros(1, 1)).unwrap();
    let ph = build_ph_from_ss(&sys, &DMatrix::identity(2, 2)).unwrap();
    assert_eq!(ph.r, DMatrix::zeros(2, 2));
    assert_eq!(ph.j, a);
}

#[test]
fn scalar_kyp_blocks_vanish_analytically() {
    // A=-1, B=C=1, Q=1: Lyapunov block 2, port block 0
    let w = kyp_matrix(&m(1, 1, &[-1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]));
    assert_eq!(w, m(2, 2, &[2.0, 0.0, 0.0, 0.0]));
    let sol = solve_kyp(
        &m(1, 1, &[-1.0]),
        &m(1, 1, &[1.0]),
        &m(1, 1, &[1.0]),
        &KypOptions::default(),
    )
    .unwrap();
    assert!(sol.feasible && sol.negative_mass_w < 1e-12);
}

#[test]
fn antistable_scalar_stays_infeasible_even_after_repair() {
    let sol = solve_kyp(
        &m(1, 1, &[1.0]),
        &m(1, 1, &[1.0]),
        &m(1, 1, &[1.0]),
        &KypOptions::default(),
    )
    .unwrap();
    assert!(!sol.feasible);
    // −2Q ⪰ 0 and Q ≻ 0 cannot hold together
    assert!(sol.min_eig_dissipation < 0.0 || linalg::min_eigenvalue_sym(&sol.q) <= 0.0);
}

#[test]
fn scalar_normalization_example() {
    let ph = PhMatrices {
        j: m(1, 1, &[0.0]),
        r: m(1, 1, &[0.25]),
        g: m(1, 1, &[1.0]),
        p: m(1, 1, &[0.0]),
        s: m(1, 1, &[0.0]),
        n: m(1, 1, &[0.0]),
    };
    let q = m(1, 1, &[4.0]);
    let lin = cholesky_normalize(&ph, &q).unwrap();
    assert_eq!(lin.v[(0, 0)], 2.0);
    assert_eq!(lin.r[(0, 0)], 1.0);
    assert_eq!(lin.g[(0, 0)], 2.0);
    assert_eq!(lin.q[(0, 0)], 1.0);
    // A = (J−R)Q = −1, B = G = 1, C = GᵀQ = 4 before and after
    let w = grid();
    let h = freq_response(&lin.to_state_space(), &w).unwrap();
    for (hw, om) in h.iter().zip(&w) {
        let expect = nalgebra::Complex::new(4.0, 0.0) / nalgebra::Complex::new(1.0, *om);
        assert!((hw[(0, 0)] - expect).norm() < 1e-14);
    }
}

#[test]
fn identity_q_leaves_matrices_unchanged() {
    let mut r = rng(5);
    let (sys, _) = random_passive(&mut r, 4, 2);
    let ph = build_ph_from_ss(&sys, &DMatrix::identity(4, 4)).unwrap();
    let lin = cholesky_normalize(&ph, &DMatrix::identity(4, 4)).unwrap();
    assert_eq!(lin.v, DMatrix::identity(4, 4));
    assert_eq!((lin.j, lin.r, lin.g, lin.p), (ph.j, ph.r, ph.g, ph.p));
}

#[test]
fn construction_identities_for_random_pd_q() {
    let mut r = rng(11);
    for case in 0..50 {
        let sys = CtStateSpace::new(
            gaussian(&mut r, 6, 6),
            gaussian(&mut r, 6, 3),
            gaussian(&mut r, 3, 6),
            gaussian(&mut r, 3, 3),
        )
        .unwrap();
        let q = random_pd(&mut r, 6);
        let ph = build_ph_from_ss(&sys, &q).unwrap();
        let res = ph.residuals(&sys, &q);
        assert!(res.max() < 1e-10, "case {case}: {res:?}");
        assert!((&ph.j + ph.j.transpose()).amax() < 1e-12);
        assert!((&ph.n + ph.n.transpose()).amax() < 1e-12);
        let lin = cholesky_normalize(&ph, &q).unwrap();
        let before = CtStateSpace::new(
            (&ph.j - &ph.r) * &q,
            &ph.g - &ph.p,
            (&ph.g + &ph.p).transpose() * &q,
            &ph.s + &ph.n,
        )
        .unwrap();
        let dev = relative_grid_deviation(
            &freq_response(&before, &grid()).unwrap(),
            &freq_response(&lin.to_state_space(), &grid()).unwrap(),
        );
        assert!(dev < 1e-10, "case {case}: {dev}");
        assert!((&lin.v * lin.v.transpose() - &q).amax() < 1e-12 * q.amax());
    }
}

#[test]
fn passive_system_is_recovered_exactly() {
    let mut r = rng(21);
    for case in 0..10 {
        let (sys, _) = random_passive(&mut r, 4, 2);
        let sol = solve_kyp(&sys.a, &sys.b, &sys.c, &KypOptions::default()).unwrap();
        assert!(sol.feasible, "case {case}: {sol:?}");
        // port block vanishes on every excited port
        assert!((&sol.q * &sys.b - sys.c.transpose()).amax() < 1e-6, "case {case}");
        let lin = linear_ph_from_ct(&sys, &grid(), &KypOptions::default()).unwrap();
        let rep = passivity_report(&lin);
        assert!(rep.min_eig_r >= -1e-10);
        assert!(rep.p_norm < 1e-5, "case {case}: {}", rep.p_norm);
        assert!(lin.diagnostics.io_deviation.unwrap() < 1e-8);
    }
}

#[test]
fn thin_feasible_set_still_gives_an_exact_realization() {
    // ill-conditioned storage makes the feasible slice thin; the solver may
    // stop short of certifying it but must keep R ⪰ 0 and the IO map
    let mut r = rng(21);
    for _ in 0..5 {
        let (sys, _) = random_passive_cond(&mut r, 4, 2, 1e3);
        let lin = linear_ph_from_ct(&sys, &grid(), &KypOptions::default()).unwrap();
        let k = lin.diagnostics.kyp.as_ref().unwrap();
        assert!(k.min_eig_dissipation >= 0.0);
        assert!(passivity_report(&lin).min_eig_r >= -1e-10);
        assert!(lin.diagnostics.io_deviation.unwrap() < 1e-8);
    }
}

#[test]
fn identified_surrogate_round_trips_through_the_pipeline() {
    // noiseless data from a passive system, identified, converted and realized
    let mut r = rng(33);
    let (ct, _) = random_passive(&mut r, 4, 1);
    let dt = phnn_core::linear_ident::c2d(&ct, 0.1);
    let data: Vec<_> = (0..5)
        .map(|_| record_from(&dt, &gaussian(&mut r, 1000, 1), &gaussian(&mut r, 4, 1)))
        .collect();
    let est = d2c(&subspace_id(&data, 4, 20).unwrap().model).unwrap();
    let lin = linear_ph_from_ct(&est, &grid(), &KypOptions::default()).unwrap();
    let dev = relative_grid_deviation(
        &freq_response(&ct, &grid()).unwrap(),
        &freq_response(&lin.to_state_space(), &grid()).unwrap(),
    );
    assert!(dev < 1e-8, "{dev}");
    assert!(lin.diagnostics.io_deviation.unwrap() < 1e-8);
}

#[test]
fn msd_padded_ports_are_not_collocated() {
    let cfg = MsdConfig::default();
    let recs = make_experiment_set(&cfg).unwrap();
    let train: Vec<_> = recs
        .iter()
        .filter(|r| r.dataset.role == Role::Train)
        .map(|r| r.dataset.clone())
        .collect();
    let norm = Normalizer::fit(&train).unwrap();
    let train: Vec<_> = train.iter().map(|d| norm.normalize(d)).collect();
    let est = d2c(&subspace_id(&train, 6, 20).unwrap().model).unwrap().pad_inputs(3);
    let lin = linear_ph_from_ct(
        &est,
        &log_grid(1e-2, std::f64::consts::PI / cfg.ts(), 100),
        &KypOptions::default(),
    )
    .unwrap();
    let rep = passivity_report(&lin);
    assert_eq!(rep.kyp_feasible, Some(false));
    assert!(rep.p_port_norms[1] > 1e-3 && rep.p_port_norms[2] > 1e-3, "{rep:?}");
    assert!(rep.min_eig_r >= -1e-10);
    assert!(lin.diagnostics.io_deviation.unwrap() < 1e-8);
}

#[test]
fn linear_ph_json_round_trip() {
    let mut r = rng(8);
    let (sys, _) = random_passive(&mut r, 3, 2);
    let lin = linear_ph_from_ct(&sys, &grid(), &KypOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("linear_ph.json");
    lin.write(&path).unwrap();
    assert_eq!(LinearPH::read(&path).unwrap(), lin);
}

#[test]
fn malformed_linear_ph_is_rejected() {
    let mut r = rng(8);
    let (sys, _) = random_passive(&mut r, 3, 2);
    let mut lin = linear_ph_from_ct(&sys, &[], &KypOptions::default()).unwrap();
    lin.p = DMatrix::zeros(2, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    lin.write(&path).unwrap();
    assert!(LinearPH::read(&path).is_err());
}

/// Higham projection computed through the SVD instead of an
/// eigendecomposition: `f I + ((S + |S|)/2)` with `S = sym(M) − f I`
/// and `|S|` the polar factor.
fn polar_oracle(mm: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = mm.nrows();
    let s = linalg::symmetrize(mm) - DMatrix::identity(n, n) * floor;
    let svd = s.clone().svd(true, true);
    let v_t = svd.v_t.unwrap();
    let abs = v_t.transpose() * DMatrix::from_diagonal(&svd.singular_values) * &v_t;
    DMatrix::identity(n, n) * floor + (s + abs) * 0.5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_psd_matches_polar_oracle(seed in 0u64..100_000, n in 1usize..7) {
        let mut r = rng(seed);
        let mm = gaussian(&mut r, n, n) * 3.0;
        let out = nearest_psd(&mm);
        let lmax = SymmetricEigen::new(linalg::symmetrize(&mm)).eigenvalues.max();
        let floor = 1e-8 * lmax.max(1.0);
        let oracle = polar_oracle(&mm, floor);
        prop_assert!((&out - &oracle).amax() < 1e-10 * mm.amax().max(1.0));
        prop_assert!(linalg::min_eigenvalue_sym(&out) >= floor * (1.0 - 1e-6));
        prop_assert!((&out - out.transpose()).amax() == 0.0);
    }

    #[test]
    fn nearest_psd_is_idempotent(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let once = nearest_psd(&gaussian(&mut r, 5, 5));
        let twice = nearest_psd(&once);
        prop_assert!((&once - &twice).amax() < 1e-12);
    }

    #[test]
    fn realization_preserves_io_for_stable_systems(seed in 0u64..100_000) {
        // any stable model: dissipation can always be enforced, so no
        // projection of R is needed and the ω-grid response is unchanged
        let mut r = rng(seed);
        let ct = random_stable_ct(&mut r, 4, 2, 2);
        let lin = linear_ph_from_ct(&ct, &grid(), &KypOptions::default()).unwrap();
        prop_assert!(lin.diagnostics.r_projection_distance < 1e-12);
        prop_assert!(lin.diagnostics.io_deviation.unwrap() < 1e-8);
        prop_assert!(passivity_report(&lin).skew_defect_j < 1e-10);
        prop_assert!(lin.q == DMatrix::identity(4, 4));
    }
}
