mod common;

use common::*;
use nalgebra::DMatrix;
use phnn_core::autodiff::Tensor;
use phnn_core::dataset::{Dataset, Role};
use phnn_core::linear_ident::{
    c2d, d2c, freq_response, freq_response_dt, log_grid, relative_grid_deviation, subspace_id,
};
use proptest::prelude::*;

fn records(sys: &phnn_core::linear_ident::DtStateSpace, seed: u64, n_rec: usize, len: usize) -> Vec<Dataset> {
    let mut r = rng(seed);
    (0..n_rec)
        .map(|_| {
            let u = gaussian(&mut r, len, sys.b.ncols());
            let x0 = gaussian(&mut r, sys.a.nrows(), 1);
            record_from(sys, &u, &x0)
        })
        .collect()
}

#[test]
fn recovers_a_known_linear_system() {
    let mut r = rng(42);
    let truth = random_stable_dt(&mut r, 6, 1, 3, 0.1);
    let data = records(&truth, 1, 5, 1000);
    let est = subspace_id(&data, 6, 20).unwrap();
    assert!(est.warnings.is_empty(), "{:?}", est.warnings);
    // oracle: frequency responses of the generating system on 50 points
    let grid = log_grid(0.01, std::f64::consts::PI / 0.1, 50);
    let h_true = freq_response_dt(&truth, &grid).unwrap();
    let h_est = freq_response_dt(&est.model, &grid).unwrap();
    let dev = relative_grid_deviation(&h_true, &h_est);
    assert!(dev < 1e-6, "deviation {dev}");
    assert_eq!(est.model.d, DMatrix::zeros(3, 1));
}

#[test]
fn estimate_is_invariant_under_state_coordinates() {
    let mut r = rng(7);
    let truth = random_stable_dt(&mut r, 6, 1, 3, 0.1);
    let t = DMatrix::identity(6, 6) + gaussian(&mut r, 6, 6) * 0.5;
    let ti = t.clone().try_inverse().unwrap();
    let mut moved = truth.clone();
    moved.a = &t * &truth.a * &ti;
    moved.b = &t * &truth.b;
    moved.c = &truth.c * &ti;

    let mut r1 = rng(3);
    let mut r2 = rng(3);
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    for _ in 0..5 {
        let u = gaussian(&mut r1, 1000, 1);
        let x0 = gaussian(&mut r1, 6, 1);
        let _ = gaussian(&mut r2, 1000, 1);
        let _ = gaussian(&mut r2, 6, 1);
        d1.push(record_from(&truth, &u, &x0));
        d2.push(record_from(&moved, &u, &(&t * &x0)));
    }
    let grid = log_grid(0.01, 31.0, 50);
    let h1 = freq_response_dt(&subspace_id(&d1, 6, 20).unwrap().model, &grid).unwrap();
    let h2 = freq_response_dt(&subspace_id(&d2, 6, 20).unwrap().model, &grid).unwrap();
    assert!(relative_grid_deviation(&h1, &h2) < 1e-8);
}

#[test]
fn white_noise_without_input_warns() {
    let mut r = rng(9);
    let data: Vec<Dataset> = (0..5)
        .map(|_| {
            let y = gaussian(&mut r, 1000, 3);
            Dataset::new(Tensor::zeros(1000, 1), Tensor::from_dmatrix(&y), 0.1, Role::Train).unwrap()
        })
        .collect();
    let est = subspace_id(&data, 6, 20).unwrap();
    assert!(
        est.warnings.iter().any(|w| w.contains("no coherent linear dynamics")),
        "{:?}",
        est.warnings
    );
}

#[test]
fn constant_input_is_rank_deficient() {
    let mut r = rng(10);
    let truth = random_stable_dt(&mut r, 4, 1, 2, 0.1);
    let u = DMatrix::from_element(500, 1, 1.0);
    let data = vec![record_from(&truth, &u, &DMatrix::zeros(4, 1))];
    let err = subspace_id(&data, 4, 10).unwrap_err().to_string();
    assert!(err.contains("input block Hankel"), "{err}");
}

#[test]
fn d2c_undoes_zero_order_hold() {
    // oracle: matrix-exponential discretization of a random stable system
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let ct = random_stable_ct(&mut r, 6, 1, 3);
        let dt = c2d(&ct, 0.1);
        let back = d2c(&dt).unwrap();
        assert!((&back.a - &ct.a).norm() < 1e-10 * ct.a.norm(), "seed {seed}");
        assert!((&back.b - &ct.b).norm() < 1e-10 * ct.b.norm(), "seed {seed}");
        let grid = log_grid(0.01, 30.0, 50);
        let dev = relative_grid_deviation(
            &freq_response(&ct, &grid).unwrap(),
            &freq_response(&back, &grid).unwrap(),
        );
        assert!(dev < 1e-10, "seed {seed}: {dev}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn d2c_c2d_round_trip(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let ct = random_stable_ct(&mut r, 4, 2, 2);
        let dt = c2d(&ct, 0.1);
        let again = c2d(&d2c(&dt).unwrap(), 0.1);
        let grid = log_grid(0.01, 30.0, 20);
        let dev = relative_grid_deviation(
            &freq_response_dt(&dt, &grid).unwrap(),
            &freq_response_dt(&again, &grid).unwrap(),
        );
        prop_assert!(dev < 1e-10, "{}", dev);
    }
}
