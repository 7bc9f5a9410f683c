use nalgebra::{Complex, DMatrix, DVector};
use phnn_core::msd::{assemble_matrices, MsdConfig};
use phnn_wasm::{estimate_json, frequency_response_json, simulate_json};
use serde_json::Value;

#[test]
fn simulate_returns_consistent_trace() {
    let v: Value = serde_json::from_str(&simulate_json(20.0, 3, 10.0).unwrap()).unwrap();
    let t = v["t"].as_array().unwrap();
    assert_eq!(t.len(), 100);
    assert_eq!(v["u"].as_array().unwrap().len(), 100);
    assert_eq!(v["y"].as_array().unwrap().len(), 3);
    assert_eq!(v["y_clean"][2].as_array().unwrap().len(), 100);
    // same seed, same trace
    assert_eq!(
        simulate_json(20.0, 3, 10.0).unwrap(),
        simulate_json(20.0, 3, 10.0).unwrap()
    );
    assert!(simulate_json(20.0, 3, -1.0).is_err());
}

#[test]
fn frequency_response_matches_direct_solve() {
    let v: Value = serde_json::from_str(&frequency_response_json(0.5, 40).unwrap()).unwrap();
    let omega: Vec<f64> = serde_json::from_value(v["omega"].clone()).unwrap();
    let mag: Vec<Vec<f64>> = serde_json::from_value(v["magnitude"].clone()).unwrap();
    assert_eq!(omega.len(), 40);

    // velocity response jω (K − ω²M + jωD)⁻¹ e₁
    let ch = assemble_matrices(&MsdConfig::default());
    let c = |m: &DMatrix<f64>| m.map(|x| Complex::new(x, 0.0));
    for (k, &w) in omega.iter().enumerate() {
        let jw = Complex::new(0.0, w);
        let z = c(&ch.stiffness) - c(&ch.mass) * Complex::new(w * w, 0.0) + c(&ch.damping) * jw;
        let mut e1 = DVector::zeros(3);
        e1[0] = Complex::new(1.0, 0.0);
        let x = z.lu().solve(&e1).unwrap() * jw;
        for i in 0..3 {
            let expect = x[i].norm();
            assert!((mag[i][k] - expect).abs() < 1e-10 * expect.max(1e-12), "ω={w} ch {i}");
        }
    }
    assert!(frequency_response_json(-1.0, 10).is_err());
}

#[test]
fn estimate_reports_valid_realization() {
    let v: Value = serde_json::from_str(&estimate_json(30.0, 5).unwrap()).unwrap();
    assert!(v["passivity"]["min_eig_r"].as_f64().unwrap() >= -1e-10);
    assert!(v["passivity"]["skew_defect_j"].as_f64().unwrap() < 1e-10);
    assert!(v["singular_values"].as_array().unwrap().len() >= 6);
    let est: Vec<Vec<f64>> = serde_json::from_value(v["estimate"]["magnitude"].clone()).unwrap();
    assert_eq!(est.len(), 3);
    assert!(est.iter().flatten().all(|m| m.is_finite() && *m >= 0.0));
}
