use phnn_core::experiments::{box_stats, mean_std, noise_floor, ExperimentConfig, Layout};
use phnn_core::phnn_model::Mode;
use proptest::prelude::*;

#[test]
fn hash_ignores_output_dir_but_not_settings() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    b.output_dir = "/somewhere/else".into();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
    b.train.seed = 7;
    assert_ne!(a.hash(), b.hash());
    assert_ne!(a.hash(), a.with_snr(10.0).hash());
}

#[test]
fn default_config_matches_study_setup() {
    let c = ExperimentConfig::default();
    c.validate().unwrap();
    assert_eq!(c.train.learning_rate, 1e-3);
    assert_eq!(c.train.batch_size, 64);
    assert_eq!(c.train.iterations, 1000);
    assert_eq!(c.train.pretrain_iterations, 10_000);
    assert_eq!((c.msd.n_train, c.msd.n_val, c.msd.n_test), (5, 2, 1));
    assert_eq!(c.snrs, vec![10.0, 20.0, 30.0, 40.0]);
    let d = c.model_dims();
    assert_eq!(
        (d.n_x, d.n_p, d.n_u, d.encoder_hidden, d.matrix_hidden),
        (6, 3, 1, 64, 16)
    );
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ExperimentConfig::default();
    c.ident.horizon = 3;
    assert!(c.validate().is_err());
    let mut c = ExperimentConfig::default();
    c.seeds.clear();
    assert!(c.validate().is_err());
    let mut c = ExperimentConfig::default();
    c.train.horizon = 1;
    assert!(c.validate().is_err());
}

#[test]
fn partial_json_fills_defaults() {
    let c: ExperimentConfig = serde_json::from_str(r#"{"train": {"iterations": 5}, "modes": ["nn-random"]}"#).unwrap();
    assert_eq!(c.train.iterations, 5);
    assert_eq!(c.train.batch_size, 64);
    assert_eq!(c.modes, vec![Mode::NnRandom]);
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
}

#[test]
fn layout_paths() {
    let l = Layout::new("/r");
    assert_eq!(
        l.run_dir(Mode::NnLinearInit, 3),
        std::path::Path::new("/r/runs/nn-linear-init/seed3")
    );
    assert_eq!(
        l.sweep_cell(30.0).data_dir(),
        std::path::Path::new("/r/sweep/snr30/data")
    );
    assert_eq!(l.linear_ph_path(), std::path::Path::new("/r/linear/linear_ph.json"));
}

#[test]
fn noise_floor_values() {
    for (snr, floor) in [
        (10.0, 0.31622776601683794),
        (20.0, 0.1),
        (30.0, 0.03162277660168379),
        (40.0, 0.01),
    ] {
        assert!((noise_floor(snr) - floor).abs() < 1e-15);
    }
}

#[test]
fn box_stats_reference() {
    // same convention as numpy.percentile(..., method="linear")
    let b = box_stats(&[7.0, 1.0, 3.0, 5.0]).unwrap();
    assert_eq!((b.min, b.q1, b.median, b.q3, b.max), (1.0, 2.5, 4.0, 5.5, 7.0));
    assert_eq!(b.mean, 4.0);
    assert!((b.std - 5f64.sqrt()).abs() < 1e-15);
    assert!(box_stats(&[]).is_none());
    let one = box_stats(&[2.0]).unwrap();
    assert_eq!((one.q1, one.q3, one.std), (2.0, 2.0, 0.0));
}

proptest! {
    #[test]
    fn box_stats_ordered(v in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        let b = box_stats(&v).unwrap();
        prop_assert!(b.min <= b.q1 && b.q1 <= b.median && b.median <= b.q3 && b.q3 <= b.max);
        prop_assert!(b.min <= b.mean + 1e-9 && b.mean <= b.max + 1e-9);
        let (m, s) = mean_std(&v);
        prop_assert_eq!(m, b.mean);
        prop_assert!(s >= 0.0);
    }
}
