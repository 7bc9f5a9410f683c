//! Browser demo. Each operation returns a JSON string; the `*_json`
//! functions are plain Rust so they can be used and tested natively.

use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use phnn_core::dataset::{Normalizer, Role};
use phnn_core::error::{Error, Result};
use phnn_core::experiments::{estimate_linear_ph, ExperimentConfig, StudyData};
use phnn_core::linear_ident::{freq_response, log_grid, CtStateSpace};
use phnn_core::msd::{assemble_matrices, generate_record, make_experiment_set, MsdConfig};
use phnn_core::ph_construct::passivity_report;

#[derive(Serialize)]
struct Trace {
    t: Vec<f64>,
    u: Vec<f64>,
    /// Per mass: noisy and noiseless velocity.
    y: Vec<Vec<f64>>,
    y_clean: Vec<Vec<f64>>,
}

fn columns(t: &phnn_core::autodiff::Tensor) -> Vec<Vec<f64>> {
    (0..t.cols())
        .map(|c| (0..t.rows()).map(|r| t.row_slice(r)[c]).collect())
        .collect()
}

/// Simulates the chain under a random-phase multisine.
pub fn simulate_json(snr_db: f64, seed: u64, duration: f64) -> Result<String> {
    let cfg = MsdConfig {
        snr_db,
        duration,
        ..MsdConfig::default()
    };
    cfg.validate()?;
    let rec = generate_record(&cfg, Role::Test, 0, [seed, seed.wrapping_add(1), seed.wrapping_add(2)])?;
    let d = rec.dataset;
    let trace = Trace {
        t: (0..d.len()).map(|k| k as f64 * d.ts).collect(),
        u: d.u.data().to_vec(),
        y: columns(&d.y),
        y_clean: columns(d.y_clean.as_ref().expect("generated records carry clean outputs")),
    };
    Ok(serde_json::to_string(&trace).expect("trace serializes"))
}

/// Small-signal model of the chain (cubic damping dropped), state `(q, p)`,
/// force on the first mass, outputs the three velocities.
pub fn linearized_chain(cfg: &MsdConfig) -> Result<CtStateSpace> {
    let ch = assemble_matrices(cfg);
    let n = cfg.n_masses();
    let m_inv = ch
        .mass
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular mass matrix".into()))?;
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, n), (n, n)).copy_from(&m_inv);
    a.view_mut((n, 0), (n, n)).copy_from(&(-&ch.stiffness));
    a.view_mut((n, n), (n, n)).copy_from(&(-&ch.damping * &m_inv));
    let mut b = DMatrix::zeros(2 * n, 1);
    b[(n, 0)] = 1.0;
    let mut c = DMatrix::zeros(n, 2 * n);
    c.view_mut((0, n), (n, n)).copy_from(&m_inv);
    CtStateSpace::new(a, b, c, DMatrix::zeros(n, 1))
}

#[derive(Serialize)]
struct Bode {
    omega: Vec<f64>,
    /// `|H_i(jω)|` from the force to each velocity.
    magnitude: Vec<Vec<f64>>,
}

fn bode(sys: &CtStateSpace, omega: Vec<f64>, output_scale: &[f64], input_scale: f64) -> Result<Bode> {
    let h = freq_response(sys, &omega)?;
    let magnitude = (0..sys.c.nrows())
        .map(|i| {
            h.iter()
                .map(|m| m[(i, 0)].norm() * output_scale[i] / input_scale)
                .collect()
        })
        .collect();
    Ok(Bode { omega, magnitude })
}

/// Frequency response of the small-signal chain with damping `d` per element.
pub fn frequency_response_json(damping: f64, points: usize) -> Result<String> {
    let cfg = MsdConfig {
        damping: vec![damping; 3],
        ..MsdConfig::default()
    };
    cfg.validate()?;
    let sys = linearized_chain(&cfg)?;
    let out = bode(&sys, log_grid(1e-2, 1e1, points.max(2)), &[1.0; 3], 1.0)?;
    Ok(serde_json::to_string(&out).expect("bode serializes"))
}

#[derive(Serialize)]
struct Estimate {
    passivity: phnn_core::ph_construct::PassivityReport,
    io_deviation: Option<f64>,
    warnings: Vec<String>,
    singular_values: Vec<f64>,
    /// Estimated model, in physical units.
    estimate: Bode,
    /// Small-signal chain for comparison.
    small_signal: Bode,
}

/// Generates a training set, then subspace estimate → KYP → normalized
/// port-Hamiltonian realization.
pub fn estimate_json(snr_db: f64, seed: u64) -> Result<String> {
    let mut cfg = ExperimentConfig::default().with_snr(snr_db);
    cfg.msd.data_seed = seed;
    cfg.msd.n_val = 1;
    cfg.msd.n_test = 1;
    let recs = make_experiment_set(&cfg.msd)?;
    let raw: Vec<_> = recs
        .into_iter()
        .filter(|r| r.meta.role == Role::Train)
        .map(|r| r.dataset)
        .collect();
    let normalizer = Normalizer::fit(&raw)?;
    let data = StudyData {
        train: raw.iter().map(|d| normalizer.normalize(d)).collect(),
        val: Vec::new(),
        test: Vec::new(),
        normalizer,
    };
    let (lin, singular_values, mut warnings) = estimate_linear_ph(&cfg, &data)?;
    warnings.extend(lin.diagnostics.warnings.iter().cloned());
    let omega = log_grid(1e-2, 1e1, 200);
    let n = &data.normalizer;
    let out = Estimate {
        passivity: passivity_report(&lin),
        io_deviation: lin.diagnostics.io_deviation,
        warnings,
        singular_values,
        estimate: bode(&lin.to_state_space(), omega.clone(), &n.y_std, n.u_std[0])?,
        small_signal: bode(&linearized_chain(&cfg.msd)?, omega, &[1.0; 3], 1.0)?,
    };
    Ok(serde_json::to_string(&out).expect("estimate serializes"))
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate(snr_db: f64, seed: u32, duration: f64) -> std::result::Result<String, JsError> {
    js(simulate_json(snr_db, seed as u64, duration))
}

#[wasm_bindgen]
pub fn frequency_response(damping: f64, points: u32) -> std::result::Result<String, JsError> {
    js(frequency_response_json(damping, points as usize))
}

#[wasm_bindgen]
pub fn estimate(snr_db: f64, seed: u32) -> std::result::Result<String, JsError> {
    js(estimate_json(snr_db, seed as u64))
}
