//! Acceptance suite. Runs every criterion in sequence (timings are taken on
//! an otherwise idle process) and prints one PASS/FAIL line per criterion.
//!
//! The study criteria (7–9) train 9 full-budget models and take roughly half
//! an hour on one core. Set `PHNN_ACCEPTANCE_OUT` to keep the study outputs.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use common::*;
use nalgebra::{DMatrix, SymmetricEigen};
use phnn_core::autodiff::{grad_check_sampled, Tape, Tensor, Var};
use phnn_core::dataset::{Dataset, Normalizer, Role};
use phnn_core::experiments::{
    cmd_generate, cmd_linest, cmd_train, estimate_linear_ph, mean_std, noise_floor, ExperimentConfig, Layout,
    RunSummary, StudyData,
};
use phnn_core::linear_ident::{freq_response, log_grid, relative_grid_deviation, CtStateSpace};
use phnn_core::msd::make_experiment_set;
use phnn_core::ph_construct::{build_ph_from_ss, cholesky_normalize, linear_ph_from_ct, solve_kyp, KypOptions};
use phnn_core::phnn_model::{BoundModel, Mode, ModelDims, PhnnParams};
use phnn_core::training::{initial_state, nrmse_pooled, simulate, simulate_linear_ph, tail, truncated_loss, Window};
use rand::Rng;

type Outcome = Result<String, String>;

/// Written straight to stdout so the lines show up without `--nocapture`.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit_s: f64, start: Instant, detail: String) -> Outcome {
    let s = start.elapsed().as_secs_f64();
    check(s < limit_s, format!("{detail}; {s:.1} s (limit {limit_s} s)"))
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

fn default_data() -> (ExperimentConfig, StudyData) {
    let cfg = ExperimentConfig::default();
    let recs = make_experiment_set(&cfg.msd).unwrap();
    let by = |role: Role| {
        recs.iter()
            .filter(|r| r.meta.role == role)
            .map(|r| r.dataset.clone())
            .collect::<Vec<Dataset>>()
    };
    let raw_train = by(Role::Train);
    let normalizer = Normalizer::fit(&raw_train).unwrap();
    let norm = |v: Vec<Dataset>| v.iter().map(|d| normalizer.normalize(d)).collect();
    let data = StudyData {
        train: norm(raw_train),
        val: norm(by(Role::Val)),
        test: norm(by(Role::Test)),
        normalizer,
    };
    (cfg, data)
}

fn perturb(p: &mut PhnnParams, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += scale * r.random_range(-1.0..1.0);
        }
    }
}

fn structural_invariants() -> Outcome {
    let start = Instant::now();
    let dims = ModelDims::default();
    let mut r = rng(1);
    let (mut skew, mut psd, mut h_min) = (0.0f64, f64::INFINITY, f64::INFINITY);
    for case in 0..100 {
        let mut p = PhnnParams::init(Mode::NnRandom, dims, None, case).unwrap();
        // random weight scales push the networks away from their init regime
        let scale = r.random_range(0.5..3.0);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let x: Vec<f64> = {
            let v: Vec<f64> = (0..dims.n_x).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let radius = r.random_range(0.0..10.0);
            v.iter().map(|a| a / n * radius).collect()
        };
        let (j, rr, _, _) = p.eval_matrices(&x);
        skew = skew.max((&j + j.transpose()).norm());
        psd = psd.min(min_eig(&rr));
        h_min = h_min.min(p.hamiltonian_and_grad(&x).0);
    }
    let ok = skew < 1e-12 && psd >= -1e-12 && h_min >= -1.0;
    within(
        10.0,
        start,
        format!("max ‖J+Jᵀ‖ {skew:.1e}, min eig(BBᵀ) {psd:.1e}, min H {h_min:.3}"),
    )
    .and_then(|d| check(ok, d))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (cfg, data) = default_data();
    let (lin, _, _) = estimate_linear_ph(&cfg, &data).unwrap();
    let windows = [Window { record: 0, start: 40 }, Window { record: 3, start: 500 }];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for mode in Mode::ALL {
        let mut p = PhnnParams::init(mode, cfg.model_dims(), Some(&lin), 3).unwrap();
        // activate the zeroed heads so every parameter group carries gradient
        perturb(&mut p, 4, 0.05);
        let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let m = BoundModel::from_vars(&p, tape, vars.to_vec());
            truncated_loss(&m, tape, &data.train, &windows, 10, 1).unwrap()
        };
        // central differences at h ≈ ε^(1/3), where roundoff and truncation balance
        let g = grad_check_sampled(f, &params, 1e-5, 6, 5).unwrap();
        worst = worst.max(g.max_rel_error);
        parts.push(format!("{mode} {:.1e}", g.max_rel_error));
    }
    let detail = format!("max relative error {}", parts.join(", "));
    let r = within(60.0, start, detail);
    r.and_then(|d| check(worst < 1e-5, d))
}

fn construction_identities() -> Outcome {
    let start = Instant::now();
    let mut r = rng(11);
    let grid = log_grid(1e-2, 1e2, 100);
    let (mut res_max, mut dev_max) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let sys = CtStateSpace::new(
            gaussian(&mut r, 6, 6),
            gaussian(&mut r, 6, 3),
            gaussian(&mut r, 3, 6),
            DMatrix::zeros(3, 3),
        )
        .unwrap();
        let x = gaussian(&mut r, 6, 6);
        let q = &x * x.transpose() + DMatrix::identity(6, 6) * 0.1;
        let ph = build_ph_from_ss(&sys, &q).unwrap();
        let a = (&ph.j - &ph.r) * &q - &sys.a;
        let b = (&ph.g - &ph.p) - &sys.b;
        let c = (&ph.g + &ph.p).transpose() * &q - &sys.c;
        res_max = res_max.max(a.amax()).max(b.amax()).max(c.amax());
        let lin = cholesky_normalize(&ph, &q).unwrap();
        let dev = relative_grid_deviation(
            &freq_response(&sys, &grid).unwrap(),
            &freq_response(&lin.to_state_space(), &grid).unwrap(),
        );
        dev_max = dev_max.max(dev);
    }
    within(
        10.0,
        start,
        format!("max identity residual {res_max:.1e}, max ω-grid deviation {dev_max:.1e}"),
    )
    .and_then(|d| check(res_max < 1e-10 && dev_max < 1e-10, d))
}

fn kyp_unit_cases() -> Outcome {
    let start = Instant::now();
    let m = |r: usize, c: usize, v: &[f64]| DMatrix::from_row_slice(r, c, v);
    let opts = KypOptions::default();
    let passive = solve_kyp(&m(1, 1, &[-1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &opts).unwrap();
    let q_ok = passive.feasible && (passive.q[(0, 0)] - 1.0).abs() < 1e-9;
    let anti = solve_kyp(&m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &opts).unwrap();
    let osc = CtStateSpace::new(
        m(2, 2, &[0.0, 1.0, -1.0, 0.0]),
        m(2, 1, &[0.0, 1.0]),
        m(1, 2, &[0.0, 1.0]),
        DMatrix::zeros(1, 1),
    )
    .unwrap();
    let lin = linear_ph_from_ct(&osc, &[], &opts).unwrap();
    let r_norm = lin.r.amax();
    within(
        5.0,
        start,
        format!(
            "passive scalar Q={:.6} feasible={}, antistable feasible={}, oscillator max|R|={r_norm:.1e}",
            passive.q[(0, 0)],
            passive.feasible,
            anti.feasible
        ),
    )
    .and_then(|d| check(q_ok && !anti.feasible && r_norm < 1e-9, d))
}

fn head(t: &Tensor, rows: usize) -> Tensor {
    Tensor::from_vec(rows, t.cols(), t.data()[..rows * t.cols()].to_vec())
}

fn zero_init_equivalence() -> Outcome {
    let start = Instant::now();
    let (cfg, data) = default_data();
    let (lin, _, _) = estimate_linear_ph(&cfg, &data).unwrap();
    let p = PhnnParams::init(Mode::NnLinearInit, cfg.model_dims(), Some(&lin), 1).unwrap();
    let lag = cfg.model_dims().lag();
    let rec = Dataset {
        u: head(&data.test[0].u, lag + 200),
        y: head(&data.test[0].y, lag + 200),
        y_clean: None,
        ..data.test[0].clone()
    };
    let pred = &simulate(&p, std::slice::from_ref(&rec), 1).unwrap()[0];
    let x0 = initial_state(&p, &rec);
    let (_, y) = simulate_linear_ph(&lin, &tail(&rec.u, lag), &x0, rec.ts, 1).unwrap();
    let dev = y.zip_map(pred, |a, b| (a - b).abs()).max_abs();
    within(5.0, start, format!("max |Δy| {dev:.1e} over {} samples", pred.rows()))
        .and_then(|d| check(dev < 1e-10 && pred.rows() == 200, d))
}

fn noise_floor_check() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for snr in [10.0, 20.0, 30.0, 40.0] {
        let cfg = ExperimentConfig::default().with_snr(snr);
        let recs = make_experiment_set(&cfg.msd).unwrap();
        let pairs: Vec<(&Tensor, &Tensor)> = recs
            .iter()
            .map(|r| (r.dataset.y_clean.as_ref().unwrap(), &r.dataset.y))
            .collect();
        let v = nrmse_pooled(&pairs).unwrap();
        let rel = (v / noise_floor(snr) - 1.0).abs();
        worst = worst.max(rel);
        parts.push(format!("{snr} dB {v:.4}"));
    }
    within(
        5.0,
        start,
        format!("{} (max relative gap {:.2}%)", parts.join(", "), worst * 100.0),
    )
    .and_then(|d| check(worst < 0.02, d))
}

struct Cell {
    runs: Vec<RunSummary>,
    seconds: f64,
    failures: Vec<String>,
}

struct Study {
    snr10: Cell,
    snr30: Cell,
    direct30: Cell,
    random30: Cell,
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn run_cell(cfg: &ExperimentConfig, layout: &Layout, mode: Mode) -> Cell {
    let start = Instant::now();
    let mut cell = Cell {
        runs: Vec::new(),
        seconds: 0.0,
        failures: Vec::new(),
    };
    for seed in SEEDS {
        match cmd_train(cfg, layout, mode, seed) {
            Ok(s) => {
                report(&format!(
                    "  study: {} dB {mode} seed {seed}: test NRMSE {:.4e} (best val {:.4e} at {}, {:.0} s)",
                    cfg.msd.snr_db, s.test_nrmse, s.best_val_nrmse, s.best_iter, s.train_seconds
                ));
                cell.runs.push(s);
            }
            Err(e) => {
                report(&format!(
                    "  study: {} dB {mode} seed {seed}: failed: {e}",
                    cfg.msd.snr_db
                ));
                cell.failures.push(format!("seed {seed}: {e}"));
            }
        }
    }
    cell.seconds = start.elapsed().as_secs_f64();
    cell
}

fn run_study() -> Study {
    let (_guard, root) = match std::env::var_os("PHNN_ACCEPTANCE_OUT") {
        Some(p) => (None, PathBuf::from(p)),
        None => {
            let d = tempfile::tempdir().unwrap();
            let p = d.path().to_path_buf();
            (Some(d), p)
        }
    };
    let base = ExperimentConfig::default();
    let prepare = |snr: f64| {
        let cfg = base.with_snr(snr);
        let layout = Layout::new(root.join(format!("snr{snr}")));
        cmd_generate(&cfg, &layout).unwrap();
        cmd_linest(&cfg, &layout, false).unwrap();
        (cfg, layout)
    };
    let (cfg30, l30) = prepare(30.0);
    let snr30 = run_cell(&cfg30, &l30, Mode::NnLinearInit);
    let direct30 = run_cell(&cfg30, &l30, Mode::LinearDirect);
    let random30 = run_cell(&cfg30, &l30, Mode::NnRandom);
    let (cfg10, l10) = prepare(10.0);
    let snr10 = run_cell(&cfg10, &l10, Mode::NnLinearInit);
    Study {
        snr10,
        snr30,
        direct30,
        random30,
    }
}

fn nrmses(c: &Cell) -> Vec<f64> {
    c.runs.iter().map(|r| r.test_nrmse).collect()
}

fn table_criterion(s: &Study) -> Outcome {
    const LIMIT_S: f64 = 45.0 * 60.0;
    let complete = |c: &Cell| c.failures.is_empty() && c.runs.len() == SEEDS.len();
    let (m10, _) = mean_std(&nrmses(&s.snr10));
    let (m30, _) = mean_std(&nrmses(&s.snr30));
    let ok10 = complete(&s.snr10) && (0.29..=0.36).contains(&m10);
    let ok30 = complete(&s.snr30) && m30 <= 8.5e-2;
    let time_ok = s.snr10.seconds <= LIMIT_S && s.snr30.seconds <= LIMIT_S;
    check(
        ok10 && ok30 && time_ok,
        format!(
            "10 dB mean {m10:.4} (need [0.29, 0.36]) {}; 30 dB mean {m30:.4} (need ≤ 0.085) {}; cell times {:.0} s / {:.0} s",
            if ok10 { "ok" } else { "MISS" },
            if ok30 { "ok" } else { "MISS" },
            s.snr10.seconds,
            s.snr30.seconds
        ),
    )
}

fn ordering_criterion(s: &Study) -> Outcome {
    // diverged runs count with an infinite error, as a failed fit would
    let values = |c: &Cell| {
        let mut v = nrmses(c);
        v.extend(std::iter::repeat_n(f64::INFINITY, c.failures.len()));
        v
    };
    let (li, li_sd) = mean_std(&values(&s.snr30));
    let (ld, ld_sd) = mean_std(&values(&s.direct30));
    let (nr, nr_sd) = mean_std(&values(&s.random30));
    let ok = li < ld && li < nr && li_sd < ld_sd && li_sd < nr_sd;
    check(
        ok,
        format!(
            "mean±std: nn-linear-init {li:.4}±{li_sd:.4}, linear-direct {ld:.4}±{ld_sd:.4}, nn-random {nr:.4}±{nr_sd:.4}"
        ),
    )
}

fn pretrain_criterion(s: &Study) -> Outcome {
    let ratios: Vec<f64> = s
        .snr30
        .runs
        .iter()
        .chain(&s.snr10.runs)
        .map(|r| r.pretrain.as_ref().map_or(f64::INFINITY, |p| p.seconds) / r.train_seconds)
        .collect();
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    check(
        !ratios.is_empty() && worst < 0.05,
        format!(
            "max pretraining/training wall-time ratio {:.2}% over {} runs",
            worst * 100.0,
            ratios.len()
        ),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome, failed: &mut Vec<usize>) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(d) => report(&format!("criterion {n} [{name}]: PASS — {d}")),
        Err(d) => {
            report(&format!("criterion {n} [{name}]: FAIL — {d}"));
            failed.push(n);
        }
    }
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    run(1, "structural invariants", structural_invariants, &mut failed);
    run(2, "gradient correctness", gradient_correctness, &mut failed);
    run(3, "PH construction identities", construction_identities, &mut failed);
    run(4, "KYP unit cases", kyp_unit_cases, &mut failed);
    run(5, "zero-init equivalence", zero_init_equivalence, &mut failed);
    run(6, "noise floor", noise_floor_check, &mut failed);
    match catch_unwind(run_study) {
        Ok(study) => {
            run(7, "SNR table", || table_criterion(&study), &mut failed);
            run(8, "ordering", || ordering_criterion(&study), &mut failed);
            run(9, "pretraining economy", || pretrain_criterion(&study), &mut failed);
        }
        Err(_) => {
            for (n, name) in [(7, "SNR table"), (8, "ordering"), (9, "pretraining economy")] {
                report(&format!("criterion {n} [{name}]: FAIL — study pipeline panicked"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
