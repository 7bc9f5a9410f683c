//! Truncated-simulation training: encoder start states, RK4 rollouts on the
//! tape, Adam, encoder pretraining and validation-based model selection.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::ph_construct::LinearPH;
use crate::phnn_model::{BoundModel, Mode, PhnnParams, StateEval};

/// How the encoder is pretrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainTarget {
    /// Regression onto states of the linear model simulated once over the
    /// training records.
    LinearStates,
    /// Truncated simulation loss with every non-encoder parameter frozen.
    FrozenRollout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Truncation length `T` in samples.
    pub horizon: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_target: PretrainTarget,
    /// Leading seconds of each record excluded from pretraining targets.
    pub washout: f64,
    /// Validation every this many iterations.
    pub val_period: usize,
    /// RK4 steps per sampling interval.
    pub rk4_steps: usize,
    /// Abort after more than this many consecutive skipped updates.
    pub max_skipped: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            n_a: 10,
            n_b: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            iterations: 1000,
            pretrain_iterations: 10_000,
            pretrain_batch_size: 16,
            pretrain_target: PretrainTarget::LinearStates,
            washout: 10.0,
            val_period: 25,
            rk4_steps: 1,
            max_skipped: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon < 2 {
            return bad("horizon must be at least 2");
        }
        if self.batch_size == 0 || self.pretrain_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.val_period == 0 || self.rk4_steps == 0 {
            return bad("val_period and rk4_steps must be at least 1");
        }
        if self.n_a == 0 {
            return bad("n_a must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.washout >= 0.0) {
            return bad("washout must be non-negative");
        }
        Ok(())
    }
}

/// Classical fourth-order Runge–Kutta step with `u` held over the step.
pub fn rk4_step(f: impl Fn(&[f64], &[f64]) -> Vec<f64>, x: &[f64], u: &[f64], h: f64) -> Vec<f64> {
    let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + s * q).collect() };
    let k1 = f(x, u);
    let k2 = f(&axpy(x, h / 2.0, &k1), u);
    let k3 = f(&axpy(x, h / 2.0, &k2), u);
    let k4 = f(&axpy(x, h, &k3), u);
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

fn rhs(m: &BoundModel, tape: &mut Tape, x: Var, u: Var) -> Var {
    let ev = m.eval(tape, x);
    m.dynamics(tape, &ev, u)
}

/// One RK4 step on the tape given the first stage `k1 = f(x, u)`.
fn rk4_tape(m: &BoundModel, tape: &mut Tape, x: Var, k1: Var, u: Var, h: f64) -> Var {
    let s = tape.scale(k1, h / 2.0);
    let x2 = tape.add(x, s);
    let k2 = rhs(m, tape, x2, u);
    let s = tape.scale(k2, h / 2.0);
    let x3 = tape.add(x, s);
    let k3 = rhs(m, tape, x3, u);
    let s = tape.scale(k3, h);
    let x4 = tape.add(x, s);
    let k4 = rhs(m, tape, x4, u);
    let k23 = tape.add(k2, k3);
    let k23 = tape.scale(k23, 2.0);
    let sum = tape.add(k1, k23);
    let sum = tape.add(sum, k4);
    let inc = tape.scale(sum, h / 6.0);
    tape.add(x, inc)
}

/// Advances `x` over one sampling interval; `ev` is the evaluation at `x`,
/// reused for the first stage.
fn advance(m: &BoundModel, tape: &mut Tape, x: Var, ev: &StateEval, u: Var, ts: f64, steps: usize) -> Var {
    let h = ts / steps as f64;
    let k1 = m.dynamics(tape, ev, u);
    let mut x = rk4_tape(m, tape, x, k1, u, h);
    for _ in 1..steps {
        let k1 = rhs(m, tape, x, u);
        x = rk4_tape(m, tape, x, k1, u, h);
    }
    x
}

/// Start of one truncated window: record index and first predicted sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub record: usize,
    pub start: usize,
}

fn padded_inputs(data: &[Dataset], windows: &[Window], offset: usize, n_p: usize) -> Tensor {
    let mut out = Tensor::zeros(windows.len(), n_p);
    for (i, w) in windows.iter().enumerate() {
        let row = data[w.record].u.row_slice(w.start + offset);
        for (j, v) in row.iter().enumerate() {
            out.set(i, j, *v);
        }
    }
    out
}

fn outputs_at(data: &[Dataset], windows: &[Window], offset: usize) -> Tensor {
    let n_y = data[windows[0].record].n_y();
    let mut out = Vec::with_capacity(windows.len() * n_y);
    for w in windows {
        out.extend_from_slice(data[w.record].y.row_slice(w.start + offset));
    }
    Tensor::from_vec(windows.len(), n_y, out)
}

fn encoder_batch(params: &PhnnParams, data: &[Dataset], windows: &[Window]) -> Tensor {
    let len = params.dims.window_len();
    let mut out = Vec::with_capacity(windows.len() * len);
    for w in windows {
        let d = &data[w.record];
        out.extend(params.window(&d.y, &d.u, w.start));
    }
    Tensor::from_vec(windows.len(), len, out)
}

/// Mean squared output error of `T`-sample rollouts started by the encoder
/// at each window, averaged over windows, samples and channels.
pub fn truncated_loss(
    m: &BoundModel,
    tape: &mut Tape,
    data: &[Dataset],
    windows: &[Window],
    horizon: usize,
    rk4_steps: usize,
) -> Result<Var> {
    let params = m.params;
    if windows.is_empty() {
        return Err(Error::InvalidArgument("empty window batch".into()));
    }
    let lag = params.dims.lag();
    for w in windows {
        let d = data
            .get(w.record)
            .ok_or_else(|| Error::InvalidArgument(format!("window refers to missing record {}", w.record)))?;
        if w.start < lag || w.start + horizon > d.len() {
            return Err(Error::InvalidArgument(format!(
                "window start {} outside [{lag}, {}] for record {} of length {}",
                w.start,
                d.len().saturating_sub(horizon),
                w.record,
                d.len()
            )));
        }
    }
    let ts = data[windows[0].record].ts;
    let n_p = params.dims.n_p;
    let win = tape.constant(encoder_batch(params, data, windows));
    let mut x = m.encode(tape, win);
    let mut acc: Option<Var> = None;
    for k in 0..horizon {
        let ev = m.eval(tape, x);
        let y_hat = m.output(tape, &ev);
        let y = tape.constant(outputs_at(data, windows, k));
        let diff = tape.sub(y_hat, y);
        let sq = tape.sum_squares(diff);
        acc = Some(match acc {
            Some(a) => tape.add(a, sq),
            None => sq,
        });
        if k + 1 < horizon {
            let u = tape.constant(padded_inputs(data, windows, k, n_p));
            x = advance(m, tape, x, &ev, u, ts, rk4_steps);
        }
    }
    let count = windows.len() * horizon * data[windows[0].record].n_y();
    Ok(tape.scale(acc.expect("horizon ≥ 1"), 1.0 / count as f64))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Applies one update. Non-finite gradients leave everything untouched
    /// and return a numerical error.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam holds {} moments but got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || g.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in parameter tensor {i}")));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for (j, &gj) in gd.iter().enumerate() {
                let mj = &mut m.data_mut()[j];
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                let mh = *mj / c1;
                let vj = &mut v.data_mut()[j];
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let vh = *vj / c2;
                pd[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Pooled normalized RMSE: `sqrt(mean ‖y − ŷ‖²) / sqrt(mean ‖y − ȳ‖²)`
/// with one mean vector `ȳ` over all samples.
pub fn nrmse(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    nrmse_pooled(&[(y, y_hat)])
}

/// [`nrmse`] over several records treated as one concatenated signal.
pub fn nrmse_pooled(pairs: &[(&Tensor, &Tensor)]) -> Result<f64> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::InvalidArgument("nrmse of no records".into()));
    };
    let cols = first.cols();
    let mut mean = vec![0.0; cols];
    let mut count = 0usize;
    for (y, y_hat) in pairs {
        if y.shape() != y_hat.shape() || y.cols() != cols {
            return Err(Error::Shape(format!(
                "nrmse of {:?} against {:?}",
                y.shape(),
                y_hat.shape()
            )));
        }
        for r in 0..y.rows() {
            for (m, v) in mean.iter_mut().zip(y.row_slice(r)) {
                *m += v;
            }
        }
        count += y.rows();
    }
    if count == 0 {
        return Err(Error::InvalidArgument("nrmse of empty signals".into()));
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let (mut err, mut var) = (0.0, 0.0);
    for (y, y_hat) in pairs {
        for r in 0..y.rows() {
            for ((v, p), m) in y.row_slice(r).iter().zip(y_hat.row_slice(r)).zip(&mean) {
                err += (v - p).powi(2);
                var += (v - m).powi(2);
            }
        }
    }
    if var == 0.0 {
        return Err(Error::Numerical(
            "nrmse undefined: reference signal has zero variance".into(),
        ));
    }
    Ok((err / var).sqrt())
}

/// Encoder state `x̂_{t|t}` at the first sample with a full lag window.
pub fn initial_state(params: &PhnnParams, record: &Dataset) -> Vec<f64> {
    let mut tape = Tape::new();
    let m = BoundModel::bind(params, &mut tape, false);
    let w = tape.constant(Tensor::row(&params.window(&record.y, &record.u, params.dims.lag())));
    let x = m.encode(&mut tape, w);
    tape.value(x).data().to_vec()
}

/// Free-run simulation: encoder on the first window, then RK4 with no
/// further use of measured outputs. Returns predictions for samples
/// `lag..N` of each record.
pub fn simulate(params: &PhnnParams, records: &[Dataset], rk4_steps: usize) -> Result<Vec<Tensor>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    if records.iter().any(|r| r.len() != first.len() || r.ts != first.ts) {
        return records
            .iter()
            .map(|r| simulate(params, std::slice::from_ref(r), rk4_steps).map(|mut v| v.remove(0)))
            .collect();
    }
    let lag = params.dims.lag();
    let n = first.len();
    if n <= lag {
        return Err(Error::InvalidArgument(format!(
            "record of {n} samples is shorter than the lag window"
        )));
    }
    let n_y = params.dims.n_p;
    let b = records.len();
    let windows: Vec<Window> = (0..b).map(|record| Window { record, start: lag }).collect();

    let mut tape = Tape::new();
    let m = BoundModel::bind(params, &mut tape, false);
    let mark = tape.len();
    let win = tape.constant(encoder_batch(params, records, &windows));
    let x = m.encode(&mut tape, win);
    let mut state = tape.value(x).clone();
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity((n - lag) * n_y); b];
    for t in lag..n {
        tape.truncate(mark);
        let x = tape.constant(state);
        let ev = m.eval(&mut tape, x);
        let y = m.output(&mut tape, &ev);
        for (i, o) in out.iter_mut().enumerate() {
            o.extend_from_slice(tape.value(y).row_slice(i));
        }
        if t + 1 < n {
            let shifted: Vec<Window> = windows.iter().map(|w| Window { start: t, ..*w }).collect();
            let u = tape.constant(padded_inputs(records, &shifted, 0, params.dims.n_p));
            let next = advance(&m, &mut tape, x, &ev, u, first.ts, rk4_steps);
            state = tape.value(next).clone();
        } else {
            state = Tensor::zeros(0, 0);
        }
    }
    Ok(out.into_iter().map(|o| Tensor::from_vec(n - lag, n_y, o)).collect())
}

/// Free-run NRMSE in original units against the measured outputs of
/// `records` (standardized with `norm`), pooled over records.
pub fn simulation_nrmse(params: &PhnnParams, records: &[Dataset], norm: &Normalizer, rk4_steps: usize) -> Result<f64> {
    let lag = params.dims.lag();
    let preds = simulate(params, records, rk4_steps)?;
    let pairs: Vec<(Tensor, Tensor)> = records
        .iter()
        .zip(&preds)
        .map(|(r, p)| (norm.denormalize_y(&tail(&r.y, lag)), norm.denormalize_y(p)))
        .collect();
    if pairs.iter().any(|(_, p)| !p.is_finite()) {
        return Ok(f64::INFINITY);
    }
    let refs: Vec<(&Tensor, &Tensor)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    nrmse_pooled(&refs)
}

/// Rows `from..` of `t`.
pub fn tail(t: &Tensor, from: usize) -> Tensor {
    let rows = t.rows().saturating_sub(from);
    Tensor::from_vec(rows, t.cols(), t.data()[from * t.cols()..].to_vec())
}

/// Simulates a linear port-Hamiltonian model with RK4 from `x0`; `u` has
/// one row per sample and at most `n_p` columns (missing ports are zero).
/// Returns states and outputs at every sample.
pub fn simulate_linear_ph(
    lin: &LinearPH,
    u: &Tensor,
    x0: &[f64],
    ts: f64,
    rk4_steps: usize,
) -> Result<(Tensor, Tensor)> {
    let sys = lin.to_state_space();
    let (n, p) = (lin.n_x(), lin.n_p());
    if x0.len() != n || u.cols() > p {
        return Err(Error::Shape(format!(
            "x0 of length {} and {} inputs for a model with n_x = {n}, n_p = {p}",
            x0.len(),
            u.cols()
        )));
    }
    let (a, b, c) = (sys.a, sys.b, sys.c);
    let f = |x: &[f64], u: &[f64]| -> Vec<f64> {
        let dx = &a * DVector::from_column_slice(x) + &b * DVector::from_column_slice(u);
        dx.as_slice().to_vec()
    };
    let h = ts / rk4_steps as f64;
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(u.rows() * n);
    let mut outputs = Vec::with_capacity(u.rows() * p);
    let mut up = vec![0.0; p];
    for t in 0..u.rows() {
        states.extend_from_slice(&x);
        let y = &c * DVector::from_column_slice(&x);
        outputs.extend_from_slice(y.as_slice());
        up[..u.cols()].copy_from_slice(u.row_slice(t));
        for _ in 0..rk4_steps {
            x = rk4_step(f, &x, &up, h);
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            return Err(Error::Numerical(format!(
                "linear port-Hamiltonian simulation diverged at sample {t}; max Re eig(A) = {:.3e}",
                sys_max_real(&a)
            )));
        }
    }
    Ok((
        Tensor::from_vec(u.rows(), n, states),
        Tensor::from_vec(u.rows(), p, outputs),
    ))
}

fn sys_max_real(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub iterations: usize,
    pub seconds: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Pretrains the encoder of an nn-linear-init model; every other parameter
/// is left untouched.
pub fn pretrain_encoder(
    params: &mut PhnnParams,
    lin: &LinearPH,
    train: &[Dataset],
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    if params.mode != Mode::NnLinearInit {
        return Err(Error::InvalidArgument(format!(
            "encoder pretraining needs nn-linear-init, got {}",
            params.mode
        )));
    }
    let started = Instant::now();
    let k = params.encoder_tensor_count();
    let mut adam = Adam::new(params.tensors().into_iter().take(k), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let lag = params.dims.lag();

    let mut report = PretrainReport {
        iterations: cfg.pretrain_iterations,
        seconds: 0.0,
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
    };
    if cfg.pretrain_iterations == 0 {
        return Ok(report);
    }

    // targets: states of the linear model from a zero start, computed once
    let refs: Vec<Tensor> = match cfg.pretrain_target {
        PretrainTarget::LinearStates => train
            .iter()
            .map(|d| simulate_linear_ph(lin, &d.u, &vec![0.0; lin.n_x()], d.ts, cfg.rk4_steps).map(|(x, _)| x))
            .collect::<Result<_>>()?,
        PretrainTarget::FrozenRollout => Vec::new(),
    };
    let candidates: Vec<Window> = train
        .iter()
        .enumerate()
        .flat_map(|(record, d)| {
            let from = match cfg.pretrain_target {
                PretrainTarget::LinearStates => lag.max((cfg.washout / d.ts).round() as usize),
                PretrainTarget::FrozenRollout => lag,
            };
            let to = match cfg.pretrain_target {
                PretrainTarget::LinearStates => d.len(),
                PretrainTarget::FrozenRollout => (d.len() + 1).saturating_sub(cfg.horizon),
            };
            (from..to).map(move |start| Window { record, start })
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "training records are too short for encoder pretraining".into(),
        ));
    }

    let mut skipped = 0;
    for it in 0..cfg.pretrain_iterations {
        let batch: Vec<Window> = (0..cfg.pretrain_batch_size)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect();
        let mut tape = Tape::new();
        let vars = params.register_with(&mut tape, |i| i < k);
        let m = BoundModel::from_vars(params, &mut tape, vars.clone());
        let loss = match cfg.pretrain_target {
            PretrainTarget::LinearStates => {
                let win = tape.constant(encoder_batch(params, train, &batch));
                let x = m.encode(&mut tape, win);
                let n = params.dims.n_x;
                let mut target = Vec::with_capacity(batch.len() * n);
                for w in &batch {
                    target.extend_from_slice(refs[w.record].row_slice(w.start));
                }
                let target = tape.constant(Tensor::from_vec(batch.len(), n, target));
                let d = tape.sub(x, target);
                let s = tape.sum_squares(d);
                tape.scale(s, 1.0 / (batch.len() * n) as f64)
            }
            PretrainTarget::FrozenRollout => truncated_loss(&m, &mut tape, train, &batch, cfg.horizon, cfg.rk4_steps)?,
        };
        let value = tape.value(loss).item();
        if it == 0 {
            report.initial_loss = value;
        }
        report.final_loss = value;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars[..k].iter().map(|v| grads.get(*v)).collect();
        let ok = value.is_finite()
            && adam
                .update(params.tensors_mut().into_iter().take(k).collect(), &g)
                .is_ok();
        if ok {
            skipped = 0;
        } else {
            skipped += 1;
            log::warn!("pretraining step {it} skipped: non-finite loss or gradient");
            if skipped > cfg.max_skipped {
                return Err(Error::Numerical(format!(
                    "encoder pretraining aborted after {skipped} consecutive non-finite steps"
                )));
            }
        }
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// One line of the convergence log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub train_loss: Option<f64>,
    pub val_nrmse: Option<f64>,
}

/// Records used by [`train`], all standardized with `normalizer`.
pub struct TrainData<'a> {
    pub train: &'a [Dataset],
    pub val: &'a [Dataset],
    pub normalizer: &'a Normalizer,
}

pub struct TrainState {
    pub params: PhnnParams,
    pub best_params: PhnnParams,
    pub best_val_nrmse: f64,
    pub best_iter: usize,
    pub adam: Adam,
    pub log: Vec<LogRow>,
    /// Updates skipped because of non-finite values.
    pub skipped: usize,
    /// Set when training stopped on persistent non-finite values.
    pub aborted: Option<String>,
    pub seconds: f64,
}

impl TrainState {
    pub fn val_history(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.log.iter().filter_map(|r| r.val_nrmse.map(|v| (r.iter, v)))
    }
}

/// Minimizes the truncated simulation loss with Adam, validating by
/// free-run NRMSE every `val_period` iterations and after the last one, and
/// keeps the parameters with the lowest validation NRMSE.
pub fn train(params: PhnnParams, cfg: &TrainConfig, data: &TrainData) -> Result<TrainState> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs at least one train and one validation record".into(),
        ));
    }
    let started = Instant::now();
    let lag = params.dims.lag();
    let candidates: Vec<Window> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(record, d)| {
            (lag..(d.len() + 1).saturating_sub(cfg.horizon)).map(move |start| Window { record, start })
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training records are shorter than the lag window plus horizon ({} + {})",
            lag, cfg.horizon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut state = TrainState {
        adam: Adam::new(params.tensors(), cfg.learning_rate),
        best_params: params.clone(),
        params,
        best_val_nrmse: f64::INFINITY,
        best_iter: 0,
        log: Vec::with_capacity(cfg.iterations + 1),
        skipped: 0,
        aborted: None,
        seconds: 0.0,
    };
    let mut consecutive = 0;
    let validate = |state: &mut TrainState, it: usize| -> Result<f64> {
        let v = simulation_nrmse(&state.params, data.val, data.normalizer, cfg.rk4_steps)?;
        if v < state.best_val_nrmse {
            state.best_val_nrmse = v;
            state.best_iter = it;
            state.best_params = state.params.clone();
        }
        Ok(v)
    };

    for it in 0..cfg.iterations {
        let val = if it % cfg.val_period == 0 {
            Some(validate(&mut state, it)?)
        } else {
            None
        };
        let batch: Vec<Window> = (0..cfg.batch_size)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect();
        let mut tape = Tape::new();
        let vars = state.params.register(&mut tape, true);
        let m = BoundModel::from_vars(&state.params, &mut tape, vars.clone());
        let loss = truncated_loss(&m, &mut tape, data.train, &batch, cfg.horizon, cfg.rk4_steps)?;
        let value = tape.value(loss).item();
        let updated = value.is_finite() && {
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
            drop(tape);
            state.adam.update(state.params.tensors_mut(), &g).is_ok()
        };
        state.log.push(LogRow {
            iter: it,
            train_loss: Some(value),
            val_nrmse: val,
        });
        if updated {
            consecutive = 0;
        } else {
            consecutive += 1;
            state.skipped += 1;
            log::warn!("iteration {it}: update skipped (non-finite loss or gradient)");
            if consecutive > cfg.max_skipped {
                state.aborted = Some(format!(
                    "{consecutive} consecutive non-finite updates at iteration {it}"
                ));
                break;
            }
        }
    }
    if state.aborted.is_none() {
        let v = validate(&mut state, cfg.iterations)?;
        state.log.push(LogRow {
            iter: cfg.iterations,
            train_loss: None,
            val_nrmse: Some(v),
        });
    }
    state.seconds = started.elapsed().as_secs_f64();
    Ok(state)
}

/// Writes the convergence log as `iter,train_loss,val_nrmse`; missing values
/// are empty fields.
pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let io = |e: csv::Error| Error::format(path, e);
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["iter", "train_loss", "val_nrmse"]).map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in log {
        w.write_record([r.iter.to_string(), opt(r.train_loss), opt(r.val_nrmse)])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a log written by [`write_log`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let headers = r.headers().map_err(|e| Error::format(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["iter", "train_loss", "val_nrmse"] {
        return Err(Error::format(path, format!("unexpected header {headers:?}")));
    }
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|e| Error::format(path, format!("bad number {s:?}: {e}")))
        }
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        out.push(LogRow {
            iter: rec[0]
                .parse()
                .map_err(|e| Error::format(path, format!("bad iteration {:?}: {e}", &rec[0])))?,
            train_loss: parse(&rec[1])?,
            val_nrmse: parse(&rec[2])?,
        });
    }
    Ok(out)
}
