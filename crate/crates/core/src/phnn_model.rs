//! Structured port-Hamiltonian network
//! `ẋ = (J_θ(x) − R_θ(x))∇H_θ(x) + (G_θ(x) − P_θ(x))u`,
//! `y = (G_θ(x) + P_θ(x))ᵀ∇H_θ(x)`, plus the state encoder.
//!
//! All evaluation happens on a [`Tape`] in batched form: a state batch is a
//! `B × n_x` tensor, and state-dependent matrices are kept as `B × (n·k)`
//! tensors of row-major entries, applied with the batched matvec primitives.
//! The skew and PSD structure is never materialized: `J g = A g − Aᵀ g` and
//! `R g = B (Bᵀ g)`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{read_json, write_json};
use crate::error::{Error, Result};
use crate::ph_construct::LinearPH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Constant matrices, quadratic Hamiltonian.
    LinearDirect,
    /// Networks only, all layers randomly initialized.
    NnRandom,
    /// Linear PH estimate plus networks with zeroed output layers.
    NnLinearInit,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::LinearDirect, Mode::NnRandom, Mode::NnLinearInit];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::LinearDirect => "linear-direct",
            Mode::NnRandom => "nn-random",
            Mode::NnLinearInit => "nn-linear-init",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown mode {s:?}; expected linear-direct, nn-random or nn-linear-init"
            ))
        })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Affine layer `x W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

impl Layer {
    fn glorot(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let data = (0..n_in * n_out).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            w: Tensor::from_vec(n_in, n_out, data),
            b: Tensor::zeros(1, n_out),
        }
    }

    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: Tensor::zeros(n_in, n_out),
            b: Tensor::zeros(1, n_out),
        }
    }
}

/// Perceptron with tanh hidden layers and a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`; the output layer is zero when
    /// `zero_head` is set.
    pub fn new(widths: &[usize], zero_head: bool, rng: &mut ChaCha8Rng) -> Self {
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i == last && zero_head {
                    Layer::zeros(w[0], w[1])
                } else {
                    Layer::glorot(w[0], w[1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut out = vec![self.layers[0].w.rows()];
        out.extend(self.layers.iter().map(|l| l.w.cols()));
        out
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }

    fn check(&self, name: &str) -> Result<()> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].w.cols() != pair[1].w.rows() {
                return Err(Error::Shape(format!(
                    "{name}: layer {i} outputs {} but layer {} takes {}",
                    pair[0].w.cols(),
                    i + 1,
                    pair[1].w.rows()
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.b.shape() != (1, l.w.cols()) {
                return Err(Error::Shape(format!("{name}: bias of layer {i} is {:?}", l.b.shape())));
            }
        }
        Ok(())
    }
}

/// Residual encoder `x = xW + b + mlp(window)` on the flattened lag window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Encoder {
    pub linear: Layer,
    pub mlp: Mlp,
}

/// Networks producing `A_θ` (→ J), `B_θ` (→ R), `G_θ`, `P_θ` and `H_θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixNets {
    pub a: Mlp,
    pub b: Mlp,
    pub g: Mlp,
    pub p: Mlp,
    pub h: Mlp,
}

/// Constant matrices of the directly parametrized linear model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectParams {
    pub a: Tensor,
    pub b: Tensor,
    pub g: Tensor,
    pub p: Tensor,
    /// Factor of `Q_c = L Lᵀ`.
    pub l: Tensor,
}

/// Sizes of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub n_x: usize,
    /// Ports; equals the number of outputs.
    pub n_p: usize,
    /// Physical inputs, the first `n_u` ports.
    pub n_u: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub encoder_hidden: usize,
    pub matrix_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            n_x: 6,
            n_p: 3,
            n_u: 1,
            n_a: 10,
            n_b: 10,
            encoder_hidden: 64,
            matrix_hidden: 16,
        }
    }
}

impl ModelDims {
    pub fn window_len(&self) -> usize {
        self.n_a * self.n_p + self.n_b * self.n_u
    }

    /// First sample index with a full lag window.
    pub fn lag(&self) -> usize {
        self.n_a.max(self.n_b)
    }
}

/// All trainable parameters plus the fixed linear estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhnnParams {
    pub mode: Mode,
    pub dims: ModelDims,
    pub encoder: Encoder,
    pub nets: Option<MatrixNets>,
    pub direct: Option<DirectParams>,
    /// Linear estimate added to the network terms (nn-linear-init only).
    pub linear: Option<LinearPH>,
}

fn normal_tensor(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid normal");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

impl PhnnParams {
    /// Fresh parameters. `linear` is required for, and only used by,
    /// [`Mode::NnLinearInit`].
    pub fn init(mode: Mode, dims: ModelDims, linear: Option<&LinearPH>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p) = (dims.n_x, dims.n_p);
        if dims.n_u > p || n == 0 || p == 0 {
            return Err(Error::InvalidArgument(format!("invalid model dimensions {dims:?}")));
        }
        let e = dims.encoder_hidden;
        let encoder = Encoder {
            linear: Layer::glorot(dims.window_len(), n, &mut rng),
            mlp: Mlp::new(&[dims.window_len(), e, e, n], false, &mut rng),
        };
        let linear = match (mode, linear) {
            (Mode::NnLinearInit, Some(l)) => {
                if l.n_x() != n || l.n_p() != p {
                    return Err(Error::Shape(format!(
                        "linear estimate has n_x = {}, n_p = {}; model expects {n}, {p}",
                        l.n_x(),
                        l.n_p()
                    )));
                }
                Some(l.clone())
            }
            (Mode::NnLinearInit, None) => {
                return Err(Error::InvalidArgument(
                    "nn-linear-init needs a linear port-Hamiltonian estimate".into(),
                ))
            }
            _ => None,
        };
        let h = dims.matrix_hidden;
        let zero = mode == Mode::NnLinearInit;
        let (nets, direct) = match mode {
            Mode::LinearDirect => (
                None,
                Some(DirectParams {
                    a: normal_tensor(n, n, 0.1, &mut rng),
                    b: normal_tensor(n, n, 0.1, &mut rng),
                    g: normal_tensor(n, p, 0.1, &mut rng),
                    p: normal_tensor(n, p, 0.1, &mut rng),
                    l: {
                        let mut l = normal_tensor(n, n, 0.1, &mut rng);
                        l.add_assign(&Tensor::identity(n));
                        l
                    },
                }),
            ),
            _ => (
                Some(MatrixNets {
                    a: Mlp::new(&[n, h, h, n * n], zero, &mut rng),
                    b: Mlp::new(&[n, h, h, n * n], zero, &mut rng),
                    g: Mlp::new(&[n, h, h, n * p], zero, &mut rng),
                    p: Mlp::new(&[n, h, h, n * p], zero, &mut rng),
                    h: Mlp::new(&[n, h, h, 1], zero, &mut rng),
                }),
                None,
            ),
        };
        Ok(Self {
            mode,
            dims,
            encoder,
            nets,
            direct,
            linear,
        })
    }

    /// Parameter tensors in canonical order; the encoder comes first.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = vec![&self.encoder.linear.w, &self.encoder.linear.b];
        out.extend(self.encoder.mlp.tensors());
        if let Some(nets) = &self.nets {
            for m in [&nets.a, &nets.b, &nets.g, &nets.p, &nets.h] {
                out.extend(m.tensors());
            }
        }
        if let Some(d) = &self.direct {
            out.extend([&d.a, &d.b, &d.g, &d.p, &d.l]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.encoder.linear.w, &mut self.encoder.linear.b];
        out.extend(self.encoder.mlp.tensors_mut());
        if let Some(nets) = &mut self.nets {
            for m in [&mut nets.a, &mut nets.b, &mut nets.g, &mut nets.p, &mut nets.h] {
                out.extend(m.tensors_mut());
            }
        }
        if let Some(d) = &mut self.direct {
            out.extend([&mut d.a, &mut d.b, &mut d.g, &mut d.p, &mut d.l]);
        }
        out
    }

    /// Number of leading tensors in [`PhnnParams::tensors`] that belong to
    /// the encoder.
    pub fn encoder_tensor_count(&self) -> usize {
        2 + 2 * self.encoder.mlp.layers.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Records every parameter tensor on `tape`, as trainable leaves or as
    /// constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.register_with(tape, |_| trainable)
    }

    /// Like [`PhnnParams::register`], choosing per canonical tensor index.
    pub fn register_with(&self, tape: &mut Tape, trainable: impl Fn(usize) -> bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable(i) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let (n, p) = (d.n_x, d.n_p);
        let enc = &self.encoder;
        if enc.linear.w.shape() != (d.window_len(), n) || enc.linear.b.shape() != (1, n) {
            return Err(Error::Shape("encoder linear map does not match the lag window".into()));
        }
        enc.mlp.check("encoder")?;
        let w = enc.mlp.widths();
        if w.first() != Some(&d.window_len()) || w.last() != Some(&n) {
            return Err(Error::Shape(format!("encoder widths {w:?}")));
        }
        match (self.mode, &self.nets, &self.direct, &self.linear) {
            (Mode::LinearDirect, None, Some(c), None) => {
                let ok = c.a.shape() == (n, n)
                    && c.b.shape() == (n, n)
                    && c.l.shape() == (n, n)
                    && c.g.shape() == (n, p)
                    && c.p.shape() == (n, p);
                if !ok {
                    return Err(Error::Shape("direct matrices have wrong shapes".into()));
                }
            }
            (Mode::NnRandom | Mode::NnLinearInit, Some(nets), None, lin) => {
                for (name, m, out) in [
                    ("A net", &nets.a, n * n),
                    ("B net", &nets.b, n * n),
                    ("G net", &nets.g, n * p),
                    ("P net", &nets.p, n * p),
                    ("H net", &nets.h, 1),
                ] {
                    m.check(name)?;
                    let w = m.widths();
                    if w.first() != Some(&n) || w.last() != Some(&out) {
                        return Err(Error::Shape(format!("{name} widths {w:?}")));
                    }
                }
                match (self.mode, lin) {
                    (Mode::NnLinearInit, Some(l)) if l.n_x() == n && l.n_p() == p => {}
                    (Mode::NnRandom, None) => {}
                    _ => {
                        return Err(Error::Shape(
                            "linear estimate missing or inconsistent with the mode".into(),
                        ))
                    }
                }
            }
            _ => {
                return Err(Error::Shape(format!(
                    "parameter groups do not match mode {}",
                    self.mode
                )))
            }
        }
        Ok(())
    }

    /// Encoder input for the window ending just before sample `t`:
    /// `y_{t−n_a..t−1}` then `u_{t−n_b..t−1}`, oldest first.
    pub fn window(&self, y: &Tensor, u: &Tensor, t: usize) -> Vec<f64> {
        let d = &self.dims;
        assert!(t >= d.lag(), "window at {t} needs {} samples of history", d.lag());
        let mut out = Vec::with_capacity(d.window_len());
        for k in t - d.n_a..t {
            out.extend_from_slice(y.row_slice(k));
        }
        for k in t - d.n_b..t {
            out.extend_from_slice(&u.row_slice(k)[..d.n_u]);
        }
        out
    }

    /// Single-sample right-hand side `f_θ(x, u)`; `u` has `n_p` entries.
    pub fn f_theta(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let m = BoundModel::bind(self, &mut tape, false);
        let xv = tape.constant(Tensor::row(x));
        let uv = tape.constant(Tensor::row(u));
        let ev = m.eval(&mut tape, xv);
        let dx = m.dynamics(&mut tape, &ev, uv);
        tape.value(dx).data().to_vec()
    }

    /// Single-sample output `h_θ(x)`.
    pub fn h_theta(&self, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let m = BoundModel::bind(self, &mut tape, false);
        let xv = tape.constant(Tensor::row(x));
        let ev = m.eval(&mut tape, xv);
        let y = m.output(&mut tape, &ev);
        tape.value(y).data().to_vec()
    }

    /// `(H_θ(x), ∇H_θ(x))` for one state.
    pub fn hamiltonian_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let m = BoundModel::bind(self, &mut tape, false);
        let xv = tape.constant(Tensor::row(x));
        let (h, g) = m.hamiltonian_and_grad(&mut tape, xv);
        (tape.value(h).item(), tape.value(g).data().to_vec())
    }

    /// `(J_θ(x), R_θ(x), G_θ(x), P_θ(x))` as explicit matrices.
    pub fn eval_matrices(&self, x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (n, p) = (self.dims.n_x, self.dims.n_p);
        let mut tape = Tape::new();
        let m = BoundModel::bind(self, &mut tape, false);
        let xv = tape.constant(Tensor::row(x));
        let entries = |tape: &Tape, v: Var, r: usize, c: usize| DMatrix::from_row_slice(r, c, tape.value(v).data());
        let (mut j, mut r, mut g, mut pm) = match self.mode {
            Mode::LinearDirect => {
                let d = m.direct.as_ref().expect("direct mode");
                let a = entries(&tape, d.a, n, n);
                let b = entries(&tape, d.b, n, n);
                (
                    &a - a.transpose(),
                    &b * b.transpose(),
                    entries(&tape, d.g, n, p),
                    entries(&tape, d.p, n, p),
                )
            }
            _ => {
                let nets = m.nets.as_ref().expect("network mode");
                let av = nets.a.forward(&mut tape, xv);
                let bv = nets.b.forward(&mut tape, xv);
                let gv = nets.g.forward(&mut tape, xv);
                let pv = nets.p.forward(&mut tape, xv);
                let a = entries(&tape, av, n, n);
                let b = entries(&tape, bv, n, n);
                (
                    &a - a.transpose(),
                    &b * b.transpose(),
                    entries(&tape, gv, n, p),
                    entries(&tape, pv, n, p),
                )
            }
        };
        if let Some(l) = &self.linear {
            j += &l.j;
            r += &l.r;
            g += &l.g;
            pm += &l.p;
        }
        (j, r, g, pm)
    }

    /// Constant `Q` of the quadratic Hamiltonian part, if any.
    pub fn quadratic_q(&self) -> Option<DMatrix<f64>> {
        match (self.mode, &self.direct, &self.linear) {
            (Mode::LinearDirect, Some(d), _) => {
                let l = d.l.to_dmatrix();
                Some(&l * l.transpose())
            }
            (Mode::NnLinearInit, _, Some(lin)) => Some(lin.q.clone()),
            _ => None,
        }
    }

    /// Linear port-Hamiltonian system of a linear-direct model, normalized
    /// to `Q = I`.
    pub fn direct_as_linear_ph(&self) -> Result<LinearPH> {
        let d = self
            .direct
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("mode {} has no constant matrices", self.mode)))?;
        let (a, b, l) = (d.a.to_dmatrix(), d.b.to_dmatrix(), d.l.to_dmatrix());
        let ph = crate::ph_construct::PhMatrices {
            j: &a - a.transpose(),
            r: &b * b.transpose(),
            g: d.g.to_dmatrix(),
            p: d.p.to_dmatrix(),
            s: DMatrix::zeros(self.dims.n_p, self.dims.n_p),
            n: DMatrix::zeros(self.dims.n_p, self.dims.n_p),
        };
        crate::ph_construct::cholesky_normalize(&ph, &(&l * l.transpose()))
    }
}

/// Versioned on-disk form of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// Training iteration the parameters were taken at.
    pub iteration: usize,
    pub params: PhnnParams,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(params: PhnnParams, seed: u64, config_hash: &str, iteration: usize) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            seed,
            config_hash: config_hash.to_string(),
            iteration,
            params,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!(
                    "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                    ck.format_version
                ),
            ));
        }
        ck.params.validate().map_err(|e| Error::format(path, e))?;
        Ok(ck)
    }
}

/// MLP whose weights live on a tape.
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    fn take(mlp: &Mlp, vars: &mut impl Iterator<Item = Var>) -> Self {
        let layers = mlp
            .layers
            .iter()
            .map(|_| (vars.next().expect("weight var"), vars.next().expect("bias var")))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w);
            h = tape.add_row(z, b);
            if i < last {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// `(elu(mlp(x)), ∇ₓ elu(mlp(x)))` for a scalar-output network, the
    /// gradient assembled from `tanh′`/`elu′` so that it stays
    /// differentiable in the weights.
    pub fn elu_head_and_grad(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            if i < last {
                pre.push(z);
                h = tape.tanh(z);
            } else {
                h = z;
            }
        }
        let value = tape.elu(h);
        let mut delta = tape.elu_prime(h);
        for i in (0..=last).rev() {
            let wt = tape.transpose(self.layers[i].0);
            delta = tape.matmul(delta, wt);
            if i > 0 {
                let d = tape.tanh_prime(pre[i - 1]);
                delta = tape.mul(delta, d);
            }
        }
        (value, delta)
    }
}

pub struct BoundNets {
    pub a: BoundMlp,
    pub b: BoundMlp,
    pub g: BoundMlp,
    pub p: BoundMlp,
    pub h: BoundMlp,
}

pub struct BoundDirect {
    pub a: Var,
    pub b: Var,
    pub g: Var,
    pub p: Var,
    pub l: Var,
}

/// Constants of the linear estimate, pre-transposed for row-batched use.
struct LinearConsts {
    /// `(J − R)ᵀ`
    jr_t: Var,
    /// `(G − P)ᵀ`
    gp_minus_t: Var,
    /// `G + P`
    gp_plus: Var,
    /// `Qᵀ`
    q_t: Var,
}

/// Quantities at one batch of states, shared by the vector field and the
/// output.
pub struct StateEval {
    pub grad_h: Var,
    nn: Option<[Var; 4]>,
    direct: Option<(Var, Var)>,
}

/// Parameters bound to a tape.
pub struct BoundModel<'a> {
    pub params: &'a PhnnParams,
    pub vars: Vec<Var>,
    pub enc_linear: (Var, Var),
    pub enc_mlp: BoundMlp,
    pub nets: Option<BoundNets>,
    pub direct: Option<BoundDirect>,
    linear: Option<LinearConsts>,
}

impl<'a> BoundModel<'a> {
    pub fn bind(params: &'a PhnnParams, tape: &mut Tape, trainable: bool) -> Self {
        let vars = params.register(tape, trainable);
        Self::from_vars(params, tape, vars)
    }

    /// Uses leaves already recorded in canonical order (see
    /// [`PhnnParams::tensors`]); `params` only supplies structure and the
    /// linear estimate.
    pub fn from_vars(params: &'a PhnnParams, tape: &mut Tape, vars: Vec<Var>) -> Self {
        let mut it = vars.clone().into_iter();
        let enc_linear = (it.next().expect("encoder W"), it.next().expect("encoder b"));
        let enc_mlp = BoundMlp::take(&params.encoder.mlp, &mut it);
        let nets = params.nets.as_ref().map(|n| BoundNets {
            a: BoundMlp::take(&n.a, &mut it),
            b: BoundMlp::take(&n.b, &mut it),
            g: BoundMlp::take(&n.g, &mut it),
            p: BoundMlp::take(&n.p, &mut it),
            h: BoundMlp::take(&n.h, &mut it),
        });
        let direct = params.direct.as_ref().map(|_| BoundDirect {
            a: it.next().expect("A"),
            b: it.next().expect("B"),
            g: it.next().expect("G"),
            p: it.next().expect("P"),
            l: it.next().expect("L"),
        });
        let linear = params.linear.as_ref().map(|l| LinearConsts {
            jr_t: tape.constant(Tensor::from_dmatrix(&(&l.j - &l.r).transpose())),
            gp_minus_t: tape.constant(Tensor::from_dmatrix(&(&l.g - &l.p).transpose())),
            gp_plus: tape.constant(Tensor::from_dmatrix(&(&l.g + &l.p))),
            q_t: tape.constant(Tensor::from_dmatrix(&l.q.transpose())),
        });
        Self {
            params,
            vars,
            enc_linear,
            enc_mlp,
            nets,
            direct,
            linear,
        }
    }

    /// `x̂ = ψ_η(window)` for a `B × window_len` batch.
    pub fn encode(&self, tape: &mut Tape, window: Var) -> Var {
        let z = tape.matmul(window, self.enc_linear.0);
        let lin = tape.add_row(z, self.enc_linear.1);
        let res = self.enc_mlp.forward(tape, window);
        tape.add(lin, res)
    }

    /// Batched `(H_θ(x), ∇H_θ(x))`; `H` is `B × 1`.
    pub fn hamiltonian_and_grad(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        if let Some(d) = &self.direct {
            // H = ½ xᵀ L Lᵀ x, ∇H = L Lᵀ x
            let xl = tape.matmul(x, d.l);
            let lt = tape.transpose(d.l);
            let g = tape.matmul(xl, lt);
            let h = row_half_sum_squares(tape, xl);
            return (h, g);
        }
        let nets = self.nets.as_ref().expect("network mode");
        let (h_nn, g_nn) = nets.h.elu_head_and_grad(tape, x);
        match &self.linear {
            Some(lin) => {
                // ½ xᵀQx with Q symmetric: rows of x Qᵀ are (Qx)ᵀ
                let qx = tape.matmul(x, lin.q_t);
                let quad = row_half_dot(tape, x, qx);
                (tape.add(quad, h_nn), tape.add(qx, g_nn))
            }
            None => (h_nn, g_nn),
        }
    }

    pub fn eval(&self, tape: &mut Tape, x: Var) -> StateEval {
        let (_, grad_h) = self.hamiltonian_and_grad(tape, x);
        self.eval_with_grad(tape, x, grad_h)
    }

    fn eval_with_grad(&self, tape: &mut Tape, x: Var, grad_h: Var) -> StateEval {
        if let Some(d) = &self.direct {
            // (J − R)ᵀ = Aᵀ − A − BBᵀ applied on the right of row vectors
            let at = tape.transpose(d.a);
            let skew_t = tape.sub(at, d.a);
            let bt = tape.transpose(d.b);
            let bbt = tape.matmul(d.b, bt);
            let jr_t = tape.sub(skew_t, bbt);
            return StateEval {
                grad_h,
                nn: None,
                direct: Some((jr_t, grad_h)),
            };
        }
        let nets = self.nets.as_ref().expect("network mode");
        let a = nets.a.forward(tape, x);
        let b = nets.b.forward(tape, x);
        let g = nets.g.forward(tape, x);
        let p = nets.p.forward(tape, x);
        StateEval {
            grad_h,
            nn: Some([a, b, g, p]),
            direct: None,
        }
    }

    /// `(J_θ − R_θ)∇H_θ + (G_θ − P_θ)u` for a batch; `u` is `B × n_p`.
    pub fn dynamics(&self, tape: &mut Tape, ev: &StateEval, u: Var) -> Var {
        let g = ev.grad_h;
        if let (Some(d), Some((jr_t, _))) = (&self.direct, ev.direct) {
            let drift = tape.matmul(g, jr_t);
            let gp = tape.sub(d.g, d.p);
            let gp_t = tape.transpose(gp);
            let inp = tape.matmul(u, gp_t);
            return tape.add(drift, inp);
        }
        let [a, b, gm, pm] = ev.nn.expect("network mode");
        let ag = tape.batch_matvec(a, g);
        let atg = tape.batch_mat_t_vec(a, g);
        let jg = tape.sub(ag, atg);
        let btg = tape.batch_mat_t_vec(b, g);
        let rg = tape.batch_matvec(b, btg);
        let mut dx = tape.sub(jg, rg);
        let gu = tape.batch_matvec(gm, u);
        let pu = tape.batch_matvec(pm, u);
        let port = tape.sub(gu, pu);
        dx = tape.add(dx, port);
        if let Some(lin) = &self.linear {
            let drift = tape.matmul(g, lin.jr_t);
            let inp = tape.matmul(u, lin.gp_minus_t);
            let lin_dx = tape.add(drift, inp);
            dx = tape.add(lin_dx, dx);
        }
        dx
    }

    /// `(G_θ + P_θ)ᵀ∇H_θ` for a batch.
    pub fn output(&self, tape: &mut Tape, ev: &StateEval) -> Var {
        let g = ev.grad_h;
        if let Some(d) = &self.direct {
            let gp = tape.add(d.g, d.p);
            return tape.matmul(g, gp);
        }
        let [_, _, gm, pm] = ev.nn.expect("network mode");
        let gy = tape.batch_mat_t_vec(gm, g);
        let py = tape.batch_mat_t_vec(pm, g);
        let mut y = tape.add(gy, py);
        if let Some(lin) = &self.linear {
            let ly = tape.matmul(g, lin.gp_plus);
            y = tape.add(ly, y);
        }
        y
    }
}

/// Per-row `½ Σⱼ x²` as a `B × 1` column.
fn row_half_sum_squares(tape: &mut Tape, x: Var) -> Var {
    row_half_dot(tape, x, x)
}

/// Per-row `½ xᵀy` as a `B × 1` column.
fn row_half_dot(tape: &mut Tape, x: Var, y: Var) -> Var {
    let prod = tape.mul(x, y);
    let n = tape.shape(x).1;
    let ones = tape.constant(Tensor::filled(n, 1, 0.5));
    tape.matmul(prod, ones)
}
