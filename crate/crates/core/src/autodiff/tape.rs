use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Sum(Var),
    SumSquares(Var),
    Tanh(Var),
    TanhPrime(Var),
    TanhPrime2(Var),
    Elu(Var),
    EluPrime(Var),
    EluPrime2(Var),
    BatchMatVec(Var, Var),
    BatchMatTVec(Var, Var),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::Tanh(..) => "tanh",
            Op::TanhPrime(..) => "tanh_prime",
            Op::TanhPrime2(..) => "tanh_prime2",
            Op::Elu(..) => "elu",
            Op::EluPrime(..) => "elu_prime",
            Op::EluPrime2(..) => "elu_prime2",
            Op::BatchMatVec(..) => "batch_matvec",
            Op::BatchMatTVec(..) => "batch_mat_t_vec",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Define-by-run record of primitive applications.
///
/// Operands are always recorded before their results, so a reverse sweep
/// over the node list is a valid topological order. Constants are
/// untracked; no vector-Jacobian product is formed for them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
    visited: usize,
}

impl Gradients {
    /// Gradient with respect to `var`; zero when `var` does not reach the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Number of nodes whose VJP was applied.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn tanh_prime(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

fn tanh_prime2(x: f64) -> f64 {
    let t = x.tanh();
    -2.0 * t * (1.0 - t * t)
}

fn tanh_prime3(x: f64) -> f64 {
    let t = x.tanh();
    let s = 1.0 - t * t;
    -2.0 * s * (1.0 - 3.0 * t * t)
}

fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_prime(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn elu_prime2(x: f64) -> f64 {
    if x >= 0.0 {
        0.0
    } else {
        x.exp()
    }
}

/// Shared helper for the two batched matrix-vector primitives. `m` holds one
/// row-major `n × k` matrix per batch row.
fn batch_dims(m: &Tensor, v: &Tensor, transposed: bool) -> (usize, usize) {
    assert_eq!(
        m.rows(),
        v.rows(),
        "shape mismatch in batched matvec: {:?} vs {:?}",
        m.shape(),
        v.shape()
    );
    let len = v.cols();
    assert!(
        len > 0 && m.cols() % len == 0,
        "shape mismatch in batched matvec: {:?} vs {:?}",
        m.shape(),
        v.shape()
    );
    let other = m.cols() / len;
    // (n, k) of each matrix
    if transposed {
        (len, other)
    } else {
        (other, len)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            x.assert_same_shape(y, "add");
            x.zip_map(y, |p, q| p + q)
        };
        self.binary(a, b, value, Op::Add(a, b))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (x, row) = (self.value(a), self.value(b));
            assert!(
                row.rows() == 1 && row.cols() == x.cols(),
                "shape mismatch in add_row: {:?} + {:?}",
                x.shape(),
                row.shape()
            );
            let mut out = x.clone();
            let c = x.cols();
            for chunk in out.data_mut().chunks_mut(c) {
                for (o, r) in chunk.iter_mut().zip(row.data()) {
                    *o += r;
                }
            }
            out
        };
        self.binary(a, b, value, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            x.assert_same_shape(y, "sub");
            x.zip_map(y, |p, q| p - q)
        };
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.unary(a, value, Op::Scale(a, c))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            x.assert_same_shape(y, "mul");
            x.zip_map(y, |p, q| p * q)
        };
        self.binary(a, b, value, Op::Mul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(
                x.rows(),
                y.rows(),
                "shape mismatch in concat_cols: {:?} | {:?}",
                x.shape(),
                y.shape()
            );
            let c = x.cols() + y.cols();
            let mut data = Vec::with_capacity(x.rows() * c);
            for i in 0..x.rows() {
                data.extend_from_slice(x.row_slice(i));
                data.extend_from_slice(y.row_slice(i));
            }
            Tensor::from_vec(x.rows(), c, data)
        };
        self.binary(a, b, value, Op::ConcatCols(a, b))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let x = self.value(a);
            assert!(
                start + len <= x.cols(),
                "shape mismatch in slice_cols: columns {start}..{} of {:?}",
                start + len,
                x.shape()
            );
            let mut data = Vec::with_capacity(x.rows() * len);
            for i in 0..x.rows() {
                data.extend_from_slice(&x.row_slice(i)[start..start + len]);
            }
            Tensor::from_vec(x.rows(), len, data)
        };
        self.unary(a, value, Op::SliceCols(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_squares());
        self.unary(a, value, Op::SumSquares(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.unary(a, value, Op::Tanh(a))
    }

    /// `1 - tanh²(x)`.
    pub fn tanh_prime(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tanh_prime);
        self.unary(a, value, Op::TanhPrime(a))
    }

    /// `-2 tanh(x) (1 - tanh²(x))`.
    pub fn tanh_prime2(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tanh_prime2);
        self.unary(a, value, Op::TanhPrime2(a))
    }

    /// Exponential-linear unit with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(elu);
        self.unary(a, value, Op::Elu(a))
    }

    pub fn elu_prime(&mut self, a: Var) -> Var {
        let value = self.value(a).map(elu_prime);
        self.unary(a, value, Op::EluPrime(a))
    }

    pub fn elu_prime2(&mut self, a: Var) -> Var {
        let value = self.value(a).map(elu_prime2);
        self.unary(a, value, Op::EluPrime2(a))
    }

    /// Row `b` of the result is `M_b v_b`, with `M_b` the row-major
    /// `n × k` matrix stored in row `b` of `m` and `v_b` row `b` of `v`.
    pub fn batch_matvec(&mut self, m: Var, v: Var) -> Var {
        let value = {
            let (mt, vt) = (self.value(m), self.value(v));
            let (n, k) = batch_dims(mt, vt, false);
            let mut out = Tensor::zeros(mt.rows(), n);
            for b in 0..mt.rows() {
                let mr = mt.row_slice(b);
                let vr = vt.row_slice(b);
                for i in 0..n {
                    let s: f64 = mr[i * k..(i + 1) * k].iter().zip(vr).map(|(x, y)| x * y).sum();
                    out.set(b, i, s);
                }
            }
            out
        };
        self.binary(m, v, value, Op::BatchMatVec(m, v))
    }

    /// Row `b` of the result is `M_bᵀ v_b` (see [`Tape::batch_matvec`]).
    pub fn batch_mat_t_vec(&mut self, m: Var, v: Var) -> Var {
        let value = {
            let (mt, vt) = (self.value(m), self.value(v));
            let (n, k) = batch_dims(mt, vt, true);
            let mut out = Tensor::zeros(mt.rows(), k);
            for b in 0..mt.rows() {
                let mr = mt.row_slice(b);
                let vr = vt.row_slice(b);
                let orow = &mut out.data_mut()[b * k..(b + 1) * k];
                for (i, &vi) in vr.iter().enumerate().take(n) {
                    for (o, x) in orow.iter_mut().zip(&mr[i * k..(i + 1) * k]) {
                        *o += x * vi;
                    }
                }
            }
            out
        };
        self.binary(m, v, value, Op::BatchMatTVec(m, v))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Shape(format!(
                "backward seed must be a 1x1 scalar, got {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.apply_vjp(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: impl FnOnce() -> Tensor) {
        if !self.tracked(v) {
            return;
        }
        let c = contribution();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&c),
            slot @ None => *slot = Some(c),
        }
    }

    fn apply_vjp(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                self.accumulate(grads, a, || g.matmul_nt(val(b)));
                self.accumulate(grads, b, || val(a).matmul_tn(g));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, || g.clone());
                self.accumulate(grads, b, || g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, a, || g.clone());
                self.accumulate(grads, b, || {
                    let mut row = Tensor::zeros(1, g.cols());
                    for chunk in g.data().chunks(g.cols()) {
                        for (r, x) in row.data_mut().iter_mut().zip(chunk) {
                            *r += x;
                        }
                    }
                    row
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, || g.clone());
                self.accumulate(grads, b, || g.scale(-1.0));
            }
            Op::Scale(a, c) => self.accumulate(grads, a, || g.scale(c)),
            Op::Mul(a, b) => {
                self.accumulate(grads, a, || g.zip_map(val(b), |p, q| p * q));
                self.accumulate(grads, b, || g.zip_map(val(a), |p, q| p * q));
            }
            Op::Transpose(a) => self.accumulate(grads, a, || g.transpose()),
            Op::ConcatCols(a, b) => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                self.accumulate(grads, a, || {
                    let mut data = Vec::with_capacity(g.rows() * ca);
                    for i in 0..g.rows() {
                        data.extend_from_slice(&g.row_slice(i)[..ca]);
                    }
                    Tensor::from_vec(g.rows(), ca, data)
                });
                self.accumulate(grads, b, || {
                    let mut data = Vec::with_capacity(g.rows() * cb);
                    for i in 0..g.rows() {
                        data.extend_from_slice(&g.row_slice(i)[ca..]);
                    }
                    Tensor::from_vec(g.rows(), cb, data)
                });
            }
            Op::SliceCols(a, start) => self.accumulate(grads, a, || {
                let src = val(a);
                let mut out = Tensor::zeros(src.rows(), src.cols());
                let len = g.cols();
                for i in 0..g.rows() {
                    for j in 0..len {
                        out.set(i, start + j, g.get(i, j));
                    }
                }
                out
            }),
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, a, || {
                    let (r, c) = val(a).shape();
                    Tensor::filled(r, c, s)
                });
            }
            Op::SumSquares(a) => {
                let s = g.item();
                self.accumulate(grads, a, || val(a).scale(2.0 * s));
            }
            Op::Tanh(a) => {
                let t = &node.value;
                self.accumulate(grads, a, || g.zip_map(t, |p, t| p * (1.0 - t * t)));
            }
            Op::TanhPrime(a) => self.accumulate(grads, a, || g.zip_map(val(a), |p, x| p * tanh_prime2(x))),
            Op::TanhPrime2(a) => self.accumulate(grads, a, || g.zip_map(val(a), |p, x| p * tanh_prime3(x))),
            Op::Elu(a) => self.accumulate(grads, a, || g.zip_map(val(a), |p, x| p * elu_prime(x))),
            Op::EluPrime(a) => self.accumulate(grads, a, || g.zip_map(val(a), |p, x| p * elu_prime2(x))),
            // elu'' coincides with its own derivative away from the kink.
            Op::EluPrime2(a) => self.accumulate(grads, a, || g.zip_map(val(a), |p, x| p * elu_prime2(x))),
            Op::BatchMatVec(m, v) => {
                let (mt, vt) = (val(m), val(v));
                let (n, k) = batch_dims(mt, vt, false);
                self.accumulate(grads, m, || {
                    let mut out = Tensor::zeros(mt.rows(), mt.cols());
                    for b in 0..mt.rows() {
                        let vr = vt.row_slice(b);
                        let gr = g.row_slice(b);
                        let orow = &mut out.data_mut()[b * n * k..(b + 1) * n * k];
                        for i in 0..n {
                            for j in 0..k {
                                orow[i * k + j] = gr[i] * vr[j];
                            }
                        }
                    }
                    out
                });
                self.accumulate(grads, v, || {
                    let mut out = Tensor::zeros(vt.rows(), k);
                    for b in 0..mt.rows() {
                        let mr = mt.row_slice(b);
                        let gr = g.row_slice(b);
                        let orow = &mut out.data_mut()[b * k..(b + 1) * k];
                        for i in 0..n {
                            for (o, x) in orow.iter_mut().zip(&mr[i * k..(i + 1) * k]) {
                                *o += x * gr[i];
                            }
                        }
                    }
                    out
                });
            }
            Op::BatchMatTVec(m, v) => {
                let (mt, vt) = (val(m), val(v));
                let (n, k) = batch_dims(mt, vt, true);
                self.accumulate(grads, m, || {
                    let mut out = Tensor::zeros(mt.rows(), mt.cols());
                    for b in 0..mt.rows() {
                        let vr = vt.row_slice(b);
                        let gr = g.row_slice(b);
                        let orow = &mut out.data_mut()[b * n * k..(b + 1) * n * k];
                        for i in 0..n {
                            for j in 0..k {
                                orow[i * k + j] = vr[i] * gr[j];
                            }
                        }
                    }
                    out
                });
                self.accumulate(grads, v, || {
                    let mut out = Tensor::zeros(vt.rows(), n);
                    for b in 0..mt.rows() {
                        let mr = mt.row_slice(b);
                        let gr = g.row_slice(b);
                        for i in 0..n {
                            let s: f64 = mr[i * k..(i + 1) * k].iter().zip(gr).map(|(x, y)| x * y).sum();
                            out.set(b, i, s);
                        }
                    }
                    out
                });
            }
        }
    }
}
