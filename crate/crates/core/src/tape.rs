//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order, so node ids are a
//! valid topological order by construction. [`Tape::backward`] walks the
//! nodes once in reverse and may be called only once per tape.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Rows whose Euclidean norm falls below this pass through
/// [`Tape::l2_normalize_rows`] unchanged.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    SmoothL1(usize, f64),
    ConcatCols(usize, usize),
    MeanRows(usize),
    Sum(usize),
    Transpose(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    RowSoftmax(usize),
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows(usize, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient buffer for `var`; `None` if the node does not require grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        assert_eq!(var.tape, self.tape, "Var belongs to a different tape");
        self.grads[var.id].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        assert_eq!(var.tape, self.tape, "Var belongs to a different tape");
        self.grads[var.id].take()
    }
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::with_capacity(256),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        v.id
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.data().len(), value.rows() * value.cols());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v)].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v)].requires_grad
    }

    fn shape_err(&self, op: &'static str, a: usize, b: usize) -> Error {
        Error::Shape {
            op,
            left: self.nodes[a].value.shape(),
            right: self.nodes[b].value.shape(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a), self.check(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.cols() != bv.rows() {
            return Err(self.shape_err("matmul", ai, bi));
        }
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        matmul_into(av, bv, &mut out);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::MatMul(ai, bi), rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a), self.check(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(self.shape_err(name, ai, bi));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Add(a.id, b.id);
        self.zip_same("add", a, b, |x, y| x + y, op)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Sub(a.id, b.id);
        self.zip_same("sub", a, b, |x, y| x - y, op)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Mul(a.id, b.id);
        self.zip_same("mul", a, b, |x, y| x * y, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ai = self.check(a);
        let av = &self.nodes[ai].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("same shape");
        let rg = self.rg(ai);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a.id, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::AddScalar(a.id))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a.id))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a.id))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a.id))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a.id, lo, hi))
    }

    /// Elementwise Huber-style smooth L1 with transition point `delta`.
    pub fn smooth_l1(&mut self, a: Var, delta: f64) -> Var {
        self.map(
            a,
            |x| {
                if x.abs() < delta {
                    0.5 * x * x / delta
                } else {
                    x.abs() - 0.5 * delta
                }
            },
            Op::SmoothL1(a.id, delta),
        )
    }

    /// Adds a `1×q` row to every row of a `p×q` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ai, ri) = (self.check(a), self.check(row));
        let (av, rv) = (&self.nodes[ai].value, &self.nodes[ri].value);
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(self.shape_err("add_row", ai, ri));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(ai) || self.rg(ri);
        Ok(self.push(out, Op::AddRow(ai, ri), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a), self.check(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rows() != bv.rows() {
            return Err(self.shape_err("concat_cols", ai, bi));
        }
        let (ac, bc) = (av.cols(), bv.cols());
        let out = Tensor::from_fn(av.rows(), ac + bc, |r, c| {
            if c < ac {
                av.get(r, c)
            } else {
                bv.get(r, c - ac)
            }
        });
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::ConcatCols(ai, bi), rg))
    }

    /// Column-wise mean over rows, giving `1×q`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let av = &self.nodes[ai].value;
        let p = av.rows() as f64;
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        out.data_mut().iter_mut().for_each(|o| *o /= p);
        let rg = self.rg(ai);
        self.push(out, Op::MeanRows(ai), rg)
    }

    /// Sum of every entry, giving `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let s = self.nodes[ai].value.data().iter().sum();
        let rg = self.rg(ai);
        self.push(Tensor::scalar(s), Op::Sum(ai), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let out = self.nodes[ai].value.transpose();
        let rg = self.rg(ai);
        self.push(out, Op::Transpose(ai), rg)
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ai = self.check(a);
        let av = &self.nodes[ai].value;
        if start >= end || end > av.rows() {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: av.shape(),
                reason: format!("row range {start}..{end}"),
            });
        }
        let out = Tensor::from_fn(end - start, av.cols(), |r, c| av.get(start + r, c));
        let rg = self.rg(ai);
        Ok(self.push(out, Op::SliceRows(ai, start), rg))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ai = self.check(a);
        let av = &self.nodes[ai].value;
        if start >= end || end > av.cols() {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: av.shape(),
                reason: format!("column range {start}..{end}"),
            });
        }
        let out = av.slice_cols(start, end);
        let rg = self.rg(ai);
        Ok(self.push(out, Op::SliceCols(ai, start), rg))
    }

    /// Softmax along each row, stabilized by subtracting the row max.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let mut out = self.nodes[ai].value.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(ai);
        self.push(out, Op::RowSoftmax(ai), rg)
    }

    /// Per-row normalization with population variance, then `gain`/`bias`
    /// affine (both `1×q`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ai, gi, bi) = (self.check(a), self.check(gain), self.check(bias));
        let av = &self.nodes[ai].value;
        let (p, q) = av.shape();
        if q < 2 {
            return Err(Error::InvalidShape {
                op: "layer_norm",
                shape: (p, q),
                reason: "needs at least two columns".into(),
            });
        }
        for &pi in &[gi, bi] {
            if self.nodes[pi].value.shape() != (1, q) {
                return Err(self.shape_err("layer_norm", ai, pi));
            }
        }
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        let mut xhat = Tensor::zeros(p, q);
        let mut inv_std = Vec::with_capacity(p);
        let mut out = Tensor::zeros(p, q);
        for r in 0..p {
            let row = av.row(r);
            let mean = row.iter().sum::<f64>() / q as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / q as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..q {
                let xh = (row[c] - mean) * inv;
                xhat.set(r, c, xh);
                out.set(r, c, xh * gv.data()[c] + bv.data()[c]);
            }
        }
        let rg = self.rg(ai) || self.rg(gi) || self.rg(bi);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: ai,
                gain: gi,
                bias: bi,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm; rows with norm below
    /// [`NORM_FLOOR`] pass through unchanged.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let ai = self.check(a);
        let mut out = self.nodes[ai].value.clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(n);
            if n >= NORM_FLOOR {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let rg = self.rg(ai);
        self.push(out, Op::L2NormalizeRows(ai, norms), rg)
    }

    /// Reverse pass from a `1×1` loss. Consumes the tape's single backward
    /// pass; a second call is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss);
        if self.consumed {
            return Err(Error::contract("backward() already ran on this tape"));
        }
        if self.nodes[li].value.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward() needs a 1x1 loss, got {:?}",
                self.nodes[li].value.shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[li] = Some(Tensor::scalar(1.0));

        for id in (0..=li).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
            } else if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let mut acc = |i: usize, delta: Tensor| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let elementwise = |src: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            let data = g.data().iter().enumerate().map(|(k, &gv)| f(k, gv)).collect();
            Tensor::from_vec(src.rows(), src.cols(), data).expect("same shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].requires_grad {
                    let bt = val(*b).transpose();
                    acc(*a, g.matmul(&bt).expect("shapes checked"));
                }
                if self.nodes[*b].requires_grad {
                    let at = val(*a).transpose();
                    acc(*b, at.matmul(g).expect("shapes checked"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, elementwise(g, &|_, gv| -gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, elementwise(av, &|k, gv| gv * bv.data()[k]));
                acc(*b, elementwise(bv, &|k, gv| gv * av.data()[k]));
            }
            Op::Scale(a, k) => acc(*a, elementwise(g, &|_, gv| gv * k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut rg = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in rg.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*row, rg);
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, elementwise(av, &|k, gv| if av.data()[k] > 0.0 { gv } else { 0.0 }));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, elementwise(y, &|k, gv| gv * (1.0 - y.data()[k] * y.data()[k])));
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, elementwise(y, &|k, gv| gv * y.data()[k]));
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, elementwise(av, &|k, gv| gv / av.data()[k]));
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc(
                    *a,
                    elementwise(av, &|k, gv| {
                        let x = av.data()[k];
                        if x >= *lo && x <= *hi {
                            gv
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::SmoothL1(a, delta) => {
                let av = val(*a);
                acc(
                    *a,
                    elementwise(av, &|k, gv| {
                        let x = av.data()[k];
                        if x.abs() < *delta {
                            gv * x / delta
                        } else {
                            gv * x.signum()
                        }
                    }),
                );
            }
            Op::ConcatCols(a, b) => {
                let ac = val(*a).cols();
                acc(*a, g.slice_cols(0, ac));
                acc(*b, g.slice_cols(ac, g.cols()));
            }
            Op::MeanRows(a) => {
                let av = val(*a);
                let p = av.rows() as f64;
                acc(*a, Tensor::from_fn(av.rows(), av.cols(), |_, c| g.data()[c] / p));
            }
            Op::Sum(a) => {
                let av = val(*a);
                acc(*a, Tensor::full(av.rows(), av.cols(), g.item()));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut full = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    full.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*a, full);
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut full = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        full.set(r, start + c, g.get(r, c));
                    }
                }
                acc(*a, full);
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (p, q) = xhat.shape();
                let gv = val(*gain);
                let mut dgain = Tensor::zeros(1, q);
                let mut dbias = Tensor::zeros(1, q);
                let mut dx = Tensor::zeros(p, q);
                for r in 0..p {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for c in 0..q {
                        dgain.data_mut()[c] += gr[c] * xr[c];
                        dbias.data_mut()[c] += gr[c];
                        let dxh = gr[c] * gv.data()[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xr[c];
                    }
                    let qf = q as f64;
                    for c in 0..q {
                        let dxh = gr[c] * gv.data()[c];
                        dx.set(r, c, inv_std[r] / qf * (qf * dxh - sum_dxh - xr[c] * sum_dxh_xh));
                    }
                }
                acc(*input, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    if norms[r] < NORM_FLOOR {
                        dx.row_mut(r).copy_from_slice(gr);
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                acc(*a, dx);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
