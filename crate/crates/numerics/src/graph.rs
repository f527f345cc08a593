//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass as a
//! node holding its output value. [`Graph::backward`] walks the tape in
//! reverse and returns a gradient for every node that depends on a
//! parameter or a differentiable input. There is no operator fusion: each
//! node is one primitive with its own adjoint.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, s: T },
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    Softmax(Var),
    GatherRows { src: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor<T> },
    MeanRows(Var),
    Sum(Var),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Whether dropout is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. a node, if it depends on anything
    /// differentiable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.grads[n].as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(p, n)| self.grads[n].as_ref().map(|g| (p, g)))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf; its gradient is available via [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = kernels::matmul(self.value(a), ta, self.value(b), tb)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() != vb.numel() || va.cols() != vb.cols() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() != vb.numel() || va.cols() != vb.cols() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.numel() != vx.cols() {
            return Err(Error::shape("add_row", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        kernels::add_row_in_place(&mut out, vb.data());
        let rg = self.requires(x) || self.requires(bias);
        self.push(out, Op::AddRow { x, bias }, rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        let rg = self.requires(x);
        self.push(out, Op::Scale { x, s }, rg, "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        let rg = self.requires(x);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let ln = kernels::layer_norm(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::of(eps),
        )?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: ln.xhat,
            rstd: ln.rstd,
        };
        self.push(ln.y, op, rg, "layer_norm")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x));
        let rg = self.requires(x);
        self.push(out, Op::Softmax(x), rg, "softmax")
    }

    /// Selects rows of `src` by index; an embedding lookup when `src` is a table.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let vs = self.value(src);
        let (rows, cols) = (vs.rows(), vs.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(vs.row(i));
        }
        let out = Tensor::matrix(ids.len(), cols, data)?;
        let rg = self.requires(src);
        self.push(out, Op::GatherRows { src, ids: ids.to_vec() }, rg, "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or(Error::EmptyConcat)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", &[rows, cols], v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or(Error::EmptyConcat)?;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", &[rows, cols], v.shape()));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.rows() {
            return Err(Error::shape("slice_rows", v.shape(), &[start, len]));
        }
        let c = v.cols();
        let out = Tensor::matrix(len, c, v.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.requires(x);
        self.push(out, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.cols() {
            return Err(Error::shape("slice_cols", v.shape(), &[start, len]));
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        let rg = self.requires(x);
        self.push(out, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    /// Inverted dropout; the identity in [`Mode::Eval`] or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout rate {p} must be < 1")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires(x);
        self.push(out, Op::Dropout { x, mask }, rg, "dropout")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Produces a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", v.shape(), &[targets.len()]));
        }
        if targets.is_empty() {
            return Err(Error::Config("cross_entropy needs at least one target".into()));
        }
        let classes = v.cols();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: classes,
                });
            }
            let row = v.row(r);
            total += kernels::log_sum_exp(row) - row[t];
        }
        let probs = kernels::softmax_rows(v);
        let loss = total / T::of(targets.len() as f64);
        let rg = self.requires(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, rg, "cross_entropy")
    }

    /// Column means, producing a `1×c` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        if rows == 0 {
            return Err(Error::Config("mean_rows over zero rows".into()));
        }
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &a) in out.iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        let n = T::of(rows as f64);
        out.iter_mut().for_each(|o| *o /= n);
        let out = Tensor::matrix(1, cols, out)?;
        let rg = self.requires(x);
        self.push(out, Op::MeanRows(x), rg, "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self.param_vars.iter().map(|(&p, v)| (p, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.requires(a) {
                    let mut da = Tensor::zeros(va.shape());
                    if ta {
                        kernels::matmul_acc(vb, tb, g, true, T::one(), &mut da);
                    } else {
                        kernels::matmul_acc(g, false, vb, !tb, T::one(), &mut da);
                    }
                    accumulate(grads, a, da);
                }
                if self.requires(b) {
                    let mut db = Tensor::zeros(vb.shape());
                    if tb {
                        kernels::matmul_acc(g, true, va, ta, T::one(), &mut db);
                    } else {
                        kernels::matmul_acc(va, !ta, g, false, T::one(), &mut db);
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires(v) {
                        let t = Tensor::new(self.value(v).shape().to_vec(), g.data().to_vec())
                            .expect("same numel");
                        accumulate(grads, v, t);
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.requires(v) {
                        let o = self.value(other);
                        let data = g.data().iter().zip(o.data()).map(|(&x, &y)| x * y).collect();
                        let t = Tensor::new(self.value(v).shape().to_vec(), data).expect("same numel");
                        accumulate(grads, v, t);
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if self.requires(x) {
                    accumulate(grads, x, g.clone());
                }
                if self.requires(bias) {
                    let vb = self.value(bias);
                    let mut db = Tensor::zeros(vb.shape());
                    for r in 0..g.rows() {
                        for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, bias, db);
                }
            }
            &Op::Scale { x, s } => {
                if self.requires(x) {
                    accumulate(grads, x, g.map(|v| v * s));
                }
            }
            &Op::Gelu(x) => {
                if self.requires(x) {
                    let vx = self.value(x);
                    let data = g
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                        .collect();
                    accumulate(grads, x, Tensor::new(vx.shape().to_vec(), data).expect("same numel"));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let gam = self.value(gamma).data();
                let cols = xhat.cols();
                let rows = xhat.rows();
                if self.requires(gamma) || self.requires(beta) {
                    let mut dg = vec![T::zero(); cols];
                    let mut dbeta = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g.row(r)[c];
                            dg[c] += gv * xhat.row(r)[c];
                            dbeta[c] += gv;
                        }
                    }
                    if self.requires(gamma) {
                        let t = Tensor::new(self.value(gamma).shape().to_vec(), dg).expect("cols");
                        accumulate(grads, gamma, t);
                    }
                    if self.requires(beta) {
                        let t = Tensor::new(self.value(beta).shape().to_vec(), dbeta).expect("cols");
                        accumulate(grads, beta, t);
                    }
                }
                if self.requires(x) {
                    let n = T::of(cols as f64);
                    let mut dx = Tensor::zeros(xhat.shape());
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gam[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xr[c];
                        }
                        let k = rstd[r] / n;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = k * (n * dxhat[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            &Op::Softmax(x) => {
                if self.requires(x) {
                    let y = match &node.value {
                        Value::Owned(t) => t,
                        Value::Param(_) => unreachable!("softmax output is owned"),
                    };
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            Op::GatherRows { src, ids } => {
                if self.requires(*src) {
                    let mut ds = Tensor::zeros(self.value(*src).shape());
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, &v) in ds.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *src, ds);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let n = vp.rows() * cols;
                    if self.requires(p) {
                        let t = Tensor::new(vp.shape().to_vec(), g.data()[offset..offset + n].to_vec())
                            .expect("slice numel");
                        accumulate(grads, p, t);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    if self.requires(p) {
                        let mut t = Tensor::zeros(vp.shape());
                        for r in 0..g.rows() {
                            t.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(grads, p, t);
                    }
                    offset += w;
                }
            }
            &Op::SliceRows { x, start } => {
                if self.requires(x) {
                    let mut dx = Tensor::zeros(self.value(x).shape());
                    let c = g.cols();
                    dx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    accumulate(grads, x, dx);
                }
            }
            &Op::SliceCols { x, start } => {
                if self.requires(x) {
                    let mut dx = Tensor::zeros(self.value(x).shape());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        dx.row_mut(r)[start..start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(grads, x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                if self.requires(*x) {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    let t = Tensor::new(g.shape().to_vec(), data).expect("same numel");
                    accumulate(grads, *x, t);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.requires(*logits) {
                    let scale = g.data()[0] / T::of(targets.len() as f64);
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dl.row_mut(r)[t] -= T::one();
                    }
                    dl.data_mut().iter_mut().for_each(|v| *v *= scale);
                    let dl = dl.reshape(self.value(*logits).shape()).expect("same numel");
                    accumulate(grads, *logits, dl);
                }
            }
            &Op::MeanRows(x) => {
                if self.requires(x) {
                    let vx = self.value(x);
                    let n = T::of(vx.rows() as f64);
                    let mut dx = Tensor::zeros(vx.shape());
                    for r in 0..vx.rows() {
                        for (o, &v) in dx.row_mut(r).iter_mut().zip(g.data()) {
                            *o = v / n;
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            &Op::Sum(x) => {
                if self.requires(x) {
                    let s = g.data()[0];
                    accumulate(grads, x, Tensor::full(self.value(x).shape(), s));
                }
            }
        }
    }
}
