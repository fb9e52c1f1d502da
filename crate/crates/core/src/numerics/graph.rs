//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value is viewed as a `rows x cols` matrix (vectors are a single
//! row). Nodes are appended in evaluation order, so a reverse sweep over the
//! tape visits each node after all of its consumers.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear { x: usize, w: usize, b: usize },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Square(usize),
    Clamp(usize, T, T),
    SliceCols { x: usize, start: usize },
    ConcatCols(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    Gather(usize, Vec<usize>),
    BceLogitsRows { logits: usize, targets: usize },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.grads.insert(name.into(), grad);
    }

    /// Keeps only entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Gradients<T> {
        Gradients {
            grads: self
                .grads
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// A single-use computation trace.
pub struct Graph<'p, T: Scalar> {
    id: u64,
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        v.index
    }

    fn node(&self, v: Var) -> &Node<'p, T> {
        &self.nodes[self.idx(v)]
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.node(x).requires_grad;
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: &'p Tensor<T>) -> Var {
        let v = self.push(Cow::Borrowed(value), Op::Leaf, true);
        self.nodes[v.index].param = Some(name.into());
        v
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Copies the value of `x` into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// `x * w^T + b` with `x: [b x in]`, `w: [out x in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (rows, inp) = dims(xv);
        let (out, w_in) = dims(wv);
        if w_in != inp {
            return Err(Error::dim("linear input", &[rows, w_in], &[rows, inp]));
        }
        if bv.len() != out {
            return Err(Error::dim("linear bias", &[out], &[bv.len()]));
        }
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(bv.data());
        }
        T::gemm(
            rows,
            inp,
            out,
            T::one(),
            (xv.data(), inp as isize, 1),
            (wv.data(), 1, inp as isize),
            T::one(),
            (&mut y, out as isize, 1),
        );
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let value = Tensor::matrix(rows, out, y)?;
        let op = Op::Linear {
            x: x.index,
            w: w.index,
            b: b.index,
        };
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.unary(x, v, Op::Relu(x.index))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.unary(x, v, Op::Sigmoid(x.index))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.unary(x, v, Op::Tanh(x.index))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.unary(x, v, Op::Exp(x.index))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = dims(xv);
        let mut out = xv.clone();
        for r in 0..rows {
            softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        self.unary(x, out, Op::Softmax(x.index))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = dims(xv);
        let mut out = xv.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
            let lse = max + row.iter().map(|&a| (a - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|a| *a = *a - lse);
        }
        self.unary(x, out, Op::LogSoftmax(x.index))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.cols() != bv.cols() {
            return Err(Error::dim(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add(a.index, b.index))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |p, q| p - q, Op::Sub(a.index, b.index))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul(a.index, b.index))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.unary(x, v, Op::Scale(x.index, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.unary(x, v, Op::AddScalar(x.index))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.unary(x, v, Op::Square(x.index))
    }

    /// Elementwise clamp; gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        self.unary(x, v, Op::Clamp(x.index, lo, hi))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims(xv);
        if start >= end || end > cols {
            return Err(Error::dim("slice_cols", &[rows, cols], &[rows, end]));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let value = Tensor::matrix(rows, width, out)?;
        Ok(self.unary(x, value, Op::SliceCols { x: x.index, start }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((ra, ca), (rb, cb)) = (dims(av), dims(bv));
        if ra != rb {
            return Err(Error::dim("concat_cols", &[ra, cb], &[rb, cb]));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let value = Tensor::matrix(ra, ca + cb, out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Cow::Owned(value), Op::ConcatCols(a.index, b.index), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.unary(x, Tensor::scalar(s), Op::SumAll(x.index))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: T = xv.data().iter().copied().sum();
        let m = s / T::from_usize(xv.len()).unwrap();
        self.unary(x, Tensor::scalar(m), Op::MeanAll(x.index))
    }

    /// Per-row sum, `[rows x cols] -> [rows x 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rows = xv.rows();
        let data = (0..rows).map(|r| xv.row(r).iter().copied().sum()).collect();
        let value = Tensor::matrix(rows, 1, data).expect("rows > 0");
        self.unary(x, value, Op::SumRows(x.index))
    }

    /// Picks column `indices[r]` from each row `r`, producing `[rows x 1]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims(xv);
        if indices.len() != rows {
            return Err(Error::dim("gather indices", &[rows], &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::dim("gather column", &[cols], &[bad]));
        }
        let data = indices.iter().enumerate().map(|(r, &c)| xv.row(r)[c]).collect();
        let value = Tensor::matrix(rows, 1, data)?;
        Ok(self.unary(x, value, Op::Gather(x.index, indices.to_vec())))
    }

    /// Per-row Bernoulli negative log-likelihood of `targets` under
    /// `sigmoid(logits)`, `[rows x cols] -> [rows x 1]`.
    ///
    /// Evaluated as `max(l, 0) - l t + ln(1 + e^{-|l|})`.
    pub fn bce_with_logits_rows(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (lv, tv) = (self.value(logits), self.value(targets));
        if lv.shape() != tv.shape() {
            return Err(Error::dim("bce targets", lv.shape(), tv.shape()));
        }
        let (rows, cols) = dims(lv);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let s: T = lv.row(r)
                .iter()
                .zip(&tv.data()[r * cols..(r + 1) * cols])
                .map(|(&l, &t)| bce_logit(l, t))
                .sum();
            out.push(s);
        }
        let value = Tensor::matrix(rows, 1, out)?;
        let op = Op::BceLogitsRows {
            logits: logits.index,
            targets: targets.index,
        };
        let rg = self.requires_grad(logits);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.graph != self.id || loss.index >= self.nodes.len() {
            return Err(Error::usage("backward called on a value not traced by this graph"));
        }
        if self.nodes[loss.index].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.as_ref();
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        let t = Tensor::new(y.shape().to_vec(), g)?;
                        match out.grads.get_mut(name) {
                            Some(acc) => acc
                                .data_mut()
                                .iter_mut()
                                .zip(t.data())
                                .for_each(|(a, &b)| *a += b),
                            None => {
                                out.grads.insert(name.clone(), t);
                            }
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (rows, inp) = dims(xv);
                    let out_dim = wv.rows();
                    if self.nodes[*x].requires_grad {
                        let mut dx = vec![T::zero(); rows * inp];
                        T::gemm(
                            rows,
                            out_dim,
                            inp,
                            T::one(),
                            (&g, out_dim as isize, 1),
                            (wv.data(), inp as isize, 1),
                            T::zero(),
                            (&mut dx, inp as isize, 1),
                        );
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[*w].requires_grad {
                        let mut dw = vec![T::zero(); out_dim * inp];
                        T::gemm(
                            out_dim,
                            rows,
                            inp,
                            T::one(),
                            (&g, 1, out_dim as isize),
                            (xv.data(), inp as isize, 1),
                            T::zero(),
                            (&mut dw, inp as isize, 1),
                        );
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.nodes[*b].requires_grad {
                        let mut db = vec![T::zero(); out_dim];
                        for r in 0..rows {
                            for (d, &gv) in db.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]) {
                                *d += gv;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Relu(x) => {
                    let dx = zip_map(&g, y.data(), |g, y| if y > T::zero() { g } else { T::zero() });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = zip_map(&g, y.data(), |g, y| g * y * (T::one() - y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = zip_map(&g, y.data(), |g, y| g * (T::one() - y * y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = zip_map(&g, y.data(), |g, y| g * y);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let (rows, cols) = dims(y);
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let (gr, yr) = (&g[r * cols..(r + 1) * cols], y.row(r));
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    let (rows, cols) = dims(y);
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let (gr, yr) = (&g[r * cols..(r + 1) * cols], y.row(r));
                        let total: T = gr.iter().copied().sum();
                        for c in 0..cols {
                            dx[r * cols + c] = gr[c] - yr[c].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, g.iter().map(|&v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, zip_map(&g, bv.data(), |g, q| g * q));
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, zip_map(&g, av.data(), |g, p| g * p));
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.iter().map(|&v| v * c).collect());
                }
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Square(x) => {
                    let xv = &self.nodes[*x].value;
                    let two = T::lit(2.0);
                    accumulate(&mut grads, *x, zip_map(&g, xv.data(), |g, a| two * a * g));
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let xv = &self.nodes[*x].value;
                    let dx = zip_map(&g, xv.data(), |g, a| {
                        if a >= lo && a <= hi {
                            g
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = dims(&self.nodes[*x].value);
                    let width = y.cols();
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + width]
                            .copy_from_slice(&g[r * width..(r + 1) * width]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let (rows, ca) = dims(&self.nodes[*a].value);
                    let cb = self.nodes[*b].value.cols();
                    let w = ca + cb;
                    if self.nodes[*a].requires_grad {
                        let mut da = Vec::with_capacity(rows * ca);
                        for r in 0..rows {
                            da.extend_from_slice(&g[r * w..r * w + ca]);
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[*b].requires_grad {
                        let mut db = Vec::with_capacity(rows * cb);
                        for r in 0..rows {
                            db.extend_from_slice(&g[r * w + ca..(r + 1) * w]);
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::SumAll(x) => {
                    let n = self.nodes[*x].value.len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[*x].value.len();
                    let v = g[0] / T::from_usize(n).unwrap();
                    accumulate(&mut grads, *x, vec![v; n]);
                }
                Op::SumRows(x) => {
                    let (rows, cols) = dims(&self.nodes[*x].value);
                    let mut dx = Vec::with_capacity(rows * cols);
                    for &gr in g.iter().take(rows) {
                        dx.extend(std::iter::repeat_n(gr, cols));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather(x, indices) => {
                    let (rows, cols) = dims(&self.nodes[*x].value);
                    let mut dx = vec![T::zero(); rows * cols];
                    for (r, &c) in indices.iter().enumerate() {
                        dx[r * cols + c] = g[r];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BceLogitsRows { logits, targets } => {
                    let (lv, tv) = (&self.nodes[*logits].value, &self.nodes[*targets].value);
                    let (rows, cols) = dims(lv);
                    let mut dx = Vec::with_capacity(rows * cols);
                    for (r, &gr) in g.iter().enumerate().take(rows) {
                        let lr = lv.row(r);
                        let tr = &tv.data()[r * cols..(r + 1) * cols];
                        dx.extend(lr.iter().zip(tr).map(|(&l, &t)| (sigmoid(l) - t) * gr));
                    }
                    accumulate(&mut grads, *logits, dx);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], index: usize, g: Vec<T>) {
    match &mut grads[index] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(g: &[T], other: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter().zip(other).map(|(&a, &b)| f(a, b)).collect()
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn bce_logit<T: Scalar>(l: T, t: T) -> T {
    l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
    let mut total = T::zero();
    for a in row.iter_mut() {
        *a = (*a - max).exp();
        total += *a;
    }
    row.iter_mut().for_each(|a| *a = *a / total);
}
