//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass in execution order,
//! so the recording order is already a topological order. [`Graph::backward`]
//! walks the tape once in reverse and returns one gradient per registered
//! parameter. Graphs are cheap and single-use: build one per sample.
//!
//! Every forward operation checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] naming the operation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    RepeatRows(Var),
    Scale(Var, T),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Prelu(Var, Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRow(Var, usize),
    Sum(Vec<Var>),
    CrossEntropy { logits: Var, truth: usize, probs: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }
}

/// Gradients for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(_, _, v)| Tensor::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    /// Wraps one tensor per parameter, in [`ParamId`] order.
    pub fn from_tensors(grads: Vec<Tensor<T>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.grads.iter()
    }

    /// Adds `other` into `self`, parameter by parameter, in index order.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::Contract(format!(
                "accumulating {} gradients into {}",
                other.grads.len(),
                self.grads.len()
            )));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.shape() != b.shape() {
                return Err(Error::Contract("gradient shape mismatch".into()));
            }
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, &[])
    }

    /// Leaf tracking a trainable parameter. Repeated calls with the same id
    /// return the same node, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.get(id).clone(), Op::Leaf, &[])?;
        let node = &mut self.nodes[v.0];
        node.requires_grad = true;
        node.param = Some(id);
        self.params.insert(id, v);
        Ok(v)
    }

    /// Fresh leaf node for a parameter even if one already exists. Used to
    /// express the same parameter through two distinct graph references.
    pub fn param_alias(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let v = self.push("param", store.get(id).clone(), Op::Leaf, &[])?;
        let node = &mut self.nodes[v.0];
        node.requires_grad = true;
        node.param = Some(id);
        self.params.entry(id).or_insert(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a * bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        self.push("matmul_nt", value, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(row);
        if rb != 1 || cb != ca {
            return Err(Error::shape(
                "add_row",
                format!("cannot add {rb}x{cb} to each row of {ra}x{ca}"),
            ));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for r in 0..ra {
            for (v, &b) in value.row_mut(r).iter_mut().zip(&bias) {
                *v = *v + b;
            }
        }
        self.push("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    /// Stacks `count` copies of the `1 x n` row `a`.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != 1 || count == 0 {
            return Err(Error::shape(
                "repeat_rows",
                format!("cannot repeat {r}x{c} {count} times"),
            ));
        }
        let data = self.value(a).data().repeat(count);
        let value = Tensor::from_vec(count, c, data)?;
        self.push("repeat_rows", value, Op::RepeatRows(a), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| T::one() - x);
        self.push("one_minus", value, Op::OneMinus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.tanh());
        self.push("tanh", value, Op::Tanh(a), &[a])
    }

    /// `max(x, 0) + slope * min(x, 0)` with a trainable `1 x 1` slope.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        if self.shape(slope) != (1, 1) {
            return Err(Error::shape("prelu", "slope must be 1x1"));
        }
        let s = self.value(slope).item();
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { s * x });
        self.push("prelu", value, Op::Prelu(a, slope), &[a, slope])
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    /// Column-wise concatenation in argument order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no parts"));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let rows = self.shape(first).0;
        if let Some(bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row count {} vs {rows}", self.shape(*bad).0),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if len == 0 || start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {rows}x{cols}", start + len),
            ));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let value = Tensor::from_vec(rows, len, data)?;
        self.push("slice_cols", value, Op::SliceCols(a, start), &[a])
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if row >= rows {
            return Err(Error::Index(format!("row {row} of {rows}x{cols}")));
        }
        let value = Tensor::from_vec(1, cols, self.value(a).row(row).to_vec())?;
        self.push("select_row", value, Op::SelectRow(a, row), &[a])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("sum", "no parts"));
        };
        let mut value = self.value(first).clone();
        for &p in &parts[1..] {
            self.same_shape("sum", first, p)?;
            value.add_assign(self.value(p));
        }
        self.push("sum", value, Op::Sum(parts.to_vec()), parts)
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let total = self.sum(parts)?;
        let n = T::lit(parts.len() as f64);
        self.scale(total, T::one() / n)
    }

    /// `-log softmax(logits)[truth]` for `1 x j` logits, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, truth: usize) -> Result<Var> {
        let x = self.value(logits);
        if x.rows() != 1 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be 1xj, got {}x{}", x.rows(), x.cols()),
            ));
        }
        if truth >= x.cols() {
            return Err(Error::Index(format!(
                "truth {truth} out of range for {} logits",
                x.cols()
            )));
        }
        let row = x.row(0);
        // ln(1 + rest) keeps full relative precision when one logit dominates.
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(i, m), (k, &v)| if v > m { (k, v) } else { (i, m) });
        let rest = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != arg)
            .fold(T::zero(), |acc, (_, &v)| acc + (v - max).exp());
        let tail = rest.ln_1p();
        let lse = max + tail;
        let loss = (max - row[truth]) + tail;
        let probs = row.iter().map(|&v| (v - lse).exp()).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                truth,
                probs,
            },
            &[logits],
        )
    }

    /// Sign of every PReLU input (`-1`, `0`, `+1`), in recording order.
    /// Two forward passes with equal patterns took the same linear branch at
    /// every kink.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Prelu(a, _) = node.op {
                out.extend(self.value(a).data().iter().map(|&x| {
                    if x > T::zero() {
                        1
                    } else if x < T::zero() {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        out
    }

    /// Reverse-mode sweep from a `1 x 1` loss. Parameters that the loss does
    /// not depend on get zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::zeros_like(store);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Some(id) = node.param {
                let slot = out
                    .grads
                    .get_mut(id.index())
                    .ok_or_else(|| Error::Contract("parameter outside the store".into()))?;
                slot.add_assign(&g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads)?;
        }
        Ok(out)
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut send = |v: Var, contribution: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, g.matmul_nt(self.value(*b))?);
                send(*b, self.value(*a).matmul_tn(&g)?);
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                send(*a, g.matmul(self.value(*b))?);
                send(*b, g.matmul_tn(self.value(*a))?);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|x| -x));
                send(*a, g);
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                send(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                let mut acc = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, &v) in acc.row_mut(0).iter_mut().zip(g.row(r)) {
                        *s = *s + v;
                    }
                }
                send(*row, acc);
                send(*a, g);
            }
            Op::RepeatRows(a) => {
                let mut acc = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, &v) in acc.row_mut(0).iter_mut().zip(g.row(r)) {
                        *s = *s + v;
                    }
                }
                send(*a, acc);
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                send(*a, g.map(|x| x * f));
            }
            Op::OneMinus(a) => send(*a, g.map(|x| -x)),
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |gv, y| gv * y * (T::one() - y))),
            Op::Tanh(a) => send(*a, g.zip_map(out, |gv, y| gv * (T::one() - y * y))),
            Op::Prelu(a, slope) => {
                let s = self.value(*slope).item();
                let x = self.value(*a);
                let mut ds = T::zero();
                let dx = g.zip_map(x, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        gv * s
                    }
                });
                for (&gv, &xv) in g.data().iter().zip(x.data()) {
                    if xv <= T::zero() {
                        ds = ds + gv * xv;
                    }
                }
                send(*a, dx);
                send(*slope, Tensor::scalar(ds));
            }
            Op::SoftmaxRows(a) => {
                let mut dx = g.clone();
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let dot = g
                        .row(r)
                        .iter()
                        .zip(y)
                        .fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row(r)[start..start + cols]);
                    }
                    send(p, Tensor::from_vec(rows, cols, data)?);
                    start += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*a, dx);
            }
            Op::SelectRow(a, row) => {
                let (rows, cols) = self.shape(*a);
                let mut dx = Tensor::zeros(rows, cols);
                dx.row_mut(*row).copy_from_slice(g.row(0));
                send(*a, dx);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    send(p, g.clone());
                }
            }
            Op::CrossEntropy {
                logits,
                truth,
                probs,
            } => {
                let upstream = g.item();
                let mut dx = probs.clone();
                dx[*truth] = dx[*truth] - T::one();
                let dx = dx.into_iter().map(|v| v * upstream).collect();
                send(*logits, Tensor::from_vec(1, probs.len(), dx)?);
            }
        }
        Ok(())
    }
}
