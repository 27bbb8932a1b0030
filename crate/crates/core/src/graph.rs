// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every op appends a node holding its forward value. Nodes only ever refer
//! to earlier nodes, so the tape order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Ops work on matrices (rank-1 tensors are treated as one row). Each op
//! validates shapes before computing and rejects non-finite results, so a
//! completed op never stores NaN or infinity.

use std::sync::Arc;

use crate::error::{BridgeError, Result};
use crate::tensor::{Element, Tensor};

/// Fill value for masked attention scores. Finite, but `exp` of it underflows to 0.
pub const MASK_FILL: f64 = -1.0e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sqrt(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    L2Normalize(Var),
    Mask(Var, Arc<[bool]>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    CrossEntropy(Var, Arc<[usize]>),
    Argmax(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(..) => "gelu",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Mask(..) => "mask",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Argmax(..) => "argmax",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Gelu(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a, _)
            | Op::L2Normalize(a)
            | Op::Mask(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::MeanRows(a)
            | Op::CrossEntropy(a, _)
            | Op::Argmax(a) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Build the forward computation through its methods, then
/// call [`Graph::backward`] on a scalar node.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the root with respect to `v`, if `v` lies on a path to the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + three * k * x * x);
    (y, dy)
}

fn row_mean_var<T: Element>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that gradients flow into (inputs, parameters).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant by [`Graph::backward`].
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(BridgeError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| BridgeError::shape(op, "operand rank > 2"))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(BridgeError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    fn row_broadcast(
        &self,
        a: Var,
        r: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (m, n) = self.dims(a, op)?;
        let row = self.value(r);
        if row.len() != n || row.rows() != 1 {
            return Err(BridgeError::shape(
                op,
                format!("{m}x{n} with row of shape {:?}", row.shape()),
            ));
        }
        let ta = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(
                ta.row_slice(i)
                    .iter()
                    .zip(row.data())
                    .map(|(&x, &y)| f(x, y)),
            );
        }
        Tensor::new(ta.shape().to_vec(), out)
    }

    /// `a + r` with the row vector `r` added to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast(a, r, "add_row", |x, y| x + y)?;
        self.push(out, Op::AddRow(a, r))
    }

    /// `a ⊙ r` with the row vector `r` multiplied into every row of `a`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast(a, r, "mul_row", |x, y| x * y)?;
        self.push(out, Op::MulRow(a, r))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.dims(a, "matmul")?;
        self.dims(b, "matmul")?;
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims(a, "transpose")?;
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::from_f64(c);
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::from_f64(c);
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(BridgeError::Input("sqrt of a non-positive value".into()));
        }
        let out = self.value(a).map(T::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims(a, "softmax")?;
        let mut out = self.value(a).clone();
        for i in 0..m {
            let row = out.row_slice_mut(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Per-row normalisation to zero mean and unit (population) variance; no affine.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, _) = self.dims(a, "layer_norm")?;
        let e = T::from_f64(eps);
        let mut out = self.value(a).clone();
        for i in 0..m {
            let row = out.row_slice_mut(i);
            let (mean, var) = row_mean_var(row);
            let inv = T::one() / (var + e).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(out, Op::LayerNorm(a, eps))
    }

    /// Scales each row to unit Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims(a, "l2_normalize")?;
        let mut out = self.value(a).clone();
        for i in 0..m {
            let row = out.row_slice_mut(i);
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(BridgeError::ZeroNorm {
                    context: format!("in l2_normalize row {i}"),
                });
            }
            for x in row.iter_mut() {
                *x = *x / norm;
            }
        }
        self.push(out, Op::L2Normalize(a))
    }

    /// Replaces entries where `keep` is false with [`MASK_FILL`].
    pub fn mask(&mut self, a: Var, keep: Arc<[bool]>) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(BridgeError::shape(
                "mask",
                format!("mask of {} for {} values", keep.len(), self.value(a).len()),
            ));
        }
        let fill = T::from_f64(MASK_FILL);
        let mut out = self.value(a).clone();
        for (x, &k) in out.data_mut().iter_mut().zip(keep.iter()) {
            if !k {
                *x = fill;
            }
        }
        self.push(out, Op::Mask(a, keep))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a, "slice_cols")?;
        if start + len > n {
            return Err(BridgeError::shape(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let ta = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&ta.row_slice(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], out)?;
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| BridgeError::shape("concat_cols", "no operands"))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != m {
                return Err(BridgeError::shape(
                    "concat_cols",
                    format!("row counts {m} and {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::new(vec![m, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(out, Op::Reshape(a))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(BridgeError::shape(
                "gather",
                format!("index {bad} out of {rows} rows"),
            ));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(vec![ids.len(), n], out)?;
        self.push(out, Op::Gather(table, ids.into()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(BridgeError::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / T::from_f64(t.len() as f64));
        self.push(out, Op::MeanAll(a))
    }

    /// Column means: `m × n -> 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "mean_rows")?;
        if m == 0 {
            return Err(BridgeError::shape("mean_rows", "no rows"));
        }
        let t = self.value(a);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(t.row_slice(i)) {
                *o += x;
            }
        }
        let inv = T::one() / T::from_f64(m as f64);
        out.iter_mut().for_each(|x| *x *= inv);
        self.push(Tensor::row(out), Op::MeanRows(a))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = self.dims(logits, "cross_entropy")?;
        if targets.len() != m || m == 0 {
            return Err(BridgeError::shape(
                "cross_entropy",
                format!("{m} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(BridgeError::shape(
                "cross_entropy",
                format!("target {bad} out of {c} classes"),
            ));
        }
        let t = self.value(logits);
        let mut total = T::zero();
        for (i, &target) in targets.iter().enumerate() {
            let row = t.row_slice(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[target];
        }
        let out = Tensor::scalar(total / T::from_f64(m as f64));
        self.push(out, Op::CrossEntropy(logits, targets.into()))
    }

    /// Index of each row's maximum (first on ties), as an `m × 1` column. Not differentiable.
    pub fn argmax(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims(a, "argmax")?;
        let t = self.value(a);
        let out: Vec<T> = (0..m)
            .map(|i| T::from_f64(argmax(t.row_slice(i)) as f64))
            .collect();
        let out = Tensor::new(vec![m, 1], out)?;
        self.push(out, Op::Argmax(a))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(BridgeError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = zip(g, self.value(*b), |x, y| x * y);
                    Self::accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = zip(g, self.value(*a), |x, y| x * y);
                    Self::accumulate(grads, *b, d);
                }
            }
            Op::AddRow(a, r) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*r) {
                    let d = column_sums(g, |x, _| x, None);
                    let d = d.reshaped(self.value(*r).shape().to_vec())?;
                    Self::accumulate(grads, *r, d);
                }
            }
            Op::MulRow(a, r) => {
                let row = self.value(*r);
                if self.wants(*a) {
                    let (m, _) = g.dims2().expect("matrix");
                    let mut d = g.clone();
                    for i in 0..m {
                        for (x, &y) in d.row_slice_mut(i).iter_mut().zip(row.data()) {
                            *x *= y;
                        }
                    }
                    Self::accumulate(grads, *a, d);
                }
                if self.wants(*r) {
                    let d = column_sums(g, |x, y| x * y, Some(self.value(*a)));
                    let d = d.reshaped(row.shape().to_vec())?;
                    Self::accumulate(grads, *r, d);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("matrix");
                let (_, n) = tb.dims2().expect("matrix");
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), (n, 1), tb.data(), (1, n), &mut d);
                    Self::accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, ta.data(), (1, k), g.data(), (n, 1), &mut d);
                    Self::accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d)?);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let d = g.transpose().reshaped(self.value(*a).shape().to_vec())?;
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let k = T::from_f64(*c);
                    Self::accumulate(grads, *a, g.map(|x| x * k));
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if self.wants(*a) {
                    let d = g.clone().reshaped(self.value(*a).shape().to_vec())?;
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let d = zip(g, self.value(*a), |gx, x| gx * gelu_parts(x).1);
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Sqrt(a) => {
                if self.wants(*a) {
                    let two = T::from_f64(2.0);
                    let d = zip(g, &node.value, |gx, y| gx / (two * y));
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    let two = T::from_f64(2.0);
                    let d = zip(g, self.value(*a), |gx, x| two * x * gx);
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let mut d = g.clone();
                    for i in 0..y.rows() {
                        let yr = y.row_slice(i);
                        let dot: T = g.row_slice(i).iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for (x, &yv) in d.row_slice_mut(i).iter_mut().zip(yr) {
                            *x = yv * (*x - dot);
                        }
                    }
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::LayerNorm(a, eps) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let e = T::from_f64(*eps);
                    let n = T::from_f64(x.cols() as f64);
                    let mut d = g.clone();
                    for i in 0..x.rows() {
                        let xr = x.row_slice(i);
                        let (mean, var) = row_mean_var(xr);
                        let inv = T::one() / (var + e).sqrt();
                        let gr = g.row_slice(i);
                        let g_mean = gr.iter().copied().sum::<T>() / n;
                        let gx_mean = gr
                            .iter()
                            .zip(xr)
                            .map(|(&gv, &xv)| gv * (xv - mean) * inv)
                            .sum::<T>()
                            / n;
                        for ((dv, &gv), &xv) in d.row_slice_mut(i).iter_mut().zip(gr).zip(xr) {
                            let xhat = (xv - mean) * inv;
                            *dv = inv * (gv - g_mean - xhat * gx_mean);
                        }
                    }
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::L2Normalize(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = g.clone();
                    for i in 0..x.rows() {
                        let norm = x.row_slice(i).iter().map(|&v| v * v).sum::<T>().sqrt();
                        let yr = y.row_slice(i);
                        let dot: T = g.row_slice(i).iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for (dv, &yv) in d.row_slice_mut(i).iter_mut().zip(yr) {
                            *dv = (*dv - yv * dot) / norm;
                        }
                    }
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Mask(a, keep) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    for (x, &k) in d.data_mut().iter_mut().zip(keep.iter()) {
                        if !k {
                            *x = T::zero();
                        }
                    }
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let mut d = Tensor::zeros(src.shape());
                    let len = g.cols();
                    for i in 0..g.rows() {
                        d.row_slice_mut(i)[*start..*start + len].copy_from_slice(g.row_slice(i));
                    }
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(g.rows() * width);
                        for i in 0..g.rows() {
                            d.extend_from_slice(&g.row_slice(i)[offset..offset + width]);
                        }
                        let d = Tensor::new(self.value(p).shape().to_vec(), d)?;
                        Self::accumulate(grads, p, d);
                    }
                    offset += width;
                }
            }
            Op::Gather(table, ids) => {
                if self.wants(*table) {
                    let mut d = Tensor::zeros(self.value(*table).shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, &gv) in d.row_slice_mut(id).iter_mut().zip(g.row_slice(r)) {
                            *x += gv;
                        }
                    }
                    Self::accumulate(grads, *table, d);
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    let d = Tensor::full(self.value(*a).shape(), g.data()[0]);
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::MeanAll(a) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let v = g.data()[0] / T::from_f64(src.len() as f64);
                    Self::accumulate(grads, *a, Tensor::full(src.shape(), v));
                }
            }
            Op::MeanRows(a) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let inv = T::one() / T::from_f64(src.rows() as f64);
                    let mut d = Tensor::zeros(src.shape());
                    for i in 0..src.rows() {
                        for (x, &gv) in d.row_slice_mut(i).iter_mut().zip(g.data()) {
                            *x = gv * inv;
                        }
                    }
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::CrossEntropy(a, targets) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let scale = g.data()[0] / T::from_f64(x.rows() as f64);
                    let mut d = x.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = d.row_slice_mut(i);
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut total = T::zero();
                        for v in row.iter_mut() {
                            *v = (*v - max).exp();
                            total += *v;
                        }
                        for v in row.iter_mut() {
                            *v = *v / total * scale;
                        }
                        row[t] -= scale;
                    }
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Argmax(_) => return Err(BridgeError::NoGradient { op: "argmax" }),
        }
        Ok(())
    }
}

fn zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Column sums of `f(g, other)`; `other` defaults to `g` itself.
fn column_sums<T: Element>(
    g: &Tensor<T>,
    f: impl Fn(T, T) -> T,
    other: Option<&Tensor<T>>,
) -> Tensor<T> {
    let (m, n) = g.dims2().expect("matrix");
    let other = other.unwrap_or(g);
    let mut out = vec![T::zero(); n];
    for i in 0..m {
        for ((o, &x), &y) in out.iter_mut().zip(g.row_slice(i)).zip(other.row_slice(i)) {
            *o += f(x, y);
        }
    }
    Tensor::row(out)
}

/// Index of the largest value, first index on ties.
pub fn argmax<T: Element>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 3], &[1., -2., 3., 0.5, 7., -1.]));
        let y = g.sum(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mse_of_identical_inputs_is_zero_with_zero_grad() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 4.0]).unwrap());
        let d = g.sub(x, x).unwrap();
        let sq = g.square(d).unwrap();
        let loss = g.mean(sq).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        let y = g.square(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(BridgeError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        assert!(matches!(err, BridgeError::Shape { op: "add", .. }));
        let err = g.matmul(a, a).unwrap_err();
        assert!(matches!(err, BridgeError::Shape { op: "matmul", .. }));
    }

    #[test]
    fn argmax_has_no_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 3], vec![0.1, 0.9, 0.2]).unwrap());
        let a = g.argmax(x).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
        let s = g.sum(a).unwrap();
        assert!(matches!(
            g.backward(s),
            Err(BridgeError::NoGradient { op: "argmax" })
        ));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![2, 3], vec![1., 2., 3., -50., 0., 50.]).unwrap());
        let y = g.softmax(x).unwrap();
        for i in 0..2 {
            let row = g.value(y).row_slice(i);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_entries_get_zero_probability() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 3], vec![5., 1., 9.]).unwrap());
        let m = g.mask(x, vec![true, true, false].into()).unwrap();
        let y = g.softmax(m).unwrap();
        assert_eq!(g.value(y).data()[2], 0.0);
    }

    #[test]
    fn non_finite_result_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 1], vec![1.0e30]).unwrap());
        assert!(matches!(
            g.square(x),
            Err(BridgeError::NonFinite { op: "square" })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[1, 2], &[1., 2.]));
        let x = g.input(t(&[1, 2], &[3., 4.]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1., 2.]);
    }
}
