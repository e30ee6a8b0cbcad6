//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations append nodes to a [`Tape`] in execution order, so every node's
//! inputs precede it. A node records its backward rule only when one of its
//! inputs requires a gradient; everything else is stored as a constant.
//! [`Tape::backward`] walks the tape once in reverse and consumes it.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation kinds reachable through [`Tape::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Concat,
    Tanh,
    Sigmoid,
    Softmax,
    Log,
    Mean,
    MaxPoolOverAxis,
    L2Normalize,
    Slice { start: usize, end: usize },
}

#[derive(Debug)]
enum Op {
    Const,
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Slice(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MaxPool(Var, Vec<usize>),
    L2Normalize(Var, Vec<f64>),
    Dot(Var, Var),
    Gather(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    inference: bool,
    param_vars: HashMap<ParamId, Var>,
    param_leaves: Vec<(Var, ParamId)>,
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters enter as constants and nothing records a
    /// backward rule.
    pub fn inference() -> Self {
        Tape {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.param_leaves.iter().copied()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let op = if requires_grad { Op::Leaf } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding the current value of a stored parameter. Repeated calls
    /// return the same node. Frozen parameters and inference tapes produce
    /// constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = !self.inference && !store.is_param_frozen(id);
        let v = self.leaf(store.value(id).clone(), trainable);
        self.param_vars.insert(id, v);
        if trainable {
            self.param_leaves.push((v, id));
        }
        v
    }

    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize, name: &'static str| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::shape(name, format!("expected {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => {
                arity(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2, "mul")?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Tanh => {
                arity(1, "tanh")?;
                Ok(self.tanh(inputs[0]))
            }
            OpKind::Sigmoid => {
                arity(1, "sigmoid")?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Softmax => {
                arity(1, "softmax")?;
                Ok(self.softmax(inputs[0]))
            }
            OpKind::Log => {
                arity(1, "log")?;
                self.log(inputs[0])
            }
            OpKind::Mean => {
                arity(1, "mean")?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::MaxPoolOverAxis => {
                arity(1, "max_pool_over_axis")?;
                self.max_pool(inputs[0])
            }
            OpKind::L2Normalize => {
                arity(1, "l2_normalize")?;
                self.l2_normalize(inputs[0])
            }
            OpKind::Slice { start, end } => {
                arity(1, "slice")?;
                self.slice(inputs[0], start, end)
            }
        }
    }

    /// `[k] x [k, n] -> [n]` or `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.shape().is_empty() || ta.shape().len() > 2 {
            return Err(Error::shape(
                "matmul",
                format!("unsupported operand ranks {} x {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let (k, n) = (tb.shape()[0], tb.shape()[1]);
        if ta.cols() != k {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {} x {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let m = ta.rows();
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let shape = if ta.shape().len() == 1 { vec![n] } else { vec![m, n] };
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected 2-d, got {}", shape_str(ta)),
            ));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a]))
    }

    /// Elementwise sum of equal shapes, or `[m, n] + [n]` bias broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let shape = ta.shape().to_vec();
            return Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]));
        }
        if ta.shape().len() == 2 && tb.shape().len() == 1 && ta.shape()[1] == tb.shape()[0] {
            let n = tb.len();
            let out: Vec<f64> = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % n])
                .collect();
            let shape = ta.shape().to_vec();
            return Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(a, b), &[a, b]));
        }
        Err(Error::shape(
            "add",
            format!("cannot add {} and {}", shape_str(ta), shape_str(tb)),
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                format!("operands differ: {} vs {}", shape_str(ta), shape_str(tb)),
            ));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), op, &[a])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        Ok(self.map(a, f64::ln, Op::Log(a)))
    }

    /// Concatenation of 1-d tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(Error::shape("concat", format!("expected 1-d, got {}", shape_str(t))));
            }
            out.extend_from_slice(t.data());
        }
        let n = out.len();
        Ok(self.push(Tensor::new(vec![n], out)?, Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks equal-length 1-d tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", "no inputs"));
        }
        let width = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.shape() != [width] {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row shape {} differs from [{width}]", shape_str(t)),
                ));
            }
            out.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), width], out)?,
            Op::StackRows(rows.to_vec()),
            rows,
        ))
    }

    /// `a[start..end]` of a 1-d tensor.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 1 || start >= end || end > t.len() {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} invalid for {}", shape_str(t)),
            ));
        }
        let out = t.data()[start..end].to_vec();
        Ok(self.push(Tensor::new(vec![end - start], out)?, Op::Slice(a, start), &[a]))
    }

    /// Row `i` of a matrix as a 1-d tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || i >= t.shape()[0] {
            return Err(Error::shape("row", format!("row {i} invalid for {}", shape_str(t))));
        }
        let n = t.shape()[1];
        let out = t.row(i).to_vec();
        Ok(self.push(Tensor::new(vec![n], out)?, Op::Slice(a, i * n), &[a]))
    }

    fn rowwise(&self, a: Var) -> (usize, usize) {
        let t = self.value(a);
        (t.rows(), t.cols())
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.rowwise(a);
        let t = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|x| *x /= z);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("shape"), Op::Softmax(a), &[a])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.rowwise(a);
        let t = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("shape"), Op::LogSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Max over the first axis: `[frames, d] -> [d]`.
    pub fn max_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::shape(
                "max_pool_over_axis",
                format!("expected [frames, d], got {}", shape_str(t)),
            ));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut arg = vec![0usize; n];
        let mut out = t.row(0).to_vec();
        for i in 1..m {
            for j in 0..n {
                let x = t.data()[i * n + j];
                if x > out[j] {
                    out[j] = x;
                    arg[j] = i;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n], out)?, Op::MaxPool(a, arg), &[a]))
    }

    /// Divides each row (or the whole vector) by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rowwise(a);
        let t = self.value(a);
        if t.shape().is_empty() {
            return Err(Error::shape("l2_normalize", "scalar input"));
        }
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = t.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::NonFinite("l2_normalize of a zero or non-finite row".into()));
            }
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize(a, norms), &[a]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Cosine similarity of two 1-d tensors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        self.dot(na, nb)
    }

    /// Rows of a `[vocab, d]` table: `ids.len() x d`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 || ids.is_empty() {
            return Err(Error::shape("gather_rows", format!("table {}", shape_str(t))));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("gather_rows", format!("row {id} out of range {v}")));
            }
            out.extend_from_slice(t.row(id));
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather(table, ids.to_vec()),
            &[table],
        ))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.rowwise(a);
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::shape(
                "pick_per_row",
                format!("{} indices for {m} rows of width {n}", idx.len()),
            ));
        }
        let t = self.value(a);
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| t.data()[i * n + j]).collect();
        Ok(self.push(Tensor::vector(out), Op::PickPerRow(a, idx.to_vec()), &[a]))
    }

    /// Single element by flat index, as a scalar.
    pub fn element(&mut self, a: Var, flat: usize) -> Result<Var> {
        let t = self.value(a);
        if flat >= t.len() {
            return Err(Error::shape("element", format!("index {flat} of {}", shape_str(t))));
        }
        let x = t.data()[flat];
        let v = self.push(Tensor::vector(vec![x]), Op::Slice(a, flat), &[a]);
        // reshape the 1-element slice to a scalar without a new rule
        self.nodes[v.0].value = Tensor::scalar(x);
        Ok(v)
    }

    /// Sum of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let mut acc = *iter.next().ok_or_else(|| Error::shape("add_all", "no terms"))?;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a one-element `loss`. A tape supports one backward
    /// pass; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let node = &nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Const | Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), tb.shape()[0], tb.shape()[1]);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[r * k + p] += dot_lanes(grow, brow);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = ta.data()[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddBias(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let n = nodes[b.0].value.len();
                acc(*b, &mut |gb| {
                    for (j, x) in g.iter().enumerate() {
                        gb[j % n] += x;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x)),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    acc(*p, &mut |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::StackRows(rows) => {
                let n = node.value.cols();
                for (r, p) in rows.iter().enumerate() {
                    acc(*p, &mut |gp| add_into(gp, &g[r * n..(r + 1) * n]));
                }
            }
            Op::Slice(a, start) => {
                let s = *start;
                acc(*a, &mut |ga| add_into(&mut ga[s..s + g.len()], g));
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] / x[j];
                    }
                });
            }
            Op::Softmax(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dotp: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[r * n + j] += y[j] * (gr[j] - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let gs: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] += gr[j] - out[r * n + j].exp() * gs;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::MaxPool(a, arg) => {
                let n = node.value.len();
                acc(*a, &mut |ga| {
                    for j in 0..n {
                        ga[arg[j] * n + j] += g[j];
                    }
                });
            }
            Op::L2Normalize(a, norms) => {
                let n = node.value.cols();
                acc(*a, &mut |ga| {
                    for (r, norm) in norms.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let yg: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[r * n + j] += (gr[j] - y[j] * yg) / norm;
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| ga.iter_mut().zip(vb).for_each(|(o, y)| *o += g[0] * y));
                acc(*b, &mut |gb| gb.iter_mut().zip(va).for_each(|(o, x)| *o += g[0] * x));
            }
            Op::Gather(table, ids) => {
                let d = node.value.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::PickPerRow(a, idx) => {
                let n = nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * n + j] += g[r];
                    }
                });
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(tape: &mut Tape, loss: Var, x: Var) -> Vec<f64> {
        let g = tape.backward(loss).unwrap();
        g.get(x).unwrap().to_vec()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn max_pool_takes_per_column_max() {
        let mut t = Tape::new();
        let frames = t.constant(Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let pooled = t.forward_op(OpKind::MaxPoolOverAxis, &[frames]).unwrap();
        assert_eq!(t.value(pooled).data(), &[3.0, 5.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.3, -1.2, 7.0]));
        let eye = t.constant(Tensor::identity(3));
        let y = t.forward_op(OpKind::MatMul, &[x, eye]).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::zeros(&[3, 3]));
        let err = t.forward_op(OpKind::MatMul, &[a, b]).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        let err = t.forward_op(OpKind::Add, &[a, b]).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]), true);
        let s = t.sum(x);
        assert_eq!(grad_of(&mut t, s, x), vec![1.0; 4]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        assert_eq!(grad_of(&mut t, s, x), vec![4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![2.0]), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = t.tanh(x);
        assert!(matches!(t.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_record_no_rule() {
        let mut t = Tape::inference();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = t.tanh(x);
        assert!(!t.requires_grad(y));
    }

    #[test]
    fn element_is_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let e = t.element(x, 2).unwrap();
        assert!(t.value(e).shape().is_empty());
        assert_eq!(grad_of(&mut t, e, x), vec![0.0, 0.0, 1.0]);
    }
}
