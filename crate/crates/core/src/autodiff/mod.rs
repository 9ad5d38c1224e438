//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are append-only, so parents always have lower indices than their
//! children and a single reverse sweep over the node list is a valid
//! topological order for backpropagation.
//!
//! ```
//! use cfn_core::autodiff::Graph;
//! use cfn_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let w = g.leaf(Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap());
//! let b = g.leaf(Tensor::vector(vec![1.0, 1.0]));
//! let y = g.affine(x, w, b).unwrap();
//! assert_eq!(g.value(y).data(), &[4.0, 4.0]);
//! ```

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Powf(NodeId, f64),
    Softmax(NodeId),
    RowMax { p: NodeId, argmax: Vec<usize> },
    Stack(Vec<NodeId>),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ScaleBy { x: NodeId, s: NodeId },
    MulRowBroadcast { m: NodeId, v: NodeId },
    MeanRows(NodeId),
    Sum(NodeId),
    LogSumExp(NodeId),
    Pick { x: NodeId, index: usize },
    SquaredDistance(NodeId, NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Powf(..) => "powf",
            Op::Softmax(_) => "softmax",
            Op::RowMax { .. } => "row_max",
            Op::Stack(_) => "stack",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ScaleBy { .. } => "scale_by",
            Op::MulRowBroadcast { .. } => "mul_row_broadcast",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::Pick { .. } => "pick",
            Op::SquaredDistance(..) => "squared_distance",
            Op::Clamp { .. } => "clamp",
        }
    }
}

/// A computation graph built by running the forward pass.
///
/// Node `i` is stored as `values[i]`, `grads[i]` (same length, zero until a
/// backward pass) and `ops[i]`, the rule that produced it from its parents.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.grads.push(vec![0.0; value.len()]);
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    /// Drops every node from index `len` on. Handles to dropped nodes become
    /// invalid; earlier nodes are untouched.
    pub fn truncate(&mut self, len: usize) {
        self.values.truncate(len);
        self.grads.truncate(len);
        self.ops.truncate(len);
    }

    /// Adds an input or parameter node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Accumulated gradient of the last backward pass, shaped like the value.
    pub fn grad(&self, id: NodeId) -> Tensor {
        Tensor::new(self.values[id.0].shape().to_vec(), self.grads[id.0].clone())
            .expect("gradient shape always matches value shape")
    }

    pub fn grad_data(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.ops[id.0].name()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id.0].shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.values[id.0].data()
    }

    fn require_vector(&self, op: &'static str, id: NodeId) -> Result<usize> {
        let shape = self.shape(id);
        if shape.len() == 1 {
            Ok(shape[0])
        } else {
            Err(Error::dim(op, shape, &[self.data(id).len()]))
        }
    }

    fn require_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(Error::dim(op, self.shape(a), self.shape(b)))
        }
    }

    /// `xᵀW + b` for a vector `x[m]`, matrix `W[m×k]` and vector `b[k]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.affine_impl(x, w, Some(b))
    }

    /// `xᵀW` without a bias term.
    pub fn vecmat(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.affine_impl(x, w, None)
    }

    fn affine_impl(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let m = self.require_vector("affine", x)?;
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != m {
            return Err(Error::dim("affine", self.shape(x), ws));
        }
        let k = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(Error::dim("affine", ws, self.shape(b)));
            }
        }
        let mut out = match b {
            Some(b) => self.data(b).to_vec(),
            None => vec![0.0; k],
        };
        let xd = self.data(x);
        let wd = self.data(w);
        for (r, &xr) in xd.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let row = &wd[r * k..(r + 1) * k];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xr * wv;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::Affine { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, |v| v.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// Logistic map `1 / (1 + e^{-x})`.
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, f64::exp);
        self.push(v, Op::Exp(x))
    }

    /// Elementwise `x^p`.
    pub fn powf(&mut self, x: NodeId, p: f64) -> NodeId {
        let v = self.map(x, |v| v.powf(p));
        self.push(v, Op::Powf(x, p))
    }

    /// Softmax of a vector, max-shifted for stability.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let k = self.require_vector("softmax", x)?;
        if k == 0 {
            return Err(Error::Input("softmax of an empty vector".into()));
        }
        let out = softmax_values(self.data(x));
        Ok(self.push(Tensor::vector(out), Op::Softmax(x)))
    }

    /// Columnwise maximum of a matrix `P[r×c]`, giving a vector of length `c`.
    ///
    /// The backward pass sends each column's gradient to the lowest-index row
    /// attaining the maximum.
    pub fn row_max(&mut self, p: NodeId) -> Result<NodeId> {
        let shape = self.shape(p).to_vec();
        let (rows, cols) = match shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => return Err(Error::dim("row_max", &shape, &[])),
        };
        if rows == 0 {
            return Err(Error::Input("row_max over zero rows".into()));
        }
        let d = self.data(p);
        let mut argmax = vec![0usize; cols];
        let mut out = d[..cols].to_vec();
        for r in 1..rows {
            for c in 0..cols {
                let v = d[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::RowMax { p, argmax }))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::Input("stack of zero rows".into()))?;
        let c = self.require_vector("stack", first)?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if self.shape(r) != [c] {
                return Err(Error::dim("stack", &[c], self.shape(r)));
            }
            data.extend_from_slice(self.data(r));
        }
        let value = Tensor::matrix(rows.len(), c, data)?;
        Ok(self.push(value, Op::Stack(rows.to_vec())))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            self.require_vector("concat", p)?;
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Elements `start..end` of a vector.
    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let n = self.require_vector("slice", x)?;
        if start > end || end > n {
            return Err(Error::dim("slice", &[n], &[start, end]));
        }
        let v = self.data(x)[start..end].to_vec();
        Ok(self.push(Tensor::vector(v), Op::Slice { x, start }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.map(x, |v| v * c);
        self.push(v, Op::Scale(x, c))
    }

    /// Addition of a constant to every element.
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.map(x, |v| v + c);
        self.push(v, Op::AddScalar(x))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Multiplication of every element by a one-element node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.data(s).len() != 1 {
            return Err(Error::dim("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s)[0];
        let v = self.map(x, |v| v * sv);
        Ok(self.push(v, Op::ScaleBy { x, s }))
    }

    /// `out[j,i] = m[j,i] * v[i]`: a row vector broadcast over matrix rows.
    pub fn mul_row_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let ms = self.shape(m).to_vec();
        let c = self.require_vector("mul_row_broadcast", v)?;
        if ms.len() != 2 || ms[1] != c {
            return Err(Error::dim("mul_row_broadcast", &ms, &[c]));
        }
        let vd = self.data(v);
        let out: Vec<f64> = self
            .data(m)
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * vd[idx % c])
            .collect();
        let value = Tensor::new(ms, out)?;
        Ok(self.push(value, Op::MulRowBroadcast { m, v }))
    }

    /// Columnwise mean of a matrix.
    pub fn mean_rows(&mut self, m: NodeId) -> Result<NodeId> {
        let ms = self.shape(m).to_vec();
        if ms.len() != 2 || ms[0] == 0 {
            return Err(Error::dim("mean_rows", &ms, &[]));
        }
        let (r, c) = (ms[0], ms[1]);
        let d = self.data(m);
        let out: Vec<f64> = (0..c)
            .map(|i| (0..r).map(|j| d[j * c + i]).sum::<f64>() / r as f64)
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MeanRows(m)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `log Σ exp(x)` with max-shift stabilization.
    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId> {
        let k = self.require_vector("log_sum_exp", x)?;
        if k == 0 {
            return Err(Error::Input("log_sum_exp of an empty vector".into()));
        }
        let v = log_sum_exp_values(self.data(x));
        Ok(self.push(Tensor::scalar(v), Op::LogSumExp(x)))
    }

    /// The single element `x[index]` as a scalar node.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let n = self.data(x).len();
        if index >= n {
            return Err(Error::Input(format!(
                "index {index} out of range for length {n}"
            )));
        }
        let v = self.data(x)[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }))
    }

    /// `Σ (a - b)²` as a scalar node.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same("squared_distance", a, b)?;
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::SquaredDistance(a, b)))
    }

    /// Elementwise clamp into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.map(x, |v| v.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi })
    }

    fn map(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.values[x.0];
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("map preserves shape")
    }

    fn zip(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.require_same(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op))
    }

    /// Resets every gradient to zero.
    pub fn zero_grad(&mut self) {
        for grad in &mut self.grads {
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Backpropagates from a scalar output, accumulating into every node's
    /// gradient. Gradients from earlier calls are cleared first.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if self.values[output.0].len() != 1 {
            return Err(Error::dim("backward", self.values[output.0].shape(), &[1]));
        }
        self.zero_grad();
        self.grads[output.0][0] = 1.0;
        for i in (0..=output.0).rev() {
            let (before, rest) = self.grads.split_at_mut(i);
            let g = &rest[0];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            propagate(&self.ops[i], &self.values, i, g, before);
        }
        Ok(())
    }
}

/// Pushes the gradient `g` of node `i` into the gradients of its parents,
/// all of which live in `grads` (indices below `i`).
fn propagate(op: &Op, values: &[Tensor], i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
    let out = values[i].data();
    let val = |id: &NodeId| values[id.0].data();
    match op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let k = g.len();
            let xd = val(x);
            let wd = val(w);
            for (r, gxr) in grads[x.0].iter_mut().enumerate() {
                let row = &wd[r * k..(r + 1) * k];
                *gxr += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            }
            let gw = &mut grads[w.0];
            for (r, &xr) in xd.iter().enumerate() {
                if xr == 0.0 {
                    continue;
                }
                for (gwv, &gk) in gw[r * k..(r + 1) * k].iter_mut().zip(g) {
                    *gwv += xr * gk;
                }
            }
            if let Some(b) = b {
                accumulate(&mut grads[b.0], g);
            }
        }
        Op::Relu(x) => {
            for ((gx, &xv), &gv) in grads[x.0].iter_mut().zip(val(x)).zip(g) {
                if xv > 0.0 {
                    *gx += gv;
                }
            }
        }
        Op::Sigmoid(x) => {
            for ((gx, &y), &gv) in grads[x.0].iter_mut().zip(out).zip(g) {
                *gx += gv * y * (1.0 - y);
            }
        }
        Op::Exp(x) => {
            for ((gx, &y), &gv) in grads[x.0].iter_mut().zip(out).zip(g) {
                *gx += gv * y;
            }
        }
        Op::Powf(x, p) => {
            for ((gx, &xv), &gv) in grads[x.0].iter_mut().zip(val(x)).zip(g) {
                *gx += gv * p * xv.powf(p - 1.0);
            }
        }
        Op::Softmax(x) => {
            let dot: f64 = out.iter().zip(g).map(|(y, gv)| y * gv).sum();
            for ((gx, &y), &gv) in grads[x.0].iter_mut().zip(out).zip(g) {
                *gx += y * (gv - dot);
            }
        }
        Op::RowMax { p, argmax } => {
            let cols = argmax.len();
            let gp = &mut grads[p.0];
            for (c, &r) in argmax.iter().enumerate() {
                gp[r * cols + c] += g[c];
            }
        }
        Op::Stack(rows) => {
            let c = out.len() / rows.len();
            for (j, r) in rows.iter().enumerate() {
                accumulate(&mut grads[r.0], &g[j * c..(j + 1) * c]);
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = grads[p.0].len();
                accumulate(&mut grads[p.0], &g[offset..offset + n]);
                offset += n;
            }
        }
        Op::Slice { x, start } => {
            accumulate(&mut grads[x.0][*start..*start + g.len()], g);
        }
        Op::Add(a, b) => {
            accumulate(&mut grads[a.0], g);
            accumulate(&mut grads[b.0], g);
        }
        Op::Sub(a, b) => {
            accumulate(&mut grads[a.0], g);
            for (gb, &gv) in grads[b.0].iter_mut().zip(g) {
                *gb -= gv;
            }
        }
        Op::Mul(a, b) => {
            for ((ga, &bv), &gv) in grads[a.0].iter_mut().zip(val(b)).zip(g) {
                *ga += gv * bv;
            }
            for ((gb, &av), &gv) in grads[b.0].iter_mut().zip(val(a)).zip(g) {
                *gb += gv * av;
            }
        }
        Op::Scale(x, c) => {
            for (gx, &gv) in grads[x.0].iter_mut().zip(g) {
                *gx += gv * c;
            }
        }
        Op::AddScalar(x) => accumulate(&mut grads[x.0], g),
        Op::ScaleBy { x, s } => {
            let sv = val(s)[0];
            for (gx, &gv) in grads[x.0].iter_mut().zip(g) {
                *gx += gv * sv;
            }
            grads[s.0][0] += val(x).iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
        }
        Op::MulRowBroadcast { m, v } => {
            let vd = val(v);
            let c = vd.len();
            for (idx, (gm, &gv)) in grads[m.0].iter_mut().zip(g).enumerate() {
                *gm += gv * vd[idx % c];
            }
            let gvv = &mut grads[v.0];
            for (idx, (&mv, &gv)) in val(m).iter().zip(g).enumerate() {
                gvv[idx % c] += gv * mv;
            }
        }
        Op::MeanRows(m) => {
            let c = g.len();
            let gm = &mut grads[m.0];
            let r = (gm.len() / c) as f64;
            for (idx, gmv) in gm.iter_mut().enumerate() {
                *gmv += g[idx % c] / r;
            }
        }
        Op::Sum(x) => {
            for gx in grads[x.0].iter_mut() {
                *gx += g[0];
            }
        }
        Op::LogSumExp(x) => {
            let p = softmax_values(val(x));
            for (gx, pv) in grads[x.0].iter_mut().zip(p) {
                *gx += g[0] * pv;
            }
        }
        Op::Pick { x, index } => grads[x.0][*index] += g[0],
        Op::SquaredDistance(a, b) => {
            for (ga, (&x, &y)) in grads[a.0].iter_mut().zip(val(a).iter().zip(val(b))) {
                *ga += 2.0 * (x - y) * g[0];
            }
            for (gb, (&x, &y)) in grads[b.0].iter_mut().zip(val(a).iter().zip(val(b))) {
                *gb -= 2.0 * (x - y) * g[0];
            }
        }
        Op::Clamp { x, lo, hi } => {
            for ((gx, &xv), &gv) in grads[x.0].iter_mut().zip(val(x)).zip(g) {
                if xv >= *lo && xv <= *hi {
                    *gx += gv;
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Max-shifted softmax of a slice.
pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Max-shifted `log Σ exp(x)`.
pub fn log_sum_exp_values(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
