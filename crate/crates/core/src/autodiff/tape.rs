//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; parents always precede
//! their children, so the node list is already in topological order and the
//! backward sweep is a single reverse pass.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Value {
    tape: u64,
    index: usize,
}

impl Value {
    pub fn index(&self) -> usize {
        self.index
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
    Exp(usize),
    Neg(usize),
    Sum(usize, Option<usize>),
    Mean(usize, Option<usize>),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedNormalize {
        x: usize,
        mask: Vec<bool>,
        sums: Vec<f64>,
    },
    MaskedSoftmax {
        x: usize,
        mask: Vec<bool>,
    },
    SqDist(usize, usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<Option<Tensor>>,
    params: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` for intermediate nodes and
    /// constants.
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(v.index).and_then(Option::as_ref)
    }

    /// Gradients of every registered parameter, in registration order.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.params
            .iter()
            .map(|&i| self.leaves[i].as_ref().expect("parameter gradient"))
    }

    pub fn take(&mut self, v: Value) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get_mut(v.index).and_then(Option::take)
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_sum(t: &Tensor, axis: Option<usize>) -> Tensor {
    match axis {
        None => Tensor::scalar(t.data().iter().sum()),
        Some(axis) => {
            let (outer, len, inner) = axis_extents(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            let d = t.data();
            for o in 0..outer {
                for l in 0..len {
                    let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += x;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts(shape, out)
        }
    }
}

/// Adjoint buffer of node `p`, created zeroed on first use.
fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], p: usize) -> &'a mut Vec<f64> {
    let len = nodes[p].value.len();
    adj[p].get_or_insert_with(|| vec![0.0; len])
}

fn gelu_scalar(x: f64) -> (f64, f64) {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t)
        + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    (y, dy)
}

/// Tanh-approximation GELU evaluated outside any tape.
pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x).0
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, t: Tensor) -> Value {
        let v = self.push(Op::Leaf, t, true);
        self.params.push(v.index);
        v
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Value {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Value {
            tape: self.id,
            index,
        }
    }

    fn node(&self, v: Value) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::ForeignValue);
        }
        self.nodes.get(v.index).ok_or(Error::ForeignValue)
    }

    fn grad_of(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    fn record(&mut self, op: Op, parents: &[usize], value: Tensor, name: &'static str) -> Result<Value> {
        check_finite(value.data(), name)?;
        let rg = self.grad_of(parents);
        Ok(self.push(op, value, rg))
    }

    /// Matrix product of `[m, k]` and `[k, n]` operands.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (ta, tb) = (&na.value, &nb.value);
        let (m, k) = ta.dims2().map_err(|_| shape_err("matmul", ta, tb))?;
        let (k2, n) = tb.dims2().map_err(|_| shape_err("matmul", ta, tb))?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), (m, k), false, tb.data(), (k, n), false, &mut out, 0.0);
        let value = Tensor::from_parts(vec![m, n], out);
        self.record(Op::MatMul(a.index, b.index), &[a.index, b.index], value, "matmul")
    }

    fn binary(
        &mut self,
        a: Value,
        b: Value,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn unary(&self, a: Value, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let ta = &self.node(a)?.value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.record(Op::Add(a.index, b.index), &[a.index, b.index], t, "add")
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.record(Op::Sub(a.index, b.index), &[a.index, b.index], t, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.record(Op::Mul(a.index, b.index), &[a.index, b.index], t, "mul")
    }

    pub fn scale(&mut self, a: Value, s: f64) -> Result<Value> {
        let t = self.unary(a, |x| x * s)?;
        self.record(Op::Scale(a.index, s), &[a.index], t, "scale")
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        let t = self.unary(a, f64::exp)?;
        self.record(Op::Exp(a.index), &[a.index], t, "exp")
    }

    pub fn neg(&mut self, a: Value) -> Result<Value> {
        let t = self.unary(a, |x| -x)?;
        self.record(Op::Neg(a.index), &[a.index], t, "neg")
    }

    fn check_axis(&self, a: Value, axis: Option<usize>) -> Result<()> {
        let rank = self.node(a)?.value.rank();
        match axis {
            Some(axis) if axis >= rank => Err(Error::Axis { axis, rank }),
            _ => Ok(()),
        }
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&mut self, a: Value, axis: Option<usize>) -> Result<Value> {
        self.check_axis(a, axis)?;
        let t = reduce_sum(&self.nodes[a.index].value, axis);
        self.record(Op::Sum(a.index, axis), &[a.index], t, "sum")
    }

    pub fn mean(&mut self, a: Value, axis: Option<usize>) -> Result<Value> {
        self.check_axis(a, axis)?;
        let src = &self.nodes[a.index].value;
        let n = match axis {
            None => src.len(),
            Some(ax) => src.shape()[ax],
        } as f64;
        let mut t = reduce_sum(src, axis);
        t.data_mut().iter_mut().for_each(|x| *x /= n);
        self.record(Op::Mean(a.index, axis), &[a.index], t, "mean")
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Value) -> Result<Value> {
        let t = self.unary(a, |x| gelu_scalar(x).0)?;
        self.record(Op::Gelu(a.index), &[a.index], t, "gelu")
    }

    /// Per-row normalization of `[n, d]` followed by an affine map with
    /// `[d]`-shaped gain and bias.
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value) -> Result<Value> {
        let tx = &self.node(x)?.value;
        let (tg, tb) = (&self.node(gain)?.value, &self.node(bias)?.value);
        let (n, d) = tx.dims2()?;
        if tg.shape() != [d] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.shape() != [d] {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = tx.row(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::from_parts(vec![n, d], out);
        let parents = [x.index, gain.index, bias.index];
        self.record(
            Op::LayerNorm {
                x: x.index,
                gain: gain.index,
                bias: bias.index,
                xhat,
                inv_std,
            },
            &parents,
            value,
            "layer_norm",
        )
    }

    fn check_mask(&self, x: Value, mask: &[bool], name: &'static str) -> Result<(usize, usize)> {
        let tx = &self.node(x)?.value;
        let (q, c) = tx.dims2()?;
        if mask.len() != q * c {
            return Err(Error::Shape {
                op: name,
                lhs: vec![q, c],
                rhs: vec![mask.len()],
            });
        }
        for i in 0..q {
            if !mask[i * c..(i + 1) * c].iter().any(|&m| m) {
                return Err(Error::EmptyRow { row: i });
            }
        }
        Ok((q, c))
    }

    /// Row-wise `s_ij / sum_{j unmasked} s_ij`; masked entries are zero.
    ///
    /// `mask` is row-major with `true` marking entries that take part.
    pub fn masked_normalize(&mut self, scores: Value, mask: &[bool]) -> Result<Value> {
        let (q, c) = self.check_mask(scores, mask, "masked_normalize")?;
        let ts = &self.nodes[scores.index].value;
        let mut sums = vec![0.0; q];
        let mut out = vec![0.0; q * c];
        for i in 0..q {
            let row = ts.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let s: f64 = row.iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| x).sum();
            sums[i] = s;
            for j in 0..c {
                if m[j] {
                    out[i * c + j] = row[j] / s;
                }
            }
        }
        let value = Tensor::from_parts(vec![q, c], out);
        self.record(
            Op::MaskedNormalize {
                x: scores.index,
                mask: mask.to_vec(),
                sums,
            },
            &[scores.index],
            value,
            "masked_normalize",
        )
    }

    /// Row-wise softmax over unmasked entries, computed with the row maximum
    /// subtracted. Equivalent to `masked_normalize(exp(x))` without overflow.
    pub fn masked_softmax(&mut self, logits: Value, mask: &[bool]) -> Result<Value> {
        let (q, c) = self.check_mask(logits, mask, "masked_softmax")?;
        let tx = &self.nodes[logits.index].value;
        let mut out = vec![0.0; q * c];
        for i in 0..q {
            let row = tx.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                if m[j] {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    s += e;
                }
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|w| *w /= s);
        }
        let value = Tensor::from_parts(vec![q, c], out);
        self.record(
            Op::MaskedSoftmax {
                x: logits.index,
                mask: mask.to_vec(),
            },
            &[logits.index],
            value,
            "masked_softmax",
        )
    }

    /// Pairwise squared Euclidean distances between the rows of `a` `[n, d]`
    /// and `b` `[c, d]`, giving `[n, c]`.
    pub fn sq_dist(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (n, d) = ta.dims2()?;
        let (c, d2) = tb.dims2()?;
        if d != d2 {
            return Err(shape_err("sq_dist", ta, tb));
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let ra = ta.row(i);
            for j in 0..c {
                let rb = tb.row(j);
                out[i * c + j] = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let value = Tensor::from_parts(vec![n, c], out);
        self.record(Op::SqDist(a.index, b.index), &[a.index, b.index], value, "sq_dist")
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let ta = &self.node(a)?.value;
        let (r, c) = ta.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let value = Tensor::from_parts(vec![c, r], out);
        self.record(Op::Transpose(a.index), &[a.index], value, "transpose")
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of zero tensors"))?;
        let rows = self.node(*first)?.value.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.node(p)?.value;
            let (r, c) = t.dims2()?;
            if r != rows {
                return Err(shape_err("concat_cols", &self.nodes[first.index].value, t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.index].value;
            for i in 0..rows {
                out[i * total + offset..i * total + offset + w].copy_from_slice(t.row(i));
            }
            offset += w;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.index).collect();
        let value = Tensor::from_parts(vec![rows, total], out);
        self.record(Op::ConcatCols(idx.clone()), &idx, value, "concat_cols")
    }

    /// Vertical stacking of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of zero tensors"))?;
        let cols = self.node(*first)?.value.dims2()?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.node(p)?.value;
            let (r, c) = t.dims2()?;
            if c != cols {
                return Err(shape_err("concat_rows", &self.nodes[first.index].value, t));
            }
            out.extend_from_slice(t.data());
            rows += r;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.index).collect();
        let value = Tensor::from_parts(vec![rows, cols], out);
        self.record(Op::ConcatRows(idx.clone()), &idx, value, "concat_rows")
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Value, start: usize, len: usize) -> Result<Value> {
        let ta = &self.node(a)?.value;
        let (r, c) = ta.dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::invalid(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let value = Tensor::from_parts(vec![len, c], ta.data()[start * c..(start + len) * c].to_vec());
        self.record(Op::SliceRows { x: a.index, start }, &[a.index], value, "slice_rows")
    }

    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        let value = self.node(a)?.value.clone().reshaped(shape)?;
        self.record(Op::Reshape(a.index), &[a.index], value, "reshape")
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Adjoints start from zero on every call, so repeated calls return
    /// identical gradients. Every registered parameter gets a gradient, zero
    /// if the root does not depend on it.
    pub fn backward(&self, root: Value) -> Result<Gradients> {
        let rn = self.node(root)?;
        if rn.value.len() != 1 {
            return Err(Error::NonScalarRoot(rn.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.index + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.index] = Some(vec![1.0]);

        for i in (0..=root.index).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        for &p in &self.params {
            if leaves[p].is_none() {
                leaves[p] = Some(Tensor::zeros(self.nodes[p].value.shape()));
            }
        }
        for t in leaves.iter().flatten() {
            check_finite(t.data(), "backward")?;
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |p: usize| nodes[p].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = ta.dims2()?;
                let n = tb.dims2()?.1;
                if wants(*a) {
                    gemm(g, (m, n), false, tb.data(), (k, n), true, slot(adj, nodes, *a), 1.0);
                }
                if wants(*b) {
                    gemm(ta.data(), (m, k), true, g, (m, n), false, slot(adj, nodes, *b), 1.0);
                }
            }
            Op::Add(a, b) => {
                for (p, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(p) {
                        slot(adj, nodes, p).iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (p, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(p) {
                        slot(adj, nodes, p).iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    let d = slot(adj, nodes, *a);
                    for k in 0..g.len() {
                        d[k] += g[k] * tb.data()[k];
                    }
                }
                if wants(*b) {
                    let d = slot(adj, nodes, *b);
                    for k in 0..g.len() {
                        d[k] += g[k] * ta.data()[k];
                    }
                }
            }
            Op::Scale(a, s) => {
                slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
            }
            Op::Exp(a) => {
                let y = nodes[i].value.data();
                let d = slot(adj, nodes, *a);
                for k in 0..g.len() {
                    d[k] += g[k] * y[k];
                }
            }
            Op::Neg(a) => {
                slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let src_shape = nodes[*a].value.shape();
                let is_mean = matches!(nodes[i].op, Op::Mean(..));
                let d = slot(adj, nodes, *a);
                match axis {
                    None => {
                        let s = if is_mean { g[0] / d.len() as f64 } else { g[0] };
                        d.iter_mut().for_each(|x| *x += s);
                    }
                    Some(axis) => {
                        let (outer, len, inner) = axis_extents(src_shape, *axis);
                        let f = if is_mean { 1.0 / len as f64 } else { 1.0 };
                        for o in 0..outer {
                            for l in 0..len {
                                let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                                let src = &g[o * inner..(o + 1) * inner];
                                dst.iter_mut().zip(src).for_each(|(x, y)| *x += f * y);
                            }
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = nodes[*a].value.data();
                let d = slot(adj, nodes, *a);
                for k in 0..g.len() {
                    d[k] += g[k] * gelu_scalar(x[k]).1;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, dim) = nodes[*x].value.dims2()?;
                let gv = nodes[*gain].value.data();
                if wants(*gain) {
                    let d = slot(adj, nodes, *gain);
                    for r in 0..n {
                        for j in 0..dim {
                            d[j] += g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                }
                if wants(*bias) {
                    let d = slot(adj, nodes, *bias);
                    for r in 0..n {
                        for j in 0..dim {
                            d[j] += g[r * dim + j];
                        }
                    }
                }
                if wants(*x) {
                    let d = slot(adj, nodes, *x);
                    let mut dxhat = vec![0.0; dim];
                    for r in 0..n {
                        let h = &xhat[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            dxhat[j] = g[r * dim + j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / dim as f64;
                        let m2 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        for j in 0..dim {
                            d[r * dim + j] += inv_std[r] * (dxhat[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            Op::MaskedNormalize { x, mask, sums } => {
                let (q, c) = nodes[i].value.dims2()?;
                let w = nodes[i].value.data();
                let d = slot(adj, nodes, *x);
                for r in 0..q {
                    let dot: f64 = (0..c).map(|j| g[r * c + j] * w[r * c + j]).sum();
                    for j in 0..c {
                        if mask[r * c + j] {
                            d[r * c + j] += (g[r * c + j] - dot) / sums[r];
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, mask } => {
                let (q, c) = nodes[i].value.dims2()?;
                let w = nodes[i].value.data();
                let d = slot(adj, nodes, *x);
                for r in 0..q {
                    let dot: f64 = (0..c).map(|j| g[r * c + j] * w[r * c + j]).sum();
                    for j in 0..c {
                        if mask[r * c + j] {
                            d[r * c + j] += w[r * c + j] * (g[r * c + j] - dot);
                        }
                    }
                }
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (n, dim) = ta.dims2()?;
                let c = tb.dims2()?.0;
                if wants(*a) {
                    let d = slot(adj, nodes, *a);
                    for r in 0..n {
                        let ra = ta.row(r);
                        for j in 0..c {
                            let s = 2.0 * g[r * c + j];
                            let rb = tb.row(j);
                            for k in 0..dim {
                                d[r * dim + k] += s * (ra[k] - rb[k]);
                            }
                        }
                    }
                }
                if wants(*b) {
                    let d = slot(adj, nodes, *b);
                    for r in 0..n {
                        let ra = ta.row(r);
                        for j in 0..c {
                            let s = 2.0 * g[r * c + j];
                            let rb = tb.row(j);
                            for k in 0..dim {
                                d[j * dim + k] -= s * (ra[k] - rb[k]);
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[*a].value.dims2()?;
                let d = slot(adj, nodes, *a);
                for row in 0..r {
                    for col in 0..c {
                        d[row * c + col] += g[col * r + row];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = nodes[i].value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.dims2()?.1;
                    if wants(p) {
                        let d = slot(adj, nodes, p);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if wants(p) {
                        slot(adj, nodes, p)
                            .iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = nodes[*x].value.dims2()?.1;
                let d = slot(adj, nodes, *x);
                d[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
            Op::Reshape(a) => {
                slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
        }
        Ok(())
    }
}
