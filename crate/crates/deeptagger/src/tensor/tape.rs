//! Wengert-list reverse-mode differentiation over [`Tensor`].
//!
//! A [`Tape`] records every primitive applied during a forward pass and
//! replays them in reverse to accumulate gradients. The graph is dynamic:
//! each training step builds a fresh tape, so control flow in model code
//! needs no special handling. Gradients are kept for leaf nodes only
//! (parameters and inputs); interior gradients are dropped once consumed.
//!
//! Every primitive validates operand shapes and scans its output for
//! non-finite values, so a numerical blowup is reported at the op that
//! produced it rather than surfacing later as a NaN loss.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Broadcast pattern for binary element-wise ops on matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bcast {
    /// Operands have identical shapes.
    None,
    /// Right operand is a `[cols]` vector applied to every row.
    Row,
    /// Right operand is a `[rows]` vector, one value per row.
    Col,
    /// Right operand is a scalar.
    Scalar,
}

/// Nonlinearity used in the feed-forward blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// `a @ b^T` without materializing the transpose.
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId, bcast: Bcast },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId, bcast: Bcast },
    Scale { a: NodeId, by: f64 },
    GatherRows { table: NodeId, indices: Vec<usize> },
    SliceRows { a: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    SoftmaxLastDim { a: NodeId },
    LogSoftmaxLastDim { a: NodeId },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    LayerNormLastDim { a: NodeId },
    Mean { a: NodeId },
    Sum { a: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, if it was reached.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Remove and return a leaf gradient, leaving `None` in its place.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Record a constant or parameter. Its gradient is retained by
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("leaf", value, Op::Leaf)
    }

    /// `a @ b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.shape().len() == 2 && tb.shape().len() == 2 && ta.cols() == tb.rows();
        if !ok {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = mm_nn(ta.data(), m, k, tb.data(), n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b })
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.shape().len() == 2 && tb.shape().len() == 2 && ta.cols() == tb.cols();
        if !ok {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let out = mm_nt(ta.data(), m, k, tb.data(), n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul_nt", value, Op::MatMulNt { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_bcast(a, b, Bcast::None)
    }

    pub fn add_bcast(&mut self, a: NodeId, b: NodeId, bcast: Bcast) -> Result<NodeId> {
        let value = self.binary("add", a, b, bcast, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b, bcast })
    }

    /// Element-wise `a - b` on identical shapes.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary("sub", a, b, Bcast::None, |x, y| x - y)?;
        self.push("sub", value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.mul_bcast(a, b, Bcast::None)
    }

    pub fn mul_bcast(&mut self, a: NodeId, b: NodeId, bcast: Bcast) -> Result<NodeId> {
        let value = self.binary("mul", a, b, bcast, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b, bcast })
    }

    /// Multiply by a compile-time-known finite constant.
    pub fn scale(&mut self, a: NodeId, by: f64) -> Result<NodeId> {
        if !by.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let ta = self.value(a);
        let data = ta.data().iter().map(|v| v * by).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale { a, by })
    }

    /// `out[i, :] = table[indices[i], :]`. Indices may repeat; their
    /// gradients accumulate into the same table row.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: tt.shape().to_vec(),
                right: vec![indices.len()],
            });
        }
        let (rows, cols) = (tt.rows(), tt.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!(
                "gather_rows index {bad} out of range for table with {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&tt.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![indices.len(), cols], out)?;
        self.push("gather_rows", value, Op::GatherRows { table, indices: indices.to_vec() })
    }

    /// Contiguous row range `[start, start + len)` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || start + len > ta.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let cols = ta.cols();
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        self.push("slice_rows", value, Op::SliceRows { a, start })
    }

    /// Stack matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::Data("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, cols],
                    right: tp.shape().to_vec(),
                });
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", value, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Row-wise softmax over the last dimension, stable under large
    /// negative masking values.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = last_dim_view(ta);
        let mut out = vec![0.0; ta.len()];
        for r in 0..rows {
            let x = &ta.data()[r * cols..(r + 1) * cols];
            let o = &mut out[r * cols..(r + 1) * cols];
            softmax_row(x, o);
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("softmax", value, Op::SoftmaxLastDim { a })
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = last_dim_view(ta);
        let mut out = vec![0.0; ta.len()];
        for r in 0..rows {
            let x = &ta.data()[r * cols..(r + 1) * cols];
            let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = v - lse;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmaxLastDim { a })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu { a })
    }

    pub fn activation(&mut self, act: Activation, a: NodeId) -> Result<NodeId> {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Gelu => self.gelu(a),
        }
    }

    /// Normalize each row of the last dimension to zero mean and unit
    /// variance. Affine gain/bias are applied by the caller as separate
    /// broadcast ops so this primitive stays parameter-free.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = last_dim_view(ta);
        let mut out = vec![0.0; ta.len()];
        for r in 0..rows {
            let x = &ta.data()[r * cols..(r + 1) * cols];
            let (mu, sigma) = row_moments(x);
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (v - mu) / sigma;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNormLastDim { a })
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let value = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len() as f64);
        self.push("mean", value, Op::Mean { a })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let value = Tensor::scalar(ta.data().iter().sum());
        self.push("sum", value, Op::Sum { a })
    }

    fn binary(
        &self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        bcast: Bcast,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || shape_err(name, ta, tb);
        let data = match bcast {
            Bcast::None => {
                if ta.shape() != tb.shape() {
                    return Err(mismatch());
                }
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
            }
            Bcast::Row => {
                if ta.shape().len() != 2 || tb.shape() != [ta.cols()] {
                    return Err(mismatch());
                }
                let cols = ta.cols();
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[i % cols]))
                    .collect()
            }
            Bcast::Col => {
                if ta.shape().len() != 2 || tb.shape() != [ta.rows()] {
                    return Err(mismatch());
                }
                let cols = ta.cols();
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[i / cols]))
                    .collect()
            }
            Bcast::Scalar => {
                if !tb.shape().is_empty() {
                    return Err(mismatch());
                }
                let y = tb.data()[0];
                ta.data().iter().map(|&x| f(x, y)).collect()
            }
        };
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Reverse sweep from a scalar loss. Returns gradients for leaf nodes;
    /// interior gradients are discarded as soon as their consumers have
    /// been processed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    if !g.is_finite() {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let da = mm_nt(g.data(), m, n, tb.data(), k);
                    let db = mm_tn(ta.data(), m, k, g.data(), n);
                    acc(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    acc(&mut grads, *b, Tensor::new(vec![k, n], db)?);
                }
                Op::MatMulNt { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    let da = mm_nn(g.data(), m, n, tb.data(), k);
                    let db = mm_tn(g.data(), m, n, ta.data(), k);
                    acc(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    acc(&mut grads, *b, Tensor::new(vec![n, k], db)?);
                }
                Op::Add { a, b, bcast } => {
                    let shape_b = self.value(*b).shape().to_vec();
                    let (rows, cols) = grad_dims(&g);
                    let db = reduce_bcast(g.data(), rows, cols, *bcast);
                    acc(&mut grads, *b, Tensor::new(shape_b, db)?);
                    acc(&mut grads, *a, g);
                }
                Op::Sub { a, b } => {
                    let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                    acc(&mut grads, *b, Tensor::new(g.shape().to_vec(), neg)?);
                    acc(&mut grads, *a, g);
                }
                Op::Mul { a, b, bcast } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (rows, cols) = grad_dims(&g);
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * bcast_at(tb.data(), i, rows, cols, *bcast))
                        .collect();
                    let ga: Vec<f64> =
                        g.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect();
                    let db = reduce_bcast(&ga, rows, cols, *bcast);
                    acc(&mut grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                    acc(&mut grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
                Op::Scale { a, by } => {
                    let da: Vec<f64> = g.data().iter().map(|v| v * by).collect();
                    acc(&mut grads, *a, Tensor::new(g.shape().to_vec(), da)?);
                }
                Op::GatherRows { table, indices } => {
                    let tt = self.value(*table);
                    let cols = tt.cols();
                    let mut dt = vec![0.0; tt.len()];
                    for (i, &row) in indices.iter().enumerate() {
                        let src = &g.data()[i * cols..(i + 1) * cols];
                        for (d, &s) in dt[row * cols..(row + 1) * cols].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *table, Tensor::new(tt.shape().to_vec(), dt)?);
                }
                Op::SliceRows { a, start } => {
                    let ta = self.value(*a);
                    let cols = ta.cols();
                    let mut da = vec![0.0; ta.len()];
                    da[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                Op::ConcatRows { parts } => {
                    let cols = g.cols();
                    let mut row = 0;
                    for &p in parts {
                        let rows_p = self.value(p).rows();
                        let chunk = g.data()[row * cols..(row + rows_p) * cols].to_vec();
                        acc(&mut grads, p, Tensor::new(vec![rows_p, cols], chunk)?);
                        row += rows_p;
                    }
                }
                Op::SoftmaxLastDim { a } => {
                    let p = &self.nodes[i].value;
                    let (rows, cols) = last_dim_view(p);
                    let mut da = vec![0.0; p.len()];
                    for r in 0..rows {
                        let pr = &p.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = pr.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                        for ((d, &pv), &gv) in
                            da[r * cols..(r + 1) * cols].iter_mut().zip(pr).zip(gr)
                        {
                            *d = pv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(p.shape().to_vec(), da)?);
                }
                Op::LogSoftmaxLastDim { a } => {
                    let lp = &self.nodes[i].value;
                    let (rows, cols) = last_dim_view(lp);
                    let mut da = vec![0.0; lp.len()];
                    for r in 0..rows {
                        let lr = &lp.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for ((d, &lv), &gv) in
                            da[r * cols..(r + 1) * cols].iter_mut().zip(lr).zip(gr)
                        {
                            *d = gv - lv.exp() * gsum;
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(lp.shape().to_vec(), da)?);
                }
                Op::Relu { a } => {
                    let ta = self.value(*a);
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                Op::Gelu { a } => {
                    let ta = self.value(*a);
                    let da: Vec<f64> =
                        g.data().iter().zip(ta.data()).map(|(&gv, &x)| gv * gelu_bwd(x)).collect();
                    acc(&mut grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                Op::LayerNormLastDim { a } => {
                    let ta = self.value(*a);
                    let (rows, cols) = last_dim_view(ta);
                    let y = &self.nodes[i].value;
                    let mut da = vec![0.0; ta.len()];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let xr = &ta.data()[r * cols..(r + 1) * cols];
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let (_, sigma) = row_moments(xr);
                        let gsum: f64 = gr.iter().sum();
                        let gydot: f64 = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum();
                        for ((d, &gv), &yv) in
                            da[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr)
                        {
                            *d = (gv - gsum / nf - yv * gydot / nf) / sigma;
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                Op::Mean { a } => {
                    let ta = self.value(*a);
                    let gv = g.data()[0] / ta.len() as f64;
                    acc(&mut grads, *a, Tensor::full(ta.shape().to_vec(), gv));
                }
                Op::Sum { a } => {
                    let ta = self.value(*a);
                    acc(&mut grads, *a, Tensor::full(ta.shape().to_vec(), g.data()[0]));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

/// View any tensor as `[rows, cols]` with `cols` the last dimension.
fn last_dim_view(t: &Tensor) -> (usize, usize) {
    let shape = t.shape();
    assert!(!shape.is_empty(), "last-dim op on a scalar");
    let cols = shape[shape.len() - 1];
    (t.len() / cols, cols)
}

fn grad_dims(g: &Tensor) -> (usize, usize) {
    if g.shape().len() == 2 {
        (g.rows(), g.cols())
    } else {
        (1, g.len())
    }
}

/// Value of the broadcast operand at flat position `i`.
fn bcast_at(b: &[f64], i: usize, _rows: usize, cols: usize, bcast: Bcast) -> f64 {
    match bcast {
        Bcast::None => b[i],
        Bcast::Row => b[i % cols],
        Bcast::Col => b[i / cols],
        Bcast::Scalar => b[0],
    }
}

/// Sum a full-shaped gradient down to the broadcast operand's shape.
fn reduce_bcast(g: &[f64], rows: usize, cols: usize, bcast: Bcast) -> Vec<f64> {
    match bcast {
        Bcast::None => g.to_vec(),
        Bcast::Row => {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for (o, &gv) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                    *o += gv;
                }
            }
            out
        }
        Bcast::Col => (0..rows).map(|r| g[r * cols..(r + 1) * cols].iter().sum()).collect(),
        Bcast::Scalar => vec![g.iter().sum()],
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, piece: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, &p) in existing.data_mut().iter_mut().zip(piece.data()) {
                *e += p;
            }
        }
        slot @ None => *slot = Some(piece),
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn row_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + LN_EPS).sqrt())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `a[m,k] @ b[k,n]`, row-major.
fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k] @ b[n,k]^T`, row-major.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a[p,m]^T @ b[p,n]`, row-major.
fn mm_tn(a: &[f64], p: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
