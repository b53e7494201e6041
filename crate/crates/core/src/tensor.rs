//! Dense-tensor math with reverse-mode automatic differentiation.
//!
//! The graph is a flat tape: every operation appends a node holding its
//! value, a same-shape gradient buffer, and a record of the producing op.
//! Tensors are rank-1 or rank-2, stored row-major. `backward` walks the
//! tape in reverse and accumulates gradients additively, so calling it
//! twice without zeroing yields exactly twice the gradient.

use crate::error::{CoreError, Result};
use num_traits::Float;
use std::fmt::Debug;

/// Scalar type the graph is generic over. Tests run at `f64` so finite
/// difference checks are meaningful; training defaults to `f32`.
pub trait Real:
    Float + num_traits::NumAssignOps + Default + Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRowBroadcast { m: NodeId, v: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    Log { x: NodeId },
    Exp { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    SoftmaxRows { x: NodeId },
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize, len: usize },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    MeanRows { x: NodeId },
    LogSumExpZeroMasked { x: NodeId, mask: NodeId },
}

fn op_parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul { a, b }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Mul { a, b } => vec![*a, *b],
        Op::AddRowBroadcast { m, v } => vec![*m, *v],
        Op::Transpose { x }
        | Op::Scale { x, .. }
        | Op::AddScalar { x, .. }
        | Op::Sigmoid { x }
        | Op::Tanh { x }
        | Op::Relu { x }
        | Op::Log { x }
        | Op::Exp { x }
        | Op::Clamp { x, .. }
        | Op::SoftmaxRows { x }
        | Op::SliceCols { x, .. }
        | Op::SumAll { x }
        | Op::MeanAll { x }
        | Op::MeanRows { x } => vec![*x],
        Op::LayerNormRows { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::ConcatCols { parts } | Op::ConcatRows { parts } => parts.clone(),
        Op::LogSumExpZeroMasked { x, .. } => vec![*x],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddRowBroadcast { .. } => "add_row_broadcast",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Tanh { .. } => "tanh",
        Op::Relu { .. } => "relu",
        Op::Log { .. } => "log",
        Op::Exp { .. } => "exp",
        Op::Clamp { .. } => "clamp",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LayerNormRows { .. } => "layer_norm",
        Op::ConcatCols { .. } => "concat_cols",
        Op::ConcatRows { .. } => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::MeanRows { .. } => "mean_rows",
        Op::LogSumExpZeroMasked { .. } => "log_sum_exp_zero",
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Vec<T>,
    op: Op,
    needs_grad: bool,
}

/// A reverse-mode computation tape. One graph is confined to a single
/// thread for the duration of a forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Interpret a rank-1 tensor as a single row, rank-2 as (rows, cols).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("ranks are validated at node creation"),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, needs_grad: bool) -> NodeId {
        let grad = if needs_grad {
            vec![T::zero(); value.len()]
        } else {
            Vec::new()
        };
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
            needs_grad,
        });
        id
    }

    fn check_shape(shape: &[usize], data_len: usize) -> Result<()> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(CoreError::contract(format!(
                "tensors must be rank 1 or 2, got rank {}",
                shape.len()
            )));
        }
        if numel(shape) != data_len {
            return Err(CoreError::contract(format!(
                "shape {:?} does not match data length {}",
                shape, data_len
            )));
        }
        Ok(())
    }

    /// A value the loss does not differentiate through (inputs, labels, masks).
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<NodeId> {
        Self::check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn constant_f32(&mut self, shape: &[usize], data: &[f32]) -> Result<NodeId> {
        let v = data.iter().map(|&x| T::from_f32(x)).collect();
        self.constant(shape, v)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<NodeId> {
        self.constant(shape, vec![T::zero(); numel(shape)])
    }

    /// A gradient-tracked leaf (model parameters, or inputs under test).
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>) -> Result<NodeId> {
        Self::check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.idx()].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    /// Accumulated gradient of a node. Empty for non-tracked nodes.
    pub fn grad(&self, id: NodeId) -> &[T] {
        &self.nodes[id.idx()].grad
    }

    pub fn scalar(&self, id: NodeId) -> Result<T> {
        let n = &self.nodes[id.idx()];
        if n.value.len() != 1 {
            return Err(CoreError::contract(format!(
                "expected a scalar node, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            for g in &mut n.grad {
                *g = T::zero();
            }
        }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.idx()].needs_grad)
    }

    // ---- ops ----------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(CoreError::contract("matmul requires rank-2 operands"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(CoreError::contract(format!(
                "matmul inner dims differ: {:?} x {:?}",
                sa, sb
            )));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = &self.nodes[a.idx()].value;
            let bv = &self.nodes[b.idx()].value;
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, ng))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(CoreError::contract("transpose requires a rank-2 operand"));
        }
        let (r, c) = (s[0], s[1]);
        let xv = &self.nodes[x.idx()].value;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(vec![c, r], out, Op::Transpose { x }, ng))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::contract(format!(
                "{} requires identical shapes, got {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "add")?;
        let out: Vec<T> = self.nodes[a.idx()]
            .value
            .iter()
            .zip(&self.nodes[b.idx()].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "sub")?;
        let out: Vec<T> = self.nodes[a.idx()]
            .value
            .iter()
            .zip(&self.nodes[b.idx()].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "mul")?;
        let out: Vec<T> = self.nodes[a.idx()]
            .value
            .iter()
            .zip(&self.nodes[b.idx()].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Mul { a, b }, ng))
    }

    /// `m + v` where `v` is a rank-1 vector added to every row of `m`.
    pub fn add_row_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let sm = self.shape(m).to_vec();
        let sv = self.shape(v);
        let (_, c) = rows_cols(&sm);
        if sv.len() != 1 || sv[0] != c {
            return Err(CoreError::contract(format!(
                "broadcast add requires vector of length {}, got {:?}",
                c, sv
            )));
        }
        let mv = &self.nodes[m.idx()].value;
        let vv = &self.nodes[v.idx()].value;
        let out: Vec<T> = mv
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vv[i % c])
            .collect();
        let ng = self.needs(&[m, v]);
        Ok(self.push(sm, out, Op::AddRowBroadcast { m, v }, ng))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cc = T::from_f64(c);
        let out: Vec<T> = self.nodes[x.idx()].value.iter().map(|&v| v * cc).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Scale { x, c }, ng))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cc = T::from_f64(c);
        let out: Vec<T> = self.nodes[x.idx()].value.iter().map(|&v| v + cc).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x]);
        Ok(self.push(shape, out, Op::AddScalar { x }, ng))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op) -> NodeId {
        let out: Vec<T> = self.nodes[x.idx()].value.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x]);
        self.push(shape, out, op, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid { x }))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, |v| v.tanh(), Op::Tanh { x }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, |v| v.max(T::zero()), Op::Relu { x }))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, |v| v.ln(), Op::Log { x }))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.unary(x, |v| v.exp(), Op::Exp { x }))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(CoreError::contract("clamp requires lo < hi"));
        }
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        Ok(self.unary(x, |v| v.max(l).min(h), Op::Clamp { x, lo, hi }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (r, c) = rows_cols(&shape);
        if c == 0 {
            return Err(CoreError::contract("softmax over an empty axis"));
        }
        let xv = &self.nodes[x.idx()].value;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(shape, out, Op::SoftmaxRows { x }, ng))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (r, c) = rows_cols(&shape);
        for (p, what) in [(gain, "gain"), (bias, "bias")] {
            let s = self.shape(p);
            if s.len() != 1 || s[0] != c {
                return Err(CoreError::contract(format!(
                    "layer_norm {} must have shape [{}], got {:?}",
                    what, c, s
                )));
            }
        }
        let e = T::from_f64(eps);
        let xv = &self.nodes[x.idx()].value;
        let gv = &self.nodes[gain.idx()].value;
        let bv = &self.nodes[bias.idx()].value;
        let cn = T::from_f64(c as f64);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / cn;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / cn;
            let inv_std = T::one() / (var + e).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(shape, out, Op::LayerNormRows { x, gain, bias, eps }, ng))
    }

    /// Concatenate along the last axis. All parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat of zero tensors"));
        }
        let (r0, _) = rows_cols(self.shape(parts[0]));
        let rank2 = parts.iter().any(|&p| self.shape(p).len() == 2);
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != r0 {
                return Err(CoreError::contract("concat_cols requires equal row counts"));
            }
            total += c;
        }
        let mut out = vec![T::zero(); r0 * total];
        let mut offset = 0usize;
        for &p in parts {
            let (_, c) = rows_cols(self.shape(p));
            let pv = &self.nodes[p.idx()].value;
            for i in 0..r0 {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let shape = if rank2 { vec![r0, total] } else { vec![total] };
        let ng = self.needs(parts);
        Ok(self.push(
            shape,
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Stack rows: parts of shape `[r_i, c]` (rank-1 counts as one row).
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat of zero tensors"));
        }
        let (_, c0) = rows_cols(self.shape(parts[0]));
        let mut rows = 0usize;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != c0 {
                return Err(CoreError::contract(
                    "concat_rows requires equal column counts",
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c0);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.idx()].value);
        }
        let ng = self.needs(parts);
        Ok(self.push(
            vec![rows, c0],
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Slice `len` columns starting at `start` (elements, for rank-1 input).
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (r, c) = rows_cols(&shape);
        if start + len > c || len == 0 {
            return Err(CoreError::contract(format!(
                "slice [{}, {}) out of range for {} columns",
                start,
                start + len,
                c
            )));
        }
        let xv = &self.nodes[x.idx()].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let oshape = if shape.len() == 1 {
            vec![len]
        } else {
            vec![r, len]
        };
        let ng = self.needs(&[x]);
        Ok(self.push(oshape, out, Op::SliceCols { x, start, len }, ng))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.idx()]
            .value
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let ng = self.needs(&[x]);
        Ok(self.push(vec![1], vec![s], Op::SumAll { x }, ng))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.idx()].value.len();
        if n == 0 {
            return Err(CoreError::contract("mean of an empty tensor"));
        }
        let s = self.nodes[x.idx()]
            .value
            .iter()
            .fold(T::zero(), |acc, &v| acc + v)
            / T::from_f64(n as f64);
        let ng = self.needs(&[x]);
        Ok(self.push(vec![1], vec![s], Op::MeanAll { x }, ng))
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (r, c) = rows_cols(&shape);
        let xv = &self.nodes[x.idx()].value;
        let rn = T::from_f64(r as f64);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xv[i * c + j];
            }
        }
        for v in &mut out {
            *v /= rn;
        }
        let ng = self.needs(&[x]);
        Ok(self.push(vec![1, c], out, Op::MeanRows { x }, ng))
    }

    /// Per row `i`: `log(1 + sum_j mask_ij * exp(x_ij))`, computed stably.
    /// The mask must be a constant 0/1 tensor of the same shape.
    pub fn log_sum_exp_zero_masked(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(x, mask, "log_sum_exp_zero")?;
        let (r, c) = rows_cols(&shape);
        let xv = &self.nodes[x.idx()].value;
        let mv = &self.nodes[mask.idx()].value;
        let mut out = vec![T::zero(); r];
        for i in 0..r {
            let mut mx = T::zero(); // the implicit 1 = exp(0) term
            for j in 0..c {
                if mv[i * c + j] > T::zero() {
                    mx = mx.max(xv[i * c + j]);
                }
            }
            let mut sum = (-mx).exp();
            for j in 0..c {
                if mv[i * c + j] > T::zero() {
                    sum += (xv[i * c + j] - mx).exp();
                }
            }
            out[i] = mx + sum.ln();
        }
        let ng = self.needs(&[x]);
        Ok(self.push(vec![r], out, Op::LogSumExpZeroMasked { x, mask }, ng))
    }

    // ---- backward ------------------------------------------------------

    /// Backpropagate from a scalar loss. Gradients of every tracked node
    /// are incremented by this call's contribution; unreachable tracked
    /// nodes keep their (zero-initialized) gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let l = loss.idx();
        if self.nodes[l].value.len() != 1 {
            return Err(CoreError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[l].shape
            )));
        }
        // Fresh buffers per call keep accumulation exactly additive.
        let mut local: Vec<Vec<T>> = vec![Vec::new(); self.nodes.len()];
        local[l] = vec![T::one()];
        for i in (0..=l).rev() {
            if local[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut local[i]);
            self.propagate(i, &g, &mut local);
            local[i] = g;
            // A non-finite contribution always leaves a non-finite trace in
            // the accumulated buffer, so checking the parents we just wrote
            // to is enough to attribute the failure to this op.
            for p in op_parents(&self.nodes[i].op) {
                let pi = p.idx();
                if !local[pi].is_empty() && local[pi].iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::Numeric {
                        op: op_name(&self.nodes[i].op),
                    });
                }
            }
        }
        for (i, buf) in local.into_iter().enumerate() {
            if buf.is_empty() {
                continue;
            }
            for (dst, src) in self.nodes[i].grad.iter_mut().zip(&buf) {
                *dst += *src;
            }
        }
        Ok(())
    }

    fn acc<'a>(&self, local: &'a mut Vec<Vec<T>>, p: NodeId) -> Option<&'a mut [T]> {
        let pi = p.idx();
        if !self.nodes[pi].needs_grad {
            return None;
        }
        if local[pi].is_empty() {
            local[pi] = vec![T::zero(); self.nodes[pi].value.len()];
        }
        Some(&mut local[pi])
    }

    fn propagate(&self, i: usize, g: &[T], local: &mut Vec<Vec<T>>) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.shape(a);
                    (s[0], s[1])
                };
                let n = self.shape(b)[1];
                if let Some(da) = self.acc(local, a) {
                    let bv = &self.nodes[b.idx()].value;
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[r * k + p] += s;
                        }
                    }
                }
                if let Some(db) = self.acc(local, b) {
                    let av = &self.nodes[a.idx()].value;
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = av[r * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += arp * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (c, r) = {
                    let s = &self.nodes[i].shape;
                    (s[0], s[1])
                };
                if let Some(dx) = self.acc(local, x) {
                    for a in 0..c {
                        for b in 0..r {
                            dx[b * c + a] += g[a * r + b];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for p in [a, b] {
                    if let Some(dp) = self.acc(local, p) {
                        for (d, &gv) in dp.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = self.acc(local, a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = self.acc(local, b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = self.acc(local, a) {
                    let bv = &self.nodes[b.idx()].value;
                    for ((d, &gv), &v) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * v;
                    }
                }
                if let Some(db) = self.acc(local, b) {
                    let av = &self.nodes[a.idx()].value;
                    for ((d, &gv), &v) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * v;
                    }
                }
            }
            Op::AddRowBroadcast { m, v } => {
                if let Some(dm) = self.acc(local, m) {
                    for (d, &gv) in dm.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(dv) = self.acc(local, v) {
                    let c = dv.len();
                    for (idx, &gv) in g.iter().enumerate() {
                        dv[idx % c] += gv;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.acc(local, x) {
                    let cc = T::from_f64(c);
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * cc;
                    }
                }
            }
            Op::AddScalar { x } => {
                if let Some(dx) = self.acc(local, x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(dx) = self.acc(local, x) {
                    let out = &self.nodes[i].value;
                    for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * s * (T::one() - s);
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(dx) = self.acc(local, x) {
                    let out = &self.nodes[i].value;
                    for ((d, &gv), &t) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * (T::one() - t * t);
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(dx) = self.acc(local, x) {
                    let xv = &self.nodes[x.idx()].value;
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Log { x } => {
                if let Some(dx) = self.acc(local, x) {
                    let xv = &self.nodes[x.idx()].value;
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv / v;
                    }
                }
            }
            Op::Exp { x } => {
                if let Some(dx) = self.acc(local, x) {
                    let out = &self.nodes[i].value;
                    for ((d, &gv), &e) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * e;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if let Some(dx) = self.acc(local, x) {
                    let (l, h) = (T::from_f64(lo), T::from_f64(hi));
                    let xv = &self.nodes[x.idx()].value;
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > l && v < h {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if let Some(dx) = self.acc(local, x) {
                    let out = &self.nodes[i].value;
                    let (r, c) = rows_cols(&self.nodes[i].shape);
                    for row in 0..r {
                        let o = &out[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let mut dot = T::zero();
                        for j in 0..c {
                            dot += gr[j] * o[j];
                        }
                        let dr = &mut dx[row * c..(row + 1) * c];
                        for j in 0..c {
                            dr[j] += o[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (r, c) = rows_cols(&self.nodes[i].shape);
                let cn = T::from_f64(c as f64);
                let e = T::from_f64(eps);
                let xv = &self.nodes[x.idx()].value;
                let gv = &self.nodes[gain.idx()].value;
                // recompute per-row statistics
                for row in 0..r {
                    let xr = &xv[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let mean = xr.iter().fold(T::zero(), |s, &v| s + v) / cn;
                    let var = xr
                        .iter()
                        .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                        / cn;
                    let inv_std = T::one() / (var + e).sqrt();
                    if let Some(dbias) = self.acc(local, bias) {
                        for j in 0..c {
                            dbias[j] += gr[j];
                        }
                    }
                    if let Some(dgain) = self.acc(local, gain) {
                        for j in 0..c {
                            dgain[j] += gr[j] * (xr[j] - mean) * inv_std;
                        }
                    }
                    if let Some(dx) = self.acc(local, x) {
                        let mut dxh_sum = T::zero();
                        let mut dxh_xh_sum = T::zero();
                        for j in 0..c {
                            let xh = (xr[j] - mean) * inv_std;
                            let dxh = gr[j] * gv[j];
                            dxh_sum += dxh;
                            dxh_xh_sum += dxh * xh;
                        }
                        let dr = &mut dx[row * c..(row + 1) * c];
                        for j in 0..c {
                            let xh = (xr[j] - mean) * inv_std;
                            let dxh = gr[j] * gv[j];
                            dr[j] += inv_std / cn * (cn * dxh - dxh_sum - xh * dxh_xh_sum);
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total) = rows_cols(&self.nodes[i].shape);
                let mut offset = 0usize;
                for p in parts {
                    let (_, c) = rows_cols(self.shape(p));
                    if let Some(dp) = self.acc(local, p) {
                        for row in 0..r {
                            let src = &g[row * total + offset..row * total + offset + c];
                            let dst = &mut dp[row * c..(row + 1) * c];
                            for j in 0..c {
                                dst[j] += src[j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0usize;
                for p in parts {
                    let n = self.nodes[p.idx()].value.len();
                    if let Some(dp) = self.acc(local, p) {
                        for (d, &gv) in dp.iter_mut().zip(&g[offset..offset + n]) {
                            *d += gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start, len } => {
                if let Some(dx) = self.acc(local, x) {
                    let (r, c) = rows_cols(self.shape(x));
                    for row in 0..r {
                        for j in 0..len {
                            dx[row * c + start + j] += g[row * len + j];
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(dx) = self.acc(local, x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll { x } => {
                if let Some(dx) = self.acc(local, x) {
                    let n = T::from_f64(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::MeanRows { x } => {
                if let Some(dx) = self.acc(local, x) {
                    let (r, c) = rows_cols(self.shape(x));
                    let rn = T::from_f64(r as f64);
                    for row in 0..r {
                        for j in 0..c {
                            dx[row * c + j] += g[j] / rn;
                        }
                    }
                }
            }
            Op::LogSumExpZeroMasked { x, mask } => {
                if let Some(dx) = self.acc(local, x) {
                    let xv = &self.nodes[x.idx()].value;
                    let mv = &self.nodes[mask.idx()].value;
                    let out = &self.nodes[i].value;
                    let (r, c) = rows_cols(self.shape(x));
                    for row in 0..r {
                        for j in 0..c {
                            if mv[row * c + j] > T::zero() {
                                dx[row * c + j] += g[row] * (xv[row * c + j] - out[row]).exp();
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn sum_of_vector_has_unit_gradients() {
        let mut g = graph();
        let x = g.leaf(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut g = graph();
        let x = g.leaf(&[1], vec![0.0]).unwrap();
        let s = g.sigmoid(x).unwrap();
        let loss = g.sum_all(s).unwrap();
        g.backward(loss).unwrap();
        assert!((g.grad(x)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_doubles_gradients_exactly() {
        let mut g = graph();
        let x = g.leaf(&[2, 2], vec![0.3, -0.7, 1.1, 0.25]).unwrap();
        let y = g.tanh(x).unwrap();
        let z = g.mul(y, y).unwrap();
        let loss = g.mean_all(z).unwrap();
        g.backward(loss).unwrap();
        let once: Vec<f64> = g.grad(x).to_vec();
        g.backward(loss).unwrap();
        let twice: Vec<f64> = g.grad(x).to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_contract_violation() {
        let mut g = graph();
        let a = g.leaf(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.leaf(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(
            g.matmul(a, b),
            Err(crate::error::CoreError::Contract(_))
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = graph();
        let x = g.leaf(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_reports_non_finite_gradient_with_op_name() {
        let mut g = graph();
        let x = g.leaf(&[1], vec![0.0]).unwrap();
        let y = g.log(x).unwrap(); // ln(0) = -inf; gradient 1/0 = inf
        let loss = g.sum_all(y).unwrap();
        match g.backward(loss) {
            Err(CoreError::Numeric { op }) => assert_eq!(op, "log"),
            other => panic!("expected numeric error, got {:?}", other),
        }
    }

    #[test]
    fn unreachable_parameters_keep_zero_gradient() {
        let mut g = graph();
        let used = g.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let unused = g.leaf(&[2], vec![3.0, 4.0]).unwrap();
        let loss = g.sum_all(used).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused), &[0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = graph();
        let a = g.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.leaf(&[2, 1], vec![5.0, 6.0]).unwrap();
        let cat = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), &[2, 3]);
        assert_eq!(g.value(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice_cols(cat, 2, 1).unwrap();
        assert_eq!(g.value(back), &[5.0, 6.0]);
    }

    #[test]
    fn log_sum_exp_zero_matches_naive_formula() {
        let mut g = graph();
        let x = g
            .leaf(&[2, 3], vec![0.1, -0.4, 1.2, 30.0, -3.0, 0.0])
            .unwrap();
        let mask = g
            .constant(&[2, 3], vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0])
            .unwrap();
        let out = g.log_sum_exp_zero_masked(x, mask).unwrap();
        let naive0 = (1.0 + 0.1f64.exp() + (-0.4f64).exp()).ln();
        let naive1 = (1.0 + 30.0f64.exp() + 0.0f64.exp()).ln();
        assert!((g.value(out)[0] - naive0).abs() < 1e-12);
        assert!((g.value(out)[1] - naive1).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 3..30)) {
            let cols = if vals.len() % 3 == 0 { 3 } else { 1 };
            let rows = vals.len() / cols;
            let data = vals[..rows * cols].to_vec();
            let mut g = graph();
            let x = g.leaf(&[rows, cols], data).unwrap();
            let s = g.softmax_rows(x).unwrap();
            let out = g.value(s);
            for i in 0..rows {
                let row = &out[i * cols..(i + 1) * cols];
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn clamp_keeps_values_in_range(vals in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let mut g = graph();
            let n = vals.len();
            let x = g.leaf(&[n], vals).unwrap();
            let c = g.clamp(x, -1.0, 1.0).unwrap();
            prop_assert!(g.value(c).iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }
}
