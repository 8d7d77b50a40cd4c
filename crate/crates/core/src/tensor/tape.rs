//! Wengert-list reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the record list is already a
//! topological order and `backward` walks it in exact reverse. A tape is
//! single-use for gradients: after `backward` the forward pass must be
//! rebuilt (on a cleared or fresh tape) before another `backward`.

use std::sync::atomic::{AtomicU64, Ordering};

use super::broadcast::{broadcast_shape, reduce_into, zip_map, Layout};
use super::{axis_split, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op} at node {node} produced a non-finite value")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is detached: it does not depend on any tensor that requires grad")]
    Detached,
    #[error("handle refers to a cleared or different tape")]
    StaleHandle,
    #[error("backward already ran on this tape; rebuild the forward pass first")]
    BackwardConsumed,
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Sqrt { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Sum { a: Var, axis: usize },
    Mean { a: Var, axis: usize },
    Variance { a: Var, axis: usize, mean: Vec<T> },
    SumAll { a: Var },
    MeanAll { a: Var },
    Reshape { a: Var },
    Take { a: Var, idx: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    ScatterAddRows { parts: Vec<Var>, rows: Vec<Vec<usize>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    CausalAttention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Sqrt { .. } => "sqrt",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Variance { .. } => "variance",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::Reshape { .. } => "reshape",
            Op::Take { .. } => "take",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::CausalAttention { .. } => "causal_attention",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations plus the values they produced.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    nan_guard: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
            grads: Vec::new(),
            nan_guard: true,
            consumed: false,
        }
    }

    /// Drops every record. Handles issued before the call become invalid.
    pub fn clear(&mut self) {
        self.id = fresh_id();
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn set_nan_guard(&mut self, on: bool) {
        self.nan_guard = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::StaleHandle);
        }
        Ok(v.idx)
    }

    fn node(&self, v: Var) -> Result<&Node<T>, TensorError> {
        self.check(v).map(|i| &self.nodes[i])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("stale tensor handle")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>, TensorError> {
        self.node(v).map(|n| &n.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        let i = self.check(v).ok()?;
        self.grads.get(i).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if self.nan_guard && !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.idx].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    // ----------------------------------------------------------------
    // linear algebra

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] · bᵀ` for `b [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (av.shape(), bv.shape());
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    // ----------------------------------------------------------------
    // element-wise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let out_shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })?;
        let la = Layout::of(av.shape(), &out_shape);
        let lb = Layout::of(bv.shape(), &out_shape);
        let data = zip_map(av.data(), &la, bv.data(), &lb, &out_shape, f);
        let value = Tensor::new(&out_shape, data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, TensorError> {
        let av = &self.node(a)?.value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::of(c);
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::of(c);
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x.exp(), Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x.ln(), Op::Log { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x.sqrt(), Op::Sqrt { a })
    }

    // ----------------------------------------------------------------
    // normalisation

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let av = &self.node(a)?.value;
        check_axis("softmax", av.shape(), axis)?;
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let mut out = av.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                softmax_strided(&mut out, base, n, inner);
            }
        }
        let value = Tensor::new(av.shape(), out)?;
        self.push(value, Op::Softmax { a, axis }, &[a])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let xv = &self.node(x)?.value;
        let gv = &self.node(gamma)?.value;
        let bv = &self.node(beta)?.value;
        let d = xv.last_dim();
        if gv.len() != d || bv.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    // ----------------------------------------------------------------
    // indexing and layout

    /// Rows of `table [V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = &self.node(table)?.value;
        if tv.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: tv.shape().to_vec(),
                reason: "embedding table must be 2-D",
            });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let first = self.node(parts[0])?.value.shape().to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = &self.nodes[p.idx].value;
                let block = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.node(a)?.value.clone().reshaped(shape)?;
        self.push(value, Op::Reshape { a }, &[a])
    }

    /// Flat gather: `out[i] = a.flat[idx[i]]`, reshaped to `shape`.
    pub fn take(&mut self, a: Var, idx: &[usize], shape: &[usize]) -> Result<Var, TensorError> {
        let av = &self.node(a)?.value;
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= av.len() {
                return Err(TensorError::IndexOutOfRange {
                    op: "take",
                    index: i,
                    extent: av.len(),
                });
            }
            out.push(av.data()[i]);
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Take {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    /// Rows of a 2-D tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let av = &self.node(a)?.value;
        if av.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: av.shape().to_vec(),
                reason: "gather_rows expects a 2-D tensor",
            });
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    extent: n,
                });
            }
            out.extend_from_slice(&av.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(&[rows.len(), d], out)?;
        self.push(
            value,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            &[a],
        )
    }

    /// `out[rows[j][i]] += parts[j][i]` into a zero `[n_rows, d]` tensor.
    /// Parts are accumulated in the order given.
    pub fn scatter_add_rows(
        &mut self,
        parts: &[Var],
        rows: &[Vec<usize>],
        n_rows: usize,
        d: usize,
    ) -> Result<Var, TensorError> {
        if parts.len() != rows.len() {
            return Err(TensorError::Invalid {
                op: "scatter_add_rows",
                reason: format!("{} parts but {} row lists", parts.len(), rows.len()),
            });
        }
        let mut out = vec![T::zero(); n_rows * d];
        for (&p, idx) in parts.iter().zip(rows) {
            let pv = &self.node(p)?.value;
            if pv.shape() != [idx.len(), d] {
                return Err(TensorError::ShapeMismatch {
                    op: "scatter_add_rows",
                    lhs: pv.shape().to_vec(),
                    rhs: vec![idx.len(), d],
                });
            }
            for (i, &r) in idx.iter().enumerate() {
                if r >= n_rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "scatter_add_rows",
                        index: r,
                        extent: n_rows,
                    });
                }
                let src = &pv.data()[i * d..(i + 1) * d];
                out[r * d..(r + 1) * d]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, &s)| *o += s);
            }
        }
        let value = Tensor::new(&[n_rows, d], out)?;
        self.push(
            value,
            Op::ScatterAddRows {
                parts: parts.to_vec(),
                rows: rows.to_vec(),
            },
            parts,
        )
    }

    // ----------------------------------------------------------------
    // reductions

    fn reduce_axis(
        &mut self,
        a: Var,
        axis: usize,
        name: &'static str,
    ) -> Result<(Vec<usize>, Vec<T>, usize), TensorError> {
        let av = &self.node(a)?.value;
        check_axis(name, av.shape(), axis)?;
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let mut sums = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &av.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                sums[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(s, &x)| *s += x);
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((shape, sums, n))
    }

    /// Sum along `axis` (axis removed).
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (shape, sums, _) = self.reduce_axis(a, axis, "sum")?;
        self.push(Tensor::new(&shape, sums)?, Op::Sum { a, axis }, &[a])
    }

    /// Mean along `axis` (axis removed).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (shape, mut sums, n) = self.reduce_axis(a, axis, "mean")?;
        let nn = T::of(n as f64);
        sums.iter_mut().for_each(|s| *s /= nn);
        self.push(Tensor::new(&shape, sums)?, Op::Mean { a, axis }, &[a])
    }

    /// Population variance along `axis` (axis removed).
    pub fn variance(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (shape, mut mean, n) = self.reduce_axis(a, axis, "variance")?;
        let nn = T::of(n as f64);
        mean.iter_mut().for_each(|s| *s /= nn);
        let av = &self.nodes[a.idx].value;
        let (outer, _, inner) = axis_split(av.shape(), axis);
        let mut var = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let dlt = av.data()[(o * n + j) * inner + i] - mean[o * inner + i];
                    var[o * inner + i] += dlt * dlt;
                }
            }
        }
        var.iter_mut().for_each(|s| *s /= nn);
        self.push(Tensor::new(&shape, var)?, Op::Variance { a, axis, mean }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.node(a)?.value.data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll { a }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = &self.node(a)?.value;
        let s = av.data().iter().copied().sum::<T>() / T::of(av.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll { a }, &[a])
    }

    // ----------------------------------------------------------------
    // fused

    /// Mean cross-entropy (nats) of `logits [M, V]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let lv = &self.node(logits)?.value;
        if lv.shape().len() != 2 || lv.shape()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (m, v) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: v,
                });
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            let lse = max + z.ln();
            total += (lse - lv.data()[r * v + t]).f64();
            row.iter_mut().for_each(|x| *x /= z);
        }
        let value = Tensor::scalar(T::of(total / m as f64));
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, heads * head_dim]`, rows ordered by
    /// sequence then position. Position `t` attends to positions `0..=t`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (qv, kv, vv) = (
            &self.node(q)?.value,
            &self.node(k)?.value,
            &self.node(v)?.value,
        );
        let shape = qv.shape().to_vec();
        if shape.len() != 2 || kv.shape() != shape.as_slice() || vv.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "causal_attention",
                lhs: shape,
                rhs: kv.shape().to_vec(),
            });
        }
        let d = shape[1];
        if shape[0] != batch * seq || heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "causal_attention",
                reason: format!("shape {shape:?} incompatible with batch {batch}, seq {seq}, heads {heads}"),
            });
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                T::gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    &qv.data()[off..],
                    d as isize,
                    1,
                    &kv.data()[off..],
                    1,
                    d as isize,
                    T::zero(),
                    p,
                    seq as isize,
                    1,
                );
                for t in 0..seq {
                    let row = &mut p[t * seq..(t + 1) * seq];
                    row[t + 1..].iter_mut().for_each(|x| *x = T::zero());
                    softmax_strided(&mut row[..=t], 0, t + 1, 1);
                }
                T::gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    p,
                    seq as isize,
                    1,
                    &vv.data()[off..],
                    d as isize,
                    1,
                    T::zero(),
                    &mut out[off..],
                    d as isize,
                    1,
                );
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    // ----------------------------------------------------------------
    // backward

    /// Accumulates d(loss)/d(leaf) for every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let li = self.check(loss)?;
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        let ls = self.nodes[li].value.shape();
        if self.nodes[li].value.len() != 1 || ls.len() > 1 {
            return Err(TensorError::NotScalar(ls.to_vec()));
        }
        if !self.nodes[li].requires_grad {
            return Err(TensorError::Detached);
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[li] = Some(Tensor::full(ls, T::one()));
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        let wants = |v: &Var| nodes[v.idx].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.idx].value, &nodes[b.idx].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if wants(a) {
                    // dA = dC · Bᵀ  (B is [k,n], or [n,k] when transposed)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    let ga = slot(grads, nodes, a.idx);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        bv.data(),
                        rsb,
                        csb,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if wants(b) {
                    let gb = slot(grads, nodes, b.idx);
                    if *trans_b {
                        // dB [n,k] = dCᵀ · A
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            g.data(),
                            1,
                            n as isize,
                            av.data(),
                            k as isize,
                            1,
                            T::one(),
                            gb,
                            k as isize,
                            1,
                        );
                    } else {
                        // dB [k,n] = Aᵀ · dC
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av.data(),
                            1,
                            k as isize,
                            g.data(),
                            n as isize,
                            1,
                            T::one(),
                            gb,
                            n as isize,
                            1,
                        );
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(nodes[i].op, Op::Sub { .. });
                if wants(a) {
                    let l = Layout::of(nodes[a.idx].value.shape(), out.shape());
                    reduce_into(g.data(), &l, out.shape(), slot(grads, nodes, a.idx));
                }
                if wants(b) {
                    let l = Layout::of(nodes[b.idx].value.shape(), out.shape());
                    if neg {
                        let ng: Vec<T> = g.data().iter().map(|&x| -x).collect();
                        reduce_into(&ng, &l, out.shape(), slot(grads, nodes, b.idx));
                    } else {
                        reduce_into(g.data(), &l, out.shape(), slot(grads, nodes, b.idx));
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.idx].value, &nodes[b.idx].value);
                let la = Layout::of(av.shape(), out.shape());
                let lb = Layout::of(bv.shape(), out.shape());
                let lg = Layout::Same;
                if wants(a) {
                    let t = zip_map(g.data(), &lg, bv.data(), &lb, out.shape(), |x, y| x * y);
                    reduce_into(&t, &la, out.shape(), slot(grads, nodes, a.idx));
                }
                if wants(b) {
                    let t = zip_map(g.data(), &lg, av.data(), &la, out.shape(), |x, y| x * y);
                    reduce_into(&t, &lb, out.shape(), slot(grads, nodes, b.idx));
                }
            }
            Op::Div { a, b } => {
                let bv = &nodes[b.idx].value;
                let la = Layout::of(nodes[a.idx].value.shape(), out.shape());
                let lb = Layout::of(bv.shape(), out.shape());
                let lg = Layout::Same;
                let g_over_b = zip_map(g.data(), &lg, bv.data(), &lb, out.shape(), |x, y| x / y);
                if wants(a) {
                    reduce_into(&g_over_b, &la, out.shape(), slot(grads, nodes, a.idx));
                }
                if wants(b) {
                    let t: Vec<T> = g_over_b
                        .iter()
                        .zip(out.data())
                        .map(|(&x, &y)| -x * y)
                        .collect();
                    reduce_into(&t, &lb, out.shape(), slot(grads, nodes, b.idx));
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                accumulate(slot(grads, nodes, a.idx), g.data().iter().map(|&x| x * c));
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                accumulate(slot(grads, nodes, a.idx), g.data().iter().copied());
            }
            Op::Relu { a } => {
                let x = nodes[a.idx].value.data();
                accumulate(
                    slot(grads, nodes, a.idx),
                    g.data()
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() }),
                );
            }
            Op::Sigmoid { a } => {
                accumulate(
                    slot(grads, nodes, a.idx),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gi, &y)| gi * y * (T::one() - y)),
                );
            }
            Op::Exp { a } => {
                accumulate(
                    slot(grads, nodes, a.idx),
                    g.data().iter().zip(out.data()).map(|(&gi, &y)| gi * y),
                );
            }
            Op::Log { a } => {
                let x = nodes[a.idx].value.data();
                accumulate(
                    slot(grads, nodes, a.idx),
                    g.data().iter().zip(x).map(|(&gi, &xi)| gi / xi),
                );
            }
            Op::Sqrt { a } => {
                let half = T::of(0.5);
                accumulate(
                    slot(grads, nodes, a.idx),
                    g.data().iter().zip(out.data()).map(|(&gi, &y)| gi * half / y),
                );
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let ga = slot(grads, nodes, a.idx);
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |t: usize| (o * n + t) * inner + j;
                        let dot: T = (0..n).map(|t| g.data()[at(t)] * y[at(t)]).sum();
                        for t in 0..n {
                            ga[at(t)] += y[at(t)] * (g.data()[at(t)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let rows = out.rows();
                let gam = nodes[gamma.idx].value.data().to_vec();
                if wants(gamma) {
                    let gg = slot(grads, nodes, gamma.idx);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(beta) {
                    let gb = slot(grads, nodes, beta.idx);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g.data()[r * d + j];
                        }
                    }
                }
                if wants(x) {
                    let gx = slot(grads, nodes, x.idx);
                    let dn = T::of(d as f64);
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            gx[r * d + j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.last_dim();
                let gt = slot(grads, nodes, table.idx);
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[r * d..(r + 1) * d])
                        .for_each(|(t, &x)| *t += x);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut start = 0;
                for p in parts {
                    let len = nodes[p.idx].value.shape()[*axis];
                    if wants(p) {
                        let gp = slot(grads, nodes, p.idx);
                        for o in 0..outer {
                            let src = &g.data()[(o * total + start) * inner..(o * total + start + len) * inner];
                            gp[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(t, &x)| *t += x);
                        }
                    }
                    start += len;
                }
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let shape = nodes[a.idx].value.shape().to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let f = if matches!(nodes[i].op, Op::Mean { .. }) {
                    T::one() / T::of(n as f64)
                } else {
                    T::one()
                };
                let ga = slot(grads, nodes, a.idx);
                for o in 0..outer {
                    for j in 0..n {
                        for k in 0..inner {
                            ga[(o * n + j) * inner + k] += g.data()[o * inner + k] * f;
                        }
                    }
                }
            }
            Op::Variance { a, axis, mean } => {
                let av = &nodes[a.idx].value;
                let (outer, n, inner) = axis_split(av.shape(), *axis);
                let f = T::of(2.0 / n as f64);
                let x = av.data().to_vec();
                let ga = slot(grads, nodes, a.idx);
                for o in 0..outer {
                    for j in 0..n {
                        for k in 0..inner {
                            let at = (o * n + j) * inner + k;
                            ga[at] += g.data()[o * inner + k] * f * (x[at] - mean[o * inner + k]);
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                let gi = g.data()[0];
                slot(grads, nodes, a.idx).iter_mut().for_each(|t| *t += gi);
            }
            Op::MeanAll { a } => {
                let n = nodes[a.idx].value.len();
                let gi = g.data()[0] / T::of(n as f64);
                slot(grads, nodes, a.idx).iter_mut().for_each(|t| *t += gi);
            }
            Op::Take { a, idx } => {
                let ga = slot(grads, nodes, a.idx);
                for (k, &j) in idx.iter().enumerate() {
                    ga[j] += g.data()[k];
                }
            }
            Op::GatherRows { a, rows } => {
                let d = out.last_dim();
                let ga = slot(grads, nodes, a.idx);
                for (k, &r) in rows.iter().enumerate() {
                    ga[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[k * d..(k + 1) * d])
                        .for_each(|(t, &x)| *t += x);
                }
            }
            Op::ScatterAddRows { parts, rows } => {
                let d = out.last_dim();
                for (p, idx) in parts.iter().zip(rows) {
                    if !wants(p) {
                        continue;
                    }
                    let gp = slot(grads, nodes, p.idx);
                    for (k, &r) in idx.iter().enumerate() {
                        gp[k * d..(k + 1) * d]
                            .iter_mut()
                            .zip(&g.data()[r * d..(r + 1) * d])
                            .for_each(|(t, &x)| *t += x);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.idx].value.last_dim();
                let f = g.data()[0] / T::of(targets.len() as f64);
                let gl = slot(grads, nodes, logits.idx);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * v + j] += f * (probs[r * v + j] - onehot);
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = out.last_dim();
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (
                    nodes[q.idx].value.data(),
                    nodes[k.idx].value.data(),
                    nodes[v.idx].value.data(),
                );
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); qd.len()];
                let mut dv = vec![T::zero(); qd.len()];
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let go = &g.data()[off..];
                        // dP = dO · Vᵀ
                        T::gemm(
                            seq,
                            dh,
                            seq,
                            T::one(),
                            go,
                            d as isize,
                            1,
                            &vd[off..],
                            1,
                            d as isize,
                            T::zero(),
                            &mut dp,
                            seq as isize,
                            1,
                        );
                        // dV += Pᵀ · dO
                        T::gemm(
                            seq,
                            seq,
                            dh,
                            T::one(),
                            p,
                            1,
                            seq as isize,
                            go,
                            d as isize,
                            1,
                            T::one(),
                            &mut dv[off..],
                            d as isize,
                            1,
                        );
                        for t in 0..seq {
                            let pr = &p[t * seq..(t + 1) * seq];
                            let dr = &mut dp[t * seq..(t + 1) * seq];
                            let dot: T = (0..=t).map(|s| pr[s] * dr[s]).sum();
                            for s in 0..seq {
                                dr[s] = if s <= t { pr[s] * (dr[s] - dot) } else { T::zero() };
                            }
                        }
                        T::gemm(
                            seq,
                            seq,
                            dh,
                            scale,
                            &dp,
                            seq as isize,
                            1,
                            &kd[off..],
                            d as isize,
                            1,
                            T::one(),
                            &mut dq[off..],
                            d as isize,
                            1,
                        );
                        T::gemm(
                            seq,
                            seq,
                            dh,
                            scale,
                            &dp,
                            1,
                            seq as isize,
                            &qd[off..],
                            d as isize,
                            1,
                            T::one(),
                            &mut dk[off..],
                            d as isize,
                            1,
                        );
                    }
                }
                for (var, local) in [(q, dq), (k, dk), (v, dv)] {
                    if wants(var) {
                        accumulate(slot(grads, nodes, var.idx), local.into_iter());
                    }
                }
            }
        }
    }
}

fn slot<'g, T: Scalar>(grads: &'g mut [Option<Tensor<T>>], nodes: &[Node<T>], idx: usize) -> &'g mut [T] {
    grads[idx]
        .get_or_insert_with(|| Tensor::zeros(nodes[idx].value.shape()))
        .data_mut()
}

fn accumulate<T: Scalar>(dst: &mut [T], src: impl Iterator<Item = T>) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::Invalid {
            op,
            reason: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place max-subtracted softmax over `n` elements spaced `stride` apart.
pub(crate) fn softmax_strided<T: Scalar>(buf: &mut [T], base: usize, n: usize, stride: usize) {
    let mut max = T::neg_infinity();
    for t in 0..n {
        max = max.max(buf[base + t * stride]);
    }
    let mut z = T::zero();
    for t in 0..n {
        let e = (buf[base + t * stride] - max).exp();
        buf[base + t * stride] = e;
        z += e;
    }
    for t in 0..n {
        buf[base + t * stride] /= z;
    }
}
