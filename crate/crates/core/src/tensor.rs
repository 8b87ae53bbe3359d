//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] is an append-only arena of [`Tensor`] nodes. Every op pushes a
//! new node whose inputs are earlier node ids, so ids are strictly
//! topologically ordered and [`Tape::backward`] is a single reverse sweep
//! that applies each op's vector-Jacobian product. The tape is rebuilt from
//! scratch for every forward pass; nothing is retained across passes except
//! the parameter values owned by the caller.
//!
//! Gradients are only materialized for nodes that (transitively) depend on a
//! leaf created with `requires_grad = true`, so frozen weights cost nothing
//! at backward time.

use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
pub type TensorId = usize;

/// One node on the tape: a value buffer plus its shape.
#[derive(Debug, Clone)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
}

impl Tensor {
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The op that produced a node, with everything backward needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[m,k] @ [k,n]` or batched `[b,m,k] @ [k,n]`.
    MatMul { a: TensorId, b: TensorId },
    /// 2-D transpose.
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// Multiply by a compile-time constant.
    Scale { a: TensorId, c: f64 },
    /// Multiply every element of `a` by the single-element node `s`.
    MulScalar { s: TensorId, a: TensorId },
    /// Add a `[n]` vector to every row of a `[m,n]` matrix.
    AddRow { mat: TensorId, vec: TensorId },
    Relu { a: TensorId },
    Exp { a: TensorId },
    Log { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    /// Normalize the last axis to zero mean / unit variance, then apply the
    /// `[n]` affine parameters `gamma` and `beta`.
    LayerNorm {
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    /// Sum every element into a `[1]` scalar.
    SumAll { a: TensorId },
    /// Pick elements of a rank-1 tensor: `out[j] = a[idx[j]]`.
    Gather { a: TensorId, idx: Vec<usize> },
    /// Spread a rank-1 `[k]` tensor into a zeroed `[n]` tensor at distinct
    /// positions: `out[idx[j]] = a[j]`.
    ScatterTo { a: TensorId, idx: Vec<usize> },
    /// Extract row `i` of a `[m,n]` matrix as a `[n]` vector.
    Row { a: TensorId, i: usize },
    /// Stack two matrices with equal column counts, `a` on top of `b`.
    ConcatRows { a: TensorId, b: TensorId },
    /// Columns `[start, start+len)` of a `[m,n]` matrix.
    ColSlice { a: TensorId, start: usize, len: usize },
    /// Concatenate matrices with equal row counts along columns.
    ConcatCols { parts: Vec<TensorId> },
    /// Select rows of a `[v,n]` matrix: `out[t] = a[idx[t]]`. Indices may
    /// repeat; backward accumulates.
    GatherRows { a: TensorId, idx: Vec<usize> },
    /// Scale a rank-1 tensor to unit Euclidean norm.
    L2Normalize { a: TensorId },
    /// Same data, new shape with equal element count.
    Reshape { a: TensorId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MulScalar { .. } => "mul_scalar",
            Op::AddRow { .. } => "add_row",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAll { .. } => "sum_all",
            Op::Gather { .. } => "gather",
            Op::ScatterTo { .. } => "scatter_to",
            Op::Row { .. } => "row",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ColSlice { .. } => "col_slice",
            Op::ConcatCols { .. } => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Reshape { .. } => "reshape",
        }
    }
}

/// Append-only computation graph. See module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    /// Smallest `|x|` seen by any `relu` this pass. Finite-difference
    /// checking uses this to reject inputs that sit on the ReLU kink.
    min_relu_abs: f64,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            min_relu_abs: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest absolute pre-activation any `relu` saw this pass
    /// (`+inf` if no relu ran).
    pub fn min_relu_abs(&self) -> f64 {
        self.min_relu_abs
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Value of a single-element node.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id].numel(), 1);
        self.nodes[id].data[0]
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if one was
    /// accumulated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// First node (in creation order) holding a NaN or infinity, with the
    /// name of the op that produced it.
    pub fn first_non_finite(&self) -> Option<(TensorId, &'static str)> {
        for (id, node) in self.nodes.iter().enumerate() {
            if node.data.iter().any(|v| !v.is_finite()) {
                return Some((id, self.ops[id].name()));
            }
        }
        None
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad,
        });
        self.ops.push(op);
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn check(&self, op: &'static str, id: TensorId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::InvalidArgument {
                op,
                msg: format!("tensor id {id} is not on the tape (len {})", self.nodes.len()),
            });
        }
        Ok(())
    }

    // ---------------------------------------------------------------- leaves

    /// Create a leaf node. `requires_grad` marks it as a differentiation
    /// target; gradients only flow to (and through) such leaves.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if data.len() != numel || shape.is_empty() {
            return Err(Error::InvalidArgument {
                op: "leaf",
                msg: format!("data length {} does not match shape {:?}", data.len(), shape),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    /// A single-element constant.
    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    // ------------------------------------------------------------------- ops

    /// Matrix product: `[m,k] @ [k,n] -> [m,n]`, or batched
    /// `[b,m,k] @ [k,n] -> [b,m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        if sb.len() != 2 {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let (k2, n) = (sb[0], sb[1]);
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(Error::ShapeMismatch { op: "matmul", left: sa, right: sb }),
        };
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            mat_mul_acc(
                &self.nodes[a].data[bi * m * k..(bi + 1) * m * k],
                &self.nodes[b].data,
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(out, out_shape, rg, Op::MatMul { a, b }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("transpose", a)?;
        let s = self.nodes[a].shape.clone();
        if s.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank-2 tensor, got shape {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.nodes[a].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, vec![n, m], rg, Op::Transpose { a }))
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        self.check(op_name, a)?;
        self.check(op_name, b)?;
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(out, shape, rg, op))
    }

    /// Elementwise sum of two equal-shaped tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    /// Elementwise difference of two equal-shaped tensors.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product of two equal-shaped tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.check("scale", a)?;
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, shape, rg, Op::Scale { a, c }))
    }

    /// Multiply tensor `a` by the single-element node `s`. Gradient flows to
    /// both operands.
    pub fn mul_scalar(&mut self, s: TensorId, a: TensorId) -> Result<TensorId> {
        self.check("mul_scalar", s)?;
        self.check("mul_scalar", a)?;
        if self.nodes[s].numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "mul_scalar",
                msg: format!("scalar operand must have one element, got shape {:?}", self.nodes[s].shape),
            });
        }
        let sv = self.nodes[s].data[0];
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| sv * x).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad || self.nodes[s].requires_grad;
        Ok(self.push(out, shape, rg, Op::MulScalar { s, a }))
    }

    /// Add a `[n]` vector to every row of a `[m,n]` matrix.
    pub fn add_row(&mut self, mat: TensorId, vec_id: TensorId) -> Result<TensorId> {
        self.check("add_row", mat)?;
        self.check("add_row", vec_id)?;
        let sm = self.nodes[mat].shape.clone();
        let sv = self.nodes[vec_id].shape.clone();
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch { op: "add_row", left: sm, right: sv });
        }
        let (m, n) = (sm[0], sm[1]);
        let mut out = self.nodes[mat].data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += self.nodes[vec_id].data[j];
            }
        }
        let rg = self.nodes[mat].requires_grad || self.nodes[vec_id].requires_grad;
        Ok(self.push(out, vec![m, n], rg, Op::AddRow { mat, vec: vec_id }))
    }

    /// Elementwise `max(x, 0)`. The derivative at exactly zero is taken as 0.
    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("relu", a)?;
        for &x in &self.nodes[a].data {
            let ax = x.abs();
            if ax < self.min_relu_abs {
                self.min_relu_abs = ax;
            }
        }
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, shape, rg, Op::Relu { a }))
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("exp", a)?;
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x.exp()).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, shape, rg, Op::Exp { a }))
    }

    /// Elementwise natural log. Errors on non-positive input rather than
    /// producing NaN/-inf.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("log", a)?;
        if let Some(&bad) = self.nodes[a].data.iter().find(|v| **v <= 0.0) {
            return Err(Error::InvalidArgument {
                op: "log",
                msg: format!("input must be strictly positive, found {bad}"),
            });
        }
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x.ln()).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, shape, rg, Op::Log { a }))
    }

    /// Numerically stable softmax along `axis` (max is subtracted per lane).
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.check("softmax", a)?;
        let shape = self.nodes[a].shape.clone();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, lane, inner) = lane_dims(&shape, axis);
        let src = &self.nodes[a].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lane {
                    max = max.max(src[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = (src[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, shape, rg, Op::Softmax { a, axis }))
    }

    /// Layer normalization over the last axis with affine parameters
    /// (`gamma`, `beta`, both `[n]`). Variance is the biased estimate.
    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        self.check("layer_norm", a)?;
        self.check("layer_norm", gamma)?;
        self.check("layer_norm", beta)?;
        let shape = self.nodes[a].shape.clone();
        let n = *shape.last().ok_or_else(|| Error::InvalidArgument {
            op: "layer_norm",
            msg: "input must have rank >= 1".into(),
        })?;
        if self.nodes[gamma].shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.nodes[gamma].shape.clone(),
            });
        }
        if self.nodes[beta].shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.nodes[beta].shape.clone(),
            });
        }
        let lanes = self.nodes[a].numel() / n;
        let mut out = vec![0.0; self.nodes[a].numel()];
        for l in 0..lanes {
            let x = &self.nodes[a].data[l * n..(l + 1) * n];
            let (mean, var) = mean_var(x);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (x[j] - mean) * inv;
                out[l * n + j] = self.nodes[gamma].data[j] * xhat + self.nodes[beta].data[j];
            }
        }
        let rg = self.nodes[a].requires_grad
            || self.nodes[gamma].requires_grad
            || self.nodes[beta].requires_grad;
        Ok(self.push(out, shape, rg, Op::LayerNorm { a, gamma, beta, eps }))
    }

    /// Sum all elements into a `[1]` scalar.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("sum_all", a)?;
        let s: f64 = self.nodes[a].data.iter().sum();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(vec![s], vec![1], rg, Op::SumAll { a }))
    }

    /// Pick elements of a rank-1 tensor: `out[j] = a[idx[j]]`.
    pub fn gather(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        self.check("gather", a)?;
        let s = self.nodes[a].shape.clone();
        if s.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "gather",
                msg: format!("expected rank-1 tensor, got shape {s:?}"),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for length {}", s[0]),
            });
        }
        let out: Vec<f64> = idx.iter().map(|&i| self.nodes[a].data[i]).collect();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, vec![idx.len()], rg, Op::Gather { a, idx: idx.to_vec() }))
    }

    /// Spread a rank-1 `[k]` tensor into a zeroed `[n]` vector at `idx`
    /// (indices must be distinct).
    pub fn scatter_to(&mut self, a: TensorId, idx: &[usize], n: usize) -> Result<TensorId> {
        self.check("scatter_to", a)?;
        let s = self.nodes[a].shape.clone();
        if s.len() != 1 || s[0] != idx.len() {
            return Err(Error::InvalidArgument {
                op: "scatter_to",
                msg: format!("expected rank-1 tensor of length {}, got shape {s:?}", idx.len()),
            });
        }
        let mut seen = vec![false; n];
        for &i in idx {
            if i >= n {
                return Err(Error::InvalidArgument {
                    op: "scatter_to",
                    msg: format!("index {i} out of range for length {n}"),
                });
            }
            if seen[i] {
                return Err(Error::InvalidArgument {
                    op: "scatter_to",
                    msg: format!("duplicate index {i}"),
                });
            }
            seen[i] = true;
        }
        let mut out = vec![0.0; n];
        for (j, &i) in idx.iter().enumerate() {
            out[i] = self.nodes[a].data[j];
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, vec![n], rg, Op::ScatterTo { a, idx: idx.to_vec() }))
    }

    /// Extract row `i` of a `[m,n]` matrix as a `[n]` vector.
    pub fn row(&mut self, a: TensorId, i: usize) -> Result<TensorId> {
        self.check("row", a)?;
        let s = self.nodes[a].shape.clone();
        if s.len() != 2 || i >= s[0] {
            return Err(Error::InvalidArgument {
                op: "row",
                msg: format!("row {i} out of range for shape {s:?}"),
            });
        }
        let n = s[1];
        let out = self.nodes[a].data[i * n..(i + 1) * n].to_vec();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, vec![n], rg, Op::Row { a, i }))
    }

    /// Stack `a` on top of `b` (equal column counts).
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check("concat_rows", a)?;
        self.check("concat_rows", b)?;
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch { op: "concat_rows", left: sa, right: sb });
        }
        let mut out = self.nodes[a].data.clone();
        out.extend_from_slice(&self.nodes[b].data);
        let shape = vec![sa[0] + sb[0], sa[1]];
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(out, shape, rg, Op::ConcatRows { a, b }))
    }

    /// Columns `[start, start+len)` of a `[m,n]` matrix.
    pub fn col_slice(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check("col_slice", a)?;
        let s = self.nodes[a].shape.clone();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::InvalidArgument {
                op: "col_slice",
                msg: format!("columns [{start}, {}) out of range for shape {s:?}", start + len),
            });
        }
        let (m, n) = (s[0], s[1]);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.nodes[a].data[i * n + start..i * n + start + len]);
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, vec![m, len], rg, Op::ColSlice { a, start, len }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_cols",
                msg: "need at least one input".into(),
            });
        }
        for &p in parts {
            self.check("concat_cols", p)?;
        }
        let m = self.nodes[parts[0]].shape.first().copied().unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let s = &self.nodes[p].shape;
            if s.len() != 2 || s[0] != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0]].shape.clone(),
                    right: s.clone(),
                });
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let n = self.nodes[p].shape[1];
                out.extend_from_slice(&self.nodes[p].data[i * n..(i + 1) * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(out, vec![m, total], rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Select rows of a `[v,n]` matrix (embedding lookup). Indices may repeat.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        self.check("gather_rows", a)?;
        let s = self.nodes[a].shape.clone();
        if s.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                msg: format!("expected rank-2 tensor, got shape {s:?}"),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for {} rows", s[0]),
            });
        }
        let n = s[1];
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&self.nodes[a].data[i * n..(i + 1) * n]);
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, vec![idx.len(), n], rg, Op::GatherRows { a, idx: idx.to_vec() }))
    }

    /// Scale a rank-1 tensor to unit Euclidean norm. Errors on the zero
    /// vector.
    pub fn l2_normalize(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("l2_normalize", a)?;
        let s = self.nodes[a].shape.clone();
        if s.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "l2_normalize",
                msg: format!("expected rank-1 tensor, got shape {s:?}"),
            });
        }
        let norm = self.nodes[a].data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument {
                op: "l2_normalize",
                msg: "cannot normalize the zero vector".into(),
            });
        }
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x / norm).collect();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(out, s, rg, Op::L2Normalize { a }))
    }

    /// Reinterpret the same elements under a new shape.
    pub fn reshape(&mut self, a: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        self.check("reshape", a)?;
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[a].numel() || new_shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.nodes[a].shape.clone(),
                right: new_shape.to_vec(),
            });
        }
        let data = self.nodes[a].data.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(data, new_shape.to_vec(), rg, Op::Reshape { a }))
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from the single-element node `loss`, accumulating
    /// gradients into every node that requires them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check("backward", loss)?;
        if self.nodes[loss].numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                msg: format!("target must be a single-element tensor, got shape {:?}", self.nodes[loss].shape),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if self.grads[id].is_none() || matches!(self.ops[id], Op::Leaf) {
                continue;
            }
            // Inputs always precede outputs on the tape, so splitting at `id`
            // lets us read this node's gradient while writing its inputs'.
            let (lower, upper) = self.grads.split_at_mut(id);
            let g = upper[0].as_deref().expect("grad present");
            let nodes = &self.nodes;
            let op = &self.ops[id];
            apply_vjp(op, id, g, nodes, lower, self.nodes[id].shape.as_slice());
        }
        Ok(())
    }
}

/// Accumulate `contrib` into the gradient buffer of `id` (no-op for nodes
/// that do not require grad).
fn acc_into(
    lower: &mut [Option<Vec<f64>>],
    nodes: &[Tensor],
    id: TensorId,
    contrib: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let numel = nodes[id].numel();
    let buf = lower[id].get_or_insert_with(|| vec![0.0; numel]);
    contrib(buf);
}

fn apply_vjp(
    op: &Op,
    out_id: TensorId,
    g: &[f64],
    nodes: &[Tensor],
    lower: &mut [Option<Vec<f64>>],
    out_shape: &[usize],
) {
    match *op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let sa = &nodes[a].shape;
            let (batch, m, k) = if sa.len() == 2 { (1, sa[0], sa[1]) } else { (sa[0], sa[1], sa[2]) };
            let n = nodes[b].shape[1];
            acc_into(lower, nodes, a, |da| {
                for bi in 0..batch {
                    mat_mul_nt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &nodes[b].data,
                        m,
                        n,
                        k,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                }
            });
            acc_into(lower, nodes, b, |db| {
                for bi in 0..batch {
                    mat_mul_tn_acc(
                        &nodes[a].data[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                        db,
                    );
                }
            });
        }
        Op::Transpose { a } => {
            let (n, m) = (out_shape[0], out_shape[1]);
            acc_into(lower, nodes, a, |da| {
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] += g[i * m + j];
                    }
                }
            });
        }
        Op::Add { a, b } => {
            acc_into(lower, nodes, a, |da| add_assign(da, g));
            acc_into(lower, nodes, b, |db| add_assign(db, g));
        }
        Op::Sub { a, b } => {
            acc_into(lower, nodes, a, |da| add_assign(da, g));
            acc_into(lower, nodes, b, |db| {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            });
        }
        Op::Mul { a, b } => {
            acc_into(lower, nodes, a, |da| {
                for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(&nodes[b].data) {
                    *d += gv * bv;
                }
            });
            acc_into(lower, nodes, b, |db| {
                for ((d, &gv), &av) in db.iter_mut().zip(g).zip(&nodes[a].data) {
                    *d += gv * av;
                }
            });
        }
        Op::Scale { a, c } => {
            acc_into(lower, nodes, a, |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += c * gv;
                }
            });
        }
        Op::MulScalar { s, a } => {
            let sv = nodes[s].data[0];
            acc_into(lower, nodes, s, |ds| {
                ds[0] += g.iter().zip(&nodes[a].data).map(|(&gv, &av)| gv * av).sum::<f64>();
            });
            acc_into(lower, nodes, a, |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += sv * gv;
                }
            });
        }
        Op::AddRow { mat, vec } => {
            let (m, n) = (out_shape[0], out_shape[1]);
            acc_into(lower, nodes, mat, |dm| add_assign(dm, g));
            acc_into(lower, nodes, vec, |dv| {
                for i in 0..m {
                    for j in 0..n {
                        dv[j] += g[i * n + j];
                    }
                }
            });
        }
        Op::Relu { a } => {
            acc_into(lower, nodes, a, |da| {
                for ((d, &gv), &x) in da.iter_mut().zip(g).zip(&nodes[a].data) {
                    if x > 0.0 {
                        *d += gv;
                    }
                }
            });
        }
        Op::Exp { a } => {
            acc_into(lower, nodes, a, |da| {
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(&nodes[out_id].data) {
                    *d += gv * y;
                }
            });
        }
        Op::Log { a } => {
            acc_into(lower, nodes, a, |da| {
                for ((d, &gv), &x) in da.iter_mut().zip(g).zip(&nodes[a].data) {
                    *d += gv / x;
                }
            });
        }
        Op::Softmax { a, axis } => {
            let (outer, lane, inner) = lane_dims(out_shape, axis);
            let y = &nodes[out_id].data;
            acc_into(lower, nodes, a, |da| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = 0.0;
                        for l in 0..lane {
                            let p = base + l * inner;
                            dot += g[p] * y[p];
                        }
                        for l in 0..lane {
                            let p = base + l * inner;
                            da[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { a, gamma, beta, eps } => {
            let n = *out_shape.last().unwrap();
            let lanes = nodes[a].numel() / n;
            let x = &nodes[a].data;
            let gam = &nodes[gamma].data;
            acc_into(lower, nodes, beta, |db| {
                for l in 0..lanes {
                    for j in 0..n {
                        db[j] += g[l * n + j];
                    }
                }
            });
            acc_into(lower, nodes, gamma, |dg| {
                for l in 0..lanes {
                    let lane_x = &x[l * n..(l + 1) * n];
                    let (mean, var) = mean_var(lane_x);
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..n {
                        dg[j] += g[l * n + j] * (lane_x[j] - mean) * inv;
                    }
                }
            });
            acc_into(lower, nodes, a, |da| {
                for l in 0..lanes {
                    let lane_x = &x[l * n..(l + 1) * n];
                    let lane_g = &g[l * n..(l + 1) * n];
                    let (mean, var) = mean_var(lane_x);
                    let inv = 1.0 / (var + eps).sqrt();
                    // dxhat_j = g_j * gamma_j; project out the components that
                    // change the lane mean and variance.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (lane_x[j] - mean) * inv;
                        let dxhat = lane_g[j] * gam[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let xhat = (lane_x[j] - mean) * inv;
                        let dxhat = lane_g[j] * gam[j];
                        da[l * n + j] += inv * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                    }
                }
            });
        }
        Op::SumAll { a } => {
            let gv = g[0];
            acc_into(lower, nodes, a, |da| {
                for d in da.iter_mut() {
                    *d += gv;
                }
            });
        }
        Op::Gather { a, ref idx } => {
            acc_into(lower, nodes, a, |da| {
                for (j, &i) in idx.iter().enumerate() {
                    da[i] += g[j];
                }
            });
        }
        Op::ScatterTo { a, ref idx, .. } => {
            acc_into(lower, nodes, a, |da| {
                for (j, &i) in idx.iter().enumerate() {
                    da[j] += g[i];
                }
            });
        }
        Op::Row { a, i } => {
            let n = out_shape[0];
            acc_into(lower, nodes, a, |da| {
                for j in 0..n {
                    da[i * n + j] += g[j];
                }
            });
        }
        Op::ConcatRows { a, b } => {
            let split = nodes[a].numel();
            acc_into(lower, nodes, a, |da| add_assign(da, &g[..split]));
            acc_into(lower, nodes, b, |db| add_assign(db, &g[split..]));
        }
        Op::ColSlice { a, start, len } => {
            let m = out_shape[0];
            let n = nodes[a].shape[1];
            acc_into(lower, nodes, a, |da| {
                for i in 0..m {
                    for j in 0..len {
                        da[i * n + start + j] += g[i * len + j];
                    }
                }
            });
        }
        Op::ConcatCols { ref parts } => {
            let m = out_shape[0];
            let total = out_shape[1];
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].shape[1];
                let off = offset;
                acc_into(lower, nodes, p, |dp| {
                    for i in 0..m {
                        for j in 0..n {
                            dp[i * n + j] += g[i * total + off + j];
                        }
                    }
                });
                offset += n;
            }
        }
        Op::GatherRows { a, ref idx } => {
            let n = nodes[a].shape[1];
            acc_into(lower, nodes, a, |da| {
                for (t, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += g[t * n + j];
                    }
                }
            });
        }
        Op::Reshape { a } => {
            acc_into(lower, nodes, a, |da| add_assign(da, g));
        }
        Op::L2Normalize { a } => {
            let norm = nodes[a].data.iter().map(|v| v * v).sum::<f64>().sqrt();
            let y = &nodes[out_id].data;
            let dot: f64 = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
            acc_into(lower, nodes, a, |da| {
                for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                    *d += (gv - yv * dot) / norm;
                }
            });
        }
    }
}

// ------------------------------------------------------------------ helpers

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Split a shape at `axis` into (outer, lane, inner) extents.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

/// `out += a @ b` for row-major `a: [m,k]`, `b: [k,n]`.
/// i-k-j loop order keeps the inner loop contiguous in both `b` and `out`.
fn mat_mul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += g @ b^T` for `g: [m,n]`, `b: [k,n]`, `out: [m,k]`.
fn mat_mul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            *o += dot;
        }
    }
}

/// `out += a^T @ g` for `a: [m,k]`, `g: [m,n]`, `out: [k,n]`.
fn mat_mul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// Indices of the `k` largest values, ordered by descending value; ties go to
/// the lower index. Selection itself is not differentiable and happens
/// outside the tape.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::InvalidArgument {
            op: "topk_indices",
            msg: format!("k = {k} out of range for {} values", values.len()),
        });
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument {
            op: "topk_indices",
            msg: "values contain NaN".into(),
        });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .expect("NaN ruled out above")
            .then(i.cmp(&j))
    });
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
        // Box-Muller keeps this independent of distribution crates.
        (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
            })
            .collect()
    }

    /// Triple-loop reference product, deliberately naive.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 8, 3), (17, 13, 11), (32, 32, 32)] {
            let a = randn(&mut rng, m * k, 1.0);
            let b = randn(&mut rng, k * n, 1.0);
            let mut tape = Tape::new();
            let ta = tape.constant(a.clone(), &[m, k]).unwrap();
            let tb = tape.constant(b.clone(), &[k, n]).unwrap();
            let tc = tape.matmul(ta, tb).unwrap();
            let want = matmul_oracle(&a, &b, m, k, n);
            for (got, want) in tape.data(tc).iter().zip(&want) {
                assert!((got - want).abs() <= 1e-12, "got {got}, want {want}");
            }
        }
    }

    #[test]
    fn batched_matmul_matches_per_slice_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (bsz, m, k, n) = (3, 4, 5, 6);
        let a = randn(&mut rng, bsz * m * k, 1.0);
        let b = randn(&mut rng, k * n, 1.0);
        let mut tape = Tape::new();
        let ta = tape.constant(a.clone(), &[bsz, m, k]).unwrap();
        let tb = tape.constant(b.clone(), &[k, n]).unwrap();
        let tc = tape.matmul(ta, tb).unwrap();
        assert_eq!(tape.shape(tc), &[bsz, m, n]);
        for bi in 0..bsz {
            let want = matmul_oracle(&a[bi * m * k..(bi + 1) * m * k], &b, m, k, n);
            let got = &tape.data(tc)[bi * m * n..(bi + 1) * m * n];
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 8], &[4, 2]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "unhelpful message: {msg}");
    }

    #[test]
    fn softmax_matches_closed_form_two_logits() {
        // softmax([1, 0]) = [e/(1+e), 1/(1+e)]
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 0.0], &[2]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.data(y)[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((tape.data(y)[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, 4 * 7, 3.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.456).collect();
        let mut tape = Tape::new();
        let a = tape.constant(x, &[4, 7]).unwrap();
        let b = tape.constant(shifted, &[4, 7]).unwrap();
        let sa = tape.softmax(a, 1).unwrap();
        let sb = tape.softmax(b, 1).unwrap();
        for r in 0..4 {
            let row = &tape.data(sa)[r * 7..(r + 1) * 7];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for (va, vb) in tape.data(sa).iter().zip(tape.data(sb)) {
            assert!((va - vb).abs() < 1e-12, "softmax must be shift-invariant");
        }
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let s = tape.softmax(a, 0).unwrap();
        let d = tape.data(s);
        for col in 0..2 {
            let sum = d[col] + d[2 + col] + d[4 + col];
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_hand_value() {
        // x = [1, 3]: mean 2, var 1, normalized [-1, 1] (eps = 0).
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 3.0], &[2]).unwrap();
        let gamma = tape.constant(vec![1.0, 1.0], &[2]).unwrap();
        let beta = tape.constant(vec![0.0, 0.0], &[2]).unwrap();
        let y = tape.layer_norm(x, gamma, beta, 0.0).unwrap();
        assert!((tape.data(y)[0] + 1.0).abs() < 1e-12);
        assert!((tape.data(y)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_hand_value() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3.0, 4.0], &[2]).unwrap();
        let y = tape.l2_normalize(x).unwrap();
        assert!((tape.data(y)[0] - 0.6).abs() < 1e-15);
        assert!((tape.data(y)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let k = rng.gen_range(1..=n);
            // Coarse values force frequent ties.
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64).collect();
            let got = topk_indices(&values, k).unwrap();
            // Oracle: full stable sort by (-value, index).
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap().then(i.cmp(&j)));
            assert_eq!(got, order[..k], "values {values:?} k {k}");
        }
    }

    #[test]
    fn topk_breaks_ties_toward_lower_index() {
        let got = topk_indices(&[2.0, 5.0, 5.0, 1.0], 2).unwrap();
        assert_eq!(got, vec![1, 2]);
        let got = topk_indices(&[7.0, 7.0, 7.0], 2).unwrap();
        assert_eq!(got, vec![0, 1]);
    }

    #[test]
    fn topk_orders_by_descending_value() {
        let got = topk_indices(&[0.1, 0.9, 0.5, 0.7], 3).unwrap();
        assert_eq!(got, vec![1, 3, 2]);
    }

    #[test]
    fn log_rejects_non_positive_input() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 0.0], &[2]).unwrap();
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn scatter_rejects_duplicate_indices() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0], &[2]).unwrap();
        assert!(tape.scatter_to(x, &[1, 1], 4).is_err());
    }

    #[test]
    fn gather_then_scatter_round_trips() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![10.0, 20.0, 30.0, 40.0], &[4]).unwrap();
        let g = tape.gather(x, &[3, 1]).unwrap();
        assert_eq!(tape.data(g), &[40.0, 20.0]);
        let s = tape.scatter_to(g, &[3, 1], 4).unwrap();
        assert_eq!(tape.data(s), &[0.0, 20.0, 0.0, 40.0]);
    }

    #[test]
    fn first_non_finite_names_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![800.0], &[1]).unwrap();
        let e = tape.exp(x).unwrap(); // overflows to +inf
        let hit = tape.first_non_finite().expect("should detect inf");
        assert_eq!(hit.0, e);
        assert_eq!(hit.1, "exp");
    }

    #[test]
    fn relu_tracks_minimum_absolute_preactivation() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![-2.0, 0.25, 3.0], &[3]).unwrap();
        tape.relu(x).unwrap();
        assert_eq!(tape.min_relu_abs(), 0.25);
    }

    #[test]
    fn backward_requires_scalar_target() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let y = tape.relu(x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(vec![1.0, 2.0], &[2], false).unwrap();
        let x = tape.leaf(vec![3.0, 4.0], &[2], true).unwrap();
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // loss = sum(x * x) => d/dx = 2x via two paths into Mul.
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0, -5.0], &[2], true).unwrap();
        let p = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, -10.0]);
    }
}
