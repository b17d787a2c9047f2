//! Record-then-reverse autodiff tape.
//!
//! A [`Graph`] owns every value computed during one forward pass. Operations
//! append a node and return a [`Var`] handle; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients into every node that requires
//! one. Node order on the tape is already topological, so no sort is needed.
//!
//! Besides the elementwise suite, the tape has fused nodes for the pieces of
//! a transformer that would otherwise dominate the tape length: embedding
//! lookup, RMS normalization, rotary position encoding, causal attention and
//! softmax cross-entropy. Each has a hand-written backward.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{gemm, Real};
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Cos,
    Sin,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale(Var, T),
    Unary(Unary, Var),
    Sum(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rotary {
        x: Var,
        theta: Var,
        positions: Vec<T>,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        scale: T,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

/// The tape. Single-threaded; build one per forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the NaN/Inf scan on every op output. On by
    /// default in debug builds.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires: bool, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    /// Adds a leaf node. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires_grad);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient of `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product. `a` is viewed as `[rows, k]` over its last axis; `b`
    /// must be two-dimensional `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored as `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if bv.shape().len() != 2 || av.shape().is_empty() {
            return Err(mismatch());
        }
        let (m, k) = av.as_matrix_dims();
        let (bk, n, rsb, csb) = if trans_b {
            (bv.shape()[1], bv.shape()[0], 1, bv.shape()[1])
        } else {
            (bv.shape()[0], bv.shape()[1], bv.shape()[1], 1)
        };
        if k != bk {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), (av.data(), k, 1), (bv.data(), rsb, csb), T::zero(), (&mut out, n, 1));
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let requires = self.req(&[a, b]);
        self.push(Tensor::new(shape, out)?, requires, Op::MatMul { a, b, trans_b }, "matmul")
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.is_scalar() {
            let y = bv.data()[0];
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect())?
        } else if av.is_scalar() {
            let x = av.data()[0];
            Tensor::new(bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let requires = self.req(&[a, b]);
        self.push(out, requires, Op::Binary { kind, a, b }, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let av = &self.values[a.0];
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * c).collect())?;
        let requires = self.req(&[a]);
        self.push(out, requires, Op::Scale(a, c), "scale")
    }

    fn unary(&mut self, kind: Unary, a: Var, name: &'static str) -> Result<Var> {
        let av = &self.values[a.0];
        let f = |x: T| match kind {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Cos => x.cos(),
            Unary::Sin => x.sin(),
            Unary::Silu => x * sigmoid(x),
        };
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())?;
        let requires = self.req(&[a]);
        self.push(out, requires, Op::Unary(kind, a), name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a, "log")
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Cos, a, "cos")
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sin, a, "sin")
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Silu, a, "silu")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].sum();
        let requires = self.req(&[a]);
        self.push(Tensor::scalar(s), requires, Op::Sum(a), "sum")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[a.0].clone().reshaped(shape)?;
        let requires = self.req(&[a]);
        self.push(out, requires, Op::Reshape(a), "reshape")
    }

    /// Gathers rows of `table` (`[vocab, dim]`) for each id; output `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.values[table.0];
        if tv.shape().len() != 2 {
            return Err(TensorError::Invalid("embedding table must be 2-D".into()));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let requires = self.req(&[table]);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push(Tensor::new(vec![ids.len(), dim], out)?, requires, op, "embedding")
    }

    /// Row-wise RMS normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let xv = &self.values[x.0];
        let gv = &self.values[gain.0];
        let (rows, cols) = xv.as_matrix_dims();
        if gv.numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        let n = T::of(cols as f64);
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in out[r * cols..(r + 1) * cols].iter_mut().zip(row).zip(gv.data()) {
                *o = v * inv * g;
            }
        }
        let requires = self.req(&[x, gain]);
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out)?, requires, Op::RmsNorm { x, gain, inv_rms }, "rms_norm")
    }

    /// Rotary position encoding of `x` (`[batch·seq, heads·head_dim]`).
    ///
    /// Row `r` sits at `positions[r % seq]`. Within each head the adjacent
    /// pair `(2i, 2i+1)` is rotated by `position · theta[i]`. Gradients flow
    /// into both `x` and `theta`.
    pub fn rotary(&mut self, x: Var, theta: Var, positions: &[T], head_dim: usize) -> Result<Var> {
        let xv = &self.values[x.0];
        let tv = &self.values[theta.0];
        let (rows, cols) = xv.as_matrix_dims();
        let half = head_dim / 2;
        if head_dim == 0 || !head_dim.is_multiple_of(2) || cols % head_dim != 0 || tv.numel() != half {
            return Err(TensorError::ShapeMismatch {
                op: "rotary",
                lhs: xv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let seq = positions.len();
        if seq == 0 || rows % seq != 0 {
            return Err(TensorError::Invalid("rotary: rows not a multiple of positions".into()));
        }
        let (cos, sin) = angle_table(positions, tv.data());
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let p = r % seq;
            let c = &cos[p * half..(p + 1) * half];
            let s = &sin[p * half..(p + 1) * half];
            for (xr, or) in xv.data()[r * cols..(r + 1) * cols]
                .chunks_exact(head_dim)
                .zip(out[r * cols..(r + 1) * cols].chunks_exact_mut(head_dim))
            {
                rotate_pairs(xr, or, c, s);
            }
        }
        let requires = self.req(&[x, theta]);
        let op = Op::Rotary {
            x,
            theta,
            positions: positions.to_vec(),
            head_dim,
        };
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out)?, requires, op, "rotary")
    }

    /// Causal multi-head attention over `[batch·seq, heads·head_dim]` inputs.
    /// Pre-softmax scores are `scale · q·kᵀ`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        scale: T,
    ) -> Result<Var> {
        let qv = &self.values[q.0];
        let kv = &self.values[k.0];
        let vv = &self.values[v.0];
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let (rows, d) = qv.as_matrix_dims();
        if batch == 0 || heads == 0 || rows % batch != 0 || d % heads != 0 {
            return Err(TensorError::Invalid("attention: bad batch/head split".into()));
        }
        let dims = AttnDims {
            batch,
            seq: rows / batch,
            heads,
            head_dim: d / heads,
        };
        let s = dims.seq;
        let dh = dims.head_dim;
        let mut probs = vec![T::zero(); batch * heads * s * s];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * s * d + h * dh;
                let p = &mut probs[(b * heads + h) * s * s..(b * heads + h + 1) * s * s];
                gemm(s, dh, s, scale, (&qv.data()[base..], d, 1), (&kv.data()[base..], 1, d), T::zero(), (p, s, 1));
                for i in 0..s {
                    softmax_causal_row(&mut p[i * s..(i + 1) * s], i);
                }
                gemm(s, s, dh, T::one(), (p, s, 1), (&vv.data()[base..], d, 1), T::zero(), (&mut out[base..], d, 1));
            }
        }
        let requires = self.req(&[q, k, v]);
        let shape = qv.shape().to_vec();
        let op = Op::Attention {
            q,
            k,
            v,
            dims,
            scale,
            probs,
        };
        self.push(Tensor::new(shape, out)?, requires, op, "attention")
    }

    /// Mean negative log-likelihood over unmasked rows. `logits` is viewed as
    /// `[N, vocab]` over its last axis; `targets` and `mask` have length `N`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = &self.values[logits.0];
        let (n, vocab) = lv.as_matrix_dims();
        if targets.len() != n || mask.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::TargetOutOfRange { target: t, vocab });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Invalid("cross entropy over zero unmasked positions".into()));
        }
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            let pr = &mut probs[r * vocab..(r + 1) * vocab];
            let lse = log_softmax_into(row, pr);
            total += lse - row[targets[r]];
            for p in pr.iter_mut() {
                *p = p.exp();
            }
        }
        let loss = total / T::of(count as f64);
        let requires = self.req(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        self.push(Tensor::scalar(loss), requires, op, "softmax_cross_entropy")
    }

    // ----------------------------------------------------------- backward

    /// Propagates gradients from the scalar `root`. Leaf gradients from
    /// earlier calls are kept and added to; intermediate ones are recomputed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.values[root.0].is_scalar() {
            return Err(TensorError::NonScalarRoot(self.values[root.0].shape().to_vec()));
        }
        for (g, op) in self.grads.iter_mut().zip(&self.ops) {
            if !matches!(op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.requires[root.0] {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            if matches!(self.ops[idx], Op::Leaf) || !self.requires[idx] {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) {
        let values = &self.values;
        let grads = &mut self.grads;
        let requires = &self.requires;
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = &values[a.0];
                let bv = &values[b.0];
                let (m, k) = av.as_matrix_dims();
                let n = values[idx].as_matrix_dims().1;
                if requires[a.0] {
                    // dA = G · Bᵀ (or G · B when b is stored transposed)
                    let (rs, cs) = if *trans_b { (k, 1) } else { (1, n) };
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), (g, n, 1), (bv.data(), rs, cs), T::zero(), (&mut da, k, 1));
                    add_into(slot(grads, requires, values, *a).unwrap(), &da);
                }
                if requires[b.0] {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // dB (n×k) = Gᵀ · A
                        gemm(n, m, k, T::one(), (g, 1, n), (av.data(), k, 1), T::zero(), (&mut db, k, 1));
                    } else {
                        // dB (k×n) = Aᵀ · G
                        gemm(k, m, n, T::one(), (av.data(), 1, k), (g, n, 1), T::zero(), (&mut db, n, 1));
                    }
                    add_into(slot(grads, requires, values, *b).unwrap(), &db);
                }
            }
            Op::Binary { kind, a, b } => {
                let (a, b, kind) = (*a, *b, *kind);
                let av = values[a.0].data();
                let bv = values[b.0].data();
                let out_n = g.len();
                let a_bcast = av.len() != out_n;
                let b_bcast = bv.len() != out_n;
                let at = |i: usize| if a_bcast { av[0] } else { av[i] };
                let bt = |i: usize| if b_bcast { bv[0] } else { bv[i] };
                let da: Vec<T> = (0..out_n)
                    .map(|i| match kind {
                        Binary::Add | Binary::Sub => g[i],
                        Binary::Mul => g[i] * bt(i),
                    })
                    .collect();
                let db: Vec<T> = (0..out_n)
                    .map(|i| match kind {
                        Binary::Add => g[i],
                        Binary::Sub => -g[i],
                        Binary::Mul => g[i] * at(i),
                    })
                    .collect();
                if let Some(s) = slot(grads, requires, values, a) {
                    reduce_into(s, &da);
                }
                if let Some(s) = slot(grads, requires, values, b) {
                    reduce_into(s, &db);
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = slot(grads, requires, values, *a) {
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d += gi * *c;
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = values[a.0].data();
                let y = values[idx].data();
                if let Some(s) = slot(grads, requires, values, *a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Exp => y[i],
                            Unary::Log => T::one() / x[i],
                            Unary::Cos => -x[i].sin(),
                            Unary::Sin => x[i].cos(),
                            Unary::Silu => {
                                let sg = sigmoid(x[i]);
                                sg * (T::one() + x[i] * (T::one() - sg))
                            }
                        };
                        s[i] += g[i] * d;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = slot(grads, requires, values, *a) {
                    for d in s.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = slot(grads, requires, values, *a) {
                    add_into(s, g);
                }
            }
            Op::Embedding { table, ids } => {
                let dim = values[table.0].shape()[1];
                if let Some(s) = slot(grads, requires, values, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = values[x.0].data();
                let gv = values[gain.0].data();
                let cols = gv.len();
                let n = T::of(cols as f64);
                if requires[gain.0] {
                    let mut dg = vec![T::zero(); cols];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xv[r * cols + c] * inv;
                        }
                    }
                    add_into(slot(grads, requires, values, *gain).unwrap(), &dg);
                }
                if let Some(s) = slot(grads, requires, values, *x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let o = r * cols;
                        let mut dot = T::zero();
                        for c in 0..cols {
                            dot += g[o + c] * gv[c] * xv[o + c] * inv;
                        }
                        let mean = dot / n;
                        for c in 0..cols {
                            let xhat = xv[o + c] * inv;
                            s[o + c] += inv * (g[o + c] * gv[c] - xhat * mean);
                        }
                    }
                }
            }
            Op::Rotary {
                x,
                theta,
                positions,
                head_dim,
            } => {
                let tv = values[theta.0].data();
                let out = values[idx].data();
                let (rows, cols) = values[idx].as_matrix_dims();
                let half = head_dim / 2;
                let seq = positions.len();
                let (cos, sin) = angle_table(positions, tv);
                if let Some(s) = slot(grads, requires, values, *x) {
                    for r in 0..rows {
                        let p = r % seq;
                        let c = &cos[p * half..(p + 1) * half];
                        let sn = &sin[p * half..(p + 1) * half];
                        for (gr, dr) in g[r * cols..(r + 1) * cols]
                            .chunks_exact(*head_dim)
                            .zip(s[r * cols..(r + 1) * cols].chunks_exact_mut(*head_dim))
                        {
                            for i in 0..half {
                                let (g0, g1) = (gr[2 * i], gr[2 * i + 1]);
                                dr[2 * i] += c[i] * g0 + sn[i] * g1;
                                dr[2 * i + 1] += c[i] * g1 - sn[i] * g0;
                            }
                        }
                    }
                }
                if let Some(s) = slot(grads, requires, values, *theta) {
                    for r in 0..rows {
                        let m = positions[r % seq];
                        for (gr, orow) in g[r * cols..(r + 1) * cols]
                            .chunks_exact(*head_dim)
                            .zip(out[r * cols..(r + 1) * cols].chunks_exact(*head_dim))
                        {
                            for i in 0..half {
                                let (o0, o1) = (orow[2 * i], orow[2 * i + 1]);
                                s[i] += m * (gr[2 * i + 1] * o0 - gr[2 * i] * o1);
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                scale,
                probs,
            } => {
                let (q, k, v, scale) = (*q, *k, *v, *scale);
                let AttnDims {
                    batch,
                    seq: s,
                    heads,
                    head_dim: dh,
                } = *dims;
                let d = heads * dh;
                let qv = values[q.0].data();
                let kv = values[k.0].data();
                let vv = values[v.0].data();
                let n = qv.len();
                let mut dq = vec![T::zero(); n];
                let mut dk = vec![T::zero(); n];
                let mut dv = vec![T::zero(); n];
                let mut dp = vec![T::zero(); s * s];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = b * s * d + h * dh;
                        let p = &probs[(b * heads + h) * s * s..(b * heads + h + 1) * s * s];
                        gemm(s, dh, s, T::one(), (&g[base..], d, 1), (&vv[base..], 1, d), T::zero(), (&mut dp, s, 1));
                        gemm(s, s, dh, T::one(), (p, 1, s), (&g[base..], d, 1), T::one(), (&mut dv[base..], d, 1));
                        for i in 0..s {
                            let pr = &p[i * s..(i + 1) * s];
                            let dr = &mut dp[i * s..(i + 1) * s];
                            let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                            for j in 0..=i {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                            for x in dr[i + 1..].iter_mut() {
                                *x = T::zero();
                            }
                        }
                        gemm(s, s, dh, scale, (&dp, s, 1), (&kv[base..], d, 1), T::one(), (&mut dq[base..], d, 1));
                        gemm(s, s, dh, scale, (&dp, 1, s), (&qv[base..], d, 1), T::one(), (&mut dk[base..], d, 1));
                    }
                }
                if let Some(sq) = slot(grads, requires, values, q) {
                    add_into(sq, &dq);
                }
                if let Some(sk) = slot(grads, requires, values, k) {
                    add_into(sk, &dk);
                }
                if let Some(sv) = slot(grads, requires, values, v) {
                    add_into(sv, &dv);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = values[logits.0].as_matrix_dims().1;
                let w = g[0] / T::of(*count as f64);
                if let Some(s) = slot(grads, requires, values, *logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let o = r * vocab;
                        for c in 0..vocab {
                            s[o + c] += w * probs[o + c];
                        }
                        s[o + t] -= w;
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` if `v` needs no gradient.
fn slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    requires: &[bool],
    values: &[Tensor<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !requires[v.0] {
        return None;
    }
    let n = values[v.0].numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adds `src` into `dst`, summing everything when `dst` is a broadcast scalar.
fn reduce_into<T: Real>(dst: &mut [T], src: &[T]) {
    if dst.len() == src.len() {
        add_into(dst, src);
    } else {
        dst[0] += src.iter().copied().sum::<T>();
    }
}

/// Cosine and sine of `position · theta[i]`, laid out `[position][i]`.
pub(crate) fn angle_table<T: Real>(positions: &[T], theta: &[T]) -> (Vec<T>, Vec<T>) {
    let mut cos = Vec::with_capacity(positions.len() * theta.len());
    let mut sin = Vec::with_capacity(positions.len() * theta.len());
    for &m in positions {
        for &th in theta {
            let (s, c) = (m * th).sin_cos();
            cos.push(c);
            sin.push(s);
        }
    }
    (cos, sin)
}

/// Rotates each adjacent pair of `x` by the angle whose cosine/sine are given.
#[inline]
pub(crate) fn rotate_pairs<T: Real>(x: &[T], out: &mut [T], cos: &[T], sin: &[T]) {
    for i in 0..cos.len() {
        let (x0, x1) = (x[2 * i], x[2 * i + 1]);
        out[2 * i] = x0 * cos[i] - x1 * sin[i];
        out[2 * i + 1] = x0 * sin[i] + x1 * cos[i];
    }
}

/// In-place softmax over `row[..=last]`; entries past `last` are zeroed.
fn softmax_causal_row<T: Real>(row: &mut [T], last: usize) {
    let max = row[..=last].iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row[..=last].iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = T::one() / total;
    for x in row[..=last].iter_mut() {
        *x *= inv;
    }
    for x in row[last + 1..].iter_mut() {
        *x = T::zero();
    }
}

/// Writes `log_softmax(row)` into `out` and returns the log-sum-exp.
pub(crate) fn log_softmax_into<T: Real>(row: &[T], out: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + total.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
    lse
}
