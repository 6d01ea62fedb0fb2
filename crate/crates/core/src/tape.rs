//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables in
//! execution order. Because variables can only reference nodes that
//! already exist, the record is topologically sorted and a single reverse
//! sweep visits each operation exactly once.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{DivaError, Result};
use crate::tensor::{self, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        a: usize,
        row: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Gelu(usize),
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        stats: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    ConcatRows(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Gather {
        a: usize,
        index: Arc<[usize]>,
    },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered operation record for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to grad-enabled leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    tape: u64,
    by_leaf: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is not a grad-enabled leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.by_leaf.get(&v.id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf; it participates in gradients iff
    /// `t.grad_enabled()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.grad_enabled();
        self.push(t, Op::Leaf, rg)
    }

    /// Records `t` as a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_grad(false),
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(DivaError::ForeignVar);
        }
        Ok(&self.nodes[v.id])
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a' · b'` where each operand is optionally transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let av = &self.check(a)?.value;
        let bv = &self.check(b)?.value;
        let (ar, ac) = tensor::as_matrix(av, "matmul lhs")?;
        let (br, bc) = tensor::as_matrix(bv, "matmul rhs")?;
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(DivaError::ShapeMismatch {
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
                context: "matmul inner dimensions",
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::gemm(m, k, n, av.data(), a_t, bv.data(), b_t, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        let op = Op::MatMul {
            a: a.id,
            b: b.id,
            a_t,
            b_t,
            m,
            k,
            n,
        };
        Ok(self.push(Tensor::new(&[m, n], out)?, op, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        ctx: &'static str,
    ) -> Result<(Tensor, bool)> {
        let av = &self.check(a)?.value;
        let bv = &self.check(b)?.value;
        tensor::same_shape(av.shape(), bv.shape(), ctx)?;
        let out = av.zip_map(bv, f)?;
        Ok((out, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, |x, y| x + y, "add")?;
        Ok(self.push(v, Op::Add(a.id, b.id), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, |x, y| x - y, "sub")?;
        Ok(self.push(v, Op::Sub(a.id, b.id), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, |x, y| x * y, "mul")?;
        Ok(self.push(v, Op::Mul(a.id, b.id), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let av = &self.check(a)?.value;
        let rv = &self.check(row)?.value;
        let n = *av.shape().last().expect("rank >= 1");
        if rv.len() != n {
            return Err(DivaError::ShapeMismatch {
                left: av.shape().to_vec(),
                right: rv.shape().to_vec(),
                context: "add_row broadcast",
            });
        }
        let mut out = av.to_vec();
        for chunk in out.chunks_exact_mut(n) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let t = Tensor::new(av.shape(), out)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(
            t,
            Op::AddRow {
                a: a.id,
                row: row.id,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.check(a)?.value.scale(c);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale { a: a.id, c }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?.value.map(tensor::gelu);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Gelu(a.id), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.check(a)?.value;
        let (outer, len, inner) = tensor::axis_split(av.shape(), axis)?;
        let mut out = av.to_vec();
        tensor::softmax_axis(&mut out, outer, len, inner);
        let t = Tensor::new(av.shape(), out)?;
        let rg = self.rg(&[a]);
        let op = Op::Softmax {
            a: a.id,
            outer,
            len,
            inner,
        };
        Ok(self.push(t, op, rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let av = &self.check(a)?.value;
        let gv = &self.check(gain)?.value;
        let bv = &self.check(bias)?.value;
        let d = *av.shape().last().expect("rank >= 1");
        tensor::check_affine(d, gv, bv)?;
        if !(eps > 0.0) {
            return Err(DivaError::InvalidShape(
                av.shape().to_vec(),
                format!("layer_norm eps must be positive, got {eps}"),
            ));
        }
        let mut out = vec![0.0; av.len()];
        let mut stats = vec![0.0; 2 * (av.len() / d)];
        tensor::layer_norm_rows(
            av.data(),
            d,
            gv.data(),
            bv.data(),
            eps,
            &mut out,
            &mut stats,
        );
        let t = Tensor::new(av.shape(), out)?;
        let rg = self.rg(&[a, gain, bias]);
        let op = Op::LayerNorm {
            a: a.id,
            gain: gain.id,
            bias: bias.id,
            stats,
        };
        Ok(self.push(t, op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.value.sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.id), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = &self.check(a)?.value;
        let s = av.sum() / av.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a.id), rg))
    }

    /// Mean squared difference between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Stacks rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first =
            self.check(*parts.first().ok_or_else(|| {
                DivaError::InvalidShape(vec![], "concat of zero tensors".into())
            })?)?;
        let (_, cols) = tensor::as_matrix(&first.value, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.check(p)?.value;
            let (r, c) = tensor::as_matrix(v, "concat_rows")?;
            if c != cols {
                return Err(DivaError::ShapeMismatch {
                    left: vec![rows, cols],
                    right: v.shape().to_vec(),
                    context: "concat_rows column count",
                });
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::new(&[rows, cols], data)?, Op::ConcatRows(ids), rg))
    }

    /// Rows `start..start+len` of a rank-2 tensor (bitwise copy).
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let index: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &index)
    }

    /// Selects rows of a rank-2 tensor by index (bitwise copy).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = &self.check(a)?.value;
        let (r, c) = tensor::as_matrix(av, "gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(DivaError::InvalidShape(
                av.shape().to_vec(),
                format!("row selection {rows:?} out of range"),
            ));
        }
        let index: Vec<usize> = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        self.gather(a, index.into(), &[rows.len(), c])
    }

    /// `out[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let av = &self.check(a)?.value;
        if index.iter().any(|&i| i >= av.len()) {
            return Err(DivaError::InvalidShape(
                av.shape().to_vec(),
                "gather index out of range".into(),
            ));
        }
        let data = index.iter().map(|&i| av.data()[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Gather { a: a.id, index }, rg))
    }

    /// Columns `start..start+width` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let av = &self.check(a)?.value;
        let (r, c) = tensor::as_matrix(av, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(DivaError::InvalidShape(
                av.shape().to_vec(),
                format!("column slice {start}..{} out of range", start + width),
            ));
        }
        let mut data = Vec::with_capacity(r * width);
        for row in av.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let t = Tensor::new(&[r, width], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceCols { a: a.id, start }, rg))
    }

    /// Joins rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first =
            self.check(*parts.first().ok_or_else(|| {
                DivaError::InvalidShape(vec![], "concat of zero tensors".into())
            })?)?;
        let (rows, _) = tensor::as_matrix(&first.value, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.check(p)?.value;
            let (r, c) = tensor::as_matrix(v, "concat_cols")?;
            if r != rows {
                return Err(DivaError::ShapeMismatch {
                    left: first.value.shape().to_vec(),
                    right: v.shape().to_vec(),
                    context: "concat_cols row count",
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = &self.nodes[p.id].value;
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::new(&[rows, total], data)?, Op::ConcatCols(ids), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.check(a)?.value.reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a.id), rg))
    }

    /// Back-propagates from a scalar `loss` and returns gradients for every
    /// grad-enabled leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(DivaError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(DivaError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients {
            tape: self.id,
            by_leaf: BTreeMap::new(),
        };
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        id: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        // Accumulates `f(slot)` into the gradient buffer for node `j`.
        fn acc(grads: &mut [Option<Vec<f64>>], len: usize, j: usize) -> &mut Vec<f64> {
            grads[j].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {
                out.by_leaf.insert(id, Tensor::new(node.value.shape(), g)?);
            }
            &Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            } => {
                let av = nodes[a].value.data();
                let bv = nodes[b].value.data();
                if wants(a) {
                    let ga = acc(grads, m * k, a);
                    if a_t {
                        // a stored k×m: dA = b' · gᵀ
                        tensor::gemm(k, n, m, bv, b_t, &g, true, ga, 1.0);
                    } else {
                        // dA = g · b'ᵀ
                        tensor::gemm(m, n, k, &g, false, bv, !b_t, ga, 1.0);
                    }
                }
                if wants(b) {
                    let gb = acc(grads, k * n, b);
                    if b_t {
                        // b stored n×k: dB = gᵀ · a'
                        tensor::gemm(n, m, k, &g, true, av, a_t, gb, 1.0);
                    } else {
                        // dB = a'ᵀ · g
                        tensor::gemm(k, m, n, av, !a_t, &g, false, gb, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                for (j, s) in [(a, 1.0), (b, 1.0)] {
                    if wants(j) {
                        axpy(acc(grads, g.len(), j), s, &g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (j, s) in [(a, 1.0), (b, -1.0)] {
                    if wants(j) {
                        axpy(acc(grads, g.len(), j), s, &g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = nodes[b].value.data();
                    let ga = acc(grads, g.len(), a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if wants(b) {
                    let av = nodes[a].value.data();
                    let gb = acc(grads, g.len(), b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::AddRow { a, row } => {
                if wants(a) {
                    axpy(acc(grads, g.len(), a), 1.0, &g);
                }
                if wants(row) {
                    let n = nodes[row].value.len();
                    let gr = acc(grads, n, row);
                    for chunk in g.chunks_exact(n) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::Scale { a, c } => {
                if wants(a) {
                    axpy(acc(grads, g.len(), a), c, &g);
                }
            }
            &Op::Gelu(a) => {
                if wants(a) {
                    let x = nodes[a].value.data();
                    let ga = acc(grads, g.len(), a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * tensor::gelu_grad(x[i]);
                    }
                }
            }
            &Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                if wants(a) {
                    let y = node.value.data();
                    let ga = acc(grads, g.len(), a);
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                ga[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                stats,
            } => {
                let (a, gain, bias) = (*a, *gain, *bias);
                let x = nodes[a].value.data();
                let gw = nodes[gain].value.data();
                let d = gw.len();
                let rows = x.len() / d;
                if wants(gain) || wants(bias) {
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..rows {
                        let (mean, inv) = (stats[2 * r], stats[2 * r + 1]);
                        for i in 0..d {
                            let xhat = (x[r * d + i] - mean) * inv;
                            dgain[i] += g[r * d + i] * xhat;
                            dbias[i] += g[r * d + i];
                        }
                    }
                    if wants(gain) {
                        axpy(acc(grads, d, gain), 1.0, &dgain);
                    }
                    if wants(bias) {
                        axpy(acc(grads, d, bias), 1.0, &dbias);
                    }
                }
                if wants(a) {
                    let ga = acc(grads, x.len(), a);
                    for r in 0..rows {
                        let (mean, inv) = (stats[2 * r], stats[2 * r + 1]);
                        let row = &x[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for i in 0..d {
                            let dy = gr[i] * gw[i];
                            sum_dy += dy;
                            sum_dy_xhat += dy * (row[i] - mean) * inv;
                        }
                        let df = d as f64;
                        for i in 0..d {
                            let xhat = (row[i] - mean) * inv;
                            let dy = gr[i] * gw[i];
                            ga[r * d + i] += inv * (dy - sum_dy / df - xhat * sum_dy_xhat / df);
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if wants(a) {
                    let n = nodes[a].value.len();
                    let ga = acc(grads, n, a);
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            &Op::Mean(a) => {
                if wants(a) {
                    let n = nodes[a].value.len();
                    let s = g[0] / n as f64;
                    let ga = acc(grads, n, a);
                    ga.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    if wants(p) {
                        axpy(acc(grads, n, p), 1.0, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::SliceCols { a, start } => {
                if wants(a) {
                    let (r, c) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                    let w = node.value.shape()[1];
                    let ga = acc(grads, r * c, a);
                    for i in 0..r {
                        for j in 0..w {
                            ga[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.shape()[1];
                    if wants(p) {
                        let gp = acc(grads, rows * w, p);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Gather { a, index } => {
                let a = *a;
                if wants(a) {
                    let n = nodes[a].value.len();
                    let ga = acc(grads, n, a);
                    for (gi, &src) in g.iter().zip(index.iter()) {
                        ga[src] += gi;
                    }
                }
            }
            &Op::Reshape(a) => {
                if wants(a) {
                    axpy(acc(grads, g.len(), a), 1.0, &g);
                }
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], s: f64, src: &[f64]) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_of_product_is_other_factor() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad(true));
        let b = tape.leaf(t(&[3], &[4.0, -5.0, 6.0]));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[4.0, -5.0, 6.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad(true));
        assert!(matches!(tape.backward(a), Err(DivaError::NonScalarLoss(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        let d = tape.scale(c, 2.0).unwrap();
        assert!(matches!(tape.backward(d), Err(DivaError::DetachedLoss)));
        let other = Tape::new();
        assert!(matches!(other.backward(d), Err(DivaError::ForeignVar)));
    }

    #[test]
    fn matmul_records_only_when_grad_enabled() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::eye(2));
        let c = tape.matmul(a, b).unwrap();
        assert!(!tape.requires_grad(c));
        let w = tape.leaf(Tensor::eye(2).with_grad(true));
        let d = tape.matmul(a, w).unwrap();
        assert!(tape.requires_grad(d));
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx sum(x ⊙ x) = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, -1.5]).with_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0, -3.0]);
    }

    #[test]
    fn concat_and_slice_cols_roundtrip_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let l = tape.slice_cols(a, 0, 1).unwrap();
        let r = tape.slice_cols(a, 1, 2).unwrap();
        let j = tape.concat_cols(&[l, r]).unwrap();
        assert_eq!(tape.value(j), tape.value(a));
        let rows = tape.gather_rows(a, &[1, 0]).unwrap();
        assert_eq!(tape.value(rows).data(), &[4., 5., 6., 1., 2., 3.]);
    }
}
