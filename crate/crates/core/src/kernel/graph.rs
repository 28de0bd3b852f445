//! Reverse-mode differentiation over a per-step computation graph.
//!
//! A [`Graph`] is built fresh for every loss evaluation: leaves are bound
//! from parameter tensors or constants, each op appends a node holding its
//! forward value, and [`Graph::backward`] walks the nodes in reverse
//! creation order accumulating vector-Jacobian products.

use std::sync::Arc;

use super::mask::AttentionMask;
use super::tensor::{dot, matmul_into, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One output row of a [`Graph::lerp_rows`] op: `(1 - w) * x[lo] + w * x[hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LerpRow {
    pub lo: usize,
    pub hi: usize,
    pub w: f64,
}

impl LerpRow {
    pub fn pick(i: usize) -> Self {
        Self { lo: i, hi: i, w: 0.0 }
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Silu(Var),
    Normalize {
        x: Var,
        inv_std: Vec<f64>,
    },
    Attention(Box<AttentionSaved>),
    Rope {
        x: Var,
        table: Vec<(f64, f64)>,
        half: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    LerpRows {
        x: Var,
        rows: Vec<LerpRow>,
    },
    Mse(Var, Var),
    Sum(Var),
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Arc<AttentionMask>,
    row_offsets: Vec<usize>,
    // [head][row offset + allowed index]
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, indexed by graph node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` is not on the loss path.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn get_raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        let (k2, m) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(shape_err!("matmul {:?} x {:?}", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), n, k, m, &mut out);
        let value = Tensor::matrix(n, m, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "{what} {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(&mut self, x: Var, r: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        let c = tx.cols();
        if tr.numel() != c {
            return Err(shape_err!("{what} {:?} with row {:?}", tx.shape(), tr.shape()));
        }
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(tr.data()).map(|(&a, &b)| f(a, b)))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(value, op, rg))
    }

    /// `x[i, :] + b` for every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_op(x, b, "add_row", |a, b| a + b, Op::AddRow(x, b))
    }

    /// `x[i, :] * g` for every row.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_op(x, g, "mul_row", |a, b| a * b, Op::MulRow(x, g))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddConst(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    /// Per-row standardization over the last axis: zero mean, unit variance.
    /// Never mixes statistics across rows.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in tx.data().chunks(c) {
            let (mean, inv) = row_stats(row, eps);
            inv_std.push(inv);
            out.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let value = Tensor::new(tx.shape().to_vec(), out).expect("normalize shape");
        let rg = self.rg(x);
        self.push(value, Op::Normalize { x, inv_std }, rg)
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize(x, eps);
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    /// Multi-head scaled dot-product attention restricted to `mask`.
    ///
    /// Softmax runs over allowed keys only; disallowed keys get exactly zero
    /// weight and are never read.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Arc<AttentionMask>, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (tq.rows(), tq.cols());
        let m = tk.rows();
        if tk.cols() != d || tv.cols() != d || tv.rows() != m {
            return Err(shape_err!(
                "attention q {:?} k {:?} v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("model dim {d} not divisible by {heads} heads"));
        }
        if mask.rows() != n || mask.cols() != m {
            return Err(shape_err!(
                "mask {}x{} for {n} queries and {m} keys",
                mask.rows(),
                mask.cols()
            ));
        }
        mask.validate()?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for i in 0..n {
            row_offsets.push(acc);
            acc += mask.allowed_keys(i).len();
        }
        row_offsets.push(acc);

        let mut out = vec![0.0; n * d];
        let mut probs = vec![vec![0.0; acc]; heads];
        let mut scores = Vec::new();
        for (h, ph) in probs.iter_mut().enumerate() {
            let cs = h * dh;
            for i in 0..n {
                let keys = mask.allowed_keys(i);
                let qi = &tq.data()[i * d + cs..i * d + cs + dh];
                scores.clear();
                scores.extend(
                    keys.iter()
                        .map(|&j| dot(qi, &tk.data()[j * d + cs..j * d + cs + dh]) * scale),
                );
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let o = &mut out[i * d + cs..i * d + cs + dh];
                let p_row = &mut ph[row_offsets[i]..row_offsets[i + 1]];
                for ((&j, s), p) in keys.iter().zip(&scores).zip(p_row.iter_mut()) {
                    *p = s / z;
                    let vj = &tv.data()[j * d + cs..j * d + cs + dh];
                    for (oo, &vv) in o.iter_mut().zip(vj) {
                        *oo += *p * vv;
                    }
                }
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            mask,
            row_offsets,
            probs,
        };
        Ok(self.push(value, Op::Attention(Box::new(saved)), rg))
    }

    /// Rotary position embedding on every `head_dim`-sized block of columns.
    ///
    /// Pair `p` of a block at row position `pos` is rotated by
    /// `pos * base^(-2p / head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64, head_dim: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        if head_dim == 0 || head_dim % 2 != 0 || d % head_dim != 0 {
            return Err(shape_err!("rope needs an even head dim dividing {d}, got {head_dim}"));
        }
        if positions.len() != n {
            return Err(shape_err!("{} positions for {n} rows", positions.len()));
        }
        let half = head_dim / 2;
        let table = rope_table(positions, base, head_dim);
        let mut out = tx.data().to_vec();
        for (i, row) in out.chunks_mut(d).enumerate() {
            rotate_row(row, &table[i * half..(i + 1) * half], false);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Rope { x, table, half }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err!("concat_rows with {} and {c} columns", t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start >= end || end > c {
            return Err(shape_err!("column slice {start}..{end} of {c}"));
        }
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let value = Tensor::matrix(tx.rows(), end - start, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Builds new rows as linear blends of two source rows each; covers
    /// gathering, broadcasting and linear interpolation along time.
    pub fn lerp_rows(&mut self, x: Var, rows: Vec<LerpRow>) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in &rows {
            if r.lo >= n || r.hi >= n {
                return Err(shape_err!("row index {}/{} out of {n}", r.lo, r.hi));
            }
            let (a, b) = (tx.row(r.lo), tx.row(r.hi));
            if r.w == 0.0 {
                data.extend_from_slice(a);
            } else {
                data.extend(a.iter().zip(b).map(|(&a, &b)| (1.0 - r.w) * a + r.w * b));
            }
        }
        let value = Tensor::matrix(rows.len(), c, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LerpRows { x, rows }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.lerp_rows(x, idx.iter().map(|&i| LerpRow::pick(i)).collect())
    }

    /// Repeats a single-row tensor `n` times.
    pub fn repeat_row(&mut self, x: Var, n: usize) -> Result<Var> {
        self.lerp_rows(x, vec![LerpRow::pick(0); n])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() == 0 {
            return Err(Error::Input("mse over an empty tensor".into()));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / ta.numel() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |ga| {
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            ga[i * k + kk] += dot(gi, &tb.data()[kk * m..(kk + 1) * m]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            let a_ik = ta.data()[i * k + kk];
                            if a_ik == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[kk * m..(kk + 1) * m].iter_mut().zip(gi) {
                                *o += a_ik * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let c = val(*b).numel();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (tx, tr) = (val(*x), val(*r));
                let c = tr.numel();
                acc(*x, &mut |gx| {
                    for (grow, orow) in g.chunks(c).zip(gx.chunks_mut(c)) {
                        for ((o, &gv), &rv) in orow.iter_mut().zip(grow).zip(tr.data()) {
                            *o += gv * rv;
                        }
                    }
                });
                acc(*r, &mut |gr| {
                    for (grow, xrow) in g.chunks(c).zip(tx.data().chunks(c)) {
                        for ((o, &gv), &xv) in gr.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += c * v)),
            Op::AddConst(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Silu(x) => {
                let tx = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                        let s = sigmoid(xv);
                        *o += gv * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            Op::Normalize { x, inv_std } => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &mut |gx| {
                    for (r, ((grow, yrow), orow)) in
                        g.chunks(c).zip(y.data().chunks(c)).zip(gx.chunks_mut(c)).enumerate()
                    {
                        let mean_g = grow.iter().sum::<f64>() / c as f64;
                        let mean_gy = dot(grow, yrow) / c as f64;
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += inv_std[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::Attention(s) => self.attention_backward(s, g, grads),
            Op::Rope { x, table, half } => {
                let d = node.value.cols();
                acc(*x, &mut |gx| {
                    for (i, (grow, orow)) in g.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                        let mut tmp = grow.to_vec();
                        rotate_row(&mut tmp, &table[i * half..(i + 1) * half], true);
                        add_into(orow, &tmp);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                acc(*x, &mut |gx| {
                    for (grow, orow) in g.chunks(w).zip(gx.chunks_mut(c)) {
                        add_into(&mut orow[*start..*start + w], grow);
                    }
                });
            }
            Op::LerpRows { x, rows } => {
                let c = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (r, grow) in rows.iter().zip(g.chunks(c)) {
                        let lo = &mut gx[r.lo * c..(r.lo + 1) * c];
                        if r.w == 0.0 {
                            add_into(lo, grow);
                            continue;
                        }
                        lo.iter_mut().zip(grow).for_each(|(o, &v)| *o += (1.0 - r.w) * v);
                        let hi = &mut gx[r.hi * c..(r.hi + 1) * c];
                        hi.iter_mut().zip(grow).for_each(|(o, &v)| *o += r.w * v);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let k = 2.0 * g[0] / ta.numel() as f64;
                acc(*a, &mut |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(ta.data()).zip(tb.data()) {
                        *o += k * (x - y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(ta.data()).zip(tb.data()) {
                        *o -= k * (x - y);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tq, tk, tv) = (
            &self.nodes[s.q.0].value,
            &self.nodes[s.k.0].value,
            &self.nodes[s.v.0].value,
        );
        let (n, d) = (tq.rows(), tq.cols());
        let m = tk.rows();
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; m * d];
        let mut gv = vec![0.0; m * d];
        let mut dp = Vec::new();
        for (h, ph) in s.probs.iter().enumerate() {
            let cs = h * dh;
            for i in 0..n {
                let keys = s.mask.allowed_keys(i);
                let p_row = &ph[s.row_offsets[i]..s.row_offsets[i + 1]];
                let go = &g[i * d + cs..i * d + cs + dh];
                dp.clear();
                for (&j, &p) in keys.iter().zip(p_row) {
                    let vj = &tv.data()[j * d + cs..j * d + cs + dh];
                    dp.push(dot(go, vj));
                    for (o, &gg) in gv[j * d + cs..j * d + cs + dh].iter_mut().zip(go) {
                        *o += p * gg;
                    }
                }
                let pdp: f64 = p_row.iter().zip(&dp).map(|(p, x)| p * x).sum();
                let qi = &tq.data()[i * d + cs..i * d + cs + dh];
                for ((&j, &p), &dpj) in keys.iter().zip(p_row).zip(&dp) {
                    let ds = p * (dpj - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &tk.data()[j * d + cs..j * d + cs + dh];
                    for (o, &kv) in gq[i * d + cs..i * d + cs + dh].iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    for (o, &qv) in gk[j * d + cs..j * d + cs + dh].iter_mut().zip(qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
        for (v, gr) in [(s.q, gq), (s.k, gk), (s.v, gv)] {
            if self.nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; gr.len()]);
                add_into(slot, &gr);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean and inverse standard deviation (population variance) of a row.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn rope_table(positions: &[usize], base: f64, head_dim: usize) -> Vec<(f64, f64)> {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|p| base.powf(-2.0 * p as f64 / head_dim as f64))
        .collect();
    positions
        .iter()
        .flat_map(|&pos| {
            freqs.iter().map(move |f| {
                let a = pos as f64 * f;
                (a.cos(), a.sin())
            })
        })
        .collect()
}

fn rotate_row(row: &mut [f64], table: &[(f64, f64)], inverse: bool) {
    let half = table.len();
    for block in row.chunks_mut(2 * half) {
        for (pair, &(c, s)) in block.chunks_mut(2).zip(table) {
            let s = if inverse { -s } else { s };
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::rng::RngState;

    fn rand_tensor(rng: &mut RngState, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), rng.normals(n)).unwrap()
    }

    /// Central finite differences of `f` at every element of `inputs[which]`.
    fn fd_check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for (which, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[which]);
            for e in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == which {
                                t.data_mut()[e] += delta;
                            }
                            g.param(t)
                        })
                        .collect();
                    let l = f(&mut g, &vs);
                    g.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {which} elem {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[3], 2.0));
        let unused = g.param(Tensor::full(&[2], 1.0));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn linear_least_squares_matches_finite_differences() {
        let mut rng = RngState::new(3);
        let w = rand_tensor(&mut rng, &[3, 3]);
        let x = rand_tensor(&mut rng, &[1, 3]);
        let y = rand_tensor(&mut rng, &[1, 3]);
        fd_check(&[w, x, y], &|g, v| {
            let p = g.matmul(v[1], v[0]).unwrap();
            let d = g.sub(p, v[2]).unwrap();
            let sq = g.mul(d, d).unwrap();
            g.sum(sq)
        });
    }

    #[test]
    fn elementwise_and_row_ops_match_finite_differences() {
        let mut rng = RngState::new(4);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let r = rand_tensor(&mut rng, &[4]);
        let s = rand_tensor(&mut rng, &[4]);
        fd_check(&[a, b, r, s], &|g, v| {
            let x = g.mul(v[0], v[1]).unwrap();
            let x = g.add_row(x, v[2]).unwrap();
            let x = g.mul_row(x, v[3]).unwrap();
            let x = g.silu(x);
            let x = g.scale(x, 0.7);
            let x = g.add_const(x, 0.3);
            let y = g.sub(x, v[1]).unwrap();
            let y = g.add(y, v[0]).unwrap();
            let t = g.constant(Tensor::full(&[3, 4], 0.25));
            g.mse(y, t).unwrap()
        });
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = RngState::new(5);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let gain = rand_tensor(&mut rng, &[5]);
        let bias = rand_tensor(&mut rng, &[5]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        fd_check(&[x, gain, bias], &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let wc = g.constant(w.clone());
            let z = g.mul(y, wc).unwrap();
            g.sum(z)
        });
    }

    #[test]
    fn attention_and_rope_match_finite_differences() {
        let mut rng = RngState::new(6);
        let q = rand_tensor(&mut rng, &[4, 4]);
        let k = rand_tensor(&mut rng, &[4, 4]);
        let v = rand_tensor(&mut rng, &[4, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let mask = Arc::new(AttentionMask::lookahead(4, Some(1)));
        fd_check(&[q, k, v], &|g, vs| {
            let pos = [0, 1, 2, 3];
            let qr = g.rope(vs[0], &pos, 10000.0, 2).unwrap();
            let kr = g.rope(vs[1], &pos, 10000.0, 2).unwrap();
            let o = g.attention(qr, kr, vs[2], mask.clone(), 2).unwrap();
            let wc = g.constant(w.clone());
            let z = g.mul(o, wc).unwrap();
            g.sum(z)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = RngState::new(7);
        let a = rand_tensor(&mut rng, &[2, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 2]);
        fd_check(&[a, b], &|g, v| {
            let c = g.concat_rows(&[v[0], v[1]]).unwrap();
            let rows = vec![
                LerpRow { lo: 0, hi: 1, w: 0.25 },
                LerpRow::pick(4),
                LerpRow { lo: 2, hi: 3, w: 0.5 },
            ];
            let l = g.lerp_rows(c, rows).unwrap();
            let s = g.slice_cols(l, 1, 3).unwrap();
            let wc = g.constant(w.clone());
            let full = g.matmul(l, wc).unwrap();
            let sq = g.mul(s, full).unwrap();
            g.sum(sq)
        });
    }

    #[test]
    fn single_key_attention_is_identity_on_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 1, vec![0.3]).unwrap());
        let k = g.constant(Tensor::matrix(1, 1, vec![-1.2]).unwrap());
        let v = g.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let o = g
            .attention(q, k, v, Arc::new(AttentionMask::lookahead(1, Some(0))), 1)
            .unwrap();
        assert_eq!(g.value(o).data(), &[2.0]);
    }

    #[test]
    fn equal_logits_average_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[3, 2]));
        let k = g.constant(Tensor::zeros(&[3, 2]));
        let vdata = vec![1.0, 2.0, 3.0, 5.0, 8.0, -1.0];
        let v = g.constant(Tensor::matrix(3, 2, vdata).unwrap());
        let o = g
            .attention(q, k, v, Arc::new(AttentionMask::lookahead(3, None)), 1)
            .unwrap();
        for row in g.value(o).data().chunks(2) {
            assert!((row[0] - 4.0).abs() < 1e-12 && (row[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 2]));
        let mask = Arc::new(AttentionMask::from_fn(2, 2, |i, _| i == 0));
        assert!(matches!(g.attention(q, q, q, mask, 1), Err(Error::Mask(_))));
    }

    #[test]
    fn attention_shape_errors() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[2, 2]));
        let m = Arc::new(AttentionMask::causal(2));
        assert!(g.attention(q, k, k, m.clone(), 1).is_err());
        assert!(g.attention(q, q, q, m.clone(), 2).is_err());
        let q3 = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.attention(q3, q3, q3, m, 1).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = RngState::new(8);
        let x = rand_tensor(&mut rng, &[1, 8]);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let r = g.rope(v, &[0], 10000.0, 8).unwrap();
        assert_eq!(g.value(r), &x);
    }

    #[test]
    fn rope_quarter_turn() {
        // Second pair of a 4-dim block has frequency base^(-1/2); with this base
        // position 1 rotates it by exactly pi/2.
        let base = (2.0 / std::f64::consts::PI).powi(2);
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(1, 4, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let r = g.rope(v, &[1], base, 4).unwrap();
        let out = g.value(r).data();
        assert!(out[2].abs() < 1e-12 && (out[3] - 1.0).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn rope_rejects_odd_dim() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.rope(v, &[0], 10000.0, 3).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, 0.0, 2.0, 4.0]).unwrap());
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(&g.value(y).data()[..3], &[0.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap());
        let y = g.normalize(x, 1e-14);
        let out = g.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
    }
}
