//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node whose inputs are earlier nodes, so walking the
//! tape backwards from the loss visits each node once, after all of its
//! consumers have pushed their gradient into it.

use std::borrow::Cow;

use rand::Rng;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to the variance inside the square root of layer norm.
pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry and mask for batched multi-head scaled dot-product attention.
///
/// Queries are laid out as `batch * q_len` rows, keys and values as
/// `batch * k_len` rows. `mask[(b * q_len + i) * k_len + j]` is true when query
/// `i` of batch element `b` may attend to key `j`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub mask: Vec<bool>,
}

impl AttentionLayout {
    /// Every query sees every key.
    pub fn full(batch: usize, q_len: usize, k_len: usize, heads: usize) -> Self {
        AttentionLayout {
            batch,
            q_len,
            k_len,
            heads,
            mask: vec![true; batch * q_len * k_len],
        }
    }

    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.mask[(b * self.q_len + i) * self.k_len + j]
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var, zero_grad: bool },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Relu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, keep: Vec<f32> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<f32>, scale: f32 },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, probs: Vec<f32>, count: usize },
    SumSquares { x: Var },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Record of primitive applications. Parameter leaves borrow their tensors,
/// so building a graph never copies weights.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Sign of every ReLU input, in recording order. Two passes with equal
    /// patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu { x } = n.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Trainable leaf borrowing an existing tensor.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; `requires_grad` decides whether gradient flows into it.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(matrix(vec![m, n], out), Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Matrix product `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_t", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(matrix(vec![m, n], out), Op::MatMulT { a, b, m, k, n }, &[a, b]))
    }

    /// Adds a length-`d` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.add_bias_impl(x, bias, false)
    }

    /// [`Tape::add_bias`] for a bias whose consumer ignores a constant shift
    /// across rows, such as attention keys under a row softmax. Its true
    /// gradient is identically zero, so it is reported as exact zeros
    /// instead of rounding noise that Adam would amplify into real steps.
    pub fn add_shift_invariant_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.add_bias_impl(x, bias, true)
    }

    fn add_bias_impl(&mut self, x: Var, bias: Var, zero_grad: bool) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(bias));
        if bt.numel() != xt.cols() {
            return Err(shape_err("add_bias", xt.shape(), bt.shape()));
        }
        let d = xt.cols();
        let mut out = xt.data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(bt.data()).for_each(|(o, b)| *o += b);
        }
        let shape = xt.shape().to_vec();
        Ok(self.push(matrix(shape, out), Op::AddBias { x, bias, zero_grad }, &[x, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err("add", at.shape(), bt.shape()));
        }
        let out = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let shape = at.shape().to_vec();
        Ok(self.push(matrix(shape, out), Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let xt = self.value(x);
        let out = xt.data().iter().map(|v| v * c).collect();
        let shape = xt.shape().to_vec();
        self.push(matrix(shape, out), Op::Scale { x, c }, &[x])
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let out = xt.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = xt.shape().to_vec();
        self.push(matrix(shape, out), Op::Relu { x }, &[x])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let d = xt.cols();
        let mut out = xt.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let shape = xt.shape().to_vec();
        self.push(matrix(shape, out), Op::Softmax { x }, &[x])
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gain), self.value(bias));
        let d = xt.cols();
        if gt.numel() != d || bt.numel() != d {
            return Err(shape_err("layer_norm", xt.shape(), gt.shape()));
        }
        let rows = xt.rows();
        let mut xhat = vec![0.0; xt.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xt.numel()];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gt.data()[c] + bt.data()[c];
            }
        }
        let shape = xt.shape().to_vec();
        Ok(self.push(
            matrix(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of `table` (V×d) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(shape_err("embedding", tt.shape(), &[ids.len()]));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        Ok(self.push(
            matrix(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            &[table],
        ))
    }

    /// Inverted dropout. A no-op when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let xt = self.value(x);
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f32> = (0..xt.numel())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { scale })
            .collect();
        let out = xt.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let shape = xt.shape().to_vec();
        self.push(matrix(shape, out), Op::Dropout { x, keep }, &[x])
    }

    /// Batched multi-head scaled dot-product attention (no projections).
    ///
    /// A query row whose mask admits no key attends uniformly over all keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols();
        let l = &layout;
        if kt.cols() != d
            || vt.cols() != d
            || qt.rows() != l.batch * l.q_len
            || kt.rows() != l.batch * l.k_len
            || vt.rows() != l.batch * l.k_len
            || l.heads == 0
            || d % l.heads != 0
            || l.mask.len() != l.batch * l.q_len * l.k_len
        {
            return Err(shape_err("attention", qt.shape(), kt.shape()));
        }
        let dh = d / l.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0; l.batch * l.heads * l.q_len * l.k_len];
        let mut out = vec![0.0; l.batch * l.q_len * d];
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        for b in 0..l.batch {
            for h in 0..l.heads {
                let c0 = h * dh;
                for i in 0..l.q_len {
                    let qrow = &qd[(b * l.q_len + i) * d + c0..][..dh];
                    let pbase = ((b * l.heads + h) * l.q_len + i) * l.k_len;
                    let p = &mut probs[pbase..pbase + l.k_len];
                    let mut any = false;
                    for j in 0..l.k_len {
                        if l.allowed(b, i, j) {
                            any = true;
                            p[j] = scale * dot(qrow, &kd[(b * l.k_len + j) * d + c0..][..dh]);
                        } else {
                            p[j] = f32::NEG_INFINITY;
                        }
                    }
                    if any {
                        softmax_in_place(p);
                    } else {
                        p.iter_mut().for_each(|x| *x = 1.0 / l.k_len as f32);
                    }
                    let orow = &mut out[(b * l.q_len + i) * d + c0..][..dh];
                    for j in 0..l.k_len {
                        if p[j] != 0.0 {
                            axpy(p[j], &vd[(b * l.k_len + j) * d + c0..][..dh], orow);
                        }
                    }
                }
            }
        }
        let rows = l.batch * l.q_len;
        Ok(self.push(
            matrix(vec![rows, d], out),
            Op::Attention { q, k, v, layout, probs, scale },
            &[q, k, v],
        ))
    }

    /// Mean negative log-likelihood over rows whose target is not `ignore`.
    /// Returns 0 when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let lt = self.value(logits);
        let (n, vocab) = (lt.rows(), lt.cols());
        if targets.len() != n {
            return Err(shape_err("cross_entropy", lt.shape(), &[targets.len()]));
        }
        let mut probs = lt.data().to_vec();
        let mut total = 0.0f64;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= vocab {
                return Err(Error::Index {
                    what: "target vocabulary",
                    index: t,
                    bound: vocab,
                });
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            total += (lse - row[t]) as f64;
            count += 1;
            softmax_in_place(row);
        }
        let loss = if count == 0 { 0.0 } else { (total / count as f64) as f32 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Σ x².
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64 * v as f64).sum::<f64>();
        self.push(Tensor::scalar(s as f32), Op::SumSquares { x }, &[x])
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(shape_err("backward", lt.shape(), &[1]));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::numeric(format!("non-finite loss {}", lt.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'p>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, val(b), &mut da, m, n, k);
                    accumulate(grads, a, &da);
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(val(a), g, &mut db, m, k, n);
                    accumulate(grads, b, &db);
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g, val(b), &mut da, m, n, k);
                    accumulate(grads, a, &da);
                }
                if wants(b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g, val(a), &mut db, m, n, k);
                    accumulate(grads, b, &db);
                }
            }
            &Op::AddBias { x, bias, zero_grad } => {
                if wants(x) {
                    accumulate(grads, x, g);
                }
                if wants(bias) {
                    let d = self.nodes[bias.0].value.numel();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d).filter(|_| !zero_grad) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, bias, &db);
                }
            }
            &Op::Add { a, b } => {
                if wants(a) {
                    accumulate(grads, a, g);
                }
                if wants(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::Scale { x, c } => {
                let dx: Vec<f32> = g.iter().map(|v| v * c).collect();
                accumulate(grads, x, &dx);
            }
            &Op::Relu { x } => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(val(x))
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, x, &dx);
            }
            &Op::Softmax { x } => {
                let p = node.value.data();
                let d = node.value.cols();
                let mut dx = vec![0.0; p.len()];
                for ((dxr, pr), gr) in dx.chunks_mut(d).zip(p.chunks(d)).zip(g.chunks(d)) {
                    let s = dot(pr, gr);
                    for c in 0..d {
                        dxr[c] = pr[c] * (gr[c] - s);
                    }
                }
                accumulate(grads, x, &dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.cols();
                let gv = val(*gain);
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                            db[c] += gr[c];
                        }
                    }
                    if wants(*gain) {
                        accumulate(grads, *gain, &dg);
                    }
                    if wants(*bias) {
                        accumulate(grads, *bias, &db);
                    }
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for c in 0..d {
                            dh[c] = gr[c] * gv[c];
                        }
                        let sum_dh: f32 = dh.iter().sum();
                        let sum_dh_h = dot(&dh, hr);
                        let inv_d = 1.0 / d as f32;
                        for c in 0..d {
                            dx[r * d + c] =
                                rstd[r] * (dh[c] - inv_d * sum_dh - hr[c] * inv_d * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = &self.nodes[table.0].value;
                let d = tt.cols();
                let mut dt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
                accumulate(grads, *table, &dt);
            }
            Op::Dropout { x, keep } => {
                let dx: Vec<f32> = g.iter().zip(keep).map(|(a, b)| a * b).collect();
                accumulate(grads, *x, &dx);
            }
            Op::Attention { q, k, v, layout, probs, scale } => {
                self.backprop_attention(*q, *k, *v, layout, probs, *scale, g, grads);
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.nodes[logits.0].value.cols();
                let upstream = g[0] / *count as f32;
                let mut dl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let row = &mut dl[r * vocab..(r + 1) * vocab];
                    row.copy_from_slice(&probs[r * vocab..(r + 1) * vocab]);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= upstream);
                }
                accumulate(grads, *logits, &dl);
            }
            &Op::SumSquares { x } => {
                let dx: Vec<f32> = val(x).iter().map(|v| 2.0 * v * g[0]).collect();
                accumulate(grads, x, &dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        l: &AttentionLayout,
        probs: &[f32],
        scale: f32,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let d = self.nodes[q.0].value.cols();
        let dh = d / l.heads;
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; l.k_len];
        for b in 0..l.batch {
            for h in 0..l.heads {
                let c0 = h * dh;
                for i in 0..l.q_len {
                    let qi = (b * l.q_len + i) * d + c0;
                    let go = &g[qi..qi + dh];
                    let pbase = ((b * l.heads + h) * l.q_len + i) * l.k_len;
                    let p = &probs[pbase..pbase + l.k_len];
                    let any = (0..l.k_len).any(|j| l.allowed(b, i, j));
                    for j in 0..l.k_len {
                        let kj = (b * l.k_len + j) * d + c0;
                        dp[j] = dot(go, &vd[kj..kj + dh]);
                        if p[j] != 0.0 {
                            axpy(p[j], go, &mut dv[kj..kj + dh]);
                        }
                    }
                    if !any {
                        // uniform fallback does not depend on the scores
                        continue;
                    }
                    let s = dot(p, &dp[..l.k_len]);
                    for j in 0..l.k_len {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (b * l.k_len + j) * d + c0;
                        axpy(ds, &kd[kj..kj + dh], &mut dq[qi..qi + dh]);
                        axpy(ds, &qd[qi..qi + dh], &mut dk[kj..kj + dh]);
                    }
                }
            }
        }
        if self.nodes[q.0].needs_grad {
            accumulate(grads, q, &dq);
        }
        if self.nodes[k.0].needs_grad {
            accumulate(grads, k, &dk);
        }
        if self.nodes[v.0].needs_grad {
            accumulate(grads, v, &dv);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Stable in-place softmax; `-inf` entries become exactly 0.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}
