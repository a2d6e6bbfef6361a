//! Reverse-mode tape for the decoder's fixed operation set.
//!
//! A forward pass pushes nodes onto the tape; `backward` walks them in
//! reverse and accumulates gradients. Gradient accumulation order is fixed
//! per output element regardless of thread count.

use rayon::prelude::*;

use crate::error::{Result, TwistError};
use crate::tensor::kernels::{axpy, dot, matmul_nn, matmul_nn_acc, matmul_nt, matmul_nt_acc, matmul_tn_acc};
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f32 = 1e-5;
const GELU_COEF: f32 = 0.044_715;

/// Head-blocked work above which attention ops fan out across threads.
const ATTN_PAR_THRESHOLD: usize = 1 << 20;

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = a·b with a m×k, b k×n
    Matmul { a: Var, b: Var },
    /// y = a·bᵀ with a m×k, b n×k
    MatmulNT { a: Var, b: Var },
    /// y = x + bias broadcast over rows
    AddBiasRow { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    /// y = x ⊙ v broadcast over rows; v is a constant (mask), not a variable
    MulRowVec { x: Var, v: Vec<f32> },
    Relu { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, rstd: Vec<f32> },
    /// y[i] = tok_table[tokens[i]] + pos_table[i mod n]
    Embed { tok: Var, pos: Var, tokens: Vec<u32>, n: usize },
    /// (b·n, h·dh) -> (b,h,n,dh)
    SplitHeads { x: Var, b: usize, n: usize, h: usize, dh: usize },
    /// (b,h,n,dh) -> (b·n, h·dh)
    MergeHeads { x: Var, b: usize, n: usize, h: usize, dh: usize },
    /// s[i,j] = q_i·k_j / sqrt(dh) for j <= i, else 0; per (b,h)
    AttnScores { q: Var, k: Var, b: usize, h: usize, n: usize, dh: usize },
    /// row-wise softmax over the causal prefix; zeros elsewhere
    SoftmaxCausal { x: Var, b: usize, h: usize, n: usize },
    /// o_i = Σ_{j<=i} p[i,j]·v_j per (b,h)
    AttnContext { p: Var, v: Var, b: usize, h: usize, n: usize, dh: usize },
    /// plain row softmax for 2-D tensors
    SoftmaxRows { x: Var },
    /// mean token cross-entropy; probs saved for backward
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<f32> },
    /// scalar Σᵢ wᵢ·xᵢ against a constant weight vector
    WeightedSum { x: Var, w: Vec<f32> },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f32>>,
    needs: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs = value.requires_grad;
        self.push(Op::Leaf, value, needs)
    }

    fn push(&mut self, op: Op, value: Tensor, needs: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(TwistError::Shape(format!(
                "matmul inner extents differ: {ka} vs {kb}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn(self.value(a).data(), self.value(b).data(), out.data_mut(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, out, needs))
    }

    /// Product against the second operand's transpose (used for the tied
    /// output projection, where the vocabulary table is stored row-major).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (n, kb) = self.value(b).dims2()?;
        if ka != kb {
            return Err(TwistError::Shape(format!(
                "matmul_nt inner extents differ: {ka} vs {kb}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nt(self.value(a).data(), self.value(b).data(), out.data_mut(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNT { a, b }, out, needs))
    }

    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(bias).numel() != n {
            return Err(TwistError::Shape(format!(
                "bias extent {} does not match row width {n}",
                self.value(bias).numel()
            )));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (r, b) in row.iter_mut().zip(&bv) {
                *r += *b;
            }
        }
        out.grad = None;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBiasRow { x, bias }, out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TwistError::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.grad = None;
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += *v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, out, needs))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let mut out = self.value(x).clone();
        out.grad = None;
        for v in out.data_mut() {
            *v *= c;
        }
        let needs = self.needs(x);
        self.push(Op::Scale { x, c }, out, needs)
    }

    /// Row-broadcast elementwise product with a constant vector (activation
    /// masking). The vector is not differentiated.
    pub fn mul_row_vec(&mut self, x: Var, v: Vec<f32>) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if v.len() != n {
            return Err(TwistError::Shape(format!(
                "mask extent {} does not match row width {n}",
                v.len()
            )));
        }
        let mut out = self.value(x).clone();
        out.grad = None;
        for row in out.data_mut().chunks_exact_mut(n) {
            for (r, m) in row.iter_mut().zip(&v) {
                *r *= *m;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MulRowVec { x, v }, out, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.grad = None;
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let needs = self.needs(x);
        self.push(Op::Relu { x }, out, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.grad = None;
        for v in out.data_mut() {
            *v = gelu_fwd(*v);
        }
        let needs = self.needs(x);
        self.push(Op::Gelu { x }, out, needs)
    }

    /// Per-row normalization with learnable affine. Uses the population
    /// standard deviation; ε = 1e-5 is added to the variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if d < 2 {
            return Err(TwistError::InvalidInput(format!(
                "layer_norm needs row width >= 2, got {d} (degenerate input)"
            )));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(TwistError::Shape(format!(
                "layer_norm affine extents must be {d}"
            )));
        }
        let mut out = Tensor::zeros(&[rows, d]);
        let mut means = vec![0.0f32; rows];
        let mut rstds = vec![0.0f32; rows];
        {
            let xd = self.value(x).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            let od = out.data_mut();
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                let orow = &mut od[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            out,
            needs,
        ))
    }

    /// Token + learned positional embedding lookup for `b` sequences of
    /// length `n` (tokens flattened row-major).
    pub fn embed(&mut self, tok_table: Var, pos_table: Var, tokens: &[u32], n: usize) -> Result<Var> {
        let (vocab, d) = self.value(tok_table).dims2()?;
        let (context, dp) = self.value(pos_table).dims2()?;
        if d != dp {
            return Err(TwistError::Shape(
                "token and positional tables have different widths".into(),
            ));
        }
        if n > context {
            return Err(TwistError::InvalidInput(format!(
                "sequence length {n} exceeds context {context}"
            )));
        }
        if tokens.is_empty() || tokens.len() % n != 0 {
            return Err(TwistError::InvalidInput(
                "token batch length must be a positive multiple of the sequence length".into(),
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(TwistError::InvalidInput(format!(
                "token id {bad} >= vocab {vocab}"
            )));
        }
        let rows = tokens.len();
        let mut out = Tensor::zeros(&[rows, d]);
        {
            let tt = self.value(tok_table).data();
            let pt = self.value(pos_table).data();
            let od = out.data_mut();
            for (i, &t) in tokens.iter().enumerate() {
                let p = i % n;
                let orow = &mut od[i * d..(i + 1) * d];
                let trow = &tt[t as usize * d..(t as usize + 1) * d];
                let prow = &pt[p * d..(p + 1) * d];
                for j in 0..d {
                    orow[j] = trow[j] + prow[j];
                }
            }
        }
        let needs = self.needs(tok_table) || self.needs(pos_table);
        Ok(self.push(
            Op::Embed {
                tok: tok_table,
                pos: pos_table,
                tokens: tokens.to_vec(),
                n,
            },
            out,
            needs,
        ))
    }

    pub fn split_heads(&mut self, x: Var, b: usize, n: usize, h: usize, dh: usize) -> Result<Var> {
        let (rows, width) = self.value(x).dims2()?;
        if rows != b * n || width != h * dh {
            return Err(TwistError::Shape(format!(
                "split_heads: got {rows}x{width}, want {}x{}",
                b * n,
                h * dh
            )));
        }
        let mut out = Tensor::zeros(&[b, h, n, dh]);
        permute_to_heads(self.value(x).data(), out.data_mut(), b, n, h, dh);
        let needs = self.needs(x);
        Ok(self.push(Op::SplitHeads { x, b, n, h, dh }, out, needs))
    }

    pub fn merge_heads(&mut self, x: Var, b: usize, n: usize, h: usize, dh: usize) -> Result<Var> {
        let mut out = Tensor::zeros(&[b * n, h * dh]);
        permute_from_heads(self.value(x).data(), out.data_mut(), b, n, h, dh);
        let needs = self.needs(x);
        Ok(self.push(Op::MergeHeads { x, b, n, h, dh }, out, needs))
    }

    /// Causal scaled dot-product scores per (batch, head).
    pub fn attn_scores(&mut self, q: Var, k: Var, b: usize, h: usize, n: usize, dh: usize) -> Var {
        let mut out = Tensor::zeros(&[b, h, n, n]);
        let inv = 1.0 / (dh as f32).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let od = out.data_mut();
        let work = b * h * n * n * dh;
        let body = |(bh, s_block): (usize, &mut [f32])| {
            let q_block = &qd[bh * n * dh..(bh + 1) * n * dh];
            let k_block = &kd[bh * n * dh..(bh + 1) * n * dh];
            for i in 0..n {
                let qi = &q_block[i * dh..(i + 1) * dh];
                let srow = &mut s_block[i * n..(i + 1) * n];
                for j in 0..=i {
                    srow[j] = dot(qi, &k_block[j * dh..(j + 1) * dh]) * inv;
                }
            }
        };
        if work >= ATTN_PAR_THRESHOLD {
            od.par_chunks_mut(n * n).enumerate().for_each(body);
        } else {
            od.chunks_mut(n * n).enumerate().for_each(body);
        }
        let needs = self.needs(q) || self.needs(k);
        self.push(Op::AttnScores { q, k, b, h, n, dh }, out, needs)
    }

    /// Softmax over each causal row prefix; positions past the diagonal are
    /// exactly zero.
    pub fn softmax_causal(&mut self, x: Var, b: usize, h: usize, n: usize) -> Var {
        let mut out = Tensor::zeros(&[b, h, n, n]);
        let xd = self.value(x).data();
        let od = out.data_mut();
        let work = b * h * n * n;
        let body = |(bh, p_block): (usize, &mut [f32])| {
            let s_block = &xd[bh * n * n..(bh + 1) * n * n];
            for i in 0..n {
                let srow = &s_block[i * n..i * n + i + 1];
                let prow = &mut p_block[i * n..i * n + i + 1];
                softmax_row(srow, prow);
            }
        };
        if work >= ATTN_PAR_THRESHOLD {
            od.par_chunks_mut(n * n).enumerate().for_each(body);
        } else {
            od.chunks_mut(n * n).enumerate().for_each(body);
        }
        let needs = self.needs(x);
        self.push(Op::SoftmaxCausal { x, b, h, n }, out, needs)
    }

    /// Probability-weighted sum of values per (batch, head).
    pub fn attn_context(&mut self, p: Var, v: Var, b: usize, h: usize, n: usize, dh: usize) -> Var {
        let mut out = Tensor::zeros(&[b, h, n, dh]);
        let pd = self.value(p).data();
        let vd = self.value(v).data();
        let od = out.data_mut();
        let work = b * h * n * n * dh;
        let body = |(bh, o_block): (usize, &mut [f32])| {
            let p_block = &pd[bh * n * n..(bh + 1) * n * n];
            let v_block = &vd[bh * n * dh..(bh + 1) * n * dh];
            for i in 0..n {
                let orow = &mut o_block[i * dh..(i + 1) * dh];
                let prow = &p_block[i * n..(i + 1) * n];
                for j in 0..=i {
                    axpy(prow[j], &v_block[j * dh..(j + 1) * dh], orow);
                }
            }
        };
        if work >= ATTN_PAR_THRESHOLD {
            od.par_chunks_mut(n * dh).enumerate().for_each(body);
        } else {
            od.chunks_mut(n * dh).enumerate().for_each(body);
        }
        let needs = self.needs(p) || self.needs(v);
        self.push(Op::AttnContext { p, v, b, h, n, dh }, out, needs)
    }

    /// Full-row softmax for a 2-D tensor. Rows sum to 1 within 1e-6.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.value(x).dims2()?;
        let mut out = Tensor::zeros(&[rows, n]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for r in 0..rows {
                softmax_row(&xd[r * n..(r + 1) * n], &mut od[r * n..(r + 1) * n]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxRows { x }, out, needs))
    }

    /// Mean token-level cross-entropy between logits (T×V) and targets (T).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (rows, v) = self.value(logits).dims2()?;
        if targets.is_empty() {
            return Err(TwistError::InvalidInput("empty target sequence".into()));
        }
        if targets.len() != rows {
            return Err(TwistError::Shape(format!(
                "targets length {} does not match {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(TwistError::InvalidInput(format!(
                "target id {bad} >= vocab {v}"
            )));
        }
        let mut probs = vec![0.0f32; rows * v];
        let mut loss = 0.0f64;
        {
            let ld = self.value(logits).data();
            for r in 0..rows {
                let prow = &mut probs[r * v..(r + 1) * v];
                softmax_row(&ld[r * v..(r + 1) * v], prow);
                let p = prow[targets[r] as usize].max(f32::MIN_POSITIVE);
                loss -= (p as f64).ln();
            }
        }
        let value = Tensor::scalar((loss / rows as f64) as f32);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
            needs,
        ))
    }

    /// Weighted sum against a constant vector, reducing to a scalar.
    pub fn weighted_sum(&mut self, x: Var, w: &[f32]) -> Result<Var> {
        if self.value(x).numel() != w.len() {
            return Err(TwistError::Shape(format!(
                "weighted_sum: {} elements vs {} weights",
                self.value(x).numel(),
                w.len()
            )));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(w)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let needs = self.needs(x);
        Ok(self.push(
            Op::WeightedSum { x, w: w.to_vec() },
            Tensor::scalar(s as f32),
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land on every node that
    /// (transitively) requires them; read them back with `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TwistError::InvalidInput(
                "backward requires a scalar loss".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs || self.nodes[idx].grad.is_none() {
                continue;
            }
            self.backprop_node(idx);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f32> {
        let numel = self.nodes[v.0].value.numel();
        debug_assert!(numel > 0, "grad_buf on a node whose value was taken");
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; numel])
    }

    /// Like `grad_buf` but with the size given explicitly, for arms that have
    /// temporarily moved the node's value out.
    fn grad_buf_sized(&mut self, v: Var, numel: usize) -> &mut Vec<f32> {
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; numel])
    }

    /// Take the node's gradient and ensure input grad buffers exist, then
    /// dispatch. Ownership juggling keeps the borrow checker happy while the
    /// closure reads sibling node values.
    fn backprop_node(&mut self, idx: usize) {
        if matches!(self.nodes[idx].op, Op::Leaf) {
            return; // leaf grads stay readable after the sweep
        }
        let dy = self.nodes[idx].grad.take().expect("grad present");
        // Op is moved out temporarily so we can borrow nodes freely.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => unreachable!(),
            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape()[1];
                if self.needs(*a) {
                    let bd = std::mem::take(&mut self.nodes[b.0].value);
                    let ga = self.grad_buf(*a);
                    matmul_nt_acc(&dy, bd.data(), ga, m, n, k);
                    self.nodes[b.0].value = bd;
                }
                if self.needs(*b) {
                    let ad = std::mem::take(&mut self.nodes[a.0].value);
                    let gb = self.grad_buf(*b);
                    matmul_tn_acc(ad.data(), &dy, gb, m, k, n);
                    self.nodes[a.0].value = ad;
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape()[0];
                if self.needs(*a) {
                    let bd = std::mem::take(&mut self.nodes[b.0].value);
                    let ga = self.grad_buf(*a);
                    matmul_nn_acc(&dy, bd.data(), ga, m, n, k);
                    self.nodes[b.0].value = bd;
                }
                if self.needs(*b) {
                    let ad = std::mem::take(&mut self.nodes[a.0].value);
                    let gb = self.grad_buf(*b);
                    matmul_tn_acc(&dy, ad.data(), gb, m, n, k);
                    self.nodes[a.0].value = ad;
                }
            }
            Op::AddBiasRow { x, bias } => {
                let n = self.nodes[bias.0].value.numel();
                if self.needs(*x) {
                    acc(self.grad_buf(*x), &dy);
                }
                if self.needs(*bias) {
                    let gb = self.grad_buf(*bias);
                    for row in dy.chunks_exact(n) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(self.grad_buf(*a), &dy);
                }
                if self.needs(*b) {
                    acc(self.grad_buf(*b), &dy);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let c = *c;
                    let gx = self.grad_buf(*x);
                    for (g, d) in gx.iter_mut().zip(&dy) {
                        *g += c * *d;
                    }
                }
            }
            Op::MulRowVec { x, v } => {
                if self.needs(*x) {
                    let n = v.len();
                    let v = v.clone();
                    let gx = self.grad_buf(*x);
                    for (grow, drow) in gx.chunks_exact_mut(n).zip(dy.chunks_exact(n)) {
                        for j in 0..n {
                            grow[j] += drow[j] * v[j];
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xd = std::mem::take(&mut self.nodes[x.0].value);
                    let gx = self.grad_buf_sized(*x, dy.len());
                    for ((g, d), xv) in gx.iter_mut().zip(&dy).zip(xd.data()) {
                        if *xv > 0.0 {
                            *g += *d;
                        }
                    }
                    self.nodes[x.0].value = xd;
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xd = std::mem::take(&mut self.nodes[x.0].value);
                    let gx = self.grad_buf_sized(*x, dy.len());
                    for ((g, d), xv) in gx.iter_mut().zip(&dy).zip(xd.data()) {
                        *g += *d * gelu_bwd(*xv);
                    }
                    self.nodes[x.0].value = xd;
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = self.nodes[gamma.0].value.numel();
                let rows = mean.len();
                let xd = std::mem::take(&mut self.nodes[x.0].value);
                let gd = std::mem::take(&mut self.nodes[gamma.0].value);
                if self.needs(*beta) {
                    let gb = self.grad_buf_sized(*beta, d);
                    for drow in dy.chunks_exact(d) {
                        axpy(1.0, drow, gb);
                    }
                }
                if self.needs(*gamma) {
                    let gg = self.grad_buf_sized(*gamma, d);
                    for r in 0..rows {
                        let xrow = &xd.data()[r * d..(r + 1) * d];
                        let drow = &dy[r * d..(r + 1) * d];
                        for j in 0..d {
                            gg[j] += drow[j] * (xrow[j] - mean[r]) * rstd[r];
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = self.grad_buf_sized(*x, rows * d);
                    for r in 0..rows {
                        let xrow = &xd.data()[r * d..(r + 1) * d];
                        let drow = &dy[r * d..(r + 1) * d];
                        let grow = &mut gx[r * d..(r + 1) * d];
                        let m = mean[r];
                        let rs = rstd[r];
                        let mut sum_dxhat = 0.0f32;
                        let mut sum_dxhat_xhat = 0.0f32;
                        for j in 0..d {
                            let xhat = (xrow[j] - m) * rs;
                            let dxhat = drow[j] * gd.data()[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_d = 1.0 / d as f32;
                        for j in 0..d {
                            let xhat = (xrow[j] - m) * rs;
                            let dxhat = drow[j] * gd.data()[j];
                            grow[j] += rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                }
                self.nodes[x.0].value = xd;
                self.nodes[gamma.0].value = gd;
            }
            Op::Embed { tok, pos, tokens, n } => {
                let d = self.nodes[tok.0].value.shape()[1];
                if self.needs(*tok) {
                    let gt = self.grad_buf(*tok);
                    for (i, &t) in tokens.iter().enumerate() {
                        axpy(1.0, &dy[i * d..(i + 1) * d], &mut gt[t as usize * d..(t as usize + 1) * d]);
                    }
                }
                if self.needs(*pos) {
                    let n = *n;
                    let gp = self.grad_buf(*pos);
                    for i in 0..tokens.len() {
                        let p = i % n;
                        axpy(1.0, &dy[i * d..(i + 1) * d], &mut gp[p * d..(p + 1) * d]);
                    }
                }
            }
            Op::SplitHeads { x, b, n, h, dh } => {
                if self.needs(*x) {
                    let (b, n, h, dh) = (*b, *n, *h, *dh);
                    let gx = self.grad_buf(*x);
                    permute_from_heads_acc(&dy, gx, b, n, h, dh);
                }
            }
            Op::MergeHeads { x, b, n, h, dh } => {
                if self.needs(*x) {
                    let (b, n, h, dh) = (*b, *n, *h, *dh);
                    let gx = self.grad_buf(*x);
                    permute_to_heads_acc(&dy, gx, b, n, h, dh);
                }
            }
            Op::AttnScores { q, k, b, h, n, dh } => {
                let (b, h, n, dh) = (*b, *h, *n, *dh);
                let inv = 1.0 / (dh as f32).sqrt();
                let qd = std::mem::take(&mut self.nodes[q.0].value);
                let kd = std::mem::take(&mut self.nodes[k.0].value);
                // q and k gradients accumulate together per (batch, head).
                let mut gq = self.nodes[q.0]
                    .grad
                    .take()
                    .unwrap_or_else(|| vec![0.0; b * h * n * dh]);
                let mut gk = self.nodes[k.0]
                    .grad
                    .take()
                    .unwrap_or_else(|| vec![0.0; b * h * n * dh]);
                let work = b * h * n * n * dh;
                let body = |((bh, gq_block), gk_block): ((usize, &mut [f32]), &mut [f32])| {
                    let q_block = &qd.data()[bh * n * dh..(bh + 1) * n * dh];
                    let k_block = &kd.data()[bh * n * dh..(bh + 1) * n * dh];
                    let ds_block = &dy[bh * n * n..(bh + 1) * n * n];
                    for i in 0..n {
                        let dsrow = &ds_block[i * n..(i + 1) * n];
                        let qi = &q_block[i * dh..(i + 1) * dh];
                        for j in 0..=i {
                            let c = dsrow[j] * inv;
                            if c != 0.0 {
                                axpy(c, &k_block[j * dh..(j + 1) * dh], &mut gq_block[i * dh..(i + 1) * dh]);
                                axpy(c, qi, &mut gk_block[j * dh..(j + 1) * dh]);
                            }
                        }
                    }
                };
                if work >= ATTN_PAR_THRESHOLD {
                    gq.par_chunks_mut(n * dh)
                        .enumerate()
                        .zip(gk.par_chunks_mut(n * dh))
                        .for_each(body);
                } else {
                    gq.chunks_mut(n * dh)
                        .enumerate()
                        .zip(gk.chunks_mut(n * dh))
                        .for_each(body);
                }
                self.nodes[q.0].grad = Some(gq);
                self.nodes[k.0].grad = Some(gk);
                self.nodes[q.0].value = qd;
                self.nodes[k.0].value = kd;
            }
            Op::SoftmaxCausal { x, b, h, n } => {
                if self.needs(*x) {
                    let (b, h, n) = (*b, *h, *n);
                    let pd = std::mem::take(&mut self.nodes[idx].value);
                    let mut gx = self.nodes[x.0]
                        .grad
                        .take()
                        .unwrap_or_else(|| vec![0.0; b * h * n * n]);
                    let work = b * h * n * n;
                    let body = |(bh, gx_block): (usize, &mut [f32])| {
                        let p_block = &pd.data()[bh * n * n..(bh + 1) * n * n];
                        let d_block = &dy[bh * n * n..(bh + 1) * n * n];
                        for i in 0..n {
                            let prow = &p_block[i * n..i * n + i + 1];
                            let drow = &d_block[i * n..i * n + i + 1];
                            let grow = &mut gx_block[i * n..i * n + i + 1];
                            let mut s = 0.0f32;
                            for j in 0..prow.len() {
                                s += drow[j] * prow[j];
                            }
                            for j in 0..prow.len() {
                                grow[j] += prow[j] * (drow[j] - s);
                            }
                        }
                    };
                    if work >= ATTN_PAR_THRESHOLD {
                        gx.par_chunks_mut(n * n).enumerate().for_each(body);
                    } else {
                        gx.chunks_mut(n * n).enumerate().for_each(body);
                    }
                    self.nodes[x.0].grad = Some(gx);
                    self.nodes[idx].value = pd;
                }
            }
            Op::AttnContext { p, v, b, h, n, dh } => {
                let (b, h, n, dh) = (*b, *h, *n, *dh);
                let pd = std::mem::take(&mut self.nodes[p.0].value);
                let vd = std::mem::take(&mut self.nodes[v.0].value);
                let mut gp = self.nodes[p.0]
                    .grad
                    .take()
                    .unwrap_or_else(|| vec![0.0; b * h * n * n]);
                let mut gv = self.nodes[v.0]
                    .grad
                    .take()
                    .unwrap_or_else(|| vec![0.0; b * h * n * dh]);
                let work = b * h * n * n * dh;
                let body = |((bh, gp_block), gv_block): ((usize, &mut [f32]), &mut [f32])| {
                    let p_block = &pd.data()[bh * n * n..(bh + 1) * n * n];
                    let v_block = &vd.data()[bh * n * dh..(bh + 1) * n * dh];
                    let do_block = &dy[bh * n * dh..(bh + 1) * n * dh];
                    for i in 0..n {
                        let dorow = &do_block[i * dh..(i + 1) * dh];
                        let prow = &p_block[i * n..(i + 1) * n];
                        let gprow = &mut gp_block[i * n..(i + 1) * n];
                        for j in 0..=i {
                            gprow[j] += dot(dorow, &v_block[j * dh..(j + 1) * dh]);
                            if prow[j] != 0.0 {
                                axpy(prow[j], dorow, &mut gv_block[j * dh..(j + 1) * dh]);
                            }
                        }
                    }
                };
                if work >= ATTN_PAR_THRESHOLD {
                    gp.par_chunks_mut(n * n)
                        .enumerate()
                        .zip(gv.par_chunks_mut(n * dh))
                        .for_each(body);
                } else {
                    gp.chunks_mut(n * n)
                        .enumerate()
                        .zip(gv.chunks_mut(n * dh))
                        .for_each(body);
                }
                self.nodes[p.0].grad = Some(gp);
                self.nodes[v.0].grad = Some(gv);
                self.nodes[p.0].value = pd;
                self.nodes[v.0].value = vd;
            }
            Op::SoftmaxRows { x } => {
                if self.needs(*x) {
                    let pd = std::mem::take(&mut self.nodes[idx].value);
                    let (rows, n) = pd.dims2().unwrap();
                    let gx = self.grad_buf(*x);
                    for r in 0..rows {
                        let prow = &pd.data()[r * n..(r + 1) * n];
                        let drow = &dy[r * n..(r + 1) * n];
                        let grow = &mut gx[r * n..(r + 1) * n];
                        let s = dot(prow, drow);
                        for j in 0..n {
                            grow[j] += prow[j] * (drow[j] - s);
                        }
                    }
                    self.nodes[idx].value = pd;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.needs(*logits) {
                    let rows = targets.len();
                    let v = probs.len() / rows;
                    let scale = dy[0] / rows as f32;
                    let gl = self.grad_buf(*logits);
                    for r in 0..rows {
                        let prow = &probs[r * v..(r + 1) * v];
                        let grow = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            grow[j] += scale * prow[j];
                        }
                        grow[targets[r] as usize] -= scale;
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if self.needs(*x) {
                    let gx = self.grad_buf(*x);
                    for (g, wv) in gx.iter_mut().zip(w) {
                        *g += dy[0] * *wv;
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

#[inline]
fn acc(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[inline]
fn softmax_row(src: &[f32], dst: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in src {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - max).exp();
        *d = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

#[inline]
fn gelu_fwd(x: f32) -> f32 {
    let c = (2.0 / std::f32::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

#[inline]
fn gelu_bwd(x: f32) -> f32 {
    let c = (2.0 / std::f32::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn permute_to_heads(src: &[f32], dst: &mut [f32], b: usize, n: usize, h: usize, dh: usize) {
    for bi in 0..b {
        for ni in 0..n {
            let row = &src[(bi * n + ni) * h * dh..(bi * n + ni + 1) * h * dh];
            for hi in 0..h {
                let out = &mut dst[((bi * h + hi) * n + ni) * dh..((bi * h + hi) * n + ni + 1) * dh];
                out.copy_from_slice(&row[hi * dh..(hi + 1) * dh]);
            }
        }
    }
}

fn permute_to_heads_acc(src: &[f32], dst: &mut [f32], b: usize, n: usize, h: usize, dh: usize) {
    for bi in 0..b {
        for ni in 0..n {
            let row = &src[(bi * n + ni) * h * dh..(bi * n + ni + 1) * h * dh];
            for hi in 0..h {
                let out = &mut dst[((bi * h + hi) * n + ni) * dh..((bi * h + hi) * n + ni + 1) * dh];
                acc(out, &row[hi * dh..(hi + 1) * dh]);
            }
        }
    }
}

fn permute_from_heads(src: &[f32], dst: &mut [f32], b: usize, n: usize, h: usize, dh: usize) {
    for bi in 0..b {
        for hi in 0..h {
            for ni in 0..n {
                let head = &src[((bi * h + hi) * n + ni) * dh..((bi * h + hi) * n + ni + 1) * dh];
                let out = &mut dst[(bi * n + ni) * h * dh + hi * dh..(bi * n + ni) * h * dh + (hi + 1) * dh];
                out.copy_from_slice(head);
            }
        }
    }
}

fn permute_from_heads_acc(src: &[f32], dst: &mut [f32], b: usize, n: usize, h: usize, dh: usize) {
    for bi in 0..b {
        for hi in 0..h {
            for ni in 0..n {
                let head = &src[((bi * h + hi) * n + ni) * dh..((bi * h + hi) * n + ni + 1) * dh];
                let out = &mut dst[(bi * n + ni) * h * dh + hi * dh..(bi * n + ni) * h * dh + (hi + 1) * dh];
                acc(out, head);
            }
        }
    }
}
