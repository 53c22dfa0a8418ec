//! Record-then-reverse automatic differentiation.
//!
//! Each op pushes a node holding its output value and whatever the backward
//! rule needs. [`Tape::backward`] walks the nodes in reverse insertion order,
//! so every recorded op is visited exactly once.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        s: f32,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f32, f32)>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    CausalAttention {
        qkv: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    ForwardKl {
        logits: Var,
        target: Vec<f32>,
        q: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(op))
    }
}

/// Validates a row-wise probability table: non-negative, each row sums to 1 within 1e-5.
pub(crate) fn check_distribution(p: &[f32], cols: usize) -> Result<()> {
    for (r, row) in p.chunks_exact(cols).enumerate() {
        let mut sum = 0f64;
        for &v in row {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Contract(format!(
                    "target distribution row {r} has invalid entry {v}"
                )));
            }
            sum += v as f64;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!(
                "target distribution row {r} sums to {sum}"
            )));
        }
    }
    Ok(())
}

/// `Σ_v p̂_v (ln p̂_v − ln q_v)` in f64, where `p̂` is `p` renormalized and `q = softmax(logits)`.
/// Also writes `q` (f32) into `q_out`.
pub(crate) fn kl_row(p: &[f32], logits: &[f32], q_out: &mut [f32]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut z = 0f64;
    for &x in logits {
        z += (x as f64 - max).exp();
    }
    let lse = max + z.ln();
    let psum: f64 = p.iter().map(|&v| v as f64).sum();
    let mut kl = 0f64;
    for v in 0..logits.len() {
        let logq = logits[v] as f64 - lse;
        q_out[v] = logq.exp() as f32;
        let pv = p[v] as f64 / psum;
        if pv > 0.0 {
            kl += pv * (pv.ln() - logq);
        }
    }
    kl
}

/// `−log softmax(logits)[target]` in f64. Writes `softmax(logits)` into `probs`.
pub(crate) fn ce_row(logits: &[f32], target: usize, probs: &mut [f32]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut z = 0f64;
    for &x in logits {
        z += (x as f64 - max).exp();
    }
    let lse = max + z.ln();
    for (p, &x) in probs.iter_mut().zip(logits) {
        *p = (x as f64 - lse).exp() as f32;
    }
    lse - logits[target] as f64
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0f32; r * c];
        kernels::gemm(ta.data(), tb.data(), &mut out, r, k, c);
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MatMul { a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() {
            return Err(dim_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        kernels::add_row_bias(&mut data, tb.data());
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, needs))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v * s).collect(),
        )?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::Scale { x, s }, needs))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| kernels::gelu(v)).collect(),
        )?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::Gelu { x }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        check_finite("softmax", tx)?;
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::Softmax { x }, needs))
    }

    /// Row-wise layer norm with affine parameters (ε = 1e-5).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tg.numel() != cols || tb.numel() != cols {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let mut out = vec![0f32; tx.numel()];
        let mut stats = Vec::with_capacity(tx.rows());
        for (xr, or) in tx.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            stats.push(kernels::layer_norm_row(xr, tg.data(), tb.data(), or));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            needs,
        ))
    }

    /// Gathers rows `ids` of a 2-d table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    index: id,
                    limit: rows,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        let needs = self.ng(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Rows `start..end` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start > end || end > tx.rows() {
            return Err(Error::Index {
                index: end,
                limit: tx.rows(),
            });
        }
        let cols = tx.cols();
        let t = Tensor::new(
            vec![end - start, cols],
            tx.data()[start * cols..end * cols].to_vec(),
        )?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::SliceRows { x, start }, needs))
    }

    /// Multi-head causal self-attention over a fused `[T × 3d]` projection
    /// (queries, keys, values side by side). Returns `[T × d]`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let t = self.value(qkv);
        let (seq, width) = (t.rows(), t.cols());
        if width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(Error::Dimension {
                op: "causal_attention",
                left: t.shape().to_vec(),
                right: vec![heads],
            });
        }
        let d = width / 3;
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let x = t.data();
        let mut out = vec![0f32; seq * d];
        let mut probs = vec![0f32; heads * seq * seq];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..seq {
                let q = &x[i * width + off..i * width + off + hd];
                let p = &mut probs[(h * seq + i) * seq..(h * seq + i) * seq + i + 1];
                for (j, pj) in p.iter_mut().enumerate() {
                    let k = &x[j * width + d + off..j * width + d + off + hd];
                    *pj = kernels::dot(q, k) * scale;
                }
                kernels::softmax_in_place(p);
                let o = &mut out[i * d + off..i * d + off + hd];
                for (j, &pj) in p.iter().enumerate() {
                    let v = &x[j * width + 2 * d + off..j * width + 2 * d + off + hd];
                    kernels::axpy(pj, v, o);
                }
            }
        }
        let value = Tensor::new(vec![seq, d], out)?;
        let needs = self.ng(qkv);
        Ok(self.push(
            value,
            Op::CausalAttention {
                qkv,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Summed cross-entropy of each logits row against its target id.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        check_finite("cross_entropy", tl)?;
        let v = tl.cols();
        if targets.len() != tl.rows() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0f32; tl.numel()];
        let mut loss = 0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index { index: t, limit: v });
            }
            loss += ce_row(tl.row(r), t, &mut probs[r * v..(r + 1) * v]);
        }
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Summed forward KL `KL(p ‖ softmax(logits))` per row. `p` is a constant
    /// (no gradient flows into it); each row must be a probability vector.
    pub fn forward_kl(&mut self, target: &[f32], logits: Var) -> Result<Var> {
        let tl = self.value(logits);
        check_finite("forward_kl", tl)?;
        if target.len() != tl.numel() {
            return Err(Error::Dimension {
                op: "forward_kl",
                left: tl.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let v = tl.cols();
        check_distribution(target, v)?;
        let mut q = vec![0f32; tl.numel()];
        let mut loss = 0f64;
        for r in 0..tl.rows() {
            loss += kl_row(
                &target[r * v..(r + 1) * v],
                tl.row(r),
                &mut q[r * v..(r + 1) * v],
            );
        }
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::ForwardKl {
                logits,
                target: target.to_vec(),
                q,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar root. Gradients land in each needing node's
    /// tensor and are readable through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads)?;
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Vec<f32>, nodes: &[Node]| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => kernels::add_assign(existing, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if nodes[a.0].needs_grad {
                    let bt = kernels::transpose(tb.data(), k, c);
                    let mut da = vec![0f32; r * k];
                    kernels::gemm(g, &bt, &mut da, r, c, k);
                    acc(*a, da, nodes);
                }
                if nodes[b.0].needs_grad {
                    let at = kernels::transpose(ta.data(), r, k);
                    let mut db = vec![0f32; k * c];
                    kernels::gemm(&at, g, &mut db, k, r, c);
                    acc(*b, db, nodes);
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec(), nodes);
                acc(*b, g.to_vec(), nodes);
            }
            Op::AddBias { x, bias } => {
                acc(*x, g.to_vec(), nodes);
                if nodes[bias.0].needs_grad {
                    let cols = nodes[bias.0].value.numel();
                    let mut db = vec![0f32; cols];
                    for row in g.chunks_exact(cols) {
                        kernels::add_assign(&mut db, row);
                    }
                    acc(*bias, db, nodes);
                }
            }
            Op::Scale { x, s } => acc(*x, g.iter().map(|v| v * s).collect(), nodes),
            Op::Gelu { x } => {
                let xs = nodes[x.0].value.data();
                acc(
                    *x,
                    xs.iter().zip(g).map(|(&v, &gv)| kernels::gelu_grad(v) * gv).collect(),
                    nodes,
                );
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0f32; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(dx.chunks_exact_mut(cols))
                {
                    let s = kernels::dot(yr, gr);
                    for i in 0..cols {
                        dr[i] = yr[i] * (gr[i] - s);
                    }
                }
                acc(*x, dx, nodes);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let tx = &nodes[x.0].value;
                let gm = nodes[gamma.0].value.data();
                let cols = tx.cols();
                let n = cols as f32;
                let mut dx = vec![0f32; tx.numel()];
                let mut dg = vec![0f32; cols];
                let mut dbeta = vec![0f32; cols];
                let mut xhat = vec![0f32; cols];
                let mut dxhat = vec![0f32; cols];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = tx.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    for i in 0..cols {
                        xhat[i] = (xr[i] - mean) * rstd;
                        dg[i] += gr[i] * xhat[i];
                        dbeta[i] += gr[i];
                        dxhat[i] = gr[i] * gm[i];
                    }
                    let s1: f32 = dxhat.iter().sum();
                    let s2 = kernels::dot(&dxhat, &xhat);
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for i in 0..cols {
                        dr[i] = rstd * (dxhat[i] - s1 / n - xhat[i] * s2 / n);
                    }
                }
                acc(*x, dx, nodes);
                acc(*gamma, dg, nodes);
                acc(*beta, dbeta, nodes);
            }
            Op::Embedding { table, ids } => {
                let tt = &nodes[table.0].value;
                let cols = tt.cols();
                let mut dt = vec![0f32; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::add_assign(&mut dt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
                acc(*table, dt, nodes);
            }
            Op::SliceRows { x, start } => {
                let tx = &nodes[x.0].value;
                let cols = tx.cols();
                let mut dx = vec![0f32; tx.numel()];
                dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                acc(*x, dx, nodes);
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let t = &nodes[qkv.0].value;
                let (seq, width) = (t.rows(), t.cols());
                let d = width / 3;
                let hd = d / heads;
                let scale = 1.0 / (hd as f32).sqrt();
                let x = t.data();
                let mut dx = vec![0f32; x.len()];
                let mut dp = vec![0f32; seq];
                for h in 0..*heads {
                    let off = h * hd;
                    for i in 0..seq {
                        let p = &probs[(h * seq + i) * seq..(h * seq + i) * seq + i + 1];
                        let go = &g[i * d + off..i * d + off + hd];
                        for j in 0..=i {
                            let v = &x[j * width + 2 * d + off..j * width + 2 * d + off + hd];
                            dp[j] = kernels::dot(go, v);
                            let dv = &mut dx[j * width + 2 * d + off..j * width + 2 * d + off + hd];
                            kernels::axpy(p[j], go, dv);
                        }
                        let s = kernels::dot(p, &dp[..=i]);
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - s) * scale;
                            let (qi, kj) = (i * width + off, j * width + d + off);
                            for t in 0..hd {
                                dx[qi + t] += ds * x[kj + t];
                            }
                            for t in 0..hd {
                                dx[kj + t] += ds * x[qi + t];
                            }
                        }
                    }
                }
                acc(*qkv, dx, nodes);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].value.cols();
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * v + t] -= 1.0;
                }
                let s = g[0];
                dl.iter_mut().for_each(|x| *x *= s);
                acc(*logits, dl, nodes);
            }
            Op::ForwardKl { logits, target, q } => {
                let v = nodes[logits.0].value.cols();
                let s = g[0];
                let mut dl = vec![0f32; q.len()];
                for ((dr, qr), pr) in dl
                    .chunks_exact_mut(v)
                    .zip(q.chunks_exact(v))
                    .zip(target.chunks_exact(v))
                {
                    let psum: f32 = pr.iter().sum();
                    for i in 0..v {
                        dr[i] = (qr[i] - pr[i] / psum) * s;
                    }
                }
                acc(*logits, dl, nodes);
            }
        }
        Ok(())
    }
}
