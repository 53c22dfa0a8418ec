//! Independent f64 reference implementations used as test oracles.
#![allow(dead_code)]

pub mod gradcheck;

use jf_core::model::{ModelConfig, ModelWeights};

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (r, k, c) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; c]; r];
    for i in 0..r {
        for p in 0..k {
            for j in 0..c {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + u.tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * r * g[i] + b[i]).collect()
}

/// Multi-head causal attention over a fused `[T × 3d]` q|k|v matrix.
pub fn causal_attention(qkv: &Mat, heads: usize) -> Mat {
    let t = qkv.len();
    let d = qkv[0].len() / 3;
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let o = h * hd;
        for i in 0..t {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..hd).map(|e| qkv[i][o + e] * qkv[j][d + o + e]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for (j, pj) in p.iter().enumerate() {
                for e in 0..hd {
                    out[i][o + e] += pj * qkv[j][2 * d + o + e];
                }
            }
        }
    }
    out
}

pub fn cross_entropy(logits: &Mat, targets: &[usize]) -> f64 {
    logits.iter().zip(targets).map(|(r, &t)| -log_softmax(r)[t]).sum()
}

/// `Σ_rows KL(p ‖ softmax(logits))`.
pub fn forward_kl(p: &Mat, logits: &Mat) -> f64 {
    p.iter()
        .zip(logits)
        .map(|(pr, lr)| {
            let lq = log_softmax(lr);
            pr.iter().zip(&lq).filter(|(pv, _)| **pv > 0.0).map(|(pv, q)| pv * (pv.ln() - q)).sum::<f64>()
        })
        .sum()
}

/// Flat parameters of a model, viewed by block name.
pub struct Params<'a> {
    pub cfg: &'a ModelConfig,
    pub flat: &'a [f64],
    pub offsets: &'a [(String, usize, Vec<usize>)],
}

impl Params<'_> {
    fn block(&self, name: &str) -> &[f64] {
        let (_, off, shape) = self.offsets.iter().find(|(n, _, _)| n == name).expect(name);
        &self.flat[*off..off + shape.iter().product::<usize>()]
    }

    fn mat(&self, name: &str) -> Mat {
        let (_, _, shape) = self.offsets.iter().find(|(n, _, _)| n == name).expect(name);
        self.block(name).chunks(shape[1]).map(|r| r.to_vec()).collect()
    }
}

pub fn offsets(w: &ModelWeights) -> Vec<(String, usize, Vec<usize>)> {
    w.blocks().iter().map(|b| (b.name.clone(), b.offset, b.shape.clone())).collect()
}

pub fn params_f64(w: &ModelWeights) -> Vec<f64> {
    w.params().iter().map(|&v| v as f64).collect()
}

fn add_bias(m: &mut Mat, b: &[f64]) {
    for r in m.iter_mut() {
        for (x, y) in r.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Pre-norm transformer forward; logits for rows `from..tokens.len()`.
pub fn transformer_logits(p: &Params, tokens: &[u32], from: usize) -> Mat {
    let te = p.mat("tok_emb");
    let pe = p.mat("pos_emb");
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| te[t as usize].iter().zip(&pe[i]).map(|(a, b)| a + b).collect())
        .collect();
    for l in 0..p.cfg.num_layers {
        let n = |s: &str| format!("layer{l}.{s}");
        let h: Mat = x.iter().map(|r| layer_norm(r, p.block(&n("ln1_g")), p.block(&n("ln1_b")))).collect();
        let mut qkv = matmul(&h, &p.mat(&n("wqkv")));
        add_bias(&mut qkv, p.block(&n("bqkv")));
        let a = causal_attention(&qkv, p.cfg.num_heads);
        let mut o = matmul(&a, &p.mat(&n("wo")));
        add_bias(&mut o, p.block(&n("bo")));
        for (xr, or) in x.iter_mut().zip(&o) {
            for (a, b) in xr.iter_mut().zip(or) {
                *a += b;
            }
        }
        let h: Mat = x.iter().map(|r| layer_norm(r, p.block(&n("ln2_g")), p.block(&n("ln2_b")))).collect();
        let mut m = matmul(&h, &p.mat(&n("w1")));
        add_bias(&mut m, p.block(&n("b1")));
        for r in m.iter_mut() {
            for v in r.iter_mut() {
                *v = gelu(*v);
            }
        }
        let mut m = matmul(&m, &p.mat(&n("w2")));
        add_bias(&mut m, p.block(&n("b2")));
        for (xr, mr) in x.iter_mut().zip(&m) {
            for (a, b) in xr.iter_mut().zip(mr) {
                *a += b;
            }
        }
    }
    let h: Mat = x[from..].iter().map(|r| layer_norm(r, p.block("lnf_g"), p.block("lnf_b"))).collect();
    matmul(&h, &p.mat("head"))
}

/// Teacher-forced summed cross-entropy of `label` after `prompt`.
pub fn ar_loss(p: &Params, prompt: &[u32], label: &[u32]) -> f64 {
    let mut toks = prompt.to_vec();
    toks.extend_from_slice(&label[..label.len() - 1]);
    let logits = transformer_logits(p, &toks, prompt.len() - 1);
    cross_entropy(&logits, &label.iter().map(|&t| t as usize).collect::<Vec<_>>())
}

/// Next-token distributions along `block` after `prompt`.
pub fn block_distributions(p: &Params, prompt: &[u32], block: &[u32]) -> Mat {
    let mut toks = prompt.to_vec();
    toks.extend_from_slice(&block[..block.len() - 1]);
    transformer_logits(p, &toks, prompt.len() - 1).iter().map(|r| softmax(r)).collect()
}

/// Consistency loss with explicit targets.
pub fn consistency_loss(p: &Params, prompt: &[u32], state: &[u32], targets: &Mat) -> f64 {
    let mut toks = prompt.to_vec();
    toks.extend_from_slice(&state[..state.len() - 1]);
    forward_kl(targets, &transformer_logits(p, &toks, prompt.len() - 1))
}

/// Central differences of `f` at `x` over `coords` (all coordinates if `None`).
pub fn central_diff(x: &[f64], h: f64, coords: Option<&[usize]>, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let all: Vec<usize> = (0..x.len()).collect();
    let coords = coords.unwrap_or(&all);
    coords
        .iter()
        .map(|&i| {
            let x0 = xs[i];
            xs[i] = x0 + h;
            let fp = f(&xs);
            xs[i] = x0 - h;
            let fm = f(&xs);
            xs[i] = x0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
