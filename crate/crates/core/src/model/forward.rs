use super::*;
use crate::math::kernels::{self, gemm};
use crate::math::{Tape, Tensor, Var};
use crate::vocab::{TokenId, TokenSequence};

/// Cached keys and values for a token prefix.
#[derive(Clone, Debug)]
pub struct KvCache {
    weights_version: u64,
    len: usize,
    capacity: usize,
    dim: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn weights_version(&self) -> u64 {
        self.weights_version
    }

    /// Drops everything past the first `len` positions.
    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            self.len = len;
            for k in &mut self.keys {
                k.truncate(len * self.dim);
            }
            for v in &mut self.values {
                v.truncate(len * self.dim);
            }
        }
    }
}

/// Output of one batched evaluation: stacked logits plus the new key/value
/// rows per layer.
struct RunOutput {
    logits: Vec<f32>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl ModelWeights {
    pub fn new_cache(&self) -> KvCache {
        let n = self.config.num_layers;
        KvCache {
            weights_version: self.id,
            len: 0,
            capacity: self.config.max_seq_len,
            dim: self.config.model_dim,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    fn check_cache(&self, cache: &KvCache, extra: usize) -> Result<()> {
        if cache.weights_version != self.id {
            return Err(Error::Staleness {
                cache: cache.weights_version,
                weights: self.id,
            });
        }
        if cache.len + extra > self.config.max_seq_len {
            return Err(Error::Capacity {
                requested: cache.len + extra,
                capacity: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(Error::Index {
                index: t as usize,
                limit: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Evaluates several independent segments in one pass. Linear layers run
    /// over the stacked rows; attention stays within each segment (its own
    /// cache plus its earlier new rows).
    fn run(&self, segs: &[(&KvCache, &[TokenId])], want_logits: bool) -> Result<RunOutput> {
        for (cache, toks) in segs {
            self.check_cache(cache, toks.len())?;
            self.check_tokens(toks)?;
        }
        let c = &self.config;
        let (d, hdim, v) = (c.model_dim, c.hidden_dim(), c.vocab_size);
        let rows: usize = segs.iter().map(|(_, t)| t.len()).sum();
        let tok_emb = self.block(0);
        let pos_emb = self.block(1);

        let mut x = vec![0f32; rows * d];
        let mut r = 0;
        for (cache, toks) in segs {
            for (i, &t) in toks.iter().enumerate() {
                let pos = cache.len + i;
                let xr = &mut x[r * d..(r + 1) * d];
                let te = &tok_emb[t as usize * d..(t as usize + 1) * d];
                let pe = &pos_emb[pos * d..(pos + 1) * d];
                for j in 0..d {
                    xr[j] = te[j] + pe[j];
                }
                r += 1;
            }
        }

        let mut h = vec![0f32; rows * d];
        let mut qkv = vec![0f32; rows * 3 * d];
        let mut att = vec![0f32; rows * d];
        let mut tmp = vec![0f32; rows * d];
        let mut hid = vec![0f32; rows * hdim];
        let mut new_keys = Vec::with_capacity(c.num_layers);
        let mut new_values = Vec::with_capacity(c.num_layers);
        let heads = c.num_heads;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut scores = Vec::new();

        for l in 0..c.num_layers {
            let (g1, b1n) = (self.layer_block(l, LN1_G), self.layer_block(l, LN1_B));
            for (xr, hr) in x.chunks_exact(d).zip(h.chunks_exact_mut(d)) {
                kernels::layer_norm_row(xr, g1, b1n, hr);
            }
            gemm(&h, self.layer_block(l, WQKV), &mut qkv, rows, d, 3 * d);
            kernels::add_row_bias(&mut qkv, self.layer_block(l, BQKV));

            let mut k_rows = vec![0f32; rows * d];
            let mut v_rows = vec![0f32; rows * d];
            for i in 0..rows {
                k_rows[i * d..(i + 1) * d].copy_from_slice(&qkv[i * 3 * d + d..i * 3 * d + 2 * d]);
                v_rows[i * d..(i + 1) * d].copy_from_slice(&qkv[i * 3 * d + 2 * d..(i + 1) * 3 * d]);
            }

            let mut base = 0;
            for (cache, toks) in segs {
                let ck = &cache.keys[l];
                let cv = &cache.values[l];
                let past = cache.len;
                for i in 0..toks.len() {
                    let row = base + i;
                    let span = past + i + 1;
                    scores.resize(span, 0.0);
                    let out = &mut att[row * d..(row + 1) * d];
                    out.fill(0.0);
                    for head in 0..heads {
                        let off = head * hd;
                        let q = &qkv[row * 3 * d + off..row * 3 * d + off + hd];
                        for (j, s) in scores.iter_mut().enumerate() {
                            let k = if j < past {
                                &ck[j * d + off..j * d + off + hd]
                            } else {
                                let jr = base + (j - past);
                                &k_rows[jr * d + off..jr * d + off + hd]
                            };
                            *s = kernels::dot(q, k) * scale;
                        }
                        kernels::softmax_in_place(&mut scores);
                        let o = &mut out[off..off + hd];
                        for (j, &p) in scores.iter().enumerate() {
                            let vv = if j < past {
                                &cv[j * d + off..j * d + off + hd]
                            } else {
                                let jr = base + (j - past);
                                &v_rows[jr * d + off..jr * d + off + hd]
                            };
                            kernels::axpy(p, vv, o);
                        }
                    }
                }
                base += toks.len();
            }

            gemm(&att, self.layer_block(l, WO), &mut tmp, rows, d, d);
            kernels::add_row_bias(&mut tmp, self.layer_block(l, BO));
            kernels::add_assign(&mut x, &tmp);

            let (g2, b2n) = (self.layer_block(l, LN2_G), self.layer_block(l, LN2_B));
            for (xr, hr) in x.chunks_exact(d).zip(h.chunks_exact_mut(d)) {
                kernels::layer_norm_row(xr, g2, b2n, hr);
            }
            gemm(&h, self.layer_block(l, W1), &mut hid, rows, d, hdim);
            kernels::add_row_bias(&mut hid, self.layer_block(l, B1));
            kernels::gelu_in_place(&mut hid);
            gemm(&hid, self.layer_block(l, W2), &mut tmp, rows, hdim, d);
            kernels::add_row_bias(&mut tmp, self.layer_block(l, B2));
            kernels::add_assign(&mut x, &tmp);

            new_keys.push(k_rows);
            new_values.push(v_rows);
        }

        let logits = if want_logits {
            let (gf, bf) = (self.final_block(0), self.final_block(1));
            for (xr, hr) in x.chunks_exact(d).zip(h.chunks_exact_mut(d)) {
                kernels::layer_norm_row(xr, gf, bf, hr);
            }
            let mut logits = vec![0f32; rows * v];
            gemm(&h, self.final_block(2), &mut logits, rows, d, v);
            logits
        } else {
            Vec::new()
        };
        Ok(RunOutput {
            logits,
            keys: new_keys,
            values: new_values,
        })
    }

    fn commit(cache: &mut KvCache, out: &RunOutput, added: usize) {
        for (dst, src) in cache.keys.iter_mut().zip(&out.keys) {
            dst.extend_from_slice(src);
        }
        for (dst, src) in cache.values.iter_mut().zip(&out.values) {
            dst.extend_from_slice(src);
        }
        cache.len += added;
    }

    /// Appends `tokens` to the cache. Returns their logits rows (`len × V`)
    /// when `want_logits` is set, otherwise an empty vector.
    pub fn extend(&self, cache: &mut KvCache, tokens: &[TokenId], want_logits: bool) -> Result<Vec<f32>> {
        let out = self.run(&[(&*cache, tokens)], want_logits)?;
        Self::commit(cache, &out, tokens.len());
        Ok(out.logits)
    }

    /// Logits rows for `tokens` placed after the cached prefix, without
    /// modifying the cache.
    pub fn evaluate(&self, cache: &KvCache, tokens: &[TokenId]) -> Result<Vec<f32>> {
        Ok(self.run(&[(cache, tokens)], true)?.logits)
    }

    /// [`ModelWeights::evaluate`] for several independent prefixes sharing one pass.
    pub fn evaluate_batch(&self, items: &[(&KvCache, &[TokenId])]) -> Result<Vec<Vec<f32>>> {
        let out = self.run(items, true)?;
        let v = self.config.vocab_size;
        let mut rest = &out.logits[..];
        Ok(items
            .iter()
            .map(|(_, t)| {
                let (head, tail) = rest.split_at(t.len() * v);
                rest = tail;
                head.to_vec()
            })
            .collect())
    }

    /// Logits for `new_tokens` after the cached prefix, and the extended cache.
    pub fn forward_with_cache(&self, cache: &KvCache, new_tokens: &[TokenId]) -> Result<(Tensor, KvCache)> {
        let mut next = cache.clone();
        let logits = self.extend(&mut next, new_tokens, true)?;
        let t = Tensor::new(vec![new_tokens.len(), self.config.vocab_size], logits)?;
        Ok((t, next))
    }

    /// Row `i` holds the logits predicting `block[i]` from `prompt` and
    /// `block[..i]`. All rows come from one pass over the sequence.
    pub fn forward_logits(&self, prompt: &TokenSequence, block: &TokenSequence) -> Result<Tensor> {
        if prompt.is_empty() {
            return Err(Error::Contract("prompt must contain at least one token".into()));
        }
        let total = prompt.len() + block.len();
        if total > self.config.max_seq_len {
            return Err(Error::Capacity {
                requested: total,
                capacity: self.config.max_seq_len,
            });
        }
        let mut cache = self.new_cache();
        self.extend(&mut cache, &prompt[..prompt.len() - 1], false)?;
        let inputs = shifted_inputs(prompt, block);
        let logits = self.evaluate(&cache, &inputs)?;
        Tensor::new(vec![block.len(), self.config.vocab_size], logits)
    }

    /// Records every parameter block on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.blocks
                .iter()
                .map(|b| {
                    tape.param(Tensor::new(b.shape.clone(), self.params[b.range()].to_vec()).expect("layout shape"))
                })
                .collect(),
        )
    }

    /// Differentiable forward over a full sequence starting at position 0.
    /// Returns logits rows `logits_from..tokens.len()`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        tokens: &[TokenId],
        logits_from: usize,
    ) -> Result<Var> {
        let c = &self.config;
        if tokens.len() > c.max_seq_len {
            return Err(Error::Capacity {
                requested: tokens.len(),
                capacity: c.max_seq_len,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = &vars.0;
        let te = tape.embedding(p[0], &ids)?;
        let pe = tape.embedding(p[1], &positions)?;
        let mut x = tape.add(te, pe)?;
        for l in 0..c.num_layers {
            let lp = |w: usize| p[2 + l * PER_LAYER + w];
            let h = tape.layer_norm(x, lp(LN1_G), lp(LN1_B))?;
            let qkv = tape.matmul(h, lp(WQKV))?;
            let qkv = tape.add_bias(qkv, lp(BQKV))?;
            let a = tape.causal_attention(qkv, c.num_heads)?;
            let o = tape.matmul(a, lp(WO))?;
            let o = tape.add_bias(o, lp(BO))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, lp(LN2_G), lp(LN2_B))?;
            let m = tape.matmul(h, lp(W1))?;
            let m = tape.add_bias(m, lp(B1))?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, lp(W2))?;
            let m = tape.add_bias(m, lp(B2))?;
            x = tape.add(x, m)?;
        }
        let fin = 2 + c.num_layers * PER_LAYER;
        let x = tape.slice_rows(x, logits_from, tokens.len())?;
        let h = tape.layer_norm(x, p[fin], p[fin + 1])?;
        tape.matmul(h, p[fin + 2])
    }
}

/// Tape handles for every parameter block, in declaration order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    /// Copies each block's gradient into a flat buffer laid out like the weights.
    pub fn gather_grads(&self, tape: &Tape, blocks: &[ParamBlock], out: &mut [f32]) {
        for (var, b) in self.0.iter().zip(blocks) {
            if let Some(g) = tape.grad(*var) {
                kernels::add_assign(&mut out[b.range()], g);
            }
        }
    }
}

/// Inputs whose outputs predict `block`: the last prompt token followed by
/// `block[..n-1]`.
pub(crate) fn shifted_inputs(prompt: &[TokenId], block: &[TokenId]) -> Vec<TokenId> {
    let mut inputs = Vec::with_capacity(block.len());
    if !block.is_empty() {
        inputs.push(*prompt.last().expect("non-empty prompt"));
        inputs.extend_from_slice(&block[..block.len() - 1]);
    }
    inputs
}
