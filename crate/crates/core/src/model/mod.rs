//! Tiny decoder-only causal transformer.
//!
//! Pre-norm blocks (`x + attn(ln(x))`, `x + mlp(ln(x))`), learned positional
//! embeddings, fused QKV projection, untied output head. All parameters live
//! in one flat buffer so the optimizer and the checkpoint writer can treat
//! them uniformly; [`ParamBlock`] records where each named tensor sits.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::VOCAB_SIZE;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{KvCache, ParamVars};
pub(crate) use forward::shifted_inputs;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            model_dim: 128,
            num_layers: 4,
            num_heads: 4,
            max_seq_len: 128,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("vocab_size {} out of range", self.vocab_size)));
        }
        if self.model_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.model_dim
    }
}

/// A named parameter tensor inside the flat buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Number of blocks per transformer layer.
pub(crate) const PER_LAYER: usize = 12;

// indices within a layer
pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const WQKV: usize = 2;
pub(crate) const BQKV: usize = 3;
pub(crate) const WO: usize = 4;
pub(crate) const BO: usize = 5;
pub(crate) const LN2_G: usize = 6;
pub(crate) const LN2_B: usize = 7;
pub(crate) const W1: usize = 8;
pub(crate) const B1: usize = 9;
pub(crate) const W2: usize = 10;
pub(crate) const B2: usize = 11;

/// Parameter blocks in declaration order.
pub fn layout(config: &ModelConfig) -> Vec<ParamBlock> {
    let (v, d, s, h) = (
        config.vocab_size,
        config.model_dim,
        config.max_seq_len,
        config.hidden_dim(),
    );
    let mut shapes: Vec<(String, Vec<usize>)> = vec![
        ("tok_emb".into(), vec![v, d]),
        ("pos_emb".into(), vec![s, d]),
    ];
    for l in 0..config.num_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        shapes.extend([
            (p("ln1_g"), vec![d]),
            (p("ln1_b"), vec![d]),
            (p("wqkv"), vec![d, 3 * d]),
            (p("bqkv"), vec![3 * d]),
            (p("wo"), vec![d, d]),
            (p("bo"), vec![d]),
            (p("ln2_g"), vec![d]),
            (p("ln2_b"), vec![d]),
            (p("w1"), vec![d, h]),
            (p("b1"), vec![h]),
            (p("w2"), vec![h, d]),
            (p("b2"), vec![d]),
        ]);
    }
    shapes.extend([
        ("lnf_g".into(), vec![d]),
        ("lnf_b".into(), vec![d]),
        ("head".into(), vec![d, v]),
    ]);
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(name, shape)| {
            let b = ParamBlock {
                name,
                shape,
                offset,
            };
            offset += b.numel();
            b
        })
        .collect()
}

static NEXT_WEIGHTS_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_WEIGHTS_ID.fetch_add(1, Ordering::Relaxed)
}

/// Transformer parameters plus free-form metadata (seeds, provenance).
#[derive(Debug)]
pub struct ModelWeights {
    config: ModelConfig,
    blocks: Vec<ParamBlock>,
    params: Vec<f32>,
    /// Changes whenever the parameters are mutated; caches compare against it.
    id: u64,
    pub meta: BTreeMap<String, String>,
}

impl Clone for ModelWeights {
    fn clone(&self) -> Self {
        ModelWeights {
            config: self.config.clone(),
            blocks: self.blocks.clone(),
            params: self.params.clone(),
            id: self.id,
            meta: self.meta.clone(),
        }
    }
}

impl ModelWeights {
    /// Seeded random initialization (GPT-2 style: N(0, 0.02), residual
    /// projections scaled by 1/sqrt(2L), unit layer-norm gains).
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let blocks = layout(config);
        let total = blocks.last().map_or(0, |b| b.offset + b.numel());
        let mut params = vec![0f32; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let std = 0.02f32;
        let resid_std = std / (2.0 * config.num_layers as f32).sqrt();
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        for b in &blocks {
            let short = b.name.rsplit('.').next().unwrap_or(&b.name);
            let slot = &mut params[b.range()];
            match short {
                "ln1_g" | "ln2_g" | "lnf_g" => slot.fill(1.0),
                "ln1_b" | "ln2_b" | "lnf_b" | "bqkv" | "bo" | "b1" | "b2" => slot.fill(0.0),
                "wo" | "w2" => slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng) * resid_std),
                _ => slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng) * std),
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("init_seed".into(), config.rng_seed.to_string());
        Ok(ModelWeights {
            config: config.clone(),
            blocks,
            params,
            id: fresh_id(),
            meta,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f32>, meta: BTreeMap<String, String>) -> Result<Self> {
        config.validate()?;
        let blocks = layout(&config);
        let total = blocks.last().map_or(0, |b| b.offset + b.numel());
        if params.len() != total {
            return Err(Error::Format(format!(
                "expected {total} parameters for config, found {}",
                params.len()
            )));
        }
        Ok(ModelWeights {
            config,
            blocks,
            params,
            id: fresh_id(),
            meta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    /// Mutable access to the flat parameter buffer. Invalidates every
    /// [`KvCache`] built from these weights.
    pub fn params_mut(&mut self) -> &mut [f32] {
        self.id = fresh_id();
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Identity of the current parameter values within this process.
    pub fn version(&self) -> u64 {
        self.id
    }

    pub(crate) fn block(&self, idx: usize) -> &[f32] {
        &self.params[self.blocks[idx].range()]
    }

    pub(crate) fn layer_block(&self, layer: usize, which: usize) -> &[f32] {
        self.block(2 + layer * PER_LAYER + which)
    }

    pub(crate) fn final_block(&self, which: usize) -> &[f32] {
        self.block(2 + self.config.num_layers * PER_LAYER + which)
    }

    /// SHA-256 over config and parameter bytes, hex encoded (first 16 chars).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}
