//! Checkpoint file: `JFCK`, version (u32), config, metadata, then the raw
//! little-endian f32 parameter blocks in declaration order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let c = weights.config();
    let meta = serde_json::to_vec(&weights.meta).expect("string map serializes");
    let mut header = Vec::with_capacity(64 + meta.len());
    header.extend_from_slice(CHECKPOINT_MAGIC);
    header.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.vocab_size, c.model_dim, c.num_layers, c.num_heads, c.max_seq_len] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    header.extend_from_slice(&c.rng_seed.to_le_bytes());
    header.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    header.extend_from_slice(&meta);
    header.extend_from_slice(&(weights.num_params() as u64).to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(weights.num_params() * 4);
    for p in weights.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn take<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format(format!("checkpoint truncated while reading {what}")))?;
    Ok(b)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic: [u8; 4] = take(&mut r, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = u32::from_le_bytes(take(&mut r, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(&mut r, "config")?) as usize;
    }
    let rng_seed = u64::from_le_bytes(take(&mut r, "config")?);
    let config = ModelConfig {
        vocab_size: dims[0],
        model_dim: dims[1],
        num_layers: dims[2],
        num_heads: dims[3],
        max_seq_len: dims[4],
        rng_seed,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid config in checkpoint header: {e}")))?;
    let meta_len = u32::from_le_bytes(take(&mut r, "metadata length")?) as usize;
    if meta_len > 1 << 20 {
        return Err(Error::Format(format!("metadata length {meta_len} implausible")));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)
        .map_err(|_| Error::Format("checkpoint truncated in metadata".into()))?;
    let meta: BTreeMap<String, String> = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let count = u64::from_le_bytes(take(&mut r, "parameter count")?) as usize;
    let expected = super::layout(&config).last().map_or(0, |b| b.offset + b.numel());
    if count != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters but its config needs {expected}"
        )));
    }
    let mut raw = vec![0u8; count * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format("checkpoint truncated in parameters".into()))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ModelWeights::from_parts(config, params, meta)
}

/// Loads a checkpoint and checks that its architecture matches `expected`
/// (the seed is not compared).
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelWeights> {
    let w = load_checkpoint(path)?;
    let found = w.config();
    let same = found.vocab_size == expected.vocab_size
        && found.model_dim == expected.model_dim
        && found.num_layers == expected.num_layers
        && found.num_heads == expected.num_heads
        && found.max_seq_len == expected.max_seq_len;
    if !same {
        return Err(Error::Format(format!(
            "checkpoint config mismatch: expected {expected:?}, found {found:?}"
        )));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::TokenSequence;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            model_dim: 16,
            num_layers: 2,
            num_heads: 4,
            max_seq_len: 16,
            rng_seed: 11,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jfck");
        let mut w = ModelWeights::init(&cfg()).unwrap();
        w.meta.insert("train_seed".into(), "42".into());
        save_checkpoint(&w, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), w.config());
        assert_eq!(back.meta, w.meta);
        assert!(back.params().iter().zip(w.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let p = TokenSequence::new(vec![1, 2, 3]);
        let b = TokenSequence::new(vec![4, 5]);
        let l1 = w.forward_logits(&p, &b).unwrap();
        let l2 = back.forward_logits(&p, &b).unwrap();
        assert_eq!(l1.data(), l2.data());
    }

    #[test]
    fn wrong_vocab_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jfck");
        save_checkpoint(&ModelWeights::init(&cfg()).unwrap(), &path).unwrap();
        let other = ModelConfig {
            vocab_size: 31,
            ..cfg()
        };
        match load_checkpoint_expecting(&path, &other) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("vocab_size: 31") && msg.contains("vocab_size: 30"), "{msg}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jfck");
        save_checkpoint(&ModelWeights::init(&cfg()).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
