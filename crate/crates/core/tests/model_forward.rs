mod common;

use jf_core::model::{ModelConfig, ModelWeights};
use jf_core::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> ModelWeights {
    let mut w = ModelWeights::init(&ModelConfig {
        model_dim: 32,
        num_layers: 2,
        num_heads: 4,
        max_seq_len: 64,
        rng_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap();
    for p in w.params_mut() {
        *p *= 8.0;
    }
    w
}

fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..262)).collect()
}

#[test]
fn single_row_block_equals_incremental_step() {
    let w = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prefix = tokens(&mut rng, 10);
    let mut cache = w.new_cache();
    w.extend(&mut cache, &prefix[..9], false).unwrap();
    let block = w.evaluate(&cache, &prefix[9..]).unwrap();
    let step = w.extend(&mut cache, &prefix[9..], true).unwrap();
    assert!(block.iter().zip(&step).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn later_tokens_do_not_change_earlier_rows() {
    let w = model(2);
    let v = 262;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prompt = TokenSequence::new(tokens(&mut rng, 6));
    let block = tokens(&mut rng, 12);
    let base = w.forward_logits(&prompt, &TokenSequence::new(block.clone())).unwrap();
    for i in 0..block.len() {
        let mut perm = block.clone();
        perm[i..].reverse();
        perm[i..].rotate_left(1);
        let other = w.forward_logits(&prompt, &TokenSequence::new(perm)).unwrap();
        // Row r sees inputs up to block[r - 1].
        for r in 0..=i {
            assert_eq!(&base.data()[r * v..(r + 1) * v], &other.data()[r * v..(r + 1) * v], "row {r} after permuting from {i}");
        }
    }
}

#[test]
fn block_rows_match_sequential_incremental_calls() {
    let v = 262;
    for seed in 0..5 {
        let w = model(10 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = tokens(&mut rng, 8);
        let block = tokens(&mut rng, 21);
        let full = w
            .forward_logits(&TokenSequence::new(prompt.clone()), &TokenSequence::new(block.clone()))
            .unwrap();
        let mut cache = w.new_cache();
        w.extend(&mut cache, &prompt[..prompt.len() - 1], false).unwrap();
        let mut inputs = vec![*prompt.last().unwrap()];
        inputs.extend_from_slice(&block[..block.len() - 1]);
        let mut worst = 0f32;
        for (r, &t) in inputs.iter().enumerate() {
            let step = w.extend(&mut cache, &[t], true).unwrap();
            for (a, b) in step.iter().zip(&full.data()[r * v..(r + 1) * v]) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-4, "seed {seed}: {worst}");
    }
}

#[test]
fn cached_prompt_reevaluated_matches_uncached() {
    let w = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prompt = tokens(&mut rng, 13);
    let mut cache = w.new_cache();
    w.extend(&mut cache, &prompt[..12], false).unwrap();
    for _ in 0..4 {
        let block = tokens(&mut rng, 21);
        let mut inputs = vec![prompt[12]];
        inputs.extend_from_slice(&block[..20]);
        let cached = w.evaluate(&cache, &inputs).unwrap();
        let uncached = w
            .forward_logits(&TokenSequence::new(prompt.clone()), &TokenSequence::new(block))
            .unwrap();
        assert_eq!(cached.as_slice(), uncached.data());
        assert_eq!(cache.len(), 12);
    }
}

#[test]
fn inference_forward_matches_f64_reference() {
    let w = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let prompt = tokens(&mut rng, 5);
    let block = tokens(&mut rng, 7);
    let got = w
        .forward_logits(&TokenSequence::new(prompt.clone()), &TokenSequence::new(block.clone()))
        .unwrap();
    let offs = common::offsets(&w);
    let flat = common::params_f64(&w);
    let p = common::Params { cfg: w.config(), flat: &flat, offsets: &offs };
    let dist = common::block_distributions(&p, &prompt, &block);
    let mut toks = prompt.clone();
    toks.extend_from_slice(&block[..6]);
    let want = common::transformer_logits(&p, &toks, 4);
    assert_eq!(dist.len(), 7);
    let scale = want.iter().flatten().fold(0f64, |m, x| m.max(x.abs()));
    for (r, row) in want.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            let e = (got.data()[r * 262 + c] as f64 - x).abs();
            assert!(e <= 1e-4 * scale.max(1.0), "row {r} col {c}: {e}");
        }
    }
}
