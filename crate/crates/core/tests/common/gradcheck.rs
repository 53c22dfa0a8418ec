//! Tape gradients against central differences of the f64 oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jf_core::distill::{consistency_loss_tape, distill_loss_and_grad, target_distributions};
use jf_core::math::{Tape, Tensor, Var};
use jf_core::model::{ModelConfig, ModelWeights};
use jf_core::TokenSequence;

use super::*;

pub const FD_STEP: f64 = 1e-5;

struct Input {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn to_mat(flat: &[f64], cols: usize) -> Mat {
    flat.chunks(cols).map(|r| r.to_vec()).collect()
}

/// Relative error between the tape gradient of `uᵀ op(x) v` (or of `op(x)`
/// itself when it is a scalar) and central differences of the oracle.
fn op_case(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Input>,
    lib: impl Fn(&mut Tape, &[Var]) -> Var,
    oracle: impl Fn(&[Vec<f64>]) -> Mat,
) -> f64 {
    let x64: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.iter().map(|&v| v as f64).collect()).collect();
    let y = oracle(&x64);
    let (r, c) = (y.len(), y[0].len());
    let scalar = r == 1 && c == 1;
    let u: Vec<f32> = uniform(rng, r, -1.0, 1.0);
    let v: Vec<f32> = uniform(rng, c, -1.0, 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| tape.param(Tensor::new(i.shape.clone(), i.data.clone()).unwrap()))
        .collect();
    let out = lib(&mut tape, &vars);
    let root = if scalar {
        out
    } else {
        let ut = tape.constant(Tensor::new(vec![1, r], u.clone()).unwrap());
        let vt = tape.constant(Tensor::new(vec![c, 1], v.clone()).unwrap());
        let uy = tape.matmul(ut, out).unwrap();
        tape.matmul(uy, vt).unwrap()
    };
    tape.backward(root).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&inputs)
        .flat_map(|(&var, i)| match tape.grad(var) {
            Some(g) => g.iter().map(|&x| x as f64).collect::<Vec<_>>(),
            None => vec![0.0; i.data.len()],
        })
        .collect();

    let sizes: Vec<usize> = x64.iter().map(|x| x.len()).collect();
    let flat: Vec<f64> = x64.concat();
    let reduce = |flat: &[f64]| -> f64 {
        let mut parts = Vec::new();
        let mut off = 0;
        for &s in &sizes {
            parts.push(flat[off..off + s].to_vec());
            off += s;
        }
        let y = oracle(&parts);
        if scalar {
            return y[0][0];
        }
        let mut s = 0.0;
        for i in 0..r {
            for j in 0..c {
                s += u[i] as f64 * y[i][j] * v[j] as f64;
            }
        }
        s
    };
    let numeric = central_diff(&flat, FD_STEP, None, reduce);
    rel_err(&analytic, &numeric)
}

fn input(shape: Vec<usize>, data: Vec<f32>) -> Input {
    Input { shape, data }
}

/// `(op name, relative error)` for every tape op at one seed.
pub fn check_ops(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, k, c) = (3 + seed as usize % 3, 4, 5);
    let mut out = Vec::new();

    let a = uniform(&mut rng, r * k, -1.0, 1.0);
    let b = uniform(&mut rng, k * c, -1.0, 1.0);
    out.push((
        "matmul",
        op_case(
            &mut rng,
            vec![input(vec![r, k], a), input(vec![k, c], b)],
            |t, v| t.matmul(v[0], v[1]).unwrap(),
            |x| matmul(&to_mat(&x[0], k), &to_mat(&x[1], c)),
        ),
    ));

    let a = uniform(&mut rng, r * c, -1.0, 1.0);
    let b = uniform(&mut rng, r * c, -1.0, 1.0);
    out.push((
        "add",
        op_case(
            &mut rng,
            vec![input(vec![r, c], a), input(vec![r, c], b)],
            |t, v| t.add(v[0], v[1]).unwrap(),
            |x| to_mat(&x[0].iter().zip(&x[1]).map(|(p, q)| p + q).collect::<Vec<_>>(), c),
        ),
    ));

    let a = uniform(&mut rng, r * c, -1.0, 1.0);
    let b = uniform(&mut rng, c, -1.0, 1.0);
    out.push((
        "add_bias",
        op_case(
            &mut rng,
            vec![input(vec![r, c], a), input(vec![c], b)],
            |t, v| t.add_bias(v[0], v[1]).unwrap(),
            |x| to_mat(&x[0].iter().enumerate().map(|(i, p)| p + x[1][i % c]).collect::<Vec<_>>(), c),
        ),
    ));

    let a = uniform(&mut rng, r * c, -1.0, 1.0);
    out.push((
        "scale",
        op_case(
            &mut rng,
            vec![input(vec![r, c], a)],
            |t, v| t.scale(v[0], 0.37).unwrap(),
            |x| to_mat(&x[0].iter().map(|p| p * 0.37f32 as f64).collect::<Vec<_>>(), c),
        ),
    ));

    let a = uniform(&mut rng, r * c, -3.0, 3.0);
    out.push((
        "gelu",
        op_case(
            &mut rng,
            vec![input(vec![r, c], a)],
            |t, v| t.gelu(v[0]).unwrap(),
            |x| to_mat(&x[0].iter().map(|&p| gelu(p)).collect::<Vec<_>>(), c),
        ),
    ));

    let a = uniform(&mut rng, r * c, -2.0, 2.0);
    out.push((
        "softmax",
        op_case(
            &mut rng,
            vec![input(vec![r, c], a)],
            |t, v| t.softmax(v[0]).unwrap(),
            |x| to_mat(&x[0], c).iter().map(|row| softmax(row)).collect(),
        ),
    ));

    let a = uniform(&mut rng, r * c, -2.0, 2.0);
    let g = uniform(&mut rng, c, 0.5, 1.5);
    let b = uniform(&mut rng, c, -0.5, 0.5);
    out.push((
        "layer_norm",
        op_case(
            &mut rng,
            vec![input(vec![r, c], a), input(vec![c], g), input(vec![c], b)],
            |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
            |x| to_mat(&x[0], c).iter().map(|row| layer_norm(row, &x[1], &x[2])).collect(),
        ),
    ));

    let rows = 6;
    let table = uniform(&mut rng, rows * c, -1.0, 1.0);
    let ids: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..rows)).collect();
    let ids2 = ids.clone();
    out.push((
        "embedding",
        op_case(
            &mut rng,
            vec![input(vec![rows, c], table)],
            move |t, v| t.embedding(v[0], &ids).unwrap(),
            move |x| ids2.iter().map(|&i| x[0][i * c..(i + 1) * c].to_vec()).collect(),
        ),
    ));

    let a = uniform(&mut rng, (r + 2) * c, -1.0, 1.0);
    out.push((
        "slice_rows",
        op_case(
            &mut rng,
            vec![input(vec![r + 2, c], a)],
            |t, v| t.slice_rows(v[0], 1, 3).unwrap(),
            |x| to_mat(&x[0], c)[1..3].to_vec(),
        ),
    ));

    let (seq, d, heads) = (r + 1, 4, 2);
    let a = uniform(&mut rng, seq * 3 * d, -1.5, 1.5);
    out.push((
        "causal_attention",
        op_case(
            &mut rng,
            vec![input(vec![seq, 3 * d], a)],
            move |t, v| t.causal_attention(v[0], heads).unwrap(),
            move |x| causal_attention(&to_mat(&x[0], 3 * d), heads),
        ),
    ));

    let a = uniform(&mut rng, r * c, -2.0, 2.0);
    let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let t2 = targets.clone();
    out.push((
        "cross_entropy",
        op_case(
            &mut rng,
            vec![input(vec![r, c], a)],
            move |t, v| t.cross_entropy(v[0], &targets).unwrap(),
            move |x| vec![vec![cross_entropy(&to_mat(&x[0], c), &t2)]],
        ),
    ));

    let a = uniform(&mut rng, r * c, -2.0, 2.0);
    let mut p = uniform(&mut rng, r * c, 0.0, 1.0);
    p[0] = 0.0;
    for row in p.chunks_mut(c) {
        let s: f32 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let p64: Mat = p.chunks(c).map(|row| row.iter().map(|&v| v as f64).collect()).collect();
    out.push((
        "forward_kl",
        op_case(
            &mut rng,
            vec![input(vec![r, c], a)],
            move |t, v| t.forward_kl(&p, v[0]).unwrap(),
            move |x| vec![vec![forward_kl(&p64, &to_mat(&x[0], c))]],
        ),
    ));
    out
}

/// Small model with parameters pushed away from the near-linear init regime.
pub fn tiny_model(seed: u64) -> ModelWeights {
    let cfg = ModelConfig {
        vocab_size: 20,
        model_dim: 8,
        num_layers: 2,
        num_heads: 2,
        max_seq_len: 16,
        rng_seed: seed,
    };
    let mut w = ModelWeights::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    for p in w.params_mut() {
        *p += rng.random_range(-0.3f32..0.3);
    }
    w
}

pub struct ComposedCheck {
    /// Tape ∇ℒ_C (targets frozen) vs differences of the frozen-target oracle.
    pub consistency: f64,
    /// Tape ∇ℒ_AR vs differences of the oracle.
    pub ar: f64,
    /// Gradient of `ℒ_C + ω·ℒ_AR` from the training entry point vs the oracle.
    pub total: f64,
    /// Distance between the training gradient and differences of the loss
    /// with a live target branch; large means the check can see leakage.
    pub live_target_gap: f64,
    /// |oracle − library| loss values.
    pub value_err: f64,
}

pub fn check_composed(seed: u64) -> ComposedCheck {
    let w = tiny_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
    let v = w.config().vocab_size as u32;
    let gen = |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(0..v)).collect() };
    let prompt = gen(&mut rng, 4);
    let state = gen(&mut rng, 5);
    let fixed = gen(&mut rng, 5);
    let label = gen(&mut rng, 5);
    let omega = [0.5, 1.0, 2.0, 10.0][seed as usize % 4];

    let offs = offsets(&w);
    let theta = params_f64(&w);
    let cfg = w.config().clone();
    let at = |flat: &[f64]| Params { cfg: &cfg, flat, offsets: &offs }.to_owned_params();
    let frozen = block_distributions(&at(&theta).view(), &prompt, &fixed);

    let seq = |t: &Vec<u32>| TokenSequence::new(t.clone());
    let (p_s, s_s, f_s, l_s) = (seq(&prompt), seq(&state), seq(&fixed), seq(&label));

    let targets = target_distributions(&w, &p_s, &f_s).unwrap();
    let mut tape = Tape::new();
    let vars = w.register(&mut tape);
    let root = consistency_loss_tape(&w, &mut tape, &vars, &p_s, &s_s, &targets).unwrap();
    tape.backward(root).unwrap();
    let mut g_c = vec![0f32; w.num_params()];
    vars.gather_grads(&tape, w.blocks(), &mut g_c);
    let g_c: Vec<f64> = g_c.iter().map(|&x| x as f64).collect();
    let fd_c = central_diff(&theta, FD_STEP, None, |x| consistency_loss(&at(x).view(), &prompt, &state, &frozen));

    let lg_ar = distill_loss_and_grad(&w, &p_s, None, &f_s, &l_s, 1.0).unwrap();
    let g_ar: Vec<f64> = lg_ar.grad.iter().map(|&x| x as f64).collect();
    let fd_ar = central_diff(&theta, FD_STEP, None, |x| ar_loss(&at(x).view(), &prompt, &label));

    let lg = distill_loss_and_grad(&w, &p_s, Some(&s_s), &f_s, &l_s, omega).unwrap();
    let g_t: Vec<f64> = lg.grad.iter().map(|&x| x as f64).collect();
    let fd_t: Vec<f64> = fd_c.iter().zip(&fd_ar).map(|(c, a)| c + omega * a).collect();
    let fd_live = central_diff(&theta, FD_STEP, None, |x| {
        let p = at(x);
        let live = block_distributions(&p.view(), &prompt, &fixed);
        consistency_loss(&p.view(), &prompt, &state, &live) + omega * ar_loss(&p.view(), &prompt, &label)
    });

    let lc0 = consistency_loss(&at(&theta).view(), &prompt, &state, &frozen);
    let lar0 = ar_loss(&at(&theta).view(), &prompt, &label);
    let value_err = (lg.consistency - lc0).abs().max((lg.ar - lar0).abs()) / lc0.abs().max(lar0.abs()).max(1.0);

    ComposedCheck {
        consistency: rel_err(&g_c, &fd_c),
        ar: rel_err(&g_ar, &fd_ar),
        total: rel_err(&g_t, &fd_t),
        live_target_gap: rel_err(&g_t, &fd_live),
        value_err,
    }
}

/// Owned counterpart of [`Params`] for closures that rebuild parameters.
pub struct OwnedParams {
    cfg: ModelConfig,
    flat: Vec<f64>,
    offsets: Vec<(String, usize, Vec<usize>)>,
}

impl OwnedParams {
    pub fn view(&self) -> Params<'_> {
        Params { cfg: &self.cfg, flat: &self.flat, offsets: &self.offsets }
    }
}

impl Params<'_> {
    pub fn to_owned_params(&self) -> OwnedParams {
        OwnedParams { cfg: self.cfg.clone(), flat: self.flat.to_vec(), offsets: self.offsets.to_vec() }
    }
}
