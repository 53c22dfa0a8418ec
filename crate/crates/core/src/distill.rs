//! Teacher training, consistency loss, mixed-label AR loss and the
//! distillation loop.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DistillRecord};
use crate::decoding::{ar_greedy_decode, jacobi_decode, JacobiOptions};
use crate::error::{Error, Result};
use crate::math::{Tape, Var};
use crate::model::{shifted_inputs, ModelConfig, ModelWeights, ParamVars};
use crate::task::{episode_seed, generate_episode, encode_prompt, split_examples, target_tokens, Split, TaskSpec};
use crate::vocab::{TokenSequence, EOS, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub steps: usize,
    /// Weight of the AR term.
    pub omega: f64,
    /// Correctness threshold of the mixed-label gate (normalized L1).
    pub delta_max: f64,
    pub seed: u64,
    /// Steps between evaluations; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_prompts: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
}

impl TrainConfig {
    pub fn teacher_default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            steps: 800,
            omega: 1.0,
            delta_max: 0.05,
            seed: 0,
            eval_every: 200,
            eval_prompts: 64,
            grad_clip: 0.0,
        }
    }

    pub fn distill_default() -> Self {
        TrainConfig {
            lr: 1e-4,
            steps: 600,
            ..Self::teacher_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.omega >= 0.0) {
            return bad("omega must be >= 0");
        }
        if !(self.delta_max >= 0.0) {
            return bad("delta_max must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl Adam {
    pub fn new(num_params: usize, cfg: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = self.lr / c1;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let vhat = self.v[i] / c2;
            params[i] -= step * self.m[i] / (vhat.sqrt() + self.eps);
        }
    }
}

/// Which label the AR term used for one record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Teacher,
    GroundTruth,
}

/// Teacher fixed point when it is within `delta_max` of ground truth
/// (strictly), otherwise the ground-truth block.
pub fn mixed_label_select(record: &DistillRecord, delta_max: f64) -> (&TokenSequence, LabelSource) {
    if record.l1 < delta_max {
        (record.fixed_point(), LabelSource::Teacher)
    } else {
        (&record.ground_truth, LabelSource::GroundTruth)
    }
}

/// Fraction of records whose AR label comes from the teacher.
pub fn teacher_label_fraction(dataset: &Dataset, delta_max: f64) -> f64 {
    if dataset.records.is_empty() {
        return 0.0;
    }
    let hits = dataset
        .records
        .iter()
        .filter(|r| mixed_label_select(r, delta_max).1 == LabelSource::Teacher)
        .count();
    hits as f64 / dataset.records.len() as f64
}

fn check_block(model: &ModelWeights, prompt: &TokenSequence, block: &TokenSequence) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must contain at least one token".into()));
    }
    let v = model.config().vocab_size;
    prompt.validate(v)?;
    block.validate(v)?;
    Ok(())
}

/// Row-wise softmax of the model's logits for `block` after `prompt`, with no
/// gradient path. These are the stopped-gradient targets of the consistency loss.
pub fn target_distributions(model: &ModelWeights, prompt: &TokenSequence, block: &TokenSequence) -> Result<Vec<f32>> {
    let logits = model.forward_logits(prompt, block)?;
    let v = model.config().vocab_size;
    let mut out = vec![0f32; logits.numel()];
    for (row, dst) in logits.data().chunks_exact(v).zip(out.chunks_exact_mut(v)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = ((x as f64 - max).exp() / z) as f32;
        }
    }
    Ok(out)
}

/// Tape node of `Σ_i KL(targets_i ‖ Q_θ(· | state_{<i}, prompt))`.
pub fn consistency_loss_tape(
    model: &ModelWeights,
    tape: &mut Tape,
    vars: &ParamVars,
    prompt: &TokenSequence,
    state: &TokenSequence,
    targets: &[f32],
) -> Result<Var> {
    let mut tokens = prompt.0.clone();
    tokens.extend_from_slice(&shifted_inputs(prompt, state)[1..]);
    let logits = model.forward_tape(tape, vars, &tokens, prompt.len() - 1)?;
    tape.forward_kl(targets, logits)
}

/// Tape node of the teacher-forced summed cross-entropy of `label` after `prompt`.
pub fn ar_loss_tape(
    model: &ModelWeights,
    tape: &mut Tape,
    vars: &ParamVars,
    prompt: &TokenSequence,
    label: &TokenSequence,
) -> Result<Var> {
    let mut tokens = prompt.0.clone();
    tokens.extend_from_slice(&label[..label.len() - 1]);
    let logits = model.forward_tape(tape, vars, &tokens, prompt.len() - 1)?;
    let targets: Vec<usize> = label.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(logits, &targets)
}

/// Consistency loss value: summed forward KL from the distributions
/// conditioned on the fixed point's prefixes to those conditioned on the
/// sampled state's prefixes.
pub fn consistency_loss(
    model: &ModelWeights,
    prompt: &TokenSequence,
    state: &TokenSequence,
    fixed_point: &TokenSequence,
) -> Result<f64> {
    if state.len() != fixed_point.len() {
        return Err(Error::Contract(format!(
            "state length {} differs from fixed point length {}",
            state.len(),
            fixed_point.len()
        )));
    }
    check_block(model, prompt, state)?;
    check_block(model, prompt, fixed_point)?;
    if state.is_empty() {
        return Ok(0.0);
    }
    let targets = target_distributions(model, prompt, fixed_point)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let l = consistency_loss_tape(model, &mut tape, &vars, prompt, state, &targets)?;
    Ok(tape.value(l).item() as f64)
}

/// Teacher-forced summed cross-entropy of `label` after `prompt`.
pub fn ar_loss(model: &ModelWeights, prompt: &TokenSequence, label: &TokenSequence) -> Result<f64> {
    check_block(model, prompt, label)?;
    if label.is_empty() {
        return Ok(0.0);
    }
    let logits = model.forward_logits(prompt, label)?;
    let v = model.config().vocab_size;
    let mut total = 0f64;
    for (row, &t) in logits.data().chunks_exact(v).zip(label.iter()) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
        total += max + z.ln() - row[t as usize] as f64;
    }
    Ok(total)
}

/// Loss terms and flat parameter gradient of one distillation example.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub consistency: f64,
    pub ar: f64,
    pub total: f64,
    pub grad: Vec<f32>,
}

/// `ℒ_C + ω·ℒ_AR` for one (prompt, state, fixed point, label) example with its
/// gradient. The fixed-point branch is evaluated without a gradient path.
pub fn distill_loss_and_grad(
    model: &ModelWeights,
    prompt: &TokenSequence,
    state: Option<&TokenSequence>,
    fixed_point: &TokenSequence,
    label: &TokenSequence,
    omega: f64,
) -> Result<LossGrad> {
    let mut grad = vec![0f32; model.num_params()];
    let (lc, lar) = accumulate_distill(model, prompt, state, fixed_point, label, omega, &mut grad)?;
    Ok(LossGrad {
        consistency: lc,
        ar: lar,
        total: lc + omega * lar,
        grad,
    })
}

fn accumulate_distill(
    model: &ModelWeights,
    prompt: &TokenSequence,
    state: Option<&TokenSequence>,
    fixed_point: &TokenSequence,
    label: &TokenSequence,
    omega: f64,
    grad: &mut [f32],
) -> Result<(f64, f64)> {
    check_block(model, prompt, fixed_point)?;
    check_block(model, prompt, label)?;
    if label.len() != fixed_point.len() {
        return Err(Error::Contract("label and fixed point lengths differ".into()));
    }
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let mut terms: Vec<Var> = Vec::new();
    let mut lc = 0.0;
    if let Some(state) = state {
        if state.len() != fixed_point.len() {
            return Err(Error::Contract("state and fixed point lengths differ".into()));
        }
        check_block(model, prompt, state)?;
        let targets = target_distributions(model, prompt, fixed_point)?;
        let c = consistency_loss_tape(model, &mut tape, &vars, prompt, state, &targets)?;
        lc = tape.value(c).item() as f64;
        terms.push(c);
    }
    let lar;
    if omega > 0.0 {
        let a = ar_loss_tape(model, &mut tape, &vars, prompt, label)?;
        lar = tape.value(a).item() as f64;
        terms.push(tape.scale(a, omega as f32)?);
    } else {
        lar = ar_loss(model, prompt, label)?;
    }
    if let Some(&first) = terms.first() {
        let mut root = first;
        for &t in &terms[1..] {
            root = tape.add(root, t)?;
        }
        tape.backward(root)?;
        vars.gather_grads(&tape, model.blocks(), grad);
    }
    Ok((lc, lar))
}

/// Metrics emitted after each optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub consistency_loss: f64,
    pub ar_loss: f64,
    pub total_loss: f64,
    /// Fraction of the batch whose AR label came from ground truth.
    pub gt_fraction: f64,
    pub grad_norm: f64,
    /// Mean Jacobi iterations on the held-out prompts (eval steps only).
    pub eval_iterations: Option<f64>,
    /// Mean fixed tokens per iteration on the held-out prompts.
    pub eval_fixed_tokens: Option<f64>,
    /// Held-out greedy exact block match against ground truth (teacher) or
    /// against the teacher's output (student).
    pub eval_match: Option<f64>,
}

impl TrainMetrics {
    pub const CSV_HEADER: &'static str =
        "step,consistency_loss,ar_loss,total_loss,gt_fraction,grad_norm,eval_iterations,eval_fixed_tokens,eval_match";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{:.9},{:.9},{:.9},{:.4},{:.6},{},{},{}",
            self.step,
            self.consistency_loss,
            self.ar_loss,
            self.total_loss,
            self.gt_fraction,
            self.grad_norm,
            opt(self.eval_iterations),
            opt(self.eval_fixed_tokens),
            opt(self.eval_match)
        )
    }
}

impl fmt::Display for TrainMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} L_C {:.4} L_AR {:.4} total {:.4} gt {:.2} |g| {:.3}",
            self.step, self.consistency_loss, self.ar_loss, self.total_loss, self.gt_fraction, self.grad_norm
        )?;
        if let Some(it) = self.eval_iterations {
            write!(f, " eval_iters {it:.3}")?;
        }
        if let Some(ft) = self.eval_fixed_tokens {
            write!(f, " eval_fixed {ft:.3}")?;
        }
        if let Some(m) = self.eval_match {
            write!(f, " eval_match {m:.3}")?;
        }
        Ok(())
    }
}

fn grad_norm(g: &[f32]) -> f64 {
    g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn apply_update(
    weights: &mut ModelWeights,
    opt: &mut Adam,
    grad: &mut [f32],
    cfg: &TrainConfig,
    step: usize,
    last_finite: &mut Option<usize>,
) -> Result<f64> {
    let norm = grad_norm(grad);
    if !norm.is_finite() {
        return Err(Error::Training {
            step,
            last_finite_step: *last_finite,
        });
    }
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip as f64 {
        let s = (cfg.grad_clip as f64 / norm) as f32;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    opt.step(weights.params_mut(), grad);
    if !weights.all_finite() {
        return Err(Error::Training {
            step,
            last_finite_step: *last_finite,
        });
    }
    *last_finite = Some(step);
    Ok(norm)
}

/// Token sequence, first logits row and labels of one teacher example.
fn teacher_example(prompt: &TokenSequence, target: &TokenSequence) -> (Vec<u32>, usize, Vec<usize>) {
    let mut tokens = prompt.0.clone();
    tokens.extend_from_slice(target);
    let labels = target.iter().map(|&t| t as usize).chain([EOS as usize]).collect();
    (tokens, prompt.len() - 1, labels)
}

/// Fraction of prompts whose greedy block equals the reference block.
pub fn greedy_match_rate(model: &ModelWeights, examples: &[(TokenSequence, TokenSequence)]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (prompt, reference) in examples {
        let (out, _) = ar_greedy_decode(model, prompt, reference.len())?;
        hits += (out == *reference) as usize;
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Jacobi statistics over a prompt set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobiProfile {
    pub mean_iterations: f64,
    pub max_iterations: usize,
    /// Mean over decodes of the fixed-token total.
    pub mean_fixed_total: f64,
    /// Mean over decodes of fixed tokens per iteration.
    pub mean_fixed_per_iteration: f64,
}

/// Jacobi statistics over `prompts`, each decoded from the init seed paired
/// with its index.
pub fn jacobi_profile(model: &ModelWeights, prompts: &[TokenSequence], n: usize, seed: u64) -> Result<JacobiProfile> {
    let mut iters = 0usize;
    let mut max_iterations = 0usize;
    let mut fixed = 0usize;
    let mut per_iter = 0f64;
    for (i, p) in prompts.iter().enumerate() {
        let (_, rep) = jacobi_decode(model, p, n, &JacobiOptions::new(eval_init_seed(seed, i as u64)))?;
        iters += rep.iterations;
        max_iterations = max_iterations.max(rep.iterations);
        fixed += rep.fixed_tokens_total();
        per_iter += rep.fixed_tokens_total() as f64 / rep.iterations as f64;
    }
    let k = prompts.len().max(1) as f64;
    Ok(JacobiProfile {
        mean_iterations: iters as f64 / k,
        max_iterations,
        mean_fixed_total: fixed as f64 / k,
        mean_fixed_per_iteration: per_iter / k,
    })
}

/// Jacobi init seed for held-out evaluation prompt `index`.
pub fn eval_init_seed(seed: u64, index: u64) -> u64 {
    episode_seed(seed ^ 0x5E_ED0F_E7A1, Split::HeldOut, index)
}

/// Checkpoint metadata key holding the task spec as JSON.
pub const TASK_META_KEY: &str = "task";

/// Task spec recorded in a checkpoint's metadata, if any.
pub fn task_from_meta(weights: &ModelWeights) -> Result<Option<TaskSpec>> {
    weights
        .meta
        .get(TASK_META_KEY)
        .map(|s| serde_json::from_str(s).map_err(|e| Error::Format(format!("checkpoint task metadata: {e}"))))
        .transpose()
}

/// Summary of a teacher run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub steps: usize,
    pub final_loss: f64,
    pub heldout_match: f64,
}

/// Trains a model from scratch on fresh task episodes with teacher-forced
/// cross-entropy over each ground-truth block and its end token.
pub fn train_teacher(
    spec: &TaskSpec,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_metrics: impl FnMut(&TrainMetrics),
) -> Result<(ModelWeights, TeacherReport)> {
    spec.validate()?;
    cfg.validate()?;
    if model_cfg.vocab_size != VOCAB_SIZE {
        return Err(Error::Config(format!(
            "model vocab {} does not match task vocab {VOCAB_SIZE}",
            model_cfg.vocab_size
        )));
    }
    if spec.prompt_len() + spec.block_len() + 1 > model_cfg.max_seq_len {
        return Err(Error::Config("prompt and block exceed max_seq_len".into()));
    }
    let mut weights = ModelWeights::init(model_cfg)?;
    let heldout = split_examples(spec, cfg.seed, Split::HeldOut, cfg.eval_prompts)?;
    let mut opt = Adam::new(weights.num_params(), cfg);
    let mut grad = vec![0f32; weights.num_params()];
    let mut last_finite = None;
    let mut final_loss = f64::NAN;
    let mut next_episode = 0u64;
    for step in 1..=cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut tape = Tape::new();
        let vars = weights.register(&mut tape);
        let mut root: Option<Var> = None;
        for _ in 0..cfg.batch_size {
            let ep = generate_episode(spec, episode_seed(cfg.seed, Split::Train, next_episode));
            next_episode += 1;
            let prompt = encode_prompt(spec, &ep)?;
            let (tokens, from, labels) = teacher_example(&prompt, &target_tokens(spec, &ep));
            let logits = weights.forward_tape(&mut tape, &vars, &tokens, from)?;
            let ce = tape.cross_entropy(logits, &labels)?;
            root = Some(match root {
                Some(r) => tape.add(r, ce)?,
                None => ce,
            });
        }
        let root = root.expect("batch_size >= 1");
        let loss_sum = tape.value(root).item() as f64;
        if !loss_sum.is_finite() {
            return Err(Error::Training {
                step,
                last_finite_step: last_finite,
            });
        }
        let mean = tape.scale(root, 1.0 / cfg.batch_size as f32)?;
        tape.backward(mean)?;
        vars.gather_grads(&tape, weights.blocks(), &mut grad);
        drop(tape);
        let norm = apply_update(&mut weights, &mut opt, &mut grad, cfg, step, &mut last_finite)?;
        let per_token = loss_sum / (cfg.batch_size * (spec.block_len() + 1)) as f64;
        final_loss = per_token;
        let eval = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        let m = TrainMetrics {
            step,
            consistency_loss: 0.0,
            ar_loss: per_token,
            total_loss: per_token,
            gt_fraction: 1.0,
            grad_norm: norm,
            eval_iterations: None,
            eval_fixed_tokens: None,
            eval_match: if eval { Some(greedy_match_rate(&weights, &heldout)?) } else { None },
        };
        on_metrics(&m);
    }
    let heldout_match = greedy_match_rate(&weights, &heldout)?;
    weights.meta.insert("role".into(), "teacher".into());
    weights.meta.insert(TASK_META_KEY.into(), serde_json::to_string(spec).expect("task spec serializes"));
    weights.meta.insert("train_seed".into(), cfg.seed.to_string());
    weights.meta.insert("init_seed".into(), model_cfg.rng_seed.to_string());
    weights.meta.insert("steps".into(), cfg.steps.to_string());
    Ok((
        weights,
        TeacherReport {
            steps: cfg.steps,
            final_loss,
            heldout_match,
        },
    ))
}

/// Consistency distillation with mixed-label AR supervision. The student
/// starts as a copy of the teacher.
pub fn distill_student(
    teacher: &ModelWeights,
    dataset: &Dataset,
    spec: &TaskSpec,
    cfg: &TrainConfig,
    mut on_metrics: impl FnMut(&TrainMetrics),
) -> Result<ModelWeights> {
    cfg.validate()?;
    if dataset.header.vocab_size as usize != teacher.config().vocab_size {
        return Err(Error::Config(format!(
            "dataset vocab {} does not match teacher vocab {}",
            dataset.header.vocab_size,
            teacher.config().vocab_size
        )));
    }
    if dataset.header.block_len as usize != spec.block_len() {
        return Err(Error::Config(format!(
            "dataset block length {} does not match task block length {}",
            dataset.header.block_len,
            spec.block_len()
        )));
    }
    if dataset.records.is_empty() {
        return Err(Error::Config("dataset holds no records".into()));
    }
    let n = spec.block_len();
    let heldout: Vec<TokenSequence> = split_examples(spec, cfg.seed, Split::HeldOut, cfg.eval_prompts)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let teacher_out: Vec<(TokenSequence, TokenSequence)> = heldout
        .iter()
        .map(|p| Ok((p.clone(), ar_greedy_decode(teacher, p, n)?.0)))
        .collect::<Result<_>>()?;
    let evaluate = |w: &ModelWeights| -> Result<(f64, f64, f64)> {
        let prof = jacobi_profile(w, &heldout, n, cfg.seed)?;
        Ok((prof.mean_iterations, prof.mean_fixed_per_iteration, greedy_match_rate(w, &teacher_out)?))
    };
    let mut student = teacher.clone();
    if cfg.eval_every > 0 {
        let (it, fx, mr) = evaluate(&student)?;
        on_metrics(&TrainMetrics {
            step: 0,
            consistency_loss: 0.0,
            ar_loss: 0.0,
            total_loss: 0.0,
            gt_fraction: 0.0,
            grad_norm: 0.0,
            eval_iterations: Some(it),
            eval_fixed_tokens: Some(fx),
            eval_match: Some(mr),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(student.num_params(), cfg);
    let mut grad = vec![0f32; student.num_params()];
    let mut last_finite = None;
    for step in 1..=cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (mut lc, mut lar, mut gt) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.batch_size {
            let rec = &dataset.records[rng.random_range(0..dataset.records.len())];
            let (label, source) = mixed_label_select(rec, cfg.delta_max);
            gt += (source == LabelSource::GroundTruth) as usize;
            let state = rec.sample_state(&mut rng);
            let (c, a) = accumulate_distill(&student, &rec.prompt, state, rec.fixed_point(), label, cfg.omega, &mut grad)?;
            lc += c;
            lar += a;
        }
        let b = cfg.batch_size as f64;
        let (lc, lar) = (lc / b, lar / b);
        let total = lc + cfg.omega * lar;
        if !total.is_finite() {
            return Err(Error::Training {
                step,
                last_finite_step: last_finite,
            });
        }
        let inv = 1.0 / cfg.batch_size as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        let norm = apply_update(&mut student, &mut opt, &mut grad, cfg, step, &mut last_finite)?;
        let eval = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        let (ei, ef, em) = if eval {
            let (a, b, c) = evaluate(&student)?;
            (Some(a), Some(b), Some(c))
        } else {
            (None, None, None)
        };
        on_metrics(&TrainMetrics {
            step,
            consistency_loss: lc,
            ar_loss: lar,
            total_loss: total,
            gt_fraction: gt as f64 / b,
            grad_norm: norm,
            eval_iterations: ei,
            eval_fixed_tokens: ef,
            eval_match: em,
        });
    }
    student.meta.insert("role".into(), "student".into());
    student.meta.insert(TASK_META_KEY.into(), serde_json::to_string(spec).expect("task spec serializes"));
    student.meta.insert("teacher".into(), teacher.checksum());
    student.meta.insert("distill_seed".into(), cfg.seed.to_string());
    student.meta.insert("steps".into(), cfg.steps.to_string());
    Ok(student)
}
