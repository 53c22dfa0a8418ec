//! Greedy AR decoding, Jacobi fixed-point decoding and early-exit Jacobi
//! decoding, plus fixed-token accounting.
//!
//! Jacobi iteration `j` evaluates the whole block in one forward pass, with
//! row `i` conditioned on the prompt and on `state[..i]` from iteration
//! `j-1`, and replaces every token by its row's argmax at once. The loop stops
//! when two consecutive states are equal, or after `n` iterations: by then
//! the first `n` tokens have each been computed from an already-final prefix,
//! so the state equals the greedy AR output without a confirming pass.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::kernels::argmax;
use crate::model::{KvCache, ModelWeights};
use crate::vocab::{TokenId, TokenSequence, ACTION_BINS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ar,
    Jacobi,
    EarlyExit,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ar => "ar",
            Method::Jacobi => "jacobi",
            Method::EarlyExit => "early-exit",
        })
    }
}

/// Per-decode measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub method: Method,
    pub n: usize,
    /// Forward passes over the block (AR: one per token).
    pub iterations: usize,
    pub duration: Duration,
    pub tokens_per_s: f64,
    /// Fixed tokens per iteration, relative to the emitted state.
    pub fixed_tokens: Vec<usize>,
    pub exit_point: Option<usize>,
    /// True when early exit stopped the iteration before convergence.
    pub forced_exit: bool,
    pub converged: bool,
}

impl DecodeReport {
    pub const CSV_HEADER: &'static str =
        "method,n,iterations,duration_us,tokens_per_s,fixed_tokens_total,exit_point,converged";

    fn new(method: Method, n: usize, iterations: usize, duration: Duration) -> Self {
        let secs = duration.as_secs_f64().max(1e-9);
        DecodeReport {
            method,
            n,
            iterations,
            duration,
            tokens_per_s: n as f64 / secs,
            fixed_tokens: Vec::new(),
            exit_point: None,
            forced_exit: false,
            converged: true,
        }
    }

    /// Re-derives throughput from a different duration (e.g. a median).
    pub fn with_duration(mut self, duration: Duration) -> Self {
        self.duration = duration;
        self.tokens_per_s = self.n as f64 / duration.as_secs_f64().max(1e-9);
        self
    }

    pub fn fixed_tokens_total(&self) -> usize {
        self.fixed_tokens.iter().sum()
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{},{},{}",
            self.method,
            self.n,
            self.iterations,
            self.duration.as_micros(),
            self.tokens_per_s,
            self.fixed_tokens_total(),
            self.exit_point.map_or(String::new(), |e| e.to_string()),
            self.converged
        )
    }
}

/// States visited by Jacobi decoding from the random initial guess to the
/// fixed point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JacobiTrajectory {
    pub prompt: TokenSequence,
    /// `[Y⁽⁰⁾, …, Y⁽ᵏ⁾]`; empty when recording was off.
    pub states: Vec<TokenSequence>,
    pub fixed_point: TokenSequence,
    pub converged: bool,
    pub iterations: usize,
}

impl JacobiTrajectory {
    pub fn is_recorded(&self) -> bool {
        !self.states.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct JacobiOptions {
    pub init_seed: u64,
    /// Defaults to `n`.
    pub max_iters: Option<usize>,
    pub record: bool,
}

impl JacobiOptions {
    pub fn new(init_seed: u64) -> Self {
        JacobiOptions {
            init_seed,
            max_iters: None,
            record: false,
        }
    }

    pub fn recorded(mut self) -> Self {
        self.record = true;
        self
    }
}

fn check_request(model: &ModelWeights, prompt: &TokenSequence, n: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must contain at least one token".into()));
    }
    if n == 0 {
        return Err(Error::Contract("block length must be at least 1".into()));
    }
    prompt.validate(model.config().vocab_size)?;
    let cap = model.config().max_seq_len;
    if prompt.len() + n > cap {
        return Err(Error::Capacity {
            requested: prompt.len() + n,
            capacity: cap,
        });
    }
    Ok(())
}

fn prefill(model: &ModelWeights, prompt: &TokenSequence) -> Result<KvCache> {
    let mut cache = model.new_cache();
    model.extend(&mut cache, &prompt[..prompt.len() - 1], false)?;
    Ok(cache)
}

fn argmax_rows(logits: &[f32], vocab: usize) -> Vec<TokenId> {
    logits
        .chunks_exact(vocab)
        .map(|row| argmax(row) as TokenId)
        .collect()
}

/// Uniform random initial block over the action bins.
pub fn initial_state(model: &ModelWeights, n: usize, seed: u64) -> TokenSequence {
    let hi = (ACTION_BINS as usize).min(model.config().vocab_size) as TokenId;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TokenSequence::new((0..n).map(|_| rng.random_range(0..hi)).collect())
}

/// Greedy AR decoding: `n` incremental forward passes, lowest-id tie-break.
pub fn ar_greedy_decode(model: &ModelWeights, prompt: &TokenSequence, n: usize) -> Result<(TokenSequence, DecodeReport)> {
    check_request(model, prompt, n)?;
    let start = Instant::now();
    let v = model.config().vocab_size;
    let mut cache = prefill(model, prompt)?;
    let mut out = Vec::with_capacity(n);
    let mut cur = *prompt.last().expect("checked non-empty");
    for _ in 0..n {
        let logits = model.extend(&mut cache, &[cur], true)?;
        cur = argmax(&logits[..v]) as TokenId;
        out.push(cur);
    }
    let report = DecodeReport::new(Method::Ar, n, n, start.elapsed());
    Ok((TokenSequence::new(out), report))
}

/// Inputs for one block evaluation: the last prompt token, then `state[..n-1]`.
fn block_inputs(last_prompt: TokenId, state: &[TokenId]) -> Vec<TokenId> {
    let mut inputs = Vec::with_capacity(state.len());
    inputs.push(last_prompt);
    inputs.extend_from_slice(&state[..state.len() - 1]);
    inputs
}

struct LoopOutcome {
    states: Vec<Vec<TokenId>>,
    converged: bool,
}

/// Runs Jacobi iterations from `init` until convergence or `limit` iterations.
fn jacobi_loop(
    model: &ModelWeights,
    cache: &KvCache,
    last_prompt: TokenId,
    init: Vec<TokenId>,
    limit: usize,
) -> Result<LoopOutcome> {
    let v = model.config().vocab_size;
    let n = init.len();
    let mut states = vec![init];
    let mut converged = false;
    for j in 1..=limit {
        let prev = states.last().expect("non-empty");
        let logits = model.evaluate(cache, &block_inputs(last_prompt, prev))?;
        let next = argmax_rows(&logits, v);
        let same = next == *prev;
        states.push(next);
        if same || j >= n {
            converged = true;
            break;
        }
    }
    Ok(LoopOutcome { states, converged })
}

/// Jacobi fixed-point decoding of an `n`-token block.
pub fn jacobi_decode(
    model: &ModelWeights,
    prompt: &TokenSequence,
    n: usize,
    opts: &JacobiOptions,
) -> Result<(JacobiTrajectory, DecodeReport)> {
    check_request(model, prompt, n)?;
    let max_iters = opts.max_iters.unwrap_or(n);
    let init = initial_state(model, n, opts.init_seed);
    let start = Instant::now();
    let cache = prefill(model, prompt)?;
    let last = *prompt.last().expect("checked non-empty");
    let outcome = jacobi_loop(model, &cache, last, init.0, max_iters.max(1))?;
    let elapsed = start.elapsed();
    let iterations = outcome.states.len() - 1;
    if !outcome.converged {
        return Err(Error::ConvergenceFailure {
            max_iters,
            last_state: outcome.states.last().cloned().unwrap_or_default(),
        });
    }
    debug_assert!(iterations <= n);
    let states: Vec<TokenSequence> = outcome.states.into_iter().map(TokenSequence::new).collect();
    let fixed_point = states.last().cloned().expect("non-empty");
    let mut report = DecodeReport::new(Method::Jacobi, n, iterations, elapsed);
    report.fixed_tokens = fixed_token_counts(&states, &fixed_point);
    let traj = JacobiTrajectory {
        prompt: prompt.clone(),
        states: if opts.record { states } else { Vec::new() },
        fixed_point,
        converged: true,
        iterations,
    };
    Ok((traj, report))
}

/// Jacobi decoding that emits the state after `min(exit_point, k_conv)` iterations.
pub fn early_exit_decode(
    model: &ModelWeights,
    prompt: &TokenSequence,
    n: usize,
    exit_point: usize,
    init_seed: u64,
) -> Result<(TokenSequence, DecodeReport)> {
    if exit_point == 0 {
        return Err(Error::Contract("exit point must be at least 1".into()));
    }
    check_request(model, prompt, n)?;
    let init = initial_state(model, n, init_seed);
    let start = Instant::now();
    let cache = prefill(model, prompt)?;
    let last = *prompt.last().expect("checked non-empty");
    let outcome = jacobi_loop(model, &cache, last, init.0, exit_point)?;
    let elapsed = start.elapsed();
    let iterations = outcome.states.len() - 1;
    let states: Vec<TokenSequence> = outcome.states.into_iter().map(TokenSequence::new).collect();
    let out = states.last().cloned().expect("non-empty");
    let mut report = DecodeReport::new(Method::EarlyExit, n, iterations, elapsed);
    report.fixed_tokens = fixed_token_counts(&states, &out);
    report.exit_point = Some(exit_point);
    report.forced_exit = !outcome.converged;
    report.converged = outcome.converged;
    Ok((out, report))
}

/// Jacobi decoding of several prompts sharing each forward pass. A prompt
/// stops being evaluated once it converges; its report carries the wall time
/// until that point.
pub fn jacobi_decode_batch(
    model: &ModelWeights,
    prompts: &[TokenSequence],
    n: usize,
    init_seeds: &[u64],
    record: bool,
) -> Result<Vec<(JacobiTrajectory, DecodeReport)>> {
    if prompts.len() != init_seeds.len() {
        return Err(Error::Contract("one init seed per prompt required".into()));
    }
    for p in prompts {
        check_request(model, p, n)?;
    }
    let v = model.config().vocab_size;
    let start = Instant::now();
    let caches = prompts.iter().map(|p| prefill(model, p)).collect::<Result<Vec<_>>>()?;
    let mut states: Vec<Vec<Vec<TokenId>>> = init_seeds
        .iter()
        .map(|&s| vec![initial_state(model, n, s).0])
        .collect();
    let mut done: Vec<Option<Duration>> = vec![None; prompts.len()];
    for j in 1..=n {
        let active: Vec<usize> = (0..prompts.len()).filter(|&i| done[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        let inputs: Vec<Vec<TokenId>> = active
            .iter()
            .map(|&i| block_inputs(*prompts[i].last().expect("non-empty"), states[i].last().expect("non-empty")))
            .collect();
        let items: Vec<(&KvCache, &[TokenId])> = active.iter().zip(&inputs).map(|(&i, x)| (&caches[i], &x[..])).collect();
        let logits = model.evaluate_batch(&items)?;
        for (&i, l) in active.iter().zip(&logits) {
            let next = argmax_rows(l, v);
            let same = next == *states[i].last().expect("non-empty");
            states[i].push(next);
            if same || j >= n {
                done[i] = Some(start.elapsed());
            }
        }
    }
    Ok(prompts
        .iter()
        .zip(states)
        .zip(done)
        .map(|((p, st), d)| {
            let states: Vec<TokenSequence> = st.into_iter().map(TokenSequence::new).collect();
            let fixed_point = states.last().cloned().expect("non-empty");
            let iterations = states.len() - 1;
            let mut report = DecodeReport::new(Method::Jacobi, n, iterations, d.expect("all converge by n"));
            report.fixed_tokens = fixed_token_counts(&states, &fixed_point);
            let traj = JacobiTrajectory {
                prompt: p.clone(),
                states: if record { states } else { Vec::new() },
                fixed_point,
                converged: true,
                iterations,
            };
            (traj, report)
        })
        .collect())
}

fn fixed_token_counts(states: &[TokenSequence], target: &TokenSequence) -> Vec<usize> {
    states
        .windows(2)
        .map(|w| {
            let (before, after) = (&w[0], &w[1]);
            let mut count = 0;
            let mut wrong_before = false;
            for i in 0..target.len() {
                if wrong_before && after[i] == target[i] {
                    count += 1;
                }
                wrong_before |= before[i] != target[i];
            }
            count
        })
        .collect()
}

/// Fixed-token statistics of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedTokenCounts {
    /// For iteration `j → j+1`: positions that become correct although some
    /// earlier position of the input state was wrong.
    pub per_iteration: Vec<usize>,
    pub total: usize,
    pub mean_per_iteration: f64,
}

pub fn count_fixed_tokens(traj: &JacobiTrajectory) -> Result<FixedTokenCounts> {
    if !traj.is_recorded() {
        return Err(Error::Contract("trajectory states were not recorded".into()));
    }
    if !traj.converged {
        return Err(Error::Contract("trajectory did not converge".into()));
    }
    let per_iteration = fixed_token_counts(&traj.states, &traj.fixed_point);
    let total = per_iteration.iter().sum();
    let mean_per_iteration = if per_iteration.is_empty() {
        0.0
    } else {
        total as f64 / per_iteration.len() as f64
    };
    Ok(FixedTokenCounts {
        per_iteration,
        total,
        mean_per_iteration,
    })
}

/// Length of the longest prefix of `state` that agrees with `target`.
pub fn converged_prefix(state: &[TokenId], target: &[TokenId]) -> usize {
    state.iter().zip(target).take_while(|(a, b)| a == b).count()
}
