//! Benchmark harness: timed AR / Jacobi / early-exit decodes over held-out
//! prompts, suite aggregates and parameter sweeps.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::decoding::{ar_greedy_decode, early_exit_decode, jacobi_decode, DecodeReport, JacobiOptions, Method};
use crate::distill::eval_init_seed;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::task::{split_examples, Split, TaskSpec};
use crate::dataset::block_l1;
use crate::vocab::TokenSequence;

/// Warmup and measured repetitions of each timed call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Timing { warmup: 2, repeats: 5 }
    }
}

impl Timing {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 2 || self.repeats < 5 {
            return Err(Error::Config("timing needs at least 2 warmup runs and 5 repetitions".into()));
        }
        Ok(())
    }
}

/// Runs `f` `warmup` times untimed, then `repeats` times timed; returns the
/// median duration and the output of the last run.
pub fn time_median<T>(timing: &Timing, mut f: impl FnMut() -> Result<T>) -> Result<(Duration, T)> {
    for _ in 0..timing.warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(timing.repeats);
    let mut last = None;
    for _ in 0..timing.repeats.max(1) {
        let t = Instant::now();
        let out = f()?;
        times.push(t.elapsed());
        last = Some(out);
    }
    times.sort_unstable();
    Ok((times[times.len() / 2], last.expect("at least one repetition")))
}

/// A method to benchmark; early exit carries its exit point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodSpec {
    Ar,
    Jacobi,
    EarlyExit(usize),
}

impl MethodSpec {
    pub fn method(&self) -> Method {
        match self {
            MethodSpec::Ar => Method::Ar,
            MethodSpec::Jacobi => Method::Jacobi,
            MethodSpec::EarlyExit(_) => Method::EarlyExit,
        }
    }

    pub fn label(&self) -> String {
        match self {
            MethodSpec::EarlyExit(s) => format!("early-exit({s})"),
            m => m.method().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub methods: Vec<MethodSpec>,
    pub prompts: usize,
    pub seed: u64,
    pub timing: Timing,
}

/// One timed decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub prompt_index: usize,
    pub label: String,
    pub report: DecodeReport,
    /// Output equals the AR (fixed-point) output.
    pub matches_fixed_point: bool,
    pub l1_vs_ground_truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub label: String,
    pub method: Method,
    pub exit_point: Option<usize>,
    pub avg_tokens_per_s: f64,
    pub min_tokens_per_s: f64,
    pub max_tokens_per_s: f64,
    pub avg_iterations: f64,
    pub max_iterations: usize,
    /// Average throughput relative to AR; absent when AR was not run.
    pub speedup_vs_ar: Option<f64>,
    pub match_rate: f64,
    pub mean_l1_vs_ground_truth: f64,
    pub mean_fixed_per_iteration: f64,
    pub forced_exits: usize,
    /// Decodes whose output differs from the AR output although the method
    /// guarantees equality.
    pub equivalence_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvStamp {
    pub model_checksum: String,
    pub task: TaskSpec,
    pub seed: u64,
    pub prompts: usize,
    pub block_len: usize,
    pub timing: Timing,
    pub mode: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSuiteResult {
    pub aggregates: Vec<MethodAggregate>,
    pub rows: Vec<BenchRow>,
    pub env: EnvStamp,
}

impl BenchSuiteResult {
    pub fn aggregate(&self, label: &str) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    pub const SUMMARY_HEADER: &'static str = "label,method,exit_point,avg_tokens_per_s,min_tokens_per_s,max_tokens_per_s,avg_iterations,max_iterations,speedup_vs_ar,match_rate,mean_l1_vs_gt,mean_fixed_per_iteration,forced_exits,equivalence_violations";

    /// Per-decode rows (DecodeReport columns plus prompt and label), then a
    /// blank line and the per-method aggregates.
    pub fn to_csv(&self) -> String {
        let mut out = format!("prompt,label,{},matches_fixed_point,l1_vs_gt\n", DecodeReport::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.prompt_index,
                r.label,
                r.report.to_csv_row(),
                r.matches_fixed_point,
                r.l1_vs_ground_truth
            ));
        }
        out.push('\n');
        out.push_str(Self::SUMMARY_HEADER);
        out.push('\n');
        for a in &self.aggregates {
            out.push_str(&format!(
                "{},{},{},{:.3},{:.3},{:.3},{:.4},{},{},{:.4},{:.6},{:.4},{},{}\n",
                a.label,
                a.method,
                a.exit_point.map_or(String::new(), |e| e.to_string()),
                a.avg_tokens_per_s,
                a.min_tokens_per_s,
                a.max_tokens_per_s,
                a.avg_iterations,
                a.max_iterations,
                a.speedup_vs_ar.map_or(String::new(), |s| format!("{s:.4}")),
                a.match_rate,
                a.mean_l1_vs_ground_truth,
                a.mean_fixed_per_iteration,
                a.forced_exits,
                a.equivalence_violations
            ));
        }
        out
    }
}

fn decode_once(model: &ModelWeights, prompt: &TokenSequence, n: usize, m: MethodSpec, init_seed: u64) -> Result<(TokenSequence, DecodeReport)> {
    match m {
        MethodSpec::Ar => ar_greedy_decode(model, prompt, n),
        MethodSpec::Jacobi => {
            let (t, r) = jacobi_decode(model, prompt, n, &JacobiOptions::new(init_seed))?;
            Ok((t.fixed_point, r))
        }
        MethodSpec::EarlyExit(s) => early_exit_decode(model, prompt, n, s, init_seed),
    }
}

fn aggregate(spec: MethodSpec, rows: &[&BenchRow]) -> MethodAggregate {
    let k = rows.len().max(1) as f64;
    let tps: Vec<f64> = rows.iter().map(|r| r.report.tokens_per_s).collect();
    let guaranteed = matches!(spec, MethodSpec::Ar | MethodSpec::Jacobi);
    MethodAggregate {
        label: spec.label(),
        method: spec.method(),
        exit_point: match spec {
            MethodSpec::EarlyExit(s) => Some(s),
            _ => None,
        },
        avg_tokens_per_s: tps.iter().sum::<f64>() / k,
        min_tokens_per_s: tps.iter().copied().fold(f64::INFINITY, f64::min),
        max_tokens_per_s: tps.iter().copied().fold(0.0, f64::max),
        avg_iterations: rows.iter().map(|r| r.report.iterations as f64).sum::<f64>() / k,
        max_iterations: rows.iter().map(|r| r.report.iterations).max().unwrap_or(0),
        speedup_vs_ar: None,
        match_rate: rows.iter().filter(|r| r.matches_fixed_point).count() as f64 / k,
        mean_l1_vs_ground_truth: rows.iter().map(|r| r.l1_vs_ground_truth).sum::<f64>() / k,
        mean_fixed_per_iteration: rows
            .iter()
            .map(|r| r.report.fixed_tokens_total() as f64 / r.report.iterations.max(1) as f64)
            .sum::<f64>()
            / k,
        forced_exits: rows.iter().filter(|r| r.report.forced_exit).count(),
        equivalence_violations: if guaranteed {
            rows.iter().filter(|r| !r.matches_fixed_point).count()
        } else {
            0
        },
    }
}

/// Benchmarks every method on the first `prompts` held-out episodes. Within
/// a pass each prompt runs all methods back to back, so slow drift affects
/// them alike.
pub fn run_bench(model: &ModelWeights, spec: &TaskSpec, opts: &BenchOptions) -> Result<BenchSuiteResult> {
    opts.timing.validate()?;
    if opts.methods.is_empty() {
        return Err(Error::Config("no methods to benchmark".into()));
    }
    if opts.prompts == 0 {
        return Err(Error::Config("bench needs at least one prompt".into()));
    }
    let n = spec.block_len();
    let examples = split_examples(spec, opts.seed, Split::HeldOut, opts.prompts)?;
    let references = examples
        .iter()
        .map(|(prompt, _)| Ok(ar_greedy_decode(model, prompt, n)?.0))
        .collect::<Result<Vec<_>>>()?;
    // Repetitions are whole passes over the prompt set, so a stall on the
    // host lands in one sample per decode instead of most of them.
    let k = opts.methods.len();
    let mut samples = vec![Vec::with_capacity(opts.timing.repeats); examples.len() * k];
    let mut last: Vec<Option<(TokenSequence, DecodeReport)>> = vec![None; examples.len() * k];
    for pass in 0..opts.timing.warmup + opts.timing.repeats {
        for (i, (prompt, _)) in examples.iter().enumerate() {
            let init = eval_init_seed(opts.seed, i as u64);
            for (j, &m) in opts.methods.iter().enumerate() {
                let t = Instant::now();
                let out = decode_once(model, prompt, n, m, init)?;
                let elapsed = t.elapsed();
                if pass >= opts.timing.warmup {
                    samples[i * k + j].push(elapsed);
                    last[i * k + j] = Some(out);
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(examples.len() * k);
    for (i, (_, gt)) in examples.iter().enumerate() {
        for (j, &m) in opts.methods.iter().enumerate() {
            let times = &mut samples[i * k + j];
            times.sort_unstable();
            let median = times[times.len() / 2];
            let (out, report) = last[i * k + j].take().expect("timed at least once");
            let matches = out == references[i];
            if !matches && matches!(m, MethodSpec::Ar | MethodSpec::Jacobi) {
                log::error!("prompt {i}: {} output differs from the AR oracle", m.label());
            }
            rows.push(BenchRow {
                prompt_index: i,
                label: m.label(),
                report: report.with_duration(median),
                matches_fixed_point: matches,
                l1_vs_ground_truth: match block_l1(&out, gt, &spec.discretizer) {
                    Err(Error::Index { .. }) => f64::INFINITY,
                    other => other?,
                },
            });
        }
    }
    let mut aggregates: Vec<MethodAggregate> = opts
        .methods
        .iter()
        .map(|&m| {
            let label = m.label();
            let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.label == label).collect();
            aggregate(m, &mine)
        })
        .collect();
    if let Some(ar) = aggregates.iter().find(|a| a.method == Method::Ar).map(|a| a.avg_tokens_per_s) {
        for a in &mut aggregates {
            a.speedup_vs_ar = Some(if a.method == Method::Ar { 1.0 } else { a.avg_tokens_per_s / ar });
        }
    }
    Ok(BenchSuiteResult {
        aggregates,
        rows,
        env: EnvStamp {
            model_checksum: model.checksum(),
            task: spec.clone(),
            seed: opts.seed,
            prompts: opts.prompts,
            block_len: n,
            timing: opts.timing,
            mode: "sequential".into(),
        },
    })
}

/// Elementwise median of several suite runs' aggregates (rows come from the first run).
pub fn median_suite(runs: &[BenchSuiteResult]) -> Result<BenchSuiteResult> {
    let first = runs.first().ok_or_else(|| Error::Config("no suite runs".into()))?;
    let med = |mut v: Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut out = first.clone();
    for (j, a) in out.aggregates.iter_mut().enumerate() {
        let pick = |f: &dyn Fn(&MethodAggregate) -> f64| med(runs.iter().map(|r| f(&r.aggregates[j])).collect());
        a.avg_tokens_per_s = pick(&|x| x.avg_tokens_per_s);
        a.min_tokens_per_s = pick(&|x| x.min_tokens_per_s);
        a.max_tokens_per_s = pick(&|x| x.max_tokens_per_s);
        if a.speedup_vs_ar.is_some() {
            a.speedup_vs_ar = Some(pick(&|x| x.speedup_vs_ar.unwrap_or(f64::NAN)));
        }
    }
    Ok(out)
}

/// Exit points of the sweep: the reference grid `{n_ref, 16, 12, 8, 4}` for a
/// reference block of `n_ref` tokens, rescaled to a block of `n` tokens and
/// clamped to at least 1. Returned in decreasing order, starting at `n`.
pub fn scaled_exit_points(n: usize, n_ref: usize) -> Vec<usize> {
    let mut pts = vec![n];
    for s in [16usize, 12, 8, 4] {
        let v = ((s * n) as f64 / n_ref as f64).round().max(1.0) as usize;
        if v < *pts.last().expect("non-empty") {
            pts.push(v);
        }
    }
    pts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: f64,
    pub avg_tokens_per_s: f64,
    pub min_tokens_per_s: f64,
    pub avg_iterations: f64,
    /// Exact block match against the fixed point.
    pub match_rate: f64,
    pub mean_l1_vs_ground_truth: f64,
    pub mean_fixed_per_iteration: f64,
}

impl SweepPoint {
    pub const CSV_HEADER: &'static str =
        "axis,value,avg_tokens_per_s,min_tokens_per_s,avg_iterations,match_rate,mean_l1_vs_gt,mean_fixed_per_iteration";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.4},{:.4},{:.6},{:.4}",
            self.axis,
            self.value,
            self.avg_tokens_per_s,
            self.min_tokens_per_s,
            self.avg_iterations,
            self.match_rate,
            self.mean_l1_vs_ground_truth,
            self.mean_fixed_per_iteration
        )
    }

    pub fn from_aggregate(axis: &str, value: f64, a: &MethodAggregate) -> Self {
        SweepPoint {
            axis: axis.into(),
            value,
            avg_tokens_per_s: a.avg_tokens_per_s,
            min_tokens_per_s: a.min_tokens_per_s,
            avg_iterations: a.avg_iterations,
            match_rate: a.match_rate,
            mean_l1_vs_ground_truth: a.mean_l1_vs_ground_truth,
            mean_fixed_per_iteration: a.mean_fixed_per_iteration,
        }
    }
}

/// Early-exit decoding at each exit point (decreasing). All points share the
/// same prompts and init seeds, and each suite run interleaves them per prompt.
pub fn sweep_exit_points(
    model: &ModelWeights,
    spec: &TaskSpec,
    exit_points: &[usize],
    prompts: usize,
    seed: u64,
    timing: Timing,
    runs: usize,
) -> Result<Vec<SweepPoint>> {
    let opts = BenchOptions {
        methods: exit_points.iter().map(|&s| MethodSpec::EarlyExit(s)).collect(),
        prompts,
        seed,
        timing,
    };
    let suites = (0..runs.max(1)).map(|_| run_bench(model, spec, &opts)).collect::<Result<Vec<_>>>()?;
    let suite = median_suite(&suites)?;
    Ok(exit_points
        .iter()
        .zip(&suite.aggregates)
        .map(|(&s, a)| SweepPoint::from_aggregate("exit-point", s as f64, a))
        .collect())
}
