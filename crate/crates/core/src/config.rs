//! Flat `key = value` configuration covering the model, task, both training
//! runs and the benchmark.
//!
//! ```text
//! # comment
//! model.model_dim = 128
//! task.chunk = 3
//! teacher.steps = 800
//! distill.lr = 1e-4
//! bench.exit_point = 2
//! ```

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::Timing;
use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::task::TaskSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub prompts: usize,
    pub exit_point: usize,
    pub seed: u64,
    pub timing: Timing,
    /// Suite repetitions whose aggregates are reduced by median.
    pub runs: usize,
    /// Block length the exit-point grid `{n, 16, 12, 8, 4}` refers to.
    pub reference_block_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            prompts: 256,
            exit_point: 2,
            seed: 0,
            timing: Timing::default(),
            runs: 5,
            reference_block_len: 35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub teacher: TrainConfig,
    pub distill: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            teacher: TrainConfig::teacher_default(),
            distill: TrainConfig::distill_default(),
            bench: BenchConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse `{value}` for {key}")))
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, v: &str, line: usize) -> Result<()> {
    match field {
        "lr" => t.lr = parse(key, v, line)?,
        "beta1" => t.beta1 = parse(key, v, line)?,
        "beta2" => t.beta2 = parse(key, v, line)?,
        "eps" => t.eps = parse(key, v, line)?,
        "batch_size" => t.batch_size = parse(key, v, line)?,
        "steps" => t.steps = parse(key, v, line)?,
        "omega" => t.omega = parse(key, v, line)?,
        "delta_max" => t.delta_max = parse(key, v, line)?,
        "seed" => t.seed = parse(key, v, line)?,
        "eval_every" => t.eval_every = parse(key, v, line)?,
        "eval_prompts" => t.eval_prompts = parse(key, v, line)?,
        "grad_clip" => t.grad_clip = parse(key, v, line)?,
        _ => return Err(Error::Config(format!("line {line}: unknown key {key}"))),
    }
    Ok(())
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("line {line}: key {key} needs a section prefix")))?;
        let unknown = || Error::Config(format!("line {line}: unknown key {key}"));
        match section {
            "model" => {
                let m = &mut self.model;
                match field {
                    "vocab_size" => m.vocab_size = parse(key, v, line)?,
                    "model_dim" => m.model_dim = parse(key, v, line)?,
                    "num_layers" => m.num_layers = parse(key, v, line)?,
                    "num_heads" => m.num_heads = parse(key, v, line)?,
                    "max_seq_len" => m.max_seq_len = parse(key, v, line)?,
                    "rng_seed" => m.rng_seed = parse(key, v, line)?,
                    _ => return Err(unknown()),
                }
            }
            "task" => {
                let t = &mut self.task;
                match field {
                    "chunk" => t.chunk = parse(key, v, line)?,
                    "noise" => t.noise = parse(key, v, line)?,
                    "num_instructions" => t.num_instructions = parse(key, v, line)?,
                    "grid_levels" => t.grid_levels = parse(key, v, line)?,
                    "step_bins" => t.step_bins = parse(key, v, line)?,
                    "gripper_toggle" => t.gripper_toggle = parse(key, v, line)?,
                    "bins" => t.discretizer.bins = parse(key, v, line)?,
                    _ => return Err(unknown()),
                }
            }
            "teacher" => set_train(&mut self.teacher, field, key, v, line)?,
            "distill" => set_train(&mut self.distill, field, key, v, line)?,
            "bench" => {
                let b = &mut self.bench;
                match field {
                    "prompts" => b.prompts = parse(key, v, line)?,
                    "exit_point" => b.exit_point = parse(key, v, line)?,
                    "seed" => b.seed = parse(key, v, line)?,
                    "warmup" => b.timing.warmup = parse(key, v, line)?,
                    "repeats" => b.timing.repeats = parse(key, v, line)?,
                    "runs" => b.runs = parse(key, v, line)?,
                    "reference_block_len" => b.reference_block_len = parse(key, v, line)?,
                    _ => return Err(unknown()),
                }
            }
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.teacher.validate()?;
        self.distill.validate()?;
        self.bench.timing.validate()?;
        if self.bench.exit_point == 0 {
            return Err(Error::Config("bench.exit_point must be at least 1".into()));
        }
        Ok(())
    }

    /// Renders every key, suitable for `parse_str`.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        let m = &self.model;
        put("model.vocab_size", m.vocab_size.to_string());
        put("model.model_dim", m.model_dim.to_string());
        put("model.num_layers", m.num_layers.to_string());
        put("model.num_heads", m.num_heads.to_string());
        put("model.max_seq_len", m.max_seq_len.to_string());
        put("model.rng_seed", m.rng_seed.to_string());
        let t = &self.task;
        put("task.chunk", t.chunk.to_string());
        put("task.noise", t.noise.to_string());
        put("task.num_instructions", t.num_instructions.to_string());
        put("task.grid_levels", t.grid_levels.to_string());
        put("task.step_bins", t.step_bins.to_string());
        put("task.gripper_toggle", t.gripper_toggle.to_string());
        put("task.bins", t.discretizer.bins.to_string());
        for (name, tc) in [("teacher", &self.teacher), ("distill", &self.distill)] {
            put(&format!("{name}.lr"), tc.lr.to_string());
            put(&format!("{name}.beta1"), tc.beta1.to_string());
            put(&format!("{name}.beta2"), tc.beta2.to_string());
            put(&format!("{name}.eps"), tc.eps.to_string());
            put(&format!("{name}.batch_size"), tc.batch_size.to_string());
            put(&format!("{name}.steps"), tc.steps.to_string());
            put(&format!("{name}.omega"), tc.omega.to_string());
            put(&format!("{name}.delta_max"), tc.delta_max.to_string());
            put(&format!("{name}.seed"), tc.seed.to_string());
            put(&format!("{name}.eval_every"), tc.eval_every.to_string());
            put(&format!("{name}.eval_prompts"), tc.eval_prompts.to_string());
            put(&format!("{name}.grad_clip"), tc.grad_clip.to_string());
        }
        let b = &self.bench;
        put("bench.prompts", b.prompts.to_string());
        put("bench.exit_point", b.exit_point.to_string());
        put("bench.seed", b.seed.to_string());
        put("bench.warmup", b.timing.warmup.to_string());
        put("bench.repeats", b.timing.repeats.to_string());
        put("bench.runs", b.runs.to_string());
        put("bench.reference_block_len", b.reference_block_len.to_string());
        out
    }
}
