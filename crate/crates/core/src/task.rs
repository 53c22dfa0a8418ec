//! Synthetic manipulation task standing in for a robot dataset.
//!
//! An episode pairs an instruction id and a low-dimensional observation
//! (current 7-dim end-effector pose plus a goal-height cue) with the chunk of
//! `m` future actions. Each action moves every pose component toward an
//! instruction-indexed goal at a bounded per-step speed, and the gripper
//! switches to the instruction's target state at a fixed fraction of the chunk.
//! Observation values are drawn from a coarse grid aligned with bin centres
//! so the noise-free target is a function of the prompt tokens.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSequence, ACTION_BINS, BOS, INSTR, OBS, SEP};

/// Components per action: X, Y, Z, roll, pitch, yaw, gripper.
pub const ACTION_DIM: usize = 7;
/// Observation components: the current pose followed by the goal-height cue.
pub const OBS_DIM: usize = ACTION_DIM + 1;
const GRIPPER: usize = 6;
const Z: usize = 2;

/// One end-effector command `[X, Y, Z, φ, θ, ψ, G]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(pub [f64; ACTION_DIM]);

/// `m` consecutive actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk(pub Vec<ActionVector>);

impl ActionChunk {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Components flattened timestep-major.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flat_map(|a| a.0.iter().copied())
    }
}

/// Uniform per-dimension binning into [`ACTION_BINS`] bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub bounds: Vec<(f64, f64)>,
    pub bins: u32,
}

/// Default per-dimension action bounds (metres, radians, gripper fraction).
pub fn default_bounds() -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    vec![
        (-0.5, 0.5),
        (-0.5, 0.5),
        (0.0, 1.0),
        (-PI, PI),
        (-PI, PI),
        (-PI, PI),
        (0.0, 1.0),
    ]
}

impl Default for Discretizer {
    fn default() -> Self {
        Discretizer {
            bounds: default_bounds(),
            bins: ACTION_BINS,
        }
    }
}

impl Discretizer {
    pub fn width(&self, dim: usize) -> f64 {
        let (lo, hi) = self.bounds[dim];
        (hi - lo) / self.bins as f64
    }

    /// Bin of `value` along `dim`, clamped into range. The second element is
    /// true when clamping was needed.
    pub fn bin(&self, dim: usize, value: f64) -> (u32, bool) {
        let (lo, hi) = self.bounds[dim];
        let clamped = !(lo..=hi).contains(&value);
        let v = value.clamp(lo, hi);
        let b = ((v - lo) / (hi - lo) * self.bins as f64).floor() as i64;
        (b.clamp(0, self.bins as i64 - 1) as u32, clamped)
    }

    pub fn center(&self, dim: usize, bin: u32) -> f64 {
        let (lo, _) = self.bounds[dim];
        lo + (bin as f64 + 0.5) * self.width(dim)
    }

    /// Maps a value into `[0, 1]` by the bounds of `dim`.
    pub fn normalize(&self, dim: usize, value: f64) -> f64 {
        let (lo, hi) = self.bounds[dim];
        (value - lo) / (hi - lo)
    }
}

/// Result of tokenizing a chunk: the tokens plus how many components were clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenized {
    pub tokens: TokenSequence,
    pub clamped: usize,
}

/// `7·m` tokens, timestep-major. Out-of-range components are clamped and counted.
pub fn tokenize_chunk(chunk: &ActionChunk, disc: &Discretizer) -> Tokenized {
    let mut clamped = 0;
    let mut tokens = Vec::with_capacity(chunk.len() * ACTION_DIM);
    for a in &chunk.0 {
        for (d, &v) in a.0.iter().enumerate() {
            let (b, c) = disc.bin(d, v);
            clamped += c as usize;
            tokens.push(b);
        }
    }
    if clamped > 0 {
        log::debug!("tokenize_chunk clamped {clamped} components");
    }
    Tokenized {
        tokens: TokenSequence::new(tokens),
        clamped,
    }
}

/// Bin centres for a token block. Fails on non-action tokens or a length that
/// is not a multiple of 7.
pub fn detokenize_chunk(tokens: &[TokenId], disc: &Discretizer) -> Result<ActionChunk> {
    if !tokens.len().is_multiple_of(ACTION_DIM) {
        return Err(Error::Contract(format!(
            "token block of length {} is not a whole number of actions",
            tokens.len()
        )));
    }
    tokens
        .chunks_exact(ACTION_DIM)
        .map(|step| {
            let mut a = [0f64; ACTION_DIM];
            for (d, &t) in step.iter().enumerate() {
                if t >= disc.bins {
                    return Err(Error::Index {
                        index: t as usize,
                        limit: disc.bins as usize,
                    });
                }
                a[d] = disc.center(d, t);
            }
            Ok(ActionVector(a))
        })
        .collect::<Result<Vec<_>>>()
        .map(ActionChunk)
}

/// Mean absolute difference over all components after normalizing each
/// dimension to `[0, 1]` by the discretizer bounds.
pub fn l1_distance(a: &ActionChunk, b: &ActionChunk, disc: &Discretizer) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "chunk lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (x, y) in a.0.iter().zip(&b.0) {
        for d in 0..ACTION_DIM {
            sum += (disc.normalize(d, x.0[d]) - disc.normalize(d, y.0[d])).abs();
        }
    }
    Ok(sum / (a.len() * ACTION_DIM) as f64)
}

/// Parameters of the synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Chunk size `m`.
    pub chunk: usize,
    /// Bound on the uniform per-component noise, as a fraction of each range.
    pub noise: f64,
    pub num_instructions: u32,
    /// Grid levels per observation component.
    pub grid_levels: u32,
    /// Maximum per-step motion, in bins.
    pub step_bins: u32,
    /// Fraction of the chunk after which the gripper takes its goal state.
    pub gripper_toggle: f64,
    pub discretizer: Discretizer,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            chunk: 3,
            noise: 0.0,
            num_instructions: 8,
            grid_levels: 16,
            step_bins: 24,
            gripper_toggle: 0.5,
            discretizer: Discretizer::default(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let d = &self.discretizer;
        if d.bounds.len() != ACTION_DIM || d.bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("discretizer needs 7 increasing bounds".into()));
        }
        if d.bins == 0 || d.bins > ACTION_BINS {
            return Err(Error::Config(format!("bins must be in 1..={ACTION_BINS}")));
        }
        if self.chunk == 0 {
            return Err(Error::Config("chunk size must be positive".into()));
        }
        if self.grid_levels == 0 || !d.bins.is_multiple_of(self.grid_levels) {
            return Err(Error::Config(format!(
                "grid_levels {} must divide {} bins",
                self.grid_levels, d.bins
            )));
        }
        if self.num_instructions == 0 || self.num_instructions > d.bins {
            return Err(Error::Config("num_instructions out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.gripper_toggle) {
            return Err(Error::Config("noise and gripper_toggle must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Tokens per action block (`7·m`).
    pub fn block_len(&self) -> usize {
        self.chunk * ACTION_DIM
    }

    /// Tokens per prompt.
    pub fn prompt_len(&self) -> usize {
        5 + OBS_DIM
    }

    /// Bounds of each observation component (pose dims, then the Z cue).
    pub fn obs_bounds(&self, comp: usize) -> (f64, f64) {
        self.discretizer.bounds[if comp < ACTION_DIM { comp } else { Z }]
    }

    fn obs_dim_index(comp: usize) -> usize {
        if comp < ACTION_DIM {
            comp
        } else {
            Z
        }
    }

    fn grid_bin(&self, level: u32) -> u32 {
        let stride = self.discretizer.bins / self.grid_levels;
        level * stride + stride / 2
    }

    /// Goal bin of dimension `dim` for `instruction` (gripper: 0 or max bin).
    /// Z is taken from the observation cue instead.
    fn goal_bin(&self, instruction: u32, dim: usize) -> u32 {
        if dim == GRIPPER {
            return if instruction % 2 == 1 { self.discretizer.bins - 1 } else { 0 };
        }
        // fixed scrambled table: instruction × dim → grid level
        let h = (instruction as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (dim as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        let h = h ^ (h >> 29);
        self.grid_bin((h % self.grid_levels as u64) as u32)
    }

    /// Noise-free chunk for an instruction and observation.
    pub fn analytic_chunk(&self, instruction: u32, observation: &[f64]) -> ActionChunk {
        let disc = &self.discretizer;
        let toggle_step = (self.gripper_toggle * self.chunk as f64).ceil().max(1.0) as usize;
        let steps = (1..=self.chunk)
            .map(|k| {
                let mut a = [0f64; ACTION_DIM];
                for d in 0..ACTION_DIM {
                    let pose = observation[d];
                    a[d] = if d == GRIPPER {
                        if k >= toggle_step {
                            disc.center(d, self.goal_bin(instruction, d))
                        } else {
                            pose
                        }
                    } else {
                        let goal = if d == Z {
                            observation[ACTION_DIM]
                        } else {
                            disc.center(d, self.goal_bin(instruction, d))
                        };
                        let reach = k as f64 * self.step_bins as f64 * disc.width(d);
                        pose + (goal - pose).clamp(-reach, reach)
                    };
                }
                ActionVector(a)
            })
            .collect();
        ActionChunk(steps)
    }
}

/// One task sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub instruction_id: u32,
    pub observation: Vec<f64>,
    pub target_chunk: ActionChunk,
}

/// Disjoint episode seed streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train = 1,
    HeldOut = 2,
    Collect = 3,
}

/// Seed of episode `index` in `split` under a base seed (splitmix64 finalizer).
pub fn episode_seed(base: u64, split: Split, index: u64) -> u64 {
    let mut z = base
        .wrapping_add((split as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Prompts and ground-truth blocks of `count` episodes from one split.
pub fn split_examples(spec: &TaskSpec, base: u64, split: Split, count: usize) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    (0..count as u64)
        .map(|i| {
            let ep = generate_episode(spec, episode_seed(base, split, i));
            Ok((encode_prompt(spec, &ep)?, target_tokens(spec, &ep)))
        })
        .collect()
}

/// Deterministic episode for `seed`.
pub fn generate_episode(spec: &TaskSpec, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disc = &spec.discretizer;
    let instruction_id = rng.random_range(0..spec.num_instructions);
    let mut observation = Vec::with_capacity(OBS_DIM);
    for comp in 0..OBS_DIM {
        let dim = TaskSpec::obs_dim_index(comp);
        let bin = if comp == GRIPPER {
            if rng.random_bool(0.5) {
                disc.bins - 1
            } else {
                0
            }
        } else {
            spec.grid_bin(rng.random_range(0..spec.grid_levels))
        };
        observation.push(disc.center(dim, bin));
    }
    let mut target_chunk = spec.analytic_chunk(instruction_id, &observation);
    if spec.noise > 0.0 {
        for a in &mut target_chunk.0 {
            for d in 0..ACTION_DIM {
                let (lo, hi) = disc.bounds[d];
                let e = rng.random_range(-spec.noise..=spec.noise) * (hi - lo);
                a.0[d] = (a.0[d] + e).clamp(lo, hi);
            }
        }
    }
    Episode {
        instruction_id,
        observation,
        target_chunk,
    }
}

/// `[BOS, INSTR, instruction, OBS, observation tokens…, SEP]`.
pub fn encode_prompt(spec: &TaskSpec, episode: &Episode) -> Result<TokenSequence> {
    if episode.observation.len() != OBS_DIM {
        return Err(Error::Contract(format!(
            "observation has {} components, expected {OBS_DIM}",
            episode.observation.len()
        )));
    }
    if episode.instruction_id >= spec.discretizer.bins {
        return Err(Error::Index {
            index: episode.instruction_id as usize,
            limit: spec.discretizer.bins as usize,
        });
    }
    let mut toks = vec![BOS, INSTR, episode.instruction_id, OBS];
    for (comp, &v) in episode.observation.iter().enumerate() {
        let (lo, hi) = spec.obs_bounds(comp);
        if !(lo..=hi).contains(&v) {
            return Err(Error::Range {
                component: comp,
                value: v,
                min: lo,
                max: hi,
            });
        }
        toks.push(spec.discretizer.bin(TaskSpec::obs_dim_index(comp), v).0);
    }
    toks.push(SEP);
    Ok(TokenSequence::new(toks))
}

/// Observation components recovered from prompt tokens (bin centres).
pub fn decode_prompt_observation(spec: &TaskSpec, prompt: &[TokenId]) -> Result<Vec<f64>> {
    if prompt.len() != spec.prompt_len() {
        return Err(Error::Contract(format!("prompt length {} unexpected", prompt.len())));
    }
    Ok(prompt[4..4 + OBS_DIM]
        .iter()
        .enumerate()
        .map(|(comp, &t)| spec.discretizer.center(TaskSpec::obs_dim_index(comp), t))
        .collect())
}

/// Ground-truth token block of an episode.
pub fn target_tokens(spec: &TaskSpec, episode: &Episode) -> TokenSequence {
    tokenize_chunk(&episode.target_chunk, &spec.discretizer).tokens
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum JsonlRecord {
    Header { task: TaskSpec },
    Episode(Episode),
}

/// Writes episodes as JSON lines, the first line holding the task spec
/// (including discretizer bounds).
pub fn write_episodes(path: impl AsRef<Path>, spec: &TaskSpec, episodes: &[Episode]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let header = serde_json::to_string(&JsonlRecord::Header { task: spec.clone() }).expect("spec serializes");
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for ep in episodes {
        let line = serde_json::to_string(&JsonlRecord::Episode(ep.clone())).expect("episode serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_episodes(path: impl AsRef<Path>) -> Result<(TaskSpec, Vec<Episode>)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut spec = None;
    let mut episodes = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))? {
            JsonlRecord::Header { task } if i == 0 => spec = Some(task),
            JsonlRecord::Header { .. } => return Err(Error::Format(format!("line {}: duplicate header", i + 1))),
            JsonlRecord::Episode(ep) => episodes.push(ep),
        }
    }
    let spec = spec.ok_or_else(|| Error::Format("missing header record".into()))?;
    Ok((spec, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_episode() {
        let spec = TaskSpec::default();
        assert_eq!(generate_episode(&spec, 5), generate_episode(&spec, 5));
    }

    #[test]
    fn noise_free_target_is_analytic() {
        let spec = TaskSpec::default();
        let ep = generate_episode(&spec, 17);
        assert_eq!(ep.target_chunk, spec.analytic_chunk(ep.instruction_id, &ep.observation));
    }

    #[test]
    fn boundary_components_hit_end_bins() {
        let d = Discretizer::default();
        for dim in 0..ACTION_DIM {
            let (lo, hi) = d.bounds[dim];
            assert_eq!(d.bin(dim, lo), (0, false));
            assert_eq!(d.bin(dim, hi), (255, false));
        }
    }

    #[test]
    fn out_of_bounds_components_are_clamped_and_counted() {
        let d = Discretizer::default();
        let chunk = ActionChunk(vec![ActionVector([9.0, -9.0, 0.5, 0.0, 0.0, 0.0, 0.5])]);
        let t = tokenize_chunk(&chunk, &d);
        assert_eq!(t.clamped, 2);
        assert_eq!(&t.tokens[..2], &[255, 0]);
    }

    #[test]
    fn l1_examples() {
        let d = Discretizer::default();
        let lo = ActionVector(std::array::from_fn(|i| d.bounds[i].0));
        let hi = ActionVector(std::array::from_fn(|i| d.bounds[i].1));
        let a = ActionChunk(vec![lo, lo]);
        assert_eq!(l1_distance(&a, &a, &d).unwrap(), 0.0);
        assert!((l1_distance(&a, &ActionChunk(vec![hi, hi]), &d).unwrap() - 1.0).abs() < 1e-12);
        // half a range on one of 14 components
        let mut b = a.clone();
        b.0[1].0[3] = d.bounds[3].0 + 0.5 * (d.bounds[3].1 - d.bounds[3].0);
        assert!((l1_distance(&a, &b, &d).unwrap() - 0.5 / 14.0).abs() < 1e-6);
        assert!(matches!(
            l1_distance(&a, &ActionChunk(vec![lo]), &d),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn prompts_differ_only_in_instruction_slot() {
        let spec = TaskSpec::default();
        let ep = generate_episode(&spec, 3);
        let mut other = ep.clone();
        other.instruction_id = (ep.instruction_id + 1) % spec.num_instructions;
        let (a, b) = (encode_prompt(&spec, &ep).unwrap(), encode_prompt(&spec, &other).unwrap());
        assert_eq!(a.len(), spec.prompt_len());
        let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diffs, vec![2]);
    }

    #[test]
    fn out_of_range_observation_is_range_error() {
        let spec = TaskSpec::default();
        let mut ep = generate_episode(&spec, 3);
        ep.observation[0] = 2.0;
        assert!(matches!(encode_prompt(&spec, &ep), Err(Error::Range { component: 0, .. })));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eps.jsonl");
        let spec = TaskSpec { noise: 0.01, ..Default::default() };
        let eps: Vec<Episode> = (0..5).map(|s| generate_episode(&spec, s)).collect();
        write_episodes(&path, &spec, &eps).unwrap();
        let (spec2, eps2) = read_episodes(&path).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(eps2, eps);
    }
}
