//! Consistency-distillation dataset: teacher Jacobi trajectories with
//! ground-truth blocks, in a framed binary file.
//!
//! Layout (little endian): magic `JFDS`, version u32, vocab u32, block length
//! u32, bins u32, seven `(lo, hi)` f64 pairs, teacher id (u32 length + UTF-8),
//! seed u64, stride u32; then records, each a u32 byte length followed by
//! iterations u32, prompt (u16 length + u16 ids), states (u16 count, `n` u16
//! ids each), ground truth (`n` u16 ids) and l1 f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::jacobi_decode_batch;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::task::{
    detokenize_chunk, encode_prompt, episode_seed, generate_episode, l1_distance, target_tokens, Discretizer, Split,
    TaskSpec, ACTION_DIM,
};
use crate::vocab::{TokenSequence, VOCAB_SIZE};

pub const DATASET_MAGIC: &[u8; 4] = b"JFDS";
pub const DATASET_VERSION: u32 = 1;
pub const HISTOGRAM_BUCKETS: usize = 20;
pub const HISTOGRAM_MAX: f64 = 0.2;
const COLLECT_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub vocab_size: u32,
    pub block_len: u32,
    pub discretizer: Discretizer,
    pub teacher_id: String,
    pub seed: u64,
    pub stride: u32,
}

/// One prompt with its (possibly thinned) teacher trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillRecord {
    pub prompt: TokenSequence,
    /// Stored states; the first is the random init, the last the fixed point.
    pub states: Vec<TokenSequence>,
    /// Iterations the teacher needed (before thinning).
    pub iterations: u32,
    pub ground_truth: TokenSequence,
    /// Normalized L1 between the detokenized fixed point and ground truth;
    /// infinite when the fixed point contains non-action tokens.
    pub l1: f64,
}

impl DistillRecord {
    pub fn fixed_point(&self) -> &TokenSequence {
        self.states.last().expect("record holds at least one state")
    }

    /// Uniform draw over stored states that differ from the fixed point.
    /// `None` when every stored state already equals it.
    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&TokenSequence> {
        let fp = self.fixed_point();
        let support: Vec<&TokenSequence> = self.states.iter().filter(|s| *s != fp).collect();
        if support.is_empty() {
            None
        } else {
            Some(support[rng.random_range(0..support.len())])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DistillRecord>,
}

/// Normalized L1 between two token blocks after detokenization.
pub fn block_l1(a: &[u32], b: &[u32], disc: &Discretizer) -> Result<f64> {
    l1_distance(&detokenize_chunk(a, disc)?, &detokenize_chunk(b, disc)?, disc)
}

/// Summary of a dataset, as reported by collection and the `stats` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub records: usize,
    pub mean_trajectory_len: f64,
    pub p50_trajectory_len: u32,
    pub p90_trajectory_len: u32,
    pub max_trajectory_len: u32,
    /// Mean over records whose fixed point detokenizes.
    pub mean_l1: f64,
    /// Records whose fixed point contains non-action tokens (`l1 = ∞`).
    pub invalid_fixed_points: usize,
    /// Counts over 20 equal buckets of `[0, 0.2]`; larger values land in the last.
    pub l1_histogram: Vec<u64>,
}

impl Dataset {
    /// Trajectory length counts the teacher's full trajectory (`iterations + 1`).
    pub fn stats(&self) -> DatasetStats {
        let mut lens: Vec<u32> = self.records.iter().map(|r| r.iterations + 1).collect();
        lens.sort_unstable();
        let pct = |q: f64| -> u32 {
            if lens.is_empty() {
                0
            } else {
                lens[((lens.len() - 1) as f64 * q).round() as usize]
            }
        };
        let mut hist = vec![0u64; HISTOGRAM_BUCKETS];
        for r in &self.records {
            let b = (r.l1 / HISTOGRAM_MAX * HISTOGRAM_BUCKETS as f64).floor();
            hist[(b.max(0.0) as usize).min(HISTOGRAM_BUCKETS - 1)] += 1;
        }
        let count = self.records.len().max(1) as f64;
        let finite: Vec<f64> = self.records.iter().map(|r| r.l1).filter(|l| l.is_finite()).collect();
        DatasetStats {
            records: self.records.len(),
            mean_trajectory_len: lens.iter().map(|&l| l as f64).sum::<f64>() / count,
            p50_trajectory_len: pct(0.5),
            p90_trajectory_len: pct(0.9),
            max_trajectory_len: lens.last().copied().unwrap_or(0),
            mean_l1: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
            invalid_fixed_points: self.records.len() - finite.len(),
            l1_histogram: hist,
        }
    }
}

/// Indices of states kept at `stride`: every stride-th, plus the last.
fn thin(len: usize, stride: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).step_by(stride).collect();
    if idx.last() != Some(&(len - 1)) {
        idx.push(len - 1);
    }
    idx
}

/// Jacobi init seed used for episode `index` during collection.
pub fn collect_init_seed(seed: u64, index: u64) -> u64 {
    episode_seed(seed ^ 0xA5A5_A5A5, Split::Collect, index)
}

/// Decodes `num_episodes` task episodes with the teacher and returns the records.
pub fn collect_records(
    teacher: &ModelWeights,
    spec: &TaskSpec,
    num_episodes: usize,
    seed: u64,
    stride: usize,
) -> Result<Dataset> {
    if num_episodes == 0 {
        return Err(Error::Config("num_episodes must be at least 1".into()));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    spec.validate()?;
    let cfg = teacher.config();
    if cfg.vocab_size != VOCAB_SIZE {
        return Err(Error::Config(format!(
            "teacher vocab {} does not match task vocab {VOCAB_SIZE}",
            cfg.vocab_size
        )));
    }
    let n = spec.block_len();
    if spec.prompt_len() + n > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "prompt {} + block {n} exceeds teacher max_seq_len {}",
            spec.prompt_len(),
            cfg.max_seq_len
        )));
    }
    let disc = &spec.discretizer;
    let batches: Vec<(usize, usize)> = (0..num_episodes)
        .step_by(COLLECT_BATCH)
        .map(|s| (s, (s + COLLECT_BATCH).min(num_episodes)))
        .collect();
    let threads = crate::worker_threads()?.min(batches.len()).max(1);
    let run = |&(start, end): &(usize, usize)| -> Result<Vec<DistillRecord>> {
        let mut prompts = Vec::new();
        let mut gts = Vec::new();
        let mut inits = Vec::new();
        for i in start..end {
            let ep = generate_episode(spec, episode_seed(seed, Split::Collect, i as u64));
            prompts.push(encode_prompt(spec, &ep)?);
            gts.push(target_tokens(spec, &ep));
            inits.push(collect_init_seed(seed, i as u64));
        }
        let decoded = jacobi_decode_batch(teacher, &prompts, n, &inits, true)?;
        let mut out = Vec::with_capacity(end - start);
        for ((prompt, gt), (traj, _)) in prompts.into_iter().zip(gts).zip(decoded) {
            let keep = thin(traj.states.len(), stride);
            let states: Vec<TokenSequence> = keep.into_iter().map(|i| traj.states[i].clone()).collect();
            // a fixed point with non-action tokens has no action reading
            let l1 = match block_l1(&traj.fixed_point, &gt, disc) {
                Err(Error::Index { .. }) => f64::INFINITY,
                other => other?,
            };
            out.push(DistillRecord {
                prompt,
                states,
                iterations: traj.iterations as u32,
                ground_truth: gt,
                l1,
            });
        }
        if end % 256 == 0 || end == num_episodes {
            log::info!("collected {end}/{num_episodes} trajectories");
        }
        Ok(out)
    };
    // workers take interleaved batches; results are reassembled in episode order
    let per_batch: Vec<Result<Vec<DistillRecord>>> = if threads == 1 {
        batches.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<DistillRecord>>>> = (0..batches.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let batches = &batches;
                    let run = &run;
                    scope.spawn(move || {
                        (w..batches.len())
                            .step_by(threads)
                            .map(|b| (b, run(&batches[b])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (b, r) in h.join().expect("collection worker panicked") {
                    slots[b] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every batch assigned")).collect()
    };
    let mut records = Vec::with_capacity(num_episodes);
    for r in per_batch {
        records.extend(r?);
    }
    Ok(Dataset {
        header: DatasetHeader {
            vocab_size: cfg.vocab_size as u32,
            block_len: n as u32,
            discretizer: disc.clone(),
            teacher_id: teacher.checksum(),
            seed,
            stride: stride as u32,
        },
        records,
    })
}

/// Collects a dataset and writes it to `path`.
pub fn collect_dataset(
    teacher: &ModelWeights,
    spec: &TaskSpec,
    num_episodes: usize,
    seed: u64,
    stride: usize,
    path: impl AsRef<Path>,
) -> Result<DatasetStats> {
    let ds = collect_records(teacher, spec, num_episodes, seed, stride)?;
    write_dataset(&ds, path)?;
    let stats = ds.stats();
    log::info!(
        "dataset: {} records, mean trajectory length {:.2}, l1 histogram {:?}",
        stats.records,
        stats.mean_trajectory_len,
        stats.l1_histogram
    );
    Ok(stats)
}

fn put_u16s(buf: &mut Vec<u8>, ids: &[u32]) -> Result<()> {
    for &t in ids {
        let t = u16::try_from(t).map_err(|_| Error::Index {
            index: t as usize,
            limit: u16::MAX as usize + 1,
        })?;
        buf.extend_from_slice(&t.to_le_bytes());
    }
    Ok(())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let h = &ds.header;
    let n = h.block_len as usize;
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&h.vocab_size.to_le_bytes());
    buf.extend_from_slice(&h.block_len.to_le_bytes());
    buf.extend_from_slice(&h.discretizer.bins.to_le_bytes());
    if h.discretizer.bounds.len() != ACTION_DIM {
        return Err(Error::Contract("discretizer must have 7 bounds".into()));
    }
    for &(lo, hi) in &h.discretizer.bounds {
        buf.extend_from_slice(&lo.to_le_bytes());
        buf.extend_from_slice(&hi.to_le_bytes());
    }
    buf.extend_from_slice(&(h.teacher_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(h.teacher_id.as_bytes());
    buf.extend_from_slice(&h.seed.to_le_bytes());
    buf.extend_from_slice(&h.stride.to_le_bytes());
    for (i, r) in ds.records.iter().enumerate() {
        if r.states.is_empty()
            || r.ground_truth.len() != n
            || r.states.iter().any(|s| s.len() != n)
            || r.prompt.len() > u16::MAX as usize
            || r.states.len() > u16::MAX as usize
        {
            return Err(Error::Contract(format!("record {i} has inconsistent shapes")));
        }
        let mut rec = Vec::new();
        rec.extend_from_slice(&r.iterations.to_le_bytes());
        rec.extend_from_slice(&(r.prompt.len() as u16).to_le_bytes());
        put_u16s(&mut rec, &r.prompt)?;
        rec.extend_from_slice(&(r.states.len() as u16).to_le_bytes());
        for s in &r.states {
            put_u16s(&mut rec, s)?;
        }
        put_u16s(&mut rec, &r.ground_truth)?;
        rec.extend_from_slice(&r.l1.to_le_bytes());
        buf.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        buf.extend_from_slice(&rec);
    }
    Ok(buf)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Cursor over a byte slice that reports truncation as a format error.
struct Reader<'a> {
    buf: &'a [u8],
    what: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.buf.len() < len {
            return Err(Error::Format(format!("{} truncated", self.what)));
        }
        let (head, tail) = self.buf.split_at(len);
        self.buf = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn ids(&mut self, len: usize, vocab: u32) -> Result<TokenSequence> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let t = self.u16()? as u32;
            if t >= vocab {
                return Err(Error::Format(format!("{}: token id {t} outside vocab {vocab}", self.what)));
            }
            out.push(t);
        }
        Ok(TokenSequence::new(out))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader {
        buf: bytes,
        what: "dataset header".into(),
    };
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {version}, expected {DATASET_VERSION}")));
    }
    let vocab_size = r.u32()?;
    let block_len = r.u32()?;
    let bins = r.u32()?;
    let mut bounds = Vec::with_capacity(ACTION_DIM);
    for _ in 0..ACTION_DIM {
        bounds.push((r.f64()?, r.f64()?));
    }
    let id_len = r.u32()? as usize;
    let teacher_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::Format("teacher id is not UTF-8".into()))?;
    let seed = r.u64()?;
    let stride = r.u32()?;
    let n = block_len as usize;
    let mut records = Vec::new();
    let mut rest = r.buf;
    while !rest.is_empty() {
        let index = records.len();
        let mut outer = Reader {
            buf: rest,
            what: format!("record {index}"),
        };
        let len = outer.u32()? as usize;
        let body = outer.take(len)?;
        rest = outer.buf;
        let mut rr = Reader {
            buf: body,
            what: format!("record {index}"),
        };
        let iterations = rr.u32()?;
        let plen = rr.u16()? as usize;
        let prompt = rr.ids(plen, vocab_size)?;
        let count = rr.u16()? as usize;
        if count == 0 {
            return Err(Error::Format(format!("record {index}: no states")));
        }
        let states = (0..count).map(|_| rr.ids(n, vocab_size)).collect::<Result<Vec<_>>>()?;
        let ground_truth = rr.ids(n, vocab_size)?;
        let l1 = rr.f64()?;
        if !(l1 >= 0.0) {
            return Err(Error::Format(format!("record {index}: invalid l1 {l1}")));
        }
        if !rr.buf.is_empty() {
            return Err(Error::Format(format!("record {index}: {} trailing bytes", rr.buf.len())));
        }
        records.push(DistillRecord {
            prompt,
            states,
            iterations,
            ground_truth,
            l1,
        });
    }
    Ok(Dataset {
        header: DatasetHeader {
            vocab_size,
            block_len,
            discretizer: Discretizer { bounds, bins },
            teacher_id,
            seed,
            stride,
        },
        records,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
