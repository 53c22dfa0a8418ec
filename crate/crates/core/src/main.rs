use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use jf_core::bench::{median_suite, run_bench, scaled_exit_points, sweep_exit_points, BenchOptions, MethodSpec, SweepPoint};
use jf_core::config::PipelineConfig;
use jf_core::dataset::{collect_dataset, load_dataset, Dataset};
use jf_core::decoding::{ar_greedy_decode, early_exit_decode, jacobi_decode, DecodeReport, JacobiOptions};
use jf_core::distill::{distill_student, eval_init_seed, task_from_meta, train_teacher, TrainMetrics};
use jf_core::model::{load_checkpoint, save_checkpoint, ModelWeights};
use jf_core::task::{split_examples, Split, TaskSpec};
use jf_core::{Error, Result};

#[derive(Parser)]
#[command(name = "jf", version, about = "Jacobi decoding, consistency distillation and early-exit benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    ExitPoint,
    DataSize,
    LossRatio,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher on fresh task episodes.
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        chunk: Option<usize>,
    },
    /// Record teacher Jacobi trajectories into a dataset file.
    Collect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        chunk: Option<usize>,
    },
    /// Distill a student from a teacher and a trajectory dataset.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode held-out prompts with AR, Jacobi and optionally early exit.
    Decode {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        exit_point: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        chunk: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time AR, Jacobi and early-exit decoding over held-out prompts.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        exit_point: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        chunk: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Vary one axis and report throughput and accuracy per value.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        chunk: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a trajectory dataset as JSON.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Task of a checkpoint: its recorded spec when present, else the config's,
/// with `--chunk` applied. A `--chunk` that contradicts the checkpoint fails.
fn resolve_task(weights: &ModelWeights, cfg: &PipelineConfig, chunk: Option<usize>) -> Result<TaskSpec> {
    let mut spec = task_from_meta(weights)?.unwrap_or_else(|| cfg.task.clone());
    if let Some(m) = chunk {
        if task_from_meta(weights)?.is_some() && m != spec.chunk {
            return Err(Error::Config(format!(
                "--chunk {m} differs from the checkpoint's training chunk {}",
                spec.chunk
            )));
        }
        spec.chunk = m;
    }
    spec.validate()?;
    Ok(spec)
}

fn pick_model(teacher: &Option<PathBuf>, student: &Option<PathBuf>) -> CliResult<PathBuf> {
    match (teacher, student) {
        (Some(_), Some(_)) => Err(Failure::Usage("pass either --teacher or --student, not both".into())),
        (None, None) => Err(Failure::Usage("one of --teacher or --student is required".into())),
        (Some(p), None) | (None, Some(p)) => Ok(p.clone()),
    }
}

fn write_output(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn metrics_writer(out: &Path) -> Result<(PathBuf, BufWriter<File>)> {
    let mut name = out.as_os_str().to_owned();
    name.push(".metrics.csv");
    let path = PathBuf::from(name);
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{}", TrainMetrics::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
    Ok((path, w))
}

fn log_metric(m: &TrainMetrics, w: &mut BufWriter<File>) {
    if m.eval_iterations.is_some() || m.eval_match.is_some() || m.step.is_multiple_of(50) {
        log::info!("{m}");
    }
    // a failed metrics write must not abort training; it is reported once at the end
    let _ = writeln!(w, "{}", m.to_csv_row());
}

fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = format!("{}\n", SweepPoint::CSV_HEADER);
    for p in points {
        s.push_str(&p.to_csv_row());
        s.push('\n');
    }
    s
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainTeacher { config, out, seed, chunk } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.teacher.seed = s;
            }
            if let Some(m) = chunk {
                cfg.task.chunk = m;
            }
            cfg.validate()?;
            let (mpath, mut mw) = metrics_writer(&out)?;
            let (weights, report) = train_teacher(&cfg.task, &cfg.model, &cfg.teacher, |m| log_metric(m, &mut mw))?;
            mw.flush().map_err(|e| Error::io(&mpath, e))?;
            save_checkpoint(&weights, &out)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Collect {
            config,
            teacher,
            out,
            episodes,
            stride,
            seed,
            chunk,
        } => {
            let cfg = load_config(&config)?;
            let weights = load_checkpoint(&teacher)?;
            let spec = resolve_task(&weights, &cfg, chunk)?;
            let stats = collect_dataset(&weights, &spec, episodes, seed, stride, &out)?;
            println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
        }
        Command::Distill {
            config,
            teacher,
            dataset,
            out,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.distill.seed = s;
            }
            let weights = load_checkpoint(&teacher)?;
            let spec = resolve_task(&weights, &cfg, None)?;
            let ds = load_dataset(&dataset)?;
            check_dataset_teacher(&ds, &weights);
            let (mpath, mut mw) = metrics_writer(&out)?;
            let student = distill_student(&weights, &ds, &spec, &cfg.distill, |m| log_metric(m, &mut mw))?;
            mw.flush().map_err(|e| Error::io(&mpath, e))?;
            save_checkpoint(&student, &out)?;
        }
        Command::Decode {
            config,
            teacher,
            student,
            episodes,
            exit_point,
            seed,
            chunk,
            format,
            out,
        } => {
            let path = pick_model(&teacher, &student)?;
            if exit_point == Some(0) {
                return Err(Failure::Usage("--exit-point must be at least 1".into()));
            }
            let cfg = load_config(&config)?;
            let weights = load_checkpoint(&path)?;
            let spec = resolve_task(&weights, &cfg, chunk)?;
            let n = spec.block_len();
            #[derive(Serialize)]
            struct Decoded {
                prompt_index: usize,
                tokens: Vec<u32>,
                report: DecodeReport,
            }
            let mut rows = Vec::new();
            for (i, (prompt, _)) in split_examples(&spec, seed, Split::HeldOut, episodes)?.iter().enumerate() {
                let init = eval_init_seed(seed, i as u64);
                let (ar, rep) = ar_greedy_decode(&weights, prompt, n)?;
                rows.push(Decoded { prompt_index: i, tokens: ar.0, report: rep });
                let (traj, rep) = jacobi_decode(&weights, prompt, n, &JacobiOptions::new(init))?;
                rows.push(Decoded { prompt_index: i, tokens: traj.fixed_point.0, report: rep });
                if let Some(s) = exit_point {
                    let (y, rep) = early_exit_decode(&weights, prompt, n, s, init)?;
                    rows.push(Decoded { prompt_index: i, tokens: y.0, report: rep });
                }
            }
            let text = match format {
                Format::Json => to_json(&rows),
                Format::Csv => {
                    let mut s = format!("prompt,{},tokens\n", DecodeReport::CSV_HEADER);
                    for r in &rows {
                        let toks: Vec<String> = r.tokens.iter().map(|t| t.to_string()).collect();
                        s.push_str(&format!("{},{},{}\n", r.prompt_index, r.report.to_csv_row(), toks.join(" ")));
                    }
                    s
                }
            };
            write_output(&out, &text)?;
        }
        Command::Bench {
            config,
            teacher,
            student,
            exit_point,
            seed,
            chunk,
            format,
            out,
        } => {
            let path = pick_model(&teacher, &student)?;
            if exit_point == Some(0) {
                return Err(Failure::Usage("--exit-point must be at least 1".into()));
            }
            let cfg = load_config(&config)?;
            let weights = load_checkpoint(&path)?;
            let spec = resolve_task(&weights, &cfg, chunk)?;
            let opts = BenchOptions {
                methods: vec![
                    MethodSpec::Ar,
                    MethodSpec::Jacobi,
                    MethodSpec::EarlyExit(exit_point.unwrap_or(cfg.bench.exit_point)),
                ],
                prompts: cfg.bench.prompts,
                seed: seed.unwrap_or(cfg.bench.seed),
                timing: cfg.bench.timing,
            };
            let runs = (0..cfg.bench.runs.max(1))
                .map(|r| {
                    log::info!("bench suite run {}/{}", r + 1, cfg.bench.runs.max(1));
                    run_bench(&weights, &spec, &opts)
                })
                .collect::<Result<Vec<_>>>()?;
            let suite = median_suite(&runs)?;
            let text = match format {
                Format::Json => to_json(&suite),
                Format::Csv => suite.to_csv(),
            };
            write_output(&out, &text)?;
        }
        Command::Sweep {
            axis,
            config,
            teacher,
            student,
            dataset,
            seed,
            chunk,
            format,
            out,
        } => {
            let cfg = load_config(&config)?;
            let bench_seed = seed.unwrap_or(cfg.bench.seed);
            let points = match axis {
                Axis::ExitPoint => {
                    if dataset.is_some() {
                        return Err(Failure::Usage("--dataset is not used by --axis exit-point".into()));
                    }
                    let path = pick_model(&teacher, &student)?;
                    let weights = load_checkpoint(&path)?;
                    let spec = resolve_task(&weights, &cfg, chunk)?;
                    let pts = scaled_exit_points(spec.block_len(), cfg.bench.reference_block_len);
                    sweep_exit_points(&weights, &spec, &pts, cfg.bench.prompts, bench_seed, cfg.bench.timing, cfg.bench.runs)?
                }
                Axis::DataSize | Axis::LossRatio => {
                    let (Some(tpath), Some(dpath)) = (&teacher, &dataset) else {
                        return Err(Failure::Usage("this axis needs --teacher and --dataset".into()));
                    };
                    if student.is_some() {
                        return Err(Failure::Usage("this axis trains its own students; drop --student".into()));
                    }
                    let weights = load_checkpoint(tpath)?;
                    let spec = resolve_task(&weights, &cfg, chunk)?;
                    let ds = load_dataset(dpath)?;
                    check_dataset_teacher(&ds, &weights);
                    let variants: Vec<(f64, Dataset, f64)> = match axis {
                        Axis::DataSize => [0.25, 0.5, 1.0]
                            .iter()
                            .map(|&f| {
                                let keep = ((ds.records.len() as f64 * f).ceil() as usize).max(1);
                                let mut sub = ds.clone();
                                sub.records.truncate(keep);
                                (keep as f64, sub, cfg.distill.omega)
                            })
                            .collect(),
                        _ => [1.0, 10.0].iter().map(|&w| (w, ds.clone(), w)).collect(),
                    };
                    let name = if axis == Axis::DataSize { "data-size" } else { "loss-ratio" };
                    let mut pts = Vec::new();
                    for (value, sub, omega) in variants {
                        log::info!("{name} = {value}: distilling");
                        let mut dcfg = cfg.distill.clone();
                        dcfg.omega = omega;
                        let s = distill_student(&weights, &sub, &spec, &dcfg, |_| {})?;
                        let opts = BenchOptions {
                            methods: vec![MethodSpec::Jacobi],
                            prompts: cfg.bench.prompts,
                            seed: bench_seed,
                            timing: cfg.bench.timing,
                        };
                        let suite = run_bench(&s, &spec, &opts)?;
                        pts.push(SweepPoint::from_aggregate(name, value, &suite.aggregates[0]));
                    }
                    pts
                }
            };
            let text = match format {
                Format::Json => to_json(&points),
                Format::Csv => sweep_csv(&points),
            };
            write_output(&out, &text)?;
        }
        Command::Stats { dataset, out } => {
            let ds = load_dataset(&dataset)?;
            write_output(&out, &to_json(&ds.stats()))?;
        }
    }
    Ok(())
}

fn check_dataset_teacher(ds: &Dataset, teacher: &ModelWeights) {
    if ds.header.teacher_id != teacher.checksum() {
        log::warn!(
            "dataset was collected with teacher {}, distilling from {}",
            ds.header.teacher_id,
            teacher.checksum()
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
