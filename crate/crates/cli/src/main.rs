mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use deoe_core::benchmark::{Arm, Benchmark, BenchmarkSpec};
use deoe_core::config::{KvConfig, RunConfig};
use deoe_core::dataset::{encode_frame_at, Dataset};
use deoe_core::evalkit::{evaluate_run, format_jsonl, format_table, ClassSplit, EvalConfig};
use deoe_core::events::{
    load_annotations, load_events, save_annotations, save_events, save_events_binary, synth_scene, AnnotationRecord,
    EventStream, SceneSpec,
};
use deoe_core::gradsuite;
use deoe_core::infer::{bench_inference, frame_ticks, group_predictions, load_predictions, run_stream, save_predictions};
use deoe_core::trainer::{
    detector_from_checkpoint, run_training, train_config_from_checkpoint, RunOptions,
};
use deoe_nncore::Checkpoint;
use manifest::RunManifest;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "deoe", version, about = "Class-agnostic object detection on event streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize an event recording and its annotations from a TOML scene.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Write events as text instead of binary.
        #[arg(long)]
        text: bool,
    },
    /// Train a detector; writes checkpoints, loss.csv and final.bin.
    Train {
        /// `key = value` run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        potential_count: Option<usize>,
        #[arg(long)]
        sequence_length: Option<usize>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Directories written by `synth`; replaces the configured scene.
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint over an event file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        events: PathBuf,
        /// Run configuration; only the inference keys are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Last frame end in microseconds; defaults to just past the last event.
        #[arg(long)]
        end_us: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Open-world average recall of one or more prediction files.
    Eval {
        #[arg(long, required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        annotations: PathBuf,
        /// Comma-separated known class ids; defaults to the annotated classes.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame inference latency.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss term; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate arms of the synthetic open-world benchmark.
    Benchmark {
        /// Comma-separated arms: ca, oracle, dis, deoe, deoe<N>.
        #[arg(long, default_value = "ca,deoe15,oracle")]
        arms: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay the command recorded in a manifest after checking its inputs.
    Rerun { manifest: PathBuf },
}

fn main() -> ExitCode {
    match init_threads().and_then(|()| run(Cli::parse(), std::env::args().collect())) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `DEOE_THREADS` caps the worker pool.
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DEOE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("DEOE_THREADS=`{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn run(cli: Cli, argv: Vec<String>) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { config, seed, out, text } => synth(&argv, &config, seed, &out, text),
        Command::Train {
            config,
            seed,
            variant,
            potential_count,
            sequence_length,
            iterations,
            data,
            resume,
            out,
        } => {
            let mut kv = match &config {
                Some(p) => KvConfig::parse(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
                None => KvConfig::default(),
            };
            let overrides = [
                ("seed", seed.map(|v| v.to_string())),
                ("variant", variant),
                ("potential_count", potential_count.map(|v| v.to_string())),
                ("sequence_length", sequence_length.map(|v| v.to_string())),
                ("iterations", iterations.map(|v| v.to_string())),
            ];
            for (k, v) in overrides {
                if let Some(v) = v {
                    kv.set(k, v);
                }
            }
            let base = config.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
            train(&argv, &kv, config.as_deref(), base, &data, resume.as_deref(), &out)
        }
        Command::Infer {
            checkpoint,
            events,
            config,
            end_us,
            out,
        } => infer(&argv, &checkpoint, &events, config.as_deref(), end_us, &out),
        Command::Eval {
            predictions,
            annotations,
            split,
            out,
        } => eval(&argv, &predictions, &annotations, split.as_deref(), out.as_deref()),
        Command::Bench {
            checkpoint,
            events,
            frames,
            warmup,
            out,
        } => bench(&argv, &checkpoint, &events, frames, warmup, &out),
        Command::Gradcheck { seed, out } => gradcheck(&argv, seed, out.as_deref()),
        Command::Benchmark {
            arms,
            seeds,
            iterations,
            out,
        } => benchmark(&argv, &arms, seeds, iterations, &out),
        Command::Rerun { manifest } => {
            let m = RunManifest::load(&manifest)?;
            m.verify_inputs()?;
            std::env::set_current_dir(&m.cwd).with_context(|| format!("entering {}", m.cwd.display()))?;
            let cli = Cli::try_parse_from(&m.argv).context("replaying the recorded command line")?;
            if matches!(cli.command, Command::Rerun { .. }) {
                bail!("a manifest cannot replay another rerun");
            }
            run(cli, m.argv)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn events_path(dir: &Path) -> Result<PathBuf> {
    ["events.bin", "events.txt"]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.exists())
        .with_context(|| format!("{} holds no events.bin or events.txt", dir.display()))
}

fn synth(argv: &[String], config: &Path, seed: Option<u64>, out: &Path, text: bool) -> Result<ExitCode> {
    let mut spec = SceneSpec::from_toml(&read_text(config)?).with_context(|| format!("in {}", config.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let events = out.join(if text { "events.txt" } else { "events.bin" });
    let ann = out.join("annotations.jsonl");
    RunManifest::new("synth", argv, &spec, Some(spec.seed))?
        .input(config)?
        .output(events.clone())
        .output(ann.clone())
        .write(out)?;
    let (stream, records) = synth_scene(&spec)?;
    if text {
        save_events(&stream, &events)?;
    } else {
        save_events_binary(&stream, &events)?;
    }
    save_annotations(&records, &ann)?;
    println!("{} events, {} annotations -> {}", stream.len(), records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn train(
    argv: &[String],
    kv: &KvConfig,
    config_path: Option<&Path>,
    base: &Path,
    data: &[PathBuf],
    resume: Option<&Path>,
    out: &Path,
) -> Result<ExitCode> {
    let cfg = RunConfig::from_kv(kv)?;
    let mut manifest = RunManifest::new("train", argv, &cfg, Some(cfg.train.seed))?;
    if let Some(p) = config_path {
        manifest = manifest.input(p)?;
    }
    let mut recordings: Vec<(EventStream, Vec<AnnotationRecord>)> = Vec::new();
    if !data.is_empty() {
        for dir in data {
            let (ev, ann) = (events_path(dir)?, dir.join("annotations.jsonl"));
            manifest = manifest.input(&ev)?.input(&ann)?;
            recordings.push((load_events(&ev)?, load_annotations(&ann)?));
        }
    } else {
        let scene = cfg
            .scene
            .as_ref()
            .context("no training data: pass --data or set `scene` in the config")?;
        let path = base.join(scene);
        manifest = manifest.input(&path)?;
        let template = SceneSpec::from_toml(&read_text(&path)?).with_context(|| format!("in {}", path.display()))?;
        for i in 0..cfg.train_scenes {
            let spec = SceneSpec {
                seed: template.seed + i as u64,
                ..template.clone()
            };
            recordings.push(synth_scene(&spec)?);
        }
    }
    let d = &cfg.detector;
    for (stream, _) in &recordings {
        if (stream.width() as usize, stream.height() as usize) != (d.sensor_width, d.sensor_height) {
            bail!(
                "recording is {}x{} but the detector expects {}x{}",
                stream.width(),
                stream.height(),
                d.sensor_width,
                d.sensor_height
            );
        }
    }
    let resume = match resume {
        Some(p) => {
            manifest = manifest.input(p)?;
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    manifest
        .output(out.join("loss.csv"))
        .output(out.join("final.bin"))
        .write(out)?;
    let dataset = Dataset::from_recordings(&recordings, d.t_bins, cfg.train.frame_window_us)?;
    eprintln!(
        "training {} for {} iterations on {} frames",
        cfg.train.variant,
        cfg.train.iterations,
        dataset.num_frames()
    );
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        checkpoint_every: cfg.checkpoint_every,
        resume,
    };
    let outcome = run_training(&cfg.detector, &cfg.train, &dataset, &opts)?;
    if let Some((step, b)) = outcome.log.last() {
        println!("step {step}: total loss {:.5}", b.total);
    }
    Ok(ExitCode::SUCCESS)
}

fn infer(
    argv: &[String],
    checkpoint: &Path,
    events: &Path,
    config: Option<&Path>,
    end_us: Option<u64>,
    out: &Path,
) -> Result<ExitCode> {
    let ck = load_checkpoint(checkpoint)?;
    let mut infer_cfg = deoe_core::infer::InferConfig::default();
    let mut manifest_cfg = json!({ "end_us": end_us });
    let mut manifest = RunManifest::new("infer", argv, (), None)?.input(checkpoint)?.input(events)?;
    if let Some(p) = config {
        let kv = KvConfig::parse(&read_text(p)?).with_context(|| format!("in {}", p.display()))?;
        infer_cfg = RunConfig::from_kv(&kv)?.infer;
        manifest = manifest.input(p)?;
    }
    manifest_cfg["infer"] = serde_json::to_value(&infer_cfg)?;
    let window = train_config_from_checkpoint(&ck)?.frame_window_us;
    manifest_cfg["frame_window_us"] = json!(window);
    let predictions = out.join("predictions.jsonl");
    RunManifest {
        config: manifest_cfg,
        ..manifest
    }
    .output(predictions.clone())
    .write(out)?;
    let model = detector_from_checkpoint(&ck)?;
    let stream = load_events(events)?;
    let sets = run_stream(&model, &stream, window, end_us, &infer_cfg)?;
    save_predictions(&sets, &predictions)?;
    let n: usize = sets.iter().map(|s| s.detections.len()).sum();
    println!("{} frames, {n} detections -> {}", sets.len(), predictions.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(
    argv: &[String],
    predictions: &[PathBuf],
    annotations: &Path,
    split: Option<&str>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let ann = load_annotations(annotations)?;
    let split = match split {
        Some(s) => {
            let known = s
                .split(',')
                .map(|c| c.trim().parse::<u32>().with_context(|| format!("--split `{s}`")))
                .collect::<Result<Vec<_>>>()?;
            ClassSplit::with_known(&known, &ann)?
        }
        None => ClassSplit::from_annotations(&ann)?,
    };
    let cfg = EvalConfig::default();
    if let Some(dir) = out {
        let mut m = RunManifest::new("eval", argv, json!({ "split": &split, "eval": &cfg }), None)?.input(annotations)?;
        for p in predictions {
            m = m.input(p)?;
        }
        m.output(dir.join("report.txt")).output(dir.join("report.jsonl")).write(dir)?;
    }
    let mut reports = Vec::new();
    for p in predictions {
        let sets = group_predictions(&load_predictions(p)?);
        let label = p
            .parent()
            .and_then(Path::file_name)
            .or_else(|| p.file_stem())
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        reports.push(evaluate_run(&label, &sets, &ann, &split, &cfg).with_context(|| format!("evaluating {}", p.display()))?);
    }
    let table = format_table(&reports);
    print!("{table}");
    if let Some(dir) = out {
        fs::write(dir.join("report.txt"), &table)?;
        fs::write(dir.join("report.jsonl"), format_jsonl(&reports))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(argv: &[String], checkpoint: &Path, events: &Path, frames: usize, warmup: usize, out: &Path) -> Result<ExitCode> {
    if frames <= warmup {
        bail!("--frames ({frames}) must exceed --warmup ({warmup})");
    }
    let ck = load_checkpoint(checkpoint)?;
    let window = train_config_from_checkpoint(&ck)?.frame_window_us;
    let stats_path = out.join("latency.json");
    RunManifest::new("bench", argv, json!({ "frames": frames, "warmup": warmup }), None)?
        .input(checkpoint)?
        .input(events)?
        .output(stats_path.clone())
        .write(out)?;
    let model = detector_from_checkpoint(&ck)?;
    let stream = load_events(events)?;
    let end = stream.events().last().map_or(0, |e| e.t + 1);
    let ticks = frame_ticks(end, window);
    if ticks.is_empty() {
        bail!("{} is empty", events.display());
    }
    let tensors = (0..frames)
        .map(|i| encode_frame_at(&stream, ticks[i % ticks.len()], window, model.config().t_bins))
        .collect::<deoe_core::Result<Vec<_>>>()?;
    let stats = bench_inference(&model, &tensors, warmup, &Default::default())?;
    let text = serde_json::to_string_pretty(&stats)?;
    fs::write(&stats_path, text.clone() + "\n")?;
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(argv: &[String], seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    if let Some(dir) = out {
        RunManifest::new("gradcheck", argv, json!({ "tolerance": gradsuite::TOLERANCE }), Some(seed))?
            .output(dir.join("gradcheck.txt"))
            .write(dir)?;
    }
    let rows = gradsuite::run_suite(seed)?;
    let mut text = String::new();
    for r in &rows {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        text.push_str(&format!("{verdict} {:<18} max rel error {:.3e}\n", r.name, r.max_rel_error));
    }
    print!("{text}");
    if let Some(dir) = out {
        fs::write(dir.join("gradcheck.txt"), &text)?;
    }
    Ok(if rows.iter().all(|r| r.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn benchmark(argv: &[String], arms: &str, seeds: u64, iterations: Option<u64>, out: &Path) -> Result<ExitCode> {
    let arms = arms.split(',').map(|a| a.trim().parse::<Arm>()).collect::<deoe_core::Result<Vec<_>>>()?;
    let mut spec = BenchmarkSpec::default();
    if let Some(n) = iterations {
        spec.train.iterations = n;
    }
    RunManifest::new("benchmark", argv, json!({ "spec": &spec, "arms": &arms, "seeds": seeds }), None)?
        .output(out.join("report.txt"))
        .output(out.join("report.jsonl"))
        .write(out)?;
    let bench = Benchmark::build(spec)?;
    let mut reports = Vec::new();
    for arm in &arms {
        for seed in 0..seeds {
            eprintln!("{} seed {seed}", arm.label);
            reports.push(bench.run(arm, seed)?);
        }
    }
    let table = format_table(&reports);
    print!("{table}");
    fs::write(out.join("report.txt"), &table)?;
    fs::write(out.join("report.jsonl"), format_jsonl(&reports))?;
    Ok(ExitCode::SUCCESS)
}
