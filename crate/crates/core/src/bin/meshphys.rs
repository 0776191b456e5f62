//! Command-line front end: synthetic data generation, graph cache
//! construction, training, evaluation, ablations and gradient checking.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use meshphys::gradsuite;
use meshphys::pipeline::{
    ablate, evaluate_checkpoint, ingest, train, AblationVariant, EvalProtocol,
    TrainConfig,
};
use meshphys::stgraph::RegionConfig;
use meshphys::synth::{emit_dataset, DatasetPreset, FacePulseScenario};
use meshphys::{Error, Result};

#[derive(Parser)]
#[command(
    name = "meshphys",
    version,
    about = "Pulse estimation from face video via spatiotemporal graphs"
)]
struct Cli {
    /// Log filter (e.g. `info`, `debug`, `meshphys=debug`).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic facial pulse dataset.
    Synth(SynthArgs),
    /// Ingest a manifest and build (or refresh) the graph cache.
    Build(BuildArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint's pulse-rate error.
    Eval(EvalArgs),
    /// Train+evaluate across graph variants.
    Ablate(AblateArgs),
    /// Verify gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthPreset {
    /// One still, noise-free video.
    Clean,
    /// Several videos with head motion, noise and distinct pulse rates.
    Bench,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "bench")]
    preset: SynthPreset,
    /// Number of videos (bench preset).
    #[arg(long, default_value_t = 4)]
    videos: usize,
    /// Approximate mesh face count.
    #[arg(long, default_value_t = 200)]
    faces: usize,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Seconds per video.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Frame side length in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: u32,
    /// Pulse color amplitude as a fraction of the base color.
    #[arg(long, default_value_t = 0.02)]
    amplitude: f64,
    /// Pixel noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Peak yaw rotation in degrees.
    #[arg(long)]
    yaw: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma list of split tags, one per video (e.g. `train,train,val,test`).
    #[arg(long, value_delimiter = ',')]
    splits: Vec<String>,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Region tag `scheme/feature/edges`.
    #[arg(long)]
    region: Option<String>,
    /// Clip length used for clip accounting.
    #[arg(long, default_value_t = 256)]
    window: usize,
    /// Build in memory only; do not write cache files.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Training config TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long, default_value = "checkpoint.ckpt")]
    out: PathBuf,
    /// Write the effective config to this path (then train, or exit
    /// when no manifest is given).
    #[arg(long)]
    emit_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Region tag override.
    #[arg(long)]
    region: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Restrict to one split tag; all videos when omitted.
    #[arg(long)]
    split: Option<String>,
    /// Clip length; defaults to the window stored in the checkpoint.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    band_lo: f64,
    #[arg(long, default_value_t = 3.0)]
    band_hi: f64,
    /// Write the full report as TOML.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Edge schemes to compare.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "shared_vertex,shared_edge,self_only"
    )]
    edges: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "ablation")]
    out_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random draws per check.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Largest allowed relative error.
    #[arg(long, default_value_t = gradsuite::SUITE_TOLERANCE)]
    tolerance: f64,
}

fn bench_scenario(args: &SynthArgs, index: usize) -> FacePulseScenario {
    let preset = DatasetPreset {
        perturbed: matches!(args.preset, SynthPreset::Bench),
        faces: args.faces,
        image_size: args.image_size,
        fps: args.fps,
        duration_s: args.duration,
        amplitude: args.amplitude,
        noise_sigma: args.noise,
        yaw_deg: args.yaw,
        seed: args.seed,
    };
    preset.scenario(index)
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let videos = match args.preset {
        SynthPreset::Clean => 1.max(args.videos.min(1)),
        SynthPreset::Bench => args.videos.max(1),
    };
    let scenarios: Vec<(String, FacePulseScenario)> = (0..videos)
        .map(|i| (format!("video_{i:03}"), bench_scenario(&args, i)))
        .collect();
    let mut manifest = emit_dataset(&args.out, &scenarios)?;

    let splits: Vec<String> = if !args.splits.is_empty() {
        if args.splits.len() != videos {
            return Err(Error::Config(format!(
                "{} split tags for {videos} videos",
                args.splits.len()
            )));
        }
        args.splits.clone()
    } else if videos >= 3 {
        // Default: last two videos held out for validation and test.
        (0..videos)
            .map(|i| {
                if i == videos - 1 {
                    "test".into()
                } else if i == videos - 2 {
                    "val".into()
                } else {
                    "train".into()
                }
            })
            .collect()
    } else {
        vec!["train".to_string(); videos]
    };
    for (video, split) in manifest.videos.iter_mut().zip(&splits) {
        video.split = split.clone();
    }
    let path = args.out.join("manifest.toml");
    manifest.save(&path)?;
    for ((name, scenario), split) in scenarios.iter().zip(&splits) {
        println!(
            "{name}: {:.0} frames at {} fps, pulse {:.1} bpm, split {split}",
            scenario.duration_s * scenario.fps,
            scenario.fps,
            scenario.mean_rate_bpm()
        );
    }
    println!("manifest: {}", path.display());
    Ok(())
}

fn run_build(args: BuildArgs) -> Result<()> {
    let region = match &args.region {
        Some(tag) => RegionConfig::from_tag(tag)?,
        None => RegionConfig::default(),
    };
    let dataset = ingest(&args.manifest, &region, !args.no_cache)?;
    println!("region: {}", region.tag());
    let mut total_clips = 0usize;
    for video in &dataset.videos {
        let clips: usize = video
            .spans
            .iter()
            .map(|s| s.graph.frames / args.window)
            .sum();
        total_clips += clips;
        let adj = &video.spans[0].graph.adjacency;
        println!(
            "{}: {} frames, {} spans, {} nodes, {:.2} edges/node, \
             visibility {:.3}, {clips} clips of {} [{}]",
            video.name,
            video.frame_count,
            video.spans.len(),
            adj.node_count(),
            adj.avg_degree(),
            video.spans.iter().map(|s| s.graph.visibility()).sum::<f64>()
                / video.spans.len() as f64,
            args.window,
            video.split,
        );
    }
    println!("total clips: {total_clips}");
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(window) = args.window {
        cfg.window = window;
        cfg.stride = window;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(region) = &args.region {
        cfg.graph.region = region.clone();
    }
    cfg.validate()?;
    if let Some(path) = &args.emit_config {
        cfg.save(path)?;
        println!("config written to {}", path.display());
    }
    let Some(manifest) = &args.manifest else {
        if args.emit_config.is_some() {
            return Ok(());
        }
        return Err(Error::Config("--manifest is required to train".into()));
    };
    let report = train(&cfg, manifest, &args.out)?;
    println!(
        "trained {} epochs on {} clips ({} validation)",
        report.epochs, report.clip_counts.0, report.clip_counts.1
    );
    println!(
        "best epoch {} with validation loss {:.5}",
        report.best_epoch, report.best_val_loss
    );
    println!("checkpoint: {}", report.checkpoint.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let protocol = args.window.map(|window| EvalProtocol {
        window,
        stride: window,
        band_lo_hz: args.band_lo,
        band_hi_hz: args.band_hi,
    });
    let (report, meta) = evaluate_checkpoint(
        &args.checkpoint,
        &args.manifest,
        args.split.as_deref(),
        protocol,
    )?;
    if let Some(epoch) = meta.get("epoch") {
        println!(
            "checkpoint from epoch {epoch} (val loss {})",
            meta.get("val_loss").unwrap_or("?")
        );
    }
    println!("{:<16} {:>6} {:>10} {:>10} {:>8}", "video", "clips", "est bpm", "ref bpm", "abs err");
    for v in &report.videos {
        println!(
            "{:<16} {:>6} {:>10.2} {:>10.2} {:>8.2}",
            v.video,
            v.clip_count,
            v.est_bpm,
            v.ref_bpm,
            (v.est_bpm - v.ref_bpm).abs()
        );
    }
    let m = &report.video_metrics;
    println!(
        "video level: MAE {:.3} bpm, RMSE {:.3} bpm, r {:.3} ({} videos)",
        m.mae,
        m.rmse,
        m.pearson,
        report.videos.len()
    );
    let m = &report.clip_metrics;
    println!(
        "clip level:  MAE {:.3} bpm, RMSE {:.3} bpm, r {:.3} ({} clips)",
        m.mae,
        m.rmse,
        m.pearson,
        report.clips.len()
    );
    if let Some(path) = &args.report {
        let text = toml::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(window) = args.window {
        cfg.window = window;
        cfg.stride = window;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    let base_region = cfg.graph.to_region()?;
    let variants: Vec<AblationVariant> = args
        .edges
        .iter()
        .map(|tag| AblationVariant::edge(&base_region, tag))
        .collect::<Result<_>>()?;
    let rows = ablate(&cfg, &args.manifest, &variants, &args.seeds, &args.out_dir)?;
    println!(
        "{:<24} {:>14} {:>14}  per-seed clip MAE",
        "variant", "clip MAE", "video MAE"
    );
    for row in &rows {
        println!(
            "{:<24} {:>14.3} {:>14.3}  {:?}",
            row.name, row.mean_clip_mae, row.mean_video_mae, row.clip_mae
        );
    }
    println!("table: {}", args.out_dir.join("ablation.toml").display());
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let (outcomes, worst) = gradsuite::run_all(args.seeds)?;
    println!(
        "{:<28} {:>6} {:>10} {:>14}",
        "check", "seeds", "coords", "max rel err"
    );
    for o in &outcomes {
        println!(
            "{:<28} {:>6} {:>10} {:>14.3e}",
            o.name, o.seeds, o.coords, o.max_rel_error
        );
    }
    if worst < args.tolerance {
        println!("all gradients verified (worst {worst:.3e} < {:.1e})", args.tolerance);
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: worst relative error {worst:.3e} >= {:.1e}",
            args.tolerance
        )))
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(args) => run_synth(args),
        Cmd::Build(args) => run_build(args),
        Cmd::Train(args) => run_train(args),
        Cmd::Eval(args) => run_eval(args),
        Cmd::Ablate(args) => run_ablate(args),
        Cmd::Gradcheck(args) => run_gradcheck(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp_millis()
        .init();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
