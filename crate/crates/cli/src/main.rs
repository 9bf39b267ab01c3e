//! Command-line entry point: tracking, evaluation, and scenario generation.

mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fg3dmot::error::Error;
use fg3dmot::kitti::parse_labels;
use fg3dmot::metrics::{evaluate, MatchMode};
use fg3dmot::simulate::{generate, write_scenario, ScenarioConfig};
use fg3dmot::types::{Mode, TrackerParams};

#[derive(Parser)]
#[command(name = "fg3dmot", version, about = "Factor-graph 3D multi-object tracking")]
struct Cli {
    /// Log level (error, warn, info, debug, trace); the FG3DMOT_LOG
    /// environment variable takes precedence.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the tracking pipeline and write KITTI-format labels.
    Track(TrackArgs),
    /// Evaluate a hypothesis label file against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic scenario (ground truth, detections, poses).
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct TrackArgs {
    /// Tracking mode: offline or online. Overrides the config file.
    #[arg(long)]
    mode: Option<String>,
    /// Detection dump (comma-separated KITTI-style columns).
    #[arg(long, required_unless_present = "manifest")]
    detections: Option<PathBuf>,
    /// Ego poses, one 3x4 row-major transform per line. Identity if absent.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Camera calibration (`P:`/`P2:` projection plus `size:` line).
    /// Without it no 2D boxes are produced and no visibility filter applies.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Output label file path.
    #[arg(long, required_unless_present = "manifest")]
    out: Option<PathBuf>,
    /// Tracker parameter config file (flat `key = value`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep only detections of this class (name like `Car` or numeric id).
    #[arg(long)]
    class: Option<String>,
    /// Optimize only the trailing N frames (default: full history).
    #[arg(long)]
    window: Option<usize>,
    /// Write per-frame optimized states as CSV for external plotting.
    #[arg(long)]
    dump_traj: Option<PathBuf>,
    /// Write the effective tracker config (with the resolved confidence
    /// offset) for bit-exact reruns.
    #[arg(long)]
    dump_config: Option<PathBuf>,
    /// Manifest of sequences: `detections out [poses [calib]]` per line,
    /// `-` for an absent path. Processed with `--jobs` worker slots.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Parallel worker slots for manifest processing.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth label file (17- or 18-column KITTI format).
    #[arg(long)]
    gt: PathBuf,
    /// Hypothesis label file.
    #[arg(long)]
    hyp: PathBuf,
    /// Matching mode: center3d or iou2d.
    #[arg(long, default_value = "center3d")]
    mode: String,
    /// Match threshold: meters for center3d, IoU for iou2d.
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config file (flat `key = value`); S1 defaults if absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for gt.txt, detections.txt, poses.txt.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    miss_prob: Option<f64>,
    #[arg(long)]
    clutter_rate: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage and parse errors exit with code 1.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter_or("FG3DMOT_LOG", cli.log_level.clone()),
    )
    .init();

    let result = match cli.command {
        Command::Track(args) => cmd_track(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Diverged(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_track(args: TrackArgs) -> Result<(), Error> {
    let mut params: TrackerParams<f64> = match &args.config {
        Some(path) => TrackerParams::read_config(path)?,
        None => TrackerParams::default(),
    };
    if let Some(mode) = &args.mode {
        params.mode = mode.parse::<Mode>()?;
    }

    if let Some(manifest) = &args.manifest {
        return pipeline::run_manifest(manifest, &params, &args_to_options(&args)?, args.jobs);
    }

    let job = pipeline::SequenceJob {
        detections: args.detections.clone().expect("required by clap"),
        poses: args.poses.clone(),
        calib: args.calib.clone(),
        out: args.out.clone().expect("required by clap"),
    };
    let summary = pipeline::run_sequence(&job, &params, &args_to_options(&args)?)?;
    eprintln!("{summary}");
    Ok(())
}

fn args_to_options(args: &TrackArgs) -> Result<pipeline::TrackOptions, Error> {
    let class_filter = match &args.class {
        None => None,
        Some(name) => Some(
            fg3dmot::kitti::class_id(name)
                .or_else(|| name.parse().ok())
                .ok_or_else(|| Error::Config(format!("unknown class `{name}`")))?,
        ),
    };
    Ok(pipeline::TrackOptions {
        class_filter,
        window: args.window,
        dump_traj: args.dump_traj.clone(),
        dump_config: args.dump_config.clone(),
    })
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let gt = parse_labels::<f64>(&args.gt)?;
    let hyp = parse_labels::<f64>(&args.hyp)?;
    let mode = match args.mode.as_str() {
        "center3d" => MatchMode::Center3D(args.threshold),
        "iou2d" => MatchMode::Iou2D(args.threshold),
        other => return Err(Error::Config(format!("unknown eval mode `{other}`"))),
    };
    let report = evaluate(&gt, &hyp, mode)?;
    print!("{}", report.to_table());
    println!();
    print!("{}", report.to_kv());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let mut cfg: ScenarioConfig<f64> = match &args.config {
        Some(path) => ScenarioConfig::from_config_str(&std::fs::read_to_string(path)?)?,
        None => ScenarioConfig::s1(0),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.objects {
        cfg.n_objects = n;
    }
    if let Some(n) = args.frames {
        cfg.n_frames = n;
    }
    if let Some(p) = args.miss_prob {
        cfg.miss_prob = p;
    }
    if let Some(r) = args.clutter_rate {
        cfg.clutter_rate = r;
    }
    if let Some(s) = args.noise_sigma {
        cfg.det_noise_sigma = s;
    }
    cfg.validate()?;

    let (gt, frames) = generate(&cfg)?;
    write_scenario(&args.out_dir, &gt, &frames)?;
    let detections: usize = frames.iter().map(Vec::len).sum();
    println!(
        "scenario: {} objects, {} frames, {} detections, seed {}",
        cfg.n_objects,
        cfg.n_frames,
        detections,
        cfg.seed
    );
    println!("wrote {}", args.out_dir.join("gt.txt").display());
    println!("wrote {}", args.out_dir.join("detections.txt").display());
    println!("wrote {}", args.out_dir.join("poses.txt").display());
    Ok(())
}
