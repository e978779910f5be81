//! `ludt`: synthetic data, curation, unsupervised training, tracking and
//! evaluation from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ludt_core::data::{self, CorpusSource, PrepareConfig, SampleConfig, SynthConfig};
use ludt_core::eval::ope_curves;
use ludt_core::features::{LrSchedule, NetParams};
use ludt_core::imgproc::{list_frames, load_frame, save_frame, BBox};
use ludt_core::tracker::{self, draw_box, read_boxes, write_boxes, TrackerConfig};
use ludt_core::unsup::{self, SampleSource, TrainConfig};
use ludt_core::{dcf::RegConfig, gradcheck};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "ludt", version, about = "Unsupervised correlation-filter tracking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    GenSynth(GenSynth),
    Prepare(Prepare),
    Train(Train),
    Track(Track),
    Eval(Eval),
    Gradcheck(Gradcheck),
}

/// Render a seeded synthetic corpus.
///
/// Writes `<out>/synth_NNN/frame_%06d.png`, `groundtruth.txt` (one
/// `x,y,w,h` line per frame, top-left corner in pixels) and `tags.txt`
/// (comma-separated scenario tags).
#[derive(Args)]
struct GenSynth {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add occluder bars to every other video.
    #[arg(long)]
    occlusion: Option<bool>,
    /// TOML file with corpus settings (videos, frames, size, target_size,
    /// velocity_range, texture_seed, occlusion, clutter, drift, segment,
    /// noise, flicker, clutter_contrast). Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Curate raw videos into pseudo-tracks.
///
/// Every subdirectory of `--videos` holding image frames is one video. For
/// each, the highest-entropy box of a grid over the first frame is tracked
/// forward with a grayscale correlation filter, and `<out>/<id>/track.txt`
/// receives `frame,cx,cy,w,h` lines plus a `meta,` line. Videos whose best
/// box falls below the entropy floor (bits) are skipped.
#[derive(Args)]
struct Prepare {
    #[arg(long)]
    videos: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Candidate boxes per axis.
    #[arg(long, default_value_t = 5)]
    grid: usize,
    #[arg(long, default_value_t = 1.0)]
    entropy_floor: f64,
    /// Accepted for uniformity; curation is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// Train the feature extractor by forward-backward consistency.
///
/// The model file is binary (magic `LUDT1`, shapes, little-endian f32
/// weights). The loss log gets one `epoch,mean_loss,lr` line per epoch.
/// Checkpoints go to `<out>.epochNNN`.
#[derive(Args)]
struct Train {
    /// Directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Patches per trajectory, template included.
    #[arg(long)]
    traj: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss log path (default `<out>.loss`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// TOML file with any of: epochs, batch, traj, seed, lr_start, lr_end,
    /// momentum, weight_decay, lambda, drop_fraction, windows_per_block,
    /// checkpoint_every, jobs. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Track one sequence from an initial box.
///
/// Writes one `x,y,w,h` line per frame (top-left corner, pixels).
#[derive(Args)]
struct Track {
    #[arg(long)]
    model: PathBuf,
    /// Directory of frames, read in file-name order.
    #[arg(long)]
    sequence: PathBuf,
    /// Initial box as `x,y,w,h`.
    #[arg(long, value_parser = parse_box)]
    init: BBox,
    #[arg(long)]
    out: PathBuf,
    /// Also save every frame with the predicted box drawn.
    #[arg(long)]
    dump_frames: Option<PathBuf>,
}

/// Score a results file against ground truth.
///
/// Both files hold `x,y,w,h` lines. Prints `DP@20=<v> AUC=<v>`.
#[derive(Args)]
struct Eval {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Write the success curve as `threshold,success` rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Compare every analytic gradient with central finite differences.
#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_box(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect::<Result<_, _>>()?;
    let [x, y, w, h] = v[..] else {
        return Err(format!("expected x,y,w,h, got {} values", v.len()));
    };
    let b = BBox::from_xywh(x, y, w, h);
    b.validate().map_err(|e| e.to_string())?;
    Ok(b)
}

fn gen_synth(a: GenSynth) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    cfg.videos = a.videos.unwrap_or(cfg.videos);
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.occlusion = a.occlusion.unwrap_or(cfg.occlusion);
    let videos = data::gen_synthetic(&cfg, a.seed)?;
    data::write_synthetic(&a.out, &videos)?;
    println!("wrote {} videos to {}", videos.len(), a.out.display());
    Ok(())
}

fn prepare(a: Prepare) -> Result<()> {
    let mut cfg = PrepareConfig {
        entropy_floor: a.entropy_floor,
        ..PrepareConfig::default()
    };
    cfg.grid.size = a.grid;
    let report = data::prepare(&a.videos, &a.out, &cfg, a.jobs)?;
    println!(
        "curated {} tracks, skipped {} low-entropy videos",
        report.written.len(),
        report.low_entropy.len()
    );
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    epochs: Option<usize>,
    batch: Option<usize>,
    traj: Option<usize>,
    seed: Option<u64>,
    lr_start: Option<f64>,
    lr_end: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    lambda: Option<f64>,
    drop_fraction: Option<f64>,
    windows_per_block: Option<usize>,
    checkpoint_every: Option<usize>,
    jobs: Option<usize>,
}

fn read_train_file(path: &Path) -> Result<TrainFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {}", path.display(), e.message()))
}

fn train(a: Train) -> Result<()> {
    let file = match &a.config {
        Some(p) => read_train_file(p)?,
        None => TrainFile::default(),
    };
    let defaults = TrainConfig::default();
    let traj = a.traj.or(file.traj).unwrap_or(defaults.traj_len + 1);
    if traj < 2 {
        bail!("--traj must be at least 2 (a template and one search patch)");
    }
    let cfg = TrainConfig {
        epochs: a.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch_size: a.batch.or(file.batch).unwrap_or(defaults.batch_size),
        traj_len: traj - 1,
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
        lr: LrSchedule {
            start: file.lr_start.unwrap_or(defaults.lr.start),
            end: file.lr_end.unwrap_or(defaults.lr.end),
        },
        sgd: ludt_core::features::SgdConfig {
            momentum: file.momentum.unwrap_or(defaults.sgd.momentum),
            weight_decay: file.weight_decay.unwrap_or(defaults.sgd.weight_decay),
        },
        reg: RegConfig {
            lambda: file.lambda.unwrap_or(defaults.reg.lambda),
        },
        drop_fraction: file.drop_fraction.unwrap_or(defaults.drop_fraction),
        jobs: a.jobs.or(file.jobs).unwrap_or(defaults.jobs),
        ..defaults
    };
    let sample_cfg = SampleConfig {
        frames: traj,
        windows_per_block: file.windows_per_block.unwrap_or(SampleConfig::default().windows_per_block),
        context: cfg.context,
        ..SampleConfig::default()
    };
    let every = a.checkpoint_every.or(file.checkpoint_every).unwrap_or(10);
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".loss"));
    let source = CorpusSource::open(&a.data, &sample_cfg, cfg.seed)?;
    if source.is_empty() {
        bail!("no training trajectories in {}", a.data.display());
    }
    let mut log = String::new();
    let outcome = unsup::train(&source, &cfg, |rec, theta| {
        log.push_str(&rec.to_line());
        log.push('\n');
        std::fs::write(&log_path, &log).map_err(|e| ludt_core::Error::InvalidInput(format!("{}: {e}", log_path.display())))?;
        eprintln!("{}", rec.to_line());
        if every > 0 && rec.epoch % every == 0 && rec.epoch < cfg.epochs {
            let mut snap = theta.clone();
            snap.round_to_f32();
            snap.save(&with_suffix(&a.out, &format!(".epoch{:03}", rec.epoch)))?;
        }
        Ok(())
    })?;
    outcome.theta.save(&a.out)?;
    println!("trained on {} trajectories; model in {}", source.len(), a.out.display());
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn track(a: Track) -> Result<()> {
    let theta = NetParams::load(&a.model)?;
    let paths = list_frames(&a.sequence)?;
    let Some(first) = paths.first() else {
        bail!("no frames in {}", a.sequence.display());
    };
    let cfg = TrackerConfig::default();
    let mut state = tracker::init(&load_frame(first)?, a.init, &theta, &cfg)?;
    let mut boxes = vec![a.init];
    for p in &paths[1..] {
        boxes.push(tracker::step(&mut state, &load_frame(p)?)?);
    }
    write_boxes(&a.out, &boxes)?;
    if let Some(dir) = &a.dump_frames {
        std::fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
        for (i, (p, b)) in paths.iter().zip(&boxes).enumerate() {
            save_frame(&dir.join(format!("{i:06}.png")), &draw_box(&load_frame(p)?, b)?)?;
        }
    }
    println!("tracked {} frames into {}", boxes.len(), a.out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let curves = ope_curves(&read_boxes(&a.results)?, &read_boxes(&a.gt)?)?;
    if let Some(p) = &a.csv {
        curves.write_success_csv(p)?;
    }
    println!("{}", curves.summary());
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    let reports = gradcheck::run_all(a.seed)?;
    let mut ok = true;
    for r in &reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{verdict} {}: {} checks, max rel err {:.3e} at {}",
            r.name, r.checked, r.max_rel_err, r.worst
        );
        ok &= r.passed();
    }
    if !ok {
        bail!("gradient check failed (tolerance {:.0e})", gradcheck::TOLERANCE);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("ludt: error: {}", first.trim_start_matches("error: ").trim());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("ludt: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
