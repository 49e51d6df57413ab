use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semcom_core::frames::save_frames_png;
use semcom_core::pipeline::{prepare_video, run_experiment, sense_video, write_report};
use semcom_core::records::{load_records, write_summary_csv, RECORDS_FILE, SUMMARY_FILE};
use semcom_core::synth::{moving_square_video, SquareVideoConfig};
use semcom_core::{
    compute_reduction, load_checkpoint, run_transmission, save_checkpoint, train, CrClass, Error, ModelPair,
    PipelineConfig, RunConfig, Scheme,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "semcom", version, about = "Sensing-driven semantic video transmission")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Seed applied to the channel and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `paths.output`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the mentor/student pair and write a checkpoint.
    Train(Common),
    /// Run the sensing stage and write masks and per-frame verdicts.
    Sense(Common),
    /// Transmit the configured video through one scheme.
    Transmit {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "sccvs")]
        scheme: Scheme,
        /// Also write reconstructed frames as PNG.
        #[arg(long)]
        save_frames: bool,
    },
    /// Re-check a transmission run's records and print its summary.
    Evaluate(Common),
    /// Sweep schemes over the SNR grid and write tables and plots.
    Experiment(Common),
    /// Write report.md from the results in the output directory.
    Report(Common),
    /// Write a synthetic moving-square video as PNG frames to `paths.frames`.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        frames: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.output {
        cfg.paths.output = out.clone();
    }
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.paths.output.as_path();
    if dir.as_os_str().is_empty() {
        return Err(Error::Config("paths.output is not set".into()).into());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.output.join("model.ckpt"))
}

fn load_models(cfg: &RunConfig) -> Result<ModelPair> {
    let path = checkpoint_path(cfg);
    let (pair, manifest) =
        load_checkpoint(&path, Some(&cfg.model)).with_context(|| format!("loading checkpoint {}", path.display()))?;
    log::info!("loaded checkpoint {} (seed {})", path.display(), manifest.seed);
    Ok(pair)
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = output_dir(&cfg)?;
    let video = prepare_video(&cfg)?;
    let pair = ModelPair::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let outcome = train(&video.frames, pair, &cfg.train, None)?;
    let history = out.join("loss_history.csv");
    fs::write(&history, outcome.history.to_csv()).with_context(|| format!("writing {}", history.display()))?;
    let ckpt = checkpoint_path(&cfg);
    save_checkpoint(&outcome.pair, cfg.train.seed, &ckpt)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} epochs: mentor {:.6}, student {:.6}, kd {:.6}",
            last.epoch, last.mentor_task, last.student_task, last.student_kd
        );
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_sense(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = output_dir(&cfg)?;
    let video = prepare_video(&cfg)?;
    let results = sense_video(&video, &cfg.sensing)?;
    let masks = out.join("masks");
    fs::create_dir_all(&masks).with_context(|| format!("creating {}", masks.display()))?;
    let path = out.join("sensing.jsonl");
    let mut file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut statics = 0;
    for r in &results {
        r.mask.save_png(&masks.join(format!("mask_{:06}.png", r.frame_index)))?;
        statics += (r.verdict.cr == CrClass::StaticHighCr) as usize;
        let line = serde_json::json!({
            "frame_index": r.frame_index,
            "eta": r.verdict.eta,
            "cr": r.verdict.cr.as_str(),
            "objects": r.detections.len(),
        });
        writeln!(file, "{line}")?;
    }
    println!(
        "{} frames sensed: {} static, {} dynamic",
        results.len(),
        statics,
        results.len() - statics
    );
    Ok(())
}

fn cmd_transmit(common: &Common, scheme: Scheme, save_frames: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let out = output_dir(&cfg)?;
    let video = prepare_video(&cfg)?;
    let models = load_models(&cfg)?;
    let result = run_transmission(&video, &models, &PipelineConfig::from_run(&cfg), scheme, Some(out))?;
    if save_frames {
        save_frames_png(&result.reconstructed, &out.join("reconstructed"))?;
    }
    let s = &result.summary;
    let reduction = compute_reduction(&result.records, models.config.lengths.dynamic_low)?;
    println!(
        "{} frames ({} static): {} bits, delay {:.6} s, PSNR {}, MS-SSIM {:.4}, reduction {:.2}%",
        s.frames, s.static_frames, s.total_bits, s.total_delay_s, s.mean_psnr, s.mean_ms_ssim, reduction
    );
    Ok(())
}

fn cmd_evaluate(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = output_dir(&cfg)?;
    let (records, summary) = load_records(&out.join(RECORDS_FILE))?;
    let summary = match summary {
        Some(s) => {
            s.check_closure(&records)?;
            s
        }
        None => bail!("{} has no summary line; the run did not finish", RECORDS_FILE),
    };
    for r in &records {
        r.validate(&cfg.model.lengths, cfg.channel.bits_per_symbol)?;
    }
    write_summary_csv(&out.join(SUMMARY_FILE), &summary)?;
    let reduction = compute_reduction(&records, cfg.model.lengths.dynamic_low)?;
    println!("{}", semcom_core::Summary::csv_header());
    println!("{}", summary.csv_row());
    println!("reduction vs all-long encoding: {reduction:.2}%");
    Ok(())
}

fn cmd_experiment(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = output_dir(&cfg)?;
    let video = prepare_video(&cfg)?;
    let models = load_models(&cfg)?;
    let rows = run_experiment(&video, &models, &cfg, out)?;
    write_report(out)?;
    println!("{} sweep points written to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_report(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = output_dir(&cfg)?;
    print!("{}", write_report(out)?);
    Ok(())
}

fn cmd_synth(common: &Common, frames: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = cfg
        .paths
        .frames
        .as_ref()
        .ok_or_else(|| Error::Config("paths.frames is not set".into()))?;
    let side = cfg.model.height.min(cfg.model.width);
    let square = (side / 4).max(1);
    let video = moving_square_video(&SquareVideoConfig {
        frames,
        height: cfg.model.height,
        width: cfg.model.width,
        channels: cfg.model.channels,
        square,
        step: (square / 4).max(1),
        seed: common.seed.unwrap_or(cfg.channel.seed),
        ..SquareVideoConfig::default()
    })?;
    save_frames_png(&video, dir)?;
    println!("{} frames written to {}", video.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Sense(c) => cmd_sense(c),
        Command::Transmit {
            common,
            scheme,
            save_frames,
        } => cmd_transmit(common, *scheme, *save_frames),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Experiment(c) => cmd_experiment(c),
        Command::Report(c) => cmd_report(c),
        Command::Synth { common, frames } => cmd_synth(common, *frames),
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Config(_) | Error::Checkpoint(_))))
}

/// Library errors already embed their source in the message; skip causes that
/// would repeat it.
fn render_chain(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", render_chain(&err));
            ExitCode::from(if is_config_error(&err) {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
