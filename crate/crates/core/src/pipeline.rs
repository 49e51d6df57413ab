//! Sensing-driven video transmission, data accounting, and experiment sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{frame_seed, ChannelConfig};
use crate::codec::{ModelPair, SemanticCodec};
use crate::config::{RunConfig, Scheme, SensingConfig};
use crate::error::{Error, Result};
use crate::frames::{load_frames, sample_one_fps, Frame, FrameLabel, VideoSequence};
use crate::kan::CrClass;
use crate::metrics::{frame_bits, frame_delay, ms_ssim, mse, perceptual_loss, psnr_from_mse, transmission_rate};
use crate::metrics::{Psnr, RandomConvExtractor, PERCEPTUAL_SEED};
use crate::osms::{SensingResult, Sensor};
use crate::plot::{bar_plot, line_plot, Series};
use crate::records::{save_records, write_summary_csv, Summary, TransmissionRecord, RECORDS_FILE, SUMMARY_FILE};

pub const EXPERIMENT_FILE: &str = "experiment.csv";
pub const REPORT_FILE: &str = "report.md";

/// Settings consumed by [`run_transmission`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub channel: ChannelConfig,
    pub sensing: SensingConfig,
    pub zeta: f64,
}

impl PipelineConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        PipelineConfig {
            channel: cfg.channel,
            sensing: cfg.sensing.clone(),
            zeta: cfg.objective.zeta,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransmissionOutput {
    pub reconstructed: VideoSequence,
    pub records: Vec<TransmissionRecord>,
    pub summary: Summary,
}

/// Runs the sensor over every frame in order.
pub fn sense_video(video: &VideoSequence, sensing: &SensingConfig) -> Result<Vec<SensingResult>> {
    let mut sensor = Sensor::baseline(sensing.baseline, sensing.epsilon)?;
    video.frames.iter().map(|f| sensor.sense(f)).collect()
}

fn static_codec(models: &ModelPair, scheme: Scheme) -> Result<&SemanticCodec> {
    match scheme {
        Scheme::NoKd => models.student_no_kd.as_ref().ok_or_else(|| {
            Error::Missing("scheme no_kd needs a checkpoint with a student trained without distillation".into())
        }),
        _ => Ok(&models.student),
    }
}

/// Per frame, in order: sense, pick the compression class, transmit through
/// the matching codec, and log metrics, bits and delay.
///
/// With `out` set, records and the summary are written there; if a frame
/// fails, the records gathered so far are flushed before the error returns.
pub fn run_transmission(
    video: &VideoSequence,
    models: &ModelPair,
    cfg: &PipelineConfig,
    scheme: Scheme,
    out: Option<&Path>,
) -> Result<TransmissionOutput> {
    if video.is_empty() {
        return Err(Error::InvalidInput("video has no frames".into()));
    }
    models.validate()?;
    cfg.channel.validate()?;
    let student = static_codec(models, scheme)?;
    let geom = models.config.geometry()?;
    let lengths = models.config.lengths;
    let rate = transmission_rate(cfg.channel.bandwidth_hz, cfg.channel.snr_db)?;
    let extractor = RandomConvExtractor::new(models.config.channels, PERCEPTUAL_SEED);
    let mut sensor = Sensor::baseline(cfg.sensing.baseline, cfg.sensing.epsilon)?;

    let mut records = Vec::with_capacity(video.len());
    let mut recon = Vec::with_capacity(video.len());
    for frame in &video.frames {
        let step = (|| -> Result<(TransmissionRecord, Frame)> {
            let sensed = sensor.sense(frame)?;
            let cr = match scheme {
                Scheme::NoOsms => CrClass::DynamicLowCr,
                _ => sensed.verdict.cr,
            };
            let codec = match cr {
                CrClass::DynamicLowCr => &models.mentor,
                CrClass::StaticHighCr => student,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.channel.seed, frame.index));
            let tx = codec.transmit_frame(
                frame,
                &geom,
                &lengths,
                &cfg.channel,
                &mut rng,
                models.shared_extractor(cr),
            )?;
            let m = mse(frame, &tx.x_hat)?;
            let symbols = lengths.length(cr);
            let bits = frame_bits(symbols, cfg.channel.bits_per_symbol);
            let record = TransmissionRecord {
                frame_index: frame.index,
                cr,
                r: cr.flag(),
                eta: sensed.verdict.eta,
                symbols,
                bits,
                rate_bps: rate,
                delay_s: frame_delay(bits, rate)?,
                psnr: psnr_from_mse(m, 1.0)?,
                ms_ssim: ms_ssim(frame, &tx.x_hat)?,
                perceptual: perceptual_loss(frame, &tx.x_hat, Some(&extractor))?,
                mse: m,
                snr_db: cfg.channel.snr_db,
            };
            Ok((record, tx.x_hat))
        })();
        match step {
            Ok((r, x)) => {
                log::debug!("frame {}: {} eta={:.6}", r.frame_index, r.cr.as_str(), r.eta);
                records.push(r);
                recon.push(x);
            }
            Err(e) => {
                if let Some(dir) = out {
                    log::error!("frame {} failed; flushing {} records", frame.index, records.len());
                    save_records(&dir.join(RECORDS_FILE), &records, None)?;
                }
                return Err(e);
            }
        }
    }
    let summary = Summary::from_records(&records, cfg.zeta)?;
    if let Some(dir) = out {
        save_records(&dir.join(RECORDS_FILE), &records, Some(&summary))?;
        write_summary_csv(&dir.join(SUMMARY_FILE), &summary)?;
    }
    let labels = records
        .iter()
        .map(|r| match r.cr {
            CrClass::StaticHighCr => FrameLabel::Static,
            CrClass::DynamicLowCr => FrameLabel::Dynamic,
        })
        .collect();
    let reconstructed = VideoSequence::new(recon, video.fps_source)?.with_labels(labels)?;
    Ok(TransmissionOutput {
        reconstructed,
        records,
        summary,
    })
}

/// Labels from exact frame equality: a frame equal to its predecessor is
/// static; the first frame is dynamic.
pub fn derive_labels(video: &VideoSequence) -> Vec<FrameLabel> {
    video
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if i > 0 && video.frames[i - 1].pixels == f.pixels {
                FrameLabel::Static
            } else {
                FrameLabel::Dynamic
            }
        })
        .collect()
}

/// Duplicates frames until `static : dynamic ≈ ratio[0] : ratio[1]`.
///
/// The target static count is `round(D·ratio[0]/ratio[1])`. Duplicates are
/// inserted right after static frames, cycling through them; a video with no
/// static frames duplicates its frames in order instead. A duplicate is
/// identical to its predecessor, so it is static and leaves the following
/// frame's label unchanged. Frames are never removed.
pub fn augment_static_ratio(video: &VideoSequence, ratio: [f64; 2]) -> Result<VideoSequence> {
    if video.is_empty() {
        return Err(Error::InvalidInput("cannot augment an empty video".into()));
    }
    let [rs, rd] = ratio;
    if !(rs >= 0.0 && rd > 0.0 && rs.is_finite() && rd.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid ratio {rs}:{rd}")));
    }
    let labels = video.labels.clone().unwrap_or_else(|| derive_labels(video));
    let n_static = labels.iter().filter(|l| **l == FrameLabel::Static).count();
    let n_dynamic = labels.len() - n_static;
    let target = (n_dynamic as f64 * rs / rd).round() as usize;
    if target <= n_static {
        let mut out = video.clone();
        out.labels = Some(labels);
        return Ok(out);
    }
    let extra = target - n_static;
    let sources: Vec<usize> = match n_static {
        0 => (0..labels.len()).collect(),
        _ => (0..labels.len()).filter(|&i| labels[i] == FrameLabel::Static).collect(),
    };
    let mut dups = vec![0usize; labels.len()];
    for k in 0..extra {
        dups[sources[k % sources.len()]] += 1;
    }
    let mut frames = Vec::with_capacity(labels.len() + extra);
    let mut out_labels = Vec::with_capacity(labels.len() + extra);
    for (i, f) in video.frames.iter().enumerate() {
        frames.push(f.clone());
        out_labels.push(labels[i]);
        for _ in 0..dups[i] {
            frames.push(f.clone());
            out_labels.push(FrameLabel::Static);
        }
    }
    VideoSequence::new(frames, video.fps_source)?.with_labels(out_labels)
}

/// Percentage of symbols saved relative to sending every frame at `baseline_length`.
pub fn compute_reduction(records: &[TransmissionRecord], baseline_length: usize) -> Result<f64> {
    if records.is_empty() || baseline_length == 0 {
        return Err(Error::InvalidInput(
            "reduction needs records and a positive baseline".into(),
        ));
    }
    let sent: u64 = records.iter().map(|r| r.symbols as u64).sum();
    let full = records.len() as u64 * baseline_length as u64;
    Ok(100.0 * (1.0 - sent as f64 / full as f64))
}

/// Loads and prepares the input video described by `cfg`.
pub fn prepare_video(cfg: &RunConfig) -> Result<VideoSequence> {
    let path = cfg
        .paths
        .frames
        .as_ref()
        .ok_or_else(|| Error::Config("paths.frames is not set".into()))?;
    let mut video = load_frames(path, (cfg.model.height, cfg.model.width))?;
    if let Some(fps) = cfg.data.fps_source {
        video.fps_source = Some(fps);
    }
    if cfg.data.sample_one_fps {
        video = sample_one_fps(&video)?;
    }
    if let Some(ratio) = cfg.data.static_ratio {
        video = augment_static_ratio(&video, ratio)?;
    }
    if video.shape().map(|s| s.2) != Some(cfg.model.channels) {
        return Err(Error::InvalidInput(format!(
            "video has {:?} channels, model expects {}",
            video.shape().map(|s| s.2),
            cfg.model.channels
        )));
    }
    Ok(video)
}

/// One (scheme, SNR) point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub scheme: Scheme,
    pub snr_db: f64,
    pub frames: usize,
    pub static_frames: usize,
    pub total_symbols: u64,
    pub total_bits: u64,
    pub total_delay_s: f64,
    pub mean_psnr: Psnr,
    pub mean_ms_ssim: f64,
    pub mean_perceptual: f64,
    pub mean_mse: f64,
    pub objective: f64,
    pub reduction_pct: f64,
}

impl ExperimentRow {
    pub const HEADER: &'static str = "scheme,snr_db,frames,static_frames,total_symbols,total_bits,total_delay_s,mean_psnr,mean_ms_ssim,mean_perceptual,mean_mse,objective,reduction_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scheme.as_str(),
            self.snr_db,
            self.frames,
            self.static_frames,
            self.total_symbols,
            self.total_bits,
            self.total_delay_s,
            self.mean_psnr,
            self.mean_ms_ssim,
            self.mean_perceptual,
            self.mean_mse,
            self.objective,
            self.reduction_pct
        )
    }
}

pub fn experiment_csv(rows: &[ExperimentRow]) -> String {
    let mut s = format!("{}\n", ExperimentRow::HEADER);
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Sweeps every configured scheme over the SNR grid, writing per-run records,
/// `experiment.csv`, and plots under `out_dir`.
pub fn run_experiment(
    video: &VideoSequence,
    models: &ModelPair,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<Vec<ExperimentRow>> {
    for &scheme in &cfg.experiment.schemes {
        static_codec(models, scheme)?;
    }
    let base = PipelineConfig::from_run(cfg);
    let mut rows = Vec::new();
    for &scheme in &cfg.experiment.schemes {
        for &snr in &cfg.experiment.snr_grid {
            let pc = PipelineConfig {
                channel: base.channel.with_snr(snr),
                ..base.clone()
            };
            let run_dir = out_dir.join("runs").join(format!("{}_snr{}", scheme.as_str(), snr));
            let out = run_transmission(video, models, &pc, scheme, Some(&run_dir))?;
            let s = &out.summary;
            rows.push(ExperimentRow {
                scheme,
                snr_db: snr,
                frames: s.frames,
                static_frames: s.static_frames,
                total_symbols: s.total_symbols,
                total_bits: s.total_bits,
                total_delay_s: s.total_delay_s,
                mean_psnr: s.mean_psnr,
                mean_ms_ssim: s.mean_ms_ssim,
                mean_perceptual: s.mean_perceptual,
                mean_mse: s.mean_mse,
                objective: s.objective,
                reduction_pct: compute_reduction(&out.records, models.config.lengths.dynamic_low)?,
            });
            log::info!("{} @ {snr} dB: objective {:.6}", scheme.as_str(), s.objective);
        }
    }
    let path = out_dir.join(EXPERIMENT_FILE);
    fs::write(&path, experiment_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    write_plots(&rows, &out_dir.join("plots"))?;
    Ok(rows)
}

fn series_by_scheme(rows: &[ExperimentRow], y: impl Fn(&ExperimentRow) -> f64) -> Vec<Series> {
    let mut schemes: Vec<Scheme> = rows.iter().map(|r| r.scheme).collect();
    schemes.dedup();
    schemes
        .into_iter()
        .map(|s| Series {
            name: s.as_str().to_string(),
            points: rows
                .iter()
                .filter(|r| r.scheme == s)
                .map(|r| (r.snr_db, y(r)))
                .collect(),
        })
        .collect()
}

/// Quality-vs-SNR line plots plus bits and delay bar charts.
pub fn write_plots(rows: &[ExperimentRow], dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let snr = "SNR (dB)";
    line_plot(
        &dir.join("psnr.png"),
        "PSNR vs SNR",
        snr,
        "PSNR (dB)",
        &series_by_scheme(rows, |r| r.mean_psnr.db()),
    )?;
    line_plot(
        &dir.join("ms_ssim.png"),
        "MS-SSIM vs SNR",
        snr,
        "MS-SSIM",
        &series_by_scheme(rows, |r| r.mean_ms_ssim),
    )?;
    line_plot(
        &dir.join("perceptual.png"),
        "Perceptual loss vs SNR",
        snr,
        "perceptual",
        &series_by_scheme(rows, |r| r.mean_perceptual),
    )?;
    let label = |r: &ExperimentRow| format!("{}@{}dB", r.scheme.as_str(), r.snr_db);
    let bits: Vec<(String, f64)> = rows.iter().map(|r| (label(r), r.total_bits as f64)).collect();
    bar_plot(&dir.join("bits.png"), "Transmitted bits", "bits", &bits)?;
    let delay: Vec<(String, f64)> = rows.iter().map(|r| (label(r), r.total_delay_s)).collect();
    bar_plot(&dir.join("delay.png"), "Transmission delay", "seconds", &delay)
}

/// Writes a markdown summary of whatever results exist in `out_dir`.
pub fn write_report(out_dir: &Path) -> Result<String> {
    let mut md = String::from("# Run report\n\n");
    let summary = out_dir.join(SUMMARY_FILE);
    if let Ok(text) = fs::read_to_string(&summary) {
        md.push_str("## Transmission summary\n\n");
        md.push_str(&csv_to_markdown(&text));
        md.push('\n');
    }
    let exp = out_dir.join(EXPERIMENT_FILE);
    if let Ok(text) = fs::read_to_string(&exp) {
        md.push_str("## SNR sweep\n\n");
        md.push_str(&csv_to_markdown(&text));
        md.push('\n');
        let plots = out_dir.join("plots");
        if plots.is_dir() {
            md.push_str("Plots: `plots/psnr.png`, `plots/ms_ssim.png`, `plots/perceptual.png`, `plots/bits.png`, `plots/delay.png`.\n\n");
        }
    }
    if !summary.exists() && !exp.exists() {
        return Err(Error::Missing(format!(
            "no {SUMMARY_FILE} or {EXPERIMENT_FILE} in {}",
            out_dir.display()
        )));
    }
    md.push_str(
        "## Reference figures\n\nReduction above is measured against sending every frame at the long encoding. \
         The ~90% reduction relative to DeepJSCC-V is labelled paper-reported, external baseline: \
         it is quoted, never recomputed here.\n",
    );
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, &md).map_err(|e| Error::io(&path, e))?;
    Ok(md)
}

fn csv_to_markdown(csv: &str) -> String {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else {
        return String::new();
    };
    let cols = header.split(',').count();
    let mut md = format!("| {} |\n|{}\n", header.replace(',', " | "), " --- |".repeat(cols));
    for l in lines {
        let _ = writeln!(md, "| {} |", l.replace(',', " | "));
    }
    md
}
