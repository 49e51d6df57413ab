//! Per-frame transmission records, run summaries, and their file formats.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kan::{CrClass, CrLengths};
use crate::metrics::{mean_psnr, objective_from_mse, Psnr};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmissionRecord {
    pub frame_index: usize,
    pub cr: CrClass,
    /// 1 for the short (static) encoding, else 0.
    pub r: u8,
    pub eta: f64,
    pub symbols: usize,
    pub bits: u64,
    pub rate_bps: f64,
    pub delay_s: f64,
    pub psnr: Psnr,
    pub ms_ssim: f64,
    pub perceptual: f64,
    pub mse: f64,
    pub snr_db: f64,
}

impl TransmissionRecord {
    /// Checks internal consistency against the configured lengths and symbol width.
    pub fn validate(&self, lengths: &CrLengths, bits_per_symbol: u32) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidInput(format!("record {}: {m}", self.frame_index)));
        if self.r != self.cr.flag() {
            return fail(format!("r = {} disagrees with {}", self.r, self.cr.as_str()));
        }
        if self.symbols != lengths.length(self.cr) {
            return fail(format!("{} symbols for {}", self.symbols, self.cr.as_str()));
        }
        if self.bits != self.symbols as u64 * bits_per_symbol as u64 {
            return fail(format!("bits {} != symbols x {bits_per_symbol}", self.bits));
        }
        if self.delay_s != self.bits as f64 / self.rate_bps {
            return fail("delay is not bits / rate".into());
        }
        let finite = [
            self.eta,
            self.rate_bps,
            self.delay_s,
            self.ms_ssim,
            self.perceptual,
            self.mse,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return fail("non-finite field".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub frames: usize,
    pub static_frames: usize,
    pub dynamic_frames: usize,
    pub total_symbols: u64,
    pub total_bits: u64,
    pub total_delay_s: f64,
    pub mean_psnr: Psnr,
    pub mean_ms_ssim: f64,
    pub mean_perceptual: f64,
    pub mean_mse: f64,
    pub objective: f64,
    pub zeta: f64,
}

impl Summary {
    /// Totals and means over `records`, summed in record order.
    pub fn from_records(records: &[TransmissionRecord], zeta: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput("no records to summarize".into()));
        }
        let n = records.len() as f64;
        let static_frames = records.iter().filter(|r| r.cr == CrClass::StaticHighCr).count();
        let total_delay_s: f64 = records.iter().map(|r| r.delay_s).sum();
        let errors: Vec<f64> = records.iter().map(|r| r.mse).collect();
        let flags: Vec<u8> = records.iter().map(|r| r.r).collect();
        Ok(Summary {
            frames: records.len(),
            static_frames,
            dynamic_frames: records.len() - static_frames,
            total_symbols: records.iter().map(|r| r.symbols as u64).sum(),
            total_bits: records.iter().map(|r| r.bits).sum(),
            total_delay_s,
            mean_psnr: mean_psnr(records.iter().map(|r| r.psnr)),
            mean_ms_ssim: records.iter().map(|r| r.ms_ssim).sum::<f64>() / n,
            mean_perceptual: records.iter().map(|r| r.perceptual).sum::<f64>() / n,
            mean_mse: errors.iter().sum::<f64>() / n,
            objective: objective_from_mse(&errors, &flags, total_delay_s, zeta)?,
            zeta,
        })
    }

    /// Exact equality of every total and mean with a recomputation from `records`.
    pub fn check_closure(&self, records: &[TransmissionRecord]) -> Result<()> {
        let fresh = Summary::from_records(records, self.zeta)?;
        if &fresh != self {
            return Err(Error::InvalidInput(format!(
                "summary does not close over records: stored {self:?}, recomputed {fresh:?}"
            )));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "frames,static_frames,dynamic_frames,total_symbols,total_bits,total_delay_s,mean_psnr,mean_ms_ssim,mean_perceptual,mean_mse,objective,zeta"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.frames,
            self.static_frames,
            self.dynamic_frames,
            self.total_symbols,
            self.total_bits,
            self.total_delay_s,
            self.mean_psnr,
            self.mean_ms_ssim,
            self.mean_perceptual,
            self.mean_mse,
            self.objective,
            self.zeta
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Record(TransmissionRecord),
    Summary(Summary),
}

/// Writes one JSON object per record, then the summary line if present.
pub fn save_records(path: &Path, records: &[TransmissionRecord], summary: Option<&Summary>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let lines = records
        .iter()
        .cloned()
        .map(Line::Record)
        .chain(summary.cloned().map(Line::Summary));
    for line in lines {
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_records(path: &Path) -> Result<(Vec<TransmissionRecord>, Option<Summary>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut summary = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if summary.is_some() {
            return Err(Error::InvalidInput(format!(
                "{}: data after summary line",
                path.display()
            )));
        }
        match serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{} line {}: {e}", path.display(), i + 1)))?
        {
            Line::Record(r) => records.push(r),
            Line::Summary(s) => summary = Some(s),
        }
    }
    Ok((records, summary))
}

pub fn write_summary_csv(path: &Path, summary: &Summary) -> Result<()> {
    let text = format!("{}\n{}\n", Summary::csv_header(), summary.csv_row());
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
