//! Reconstruction quality, rate and delay accounting, and the system objective.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::frames::Frame;
use crate::osms::DetectionSet;
use crate::tape::Param;

static SCALE_WARNED: AtomicBool = AtomicBool::new(false);

/// MS-SSIM runs once per frame; the size fallback is logged at warn level only
/// the first time.
fn warn_once(msg: fmt::Arguments) {
    if SCALE_WARNED.swap(true, Ordering::Relaxed) {
        log::debug!("{msg}");
    } else {
        log::warn!("{msg}");
    }
}

/// Default weight of the delay term in the objective.
pub const DEFAULT_ZETA: f64 = 0.01;

fn check_same(x: &Frame, y: &Frame) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "frame pair",
            format!("{:?}", x.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    Ok(())
}

/// Mean squared error over every pixel.
pub fn mse(x: &Frame, y: &Frame) -> Result<f64> {
    check_same(x, y)?;
    Ok(x.pixels
        .iter()
        .zip(&y.pixels)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.len() as f64)
}

/// Peak signal-to-noise ratio; [`Psnr::Identical`] when the error is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Identical,
}

impl Psnr {
    /// dB value, `+inf` for identical inputs.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Identical => f64::INFINITY,
        }
    }

    pub fn from_db(v: f64) -> Self {
        if v == f64::INFINITY {
            Psnr::Identical
        } else {
            Psnr::Finite(v)
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Identical => f.write_str("inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Identical => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Text(t) if t == "inf" => Ok(Psnr::Identical),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR {t:?}"))),
        }
    }
}

/// `10·log10(max²/mse)`.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> Result<Psnr> {
    if !(max_val > 0.0) {
        return Err(Error::InvalidInput(format!("max value {max_val} must be positive")));
    }
    if !(mse >= 0.0) {
        return Err(Error::InvalidInput(format!("MSE {mse} must be non-negative")));
    }
    if mse == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Finite(10.0 * (max_val * max_val / mse).log10()))
}

pub fn psnr(x: &Frame, y: &Frame, max_val: f64) -> Result<Psnr> {
    psnr_from_mse(mse(x, y)?, max_val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsSsimConfig {
    pub weights: Vec<f64>,
    pub k1: f64,
    pub k2: f64,
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range of pixel values.
    pub data_range: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            weights: vec![0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
            k1: 0.01,
            k2: 0.03,
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
        }
    }
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut t: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| taps[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of one plane pair with Gaussian-weighted local statistics.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64], c1: f64, c2: f64) -> f64 {
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, h, w, taps);
    let (mu_b, _, _) = filter_valid(b, h, w, taps);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, taps);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, taps);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

fn downsample(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = 0.25
                * (img[2 * y * w + 2 * x]
                    + img[2 * y * w + 2 * x + 1]
                    + img[(2 * y + 1) * w + 2 * x]
                    + img[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM: `Π_j SSIM_j^{α_j}` over dyadic scales.
///
/// Scales whose side would drop below the window are dropped and the
/// remaining weights renormalized. Each scale's SSIM is averaged over
/// channels and clamped to `[0, 1]` before exponentiation.
pub fn ms_ssim_with(x: &Frame, y: &Frame, cfg: &MsSsimConfig) -> Result<f64> {
    check_same(x, y)?;
    if cfg.weights.is_empty() || cfg.window == 0 {
        return Err(Error::InvalidInput(
            "MS-SSIM needs at least one scale and a window".into(),
        ));
    }
    let min_side = x.height.min(x.width);
    let mut window = cfg.window;
    if min_side < window {
        window = if min_side % 2 == 1 { min_side } else { min_side - 1 };
        warn_once(format_args!(
            "image side {min_side} below MS-SSIM window {}; using window {window}",
            cfg.window
        ));
    }
    let mut scales = 1;
    while scales < cfg.weights.len() && (min_side >> scales) >= window {
        scales += 1;
    }
    if scales < cfg.weights.len() {
        warn_once(format_args!(
            "image {}x{} too small for {} MS-SSIM scales; using {scales}",
            x.height,
            x.width,
            cfg.weights.len()
        ));
    }
    let wsum: f64 = cfg.weights[..scales].iter().sum();
    let taps = gaussian_taps(window, cfg.sigma);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let c = x.channels;
    let mut planes: Vec<(Vec<f64>, Vec<f64>)> = (0..c)
        .map(|ch| {
            let p = |f: &Frame| {
                f.pixels
                    .iter()
                    .skip(ch)
                    .step_by(c)
                    .map(|&v| v as f64)
                    .collect::<Vec<_>>()
            };
            (p(x), p(y))
        })
        .collect();
    let (mut h, mut w) = (x.height, x.width);
    let mut score = 1.0;
    for j in 0..scales {
        let s: f64 = planes
            .iter()
            .map(|(a, b)| ssim_plane(a, b, h, w, &taps, c1, c2))
            .sum::<f64>()
            / c as f64;
        score *= s.clamp(0.0, 1.0).powf(cfg.weights[j] / wsum);
        if j + 1 < scales {
            let mut nh = 0;
            let mut nw = 0;
            for (a, b) in planes.iter_mut() {
                let (da, hh, ww) = downsample(a, h, w);
                let (db, _, _) = downsample(b, h, w);
                *a = da;
                *b = db;
                nh = hh;
                nw = ww;
            }
            h = nh;
            w = nw;
        }
    }
    Ok(score.clamp(0.0, 1.0))
}

pub fn ms_ssim(x: &Frame, y: &Frame) -> Result<f64> {
    ms_ssim_with(x, y, &MsSsimConfig::default())
}

/// Maps a frame to a feature vector for perceptual comparison.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn features(&self, frame: &Frame) -> Result<Vec<f64>>;
}

/// One 3×3 zero-padded convolution followed by ReLU.
#[derive(Debug, Clone)]
struct ConvLayer {
    c_in: usize,
    c_out: usize,
    stride: usize,
    /// `c_out × (c_in·9)`.
    weight: Param,
}

impl ConvLayer {
    fn apply(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let mut out = vec![0.0; oh * ow * self.c_out];
        for oy in 0..oh {
            for ox in 0..ow {
                let (cy, cx) = ((oy * self.stride) as isize, (ox * self.stride) as isize);
                for o in 0..self.c_out {
                    let wrow = &self.weight.data[o * self.c_in * 9..(o + 1) * self.c_in * 9];
                    let mut acc = 0.0;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (y, xx) = (cy + dy, cx + dx);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let base = (y as usize * w + xx as usize) * self.c_in;
                            let tap = ((dy + 1) * 3 + dx + 1) as usize;
                            for i in 0..self.c_in {
                                acc += wrow[i * 9 + tap] * x[base + i];
                            }
                        }
                    }
                    out[(oy * ow + ox) * self.c_out + o] = acc.max(0.0);
                }
            }
        }
        (out, oh, ow)
    }
}

/// Frozen random 3-layer convolutional stack.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    layers: Vec<ConvLayer>,
    channels: usize,
}

/// Seed of the default perceptual extractor.
pub const PERCEPTUAL_SEED: u64 = 1234;

impl RandomConvExtractor {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(channels, 8, 1), (8, 16, 2), (16, 16, 2)];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(c_in, c_out, stride))| ConvLayer {
                c_in,
                c_out,
                stride,
                weight: Param::normal(
                    format!("perceptual.{i}"),
                    c_out,
                    c_in * 9,
                    (2.0 / (c_in * 9) as f64).sqrt(),
                    &mut rng,
                ),
            })
            .collect();
        RandomConvExtractor { layers, channels }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> &str {
        "random-conv3"
    }

    fn features(&self, frame: &Frame) -> Result<Vec<f64>> {
        if frame.channels != self.channels {
            return Err(Error::shape("perceptual input channels", self.channels, frame.channels));
        }
        let (mut h, mut w) = (frame.height, frame.width);
        let mut x = frame.to_f64();
        for l in &self.layers {
            let (y, oh, ow) = l.apply(&x, h, w);
            x = y;
            h = oh;
            w = ow;
        }
        Ok(x)
    }
}

/// MSE between extractor features.
pub fn perceptual_loss(x: &Frame, y: &Frame, extractor: Option<&dyn FeatureExtractor>) -> Result<f64> {
    check_same(x, y)?;
    let ex = extractor.ok_or_else(|| Error::Missing("no perceptual extractor registered".into()))?;
    let (fx, fy) = (ex.features(x)?, ex.features(y)?);
    if fx.len() != fy.len() || fx.is_empty() {
        return Err(Error::shape("perceptual features", fx.len(), fy.len()));
    }
    Ok(fx.iter().zip(&fy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / fx.len() as f64)
}

/// `1 − mean IoU` after greedy matching by descending IoU, ties to lower indices.
/// Unmatched boxes count as IoU 0; two empty sets give 0.
pub fn iou_loss(a: &DetectionSet, b: &DetectionSet) -> f64 {
    let (na, nb) = (a.boxes.len(), b.boxes.len());
    if na == 0 && nb == 0 {
        return 0.0;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(na * nb);
    for (i, ba) in a.boxes.iter().enumerate() {
        for (j, bb) in b.boxes.iter().enumerate() {
            pairs.push((ba.iou(bb), i, j));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let (mut used_a, mut used_b) = (vec![false; na], vec![false; nb]);
    let mut total = 0.0;
    for (iou, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            total += iou;
        }
    }
    (1.0 - total / na.max(nb) as f64).clamp(0.0, 1.0)
}

/// Shannon rate `B·log2(1 + 10^(snr/10))` in bits per second.
pub fn transmission_rate(bandwidth_hz: f64, snr_db: f64) -> Result<f64> {
    if !(bandwidth_hz > 0.0) {
        return Err(Error::InvalidInput(format!(
            "bandwidth {bandwidth_hz} must be positive"
        )));
    }
    Ok(bandwidth_hz * (1.0 + 10f64.powf(snr_db / 10.0)).log2())
}

/// Bits of one transmitted codeword of `length` symbols.
pub fn frame_bits(length: usize, bits_per_symbol: u32) -> u64 {
    length as u64 * bits_per_symbol as u64
}

pub fn frame_delay(bits: u64, rate: f64) -> Result<f64> {
    if !(rate > 0.0) {
        return Err(Error::InvalidInput(format!("rate {rate} must be positive")));
    }
    Ok(bits as f64 / rate)
}

pub fn total_delay(delays: &[f64]) -> f64 {
    delays.iter().sum()
}

/// Per-frame bits and delays at one rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayLedger {
    pub rate: f64,
    pub bits: Vec<u64>,
    pub delays: Vec<f64>,
    pub total: f64,
}

impl DelayLedger {
    pub fn new(rate: f64, bits: Vec<u64>) -> Result<Self> {
        let delays = bits.iter().map(|&b| frame_delay(b, rate)).collect::<Result<Vec<_>>>()?;
        let total = total_delay(&delays);
        Ok(DelayLedger {
            rate,
            bits,
            delays,
            total,
        })
    }
}

/// `(1/V)·Σ MSE(x_i, x̂_i)·(1 − r_i) + ζ·T`.
pub fn objective_score(frames: &[Frame], recons: &[Frame], flags: &[u8], total_delay: f64, zeta: f64) -> Result<f64> {
    if frames.len() != recons.len() || frames.len() != flags.len() {
        return Err(Error::shape(
            "objective inputs",
            frames.len(),
            recons.len().min(flags.len()),
        ));
    }
    let errors = frames
        .iter()
        .zip(recons)
        .map(|(x, y)| mse(x, y))
        .collect::<Result<Vec<_>>>()?;
    objective_from_mse(&errors, flags, total_delay, zeta)
}

/// [`objective_score`] from precomputed per-frame MSE values.
pub fn objective_from_mse(errors: &[f64], flags: &[u8], total_delay: f64, zeta: f64) -> Result<f64> {
    if errors.len() != flags.len() {
        return Err(Error::shape("objective flags", errors.len(), flags.len()));
    }
    if errors.is_empty() {
        return Err(Error::InvalidInput("objective needs at least one frame".into()));
    }
    if !(zeta >= 0.0) {
        return Err(Error::InvalidInput(format!("zeta {zeta} must be non-negative")));
    }
    let distortion: f64 = errors
        .iter()
        .zip(flags)
        .map(|(&m, &r)| m * (1.0 - r as f64))
        .sum::<f64>()
        / errors.len() as f64;
    Ok(distortion + zeta * total_delay)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameQuality {
    pub frame_index: usize,
    pub mse: f64,
    pub psnr: Psnr,
    pub ms_ssim: f64,
    pub perceptual: f64,
}

/// Per-frame quality plus means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub frames: Vec<FrameQuality>,
    pub mean_psnr: Psnr,
    pub mean_ms_ssim: f64,
    pub mean_perceptual: f64,
    pub mean_mse: f64,
}

/// Mean PSNR; `Identical` if any frame is identical.
pub fn mean_psnr(values: impl IntoIterator<Item = Psnr>) -> Psnr {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        match v {
            Psnr::Identical => return Psnr::Identical,
            Psnr::Finite(x) => {
                sum += x;
                n += 1;
            }
        }
    }
    Psnr::Finite(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub fn frame_quality(x: &Frame, y: &Frame, extractor: &dyn FeatureExtractor) -> Result<FrameQuality> {
    let m = mse(x, y)?;
    Ok(FrameQuality {
        frame_index: x.index,
        mse: m,
        psnr: psnr_from_mse(m, 1.0)?,
        ms_ssim: ms_ssim(x, y)?,
        perceptual: perceptual_loss(x, y, Some(extractor))?,
    })
}

pub fn quality_report(
    originals: &[Frame],
    recons: &[Frame],
    extractor: &dyn FeatureExtractor,
) -> Result<QualityReport> {
    if originals.len() != recons.len() {
        return Err(Error::shape("quality report frames", originals.len(), recons.len()));
    }
    if originals.is_empty() {
        return Err(Error::InvalidInput("no frames to evaluate".into()));
    }
    let frames = originals
        .iter()
        .zip(recons)
        .map(|(x, y)| frame_quality(x, y, extractor))
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    Ok(QualityReport {
        mean_psnr: mean_psnr(frames.iter().map(|f| f.psnr)),
        mean_ms_ssim: frames.iter().map(|f| f.ms_ssim).sum::<f64>() / n,
        mean_perceptual: frames.iter().map(|f| f.perceptual).sum::<f64>() / n,
        mean_mse: frames.iter().map(|f| f.mse).sum::<f64>() / n,
        frames,
    })
}
