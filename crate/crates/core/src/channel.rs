//! Modulation, noisy channel, equalization.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kan::SemanticEncoding;
use crate::tape::{Graph, Var, ZERO_SLOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Fading {
    Awgn,
    RayleighFlat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    /// Receive SNR in dB; `+inf` disables noise.
    pub snr_db: f64,
    pub fading: Fading,
    pub bandwidth_hz: f64,
    pub bits_per_symbol: u32,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            snr_db: 10.0,
            fading: Fading::Awgn,
            bandwidth_hz: 1000.0,
            bits_per_symbol: 32,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "bandwidth {} must be positive",
                self.bandwidth_hz
            )));
        }
        if self.bits_per_symbol == 0 {
            return Err(Error::InvalidInput("bits_per_symbol must be positive".into()));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidInput(format!("invalid SNR {}", self.snr_db)));
        }
        Ok(())
    }

    pub fn noise_off(&self) -> bool {
        self.snr_db == f64::INFINITY
    }

    /// Same channel at a different SNR.
    pub fn with_snr(&self, snr_db: f64) -> Self {
        ChannelConfig { snr_db, ..*self }
    }
}

/// Per-frame seed: `seed ⊕ frame_index`.
pub fn frame_seed(seed: u64, frame_index: usize) -> u64 {
    seed ^ frame_index as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSymbolVector {
    pub symbols: Vec<Complex64>,
}

impl ComplexSymbolVector {
    /// Mean `|symbol|²`; zero for an empty vector.
    pub fn power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Modulated codeword plus what the receiver needs to undo it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modulated {
    pub symbols: ComplexSymbolVector,
    /// Multiplier applied to the real values; 0 marks an all-zero codeword.
    pub scale: f64,
    /// Real length before pairing.
    pub len: usize,
}

/// Symbols needed for `len` real values.
pub fn symbol_count(len: usize) -> usize {
    len.div_ceil(2)
}

/// Pairs reals into complex symbols and normalizes to unit average power.
pub fn modulate(e: &SemanticEncoding) -> Modulated {
    let n_c = symbol_count(e.values.len());
    let energy: f64 = e.values.iter().map(|v| v * v).sum();
    let scale = if energy > 0.0 {
        (n_c as f64 / energy).sqrt()
    } else {
        0.0
    };
    let symbols = (0..n_c)
        .map(|j| {
            let re = e.values[2 * j];
            let im = e.values.get(2 * j + 1).copied().unwrap_or(0.0);
            Complex64::new(re * scale, im * scale)
        })
        .collect();
    Modulated {
        symbols: ComplexSymbolVector { symbols },
        scale,
        len: e.values.len(),
    }
}

/// Noise variance `σ² = P / 10^(snr/10)`, zero for `snr = +inf`.
pub fn snr_to_noise_power(snr_db: f64, signal_power: f64) -> Result<f64> {
    if !(signal_power > 0.0) || !signal_power.is_finite() {
        return Err(Error::InvalidInput(format!(
            "signal power {signal_power} must be positive"
        )));
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidInput("SNR is NaN".into()));
    }
    Ok(signal_power / 10f64.powf(snr_db / 10.0))
}

/// Channel gain and noise of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub h: Complex64,
    pub noise: Vec<Complex64>,
}

impl ChannelRealization {
    /// Unit gain, no noise.
    pub fn ideal(n_c: usize) -> Self {
        ChannelRealization {
            h: Complex64::new(1.0, 0.0),
            noise: vec![Complex64::new(0.0, 0.0); n_c],
        }
    }

    /// Draws the gain (Rayleigh only) and then `n_c` noise samples.
    pub fn draw<R: Rng>(n_c: usize, fading: Fading, snr_db: f64, rng: &mut R) -> Result<Self> {
        let h = match fading {
            Fading::Awgn => Complex64::new(1.0, 0.0),
            Fading::RayleighFlat => complex_gaussian(rng, 1.0),
        };
        let var = snr_to_noise_power(snr_db, 1.0)?;
        let noise = if var == 0.0 {
            vec![Complex64::new(0.0, 0.0); n_c]
        } else {
            (0..n_c).map(|_| complex_gaussian(rng, var)).collect()
        };
        Ok(ChannelRealization { h, noise })
    }
}

/// Circularly symmetric complex Gaussian with total variance `var`.
fn complex_gaussian<R: Rng>(rng: &mut R, var: f64) -> Complex64 {
    let sd = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * sd, im * sd)
}

/// `y = H·c + N` for one frame.
pub fn transmit<R: Rng>(
    c: &ComplexSymbolVector,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<(ComplexSymbolVector, ChannelRealization)> {
    cfg.validate()?;
    let p = c.power();
    if p != 0.0 && (p - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("symbols not power-normalized (power {p})")));
    }
    let real = ChannelRealization::draw(c.len(), cfg.fading, cfg.snr_db, rng)?;
    let y = apply(c, &real);
    Ok((y, real))
}

/// Applies a recorded realization.
pub fn apply(c: &ComplexSymbolVector, real: &ChannelRealization) -> ComplexSymbolVector {
    ComplexSymbolVector {
        symbols: c
            .symbols
            .iter()
            .zip(&real.noise)
            .map(|(&s, &n)| real.h * s + n)
            .collect(),
    }
}

/// `ĉ = y / H`, then undoes scaling and pairing.
pub fn equalize_demodulate(
    y: &ComplexSymbolVector,
    real: &ChannelRealization,
    scale: f64,
    len: usize,
) -> Result<Vec<f64>> {
    if real.h.norm_sqr() == 0.0 {
        return Err(Error::Outage);
    }
    if y.len() != symbol_count(len) {
        return Err(Error::shape("received symbols", symbol_count(len), y.len()));
    }
    if scale == 0.0 {
        return Ok(vec![0.0; len]);
    }
    let mut out = Vec::with_capacity(2 * y.len());
    for &s in &y.symbols {
        let z = s / real.h / scale;
        out.push(z.re);
        out.push(z.im);
    }
    out.truncate(len);
    Ok(out)
}

/// Differentiable channel on a `1 × L` node: normalize, fade, add noise,
/// equalize and unscale, returning the received `1 × L` estimate.
pub fn channel_graph(g: &mut Graph, e: Var, real: &ChannelRealization) -> Result<Var> {
    if real.h.norm_sqr() == 0.0 {
        return Err(Error::Outage);
    }
    let len = g.shape(e).0 * g.shape(e).1;
    let n_c = symbol_count(len);
    if real.noise.len() != n_c {
        return Err(Error::shape("noise draw", n_c, real.noise.len()));
    }
    let padded = if len % 2 == 1 {
        let idx: Vec<usize> = (0..len).chain(std::iter::once(ZERO_SLOT)).collect();
        g.take(e, idx.into(), 1, len + 1)
    } else {
        g.reshape(e, 1, len)
    };
    let energy = g.sum_sq(padded);
    let s = g.rsqrt_scaled(energy, n_c as f64);
    let c = g.scale_by(padded, s);
    let faded = g.complex_scale(c, real.h);
    let noise: Vec<f64> = real.noise.iter().flat_map(|z| [z.re, z.im]).collect();
    let noise = g.constant(1, 2 * n_c, noise);
    let y = g.add(faded, noise);
    let c_hat = g.complex_scale(y, real.h.inv());
    let e_hat = g.div_by(c_hat, s);
    Ok(if len % 2 == 1 {
        g.take_cols(e_hat, 0, len)
    } else {
        e_hat
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kan::CrClass;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc(values: Vec<f64>) -> SemanticEncoding {
        SemanticEncoding {
            values,
            cr: CrClass::DynamicLowCr,
            frame_index: 1,
        }
    }

    #[test]
    fn modulation_examples() {
        let m = modulate(&enc(vec![1.0, 0.0, 0.0, 1.0]));
        assert_eq!(
            m.symbols.symbols,
            vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)]
        );
        assert!((m.symbols.power() - 1.0).abs() < 1e-12);
        assert_eq!(modulate(&enc(vec![1.0; 5])).symbols.len(), 3);
        let z = modulate(&enc(vec![0.0; 4]));
        assert_eq!(z.scale, 0.0);
        assert!(z.symbols.symbols.iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn noise_power_examples() {
        assert_eq!(snr_to_noise_power(0.0, 1.0).unwrap(), 1.0);
        assert!((snr_to_noise_power(10.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((snr_to_noise_power(5.0, 1.0).unwrap() - 0.316_227_766_016_837_94).abs() < 1e-12);
        assert_eq!(snr_to_noise_power(f64::INFINITY, 1.0).unwrap(), 0.0);
        assert!(snr_to_noise_power(0.0, 0.0).is_err());
    }

    #[test]
    fn noiseless_awgn_is_exact() {
        let m = modulate(&enc(vec![0.3, -1.2, 2.0]));
        let cfg = ChannelConfig {
            snr_db: f64::INFINITY,
            ..Default::default()
        };
        let (y, real) = transmit(&m.symbols, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(y, m.symbols);
        let back = equalize_demodulate(&y, &real, m.scale, m.len).unwrap();
        for (a, b) in back.iter().zip([0.3, -1.2, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outage_on_zero_gain() {
        let m = modulate(&enc(vec![1.0, 2.0]));
        let real = ChannelRealization {
            h: Complex64::new(0.0, 0.0),
            noise: vec![Complex64::new(0.0, 0.0)],
        };
        assert!(matches!(
            equalize_demodulate(&m.symbols, &real, m.scale, 2),
            Err(Error::Outage)
        ));
    }

    #[test]
    fn graph_channel_matches_plain_path() {
        let values = vec![0.5, -0.25, 1.5, 0.75, -2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = modulate(&enc(values.clone()));
        let real = ChannelRealization::draw(3, Fading::RayleighFlat, 5.0, &mut rng).unwrap();
        let y = apply(&m.symbols, &real);
        let plain = equalize_demodulate(&y, &real, m.scale, 5).unwrap();
        let mut g = Graph::new();
        let e = g.constant(1, 5, values);
        let out = channel_graph(&mut g, e, &real).unwrap();
        for (a, b) in g.value(out).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
