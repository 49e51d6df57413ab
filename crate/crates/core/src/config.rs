//! Run configuration loaded from TOML. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::codec::ModelConfig;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_ZETA;
use crate::osms::{BaselineConfig, DEFAULT_EPSILON};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Image directory or raw frame dump.
    pub frames: Option<PathBuf>,
    /// Run output directory.
    pub output: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensingConfig {
    pub epsilon: f64,
    pub baseline: BaselineConfig,
}

impl Default for SensingConfig {
    fn default() -> Self {
        SensingConfig {
            epsilon: DEFAULT_EPSILON,
            baseline: BaselineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub zeta: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { zeta: DEFAULT_ZETA }
    }
}

/// Comparison schemes. Ablations are presets over one code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Sensing-driven CR selection with the distilled student.
    Sccvs,
    /// Every frame at the long encoding.
    NoOsms,
    /// Sensing-driven, with the student trained without distillation.
    NoKd,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Sccvs => "sccvs",
            Scheme::NoOsms => "no_osms",
            Scheme::NoKd => "no_kd",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sccvs" => Ok(Scheme::Sccvs),
            "no_osms" => Ok(Scheme::NoOsms),
            "no_kd" => Ok(Scheme::NoKd),
            _ => Err(Error::Config(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub snr_grid: Vec<f64>,
    pub schemes: Vec<Scheme>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            snr_grid: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            schemes: vec![Scheme::Sccvs, Scheme::NoOsms],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Overrides the source frame rate when it cannot be read from the input.
    pub fps_source: Option<f64>,
    pub sample_one_fps: bool,
    /// Target static:dynamic ratio, e.g. `[6, 4]`; frames are duplicated to reach it.
    pub static_ratio: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub channel: ChannelConfig,
    pub sensing: SensingConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies a global seed to every stochastic component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.channel.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.model.validate().map_err(cfg_err)?;
        self.channel.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        if !(self.sensing.epsilon > 0.0 && self.sensing.epsilon.is_finite()) {
            return Err(Error::Config("sensing.epsilon must be positive".into()));
        }
        let b = &self.sensing.baseline;
        if b.window == 0 || !(b.threshold >= 0.0) || b.min_area == 0 {
            return Err(Error::Config(
                "sensing.baseline needs window >= 1, threshold >= 0, min_area >= 1".into(),
            ));
        }
        if !(self.objective.zeta >= 0.0 && self.objective.zeta.is_finite()) {
            return Err(Error::Config("objective.zeta must be non-negative".into()));
        }
        if self
            .experiment
            .snr_grid
            .iter()
            .any(|s| s.is_nan() || *s == f64::NEG_INFINITY)
        {
            return Err(Error::Config("experiment.snr_grid has an invalid value".into()));
        }
        if self.experiment.schemes.is_empty() {
            return Err(Error::Config("experiment.schemes is empty".into()));
        }
        if let Some(fps) = self.data.fps_source {
            if !(fps > 0.0) {
                return Err(Error::Config("data.fps_source must be positive".into()));
            }
        }
        if let Some([s, d]) = self.data.static_ratio {
            if !(s >= 0.0 && d > 0.0 && s.is_finite() && d.is_finite()) {
                return Err(Error::Config(
                    "data.static_ratio must be [static >= 0, dynamic > 0]".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg =
            RunConfig::from_toml("[channel]\nsnr_db = 5.0\n[experiment]\nschemes = [\"sccvs\", \"no_kd\"]\n").unwrap();
        assert_eq!(cfg.channel.snr_db, 5.0);
        assert_eq!(cfg.model.lengths.dynamic_low, 256);
        assert_eq!(cfg.experiment.schemes, vec![Scheme::Sccvs, Scheme::NoKd]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml("[channel]\nsnr = 5.0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_toml("[nope]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[train]\nepochs = 0\n").is_err());
        assert!(RunConfig::from_toml("[sensing]\nepsilon = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[model.lengths]\nstatic_high = 300\ndynamic_low = 256\n").is_err());
    }

    #[test]
    fn seed_override() {
        let cfg = RunConfig::default().with_seed(42);
        assert_eq!((cfg.channel.seed, cfg.train.seed), (42, 42));
    }
}
