//! Run configuration: one TOML document with strict schema, overridable by
//! command-line flags and `NTSCC_*` environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::channel::ChannelConfig;
use crate::dataset::{Dataset, EVAL_MULTIPLE};
use crate::error::{Error, Result};
use crate::training::TrainConfig;
use crate::transform::ArchConfig;

/// Default operating point (SQI λ, bandwidth factor η, CQI ν).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateControl {
    pub lambda: f64,
    pub eta: f64,
    pub snr_db: f64,
}

impl Default for RateControl {
    fn default() -> Self {
        RateControl {
            lambda: 0.72,
            eta: 0.2,
            snr_db: 10.0,
        }
    }
}

/// Procedural stand-in corpus, used when no image directory is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            images: 200,
            height: 96,
            width: 96,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

impl DataConfig {
    pub fn train_set(&self) -> Result<Dataset> {
        match (&self.train_dir, &self.synthetic) {
            (Some(d), _) => Dataset::from_dir(d),
            (None, Some(s)) => Ok(Dataset::synthetic(s.images, s.height, s.width, s.seed)),
            (None, None) => Err(Error::Config(
                "no training data: set data.train_dir or data.synthetic".into(),
            )),
        }
    }

    /// Evaluation images, centre-cropped to multiples of 64.
    pub fn eval_set(&self) -> Result<Dataset> {
        let d = match (&self.eval_dir, &self.synthetic) {
            (Some(d), _) => Dataset::from_dir(d)?,
            (None, Some(s)) => Dataset::synthetic(
                s.images.clamp(1, 24),
                s.height.max(EVAL_MULTIPLE),
                s.width.max(EVAL_MULTIPLE),
                s.seed ^ 0xE7A1,
            ),
            (None, None) => {
                return Err(Error::Config(
                    "no evaluation data: set data.eval_dir or data.synthetic".into(),
                ))
            }
        };
        d.eval_cropped(EVAL_MULTIPLE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub channel: ChannelConfig,
    pub adapt: AdaptConfig,
    pub rate: RateControl,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            channel: ChannelConfig::awgn(),
            adapt: AdaptConfig::default(),
            rate: RateControl::default(),
            data: DataConfig::default(),
        }
    }
}

/// Name of the resolved config written next to every run's outputs.
pub const RESOLVED_NAME: &str = "config.resolved.toml";

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.channel.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(self.rate.lambda > 0.0 && self.rate.eta > 0.0 && self.rate.snr_db.is_finite()) {
            return Err(Error::Config(
                "rate: lambda and eta must be positive, snr_db finite".into(),
            ));
        }
        Ok(())
    }

    /// Writes the resolved config into `dir` (created if needed).
    pub fn embed(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.arch = ArchConfig::toy();
        c.data.synthetic = Some(SyntheticData::default());
        let s = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&s).unwrap(), c);
        assert!(matches!(
            RunConfig::from_toml("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml("[arch]\nnope = 3").is_err());
        let partial = RunConfig::from_toml("seed = 5\n[rate]\nlambda = 0.18").unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.rate.lambda, 0.18);
        assert_eq!(partial.rate.eta, RateControl::default().eta);
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let c = RunConfig::default();
        assert!(matches!(c.data.train_set(), Err(Error::Config(_))));
        let d = DataConfig {
            train_dir: Some("/nonexistent/ntscc".into()),
            ..DataConfig::default()
        };
        assert!(d.train_set().is_err());
    }

    #[test]
    fn embedded_config_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::default();
        let p = c.embed(dir.path()).unwrap();
        assert_eq!(RunConfig::load(p).unwrap(), c);
    }
}
