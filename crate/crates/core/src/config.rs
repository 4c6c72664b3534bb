//! Run configuration: one JSON document driving every CLI subcommand.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ToyGenParams;
use crate::diffusion::ScheduleConfig;
use crate::error::{LddmError, Result};
use crate::nn::TrainConfig;
use crate::synthesis::PerImage;
use crate::video::Geometry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub videos_per_class: usize,
    /// Held-out real videos per class, used as metric references and seeds.
    pub holdout_per_class: usize,
    /// Still images per class, the conditioning pool for augmentation.
    pub image_pool_per_class: usize,
    /// Length of each generated raw video.
    pub raw_frames: usize,
    pub blob_size: f64,
    pub speed: f64,
    pub amplitude: f64,
    pub period: f64,
    pub noise_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub clip_len: usize,
    pub sampled: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { clip_len: 48, sampled: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSection {
    pub features: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    pub features: usize,
    pub time_dim: usize,
    #[serde(default = "two")]
    pub blocks: usize,
    pub train: TrainConfig,
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub features: usize,
    pub hidden: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    pub per_image: PerImage,
    /// Seed images drawn from the holdout set for the diversity metric.
    pub diversity_images: usize,
    pub diversity_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: Geometry,
    #[serde(default)]
    pub sampling: SamplingConfig,
    pub toy: ToyConfig,
    pub schedule: ScheduleConfig,
    pub autoencoder: AutoencoderSection,
    pub denoiser: DenoiserSection,
    pub classifier: ClassifierSection,
    pub synthesis: SynthesisSection,
    pub experiment: ExperimentSection,
    pub paths: PathsConfig,
}

pub const ENV_DATA_DIR: &str = "LDDM_DATA_DIR";
pub const ENV_CHECKPOINT_DIR: &str = "LDDM_CHECKPOINT_DIR";
pub const ENV_REPORT_DIR: &str = "LDDM_REPORT_DIR";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| LddmError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; relative paths resolve against its directory and
    /// the `LDDM_*_DIR` environment variables override the paths block.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LddmError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (field, var) in [
            (&mut c.paths.data_dir, ENV_DATA_DIR),
            (&mut c.paths.checkpoint_dir, ENV_CHECKPOINT_DIR),
            (&mut c.paths.report_dir, ENV_REPORT_DIR),
        ] {
            if let Some(v) = std::env::var_os(var) {
                *field = PathBuf::from(v);
            }
            if field.is_relative() {
                *field = base.join(&*field);
            }
        }
        Ok((c, sha256_hex(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: LddmError| LddmError::Config(e.to_string());
        self.geometry.validate().map_err(cfg)?;
        if self.geometry.channels % 2 != 0 {
            return Err(LddmError::Config("channel count must be even".into()));
        }
        let s = self.sampling;
        if s.sampled != self.geometry.frames || s.sampled == 0 || s.sampled > s.clip_len {
            return Err(LddmError::Config(format!(
                "sampling must yield {} frames from clips of at least that length",
                self.geometry.frames
            )));
        }
        self.schedule.build().map_err(cfg)?;
        for t in [&self.autoencoder.train, &self.denoiser.train, &self.classifier.train] {
            t.validate().map_err(cfg)?;
        }
        for (name, n) in [
            ("toy.videos_per_class", self.toy.videos_per_class),
            ("toy.holdout_per_class", self.toy.holdout_per_class),
            ("toy.image_pool_per_class", self.toy.image_pool_per_class),
            ("autoencoder.features", self.autoencoder.features),
            ("denoiser.features", self.denoiser.features),
            ("classifier.features", self.classifier.features),
            ("classifier.hidden", self.classifier.hidden),
        ] {
            if n == 0 {
                return Err(LddmError::Config(format!("{name} must be positive")));
            }
        }
        if self.toy.videos_per_class < 2 {
            return Err(LddmError::Config("toy.videos_per_class must be at least 2".into()));
        }
        if self.denoiser.time_dim < 2 {
            return Err(LddmError::Config("denoiser.time_dim must be at least 2".into()));
        }
        if self.synthesis.diversity_samples < 2 {
            return Err(LddmError::Config("synthesis.diversity_samples must be at least 2".into()));
        }
        if matches!(self.synthesis.per_image, PerImage::Fixed(0) | PerImage::Balanced { target: 0 }) {
            return Err(LddmError::Config("synthesis.per_image must be positive".into()));
        }
        if self.experiment.seeds.is_empty()
            || self.experiment.fractions.is_empty()
            || self.experiment.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0))
        {
            return Err(LddmError::Config(
                "experiment needs seeds and fractions inside (0, 1)".into(),
            ));
        }
        self.toy_params(0, 1).validate().map_err(cfg)?;
        Ok(())
    }

    /// Toy generator parameters for one of the generated subsets.
    pub fn toy_params(&self, seed: u64, videos_per_class: usize) -> ToyGenParams {
        ToyGenParams {
            videos_per_class,
            frames: self.toy.raw_frames,
            height: self.geometry.height,
            width: self.geometry.width,
            channels: self.geometry.channels,
            class0_motion: Default::default(),
            class1_motion: Default::default(),
            blob_size: self.toy.blob_size,
            speed: self.toy.speed,
            amplitude: self.toy.amplitude,
            period: self.toy.period,
            noise_std: self.toy.noise_std,
            seed,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
