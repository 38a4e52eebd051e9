//! The run configuration file (TOML). Unknown keys are rejected and parse
//! errors name the offending key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PretrainAugment, Protocol, Task};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::metrics::MetricManifest;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Images used for pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainCorpus {
    /// Both training domains, pooled.
    Same,
    /// A flat folder of unrelated images (`pretrain.external_root`).
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub patch_size: usize,
    pub mask_prob: f64,
    pub corpus: PretrainCorpus,
    pub external_root: Option<PathBuf>,
    pub augment: PretrainAugment,
    /// 0: only at the end.
    pub checkpoint_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            batch_size: 8,
            lr: 1e-4,
            patch_size: 32,
            mask_prob: 0.4,
            corpus: PretrainCorpus::Same,
            external_root: None,
            augment: PretrainAugment::default(),
            checkpoint_every: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Folder with `trainA/ trainB/ testA/ testB/`.
    pub root: Option<PathBuf>,
    pub task: Task,
    /// Divides every protocol size (4 turns 256 crops into 64).
    pub size_scale: f64,
    /// Reject source images of unexpected size instead of resizing them.
    pub strict_sizes: bool,
    /// Fold `valA/ valB/` into the test split.
    pub merge_validation: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, task: Task::Square, size_scale: 1.0, strict_sizes: false, merge_validation: false }
    }
}

impl DataConfig {
    pub fn protocol(&self) -> Protocol {
        Protocol { task: self.task, size_scale: self.size_scale, strict: self.strict_sizes }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    /// Root of every random stream.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub metrics: MetricManifest,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            seed: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            metrics: MetricManifest::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner().message().trim()))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "format_version {} is not supported (expected {CONFIG_VERSION})",
                self.format_version
            )));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.discriminator.in_channels != self.generator.in_channels {
            return Err(Error::Config("generator and discriminator disagree on in_channels".into()));
        }
        self.loss.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        let d = &self.data;
        if !(d.size_scale.is_finite() && d.size_scale > 0.0) {
            return Err(Error::Config(format!("data.size_scale must be positive, got {}", d.size_scale)));
        }
        let crop = d.protocol().crop_size();
        let div = self.generator.divisor();
        if !crop.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "training crop {crop} (256 / data.size_scale) is not divisible by {div}"
            )));
        }
        if !self.metrics.eval_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "metrics.eval_size {} is not divisible by {div}",
                self.metrics.eval_size
            )));
        }
        let p = &self.pretrain;
        if p.total_steps == 0 || p.batch_size == 0 {
            return Err(Error::Config("pretrain.total_steps and pretrain.batch_size must be positive".into()));
        }
        if !(p.lr.is_finite() && p.lr > 0.0) {
            return Err(Error::Config(format!("pretrain.lr must be positive, got {}", p.lr)));
        }
        if p.patch_size == 0 || !crop.is_multiple_of(p.patch_size) {
            return Err(Error::Config(format!(
                "pretrain.patch_size {} does not tile the {crop}-pixel crop",
                p.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&p.mask_prob) {
            return Err(Error::Config(format!("pretrain.mask_prob must lie in [0, 1], got {}", p.mask_prob)));
        }
        if p.corpus == PretrainCorpus::External && p.external_root.is_none() {
            return Err(Error::Config("pretrain.corpus = \"external\" requires pretrain.external_root".into()));
        }
        let a = &p.augment;
        if !(a.rotation_degrees >= 0.0 && a.jitter >= 0.0 && a.jitter < 1.0) {
            return Err(Error::Config("pretrain.augment: rotation must be >= 0 and jitter in [0, 1)".into()));
        }
        Ok(())
    }

    /// Training-crop side after `size_scale`.
    pub fn image_size(&self) -> usize {
        self.data.protocol().crop_size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn documented_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.train.lr, c.train.batch_size, c.train.total_iters), (1e-4, 1, 1_000_000));
        assert_eq!((c.loss.lambda_gp, c.loss.gamma, c.loss.lambda_cyc, c.loss.lambda_idt), (0.1, 100.0, 10.0, 5.0));
        assert_eq!((c.pretrain.patch_size, c.pretrain.mask_prob), (32, 0.4));
        assert_eq!(c.generator.vit_blocks, 12);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::from_toml_str("[train]\nlr = 1e-4\nlearning_rate = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("train"), "{msg}");
        assert!(msg.contains("learning_rate"), "{msg}");
        let err = RunConfig::from_toml_str("[loss]\ngamma = \"big\"\n").unwrap_err();
        assert!(err.to_string().contains("loss.gamma"), "{err}");
    }

    #[test]
    fn semantic_validation() {
        let mut c = RunConfig::default();
        c.data.size_scale = 3.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.pretrain.corpus = PretrainCorpus::External;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.metrics.extractor = "nope".into();
        assert!(c.validate().is_err());
    }
}
