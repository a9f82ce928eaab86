use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::objectives::{LossConfig, Objective};
use crate::survey::{generate_survey, load_manifest, GeneratorConfig, SurveyManifest};
use crate::views::{AugmentParams, SamplerConfig, SamplerMode};

/// Where training images come from: a manifest on disk or a synthetic survey.
/// With neither set, the default generator is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    pub generator_seed: u64,
}

impl DataConfig {
    pub fn load(&self) -> Result<SurveyManifest> {
        match (&self.manifest, &self.generator) {
            (Some(path), None) => load_manifest(path),
            (None, Some(cfg)) => generate_survey(cfg, self.generator_seed),
            (None, None) => generate_survey(&GeneratorConfig::default(), self.generator_seed),
            (Some(_), Some(_)) => Err(Error::Config("data: set either manifest or generator, not both".into())),
        }
    }
}

/// SGD with momentum, cosine-decayed over all steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Base learning rate; `None` means `0.03 * batch_size / 64`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: None,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Directory for checkpoints and logs; nothing is written when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub loss: LossConfig,
    pub augment: AugmentParams,
    pub encoder: EncoderParams,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Simclr,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            out_dir: None,
            sampler: SamplerConfig::default(),
            data: DataConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentParams::default(),
            encoder: EncoderParams::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(m) = cfg.data.manifest.as_mut() {
            if m.is_relative() {
                *m = path.parent().unwrap_or_else(|| Path::new(".")).join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that does not depend on the dataset and fills every
    /// derived default, so the result records the values actually used.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        if cfg.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                cfg.batch_size
            )));
        }
        cfg.sampler.validate()?;
        if cfg.sampler.mode == SamplerMode::Standard {
            cfg.sampler.r_loc = None;
        }
        cfg.loss.validate()?;
        cfg.augment.validate()?;
        cfg.encoder.validate()?;
        let opt = &mut cfg.optimizer;
        let lr = opt.lr.unwrap_or(0.03 * cfg.batch_size as f64 / 64.0);
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {lr}")));
        }
        opt.lr = Some(lr);
        if !(0.0..1.0).contains(&opt.momentum) {
            return Err(Error::Config(format!(
                "optimizer.momentum must lie in [0, 1), got {}",
                opt.momentum
            )));
        }
        if !(opt.weight_decay >= 0.0 && opt.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "optimizer.weight_decay must be non-negative, got {}",
                opt.weight_decay
            )));
        }
        let min = cfg.encoder.min_input_size();
        if cfg.augment.global_size < min || (cfg.objective.uses_multicrop() && cfg.augment.local_size < min) {
            return Err(Error::Config(format!(
                "crop sizes {} / {} too small for {} pooling stages (need at least {min})",
                cfg.augment.global_size,
                cfg.augment.local_size,
                cfg.encoder.widths.len()
            )));
        }
        Ok(cfg)
    }

    /// Dataset-dependent checks and defaults.
    pub fn resolve_for(&self, survey: &SurveyManifest) -> Result<Self> {
        let mut cfg = self.resolved()?;
        let img = survey.image(0)?;
        if img.channels() != cfg.encoder.in_channels {
            return Err(Error::Config(format!(
                "encoder expects {} channels but images have {}",
                cfg.encoder.in_channels,
                img.channels()
            )));
        }
        if cfg.augment.global_size > img.height().min(img.width()) {
            return Err(Error::Config(format!(
                "global crop {} larger than images ({}x{})",
                cfg.augment.global_size,
                img.height(),
                img.width()
            )));
        }
        if cfg.objective == Objective::Deepcluster {
            let k = cfg.loss.cluster_count(survey.class_count());
            if k > survey.len() {
                return Err(Error::Config(format!("{k} clusters exceed {} patches", survey.len())));
            }
            cfg.loss.clusters = Some(k);
        }
        Ok(cfg)
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr.unwrap_or(0.03 * self.batch_size as f64 / 64.0)
    }
}
