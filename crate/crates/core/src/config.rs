//! Pipeline configuration: one TOML file covering every module's parameters.
//! CLI flags override individual keys; unset keys take the published
//! defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::WeightsSource;
use crate::noise::{AugmentParams, NoiseParams};

/// Environment variable naming the default artifact root.
pub const OUTPUT_DIR_ENV: &str = "OCT_RESTORE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub texture_amplitude: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { height: 128, width: 128, texture_amplitude: 0.03 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotation_range: f32,
    pub translate_range: f32,
    pub scale_range: f32,
    pub hflip_prob: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = AugmentParams::default();
        AugmentConfig {
            enabled: true,
            rotation_range: p.rotation_range,
            translate_range: p.translate_range,
            scale_range: p.scale_range,
            hflip_prob: p.hflip_prob,
        }
    }
}

impl AugmentConfig {
    pub fn params(&self) -> AugmentParams {
        if !self.enabled {
            return AugmentParams::disabled();
        }
        AugmentParams {
            rotation_range: self.rotation_range,
            translate_range: self.translate_range,
            scale_range: self.scale_range,
            hflip_prob: self.hflip_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { depth: 4, base_channels: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub weights_source: WeightsSource,
    /// Directory holding exported pretrained blobs; unused for frozen_random.
    pub weights_dir: Option<PathBuf>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { weights_source: WeightsSource::ImagenetPretrained, weights_dir: None }
    }
}

/// Optimization parameters shared by both training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stop after this many epochs without validation-loss improvement.
    pub patience: usize,
    /// Epochs between learning-rate halvings.
    pub lr_halve_every: usize,
    pub global_seed: u64,
    pub workers: usize,
    /// Interleave one detector epoch per five processor epochs.
    pub alternating: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 6,
            max_epochs: 100,
            patience: 10,
            lr_halve_every: 10,
            global_seed: 0,
            workers: 1,
            alternating: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.lr_halve_every == 0 {
            return Err(Error::Config("lr_halve_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Running-mean window, in batches.
    pub window: usize,
    /// Batches per calibration stage.
    pub stage_batches: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { window: 50, stage_batches: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tissue_roi_count: usize,
    pub tissue_roi_size: usize,
    pub ilc_roi_count: usize,
    pub ilc_roi_size: usize,
    /// Height of the background strip at the top of each scan.
    pub background_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tissue_roi_count: 25,
            tissue_roi_size: 8,
            ilc_roi_count: 5,
            ilc_roi_size: 5,
            background_rows: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub phantom: PhantomConfig,
    pub noise: NoiseParams,
    pub augment: AugmentConfig,
    pub detector: NetworkConfig,
    pub processor: NetworkConfig,
    pub extractors: ExtractorConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        if self.phantom.height < 32 || self.phantom.width < 32 {
            return Err(Error::Config("phantom dims must be at least 32x32".into()));
        }
        Ok(())
    }

    /// Desk-scale profile: small networks, augmentation off, trainable on a
    /// CPU in minutes. The published defaults stay in `default()`.
    pub fn desk_scale(seed: u64) -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.detector = NetworkConfig { depth: 3, base_channels: 4 };
        cfg.processor = NetworkConfig { depth: 3, base_channels: 8 };
        cfg.extractors.weights_source = WeightsSource::FrozenRandom;
        cfg.augment.enabled = false;
        cfg.train.learning_rate = 1e-3;
        cfg.train.global_seed = seed;
        cfg
    }

    /// Default artifact root: the output-directory environment variable when
    /// set, otherwise the current directory.
    pub fn default_output_root() -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.train.learning_rate, 1e-5);
        assert_eq!(cfg.train.batch_size, 6);
        assert_eq!(cfg.noise.amplitude_low, 0.02);
        assert_eq!(cfg.noise.amplitude_high, 0.5);
        assert_eq!(cfg.augment.rotation_range, 45.0);
        assert_eq!(cfg.detector.depth, 4);
        assert_eq!(cfg.detector.base_channels, 64);
        assert_eq!(cfg.weights.content, [2.86, 4.0, 6.67]);
        assert_eq!(cfg.weights.style, [6.67e-5, 1.8e-5, 2.1e-5]);
        assert_eq!(cfg.extractors.weights_source, WeightsSource::ImagenetPretrained);
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(
            &path,
            "[train]\nlearning_rate = 2e-4\nbatch_size = 3\n\n[augment]\nenabled = false\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.train.learning_rate, 2e-4);
        assert_eq!(cfg.train.batch_size, 3);
        assert!(!cfg.augment.enabled);
        // Unset sections keep defaults.
        assert_eq!(cfg.noise.amplitude_high, 0.5);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "[train]\nlearning_rate = -1.0\n").unwrap();
        match PipelineConfig::load(&path) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
        std::fs::write(&path, "not valid toml [").unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn disabled_augment_is_identity_params() {
        let mut cfg = AugmentConfig::default();
        cfg.enabled = false;
        assert_eq!(cfg.params(), AugmentParams::disabled());
    }
}
