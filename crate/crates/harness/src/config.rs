//! Experiment configuration.

use serde::{Deserialize, Serialize};

use propaseg_core::backbone::{BackboneConfig, LossKind, TrainConfig};
use propaseg_core::fusion::{FusionConfig, FusionTrainConfig};
use propaseg_core::orchestrator::SessionConfig;
use propaseg_core::update::UpdateConfig;
use propaseg_core::volume::{Dims3, LesionKind, Spacing};
use propaseg_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSettings {
    pub dims: Dims3,
    pub drift: f64,
    pub noise_std: f64,
    pub spacing: Spacing,
    pub pet_channel: bool,
}

impl Default for PhantomSettings {
    fn default() -> Self {
        Self {
            dims: Dims3::new(16, 32, 32),
            drift: 0.6,
            noise_std: 0.25,
            spacing: [2.5, 1.0, 1.0],
            pet_channel: false,
        }
    }
}

/// Contrast fade injected into evaluation and fusion-training cases, so the
/// backbone (trained on clean cases) fails over a band of slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSettings {
    pub band_len: usize,
    pub residual: f32,
}

impl Default for CorruptionSettings {
    fn default() -> Self {
        Self {
            band_len: 4,
            residual: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSettings {
    pub levels: usize,
    pub base_channels: usize,
    pub tap_level: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Defaults to dice for the tube family and hybrid for ellipsoids.
    pub loss: Option<LossKind>,
}

impl Default for BackboneSettings {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 4,
            tap_level: 2,
            epochs: 20,
            lr: 3e-3,
            loss: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSettings {
    pub expansion: usize,
    pub epochs: usize,
    pub lr: f64,
    pub detached_decoder: bool,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            expansion: 8,
            epochs: 10,
            lr: 1e-3,
            detached_decoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub family: LesionKind,
    pub cases: usize,
    pub folds: usize,
    /// Worst-slice edits per evaluation case.
    pub steps: usize,
    /// Decoder levels swept by the ablation.
    pub tap_levels: Vec<usize>,
    pub seed: u64,
    pub phantom: PhantomSettings,
    pub corruption: CorruptionSettings,
    pub backbone: BackboneSettings,
    pub fusion: FusionSettings,
    /// Defaults to Adam with the dice loss for tubes and L-BFGS with the
    /// hybrid loss for ellipsoids.
    pub update: Option<UpdateConfig>,
    pub radius: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            family: LesionKind::CurvedTube,
            cases: 40,
            folds: 4,
            steps: 4,
            tap_levels: vec![1, 2, 3],
            seed: 0,
            phantom: PhantomSettings::default(),
            corruption: CorruptionSettings::default(),
            backbone: BackboneSettings::default(),
            fusion: FusionSettings::default(),
            update: None,
            radius: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.cases < self.folds {
            return Err(Error::Config(format!(
                "{} cases cannot fill {} folds",
                self.cases, self.folds
            )));
        }
        if self.cases - self.cases.div_ceil(self.folds) < 2 {
            return Err(Error::Config("each fold needs at least 2 training cases".into()));
        }
        if self.tap_levels.iter().any(|&l| l == 0 || l > self.backbone.levels) {
            return Err(Error::Config(format!(
                "tap levels {:?} outside 1..={}",
                self.tap_levels, self.backbone.levels
            )));
        }
        let len = self.corruption.band_len;
        if len == 0 || len + 2 > self.phantom.dims.d {
            return Err(Error::Config(format!("fade band of {len} slices does not fit the volume")));
        }
        self.backbone_config().validate()?;
        self.update_config().validate()
    }

    pub fn loss(&self) -> LossKind {
        self.backbone.loss.unwrap_or(match self.family {
            LesionKind::CurvedTube => LossKind::Dice,
            LesionKind::EllipsoidStack => LossKind::Hybrid,
        })
    }

    pub fn update_config(&self) -> UpdateConfig {
        self.update.clone().unwrap_or_else(|| UpdateConfig {
            loss: self.loss(),
            ..UpdateConfig::lbfgs()
        })
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: if self.phantom.pet_channel { 2 } else { 1 },
            levels: self.backbone.levels,
            base_channels: self.backbone.base_channels,
            tap_level: self.backbone.tap_level,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: propaseg_core::backbone::LossConfig { kind: self.loss() },
            epochs: self.backbone.epochs,
            lr: self.backbone.lr,
            seed: self.seed,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            expansion: self.fusion.expansion,
            seed: self.seed,
            detached_decoder: self.fusion.detached_decoder,
        }
    }

    pub fn fusion_train_config(&self) -> FusionTrainConfig {
        FusionTrainConfig {
            epochs: self.fusion.epochs,
            lr: self.fusion.lr,
            loss: self.loss(),
            update: self.update_config(),
            radius: self.radius,
            seed: self.seed,
        }
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            update: self.update_config(),
            radius: self.radius,
        }
    }
}
