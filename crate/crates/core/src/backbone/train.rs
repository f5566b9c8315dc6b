//! Supervised training of the segmentation backbone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{seg_loss, LossConfig, SegModel};
use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::volume::{MaskVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub lr: f64,
    /// Seed of the per-epoch case shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 40,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train all weights of `model` on `(image, label)` pairs with Adam, one case
/// per step.
pub fn train_backbone(model: &mut SegModel<f32>, cases: &[(Volume, MaskVolume)], cfg: &TrainConfig) -> Result<TrainReport> {
    if cases.len() < 2 {
        return Err(Error::Config(format!("training needs at least 2 cases, got {}", cases.len())));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    for (v, m) in cases {
        if v.dims() != m.dims {
            return Err(Error::Shape("image and label dims differ".into()));
        }
        model.check_dims(v.dims())?;
    }
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (v, m) = &cases[i];
            let out = model.forward(&v.to_tensor(), true)?;
            let loss = seg_loss(&out.logits, &m.data, cfg.loss.kind, None)?;
            if !loss.value.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}, case {i}")));
            }
            let grads = model.backward(&out, &loss.grad)?;
            if grads.iter().any(|g| g.weight.iter().chain(&g.bias).any(|x| !x.is_finite())) {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch}, case {i}")));
            }
            adam.tick();
            for (k, (conv, g)) in model.convs_mut().into_iter().zip(&grads).enumerate() {
                adam.update(2 * k, &mut conv.weight, &g.weight);
                adam.update(2 * k + 1, &mut conv.bias, &g.bias);
            }
            total += loss.value;
        }
        report.epoch_losses.push(total / cases.len() as f64);
    }
    Ok(report)
}
