//! Editing the cached activation so the decoded slice matches a user edit.
//!
//! The decode head's weights stay fixed; only the tap activation moves.

use serde::{Deserialize, Serialize};

use crate::backbone::{seg_loss_with, FeatureMap, LossKind, Provenance, SegModel};
use crate::error::{Error, Result};
use crate::nn::optim::{Adam, Lbfgs, LbfgsStep};
use crate::nn::{Scalar, Tensor};
use crate::volume::Dims3;

/// A corrected axial slice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceEdit {
    pub slice: usize,
    /// Row-major `(H, W)` foreground mask.
    pub mask: Vec<bool>,
}

impl SliceEdit {
    pub fn new(slice: usize, mask: Vec<bool>) -> Self {
        Self { slice, mask }
    }

    pub fn validate(&self, dims: Dims3) -> Result<()> {
        if self.slice >= dims.d {
            return Err(Error::OutOfRange {
                index: self.slice,
                extent: dims.d,
            });
        }
        if self.mask.len() != dims.plane() {
            return Err(Error::Shape(format!(
                "edit mask has {} pixels, slice has {}x{}",
                self.mask.len(),
                dims.h,
                dims.w
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Lbfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once the slice loss is within this distance of its infimum.
    pub loss_tolerance: f64,
    pub loss: LossKind,
    /// L-BFGS history length.
    pub history: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 1e-2,
            max_iters: 50,
            loss_tolerance: 1e-3,
            loss: LossKind::Hybrid,
            history: 10,
        }
    }
}

impl UpdateConfig {
    pub fn lbfgs() -> Self {
        Self {
            optimizer: OptimizerKind::Lbfgs,
            lr: 1.0,
            max_iters: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.loss_tolerance >= 0.0) {
            return Err(Error::Config("loss tolerance must be non-negative".into()));
        }
        if self.optimizer == OptimizerKind::Lbfgs && self.history == 0 {
            return Err(Error::Config("L-BFGS history must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration record of an update run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateTrace {
    /// Slice loss before the first step and after each accepted step.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
}

impl UpdateTrace {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

fn check_edit<T: Scalar>(model: &SegModel<T>, f: &FeatureMap<T>, edit: &SliceEdit) -> Result<()> {
    let dims = f.context.output_dims;
    edit.validate(dims)?;
    if model.tap_shape(dims)? != f.shape() {
        return Err(Error::Shape("feature map does not match model tap".into()));
    }
    Ok(())
}

/// Loss of slice `edit.slice` of the decoded prediction against the edit, and
/// its gradient with respect to the tap activation.
pub fn slice_loss_grad<T: Scalar>(
    model: &SegModel<T>,
    f: &FeatureMap<T>,
    edit: &SliceEdit,
    kind: LossKind,
) -> Result<(f64, Tensor<T>)> {
    check_edit(model, f, edit)?;
    let (logits, tape) = model.decode_recorded(f)?;
    let lv = seg_loss_with(&logits, |_, j| edit.mask[j], kind, Some(&[edit.slice]))?;
    let grad = model.decode_backward(&tape, &lv.grad)?;
    Ok((lv.value, grad))
}

/// Loss of the decoded slice against the edit.
pub fn slice_loss<T: Scalar>(model: &SegModel<T>, f: &FeatureMap<T>, edit: &SliceEdit, kind: LossKind) -> Result<f64> {
    check_edit(model, f, edit)?;
    let logits = model.decode_logits(f)?;
    Ok(seg_loss_with(&logits, |_, j| edit.mask[j], kind, Some(&[edit.slice]))?.value)
}

/// Optimise the tap activation against the edit. On a non-finite loss or
/// gradient the last finite iterate is returned with `diverged` set.
pub fn update_features(
    model: &SegModel<f32>,
    f: &FeatureMap<f32>,
    edit: &SliceEdit,
    cfg: &UpdateConfig,
) -> Result<(FeatureMap<f32>, UpdateTrace)> {
    cfg.validate()?;
    check_edit(model, f, edit)?;
    let mut trace = UpdateTrace::default();
    let floor = cfg.loss.floor();
    let done = |loss: f64| loss - floor < cfg.loss_tolerance;
    let mut x = f.data.clone();
    let eval = |x: &Tensor<f32>| -> Result<Option<(f64, Tensor<f32>)>> {
        let probe = f.with_data(x.clone(), Provenance::Updated)?;
        let (loss, grad) = slice_loss_grad(model, &probe, edit, cfg.loss)?;
        Ok((loss.is_finite() && grad.is_finite()).then_some((loss, grad)))
    };

    match cfg.optimizer {
        OptimizerKind::Adam => {
            let mut adam = Adam::new(cfg.lr);
            let mut current = eval(&x)?;
            loop {
                let Some((loss, grad)) = current else {
                    trace.diverged = true;
                    break;
                };
                trace.losses.push(loss);
                if done(loss) {
                    trace.converged = true;
                    break;
                }
                if trace.iterations == cfg.max_iters {
                    break;
                }
                let previous = x.clone();
                adam.tick();
                adam.update(0, &mut x.data, &grad.data);
                trace.iterations += 1;
                current = eval(&x)?;
                if current.is_none() {
                    x = previous;
                }
            }
        }
        OptimizerKind::Lbfgs => {
            let mut opt = Lbfgs::new(cfg.history, cfg.lr);
            let shape = x.shape;
            let mut failure = None;
            let mut objective = |v: &[f32]| -> Option<(f64, Vec<f32>)> {
                let t = Tensor::from_vec(shape, v.to_vec()).ok()?;
                match eval(&t) {
                    Ok(r) => r.map(|(l, g)| (l, g.data)),
                    Err(e) => {
                        failure = Some(e);
                        None
                    }
                }
            };
            match objective(&x.data) {
                Some((loss, _)) => trace.losses.push(loss),
                None => trace.diverged = true,
            }
            while !trace.diverged {
                if done(trace.final_loss()) {
                    trace.converged = true;
                    break;
                }
                if trace.iterations == cfg.max_iters {
                    break;
                }
                match opt.step(&mut x.data, &mut objective) {
                    LbfgsStep::Moved(loss) => {
                        trace.iterations += 1;
                        trace.losses.push(loss);
                    }
                    LbfgsStep::Stalled => break,
                    LbfgsStep::NonFinite => trace.diverged = true,
                }
            }
            if let Some(e) = failure {
                return Err(e);
            }
        }
    }
    Ok((f.with_data(x, Provenance::Updated)?, trace))
}
