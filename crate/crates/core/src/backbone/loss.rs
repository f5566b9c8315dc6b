//! Dice, cross-entropy and hybrid losses on two-class logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};
use crate::volume::Dims3;

/// Smoothing added to numerator and denominator of the dice ratio so that an
/// empty prediction against an empty target is defined.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    #[default]
    Hybrid,
}

impl LossKind {
    /// Infimum of the loss, reached by a perfect confident prediction.
    pub fn floor(self) -> f64 {
        -1.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
}

#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub value: f64,
    pub dice: f64,
    pub ce: Option<f64>,
    /// Gradient with respect to the logits; zero outside the region.
    pub grad: Tensor<T>,
}

/// Foreground probability from two logits: `softmax(z)[1]`.
pub fn foreground_prob(z0: f64, z1: f64) -> f64 {
    1.0 / (1.0 + (z0 - z1).exp())
}

/// `-log softmax(z)[c]`, stable for large logits.
fn cross_entropy(z0: f64, z1: f64, target: bool) -> f64 {
    let (zc, zo) = if target { (z1, z0) } else { (z0, z1) };
    let m = zc.max(zo);
    m + ((zc - m).exp() + (zo - m).exp()).ln() - zc
}

fn check_region(region: &[usize], depth: usize) -> Result<()> {
    if region.is_empty() {
        return Err(Error::Loss("loss region is empty".into()));
    }
    if let Some(&z) = region.iter().find(|&&z| z >= depth) {
        return Err(Error::OutOfRange { index: z, extent: depth });
    }
    Ok(())
}

/// Loss of two-class `logits` against `target` over the axial slices in
/// `region` (all slices when `None`). `target(z, j)` gives the label of the
/// `j`-th voxel of slice `z`.
pub fn seg_loss_with<T, F>(
    logits: &Tensor<T>,
    target: F,
    kind: LossKind,
    region: Option<&[usize]>,
) -> Result<LossValue<T>>
where
    T: Scalar,
    F: Fn(usize, usize) -> bool,
{
    let s = logits.shape;
    if s.c != 2 {
        return Err(Error::Shape(format!("expected 2 logit channels, got {s}")));
    }
    let all: Vec<usize>;
    let region = match region {
        Some(r) => {
            check_region(r, s.d)?;
            r
        }
        None => {
            all = (0..s.d).collect();
            &all
        }
    };
    let mut seen = vec![false; s.d];
    let slices: Vec<usize> = region
        .iter()
        .copied()
        .filter(|&z| !std::mem::replace(&mut seen[z], true))
        .collect();

    let plane = s.h * s.w;
    let n = s.spatial();
    let count = (slices.len() * plane) as f64;
    let (mut spy, mut sp, mut sy, mut ce) = (0.0, 0.0, 0.0, 0.0);
    for &z in &slices {
        for j in 0..plane {
            let i = z * plane + j;
            let (z0, z1) = (logits.data[i].as_f64(), logits.data[n + i].as_f64());
            let p = foreground_prob(z0, z1);
            let y = target(z, j);
            sp += p;
            if y {
                spy += p;
                sy += 1.0;
            }
            if kind == LossKind::Hybrid {
                ce += cross_entropy(z0, z1, y);
            }
        }
    }
    let denom = sp + sy + DICE_SMOOTH;
    let numer = 2.0 * spy + DICE_SMOOTH;
    let dice = -numer / denom;
    let ce = (kind == LossKind::Hybrid).then(|| ce / count);

    let mut grad = Tensor::zeros(s);
    for &z in &slices {
        for j in 0..plane {
            let i = z * plane + j;
            let (z0, z1) = (logits.data[i].as_f64(), logits.data[n + i].as_f64());
            let p = foreground_prob(z0, z1);
            let y = if target(z, j) { 1.0 } else { 0.0 };
            // d dice / d p, then through p = sigmoid(z1 - z0).
            let d_dice_dp = -(2.0 * y * denom - numer) / (denom * denom);
            let mut g1 = d_dice_dp * p * (1.0 - p);
            if kind == LossKind::Hybrid {
                g1 += (p - y) / count;
            }
            grad.data[i] = T::lit(-g1);
            grad.data[n + i] = T::lit(g1);
        }
    }
    Ok(LossValue {
        value: dice + ce.unwrap_or(0.0),
        dice,
        ce,
        grad,
    })
}

/// Loss against a full label volume.
pub fn seg_loss<T: Scalar>(
    logits: &Tensor<T>,
    target: &[bool],
    kind: LossKind,
    region: Option<&[usize]>,
) -> Result<LossValue<T>> {
    if target.len() != logits.shape.spatial() {
        return Err(Error::Shape(format!(
            "target has {} voxels, logits {}",
            target.len(),
            logits.shape
        )));
    }
    let plane = logits.shape.h * logits.shape.w;
    seg_loss_with(logits, |z, j| target[z * plane + j], kind, region)
}

/// Dice loss evaluated directly on probabilities (no gradient).
pub fn dice_on_probs(prob: &[f32], target: &[bool], dims: Dims3, region: Option<&[usize]>) -> Result<f64> {
    if prob.len() != dims.len() || target.len() != dims.len() {
        return Err(Error::Shape("probability / target size mismatch".into()));
    }
    let all: Vec<usize> = (0..dims.d).collect();
    let region = match region {
        Some(r) => {
            check_region(r, dims.d)?;
            r
        }
        None => &all,
    };
    let plane = dims.plane();
    let (mut spy, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for &z in region {
        for i in z * plane..(z + 1) * plane {
            let p = prob[i] as f64;
            sp += p;
            if target[i] {
                spy += p;
                sy += 1.0;
            }
        }
    }
    Ok(-(2.0 * spy + DICE_SMOOTH) / (sp + sy + DICE_SMOOTH))
}
