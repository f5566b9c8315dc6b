//! Compact 3D encoder-decoder with a feature tap inside the decoder.
//!
//! Layout for `levels = L` and channel widths `ch[l] = base * 2^l`:
//!
//! * encoder block `l` runs at resolution `R_l = input / 2^l`; block 0 keeps
//!   resolution, later blocks open with a stride-2 convolution;
//! * decoder stage `k` (`k = L` deepest, `k = 1` last) runs at `R_{k-1}`.
//!   Stage `L` refines the bottleneck; stage `k < L` concatenates its input
//!   with the encoder skip of the same resolution. Every stage except the
//!   last ends in a trilinear 2x upsampling;
//! * a pointwise head maps `ch[0]` channels to two logits.
//!
//! The tap at level `t` is the tensor entering decoder stage `t`, so the
//! decode head `decode_from` runs exactly `t` stages.
//!
//! Instance-normalisation statistics of the decoder are captured during
//! [`SegModel::predict`] and stored with the feature map; decoding from a
//! (possibly modified) feature map reuses them. The decode head is therefore
//! spatially local, and decoding the untouched tap reproduces the prediction
//! bit for bit.

pub(crate) mod checkpoint;
pub mod loss;
mod train;

pub use checkpoint::{load_backbone, save_backbone, BackboneManifest, CHECKPOINT_MAGIC};
pub use loss::{foreground_prob, seg_loss, seg_loss_with, LossConfig, LossKind, LossValue};
pub use train::{train_backbone, TrainConfig, TrainReport};

/// Build an untrained backbone.
pub fn build_backbone(config: BackboneConfig) -> Result<SegModel<f32>> {
    SegModel::new(config)
}

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{norm, ops, Conv3d, ConvGrad, NormStats, Scalar, Shape4, Tensor};
use crate::volume::{Dims3, PredictionVolume, Volume};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub tap_level: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            levels: 3,
            base_channels: 8,
            tap_level: 2,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.levels) {
            return Err(Error::Config(format!("levels must be 1..=4, got {}", self.levels)));
        }
        if self.tap_level == 0 || self.tap_level > self.levels {
            return Err(Error::Config(format!(
                "tap level {} outside 1..={}",
                self.tap_level, self.levels
            )));
        }
        if !(1..=2).contains(&self.in_channels) || self.base_channels == 0 {
            return Err(Error::Config("invalid channel configuration".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel count of the tap activation.
    pub fn width_at_tap(&self) -> usize {
        self.width(self.tap_level.min(self.levels - 1))
    }

    /// Hash of everything that determines the weight layout.
    pub fn arch_hash(&self) -> String {
        let canon = format!(
            "unet3d/in={}/levels={}/base={}",
            self.in_channels, self.levels, self.base_channels
        );
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}

/// Where a feature map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Updated,
    Fused,
}

/// Frozen inputs the decode head needs besides the tap itself: encoder skip
/// activations and captured normalisation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderContext<T> {
    pub tap_level: usize,
    pub output_dims: Dims3,
    pub skips: Vec<Tensor<T>>,
    pub stats: Vec<NormStats<T>>,
}

impl<T: Scalar> DecoderContext<T> {
    pub fn cast<U: Scalar>(&self) -> DecoderContext<U> {
        DecoderContext {
            tap_level: self.tap_level,
            output_dims: self.output_dims,
            skips: self.skips.iter().map(Tensor::cast).collect(),
            stats: self.stats.iter().map(NormStats::cast).collect(),
        }
    }
}

/// Cached intermediate activation at the decoder tap.
#[derive(Clone, Debug)]
pub struct FeatureMap<T = f32> {
    pub data: Tensor<T>,
    pub tap_level: usize,
    pub provenance: Provenance,
    pub context: Arc<DecoderContext<T>>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn shape(&self) -> Shape4 {
        self.data.shape
    }

    /// Same context, new activation values.
    pub fn with_data(&self, data: Tensor<T>, provenance: Provenance) -> Result<Self> {
        if data.shape != self.data.shape {
            return Err(Error::Shape(format!(
                "feature data {} does not match tap {}",
                data.shape, self.data.shape
            )));
        }
        Ok(Self {
            data,
            tap_level: self.tap_level,
            provenance,
            context: Arc::clone(&self.context),
        })
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            data: self.data.cast(),
            tap_level: self.tap_level,
            provenance: self.provenance,
            context: Arc::new(self.context.cast()),
        }
    }
}

/// Conv -> instance norm -> ReLU chain.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block<T> {
    pub units: Vec<Conv3d<T>>,
}

/// Forward record of one conv unit.
#[derive(Clone, Debug)]
pub(crate) struct UnitRecord<T> {
    input: Tensor<T>,
    xhat: Tensor<T>,
    stats: NormStats<T>,
    live: bool,
}

pub(crate) fn unit_forward<T: Scalar>(
    conv: &Conv3d<T>,
    x: &Tensor<T>,
    frozen: Option<&NormStats<T>>,
    record: bool,
) -> Result<(Tensor<T>, Option<UnitRecord<T>>)> {
    let z = conv.forward(x)?;
    let stats = match frozen {
        Some(s) => s.clone(),
        None => NormStats::compute(&z),
    };
    let xhat = norm::normalize(&z, &stats);
    let mut y = xhat.clone();
    ops::relu(&mut y);
    let rec = record.then(|| UnitRecord {
        input: x.clone(),
        xhat,
        stats,
        live: frozen.is_none(),
    });
    Ok((y, rec))
}

pub(crate) fn unit_backward<T: Scalar>(
    conv: &Conv3d<T>,
    rec: &UnitRecord<T>,
    dy: Tensor<T>,
    grad: Option<&mut ConvGrad<T>>,
) -> Result<Tensor<T>> {
    let mut d = dy;
    ops::relu_backward(&mut d, &rec.xhat);
    let dz = if rec.live {
        norm::backward_live(&d, &rec.xhat, &rec.stats)
    } else {
        norm::backward_frozen(&d, &rec.stats)
    };
    conv.backward(&rec.input, &dz, grad)
}

impl<T: Scalar> Block<T> {
    pub(crate) fn cast<U: Scalar>(&self) -> Block<U> {
        Block {
            units: self.units.iter().map(Conv3d::cast).collect(),
        }
    }
}

/// Records of a forward pass through decoder stages, deepest first.
#[derive(Clone, Debug)]
pub(crate) struct DecoderTape<T> {
    /// Per stage: (stage level, unit records, shape before upsampling).
    stages: Vec<(usize, Vec<UnitRecord<T>>, Shape4)>,
    head_input: Tensor<T>,
}

/// Segmentation model with a fixed split point.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T = f32> {
    pub config: BackboneConfig,
    pub(crate) encoder: Vec<Block<T>>,
    /// `decoder[k - 1]` is stage `k`.
    pub(crate) decoder: Vec<Block<T>>,
    pub(crate) head: Conv3d<T>,
}

/// Everything a full forward pass produces.
pub(crate) struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub feature: FeatureMap<T>,
    pub enc_records: Vec<Vec<UnitRecord<T>>>,
    pub dec_tape: DecoderTape<T>,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let l = config.levels;
        let mut encoder = Vec::with_capacity(l);
        for level in 0..l {
            let (cin, stride) = if level == 0 {
                (config.in_channels, 1)
            } else {
                (config.width(level - 1), 2)
            };
            let c = config.width(level);
            encoder.push(Block {
                units: vec![
                    Conv3d::new(cin, c, 3, stride, &mut rng),
                    Conv3d::new(c, c, 3, 1, &mut rng),
                ],
            });
        }
        let mut decoder = Vec::with_capacity(l);
        for k in 1..=l {
            let units = if k == l {
                let c = config.width(l - 1);
                vec![Conv3d::new(c, c, 3, 1, &mut rng)]
            } else {
                let (cin, c) = (config.width(k) + config.width(k - 1), config.width(k - 1));
                vec![Conv3d::new(cin, c, 3, 1, &mut rng), Conv3d::new(c, c, 3, 1, &mut rng)]
            };
            decoder.push(Block { units });
        }
        let head = Conv3d::new(config.width(0), 2, 1, 1, &mut rng);
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
        })
    }

    pub fn tap_level(&self) -> usize {
        self.config.tap_level
    }

    /// Re-split the same weights at another decoder level.
    pub fn with_tap_level(&self, tap_level: usize) -> Result<Self> {
        let config = BackboneConfig {
            tap_level,
            ..self.config.clone()
        };
        config.validate()?;
        Ok(Self {
            config,
            ..self.clone()
        })
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(Block::cast).collect(),
            decoder: self.decoder.iter().map(Block::cast).collect(),
            head: self.head.cast(),
        }
    }

    /// Check that `(D, H, W)` can pass through the encoder.
    pub fn check_dims(&self, dims: Dims3) -> Result<()> {
        let f = 1usize << (self.config.levels - 1);
        if dims.d % f != 0 || dims.h % f != 0 || dims.w % f != 0 || dims.is_empty() {
            return Err(Error::Shape(format!(
                "spatial dims {}x{}x{} must be divisible by {f}",
                dims.d, dims.h, dims.w
            )));
        }
        Ok(())
    }

    /// Shape of the tap activation for an input of `dims`, without a forward pass.
    pub fn tap_shape(&self, dims: Dims3) -> Result<Shape4> {
        self.check_dims(dims)?;
        let t = self.config.tap_level;
        let c = self.config.width_at_tap();
        let f = 1usize << (t - 1);
        Ok(Shape4::new(c, dims.d / f, dims.h / f, dims.w / f))
    }

    /// Conv layers in canonical order: encoder, decoder (stage 1 first), head.
    pub fn convs(&self) -> Vec<&Conv3d<T>> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .flat_map(|b| b.units.iter())
            .chain(std::iter::once(&self.head))
            .collect()
    }

    pub(crate) fn convs_mut(&mut self) -> Vec<&mut Conv3d<T>> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|b| b.units.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    /// SHA-256 over all parameters in canonical order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in self.convs() {
            for v in c.weight.iter().chain(&c.bias) {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels, x.shape.c
            )));
        }
        self.check_dims(Dims3::new(x.shape.d, x.shape.h, x.shape.w))
    }

    /// Full forward pass with live normalisation.
    pub(crate) fn forward(&self, x: &Tensor<T>, record: bool) -> Result<ForwardOutput<T>> {
        self.check_input(x)?;
        let l = self.config.levels;
        let t = self.config.tap_level;
        let mut enc_out: Vec<Tensor<T>> = Vec::with_capacity(l);
        let mut enc_records = Vec::with_capacity(l);
        let mut cur = x.clone();
        for block in &self.encoder {
            let mut recs = Vec::new();
            for conv in &block.units {
                let (y, r) = unit_forward(conv, &cur, None, record)?;
                recs.extend(r);
                cur = y;
            }
            enc_out.push(cur.clone());
            enc_records.push(recs);
        }

        // Stages L..=t+1 form the encoder side of the split.
        let mut x = enc_out[l - 1].clone();
        let mut deep = DecoderTape {
            stages: Vec::new(),
            head_input: Tensor::zeros(Shape4::new(0, 0, 0, 0)),
        };
        for k in ((t + 1)..=l).rev() {
            let (y, recs, pre) = self.run_stage(k, &x, &enc_out, None, record)?;
            deep.stages.push((k, recs, pre));
            x = y;
        }
        let skips: Vec<Tensor<T>> = enc_out[..t.min(l - 1)].to_vec();
        let tap = x;
        let (logits, tape, stats) = self.run_decoder(&tap, &skips, None, record)?;
        deep.stages.extend(tape.stages);
        deep.head_input = tape.head_input;
        let context = DecoderContext {
            tap_level: t,
            output_dims: Dims3::new(logits.shape.d, logits.shape.h, logits.shape.w),
            skips,
            stats,
        };
        let feature = FeatureMap {
            data: tap,
            tap_level: t,
            provenance: Provenance::Original,
            context: Arc::new(context),
        };
        Ok(ForwardOutput {
            logits,
            feature,
            enc_records,
            dec_tape: deep,
        })
    }

    /// Run decoder stage `k` on `x`. Returns the (upsampled) output, unit
    /// records, and the pre-upsampling shape.
    fn run_stage(
        &self,
        k: usize,
        x: &Tensor<T>,
        skips: &[Tensor<T>],
        frozen: Option<&[NormStats<T>]>,
        record: bool,
    ) -> Result<(Tensor<T>, Vec<UnitRecord<T>>, Shape4)> {
        let l = self.config.levels;
        let mut cur = if k == l {
            x.clone()
        } else {
            Tensor::concat(x, &skips[k - 1])?
        };
        let mut recs = Vec::new();
        for (i, conv) in self.decoder[k - 1].units.iter().enumerate() {
            let (y, r) = unit_forward(conv, &cur, frozen.map(|s| &s[i]), record)?;
            recs.extend(r);
            cur = y;
        }
        let pre = cur.shape;
        let out = if k > 1 { ops::upsample2(&cur) } else { cur };
        Ok((out, recs, pre))
    }

    /// Decoder stages `t..=1` plus head, starting from the tap. With `frozen`
    /// the given statistics are used in order; otherwise they are computed
    /// and returned.
    fn run_decoder(
        &self,
        tap: &Tensor<T>,
        skips: &[Tensor<T>],
        frozen: Option<&[NormStats<T>]>,
        record: bool,
    ) -> Result<(Tensor<T>, DecoderTape<T>, Vec<NormStats<T>>)> {
        let t = self.config.tap_level;
        let mut x = tap.clone();
        let mut stages = Vec::new();
        let mut stats = Vec::new();
        let mut offset = 0;
        for k in (1..=t).rev() {
            let n_units = self.decoder[k - 1].units.len();
            let fz = frozen.map(|s| &s[offset..offset + n_units]);
            offset += n_units;
            // Live passes need the statistics even when not recording.
            let (y, recs, pre) = self.run_stage(k, &x, skips, fz, record || frozen.is_none())?;
            if frozen.is_none() {
                stats.extend(recs.iter().map(|r| r.stats.clone()));
            }
            if record {
                stages.push((k, recs, pre));
            }
            x = y;
        }
        let logits = self.head.forward(&x)?;
        let tape = DecoderTape {
            stages,
            head_input: if record { x } else { Tensor::zeros(Shape4::new(0, 0, 0, 0)) },
        };
        Ok((logits, tape, stats))
    }

    /// Decode logits from a tap activation using its frozen context.
    pub fn decode_logits(&self, f: &FeatureMap<T>) -> Result<Tensor<T>> {
        self.check_feature(f)?;
        let (logits, _, _) = self.run_decoder(&f.data, &f.context.skips, Some(&f.context.stats), false)?;
        Ok(logits)
    }

    /// Decode logits and keep the records needed by [`Self::decode_backward`].
    pub(crate) fn decode_recorded(&self, f: &FeatureMap<T>) -> Result<(Tensor<T>, DecoderTape<T>)> {
        self.check_feature(f)?;
        let (logits, tape, _) = self.run_decoder(&f.data, &f.context.skips, Some(&f.context.stats), true)?;
        Ok((logits, tape))
    }

    /// Gradient of a loss with respect to the tap, given its gradient with
    /// respect to the decoded logits. Weights are not touched.
    pub(crate) fn decode_backward(&self, tape: &DecoderTape<T>, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut dx = self.head.backward(&tape.head_input, dlogits, None)?;
        for (k, recs, pre) in tape.stages.iter().rev() {
            dx = self.stage_backward(*k, recs, *pre, dx, None)?.0;
        }
        Ok(dx)
    }

    /// Decode-head convolutions (stages `1..=tap_level`, then the head).
    pub(crate) fn decode_convs_mut(&mut self) -> Vec<&mut Conv3d<T>> {
        let t = self.config.tap_level;
        self.decoder[..t]
            .iter_mut()
            .flat_map(|b| b.units.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .collect()
    }

    /// Like [`Self::decode_backward`], also returning parameter gradients
    /// aligned with [`Self::decode_convs_mut`].
    pub(crate) fn decode_backward_params(
        &self,
        tape: &DecoderTape<T>,
        dlogits: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<ConvGrad<T>>)> {
        let t = self.config.tap_level;
        let mut grads: Vec<ConvGrad<T>> = self.decoder[..t]
            .iter()
            .flat_map(|b| b.units.iter())
            .chain(std::iter::once(&self.head))
            .map(|c| c.zero_grad())
            .collect();
        let head_idx = grads.len() - 1;
        let mut dx = self.head.backward(&tape.head_input, dlogits, Some(&mut grads[head_idx]))?;
        for (k, recs, pre) in tape.stages.iter().rev() {
            let off: usize = self.decoder[..k - 1].iter().map(|b| b.units.len()).sum();
            let n = self.decoder[k - 1].units.len();
            dx = self.stage_backward(*k, recs, *pre, dx, Some(&mut grads[off..off + n]))?.0;
        }
        Ok((dx, grads))
    }

    /// Back through one stage. Returns (grad wrt stage input x, grad wrt skip).
    fn stage_backward(
        &self,
        k: usize,
        recs: &[UnitRecord<T>],
        pre: Shape4,
        dout: Tensor<T>,
        mut grads: Option<&mut [ConvGrad<T>]>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut d = if k > 1 { ops::upsample2_backward(&dout, pre) } else { dout };
        let units = &self.decoder[k - 1].units;
        for (i, (conv, rec)) in units.iter().zip(recs).enumerate().rev() {
            let g = grads.as_deref_mut().map(|g| &mut g[i]);
            d = unit_backward(conv, rec, d, g)?;
        }
        if k == self.config.levels {
            Ok((d, None))
        } else {
            let c = self.config.width(k);
            let (dx, dskip) = d.split(c);
            Ok((dx, Some(dskip)))
        }
    }

    /// Parameter gradients of a full forward pass. Returns grads aligned
    /// with [`Self::convs`].
    pub(crate) fn backward(&self, out: &ForwardOutput<T>, dlogits: &Tensor<T>) -> Result<Vec<ConvGrad<T>>> {
        let l = self.config.levels;
        let mut grads: Vec<ConvGrad<T>> = self.convs().iter().map(|c| c.zero_grad()).collect();
        let enc_units: usize = self.encoder.iter().map(|b| b.units.len()).sum();
        let mut dec_offsets = Vec::with_capacity(l);
        let mut off = enc_units;
        for b in &self.decoder {
            dec_offsets.push(off);
            off += b.units.len();
        }
        let head_idx = off;

        let tape = &out.dec_tape;
        let mut dx = self.head.backward(&tape.head_input, dlogits, Some(&mut grads[head_idx]))?;
        let mut denc: Vec<Option<Tensor<T>>> = vec![None; l];
        for (k, recs, pre) in tape.stages.iter().rev() {
            let o = dec_offsets[k - 1];
            let n = self.decoder[k - 1].units.len();
            let (d, dskip) = self.stage_backward(*k, recs, *pre, dx, Some(&mut grads[o..o + n]))?;
            if let Some(ds) = dskip {
                accumulate(&mut denc[k - 1], ds);
            }
            dx = d;
        }
        accumulate(&mut denc[l - 1], dx);

        let mut off = enc_units;
        for level in (0..l).rev() {
            let n = self.encoder[level].units.len();
            off -= n;
            let Some(mut d) = denc[level].take() else { continue };
            for (i, (conv, rec)) in self.encoder[level]
                .units
                .iter()
                .zip(&out.enc_records[level])
                .enumerate()
                .rev()
            {
                d = unit_backward(conv, rec, d, Some(&mut grads[off + i]))?;
            }
            if level > 0 {
                accumulate(&mut denc[level - 1], d);
            }
        }
        Ok(grads)
    }

    fn check_feature(&self, f: &FeatureMap<T>) -> Result<()> {
        if f.tap_level != self.config.tap_level || f.context.tap_level != self.config.tap_level {
            return Err(Error::Shape(format!(
                "feature map from tap level {} used with model split at {}",
                f.tap_level, self.config.tap_level
            )));
        }
        let expected = self.tap_shape(f.context.output_dims)?;
        if f.data.shape != expected {
            return Err(Error::Shape(format!(
                "feature shape {} does not match tap shape {expected}",
                f.data.shape
            )));
        }
        Ok(())
    }

    /// Output z-range `[lo, hi]` of the decode head that can change when the
    /// tap is modified at depth index `d0`.
    pub fn decoder_reach(&self, d0: usize, output_depth: usize) -> (usize, usize) {
        let t = self.config.tap_level;
        let mut depth = output_depth >> (t - 1);
        let (mut lo, mut hi) = (d0, d0);
        for k in (1..=t).rev() {
            let convs = self.decoder[k - 1].units.len();
            lo = lo.saturating_sub(convs);
            hi = (hi + convs).min(depth - 1);
            if k > 1 {
                lo = ops::upsample2_reach(lo, depth).0;
                hi = ops::upsample2_reach(hi, depth).1;
                depth *= 2;
            }
        }
        (lo, hi)
    }

    /// Tap depth indices whose values can influence output slice `s`.
    pub fn tap_support(&self, s: usize, output_depth: usize) -> Vec<usize> {
        let tap_depth = output_depth >> (self.config.tap_level - 1);
        (0..tap_depth)
            .filter(|&d| {
                let (lo, hi) = self.decoder_reach(d, output_depth);
                lo <= s && s <= hi
            })
            .collect()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(s) => s.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Foreground probabilities from two-channel logits.
pub fn logits_to_prediction<T: Scalar>(logits: &Tensor<T>) -> PredictionVolume {
    let n = logits.shape.spatial();
    let prob = (0..n)
        .map(|i| foreground_prob(logits.data[i].as_f64(), logits.data[n + i].as_f64()) as f32)
        .collect();
    PredictionVolume {
        dims: Dims3::new(logits.shape.d, logits.shape.h, logits.shape.w),
        prob,
        threshold: PredictionVolume::DEFAULT_THRESHOLD,
    }
}

impl SegModel<f32> {
    /// Baseline prediction and the cached tap activation.
    pub fn predict(&self, v: &Volume) -> Result<(PredictionVolume, FeatureMap<f32>)> {
        let out = self.forward(&v.to_tensor(), false)?;
        Ok((logits_to_prediction(&out.logits), out.feature))
    }

    /// Prediction from a tap activation through the frozen decode head.
    pub fn decode_from(&self, f: &FeatureMap<f32>) -> Result<PredictionVolume> {
        Ok(logits_to_prediction(&self.decode_logits(f)?))
    }
}

#[cfg(test)]
mod tests;
