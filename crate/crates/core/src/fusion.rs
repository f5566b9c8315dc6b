//! Two-stream fusion of the original and updated tap activations.
//!
//! Each input stream halves the spatial size with a stride-2 convolution
//! while multiplying channels by `expansion`; the streams are upsampled back,
//! concatenated, and reduced by a join block and an output block. Every block
//! is three conv -> instance norm -> ReLU units. The norms carry a learnable
//! per-channel scale and shift so the output can match the scale of the tap
//! activations the decode head expects.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::checkpoint::{read_checkpoint, scatter_params, write_checkpoint};
use crate::backbone::{seg_loss, FeatureMap, LossKind, Provenance, SegModel};
use crate::error::{Error, Result};
use crate::metrics::worst_slice;
use crate::nn::optim::Adam;
use crate::nn::{norm, ops, Conv3d, ConvGrad, NormStats, Scalar, Shape4, Tensor};
use crate::orchestrator::neighborhood;
use crate::update::{update_features, SliceEdit, UpdateConfig};
use crate::volume::{MaskVolume, PredictionVolume, Volume};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Channel multiplier of the input blocks.
    pub expansion: usize,
    pub seed: u64,
    /// Train a private copy of the decode head alongside the fusion weights
    /// instead of sharing the frozen base decoder.
    pub detached_decoder: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            expansion: 8,
            seed: 0,
            detached_decoder: false,
        }
    }
}

/// Conv -> affine instance norm -> ReLU.
#[derive(Clone, Debug, PartialEq)]
struct NormUnit<T> {
    conv: Conv3d<T>,
    gamma: Vec<T>,
    beta: Vec<T>,
}

struct UnitRecord<T> {
    input: Tensor<T>,
    xhat: Tensor<T>,
    stats: NormStats<T>,
    output: Tensor<T>,
}

impl<T: Scalar> NormUnit<T> {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv3d::new(cin, cout, 3, stride, rng),
            gamma: vec![T::one(); cout],
            beta: vec![T::zero(); cout],
        }
    }

    fn forward(&self, x: &Tensor<T>, record: bool) -> Result<(Tensor<T>, Option<UnitRecord<T>>)> {
        let z = self.conv.forward(x)?;
        let stats = NormStats::compute(&z);
        let xhat = norm::normalize(&z, &stats);
        let mut y = xhat.clone();
        let n = y.shape.spatial();
        for (c, chunk) in y.data.chunks_mut(n).enumerate() {
            let (g, b) = (self.gamma[c], self.beta[c]);
            chunk.iter_mut().for_each(|v| *v = (g * *v + b).max(T::zero()));
        }
        let rec = record.then(|| UnitRecord {
            input: x.clone(),
            xhat,
            stats,
            output: y.clone(),
        });
        Ok((y, rec))
    }

    /// Returns the input gradient and accumulates `(conv, gamma, beta)` grads.
    fn backward(&self, rec: &UnitRecord<T>, dy: Tensor<T>, grad: &mut UnitGrad<T>) -> Result<Tensor<T>> {
        let mut d = dy;
        ops::relu_backward(&mut d, &rec.output);
        let n = d.shape.spatial();
        for c in 0..d.shape.c {
            let dc = &mut d.data[c * n..(c + 1) * n];
            let xc = &rec.xhat.data[c * n..(c + 1) * n];
            let (mut dg, mut db) = (0.0f64, 0.0f64);
            for (g, x) in dc.iter().zip(xc) {
                dg += (*g * *x).as_f64();
                db += g.as_f64();
            }
            grad.gamma[c] = grad.gamma[c] + T::lit(dg);
            grad.beta[c] = grad.beta[c] + T::lit(db);
            let gamma = self.gamma[c];
            dc.iter_mut().for_each(|v| *v = *v * gamma);
        }
        let dz = norm::backward_live(&d, &rec.xhat, &rec.stats);
        self.conv.backward(&rec.input, &dz, Some(&mut grad.conv))
    }

    fn zero_grad(&self) -> UnitGrad<T> {
        UnitGrad {
            conv: self.conv.zero_grad(),
            gamma: vec![T::zero(); self.gamma.len()],
            beta: vec![T::zero(); self.beta.len()],
        }
    }

    fn cast<U: Scalar>(&self) -> NormUnit<U> {
        NormUnit {
            conv: self.conv.cast(),
            gamma: self.gamma.iter().map(|v| U::lit(v.as_f64())).collect(),
            beta: self.beta.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn params(&self) -> [&Vec<T>; 4] {
        [&self.conv.weight, &self.conv.bias, &self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> [&mut Vec<T>; 4] {
        [&mut self.conv.weight, &mut self.conv.bias, &mut self.gamma, &mut self.beta]
    }
}

struct UnitGrad<T> {
    conv: ConvGrad<T>,
    gamma: Vec<T>,
    beta: Vec<T>,
}

impl<T> UnitGrad<T> {
    fn parts(&self) -> [&Vec<T>; 4] {
        [&self.conv.weight, &self.conv.bias, &self.gamma, &self.beta]
    }
}

/// Named intermediate shapes of the fusion network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FusionShapes {
    pub stream: Shape4,
    pub upsampled: Shape4,
    pub concatenated: Shape4,
    pub joined: Shape4,
    pub output: Shape4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel<T = f32> {
    pub config: FusionConfig,
    /// Tap shape the model was built for.
    pub tap_shape: Shape4,
    /// Weight checksum of the base model this fusion was trained against.
    pub base_hash: Option<String>,
    stream_original: Vec<NormUnit<T>>,
    stream_updated: Vec<NormUnit<T>>,
    join: Vec<NormUnit<T>>,
    output: Vec<NormUnit<T>>,
    /// Private decode head when `config.detached_decoder` is set.
    decoder: Option<SegModel<T>>,
}

/// Build an untrained fusion network for activations of `tap_shape`.
pub fn build_fusion(tap_shape: Shape4, config: FusionConfig) -> Result<FusionModel<f32>> {
    FusionModel::new(tap_shape, config)
}

impl<T: Scalar> FusionModel<T> {
    pub fn shapes(tap_shape: Shape4, expansion: usize) -> Result<FusionShapes> {
        let Shape4 { c, d, h, w } = tap_shape;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 || tap_shape.is_empty() {
            return Err(Error::Shape(format!("fusion needs even tap dims, got {tap_shape}")));
        }
        if expansion == 0 {
            return Err(Error::Config("fusion expansion must be positive".into()));
        }
        let wide = c * expansion;
        Ok(FusionShapes {
            stream: Shape4::new(wide, d / 2, h / 2, w / 2),
            upsampled: Shape4::new(wide, d, h, w),
            concatenated: Shape4::new(2 * wide, d, h, w),
            joined: Shape4::new(wide, d, h, w),
            output: tap_shape,
        })
    }

    pub fn new(tap_shape: Shape4, config: FusionConfig) -> Result<Self> {
        Self::shapes(tap_shape, config.expansion)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = tap_shape.c;
        let wide = c * config.expansion;
        let stream = |rng: &mut ChaCha8Rng| {
            vec![
                NormUnit::new(c, wide, 2, rng),
                NormUnit::new(wide, wide, 1, rng),
                NormUnit::new(wide, wide, 1, rng),
            ]
        };
        let stream_original = stream(&mut rng);
        let stream_updated = stream(&mut rng);
        let join = vec![
            NormUnit::new(2 * wide, wide, 1, &mut rng),
            NormUnit::new(wide, wide, 1, &mut rng),
            NormUnit::new(wide, wide, 1, &mut rng),
        ];
        let output = vec![
            NormUnit::new(wide, c, 1, &mut rng),
            NormUnit::new(c, c, 1, &mut rng),
            NormUnit::new(c, c, 1, &mut rng),
        ];
        Ok(Self {
            config,
            tap_shape,
            base_hash: None,
            stream_original,
            stream_updated,
            join,
            output,
            decoder: None,
        })
    }

    fn units(&self) -> impl Iterator<Item = &NormUnit<T>> {
        self.stream_original
            .iter()
            .chain(&self.stream_updated)
            .chain(&self.join)
            .chain(&self.output)
    }

    fn units_mut(&mut self) -> impl Iterator<Item = &mut NormUnit<T>> {
        self.stream_original
            .iter_mut()
            .chain(&mut self.stream_updated)
            .chain(&mut self.join)
            .chain(&mut self.output)
    }

    pub fn param_count(&self) -> usize {
        let own: usize = self.units().flat_map(|u| u.params()).map(|p| p.len()).sum();
        own + self.decoder.as_ref().map_or(0, |d| d.param_count())
    }

    /// SHA-256 over all fusion parameters (and a private decoder, if any).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.units().flat_map(|u| u.params()) {
            for v in p {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        if let Some(d) = &self.decoder {
            h.update(d.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> FusionModel<U> {
        FusionModel {
            config: self.config.clone(),
            tap_shape: self.tap_shape,
            base_hash: self.base_hash.clone(),
            stream_original: self.stream_original.iter().map(NormUnit::cast).collect(),
            stream_updated: self.stream_updated.iter().map(NormUnit::cast).collect(),
            join: self.join.iter().map(NormUnit::cast).collect(),
            output: self.output.iter().map(NormUnit::cast).collect(),
            decoder: self.decoder.as_ref().map(SegModel::cast),
        }
    }

    /// The decode head that turns fused activations into predictions.
    pub fn decode_head<'a>(&'a self, base: &'a SegModel<T>) -> &'a SegModel<T> {
        self.decoder.as_ref().unwrap_or(base)
    }

    fn check_inputs(&self, f: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
        if f.shape != g.shape {
            return Err(Error::Shape(format!("fusion inputs differ: {} vs {}", f.shape, g.shape)));
        }
        if f.shape.c != self.tap_shape.c {
            return Err(Error::Shape(format!(
                "fusion built for {} channels, got {}",
                self.tap_shape.c, f.shape.c
            )));
        }
        Self::shapes(f.shape, self.config.expansion).map(|_| ())
    }

    fn forward(&self, f: &Tensor<T>, g: &Tensor<T>, record: bool) -> Result<(Tensor<T>, Vec<UnitRecord<T>>)> {
        self.check_inputs(f, g)?;
        let mut recs = Vec::new();
        let run = |units: &[NormUnit<T>], x: &Tensor<T>, recs: &mut Vec<UnitRecord<T>>| -> Result<Tensor<T>> {
            let mut cur = x.clone();
            for u in units {
                let (y, r) = u.forward(&cur, record)?;
                recs.extend(r);
                cur = y;
            }
            Ok(cur)
        };
        let a = ops::upsample2(&run(&self.stream_original, f, &mut recs)?);
        let b = ops::upsample2(&run(&self.stream_updated, g, &mut recs)?);
        let joined = run(&self.join, &Tensor::concat(&a, &b)?, &mut recs)?;
        let out = run(&self.output, &joined, &mut recs)?;
        Ok((out, recs))
    }

    /// Raw fused activation from two tap tensors.
    pub fn fuse_tensors(&self, f: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(f, g, false)?.0)
    }

    /// Parameter gradients (aligned with `units()`) given the gradient of the
    /// fused output.
    fn backward(&self, recs: &[UnitRecord<T>], dout: Tensor<T>) -> Result<Vec<UnitGrad<T>>> {
        let mut grads: Vec<UnitGrad<T>> = self.units().map(NormUnit::zero_grad).collect();
        let units: Vec<&NormUnit<T>> = self.units().collect();
        // Records are in forward order, which matches `units()`.
        let n_stream = self.stream_original.len();
        let join_start = 2 * n_stream;
        let mut d = dout;
        for i in (join_start..units.len()).rev() {
            d = units[i].backward(&recs[i], d, &mut grads[i])?;
        }
        let wide = self.tap_shape.c * self.config.expansion;
        let (da, db) = d.split(wide);
        for (range, dup) in [(0..n_stream, da), (n_stream..join_start, db)] {
            let pre = recs[range.end - 1].output.shape;
            let mut d = ops::upsample2_backward(&dup, pre);
            for i in range.rev() {
                d = units[i].backward(&recs[i], d, &mut grads[i])?;
            }
        }
        Ok(grads)
    }
}

impl FusionModel<f32> {
    /// Fuse the original and updated activations.
    pub fn fuse(&self, f: &FeatureMap<f32>, f_updated: &FeatureMap<f32>) -> Result<FeatureMap<f32>> {
        if f.tap_level != f_updated.tap_level {
            return Err(Error::Shape("fusion inputs come from different taps".into()));
        }
        let out = self.fuse_tensors(&f.data, &f_updated.data)?;
        f.with_data(out, Provenance::Fused)
    }

    /// Decode a fused activation with the appropriate head.
    pub fn decode(&self, base: &SegModel<f32>, fused: &FeatureMap<f32>) -> Result<PredictionVolume> {
        self.decode_head(base).decode_from(fused)
    }

    /// Refuse a base model other than the one this fusion was trained on.
    pub fn check_base(&self, base: &SegModel<f32>) -> Result<()> {
        match &self.base_hash {
            Some(h) if *h != base.checksum() => Err(Error::Mismatch(
                "fusion model was trained against a different base model".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Pre-computed inputs for one fusion training case.
#[derive(Clone, Debug)]
pub struct FusionSample {
    pub original: FeatureMap<f32>,
    pub updated: FeatureMap<f32>,
    pub label: Vec<bool>,
    pub edited_slice: usize,
    /// Slices outside the edit's neighbourhood, where the loss is taken.
    pub far_slices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub update: UpdateConfig,
    pub radius: usize,
    /// Seed of the per-epoch case shuffle.
    pub seed: u64,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            loss: LossKind::Hybrid,
            update: UpdateConfig::default(),
            radius: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Cases whose simulated edit diverged and fell back to the original map.
    pub diverged_updates: usize,
}

/// Simulate the worst-slice edit on a case and cache `(f, f')`.
pub fn prepare_sample(
    seg: &SegModel<f32>,
    volume: &Volume,
    label: &MaskVolume,
    update: &UpdateConfig,
    radius: usize,
) -> Result<(FusionSample, bool)> {
    let (pred, f) = seg.predict(volume)?;
    let s = worst_slice(&pred, label)?;
    let edit = SliceEdit::new(s, label.axial(s).to_vec());
    let (updated, trace) = update_features(seg, &f, &edit, update)?;
    let near = neighborhood(s, radius, label.dims.d, &[]);
    let far_slices: Vec<usize> = (0..label.dims.d).filter(|z| !near.contains(z)).collect();
    Ok((
        FusionSample {
            original: f,
            updated,
            label: label.data.clone(),
            edited_slice: s,
            far_slices,
        },
        trace.diverged,
    ))
}

/// Train fusion weights with the base model frozen. Loss is taken on the
/// decoded fused prediction over slices outside the edit's neighbourhood.
pub fn train_fusion(
    seg: &SegModel<f32>,
    fusion: &mut FusionModel<f32>,
    cases: &[(Volume, MaskVolume)],
    cfg: &FusionTrainConfig,
) -> Result<FusionTrainReport> {
    cfg.update.validate()?;
    let prepared = crate::exec::map_slice(cases, |(v, m)| prepare_sample(seg, v, m, &cfg.update, cfg.radius));
    let mut samples = Vec::with_capacity(cases.len());
    let mut report = FusionTrainReport::default();
    for p in prepared {
        let (s, diverged) = p?;
        report.diverged_updates += diverged as usize;
        samples.push(s);
    }
    let epochs = train_fusion_on(seg, fusion, &samples, cfg)?;
    report.epoch_losses = epochs;
    Ok(report)
}

/// Train on cached samples; returns per-epoch mean loss.
pub fn train_fusion_on(
    seg: &SegModel<f32>,
    fusion: &mut FusionModel<f32>,
    samples: &[FusionSample],
    cfg: &FusionTrainConfig,
) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    fusion.check_base(seg)?;
    if fusion.config.detached_decoder && fusion.decoder.is_none() {
        fusion.decoder = Some(seg.clone());
    }
    fusion.base_hash = Some(seg.checksum());
    let usable: Vec<&FusionSample> = samples.iter().filter(|s| !s.far_slices.is_empty()).collect();
    if usable.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("no fusion training case has slices outside the edit neighbourhood".into()));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = usable[i];
            let (fused, recs) = fusion.forward(&s.original.data, &s.updated.data, true)?;
            let fused = s.original.with_data(fused, Provenance::Fused)?;
            let head = fusion.decode_head(seg);
            let (logits, tape) = head.decode_recorded(&fused)?;
            let lv = seg_loss(&logits, &s.label, cfg.loss, Some(&s.far_slices))?;
            if !lv.value.is_finite() {
                return Err(Error::Divergence(format!("non-finite fusion loss at epoch {epoch}")));
            }
            let (dfused, dec_grads) = if fusion.decoder.is_some() {
                let (d, g) = head.decode_backward_params(&tape, &lv.grad)?;
                (d, Some(g))
            } else {
                (head.decode_backward(&tape, &lv.grad)?, None)
            };
            let grads = fusion.backward(&recs, dfused)?;
            let finite = grads.iter().all(|g| g.parts().iter().all(|p| p.iter().all(|v| v.is_finite())));
            if !finite {
                return Err(Error::Divergence(format!("non-finite fusion gradient at epoch {epoch}")));
            }
            adam.tick();
            let mut slot = 0;
            for (u, g) in fusion.units_mut().zip(&grads) {
                for (p, gp) in u.params_mut().into_iter().zip(g.parts()) {
                    adam.update(slot, p, gp);
                    slot += 1;
                }
            }
            if let (Some(dec), Some(dg)) = (fusion.decoder.as_mut(), dec_grads) {
                for (c, g) in dec.decode_convs_mut().into_iter().zip(&dg) {
                    adam.update(slot, &mut c.weight, &g.weight);
                    adam.update(slot + 1, &mut c.bias, &g.bias);
                    slot += 2;
                }
            }
            total += lv.value;
        }
        losses.push(total / usable.len() as f64);
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionManifest {
    pub kind: String,
    pub config: FusionConfig,
    pub tap_shape: Shape4,
    pub base_model_hash: Option<String>,
    pub param_count: usize,
    pub weights_sha256: String,
}

impl FusionManifest {
    pub const KIND: &'static str = "fusion";
}

pub fn save_fusion(model: &FusionModel<f32>, path: impl AsRef<Path>) -> Result<FusionManifest> {
    let manifest = FusionManifest {
        kind: FusionManifest::KIND.into(),
        config: model.config.clone(),
        tap_shape: model.tap_shape,
        base_model_hash: model.base_hash.clone(),
        param_count: model.param_count(),
        weights_sha256: model.checksum(),
    };
    let mut params: Vec<&[f32]> = model.units().flat_map(|u| u.params()).map(|p| p.as_slice()).collect();
    if let Some(d) = &model.decoder {
        params.extend(d.convs().into_iter().flat_map(|c| [c.weight.as_slice(), c.bias.as_slice()]));
    }
    write_checkpoint(path.as_ref(), &manifest, &params)?;
    Ok(manifest)
}

/// Load a fusion checkpoint, refusing one trained against a different base.
pub fn load_fusion(path: impl AsRef<Path>, base: &SegModel<f32>) -> Result<(FusionModel<f32>, FusionManifest)> {
    let (manifest, flat): (FusionManifest, Vec<f32>) = read_checkpoint(path.as_ref())?;
    if manifest.kind != FusionManifest::KIND {
        return Err(Error::Mismatch(format!("expected a fusion checkpoint, found {:?}", manifest.kind)));
    }
    let base_hash = base.checksum();
    if manifest.base_model_hash.as_deref().is_some_and(|h| h != base_hash) {
        return Err(Error::Mismatch("fusion checkpoint belongs to a different base model".into()));
    }
    if manifest.tap_shape.c != base.config.width_at_tap() {
        return Err(Error::Mismatch(format!(
            "fusion tap has {} channels, base model tap has {}",
            manifest.tap_shape.c,
            base.config.width_at_tap()
        )));
    }
    let mut model = FusionModel::new(manifest.tap_shape, manifest.config.clone())?;
    model.base_hash = manifest.base_model_hash.clone();
    if model.config.detached_decoder {
        model.decoder = Some(base.clone());
    }
    if manifest.param_count != model.param_count() {
        return Err(Error::Mismatch("parameter count disagrees with architecture".into()));
    }
    let mut slots: Vec<&mut Vec<f32>> = Vec::new();
    let FusionModel {
        stream_original,
        stream_updated,
        join,
        output,
        decoder,
        ..
    } = &mut model;
    for u in stream_original.iter_mut().chain(stream_updated).chain(join).chain(output) {
        slots.extend(u.params_mut());
    }
    if let Some(d) = decoder {
        slots.extend(d.convs_mut().into_iter().flat_map(|c| [&mut c.weight, &mut c.bias]));
    }
    scatter_params(&flat, slots)?;
    if model.checksum() != manifest.weights_sha256 {
        return Err(Error::Mismatch("fusion weight checksum does not match manifest".into()));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests;
