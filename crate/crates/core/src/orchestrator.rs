//! Composing the refined prediction from the neighbour and far branches, and
//! running sequences of edits.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, Provenance, SegModel};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::update::{update_features, SliceEdit, UpdateConfig, UpdateTrace};
use crate::volume::{Dims3, PredictionVolume, Volume};

pub const DEFAULT_RADIUS: usize = 2;

/// Slices within `radius` of `s`, clamped to `[0, depth)`, minus those in
/// `claimed`; `s` itself is always included. Sorted ascending.
pub fn neighborhood(s: usize, radius: usize, depth: usize, claimed: &[usize]) -> Vec<usize> {
    let lo = s.saturating_sub(radius);
    let hi = (s + radius).min(depth.saturating_sub(1));
    (lo..=hi).filter(|&z| z == s || !claimed.contains(&z)).collect()
}

/// Which branch produced an output slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "branch", rename_all = "snake_case")]
pub enum SliceBranch {
    /// No edit yet.
    Baseline,
    /// Decoded from the updated activation of edit `edit`.
    Neighbor { edit: usize },
    /// Average of far-branch predictions over all edits so far.
    Far,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub update: UpdateConfig,
    pub radius: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            update: UpdateConfig::default(),
            radius: DEFAULT_RADIUS,
        }
    }
}

/// One applied edit and what it produced.
#[derive(Clone, Debug)]
pub struct EditRecord {
    pub edit: SliceEdit,
    pub neighborhood: Vec<usize>,
    pub trace: UpdateTrace,
    /// The update diverged and the neighbour branch used the original map.
    pub fell_back: bool,
    pub updated: FeatureMap<f32>,
    pub fused: Option<FeatureMap<f32>>,
    /// Refined prediction after this edit.
    pub refined: PredictionVolume,
    pub provenance: Vec<SliceBranch>,
}

/// Interactive refinement state for one volume.
///
/// Without a fusion model the far branch decodes the updated activation
/// directly, which gives the update-only variant.
#[derive(Clone, Debug)]
pub struct Session {
    seg: Arc<SegModel<f32>>,
    fusion: Option<Arc<FusionModel<f32>>>,
    config: SessionConfig,
    baseline: PredictionVolume,
    feature: FeatureMap<f32>,
    history: Vec<EditRecord>,
    claimed: BTreeSet<usize>,
    far_sum: Vec<f64>,
    refined: PredictionVolume,
    provenance: Vec<SliceBranch>,
}

impl Session {
    pub fn new(
        seg: Arc<SegModel<f32>>,
        fusion: Option<Arc<FusionModel<f32>>>,
        volume: &Volume,
        config: SessionConfig,
    ) -> Result<Self> {
        let (baseline, feature) = seg.predict(volume)?;
        Self::from_parts(seg, fusion, baseline, feature, config)
    }

    pub fn from_parts(
        seg: Arc<SegModel<f32>>,
        fusion: Option<Arc<FusionModel<f32>>>,
        baseline: PredictionVolume,
        feature: FeatureMap<f32>,
        config: SessionConfig,
    ) -> Result<Self> {
        config.update.validate()?;
        if let Some(fm) = &fusion {
            fm.check_base(&seg)?;
        }
        if feature.context.output_dims != baseline.dims {
            return Err(Error::Shape("feature map and baseline prediction disagree".into()));
        }
        let d = baseline.dims.d;
        Ok(Self {
            seg,
            fusion,
            config,
            refined: baseline.clone(),
            far_sum: vec![0.0; baseline.prob.len()],
            baseline,
            feature,
            history: Vec::new(),
            claimed: BTreeSet::new(),
            provenance: vec![SliceBranch::Baseline; d],
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.baseline.dims
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn baseline(&self) -> &PredictionVolume {
        &self.baseline
    }

    pub fn feature(&self) -> &FeatureMap<f32> {
        &self.feature
    }

    /// Current refined prediction; the baseline before any edit.
    pub fn refined(&self) -> &PredictionVolume {
        &self.refined
    }

    pub fn provenance(&self) -> &[SliceBranch] {
        &self.provenance
    }

    pub fn history(&self) -> &[EditRecord] {
        &self.history
    }

    pub fn has_fusion(&self) -> bool {
        self.fusion.is_some()
    }

    /// Reject an edit that cannot be applied, without changing state.
    pub fn check_edit(&self, edit: &SliceEdit) -> Result<()> {
        edit.validate(self.dims())?;
        if self.history.iter().any(|r| r.edit.slice == edit.slice) {
            return Err(Error::DuplicateSlice(edit.slice));
        }
        Ok(())
    }

    /// Apply one edit and return the refined prediction.
    pub fn propagate_edit(&mut self, edit: SliceEdit) -> Result<&PredictionVolume> {
        self.check_edit(&edit)?;
        let (updated, trace) = update_features(&self.seg, &self.feature, &edit, &self.config.update)?;
        self.propagate_updated(edit, updated, trace)
    }

    /// Apply an edit whose updated activation was already computed from this
    /// session's original activation.
    pub fn propagate_updated(
        &mut self,
        edit: SliceEdit,
        updated: FeatureMap<f32>,
        trace: UpdateTrace,
    ) -> Result<&PredictionVolume> {
        self.check_edit(&edit)?;
        let dims = self.dims();
        let claimed: Vec<usize> = self.claimed.iter().copied().collect();
        let near = neighborhood(edit.slice, self.config.radius, dims.d, &claimed);
        let fell_back = trace.diverged;
        let updated = self
            .feature
            .with_data(if fell_back { self.feature.data.clone() } else { updated.data }, Provenance::Updated)?;
        let near_pred = self.seg.decode_from(&updated)?;
        let (fused, far_pred) = match &self.fusion {
            Some(fm) => {
                let fused = fm.fuse(&self.feature, &updated)?;
                let pred = fm.decode(&self.seg, &fused)?;
                (Some(fused), pred)
            }
            None => (None, near_pred.clone()),
        };

        let k = self.history.len();
        let plane = dims.plane();
        for &z in &near {
            self.refined.axial_mut(z).copy_from_slice(near_pred.axial(z));
            self.provenance[z] = SliceBranch::Neighbor { edit: k };
            self.claimed.insert(z);
        }
        let count = (k + 1) as f64;
        for z in (0..dims.d).filter(|z| !self.claimed.contains(z)) {
            let sums = &mut self.far_sum[z * plane..(z + 1) * plane];
            let out = &mut self.refined.prob[z * plane..(z + 1) * plane];
            for ((acc, o), p) in sums.iter_mut().zip(out).zip(far_pred.axial(z)) {
                *acc += *p as f64;
                *o = (*acc / count) as f32;
            }
            self.provenance[z] = SliceBranch::Far;
        }
        self.history.push(EditRecord {
            edit,
            neighborhood: near,
            trace,
            fell_back,
            updated,
            fused,
            refined: self.refined.clone(),
            provenance: self.provenance.clone(),
        });
        Ok(&self.refined)
    }

    /// Apply edits in order. Duplicated slice indices (within the list or
    /// against earlier edits) reject the whole sequence before any work.
    pub fn apply_edit_sequence(&mut self, edits: Vec<SliceEdit>) -> Result<&PredictionVolume> {
        let mut seen = BTreeSet::new();
        for e in &edits {
            self.check_edit(e)?;
            if !seen.insert(e.slice) {
                return Err(Error::DuplicateSlice(e.slice));
            }
        }
        for e in edits {
            self.propagate_edit(e)?;
        }
        Ok(&self.refined)
    }
}
