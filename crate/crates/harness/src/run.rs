//! Fold training and the simulated-user evaluation loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use propaseg_core::backbone::{build_backbone, train_backbone, SegModel};
use propaseg_core::fusion::{build_fusion, train_fusion, FusionModel};
use propaseg_core::metrics::{per_slice_dsc, worst_slice, worst_slice_excluding, MetricReport};
use propaseg_core::orchestrator::{neighborhood, Session};
use propaseg_core::update::{update_features, SliceEdit, UpdateTrace};
use propaseg_core::volume::{MaskVolume, PredictionVolume};
use propaseg_core::{Error, Result};

use crate::cases::{partition, train_ids, CaseSpec};
use crate::config::ExperimentConfig;

/// Half-width of the reporting window around the first edited slice.
pub const VOI_HALF_WIDTH: usize = 2;

/// Reporting window: the slice and up to `VOI_HALF_WIDTH` neighbours each side.
pub fn voi_slices(s: usize, depth: usize) -> Vec<usize> {
    neighborhood(s, VOI_HALF_WIDTH, depth, &[])
}

/// Trained models for one fold.
#[derive(Clone, Debug)]
pub struct FoldModels {
    pub seg: Arc<SegModel<f32>>,
    pub fusion: Arc<FusionModel<f32>>,
    pub backbone_losses: Vec<f64>,
    pub fusion_losses: Vec<f64>,
    pub diverged_updates: usize,
}

/// Backbone on clean training cases, then fusion on their faded variants.
pub fn train_fold(cfg: &ExperimentConfig, train: &[usize]) -> Result<FoldModels> {
    let seg = train_backbone_only(cfg, train)?;
    let faded = train
        .iter()
        .map(|&id| CaseSpec::new(cfg, id).faded())
        .collect::<Result<Vec<_>>>()?;
    let tap = seg.0.tap_shape(cfg.phantom.dims)?;
    let mut fusion = build_fusion(tap, cfg.fusion_config())?;
    let report = train_fusion(&seg.0, &mut fusion, &faded, &cfg.fusion_train_config())?;
    if report.epoch_losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::Divergence("fusion training loss is not finite".into()));
    }
    Ok(FoldModels {
        seg: Arc::new(seg.0),
        fusion: Arc::new(fusion),
        backbone_losses: seg.1,
        fusion_losses: report.epoch_losses,
        diverged_updates: report.diverged_updates,
    })
}

fn train_backbone_only(cfg: &ExperimentConfig, train: &[usize]) -> Result<(SegModel<f32>, Vec<f64>)> {
    let clean = train
        .iter()
        .map(|&id| CaseSpec::new(cfg, id).clean())
        .collect::<Result<Vec<_>>>()?;
    let mut seg = build_backbone(cfg.backbone_config())?;
    let report = train_backbone(&mut seg, &clean, &cfg.train_config())?;
    Ok((seg, report.epoch_losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub whole: MetricReport,
    pub voi: MetricReport,
}

impl RegionMetrics {
    fn compute(pred: &PredictionVolume, label: &MaskVolume, voi: &[usize]) -> Result<Self> {
        let p = pred.binarize(label.spacing);
        Ok(Self {
            whole: MetricReport::compute(&p, label)?,
            voi: MetricReport::compute_on(&p, label, voi)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub edited_slice: usize,
    /// DSC of the refined prediction on the slice just edited.
    pub edited_slice_dsc: f64,
    pub update_iterations: usize,
    pub fell_back: bool,
    pub metrics: RegionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: usize,
    pub fade_start: usize,
    /// Slices of the reporting window, centred on the first edit.
    pub voi: Vec<usize>,
    pub baseline: RegionMetrics,
    pub update_only: Vec<StepReport>,
    pub fused: Vec<StepReport>,
}

/// Run the worst-slice edit loop on one held-out case for both variants.
///
/// Each variant picks its own next slice from its current refined output,
/// skipping slices it already edited. The updated activation for a slice is
/// shared between variants since both start from the same original map.
pub fn evaluate_case(cfg: &ExperimentConfig, models: &FoldModels, spec: &CaseSpec) -> Result<CaseReport> {
    let (volume, label) = spec.faded()?;
    let session_cfg = cfg.session_config();
    let mut fused = Session::new(models.seg.clone(), Some(models.fusion.clone()), &volume, session_cfg.clone())?;
    let mut plain = Session::from_parts(
        models.seg.clone(),
        None,
        fused.baseline().clone(),
        fused.feature().clone(),
        session_cfg,
    )?;
    let depth = label.dims.d;
    let first = worst_slice(fused.baseline(), &label)?;
    let voi = voi_slices(first, depth);
    let baseline = RegionMetrics::compute(fused.baseline(), &label, &voi)?;

    let mut cache: BTreeMap<usize, (propaseg_core::backbone::FeatureMap<f32>, UpdateTrace)> = BTreeMap::new();
    let mut run_step = |session: &mut Session, step: usize| -> Result<StepReport> {
        let done: Vec<usize> = session.history().iter().map(|r| r.edit.slice).collect();
        let s = if step == 1 {
            first
        } else {
            worst_slice_excluding(session.refined(), &label, &done)?
        };
        let edit = SliceEdit::new(s, label.axial(s).to_vec());
        if !cache.contains_key(&s) {
            let upd = update_features(&models.seg, session.feature(), &edit, &cfg.update_config())?;
            cache.insert(s, upd);
        }
        let (updated, trace) = cache[&s].clone();
        let iterations = trace.iterations;
        session.propagate_updated(edit, updated, trace)?;
        let record = session.history().last().expect("edit recorded");
        let refined = session.refined();
        let edited = per_slice_dsc(&refined.binarize(label.spacing), &label)?[s];
        Ok(StepReport {
            step,
            edited_slice: s,
            edited_slice_dsc: edited,
            update_iterations: iterations,
            fell_back: record.fell_back,
            metrics: RegionMetrics::compute(refined, &label, &voi)?,
        })
    };

    let mut update_only = Vec::with_capacity(cfg.steps);
    let mut fused_steps = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps.min(depth) {
        update_only.push(run_step(&mut plain, step)?);
        fused_steps.push(run_step(&mut fused, step)?);
    }
    Ok(CaseReport {
        id: spec.id,
        fade_start: spec.band.start,
        voi,
        baseline,
        update_only,
        fused: fused_steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub status: FoldStatus,
    pub error: Option<String>,
    pub train_ids: Vec<usize>,
    pub eval_ids: Vec<usize>,
    pub backbone_losses: Vec<f64>,
    pub fusion_losses: Vec<f64>,
    pub diverged_updates: usize,
    pub backbone_sha256: Option<String>,
    pub fusion_sha256: Option<String>,
    pub cases: Vec<CaseReport>,
}

impl FoldReport {
    fn failed(fold: usize, train: Vec<usize>, eval: Vec<usize>, err: &Error) -> Self {
        Self {
            fold,
            status: FoldStatus::Failed,
            error: Some(err.to_string()),
            train_ids: train,
            eval_ids: eval,
            backbone_losses: Vec::new(),
            fusion_losses: Vec::new(),
            diverged_updates: 0,
            backbone_sha256: None,
            fusion_sha256: None,
            cases: Vec::new(),
        }
    }
}

/// Train and evaluate one fold. Errors are captured in the report.
pub fn run_fold(cfg: &ExperimentConfig, fold: usize, train: Vec<usize>, eval: Vec<usize>) -> FoldReport {
    let outcome = train_fold(cfg, &train).and_then(|models| {
        let cases = eval
            .iter()
            .map(|&id| evaluate_case(cfg, &models, &CaseSpec::new(cfg, id)))
            .collect::<Result<Vec<_>>>()?;
        Ok((models, cases))
    });
    match outcome {
        Ok((models, cases)) => FoldReport {
            fold,
            status: FoldStatus::Ok,
            error: None,
            train_ids: train,
            eval_ids: eval,
            backbone_losses: models.backbone_losses,
            fusion_losses: models.fusion_losses,
            diverged_updates: models.diverged_updates,
            backbone_sha256: Some(models.seg.checksum()),
            fusion_sha256: Some(models.fusion.checksum()),
            cases,
        },
        Err(e) => {
            log::error!("fold {fold} failed: {e}");
            FoldReport::failed(fold, train, eval, &e)
        }
    }
}

/// All folds of the cross-validation, run concurrently when parallelism is on.
pub fn run_folds(cfg: &ExperimentConfig) -> Result<Vec<FoldReport>> {
    cfg.validate()?;
    let parts = partition(cfg.cases, cfg.folds, cfg.seed);
    Ok(propaseg_core::exec::map_range(cfg.folds, |k| {
        log::info!("fold {k}: training on {} cases, evaluating {}", cfg.cases - parts[k].len(), parts[k].len());
        run_fold(cfg, k, train_ids(&parts, k), parts[k].clone())
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCase {
    pub id: usize,
    pub edited_slice: usize,
    pub whole_dsc: f64,
    pub voi_dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationFold {
    pub fold: usize,
    pub status: FoldStatus,
    pub error: Option<String>,
    /// Per tap level, the single-edit update-only results.
    pub levels: BTreeMap<usize, Vec<LevelCase>>,
}

/// Single worst-slice edit with the update-only variant, the activation
/// taken at each requested decoder level of one backbone per fold.
pub fn run_ablation_folds(cfg: &ExperimentConfig) -> Result<Vec<AblationFold>> {
    cfg.validate()?;
    let parts = partition(cfg.cases, cfg.folds, cfg.seed);
    Ok(propaseg_core::exec::map_range(cfg.folds, |k| {
        let outcome = ablation_fold(cfg, &train_ids(&parts, k), &parts[k]);
        match outcome {
            Ok(levels) => AblationFold {
                fold: k,
                status: FoldStatus::Ok,
                error: None,
                levels,
            },
            Err(e) => {
                log::error!("ablation fold {k} failed: {e}");
                AblationFold {
                    fold: k,
                    status: FoldStatus::Failed,
                    error: Some(e.to_string()),
                    levels: BTreeMap::new(),
                }
            }
        }
    }))
}

fn ablation_fold(cfg: &ExperimentConfig, train: &[usize], eval: &[usize]) -> Result<BTreeMap<usize, Vec<LevelCase>>> {
    let (seg, _) = train_backbone_only(cfg, train)?;
    let session_cfg = cfg.session_config();
    let mut out = BTreeMap::new();
    for &level in &cfg.tap_levels {
        let model = Arc::new(seg.with_tap_level(level)?);
        let mut rows = Vec::with_capacity(eval.len());
        for &id in eval {
            let (volume, label) = CaseSpec::new(cfg, id).faded()?;
            let mut session = Session::new(model.clone(), None, &volume, session_cfg.clone())?;
            let s = worst_slice(session.baseline(), &label)?;
            session.propagate_edit(SliceEdit::new(s, label.axial(s).to_vec()))?;
            let m = RegionMetrics::compute(session.refined(), &label, &voi_slices(s, label.dims.d))?;
            rows.push(LevelCase {
                id,
                edited_slice: s,
                whole_dsc: m.whole.dsc,
                voi_dsc: m.voi.dsc,
            });
        }
        out.insert(level, rows);
    }
    Ok(out)
}
