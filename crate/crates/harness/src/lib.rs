//! Simulated-user benchmark: k-fold training on synthetic phantoms, worst-slice
//! edit sequences for the update-only and fused variants, and report files.

pub mod cases;
pub mod config;
pub mod report;
pub mod run;

use std::path::Path;

use propaseg_core::Result;

pub use cases::{case_seed, partition, train_ids, CaseSpec};
pub use config::{BackboneSettings, CorruptionSettings, ExperimentConfig, FusionSettings, PhantomSettings};
pub use report::{AblationOutcome, ExperimentOutcome, Stat};
pub use run::{evaluate_case, run_fold, train_fold, CaseReport, FoldModels, FoldReport, FoldStatus, StepReport};

/// Run the cross-validated experiment and write its reports into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    let folds = run::run_folds(cfg)?;
    report::write_experiment(out, cfg, folds)
}

/// Sweep the decoder level at which the activation is taken and write the table.
pub fn run_decoder_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<AblationOutcome> {
    let folds = run::run_ablation_folds(cfg)?;
    report::write_ablation(out, cfg, folds)
}
