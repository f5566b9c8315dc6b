//! Aggregation across folds and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use propaseg_core::metrics::MetricReport;
use propaseg_core::Result;

use crate::config::ExperimentConfig;
use crate::run::{AblationFold, FoldReport, FoldStatus, RegionMetrics};

pub const VARIANTS: [&str; 3] = ["baseline", "update_only", "fused"];
pub const REGIONS: [&str; 2] = ["voi", "whole"];
pub const METRICS: [&str; 4] = ["dsc", "hd95_mm", "sensitivity", "specificity"];

/// Mean and sample standard deviation across folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Self { mean, std, n })
    }
}

fn metric(r: &MetricReport, name: &str) -> Option<f64> {
    match name {
        "dsc" => Some(r.dsc),
        "hd95_mm" => Some(r.hd95_mm),
        "sensitivity" => r.sensitivity,
        "specificity" => r.specificity,
        _ => None,
    }
}

fn region<'a>(m: &'a RegionMetrics, name: &str) -> &'a MetricReport {
    if name == "voi" {
        &m.voi
    } else {
        &m.whole
    }
}

/// Key: (variant, region, step, metric). Baseline is step 0.
pub type AggregateKey = (&'static str, &'static str, usize, &'static str);

/// Per-fold case means, then mean ± std across successful folds.
pub fn aggregate(folds: &[FoldReport]) -> BTreeMap<AggregateKey, Stat> {
    let mut per_fold: BTreeMap<AggregateKey, Vec<f64>> = BTreeMap::new();
    for fold in folds.iter().filter(|f| f.status == FoldStatus::Ok) {
        let mut sums: BTreeMap<AggregateKey, Vec<f64>> = BTreeMap::new();
        for case in &fold.cases {
            let mut push = |variant, step, m: &RegionMetrics| {
                for r in REGIONS {
                    for name in METRICS {
                        if let Some(v) = metric(region(m, r), name) {
                            sums.entry((variant, r, step, name)).or_default().push(v);
                        }
                    }
                }
            };
            push(VARIANTS[0], 0, &case.baseline);
            for s in &case.update_only {
                push(VARIANTS[1], s.step, &s.metrics);
            }
            for s in &case.fused {
                push(VARIANTS[2], s.step, &s.metrics);
            }
            if let Some(s) = case.fused.first() {
                sums.entry(("edit", "edited_slice", 1, "dsc")).or_default().push(s.edited_slice_dsc);
            }
        }
        for (k, v) in sums {
            per_fold.entry(k).or_default().push(v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    per_fold
        .into_iter()
        .filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s)))
        .collect()
}

fn csv_err(e: csv::Error) -> propaseg_core::Error {
    propaseg_core::Error::Io(std::io::Error::other(e))
}

pub fn aggregate_csv(agg: &BTreeMap<AggregateKey, Stat>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "region", "step", "metric", "mean", "std", "folds"]).map_err(csv_err)?;
    for ((variant, region, step, name), s) in agg {
        w.write_record([
            variant.to_string(),
            region.to_string(),
            step.to_string(),
            name.to_string(),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.std),
            s.n.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| propaseg_core::Error::Io(e.into_error()))
}

/// Whole-volume DSC against edit step; step 0 is the baseline for both variants.
pub fn steps_csv(agg: &BTreeMap<AggregateKey, Stat>, steps: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "update_only_mean", "update_only_std", "fused_mean", "fused_std"])
        .map_err(csv_err)?;
    for step in 0..=steps {
        let mut row = vec![step.to_string()];
        for variant in &VARIANTS[1..] {
            let key = if step == 0 { ("baseline", "whole", 0, "dsc") } else { (*variant, "whole", step, "dsc") };
            match agg.get(&key) {
                Some(s) => row.extend([format!("{:.6}", s.mean), format!("{:.6}", s.std)]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| propaseg_core::Error::Io(e.into_error()))
}

fn cell(s: Option<&Stat>, digits: usize) -> String {
    match s {
        Some(s) => format!("{:.*} ± {:.*}", digits, s.mean, digits, s.std),
        None => "n/a".into(),
    }
}

/// Plain-text tables: variants × regions after the first edit, then DSC by step.
pub fn summary_text(cfg: &ExperimentConfig, folds: &[FoldReport], agg: &BTreeMap<AggregateKey, Stat>) -> String {
    let mut out = String::new();
    let ok = folds.iter().filter(|f| f.status == FoldStatus::Ok).count();
    let _ = writeln!(
        out,
        "family {:?}, {} cases, {} folds ({} ok), seed {}",
        cfg.family, cfg.cases, cfg.folds, ok, cfg.seed
    );
    for f in folds.iter().filter(|f| f.status == FoldStatus::Failed) {
        let _ = writeln!(out, "fold {} FAILED: {}", f.fold, f.error.as_deref().unwrap_or("unknown"));
    }
    let _ = writeln!(out, "\nafter one worst-slice edit");
    let _ = writeln!(
        out,
        "{:<12} {:>18} {:>18} {:>18} {:>18}",
        "variant", "voi dsc", "voi hd95 mm", "whole dsc", "whole hd95 mm"
    );
    for variant in VARIANTS {
        let step = if variant == "baseline" { 0 } else { 1 };
        let _ = writeln!(
            out,
            "{:<12} {:>18} {:>18} {:>18} {:>18}",
            variant,
            cell(agg.get(&(variant, "voi", step, "dsc")), 4),
            cell(agg.get(&(variant, "voi", step, "hd95_mm")), 2),
            cell(agg.get(&(variant, "whole", step, "dsc")), 4),
            cell(agg.get(&(variant, "whole", step, "hd95_mm")), 2),
        );
    }
    let _ = writeln!(
        out,
        "edited slice dsc: {}",
        cell(agg.get(&("edit", "edited_slice", 1, "dsc")), 4)
    );
    let _ = writeln!(out, "\nwhole-volume dsc by edit step");
    let _ = writeln!(out, "{:<6} {:>18} {:>18}", "step", "update_only", "fused");
    for step in 0..=cfg.steps {
        let get = |v: &'static str| {
            let key = if step == 0 { ("baseline", "whole", 0, "dsc") } else { (v, "whole", step, "dsc") };
            cell(agg.get(&key), 4)
        };
        let _ = writeln!(out, "{:<6} {:>18} {:>18}", step, get("update_only"), get("fused"));
    }
    out
}

/// Outcome of a full run.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub folds: Vec<FoldReport>,
    pub aggregate: BTreeMap<AggregateKey, Stat>,
    pub summary: String,
}

impl ExperimentOutcome {
    pub fn failed_folds(&self) -> usize {
        self.folds.iter().filter(|f| f.status == FoldStatus::Failed).count()
    }
}

/// Write `config.json`, `fold_<k>.json`, `aggregate.csv`, `steps.csv` and
/// `summary.txt` into `dir`.
pub fn write_experiment(dir: &Path, cfg: &ExperimentConfig, folds: Vec<FoldReport>) -> Result<ExperimentOutcome> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    for f in &folds {
        fs::write(dir.join(format!("fold_{}.json", f.fold)), serde_json::to_vec_pretty(f)?)?;
    }
    let agg = aggregate(&folds);
    fs::write(dir.join("aggregate.csv"), aggregate_csv(&agg)?)?;
    fs::write(dir.join("steps.csv"), steps_csv(&agg, cfg.steps)?)?;
    let summary = summary_text(cfg, &folds, &agg);
    fs::write(dir.join("summary.txt"), &summary)?;
    Ok(ExperimentOutcome {
        folds,
        aggregate: agg,
        summary,
    })
}

/// Per level: (whole-volume DSC, VoI DSC) mean ± std across folds.
pub fn aggregate_ablation(folds: &[AblationFold]) -> BTreeMap<usize, (Stat, Stat)> {
    let mut acc: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for fold in folds.iter().filter(|f| f.status == FoldStatus::Ok) {
        for (&level, rows) in &fold.levels {
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let e = acc.entry(level).or_default();
            e.0.push(rows.iter().map(|r| r.whole_dsc).sum::<f64>() / n);
            e.1.push(rows.iter().map(|r| r.voi_dsc).sum::<f64>() / n);
        }
    }
    acc.into_iter()
        .filter_map(|(l, (w, v))| Some((l, (Stat::of(&w)?, Stat::of(&v)?))))
        .collect()
}

/// Level with the highest mean whole-volume DSC; ties go to the lower level.
pub fn ablation_winner(agg: &BTreeMap<usize, (Stat, Stat)>) -> Option<usize> {
    agg.iter()
        .fold(None, |best: Option<(usize, f64)>, (&l, (w, _))| match best {
            Some((_, m)) if m >= w.mean => best,
            _ => Some((l, w.mean)),
        })
        .map(|(l, _)| l)
}

pub fn ablation_csv(agg: &BTreeMap<usize, (Stat, Stat)>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["level", "whole_dsc_mean", "whole_dsc_std", "voi_dsc_mean", "voi_dsc_std", "folds"])
        .map_err(csv_err)?;
    for (level, (whole, voi)) in agg {
        w.write_record([
            level.to_string(),
            format!("{:.6}", whole.mean),
            format!("{:.6}", whole.std),
            format!("{:.6}", voi.mean),
            format!("{:.6}", voi.std),
            whole.n.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| propaseg_core::Error::Io(e.into_error()))
}

/// One column per decoder level.
pub fn ablation_table(cfg: &ExperimentConfig, agg: &BTreeMap<usize, (Stat, Stat)>) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "dsc");
    for l in &cfg.tap_levels {
        let _ = write!(out, " {:>18}", format!("level {l}"));
    }
    let _ = writeln!(out);
    for (name, pick) in [("whole", 0usize), ("voi", 1)] {
        let _ = write!(out, "{name:<10}");
        for l in &cfg.tap_levels {
            let s = agg.get(l).map(|p| if pick == 0 { p.0 } else { p.1 });
            let _ = write!(out, " {:>18}", cell(s.as_ref(), 4));
        }
        let _ = writeln!(out);
    }
    if let Some(w) = ablation_winner(agg) {
        let _ = writeln!(out, "highest whole-volume dsc: level {w} (seed {})", cfg.seed);
    }
    out
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub folds: Vec<AblationFold>,
    pub levels: BTreeMap<usize, (Stat, Stat)>,
    pub winner: Option<usize>,
    pub table: String,
}

impl AblationOutcome {
    pub fn failed_folds(&self) -> usize {
        self.folds.iter().filter(|f| f.status == FoldStatus::Failed).count()
    }
}

/// Write `ablation.csv`, `ablation.txt` and `ablation_fold_<k>.json` into `dir`.
pub fn write_ablation(dir: &Path, cfg: &ExperimentConfig, folds: Vec<AblationFold>) -> Result<AblationOutcome> {
    fs::create_dir_all(dir)?;
    for f in &folds {
        fs::write(dir.join(format!("ablation_fold_{}.json", f.fold)), serde_json::to_vec_pretty(f)?)?;
    }
    let levels = aggregate_ablation(&folds);
    let table = ablation_table(cfg, &levels);
    fs::write(dir.join("ablation.csv"), ablation_csv(&levels)?)?;
    fs::write(dir.join("ablation.txt"), &table)?;
    let winner = ablation_winner(&levels);
    if let Some(w) = winner {
        log::info!("decoder ablation: level {w} has the highest whole-volume dsc (seed {})", cfg.seed);
    }
    Ok(AblationOutcome {
        folds,
        levels,
        winner,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Stat::of(&[5.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn winner_prefers_lower_level_on_tie() {
        let st = |m| (Stat { mean: m, std: 0.0, n: 1 }, Stat { mean: 0.0, std: 0.0, n: 1 });
        let agg: BTreeMap<usize, (Stat, Stat)> = [(1, st(0.7)), (2, st(0.8)), (3, st(0.8))].into_iter().collect();
        assert_eq!(ablation_winner(&agg), Some(2));
        assert_eq!(ablation_winner(&BTreeMap::new()), None);
    }

    #[test]
    fn ablation_table_has_one_column_per_level() {
        let cfg = ExperimentConfig {
            tap_levels: vec![2],
            ..ExperimentConfig::default()
        };
        let table = ablation_table(&cfg, &BTreeMap::new());
        let header = table.lines().next().unwrap();
        assert_eq!(header.matches("level").count(), 1);
        let cfg3 = ExperimentConfig::default();
        let table = ablation_table(&cfg3, &BTreeMap::new());
        assert_eq!(table.lines().next().unwrap().matches("level").count(), 3);
    }
}
