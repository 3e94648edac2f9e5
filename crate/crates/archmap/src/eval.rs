//! Evaluation harness: counting and partition metrics, report-quality
//! rates, dataset aggregation, and the render/flatten/knowledge ablation
//! grid.
//!
//! Per-case metrics are computed only for JSON-valid reports; zero
//! ground-truth cases are excluded from relative-error means and counted
//! separately. Aggregates report mean and sample (n-1) standard deviation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{PipelineConfig, VariantToggles};
use crate::dkb::{out_of_ontology_labels, DentalOntology, StructuredReport};
use crate::math::mean_std;
use crate::render::RenderMode;
use crate::vlm::{make_backend, read_report_file, run_case, CaseReportFile, CaseSpec, InferenceOutcome};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth count is zero; relative error undefined")]
    ZeroGroundTruth,
    #[error("prediction and ground truth lists differ in length ({preds} vs {gts})")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("no json-valid reports to evaluate")]
    NoValidReports,
    #[error("no cases found")]
    NoCases,
    #[error("case failed: {0}")]
    Case(String),
}

/// Absolute count error `|pred - gt|`.
pub fn abs_err(pred: u32, gt: u32) -> f64 {
    (pred as f64 - gt as f64).abs()
}

/// Accuracy from a relative error, both in percent: `100·max(0, 1 - RE/100)`.
pub fn acc_from_rel_err(re_pct: f64) -> f64 {
    100.0 * (1.0 - re_pct / 100.0).max(0.0)
}

/// Relative error and accuracy in percent. Zero ground truth leaves RE
/// undefined; such cases are excluded from aggregates and counted.
pub fn rel_err_acc(pred: u32, gt: u32) -> Result<(f64, f64), EvalError> {
    if gt == 0 {
        return Err(EvalError::ZeroGroundTruth);
    }
    let re = 100.0 * abs_err(pred, gt) / gt as f64;
    Ok((re, acc_from_rel_err(re)))
}

/// Signed deviation `pred - gt`.
pub fn signed_dev(pred: u32, gt: u32) -> i64 {
    pred as i64 - gt as i64
}

/// Splits signed deviations into over- and under-counting rates: each is
/// the mean of `100·|dev|/gt` over its own sign subset (0 when empty).
pub fn over_under(devs: &[(i64, u32)]) -> (f64, f64) {
    let rates = |keep: fn(i64) -> bool| {
        let subset: Vec<f64> = devs
            .iter()
            .filter(|(d, gt)| keep(*d) && *gt > 0)
            .map(|(d, gt)| 100.0 * d.unsigned_abs() as f64 / *gt as f64)
            .collect();
        if subset.is_empty() {
            0.0
        } else {
            subset.iter().sum::<f64>() / subset.len() as f64
        }
    };
    (rates(|d| d > 0), rates(|d| d < 0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Per-class true/false positive and false negative tallies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionTable {
    entries: Vec<(String, ClassCounts)>,
}

impl ConfusionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: &str, tp: u64, fp: u64, fn_: u64) {
        if let Some(entry) = self.entries.iter_mut().find(|(name, _)| name == class) {
            entry.1.tp += tp;
            entry.1.fp += fp;
            entry.1.fn_ += fn_;
        } else {
            self.entries.push((class.to_string(), ClassCounts { tp, fp, fn_ }));
        }
    }

    /// Builds a table from per-class (pred, gt) count pairs with the
    /// standard count mapping `TP = min(p, g)`, `FP = max(0, p-g)`,
    /// `FN = max(0, g-p)`.
    pub fn from_count_pairs(pairs: &[(&str, u32, u32)]) -> Self {
        let mut table = Self::new();
        for &(class, pred, gt) in pairs {
            let tp = pred.min(gt) as u64;
            let fp = pred.saturating_sub(gt) as u64;
            let fn_ = gt.saturating_sub(pred) as u64;
            table.add(class, tp, fp, fn_);
        }
        table
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(name, _)| name.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Macro-averaged F1 in percent. Classes with no predictions, no ground
/// truth, or a zero precision+recall sum contribute 0.
pub fn macro_f1(table: &ConfusionTable) -> f64 {
    assert!(!table.is_empty(), "macro_f1 needs at least one class");
    let mut sum = 0.0;
    for (_, counts) in &table.entries {
        let p_den = counts.tp + counts.fp;
        let r_den = counts.tp + counts.fn_;
        if p_den == 0 || r_den == 0 {
            continue; // contributes 0
        }
        let p = counts.tp as f64 / p_den as f64;
        let r = counts.tp as f64 / r_den as f64;
        if p + r > 0.0 {
            sum += 2.0 * p * r / (p + r);
        }
    }
    100.0 * sum / table.entries.len() as f64
}

/// Fraction of exact stage matches, in percent.
pub fn stage_acc(preds: &[&str], gts: &[&str]) -> Result<f64, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::NoCases);
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionCounts {
    pub pred: u64,
    pub gt: u64,
    pub ae: f64,
    pub re_pct: f64,
}

/// Maps per-tooth detection statistics onto counting metrics:
/// `Pred = TP+FP`, `GT = TP+FN`, `AE = |FP-FN|`, `RE = |FP-FN|/(TP+FN)`.
pub fn map_detection_counts(tp: u64, fp: u64, fn_: u64) -> Result<DetectionCounts, EvalError> {
    let gt = tp + fn_;
    if gt == 0 {
        return Err(EvalError::ZeroGroundTruth);
    }
    let ae = (fp as f64 - fn_ as f64).abs();
    Ok(DetectionCounts { pred: tp + fp, gt, ae, re_pct: 100.0 * ae / gt as f64 })
}

/// Fraction of json-valid reports carrying at least one out-of-ontology
/// label, in percent over the json-valid subset.
pub fn hallucination_rate(
    outcomes: &[InferenceOutcome],
    ontology: &DentalOntology,
) -> Result<f64, EvalError> {
    let valid: Vec<&StructuredReport> = outcomes
        .iter()
        .filter(|o| o.json_valid)
        .filter_map(|o| o.report.as_ref())
        .collect();
    if valid.is_empty() {
        return Err(EvalError::NoValidReports);
    }
    let offenders = valid
        .iter()
        .filter(|r| !out_of_ontology_labels(r, ontology).is_empty())
        .count();
    Ok(100.0 * offenders as f64 / valid.len() as f64)
}

/// Everything the aggregator needs from one evaluated case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub arch: String,
    pub variant: String,
    pub json_valid: bool,
    pub halluc: bool,
    /// None when the report is json-invalid or gt is zero.
    pub ae: Option<f64>,
    pub re_pct: Option<f64>,
    pub acc_pct: Option<f64>,
    pub dev: Option<(i64, u32)>,
    pub macro_f1_region: Option<f64>,
    pub stage_correct: Option<bool>,
    pub zero_gt_excluded: bool,
}

/// Scores one persisted case record against its ground truth.
pub fn metrics_from_record(
    record: &CaseReportFile,
    gt: &StructuredReport,
    ontology: &DentalOntology,
    variant_label: &str,
) -> CaseMetrics {
    let mut metrics = CaseMetrics {
        case_id: record.case_id.clone(),
        arch: record.arch.clone(),
        variant: variant_label.to_string(),
        json_valid: record.json_valid,
        halluc: false,
        ae: None,
        re_pct: None,
        acc_pct: None,
        dev: None,
        macro_f1_region: None,
        stage_correct: None,
        zero_gt_excluded: false,
    };
    let Some(report) = &record.report else {
        return metrics;
    };
    metrics.halluc = !out_of_ontology_labels(report, ontology).is_empty();
    metrics.ae = Some(abs_err(report.teeth_number, gt.teeth_number));
    match rel_err_acc(report.teeth_number, gt.teeth_number) {
        Ok((re, acc)) => {
            metrics.re_pct = Some(re);
            metrics.acc_pct = Some(acc);
            metrics.dev = Some((signed_dev(report.teeth_number, gt.teeth_number), gt.teeth_number));
        }
        Err(_) => metrics.zero_gt_excluded = true,
    }
    if let (Some(pc), Some(gc)) = (&report.anatomical_counts, &gt.anatomical_counts) {
        let table = ConfusionTable::from_count_pairs(&[
            ("anterior", pc.anterior, gc.anterior),
            ("premolar", pc.premolar, gc.premolar),
            ("molar", pc.molar, gc.molar),
        ]);
        metrics.macro_f1_region = Some(macro_f1(&table));
    }
    metrics.stage_correct = Some(report.dentition_stage == gt.dentition_stage);
    metrics
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Variant,
    Arch,
    VariantArch,
}

/// Mean and sample standard deviation per metric for one group of cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub group: String,
    pub cases: usize,
    pub ae: (f64, f64),
    pub re_pct: (f64, f64),
    pub acc_pct: (f64, f64),
    pub over_pct: f64,
    pub under_pct: f64,
    pub macro_f1: (f64, f64),
    pub stage_acc: (f64, f64),
    pub json_valid_pct: f64,
    pub halluc_pct: f64,
    pub zero_gt_excluded: usize,
}

fn summarize_group(group: String, records: &[&CaseMetrics]) -> MetricSummary {
    let collect = |f: fn(&CaseMetrics) -> Option<f64>| -> Vec<f64> {
        records.iter().filter_map(|r| f(r)).collect()
    };
    let ae = mean_std(&collect(|r| r.ae));
    let re = mean_std(&collect(|r| r.re_pct));
    let acc = mean_std(&collect(|r| r.acc_pct));
    let f1 = mean_std(&collect(|r| r.macro_f1_region));
    let stage = mean_std(&collect(|r| r.stage_correct.map(|c| if c { 100.0 } else { 0.0 })));
    let devs: Vec<(i64, u32)> = records.iter().filter_map(|r| r.dev).collect();
    let (over, under) = over_under(&devs);
    let json_valid = records.iter().filter(|r| r.json_valid).count();
    let halluc = records.iter().filter(|r| r.halluc).count();
    let json_valid_pct = if records.is_empty() {
        0.0
    } else {
        100.0 * json_valid as f64 / records.len() as f64
    };
    let halluc_pct = if json_valid == 0 { 0.0 } else { 100.0 * halluc as f64 / json_valid as f64 };
    MetricSummary {
        group,
        cases: records.len(),
        ae,
        re_pct: re,
        acc_pct: acc,
        over_pct: over,
        under_pct: under,
        macro_f1: f1,
        stage_acc: stage,
        json_valid_pct,
        halluc_pct,
        zero_gt_excluded: records.iter().filter(|r| r.zero_gt_excluded).count(),
    }
}

/// Groups case metrics and summarizes each group. Group order is sorted
/// and therefore independent of input order.
pub fn aggregate(records: &[CaseMetrics], grouping: Grouping) -> Vec<MetricSummary> {
    let mut groups: BTreeMap<String, Vec<&CaseMetrics>> = BTreeMap::new();
    for record in records {
        let key = match grouping {
            Grouping::Variant => record.variant.clone(),
            Grouping::Arch => record.arch.clone(),
            Grouping::VariantArch => format!("{}/{}", record.variant, record.arch),
        };
        groups.entry(key).or_default().push(record);
    }
    groups
        .into_iter()
        .map(|(group, records)| summarize_group(group, &records))
        .collect()
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

/// The eight controlled variants, in presentation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Full,
    NoDkb,
    Uvp,
    NoFlatten,
    NoDkbUvp,
    NoDkbNoFlatten,
    UvpNoFlatten,
    NoDkbUvpNoFlatten,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Full,
        AblationVariant::NoDkb,
        AblationVariant::Uvp,
        AblationVariant::NoFlatten,
        AblationVariant::NoDkbUvp,
        AblationVariant::NoDkbNoFlatten,
        AblationVariant::UvpNoFlatten,
        AblationVariant::NoDkbUvpNoFlatten,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "Full (SSP + Flatten + DKB)",
            AblationVariant::NoDkb => "No DKB",
            AblationVariant::Uvp => "UVP",
            AblationVariant::NoFlatten => "No-Flatten",
            AblationVariant::NoDkbUvp => "No DKB + UVP",
            AblationVariant::NoDkbNoFlatten => "No DKB + No-Flatten",
            AblationVariant::UvpNoFlatten => "UVP + No-Flatten",
            AblationVariant::NoDkbUvpNoFlatten => "No DKB + UVP + No-Flatten",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoDkb => "no_dkb",
            AblationVariant::Uvp => "uvp",
            AblationVariant::NoFlatten => "no_flatten",
            AblationVariant::NoDkbUvp => "no_dkb_uvp",
            AblationVariant::NoDkbNoFlatten => "no_dkb_no_flatten",
            AblationVariant::UvpNoFlatten => "uvp_no_flatten",
            AblationVariant::NoDkbUvpNoFlatten => "no_dkb_uvp_no_flatten",
        }
    }

    pub fn toggles(self) -> VariantToggles {
        let (mode, flatten, dkb) = match self {
            AblationVariant::Full => (RenderMode::Ssp, true, true),
            AblationVariant::NoDkb => (RenderMode::Ssp, true, false),
            AblationVariant::Uvp => (RenderMode::Uvp, true, true),
            AblationVariant::NoFlatten => (RenderMode::Ssp, false, true),
            AblationVariant::NoDkbUvp => (RenderMode::Uvp, true, false),
            AblationVariant::NoDkbNoFlatten => (RenderMode::Ssp, false, false),
            AblationVariant::UvpNoFlatten => (RenderMode::Uvp, false, true),
            AblationVariant::NoDkbUvpNoFlatten => (RenderMode::Uvp, false, false),
        };
        VariantToggles { render_mode: mode, flatten, dkb }
    }
}

#[derive(Debug)]
pub struct AblationGrid {
    /// One row per variant, in presentation order.
    pub rows: Vec<(AblationVariant, MetricSummary)>,
    pub per_case: Vec<CaseMetrics>,
    pub records: Vec<(AblationVariant, CaseReportFile)>,
}

/// Runs the full pipeline for every variant over every case, aggregates,
/// and (when an output directory is given) persists per-variant artifacts.
/// Existing report files with matching variant and seed are reused, so an
/// interrupted run resumes where it stopped.
pub fn run_ablation_grid(
    specs: &[CaseSpec],
    ground_truth: &BTreeMap<String, StructuredReport>,
    base_cfg: &PipelineConfig,
    ontology: &DentalOntology,
    outdir: Option<&Path>,
) -> Result<AblationGrid, EvalError> {
    if specs.is_empty() {
        return Err(EvalError::NoCases);
    }
    let mut rows = Vec::new();
    let mut per_case_all = Vec::new();
    let mut records_all = Vec::new();
    for variant in AblationVariant::ALL {
        let cfg = base_cfg.with_toggles(variant.toggles());
        let backend = make_backend(&cfg.backend, cfg.seed).map_err(|e| EvalError::Case(e.to_string()))?;
        let variant_dir = outdir.map(|d| d.join(variant.slug()));
        let mut case_metrics = Vec::new();
        for spec in specs {
            let existing = variant_dir.as_ref().and_then(|dir| {
                let path = dir.join(crate::vlm::report_file_name(&spec.id, &spec.arch));
                read_report_file(&path).ok().filter(|record| {
                    record.variant == cfg.toggles() && record.seed == cfg.seed
                })
            });
            let record = match existing {
                Some(record) => record,
                None => run_case(spec, &cfg, backend.as_ref(), ontology, variant_dir.as_deref())
                    .map_err(|e| EvalError::Case(format!("{}/{}: {e}", variant.slug(), spec.id)))?
                    .record,
            };
            let key = format!("{}_{}", spec.id, spec.arch);
            if let Some(gt) = ground_truth.get(&key) {
                case_metrics.push(metrics_from_record(&record, gt, ontology, variant.label()));
            }
            records_all.push((variant, record));
        }
        let refs: Vec<&CaseMetrics> = case_metrics.iter().collect();
        rows.push((variant, summarize_group(variant.label().to_string(), &refs)));
        per_case_all.extend(case_metrics);
    }
    Ok(AblationGrid { rows, per_case: per_case_all, records: records_all })
}

// ---------------------------------------------------------------------------
// Output formats
// ---------------------------------------------------------------------------

fn fmt(value: f64, decimals: usize) -> String {
    format!("{value:.decimals$}")
}

/// Mean/std summary rows as CSV, one row per group.
pub fn summary_csv(rows: &[MetricSummary], decimals: usize) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "group",
            "cases",
            "ae_mean",
            "ae_std",
            "re_mean",
            "re_std",
            "acc_mean",
            "acc_std",
            "over",
            "under",
            "macro_f1_mean",
            "macro_f1_std",
            "stage_acc_mean",
            "stage_acc_std",
            "json_valid",
            "halluc",
            "zero_gt_excluded",
        ])
        .expect("csv header");
    for row in rows {
        writer
            .write_record([
                row.group.clone(),
                row.cases.to_string(),
                fmt(row.ae.0, decimals),
                fmt(row.ae.1, decimals),
                fmt(row.re_pct.0, decimals),
                fmt(row.re_pct.1, decimals),
                fmt(row.acc_pct.0, decimals),
                fmt(row.acc_pct.1, decimals),
                fmt(row.over_pct, decimals),
                fmt(row.under_pct, decimals),
                fmt(row.macro_f1.0, decimals),
                fmt(row.macro_f1.1, decimals),
                fmt(row.stage_acc.0, decimals),
                fmt(row.stage_acc.1, decimals),
                fmt(row.json_valid_pct, decimals),
                fmt(row.halluc_pct, decimals),
                row.zero_gt_excluded.to_string(),
            ])
            .expect("csv row");
    }
    String::from_utf8(writer.into_inner().expect("csv buffer")).expect("csv is utf-8")
}

/// Ablation table as CSV in the presentation column order: AE, RE, Acc,
/// partition macro-F1, stage accuracy, JSON validity, hallucination rate.
pub fn ablation_csv(grid: &AblationGrid, decimals: usize) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "variant",
            "ae_mean",
            "ae_std",
            "re_mean",
            "re_std",
            "acc_mean",
            "acc_std",
            "macro_f1_mean",
            "macro_f1_std",
            "stage_acc_mean",
            "stage_acc_std",
            "json_valid",
            "halluc",
        ])
        .expect("csv header");
    for (variant, row) in &grid.rows {
        writer
            .write_record([
                variant.label().to_string(),
                fmt(row.ae.0, decimals),
                fmt(row.ae.1, decimals),
                fmt(row.re_pct.0, decimals),
                fmt(row.re_pct.1, decimals),
                fmt(row.acc_pct.0, decimals),
                fmt(row.acc_pct.1, decimals),
                fmt(row.macro_f1.0, decimals),
                fmt(row.macro_f1.1, decimals),
                fmt(row.stage_acc.0, decimals),
                fmt(row.stage_acc.1, decimals),
                fmt(row.json_valid_pct, decimals),
                fmt(row.halluc_pct, decimals),
            ])
            .expect("csv row");
    }
    String::from_utf8(writer.into_inner().expect("csv buffer")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn abs_err_examples() {
        assert_eq!(abs_err(14, 14), 0.0);
        assert_eq!(abs_err(12, 16), 4.0);
        assert_eq!(abs_err(16, 12), abs_err(12, 16));
    }

    #[test]
    fn accuracy_complements_relative_error() {
        assert_relative_eq!(acc_from_rel_err(24.886), 75.114, epsilon = 1e-3);
        assert_relative_eq!(acc_from_rel_err(24.316), 75.684, epsilon = 1e-3);
        let (re, acc) = rel_err_acc(14, 14).unwrap();
        assert_eq!((re, acc), (0.0, 100.0));
    }

    #[test]
    fn accuracy_floors_at_zero() {
        let (re, acc) = rel_err_acc(30, 10).unwrap();
        assert_relative_eq!(re, 200.0);
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn zero_ground_truth_is_an_error() {
        assert!(matches!(rel_err_acc(3, 0), Err(EvalError::ZeroGroundTruth)));
    }

    #[test]
    fn over_under_partitions_by_sign() {
        // +2 and -2 on gt 20 each: both rates are 10% over their subsets
        let (over, under) = over_under(&[(2, 20), (-2, 20)]);
        assert_relative_eq!(over, 10.0);
        assert_relative_eq!(under, 10.0);
        let (over, under) = over_under(&[(3, 10), (1, 10)]);
        assert_relative_eq!(over, 20.0);
        assert_eq!(under, 0.0);
        assert_eq!(over_under(&[(0, 10)]), (0.0, 0.0));
    }

    #[test]
    fn perfect_confusion_table_scores_100() {
        let mut table = ConfusionTable::new();
        table.add("a", 10, 0, 0);
        table.add("b", 3, 0, 0);
        assert_relative_eq!(macro_f1(&table), 100.0);
    }

    #[test]
    fn macro_f1_matches_hand_worked_example() {
        let mut table = ConfusionTable::new();
        table.add("c1", 8, 2, 0);
        table.add("c2", 5, 0, 5);
        // independent hand computation of the same table
        let p1 = 8.0 / 10.0;
        let r1: f64 = 1.0;
        let f1_1 = 2.0 * p1 * r1 / (p1 + r1);
        let p2 = 1.0;
        let r2 = 0.5;
        let f1_2: f64 = 2.0 * p2 * r2 / (p2 + r2);
        let want = 100.0 * (f1_1 + f1_2) / 2.0;
        assert_relative_eq!(macro_f1(&table), want, epsilon = 1e-6);
        assert_relative_eq!(macro_f1(&table), 77.7778, epsilon = 1e-3);
    }

    #[test]
    fn empty_class_contributes_zero() {
        let mut table = ConfusionTable::new();
        table.add("present", 5, 0, 0);
        table.add("absent", 0, 0, 3);
        assert_relative_eq!(macro_f1(&table), 50.0);
    }

    #[test]
    fn stage_acc_examples() {
        assert_eq!(stage_acc(&["a", "b"], &["a", "b"]).unwrap(), 100.0);
        assert_eq!(stage_acc(&["a", "b"], &["b", "a"]).unwrap(), 0.0);
        assert_eq!(stage_acc(&["a", "a", "a", "b"], &["a", "a", "a", "a"]).unwrap(), 75.0);
        assert!(matches!(
            stage_acc(&["a"], &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn detection_count_mapping() {
        let m = map_detection_counts(25, 2, 3).unwrap();
        assert_eq!(m.pred, 27);
        assert_eq!(m.gt, 28);
        assert_eq!(m.ae, 1.0);
        assert_relative_eq!(m.re_pct, 100.0 / 28.0, epsilon = 1e-9);

        let perfect = map_detection_counts(9, 0, 0).unwrap();
        assert_eq!((perfect.ae, perfect.re_pct), (0.0, 0.0));

        // balanced errors mask: FP == FN gives AE 0
        let masked = map_detection_counts(10, 4, 4).unwrap();
        assert_eq!(masked.ae, 0.0);
        assert!(matches!(map_detection_counts(0, 5, 0), Err(EvalError::ZeroGroundTruth)));
    }

    #[test]
    fn aggregate_mean_std_and_order_independence() {
        let mk = |case: &str, acc: f64| CaseMetrics {
            case_id: case.into(),
            arch: "upper".into(),
            variant: "v".into(),
            json_valid: true,
            halluc: false,
            ae: Some(1.0),
            re_pct: Some(100.0 - acc),
            acc_pct: Some(acc),
            dev: Some((1, 10)),
            macro_f1_region: Some(acc),
            stage_correct: Some(true),
            zero_gt_excluded: false,
        };
        let records = vec![mk("a", 60.0), mk("b", 70.0), mk("c", 80.0)];
        let rows = aggregate(&records, Grouping::Variant);
        assert_eq!(rows.len(), 1);
        assert_relative_eq!(rows[0].acc_pct.0, 70.0);
        assert_relative_eq!(rows[0].acc_pct.1, 10.0);

        let mut shuffled = records.clone();
        shuffled.reverse();
        let rows2 = aggregate(&shuffled, Grouping::Variant);
        assert_eq!(summary_csv(&rows, 3), summary_csv(&rows2, 3));
    }

    #[test]
    fn single_case_has_zero_std() {
        let records = vec![CaseMetrics {
            case_id: "a".into(),
            arch: "upper".into(),
            variant: "v".into(),
            json_valid: true,
            halluc: false,
            ae: Some(2.0),
            re_pct: Some(10.0),
            acc_pct: Some(90.0),
            dev: Some((2, 20)),
            macro_f1_region: Some(88.0),
            stage_correct: Some(false),
            zero_gt_excluded: false,
        }];
        let rows = aggregate(&records, Grouping::Arch);
        assert_eq!(rows[0].ae, (2.0, 0.0));
        assert_eq!(rows[0].stage_acc, (0.0, 0.0));
    }

    #[test]
    fn hallucination_rate_counts_offenders_over_valid() {
        use crate::vlm::InferenceOutcome;
        let ontology = DentalOntology::load_default().unwrap();
        let clean = crate::dkb::baseline_report(&ontology, "upper");
        let mut bad = clean.clone();
        bad.dentition_stage = "other".into();
        let outcome = |report: Option<StructuredReport>, valid: bool| InferenceOutcome {
            report,
            json_valid: valid,
            repair_applied: false,
            violations: Vec::new(),
            raw: String::new(),
            latency_s: 0.0,
        };
        let mut outcomes = vec![outcome(Some(bad), true)];
        for _ in 0..39 {
            outcomes.push(outcome(Some(clean.clone()), true));
        }
        assert_relative_eq!(hallucination_rate(&outcomes, &ontology).unwrap(), 2.5);

        let all_clean: Vec<_> = (0..5).map(|_| outcome(Some(clean.clone()), true)).collect();
        assert_eq!(hallucination_rate(&all_clean, &ontology).unwrap(), 0.0);

        let none_valid = vec![outcome(None, false)];
        assert!(matches!(
            hallucination_rate(&none_valid, &ontology),
            Err(EvalError::NoValidReports)
        ));
    }

    #[test]
    fn variant_list_is_in_presentation_order() {
        let labels: Vec<&str> = AblationVariant::ALL.iter().map(|v| v.label()).collect();
        assert_eq!(
            labels,
            [
                "Full (SSP + Flatten + DKB)",
                "No DKB",
                "UVP",
                "No-Flatten",
                "No DKB + UVP",
                "No DKB + No-Flatten",
                "UVP + No-Flatten",
                "No DKB + UVP + No-Flatten",
            ]
        );
        // toggles differ from Full only in their own axes
        let full = AblationVariant::Full.toggles();
        let nf = AblationVariant::NoFlatten.toggles();
        assert_eq!(nf.render_mode, full.render_mode);
        assert_eq!(nf.dkb, full.dkb);
        assert!(!nf.flatten);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn acc_plus_re_is_100_when_re_below_100(pred in 0u32..40, gt in 1u32..40) {
            prop_assume!(abs_err(pred, gt) <= gt as f64);
            let (re, acc) = rel_err_acc(pred, gt).unwrap();
            prop_assert!((re + acc - 100.0).abs() < 1e-9);
        }

        #[test]
        fn macro_f1_permutation_and_scale_invariant(
            tp in 1u64..50, fp in 0u64..50, fn_ in 0u64..50,
            tp2 in 1u64..50, fp2 in 0u64..50, fn2 in 0u64..50,
            k in 1u64..5,
        ) {
            let mut t1 = ConfusionTable::new();
            t1.add("x", tp, fp, fn_);
            t1.add("y", tp2, fp2, fn2);
            let mut t2 = ConfusionTable::new();
            t2.add("y", tp2, fp2, fn2);
            t2.add("x", tp, fp, fn_);
            prop_assert!((macro_f1(&t1) - macro_f1(&t2)).abs() < 1e-12);

            let mut t3 = ConfusionTable::new();
            t3.add("x", tp * k, fp * k, fn_ * k);
            t3.add("y", tp2, fp2, fn2);
            prop_assert!((macro_f1(&t1) - macro_f1(&t3)).abs() < 1e-9);
        }

        #[test]
        fn detection_mapping_identity(tp in 0u64..100, fp in 0u64..100, fn_ in 0u64..100) {
            prop_assume!(tp + fn_ > 0);
            let m = map_detection_counts(tp, fp, fn_).unwrap();
            prop_assert_eq!(m.pred as i64 - m.gt as i64, fp as i64 - fn_ as i64);
        }
    }
}
