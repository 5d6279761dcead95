//! Experiment runners behind the CLI: view-count sweeps, transfer-direction
//! studies, module ablations, the similarity diagnostic and report files.
//!
//! Every run trains on the `train` split of one dataset, partitions it with
//! [`train_partition`], and scores the `test` split. Runs are keyed by
//! `(config, seed)` only, so a report row can be reproduced from its echo.

mod diagnostic;
mod report;
mod studies;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::partition::{assign_views, head_to_body_ratio, ViewAssignment};
use crate::training::{evaluate_store, train, EvalReport, TrainConfig, TrainOutcome};

pub use diagnostic::{cosine, similarity_diagnostic, similarity_from_features, DiagnosticReport, RATIO_CAP};
pub use report::{emit_report, BarChart, Report, Table, REPORT_SCHEMA};
pub use studies::{
    run_guide_strategy_study, run_module_ablation, run_partition_sweep, AblationReport, AblationRun, AblationSpec,
    ConfigDelta, GuideReport, PlanSummary, SweepReport, SweepSummary, VariantSummary,
};

/// Split every run is scored on.
pub const EVAL_SPLIT: &str = "test";

/// One trained and evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: String,
    pub seed: u64,
    pub views: usize,
    pub apog: bool,
    pub vdg: bool,
    pub plan: String,
    pub accuracy: f64,
    pub per_view: Vec<Option<f64>>,
}

impl RunRecord {
    fn new(run: &str, cfg: &TrainConfig, eval: &EvalReport) -> Result<Self> {
        Ok(Self {
            run: run.to_string(),
            seed: cfg.seed,
            views: cfg.model.views,
            apog: cfg.apog,
            vdg: cfg.vdg,
            plan: cfg.plan()?.to_string(),
            accuracy: eval.accuracy,
            per_view: eval.per_view.iter().map(|v| v.accuracy).collect(),
        })
    }
}

/// Equal-frequency partition of the training split into `n` views.
pub fn train_partition(dataset: &Dataset, n: usize) -> Result<ViewAssignment> {
    let ratios = dataset
        .manifest
        .split("train")?
        .iter()
        .map(|id| {
            let det = dataset.detection(id).ok_or_else(|| Error::MissingDetection(id.clone()))?;
            Ok((id.clone(), head_to_body_ratio(det)?))
        })
        .collect::<Result<Vec<_>>>()?;
    assign_views(&ratios, n)
}

/// Trains `cfg` and scores it on [`EVAL_SPLIT`].
pub fn run_once(run: &str, cfg: &TrainConfig, dataset: &Dataset) -> Result<(RunRecord, TrainOutcome)> {
    let assignment = train_partition(dataset, cfg.model.views)?;
    let outcome = train(cfg, dataset, &assignment)?;
    let eval = evaluate_store(&outcome.store, &cfg.model, dataset, EVAL_SPLIT, &assignment)?;
    Ok((RunRecord::new(run, cfg, &eval)?, outcome))
}

/// Median of the values; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Per-view medians over runs, skipping views a run left empty.
pub fn median_per_view(records: &[&RunRecord]) -> Vec<Option<f64>> {
    let views = records.iter().map(|r| r.per_view.len()).max().unwrap_or(0);
    (0..views)
        .map(|v| median(&records.iter().filter_map(|r| r.per_view.get(v).copied().flatten()).collect::<Vec<_>>()))
        .collect()
}

/// Number of distinct generator tiers, when the manifest records them.
pub fn tier_count(dataset: &Dataset) -> Option<usize> {
    let tiers: std::collections::BTreeSet<usize> =
        dataset.manifest.samples.values().filter_map(|m| m.true_altitude_tier).collect();
    (!tiers.is_empty()).then_some(tiers.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_odd_even_and_empty() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn per_view_median_skips_empty_views() {
        let rec = |pv: Vec<Option<f64>>| RunRecord {
            run: "r".into(),
            seed: 0,
            views: pv.len(),
            apog: false,
            vdg: false,
            plan: "none".into(),
            accuracy: 0.0,
            per_view: pv,
        };
        let a = rec(vec![Some(0.9), None]);
        let b = rec(vec![Some(0.7), Some(0.2)]);
        let c = rec(vec![Some(0.8), Some(0.4)]);
        assert_eq!(median_per_view(&[&a, &b, &c]), vec![Some(0.8), Some(0.30000000000000004)]);
    }
}
