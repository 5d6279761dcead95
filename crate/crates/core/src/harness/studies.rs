//! View-count sweeps, transfer-direction studies and module ablations.
//!
//! Each study returns its raw per-run rows plus median-over-seed summaries,
//! and converts to a [`Report`] with these CSV tables (column order fixed):
//!
//! ```text
//! runs:      run,seed,views,apog,vdg,plan,accuracy,view_0..view_{n-1}
//! sweep:     views,median_accuracy,view_0..view_{n-1}
//! guides:    run,plan,median_accuracy,delta_accuracy,view_i..,delta_view_i..
//! ablation:  run,apog,vdg,views,plan,median_accuracy,view_0..view_{n-1}
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{fmt_value, BarChart, Report, Table};
use super::{median, median_per_view, run_once, tier_count, RunRecord};
use crate::apog::TransferPlan;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::training::{LossWeights, TrainConfig};

fn with_seed(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..base.clone() }
}

fn require_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    Ok(())
}

fn view_columns(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|v| format!("{prefix}view_{v}")).collect()
}

fn runs_table(rows: &[RunRecord]) -> Table {
    let n = rows.iter().map(|r| r.per_view.len()).max().unwrap_or(0);
    let mut columns: Vec<String> =
        ["run", "seed", "views", "apog", "vdg", "plan", "accuracy"].iter().map(|c| c.to_string()).collect();
    columns.extend(view_columns("", n));
    let rows = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.run.clone(),
                r.seed.to_string(),
                r.views.to_string(),
                r.apog.to_string(),
                r.vdg.to_string(),
                r.plan.clone(),
                fmt_value(Some(r.accuracy)),
            ];
            row.extend((0..n).map(|v| fmt_value(r.per_view.get(v).copied().flatten())));
            row
        })
        .collect();
    Table { name: "runs".into(), columns, rows }
}

fn charts(rows: &[RunRecord]) -> Vec<BarChart> {
    rows.iter().map(|r| BarChart { run: r.run.clone(), seed: r.seed, values: r.per_view.clone() }).collect()
}

fn rows_for<'a>(rows: &'a [RunRecord], run: &str) -> Vec<&'a RunRecord> {
    rows.iter().filter(|r| r.run == run).collect()
}

/// Median accuracy per view count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub views: usize,
    pub median_accuracy: f64,
    pub median_per_view: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// How runs were partitioned and scored.
    pub protocol: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<RunRecord>,
    pub summary: Vec<SweepSummary>,
}

const SWEEP_PROTOCOL: &str = "For each n: equal-frequency partition of the train split by head-to-body ratio; \
train with the base config; test samples take the view given by the train thresholds; \
accuracies are medians over seeds.";

/// One training run per view count per seed.
pub fn run_partition_sweep(dataset: &Dataset, n_values: &[usize], base: &TrainConfig, seeds: &[u64]) -> Result<SweepReport> {
    require_seeds(seeds)?;
    let max_views = tier_count(dataset).map(|t| t + 2);
    for &n in n_values {
        if n < 2 || max_views.is_some_and(|m| n > m) {
            return Err(Error::InvalidViewCount(n));
        }
    }
    let mut rows = Vec::with_capacity(n_values.len() * seeds.len());
    let mut summary = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let run = format!("n{n}");
        for &seed in seeds {
            let mut cfg = with_seed(base, seed);
            cfg.model.views = n;
            if cfg.plan.as_ref().is_some_and(|p| p.validate(n).is_err()) {
                cfg.plan = None;
            }
            rows.push(run_once(&run, &cfg, dataset)?.0);
        }
        let group = rows_for(&rows, &run);
        summary.push(SweepSummary {
            views: n,
            median_accuracy: median(&group.iter().map(|r| r.accuracy).collect::<Vec<_>>()).unwrap_or(0.0),
            median_per_view: median_per_view(&group),
        });
    }
    Ok(SweepReport { protocol: SWEEP_PROTOCOL.into(), seeds: seeds.to_vec(), rows, summary })
}

impl SweepReport {
    pub fn to_report(&self, name: &str) -> Report {
        let n = self.summary.iter().map(|s| s.median_per_view.len()).max().unwrap_or(0);
        let mut columns = vec!["views".to_string(), "median_accuracy".to_string()];
        columns.extend(view_columns("", n));
        let rows = self
            .summary
            .iter()
            .map(|s| {
                let mut row = vec![s.views.to_string(), fmt_value(Some(s.median_accuracy))];
                row.extend((0..n).map(|v| fmt_value(s.median_per_view.get(v).copied().flatten())));
                row
            })
            .collect();
        Report {
            kind: "sweep-views".into(),
            name: name.into(),
            seeds: self.seeds.clone(),
            summary: json!({ "protocol": self.protocol, "summary": self.summary }),
            tables: vec![runs_table(&self.rows), Table { name: "sweep".into(), columns, rows }],
            charts: charts(&self.rows),
        }
    }
}

/// Median results of one transfer plan and their deltas to the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub run: String,
    pub plan: String,
    pub median_accuracy: f64,
    pub median_per_view: Vec<Option<f64>>,
    pub delta_accuracy: f64,
    pub delta_per_view: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuideReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<RunRecord>,
    /// The no-transfer baseline first, then the requested plans in order.
    pub plans: Vec<PlanSummary>,
}

impl GuideReport {
    pub fn plan(&self, plan: &str) -> Option<&PlanSummary> {
        self.plans.iter().find(|p| p.plan == plan)
    }
}

fn plan_run_name(plan: &TransferPlan) -> String {
    if plan.is_empty() {
        return "none".into();
    }
    plan.pairs.iter().map(|(s, t)| format!("{s}to{t}")).collect::<Vec<_>>().join("_")
}

/// One run per plan per seed with APOG on, plus the empty-plan baseline.
/// Reverse directions are allowed.
pub fn run_guide_strategy_study(
    dataset: &Dataset,
    plans: &[TransferPlan],
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<GuideReport> {
    require_seeds(seeds)?;
    let mut all = vec![TransferPlan::none()];
    for p in plans {
        p.validate(base.model.views)?;
        if !all.contains(p) {
            all.push(p.clone());
        }
    }
    let mut rows = Vec::with_capacity(all.len() * seeds.len());
    for plan in &all {
        for &seed in seeds {
            let cfg = TrainConfig { apog: true, plan: Some(plan.clone()), ..with_seed(base, seed) };
            rows.push(run_once(&plan_run_name(plan), &cfg, dataset)?.0);
        }
    }
    let medians: Vec<(f64, Vec<Option<f64>>)> = all
        .iter()
        .map(|p| {
            let group = rows_for(&rows, &plan_run_name(p));
            (median(&group.iter().map(|r| r.accuracy).collect::<Vec<_>>()).unwrap_or(0.0), median_per_view(&group))
        })
        .collect();
    let (base_acc, base_views) = medians[0].clone();
    let plans = all
        .iter()
        .zip(medians)
        .map(|(p, (acc, per_view))| PlanSummary {
            run: plan_run_name(p),
            plan: p.to_string(),
            median_accuracy: acc,
            delta_accuracy: acc - base_acc,
            delta_per_view: per_view
                .iter()
                .zip(&base_views)
                .map(|(a, b)| a.zip(*b).map(|(a, b)| a - b))
                .collect(),
            median_per_view: per_view,
        })
        .collect();
    Ok(GuideReport { seeds: seeds.to_vec(), rows, plans })
}

impl GuideReport {
    pub fn to_report(&self, name: &str) -> Report {
        let n = self.plans.iter().map(|p| p.median_per_view.len()).max().unwrap_or(0);
        let mut columns: Vec<String> =
            ["run", "plan", "median_accuracy", "delta_accuracy"].iter().map(|c| c.to_string()).collect();
        columns.extend(view_columns("", n));
        columns.extend(view_columns("delta_", n));
        let rows = self
            .plans
            .iter()
            .map(|p| {
                let mut row =
                    vec![p.run.clone(), p.plan.clone(), fmt_value(Some(p.median_accuracy)), fmt_value(Some(p.delta_accuracy))];
                row.extend((0..n).map(|v| fmt_value(p.median_per_view.get(v).copied().flatten())));
                row.extend((0..n).map(|v| fmt_value(p.delta_per_view.get(v).copied().flatten())));
                row
            })
            .collect();
        Report {
            kind: "study-guides".into(),
            name: name.into(),
            seeds: self.seeds.clone(),
            summary: json!({ "baseline": "none", "plans": self.plans }),
            tables: vec![runs_table(&self.rows), Table { name: "guides".into(), columns, rows }],
            charts: charts(&self.rows),
        }
    }
}

/// Changes one ablation run applies to the base config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigDelta {
    pub apog: Option<bool>,
    pub vdg: Option<bool>,
    pub plan: Option<TransferPlan>,
    pub views: Option<usize>,
    pub loss_weights: Option<LossWeights>,
}

impl ConfigDelta {
    pub fn toggles(apog: bool, vdg: bool) -> Self {
        Self { apog: Some(apog), vdg: Some(vdg), ..Self::default() }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if let Some(a) = self.apog {
            cfg.apog = a;
        }
        if let Some(v) = self.vdg {
            cfg.vdg = v;
        }
        if let Some(p) = &self.plan {
            cfg.plan = Some(p.clone());
        }
        if let Some(n) = self.views {
            cfg.model.views = n;
        }
        if let Some(w) = self.loss_weights {
            cfg.loss_weights = w;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRun {
    pub name: String,
    #[serde(default)]
    pub delta: ConfigDelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub runs: Vec<AblationRun>,
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    /// Baseline, VDG only, APOG only and both, in that order.
    pub fn standard(seeds: &[u64]) -> Self {
        let run = |name: &str, apog, vdg| AblationRun { name: name.into(), delta: ConfigDelta::toggles(apog, vdg) };
        Self {
            runs: vec![run("baseline", false, false), run("vdg", false, true), run("apog", true, false), run("both", true, true)],
            seeds: seeds.to_vec(),
        }
    }

    /// Unique names, valid configs, and all four toggle combinations present.
    pub fn validate(&self, base: &TrainConfig) -> Result<()> {
        require_seeds(&self.seeds)?;
        let mut names = BTreeSet::new();
        let mut combos = BTreeSet::new();
        for run in &self.runs {
            if !names.insert(run.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate ablation run `{}`", run.name)));
            }
            let cfg = run.delta.apply(base);
            cfg.validate()?;
            combos.insert((cfg.apog, cfg.vdg));
        }
        if combos.len() < 4 {
            return Err(Error::InvalidConfig(
                "an ablation needs baseline, VDG-only, APOG-only and both-on runs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub run: String,
    pub apog: bool,
    pub vdg: bool,
    pub views: usize,
    pub plan: String,
    pub median_accuracy: f64,
    pub median_per_view: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<RunRecord>,
    pub variants: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, run: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.run == run)
    }

    /// The variant with the given toggles, first match in run order.
    pub fn with_toggles(&self, apog: bool, vdg: bool) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.apog == apog && v.vdg == vdg)
    }
}

/// Median-over-seed accuracy of every ablation variant.
pub fn run_module_ablation(dataset: &Dataset, spec: &AblationSpec, base: &TrainConfig) -> Result<AblationReport> {
    spec.validate(base)?;
    let mut rows = Vec::with_capacity(spec.runs.len() * spec.seeds.len());
    let mut variants = Vec::with_capacity(spec.runs.len());
    for run in &spec.runs {
        let cfg = run.delta.apply(base);
        for &seed in &spec.seeds {
            rows.push(run_once(&run.name, &with_seed(&cfg, seed), dataset)?.0);
        }
        let group = rows_for(&rows, &run.name);
        variants.push(VariantSummary {
            run: run.name.clone(),
            apog: cfg.apog,
            vdg: cfg.vdg,
            views: cfg.model.views,
            plan: cfg.plan()?.to_string(),
            median_accuracy: median(&group.iter().map(|r| r.accuracy).collect::<Vec<_>>()).unwrap_or(0.0),
            median_per_view: median_per_view(&group),
        });
    }
    Ok(AblationReport { seeds: spec.seeds.clone(), rows, variants })
}

impl AblationReport {
    pub fn to_report(&self, name: &str) -> Report {
        let n = self.variants.iter().map(|v| v.median_per_view.len()).max().unwrap_or(0);
        let mut columns: Vec<String> =
            ["run", "apog", "vdg", "views", "plan", "median_accuracy"].iter().map(|c| c.to_string()).collect();
        columns.extend(view_columns("", n));
        let rows = self
            .variants
            .iter()
            .map(|v| {
                let mut row = vec![
                    v.run.clone(),
                    v.apog.to_string(),
                    v.vdg.to_string(),
                    v.views.to_string(),
                    v.plan.clone(),
                    fmt_value(Some(v.median_accuracy)),
                ];
                row.extend((0..n).map(|i| fmt_value(v.median_per_view.get(i).copied().flatten())));
                row
            })
            .collect();
        Report {
            kind: "ablate".into(),
            name: name.into(),
            seeds: self.seeds.clone(),
            summary: json!({ "variants": self.variants }),
            tables: vec![runs_table(&self.rows), Table { name: "ablation".into(), columns, rows }],
            charts: charts(&self.rows),
        }
    }
}
