use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::TrainConfig;
use super::eval::{evaluate_store, CheckpointMeta, EvalReport};
use super::losses::LossReport;
use super::step::{forward_batch, BatchInput, PrototypeBank};
use crate::autograd::Tape;
use crate::backbone::{clips_to_input, init_params};
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::nn::{apply_bn_observations, Mode, Session};
use crate::params::{Adam, Checkpoint, ParamStore};
use crate::partition::{partition_stats, PartitionReport, ViewAssignment};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::vdg::{feature_distance_weights, ViewGraph};

pub const METRICS_HEADER: &str = "epoch,step,ce,kt,fd,vg,rec,cyc,total,lr";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let l = &r.report;
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.epoch, r.step, l.ce, l.kt, l.fd, l.vg, l.rec, l.cyc, l.total, r.lr
            );
        }
        out
    }

    /// Mean report per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<LossReport> {
        let mut groups: BTreeMap<usize, Vec<&LossReport>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.epoch).or_default().push(&r.report);
        }
        groups
            .values()
            .map(|rs| {
                let n = rs.len() as f64;
                let mean = |f: fn(&LossReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                LossReport {
                    ce: mean(|r| r.ce),
                    kt: mean(|r| r.kt),
                    fd: mean(|r| r.fd),
                    vg: mean(|r| r.vg),
                    rec: mean(|r| r.rec),
                    cyc: mean(|r| r.cyc),
                    dn: mean(|r| r.dn),
                    gn: mean(|r| r.gn),
                    ag: mean(|r| r.ag),
                    total: mean(|r| r.total),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean: LossReport,
    pub validation: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub thresholds: Vec<f64>,
    pub metrics: MetricsLog,
    pub epochs: Vec<EpochSummary>,
    /// Graph snapshot at the end of every epoch (empty when the graph is disabled).
    pub graphs: Vec<ViewGraph>,
    pub partition: PartitionReport,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a TrainConfig,
    parameter_count: usize,
    steps: usize,
    missing_pairs: &'a [(usize, usize)],
    epochs: &'a [EpochSummary],
    final_validation: Option<&'a EvalReport>,
}

impl TrainOutcome {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta { config: self.config.clone(), thresholds: self.thresholds.clone() }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { meta: self.meta().to_json(), store: self.store.clone() }
    }

    pub fn summary_json(&self) -> String {
        let summary = RunSummary {
            config: &self.config,
            parameter_count: self.store.parameter_count(),
            steps: self.metrics.rows.len(),
            missing_pairs: &self.partition.missing,
            epochs: &self.epochs,
            final_validation: self.epochs.last().and_then(|e| e.validation.as_ref()),
        };
        serde_json::to_string_pretty(&summary).expect("serializable summary") + "\n"
    }

    /// Writes `checkpoint.pogc`, `metrics.csv`, `summary.json` and
    /// `graph/epoch_XXX.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.checkpoint().save(&dir.join("checkpoint.pogc"))?;
        fs::write(dir.join("metrics.csv"), self.metrics.to_csv())?;
        fs::write(dir.join("summary.json"), self.summary_json())?;
        if !self.graphs.is_empty() {
            let graph_dir = dir.join("graph");
            fs::create_dir_all(&graph_dir)?;
            for (epoch, g) in self.graphs.iter().enumerate() {
                fs::write(graph_dir.join(format!("epoch_{epoch:03}.json")), g.to_json())?;
            }
        }
        Ok(())
    }
}

fn batch_input(cfg: &TrainConfig, dataset: &Dataset, views: &BTreeMap<String, usize>, ids: &[String]) -> Result<BatchInput> {
    let clips: Vec<_> = ids.iter().map(|id| &dataset.clips[id]).collect();
    Ok(BatchInput {
        x: clips_to_input(&cfg.model, &clips)?,
        labels: clips.iter().map(|c| c.label).collect(),
        views: ids.iter().map(|id| views[id]).collect(),
    })
}

/// Seeds the raw graph weights with max-normalized distances between the
/// views' pooled features on one batch.
fn initial_graph(cfg: &TrainConfig, store: &ParamStore, batch: &BatchInput) -> Result<Tensor> {
    let n = cfg.model.views;
    let tape = Tape::new();
    let s = Session::new(&tape, store, Mode::Train);
    let terms = s.without_stats(|| forward_batch(&s, cfg, batch, &[], None, None))?;
    let present: Vec<usize> = (0..n).filter(|&v| terms.pooled_view[v].is_some()).collect();
    let pooled: Vec<Tensor> = present.iter().map(|&v| terms.pooled_view[v].clone().expect("present")).collect();
    let mut w = Tensor::zeros(&[n, n]);
    if pooled.len() >= 2 {
        let d = feature_distance_weights(&pooled)?;
        let max = d.max_abs();
        let k = present.len();
        for (a, &va) in present.iter().enumerate() {
            for (b, &vb) in present.iter().enumerate() {
                w.data_mut()[va * n + vb] = if max > 0.0 { d.data()[a * k + b] / max } else { 0.0 };
            }
        }
    }
    Ok(w)
}

/// Trains on the `train` split; validates on `val` after every epoch when it
/// is non-empty.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, assignment: &ViewAssignment) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = &cfg.model;
    if dataset.manifest.clip_shape != model.clip_shape || dataset.num_classes() != model.num_classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has clips {:?} and {} classes, model expects {:?} and {}",
            dataset.manifest.clip_shape,
            dataset.num_classes(),
            model.clip_shape,
            model.num_classes
        )));
    }
    if assignment.n != model.views {
        return Err(Error::InvalidConfig(format!("partition has {} views, model {}", assignment.n, model.views)));
    }
    let train_ids = dataset.manifest.split("train")?;
    let all_views = assignment.view_map();
    let mut views = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for id in train_ids {
        let v = *all_views.get(id).ok_or_else(|| Error::MissingDetection(id.clone()))?;
        views.insert(id.clone(), v);
        labels.insert(id.clone(), dataset.clips[id].label);
    }
    let partition = partition_stats(assignment, &labels, model.num_classes);
    let has_val = dataset.manifest.split("val").is_ok_and(|s| !s.is_empty());

    let mut store = init_params(model, cfg.seed)?;
    let mut adam = Adam::default();
    let iter = BatchIterator::new(dataset, "train", cfg.batch_size, cfg.seed)?;
    let mut rng = stream(cfg.seed, &[0xD0]);
    let mut metrics = MetricsLog::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut graphs = Vec::new();
    let mut bank = PrototypeBank::new(model.views, model.num_classes, cfg.prototype_momentum);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut last_distances = Tensor::zeros(&[model.views, model.views]);
        for (step, ids) in iter.epoch(epoch).iter().enumerate() {
            let batch = batch_input(cfg, dataset, &views, ids)?;
            if cfg.vdg && epoch == 0 && step == 0 {
                let w = initial_graph(cfg, &store, &batch)?;
                store.insert("graph.w_raw", w);
            }
            let tape = Tape::new();
            let s = Session::new(&tape, &store, Mode::Train);
            let terms = forward_batch(&s, cfg, &batch, &partition.missing, Some(&bank), Some(&mut rng))?;
            let report = terms.report(&tape, cfg);
            if let Some(term) = report.non_finite_term() {
                return Err(Error::DivergenceDetected { term, epoch, step });
            }
            let grads = s.gradients(&tape.backward(terms.objective));
            let observations = s.take_observations();
            last_distances = terms.distances.clone();
            bank.update(&terms.class_means);
            drop(s);
            adam.step(&mut store, &grads, lr);
            apply_bn_observations(&mut store, &observations, cfg.bn_momentum);
            if !store.all_finite() {
                return Err(Error::DivergenceDetected { term: "total", epoch, step });
            }
            metrics.rows.push(MetricsRow { epoch, step, report, lr });
        }
        let validation = if has_val { Some(evaluate_store(&store, model, dataset, "val", assignment)?) } else { None };
        let mean = metrics.epoch_means().pop().unwrap_or_default();
        epochs.push(EpochSummary { epoch, lr, mean, validation });
        if cfg.vdg {
            graphs.push(ViewGraph::new(&last_distances, store.get("graph.w_raw").expect("graph weights"))?);
        }
    }
    Ok(TrainOutcome { config: cfg.clone(), store, thresholds: assignment.thresholds.clone(), metrics, epochs, graphs, partition })
}
