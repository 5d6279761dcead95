use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::losses::argmax;
use super::step::{encode_views, BatchInput};
use crate::autograd::Tape;
use crate::backbone::{clips_to_input, ModelConfig};
use crate::data::{ClipRecord, Dataset, DetectionRecord};
use crate::error::{Error, Result};
use crate::nn::{Mode, Session};
use crate::params::{Checkpoint, ParamStore};
use crate::partition::{head_to_body_ratio, ViewAssignment};

const EVAL_CHUNK: usize = 64;

/// Config echo stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    /// View thresholds of the training partition.
    pub thresholds: Vec<f64>,
}

impl CheckpointMeta {
    pub fn parse(checkpoint: &Checkpoint) -> Result<Self> {
        serde_json::from_str(&checkpoint.meta).map_err(|e| Error::InvalidConfig(format!("checkpoint meta: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable meta")
    }

    /// Thresholds only; no training entries.
    pub fn partition(&self) -> ViewAssignment {
        ViewAssignment { n: self.config.model.views, thresholds: self.thresholds.clone(), entries: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<f64>,
    pub pooled_action: Vec<f64>,
}

/// Inference-mode predictions for clips with known view indices.
pub fn predict(store: &ParamStore, model: &ModelConfig, clips: &[&ClipRecord], views: &[usize]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(clips.len());
    for (chunk, chunk_views) in clips.chunks(EVAL_CHUNK).zip(views.chunks(EVAL_CHUNK)) {
        let batch = BatchInput {
            x: clips_to_input(model, chunk)?,
            labels: vec![0; chunk.len()],
            views: chunk_views.to_vec(),
        };
        let tape = Tape::new();
        let s = Session::new(&tape, store, Mode::Eval);
        let mut slots: Vec<Option<Prediction>> = vec![None; chunk.len()];
        for pass in encode_views(&s, model, &batch)?.into_iter().flatten() {
            let logits = tape.value(s.linear("head", pass.pooled_action)).clone();
            let pooled = tape.value(pass.pooled_action).clone();
            for (i, &row) in pass.rows.iter().enumerate() {
                let z = logits.row(i).to_vec();
                slots[row] = Some(Prediction { class: argmax(&z), logits: z, pooled_action: pooled.row(i).to_vec() });
            }
        }
        out.extend(slots.into_iter().map(|p| p.expect("every sample has a view")));
    }
    Ok(out)
}

/// The view of a sample: its training assignment if it has one, otherwise
/// its detection ratio classified against the thresholds.
pub fn sample_view(dataset: &Dataset, assignment: &ViewAssignment, sample_id: &str) -> Result<usize> {
    if let Some(v) = assignment.view_of(sample_id) {
        return Ok(v);
    }
    let det = dataset.detection(sample_id).ok_or_else(|| Error::MissingDetection(sample_id.to_string()))?;
    Ok(assignment.classify_new(head_to_body_ratio(det)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewAccuracy {
    pub view: usize,
    pub count: usize,
    pub correct: usize,
    /// `None` when the view received no samples.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_view: Vec<ViewAccuracy>,
}

impl EvalReport {
    pub fn from_outcomes(split: &str, views: usize, outcomes: &[(usize, bool)]) -> Self {
        let mut per_view: Vec<ViewAccuracy> =
            (0..views).map(|view| ViewAccuracy { view, count: 0, correct: 0, accuracy: None }).collect();
        for &(v, ok) in outcomes {
            per_view[v].count += 1;
            per_view[v].correct += usize::from(ok);
        }
        for pv in &mut per_view {
            pv.accuracy = (pv.count > 0).then(|| pv.correct as f64 / pv.count as f64);
        }
        let correct = outcomes.iter().filter(|(_, ok)| *ok).count();
        let count = outcomes.len();
        Self { split: split.to_string(), count, correct, accuracy: if count > 0 { correct as f64 / count as f64 } else { 0.0 }, per_view }
    }

    pub fn view_accuracy(&self, view: usize) -> Option<f64> {
        self.per_view.get(view).and_then(|v| v.accuracy)
    }
}

pub fn evaluate_store(
    store: &ParamStore,
    model: &ModelConfig,
    dataset: &Dataset,
    split: &str,
    assignment: &ViewAssignment,
) -> Result<EvalReport> {
    let clips = dataset.split(split)?;
    if clips.is_empty() {
        return Err(Error::InvalidConfig(format!("split `{split}` is empty")));
    }
    let views = clips.iter().map(|c| sample_view(dataset, assignment, &c.sample_id)).collect::<Result<Vec<_>>>()?;
    let preds = predict(store, model, &clips, &views)?;
    let outcomes: Vec<(usize, bool)> =
        clips.iter().zip(&views).zip(&preds).map(|((c, &v), p)| (v, p.class == c.label)).collect();
    Ok(EvalReport::from_outcomes(split, model.views, &outcomes))
}

pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, split: &str, assignment: &ViewAssignment) -> Result<EvalReport> {
    let meta = CheckpointMeta::parse(checkpoint)?;
    evaluate_store(&checkpoint.store, &meta.config.model, dataset, split, assignment)
}

/// Predicted class of one clip. The view comes from `ratio` when given,
/// otherwise from the detection.
pub fn infer(
    checkpoint: &Checkpoint,
    clip: &ClipRecord,
    detection: Option<&DetectionRecord>,
    ratio: Option<f64>,
) -> Result<Prediction> {
    let meta = CheckpointMeta::parse(checkpoint)?;
    let h = match (ratio, detection) {
        (Some(h), _) => h,
        (None, Some(d)) => head_to_body_ratio(d)?,
        (None, None) => return Err(Error::MissingDetection(clip.sample_id.clone())),
    };
    let view = meta.partition().classify_new(h);
    let mut preds = predict(&checkpoint.store, &meta.config.model, &[clip], &[view])?;
    Ok(preds.remove(0))
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, CheckpointMeta)> {
    let checkpoint = Checkpoint::load(path)?;
    let meta = CheckpointMeta::parse(&checkpoint)?;
    Ok((checkpoint, meta))
}
