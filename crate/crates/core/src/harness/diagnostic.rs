//! Cross-view versus cross-action similarity of pooled action features.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::params::Checkpoint;
use crate::training::{predict, sample_view, CheckpointMeta, EvalReport};

/// Largest separation ratio a report shows.
pub const RATIO_CAP: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub split: String,
    pub accuracy: f64,
    pub per_view: Vec<Option<f64>>,
    /// Mean cosine over same-action pairs seen from different views.
    pub s_same: Option<f64>,
    /// Mean cosine over different-action pairs within one view.
    pub s_diff: Option<f64>,
    /// `s_same / s_diff`, capped at [`RATIO_CAP`].
    pub ratio: Option<f64>,
    pub same_pairs: usize,
    pub diff_pairs: usize,
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// `(s_same, s_diff, same_pairs, diff_pairs)` over `(view, label, feature)` items.
pub fn similarity_from_features(items: &[(usize, usize, Vec<f64>)]) -> (Option<f64>, Option<f64>, usize, usize) {
    let (mut same, mut diff) = ((0.0, 0usize), (0.0, 0usize));
    for (i, (vi, li, fi)) in items.iter().enumerate() {
        for (vj, lj, fj) in &items[i + 1..] {
            if li == lj && vi != vj {
                same.0 += cosine(fi, fj);
                same.1 += 1;
            } else if li != lj && vi == vj {
                diff.0 += cosine(fi, fj);
                diff.1 += 1;
            }
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    (mean(same), mean(diff), same.1, diff.1)
}

fn separation(s_same: Option<f64>, s_diff: Option<f64>) -> Option<f64> {
    let (a, b) = (s_same?, s_diff?);
    let r = if b > 0.0 { a / b } else { f64::INFINITY };
    Some(r.min(RATIO_CAP))
}

/// Similarities of the checkpoint's pooled action features on `split`.
/// Views come from the checkpoint's thresholds.
pub fn similarity_diagnostic(checkpoint: &Checkpoint, dataset: &Dataset, split: &str) -> Result<DiagnosticReport> {
    let meta = CheckpointMeta::parse(checkpoint)?;
    let model = &meta.config.model;
    let assignment = meta.partition();
    let clips = dataset.split(split)?;
    let views = clips.iter().map(|c| sample_view(dataset, &assignment, &c.sample_id)).collect::<Result<Vec<_>>>()?;
    let preds = predict(&checkpoint.store, model, &clips, &views)?;
    let outcomes: Vec<(usize, bool)> = clips.iter().zip(&views).zip(&preds).map(|((c, &v), p)| (v, p.class == c.label)).collect();
    let eval = EvalReport::from_outcomes(split, model.views, &outcomes);
    let items: Vec<(usize, usize, Vec<f64>)> =
        clips.iter().zip(&views).zip(preds).map(|((c, &v), p)| (v, c.label, p.pooled_action)).collect();
    let (s_same, s_diff, same_pairs, diff_pairs) = similarity_from_features(&items);
    Ok(DiagnosticReport {
        split: split.to_string(),
        accuracy: eval.accuracy,
        per_view: eval.per_view.iter().map(|v| v.accuracy).collect(),
        s_same,
        s_diff,
        ratio: separation(s_same, s_diff),
        same_pairs,
        diff_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_features_give_unit_ratio() {
        let f = vec![0.3, 0.4, 0.5];
        let items: Vec<_> = (0..6).map(|i| (i % 2, i / 2, f.clone())).collect();
        let (same, diff, ..) = similarity_from_features(&items);
        assert!((same.unwrap() - 1.0).abs() < 1e-12 && (diff.unwrap() - 1.0).abs() < 1e-12);
        assert!((separation(same, diff).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_actions_hit_the_cap() {
        let onehot = |k: usize| (0..3).map(|i| f64::from(u8::from(i == k))).collect::<Vec<_>>();
        let items: Vec<_> = (0..2).flat_map(|v| (0..3).map(move |k| (v, k, onehot(k)))).collect();
        let (same, diff, ..) = similarity_from_features(&items);
        assert_eq!((same, diff), (Some(1.0), Some(0.0)));
        assert_eq!(separation(same, diff), Some(RATIO_CAP));
    }

    #[test]
    fn cosine_is_bounded() {
        assert_eq!(cosine(&[1.0, 0.0], &[-2.0, 0.0]), -1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }
}
