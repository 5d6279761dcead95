//! Altitude views from head-to-body ratios by equal-frequency binning.
//!
//! Assignment files are JSONL, one `{"sample_id", "ratio", "view_index"}`
//! object per line in ascending `(ratio, sample_id)` order, with a sidecar
//! `<stem>.meta.json` holding `{"n", "thresholds"}`. Threshold `k` is the
//! smallest ratio in view `k + 1`; a ratio `h` falls in view
//! `#{k : thresholds[k] <= h}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DetectionRecord;
use crate::error::{Error, Result};

pub fn head_to_body_ratio(record: &DetectionRecord) -> Result<f64> {
    let (head, body) = (record.head_height(), record.body_height());
    if !(head > 0.0 && body > 0.0) {
        return Err(Error::NonPositiveBoxHeight(record.sample_id.clone()));
    }
    Ok(head / body)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub sample_id: String,
    pub ratio: f64,
    pub view_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionMeta {
    pub n: usize,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewAssignment {
    pub n: usize,
    pub thresholds: Vec<f64>,
    /// Sorted by `(ratio, sample_id)`.
    pub entries: Vec<ViewEntry>,
}

/// Sizes of `n` near-equal groups over `m` items, larger groups first.
pub fn group_sizes(m: usize, n: usize) -> Vec<usize> {
    (0..n).map(|k| m / n + usize::from(k < m % n)).collect()
}

pub fn assign_views(ratios: &[(String, f64)], n: usize) -> Result<ViewAssignment> {
    if n < 2 {
        return Err(Error::InvalidViewCount(n));
    }
    if ratios.len() < n {
        return Err(Error::TooFewSamples { samples: ratios.len(), views: n });
    }
    if let Some((id, _)) = ratios.iter().find(|(_, h)| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::NonPositiveBoxHeight(id.clone()));
    }
    let mut sorted: Vec<&(String, f64)> = ratios.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let mut entries = Vec::with_capacity(sorted.len());
    let mut thresholds = Vec::with_capacity(n - 1);
    let mut start = 0;
    for (view, size) in group_sizes(sorted.len(), n).into_iter().enumerate() {
        if view > 0 {
            thresholds.push(sorted[start].1);
        }
        for (id, h) in &sorted[start..start + size] {
            entries.push(ViewEntry { sample_id: id.clone(), ratio: *h, view_index: view });
        }
        start += size;
    }
    Ok(ViewAssignment { n, thresholds, entries })
}

impl ViewAssignment {
    /// View of an unseen ratio; the top view is unbounded above.
    pub fn classify_new(&self, ratio: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= ratio)
    }

    pub fn view_of(&self, sample_id: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.sample_id == sample_id).map(|e| e.view_index)
    }

    pub fn view_map(&self) -> BTreeMap<String, usize> {
        self.entries.iter().map(|e| (e.sample_id.clone(), e.view_index)).collect()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n];
        for e in &self.entries {
            sizes[e.view_index] += 1;
        }
        sizes
    }

    pub fn meta(&self) -> PartitionMeta {
        PartitionMeta { n: self.n, thresholds: self.thresholds.clone() }
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable entry") + "\n")
            .collect()
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta()).expect("serializable meta") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_jsonl())?;
        fs::write(sidecar_path(path), self.meta_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let meta_path = sidecar_path(path);
        let meta: PartitionMeta = serde_json::from_str(&read_text(&meta_path)?)
            .map_err(|e| Error::MalformedFile { path: meta_path.clone(), reason: e.to_string() })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ViewEntry = serde_json::from_str(line)
                .map_err(|e| Error::MalformedLine { line: i + 1, reason: e.to_string() })?;
            if entry.view_index >= meta.n {
                return Err(Error::UnknownView { view: entry.view_index, views: meta.n });
            }
            entries.push(entry);
        }
        if meta.n < 2 || meta.thresholds.len() != meta.n - 1 {
            return Err(Error::MalformedFile { path: meta_path, reason: "threshold count must be n - 1".into() });
        }
        Ok(Self { n: meta.n, thresholds: meta.thresholds, entries })
    }
}

/// `views.jsonl` → `views.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::IoFailure(e),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewStats {
    pub view: usize,
    pub count: usize,
    /// `[min, max]` ratio; absent for an empty view.
    pub ratio_range: Option<[f64; 2]>,
    pub classes_present: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub views: Vec<ViewStats>,
    /// `(view, class)` pairs with no samples.
    pub missing: Vec<(usize, usize)>,
}

impl PartitionReport {
    pub fn is_missing(&self, view: usize, class: usize) -> bool {
        self.missing.contains(&(view, class))
    }
}

/// Per-view counts, ratio ranges and class coverage. Samples without a label
/// are skipped.
pub fn partition_stats(
    assignment: &ViewAssignment,
    labels: &BTreeMap<String, usize>,
    num_classes: usize,
) -> PartitionReport {
    let mut views: Vec<ViewStats> = (0..assignment.n)
        .map(|view| ViewStats { view, count: 0, ratio_range: None, classes_present: Vec::new() })
        .collect();
    let mut present = vec![BTreeSet::new(); assignment.n];
    for e in &assignment.entries {
        let Some(&label) = labels.get(&e.sample_id) else { continue };
        let stats = &mut views[e.view_index];
        stats.count += 1;
        stats.ratio_range = Some(match stats.ratio_range {
            Some([lo, hi]) => [lo.min(e.ratio), hi.max(e.ratio)],
            None => [e.ratio, e.ratio],
        });
        present[e.view_index].insert(label);
    }
    let mut missing = Vec::new();
    for (view, classes) in present.into_iter().enumerate() {
        for class in 0..num_classes {
            if !classes.contains(&class) {
                missing.push((view, class));
            }
        }
        views[view].classes_present = classes.into_iter().collect();
    }
    PartitionReport { views, missing }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ratios(values: &[f64]) -> Vec<(String, f64)> {
        values.iter().enumerate().map(|(i, &h)| (format!("s{i:03}"), h)).collect()
    }

    fn det(head: f64, body: f64) -> DetectionRecord {
        DetectionRecord { sample_id: "a".into(), head_box: [0.0, 0.0, 5.0, head], body_box: [0.0, 0.0, 5.0, body] }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(head_to_body_ratio(&det(30.0, 120.0)).unwrap(), 0.25);
        assert_eq!(head_to_body_ratio(&det(50.0, 50.0)).unwrap(), 1.0);
        assert!(matches!(head_to_body_ratio(&det(30.0, 0.0)), Err(Error::NonPositiveBoxHeight(_))));
    }

    #[test]
    fn equal_split_and_remainder() {
        let a = assign_views(&ratios(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), 3).unwrap();
        let idx: Vec<usize> = a.entries.iter().map(|e| e.view_index).collect();
        assert_eq!(idx, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(a.thresholds, vec![0.3, 0.5]);
        let b = assign_views(&ratios(&[0.7, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), 3).unwrap();
        assert_eq!(b.group_sizes(), vec![3, 2, 2]);
    }

    #[test]
    fn ties_are_broken_by_sample_id() {
        let input = vec![("d".to_string(), 0.5), ("b".into(), 0.5), ("a".into(), 0.5), ("c".into(), 0.5)];
        let a = assign_views(&input, 2).unwrap();
        assert_eq!(a.view_of("a"), Some(0));
        assert_eq!(a.view_of("b"), Some(0));
        assert_eq!(a.view_of("c"), Some(1));
        assert_eq!(a.view_of("d"), Some(1));
    }

    #[test]
    fn bad_arguments() {
        assert!(matches!(assign_views(&ratios(&[0.1, 0.2]), 1), Err(Error::InvalidViewCount(1))));
        assert!(matches!(assign_views(&ratios(&[0.1, 0.2]), 3), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn stats_flag_missing_pairs() {
        let a = assign_views(&ratios(&[0.1, 0.2, 0.3, 0.4]), 2).unwrap();
        let labels: BTreeMap<String, usize> =
            [("s000", 0), ("s001", 1), ("s002", 0), ("s003", 0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let report = partition_stats(&a, &labels, 2);
        assert_eq!(report.missing, vec![(1, 1)]);
        assert_eq!(report.views.iter().map(|v| v.count).sum::<usize>(), 4);
        assert_eq!(report.views[1].ratio_range, Some([0.3, 0.4]));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("views.jsonl");
        let a = assign_views(&ratios(&[0.13, 0.2771, 0.31, 0.1 / 3.0]), 2).unwrap();
        a.write(&path).unwrap();
        let b = ViewAssignment::read(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_jsonl(), fs::read_to_string(&path).unwrap());
    }

    proptest! {
        #[test]
        fn partition_invariants(values in prop::collection::vec(0.01f64..2.0, 5..60), n in 2usize..5, rot in 0usize..60) {
            prop_assume!(values.len() >= n);
            let input = ratios(&values);
            let a = assign_views(&input, n).unwrap();
            let sizes = a.group_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert_eq!(sizes.iter().sum::<usize>(), values.len());
            for w in a.entries.windows(2) {
                prop_assert!(w[0].view_index <= w[1].view_index);
            }
            let mut rotated = input.clone();
            rotated.rotate_left(rot % input.len());
            prop_assert_eq!(assign_views(&rotated, n).unwrap(), a.clone());
            for e in &a.entries {
                if a.entries.iter().filter(|o| o.ratio == e.ratio).count() == 1 {
                    prop_assert_eq!(a.classify_new(e.ratio), e.view_index);
                }
            }
        }
    }
}
