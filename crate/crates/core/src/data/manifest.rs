use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::clip::{read_clip, write_clip, ClipRecord, ClipShape};
use super::detections::{load_detections, write_detections, DetectionRecord};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub label: usize,
    #[serde(default)]
    pub true_altitude_tier: Option<usize>,
}

/// Dataset description. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub clip_shape: ClipShape,
    pub num_classes: usize,
    pub splits: BTreeMap<String, Vec<String>>,
    pub detections_path: String,
    pub clips_path: String,
    pub generator_seed: Option<u64>,
    /// Label and generator tier per sample id.
    pub samples: BTreeMap<String, SampleMeta>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits.get(name).map(Vec::as_slice).ok_or_else(|| Error::UnknownSplit(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (split, ids) in &self.splits {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::InvalidConfig(format!("sample `{id}` appears twice (split `{split}`)")));
                }
                let meta = self
                    .samples
                    .get(id)
                    .ok_or_else(|| Error::InvalidConfig(format!("sample `{id}` has no label entry")))?;
                if meta.label >= self.num_classes {
                    return Err(Error::LabelOutOfRange { label: meta.label, classes: self.num_classes });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// A manifest with its clips and detections resident in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: BTreeMap<String, ClipRecord>,
    pub detections: BTreeMap<String, DetectionRecord>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    /// Clips of one split, in manifest order.
    pub fn split(&self, name: &str) -> Result<Vec<&ClipRecord>> {
        self.manifest
            .split(name)?
            .iter()
            .map(|id| self.clips.get(id).ok_or_else(|| Error::InvalidConfig(format!("no clip for `{id}`"))))
            .collect()
    }

    pub fn detection(&self, sample_id: &str) -> Option<&DetectionRecord> {
        self.detections.get(sample_id)
    }

    /// Writes `manifest.json`, the detections file and one clip file per sample.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let clip_dir = dir.join(&self.manifest.clips_path);
        std::fs::create_dir_all(&clip_dir)?;
        for clip in self.clips.values() {
            write_clip(&clip_dir.join(format!("{}.pogv", clip.sample_id)), &clip.frames)?;
        }
        let detections: Vec<DetectionRecord> = self.detections.values().cloned().collect();
        write_detections(&dir.join(&self.manifest.detections_path), &detections)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        std::fs::write(&manifest_path, self.manifest.to_json())?;
        Ok(manifest_path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        if !manifest_path.exists() {
            return Err(Error::MissingFile(manifest_path.to_path_buf()));
        }
        let text = std::fs::read_to_string(manifest_path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: manifest_path.to_path_buf(),
            reason: e.to_string(),
        })?;
        manifest.validate()?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut clips = BTreeMap::new();
        for ids in manifest.splits.values() {
            for id in ids {
                let path = dir.join(&manifest.clips_path).join(format!("{id}.pogv"));
                let frames = read_clip(&path)?;
                let shape = frames.shape();
                if shape != manifest.clip_shape {
                    return Err(Error::ShapeMismatch(format!(
                        "clip `{id}` has shape {shape:?}, manifest declares {:?}",
                        manifest.clip_shape
                    )));
                }
                let meta = &manifest.samples[id];
                clips.insert(
                    id.clone(),
                    ClipRecord {
                        sample_id: id.clone(),
                        frames,
                        label: meta.label,
                        true_altitude_tier: meta.true_altitude_tier,
                    },
                );
            }
        }
        let detections = load_detections(&dir.join(&manifest.detections_path))?
            .into_iter()
            .map(|d| (d.sample_id.clone(), d))
            .collect();
        Ok(Self { manifest, clips, detections })
    }
}
