use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x, y, w, h]` in pixels.
pub type BoxXywh = [f64; 4];

/// One actor's head and body boxes for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub sample_id: String,
    pub head_box: BoxXywh,
    pub body_box: BoxXywh,
}

impl DetectionRecord {
    pub fn head_height(&self) -> f64 {
        self.head_box[3]
    }

    pub fn body_height(&self) -> f64 {
        self.body_box[3]
    }

    fn validate(&self, line: usize) -> Result<()> {
        let all = self.head_box.iter().chain(&self.body_box);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::MalformedLine { line, reason: "non-finite box coordinate".into() });
        }
        if self.head_height() <= 0.0 || self.body_height() <= 0.0 {
            return Err(Error::NonPositiveBoxHeight(self.sample_id.clone()));
        }
        if all.clone().any(|&v| v < 0.0) {
            return Err(Error::MalformedLine { line, reason: "negative box coordinate".into() });
        }
        Ok(())
    }
}

/// Parses detection JSONL text. Line numbers in errors are 1-based.
pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord = serde_json::from_str(line)
            .map_err(|e| Error::MalformedLine { line: line_no, reason: e.to_string() })?;
        record.validate(line_no)?;
        if !seen.insert(record.sample_id.clone()) {
            return Err(Error::DuplicateSampleId(record.sample_id));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_detections(&std::fs::read_to_string(path)?)
}

pub fn detections_to_string(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("detection serializes"));
        out.push('\n');
    }
    out
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(detections_to_string(records).as_bytes())?;
    Ok(())
}
