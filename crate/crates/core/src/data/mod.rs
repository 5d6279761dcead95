//! Detection boxes, clips, manifests, the synthetic benchmark and batching.

pub mod batch;
pub mod clip;
pub mod detections;
pub mod manifest;
pub mod synth;

pub use batch::BatchIterator;
pub use clip::{decode_clip, encode_clip, read_clip, write_clip, ClipRecord, ClipShape};
pub use detections::{detections_to_string, load_detections, parse_detections, write_detections, BoxXywh, DetectionRecord};
pub use manifest::{Dataset, DatasetManifest, SampleMeta, MANIFEST_FILE};
pub use synth::{generate_synthetic_dataset, synthesize, GeneratorSpec, TierSpec};
