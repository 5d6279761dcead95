//! Parametric stick-figure clips at several simulated altitudes.
//!
//! Each action class is a distinct limb or body motion. Higher tiers render
//! the actor smaller, with stronger blur and noise, and foreshorten everything
//! below the head, so the head-to-body ratio of the (analytic) detection boxes
//! grows with tier.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::clip::{ClipRecord, ClipShape};
use super::detections::DetectionRecord;
use super::manifest::{Dataset, DatasetManifest, SampleMeta};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Number of distinct motion patterns the renderer knows.
pub const MOTION_PATTERNS: usize = 6;

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Head radius in figure units (standing figure height is 1).
const HEAD_RADIUS: f64 = 0.1;
/// Everything below the head spans this many figure units when upright.
const BODY_SPAN: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    /// Actor size relative to tier 0.
    pub scale: f64,
    /// Gaussian blur sigma in pixels.
    pub blur: f64,
    /// Additive Gaussian noise std.
    pub noise: f64,
    /// Range of the vertical foreshortening factor applied below the head.
    pub foreshortening: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub clip_shape: ClipShape,
    pub tiers: Vec<TierSpec>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// `(tier, class)` combinations never generated.
    pub missing: Vec<[usize; 2]>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            clip_shape: [8, 1, 16, 16],
            tiers: vec![
                TierSpec { scale: 1.0, blur: 0.0, noise: 0.03, foreshortening: [0.9, 1.0] },
                TierSpec { scale: 0.72, blur: 0.6, noise: 0.08, foreshortening: [0.65, 0.8] },
                TierSpec { scale: 0.5, blur: 1.0, noise: 0.15, foreshortening: [0.4, 0.55] },
            ],
            train: 600,
            val: 90,
            test: 150,
            missing: Vec::new(),
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_classes < 2 {
            return invalid(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_classes > MOTION_PATTERNS {
            return invalid(format!("at most {MOTION_PATTERNS} classes are renderable"));
        }
        if self.tiers.len() < 2 {
            return invalid(format!("need at least 2 altitude tiers, got {}", self.tiers.len()));
        }
        let [t, c, h, w] = self.clip_shape;
        if t < 2 || c == 0 || h < 8 || w < 8 {
            return invalid(format!("clip shape {:?} too small", self.clip_shape));
        }
        for (i, tier) in self.tiers.iter().enumerate() {
            let [lo, hi] = tier.foreshortening;
            if !(tier.scale > 0.0 && tier.blur >= 0.0 && tier.noise >= 0.0 && lo > 0.0 && lo <= hi && hi <= 1.0) {
                return invalid(format!("tier {i} has out-of-range parameters"));
            }
        }
        for (i, pair) in self.tiers.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if b.scale >= a.scale {
                return invalid(format!("actor scale must strictly decrease (tiers {i}, {})", i + 1));
            }
            if b.blur <= a.blur {
                return invalid(format!("blur must strictly increase (tiers {i}, {})", i + 1));
            }
            if b.noise <= a.noise {
                return invalid(format!("noise must strictly increase (tiers {i}, {})", i + 1));
            }
            if b.foreshortening[1] >= a.foreshortening[0] {
                return invalid(format!("foreshortening ranges must be disjoint and decreasing (tiers {i}, {})", i + 1));
            }
        }
        for &[tier, class] in &self.missing {
            if tier >= self.tiers.len() || class >= self.num_classes {
                return invalid(format!("missing pair ({tier}, {class}) out of range"));
            }
        }
        if self.combinations().is_empty() {
            return invalid("every (tier, class) combination is missing".into());
        }
        Ok(())
    }

    /// Generated `(tier, class)` combinations, class-major.
    pub fn combinations(&self) -> Vec<(usize, usize)> {
        (0..self.num_classes)
            .flat_map(|k| (0..self.tiers.len()).map(move |t| (t, k)))
            .filter(|&(t, k)| !self.missing.contains(&[t, k]))
            .collect()
    }

    fn split_count(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

/// Head-to-body ratio of a figure with the given foreshortening.
pub fn figure_ratio(foreshortening: f64) -> f64 {
    2.0 * HEAD_RADIUS / (2.0 * HEAD_RADIUS + BODY_SPAN * foreshortening)
}

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

impl Segment {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (cx, cy) = (self.a.0 + t * dx - p.0, self.a.1 + t * dy - p.1);
        cx * cx + cy * cy <= self.radius * self.radius
    }
}

/// Per-clip random draw shared by every frame.
struct Actor {
    class: usize,
    /// Pixels per figure unit.
    unit: f64,
    foreshortening: f64,
    center_x: f64,
    top_y: f64,
    phase: f64,
    cycles: f64,
    direction: f64,
}

struct Pose {
    head: (f64, f64),
    segments: Vec<Segment>,
}

impl Actor {
    /// Joint angles are measured from straight down, positive towards +x.
    fn pose(&self, t: f64) -> Pose {
        let s = (2.0 * PI * self.cycles * t + self.phase).sin();
        let (mut dx, mut dy) = (0.0, 0.0);
        let (mut arm_r, mut arm_l, mut leg_r, mut leg_l) = (0.35, 0.35, 0.12, 0.12);
        let mut lean = 0.0;
        match self.class {
            0 => arm_r = 2.5 + 0.5 * s,
            1 => {
                arm_r = 1.6 + 0.9 * s;
                arm_l = arm_r;
            }
            2 => {
                dx = self.direction * 0.3 * (t - 0.5);
                leg_r = 0.45 * s;
                leg_l = -0.45 * s;
                arm_r = -0.4 * s;
                arm_l = 0.4 * s;
            }
            3 => {
                dy = -0.12 * s.abs();
                arm_r = 2.8;
                arm_l = 2.8;
            }
            4 => {
                leg_r = 0.15 + 1.1 * s.max(0.0);
                arm_r = 0.8;
                arm_l = 0.8;
            }
            _ => lean = 0.9 * s.max(0.0),
        }
        let u = self.unit;
        let f = self.foreshortening;
        let ox = self.center_x + dx * u;
        let oy = self.top_y + dy * u;
        // Figure units (x right, y down from head top) to pixels; below-head
        // offsets are foreshortened.
        let px = |x: f64, y: f64| {
            let yy = if y > 2.0 * HEAD_RADIUS { 2.0 * HEAD_RADIUS + (y - 2.0 * HEAD_RADIUS) * f } else { y };
            (ox + x * u, oy + yy * u)
        };
        let hip = (0.0, 0.56);
        // Leaning rotates the upper body about the hip.
        let rot = |(x, y): (f64, f64)| {
            let (vx, vy) = (x - hip.0, y - hip.1);
            (hip.0 + vx * lean.cos() + vy * lean.sin(), hip.1 - vx * lean.sin() + vy * lean.cos())
        };
        let neck = rot((0.0, 2.0 * HEAD_RADIUS));
        let shoulder = rot((0.0, 0.27));
        let head_c = rot((0.0, HEAD_RADIUS));
        let limb = |from: (f64, f64), angle: f64, len: f64| (from.0 + len * angle.sin(), from.1 + len * angle.cos());
        let seg = |a: (f64, f64), b: (f64, f64), r: f64| Segment { a: px(a.0, a.1), b: px(b.0, b.1), radius: r * u };
        let segments = vec![
            seg(neck, hip, 0.06),
            seg(shoulder, limb(shoulder, arm_r, 0.32), 0.035),
            seg(shoulder, limb(shoulder, -arm_l, 0.32), 0.035),
            seg(hip, limb(hip, leg_r, 0.44), 0.04),
            seg(hip, limb(hip, -leg_l, 0.44), 0.04),
        ];
        // The head is never foreshortened; place it by its (rotated) center.
        let head = (ox + head_c.0 * u, oy + head_c.1.min(HEAD_RADIUS) * u + (head_c.1 - HEAD_RADIUS).max(0.0) * f * u);
        Pose { head, segments }
    }

    fn detection(&self, sample_id: &str) -> DetectionRecord {
        let u = self.unit;
        let head = 2.0 * HEAD_RADIUS * u;
        let body = (2.0 * HEAD_RADIUS + BODY_SPAN * self.foreshortening) * u;
        DetectionRecord {
            sample_id: sample_id.to_string(),
            head_box: [(self.center_x - HEAD_RADIUS * u).max(0.0), self.top_y.max(0.0), head, head],
            body_box: [(self.center_x - 0.25 * u).max(0.0), self.top_y.max(0.0), 0.5 * u, body],
        }
    }
}

fn render_frame(pose: &Pose, radius: f64, h: usize, w: usize, out: &mut [f64]) {
    const SUB: usize = 3;
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let p = (x as f64 + (sx as f64 + 0.5) / SUB as f64, y as f64 + (sy as f64 + 0.5) / SUB as f64);
                    let (hx, hy) = (p.0 - pose.head.0, p.1 - pose.head.1);
                    if hx * hx + hy * hy <= radius * radius || pose.segments.iter().any(|s| s.contains(p)) {
                        hits += 1;
                    }
                }
            }
            out[y * w + x] = hits as f64 / (SUB * SUB) as f64;
        }
    }
}

fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|i| kernel[(i + r) as usize] * img[y * w + clamp(x as isize + i, w)])
                .sum::<f64>()
                / norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            img[y * w + x] = (-r..=r)
                .map(|i| kernel[(i + r) as usize] * tmp[clamp(y as isize + i, h) * w + x])
                .sum::<f64>()
                / norm;
        }
    }
}

/// Renders one clip `[T, C, H, W]` (values rounded to `f32`) and its detection.
pub fn render_clip(
    spec: &GeneratorSpec,
    tier: usize,
    class: usize,
    seed: u64,
    path: &[u64],
    sample_id: &str,
) -> (Tensor, DetectionRecord) {
    let mut rng = stream(seed, path);
    let [t_len, channels, h, w] = spec.clip_shape;
    let ts = &spec.tiers[tier];
    let unit = ts.scale * 0.8 * h.min(w) as f64;
    let [flo, fhi] = ts.foreshortening;
    let foreshortening = flo + (fhi - flo) * rng.random::<f64>();
    let height = (2.0 * HEAD_RADIUS + BODY_SPAN * foreshortening) * unit;
    let actor = Actor {
        class,
        unit,
        foreshortening,
        center_x: w as f64 / 2.0 + rng.random_range(-1.5..1.5),
        top_y: (h as f64 - height) / 2.0 + rng.random_range(-1.0..1.0),
        phase: rng.random_range(0.0..2.0 * PI),
        cycles: rng.random_range(1.0..1.5),
        direction: if rng.random::<bool>() { 1.0 } else { -1.0 },
    };
    let noise = Normal::new(0.0, ts.noise.max(1e-12)).expect("finite noise");
    let mut data = Vec::with_capacity(t_len * channels * h * w);
    let mut frame = vec![0.0; h * w];
    for t in 0..t_len {
        let pose = actor.pose(t as f64 / t_len as f64);
        render_frame(&pose, HEAD_RADIUS * unit, h, w, &mut frame);
        gaussian_blur(&mut frame, h, w, ts.blur);
        for _ in 0..channels {
            for &v in &frame {
                let noisy = if ts.noise > 0.0 { v + noise.sample(&mut rng) } else { v };
                data.push(noisy.clamp(0.0, 1.0) as f32 as f64);
            }
        }
    }
    (Tensor::from_vec(&[t_len, channels, h, w], data), actor.detection(sample_id))
}

/// Builds the whole benchmark in memory; a pure function of `(spec, seed)`.
pub fn synthesize(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let combos = spec.combinations();
    let mut splits = BTreeMap::new();
    let mut samples = BTreeMap::new();
    let mut clips = BTreeMap::new();
    let mut detections = BTreeMap::new();
    for (split_index, split) in SPLIT_NAMES.iter().enumerate() {
        let count = spec.split_count(split);
        let mut ids = Vec::with_capacity(count);
        for j in 0..count {
            let (tier, class) = combos[j % combos.len()];
            let id = format!("{split}-{j:05}");
            let (frames, det) = render_clip(spec, tier, class, seed, &[split_index as u64, j as u64], &id);
            samples.insert(id.clone(), SampleMeta { label: class, true_altitude_tier: Some(tier) });
            clips.insert(
                id.clone(),
                ClipRecord { sample_id: id.clone(), frames, label: class, true_altitude_tier: Some(tier) },
            );
            detections.insert(id.clone(), det);
            ids.push(id);
        }
        splits.insert(split.to_string(), ids);
    }
    let manifest = DatasetManifest {
        clip_shape: spec.clip_shape,
        num_classes: spec.num_classes,
        splits,
        detections_path: "detections.jsonl".into(),
        clips_path: "clips".into(),
        generator_seed: Some(seed),
        samples,
    };
    Ok(Dataset { manifest, clips, detections })
}

/// Generates the benchmark and writes it under `out_dir`.
pub fn generate_synthetic_dataset(spec: &GeneratorSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let dataset = synthesize(spec, seed)?;
    dataset.write(out_dir)?;
    Ok(dataset.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec { train: 30, val: 0, test: 15, ..GeneratorSpec::default() }
    }

    #[test]
    fn non_monotone_blur_is_rejected() {
        let mut spec = small_spec();
        spec.tiers[2].blur = 0.1;
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn single_class_is_rejected() {
        let spec = GeneratorSpec { num_classes: 1, ..small_spec() };
        assert!(matches!(synthesize(&spec, 1), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn higher_tier_has_smaller_actor_and_larger_ratio() {
        let spec = small_spec();
        let (_, low) = render_clip(&spec, 0, 2, 3, &[0, 0], "a");
        let (_, high) = render_clip(&spec, 2, 2, 3, &[0, 0], "b");
        assert!(high.body_height() < low.body_height());
        assert!(high.head_height() / high.body_height() > low.head_height() / low.body_height());
    }

    #[test]
    fn frames_are_in_unit_range_and_not_blank() {
        let spec = small_spec();
        for class in 0..spec.num_classes {
            let (frames, _) = render_clip(&spec, 0, class, 9, &[0, class as u64], "x");
            assert!(frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(frames.sum() > 10.0, "class {class} renders almost nothing");
        }
    }

    #[test]
    fn missing_pairs_are_skipped() {
        let spec = GeneratorSpec { missing: vec![[2, 3]], ..small_spec() };
        let ds = synthesize(&spec, 4).unwrap();
        assert!(ds.clips.values().all(|c| !(c.true_altitude_tier == Some(2) && c.label == 3)));
    }
}
