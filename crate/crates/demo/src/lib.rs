//! Browser bindings: render benchmark sprites, partition head-to-body ratios
//! into views and turn per-view logits into credibility weights.
//!
//! Every export returns a JSON string so the page needs no glue beyond
//! `JSON.parse`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use pogmv::apog::credibility_weights;
use pogmv::data::synth::render_clip;
use pogmv::data::GeneratorSpec;
use pogmv::error::{Error, Result};
use pogmv::partition::{assign_views, head_to_body_ratio};

#[derive(Serialize)]
struct Sprite {
    frames: usize,
    height: usize,
    width: usize,
    /// Frame-major grey levels in `[0, 1]`.
    pixels: Vec<f32>,
    ratio: f64,
}

#[derive(Serialize)]
struct Partition {
    views: Vec<usize>,
    thresholds: Vec<f64>,
    sizes: Vec<usize>,
}

#[derive(Serialize)]
struct Credibility {
    strength: Vec<f64>,
    c: Vec<f64>,
    c_norm: Vec<f64>,
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable value")
}

pub fn sprite_json(tier: usize, class: usize, seed: u64) -> Result<String> {
    let spec = GeneratorSpec::default();
    if tier >= spec.tiers.len() {
        return Err(Error::InvalidSpec(format!("tier {tier} outside 0..{}", spec.tiers.len())));
    }
    if class >= spec.num_classes {
        return Err(Error::LabelOutOfRange { label: class, classes: spec.num_classes });
    }
    let (clip, detection) = render_clip(&spec, tier, class, seed, &[tier as u64, class as u64], "demo");
    let [frames, channels, height, width] = spec.clip_shape;
    let plane = height * width;
    let pixels = clip.data().chunks(channels * plane).flat_map(|frame| frame[..plane].iter().map(|&v| v as f32)).collect();
    Ok(to_json(&Sprite { frames, height, width, pixels, ratio: head_to_body_ratio(&detection)? }))
}

pub fn partition_json(ratios: &[f64], views: usize) -> Result<String> {
    let named: Vec<(String, f64)> = ratios.iter().enumerate().map(|(i, &r)| (format!("{i:06}"), r)).collect();
    let a = assign_views(&named, views)?;
    let map = a.view_map();
    let views = named.iter().map(|(id, _)| map[id]).collect();
    Ok(to_json(&Partition { views, thresholds: a.thresholds.clone(), sizes: a.group_sizes() }))
}

/// `logits` holds `views` rows of equal length, concatenated.
pub fn credibility_json(logits: &[f64], views: usize) -> Result<String> {
    if views == 0 || logits.is_empty() || !logits.len().is_multiple_of(views) {
        return Err(Error::ShapeMismatch(format!("{} logits for {views} views", logits.len())));
    }
    let rows: Vec<Vec<f64>> = logits.chunks(logits.len() / views).map(<[f64]>::to_vec).collect();
    let w = credibility_weights(&rows);
    let strength = rows.iter().map(|z| pogmv::apog::dirichlet_strength(z)).collect();
    Ok(to_json(&Credibility { strength, c: w.c, c_norm: w.c_norm }))
}

fn js(e: Error) -> JsError {
    JsError::new(&format!("{}: {e}", e.name()))
}

#[wasm_bindgen]
pub fn sprite(tier: usize, class: usize, seed: u32) -> std::result::Result<String, JsError> {
    sprite_json(tier, class, u64::from(seed)).map_err(js)
}

#[wasm_bindgen]
pub fn partition(ratios: Vec<f64>, views: usize) -> std::result::Result<String, JsError> {
    partition_json(&ratios, views).map_err(js)
}

#[wasm_bindgen]
pub fn credibility(logits: Vec<f64>, views: usize) -> std::result::Result<String, JsError> {
    credibility_json(&logits, views).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn sprite_has_one_plane_per_frame() {
        let v: Value = serde_json::from_str(&sprite_json(1, 2, 4).unwrap()).unwrap();
        let n = v["frames"].as_u64().unwrap() * v["height"].as_u64().unwrap() * v["width"].as_u64().unwrap();
        assert_eq!(v["pixels"].as_array().unwrap().len() as u64, n);
        assert!(v["ratio"].as_f64().unwrap() > 0.0);
        assert_eq!(sprite_json(1, 2, 4).unwrap(), sprite_json(1, 2, 4).unwrap());
    }

    #[test]
    fn higher_tiers_give_larger_ratios() {
        let ratio = |tier| {
            let v: Value = serde_json::from_str(&sprite_json(tier, 0, 1).unwrap()).unwrap();
            v["ratio"].as_f64().unwrap()
        };
        assert!(ratio(0) < ratio(1) && ratio(1) < ratio(2));
    }

    #[test]
    fn bad_sprite_arguments_are_rejected() {
        assert!(matches!(sprite_json(9, 0, 0), Err(Error::InvalidSpec(_))));
        assert!(matches!(sprite_json(0, 9, 0), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn partition_keeps_input_order() {
        let v: Value = serde_json::from_str(&partition_json(&[0.5, 0.1, 0.3, 0.2], 2).unwrap()).unwrap();
        assert_eq!(v["views"], serde_json::json!([1, 0, 1, 0]));
        assert_eq!(v["sizes"], serde_json::json!([2, 2]));
        assert!(partition_json(&[0.1], 3).is_err());
    }

    #[test]
    fn credibility_matches_zero_evidence_value() {
        let v: Value = serde_json::from_str(&credibility_json(&[0.0; 6], 3).unwrap()).unwrap();
        for c in v["c"].as_array().unwrap() {
            assert_eq!(c.as_f64().unwrap(), 1.5);
        }
        assert!(credibility_json(&[1.0; 5], 2).is_err());
    }
}
