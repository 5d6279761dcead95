//! Toy 3-D convolutional extractors and decoders.
//!
//! Each encoder block is a spatial `(1,3,3)` stride-`(1,2,2)` convolution and a
//! temporal `(3,1,1)` convolution, each followed by batch normalization and
//! ReLU. The common extractor and every view-specific extractor share this
//! two-block layout. Decoders mirror it with transposed convolutions.
//!
//! Parameter names:
//!
//! | prefix | contents |
//! |---|---|
//! | `common.b{1,2}.{spatial,temporal}.weight`, `common.b{1,2}.bn{1,2}.*` | shared extractor |
//! | `special.{i}.…` | same layout, one set per view |
//! | `decoder.{i}.{t1,up1,t2,up2}.*`, `decoder.{i}.bn{1,2,3}.*` | per-view decoder |
//! | `decouple.{proj,r1,bn,r2}.*` | decoupling unit |
//! | `head.{weight,bias}` | shared classifier |
//! | `probe.{i}.{weight,bias}` | per-view auxiliary classifiers |
//! | `graph.w_raw` | inter-view weights |
//!
//! Normalization layers carry `gamma`, `beta` and the buffers `running_mean`,
//! `running_var`.

use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Tape, Var};
use crate::data::{ClipRecord, ClipShape};
use crate::error::{shape_mismatch, Error, Result};
use crate::nn::{init_batch_norm, init_conv, init_conv_transpose, init_linear, Mode, Session};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub views: usize,
    pub num_classes: usize,
    pub clip_shape: ClipShape,
    pub width1: usize,
    pub width2: usize,
    pub decouple_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { views: 3, num_classes: 5, clip_shape: [8, 1, 16, 16], width1: 8, width2: 16, decouple_hidden: 16 }
    }
}

fn spatial() -> ConvGeometry {
    ConvGeometry::new([1, 3, 3], [1, 2, 2], [0, 1, 1])
}

fn temporal() -> ConvGeometry {
    ConvGeometry::new([3, 1, 1], [1, 1, 1], [1, 0, 0])
}

fn upsample() -> ConvGeometry {
    spatial().with_output_padding([0, 1, 1])
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views < 2 {
            return Err(Error::InvalidViewCount(self.views));
        }
        let [t, c, h, w] = self.clip_shape;
        if self.num_classes < 2 || t == 0 || c == 0 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "model needs K >= 2 and H, W divisible by 4 (K = {}, clip {:?})",
                self.num_classes, self.clip_shape
            )));
        }
        if self.width1 == 0 || self.width2 == 0 || self.decouple_hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Per-sample feature shape `[C_f, T_f, H_f, W_f]`.
    pub fn feature_shape(&self) -> [usize; 4] {
        let [t, _, h, w] = self.clip_shape;
        [self.width2, t, h / 4, w / 4]
    }

    /// Network input shape for `n` clips.
    pub fn input_shape(&self, n: usize) -> [usize; 5] {
        let [t, c, h, w] = self.clip_shape;
        [n, c, t, h, w]
    }
}

fn init_encoder(store: &mut ParamStore, rng: &mut impl rand::Rng, prefix: &str, cfg: &ModelConfig) {
    let channels = cfg.clip_shape[1];
    for (block, (cin, cout)) in [(channels, cfg.width1), (cfg.width1, cfg.width2)].into_iter().enumerate() {
        let b = format!("{prefix}.b{}", block + 1);
        init_conv(store, rng, &format!("{b}.spatial"), [cout, cin, 1, 3, 3], false);
        init_batch_norm(store, &format!("{b}.bn1"), cout);
        init_conv(store, rng, &format!("{b}.temporal"), [cout, cout, 3, 1, 1], false);
        init_batch_norm(store, &format!("{b}.bn2"), cout);
    }
}

fn init_decoder(store: &mut ParamStore, rng: &mut impl rand::Rng, prefix: &str, cfg: &ModelConfig) {
    let (c1, c2, c) = (cfg.width1, cfg.width2, cfg.clip_shape[1]);
    init_conv(store, rng, &format!("{prefix}.t1"), [c2, 2 * c2, 3, 1, 1], false);
    init_batch_norm(store, &format!("{prefix}.bn1"), c2);
    init_conv_transpose(store, rng, &format!("{prefix}.up1"), [c2, c1, 1, 3, 3], false);
    init_batch_norm(store, &format!("{prefix}.bn2"), c1);
    init_conv(store, rng, &format!("{prefix}.t2"), [c1, c1, 3, 1, 1], false);
    init_batch_norm(store, &format!("{prefix}.bn3"), c1);
    init_conv_transpose(store, rng, &format!("{prefix}.up2"), [c1, c, 1, 3, 3], true);
}

/// Fresh parameters for every component, drawn from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let c2 = cfg.width2;
    init_encoder(&mut store, &mut stream(seed, &[1]), "common", cfg);
    for i in 0..cfg.views {
        init_encoder(&mut store, &mut stream(seed, &[2, i as u64]), &format!("special.{i}"), cfg);
        init_decoder(&mut store, &mut stream(seed, &[3, i as u64]), &format!("decoder.{i}"), cfg);
        init_linear(&mut store, &mut stream(seed, &[4, i as u64]), &format!("probe.{i}"), cfg.num_classes, c2);
    }
    let mut rng = stream(seed, &[5]);
    init_conv(&mut store, &mut rng, "decouple.proj", [c2, c2, 1, 1, 1], true);
    init_conv(&mut store, &mut rng, "decouple.r1", [cfg.decouple_hidden, 2 * c2, 1, 1, 1], false);
    init_batch_norm(&mut store, "decouple.bn", cfg.decouple_hidden);
    init_conv(&mut store, &mut rng, "decouple.r2", [c2, cfg.decouple_hidden, 1, 1, 1], true);
    init_linear(&mut store, &mut stream(seed, &[6]), "head", cfg.num_classes, c2);
    store.insert("graph.w_raw", Tensor::zeros(&[cfg.views, cfg.views]));
    Ok(store)
}

/// Stacks clips `[T, C, H, W]` into the network layout `[N, C, T, H, W]`.
pub fn clips_to_input(cfg: &ModelConfig, clips: &[&ClipRecord]) -> Result<Tensor> {
    let [t, c, h, w] = cfg.clip_shape;
    let mut data = Vec::with_capacity(clips.len() * t * c * h * w);
    for clip in clips {
        if clip.shape() != cfg.clip_shape {
            return Err(shape_mismatch(&format!("clip `{}`", clip.sample_id), &clip.shape(), &cfg.clip_shape));
        }
        let frames = clip.frames.data();
        for ci in 0..c {
            for ti in 0..t {
                let offset = (ti * c + ci) * h * w;
                data.extend_from_slice(&frames[offset..offset + h * w]);
            }
        }
    }
    Ok(Tensor::from_vec(&cfg.input_shape(clips.len()), data))
}

/// Inverse of [`clips_to_input`] for one sample of a `[N, C, T, H, W]` tensor.
pub fn output_to_clip(cfg: &ModelConfig, output: &Tensor, sample: usize) -> Tensor {
    let [t, c, h, w] = cfg.clip_shape;
    let per = t * c * h * w;
    let src = &output.data()[sample * per..(sample + 1) * per];
    let mut data = vec![0.0; per];
    for ci in 0..c {
        for ti in 0..t {
            let (from, to) = ((ci * t + ti) * h * w, (ti * c + ci) * h * w);
            data[to..to + h * w].copy_from_slice(&src[from..from + h * w]);
        }
    }
    Tensor::from_vec(&cfg.clip_shape, data)
}

fn check_input(s: &Session, cfg: &ModelConfig, x: Var) -> Result<()> {
    let shape = s.tape.shape(x);
    let expect = cfg.input_shape(shape.first().copied().unwrap_or(0));
    if shape != expect {
        return Err(shape_mismatch("extractor input", &shape, &expect));
    }
    Ok(())
}

fn encoder(s: &Session, prefix: &str, x: Var) -> Var {
    let t = s.tape;
    let mut h = x;
    for block in 1..=2 {
        let b = format!("{prefix}.b{block}");
        h = t.relu(s.batch_norm(&format!("{b}.bn1"), s.conv(&format!("{b}.spatial"), h, spatial())));
        h = t.relu(s.batch_norm(&format!("{b}.bn2"), s.conv(&format!("{b}.temporal"), h, temporal())));
    }
    h
}

pub fn extract_common(s: &Session, cfg: &ModelConfig, x: Var) -> Result<Var> {
    check_input(s, cfg, x)?;
    Ok(encoder(s, "common", x))
}

pub fn extract_special(s: &Session, cfg: &ModelConfig, x: Var, view: usize) -> Result<Var> {
    if view >= cfg.views {
        return Err(Error::UnknownView { view, views: cfg.views });
    }
    check_input(s, cfg, x)?;
    Ok(encoder(s, &format!("special.{view}"), x))
}

/// Maps `[action, view]` features back to `[N, C, T, H, W]`.
pub fn decode(s: &Session, cfg: &ModelConfig, action: Var, view_feat: Var, view: usize) -> Result<Var> {
    if view >= cfg.views {
        return Err(Error::UnknownView { view, views: cfg.views });
    }
    let (sa, sv) = (s.tape.shape(action), s.tape.shape(view_feat));
    if sa != sv || sa.len() != 5 || sa[1..] != cfg.feature_shape() {
        return Err(shape_mismatch("decoder inputs", &sa, &sv));
    }
    let t = s.tape;
    let p = format!("decoder.{view}");
    let h = t.concat_channels(action, view_feat);
    let h = t.relu(s.batch_norm(&format!("{p}.bn1"), s.conv(&format!("{p}.t1"), h, temporal())));
    let h = t.relu(s.batch_norm(&format!("{p}.bn2"), s.conv_transpose(&format!("{p}.up1"), h, upsample())));
    let h = t.relu(s.batch_norm(&format!("{p}.bn3"), s.conv(&format!("{p}.t2"), h, temporal())));
    Ok(s.conv_transpose(&format!("{p}.up2"), h, upsample()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Common,
    Special,
    Action,
    View,
}

/// One sample's feature map `[C_f, T_f, H_f, W_f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub provenance: Provenance,
    pub view_index: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor, provenance: Provenance, view_index: usize) -> Self {
        Self { values, provenance, view_index }
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

fn single_pass(
    store: &ParamStore,
    cfg: &ModelConfig,
    clip: &ClipRecord,
    f: impl FnOnce(&Session, Var) -> Result<Var>,
) -> Result<Tensor> {
    let x = clips_to_input(cfg, &[clip])?;
    let tape = Tape::new();
    let s = Session::new(&tape, store, Mode::Eval);
    let out = f(&s, tape.constant(x))?;
    let value = tape.value(out).clone();
    let shape = value.shape()[1..].to_vec();
    value.reshape(&shape)
}

/// Inference-mode common features of one clip.
pub fn common_features(store: &ParamStore, cfg: &ModelConfig, clip: &ClipRecord, view: usize) -> Result<FeatureMap> {
    let values = single_pass(store, cfg, clip, |s, x| extract_common(s, cfg, x))?;
    Ok(FeatureMap::new(values, Provenance::Common, view))
}

/// Inference-mode view-specific features of one clip.
pub fn special_features(store: &ParamStore, cfg: &ModelConfig, clip: &ClipRecord, view: usize) -> Result<FeatureMap> {
    let values = single_pass(store, cfg, clip, |s, x| extract_special(s, cfg, x, view))?;
    Ok(FeatureMap::new(values, Provenance::Special, view))
}

/// Inference-mode reconstruction `[T, C, H, W]` from one sample's features.
pub fn reconstruct(
    store: &ParamStore,
    cfg: &ModelConfig,
    action: &FeatureMap,
    view_feat: &FeatureMap,
) -> Result<Tensor> {
    if action.shape() != view_feat.shape() {
        return Err(shape_mismatch("decoder inputs", action.shape(), view_feat.shape()));
    }
    let lift = |f: &FeatureMap| {
        let mut shape = vec![1];
        shape.extend_from_slice(f.shape());
        f.values.reshape(&shape)
    };
    let tape = Tape::new();
    let s = Session::new(&tape, store, Mode::Eval);
    let (a, v) = (tape.constant(lift(action)?), tape.constant(lift(view_feat)?));
    let out = decode(&s, cfg, a, v, action.view_index)?;
    let value = tape.value(out).clone();
    Ok(output_to_clip(cfg, &value, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, DEFAULT_STEP};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { views: 2, num_classes: 3, clip_shape: [4, 1, 8, 8], width1: 3, width2: 4, decouple_hidden: 4 }
    }

    fn clip(cfg: &ModelConfig, seed: u64) -> ClipRecord {
        let mut rng = stream(seed, &[]);
        let shape = cfg.clip_shape;
        let data = (0..shape.iter().product()).map(|_| rng.random::<f64>()).collect();
        ClipRecord { sample_id: "c".into(), frames: Tensor::from_vec(&shape, data), label: 0, true_altitude_tier: None }
    }

    #[test]
    fn zero_final_layer_gives_zero_features() {
        let cfg = tiny();
        let mut store = init_params(&cfg, 1).unwrap();
        for name in ["common.b2.bn2.gamma", "common.b2.bn2.beta"] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut c = clip(&cfg, 2);
        c.frames.data_mut().fill(0.0);
        let f = common_features(&store, &cfg, &c, 0).unwrap();
        assert_eq!(f.shape(), &cfg.feature_shape());
        assert_eq!(f.values.max_abs(), 0.0);
    }

    #[test]
    fn extraction_is_deterministic_and_view_specific() {
        let cfg = tiny();
        let store = init_params(&cfg, 1).unwrap();
        let c = clip(&cfg, 3);
        assert_eq!(special_features(&store, &cfg, &c, 1).unwrap(), special_features(&store, &cfg, &c, 1).unwrap());
        assert_ne!(
            special_features(&store, &cfg, &c, 0).unwrap().values,
            special_features(&store, &cfg, &c, 1).unwrap().values
        );
        assert!(matches!(special_features(&store, &cfg, &c, 2), Err(Error::UnknownView { view: 2, views: 2 })));
    }

    #[test]
    fn wrong_clip_shape_is_rejected() {
        let cfg = tiny();
        let store = init_params(&cfg, 1).unwrap();
        let bad = clip(&ModelConfig { clip_shape: [5, 1, 8, 8], ..tiny() }, 1);
        assert!(matches!(common_features(&store, &cfg, &bad, 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn decoder_restores_clip_shape() {
        let cfg = tiny();
        let mut store = init_params(&cfg, 4).unwrap();
        let c = clip(&cfg, 5);
        let f = special_features(&store, &cfg, &c, 1).unwrap();
        let out = reconstruct(&store, &cfg, &f, &f).unwrap();
        assert_eq!(out.shape(), &cfg.clip_shape);
        for name in store.group("decoder.1.up2") {
            store.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
        let zero = FeatureMap::new(Tensor::zeros(&cfg.feature_shape()), Provenance::Action, 1);
        assert_eq!(reconstruct(&store, &cfg, &zero, &zero).unwrap().max_abs(), 0.0);
        let small = FeatureMap::new(Tensor::zeros(&[4, 4, 1, 1]), Provenance::View, 1);
        assert!(matches!(reconstruct(&store, &cfg, &zero, &small), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn layout_conversion_round_trips() {
        let cfg = ModelConfig { clip_shape: [3, 2, 4, 4], ..tiny() };
        let c = clip(&cfg, 6);
        let x = clips_to_input(&cfg, &[&c]).unwrap();
        assert_eq!(output_to_clip(&cfg, &x, 0), c.frames);
    }

    #[test]
    fn encoder_and_decoder_gradients_match_finite_differences() {
        let cfg = tiny();
        let store = init_params(&cfg, 7).unwrap();
        let x = clips_to_input(&cfg, &[&clip(&cfg, 8), &clip(&cfg, 9)]).unwrap();
        for prefix in ["common.b1.spatial.weight", "special.1.b2.temporal.weight", "decoder.0.up1.weight", "decoder.0.t1.weight"] {
            let w0 = store.get(prefix).unwrap().clone();
            let checks = check_inputs(&[w0], 12, DEFAULT_STEP, |tape, vars| {
                let s = Session::new(tape, &store, Mode::Train);
                s.bind(prefix, vars[0]);
                let xv = tape.constant(x.clone());
                let fs = extract_special(&s, &cfg, xv, 1).unwrap();
                let fc = extract_common(&s, &cfg, xv).unwrap();
                let rec = decode(&s, &cfg, fs, fc, 0).unwrap();
                let probe = tape.sum_sq(tape.sub(rec, xv));
                tape.add(probe, tape.sum_sq(fs))
            });
            assert!(checks[0].relative_error < 1e-4, "{prefix}: {}", checks[0].relative_error);
        }
    }
}
