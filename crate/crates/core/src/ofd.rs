//! Feature decoupling: the correlation map, the action/view split and
//! missing-view compensation.

use crate::autograd::{ConvGeometry, Tape, Var};
use crate::backbone::{FeatureMap, Provenance};
use crate::error::{shape_mismatch, Error, Result};
use crate::nn::{Mode, Session};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `sigmoid(r2(relu(bn(r1([proj(f_c), f_s])))))` over `[N, C, T, H, W]` features.
pub fn correlation_map(s: &Session, f_c: Var, f_s: Var) -> Result<Var> {
    let (sc, ss) = (s.tape.shape(f_c), s.tape.shape(f_s));
    if sc != ss {
        return Err(shape_mismatch("correlation map inputs", &sc, &ss));
    }
    let t = s.tape;
    let proj = s.conv("decouple.proj", f_c, ConvGeometry::pointwise());
    let h = s.conv("decouple.r1", t.concat_channels(proj, f_s), ConvGeometry::pointwise());
    let h = t.relu(s.batch_norm("decouple.bn", h));
    Ok(t.sigmoid(s.conv("decouple.r2", h, ConvGeometry::pointwise())))
}

/// `(f_s ⊗ R, f_s ⊗ (1 − R))`.
pub fn decouple(tape: &Tape, f_s: Var, r: Var) -> Result<(Var, Var)> {
    let (sf, sr) = (tape.shape(f_s), tape.shape(r));
    if sf != sr {
        return Err(shape_mismatch("decouple inputs", &sf, &sr));
    }
    Ok((tape.mul(f_s, r), tape.mul(f_s, tape.one_minus(r))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledPair {
    pub action: FeatureMap,
    pub view: FeatureMap,
    pub correlation: Tensor,
}

/// Tensor form of [`decouple`] for a single sample.
pub fn decouple_features(f_s: &FeatureMap, r: &Tensor) -> Result<DecoupledPair> {
    if f_s.shape() != r.shape() {
        return Err(shape_mismatch("decouple inputs", f_s.shape(), r.shape()));
    }
    let action = f_s.values.zip_map(r, |f, r| f * r);
    let view = f_s.values.zip_map(r, |f, r| f * (1.0 - r));
    Ok(DecoupledPair {
        action: FeatureMap::new(action, Provenance::Action, f_s.view_index),
        view: FeatureMap::new(view, Provenance::View, f_s.view_index),
        correlation: r.clone(),
    })
}

/// Inference-mode correlation map for one sample's feature pair.
pub fn correlation_features(store: &ParamStore, f_c: &FeatureMap, f_s: &FeatureMap) -> Result<Tensor> {
    if f_c.shape() != f_s.shape() {
        return Err(shape_mismatch("correlation map inputs", f_c.shape(), f_s.shape()));
    }
    let tape = Tape::new();
    let s = Session::new(&tape, store, Mode::Eval);
    let lift = |f: &FeatureMap| {
        let mut shape = vec![1];
        shape.extend_from_slice(f.shape());
        f.values.reshape(&shape)
    };
    let r = correlation_map(&s, tape.constant(lift(f_c)?), tape.constant(lift(f_s)?))?;
    let value = tape.value(r).clone();
    value.reshape(f_s.shape())
}

/// Mean of the present common features, standing in for view `missing`.
pub fn compensate_missing(common: &[Option<Tensor>], missing: usize) -> Result<Tensor> {
    if missing >= common.len() {
        return Err(Error::IndexOutOfRange { index: missing, len: common.len() });
    }
    let present: Vec<&Tensor> =
        common.iter().enumerate().filter(|&(i, _)| i != missing).filter_map(|(_, f)| f.as_ref()).collect();
    let Some(first) = present.first() else {
        return Err(Error::AllViewsMissing);
    };
    let mut sum = Tensor::zeros(first.shape());
    for f in &present {
        if f.shape() != first.shape() {
            return Err(shape_mismatch("compensation inputs", f.shape(), first.shape()));
        }
        sum.add_assign(f);
    }
    Ok(sum.map(|v| v / present.len() as f64))
}

/// Tape form of [`compensate_missing`] over already-present features.
pub fn compensate_vars(tape: &Tape, present: &[Var]) -> Result<Var> {
    if present.is_empty() {
        return Err(Error::AllViewsMissing);
    }
    Ok(tape.scale(tape.add_n(present), 1.0 / present.len() as f64))
}
