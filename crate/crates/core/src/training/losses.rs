use serde::{Deserialize, Serialize};

use super::config::LossWeights;
use crate::apog::CredibilityWeights;
use crate::autograd::{Tape, Var};
use crate::backbone::FeatureMap;
use crate::error::{shape_mismatch, Error, Result};

/// Every loss term of one step plus the composites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub kt: f64,
    pub fd: f64,
    pub vg: f64,
    pub rec: f64,
    pub cyc: f64,
    pub dn: f64,
    pub gn: f64,
    pub ag: f64,
    pub total: f64,
}

impl LossReport {
    /// Parts in the order `ce, kt, fd, vg, rec, cyc`.
    pub fn new(parts: [f64; 6], weights: LossWeights) -> Self {
        let [ce, kt, fd, vg, rec, cyc] = parts;
        Self {
            ce,
            kt,
            fd,
            vg,
            rec,
            cyc,
            dn: rec + cyc,
            gn: kt + fd + vg,
            ag: kt + fd,
            total: total_loss(parts, weights),
        }
    }

    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("ce", self.ce),
            ("kt", self.kt),
            ("fd", self.fd),
            ("vg", self.vg),
            ("rec", self.rec),
            ("cyc", self.cyc),
            ("total", self.total),
        ]
    }

    /// The first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(name, _)| name)
    }
}

/// `γ_ce·ce + γ_dn·(rec + cyc) + γ_gn·(kt + fd + vg)` over `ce, kt, fd, vg, rec, cyc`.
pub fn total_loss(parts: [f64; 6], g: LossWeights) -> f64 {
    let [ce, kt, fd, vg, rec, cyc] = parts;
    g.ce * ce + g.dn * (rec + cyc) + g.gn * (kt + fd + vg)
}

fn pool(f: &FeatureMap) -> Vec<f64> {
    let c = f.shape()[0];
    let per = f.values.len() / c.max(1);
    f.values.data().chunks(per.max(1)).map(|ch| ch.iter().sum::<f64>() / per as f64).collect()
}

/// `Σ_i c_norm_i · pool(â_i)`.
pub fn fuse(refined: &[FeatureMap], weights: &CredibilityWeights) -> Result<Vec<f64>> {
    let Some(first) = refined.first() else {
        return Err(Error::AllViewsMissing);
    };
    if weights.c_norm.len() != refined.len() {
        return Err(Error::ShapeMismatch(format!("{} features vs {} weights", refined.len(), weights.c_norm.len())));
    }
    let mut fused = vec![0.0; first.shape()[0]];
    for (f, &w) in refined.iter().zip(&weights.c_norm) {
        if f.shape() != first.shape() {
            return Err(shape_mismatch("fused features", f.shape(), first.shape()));
        }
        for (o, p) in fused.iter_mut().zip(pool(f)) {
            *o += w * p;
        }
    }
    Ok(fused)
}

/// Mean cross-entropy of `labels` under the logits `[N, K]`.
pub fn classification_loss(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!("logits {shape:?} for {} labels", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::LabelOutOfRange { label, classes: shape[1] });
    }
    Ok(tape.cross_entropy(logits, labels))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Provenance;
    use crate::tensor::Tensor;

    #[test]
    fn composites_and_total() {
        let r = LossReport::new([1.0; 6], LossWeights::default());
        assert!((r.total - 3.3).abs() < 1e-12);
        assert_eq!((r.dn, r.gn, r.ag), (2.0, 3.0, 2.0));
        assert_eq!(LossReport::new([0.0; 6], LossWeights::default()).total, 0.0);
        let no_dn = LossWeights { dn: 0.0, ..LossWeights::default() };
        assert_eq!(total_loss([1.0, 0.0, 0.0, 0.0, 5.0, 7.0], no_dn), total_loss([1.0, 0.0, 0.0, 0.0, 0.0, 0.0], no_dn));
        let bad = LossReport::new([1.0, f64::NAN, 0.0, 0.0, 0.0, 0.0], LossWeights::default());
        assert_eq!(bad.non_finite_term(), Some("kt"));
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[0.1, 2.0, 0.3]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
    }

    #[test]
    fn classification_examples() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[1, 5]));
        let l = classification_loss(&tape, uniform, &[2]).unwrap();
        assert!((tape.item(l) - 5f64.ln()).abs() < 1e-15);
        let sharp = tape.constant(Tensor::from_vec(&[1, 3], vec![0.0, 60.0, 0.0]));
        assert!(tape.item(classification_loss(&tape, sharp, &[1]).unwrap()) < 1e-20);
        assert!(matches!(classification_loss(&tape, uniform, &[5]), Err(Error::LabelOutOfRange { label: 5, classes: 5 })));
    }

    #[test]
    fn fusion_examples() {
        let f = |v: Vec<f64>| FeatureMap::new(Tensor::from_vec(&[2, 2, 1, 1], v), Provenance::Action, 0);
        let one = fuse(&[f(vec![1.0, 3.0, 2.0, 2.0])], &CredibilityWeights::from_raw(vec![0.4])).unwrap();
        assert_eq!(one, vec![2.0, 2.0]);
        let same = vec![f(vec![1.0, 3.0, 2.0, 2.0]), f(vec![3.0, 1.0, 0.0, 4.0])];
        let w = CredibilityWeights::from_raw(vec![0.2, 0.9]);
        assert_eq!(fuse(&same, &w).unwrap(), vec![2.0, 2.0]);
        let mixed = vec![f(vec![1.0, 1.0, 0.0, 0.0]), f(vec![0.0, 0.0, 4.0, 4.0])];
        let scaled = CredibilityWeights::from_raw(vec![1.0, 4.5]);
        let a = fuse(&mixed, &w).unwrap();
        let b = fuse(&mixed, &scaled).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
