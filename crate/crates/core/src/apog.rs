//! Partial-order guidance: evidential credibility and the transfer losses that
//! pull higher-altitude views towards lower-altitude ones.
//!
//! Feature arguments are batched `[N, ...]`; squared Frobenius distances are
//! averaged over the `N` samples, so a single sample gives the plain norm.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::FeatureMap;
use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibilityWeights {
    pub c: Vec<f64>,
    pub c_norm: Vec<f64>,
}

impl CredibilityWeights {
    /// Equal weights, used before any view has produced logits.
    pub fn uniform(n: usize) -> Self {
        Self { c: vec![1.0; n], c_norm: vec![1.0 / n as f64; n] }
    }

    pub fn from_raw(c: Vec<f64>) -> Self {
        let total: f64 = c.iter().sum();
        let c_norm = c.iter().map(|v| v / total).collect();
        Self { c, c_norm }
    }
}

/// Dirichlet strength of one view's logits: `Σ_k (max(0, z_k) + 1)`.
pub fn dirichlet_strength(logits: &[f64]) -> f64 {
    logits.iter().map(|z| z.max(0.0) + 1.0).sum()
}

/// `c_i = n / D_i` per view, plus the normalized copy.
pub fn credibility_weights(view_logits: &[Vec<f64>]) -> CredibilityWeights {
    let n = view_logits.len() as f64;
    CredibilityWeights::from_raw(view_logits.iter().map(|z| n / dirichlet_strength(z)).collect())
}

/// Ordered `(source, target)` view pairs; serialized as `"0>1,1>2"`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TransferPlan {
    pub pairs: Vec<(usize, usize)>,
}

impl TransferPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, views: usize) -> Result<()> {
        for &(s, t) in &self.pairs {
            for v in [s, t] {
                if v >= views {
                    return Err(Error::UnknownView { view: v, views });
                }
            }
            if s == t {
                return Err(Error::InvalidConfig(format!("transfer pair {s}>{t} has equal ends")));
            }
        }
        Ok(())
    }

    pub fn is_bottom_up(&self) -> bool {
        self.pairs.iter().all(|&(s, t)| s < t)
    }
}

/// The adjacent chain `0>1, 1>2, …`.
pub fn default_transfer_plan(n: usize) -> Result<TransferPlan> {
    if n < 2 {
        return Err(Error::InvalidViewCount(n));
    }
    Ok(TransferPlan { pairs: (1..n).map(|t| (t - 1, t)).collect() })
}

/// Parses `"0>1,1>2"`; `"none"` or an empty string is the empty plan.
impl FromStr for TransferPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::none());
        }
        let pairs = s
            .split(',')
            .map(|pair| {
                let bad = || Error::InvalidConfig(format!("transfer pair `{pair}` is not `s>t`"));
                let (a, b) = pair.trim().split_once('>').ok_or_else(bad)?;
                Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs })
    }
}

impl TryFrom<String> for TransferPlan {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TransferPlan> for String {
    fn from(plan: TransferPlan) -> Self {
        plan.to_string()
    }
}

impl fmt::Display for TransferPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.pairs.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.pairs.iter().map(|(s, t)| format!("{s}>{t}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// One planned pair's contribution.
#[derive(Clone, Copy, Debug)]
pub struct TransferTerm {
    pub source: Var,
    pub target: Var,
    /// Credibility of the target view.
    pub weight: f64,
}

fn per_sample_sq_dist(tape: &Tape, a: Var, b: Var, what: &str) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(shape_mismatch(what, &sa, &sb));
    }
    let rows = sa.first().copied().unwrap_or(1).max(1);
    Ok(tape.scale(tape.sq_dist(a, b), 1.0 / rows as f64))
}

/// `(1/|plan|) Σ c_t ‖detach(a_s) − a_t‖²`; `plan_len` counts pairs that
/// produced no term as zero.
pub fn transfer_loss(tape: &Tape, terms: &[TransferTerm], plan_len: usize) -> Result<Var> {
    if plan_len == 0 || terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut parts = Vec::with_capacity(terms.len());
    for term in terms {
        let d = per_sample_sq_dist(tape, tape.detach(term.source), term.target, "transfer features")?;
        parts.push(tape.scale(d, term.weight));
    }
    Ok(tape.scale(tape.add_n(&parts), 1.0 / plan_len as f64))
}

/// `(1/n) Σ_i ‖detach(â_i) − f^c_i‖²` over `(refined, common)` pairs.
pub fn feature_align_loss(tape: &Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut parts = Vec::with_capacity(pairs.len());
    for &(refined, common) in pairs {
        parts.push(per_sample_sq_dist(tape, tape.detach(refined), common, "alignment features")?);
    }
    Ok(tape.scale(tape.add_n(&parts), 1.0 / pairs.len() as f64))
}

pub fn guide_loss(kt: f64, fd: f64) -> f64 {
    kt + fd
}

fn lift(tape: &Tape, f: &FeatureMap) -> Result<Var> {
    let mut shape = vec![1];
    shape.extend_from_slice(f.shape());
    Ok(tape.constant(f.values.reshape(&shape)?))
}

/// [`transfer_loss`] over one feature map per view.
pub fn transfer_loss_features(
    action: &[FeatureMap],
    weights: &CredibilityWeights,
    plan: &TransferPlan,
) -> Result<f64> {
    plan.validate(action.len())?;
    let tape = Tape::new();
    let terms = plan
        .pairs
        .iter()
        .map(|&(s, t)| {
            Ok(TransferTerm { source: lift(&tape, &action[s])?, target: lift(&tape, &action[t])?, weight: weights.c[t] })
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = transfer_loss(&tape, &terms, plan.pairs.len())?;
    Ok(tape.item(loss))
}

/// [`feature_align_loss`] over one feature map per view.
pub fn feature_align_loss_features(refined: &[FeatureMap], common: &[FeatureMap]) -> Result<f64> {
    if refined.len() != common.len() {
        return Err(Error::ShapeMismatch(format!("{} refined vs {} common views", refined.len(), common.len())));
    }
    let tape = Tape::new();
    let pairs = refined
        .iter()
        .zip(common)
        .map(|(a, c)| Ok((lift(&tape, a)?, lift(&tape, c)?)))
        .collect::<Result<Vec<_>>>()?;
    let loss = feature_align_loss(&tape, &pairs)?;
    Ok(tape.item(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Provenance;
    use crate::gradcheck::{check_inputs, DEFAULT_STEP};
    use proptest::prelude::*;

    fn fm(values: Vec<f64>) -> FeatureMap {
        let n = values.len();
        FeatureMap::new(Tensor::from_vec(&[n, 1, 1, 1], values), Provenance::Action, 0)
    }

    #[test]
    fn zero_evidence_weight() {
        let w = credibility_weights(&[vec![-1.0; 13], vec![0.0; 13], vec![-0.5; 13]]);
        assert_eq!(w.c[0], 3.0 / 13.0);
        assert_eq!(w.c[1], 3.0 / 13.0);
    }

    #[test]
    fn two_view_weights() {
        let w = credibility_weights(&[vec![0.0, 0.0], vec![2.0, 2.0]]);
        assert_eq!(w.c, vec![1.0, 1.0 / 3.0]);
        assert!((w.c_norm[0] - 0.75).abs() < 1e-15 && (w.c_norm[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn plans() {
        assert_eq!(default_transfer_plan(3).unwrap().pairs, vec![(0, 1), (1, 2)]);
        assert_eq!(default_transfer_plan(2).unwrap().pairs, vec![(0, 1)]);
        assert!(matches!(default_transfer_plan(1), Err(Error::InvalidViewCount(1))));
        let p: TransferPlan = "1>0, 2>1".parse().unwrap();
        assert_eq!(p.pairs, vec![(1, 0), (2, 1)]);
        assert_eq!(p.to_string(), "1>0,2>1");
        assert!(!p.is_bottom_up());
        assert!("none".parse::<TransferPlan>().unwrap().is_empty());
        assert!("0-1".parse::<TransferPlan>().is_err());
        assert!(matches!("0>3".parse::<TransferPlan>().unwrap().validate(3), Err(Error::UnknownView { .. })));
    }

    #[test]
    fn transfer_loss_examples() {
        let same = vec![fm(vec![1.0; 8]), fm(vec![1.0; 8])];
        let plan = default_transfer_plan(2).unwrap();
        let w = CredibilityWeights::from_raw(vec![1.0, 1.0]);
        assert_eq!(transfer_loss_features(&same, &w, &plan).unwrap(), 0.0);
        let apart = vec![fm(vec![1.0; 8]), fm(vec![0.0; 8])];
        assert_eq!(transfer_loss_features(&apart, &w, &plan).unwrap(), 8.0);
    }

    #[test]
    fn alignment_loss_example() {
        let refined = vec![fm(vec![2.0, 0.0]), fm(vec![0.0, 0.0, 0.0])];
        let common = vec![fm(vec![0.0, 0.0]), fm(vec![1.0, 1.0, 2.0])];
        assert_eq!(feature_align_loss_features(&refined, &common).unwrap(), 5.0);
        assert_eq!(guide_loss(1.5, 2.5), 4.0);
    }

    #[test]
    fn detached_sides_receive_no_gradient() {
        let tape = Tape::new();
        let s = tape.var(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]));
        let t = tape.var(Tensor::from_vec(&[1, 3], vec![0.0, 0.5, 1.0]));
        let kt = transfer_loss(&tape, &[TransferTerm { source: s, target: t, weight: 0.7 }], 1).unwrap();
        let fd = feature_align_loss(&tape, &[(s, t)]).unwrap();
        let g = tape.backward(tape.add(kt, fd));
        assert!(g.get(s).is_none_or(|g| g.max_abs() == 0.0));
        assert!(g.get(t).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let a = Tensor::from_vec(&[2, 3], vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4]);
        let b = Tensor::from_vec(&[2, 3], vec![1.1, 0.2, -0.7, 0.6, 0.9, 0.3]);
        let c = Tensor::from_vec(&[2, 3], vec![-0.2, 0.4, 1.5, -1.0, 0.0, 0.8]);
        let checks = check_inputs(&[a, b, c], 6, DEFAULT_STEP, |tape, v| {
            let kt = transfer_loss(
                tape,
                &[TransferTerm { source: v[0], target: v[1], weight: 0.4 }, TransferTerm { source: v[1], target: v[2], weight: 0.9 }],
                2,
            )
            .unwrap();
            let fd = feature_align_loss(tape, &[(v[1], v[0]), (v[2], v[1])]).unwrap();
            tape.add(kt, fd)
        });
        for c in checks {
            assert!(c.relative_error < 1e-4, "{}", c.relative_error);
        }
    }

    proptest! {
        #[test]
        fn credibility_invariants(logits in prop::collection::vec(prop::collection::vec(-5f64..5.0, 4), 2..5), view in 0usize..5, class in 0usize..4, extra in 0.01f64..3.0, k in 0.1f64..10.0) {
            let view = view % logits.len();
            let w = credibility_weights(&logits);
            prop_assert!(w.c.iter().all(|&c| c > 0.0));
            prop_assert!((w.c_norm.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let mut more = logits.clone();
            more[view][class] = more[view][class].max(0.0) + extra;
            prop_assert!(credibility_weights(&more).c[view] < w.c[view]);
            let scaled = CredibilityWeights::from_raw(w.c.iter().map(|c| c * k).collect());
            for (a, b) in scaled.c_norm.iter().zip(&w.c_norm) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn transfer_loss_is_non_negative(a in prop::collection::vec(-3f64..3.0, 6), b in prop::collection::vec(-3f64..3.0, 6)) {
            let feats = vec![fm(a.clone()), fm(b.clone())];
            let w = credibility_weights(&[vec![0.5, 1.0], vec![-1.0, 2.0]]);
            let l = transfer_loss_features(&feats, &w, &default_transfer_plan(2).unwrap()).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, a == b);
        }
    }
}
