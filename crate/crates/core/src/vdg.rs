//! The inter-view graph: logit distances `E`, softmax-normalized weights `W`,
//! the discretization loss and the reconstruction/cycle losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{FeatureMap, Provenance};
use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

fn check_square(m: &Tensor, what: &str) -> Result<usize> {
    match m.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::ShapeMismatch(format!("{what} must be square, got {s:?}"))),
    }
}

fn pairwise_sq_dist(rows: &[&[f64]]) -> Tensor {
    let n = rows.len();
    let mut e = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            e.data_mut()[i * n + j] = d;
            e.data_mut()[j * n + i] = d;
        }
    }
    e
}

/// `E_ij = ‖z_i − z_j‖²` over per-view mean logits.
pub fn logit_distance_matrix(view_logits: &[Vec<f64>]) -> Result<Tensor> {
    if view_logits.len() < 2 {
        return Err(Error::InvalidViewCount(view_logits.len()));
    }
    let k = view_logits[0].len();
    if let Some(z) = view_logits.iter().find(|z| z.len() != k) {
        return Err(shape_mismatch("view logits", &[z.len()], &[k]));
    }
    let rows: Vec<&[f64]> = view_logits.iter().map(Vec::as_slice).collect();
    Ok(pairwise_sq_dist(&rows))
}

/// Pairwise squared distances between pooled view features.
pub fn feature_distance_weights(pooled: &[Tensor]) -> Result<Tensor> {
    let Some(first) = pooled.first() else {
        return Err(Error::InvalidViewCount(0));
    };
    if let Some(f) = pooled.iter().find(|f| f.shape() != first.shape()) {
        return Err(shape_mismatch("pooled view features", f.shape(), first.shape()));
    }
    let rows: Vec<&[f64]> = pooled.iter().map(Tensor::data).collect();
    Ok(pairwise_sq_dist(&rows))
}

/// Row-wise softmax.
pub fn normalize_graph(w_raw: &Tensor) -> Result<Tensor> {
    check_square(w_raw, "W_raw")?;
    let tape = Tape::new();
    let w = tape.softmax_rows(tape.constant(w_raw.clone()));
    let out = tape.value(w).clone();
    Ok(out)
}

/// `‖W ⊗ E‖_F` with `E` held constant.
pub fn discretize_loss(tape: &Tape, w: Var, e: &Tensor) -> Result<Var> {
    let ws = tape.shape(w);
    if ws != e.shape() {
        return Err(shape_mismatch("graph weights vs distances", &ws, e.shape()));
    }
    Ok(tape.sqrt(tape.sum_sq(tape.mul(w, tape.constant(e.clone())))))
}

/// `Σ_ij W_ij E_ij`.
pub fn weighted_distance(w: &Tensor, e: &Tensor) -> f64 {
    w.data().iter().zip(e.data()).map(|(a, b)| a * b).sum()
}

/// `v̂_i = Σ_j W_ij v_j` with one feature per view.
pub fn apply_discretization(view_feats: &[FeatureMap], w: &Tensor) -> Result<Vec<FeatureMap>> {
    let n = check_square(w, "W")?;
    if view_feats.len() != n {
        return Err(Error::ShapeMismatch(format!("{} views vs {n}x{n} graph", view_feats.len())));
    }
    let shape = view_feats[0].shape();
    if let Some(f) = view_feats.iter().find(|f| f.shape() != shape) {
        return Err(shape_mismatch("view features", f.shape(), shape));
    }
    Ok((0..n)
        .map(|i| {
            let mut acc = Tensor::zeros(shape);
            for (j, f) in view_feats.iter().enumerate() {
                let wij = w.data()[i * n + j];
                acc.add_assign(&f.values.map(|v| wij * v));
            }
            FeatureMap::new(acc, Provenance::View, i)
        })
        .collect())
}

/// Batched discretization for the samples of view `i`.
///
/// `own` holds view `i`'s features `[N_i, ...]`; `means[j]` is the batch-mean
/// feature `[1, ...]` of view `j`, or `None` when view `j` has no samples, in
/// which case its weight falls back onto `own`.
pub fn discretize_group(tape: &Tape, w: Var, i: usize, own: Var, means: &[Option<Var>]) -> Result<Var> {
    let n = means.len();
    let rows = tape.shape(own)[0];
    let mut terms = Vec::with_capacity(n);
    for (j, mean) in means.iter().enumerate() {
        let wij = tape.element(w, i * n + j);
        let source = match mean {
            Some(m) if j != i => {
                let (ms, os) = (tape.shape(*m), tape.shape(own));
                if ms[1..] != os[1..] {
                    return Err(shape_mismatch("view feature means", &ms, &os));
                }
                let inner: Vec<usize> = ms[1..].to_vec();
                let flat = tape.reshape(*m, &inner);
                tape.broadcast_rows(flat, rows)
            }
            _ => own,
        };
        terms.push(tape.scale_by(source, wij));
    }
    Ok(tape.add_n(&terms))
}

fn mean_sq_error(tape: &Tape, pairs: &[(Var, Var)], what: &str) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut parts = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let (sa, sb) = (tape.shape(a), tape.shape(b));
        if sa != sb {
            return Err(shape_mismatch(what, &sa, &sb));
        }
        let rows = sa.first().copied().unwrap_or(1).max(1);
        parts.push(tape.scale(tape.sq_dist(a, b), 1.0 / rows as f64));
    }
    Ok(tape.scale(tape.add_n(&parts), 1.0 / pairs.len() as f64))
}

/// Mean over views of the per-sample `‖X_i − D_i([â_i, v̂_i])‖²`.
pub fn reconstruction_loss(tape: &Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    mean_sq_error(tape, pairs, "reconstruction")
}

/// Mean over views of the per-sample `‖f^s_i − ε^s_i(D_i(·))‖²`.
pub fn cycle_loss(tape: &Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    mean_sq_error(tape, pairs, "cycle features")
}

/// Snapshot of the graph for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewGraph {
    pub e: Vec<Vec<f64>>,
    pub w_raw: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
}

fn rows(m: &Tensor) -> Vec<Vec<f64>> {
    (0..m.dim(0)).map(|i| m.row(i).to_vec()).collect()
}

impl ViewGraph {
    pub fn new(e: &Tensor, w_raw: &Tensor) -> Result<Self> {
        let w = normalize_graph(w_raw)?;
        Ok(Self { e: rows(e), w_raw: rows(w_raw), w: rows(&w) })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable graph") + "\n"
    }
}

/// Plain gradient descent on `L_vg` alone; returns the final `W_raw` and the
/// trace of `Σ W ⊗ E` before each step and after the last.
pub fn descend_discretization(w_raw: &Tensor, e: &Tensor, steps: usize, lr: f64) -> Result<(Tensor, Vec<f64>)> {
    let mut w_raw = w_raw.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let tape = Tape::new();
        let raw = tape.var(w_raw.clone());
        let w = tape.softmax_rows(raw);
        trace.push(weighted_distance(&tape.value(w), e));
        let loss = discretize_loss(&tape, w, e)?;
        let grads = tape.backward(loss);
        let g = grads.get_or_zeros(raw, w_raw.shape());
        w_raw = w_raw.zip_map(&g, |x, g| x - lr * g);
    }
    trace.push(weighted_distance(&normalize_graph(&w_raw)?, e));
    Ok((w_raw, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, DEFAULT_STEP};
    use proptest::prelude::*;

    fn fm(values: Vec<f64>, view: usize) -> FeatureMap {
        let n = values.len();
        FeatureMap::new(Tensor::from_vec(&[n], values), Provenance::View, view)
    }

    #[test]
    fn logit_distance_examples() {
        let same = logit_distance_matrix(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(same.max_abs(), 0.0);
        let e = logit_distance_matrix(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(e.data(), &[0.0, 2.0, 2.0, 0.0]);
        assert!(matches!(logit_distance_matrix(&[vec![0.0], vec![1.0, 1.0]]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn feature_distance_examples() {
        let a = Tensor::from_vec(&[4], vec![0.5; 4]);
        assert_eq!(feature_distance_weights(&[a.clone(), a.clone()]).unwrap().max_abs(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert_eq!(feature_distance_weights(&[a, b]).unwrap().data(), &[0.0, 4.0, 4.0, 0.0]);
    }

    #[test]
    fn softmax_rows_and_shift() {
        let w = normalize_graph(&Tensor::full(&[3, 3], 0.7)).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let raw = Tensor::from_vec(&[2, 2], vec![0.1, 2.0, -1.0, 0.5]);
        let shifted = Tensor::from_vec(&[2, 2], vec![5.1, 7.0, -1.0, 0.5]);
        let (a, b) = (normalize_graph(&raw).unwrap(), normalize_graph(&shifted).unwrap());
        assert!(a.zip_map(&b, |x, y| x - y).max_abs() < 1e-15);
    }

    #[test]
    fn discretize_loss_example() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::full(&[2, 2], 0.5));
        let e = Tensor::from_vec(&[2, 2], vec![0.0, 2.0, 2.0, 0.0]);
        assert_eq!(tape.item(discretize_loss(&tape, w, &e).unwrap()), 2f64.sqrt());
        assert_eq!(tape.item(discretize_loss(&tape, w, &Tensor::zeros(&[2, 2])).unwrap()), 0.0);
    }

    #[test]
    fn discretization_examples() {
        let feats = vec![fm(vec![1.0, 2.0], 0), fm(vec![3.0, -4.0], 1)];
        let id = apply_discretization(&feats, &Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(id[0].values, feats[0].values);
        assert_eq!(id[1].values, feats[1].values);
        let swap = apply_discretization(&feats, &Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(swap[0].values, feats[1].values);
        assert_eq!(swap[1].values, feats[0].values);
        let mean = apply_discretization(&feats, &Tensor::full(&[2, 2], 0.5)).unwrap();
        assert_eq!(mean[0].values.data(), &[2.0, -1.0]);
        assert_eq!(mean[1].values, mean[0].values);
    }

    #[test]
    fn grouped_discretization_matches_the_per_view_form() {
        let tape = Tape::new();
        let w = Tensor::from_vec(&[3, 3], vec![0.5, 0.3, 0.2, 0.1, 0.6, 0.3, 0.25, 0.25, 0.5]);
        let wv = tape.constant(w.clone());
        let own = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]));
        let m1 = tape.constant(Tensor::from_vec(&[1, 2], vec![3.0, 0.0]));
        let out = discretize_group(&tape, wv, 0, own, &[Some(own), Some(m1), None]).unwrap();
        // The absent third view contributes its weight to the sample itself.
        let expect = [0.5 * 1.0 + 0.3 * 3.0 + 0.2 * 1.0, 0.5 * 2.0 + 0.2 * 2.0];
        for (a, b) in tape.value(out).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruction_and_cycle_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 16], (0..16).map(f64::from).collect()));
        let y = tape.add_scalar(x, 1.0);
        assert_eq!(tape.item(reconstruction_loss(&tape, &[(x, x)]).unwrap()), 0.0);
        assert_eq!(tape.item(reconstruction_loss(&tape, &[(x, y)]).unwrap()), 16.0);
        let f = tape.constant(Tensor::zeros(&[1, 8]));
        let g = tape.constant(Tensor::full(&[1, 8], 1.0));
        assert_eq!(tape.item(cycle_loss(&tape, &[(f, g)]).unwrap()), 8.0);
        assert_eq!(tape.item(cycle_loss(&tape, &[(f, f)]).unwrap()), 0.0);
    }

    #[test]
    fn graph_loss_gradients_match_finite_differences() {
        let raw = Tensor::from_vec(&[3, 3], vec![0.2, -0.4, 1.0, 0.3, 0.0, -0.7, 0.5, 0.9, -0.1]);
        let e = Tensor::from_vec(&[3, 3], vec![0.0, 1.5, 3.0, 1.5, 0.0, 0.7, 3.0, 0.7, 0.0]);
        let checks = check_inputs(&[raw], 9, DEFAULT_STEP, |tape, v| discretize_loss(tape, tape.softmax_rows(v[0]), &e).unwrap());
        assert!(checks[0].relative_error < 1e-4, "{}", checks[0].relative_error);

        let x = Tensor::from_vec(&[2, 3], vec![0.1, 0.5, -0.3, 0.8, 0.2, 0.0]);
        let r = Tensor::from_vec(&[2, 3], vec![0.4, -0.2, 0.6, 1.0, 0.1, 0.3]);
        let checks = check_inputs(&[x, r], 6, DEFAULT_STEP, |tape, v| {
            let rec = reconstruction_loss(tape, &[(v[0], v[1])]).unwrap();
            let cyc = cycle_loss(tape, &[(v[1], v[0]), (v[0], tape.scale(v[1], 2.0))]).unwrap();
            tape.add(rec, cyc)
        });
        for c in checks {
            assert!(c.relative_error < 1e-4, "{}", c.relative_error);
        }
    }

    #[test]
    fn descent_reduces_weighted_distance() {
        let e = Tensor::from_vec(&[3, 3], vec![0.0, 1.0, 4.0, 1.0, 0.0, 2.0, 4.0, 2.0, 0.0]);
        let (_, trace) = descend_discretization(&Tensor::zeros(&[3, 3]), &e, 50, 0.5).unwrap();
        assert!(trace.windows(2).all(|p| p[1] < p[0]));
    }

    proptest! {
        #[test]
        fn graph_invariants(logits in prop::collection::vec(prop::collection::vec(-4f64..4.0, 3), 2..6), raw in prop::collection::vec(-30f64..30.0, 36)) {
            let e = logit_distance_matrix(&logits).unwrap();
            let n = logits.len();
            for i in 0..n {
                prop_assert_eq!(e.data()[i * n + i], 0.0);
                for j in 0..n {
                    prop_assert_eq!(e.data()[i * n + j], e.data()[j * n + i]);
                }
            }
            let w = normalize_graph(&Tensor::from_vec(&[n, n], raw[..n * n].to_vec())).unwrap();
            for i in 0..n {
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
