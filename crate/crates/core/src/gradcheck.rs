//! Central finite-difference gradient checks for tape-built scalar functions.
//!
//! The analytic side comes from one recorded pass. Every perturbed pass
//! replays that pass's detached values so stop-gradient points stay constant,
//! which is what the analytic gradient assumes.

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Gradient norm below which errors are measured in absolute terms. Central
/// differences at [`DEFAULT_STEP`] carry rounding noise near `1e-10`.
pub const NORM_FLOOR: f64 = 1e-6;

/// `‖a - b‖ / max(‖a‖, ‖b‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

/// Up to `max` evenly spread flat indices into a tensor of `len` elements.
pub fn spread_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * len / max + (i * 7919) % (len / max).max(1)).collect()
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_error: f64,
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `build` with respect to each of `inputs` (at most `max_coords` coordinates
/// per input).
pub fn check_inputs(
    inputs: &[Tensor],
    max_coords: usize,
    step: f64,
    build: impl Fn(&Tape, &[Var]) -> Var,
) -> Vec<InputCheck> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = build(&tape, &vars);
    let frozen = tape.detached_values();
    let grads = tape.backward(out);

    let eval = |perturbed: &[Tensor]| {
        let tape = Tape::with_frozen(frozen.clone());
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.var(t.clone())).collect();
        let out = build(&tape, &vars);
        tape.item(out)
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let full = grads.get_or_zeros(vars[k], input.shape());
        let coords = spread_indices(input.len(), max_coords);
        let mut numeric = Vec::with_capacity(coords.len());
        let mut work = inputs.to_vec();
        for &c in &coords {
            let base = input.data()[c];
            work[k].data_mut()[c] = base + step;
            let plus = eval(&work);
            work[k].data_mut()[c] = base - step;
            let minus = eval(&work);
            work[k].data_mut()[c] = base;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let analytic: Vec<f64> = coords.iter().map(|&c| full.data()[c]).collect();
        let relative_error = relative_error(&analytic, &numeric);
        reports.push(InputCheck { analytic, numeric, relative_error });
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let r = check_inputs(&[x], 10, DEFAULT_STEP, |t, v| t.sum_sq(v[0]));
        assert!(r[0].relative_error < 1e-8, "{:?}", r[0]);
        assert_eq!(r[0].analytic, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn detached_path_is_held_constant() {
        // f(x) = ‖detach(x) - x‖²; with the detached copy frozen the numeric
        // gradient at the base point is zero, like the analytic one.
        let x = Tensor::from_vec(&[2], vec![1.0, 3.0]);
        let r = check_inputs(&[x], 10, 1e-4, |t, v| {
            let d = t.detach(v[0]);
            t.sq_dist(d, v[0])
        });
        assert!(r[0].numeric.iter().all(|g| g.abs() < 1e-6));
        assert!(r[0].relative_error < 1e-6);
    }

    #[test]
    fn near_zero_gradients_compare_absolutely() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!(relative_error(&[1e-18], &[2e-10]) < 1e-3);
        assert!((relative_error(&[1.0], &[1.5]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn spread_indices_are_in_range_and_distinct() {
        let idx = spread_indices(1000, 30);
        assert_eq!(idx.len(), 30);
        assert!(idx.iter().all(|&i| i < 1000));
        let mut sorted = idx.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 30);
    }
}
