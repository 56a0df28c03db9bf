//! Central finite differences for gradient verification.
//!
//! Independent of the tape's backward pass: the checked function is simply
//! re-evaluated at perturbed inputs, so agreement here validates every
//! hand-written adjoint.

use crate::scalar::Scalar;

/// Central difference ∂f/∂x_i for every entry of every input buffer.
///
/// `f` receives the full set of input buffers and returns the scalar output.
pub fn finite_difference<S, F>(f: F, inputs: &[Vec<S>], h: f64) -> Vec<Vec<S>>
where
    S: Scalar,
    F: Fn(&[Vec<S>]) -> S,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut g = vec![S::ZERO; inputs[p].len()];
        for i in 0..inputs[p].len() {
            let mut plus = inputs.to_vec();
            plus[p][i] += S::from_f64(h);
            let fp = f(&plus).to_f64();
            let mut minus = inputs.to_vec();
            minus[p][i] -= S::from_f64(h);
            let fm = f(&minus).to_f64();
            g[i] = S::from_f64((fp - fm) / (2.0 * h));
        }
        grads.push(g);
    }
    grads
}

/// Max relative error between analytic and numeric gradients, with an
/// absolute floor so near-zero entries compare sensibly.
pub fn max_rel_error<S: Scalar>(analytic: &[S], numeric: &[S]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let (a, n) = (a.to_f64(), n.to_f64());
        let denom = a.abs().max(n.abs()).max(1e-4);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Spot-check a subset of entries of one input buffer (for expensive
/// functions where perturbing every coordinate is wasteful).
pub fn finite_difference_at<S, F>(f: F, inputs: &[Vec<S>], which: usize, entries: &[usize], h: f64) -> Vec<S>
where
    S: Scalar,
    F: Fn(&[Vec<S>]) -> S,
{
    let mut g = Vec::with_capacity(entries.len());
    for &i in entries {
        let mut plus = inputs.to_vec();
        plus[which][i] += S::from_f64(h);
        let fp = f(&plus).to_f64();
        let mut minus = inputs.to_vec();
        minus[which][i] -= S::from_f64(h);
        let fm = f(&minus).to_f64();
        g.push(S::from_f64((fp - fm) / (2.0 * h)));
    }
    g
}
