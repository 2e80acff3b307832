//! Scalar activations, gradient clipping, and softmax cross-entropy.

use crate::error::{Error, Result};

/// Sigmoid value and derivative at `x`.
#[inline]
pub fn sigmoid(x: f64) -> (f64, f64) {
    // Branch on sign so exp never overflows.
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    (s, s * (1.0 - s))
}

/// Tanh value and derivative at `x`.
#[inline]
pub fn tanh_act(x: f64) -> (f64, f64) {
    let t = x.tanh();
    (t, 1.0 - t * t)
}

/// ReLU value and derivative at `x`. The derivative at 0 is taken as 0.
#[inline]
pub fn relu(x: f64) -> (f64, f64) {
    if x > 0.0 {
        (x, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Cross-entropy of a softmax over `logits` against `label`.
///
/// Returns the loss and its gradient with respect to the logits,
/// `softmax(logits) - onehot(label)`. Softmax is computed with
/// max-subtraction so large logits cannot overflow.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let c = logits.len();
    if c < 2 {
        return Err(Error::Domain(format!("softmax needs >= 2 classes, got {c}")));
    }
    if label >= c {
        return Err(Error::Domain(format!("label {label} out of range for {c} classes")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite logit".into()));
    }

    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    // log-sum-exp form keeps the loss exact even when the correct-class
    // probability underflows.
    let loss = sum.ln() - (logits[label] - max);
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Scales `grads` so its L2 norm is at most `max_norm`; direction preserved.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) {
    assert!(max_norm > 0.0, "clip_grad_norm: max_norm must be positive");
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(v: &[f64]) -> f64 {
        v.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let (loss, grad) = softmax_cross_entropy(&[0.0, 0.0, 0.0], 1).unwrap();
        assert!((loss - 3.0_f64.ln()).abs() < 1e-12);
        assert!((grad[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((grad[1] + 2.0 / 3.0).abs() < 1e-15);
        assert!((grad[2] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_class() {
        let (loss, grad) = softmax_cross_entropy(&[100.0, 0.0], 0).unwrap();
        assert!(loss >= 0.0 && loss < 1e-40);
        assert!(grad[0].abs() < 1e-40 && grad[1].abs() < 1e-40);
    }

    #[test]
    fn label_out_of_range_is_domain_error() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0, 0.0], 2),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn grad_sums_to_zero_and_matches_finite_difference() {
        let logits = [0.3, -1.2, 2.0, 0.05, -0.7];
        let label = 3;
        let (_, grad) = softmax_cross_entropy(&logits, label).unwrap();
        let total: f64 = grad.iter().sum();
        assert!(total.abs() < 1e-12, "grad sum {total}");

        // Central finite differences on the loss, one logit at a time.
        let eps = 1e-6;
        for k in 0..logits.len() {
            let mut plus = logits;
            plus[k] += eps;
            let mut minus = logits;
            minus[k] -= eps;
            let (lp, _) = softmax_cross_entropy(&plus, label).unwrap();
            let (lm, _) = softmax_cross_entropy(&minus, label).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (grad[k] - fd).abs() / (grad[k].abs() + fd.abs() + 1e-12);
            assert!(rel <= 1e-8, "logit {k}: analytic {} vs fd {fd}", grad[k]);
        }
    }

    #[test]
    fn clip_examples() {
        let mut under = vec![0.06, 0.08]; // norm 0.1
        clip_grad_norm(&mut under, 0.25);
        assert_eq!(under, vec![0.06, 0.08]);

        let mut over = vec![0.3, 0.4]; // norm 0.5
        clip_grad_norm(&mut over, 0.25);
        assert!((over[0] - 0.15).abs() < 1e-15);
        assert!((over[1] - 0.20).abs() < 1e-15);

        let mut zero = vec![0.0, 0.0, 0.0];
        clip_grad_norm(&mut zero, 0.25);
        assert_eq!(zero, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn clip_is_idempotent() {
        let mut g = vec![1.0, -2.0, 3.0, 0.5];
        clip_grad_norm(&mut g, 0.25);
        let once = g.clone();
        clip_grad_norm(&mut g, 0.25);
        assert_eq!(g, once);
        assert!((l2(&g) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(0.0), (0.5, 0.25));
        assert_eq!(tanh_act(0.0), (0.0, 1.0));
        assert_eq!(relu(-3.0), (0.0, 0.0));
        assert_eq!(relu(2.5), (2.5, 1.0));
        let (s, ds) = sigmoid(-800.0);
        assert!(s >= 0.0 && s < 1e-300 && ds >= 0.0);
    }
}
