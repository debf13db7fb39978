//! Finite-difference verification of tape gradients.
//!
//! Central differences with a caller-chosen step; the forward closure must
//! be deterministic (seed any randomness inside it) so both evaluations of
//! a perturbed input see the same masks and statistics.

use super::tape::{Tape, ValueId};
use super::tensor::Tensor2D;

/// Norm-based relative error between two same-shaped tensors.
pub fn relative_error(a: &Tensor2D, b: &Tensor2D) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut diff = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        diff += (x - y) * (x - y);
    }
    let diff = diff.sqrt();
    let denom = a.frobenius_norm().max(b.frobenius_norm());
    if denom == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / denom
    }
}

/// Central-difference gradient of a scalar function w.r.t. one input tensor.
pub fn fd_gradient(
    inputs: &[Tensor2D],
    which: usize,
    mut eval: impl FnMut(&[Tensor2D]) -> f64,
    h: f64,
) -> Tensor2D {
    let mut perturbed: Vec<Tensor2D> = inputs.to_vec();
    let (rows, cols) = inputs[which].shape();
    let mut grad = Tensor2D::zeros(rows, cols);
    for i in 0..rows * cols {
        let orig = perturbed[which].data()[i];
        perturbed[which].data_mut()[i] = orig + h;
        let up = eval(&perturbed);
        perturbed[which].data_mut()[i] = orig - h;
        let down = eval(&perturbed);
        perturbed[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Run `forward` once for the analytic gradients, then compare every input's
/// gradient against central finite differences. Returns the worst relative
/// error across inputs.
///
/// `forward` returns the tape, the scalar output node, and the leaf id of
/// each input in order.
pub fn fd_check_scalar(
    inputs: &[Tensor2D],
    forward: impl Fn(&[Tensor2D]) -> (Tape, ValueId, Vec<ValueId>),
    h: f64,
) -> f64 {
    let (tape, out, leaf_ids) = forward(inputs);
    assert_eq!(leaf_ids.len(), inputs.len());
    let grads = tape.backward(out).expect("backward failed");
    let eval = |xs: &[Tensor2D]| {
        let (tape, out, _) = forward(xs);
        tape.value(out).get(0, 0)
    };
    let mut worst: f64 = 0.0;
    for (which, &leaf) in leaf_ids.iter().enumerate() {
        let numeric = fd_gradient(inputs, which, eval, h);
        let analytic = grads
            .get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor2D::zeros(numeric.rows(), numeric.cols()));
        worst = worst.max(relative_error(&numeric, &analytic));
    }
    worst
}
