//! GRU cell built from tape primitives.

use super::tape::{Tape, ValueId};
use crate::error::Result;

/// Tape ids of one GRU cell's weights. All matrices are d x d, biases 1 x d.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w_update: ValueId,
    pub u_update: ValueId,
    pub b_update: ValueId,
    pub w_reset: ValueId,
    pub u_reset: ValueId,
    pub b_reset: ValueId,
    pub w_cand: ValueId,
    pub u_cand: ValueId,
    pub b_cand: ValueId,
}

/// Names of the nine weight tensors of a GRU cell, used for parameter
/// registration and checkpointing. Order matches [`GruWeights`].
pub const GRU_WEIGHT_NAMES: [&str; 9] = [
    "w_update", "u_update", "b_update", "w_reset", "u_reset", "b_reset", "w_cand", "u_cand",
    "b_cand",
];

/// One gated-recurrent-unit step.
///
/// update gate  z = sigmoid(x W_z + h U_z + b_z)
/// reset gate   r = sigmoid(x W_r + h U_r + b_r)
/// candidate    c = tanh(x W_c + (r * h) U_c + b_c)
/// output       h' = z * h + (1 - z) * c
///
/// With all-zero weights this reduces to h' = 0.5 h.
pub fn gru_cell(tape: &mut Tape, h_prev: ValueId, x: ValueId, w: &GruWeights) -> Result<ValueId> {
    let gate = |tape: &mut Tape, wx: ValueId, uh: ValueId, b: ValueId| -> Result<ValueId> {
        let a = tape.matmul(x, wx)?;
        let c = tape.matmul(h_prev, uh)?;
        let sum = tape.add(a, c)?;
        tape.add_row_bias(sum, b)
    };
    let z_pre = gate(tape, w.w_update, w.u_update, w.b_update)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, w.w_reset, w.u_reset, w.b_reset)?;
    let r = tape.sigmoid(r_pre);

    let rh = tape.mul(r, h_prev)?;
    let xw = tape.matmul(x, w.w_cand)?;
    let rhu = tape.matmul(rh, w.u_cand)?;
    let pre = tape.add(xw, rhu)?;
    let pre = tape.add_row_bias(pre, w.b_cand)?;
    let cand = tape.tanh(pre);

    let zh = tape.mul(z, h_prev)?;
    let one_minus_z = tape.affine_scalar(z, -1.0, 1.0);
    let zc = tape.mul(one_minus_z, cand)?;
    tape.add(zh, zc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check::fd_check_scalar;
    use crate::numerics::tensor::Tensor2D;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_weights(tape: &mut Tape, d: usize) -> GruWeights {
        let m = |tape: &mut Tape| tape.leaf(Tensor2D::zeros(d, d));
        let b = |tape: &mut Tape| tape.leaf(Tensor2D::zeros(1, d));
        GruWeights {
            w_update: m(tape),
            u_update: m(tape),
            b_update: b(tape),
            w_reset: m(tape),
            u_reset: m(tape),
            b_reset: b(tape),
            w_cand: m(tape),
            u_cand: m(tape),
            b_cand: b(tape),
        }
    }

    #[test]
    fn zero_weights_halve_state() {
        let d = 3;
        let mut tape = Tape::new();
        let w = zero_weights(&mut tape, d);
        let h0 = Tensor2D::from_vec(1, d, vec![2.0, -4.0, 6.0]).unwrap();
        let h = tape.leaf(h0.clone());
        let x = tape.leaf(Tensor2D::from_vec(1, d, vec![1.0, 1.0, 1.0]).unwrap());
        let out = gru_cell(&mut tape, h, x, &w).unwrap();
        for (o, i) in tape.value(out).data().iter().zip(h0.data()) {
            assert!((o - 0.5 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn unrolled_chain_gradients_match_finite_differences() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rand_t = |rows: usize, cols: usize| {
            Tensor2D::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| rng.random_range(-0.8..0.8))
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        // 9 weights + 3 message inputs
        let mut inputs = Vec::new();
        for name in GRU_WEIGHT_NAMES {
            let rows = if name.starts_with('b') { 1 } else { d };
            inputs.push(rand_t(rows, d));
        }
        for _ in 0..3 {
            inputs.push(rand_t(1, d));
        }
        let forward = |xs: &[Tensor2D]| {
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let w = GruWeights {
                w_update: ids[0],
                u_update: ids[1],
                b_update: ids[2],
                w_reset: ids[3],
                u_reset: ids[4],
                b_reset: ids[5],
                w_cand: ids[6],
                u_cand: ids[7],
                b_cand: ids[8],
            };
            let mut h = tape.leaf(Tensor2D::zeros(1, d));
            for &x in &ids[9..12] {
                h = gru_cell(&mut tape, h, x, &w).unwrap();
            }
            let sig = tape.sigmoid(h);
            let ones = tape.leaf(Tensor2D::from_vec(1, d, vec![1.0; d]).unwrap());
            let out = tape.matmul_transpose_b(sig, ones).unwrap();
            (tape, out, ids)
        };
        let max_err = fd_check_scalar(&inputs, forward, 1e-5);
        assert!(max_err < 1e-5, "rel err {max_err}");
    }
}
