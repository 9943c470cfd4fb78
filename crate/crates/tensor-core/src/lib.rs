//! Minimal differentiable tensor engine over a recorded computation tape.
//!
//! The op set is restricted to what spectrogram CNNs and unrolled gradient
//! descent need. Gradients produced by the reverse pass are recorded as
//! ordinary tape nodes, so differentiating through an inner gradient (for
//! meta-gradients of unrolled training) is exact, not approximated.

mod backward;
mod error;
mod fd;
mod graph;
mod kernels;
mod nn;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use fd::{finite_diff_grad, max_rel_err};
pub use graph::{Graph, NodeId, Padding};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_sum_kernel_sums_entries() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let k = g.leaf(t(vec![1, 1, 2, 2], vec![1.0; 4]), false).unwrap();
        let y = g.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.data(y), &[10.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..25).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = g.leaf(t(vec![1, 1, 5, 5], data.clone()), false).unwrap();
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0; // center of a 3x3 kernel
        let k = g.leaf(t(vec![1, 1, 3, 3], delta), false).unwrap();
        let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 5, 5]);
        assert_eq!(g.data(y), &data[..]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.leaf(t(vec![3, 7], vec![0.25; 21]), false).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0, 3, 6]).unwrap();
        assert!((g.item(loss) - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_label_is_zero() {
        let mut g = Graph::new();
        let mut row = vec![0.0; 7];
        row[2] = 1e6;
        let logits = g.leaf(t(vec![1, 7], row), false).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!(g.item(loss).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let logits = g.leaf(t(vec![1, 7], vec![0.0; 7]), false).unwrap();
        let err = g.softmax_cross_entropy(logits, &[7]).unwrap_err();
        assert!(matches!(err, TensorError::Label { label: 7, classes: 7 }));
    }

    #[test]
    fn backward_square_at_three_is_six() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0f64), true).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.data(grads[&x]), &[6.0]);
    }

    #[test]
    fn backward_product_swaps_factors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0f64), true).unwrap();
        let y = g.leaf(Tensor::scalar(5.0f64), true).unwrap();
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(g.data(grads[&x]), &[5.0]);
        assert_eq!(g.data(grads[&y]), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2], vec![1.0, 2.0]), true).unwrap();
        let y = g.mul(x, x).unwrap();
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = t(vec![4], vec![0.3, -1.2, 0.0, 2.5]);
        let grad = finite_diff_grad(
            |v| {
                let mut g = Graph::new();
                let x = g.leaf(v.clone(), false)?;
                let s = g.sum_all(x)?;
                Ok(g.item(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        for &v in grad.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_of_squared_norm() {
        let x = t(vec![2], vec![1.0, 2.0]);
        let grad = finite_diff_grad(
            |v| {
                let mut g = Graph::new();
                let x = g.leaf(v.clone(), false)?;
                let sq = g.mul(x, x)?;
                let s = g.sum_all(sq)?;
                Ok(g.item(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!((grad.data()[0] - 2.0).abs() < 1e-8);
        assert!((grad.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_forward_is_numeric_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1e300f64), false).unwrap();
        let sq = g.mul(x, x).unwrap();
        let err = g.mul(sq, sq).unwrap_err();
        assert!(matches!(err, TensorError::Numeric { .. }));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2, 3], vec![0.1, -0.4, 0.9, 1.7, -2.2, 0.05]), true).unwrap();
        let e = g.exp(x).unwrap();
        let s = g.sum_all(e).unwrap();
        let l = g.ln(s).unwrap();
        let before: Vec<f64> = g.data(l).to_vec();
        let e_before: Vec<f64> = g.data(e).to_vec();
        g.replay().unwrap();
        assert_eq!(g.data(l), &before[..]);
        assert_eq!(g.data(e), &e_before[..]);
    }

    #[test]
    fn max_pool_ties_take_first_index() {
        let mut g = Graph::new();
        let x = g
            .leaf(t(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]), true)
            .unwrap();
        let y = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.data(y), &[1.0]);
        let grads = g.backward(y).unwrap();
        // all ties: gradient routes to the first element only
        assert_eq!(g.data(grads[&x]), &[1.0, 0.0, 0.0, 0.0]);
    }
}
