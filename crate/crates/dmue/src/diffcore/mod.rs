//! Minimal reverse-mode differentiation engine.
//!
//! Provides exactly the matrix operations the training objectives need:
//! affine maps, elementwise arithmetic, activations, row softmax and row
//! normalization, reductions, concatenation, masked selection, and a
//! stop-gradient barrier. 64-bit floats throughout.

mod check;
mod graph;
mod tensor;

pub use check::grad_check;
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::row_vector(vec![0.0, 0.0, 0.0]));
        let p = g.row_softmax(x);
        for v in g.values(p) {
            assert_eq!(*v, 1.0 / 3.0);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        assert_eq!(g.scalar_value(s), 0.5);
    }

    #[test]
    fn row_l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::row_vector(vec![3.0, 4.0]));
        let y = g.row_l2_normalize(x);
        assert_eq!(g.values(y), &[0.6, 0.8]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::row_vector(vec![1.0, 2.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_preserves_values_bitwise() {
        let values = vec![0.1, -2.5, 3.375, f64::MIN_POSITIVE];
        let mut g = Graph::new();
        let x = g.param(&Tensor::row_vector(values.clone()));
        let y = g.stop_gradient(x);
        for (a, b) in g.values(y).iter().zip(values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn stop_gradient_leaves_no_gradient_behind_the_barrier() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::row_vector(vec![1.0, -1.0]));
        let s = g.sigmoid(x);
        let blocked = g.stop_gradient(s);
        let sq = g.square(blocked);
        let root = g.sum(sq);
        g.backward(root);
        assert!(g.grad(x).is_none(), "gradient crossed the stop_gradient barrier");
    }

    #[test]
    #[should_panic(expected = "root must be scalar")]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::row_vector(vec![1.0, 2.0]));
        let y = g.square(x);
        g.backward(y);
    }

    #[test]
    #[should_panic(expected = "inner dimensions")]
    fn matmul_shape_mismatch_panics() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(2, 3));
        let b = g.constant(&Tensor::zeros(2, 3));
        g.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "log of non-positive")]
    fn checked_log_rejects_non_positive() {
        let mut g = Graph::new_checked();
        let x = g.constant(&Tensor::row_vector(vec![1.0, 0.0]));
        g.log(x);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn checked_mode_rejects_non_finite_results() {
        let mut g = Graph::new_checked();
        let x = g.constant(&Tensor::scalar(800.0));
        g.exp(x); // overflows to +inf
    }

    #[test]
    #[should_panic(expected = "zero-norm row")]
    fn checked_normalize_rejects_zero_rows() {
        let mut g = Graph::new_checked();
        let x = g.constant(&Tensor::zeros(1, 4));
        g.row_l2_normalize(x);
    }

    #[test]
    fn unchecked_normalize_maps_zero_row_to_zero() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(2, 2, vec![0.0, 0.0, 3.0, 4.0]));
        let y = g.row_l2_normalize(x);
        assert_eq!(g.values(y), &[0.0, 0.0, 0.6, 0.8]);
        let s = g.sum(y);
        g.backward(s);
        let grad = g.grad(x).unwrap();
        assert_eq!(&grad[..2], &[0.0, 0.0], "zero row must get zero gradient");
    }

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        // y = x*x + x  ->  dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let p = g.mul(x, x);
        let s = g.add(p, x);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_positive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut g = Graph::new();
            let x = g.constant(&Tensor::new(3, 4, data));
            let p = g.row_softmax(x);
            let v = g.values(p);
            for i in 0..3 {
                let row_sum: f64 = v[i * 4..(i + 1) * 4].iter().sum();
                assert!((row_sum - 1.0).abs() <= 1e-12);
                assert!(v[i * 4..(i + 1) * 4].iter().all(|p| *p > 0.0));
            }
        }
    }
}
