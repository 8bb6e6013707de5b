//! Analytic gradients of every differentiable op against central differences.

mod common;

use common::ops::{self, random, TOL};
use flipsbir::autodiff::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_within(results: Vec<(&'static str, f64)>) {
    for (name, worst) in results {
        assert!(worst < TOL, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn matmul() {
    assert_within(ops::matmul());
}

#[test]
fn conv2d() {
    assert_within(ops::conv2d());
}

#[test]
fn adaptive_avg_pool2d() {
    assert_within(ops::adaptive_avg_pool2d());
}

#[test]
fn relu_and_gelu() {
    assert_within(ops::relu_and_gelu());
}

#[test]
fn elementwise_binary_and_scalar() {
    assert_within(ops::elementwise_binary_and_scalar());
}

#[test]
fn biases_and_reshape() {
    assert_within(ops::biases_and_reshape());
}

#[test]
fn softmax() {
    assert_within(ops::softmax());
}

#[test]
fn layer_norm() {
    assert_within(ops::layer_norm());
}

#[test]
fn reductions() {
    assert_within(ops::reductions());
}

#[test]
fn slicing_concat_gather_transpose() {
    assert_within(ops::slicing_concat_gather_transpose());
}

#[test]
fn cross_entropy() {
    assert_within(ops::cross_entropy());
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[5, 7]);
    let b = random(&mut rng, &[7, 3]);
    let mut tape = Tape::new();
    let av = tape.leaf(a);
    let bv = tape.constant(b.clone());
    let y = tape.matmul(av, bv).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    for i in 0..5 {
        for p in 0..7 {
            let expected: f64 = (0..3).map(|j| b.data()[p * 3 + j]).sum();
            assert!((g.get(av).unwrap()[i * 7 + p] - expected).abs() < 1e-12);
        }
    }
}
