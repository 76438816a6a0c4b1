//! Gradient checks per operation; see `common::gradcheck`.

mod common;

use common::gradcheck::{self, Worst};

fn run(f: fn(&mut Worst)) {
    let mut w = Worst::default();
    f(&mut w);
    assert!(!w.0.is_empty());
    let failures = w.failures();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn matmul_and_linear() {
    run(gradcheck::matmul_and_linear);
}

#[test]
fn elementwise_and_reductions() {
    run(gradcheck::elementwise_and_reductions);
}

#[test]
fn softmax_along_each_axis() {
    run(gradcheck::softmax_along_each_axis);
}

#[test]
fn layer_norm() {
    run(gradcheck::layer_norm);
}

#[test]
fn attention_layouts() {
    run(gradcheck::attention_layouts);
}

#[test]
fn row_operations() {
    run(gradcheck::row_operations);
}

#[test]
fn cross_entropy_with_mask() {
    run(gradcheck::cross_entropy_with_mask);
}

#[test]
fn composite_graph() {
    run(gradcheck::composite_graph);
}

#[test]
fn episode_loss() {
    run(gradcheck::episode_loss);
}
