//! Central-difference checks of every differentiable op, each on at least
//! three shapes.

mod common;

use common::cases::{self, Case};
use common::{project, random_tensor};
use lidarsynth::tensor::{multi_head_self_attention, AttentionParams, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn check(cases: Vec<Case>) {
    assert!(!cases.is_empty());
    for (label, err) in cases {
        assert!(err < TOL, "{label}: relative gradient error {err:e}");
    }
}

#[test]
fn linear() {
    check(cases::linear());
}

#[test]
fn matmul() {
    check(cases::matmul());
}

#[test]
fn softmax() {
    check(cases::softmax());
}

#[test]
fn attention() {
    check(cases::attention());
}

#[test]
fn layer_norm() {
    check(cases::layer_norm());
}

#[test]
fn batch_norm() {
    check(cases::batch_norm());
}

#[test]
fn conv_transpose() {
    check(cases::conv_transpose());
}

#[test]
fn relu() {
    check(cases::relu());
}

#[test]
fn mmse() {
    check(cases::mmse());
}

#[test]
fn decoder_chain() {
    check(cases::decoder_chain());
}

#[test]
fn shared_dag() {
    check(cases::shared_dag());
}

#[test]
fn every_op_has_three_shapes() {
    for (op, cases) in cases::all().into_iter().take(9) {
        assert!(cases.len() >= 3, "{op} has {} shapes", cases.len());
    }
}

#[test]
fn gradient_accumulates_over_paths() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let y = g.add(y, sq).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    // d/dx (2x^2 + x) = 4x + 1
    assert_eq!(g.grad(x).unwrap(), &[5.0, -7.0, 3.0]);
}

/// A key bias shifts every score of a row by the same amount, which the
/// softmax cancels: its gradient is zero.
#[test]
fn attention_key_bias_gradient_vanishes() {
    let mut r = ChaCha8Rng::seed_from_u64(65);
    let d = 8;
    let mut g = Graph::<f64>::new();
    let x = g.constant(random_tensor(&mut r, &[2, 5, d], 1.0));
    let mut leaf = |g: &mut Graph<f64>, shape: &[usize]| g.leaf(random_tensor(&mut r, shape, 0.7));
    let p = AttentionParams {
        wq: leaf(&mut g, &[d, d]),
        bq: leaf(&mut g, &[d]),
        wk: leaf(&mut g, &[d, d]),
        bk: leaf(&mut g, &[d]),
        wv: leaf(&mut g, &[d, d]),
        bv: leaf(&mut g, &[d]),
        wo: leaf(&mut g, &[d, d]),
        bo: leaf(&mut g, &[d]),
    };
    let a = multi_head_self_attention(&mut g, x, &p, 2).unwrap();
    let s = project(&mut g, a.output, 66);
    g.backward(s).unwrap();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(norm(g.grad(p.bk).unwrap()) < 1e-12 * norm(g.grad(p.bq).unwrap()).max(1.0));
    assert!(norm(g.grad(p.bq).unwrap()) > 1e-6);
}
