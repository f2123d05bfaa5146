//! Shared test oracles.
#![allow(dead_code)]

pub mod cases;

use lidarsynth::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative step for central differences; the step for element `x` is
/// `STEP * max(1, |x|)`.
pub const STEP: f64 = 1e-4;

/// Gradient norms below this are compared in absolute terms.
pub const ZERO_GRAD: f64 = 1e-6;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay out of reach of the
/// finite-difference step.
pub fn kink_free_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces an arbitrary output to a scalar through a fixed random
/// projection so every output element contributes to the check.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let weights = random_tensor(&mut rng, &shape, 1.0);
    let w = g.constant(weights);
    let prod = g.mul(y, w).unwrap();
    g.sum(prod)
}

/// Worst relative error between analytic and central-difference gradients
/// over all `inputs`, measured per input as
/// `|a - n|_2 / max(|a|_2, |n|_2, ZERO_GRAD)`. The floor keeps inputs whose
/// true gradient vanishes (key biases under softmax, say) from turning
/// rounding noise into a relative error of 1.
///
/// `build` must be deterministic: it is re-run for every perturbation.
pub fn grad_check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    assert_eq!(g.value(out).numel(), 1, "grad_check needs a scalar output");
    g.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .map(|v| v.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for j in 0..input.numel() {
            let x = input.data()[j];
            let h = STEP * x.abs().max(1.0);
            probe[i].data_mut()[j] = x + h;
            let up = eval(&probe);
            probe[i].data_mut()[j] = x - h;
            let down = eval(&probe);
            probe[i].data_mut()[j] = x;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(ZERO_GRAD));
    }
    worst
}
