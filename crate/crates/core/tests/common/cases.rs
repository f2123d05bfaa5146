//! Gradient-check cases shared by the gradient suite and the acceptance
//! run. Each function returns `(label, relative error)` per shape.

use super::{grad_check, kink_free_tensor, project, random_tensor};
use lidarsynth::tensor::{multi_head_self_attention, AttentionParams, BatchNormState, Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Case = (String, f64);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn linear() -> Vec<Case> {
    let shapes = [(vec![3, 4], 4, 2), (vec![2, 3, 5], 5, 3), (vec![1, 7], 7, 6), (vec![4, 2, 2, 3], 3, 1)];
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, (x_shape, din, dout))| {
            let mut r = rng(i as u64);
            let inputs = [random_tensor(&mut r, &x_shape, 1.0), random_tensor(&mut r, &[din, dout], 1.0), random_tensor(&mut r, &[dout], 1.0)];
            let err = grad_check(&inputs, |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
                project(g, y, 10 + i as u64)
            });
            (format!("linear {x_shape:?} x [{din}, {dout}]"), err)
        })
        .collect()
}

pub fn matmul() -> Vec<Case> {
    let shapes = [([2, 3, 4], [2, 4, 5], false), ([3, 2, 4], [3, 6, 4], true), ([1, 5, 5], [1, 5, 5], true)];
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, (a, b, trans))| {
            let mut r = rng(20 + i as u64);
            let inputs = [random_tensor(&mut r, &a, 1.0), random_tensor(&mut r, &b, 1.0)];
            let err = grad_check(&inputs, |g, v| {
                let y = g.matmul(v[0], v[1], trans).unwrap();
                project(g, y, 30 + i as u64)
            });
            (format!("matmul {a:?} {b:?} trans_b={trans}"), err)
        })
        .collect()
}

pub fn softmax() -> Vec<Case> {
    let shapes = [(vec![5], 0), (vec![3, 4], 1), (vec![2, 3, 4], 2), (vec![4, 3], 0)];
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, (shape, axis))| {
            let mut r = rng(40 + i as u64);
            let inputs = [random_tensor(&mut r, &shape, 2.0)];
            let err = grad_check(&inputs, |g, v| {
                let y = g.softmax(v[0], axis).unwrap();
                project(g, y, 50 + i as u64)
            });
            (format!("softmax {shape:?} axis {axis}"), err)
        })
        .collect()
}

pub fn attention() -> Vec<Case> {
    let shapes = [(vec![3, 4], 2), (vec![2, 4, 6], 3), (vec![1, 5, 8], 1), (vec![2, 2, 4], 4)];
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, (shape, heads))| {
            let d = *shape.last().unwrap();
            let mut r = rng(60 + i as u64);
            let mut inputs = vec![random_tensor(&mut r, &shape, 1.0)];
            for _ in 0..4 {
                inputs.push(random_tensor(&mut r, &[d, d], 0.7));
                inputs.push(random_tensor(&mut r, &[d], 0.3));
            }
            let err = grad_check(&inputs, |g, v| {
                let p = AttentionParams { wq: v[1], bq: v[2], wk: v[3], bk: v[4], wv: v[5], bv: v[6], wo: v[7], bo: v[8] };
                let a = multi_head_self_attention(g, v[0], &p, heads).unwrap();
                project(g, a.output, 70 + i as u64)
            });
            (format!("attention {shape:?} heads {heads}"), err)
        })
        .collect()
}

pub fn layer_norm() -> Vec<Case> {
    [vec![2, 5], vec![3, 2, 4], vec![1, 8], vec![6, 3]]
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            let d = *shape.last().unwrap();
            let mut r = rng(80 + i as u64);
            let inputs = [random_tensor(&mut r, &shape, 2.0), random_tensor(&mut r, &[d], 1.5), random_tensor(&mut r, &[d], 1.0)];
            let err = grad_check(&inputs, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                project(g, y, 90 + i as u64)
            });
            (format!("layer norm {shape:?}"), err)
        })
        .collect()
}

/// Training mode (batch statistics) and evaluation mode (fixed running
/// statistics) on each shape.
pub fn batch_norm() -> Vec<Case> {
    let mut out = Vec::new();
    for (i, shape) in [[2, 3, 2, 2], [4, 1, 3, 2], [3, 2, 1, 5]].into_iter().enumerate() {
        let c = shape[1];
        let mut r = rng(100 + i as u64);
        let inputs = [random_tensor(&mut r, &shape, 2.0), random_tensor(&mut r, &[c], 1.5), random_tensor(&mut r, &[c], 1.0)];
        let err = grad_check(&inputs, |g, v| {
            let mut state = BatchNormState::new(c);
            let y = g.batch_norm2d(v[0], v[1], v[2], &mut state, Mode::Train).unwrap();
            project(g, y, 110 + i as u64)
        });
        out.push((format!("batch norm train {shape:?}"), err));

        let mut fixed = BatchNormState::<f64>::new(c);
        fixed.running_mean = (0..c).map(|k| 0.3 * k as f64 - 0.2).collect();
        fixed.running_var = (0..c).map(|k| 0.5 + k as f64).collect();
        let err = grad_check(&inputs, |g, v| {
            let mut state = fixed.clone();
            let y = g.batch_norm2d(v[0], v[1], v[2], &mut state, Mode::Eval).unwrap();
            project(g, y, 120 + i as u64)
        });
        out.push((format!("batch norm eval {shape:?}"), err));
    }
    out
}

pub fn conv_transpose() -> Vec<Case> {
    let cases = [
        (vec![2, 3, 3], [2, 2, 4, 4], 2, 1),
        (vec![1, 2, 2, 3], [2, 3, 4, 4], 2, 1),
        (vec![2, 1, 3, 2], [1, 2, 3, 3], 1, 0),
        (vec![1, 2, 2, 2], [2, 1, 2, 2], 3, 0),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (x_shape, k, stride, pad))| {
            let mut r = rng(130 + i as u64);
            let inputs = [random_tensor(&mut r, &x_shape, 1.0), random_tensor(&mut r, &k, 1.0), random_tensor(&mut r, &[k[1]], 1.0)];
            let err = grad_check(&inputs, |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                project(g, y, 140 + i as u64)
            });
            (format!("conv transpose {x_shape:?} * {k:?} s{stride} p{pad}"), err)
        })
        .collect()
}

pub fn relu() -> Vec<Case> {
    [vec![7], vec![3, 4], vec![2, 2, 5]]
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            let mut r = rng(150 + i as u64);
            let inputs = [kink_free_tensor(&mut r, &shape)];
            let err = grad_check(&inputs, |g, v| {
                let y = g.relu(v[0]);
                project(g, y, 160 + i as u64)
            });
            (format!("relu {shape:?}"), err)
        })
        .collect()
}

pub fn mmse() -> Vec<Case> {
    [(1, 2, 2), (2, 3, 4), (3, 5, 2), (1, 8, 1)]
        .into_iter()
        .enumerate()
        .map(|(i, (b, rows, cols))| {
            let mut r = rng(170 + i as u64);
            let target = random_tensor(&mut r, &[b, rows, cols], 5.0);
            let weights: Vec<f64> = (0..rows).map(|k| if k % 2 == 0 { 10.0 } else { 1.0 }).collect();
            let inputs = [random_tensor(&mut r, &[b, rows, cols], 5.0)];
            let err = grad_check(&inputs, |g, v| g.weighted_mse(v[0], &target, &weights).unwrap());
            (format!("mmse [{b}, {rows}, {cols}]"), err)
        })
        .collect()
}

/// Conv-transpose, batch norm and the weighted loss chained as in the
/// decoder.
pub fn decoder_chain() -> Vec<Case> {
    let mut r = rng(190);
    let target = random_tensor(&mut r, &[2, 1, 4, 4], 1.0);
    let weights = vec![10.0, 1.0, 1.0, 1.0];
    let inputs = [
        kink_free_tensor(&mut r, &[2, 1, 2, 2]),
        random_tensor(&mut r, &[1, 3, 4, 4], 1.0),
        random_tensor(&mut r, &[3], 0.5),
        random_tensor(&mut r, &[3], 1.0),
        random_tensor(&mut r, &[3, 1, 3, 3], 1.0),
    ];
    let err = grad_check(&inputs, |g, v| {
        let h = g.conv_transpose2d(v[0], v[1], None, 2, 1).unwrap();
        let mut state = BatchNormState::new(3);
        let h = g.batch_norm2d(h, v[2], v[3], &mut state, Mode::Train).unwrap();
        let h = g.conv_transpose2d(h, v[4], None, 1, 1).unwrap();
        let y = g.reshape(h, &[2, 4, 4]).unwrap();
        let t = Tensor::new(&[2, 4, 4], target.data().to_vec()).unwrap();
        g.weighted_mse(y, &t, &weights).unwrap()
    });
    vec![("conv-T -> batch norm -> conv-T -> mmse".to_owned(), err)]
}

/// Nodes consumed along several paths.
pub fn shared_dag() -> Vec<Case> {
    let mut r = rng(200);
    let inputs = [random_tensor(&mut r, &[2, 3], 1.0), random_tensor(&mut r, &[3, 3], 1.0)];
    let err = grad_check(&inputs, |g, v| {
        let h = g.linear(v[0], v[1], None).unwrap();
        let a = g.softmax(h, 1).unwrap();
        let b = g.mul(a, h).unwrap();
        let c = g.linear(b, v[1], None).unwrap();
        let d = g.add(c, h).unwrap();
        project(g, d, 201)
    });
    vec![("shared sub-expressions".to_owned(), err)]
}

/// Every op group with its cases.
pub fn all() -> Vec<(&'static str, Vec<Case>)> {
    vec![
        ("linear", linear()),
        ("matmul", matmul()),
        ("softmax", softmax()),
        ("attention", attention()),
        ("layer norm", layer_norm()),
        ("batch norm", batch_norm()),
        ("conv transpose", conv_transpose()),
        ("relu", relu()),
        ("mmse", mmse()),
        ("decoder chain", decoder_chain()),
        ("shared dag", shared_dag()),
    ]
}
