use super::graph::{Node, Op};
use super::{Graph, Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Whether stochastic and batch-statistics behaviour is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// Zero mean, unit variance, momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::c(0.1),
            eps: T::c(1e-5),
        }
    }
}

pub(crate) struct LayerNormSaved<T> {
    x: Var,
    gain: Var,
    bias: Var,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub(crate) struct BatchNormSaved<T> {
    x: Var,
    gain: Var,
    bias: Var,
    xhat: Vec<T>,
    rstd: Vec<T>,
    training: bool,
    channels: usize,
    plane: usize,
}

impl<T: Scalar> Graph<T> {
    /// Normalizes each vector along the last axis, then applies `gain` and
    /// `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err!("layer norm of scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err!("layer norm affine params must be [{d}]"));
        }
        let eps = T::c(eps);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let n = T::c(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        let saved = LayerNormSaved { x, gain, bias, xhat, rstd };
        Ok(self.push(value, Op::LayerNorm(saved), &[x, gain, bias]))
    }

    /// Per-channel normalization of an `[N, C, H, W]` tensor.
    ///
    /// Training mode uses batch statistics and updates `state`'s running
    /// estimates (unbiased variance); evaluation mode uses the running
    /// estimates.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(shape_err!("batch norm expects [N, C, H, W], got {shape:?}"));
        };
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err!("batch norm affine params must be [{c}]"));
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(shape_err!("batch norm state has wrong channel count"));
        }
        let training = mode == Mode::Train;
        if training && n < 2 {
            return Err(Error::Argument(
                "batch norm in training mode needs at least 2 samples".into(),
            ));
        }
        let plane = h * w;
        let count = T::c((n * plane) as f64);
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); c];
        for ch in 0..c {
            let values = || (0..n).flat_map(move |i| src[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().copied());
            let (mean, var) = if training {
                let mean = values().sum::<T>() / count;
                let var = values().map(|v| (v - mean) * (v - mean)).sum::<T>() / count;
                let m = state.momentum;
                let unbiased = var * count / (count - T::one());
                state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * mean;
                state.running_var[ch] = (T::one() - m) * state.running_var[ch] + m * unbiased;
                (mean, var)
            } else {
                (state.running_mean[ch], state.running_var[ch])
            };
            let inv = (var + state.eps).sqrt().recip();
            rstd[ch] = inv;
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    let hv = (src[j] - mean) * inv;
                    xhat[j] = hv;
                    out[j] = hv * gv[ch] + bv[ch];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let saved = BatchNormSaved { x, gain, bias, xhat, rstd, training, channels: c, plane };
        Ok(self.push(value, Op::BatchNorm(saved), &[x, gain, bias]))
    }
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    s: &LayerNormSaved<T>,
    g: &[T],
    nodes: &[Node<T>],
    out: &mut Vec<(Var, Vec<T>)>,
) {
    let gain = nodes[s.gain.0].value.data();
    let d = gain.len();
    let n = T::c(d as f64);
    if nodes[s.x.0].requires_grad {
        let mut dx = vec![T::zero(); g.len()];
        for (r, inv) in s.rstd.iter().enumerate() {
            let range = r * d..(r + 1) * d;
            let (gr, hr) = (&g[range.clone()], &s.xhat[range.clone()]);
            let dh: Vec<T> = gr.iter().zip(gain).map(|(a, b)| *a * *b).collect();
            let sum_dh: T = dh.iter().copied().sum();
            let sum_dh_h: T = dh.iter().zip(hr).map(|(a, b)| *a * *b).sum();
            for j in 0..d {
                dx[r * d + j] = *inv / n * (n * dh[j] - sum_dh - hr[j] * sum_dh_h);
            }
        }
        out.push((s.x, dx));
    }
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    for (i, gv) in g.iter().enumerate() {
        dgain[i % d] += *gv * s.xhat[i];
        dbias[i % d] += *gv;
    }
    out.push((s.gain, dgain));
    out.push((s.bias, dbias));
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    s: &BatchNormSaved<T>,
    g: &[T],
    nodes: &[Node<T>],
    out: &mut Vec<(Var, Vec<T>)>,
) {
    let gain = nodes[s.gain.0].value.data();
    let (c, plane) = (s.channels, s.plane);
    let n = g.len() / (c * plane);
    let count = T::c((n * plane) as f64);
    let idx = move |ch: usize| (0..n).flat_map(move |i| (i * c + ch) * plane..(i * c + ch + 1) * plane);
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    let mut dx = vec![T::zero(); g.len()];
    for ch in 0..c {
        for j in idx(ch) {
            dgain[ch] += g[j] * s.xhat[j];
            dbias[ch] += g[j];
        }
        let inv = s.rstd[ch];
        if s.training {
            // dxhat = g * gain; sums reduce to the affine-parameter gradients.
            let sum_dh = dbias[ch] * gain[ch];
            let sum_dh_h = dgain[ch] * gain[ch];
            for j in idx(ch) {
                dx[j] = inv / count * (count * g[j] * gain[ch] - sum_dh - s.xhat[j] * sum_dh_h);
            }
        } else {
            for j in idx(ch) {
                dx[j] = g[j] * gain[ch] * inv;
            }
        }
    }
    if nodes[s.x.0].requires_grad {
        out.push((s.x, dx));
    }
    out.push((s.gain, dgain));
    out.push((s.bias, dbias));
}
