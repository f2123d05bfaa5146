use rand::Rng;

use super::conv::{self, ConvSaved};
use super::norm::{self, BatchNormSaved, LayerNormSaved};
use super::{gemm, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    /// Second operand broadcast over the leading axes of the first.
    AddTrailing(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    LayerNorm(LayerNormSaved<T>),
    BatchNorm(BatchNormSaved<T>),
    ConvTranspose(ConvSaved),
    WeightedMse {
        pred: Var,
        target: Vec<T>,
        row_weights: Vec<T>,
        cols: usize,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
    pub op: Op<T>,
}

/// Records a forward computation so gradients can be propagated back
/// through it. One graph per forward pass.
pub struct Graph<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

type Deltas<T> = Vec<(Var, Vec<T>)>;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.input(value, true)
    }

    /// An input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if any reached this node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let inner = self.value(b).numel();
        let bv = self.value(b).data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + bv[i % inner])
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::AddTrailing(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let data = self.value(x).data().iter().map(|v| *v * factor).collect();
        let value = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        let value = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::c(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.value(x).data().to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|p| *p >= shape.len() || std::mem::replace(&mut seen[*p], true)) {
            return Err(shape_err!("bad permutation {perm:?} for shape {shape:?}"));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(shape_err!("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!(
                "narrow axis {axis} [{start}, {}) out of {shape:?}",
                start + len
            ));
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.value(x).data();
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of rank {}", base.len()));
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat shapes {base:?} and {s:?} disagree"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Inverted dropout: in training each element is zeroed with
    /// probability `p` and survivors scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &mask, |a, m| a * m);
        let value = Tensor { shape: self.shape(x).to_vec(), data };
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} out of rank {}", shape.len()));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// `x W + b` over the last axis of `x`; leading axes are batch axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(shape_err!("linear input {xs:?} does not match weight {ws:?}"));
        }
        let (inp, out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err!("linear bias {:?} != [{out}]", self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut data = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in data.chunks_exact_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            inp,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut data,
            b.is_some(),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let value = Tensor::new(&shape, data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched product of `[B, M, K]` with `[B, K, N]` (or `[B, N, K]` when
    /// `trans_b`). Rank-2 operands are treated as `B = 1`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k) = batch_dims(&sa)?;
        let (batch_b, rb, cb) = batch_dims(&sb)?;
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if batch != batch_b || k != kb || sa.len() != sb.len() {
            return Err(shape_err!("matmul {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut data = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                false,
                &bv[i * k * n..],
                trans_b,
                &mut data[i * m * n..],
                false,
            );
        }
        let mut shape = sa;
        let rank = shape.len();
        shape[rank - 1] = n;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Mean over all elements of `w_row * (pred - target)^2`, where the row is
    /// the second-to-last axis of `pred`.
    pub fn weighted_mse(&mut self, pred: Var, target: &Tensor<T>, row_weights: &[T]) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape != target.shape() {
            return Err(shape_err!("prediction {shape:?} vs target {:?}", target.shape()));
        }
        if shape.len() < 2 || shape[shape.len() - 2] != row_weights.len() {
            return Err(shape_err!(
                "{} row weights for prediction {shape:?}",
                row_weights.len()
            ));
        }
        let cols = shape[shape.len() - 1];
        let rows = row_weights.len();
        let p = self.value(pred).data();
        let mut total = T::zero();
        for (i, (a, b)) in p.iter().zip(target.data()).enumerate() {
            let d = *a - *b;
            total += row_weights[(i / cols) % rows] * d * d;
        }
        let loss = total / T::c(p.len() as f64);
        let op = Op::WeightedMse {
            pred,
            target: target.data().to_vec(),
            row_weights: row_weights.to_vec(),
            cols,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[pred]))
    }

    /// Back-propagates from a single-element output.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got {:?}",
                self.shape(root)
            ));
        }
        self.backward_seeded(root, vec![T::one()])
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_seeded(&mut self, root: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(root).numel() {
            return Err(shape_err!("seed length {} for {:?}", seed.len(), self.shape(root)));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            let deltas = local_grads(node, grad, before);
            for (v, delta) in deltas {
                let target = &mut before[v.0];
                if !target.requires_grad {
                    continue;
                }
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                    None => target.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }
}

fn batch_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [m, k] => Ok((1, *m, *k)),
        [b, m, k] => Ok((*b, *m, *k)),
        _ => Err(shape_err!("matmul operand must be rank 2 or 3, got {shape:?}")),
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map<T: Copy>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|p| shape[*p]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|p| in_strides[*p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn local_grads<T: Scalar>(node: &Node<T>, g: &[T], nodes: &[Node<T>]) -> Deltas<T> {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    let mut out: Deltas<T> = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            out.push((*a, g.to_vec()));
            out.push((*b, g.to_vec()));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                out.push((*a, zip_map(g, val(*b).data(), |x, y| x * y)));
            }
            if wants(*b) {
                out.push((*b, zip_map(g, val(*a).data(), |x, y| x * y)));
            }
        }
        Op::AddTrailing(a, b) => {
            out.push((*a, g.to_vec()));
            if wants(*b) {
                let inner = val(*b).numel();
                let mut db = vec![T::zero(); inner];
                for chunk in g.chunks_exact(inner) {
                    db.iter_mut().zip(chunk).for_each(|(d, x)| *d += *x);
                }
                out.push((*b, db));
            }
        }
        Op::Scale(x, f) => out.push((*x, g.iter().map(|v| *v * *f).collect())),
        Op::Relu(x) => {
            let d = zip_map(g, node.value.data(), |gv, y| if y > T::zero() { gv } else { T::zero() });
            out.push((*x, d));
        }
        Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
        Op::Mean(x) => {
            let n = val(*x).numel();
            out.push((*x, vec![g[0] / T::c(n as f64); n]));
        }
        Op::Reshape(x) => out.push((*x, g.to_vec())),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, p) in perm.iter().enumerate() {
                inv[*p] = i;
            }
            let (d, _) = permute_data(g, node.value.shape(), &inv);
            out.push((*x, d));
        }
        Op::Narrow { x, axis, start } => {
            let shape = val(*x).shape();
            let (outer, mid, inner) = split_axis(shape, *axis);
            let len = node.value.shape()[*axis];
            let mut d = vec![T::zero(); val(*x).numel()];
            for o in 0..outer {
                let dst = (o * mid + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            out.push((*x, d));
        }
        Op::Concat { xs, axis } => {
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            let total = node.value.shape()[*axis] * inner;
            for v in xs {
                let chunk = val(*v).shape()[*axis] * inner;
                if wants(*v) {
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let s = o * total + offset;
                        d.extend_from_slice(&g[s..s + chunk]);
                    }
                    out.push((*v, d));
                }
                offset += chunk;
            }
        }
        Op::Dropout { x, mask } => out.push((*x, zip_map(g, mask, |a, m| a * m))),
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            out.push((*x, d));
        }
        Op::Linear { x, w, b } => {
            let ws = val(*w).shape();
            let (inp, outp) = (ws[0], ws[1]);
            let rows = val(*x).numel() / inp;
            if wants(*x) {
                let mut dx = vec![T::zero(); rows * inp];
                gemm(rows, outp, inp, g, false, val(*w).data(), true, &mut dx, false);
                out.push((*x, dx));
            }
            if wants(*w) {
                let mut dw = vec![T::zero(); inp * outp];
                gemm(inp, rows, outp, val(*x).data(), true, g, false, &mut dw, false);
                out.push((*w, dw));
            }
            if let Some(b) = b {
                if wants(*b) {
                    let mut db = vec![T::zero(); outp];
                    for row in g.chunks_exact(outp) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                    }
                    out.push((*b, db));
                }
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (batch, m, k) = batch_dims(val(*a).shape()).unwrap();
            let n = node.value.shape()[node.value.shape().len() - 1];
            let (av, bv) = (val(*a).data(), val(*b).data());
            if wants(*a) {
                let mut da = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    // dA = dY * op(B)^T
                    gemm(m, n, k, &g[i * m * n..], false, &bv[i * k * n..], !trans_b, &mut da[i * m * k..], false);
                }
                out.push((*a, da));
            }
            if wants(*b) {
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    if *trans_b {
                        // B stored [N, K]: dB = dY^T * A
                        gemm(n, m, k, &g[i * m * n..], true, &av[i * m * k..], false, &mut db[i * k * n..], false);
                    } else {
                        gemm(k, m, n, &av[i * m * k..], true, &g[i * m * n..], false, &mut db[i * k * n..], false);
                    }
                }
                out.push((*b, db));
            }
        }
        Op::LayerNorm(saved) => norm::layer_norm_backward(saved, g, nodes, &mut out),
        Op::BatchNorm(saved) => norm::batch_norm_backward(saved, g, nodes, &mut out),
        Op::ConvTranspose(saved) => conv::conv_transpose_backward(saved, g, nodes, &mut out),
        Op::WeightedMse { pred, target, row_weights, cols } => {
            let p = val(*pred).data();
            let rows = row_weights.len();
            let scale = g[0] * T::c(2.0) / T::c(p.len() as f64);
            let d = p
                .iter()
                .zip(target)
                .enumerate()
                .map(|(i, (a, b))| scale * row_weights[(i / cols) % rows] * (*a - *b))
                .collect();
            out.push((*pred, d));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_affine_example() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1., 2.]));
        let w = g.leaf(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.leaf(t(&[2], &[3., 4.]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[4., 6.]);
        let bad = g.leaf(t(&[3, 2], &[0.; 6]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[3], vec![0.0; 3]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = g.constant(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = (a*b) + (a*b)*a = ab + a^2 b; df/da = b + 2ab, df/db = a + a^2
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[1], &[3.0]));
        let b = g.leaf(t(&[1], &[5.0]));
        let ab = g.mul(a, b).unwrap();
        let aab = g.mul(ab, a).unwrap();
        let f = g.add(ab, aab).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0 + 2.0 * 15.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0 + 9.0]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = g.transpose(x).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1., 4., 2., 5., 3., 6.]);
        assert!(g.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn narrow_and_concat_invert() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let left = g.narrow(x, 1, 0, 1).unwrap();
        let right = g.narrow(x, 1, 1, 2).unwrap();
        let back = g.concat(&[left, right], 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let s = g.sum(back);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[4], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let y = g.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y, x);
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn relu_clamps() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
    }
}
