use super::graph::{Node, Op};
use super::{gemm, Graph, Scalar, Tensor, Var};
use crate::error::{shape_err, Result};

/// Spatial output length of a transposed convolution,
/// `(input - 1) * stride - 2 * padding + kernel`, or `None` when not positive.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = (input.checked_sub(1)?) * stride + kernel;
    full.checked_sub(2 * padding).filter(|v| *v > 0)
}

pub(crate) struct ConvSaved {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: Geometry,
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    /// Calls `f(col_row, col_index, out_index)` for every kernel tap that
    /// lands inside the output, where `col_row = (co * k + kh) * k + kw`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let Geometry { h, w, cout, k, stride, padding, ho, wo, .. } = *self;
        for co in 0..cout {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (co * k + kh) * k + kw;
                    for ih in 0..h {
                        let oh = (ih * stride + kh) as isize - padding as isize;
                        if oh < 0 || oh as usize >= ho {
                            continue;
                        }
                        let obase = (co * ho + oh as usize) * wo;
                        for iw in 0..w {
                            let ow = (iw * stride + kw) as isize - padding as isize;
                            if ow < 0 || ow as usize >= wo {
                                continue;
                            }
                            f(row, ih * w + iw, obase + ow as usize);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Transposed 2-D convolution.
    ///
    /// `x` is `[C_in, H, W]` or `[N, C_in, H, W]`; `kernels` is
    /// `[C_in, C_out, k, k]`; the optional bias is `[C_out]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batched, n, cin, h, w) = match xs[..] {
            [c, h, w] => (false, 1, c, h, w),
            [n, c, h, w] => (true, n, c, h, w),
            _ => return Err(shape_err!("conv input must be rank 3 or 4, got {xs:?}")),
        };
        let ks = self.shape(kernels).to_vec();
        let [kc, cout, k, k2] = ks[..] else {
            return Err(shape_err!("kernels must be [C_in, C_out, k, k], got {ks:?}"));
        };
        if kc != cin || k != k2 || stride == 0 {
            return Err(shape_err!("kernels {ks:?} incompatible with input {xs:?}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv bias must be [{cout}]"));
            }
        }
        let (Some(ho), Some(wo)) = (
            conv_output_len(h, k, stride, padding),
            conv_output_len(w, k, stride, padding),
        ) else {
            return Err(shape_err!(
                "transposed conv of {h}x{w} with k={k} s={stride} p={padding} has no output"
            ));
        };
        let geom = Geometry { n, cin, h, w, cout, k, stride, padding, ho, wo };
        let taps = cout * k * k;
        let (xv, kv) = (self.value(x).data(), self.value(kernels).data());
        let mut out = vec![T::zero(); n * cout * ho * wo];
        let mut cols = vec![T::zero(); taps * h * w];
        for i in 0..n {
            // cols[taps, HW] = K^T[taps, C_in] * X[C_in, HW]
            gemm(taps, cin, h * w, kv, true, &xv[i * cin * h * w..], false, &mut cols, false);
            let dst = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
            geom.for_each_tap(|row, col, o| dst[o] += cols[row * h * w + col]);
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (co, plane) in dst.chunks_exact_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let shape = if batched { vec![n, cout, ho, wo] } else { vec![cout, ho, wo] };
        let value = Tensor::new(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(kernels), bias].into_iter().flatten().collect();
        Ok(self.push(value, Op::ConvTranspose(ConvSaved { x, w: kernels, b: bias, geom }), &inputs))
    }
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    s: &ConvSaved,
    g: &[T],
    nodes: &[Node<T>],
    out: &mut Vec<(Var, Vec<T>)>,
) {
    let geom = s.geom;
    let Geometry { n, cin, h, w, cout, k, ho, wo, .. } = geom;
    let taps = cout * k * k;
    let hw = h * w;
    let (xv, kv) = (nodes[s.x.0].value.data(), nodes[s.w.0].value.data());
    let want_x = nodes[s.x.0].requires_grad;
    let want_w = nodes[s.w.0].requires_grad;
    let mut dx = if want_x { vec![T::zero(); n * cin * hw] } else { Vec::new() };
    let mut dw = if want_w { vec![T::zero(); cin * taps] } else { Vec::new() };
    let mut dcols = vec![T::zero(); taps * hw];
    for i in 0..n {
        let gi = &g[i * cout * ho * wo..(i + 1) * cout * ho * wo];
        dcols.fill(T::zero());
        geom.for_each_tap(|row, col, o| dcols[row * hw + col] = gi[o]);
        if want_x {
            // dX[C_in, HW] = K[C_in, taps] * dcols[taps, HW]
            gemm(cin, taps, hw, kv, false, &dcols, false, &mut dx[i * cin * hw..], false);
        }
        if want_w {
            // dK[C_in, taps] += X[C_in, HW] * dcols^T
            gemm(cin, hw, taps, &xv[i * cin * hw..], false, &dcols, true, &mut dw, true);
        }
    }
    if want_x {
        out.push((s.x, dx));
    }
    if want_w {
        out.push((s.w, dw));
    }
    if let Some(b) = s.b {
        let mut db = vec![T::zero(); cout];
        for (p, plane) in g.chunks_exact(ho * wo).enumerate() {
            db[p % cout] += plane.iter().copied().sum::<T>();
        }
        out.push((b, db));
    }
}
