//! FMCW RADAR preprocessing: range FFT over samples, then an angle FFT over
//! receivers and a velocity FFT over chirps, each reduced to a normalized
//! log-magnitude image.

use num_complex::{Complex, Complex32};
use num_traits::Float;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};

/// Forward unnormalized DFT: `X[k] = sum_n x[n] exp(-2 pi i k n / N)`.
///
/// Radix-2 for power-of-two lengths, direct evaluation otherwise.
pub fn fft_1d<T: Float>(x: &[Complex<T>]) -> Vec<Complex<T>> {
    let mut buf = x.to_vec();
    fft_in_place(&mut buf, false);
    buf
}

/// Inverse of [`fft_1d`], including the `1/N` factor.
pub fn ifft_1d<T: Float>(x: &[Complex<T>]) -> Vec<Complex<T>> {
    let mut buf = x.to_vec();
    fft_in_place(&mut buf, true);
    let scale = T::from(buf.len()).unwrap().recip();
    for v in &mut buf {
        *v = *v * scale;
    }
    buf
}

fn twiddle<T: Float>(k: usize, n: usize, inverse: bool) -> Complex<T> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let angle = sign * 2.0 * std::f64::consts::PI * (k as f64) / (n as f64);
    Complex::new(T::from(angle.cos()).unwrap(), T::from(angle.sin()).unwrap())
}

fn fft_in_place<T: Float>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        direct_dft(buf, inverse);
    }
}

fn radix2<T: Float>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let table: Vec<Complex<T>> = (0..n / 2).map(|k| twiddle(k, n, inverse)).collect();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = table[k * stride];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn direct_dft<T: Float>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    let table: Vec<Complex<f64>> = (0..n).map(|k| twiddle(k, n, inverse)).collect();
    let input: Vec<Complex<f64>> = buf
        .iter()
        .map(|c| Complex::new(c.re.to_f64().unwrap(), c.im.to_f64().unwrap()))
        .collect();
    for (k, out) in buf.iter_mut().enumerate() {
        let mut acc = Complex::new(0.0, 0.0);
        for (i, x) in input.iter().enumerate() {
            acc += *x * table[(k * i) % n];
        }
        *out = Complex::new(T::from(acc.re).unwrap(), T::from(acc.im).unwrap());
    }
}

/// Complex I/Q measurements indexed `(rx, sample, chirp)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarCube {
    n_rx: usize,
    n_samples: usize,
    n_chirps: usize,
    data: Vec<Complex32>,
}

impl RadarCube {
    pub fn zeros(n_rx: usize, n_samples: usize, n_chirps: usize) -> Result<Self> {
        Self::new(
            (n_rx, n_samples, n_chirps),
            vec![Complex32::new(0.0, 0.0); n_rx * n_samples * n_chirps],
        )
    }

    pub fn new(dims: (usize, usize, usize), data: Vec<Complex32>) -> Result<Self> {
        let (n_rx, n_samples, n_chirps) = dims;
        if n_rx == 0 || n_samples == 0 || n_chirps == 0 {
            return Err(shape_err!("radar cube dims must be >= 1, got {dims:?}"));
        }
        if data.len() != n_rx * n_samples * n_chirps {
            return Err(shape_err!(
                "radar cube {dims:?} needs {} values, got {}",
                n_rx * n_samples * n_chirps,
                data.len()
            ));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Argument("radar cube contains non-finite values".into()));
        }
        Ok(Self { n_rx, n_samples, n_chirps, data })
    }

    /// Builds a cube from interleaved `(re, im)` pairs.
    pub fn from_interleaved(dims: (usize, usize, usize), values: &[f32]) -> Result<Self> {
        if !values.len().is_multiple_of(2) {
            return Err(shape_err!("odd number of interleaved values"));
        }
        let data = values
            .chunks_exact(2)
            .map(|c| Complex32::new(c[0], c[1]))
            .collect();
        Self::new(dims, data)
    }

    pub fn to_interleaved(&self) -> Vec<f32> {
        self.data.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_rx, self.n_samples, self.n_chirps)
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, rx: usize, sample: usize, chirp: usize) -> usize {
        (rx * self.n_samples + sample) * self.n_chirps + chirp
    }

    pub fn get(&self, rx: usize, sample: usize, chirp: usize) -> Complex32 {
        self.data[self.index(rx, sample, chirp)]
    }

    pub fn scaled(&self, factor: f32) -> Self {
        let data = self.data.iter().map(|c| c * factor).collect();
        Self { data, ..*self }
    }
}

/// Range FFT: transforms every `(rx, chirp)` fiber along the samples axis.
pub fn range_transform(cube: &RadarCube) -> RadarCube {
    let (_, n_samples, n_chirps) = cube.dims();
    let mut out = cube.clone();
    out.data
        .par_chunks_mut(n_samples * n_chirps)
        .for_each(|slab| {
            let mut fiber = vec![Complex32::new(0.0, 0.0); n_samples];
            for chirp in 0..n_chirps {
                for (s, v) in fiber.iter_mut().enumerate() {
                    *v = slab[s * n_chirps + chirp];
                }
                fft_in_place(&mut fiber, false);
                for (s, v) in fiber.iter().enumerate() {
                    slab[s * n_chirps + chirp] = *v;
                }
            }
        });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    RangeAngle,
    RangeVelocity,
}

/// A normalized magnitude image with range along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarMap {
    pub kind: MapKind,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl RadarMap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    /// Position of the global maximum (first occurrence).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best / self.cols, best % self.cols)
    }
}

/// Range-angle image of shape `(n_rx, n_samples)`: FFT over receivers, chirp
/// magnitudes summed, angle axis centered.
pub fn range_angle_map(range_cube: &RadarCube) -> RadarMap {
    let (n_rx, n_samples, n_chirps) = range_cube.dims();
    let mut acc = vec![0f32; n_rx * n_samples];
    let mut fiber = vec![Complex32::new(0.0, 0.0); n_rx];
    for sample in 0..n_samples {
        for chirp in 0..n_chirps {
            for (rx, v) in fiber.iter_mut().enumerate() {
                *v = range_cube.get(rx, sample, chirp);
            }
            fft_in_place(&mut fiber, false);
            for (k, v) in fiber.iter().enumerate() {
                acc[center_shift(k, n_rx) * n_samples + sample] += v.norm();
            }
        }
    }
    finish_map(MapKind::RangeAngle, n_rx, n_samples, acc)
}

/// Range-velocity image of shape `(n_chirps, n_samples)`: FFT over chirps,
/// receiver magnitudes summed, velocity axis centered.
pub fn range_velocity_map(range_cube: &RadarCube) -> RadarMap {
    let (n_rx, n_samples, n_chirps) = range_cube.dims();
    let mut acc = vec![0f32; n_chirps * n_samples];
    let mut fiber = vec![Complex32::new(0.0, 0.0); n_chirps];
    for rx in 0..n_rx {
        for sample in 0..n_samples {
            let start = range_cube.index(rx, sample, 0);
            fiber.copy_from_slice(&range_cube.data()[start..start + n_chirps]);
            fft_in_place(&mut fiber, false);
            for (k, v) in fiber.iter().enumerate() {
                acc[center_shift(k, n_chirps) * n_samples + sample] += v.norm();
            }
        }
    }
    finish_map(MapKind::RangeVelocity, n_chirps, n_samples, acc)
}

/// Destination of frequency bin `k` after moving zero frequency to `n / 2`.
#[inline]
pub fn center_shift(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

fn finish_map(kind: MapKind, rows: usize, cols: usize, mut data: Vec<f32>) -> RadarMap {
    for v in &mut data {
        *v = v.ln_1p();
    }
    normalize_min_max(&mut data);
    RadarMap { kind, rows, cols, data }
}

/// Min-max scaling into `[0, 1]`. An all-zero input stays zero; a constant
/// positive input maps to ones.
pub fn normalize_min_max(values: &mut [f32]) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    if values.is_empty() {
        return;
    }
    let span = hi - lo;
    if span > 0.0 {
        for v in values.iter_mut() {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    } else {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        values.iter_mut().for_each(|v| *v = fill);
    }
}

/// Both maps from a raw cube.
pub fn preprocess(cube: &RadarCube) -> (RadarMap, RadarMap) {
    let ranged = range_transform(cube);
    (range_angle_map(&ranged), range_velocity_map(&ranged))
}
