//! Sample directories on disk and their conversion into model inputs.
//!
//! Each sample lives in `sample_%06d/` with `camera.lstf`, `depth.lstf`,
//! `radar_cube.lstf` (`[n_rx, n_samples, n_chirps, 2]`), the preprocessed
//! `ra_map.lstf` and `rv_map.lstf`, `target_raster.lstf` and `meta.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{format_err, shape_err, Error, Result};
use crate::geometry::PolarRaster;
use crate::io::{load_tensor, save_tensor};
use crate::model::{Modality, ModelConfig};
use crate::radar::{preprocess, RadarCube, RadarMap};
use crate::synth::{assign_profiles, derive_seed, synthesize, SceneProfile, SynthConfig, SynthSample};
use crate::tensor::Tensor;

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:06}")
}

pub fn map_tensor(m: &RadarMap) -> Tensor {
    Tensor::new(&[m.rows, m.cols], m.data.clone()).expect("radar map dims")
}

pub fn cube_tensor(cube: &RadarCube) -> Tensor {
    let (a, b, c) = cube.dims();
    Tensor::new(&[a, b, c, 2], cube.to_interleaved()).expect("cube dims")
}

pub fn tensor_cube(t: &Tensor) -> Result<RadarCube> {
    let [a, b, c, 2] = t.shape()[..] else {
        return Err(format_err!("radar cube must be [n_rx, n_samples, n_chirps, 2], got {:?}", t.shape()));
    };
    RadarCube::from_interleaved((a, b, c), t.data()).map_err(|e| format_err!("{e}"))
}

pub fn raster_tensor(r: &PolarRaster) -> Tensor {
    Tensor::new(&[r.n_rows(), r.n_cols()], r.data().to_vec()).expect("raster dims")
}

/// Writes every file of one sample into `dir`, creating it.
pub fn write_sample(dir: &Path, s: &SynthSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (ra, rv) = preprocess(&s.cube);
    save_tensor(dir.join("camera.lstf"), &s.camera)?;
    save_tensor(dir.join("depth.lstf"), &s.depth)?;
    save_tensor(dir.join("radar_cube.lstf"), &cube_tensor(&s.cube))?;
    save_tensor(dir.join("ra_map.lstf"), &map_tensor(&ra))?;
    save_tensor(dir.join("rv_map.lstf"), &map_tensor(&rv))?;
    save_tensor(dir.join("target_raster.lstf"), &raster_tensor(&s.target))?;
    fs::write(dir.join("meta.txt"), format!("scenario = {}\nseed = {}\n", s.scenario, s.seed))?;
    Ok(())
}

/// One training record with every image already at its encoder's size.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Camera, depth, range-angle, range-velocity; each `[C, H, W]`.
    pub images: [Tensor; 4],
    pub target: PolarRaster,
    pub scenario: String,
}

impl Sample {
    pub fn image(&self, m: Modality) -> &Tensor {
        &self.images[m.index()]
    }
}

/// Bilinear resampling of a `[h, w]` plane (pixel-center alignment).
pub fn resize_bilinear(src: &[f32], (h, w): (usize, usize), (nh, nw): (usize, usize)) -> Vec<f32> {
    if (h, w) == (nh, nw) {
        return src.to_vec();
    }
    let coord = |i: usize, n: usize, m: usize| {
        let x = ((i as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(n - 1), x - lo as f64)
    };
    let mut out = Vec::with_capacity(nh * nw);
    for i in 0..nh {
        let (y0, y1, fy) = coord(i, h, nh);
        for j in 0..nw {
            let (x0, x1, fx) = coord(j, w, nw);
            let at = |y: usize, x: usize| src[y * w + x] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Brings a rank-2 or rank-3 single-plane image to `[channels, h, w]`.
fn fit_image(t: &Tensor, channels: usize, size: (usize, usize), what: &str) -> Result<Tensor> {
    let (c, h, w) = match t.shape()[..] {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(format_err!("{what} must be rank 2 or 3, got {:?}", t.shape())),
    };
    if c != channels {
        return Err(shape_err!("{what} has {c} channels, encoder expects {channels}"));
    }
    if !t.all_finite() {
        return Err(format_err!("{what} contains non-finite values"));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(c * size.0 * size.1);
    for ch in 0..c {
        data.extend(resize_bilinear(&t.data()[ch * plane..(ch + 1) * plane], (h, w), size));
    }
    Tensor::new(&[c, size.0, size.1], data)
}

pub fn read_meta(path: &Path) -> Result<(String, u64)> {
    let text = fs::read_to_string(path)?;
    let (mut scenario, mut seed) = (None, None);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').ok_or_else(|| format_err!("{}: bad line {line:?}", path.display()))?;
        match k.trim() {
            "scenario" => scenario = Some(v.trim().to_owned()),
            "seed" => seed = Some(v.trim().parse().map_err(|_| format_err!("{}: bad seed", path.display()))?),
            other => return Err(format_err!("{}: unknown key {other}", path.display())),
        }
    }
    match (scenario, seed) {
        (Some(s), Some(n)) if !s.is_empty() => Ok((s, n)),
        _ => Err(format_err!("{}: needs scenario and seed", path.display())),
    }
}

/// Loads one sample directory, resizing images to the encoder inputs.
/// Radar maps are recomputed from the cube when the map files are absent.
pub fn load_sample(dir: &Path, cfg: &ModelConfig) -> Result<Sample> {
    let ctx = |e: Error| match e {
        Error::Io(io) => format_err!("{}: {io}", dir.display()),
        e => e,
    };
    let (scenario, _) = read_meta(&dir.join("meta.txt")).map_err(ctx)?;
    let camera = load_tensor(dir.join("camera.lstf")).map_err(ctx)?;
    let depth = load_tensor(dir.join("depth.lstf")).map_err(ctx)?;
    let (ra_path, rv_path) = (dir.join("ra_map.lstf"), dir.join("rv_map.lstf"));
    let (ra, rv) = if ra_path.exists() && rv_path.exists() {
        (load_tensor(ra_path).map_err(ctx)?, load_tensor(rv_path).map_err(ctx)?)
    } else {
        let cube = tensor_cube(&load_tensor(dir.join("radar_cube.lstf")).map_err(ctx)?)?;
        let (ra, rv) = preprocess(&cube);
        (map_tensor(&ra), map_tensor(&rv))
    };
    let target = load_tensor(dir.join("target_raster.lstf")).map_err(ctx)?;
    assemble([camera, depth, ra, rv], target, scenario, cfg).map_err(|e| match e {
        Error::Format(msg) => format_err!("{}: {msg}", dir.display()),
        e => e,
    })
}

fn assemble(raw: [Tensor; 4], target: Tensor, scenario: String, cfg: &ModelConfig) -> Result<Sample> {
    let mut images = Vec::with_capacity(4);
    for (m, t) in Modality::ALL.into_iter().zip(&raw) {
        let enc = cfg.encoder(m);
        images.push(fit_image(t, enc.channels, (enc.image_h, enc.image_w), m.name())?);
    }
    let grid = &cfg.grid;
    if target.shape() != [grid.n_rows(), grid.n_cols()] {
        return Err(format_err!("target is {:?}, grid is {} x {}", target.shape(), grid.n_rows(), grid.n_cols()));
    }
    let target = PolarRaster::from_data(grid.clone(), target.into_data()).map_err(|e| format_err!("{e}"))?;
    Ok(Sample { images: images.try_into().unwrap(), target, scenario })
}

/// The in-memory equivalent of writing `s` and loading it back.
pub fn sample_from_synth(s: &SynthSample, cfg: &ModelConfig) -> Result<Sample> {
    let (ra, rv) = preprocess(&s.cube);
    let raw = [s.camera.clone(), s.depth.clone(), map_tensor(&ra), map_tensor(&rv)];
    assemble(raw, raster_tensor(&s.target), s.scenario.clone(), cfg)
}

/// Synthesizes `n` samples split evenly over `profiles` in contiguous
/// blocks; sample `i` uses seed `derive_seed(seed, i)`.
pub fn synthesize_dataset(n: usize, profiles: &[SceneProfile], seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    let which = assign_profiles(n, &vec![1.0; profiles.len()]);
    which
        .par_iter()
        .enumerate()
        .map(|(i, p)| synthesize(&profiles[*p], derive_seed(seed, i as u64), cfg))
        .collect()
}

/// [`synthesize_dataset`] written to `root/sample_%06d/`. Returns the
/// scenario of every sample.
pub fn write_dataset(root: &Path, n: usize, profiles: &[SceneProfile], seed: u64, cfg: &SynthConfig) -> Result<Vec<String>> {
    fs::create_dir_all(root)?;
    let which = assign_profiles(n, &vec![1.0; profiles.len()]);
    which
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = synthesize(&profiles[*p], derive_seed(seed, i as u64), cfg)?;
            write_sample(&root.join(sample_dir_name(i)), &s)?;
            Ok(s.scenario)
        })
        .collect()
}

/// Sample directories under `root` in name order.
pub fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name();
        if entry.file_type()?.is_dir() && name.to_string_lossy().starts_with("sample_") {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// All samples under `root`, in directory-name order.
pub fn load_dataset(root: &Path, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    sample_dirs(root)?.par_iter().map(|d| load_sample(d, cfg)).collect()
}
