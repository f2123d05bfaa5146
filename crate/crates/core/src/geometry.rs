//! LiDAR point clouds and the polar range image.
//!
//! Angles are in degrees. `theta` is the planar azimuth of `(x, y)` measured
//! from +x towards +y, `phi` is the elevation above the XY plane. The image
//! has one row per elevation bin (ascending, lowest region first) and one
//! column per azimuth bin (ascending). Each cell holds the distance of the
//! nearest return in meters, 0 for no return.

use std::io::{Read, Write};

use crate::error::{config_err, format_err, shape_err, Error, Result};

const EXACT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f32,
    pub y: f32,
    pub z: f32,
}

impl Point3 {
    pub const fn new(x: f32, y: f32, z: f32) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Range and direction of a point as seen from the sensor origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spherical {
    pub range: f64,
    pub theta: f64,
    pub phi: f64,
}

/// Cartesian to (range, azimuth, elevation).
///
/// Azimuth lies in `[-180, 180)`, elevation in `[-90, 90]`.
pub fn to_spherical(p: Point3) -> Result<Spherical> {
    if !p.is_finite() {
        return Err(Error::Argument(format!("non-finite point {p:?}")));
    }
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    let planar = x.hypot(y);
    let range = planar.hypot(z);
    if range == 0.0 {
        return Err(Error::Argument("origin has no direction".into()));
    }
    let mut theta = y.atan2(x).to_degrees();
    if theta >= 180.0 {
        theta -= 360.0;
    }
    let phi = z.atan2(planar).to_degrees();
    Ok(Spherical { range, theta, phi })
}

/// Inverse of [`to_spherical`] evaluated in double precision.
pub fn from_spherical(range: f64, theta: f64, phi: f64) -> (f64, f64, f64) {
    let (st, ct) = theta.to_radians().sin_cos();
    let (sp, cp) = phi.to_radians().sin_cos();
    (range * cp * ct, range * cp * st, range * sp)
}

/// A contiguous elevation band binned at a single step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiRegion {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl PhiRegion {
    pub const fn new(lo: f64, hi: f64, step: f64) -> Self {
        Self { lo, hi, step }
    }

    pub fn rows(&self) -> usize {
        ((self.hi - self.lo) / self.step).round() as usize
    }
}

/// Angular grid of the range image: uniform in azimuth, piecewise uniform
/// in elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub theta_step: f64,
    pub phi_regions: Vec<PhiRegion>,
    pub max_range: f32,
}

impl Default for GridSpec {
    /// 1088 x 1440 grid: 0.25 degree azimuth bins over the full circle, fine
    /// 0.015625 degree elevation bins in [-5, 5), 0.25 degree elsewhere.
    fn default() -> Self {
        Self {
            theta_lo: -180.0,
            theta_hi: 180.0,
            theta_step: 0.25,
            phi_regions: vec![
                PhiRegion::new(-60.0, -5.0, 0.25),
                PhiRegion::new(-5.0, 5.0, 0.015625),
                PhiRegion::new(5.0, 62.0, 0.25),
            ],
            max_range: 100.0,
        }
    }
}

fn exact_multiple(span: f64, step: f64) -> Option<usize> {
    let n = span / step;
    let rounded = n.round();
    if rounded >= 1.0 && (n - rounded).abs() <= EXACT_TOL * rounded.max(1.0) {
        Some(rounded as usize)
    } else {
        None
    }
}

impl GridSpec {
    /// Variant of the default grid with 960 rows (elevation capped at 30
    /// degrees), matching a 45x30 decoder seed.
    pub fn legacy() -> Self {
        let mut grid = Self::default();
        grid.phi_regions[2] = PhiRegion::new(5.0, 30.0, 0.25);
        grid
    }

    /// Small 128 x 192 grid for desk-scale experiments. The fine band keeps
    /// the loss-band edges on bin boundaries.
    pub fn toy() -> Self {
        Self {
            theta_lo: -180.0,
            theta_hi: 180.0,
            theta_step: 1.875,
            phi_regions: vec![
                PhiRegion::new(-60.0, -5.0, 2.5),
                PhiRegion::new(-5.0, 5.0, 0.15625),
                PhiRegion::new(5.0, 47.0, 1.0),
            ],
            max_range: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.theta_lo, self.theta_hi, self.theta_step]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.theta_hi > self.theta_lo) || !(self.theta_step > 0.0) {
            return Err(config_err!(
                "azimuth span [{}, {}) step {} is not a valid range",
                self.theta_lo,
                self.theta_hi,
                self.theta_step
            ));
        }
        if exact_multiple(self.theta_hi - self.theta_lo, self.theta_step).is_none() {
            return Err(config_err!(
                "azimuth span is not a multiple of step {}",
                self.theta_step
            ));
        }
        if self.phi_regions.is_empty() {
            return Err(config_err!("grid has no elevation regions"));
        }
        for (i, r) in self.phi_regions.iter().enumerate() {
            if !(r.hi > r.lo) || !(r.step > 0.0) || !r.lo.is_finite() || !r.hi.is_finite() {
                return Err(config_err!("elevation region {i} is empty or has bad step"));
            }
            if exact_multiple(r.hi - r.lo, r.step).is_none() {
                return Err(config_err!(
                    "elevation region [{}, {}) is not a multiple of step {}",
                    r.lo,
                    r.hi,
                    r.step
                ));
            }
            if r.lo < -90.0 || r.hi > 90.0 {
                return Err(config_err!("elevation region {i} exceeds [-90, 90]"));
            }
            if i > 0 && self.phi_regions[i - 1].hi != r.lo {
                return Err(config_err!(
                    "elevation regions {} and {i} are not contiguous",
                    i - 1
                ));
            }
        }
        if !(self.max_range > 0.0) || !self.max_range.is_finite() {
            return Err(config_err!("max_range must be positive"));
        }
        Ok(())
    }

    pub fn n_cols(&self) -> usize {
        ((self.theta_hi - self.theta_lo) / self.theta_step).round() as usize
    }

    pub fn n_rows(&self) -> usize {
        self.phi_regions.iter().map(PhiRegion::rows).sum()
    }

    /// Row counts of each elevation region, lowest first.
    pub fn region_rows(&self) -> Vec<usize> {
        self.phi_regions.iter().map(PhiRegion::rows).collect()
    }

    pub fn phi_lo(&self) -> f64 {
        self.phi_regions[0].lo
    }

    pub fn phi_hi(&self) -> f64 {
        self.phi_regions[self.phi_regions.len() - 1].hi
    }

    pub fn col_of(&self, theta: f64) -> Option<usize> {
        if !(theta >= self.theta_lo && theta < self.theta_hi) {
            return None;
        }
        let col = ((theta - self.theta_lo) / self.theta_step).floor() as usize;
        Some(col.min(self.n_cols() - 1))
    }

    pub fn row_of(&self, phi: f64) -> Option<usize> {
        let mut offset = 0;
        for region in &self.phi_regions {
            let rows = region.rows();
            if phi >= region.lo && phi < region.hi {
                let row = ((phi - region.lo) / region.step).floor() as usize;
                return Some(offset + row.min(rows - 1));
            }
            offset += rows;
        }
        None
    }

    /// Half-open binning of a direction; `None` when outside the grid.
    pub fn bin_index(&self, theta: f64, phi: f64) -> Option<(usize, usize)> {
        Some((self.row_of(phi)?, self.col_of(theta)?))
    }

    pub fn theta_center(&self, col: usize) -> f64 {
        self.theta_lo + (col as f64 + 0.5) * self.theta_step
    }

    /// Elevation of the center of `row`.
    pub fn phi_center(&self, row: usize) -> f64 {
        let mut offset = 0;
        for region in &self.phi_regions {
            let rows = region.rows();
            if row < offset + rows {
                return region.lo + ((row - offset) as f64 + 0.5) * region.step;
            }
            offset += rows;
        }
        panic!("row {row} outside grid with {offset} rows");
    }

    /// Elevation bin width of `row`.
    pub fn phi_step(&self, row: usize) -> f64 {
        let mut offset = 0;
        for region in &self.phi_regions {
            offset += region.rows();
            if row < offset {
                return region.step;
            }
        }
        panic!("row {row} outside grid");
    }
}

/// A range image on a [`GridSpec`], stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarRaster {
    grid: GridSpec,
    data: Vec<f32>,
}

impl PolarRaster {
    pub fn zeros(grid: GridSpec) -> Self {
        let len = grid.n_rows() * grid.n_cols();
        Self { grid, data: vec![0.0; len] }
    }

    pub fn from_data(grid: GridSpec, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        let (rows, cols) = (grid.n_rows(), grid.n_cols());
        if data.len() != rows * cols {
            return Err(shape_err!(
                "raster has {} values, grid needs {rows} x {cols}",
                data.len()
            ));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !(**v >= 0.0 && **v <= grid.max_range))
        {
            return Err(Error::Argument(format!(
                "raster value {v} outside [0, {}]",
                grid.max_range
            )));
        }
        Ok(Self { grid, data })
    }

    /// Builds a raster from arbitrary predictions, clamping into `[0, max_range]`
    /// and mapping NaN to 0.
    pub fn from_clamped(grid: GridSpec, mut data: Vec<f32>) -> Result<Self> {
        let max = grid.max_range;
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, max) };
        }
        Self::from_data(grid, data)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn n_rows(&self) -> usize {
        self.grid.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.grid.n_cols()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.n_cols() + col]
    }

    pub fn nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

/// Output of [`rasterize`].
#[derive(Debug, Clone)]
pub struct Rasterized {
    pub raster: PolarRaster,
    /// Points discarded: outside the angular grid, beyond `max_range`, or at
    /// the origin.
    pub dropped: usize,
}

/// Bins a point cloud, keeping the nearest return per cell.
pub fn rasterize(cloud: &[Point3], grid: &GridSpec) -> Rasterized {
    let mut raster = PolarRaster::zeros(grid.clone());
    let cols = grid.n_cols();
    let mut dropped = 0;
    for p in cloud {
        let Ok(s) = to_spherical(*p) else {
            dropped += 1;
            continue;
        };
        let range = s.range as f32;
        let bin = grid.bin_index(s.theta, s.phi);
        match bin {
            Some((row, col)) if range <= grid.max_range && range > 0.0 => {
                let cell = &mut raster.data[row * cols + col];
                if *cell == 0.0 || range < *cell {
                    *cell = range;
                }
            }
            _ => dropped += 1,
        }
    }
    Rasterized { raster, dropped }
}

/// One point per non-empty cell, at the cell-center direction and the stored
/// range. The f32 coordinates are adjusted so that re-rasterizing recovers
/// the stored range bit-exactly.
pub fn derasterize(raster: &PolarRaster) -> Vec<Point3> {
    let grid = raster.grid();
    let cols = grid.n_cols();
    raster
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, &range)| {
            let (row, col) = (i / cols, i % cols);
            point_at(range, grid.theta_center(col), grid.phi_center(row))
        })
        .collect()
}

/// Places a point whose f32 range recomputes to exactly `range`.
pub fn point_at(range: f32, theta: f64, phi: f64) -> Point3 {
    let (x, y, z) = from_spherical(range as f64, theta, phi);
    let mut p = Point3::new(x as f32, y as f32, z as f32);
    // Nudge the dominant coordinate one ulp at a time; each step moves the
    // recomputed range by at most one ulp of the range.
    for _ in 0..64 {
        let got = (p.x as f64).hypot(p.y as f64).hypot(p.z as f64) as f32;
        if got == range {
            break;
        }
        let grow = got < range;
        let axis = dominant_axis(&p);
        let c = match axis {
            0 => &mut p.x,
            1 => &mut p.y,
            _ => &mut p.z,
        };
        // Sign-magnitude layout: incrementing the bits grows |c|.
        *c = if grow {
            f32::from_bits(c.to_bits() + 1)
        } else {
            f32::from_bits(c.to_bits() - 1)
        };
    }
    p
}

fn dominant_axis(p: &Point3) -> usize {
    let (ax, ay, az) = (p.x.abs(), p.y.abs(), p.z.abs());
    if ax >= ay && ax >= az {
        0
    } else if ay >= az {
        1
    } else {
        2
    }
}

const CLOUD_MAGIC: &[u8; 4] = b"LSPC";

/// Writes the `LSPC` point-cloud format: magic, u32 count, then xyz triples,
/// all little-endian.
pub fn write_point_cloud<W: Write>(mut w: W, cloud: &[Point3]) -> Result<()> {
    let count = u32::try_from(cloud.len())
        .map_err(|_| Error::Argument("point cloud too large".into()))?;
    let mut buf = Vec::with_capacity(8 + cloud.len() * 12);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&count.to_le_bytes());
    for p in cloud {
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_point_cloud<R: Read>(mut r: R) -> Result<Vec<Point3>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != CLOUD_MAGIC {
        return Err(format_err!("missing LSPC header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != count * 12 {
        return Err(format_err!(
            "LSPC declares {count} points but carries {} bytes",
            body.len()
        ));
    }
    let cloud: Vec<Point3> = body
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap());
            Point3::new(f(0), f(4), f(8))
        })
        .collect();
    if cloud.iter().any(|p| !p.is_finite()) {
        return Err(format_err!("LSPC contains non-finite coordinates"));
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn spherical_axis_cases() {
        let s = to_spherical(Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!((s.range, s.theta, s.phi), (1.0, 0.0, 0.0));
        let s = to_spherical(Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((s.range, s.phi), (1.0, 90.0));
    }

    #[test]
    fn spherical_diagonal() {
        // r = sqrt(1 + 1 + 2) = 2; azimuth atan(1) = 45; elevation asin(sqrt2/2) = 45.
        let s = to_spherical(Point3::new(1.0, 1.0, 2f32.sqrt())).unwrap();
        assert!(close(s.range, 2.0, 1e-6));
        assert!(close(s.theta, 45.0, 1e-9));
        assert!(close(s.phi, 45.0, 1e-5));
    }

    #[test]
    fn spherical_rejects_origin() {
        assert!(to_spherical(Point3::new(0.0, 0.0, 0.0)).is_err());
        assert!(to_spherical(Point3::new(f32::NAN, 0.0, 1.0)).is_err());
    }

    #[test]
    fn azimuth_wraps_to_lower_edge() {
        let s = to_spherical(Point3::new(-1.0, 0.0, 0.0)).unwrap();
        assert_eq!(s.theta, -180.0);
        let s = to_spherical(Point3::new(-1.0, -0.0, 0.0)).unwrap();
        assert_eq!(s.theta, -180.0);
    }

    #[test]
    fn default_grid_dimensions() {
        let g = GridSpec::default();
        g.validate().unwrap();
        assert_eq!((g.n_rows(), g.n_cols()), (1088, 1440));
        assert_eq!(g.region_rows(), vec![220, 640, 228]);
        let legacy = GridSpec::legacy();
        legacy.validate().unwrap();
        assert_eq!((legacy.n_rows(), legacy.n_cols()), (960, 1440));
        let toy = GridSpec::toy();
        toy.validate().unwrap();
        assert_eq!((toy.n_rows(), toy.n_cols()), (128, 192));
    }

    #[test]
    fn bin_index_examples() {
        let g = GridSpec::default();
        assert_eq!(g.bin_index(-180.0, -60.0), Some((0, 0)));
        assert_eq!(g.bin_index(0.0, -1.71875), Some((430, 720)));
        assert_eq!(g.bin_index(0.0, 80.0), None);
        assert_eq!(g.bin_index(180.0, 0.0), None);
        assert_eq!(g.bin_index(0.0, 62.0), None);
        assert_eq!(g.bin_index(179.99, 61.99), Some((1087, 1439)));
    }

    #[test]
    fn invalid_grids_rejected() {
        let mut g = GridSpec::default();
        g.theta_step = 0.7;
        assert!(g.validate().is_err());
        let mut g = GridSpec::default();
        g.phi_regions[1].lo = -4.0;
        assert!(g.validate().is_err());
        let mut g = GridSpec::default();
        g.phi_regions.clear();
        assert!(g.validate().is_err());
        let mut g = GridSpec::default();
        g.max_range = 0.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn rasterize_min_rule_and_drops() {
        let g = GridSpec::default();
        let empty = rasterize(&[], &g);
        assert_eq!(empty.raster.nonzero(), 0);
        let cloud = [
            Point3::new(9.0, 0.0, 0.0),
            Point3::new(5.0, 0.0, 0.0),
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(500.0, 0.0, 0.0),
            Point3::new(0.0, 0.0, 7.0),
        ];
        let out = rasterize(&cloud, &g);
        assert_eq!(out.dropped, 3);
        assert_eq!(out.raster.nonzero(), 1);
        let (row, col) = g.bin_index(0.0, 0.0).unwrap();
        assert_eq!(out.raster.get(row, col), 5.0);
    }

    #[test]
    fn single_point_lands_in_its_bin() {
        let g = GridSpec::default();
        let out = rasterize(&[Point3::new(10.0, 0.0, 0.0)], &g);
        let s = to_spherical(Point3::new(10.0, 0.0, 0.0)).unwrap();
        let (row, col) = g.bin_index(s.theta, s.phi).unwrap();
        assert_eq!(out.raster.nonzero(), 1);
        assert_eq!(out.raster.get(row, col), 10.0);
    }

    #[test]
    fn derasterize_single_bin() {
        let g = GridSpec::default();
        let mut data = vec![0.0; g.n_rows() * g.n_cols()];
        data[430 * g.n_cols() + 720] = 10.0;
        let raster = PolarRaster::from_data(g.clone(), data).unwrap();
        let cloud = derasterize(&raster);
        assert_eq!(cloud.len(), 1);
        let s = to_spherical(cloud[0]).unwrap();
        assert_eq!(s.range as f32, 10.0);
        assert_eq!(g.bin_index(s.theta, s.phi), Some((430, 720)));
        assert!(derasterize(&PolarRaster::zeros(g)).is_empty());
    }

    #[test]
    fn raster_rejects_bad_values() {
        let g = GridSpec::toy();
        let n = g.n_rows() * g.n_cols();
        assert!(PolarRaster::from_data(g.clone(), vec![0.0; n - 1]).is_err());
        let mut data = vec![0.0; n];
        data[3] = -1.0;
        assert!(PolarRaster::from_data(g.clone(), data.clone()).is_err());
        data[3] = f32::NAN;
        assert!(PolarRaster::from_data(g.clone(), data.clone()).is_err());
        let clamped = PolarRaster::from_clamped(g, data).unwrap();
        assert_eq!(clamped.get(0, 3), 0.0);
    }

    #[test]
    fn point_cloud_file_round_trip() {
        let cloud = vec![Point3::new(1.0, -2.5, 3.25), Point3::new(0.0, 0.0, -1e-3)];
        let mut buf = Vec::new();
        write_point_cloud(&mut buf, &cloud).unwrap();
        assert_eq!(&buf[..4], b"LSPC");
        assert_eq!(buf.len(), 8 + 24);
        assert_eq!(read_point_cloud(&buf[..]).unwrap(), cloud);
        assert!(read_point_cloud(&buf[..buf.len() - 1]).is_err());
        assert!(read_point_cloud(&b"XXXX\0\0\0\0"[..]).is_err());
    }
}
