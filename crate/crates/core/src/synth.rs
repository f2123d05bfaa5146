//! Procedural scenes and the sensor views rendered from them.
//!
//! The sensor sits at the origin looking along +x with +z up. Scenes hold
//! axis-aligned boxes and vertical cylinders standing on an optional ground
//! plane `z = -ground_height`, so every view is an exact ray cast.

use std::f64::consts::PI;

use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{config_err, Result};
use crate::geometry::{from_spherical, GridSpec, PolarRaster};
use crate::radar::RadarCube;
use crate::tensor::Tensor;

const GROUND_REFLECTIVITY: f64 = 0.35;
const SKY_LEVEL: f64 = 0.6;
/// Distance at which camera shading has dropped to half.
const FALLOFF_DIST: f64 = 20.0;
/// Depth mapped to 1 in the inverse-depth image.
const NEAR_DEPTH: f64 = 1.0;
const CAMERA_FOV_DEG: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    /// Axis-aligned; `size` is the full extent along x, y, z.
    Box,
    /// Vertical axis; `size[0]` is the diameter, `size[2]` the height.
    Cylinder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub reflectivity: f64,
    /// Positive when moving away from the sensor, m/s.
    pub radial_velocity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Sensor height above the ground plane; `None` for no ground.
    pub ground_height: Option<f64>,
    pub primitives: Vec<Primitive>,
    pub ambient_brightness: f64,
}

impl Scene {
    pub fn empty() -> Self {
        Self { ground_height: None, primitives: Vec::new(), ambient_brightness: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    /// `None` for the ground plane.
    pub primitive: Option<usize>,
    pub reflectivity: f64,
}

fn intersect_box(p: &Primitive, d: [f64; 3]) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for axis in 0..3 {
        let lo = p.center[axis] - p.size[axis] / 2.0;
        let hi = p.center[axis] + p.size[axis] / 2.0;
        if d[axis].abs() < 1e-12 {
            if lo > 0.0 || hi < 0.0 {
                return None;
            }
            continue;
        }
        let (a, b) = (lo / d[axis], hi / d[axis]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn intersect_cylinder(p: &Primitive, d: [f64; 3]) -> Option<f64> {
    let r = p.size[0] / 2.0;
    let (zlo, zhi) = (p.center[2] - p.size[2] / 2.0, p.center[2] + p.size[2] / 2.0);
    let (ox, oy) = (-p.center[0], -p.center[1]);
    let mut best = f64::INFINITY;
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-12 {
        let b = 2.0 * (d[0] * ox + d[1] * oy);
        let c = ox * ox + oy * oy - r * r;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let z = t * d[2];
            if t > 0.0 && z >= zlo && z <= zhi {
                best = t;
            }
        }
    }
    if d[2].abs() > 1e-12 {
        for zc in [zlo, zhi] {
            let t = zc / d[2];
            let (x, y) = (t * d[0] + ox, t * d[1] + oy);
            if t > 0.0 && x * x + y * y <= r * r {
                best = best.min(t);
            }
        }
    }
    best.is_finite().then_some(best)
}

/// Nearest intersection of the ray from the origin along unit `dir`.
pub fn cast_ray(scene: &Scene, dir: [f64; 3]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |distance: f64, primitive: Option<usize>, reflectivity: f64| {
        if best.is_none_or(|b| distance < b.distance) {
            best = Some(Hit { distance, primitive, reflectivity });
        }
    };
    for (i, p) in scene.primitives.iter().enumerate() {
        let t = match p.kind {
            PrimitiveKind::Box => intersect_box(p, dir),
            PrimitiveKind::Cylinder => intersect_cylinder(p, dir),
        };
        if let Some(t) = t {
            consider(t, Some(i), p.reflectivity);
        }
    }
    if let Some(h) = scene.ground_height {
        if dir[2] < 0.0 {
            consider(h / -dir[2], None, GROUND_REFLECTIVITY);
        }
    }
    best
}

/// Ground-truth range image: one ray per bin center, 0 where nothing is
/// hit within `grid.max_range`.
pub fn raycast_lidar(scene: &Scene, grid: &GridSpec) -> Result<PolarRaster> {
    grid.validate()?;
    let cols = grid.n_cols();
    let max = grid.max_range as f64;
    let mut data = vec![0.0f32; grid.n_rows() * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(row, out)| {
        let phi = grid.phi_center(row);
        for (col, v) in out.iter_mut().enumerate() {
            let (x, y, z) = from_spherical(1.0, grid.theta_center(col), phi);
            if let Some(hit) = cast_ray(scene, [x, y, z]) {
                if hit.distance <= max {
                    *v = hit.distance as f32;
                }
            }
        }
    });
    PolarRaster::from_data(grid.clone(), data)
}

/// Unit ray through the center of pixel `(u, v)` of a `width x height`
/// pinhole camera with a 90 degree horizontal field of view; row 0 is the
/// top of the image.
pub fn pixel_ray(u: usize, v: usize, width: usize, height: usize) -> [f64; 3] {
    let f = width as f64 / 2.0 / (CAMERA_FOV_DEG.to_radians() / 2.0).tan();
    let y = (width as f64 / 2.0 - (u as f64 + 0.5)) / f;
    let z = (height as f64 / 2.0 - (v as f64 + 0.5)) / f;
    let n = (1.0 + y * y + z * z).sqrt();
    [1.0 / n, y / n, z / n]
}

/// Pixel whose ray passes closest to the camera-frame point, if in view.
pub fn project(point: [f64; 3], width: usize, height: usize) -> Option<(usize, usize)> {
    if point[0] <= 0.0 {
        return None;
    }
    let f = width as f64 / 2.0 / (CAMERA_FOV_DEG.to_radians() / 2.0).tan();
    let u = width as f64 / 2.0 - f * point[1] / point[0];
    let v = height as f64 / 2.0 - f * point[2] / point[0];
    let inside = u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64;
    inside.then_some((u as usize, v as usize))
}

fn render(width: usize, height: usize, pixel: impl Fn([f64; 3]) -> f64 + Sync) -> Tensor {
    let mut data = vec![0.0f32; width * height];
    data.par_chunks_mut(width).enumerate().for_each(|(v, row)| {
        for (u, out) in row.iter_mut().enumerate() {
            *out = pixel(pixel_ray(u, v, width, height)) as f32;
        }
    });
    Tensor::new(&[1, height, width], data).expect("non-empty image")
}

/// Grayscale view `[1, H, W]`: reflectivity times brightness times a
/// distance falloff, uniform sky where nothing is hit.
pub fn render_camera(scene: &Scene, width: usize, height: usize) -> Tensor {
    let b = scene.ambient_brightness;
    render(width, height, |dir| match cast_ray(scene, dir) {
        Some(hit) => hit.reflectivity * b / (1.0 + (hit.distance / FALLOFF_DIST).powi(2)),
        None => SKY_LEVEL * b,
    })
}

/// Inverse-depth view `[1, H, W]`: `min(1, near / depth)` with depth along
/// the optical axis, 0 where nothing is hit.
pub fn render_depth(scene: &Scene, width: usize, height: usize) -> Tensor {
    render(width, height, |dir| match cast_ray(scene, dir) {
        Some(hit) => (NEAR_DEPTH / (hit.distance * dir[0])).min(1.0),
        None => 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadarConfig {
    pub n_rx: usize,
    pub n_samples: usize,
    pub n_chirps: usize,
    /// Range mapped to the full range-bin span, meters.
    pub r_max: f64,
    /// Radial speed mapped to one full velocity-bin cycle, m/s.
    pub v_max: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self { n_rx: 4, n_samples: 256, n_chirps: 128, r_max: 100.0, v_max: 20.0 }
    }
}

impl RadarConfig {
    pub fn toy() -> Self {
        Self { n_rx: 8, n_samples: 64, n_chirps: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rx == 0 || self.n_samples == 0 || self.n_chirps == 0 {
            return Err(config_err!("radar dims must be >= 1"));
        }
        if !(self.r_max > 0.0 && self.v_max > 0.0) {
            return Err(config_err!("radar r_max and v_max must be positive"));
        }
        Ok(())
    }
}

/// Normalized `(range, angle, velocity)` frequencies of a primitive.
pub fn target_frequencies(p: &Primitive, cfg: &RadarConfig) -> (f64, f64, f64) {
    let [x, y, z] = p.center;
    let r = (x * x + y * y + z * z).sqrt();
    let azimuth = y.atan2(x);
    (r / cfg.r_max, 0.5 * azimuth.sin(), p.radial_velocity / cfg.v_max)
}

/// FMCW cube: each primitive adds a tone of amplitude `reflectivity` at its
/// normalized frequencies along (sample, rx, chirp), plus circular Gaussian
/// noise with `E|n|^2 = noise_sigma^2`.
pub fn simulate_radar(scene: &Scene, cfg: &RadarConfig, noise_sigma: f64, seed: u64) -> Result<RadarCube> {
    cfg.validate()?;
    let (nr, ns, nc) = (cfg.n_rx, cfg.n_samples, cfg.n_chirps);
    let mut acc = vec![(0.0f64, 0.0f64); nr * ns * nc];
    for p in &scene.primitives {
        let (fr, fa, fv) = target_frequencies(p, cfg);
        for k in 0..nr {
            for n in 0..ns {
                for m in 0..nc {
                    let phase = 2.0 * PI * (fr * n as f64 + fa * k as f64 + fv * m as f64);
                    let (s, c) = phase.sin_cos();
                    let a = &mut acc[(k * ns + n) * nc + m];
                    a.0 += p.reflectivity * c;
                    a.1 += p.reflectivity * s;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma / 2f64.sqrt()).expect("finite sigma"));
    let data = acc
        .into_iter()
        .map(|(mut re, mut im)| {
            if let Some(n) = &noise {
                re += n.sample(&mut rng);
                im += n.sample(&mut rng);
            }
            Complex32::new(re as f32, im as f32)
        })
        .collect();
    RadarCube::new((nr, ns, nc), data)
}

/// Distribution of scenes for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneProfile {
    pub name: String,
    /// Inclusive primitive-count range.
    pub count: (usize, usize),
    /// Footprint extent (box side or cylinder diameter), meters.
    pub footprint: (f64, f64),
    pub height: (f64, f64),
    /// Horizontal distance of primitive centers from the sensor.
    pub distance: (f64, f64),
    /// Azimuth of primitive centers, degrees.
    pub azimuth: (f64, f64),
    pub brightness: (f64, f64),
    pub reflectivity: (f64, f64),
    pub velocity: (f64, f64),
    pub cylinder_fraction: f64,
    pub ground_height: Option<f64>,
    pub world_radius: f64,
    pub noise_sigma: f64,
}

impl SceneProfile {
    fn base(name: &str, count: (usize, usize), brightness: (f64, f64), noise_sigma: f64) -> Self {
        Self {
            name: name.to_owned(),
            count,
            footprint: (1.0, 3.0),
            height: (1.0, 4.0),
            distance: (6.0, 40.0),
            azimuth: (-60.0, 60.0),
            brightness,
            reflectivity: (0.2, 1.0),
            velocity: (-8.0, 8.0),
            cylinder_fraction: 0.4,
            ground_height: Some(2.5),
            world_radius: 50.0,
            noise_sigma,
        }
    }

    /// The four scenario profiles: day and night, each sparse and dense.
    pub fn builtin() -> Vec<SceneProfile> {
        let (day, night) = ((0.7, 1.0), (0.05, 0.2));
        vec![
            Self::base("day-sparse", (2, 5), day, 0.02),
            Self::base("day-dense", (6, 12), day, 0.02),
            Self::base("night-sparse", (2, 5), night, 0.05),
            Self::base("night-dense", (6, 12), night, 0.05),
        ]
    }

    pub fn named(name: &str) -> Option<SceneProfile> {
        Self::builtin().into_iter().find(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("footprint", self.footprint),
            ("height", self.height),
            ("distance", self.distance),
            ("azimuth", self.azimuth),
            ("brightness", self.brightness),
            ("reflectivity", self.reflectivity),
            ("velocity", self.velocity),
        ];
        for (what, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(config_err!("profile {}: empty {what} range", self.name));
            }
        }
        if self.count.0 > self.count.1 {
            return Err(config_err!("profile {}: empty count range", self.name));
        }
        if self.brightness.0 < 0.0 || self.brightness.1 > 1.0 || self.reflectivity.0 < 0.0 || self.reflectivity.1 > 1.0 {
            return Err(config_err!("profile {}: brightness and reflectivity must lie in [0, 1]", self.name));
        }
        // Keep the sensor outside every primitive.
        if self.footprint.0 <= 0.0 || self.distance.0 <= self.footprint.1 / 2f64.sqrt() {
            return Err(config_err!("profile {}: primitives could enclose the sensor", self.name));
        }
        if self.distance.1 + self.footprint.1 > self.world_radius {
            return Err(config_err!("profile {}: primitives exceed the world radius", self.name));
        }
        if !(0.0..=1.0).contains(&self.cylinder_fraction) || self.noise_sigma < 0.0 {
            return Err(config_err!("profile {}: bad cylinder fraction or noise", self.name));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, profile: &SceneProfile) -> Result<Scene> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(profile.count.0..=profile.count.1);
    let floor = -profile.ground_height.unwrap_or(0.0);
    let primitives = (0..count)
        .map(|_| {
            let kind = if rng.random::<f64>() < profile.cylinder_fraction {
                PrimitiveKind::Cylinder
            } else {
                PrimitiveKind::Box
            };
            let dist = uniform(&mut rng, profile.distance);
            let az = uniform(&mut rng, profile.azimuth).to_radians();
            let sx = uniform(&mut rng, profile.footprint);
            let sy = match kind {
                PrimitiveKind::Box => uniform(&mut rng, profile.footprint),
                PrimitiveKind::Cylinder => sx,
            };
            let h = uniform(&mut rng, profile.height);
            Primitive {
                kind,
                center: [dist * az.cos(), dist * az.sin(), floor + h / 2.0],
                size: [sx, sy, h],
                reflectivity: uniform(&mut rng, profile.reflectivity),
                radial_velocity: uniform(&mut rng, profile.velocity),
            }
        })
        .collect();
    Ok(Scene {
        ground_height: profile.ground_height,
        primitives,
        ambient_brightness: uniform(&mut rng, profile.brightness),
    })
}

/// Per-sample seed derived from a run seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits `n` samples into contiguous per-profile blocks proportional to
/// `weights` (largest remainder, ties to the earlier profile). Returns the
/// profile index of every sample.
pub fn assign_profiles(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if n == 0 || weights.is_empty() || total <= 0.0 {
        return Vec::new();
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|a, b| {
        let (ra, rb) = (exact[*a] - counts[*a] as f64, exact[*b] - counts[*b] as f64);
        rb.partial_cmp(&ra).unwrap().then(a.cmp(b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for i in order.into_iter().take(missing) {
        counts[i] += 1;
    }
    counts.iter().enumerate().flat_map(|(i, c)| std::iter::repeat_n(i, *c)).collect()
}

/// Sizes of the rendered views and the radar cube.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub camera: (usize, usize),
    pub depth: (usize, usize),
    pub radar: RadarConfig,
    pub grid: GridSpec,
}

/// Every view of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub scenario: String,
    pub seed: u64,
    pub camera: Tensor,
    pub depth: Tensor,
    pub cube: RadarCube,
    pub target: PolarRaster,
}

pub fn synthesize(profile: &SceneProfile, seed: u64, cfg: &SynthConfig) -> Result<SynthSample> {
    let scene = generate_scene(seed, profile)?;
    let (ch, cw) = cfg.camera;
    let (dh, dw) = cfg.depth;
    Ok(SynthSample {
        scenario: profile.name.clone(),
        seed,
        camera: render_camera(&scene, cw, ch),
        depth: render_depth(&scene, dw, dh),
        cube: simulate_radar(&scene, &cfg.radar, profile.noise_sigma, derive_seed(seed, u64::MAX))?,
        target: raycast_lidar(&scene, &cfg.grid)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::preprocess;

    fn unit_box(x: f64) -> Primitive {
        Primitive {
            kind: PrimitiveKind::Box,
            center: [x, 0.0, 0.0],
            size: [1.0; 3],
            reflectivity: 0.8,
            radial_velocity: 0.0,
        }
    }

    fn scene_of(primitives: Vec<Primitive>) -> Scene {
        Scene { primitives, ..Scene::empty() }
    }

    #[test]
    fn scenes_are_seeded() {
        let p = &SceneProfile::builtin()[1];
        assert_eq!(generate_scene(7, p).unwrap(), generate_scene(7, p).unwrap());
        assert_ne!(generate_scene(7, p).unwrap(), generate_scene(8, p).unwrap());
    }

    #[test]
    fn counts_stay_in_profile_range() {
        for p in SceneProfile::builtin() {
            for seed in 0..100 {
                let n = generate_scene(seed, &p).unwrap().primitives.len();
                assert!((p.count.0..=p.count.1).contains(&n));
            }
        }
    }

    #[test]
    fn zero_primitive_profile_is_ground_only() {
        let mut p = SceneProfile::builtin()[0].clone();
        p.count = (0, 0);
        let s = generate_scene(3, &p).unwrap();
        assert!(s.primitives.is_empty());
        assert_eq!(s.ground_height, Some(2.5));
    }

    #[test]
    fn primitives_stay_in_world() {
        for p in SceneProfile::builtin() {
            for seed in 0..50 {
                for prim in generate_scene(seed, &p).unwrap().primitives {
                    assert!(prim.center[0].hypot(prim.center[1]) <= p.world_radius);
                    assert!((0.0..=1.0).contains(&prim.reflectivity));
                }
            }
        }
    }

    #[test]
    fn box_on_boresight_front_face() {
        let grid = GridSpec::default();
        let r = raycast_lidar(&scene_of(vec![unit_box(10.0)]), &grid).unwrap();
        let (row, col) = grid.bin_index(0.0, 0.0).unwrap();
        assert!((r.get(row, col) - 9.5).abs() < 1e-3);
        // Bins well off the box stay empty without ground.
        let (row, col) = grid.bin_index(90.0, 0.0).unwrap();
        assert_eq!(r.get(row, col), 0.0);
    }

    #[test]
    fn empty_scene_is_dark_lidar() {
        let r = raycast_lidar(&Scene::empty(), &GridSpec::toy()).unwrap();
        assert_eq!(r.nonzero(), 0);
    }

    #[test]
    fn ground_distance_closed_form() {
        let grid = GridSpec::toy();
        let h = 2.5;
        let scene = Scene { ground_height: Some(h), ..Scene::empty() };
        let r = raycast_lidar(&scene, &grid).unwrap();
        for row in 0..grid.n_rows() {
            let phi = grid.phi_center(row);
            let want = if phi < 0.0 { h / (-phi).to_radians().sin() } else { f64::INFINITY };
            let got = r.get(row, 17) as f64;
            if want <= grid.max_range as f64 {
                assert!((got - want).abs() < 1e-4 * want, "row {row}: {got} vs {want}");
            } else {
                assert_eq!(got, 0.0);
            }
        }
    }

    #[test]
    fn cylinder_side_and_cap() {
        let c = Primitive {
            kind: PrimitiveKind::Cylinder,
            center: [10.0, 0.0, 0.0],
            size: [2.0, 2.0, 4.0],
            reflectivity: 1.0,
            radial_velocity: 0.0,
        };
        assert!((intersect_cylinder(&c, [1.0, 0.0, 0.0]).unwrap() - 9.0).abs() < 1e-12);
        // Straight up from below: the bottom cap of a cylinder centered above.
        let above = Primitive { center: [0.0, 0.0, 5.0], ..c.clone() };
        assert!((intersect_cylinder(&above, [0.0, 0.0, 1.0]).unwrap() - 3.0).abs() < 1e-12);
        assert!(intersect_cylinder(&c, [0.0, 1.0, 0.0]).is_none());
    }

    #[test]
    fn camera_contracts() {
        let empty = render_camera(&Scene::empty(), 16, 12);
        assert_eq!(empty.shape(), &[1, 12, 16]);
        assert!(empty.data().iter().all(|v| *v == empty.data()[0]));
        let dark = Scene { ambient_brightness: 0.0, ..scene_of(vec![unit_box(5.0)]) };
        assert!(render_camera(&dark, 16, 12).data().iter().all(|v| *v == 0.0));

        let near = render_camera(&scene_of(vec![unit_box(5.0)]), 33, 33);
        let far = render_camera(&scene_of(vec![unit_box(15.0)]), 33, 33);
        let center = 16 * 33 + 16;
        assert!(near.data()[center] > far.data()[center]);
    }

    #[test]
    fn depth_contracts() {
        assert!(render_depth(&Scene::empty(), 8, 8).data().iter().all(|v| *v == 0.0));
        let wall = |x: f64| Primitive {
            kind: PrimitiveKind::Box,
            center: [x + 0.5, 0.0, 0.0],
            size: [1.0, 1000.0, 1000.0],
            reflectivity: 0.5,
            radial_velocity: 0.0,
        };
        let d10 = render_depth(&scene_of(vec![wall(10.0)]), 16, 16);
        for v in d10.data() {
            assert!((v - 0.1).abs() < 1e-6);
        }
        let d5 = render_depth(&scene_of(vec![wall(5.0)]), 16, 16);
        assert!(d5.data().iter().zip(d10.data()).all(|(a, b)| a > b));
    }

    #[test]
    fn lidar_and_depth_agree() {
        let grid = GridSpec::toy();
        let mut b = unit_box(8.0);
        b.center = [8.0, 1.0, 0.3];
        b.size = [1.0, 2.0, 2.0];
        let scene = scene_of(vec![b]);
        let lidar = raycast_lidar(&scene, &grid).unwrap();
        let (w, h) = (64, 64);
        let depth = render_depth(&scene, w, h);
        let mut checked = 0;
        for row in 0..grid.n_rows() {
            for col in 0..grid.n_cols() {
                let r = lidar.get(row, col) as f64;
                if r == 0.0 {
                    continue;
                }
                let (x, y, z) = from_spherical(r, grid.theta_center(col), grid.phi_center(row));
                let Some((u, v)) = project([x, y, z], w, h) else { continue };
                let got = depth.data()[v * w + u] as f64;
                // Pixel quantization only moves the hit along the same face.
                if (got - 1.0 / x).abs() < 0.02 / x {
                    checked += 1;
                } else {
                    // Silhouette edges may land on the background.
                    assert!(got == 0.0 || (got - 1.0 / x).abs() < 0.2 / x, "({row},{col})");
                }
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn radar_static_target_peak() {
        let cfg = RadarConfig::toy();
        let mut p = unit_box(cfg.r_max / 4.0);
        p.center = [cfg.r_max / 4.0, 0.0, 0.0];
        let scene = scene_of(vec![p]);
        assert!(simulate_radar(&Scene::empty(), &cfg, 0.0, 1).unwrap().data().iter().all(|c| c.norm() == 0.0));
        let cube = simulate_radar(&scene, &cfg, 0.0, 1).unwrap();
        let (ra, rv) = preprocess(&cube);
        assert_eq!(ra.argmax(), (cfg.n_rx / 2, cfg.n_samples / 4));
        assert_eq!(rv.argmax(), (cfg.n_chirps / 2, cfg.n_samples / 4));
    }

    #[test]
    fn radar_two_targets() {
        let cfg = RadarConfig::toy();
        let at = |r: f64, az_deg: f64, v: f64| {
            let az = az_deg.to_radians();
            Primitive { center: [r * az.cos(), r * az.sin(), 0.0], radial_velocity: v, ..unit_box(1.0) }
        };
        // f_a = 0.5 sin(30) = 0.25 -> angle bin 2 of 8 before shifting.
        let a = at(25.0, 30.0, 5.0);
        let b = at(62.5, 0.0, 0.0);
        let cube = simulate_radar(&scene_of(vec![a, b]), &cfg, 0.0, 0).unwrap();
        let (ra, rv) = preprocess(&cube);
        let peak = |m: &crate::radar::RadarMap, r: usize, c: usize| {
            let v = m.get(r, c);
            (0..m.rows).all(|i| (0..m.cols).all(|j| (i.abs_diff(r) > 1 || j.abs_diff(c) > 1) || m.get(i, j) <= v))
        };
        assert!(peak(&ra, 2 + 4, 16));
        assert!(peak(&ra, 4, 40));
        // f_v = 5 / 20 = 0.25 -> velocity bin 8 of 32 before shifting.
        assert!(peak(&rv, 8 + 16, 16));
        assert!(peak(&rv, 16, 40));
    }

    #[test]
    fn radar_noise_is_seeded() {
        let cfg = RadarConfig::toy();
        let a = simulate_radar(&Scene::empty(), &cfg, 0.1, 4).unwrap();
        assert_eq!(a, simulate_radar(&Scene::empty(), &cfg, 0.1, 4).unwrap());
        assert_ne!(a, simulate_radar(&Scene::empty(), &cfg, 0.1, 5).unwrap());
        let power: f64 = a.data().iter().map(|c| c.norm_sqr() as f64).sum::<f64>() / a.data().len() as f64;
        assert!((power - 0.01).abs() < 0.001);
    }

    #[test]
    fn profile_assignment_blocks() {
        assert_eq!(assign_profiles(10, &[1.0; 4]), vec![0, 0, 0, 1, 1, 1, 2, 2, 3, 3]);
        let a = assign_profiles(50, &[1.0; 4]);
        let counts: Vec<usize> = (0..4).map(|i| a.iter().filter(|p| **p == i).count()).collect();
        assert_eq!(counts, vec![13, 13, 12, 12]);
        assert!(assign_profiles(0, &[1.0; 4]).is_empty());
    }

    #[test]
    fn derived_seeds_distinct() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..1000 {
            assert!(seen.insert(derive_seed(42, i)));
        }
    }
}
