//! Analytic RGBT scenes, a reference renderer for them, voxelization into a
//! field, and synthetic dataset generation.
//!
//! Primitives carry constant per-spectrum densities and emissions. Where
//! primitives overlap densities add and the emission of each spectrum is the
//! density-weighted mean over the primitives present.

use crate::dataset::{Dataset, DatasetError, DatasetMeta, Frame, Split, ThermalNormalization};
use crate::field::{logit, softplus_inverse, Coupling, FieldError, MultispectralField};
use crate::geometry::{pixel_center_ray, Camera, Intrinsics, Pose, Ray, Spectrum, Vec3};
use crate::image::{Image, RgbtImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown scene `{0}`")]
    UnknownScene(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
    /// `{x : lo ≤ n·x ≤ hi}` with unit `normal`.
    Slab { normal: Vec3, lo: f64, hi: f64 },
}

impl Shape {
    pub fn contains(&self, x: &Vec3) -> bool {
        match self {
            Shape::Sphere { center, radius } => (x - center).norm_squared() <= radius * radius,
            Shape::Box { min, max } => (0..3).all(|a| x[a] >= min[a] && x[a] <= max[a]),
            Shape::Slab { normal, lo, hi } => {
                let d = normal.dot(x);
                d >= *lo && d <= *hi
            }
        }
    }

    /// Signed distance (negative inside).
    pub fn sdf(&self, x: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (x - center).norm() - radius,
            Shape::Box { min, max } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let q = (x - c).abs() - h;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Shape::Slab { normal, lo, hi } => {
                let d = normal.dot(x);
                (lo - d).max(d - hi)
            }
        }
    }

    /// Parameter interval where the ray is inside, unclipped.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let o = ray.origin;
        let d = *ray.direction();
        match self {
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let b = oc.dot(&d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::Box { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                (t0 < t1).then_some((t0, t1))
            }
            Shape::Slab { normal, lo, hi } => {
                let dn = normal.dot(&d);
                let on = normal.dot(&o);
                if dn.abs() < 1e-15 {
                    return (on >= *lo && on <= *hi).then_some((f64::NEG_INFINITY, f64::INFINITY));
                }
                let (mut ta, mut tb) = ((lo - on) / dn, (hi - on) / dn);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                Some((ta, tb))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub sigma_rgb: f64,
    pub sigma_therm: f64,
    pub emission_rgb: [f64; 3],
    pub emission_therm: f64,
}

impl Primitive {
    pub fn new(shape: Shape, sigma_rgb: f64, sigma_therm: f64, emission_rgb: [f64; 3], emission_therm: f64) -> Self {
        Self {
            shape,
            sigma_rgb,
            sigma_therm,
            emission_rgb,
            emission_therm,
        }
    }

    pub fn sigma(&self, s: Spectrum) -> f64 {
        match s {
            Spectrum::Rgb => self.sigma_rgb,
            Spectrum::Thermal => self.sigma_therm,
        }
    }

    pub fn emission(&self, s: Spectrum) -> [f64; 3] {
        match s {
            Spectrum::Rgb => self.emission_rgb,
            Spectrum::Thermal => [self.emission_therm, 0.0, 0.0],
        }
    }
}

/// Point sample of an analytic scene in one spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MediumSample {
    pub sigma: f64,
    pub emission: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
}

impl AnalyticScene {
    pub fn new(name: impl Into<String>, bbox_min: Vec3, bbox_max: Vec3) -> Self {
        Self {
            name: name.into(),
            primitives: Vec::new(),
            bbox_min,
            bbox_max,
        }
    }

    pub fn with(mut self, p: Primitive) -> Self {
        self.primitives.push(p);
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (i, p) in self.primitives.iter().enumerate() {
            let emissions = p.emission_rgb.iter().chain(std::iter::once(&p.emission_therm));
            if p.sigma_rgb < 0.0 || p.sigma_therm < 0.0 || emissions.clone().any(|e| !(0.0..=1.0).contains(e)) {
                return Err(SynthError::InvalidSpec(format!("primitive {i} of `{}` out of range", self.name)));
            }
        }
        Ok(())
    }

    pub fn diameter(&self) -> f64 {
        (self.bbox_max - self.bbox_min).norm()
    }

    pub fn sample(&self, x: &Vec3, s: Spectrum) -> MediumSample {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for p in &self.primitives {
            let ps = p.sigma(s);
            if ps > 0.0 && p.shape.contains(x) {
                sigma += ps;
                let e = p.emission(s);
                for c in 0..3 {
                    acc[c] += ps * e[c];
                }
            }
        }
        let emission = if sigma > 0.0 { acc.map(|a| a / sigma) } else { [0.0; 3] };
        MediumSample { sigma, emission }
    }

    /// Density after the reveal mask `1(|σ_rgb - σ_therm| < ε)`.
    pub fn revealed_sigma(&self, x: &Vec3, s: Spectrum, epsilon: f64) -> f64 {
        let r = self.sample(x, Spectrum::Rgb).sigma;
        let t = self.sample(x, Spectrum::Thermal).sigma;
        if (r - t).abs() < epsilon {
            if s == Spectrum::Rgb {
                r
            } else {
                t
            }
        } else {
            0.0
        }
    }

    /// Emission of the nearest primitive that is dense in `s`; used to fill empty voxels.
    fn nearest_emission(&self, x: &Vec3, s: Spectrum) -> [f64; 3] {
        self.primitives
            .iter()
            .filter(|p| p.sigma(s) > 0.0)
            .map(|p| (p.shape.sdf(x), p.emission(s)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, e)| e)
            .unwrap_or([0.5; 3])
    }
}

/// Composited color and opacity of one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSample {
    pub color: [f64; 3],
    pub opacity: f64,
}

/// Reference integral along `ray` in fixed steps of `step`, each step split at
/// primitive boundaries so piecewise-constant media integrate exactly.
pub fn oracle_ray(scene: &AnalyticScene, ray: &Ray, s: Spectrum, step: f64, reveal: Option<f64>) -> OracleSample {
    assert!(step > 0.0, "oracle step must be positive");
    let Some(ray) = ray.clip_to_box(&scene.bbox_min, &scene.bbox_max) else {
        return OracleSample {
            color: [0.0; 3],
            opacity: 0.0,
        };
    };
    let mut breaks: Vec<f64> = scene
        .primitives
        .iter()
        .filter(|p| p.sigma(s) > 0.0 || reveal.is_some())
        .filter_map(|p| p.shape.intersect(&ray))
        .flat_map(|(a, b)| [a, b])
        .filter(|t| *t > ray.t_near && *t < ray.t_far)
        .collect();
    breaks.sort_by(f64::total_cmp);
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut t = ray.t_near;
    let mut next_break = 0;
    while t < ray.t_far && transmittance > 1e-12 {
        let step_end = (t + step).min(ray.t_far);
        while t < step_end {
            while next_break < breaks.len() && breaks[next_break] <= t {
                next_break += 1;
            }
            let end = match breaks.get(next_break) {
                Some(&b) if b < step_end => b,
                _ => step_end,
            };
            let mid = ray.point_at(0.5 * (t + end));
            let m = scene.sample(&mid, s);
            let sigma = match reveal {
                Some(eps) => scene.revealed_sigma(&mid, s, eps),
                None => m.sigma,
            };
            if sigma > 0.0 {
                let alpha = 1.0 - (-sigma * (end - t)).exp();
                let w = transmittance * alpha;
                for c in 0..3 {
                    color[c] += w * m.emission[c];
                }
                transmittance *= 1.0 - alpha;
            }
            t = end;
        }
    }
    OracleSample {
        color,
        opacity: 1.0 - transmittance,
    }
}

/// Default oracle step: a thousandth of the scene diagonal.
pub fn default_step(scene: &AnalyticScene) -> f64 {
    1e-3 * scene.diameter()
}

/// Both spectra at the camera's resolution, plus per-spectrum opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView {
    pub image: RgbtImage,
    pub opacity_rgb: Image,
    pub opacity_therm: Image,
}

impl OracleView {
    pub fn opacity(&self, s: Spectrum) -> &Image {
        match s {
            Spectrum::Rgb => &self.opacity_rgb,
            Spectrum::Thermal => &self.opacity_therm,
        }
    }
}

fn oracle_view(scene: &AnalyticScene, camera: &Camera, step: f64, reveal: Option<f64>) -> OracleView {
    let (w, h) = (camera.width() as usize, camera.height() as usize);
    let px: Vec<[OracleSample; 2]> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = pixel_center_ray(camera, (i % w) as f64, (i / w) as f64)
                .expect("pixel ray")
                .with_bounds(0.0, f64::INFINITY);
            Spectrum::ALL.map(|s| oracle_ray(scene, &ray, s, step, reveal))
        })
        .collect();
    let mut image = RgbtImage::new(w, h);
    image.valid = [true; 4];
    let mut opacity_rgb = Image::new(w, h, 1);
    let mut opacity_therm = Image::new(w, h, 1);
    for (i, [rgb, th]) in px.iter().enumerate() {
        for c in 0..3 {
            image.pixels.data[4 * i + c] = rgb.color[c] as f32;
        }
        image.pixels.data[4 * i + 3] = th.color[0] as f32;
        opacity_rgb.data[i] = rgb.opacity as f32;
        opacity_therm.data[i] = th.opacity as f32;
    }
    OracleView {
        image,
        opacity_rgb,
        opacity_therm,
    }
}

/// Reference render of both spectra from `camera`'s pose at its resolution.
pub fn oracle_render(scene: &AnalyticScene, camera: &Camera, step: f64) -> OracleView {
    oracle_view(scene, camera, step, None)
}

/// Reference render with the analytic densities passed through the reveal mask.
pub fn oracle_render_revealed(scene: &AnalyticScene, camera: &Camera, step: f64, epsilon: f64) -> OracleView {
    oracle_view(scene, camera, step, Some(epsilon))
}

/// Density floor used when voxelizing empty space; softplus⁻¹ of 0 is -∞.
pub const VOXEL_DENSITY_FLOOR: f64 = 1e-6;

/// Samples the scene at every grid point and stores raw values that invert
/// the field's activations. Empty points take the emission of the nearest
/// primitive so that interpolation across a surface keeps its color.
pub fn voxelize(scene: &AnalyticScene, resolution: [usize; 3], coupling: Coupling) -> Result<MultispectralField, SynthError> {
    let mut field = MultispectralField::new(scene.bbox_min, scene.bbox_max, resolution, coupling)?;
    let layout = field.layout();
    let [nx, ny, _] = resolution;
    let values: Vec<(f64, f64, [f64; 3], f64)> = (0..field.num_points())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            let x = field.point_position(i, j, k);
            let rgb = scene.sample(&x, Spectrum::Rgb);
            let th = scene.sample(&x, Spectrum::Thermal);
            let c_rgb = if rgb.sigma > 0.0 { rgb.emission } else { scene.nearest_emission(&x, Spectrum::Rgb) };
            let c_th = if th.sigma > 0.0 { th.emission[0] } else { scene.nearest_emission(&x, Spectrum::Thermal)[0] };
            let raw = |s: f64| softplus_inverse(s.max(VOXEL_DENSITY_FLOOR));
            let (sr, st) = if coupling == Coupling::Shared {
                let m = raw(0.5 * (rgb.sigma + th.sigma));
                (m, m)
            } else {
                (raw(rgb.sigma), raw(th.sigma))
            };
            let col = |c: f64| logit(c.clamp(1e-4, 1.0 - 1e-4));
            (sr, st, c_rgb.map(col), col(c_th))
        })
        .collect();
    for (idx, (sr, st, crgb, cth)) in values.into_iter().enumerate() {
        field.grid_mut(layout.sigma_rgb).data[idx] = sr as f32;
        if layout.sigma_therm != layout.sigma_rgb {
            field.grid_mut(layout.sigma_therm).data[idx] = st as f32;
        }
        for c in 0..3 {
            field.grid_mut(layout.color_rgb).data[3 * idx + c] = crgb[c] as f32;
        }
        field.grid_mut(layout.color_therm).data[idx] = cth as f32;
    }
    Ok(field)
}

// Built-in scenes. All share the cube [-0.6, 0.6]³, z up.

fn cube_scene(name: &str) -> AnalyticScene {
    AnalyticScene::new(name, Vec3::repeat(-0.6), Vec3::repeat(0.6))
}

fn aabb(min: [f64; 3], max: [f64; 3]) -> Shape {
    Shape::Box {
        min: Vec3::from(min),
        max: Vec3::from(max),
    }
}

/// Two materials that disagree across spectra: a visibly opaque, thermally
/// transparent shell around a hot core, and a glass pane that is visibly
/// transparent but thermally opaque.
pub fn dualmat() -> AnalyticScene {
    let center = Vec3::new(0.0, 0.1, 0.0);
    cube_scene("dualmat")
        .with(Primitive::new(Shape::Sphere { center, radius: 0.3 }, 60.0, 0.0, [0.2, 0.35, 0.85], 0.0))
        // Densities add: inside the core both spectra see 60.
        .with(Primitive::new(Shape::Sphere { center, radius: 0.16 }, 0.0, 60.0, [0.0; 3], 0.95))
        .with(Primitive::new(aabb([-0.45, -0.38, -0.4], [0.45, -0.32, 0.3]), 0.0, 120.0, [0.0; 3], 0.35))
        .with(Primitive::new(aabb([-0.5, -0.5, -0.5], [0.5, 0.5, -0.4]), 60.0, 60.0, [0.55, 0.45, 0.35], 0.3))
}

/// Visibly opaque, thermally transparent sheet in front of a hot sphere, on a floor.
pub fn curtain() -> AnalyticScene {
    cube_scene("curtain")
        .with(Primitive::new(
            Shape::Sphere {
                center: Vec3::new(0.0, 0.18, -0.1),
                radius: 0.24,
            },
            60.0,
            60.0,
            [0.6, 0.6, 0.65],
            0.95,
        ))
        .with(Primitive::new(aabb([-0.45, -0.2, -0.45], [0.45, -0.14, 0.35]), 80.0, 0.0, [0.85, 0.82, 0.78], 0.0))
        // A warm floor behind the sheet makes its thermal transparency observable
        // away from the sphere; against a black background an opaque sheet with
        // zero emission would render identically.
        .with(Primitive::new(aabb([-0.55, -0.55, -0.55], [0.55, 0.55, -0.45]), 60.0, 60.0, [0.4, 0.42, 0.45], 0.35))
}

/// Bar of alternating segments whose thermal values follow the visible shade,
/// standing on a plate.
pub fn hotbar() -> AnalyticScene {
    let mut scene = cube_scene("hotbar").with(Primitive::new(
        aabb([-0.55, -0.35, -0.5], [0.55, 0.35, -0.42]),
        60.0,
        60.0,
        [0.3, 0.3, 0.3],
        0.2,
    ));
    let segments = 16;
    let len = 0.06;
    let x0 = -0.5 * len * segments as f64;
    for i in 0..segments {
        let (shade, heat) = if i % 2 == 0 { (0.85, 0.95) } else { (0.45, 0.6) };
        let xa = x0 + i as f64 * len;
        scene = scene.with(Primitive::new(
            aabb([xa, -0.1, -0.42], [xa + len, 0.1, -0.2]),
            60.0,
            60.0,
            [shade, shade * 0.9, shade * 0.8],
            heat,
        ));
    }
    scene
}

/// Identical densities in both spectra.
pub fn plainbox() -> AnalyticScene {
    cube_scene("plainbox")
        .with(Primitive::new(aabb([-0.25, -0.25, -0.5], [0.25, 0.25, 0.0]), 60.0, 60.0, [0.7, 0.3, 0.2], 0.7))
        .with(Primitive::new(
            Shape::Sphere {
                center: Vec3::new(0.0, 0.0, 0.2),
                radius: 0.2,
            },
            60.0,
            60.0,
            [0.2, 0.6, 0.3],
            0.4,
        ))
}

/// Scene constructors looked up by name.
pub struct SceneRegistry {
    entries: BTreeMap<&'static str, fn() -> AnalyticScene>,
}

impl SceneRegistry {
    pub fn with_builtins() -> Self {
        let mut entries: BTreeMap<&'static str, fn() -> AnalyticScene> = BTreeMap::new();
        entries.insert("dualmat", dualmat);
        entries.insert("curtain", curtain);
        entries.insert("hotbar", hotbar);
        entries.insert("plainbox", plainbox);
        Self { entries }
    }

    pub fn register(&mut self, name: &'static str, build: fn() -> AnalyticScene) {
        self.entries.insert(name, build);
    }

    pub fn build(&self, name: &str) -> Result<AnalyticScene, SynthError> {
        self.entries
            .get(name)
            .map(|f| f())
            .ok_or_else(|| SynthError::UnknownScene(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

impl Default for SceneRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: String,
    pub n_train: usize,
    pub n_test: usize,
    pub rgb_width: u32,
    pub rgb_height: u32,
    /// Thermal frames are `1/thermal_downscale` the RGB resolution per side.
    pub thermal_downscale: u32,
    /// Focal length in units of the RGB width.
    pub focal_factor: f64,
    pub orbit_radius: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(scene: &str) -> Self {
        Self {
            scene: scene.to_string(),
            n_train: 45,
            n_test: 5,
            rgb_width: 96,
            rgb_height: 96,
            thermal_downscale: if scene == "hotbar" { 4 } else { 2 },
            focal_factor: 1.35,
            orbit_radius: 2.0,
            elevation_min_deg: 15.0,
            elevation_max_deg: 60.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be at least 1");
        }
        if self.thermal_downscale == 0
            || self.rgb_width % self.thermal_downscale != 0
            || self.rgb_height % self.thermal_downscale != 0
        {
            return bad("thermal downscale must divide the RGB resolution");
        }
        if !(self.orbit_radius > 0.0 && self.focal_factor > 0.0) {
            return bad("orbit radius and focal factor must be positive");
        }
        if !(self.elevation_min_deg <= self.elevation_max_deg) {
            return bad("elevation range is empty");
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.n_train + self.n_test
    }

    /// Views `i` with `i % stride == stride / 2` are held out, `stride = n_views / n_test`.
    pub fn split_of(&self, view: usize) -> Split {
        let stride = (self.n_views() / self.n_test).max(1);
        let test_slots = (0..self.n_views()).filter(|v| v % stride == stride / 2).take(self.n_test);
        if test_slots.clone().any(|v| v == view) {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn rgb_intrinsics(&self) -> Intrinsics {
        let f = self.focal_factor * self.rgb_width as f64;
        Intrinsics::pinhole(
            f,
            f,
            0.5 * self.rgb_width as f64,
            0.5 * self.rgb_height as f64,
            self.rgb_width,
            self.rgb_height,
        )
    }

    /// Orbit poses looking at the scene center: golden-angle azimuths with
    /// seeded jitter, elevations uniform in the configured range.
    pub fn poses(&self, target: &Vec3) -> Vec<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..self.n_views())
            .map(|i| {
                let az = i as f64 * golden + rng.gen_range(-0.1..0.1);
                let el = rng
                    .gen_range(self.elevation_min_deg..=self.elevation_max_deg)
                    .to_radians();
                let eye = target
                    + self.orbit_radius * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                Pose::look_at(&eye, target, &Vec3::z())
            })
            .collect()
    }
}

/// Renders every view pair of `spec` in memory. RGB values are quantized to
/// 8 bits so the in-memory dataset equals what [`Dataset::load`] returns.
pub fn synthesize(spec: &DatasetSpec, scenes: &SceneRegistry) -> Result<(Dataset, AnalyticScene), SynthError> {
    spec.validate()?;
    let scene = scenes.build(&spec.scene)?;
    scene.validate()?;
    let step = default_step(&scene);
    let center = (scene.bbox_min + scene.bbox_max) * 0.5;
    let k_rgb = spec.rgb_intrinsics();
    let k_therm = k_rgb.downscaled(spec.thermal_downscale);
    let mut frames = Vec::with_capacity(2 * spec.n_views());
    for (i, pose) in spec.poses(&center).into_iter().enumerate() {
        let split = spec.split_of(i);
        let rgb_cam = Camera::new(k_rgb, pose, Spectrum::Rgb);
        let hires_cam = Camera::new(k_rgb, pose, Spectrum::Thermal);
        let view = oracle_render(&scene, &rgb_cam, step);
        let rgb = view.image.rgb().quantized_u8();
        let hires = view.image.thermal();
        let low = hires.box_downsample(spec.thermal_downscale as usize);
        frames.push(Frame::new(format!("rgb_{i:03}"), rgb_cam, split, i as u32, rgb));
        frames.push(
            Frame::new(
                format!("thermal_{i:03}"),
                Camera::new(k_therm, pose, Spectrum::Thermal),
                split,
                i as u32,
                low,
            )
            .with_hires(hires_cam, hires),
        );
    }
    let meta = DatasetMeta {
        scene: spec.scene.clone(),
        seed: spec.seed,
        bbox_min: scene.bbox_min.into(),
        bbox_max: scene.bbox_max.into(),
        thermal_normalization: ThermalNormalization::default(),
    };
    Ok((Dataset { meta, frames }, scene))
}

/// [`synthesize`] and write the result under `out`.
pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> Result<Dataset, SynthError> {
    let (ds, _) = synthesize(spec, &SceneRegistry::with_builtins())?;
    ds.save(out)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::{render_image, ImageChannels, RenderSettings};

    fn small_camera(w: u32) -> Camera {
        let k = Intrinsics::pinhole(1.35 * w as f64, 1.35 * w as f64, 0.5 * w as f64, 0.5 * w as f64, w, w);
        Camera::new(k, Pose::look_at(&Vec3::new(1.6, -0.9, 1.0), &Vec3::zeros(), &Vec3::z()), Spectrum::Rgb)
    }

    #[test]
    fn empty_scene_is_black() {
        let scene = cube_scene("empty");
        let v = oracle_render(&scene, &small_camera(12), default_step(&scene));
        assert!(v.image.pixels.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn slab_matches_beer_lambert() {
        let scene = AnalyticScene::new("slab", Vec3::repeat(-5.0), Vec3::repeat(5.0)).with(Primitive::new(
            Shape::Slab {
                normal: Vec3::z(),
                lo: 0.0,
                hi: 1.0,
            },
            2.0,
            2.0,
            [0.8; 3],
            0.8,
        ));
        let ray = Ray::new(Vec3::new(0.1, 0.2, -2.0), Vec3::z(), 0.0, f64::INFINITY);
        for step in [1e-3, 0.37, 3.0] {
            let o = oracle_ray(&scene, &ray, Spectrum::Thermal, step, None);
            assert!((o.color[0] - 0.8 * (1.0 - (-2.0f64).exp())).abs() < 1e-4, "step {step}");
        }
    }

    #[test]
    fn halving_the_step_converges() {
        for name in ["dualmat", "curtain"] {
            let scene = SceneRegistry::with_builtins().build(name).unwrap();
            let cam = small_camera(24);
            let a = oracle_render(&scene, &cam, default_step(&scene));
            let b = oracle_render(&scene, &cam, 0.5 * default_step(&scene));
            let mae = a
                .image
                .pixels
                .data
                .iter()
                .zip(&b.image.pixels.data)
                .map(|(x, y)| (x - y).abs() as f64)
                .sum::<f64>()
                / a.image.pixels.data.len() as f64;
            assert!(mae < 1e-4, "{name}: {mae}");
        }
    }

    #[test]
    fn dual_material_channels_differ() {
        let scene = dualmat();
        let step = default_step(&scene);
        let probe = |x: f64, from_front: bool, s: Spectrum, reveal: Option<f64>| {
            let (origin, dir) = if from_front {
                (Vec3::new(x, -3.0, 0.0), Vec3::y())
            } else {
                (Vec3::new(x, 3.0, 0.0), -Vec3::y())
            };
            oracle_ray(&scene, &Ray::new(origin, dir, 0.0, f64::INFINITY), s, step, reveal)
        };
        // Through the pane: RGB sees the blue shell, thermal stops at the pane.
        let rgb = probe(0.0, true, Spectrum::Rgb, None);
        assert!((rgb.color[2] - 0.85).abs() < 1e-3 && (rgb.color[0] - 0.2).abs() < 1e-3);
        assert!((probe(0.0, true, Spectrum::Thermal, None).color[0] - 0.35).abs() < 1e-3);
        // From behind: thermal sees the hot core through the shell.
        assert!((probe(0.0, false, Spectrum::Thermal, None).color[0] - 0.95).abs() < 1e-3);
        assert!((probe(0.25, false, Spectrum::Thermal, None).color[0] - 0.35).abs() < 1e-3);
        // Revealing removes pane and shell in either spectrum and keeps the core.
        for s in Spectrum::ALL {
            assert!(probe(0.0, true, s, Some(1.0)).opacity > 0.999);
            assert!(probe(0.25, true, s, Some(1.0)).opacity < 1e-9);
        }
    }

    #[test]
    fn editing_thermal_density_leaves_rgb_bit_identical() {
        let scene = curtain();
        let mut edited = scene.clone();
        edited.primitives[0].sigma_therm = 3.0;
        let cam = small_camera(16);
        let a = oracle_render(&scene, &cam, default_step(&scene));
        let b = oracle_render(&edited, &cam, default_step(&scene));
        assert_eq!(a.image.rgb(), b.image.rgb());
        assert_ne!(a.image.thermal(), b.image.thermal());
    }

    #[test]
    fn voxelized_field_matches_oracle_at_moderate_resolution() {
        let scene = plainbox();
        let field = voxelize(&scene, [96; 3], Coupling::Separate).unwrap();
        let cam = small_camera(32);
        let oracle = oracle_render(&scene, &cam, default_step(&scene));
        let settings = RenderSettings {
            n_samples: 256,
            channels: ImageChannels::All,
            ..Default::default()
        };
        let ours = render_image(&field, &cam, &settings);
        let mae = ours
            .image
            .pixels
            .data
            .iter()
            .zip(&oracle.image.pixels.data)
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / ours.image.pixels.data.len() as f64;
        assert!(mae < 2e-2, "{mae}");
    }

    #[test]
    fn split_and_registry() {
        let spec = DatasetSpec::new("dualmat");
        let tests: Vec<usize> = (0..50).filter(|&v| spec.split_of(v) == Split::Test).collect();
        assert_eq!(tests, [5, 15, 25, 35, 45]);
        let reg = SceneRegistry::with_builtins();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["curtain", "dualmat", "hotbar", "plainbox"]);
        assert!(matches!(reg.build("nope"), Err(SynthError::UnknownScene(_))));
        for name in reg.names() {
            reg.build(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn tiny_dataset_is_deterministic_and_downsampled() {
        let spec = DatasetSpec {
            n_train: 3,
            n_test: 1,
            rgb_width: 16,
            rgb_height: 16,
            thermal_downscale: 4,
            ..DatasetSpec::new("hotbar")
        };
        let reg = SceneRegistry::with_builtins();
        let (a, _) = synthesize(&spec, &reg).unwrap();
        let (b, _) = synthesize(&spec, &reg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.len(), 8);
        for f in a.frames.iter().filter(|f| f.spectrum() == Spectrum::Thermal) {
            let (_, hi) = f.hires.as_ref().unwrap();
            assert_eq!(f.image, hi.box_downsample(4));
            assert_eq!((f.image.width, f.image.height), (4, 4));
        }
    }
}
