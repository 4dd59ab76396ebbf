//! Volumetric rendering of the multispectral field.
//!
//! Each spectrum is composited with its own density:
//! `w_i = T_i (1 - exp(-σ_i δ_i))`, `T_i = exp(-Σ_{j<i} σ_j δ_j)`, color
//! `Σ w_i c_i` over a black background. Samples are stratified, one jittered
//! sample per bin, and marching stops once transmittance drops below
//! [`EARLY_STOP_TRANSMITTANCE`].

use crate::field::{FieldGrad, MultispectralField};
use crate::geometry::{pixel_center_ray, Camera, Ray, Spectrum, Vec3};
use crate::image::{Image, RgbtImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub const EARLY_STOP_TRANSMITTANCE: f64 = 1e-4;
const DEPTH_OPACITY_GUARD: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("cache mismatch: {0}")]
    CacheMismatch(String),
}

/// One quadrature sample kept for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub t: f64,
    pub delta: f64,
    pub weight: f64,
    /// Transmittance after this sample, `T_{i+1}`.
    pub transmittance_after: f64,
    pub sigma: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub spectrum: Spectrum,
    /// Only the first `spectrum.channels()` entries are meaningful.
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub n_samples: usize,
    pub ray: Ray,
    pub samples: Vec<SampleRecord>,
}

impl RenderResult {
    pub fn empty(ray: Ray, spectrum: Spectrum, n_samples: usize) -> Self {
        Self {
            spectrum,
            color: [0.0; 3],
            opacity: 0.0,
            depth: 0.0,
            n_samples,
            ray,
            samples: Vec::new(),
        }
    }

    pub fn color_slice(&self) -> &[f64] {
        &self.color[..self.spectrum.channels()]
    }

    /// `T` after the last processed sample.
    pub fn residual_transmittance(&self) -> f64 {
        self.samples.last().map_or(1.0, |s| s.transmittance_after)
    }

    pub fn weight_sum(&self) -> f64 {
        self.samples.iter().map(|s| s.weight).sum()
    }
}

/// Stratified sample positions: one uniform jitter per bin.
pub fn stratified_samples(t_near: f64, t_far: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bin = (t_far - t_near) / n as f64;
    (0..n).map(|i| t_near + (i as f64 + rng.gen::<f64>()) * bin).collect()
}

fn march(
    field: &MultispectralField,
    ray: &Ray,
    spectrum: Spectrum,
    n_samples: usize,
    rng: &mut impl Rng,
    reveal_epsilon: Option<f64>,
    keep_cache: bool,
) -> RenderResult {
    assert!(n_samples >= 2, "need at least two samples per ray");
    let mut result = RenderResult::empty(*ray, spectrum, n_samples);
    if !(ray.t_near < ray.t_far) || !ray.t_far.is_finite() {
        return result;
    }
    let ts = stratified_samples(ray.t_near, ray.t_far, n_samples, rng);
    if keep_cache {
        result.samples.reserve(n_samples);
    }
    let channels = spectrum.channels();
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut depth_acc = 0.0;
    let mut last = None;
    for i in 0..n_samples {
        let t = ts[i];
        let next = if i + 1 < n_samples { ts[i + 1] } else { ray.t_far };
        let delta = next - t;
        let x = ray.point_at(t);
        let (sigma, c) = match field.stencil(&x) {
            None => (0.0, [0.5; 3]),
            Some(st) => {
                let s = field.sample_spectrum(&st, spectrum);
                let mut sigma = s.sigma;
                if let Some(eps) = reveal_epsilon {
                    let (sr, sth) = field.sample_densities(&st);
                    if (sr - sth).abs() >= eps {
                        sigma = 0.0;
                    }
                }
                (sigma, s.color)
            }
        };
        let alpha = 1.0 - (-sigma * delta).exp();
        let weight = transmittance * alpha;
        let after = transmittance * (1.0 - alpha);
        for ch in 0..channels {
            color[ch] += weight * c[ch];
        }
        depth_acc += weight * t;
        if keep_cache {
            result.samples.push(SampleRecord {
                t,
                delta,
                weight,
                transmittance_after: after,
                sigma,
                color: c,
            });
        }
        transmittance = after;
        last = Some(after);
        if transmittance < EARLY_STOP_TRANSMITTANCE {
            break;
        }
    }
    let residual = last.unwrap_or(1.0);
    result.color = color;
    result.opacity = (1.0 - residual).clamp(0.0, 1.0);
    result.depth = depth_acc / result.opacity.max(DEPTH_OPACITY_GUARD);
    result
}

/// Renders one ray for one spectrum, keeping the per-sample cache.
pub fn render_ray(
    field: &MultispectralField,
    ray: &Ray,
    spectrum: Spectrum,
    n_samples: usize,
    rng: &mut impl Rng,
) -> RenderResult {
    march(field, ray, spectrum, n_samples, rng, None, true)
}

/// [`render_ray`] with every density multiplied by `1(|σ_rgb - σ_therm| < ε)`.
pub fn render_ray_revealed(
    field: &MultispectralField,
    ray: &Ray,
    spectrum: Spectrum,
    n_samples: usize,
    epsilon: f64,
    rng: &mut impl Rng,
) -> RenderResult {
    march(field, ray, spectrum, n_samples, rng, Some(epsilon), false)
}

/// Accumulates `upstream · ∂color/∂θ` into `grads`.
///
/// `∂C/∂c_k = w_k` and `∂C/∂σ_k = δ_k (T_{k+1} c_k - Σ_{i>k} w_i c_i)`.
pub fn render_ray_backward(
    field: &MultispectralField,
    cache: &RenderResult,
    upstream: &[f64],
    grads: &mut FieldGrad,
) -> Result<(), RenderError> {
    let channels = cache.spectrum.channels();
    if upstream.len() != channels {
        return Err(RenderError::CacheMismatch(format!(
            "upstream has {} channels, {} expected",
            upstream.len(),
            channels
        )));
    }
    if cache.samples.len() > cache.n_samples {
        return Err(RenderError::CacheMismatch(format!(
            "{} cached samples for n_samples = {}",
            cache.samples.len(),
            cache.n_samples
        )));
    }
    if upstream.iter().all(|g| *g == 0.0) {
        return Ok(());
    }
    let dot = |c: &[f64; 3]| (0..channels).map(|ch| c[ch] * upstream[ch]).sum::<f64>();
    let mut suffix = 0.0;
    let mut dcolor = [0.0; 3];
    for s in cache.samples.iter().rev() {
        let projected = dot(&s.color);
        let dsigma = s.delta * (s.transmittance_after * projected - suffix);
        suffix += s.weight * projected;
        for ch in 0..channels {
            dcolor[ch] = s.weight * upstream[ch];
        }
        let x = cache.ray.point_at(s.t);
        field.backward_spectrum(&x, cache.spectrum, dsigma, &dcolor[..channels], grads);
    }
    Ok(())
}

/// Which channels an image render produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageChannels {
    /// Only the camera's own spectrum.
    Camera,
    /// RGB and thermal.
    All,
    Only(Spectrum),
}

impl ImageChannels {
    fn spectra(self, camera: &Camera) -> Vec<Spectrum> {
        match self {
            ImageChannels::Camera => vec![camera.spectrum()],
            ImageChannels::All => Spectrum::ALL.to_vec(),
            ImageChannels::Only(s) => vec![s],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderSettings {
    pub n_samples: usize,
    pub stride: usize,
    pub seed: u64,
    pub channels: ImageChannels,
    /// Near/far before clipping to the field box.
    pub t_near: f64,
    pub t_far: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            n_samples: 128,
            stride: 1,
            seed: 0,
            channels: ImageChannels::Camera,
            t_near: 0.05,
            t_far: 100.0,
        }
    }
}

/// Rendered view: colors plus per-spectrum opacity and expected depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: RgbtImage,
    pub opacity_rgb: Option<Image>,
    pub opacity_therm: Option<Image>,
    pub depth_rgb: Option<Image>,
    pub depth_therm: Option<Image>,
}

impl RenderedView {
    pub fn opacity(&self, spectrum: Spectrum) -> Option<&Image> {
        match spectrum {
            Spectrum::Rgb => self.opacity_rgb.as_ref(),
            Spectrum::Thermal => self.opacity_therm.as_ref(),
        }
    }

    pub fn depth(&self, spectrum: Spectrum) -> Option<&Image> {
        match spectrum {
            Spectrum::Rgb => self.depth_rgb.as_ref(),
            Spectrum::Thermal => self.depth_therm.as_ref(),
        }
    }
}

/// splitmix64 finalizer.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn ray_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, index))
}

/// Camera ray through a pixel center, clipped to the field box.
pub fn camera_ray(field: &MultispectralField, camera: &Camera, px: f64, py: f64, t_near: f64, t_far: f64) -> Option<Ray> {
    let ray = pixel_center_ray(camera, px, py).ok()?.with_bounds(t_near, t_far);
    ray.clip_to_box(field.bbox_min(), field.bbox_max())
}

fn render_view_impl(
    field: &MultispectralField,
    camera: &Camera,
    settings: &RenderSettings,
    reveal_epsilon: Option<f64>,
) -> RenderedView {
    let stride = settings.stride.max(1);
    let full_w = camera.width() as usize;
    let w = full_w.div_ceil(stride);
    let h = (camera.height() as usize).div_ceil(stride);
    let spectra = settings.channels.spectra(camera);
    let per_pixel: Vec<Vec<RenderResult>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) * stride, (i / w) * stride);
            let full_index = (y * full_w + x) as u64;
            let ray = camera_ray(field, camera, x as f64, y as f64, settings.t_near, settings.t_far);
            spectra
                .iter()
                .map(|&s| {
                    let mut rng = ray_rng(settings.seed ^ ((s as u64) << 56), full_index);
                    match &ray {
                        Some(r) => march(field, r, s, settings.n_samples, &mut rng, reveal_epsilon, false),
                        None => RenderResult::empty(
                            Ray::new(Vec3::zeros(), Vec3::z(), 0.0, 0.0),
                            s,
                            settings.n_samples,
                        ),
                    }
                })
                .collect()
        })
        .collect();
    let mut image = RgbtImage::new(w, h);
    let mut view = RenderedView {
        image: RgbtImage::new(w, h),
        opacity_rgb: None,
        opacity_therm: None,
        depth_rgb: None,
        depth_therm: None,
    };
    for (k, &s) in spectra.iter().enumerate() {
        let mut opacity = Image::new(w, h, 1);
        let mut depth = Image::new(w, h, 1);
        for (i, results) in per_pixel.iter().enumerate() {
            let r = &results[k];
            match s {
                Spectrum::Rgb => {
                    for ch in 0..3 {
                        image.pixels.data[i * 4 + ch] = r.color[ch] as f32;
                    }
                    image.valid[..3].iter_mut().for_each(|v| *v = true);
                }
                Spectrum::Thermal => {
                    image.pixels.data[i * 4 + 3] = r.color[0] as f32;
                    image.valid[3] = true;
                }
            }
            opacity.data[i] = r.opacity as f32;
            depth.data[i] = r.depth as f32;
        }
        match s {
            Spectrum::Rgb => {
                view.opacity_rgb = Some(opacity);
                view.depth_rgb = Some(depth);
            }
            Spectrum::Thermal => {
                view.opacity_therm = Some(opacity);
                view.depth_therm = Some(depth);
            }
        }
    }
    view.image = image;
    view
}

/// Renders every pixel (or every `stride`-th) with deterministic per-pixel seeds.
pub fn render_image(field: &MultispectralField, camera: &Camera, settings: &RenderSettings) -> RenderedView {
    render_view_impl(field, camera, settings, None)
}

/// Reveal threshold in density units (1/m). Trained surfaces that agree across
/// spectra differ by a few units; cross-spectral materials differ by tens.
pub const DEFAULT_REVEAL_EPSILON: f64 = 5.0;

/// De-occlusion render: densities masked to where the two spectra agree within `epsilon`.
pub fn render_revealed(
    field: &MultispectralField,
    camera: &Camera,
    spectrum: Spectrum,
    epsilon: f64,
    settings: &RenderSettings,
) -> RenderedView {
    assert!(epsilon > 0.0, "reveal epsilon must be positive");
    let settings = RenderSettings {
        channels: ImageChannels::Only(spectrum),
        ..*settings
    };
    render_view_impl(field, camera, &settings, Some(epsilon))
}

/// Expected termination depth for one spectrum (0 where nothing is hit).
pub fn render_depth(field: &MultispectralField, camera: &Camera, spectrum: Spectrum, settings: &RenderSettings) -> Image {
    let settings = RenderSettings {
        channels: ImageChannels::Only(spectrum),
        ..*settings
    };
    render_view_impl(field, camera, &settings, None)
        .depth(spectrum)
        .cloned()
        .expect("depth rendered for requested spectrum")
}
