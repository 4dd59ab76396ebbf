//! Minibatch optimization of a field against an RGBT dataset.
//!
//! Each step is bulk-synchronous: rays and patches are rendered in parallel,
//! losses are evaluated on the whole batch, gradients are back-propagated
//! into one buffer per work chunk, and the chunks are summed in chunk order
//! before a single Adam update. The chunk count is `workers`, so a run is
//! reproducible for a fixed seed and worker count.

use crate::coupling::{CouplingRegistry, CouplingStrategy};
use crate::dataset::{Dataset, Frame, Split};
use crate::eval::{evaluate, EvalError, MetricsReport};
use crate::field::{Coupling, FieldError, FieldGrad, MultispectralField};
use crate::geometry::{Spectrum, Vec3};
use crate::losses::{self, LossError, LossWeights, PixelPatch};
use crate::optim::{adam_step_per_buffer, decay_for, AdamHyper, AdamState, OptimError};
use crate::renderer::{camera_ray, render_ray, render_ray_backward, RenderResult, RenderSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Run configuration. Every key is optional in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_therm: f64,
    pub lambda_sigma_rgb: f64,
    pub lambda_sigma_therm: f64,
    pub lambda_cc: f64,
    pub lambda_tv: f64,
    /// Rays per spectrum per step.
    pub rays_per_batch: usize,
    pub patches_per_batch: usize,
    pub patch_size: usize,
    pub sigma_sample_count: usize,
    pub n_samples_per_ray: usize,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Learning-rate multiplier for the raw density grids. Softplus densities
    /// of tens per meter sit tens of raw units from the initial value.
    pub density_lr_scale: f64,
    /// Per-step learning-rate factor; unset means a ×0.1 decay over the run.
    pub lr_decay: Option<f64>,
    pub seed: u64,
    pub coupling: Coupling,
    /// Evaluate on the test split every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Grid points per axis.
    pub resolution: usize,
    /// Double the grid resolution at the half-way step.
    pub upsample_halfway: bool,
    pub workers: usize,
    pub eval_samples: usize,
    /// Skip the final evaluation.
    pub skip_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_therm: w.lambda_therm,
            lambda_sigma_rgb: w.lambda_sigma_rgb,
            lambda_sigma_therm: w.lambda_sigma_therm,
            lambda_cc: w.lambda_cc,
            lambda_tv: w.lambda_tv,
            rays_per_batch: 4096,
            patches_per_batch: 16,
            patch_size: 8,
            sigma_sample_count: 4096,
            n_samples_per_ray: 96,
            iterations: 20_000,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            density_lr_scale: 10.0,
            lr_decay: None,
            seed: 0,
            coupling: Coupling::Separate,
            eval_every: 0,
            resolution: 128,
            upsample_halfway: false,
            workers: 1,
            eval_samples: 192,
            skip_eval: false,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_therm: self.lambda_therm,
            lambda_sigma_rgb: self.lambda_sigma_rgb,
            lambda_sigma_therm: self.lambda_sigma_therm,
            lambda_cc: self.lambda_cc,
            lambda_tv: self.lambda_tv,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        self.loss_weights().validate()?;
        if self.rays_per_batch == 0 {
            return bad("rays_per_batch must be positive");
        }
        if self.patch_size < 2 {
            return bad("patch_size must be at least 2");
        }
        if self.n_samples_per_ray < 2 || self.eval_samples < 2 {
            return bad("need at least two samples per ray");
        }
        if self.resolution == 0 || self.workers == 0 {
            return bad("resolution and workers must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.density_lr_scale > 0.0 && self.density_lr_scale.is_finite()) {
            return bad("density_lr_scale must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return bad("lr_decay must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

/// Per-step values of the objective terms (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_rgb: f64,
    pub l_therm: f64,
    pub l_sigma: f64,
    pub l_cc: f64,
    pub l_tv: f64,
    pub total: f64,
}

impl LossTerms {
    fn weighted_total(&mut self, w: &LossWeights) {
        self.total = self.l_rgb
            + w.lambda_therm * self.l_therm
            + (w.lambda_sigma_rgb + w.lambda_sigma_therm) * self.l_sigma
            + w.lambda_cc * self.l_cc
            + w.lambda_tv * self.l_tv;
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("rgb", self.l_rgb),
            ("thermal", self.l_therm),
            ("sigma", self.l_sigma),
            ("cross-channel", self.l_cc),
            ("tv", self.l_tv),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<LossRecord>,
    pub metrics: Option<MetricsReport>,
    /// `(step, report)` for intermediate evaluations.
    pub intermediate: Vec<(usize, MetricsReport)>,
    pub wall_time_s: f64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// CSV with header `step,l_rgb,l_therm,l_sigma,l_cc,l_tv,total`.
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("step,l_rgb,l_therm,l_sigma,l_cc,l_tv,total\n");
        for r in &self.log {
            let t = &r.terms;
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, t.l_rgb, t.l_therm, t.l_sigma, t.l_cc, t.l_tv, t.total
            ));
        }
        s
    }

    /// Mean total loss over `len` log entries ending at step `end` (1-based, inclusive).
    pub fn smoothed_total(&self, end: usize, len: usize) -> f64 {
        let hi = end.min(self.log.len());
        let lo = hi.saturating_sub(len);
        let slice = &self.log[lo..hi];
        slice.iter().map(|r| r.terms.total).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Training pixels of one frame: clipped rays and targets.
struct FrameRays {
    width: usize,
    height: usize,
    rays: Vec<Option<crate::geometry::Ray>>,
    /// `channels` values per pixel.
    target: Vec<f64>,
    /// RGB frames only: pixel is covered by a thermal training observation.
    thermal_valid: Vec<bool>,
}

/// Rays, targets and masks for every training pixel, precomputed once.
pub struct TrainingData {
    rgb: Vec<FrameRays>,
    thermal: Vec<FrameRays>,
    rgb_offsets: Vec<usize>,
    thermal_offsets: Vec<usize>,
    bbox_min: Vec3,
    bbox_max: Vec3,
}

fn frame_rays(frame: &Frame, bbox_min: &Vec3, bbox_max: &Vec3) -> FrameRays {
    let cam = &frame.camera;
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let probe = MultispectralField::new(*bbox_min, *bbox_max, [1, 1, 1], Coupling::Independent).expect("valid box");
    let rays = (0..w * h)
        .map(|i| camera_ray(&probe, cam, (i % w) as f64, (i / w) as f64, 0.0, f64::INFINITY))
        .collect();
    FrameRays {
        width: w,
        height: h,
        rays,
        target: frame.image.data.iter().map(|v| *v as f64).collect(),
        thermal_valid: Vec::new(),
    }
}

fn offsets(frames: &[FrameRays]) -> Vec<usize> {
    let mut acc = 0;
    let mut out = vec![0];
    for f in frames {
        acc += f.rays.len();
        out.push(acc);
    }
    out
}

impl TrainingData {
    pub fn new(dataset: &Dataset) -> Self {
        let (bmin, bmax) = dataset.bbox();
        let thermal_frames: Vec<&Frame> = dataset.frames_of(Spectrum::Thermal, Split::Train).collect();
        let mut rgb: Vec<FrameRays> = dataset
            .frames_of(Spectrum::Rgb, Split::Train)
            .map(|f| {
                let mut fr = frame_rays(f, &bmin, &bmax);
                let partner = thermal_frames.iter().find(|t| t.pair_id == f.pair_id);
                fr.thermal_valid = fr
                    .rays
                    .iter()
                    .map(|r| match (partner, r) {
                        (None, _) => false,
                        (Some(_), None) => true,
                        (Some(t), Some(r)) => {
                            let p = r.point_at(0.5 * (r.t_near + r.t_far));
                            t.camera.project(&p).is_ok_and(|px| {
                                px.x >= 0.0
                                    && px.y >= 0.0
                                    && px.x < t.camera.width() as f64
                                    && px.y < t.camera.height() as f64
                            })
                        }
                    })
                    .collect();
                fr
            })
            .collect();
        rgb.shrink_to_fit();
        let thermal: Vec<FrameRays> = thermal_frames.iter().map(|f| frame_rays(f, &bmin, &bmax)).collect();
        Self {
            rgb_offsets: offsets(&rgb),
            thermal_offsets: offsets(&thermal),
            rgb,
            thermal,
            bbox_min: bmin,
            bbox_max: bmax,
        }
    }

    pub fn pixel_count(&self, s: Spectrum) -> usize {
        match s {
            Spectrum::Rgb => *self.rgb_offsets.last().unwrap(),
            Spectrum::Thermal => *self.thermal_offsets.last().unwrap(),
        }
    }

    pub fn frame_count(&self, s: Spectrum) -> usize {
        match s {
            Spectrum::Rgb => self.rgb.len(),
            Spectrum::Thermal => self.thermal.len(),
        }
    }

    /// Resolution of training frame `frame` of spectrum `s`.
    pub fn frame_size(&self, s: Spectrum, frame: usize) -> (usize, usize) {
        let f = match s {
            Spectrum::Rgb => &self.rgb[frame],
            Spectrum::Thermal => &self.thermal[frame],
        };
        (f.width, f.height)
    }

    fn frames(&self, s: Spectrum) -> (&[FrameRays], &[usize]) {
        match s {
            Spectrum::Rgb => (&self.rgb, &self.rgb_offsets),
            Spectrum::Thermal => (&self.thermal, &self.thermal_offsets),
        }
    }

    /// Maps a global pixel index of spectrum `s` to `(frame, pixel)`.
    fn locate(&self, s: Spectrum, global: usize) -> (usize, usize) {
        let (_, off) = self.frames(s);
        let frame = off.partition_point(|&o| o <= global) - 1;
        (frame, global - off[frame])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaySample {
    pub spectrum: Spectrum,
    pub frame: usize,
    pub pixel: usize,
    /// Seeds the stratified sample positions of this ray.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSample {
    /// Index into the RGB training frames.
    pub frame: usize,
    pub x0: usize,
    pub y0: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rgb: Vec<RaySample>,
    pub thermal: Vec<RaySample>,
    pub patches: Vec<PatchSample>,
    pub sigma_points: Vec<Vec3>,
}

/// Draws one minibatch: rays uniform over training pixels per spectrum,
/// patches from RGB training views, σ points uniform in the box.
pub fn sample_batch(data: &TrainingData, config: &TrainConfig, rng: &mut impl Rng) -> Batch {
    let draw_rays = |s: Spectrum, rng: &mut dyn rand::RngCore| -> Vec<RaySample> {
        let total = data.pixel_count(s);
        if total == 0 {
            return Vec::new();
        }
        (0..config.rays_per_batch)
            .map(|_| {
                let (frame, pixel) = data.locate(s, rng.gen_range(0..total));
                RaySample {
                    spectrum: s,
                    frame,
                    pixel,
                    seed: rng.gen(),
                }
            })
            .collect()
    };
    let rgb = draw_rays(Spectrum::Rgb, rng);
    let thermal = draw_rays(Spectrum::Thermal, rng);
    let k = config.patch_size;
    let patches = if data.rgb.is_empty() {
        Vec::new()
    } else {
        (0..config.patches_per_batch)
            .filter_map(|_| {
                let frame = rng.gen_range(0..data.rgb.len());
                let f = &data.rgb[frame];
                (f.width >= k && f.height >= k).then(|| PatchSample {
                    frame,
                    x0: rng.gen_range(0..=f.width - k),
                    y0: rng.gen_range(0..=f.height - k),
                    seed: rng.gen(),
                })
            })
            .collect()
    };
    let sigma_points = (0..config.sigma_sample_count)
        .map(|_| Vec3::from_fn(|a, _| rng.gen_range(data.bbox_min[a]..data.bbox_max[a])))
        .collect();
    Batch {
        rgb,
        thermal,
        patches,
        sigma_points,
    }
}

/// Static parameters of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec {
    pub weights: LossWeights,
    pub n_samples: usize,
    pub sigma_term: bool,
    pub workers: usize,
}

fn render_sample(field: &MultispectralField, data: &TrainingData, r: &RaySample, n: usize) -> Option<RenderResult> {
    let (frames, _) = data.frames(r.spectrum);
    let ray = frames[r.frame].rays[r.pixel]?;
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    Some(render_ray(field, &ray, r.spectrum, n, &mut rng))
}

/// Thermal rays of one patch, rendered from the RGB camera.
fn patch_rays(p: &PatchSample, k: usize) -> Vec<RaySample> {
    (0..k * k)
        .map(|i| RaySample {
            spectrum: Spectrum::Thermal,
            frame: p.frame,
            pixel: 0,
            seed: crate::renderer::mix_seed(p.seed, i as u64),
        })
        .collect()
}

fn render_patch(
    field: &MultispectralField,
    data: &TrainingData,
    p: &PatchSample,
    k: usize,
    n: usize,
) -> (Vec<Option<RenderResult>>, PixelPatch) {
    let f = &data.rgb[p.frame];
    let mut results = Vec::with_capacity(k * k);
    let mut thermal = Vec::with_capacity(k * k);
    let mut gt = Vec::with_capacity(3 * k * k);
    let mut valid = Vec::with_capacity(k * k);
    for (i, rs) in patch_rays(p, k).iter().enumerate() {
        let pix = (p.y0 + i / k) * f.width + p.x0 + i % k;
        let r = f.rays[pix].map(|ray| {
            let mut rng = ChaCha8Rng::seed_from_u64(rs.seed);
            render_ray(field, &ray, Spectrum::Thermal, n, &mut rng)
        });
        thermal.push(r.as_ref().map_or(0.0, |r| r.color[0]));
        results.push(r);
        gt.extend_from_slice(&f.target[3 * pix..3 * pix + 3]);
        valid.push(f.thermal_valid[pix]);
    }
    let patch = PixelPatch::new(k, thermal, gt, valid).expect("patch shape");
    (results, patch)
}

fn chunk_ranges(n: usize, chunks: usize) -> Vec<std::ops::Range<usize>> {
    (0..chunks).map(|c| (c * n / chunks)..((c + 1) * n / chunks)).collect()
}

fn map_chunks<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&[T]) -> R + Sync) -> Vec<R> {
    let ranges = chunk_ranges(items.len(), workers);
    if workers == 1 {
        ranges.into_iter().map(|r| f(&items[r])).collect()
    } else {
        ranges.into_par_iter().map(|r| f(&items[r])).collect()
    }
}

struct PatchEval {
    results: Vec<Option<RenderResult>>,
    /// Upstream gradient per patch pixel.
    upstream: Vec<f64>,
}

/// Loss terms and the gradient of the objective w.r.t. every raw grid.
///
/// The density-coupling gradient is one-sided: `λ_σ,rgb` scales the part
/// flowing into the RGB density, `λ_σ,therm` the part flowing into the
/// thermal density.
///
/// `scratch` holds one gradient buffer per worker; the returned gradient
/// borrows its first entry.
pub fn objective_and_gradient<'s>(
    field: &MultispectralField,
    data: &TrainingData,
    batch: &Batch,
    spec: &ObjectiveSpec,
    patch_size: usize,
    scratch: &'s mut Vec<FieldGrad>,
) -> Result<(LossTerms, &'s FieldGrad), TrainError> {
    let w = &spec.weights;
    let n = spec.n_samples;
    let workers = spec.workers.max(1);
    let mut terms = LossTerms::default();

    // Forward.
    let forward = |rays: &[RaySample]| -> Vec<Option<RenderResult>> {
        map_chunks(rays, workers, |c| c.iter().map(|r| render_sample(field, data, r, n)).collect::<Vec<_>>())
            .into_iter()
            .flatten()
            .collect()
    };
    let rgb_results = forward(&batch.rgb);
    let th_results = if w.lambda_therm > 0.0 { forward(&batch.thermal) } else { Vec::new() };

    let photometric = |results: &[Option<RenderResult>], rays: &[RaySample], ch: usize| -> Result<(f64, Vec<f64>), LossError> {
        let (frames, _) = data.frames(if ch == 3 { Spectrum::Rgb } else { Spectrum::Thermal });
        let mut rendered = Vec::with_capacity(ch * rays.len());
        let mut target = Vec::with_capacity(ch * rays.len());
        for (res, r) in results.iter().zip(rays) {
            for c in 0..ch {
                rendered.push(res.as_ref().map_or(0.0, |x| x.color[c]));
            }
            target.extend_from_slice(&frames[r.frame].target[ch * r.pixel..ch * r.pixel + ch]);
        }
        losses::photometric(&rendered, &target, ch)
    };
    let (l_rgb, g_rgb) = photometric(&rgb_results, &batch.rgb, 3)?;
    terms.l_rgb = l_rgb;
    let g_th = if th_results.is_empty() {
        Vec::new()
    } else {
        let (l, g) = photometric(&th_results, &batch.thermal, 1)?;
        terms.l_therm = l;
        g
    };

    // Patches: cross-channel on every patch, TV on thermally unsupervised ones.
    let k = patch_size;
    let need_patches = w.lambda_cc > 0.0 || w.lambda_tv > 0.0;
    let mut patch_evals: Vec<PatchEval> = Vec::new();
    if need_patches && !batch.patches.is_empty() {
        let rendered: Vec<(Vec<Option<RenderResult>>, PixelPatch)> =
            map_chunks(&batch.patches, workers, |c| c.iter().map(|p| render_patch(field, data, p, k, n)).collect::<Vec<_>>())
                .into_iter()
                .flatten()
                .collect();
        let n_cc = rendered.len() as f64;
        let n_tv = rendered.iter().filter(|(_, p)| p.is_unsupervised()).count() as f64;
        for (results, patch) in rendered {
            let mut upstream = vec![0.0; k * k];
            if w.lambda_cc > 0.0 {
                let (v, g) = losses::cross_channel(&patch)?;
                terms.l_cc += v / n_cc;
                upstream.iter_mut().zip(&g).for_each(|(u, gi)| *u += w.lambda_cc * gi / n_cc);
            }
            if w.lambda_tv > 0.0 && patch.is_unsupervised() {
                let (v, g) = losses::total_variation_patch(&patch)?;
                terms.l_tv += v / n_tv;
                upstream.iter_mut().zip(&g).for_each(|(u, gi)| *u += w.lambda_tv * gi / n_tv);
            }
            patch_evals.push(PatchEval { results, upstream });
        }
    }

    // Backward into per-chunk buffers.
    while scratch.len() < workers {
        scratch.push(field.zero_grad());
    }
    scratch.truncate(workers);
    let rgb_ranges = chunk_ranges(batch.rgb.len(), workers);
    let th_ranges = chunk_ranges(th_results.len(), workers);
    let patch_ranges = chunk_ranges(patch_evals.len(), workers);
    let backward_chunk = |c: usize, grads: &mut FieldGrad| {
        grads.zero();
        for i in rgb_ranges[c].clone() {
            if let Some(r) = &rgb_results[i] {
                render_ray_backward(field, r, &g_rgb[3 * i..3 * i + 3], grads).expect("rgb cache");
            }
        }
        for i in th_ranges[c].clone() {
            if let Some(r) = &th_results[i] {
                render_ray_backward(field, r, &[w.lambda_therm * g_th[i]], grads).expect("thermal cache");
            }
        }
        for pe in &patch_evals[patch_ranges[c].clone()] {
            for (r, u) in pe.results.iter().zip(&pe.upstream) {
                if let Some(r) = r {
                    render_ray_backward(field, r, &[*u], grads).expect("patch cache");
                }
            }
        }
    };
    if workers == 1 {
        backward_chunk(0, &mut scratch[0]);
    } else {
        scratch.par_iter_mut().enumerate().for_each(|(c, g)| backward_chunk(c, g));
    }
    let (head, tail) = scratch.split_at_mut(1);
    let total = &mut head[0];
    for g in tail.iter() {
        total.add_assign(g);
    }

    if spec.sigma_term && !batch.sigma_points.is_empty() && (w.lambda_sigma_rgb > 0.0 || w.lambda_sigma_therm > 0.0) {
        terms.l_sigma = losses::sigma_coupling(&batch.sigma_points, field, w, total)?;
    }
    terms.weighted_total(w);
    Ok((terms, &*total))
}

/// Scalar surrogate whose gradient [`objective_and_gradient`] returns.
///
/// The coupling term is split as `λ_σ,rgb mean|σ_rgb(θ) - σ_therm(θ₀)| +
/// λ_σ,therm mean|σ_rgb(θ₀) - σ_therm(θ)|` with `θ₀ = detached` held fixed.
pub fn objective_value(
    field: &MultispectralField,
    detached: &MultispectralField,
    data: &TrainingData,
    batch: &Batch,
    spec: &ObjectiveSpec,
    patch_size: usize,
) -> Result<f64, TrainError> {
    let no_sigma = ObjectiveSpec {
        sigma_term: false,
        ..*spec
    };
    let mut scratch = Vec::new();
    let (terms, _) = objective_and_gradient(field, data, batch, &no_sigma, patch_size, &mut scratch)?;
    let w = &spec.weights;
    let mut value = terms.total;
    if spec.sigma_term && !batch.sigma_points.is_empty() {
        let n = batch.sigma_points.len() as f64;
        let (mut a, mut b) = (0.0, 0.0);
        for p in &batch.sigma_points {
            let live = field.query(p);
            let fixed = detached.query(p);
            a += (live.sigma_rgb - fixed.sigma_therm).abs();
            b += (fixed.sigma_rgb - live.sigma_therm).abs();
        }
        value += w.lambda_sigma_rgb * a / n + w.lambda_sigma_therm * b / n;
    }
    Ok(value)
}

/// Optimizer state plus the field being trained.
pub struct Trainer<'a> {
    pub field: MultispectralField,
    pub config: TrainConfig,
    strategy: &'a dyn CouplingStrategy,
    data: TrainingData,
    adam: AdamState,
    rng: ChaCha8Rng,
    scratch: Vec<FieldGrad>,
    step: usize,
    lr: f64,
    decay: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &Dataset, config: TrainConfig, registry: &'a CouplingRegistry) -> Result<Self, TrainError> {
        let (bmin, bmax) = dataset.bbox();
        let r = config.resolution;
        let field = MultispectralField::new(bmin, bmax, [r, r, r], config.coupling)?;
        Self::with_field(dataset, config, registry, field)
    }

    /// Starts from `field` instead of the default initialization.
    pub fn with_field(
        dataset: &Dataset,
        config: TrainConfig,
        registry: &'a CouplingRegistry,
        field: MultispectralField,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let strategy = registry
            .for_mode(config.coupling)
            .ok_or_else(|| TrainError::InvalidConfig(format!("no strategy for coupling `{}`", config.coupling)))?;
        if field.coupling() != strategy.mode() {
            return Err(TrainError::InvalidConfig(format!(
                "field coupling `{}` does not match `{}`",
                field.coupling(),
                strategy.mode()
            )));
        }
        if dataset.count(Spectrum::Rgb, Split::Train) == 0 {
            return Err(TrainError::EmptyDataset("no RGB training frames".into()));
        }
        if dataset.count(Spectrum::Thermal, Split::Train) == 0 && config.coupling != Coupling::Independent {
            return Err(TrainError::EmptyDataset("no thermal training frames".into()));
        }
        let data = TrainingData::new(dataset);
        let adam = AdamState::for_grids(field.grids());
        let decay = config.lr_decay.unwrap_or_else(|| decay_for(0.1, config.iterations));
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            lr: config.lr,
            decay,
            field,
            strategy,
            data,
            adam,
            scratch: Vec::new(),
            step: 0,
            config,
        })
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn objective_spec(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            weights: self.strategy.effective_weights(&self.config.loss_weights()),
            n_samples: self.config.n_samples_per_ray,
            sigma_term: self.strategy.uses_sigma_term(),
            workers: self.config.workers,
        }
    }

    /// One Adam step; returns the loss terms of the batch it used.
    pub fn step(&mut self) -> Result<LossTerms, TrainError> {
        self.step += 1;
        if self.config.upsample_halfway && self.step == self.config.iterations / 2 + 1 && self.config.iterations > 1 {
            let r = self.field.resolution().map(|n| 2 * n);
            self.field = self.field.upsampled(r)?;
            self.adam = AdamState::for_grids(self.field.grids());
            self.scratch.clear();
        }
        let batch = sample_batch(&self.data, &self.config, &mut self.rng);
        let spec = self.objective_spec();
        let (terms, grad) =
            objective_and_gradient(&self.field, &self.data, &batch, &spec, self.config.patch_size, &mut self.scratch)?;
        let grad: &FieldGrad = grad;
        if let Some(term) = terms.first_non_finite() {
            return Err(TrainError::NonFiniteLoss { term, step: self.step });
        }
        let hyper = self.config.adam();
        let layout = self.field.layout();
        let mut params: Vec<&mut [f32]> = self.field.grids_mut().iter_mut().map(|g| g.data.as_mut_slice()).collect();
        let grads: Vec<&[f32]> = grad.grids.iter().map(|g| g.data.as_slice()).collect();
        let lrs: Vec<f64> = (0..params.len())
            .map(|slot| {
                let density = slot == layout.sigma_rgb || slot == layout.sigma_therm;
                if density {
                    self.lr * self.config.density_lr_scale
                } else {
                    self.lr
                }
            })
            .collect();
        adam_step_per_buffer(&mut params, &grads, &mut self.adam, &hyper, &lrs)?;
        self.lr *= self.decay;
        Ok(terms)
    }

    pub fn eval_settings(&self) -> RenderSettings {
        RenderSettings {
            n_samples: self.config.eval_samples,
            seed: self.config.seed ^ 0x5eed,
            ..Default::default()
        }
    }

    /// Runs every remaining step, evaluating on the test split as configured.
    pub fn run(&mut self, dataset: &Dataset) -> Result<TrainReport, TrainError> {
        let start = Instant::now();
        let mut log = Vec::with_capacity(self.config.iterations);
        let mut intermediate = Vec::new();
        while self.step < self.config.iterations {
            let terms = self.step()?;
            log.push(LossRecord { step: self.step, terms });
            if self.config.eval_every > 0 && self.step % self.config.eval_every == 0 && self.step < self.config.iterations {
                intermediate.push((self.step, evaluate(&self.field, dataset, &self.eval_settings())?));
            }
        }
        let metrics = if self.config.skip_eval {
            None
        } else {
            Some(evaluate(&self.field, dataset, &self.eval_settings())?)
        };
        Ok(TrainReport {
            log,
            metrics,
            intermediate,
            wall_time_s: start.elapsed().as_secs_f64(),
            checkpoint: None,
        })
    }
}

/// Trains a fresh field on `dataset`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(MultispectralField, TrainReport), TrainError> {
    let registry = CouplingRegistry::with_builtins();
    let mut trainer = Trainer::new(dataset, config.clone(), &registry)?;
    let report = trainer.run(dataset)?;
    Ok((trainer.field, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetMeta, ThermalNormalization};
    use crate::field::{logit, softplus_inverse};
    use crate::geometry::{Camera, Intrinsics, Pose};
    use crate::image::Image;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            scene: "unit".into(),
            seed: 0,
            bbox_min: [-0.5; 3],
            bbox_max: [0.5; 3],
            thermal_normalization: ThermalNormalization::default(),
        }
    }

    fn camera(w: u32, s: Spectrum, eye: Vec3) -> Camera {
        let k = Intrinsics::pinhole(1.2 * w as f64, 1.2 * w as f64, 0.5 * w as f64, 0.5 * w as f64, w, w);
        Camera::new(k, Pose::look_at(&eye, &Vec3::zeros(), &Vec3::z()), s)
    }

    /// `views` RGB/thermal pairs of size `w` filled with a pseudo-random pattern.
    fn toy_dataset(views: usize, w: u32, thermal: bool) -> Dataset {
        let mut frames = Vec::new();
        for v in 0..views {
            let a = v as f64 * 1.3;
            let eye = Vec3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.8);
            let n = (w * w) as usize;
            let rgb = Image::from_data(w as usize, w as usize, 3, (0..3 * n).map(|i| ((i * 7 + v) % 11) as f32 / 11.0).collect())
                .unwrap();
            frames.push(Frame::new(format!("rgb_{v}"), camera(w, Spectrum::Rgb, eye), Split::Train, v as u32, rgb));
            if thermal {
                let th = Image::from_data(w as usize, w as usize, 1, (0..n).map(|i| ((i * 5 + v) % 7) as f32 / 7.0).collect())
                    .unwrap();
                frames.push(Frame::new(format!("thermal_{v}"), camera(w, Spectrum::Thermal, eye), Split::Train, v as u32, th));
            }
        }
        Dataset { meta: meta(), frames }
    }

    fn quiet(cfg: TrainConfig) -> TrainConfig {
        TrainConfig {
            skip_eval: true,
            ..cfg
        }
    }

    #[test]
    fn single_voxel_converges_to_target() {
        // One RGB pixel observing an opaque constant voxel: rendered color is
        // (1 - e^{-σL}) c, so c converges to target / opacity.
        let target = [0.3f32, 0.6, 0.8];
        let cam = camera(1, Spectrum::Rgb, Vec3::new(0.0, -2.0, 0.0));
        let ds = Dataset {
            meta: meta(),
            frames: vec![Frame::new("rgb_0", cam, Split::Train, 0, Image::from_data(1, 1, 3, target.to_vec()).unwrap())],
        };
        let cfg = quiet(TrainConfig {
            coupling: Coupling::Independent,
            resolution: 1,
            rays_per_batch: 1,
            patches_per_batch: 0,
            sigma_sample_count: 0,
            n_samples_per_ray: 16,
            iterations: 2000,
            lr: 0.05,
            lambda_tv: 0.0,
            ..Default::default()
        });
        let reg = CouplingRegistry::with_builtins();
        let mut field = MultispectralField::new(Vec3::repeat(-0.5), Vec3::repeat(0.5), [1; 3], Coupling::Independent).unwrap();
        let l = field.layout();
        field.grid_mut(l.sigma_rgb).data[0] = softplus_inverse(40.0) as f32;
        let mut t = Trainer::with_field(&ds, cfg, &reg, field).unwrap();
        t.run(&ds).unwrap();
        let c = t.field.query(&Vec3::zeros()).color_rgb;
        let opacity = 1.0 - (-40.0f64).exp();
        for ch in 0..3 {
            assert!((c[ch] * opacity - target[ch] as f64).abs() < 1e-3, "{c:?}");
        }
    }

    #[test]
    fn zero_iterations_return_initial_field() {
        let ds = toy_dataset(2, 8, true);
        let cfg = quiet(TrainConfig {
            iterations: 0,
            resolution: 4,
            ..Default::default()
        });
        let (field, report) = train(&ds, &cfg).unwrap();
        let fresh = MultispectralField::new(Vec3::repeat(-0.5), Vec3::repeat(0.5), [4; 3], Coupling::Separate).unwrap();
        assert_eq!(field, fresh);
        assert!(report.log.is_empty());
    }

    #[test]
    fn empty_datasets_are_rejected() {
        let no_thermal = toy_dataset(1, 8, false);
        let cfg = quiet(TrainConfig {
            iterations: 1,
            resolution: 2,
            ..Default::default()
        });
        assert!(matches!(train(&no_thermal, &cfg), Err(TrainError::EmptyDataset(_))));
        let none = Dataset { meta: meta(), frames: vec![] };
        assert!(matches!(train(&none, &cfg), Err(TrainError::EmptyDataset(_))));
        let indep = TrainConfig {
            coupling: Coupling::Independent,
            ..cfg
        };
        assert!(train(&no_thermal, &indep).is_ok());
    }

    #[test]
    fn rgb_only_batches_have_no_thermal_rays() {
        let ds = toy_dataset(2, 8, false);
        let data = TrainingData::new(&ds);
        let cfg = TrainConfig {
            rays_per_batch: 64,
            ..Default::default()
        };
        let b = sample_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(b.thermal.is_empty());
        assert_eq!(b.rgb.len(), 64);
    }

    #[test]
    fn batches_are_in_bounds_and_reproducible() {
        let mut ds = toy_dataset(3, 8, true);
        // A thermal frame at a different resolution than its RGB partner.
        let eye = Vec3::new(0.3, 2.0, 0.5);
        ds.frames.push(Frame::new("thermal_x", camera(4, Spectrum::Thermal, eye), Split::Train, 9, Image::new(4, 4, 1)));
        let data = TrainingData::new(&ds);
        let cfg = TrainConfig {
            rays_per_batch: 1000,
            patches_per_batch: 20,
            patch_size: 4,
            sigma_sample_count: 50,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draws = 0;
        while draws < 100_000 {
            let b = sample_batch(&data, &cfg, &mut rng);
            for r in b.rgb.iter().chain(&b.thermal) {
                let (w, h) = data.frame_size(r.spectrum, r.frame);
                assert!(r.pixel < w * h);
                draws += 1;
            }
            assert!(b.rgb.iter().all(|r| r.spectrum == Spectrum::Rgb));
            assert!(b.thermal.iter().all(|r| r.spectrum == Spectrum::Thermal));
            for p in &b.patches {
                let (w, h) = data.frame_size(Spectrum::Rgb, p.frame);
                assert!(p.x0 + 4 <= w && p.y0 + 4 <= h);
            }
        }
        let a = sample_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    fn random_field(coupling: Coupling, seed: u64) -> MultispectralField {
        let mut f = MultispectralField::new(Vec3::repeat(-0.5), Vec3::repeat(0.5), [4; 3], coupling).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let l = f.layout();
        for slot in 0..f.grids().len() {
            let is_density = slot == l.sigma_rgb || slot == l.sigma_therm;
            f.grid_mut(slot).data.iter_mut().for_each(|v| {
                *v = if is_density {
                    softplus_inverse(r.gen_range(0.2..2.5)) as f32
                } else {
                    logit(r.gen_range(0.1..0.9)) as f32
                }
            });
        }
        f
    }

    #[test]
    fn independent_mode_isolates_spectra() {
        let ds = toy_dataset(2, 8, true);
        let data = TrainingData::new(&ds);
        let field = random_field(Coupling::Independent, 3);
        let l = field.layout();
        let cfg = TrainConfig {
            rays_per_batch: 32,
            patches_per_batch: 2,
            patch_size: 4,
            sigma_sample_count: 16,
            ..Default::default()
        };
        let batch = sample_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let weights = crate::coupling::Independent.effective_weights(&cfg.loss_weights());
        // Thermal terms only.
        let only_thermal = ObjectiveSpec {
            weights: LossWeights { lambda_tv: 1.0, ..weights },
            n_samples: 16,
            sigma_term: false,
            workers: 1,
        };
        let no_rgb = Batch {
            rgb: Vec::new(),
            ..batch.clone()
        };
        let mut scratch = Vec::new();
        let (_, g) = objective_and_gradient(&field, &data, &no_rgb, &only_thermal, 4, &mut scratch).unwrap();
        assert!(g.grid(l.sigma_rgb).data.iter().all(|v| *v == 0.0));
        assert!(g.grid(l.sigma_therm).data.iter().any(|v| *v != 0.0));
        // RGB terms only.
        let only_rgb = ObjectiveSpec {
            weights: LossWeights {
                lambda_therm: 0.0,
                lambda_tv: 0.0,
                ..weights
            },
            ..only_thermal
        };
        let (_, g) = objective_and_gradient(&field, &data, &batch, &only_rgb, 4, &mut scratch).unwrap();
        assert!(g.grid(l.sigma_therm).data.iter().all(|v| *v == 0.0));
        assert!(g.grid(l.color_therm).data.iter().all(|v| *v == 0.0));
        assert!(g.grid(l.sigma_rgb).data.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn worker_count_only_reorders_sums() {
        let ds = toy_dataset(2, 8, true);
        let data = TrainingData::new(&ds);
        let field = random_field(Coupling::Separate, 5);
        let cfg = TrainConfig {
            rays_per_batch: 40,
            patches_per_batch: 3,
            patch_size: 4,
            sigma_sample_count: 20,
            ..Default::default()
        };
        let batch = sample_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(6));
        let spec = |workers| ObjectiveSpec {
            weights: cfg.loss_weights(),
            n_samples: 16,
            sigma_term: true,
            workers,
        };
        let (mut s1, mut s3) = (Vec::new(), Vec::new());
        let (t1, g1) = objective_and_gradient(&field, &data, &batch, &spec(1), 4, &mut s1).unwrap();
        let (t3, g3) = objective_and_gradient(&field, &data, &batch, &spec(3), 4, &mut s3).unwrap();
        assert_eq!(t1, t3);
        for (a, b) in g1.grids.iter().zip(&g3.grids) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn full_objective_gradient_matches_central_differences() {
        let ds = toy_dataset(2, 8, true);
        let data = TrainingData::new(&ds);
        let field = random_field(Coupling::Separate, 11);
        let cfg = TrainConfig {
            rays_per_batch: 24,
            patches_per_batch: 2,
            patch_size: 4,
            sigma_sample_count: 16,
            lambda_sigma_rgb: 0.05,
            lambda_sigma_therm: 0.2,
            lambda_cc: 0.3,
            lambda_tv: 0.3,
            ..Default::default()
        };
        let batch = sample_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(12));
        let spec = ObjectiveSpec {
            weights: cfg.loss_weights(),
            n_samples: 24,
            sigma_term: true,
            workers: 1,
        };
        let mut scratch = Vec::new();
        let (_, grad) = objective_and_gradient(&field, &data, &batch, &spec, 4, &mut scratch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut checked = 0;
        for slot in 0..field.grids().len() {
            for _ in 0..12 {
                let i = rng.gen_range(0..field.grid(slot).data.len());
                let an = grad.grid(slot).data[i] as f64;
                let eval = |delta: f32| {
                    let mut f = field.clone();
                    f.grid_mut(slot).data[i] += delta;
                    let actual = (f.grid(slot).data[i] - field.grid(slot).data[i]) as f64;
                    (objective_value(&f, &field, &data, &batch, &spec, 4).unwrap(), actual)
                };
                let ((fp, hp), (fm, hm)) = (eval(1e-2), eval(-1e-2));
                let fd = (fp - fm) / (hp - hm);
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-6, "slot {slot} idx {i}: fd {fd} an {an}");
                checked += 1;
            }
        }
        assert_eq!(checked, 12 * field.grids().len());
    }

    #[test]
    fn config_parses_flat_toml_and_rejects_unknown_keys() {
        let cfg = TrainConfig::from_toml_str("iterations = 10\ncoupling = \"shared\"\nlambda_cc = 0.2\n").unwrap();
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.coupling, Coupling::Shared);
        assert_eq!(cfg.lambda_cc, 0.2);
        assert_eq!(cfg.rays_per_batch, TrainConfig::default().rays_per_batch);
        assert!(TrainConfig::from_toml_str("iteratons = 10\n").is_err());
        assert!(TrainConfig::from_toml_str("lambda_sigma_therm = 0.0\nlambda_sigma_rgb = 1.0\n").is_err());
        let round = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn losses_csv_has_one_row_per_step() {
        let ds = toy_dataset(2, 8, true);
        let cfg = quiet(TrainConfig {
            iterations: 5,
            resolution: 4,
            rays_per_batch: 16,
            patches_per_batch: 1,
            patch_size: 4,
            sigma_sample_count: 8,
            n_samples_per_ray: 8,
            ..Default::default()
        });
        let (_, report) = train(&ds, &cfg).unwrap();
        let csv = report.losses_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("step,l_rgb,l_therm,l_sigma,l_cc,l_tv,total\n"));
    }
}
