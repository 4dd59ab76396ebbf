//! Training objective terms: photometric ℓ2, two-part density coupling,
//! cross-channel gradient prior and total variation. Each returns its value
//! and the gradient w.r.t. the rendered quantities it consumes.
//!
//! Image-space gradients use forward differences `[-1, 1]` horizontally and
//! vertically; ℓ1 subgradients are 0 at exact ties.

use crate::field::{FieldGrad, MultispectralField};
use crate::geometry::{Spectrum, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("patch too small: {0}x{0} (need at least 2x2)")]
    PatchTooSmall(usize),
    #[error("density coupling is undefined when densities are shared")]
    ModeError,
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// Multipliers of the objective terms. The density coupling is split into
/// an RGB-side and a thermal-side weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_therm: f64,
    pub lambda_sigma_rgb: f64,
    pub lambda_sigma_therm: f64,
    pub lambda_cc: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_therm: 1.0,
            lambda_sigma_rgb: 1e-4,
            lambda_sigma_therm: 1e-3,
            lambda_cc: 0.05,
            lambda_tv: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.lambda_therm,
            self.lambda_sigma_rgb,
            self.lambda_sigma_therm,
            self.lambda_cc,
            self.lambda_tv,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LossError::InvalidWeights("weights must be finite and non-negative".into()));
        }
        if self.lambda_sigma_therm < self.lambda_sigma_rgb {
            return Err(LossError::InvalidWeights(
                "lambda_sigma_therm must be at least lambda_sigma_rgb".into(),
            ));
        }
        Ok(())
    }
}

/// `k × k` block of thermal values rendered from an RGB camera, with the
/// matching ground-truth RGB and per-pixel thermal supervision mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPatch {
    pub size: usize,
    /// Row-major, `size²` values.
    pub rendered_thermal: Vec<f64>,
    /// Row-major, `3 size²` values.
    pub gt_rgb: Vec<f64>,
    /// `true` where a thermal observation covers the pixel.
    pub thermal_valid: Vec<bool>,
}

impl PixelPatch {
    pub fn new(size: usize, rendered_thermal: Vec<f64>, gt_rgb: Vec<f64>, thermal_valid: Vec<bool>) -> Result<Self, LossError> {
        if size < 2 {
            return Err(LossError::PatchTooSmall(size));
        }
        let n = size * size;
        if rendered_thermal.len() != n || gt_rgb.len() != 3 * n || thermal_valid.len() != n {
            return Err(LossError::ShapeMismatch(format!(
                "patch {size}x{size}: {} thermal, {} rgb, {} mask values",
                rendered_thermal.len(),
                gt_rgb.len(),
                thermal_valid.len()
            )));
        }
        Ok(Self {
            size,
            rendered_thermal,
            gt_rgb,
            thermal_valid,
        })
    }

    /// Thermally unsupervised: no pixel carries a thermal observation.
    pub fn is_unsupervised(&self) -> bool {
        self.thermal_valid.iter().all(|v| !v)
    }

    pub fn gray(&self) -> Vec<f64> {
        self.gt_rgb
            .chunks_exact(3)
            .map(|c| (c[0] + c[1] + c[2]) / 3.0)
            .collect()
    }
}

/// Number of forward-difference terms in a `k × k` patch, both directions.
pub fn difference_terms(k: usize) -> usize {
    2 * k * (k - 1)
}

/// Visits every forward difference as `(a, b)` index pairs, `b - a` being the difference.
fn for_each_difference(k: usize, mut f: impl FnMut(usize, usize)) {
    for y in 0..k {
        for x in 0..k - 1 {
            f(y * k + x, y * k + x + 1);
        }
    }
    for y in 0..k - 1 {
        for x in 0..k {
            f(y * k + x, (y + 1) * k + x);
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over rays of the squared error summed over `channels`.
///
/// `rendered` and `target` hold `channels` values per ray; the gradient is
/// `2 (rendered - target) / B` with `B` the ray count.
pub fn photometric(rendered: &[f64], target: &[f64], channels: usize) -> Result<(f64, Vec<f64>), LossError> {
    if rendered.len() != target.len() || channels == 0 || rendered.len() % channels != 0 {
        return Err(LossError::ShapeMismatch(format!(
            "{} rendered vs {} target values ({channels} channels)",
            rendered.len(),
            target.len()
        )));
    }
    let rays = rendered.len() / channels;
    if rays == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / rays as f64;
    let mut value = 0.0;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            let d = r - t;
            value += d * d;
            2.0 * d * inv
        })
        .collect();
    Ok((value * inv, grad))
}

/// Mean `|σ_rgb - σ_therm|` and the unscaled one-sided gradients
/// `(∂/∂σ_rgb, ∂/∂σ_therm)` per point.
pub fn sigma_coupling_values(sigma_rgb: &[f64], sigma_therm: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), LossError> {
    if sigma_rgb.len() != sigma_therm.len() || sigma_rgb.is_empty() {
        return Err(LossError::ShapeMismatch(format!(
            "{} rgb vs {} thermal densities",
            sigma_rgb.len(),
            sigma_therm.len()
        )));
    }
    let inv = 1.0 / sigma_rgb.len() as f64;
    let mut value = 0.0;
    let mut d_rgb = Vec::with_capacity(sigma_rgb.len());
    let mut d_therm = Vec::with_capacity(sigma_rgb.len());
    for (a, b) in sigma_rgb.iter().zip(sigma_therm) {
        let d = a - b;
        value += d.abs();
        d_rgb.push(sign(d) * inv);
        d_therm.push(-sign(d) * inv);
    }
    Ok((value * inv, d_rgb, d_therm))
}

/// Two-part density coupling evaluated at `points`.
///
/// The RGB-side gradient (scaled by `lambda_sigma_rgb`) goes only into the
/// RGB density grid, the thermal-side one (scaled by `lambda_sigma_therm`)
/// only into the thermal grid. Returns the unweighted mean.
pub fn sigma_coupling(
    points: &[Vec3],
    field: &MultispectralField,
    weights: &LossWeights,
    grads: &mut FieldGrad,
) -> Result<f64, LossError> {
    if field.densities_aliased() {
        return Err(LossError::ModeError);
    }
    if points.is_empty() {
        return Err(LossError::ShapeMismatch("no sample points".into()));
    }
    let samples: Vec<_> = points.iter().map(|p| field.query(p)).collect();
    let sr: Vec<f64> = samples.iter().map(|s| s.sigma_rgb).collect();
    let st: Vec<f64> = samples.iter().map(|s| s.sigma_therm).collect();
    let (value, d_rgb, d_therm) = sigma_coupling_values(&sr, &st)?;
    for (i, p) in points.iter().enumerate() {
        field.backward_sigma(p, Spectrum::Rgb, weights.lambda_sigma_rgb * d_rgb[i], grads);
        field.backward_sigma(p, Spectrum::Thermal, weights.lambda_sigma_therm * d_therm[i], grads);
    }
    Ok(value)
}

/// Cross-channel prior: ℓ1 distance between the forward differences of the
/// ground-truth grayscale `(r+g+b)/3` and of the rendered thermal values,
/// averaged over difference terms. Gradient is w.r.t. rendered thermal only.
pub fn cross_channel(patch: &PixelPatch) -> Result<(f64, Vec<f64>), LossError> {
    let k = patch.size;
    if k < 2 {
        return Err(LossError::PatchTooSmall(k));
    }
    let gray = patch.gray();
    let t = &patch.rendered_thermal;
    let inv = 1.0 / difference_terms(k) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; k * k];
    for_each_difference(k, |a, b| {
        let d = (gray[b] - gray[a]) - (t[b] - t[a]);
        value += d.abs();
        let s = sign(d) * inv;
        grad[b] -= s;
        grad[a] += s;
    });
    Ok((value * inv, grad))
}

/// Anisotropic total variation of rendered thermal values, averaged over
/// difference terms.
pub fn total_variation(values: &[f64], k: usize) -> Result<(f64, Vec<f64>), LossError> {
    if k < 2 {
        return Err(LossError::PatchTooSmall(k));
    }
    if values.len() != k * k {
        return Err(LossError::ShapeMismatch(format!("{} values for a {k}x{k} patch", values.len())));
    }
    let inv = 1.0 / difference_terms(k) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; k * k];
    for_each_difference(k, |a, b| {
        let d = values[b] - values[a];
        value += d.abs();
        let s = sign(d) * inv;
        grad[b] += s;
        grad[a] -= s;
    });
    Ok((value * inv, grad))
}

/// [`total_variation`] on a patch's rendered thermal values.
pub fn total_variation_patch(patch: &PixelPatch) -> Result<(f64, Vec<f64>), LossError> {
    total_variation(&patch.rendered_thermal, patch.size)
}
