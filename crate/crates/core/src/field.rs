//! Explicit voxel-grid multispectral radiance field.
//!
//! Raw (pre-activation) values live on the grid corners spanning the
//! bounding box. A query trilinearly interpolates the raw values, then
//! applies softplus to densities and the logistic function to colors.
//! Emission is view independent.

use crate::geometry::{Spectrum, Vec3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Density every voxel starts at.
pub const INITIAL_DENSITY: f64 = 0.01;
const CHECKPOINT_MAGIC: &[u8; 5] = b"MSRF1";

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the RGB and thermal densities relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    /// Two densities tied together only by the cross-spectral regularizers.
    Separate,
    /// One density grid used by both spectra.
    Shared,
    /// Two densities with no coupling terms at all.
    Independent,
}

impl Coupling {
    pub fn as_str(self) -> &'static str {
        match self {
            Coupling::Separate => "separate",
            Coupling::Shared => "shared",
            Coupling::Independent => "independent",
        }
    }

    fn code(self) -> u8 {
        match self {
            Coupling::Separate => 0,
            Coupling::Shared => 1,
            Coupling::Independent => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Coupling::Separate),
            1 => Some(Coupling::Shared),
            2 => Some(Coupling::Independent),
            _ => None,
        }
    }
}

impl fmt::Display for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Coupling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "separate" => Ok(Coupling::Separate),
            "shared" => Ok(Coupling::Shared),
            "independent" => Ok(Coupling::Independent),
            other => Err(format!("unknown coupling mode `{other}`")),
        }
    }
}

/// One parameter tensor: `channels` values per grid corner, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Grid {
    fn filled(points: usize, channels: usize, value: f32) -> Self {
        Self {
            channels,
            data: vec![value; points * channels],
        }
    }
}

/// Indices of the parameter tensors. In shared mode both densities point
/// at the same slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub sigma_rgb: usize,
    pub sigma_therm: usize,
    pub color_rgb: usize,
    pub color_therm: usize,
}

impl Layout {
    fn for_coupling(coupling: Coupling) -> Self {
        match coupling {
            Coupling::Shared => Layout {
                sigma_rgb: 0,
                sigma_therm: 0,
                color_rgb: 1,
                color_therm: 2,
            },
            _ => Layout {
                sigma_rgb: 0,
                sigma_therm: 1,
                color_rgb: 2,
                color_therm: 3,
            },
        }
    }

    pub fn sigma(&self, spectrum: Spectrum) -> usize {
        match spectrum {
            Spectrum::Rgb => self.sigma_rgb,
            Spectrum::Thermal => self.sigma_therm,
        }
    }

    pub fn color(&self, spectrum: Spectrum) -> usize {
        match spectrum {
            Spectrum::Rgb => self.color_rgb,
            Spectrum::Thermal => self.color_therm,
        }
    }
}

/// Activated field values at a point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldSample {
    pub sigma_rgb: f64,
    pub sigma_therm: f64,
    pub color_rgb: [f64; 3],
    pub color_therm: f64,
}

impl FieldSample {
    pub fn sigma(&self, spectrum: Spectrum) -> f64 {
        match spectrum {
            Spectrum::Rgb => self.sigma_rgb,
            Spectrum::Thermal => self.sigma_therm,
        }
    }
}

/// Density and color of one spectrum plus activation derivatives w.r.t.
/// the interpolated raw values.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpectralSample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub dsigma_draw: f64,
    pub dcolor_draw: [f64; 3],
}

/// Eight grid corners surrounding a point with their trilinear weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrad {
    pub grids: Vec<Grid>,
}

impl FieldGrad {
    pub fn zero(&mut self) {
        for g in &mut self.grids {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrad) {
        for (a, b) in self.grids.iter_mut().zip(&other.grids) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grids.iter().all(|g| g.data.iter().all(|v| *v == 0.0))
    }

    pub fn grid(&self, slot: usize) -> &Grid {
        &self.grids[slot]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultispectralField {
    bbox_min: Vec3,
    bbox_max: Vec3,
    resolution: [usize; 3],
    coupling: Coupling,
    layout: Layout,
    grids: Vec<Grid>,
}

impl MultispectralField {
    /// Field with density `INITIAL_DENSITY` and colors 0.5 everywhere inside the box.
    pub fn new(
        bbox_min: Vec3,
        bbox_max: Vec3,
        resolution: [usize; 3],
        coupling: Coupling,
    ) -> Result<Self, FieldError> {
        if !(0..3).all(|a| bbox_min[a] < bbox_max[a]) {
            return Err(FieldError::Invalid(format!(
                "empty bounding box {bbox_min:?}..{bbox_max:?}"
            )));
        }
        if resolution.iter().any(|&n| n == 0) {
            return Err(FieldError::Invalid("zero resolution".into()));
        }
        let n = resolution.iter().product();
        let raw_sigma = softplus_inverse(INITIAL_DENSITY) as f32;
        let layout = Layout::for_coupling(coupling);
        let mut grids = vec![Grid::filled(n, 1, raw_sigma)];
        if coupling != Coupling::Shared {
            grids.push(Grid::filled(n, 1, raw_sigma));
        }
        grids.push(Grid::filled(n, 3, 0.0));
        grids.push(Grid::filled(n, 1, 0.0));
        Ok(Self {
            bbox_min,
            bbox_max,
            resolution,
            coupling,
            layout,
            grids,
        })
    }

    pub fn bbox_min(&self) -> &Vec3 {
        &self.bbox_min
    }

    pub fn bbox_max(&self) -> &Vec3 {
        &self.bbox_max
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn coupling(&self) -> Coupling {
        self.coupling
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn num_points(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn grids(&self) -> &[Grid] {
        &self.grids
    }

    pub fn grids_mut(&mut self) -> &mut [Grid] {
        &mut self.grids
    }

    pub fn grid(&self, slot: usize) -> &Grid {
        &self.grids[slot]
    }

    pub fn grid_mut(&mut self, slot: usize) -> &mut Grid {
        &mut self.grids[slot]
    }

    /// True when both spectra read the same density storage.
    pub fn densities_aliased(&self) -> bool {
        self.layout.sigma_rgb == self.layout.sigma_therm
    }

    pub fn zero_grad(&self) -> FieldGrad {
        FieldGrad {
            grids: self
                .grids
                .iter()
                .map(|g| Grid::filled(g.data.len() / g.channels, g.channels, 0.0))
                .collect(),
        }
    }

    pub fn point_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    /// World position of grid corner `(i, j, k)`.
    pub fn point_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let idx = [i, j, k];
        Vec3::from_fn(|a, _| {
            let n = self.resolution[a];
            if n == 1 {
                0.5 * (self.bbox_min[a] + self.bbox_max[a])
            } else {
                self.bbox_min[a] + (self.bbox_max[a] - self.bbox_min[a]) * idx[a] as f64 / (n - 1) as f64
            }
        })
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|a| x[a] >= self.bbox_min[a] && x[a] <= self.bbox_max[a])
    }

    /// Trilinear stencil, or `None` outside the box.
    pub fn stencil(&self, x: &Vec3) -> Option<Stencil> {
        if !self.contains(x) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        let mut stride = [0usize; 3];
        let strides = [1, self.resolution[0], self.resolution[0] * self.resolution[1]];
        for a in 0..3 {
            let n = self.resolution[a];
            if n == 1 {
                continue;
            }
            let u = (x[a] - self.bbox_min[a]) / (self.bbox_max[a] - self.bbox_min[a]) * (n - 1) as f64;
            let i0 = (u.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = u - i0 as f64;
            stride[a] = strides[a];
        }
        let origin = base[0] + strides[1] * base[1] + strides[2] * base[2];
        let mut index = [0usize; 8];
        let mut weight = [0f64; 8];
        for c in 0..8 {
            let mut idx = origin;
            let mut w = 1.0;
            for a in 0..3 {
                if c >> a & 1 == 1 {
                    idx += stride[a];
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            index[c] = idx;
            weight[c] = w;
        }
        Some(Stencil { index, weight })
    }

    fn interpolate<const C: usize>(&self, slot: usize, s: &Stencil) -> [f64; C] {
        let g = &self.grids[slot];
        debug_assert_eq!(g.channels, C);
        let mut out = [0.0; C];
        for c in 0..8 {
            let w = s.weight[c];
            if w == 0.0 {
                continue;
            }
            let base = s.index[c] * C;
            for (ch, o) in out.iter_mut().enumerate() {
                *o += w * g.data[base + ch] as f64;
            }
        }
        out
    }

    fn scatter<const C: usize>(&self, slot: usize, s: &Stencil, upstream: [f64; C], grads: &mut FieldGrad) {
        let g = &mut grads.grids[slot];
        for c in 0..8 {
            let w = s.weight[c];
            if w == 0.0 {
                continue;
            }
            let base = s.index[c] * C;
            for ch in 0..C {
                g.data[base + ch] += (w * upstream[ch]) as f32;
            }
        }
    }

    /// Raw (pre-activation) interpolants `(sigma_rgb, sigma_therm, color_rgb, color_therm)`.
    pub fn query_raw(&self, x: &Vec3) -> Option<(f64, f64, [f64; 3], f64)> {
        let s = self.stencil(x)?;
        let [sr] = self.interpolate::<1>(self.layout.sigma_rgb, &s);
        let [st] = self.interpolate::<1>(self.layout.sigma_therm, &s);
        let c = self.interpolate::<3>(self.layout.color_rgb, &s);
        let [ct] = self.interpolate::<1>(self.layout.color_therm, &s);
        Some((sr, st, c, ct))
    }

    pub fn query(&self, x: &Vec3) -> FieldSample {
        match self.query_raw(x) {
            None => FieldSample {
                sigma_rgb: 0.0,
                sigma_therm: 0.0,
                color_rgb: [0.5; 3],
                color_therm: 0.5,
            },
            Some((sr, st, c, ct)) => FieldSample {
                sigma_rgb: softplus(sr),
                sigma_therm: softplus(st),
                color_rgb: c.map(sigmoid),
                color_therm: sigmoid(ct),
            },
        }
    }

    /// Density and color for one spectrum from a precomputed stencil.
    pub fn sample_spectrum(&self, s: &Stencil, spectrum: Spectrum) -> SpectralSample {
        let [raw_sigma] = self.interpolate::<1>(self.layout.sigma(spectrum), s);
        let mut out = SpectralSample {
            sigma: softplus(raw_sigma),
            dsigma_draw: sigmoid(raw_sigma),
            ..Default::default()
        };
        match spectrum {
            Spectrum::Rgb => {
                let raw = self.interpolate::<3>(self.layout.color_rgb, s);
                for ch in 0..3 {
                    let c = sigmoid(raw[ch]);
                    out.color[ch] = c;
                    out.dcolor_draw[ch] = c * (1.0 - c);
                }
            }
            Spectrum::Thermal => {
                let [raw] = self.interpolate::<1>(self.layout.color_therm, s);
                let c = sigmoid(raw);
                out.color[0] = c;
                out.dcolor_draw[0] = c * (1.0 - c);
            }
        }
        out
    }

    /// Both densities from a precomputed stencil.
    pub fn sample_densities(&self, s: &Stencil) -> (f64, f64) {
        let [sr] = self.interpolate::<1>(self.layout.sigma_rgb, s);
        let [st] = self.interpolate::<1>(self.layout.sigma_therm, s);
        (softplus(sr), softplus(st))
    }

    /// Adds `d loss/d sigma` and `d loss/d color` of one spectrum into `grads`.
    pub fn backward_spectrum(
        &self,
        x: &Vec3,
        spectrum: Spectrum,
        dsigma: f64,
        dcolor: &[f64],
        grads: &mut FieldGrad,
    ) {
        let Some(s) = self.stencil(x) else { return };
        let sample = self.sample_spectrum(&s, spectrum);
        if dsigma != 0.0 {
            self.scatter::<1>(self.layout.sigma(spectrum), &s, [dsigma * sample.dsigma_draw], grads);
        }
        match spectrum {
            Spectrum::Rgb => {
                let up = [
                    dcolor[0] * sample.dcolor_draw[0],
                    dcolor[1] * sample.dcolor_draw[1],
                    dcolor[2] * sample.dcolor_draw[2],
                ];
                if up.iter().any(|v| *v != 0.0) {
                    self.scatter::<3>(self.layout.color_rgb, &s, up, grads);
                }
            }
            Spectrum::Thermal => {
                let up = dcolor[0] * sample.dcolor_draw[0];
                if up != 0.0 {
                    self.scatter::<1>(self.layout.color_therm, &s, [up], grads);
                }
            }
        }
    }

    /// Density-only backward for one density grid.
    pub fn backward_sigma(&self, x: &Vec3, spectrum: Spectrum, dsigma: f64, grads: &mut FieldGrad) {
        if dsigma == 0.0 {
            return;
        }
        let Some(s) = self.stencil(x) else { return };
        let slot = self.layout.sigma(spectrum);
        let [raw] = self.interpolate::<1>(slot, &s);
        self.scatter::<1>(slot, &s, [dsigma * sigmoid(raw)], grads);
    }

    /// Chain rule of [`MultispectralField::query`]: adds `upstream · ∂sample/∂raw`
    /// into the eight surrounding corners of every channel.
    pub fn query_backward(&self, x: &Vec3, upstream: &FieldSample, grads: &mut FieldGrad) {
        self.backward_spectrum(x, Spectrum::Rgb, upstream.sigma_rgb, &upstream.color_rgb, grads);
        self.backward_spectrum(x, Spectrum::Thermal, upstream.sigma_therm, &[upstream.color_therm], grads);
    }

    /// Resamples every raw grid onto a new resolution by trilinear interpolation.
    pub fn upsampled(&self, resolution: [usize; 3]) -> Result<Self, FieldError> {
        let mut out = Self::new(self.bbox_min, self.bbox_max, resolution, self.coupling)?;
        for k in 0..resolution[2] {
            for j in 0..resolution[1] {
                for i in 0..resolution[0] {
                    let p = out.point_position(i, j, k);
                    let idx = out.point_index(i, j, k);
                    let s = self.stencil(&p).expect("grid point inside box");
                    for slot in 0..self.grids.len() {
                        let ch = self.grids[slot].channels;
                        for c in 0..ch {
                            let v: f64 = (0..8)
                                .map(|n| s.weight[n] * self.grids[slot].data[s.index[n] * ch + c] as f64)
                                .sum();
                            out.grids[slot].data[idx * ch + c] = v as f32;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Checkpoint bytes: magic, resolution, box, coupling, then each raw grid
    /// channel-planar, little-endian f32, x fastest.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let n = self.num_points();
        let mut out = Vec::with_capacity(64 + n * 4 * 6);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for r in self.resolution {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
        for v in self.bbox_min.iter().chain(self.bbox_max.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.coupling.code());
        for g in &self.grids {
            for c in 0..g.channels {
                for p in 0..n {
                    out.extend_from_slice(&g.data[p * g.channels + c].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, FieldError> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| FieldError::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FieldError::Checkpoint("bad magic".into()));
        }
        let mut res = [0usize; 3];
        for v in &mut res {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| FieldError::Checkpoint("truncated header".into()))?;
            *v = u32::from_le_bytes(b) as usize;
        }
        let mut bbox = [0f64; 6];
        for v in &mut bbox {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| FieldError::Checkpoint("truncated header".into()))?;
            *v = f64::from_le_bytes(b);
        }
        let mut code = [0u8; 1];
        r.read_exact(&mut code)
            .map_err(|_| FieldError::Checkpoint("truncated header".into()))?;
        let coupling = Coupling::from_code(code[0])
            .ok_or_else(|| FieldError::Checkpoint(format!("unknown coupling code {}", code[0])))?;
        let mut field = Self::new(
            Vec3::new(bbox[0], bbox[1], bbox[2]),
            Vec3::new(bbox[3], bbox[4], bbox[5]),
            res,
            coupling,
        )?;
        let n = field.num_points();
        let expected: usize = field.grids.iter().map(|g| g.channels * n * 4).sum();
        if r.len() != expected {
            return Err(FieldError::Checkpoint(format!(
                "payload is {} bytes, expected {expected}",
                r.len()
            )));
        }
        let mut chunks = r.chunks_exact(4);
        for g in &mut field.grids {
            for c in 0..g.channels {
                for p in 0..n {
                    let b = chunks.next().expect("length checked");
                    g.data[p * g.channels + c] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                }
            }
        }
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_checkpoint_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_field(res: usize, coupling: Coupling) -> MultispectralField {
        MultispectralField::new(Vec3::zeros(), Vec3::repeat(1.0), [res; 3], coupling).unwrap()
    }

    fn randomize(field: &mut MultispectralField, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in field.grids_mut() {
            g.data.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        }
    }

    #[test]
    fn constant_grid_gives_constant_density() {
        let mut f = unit_field(4, Coupling::Separate);
        let slot = f.layout().sigma_rgb;
        f.grid_mut(slot).data.iter_mut().for_each(|v| *v = 1.3);
        for x in [Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.99, 0.5, 0.01), Vec3::repeat(0.5)] {
            assert_abs_diff_eq!(f.query(&x).sigma_rgb, softplus(1.3_f32 as f64), epsilon = 1e-12);
        }
    }

    #[test]
    fn corner_query_reads_that_corner() {
        let mut f = unit_field(3, Coupling::Separate);
        randomize(&mut f, 3);
        let p = f.point_position(1, 2, 0);
        let idx = f.point_index(1, 2, 0);
        let s = f.query(&p);
        let l = f.layout();
        assert_abs_diff_eq!(s.sigma_therm, softplus(f.grid(l.sigma_therm).data[idx] as f64), epsilon = 1e-12);
        assert_abs_diff_eq!(s.color_rgb[2], sigmoid(f.grid(l.color_rgb).data[idx * 3 + 2] as f64), epsilon = 1e-12);
    }

    #[test]
    fn midpoint_of_2x2x2_is_mean_of_corners() {
        let mut f = unit_field(2, Coupling::Separate);
        let slot = f.layout().sigma_rgb;
        for (i, v) in f.grid_mut(slot).data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let (raw, ..) = f.query_raw(&Vec3::repeat(0.5)).unwrap();
        assert_abs_diff_eq!(raw, 3.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.query(&Vec3::repeat(0.5)).sigma_rgb, softplus(3.5), epsilon = 1e-12);
    }

    #[test]
    fn outside_box_is_empty() {
        let f = unit_field(4, Coupling::Separate);
        let s = f.query(&Vec3::new(1.5, 0.5, 0.5));
        assert_eq!(s.sigma_rgb, 0.0);
        assert_eq!(s.sigma_therm, 0.0);
        assert_eq!(s.color_rgb, [0.5; 3]);
        assert_eq!(s.color_therm, 0.5);
        let mut g = f.zero_grad();
        f.query_backward(&Vec3::new(-0.1, 0.5, 0.5), &FieldSample { sigma_rgb: 1.0, ..Default::default() }, &mut g);
        assert!(g.is_zero());
    }

    #[test]
    fn initial_density() {
        let f = unit_field(4, Coupling::Independent);
        assert_abs_diff_eq!(f.query(&Vec3::repeat(0.3)).sigma_therm, INITIAL_DENSITY, epsilon = 1e-7);
    }

    #[test]
    fn zero_upstream_leaves_gradients_untouched() {
        let mut f = unit_field(4, Coupling::Separate);
        randomize(&mut f, 1);
        let mut g = f.zero_grad();
        f.query_backward(&Vec3::new(0.3, 0.6, 0.2), &FieldSample::default(), &mut g);
        assert!(g.is_zero());
    }

    #[test]
    fn corner_gradient_lands_on_corner() {
        let mut f = unit_field(4, Coupling::Separate);
        randomize(&mut f, 2);
        let p = f.point_position(2, 1, 3);
        let idx = f.point_index(2, 1, 3);
        let mut g = f.zero_grad();
        let up = FieldSample { sigma_rgb: 1.0, ..Default::default() };
        f.query_backward(&p, &up, &mut g);
        let slot = f.layout().sigma_rgb;
        let raw = f.grid(slot).data[idx] as f64;
        let nonzero: Vec<usize> = (0..g.grid(slot).data.len()).filter(|&i| g.grid(slot).data[i] != 0.0).collect();
        assert_eq!(nonzero, vec![idx]);
        assert_abs_diff_eq!(g.grid(slot).data[idx] as f64, sigmoid(raw), epsilon = 1e-6);
    }

    #[test]
    fn shared_mode_aliases_density() {
        let mut f = unit_field(4, Coupling::Shared);
        assert!(f.densities_aliased());
        assert_eq!(f.grids().len(), 3);
        randomize(&mut f, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0));
            let s = f.query(&x);
            assert_eq!(s.sigma_rgb, s.sigma_therm);
        }
    }

    /// Central differences against the analytic chain rule, dividing by the
    /// perturbation actually stored in f32.
    #[test]
    fn query_backward_matches_finite_differences() {
        let mut f = unit_field(8, Coupling::Separate);
        randomize(&mut f, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-3f32;
        let mut checked = 0;
        for _ in 0..50 {
            let x = Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0));
            let up = FieldSample {
                sigma_rgb: rng.gen_range(-1.0..1.0),
                sigma_therm: rng.gen_range(-1.0..1.0),
                color_rgb: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                color_therm: rng.gen_range(-1.0..1.0),
            };
            let objective = |f: &MultispectralField| {
                let s = f.query(&x);
                up.sigma_rgb * s.sigma_rgb
                    + up.sigma_therm * s.sigma_therm
                    + (0..3).map(|c| up.color_rgb[c] * s.color_rgb[c]).sum::<f64>()
                    + up.color_therm * s.color_therm
            };
            let mut g = f.zero_grad();
            f.query_backward(&x, &up, &mut g);
            let st = f.stencil(&x).unwrap();
            for slot in 0..f.grids().len() {
                let ch = f.grid(slot).channels;
                for n in 0..8 {
                    for c in 0..ch {
                        let i = st.index[n] * ch + c;
                        let orig = f.grid(slot).data[i];
                        f.grid_mut(slot).data[i] = orig + h;
                        let hi = f.grid(slot).data[i];
                        let fp = objective(&f);
                        f.grid_mut(slot).data[i] = orig - h;
                        let lo = f.grid(slot).data[i];
                        let fm = objective(&f);
                        f.grid_mut(slot).data[i] = orig;
                        let fd = (fp - fm) / (hi as f64 - lo as f64);
                        let an = g.grid(slot).data[i] as f64;
                        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                        assert!(rel < 1e-4, "slot {slot} idx {i}: fd {fd} analytic {an}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn raising_a_density_voxel_never_lowers_density() {
        let mut f = unit_field(5, Coupling::Separate);
        randomize(&mut f, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let points: Vec<Vec3> = (0..200).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
        let before: Vec<f64> = points.iter().map(|p| f.query(p).sigma_rgb).collect();
        let slot = f.layout().sigma_rgb;
        let idx = f.point_index(2, 2, 2);
        f.grid_mut(slot).data[idx] += 0.7;
        for (p, b) in points.iter().zip(before) {
            assert!(f.query(p).sigma_rgb >= b);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for coupling in [Coupling::Separate, Coupling::Shared, Coupling::Independent] {
            let mut f = MultispectralField::new(Vec3::new(-1.0, -0.5, 0.0), Vec3::new(1.0, 0.5, 2.0), [3, 4, 5], coupling)
                .unwrap();
            randomize(&mut f, 4);
            let bytes = f.to_checkpoint_bytes();
            assert_eq!(&bytes[..5], b"MSRF1");
            let back = MultispectralField::from_checkpoint_bytes(&bytes).unwrap();
            assert_eq!(back, f);
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(MultispectralField::from_checkpoint_bytes(b"NOPE").is_err());
        let f = unit_field(2, Coupling::Separate);
        let mut bytes = f.to_checkpoint_bytes();
        bytes.pop();
        assert!(MultispectralField::from_checkpoint_bytes(&bytes).is_err());
    }

    #[test]
    fn upsampling_preserves_values() {
        let mut f = unit_field(3, Coupling::Separate);
        randomize(&mut f, 8);
        let up = f.upsampled([5, 5, 5]).unwrap();
        for x in [Vec3::new(0.25, 0.5, 0.75), Vec3::new(0.0, 1.0, 0.5)] {
            let a = f.query(&x);
            let b = up.query(&x);
            assert_abs_diff_eq!(a.sigma_rgb, b.sigma_rgb, epsilon = 1e-5);
            assert_abs_diff_eq!(a.color_therm, b.color_therm, epsilon = 1e-5);
        }
    }

    #[test]
    fn single_point_axis_is_constant() {
        let mut f = unit_field(1, Coupling::Separate);
        let slot = f.layout().color_therm;
        f.grid_mut(slot).data[0] = 0.4;
        assert_abs_diff_eq!(f.query(&Vec3::new(0.1, 0.9, 0.3)).color_therm, sigmoid(0.4_f32 as f64), epsilon = 1e-12);
    }
}
