//! PSNR and SSIM on held-out views.

use crate::dataset::{Dataset, Split};
use crate::field::MultispectralField;
use crate::geometry::{Camera, Spectrum};
use crate::image::Image;
use crate::renderer::{render_image, ImageChannels, RenderSettings};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    ImageTooSmall(usize, usize),
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), EvalError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(EvalError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )))
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, EvalError> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, EvalError> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" filtering: output is `(w - 10) × (h - 10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), w, h, &k);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), w, h, &k);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), w, h, &k);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Gaussian-window SSIM (11×11, σ = 1.5, dynamic range 1), mean over valid
/// window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, EvalError> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(EvalError::ImageTooSmall(a.width, a.height));
    }
    let total: f64 = (0..a.channels)
        .map(|c| {
            let ca: Vec<f64> = a.channel(c).data.iter().map(|v| *v as f64).collect();
            let cb: Vec<f64> = b.channel(c).data.iter().map(|v| *v as f64).collect();
            ssim_channel(&ca, &cb, a.width, a.height)
        })
        .sum();
    Ok(total / a.channels as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Db::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR value `{s}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub id: String,
    /// `"inf"` in JSON for exact matches.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMetrics {
    pub views: Vec<ViewMetrics>,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl SpectrumMetrics {
    pub fn from_views(views: Vec<ViewMetrics>) -> Self {
        let n = views.len().max(1) as f64;
        let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        Self {
            views,
            mean_psnr,
            mean_ssim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rgb: SpectrumMetrics,
    /// Against the thermal frames at their stored resolution.
    pub thermal: SpectrumMetrics,
    /// Against full-resolution thermal references, when the dataset has them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal_hires: Option<SpectrumMetrics>,
}

fn view_metrics(
    field: &MultispectralField,
    camera: &Camera,
    target: &Image,
    id: &str,
    settings: &RenderSettings,
) -> Result<ViewMetrics, EvalError> {
    let s = camera.spectrum();
    let settings = RenderSettings {
        channels: ImageChannels::Only(s),
        stride: 1,
        ..*settings
    };
    let view = render_image(field, camera, &settings);
    let rendered = match s {
        Spectrum::Rgb => view.image.rgb(),
        Spectrum::Thermal => view.image.thermal(),
    };
    Ok(ViewMetrics {
        id: id.to_string(),
        psnr: psnr(&rendered, target)?,
        ssim: ssim(&rendered, target)?,
    })
}

/// Renders every test frame and scores it against its image.
pub fn evaluate(field: &MultispectralField, dataset: &Dataset, settings: &RenderSettings) -> Result<MetricsReport, EvalError> {
    let mut rgb = Vec::new();
    let mut thermal = Vec::new();
    let mut hires = Vec::new();
    for f in dataset.frames.iter().filter(|f| f.split == Split::Test) {
        let m = view_metrics(field, &f.camera, &f.image, &f.id, settings)?;
        match f.spectrum() {
            Spectrum::Rgb => rgb.push(m),
            Spectrum::Thermal => {
                thermal.push(m);
                if let Some((cam, img)) = &f.hires {
                    hires.push(view_metrics(field, cam, img, &f.id, settings)?);
                }
            }
        }
    }
    Ok(MetricsReport {
        rgb: SpectrumMetrics::from_views(rgb),
        thermal: SpectrumMetrics::from_views(thermal),
        thermal_hires: (!hires.is_empty()).then(|| SpectrumMetrics::from_views(hires)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, c, (0..w * h * c).map(|_| r.gen::<f32>()).collect()).unwrap()
    }

    /// Per-window double loop with the 2D Gaussian weights.
    fn brute_ssim(a: &Image, b: &Image) -> f64 {
        let half = (SSIM_WINDOW / 2) as f64;
        let mut wts = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        let mut total = 0.0;
        for (i, row) in wts.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (x, y) = (j as f64 - half, i as f64 - half);
                *v = (-(x * x + y * y) / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let (c1, c2) = (0.0001, 0.0009);
        let mut acc = 0.0;
        let mut count = 0;
        for c in 0..a.channels {
            for y0 in 0..=a.height - SSIM_WINDOW {
                for x0 in 0..=a.width - SSIM_WINDOW {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let w = wts[i][j] / total;
                            let va = a.get(x0 + j, y0 + i, c) as f64;
                            let vb = b.get(x0 + j, y0 + i, c) as f64;
                            ma += w * va;
                            mb += w * vb;
                            saa += w * va * va;
                            sbb += w * vb * vb;
                            sab += w * va * vb;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(8, 8, 1, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let base = Image::from_data(4, 4, 1, vec![0.3; 16]).unwrap();
        let off = Image::from_data(4, 4, 1, vec![0.4; 16]).unwrap();
        assert!((psnr(&base, &off).unwrap() - 20.0).abs() < 1e-5);
        assert!(matches!(psnr(&a, &base), Err(EvalError::ShapeMismatch(_))));
    }

    #[test]
    fn psnr_matches_direct_sum() {
        let a = random_image(13, 7, 3, 2);
        let b = random_image(13, 7, 3, 3);
        let mut s = 0.0;
        for i in 0..a.data.len() {
            let d = a.data[i] as f64 - b.data[i] as f64;
            s += d * d;
        }
        let direct = 10.0 * (1.0 / (s / a.data.len() as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - direct).abs() < 1e-10);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_falls_with_noise() {
        let base = random_image(32, 32, 1, 4);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let noise: Vec<f64> = (0..base.data.len()).map(|_| normal.sample(&mut r)).collect();
        let scores: Vec<f64> = [0.01, 0.02, 0.05]
            .iter()
            .map(|s| {
                let noisy = Image {
                    data: base.data.iter().zip(&noise).map(|(v, n)| (*v as f64 + s * n) as f32).collect(),
                    ..base.clone()
                };
                psnr(&base, &noisy).unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(24, 20, 1, 6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // Checkerboard of 0.1 / 0.9: no mid-gray pixels.
        let pattern = Image::from_data(16, 16, 1, (0..256).map(|i| if (i / 16 + i % 16) % 2 == 0 { 0.1 } else { 0.9 }).collect())
            .unwrap();
        let neg = Image {
            data: pattern.data.iter().map(|v| 1.0 - v).collect(),
            ..pattern.clone()
        };
        assert!(ssim(&pattern, &neg).unwrap() < 0.5);
        let small = random_image(10, 30, 1, 7);
        assert_eq!(ssim(&small, &small), Err(EvalError::ImageTooSmall(10, 30)));
    }

    #[test]
    fn ssim_matches_window_loop() {
        for (w, h, c, seed) in [(11, 11, 1, 8), (17, 14, 3, 9), (23, 12, 1, 10)] {
            let a = random_image(w, h, c, seed);
            let b = Image {
                data: a.data.iter().zip(&random_image(w, h, c, seed + 100).data).map(|(x, y)| 0.7 * x + 0.3 * y).collect(),
                ..a.clone()
            };
            let fast = ssim(&a, &b).unwrap();
            assert!((fast - brute_ssim(&a, &b)).abs() < 1e-8);
            assert!((fast - ssim(&b, &a).unwrap()).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&fast));
        }
    }

    #[test]
    fn infinite_psnr_round_trips_through_json() {
        let m = ViewMetrics {
            id: "v".into(),
            psnr: f64::INFINITY,
            ssim: 1.0,
        };
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<ViewMetrics>(&text).unwrap(), m);
    }
}
