//! Planar-target calibration of an RGB + thermal rig: per-camera intrinsics
//! and distortion, the fixed thermal-from-RGB transform, and metric scale.
//!
//! Target frame: the plane `Z = 0`, meters. A [`Pose`] here maps target
//! coordinates into the camera frame.

use crate::geometry::{exp_so3, Camera, Intrinsics, Mat3, Pose, Spectrum, Vec3};
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("ill-conditioned views: {0}")]
    IllConditioned(String),
    #[error("Levenberg-Marquardt stalled at RMSE {} px", .best.rmse)]
    LmStalled { best: Box<Refinement> },
    #[error("inconsistent pairs: rotations deviate by {0:.3} degrees")]
    InconsistentPairs(f64),
    #[error("camera centers coincide")]
    CoincidentCenters,
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Asymmetric circle grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub rows: usize,
    pub cols: usize,
    /// Meters.
    pub center_spacing: f64,
    pub circle_diameter: f64,
    pub thickness: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            rows: 11,
            cols: 4,
            center_spacing: 0.038,
            circle_diameter: 0.015,
            thickness: 0.002,
        }
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<(), CalibError> {
        if self.rows < 2 || self.cols < 2 || !(self.center_spacing > 0.0) {
            return Err(CalibError::Invalid(format!(
                "target needs rows, cols >= 2 and positive spacing, got {}x{} at {}",
                self.rows, self.cols, self.center_spacing
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `((2j + i mod 2) s/2, i s/2, 0)`; odd rows are shifted by half a column.
    pub fn point(&self, i: usize, j: usize) -> Vec3 {
        let h = 0.5 * self.center_spacing;
        Vec3::new((2 * j + i % 2) as f64 * h, i as f64 * h, 0.0)
    }

    /// Row-major.
    pub fn points(&self) -> Vec<Vec3> {
        (0..self.rows)
            .flat_map(|i| (0..self.cols).map(move |j| (i, j)))
            .map(|(i, j)| self.point(i, j))
            .collect()
    }
}

/// Circle centers found in one photograph, ordered like [`TargetSpec::points`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewDetections {
    pub id: String,
    pub spectrum: Spectrum,
    pub pixels: Vec<[f64; 2]>,
    /// Shared by the RGB and thermal shots taken simultaneously.
    pub pair_id: u32,
}

impl ViewDetections {
    pub fn validate(&self, target: &TargetSpec) -> Result<(), CalibError> {
        if self.pixels.len() != target.len() {
            return Err(CalibError::Invalid(format!(
                "view `{}` has {} detections, target has {}",
                self.id,
                self.pixels.len(),
                target.len()
            )));
        }
        if !self.pixels.iter().flatten().all(|v| v.is_finite()) {
            return Err(CalibError::Invalid(format!("view `{}` has non-finite detections", self.id)));
        }
        Ok(())
    }

    fn points(&self) -> Vec<Vector2<f64>> {
        self.pixels.iter().map(|p| Vector2::new(p[0], p[1])).collect()
    }
}

/// Translates to the centroid and scales to mean distance √2.
fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { 2f64.sqrt() / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Ratio of the smallest to largest spread of a point set; 0 for collinear points.
fn spread_ratio(points: &[Vector2<f64>]) -> f64 {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let cov = points.iter().map(|p| (p - c) * (p - c).transpose()).sum::<nalgebra::Matrix2<f64>>() / n;
    let ev = cov.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if hi <= 0.0 {
        0.0
    } else {
        (lo.max(0.0) / hi).sqrt()
    }
}

/// Unit right singular vector of `a` with the smallest singular value,
/// together with the two smallest singular values.
fn null_vector(a: &DMatrix<f64>) -> (DVector<f64>, f64, f64) {
    let cols = a.ncols();
    let mut padded = a.clone();
    if padded.nrows() < cols {
        padded = padded.resize_vertically(cols, 0.0);
    }
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let v = v_t.row(order[0]).transpose();
    (v, svd.singular_values[order[0]], svd.singular_values[order[1]])
}

/// Planar homography `pixel ~ H (X, Y, 1)` by normalized DLT, `‖H‖_F = 1`.
pub fn estimate_homography(pixels: &[Vector2<f64>], planar: &[Vector2<f64>]) -> Result<Matrix3<f64>, CalibError> {
    if pixels.len() != planar.len() {
        return Err(CalibError::Invalid(format!("{} pixels for {} points", pixels.len(), planar.len())));
    }
    if pixels.len() < 4 {
        return Err(CalibError::DegenerateConfiguration(format!("{} correspondences, need 4", pixels.len())));
    }
    const COLLINEAR: f64 = 1e-9;
    if spread_ratio(pixels) < COLLINEAR || spread_ratio(planar) < COLLINEAR {
        return Err(CalibError::DegenerateConfiguration("points are collinear".into()));
    }
    let tp = hartley(pixels);
    let tq = hartley(planar);
    let mut a = DMatrix::zeros(2 * pixels.len(), 9);
    for (k, (p, q)) in pixels.iter().zip(planar).enumerate() {
        let (u, v) = {
            let x = apply_h(&tp, p);
            (x.x, x.y)
        };
        let x = apply_h(&tq, q);
        let (x, y) = (x.x, x.y);
        let r0 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u];
        let r1 = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v];
        for c in 0..9 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }
    let (h, _, second) = null_vector(&a);
    if second < 1e-12 {
        return Err(CalibError::DegenerateConfiguration("homography is not unique".into()));
    }
    let hn = Matrix3::from_row_slice(h.as_slice());
    let tp_inv = tp.try_inverse().expect("similarity is invertible");
    let h = tp_inv * hn * tq;
    Ok(h / h.norm())
}

/// Closed-form pinhole intrinsics (zero skew) from at least three target
/// homographies, plus one pose per homography.
pub fn init_intrinsics(homographies: &[Matrix3<f64>], width: u32, height: u32) -> Result<(Intrinsics, Vec<Pose>), CalibError> {
    if homographies.len() < 3 {
        return Err(CalibError::IllConditioned(format!("{} views, need at least 3", homographies.len())));
    }
    // Rows v_ij · b = 0 with b = (B11, B12, B22, B13, B23, B33).
    let v = |h: &Matrix3<f64>, i: usize, j: usize| {
        let (hi, hj) = (h.column(i), h.column(j));
        [
            hi[0] * hj[0],
            hi[0] * hj[1] + hi[1] * hj[0],
            hi[1] * hj[1],
            hi[2] * hj[0] + hi[0] * hj[2],
            hi[2] * hj[1] + hi[1] * hj[2],
            hi[2] * hj[2],
        ]
    };
    // Scale pixel coordinates to O(1) so the conic system is well conditioned.
    let s = 1.0 / width.max(height) as f64;
    let norm = Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0);
    let hs: Vec<Matrix3<f64>> = homographies.iter().map(|h| norm * h).collect();
    let mut a = DMatrix::zeros(2 * hs.len() + 1, 6);
    for (k, h) in hs.iter().enumerate() {
        let v12 = v(h, 0, 1);
        let v11 = v(h, 0, 0);
        let v22 = v(h, 1, 1);
        let diff: [f64; 6] = std::array::from_fn(|c| v11[c] - v22[c]);
        // Unit rows weight every view equally and keep singular values O(1).
        for (r, row) in [(2 * k, v12), (2 * k + 1, diff)] {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for c in 0..6 {
                a[(r, c)] = row[c] / n;
            }
        }
    }
    let last = a.nrows() - 1;
    a[(last, 1)] = 1.0;
    let (b, smallest, second) = null_vector(&a);
    // Noise lifts the smallest value; a second near-null direction means the
    // views do not pin down the conic.
    if second < 1e-6 {
        return Err(CalibError::IllConditioned(format!(
            "conic system has singular values {smallest:.3e}, {second:.3e}"
        )));
    }
    let (b11, b12, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4], b[5]);
    let den = b11 * b22 - b12 * b12;
    let v0 = (b12 * b13 - b11 * b23) / den;
    let lambda = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11;
    let (fx2, fy2) = (lambda / b11, lambda * b11 / den);
    if !(fx2 > 0.0 && fy2 > 0.0 && den.abs() > 0.0) {
        return Err(CalibError::IllConditioned("image of the absolute conic is not positive definite".into()));
    }
    let (fx, fy) = (fx2.sqrt(), fy2.sqrt());
    let u0 = -b13 * fx * fx / lambda;
    let k = Intrinsics::pinhole(fx / s, fy / s, u0 / s, v0 / s, width, height);
    let poses = homographies.iter().map(|h| pose_from_homography(&k, h)).collect();
    Ok((k, poses))
}

fn k_matrix(k: &Intrinsics) -> Matrix3<f64> {
    Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0)
}

/// `[r1 r2 t] ∝ K⁻¹ H`, sign chosen so the target lies in front of the camera.
pub fn pose_from_homography(k: &Intrinsics, h: &Matrix3<f64>) -> Pose {
    let m = k_matrix(k).try_inverse().expect("positive focal lengths") * h;
    let mut scale = 1.0 / m.column(0).norm();
    if m[(2, 2)] * scale < 0.0 {
        scale = -scale;
    }
    let r1 = m.column(0) * scale;
    let r2 = m.column(1) * scale;
    let r3 = r1.cross(&r2);
    let r = Mat3::from_columns(&[r1, r2, r3]);
    Pose::from_approx(&r, m.column(2) * scale)
}

/// Pixel of target point `x` under intrinsics `k` and pose `pose`; `None` behind the camera.
fn project_point(k: &Intrinsics, pose: &Pose, x: &Vec3) -> Option<Vector2<f64>> {
    let c = pose.transform_point(x);
    if c.z <= 0.0 {
        return None;
    }
    let (xd, yd) = k.distort(c.x / c.z, c.y / c.z);
    Some(Vector2::new(k.fx * xd + k.cx, k.fy * yd + k.cy))
}

/// Root-mean-square pixel distance between projected `points` and `pixels`.
pub fn reprojection_rmse(k: &Intrinsics, pose: &Pose, points: &[Vec3], pixels: &[Vector2<f64>]) -> f64 {
    let sum: f64 = points
        .iter()
        .zip(pixels)
        .map(|(x, p)| project_point(k, pose, x).map_or(f64::INFINITY, |q| (q - p).norm_squared()))
        .sum();
    (sum / points.len().max(1) as f64).sqrt()
}

/// Intrinsics, per-view poses and residuals after nonlinear refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub intrinsics: Intrinsics,
    pub poses: Vec<Pose>,
    pub view_rmse: Vec<f64>,
    /// Over all detections of all views.
    pub rmse: f64,
    pub iterations: usize,
}

pub const LM_INITIAL_DAMPING: f64 = 1e-3;
pub const LM_MAX_ITERATIONS: usize = 200;
const LM_MAX_DAMPING: f64 = 1e12;
const N_INTRINSIC: usize = 8;

fn intrinsic_params(k: &Intrinsics) -> [f64; N_INTRINSIC] {
    [k.fx, k.fy, k.cx, k.cy, k.k1, k.k2, k.p1, k.p2]
}

fn with_intrinsic_params(k: &Intrinsics, p: &[f64]) -> Intrinsics {
    Intrinsics {
        fx: p[0],
        fy: p[1],
        cx: p[2],
        cy: p[3],
        k1: p[4],
        k2: p[5],
        p1: p[6],
        p2: p[7],
        ..*k
    }
}

/// Applies a local update `(ω, δt)`: `R ← exp(ω) R`, `t ← t + δt`.
fn perturb_pose(pose: &Pose, d: &[f64]) -> Pose {
    let r = exp_so3(&Vec3::new(d[0], d[1], d[2])) * pose.rotation();
    Pose::from_approx(&r, pose.translation() + Vec3::new(d[3], d[4], d[5]))
}

fn residuals(k: &Intrinsics, pose: &Pose, points: &[Vec3], pixels: &[Vector2<f64>], out: &mut [f64]) {
    for (n, (x, p)) in points.iter().zip(pixels).enumerate() {
        // A point behind the camera gets a large finite residual.
        let q = project_point(k, pose, x).unwrap_or(Vector2::new(1e6, 1e6));
        out[2 * n] = q.x - p.x;
        out[2 * n + 1] = q.y - p.y;
    }
}

fn total_cost(k: &Intrinsics, poses: &[Pose], points: &[Vec3], views: &[Vec<Vector2<f64>>]) -> f64 {
    let mut r = vec![0.0; 2 * points.len()];
    poses
        .iter()
        .zip(views)
        .map(|(pose, px)| {
            residuals(k, pose, points, px, &mut r);
            r.iter().map(|v| v * v).sum::<f64>()
        })
        .sum()
}

/// Normal-equation contribution of one view: `JᵀJ` and `Jᵀr` restricted to
/// the intrinsics and this view's six pose parameters.
fn view_block(k: &Intrinsics, pose: &Pose, points: &[Vec3], pixels: &[Vector2<f64>]) -> (SMatrix<f64, 14, 14>, SMatrix<f64, 14, 1>) {
    let m = 2 * points.len();
    let mut r0 = vec![0.0; m];
    residuals(k, pose, points, pixels, &mut r0);
    let kp = intrinsic_params(k);
    let mut jac = vec![[0.0; 14]; m];
    let (mut rp, mut rm) = (vec![0.0; m], vec![0.0; m]);
    for c in 0..14 {
        let h;
        if c < N_INTRINSIC {
            h = 1e-6 * kp[c].abs().max(1.0);
            let (mut a, mut b) = (kp, kp);
            a[c] += h;
            b[c] -= h;
            residuals(&with_intrinsic_params(k, &a), pose, points, pixels, &mut rp);
            residuals(&with_intrinsic_params(k, &b), pose, points, pixels, &mut rm);
        } else {
            h = 1e-7;
            let mut d = [0.0; 6];
            d[c - N_INTRINSIC] = h;
            residuals(k, &perturb_pose(pose, &d), points, pixels, &mut rp);
            d[c - N_INTRINSIC] = -h;
            residuals(k, &perturb_pose(pose, &d), points, pixels, &mut rm);
        }
        for row in 0..m {
            jac[row][c] = (rp[row] - rm[row]) / (2.0 * h);
        }
    }
    let mut jtj = SMatrix::<f64, 14, 14>::zeros();
    let mut jtr = SMatrix::<f64, 14, 1>::zeros();
    for (row, j) in jac.iter().enumerate() {
        for a in 0..14 {
            jtr[a] += j[a] * r0[row];
            for b in 0..14 {
                jtj[(a, b)] += j[a] * j[b];
            }
        }
    }
    (jtj, jtr)
}

/// Joint Levenberg–Marquardt over `(f, c, k₁, k₂, p₁, p₂)` and every view pose.
///
/// Accepted steps never increase the cost. Errors with [`CalibError::LmStalled`]
/// (carrying the best iterate) when no damping level reduces the cost before
/// convergence.
pub fn refine_calibration(
    views: &[Vec<Vector2<f64>>],
    points: &[Vec3],
    initial: &Intrinsics,
    initial_poses: &[Pose],
) -> Result<Refinement, CalibError> {
    if views.len() != initial_poses.len() || views.is_empty() {
        return Err(CalibError::Invalid(format!("{} views for {} poses", views.len(), initial_poses.len())));
    }
    if views.iter().any(|v| v.len() != points.len()) {
        return Err(CalibError::Invalid("detection count does not match the target".into()));
    }
    let n_views = views.len();
    let dim = N_INTRINSIC + 6 * n_views;
    let mut k = *initial;
    let mut poses = initial_poses.to_vec();
    let mut cost = total_cost(&k, &poses, points, views);
    let mut mu = LM_INITIAL_DAMPING;
    let n_obs = (views.len() * points.len()) as f64;
    let finish = |k: Intrinsics, poses: Vec<Pose>, cost: f64, iterations: usize| {
        let view_rmse = poses
            .iter()
            .zip(views)
            .map(|(p, px)| reprojection_rmse(&k, p, points, px))
            .collect();
        Refinement {
            intrinsics: k,
            poses,
            view_rmse,
            rmse: (cost / n_obs).sqrt(),
            iterations,
        }
    };
    for it in 0..LM_MAX_ITERATIONS {
        if cost <= 1e-24 * n_obs {
            return Ok(finish(k, poses, cost, it));
        }
        let blocks: Vec<_> = poses
            .par_iter()
            .zip(views)
            .map(|(pose, px)| view_block(&k, pose, points, px))
            .collect();
        let mut jtj = DMatrix::<f64>::zeros(dim, dim);
        let mut jtr = DVector::<f64>::zeros(dim);
        for (v, (bj, br)) in blocks.iter().enumerate() {
            let idx = |a: usize| if a < N_INTRINSIC { a } else { N_INTRINSIC + 6 * v + a - N_INTRINSIC };
            for a in 0..14 {
                jtr[idx(a)] += br[a];
                for b in 0..14 {
                    jtj[(idx(a), idx(b))] += bj[(a, b)];
                }
            }
        }
        let diag: Vec<f64> = (0..dim).map(|i| jtj[(i, i)].max(1e-12)).collect();
        let mut accepted = false;
        while mu <= LM_MAX_DAMPING {
            let mut lhs = jtj.clone();
            for (i, d) in diag.iter().enumerate() {
                lhs[(i, i)] += mu * d;
            }
            let Some(chol) = lhs.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&jtr));
            let kp = intrinsic_params(&k);
            let new_kp: Vec<f64> = (0..N_INTRINSIC).map(|i| kp[i] + delta[i]).collect();
            let new_k = with_intrinsic_params(&k, &new_kp);
            let new_poses: Vec<Pose> = poses
                .iter()
                .enumerate()
                .map(|(v, p)| perturb_pose(p, &delta.as_slice()[N_INTRINSIC + 6 * v..N_INTRINSIC + 6 * v + 6]))
                .collect();
            let new_cost = total_cost(&new_k, &new_poses, points, views);
            if new_cost.is_finite() && new_cost < cost {
                let reduction = cost - new_cost;
                k = new_k;
                poses = new_poses;
                cost = new_cost;
                mu = (mu * 0.1).max(1e-15);
                accepted = true;
                if reduction <= 1e-12 * cost {
                    return Ok(finish(k, poses, cost, it + 1));
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            // No damping level reduces the cost: stationary within the
            // Jacobian's accuracy if the gradient is negligible.
            let grad = jtr.amax();
            let scale = diag.iter().cloned().fold(0.0, f64::max).sqrt() * cost.sqrt();
            let best = finish(k, poses, cost, it);
            if grad <= 1e-6 * scale.max(1e-300) {
                return Ok(best);
            }
            return Err(CalibError::LmStalled { best: Box::new(best) });
        }
    }
    Ok(finish(k, poses, cost, LM_MAX_ITERATIONS))
}

/// Calibration of one camera from its views of the target.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration {
    pub initial: Intrinsics,
    pub initial_rmse: f64,
    pub refined: Refinement,
}

/// Homographies, closed-form initialization, then joint refinement.
pub fn calibrate_camera(
    views: &[Vec<Vector2<f64>>],
    target: &TargetSpec,
    width: u32,
    height: u32,
) -> Result<CameraCalibration, CalibError> {
    target.validate()?;
    let points = target.points();
    let planar: Vec<Vector2<f64>> = points.iter().map(|p| Vector2::new(p.x, p.y)).collect();
    let hs = views
        .iter()
        .map(|v| estimate_homography(v, &planar))
        .collect::<Result<Vec<_>, _>>()?;
    let (k0, poses0) = init_intrinsics(&hs, width, height)?;
    let initial_rmse = (total_cost(&k0, &poses0, &points, views) / (views.len() * points.len()) as f64).sqrt();
    let refined = refine_calibration(views, &points, &k0, &poses0)?;
    Ok(CameraCalibration {
        initial: k0,
        initial_rmse,
        refined,
    })
}

/// Averaged thermal-from-RGB transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub transform: Pose,
    /// Largest angle between a per-pair rotation and the average.
    pub max_rotation_deviation_deg: f64,
    /// Largest distance between a per-pair translation and the average.
    pub max_translation_deviation: f64,
}

pub const MAX_PAIR_DEVIATION_DEG: f64 = 5.0;

/// `T_i = therm_i ∘ rgb_i⁻¹` averaged over pairs: sign-aligned quaternion
/// mean for the rotation, arithmetic mean for the translation.
pub fn relative_pose(pairs: &[(Pose, Pose)]) -> Result<RelativePose, CalibError> {
    if pairs.is_empty() {
        return Err(CalibError::Invalid("no simultaneous pairs".into()));
    }
    let ts: Vec<Pose> = pairs.iter().map(|(rgb, th)| th.compose(&rgb.inverse())).collect();
    if ts.len() == 1 {
        return Ok(RelativePose {
            transform: ts[0],
            max_rotation_deviation_deg: 0.0,
            max_translation_deviation: 0.0,
        });
    }
    let qs: Vec<UnitQuaternion<f64>> = ts.iter().map(|t| UnitQuaternion::from_matrix(t.rotation())).collect();
    // Hemisphere of the quaternion with the largest |w| is unambiguous for clustered rotations.
    let reference = qs
        .iter()
        .max_by(|a, b| a.w.abs().total_cmp(&b.w.abs()).then_with(|| a.coords.as_slice().partial_cmp(b.coords.as_slice()).unwrap()))
        .expect("nonempty");
    let mut sum = nalgebra::Vector4::zeros();
    let mut aligned: Vec<nalgebra::Vector4<f64>> = qs
        .iter()
        .map(|q| if q.coords.dot(&reference.coords) < 0.0 { -q.coords } else { q.coords })
        .collect();
    // Order-independent summation.
    aligned.sort_by(|a, b| a.as_slice().partial_cmp(b.as_slice()).unwrap());
    for q in &aligned {
        sum += q;
    }
    let mean_q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(sum));
    let mut trans: Vec<Vec3> = ts.iter().map(|t| *t.translation()).collect();
    trans.sort_by(|a, b| a.as_slice().partial_cmp(b.as_slice()).unwrap());
    let mean_t = trans.iter().sum::<Vec3>() / ts.len() as f64;
    let rot = mean_q.to_rotation_matrix().into_inner();
    let transform = Pose::from_approx(&rot, mean_t);
    let max_rot = ts
        .iter()
        .map(|t| t.rotation_angle_to(&transform).to_degrees())
        .fold(0.0, f64::max);
    let max_t = ts.iter().map(|t| (t.translation() - mean_t).norm()).fold(0.0, f64::max);
    if max_rot > MAX_PAIR_DEVIATION_DEG {
        return Err(CalibError::InconsistentPairs(max_rot));
    }
    Ok(RelativePose {
        transform,
        max_rotation_deviation_deg: max_rot,
        max_translation_deviation: max_t,
    })
}

/// Meters per reconstruction unit from one measured camera-to-camera distance.
pub fn metric_scale(a: &Vec3, b: &Vec3, measured_distance_m: f64) -> Result<f64, CalibError> {
    if !(measured_distance_m > 0.0 && measured_distance_m.is_finite()) {
        return Err(CalibError::Invalid(format!("measured distance {measured_distance_m} must be positive")));
    }
    let d = (a - b).norm();
    if !(d > 0.0) {
        return Err(CalibError::CoincidentCenters);
    }
    Ok(measured_distance_m / d)
}

/// Multiplies translations, and hence camera centers, by `scale`.
pub fn scale_pose(pose: &Pose, scale: f64) -> Pose {
    Pose::from_approx(pose.rotation(), pose.translation() * scale)
}

/// `therm_i = T_rel ∘ rgb_i`.
pub fn thermal_poses(rgb_poses: &[Pose], thermal_from_rgb: &Pose) -> Vec<Pose> {
    rgb_poses.iter().map(|p| thermal_from_rgb.compose(p)).collect()
}

/// Serialized rigid transform: row-major rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Pose> for RigidTransform {
    fn from(p: &Pose) -> Self {
        let r = p.rotation();
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [p.translation().x, p.translation().y, p.translation().z],
        }
    }
}

impl RigidTransform {
    pub fn to_pose(&self) -> Result<Pose, CalibError> {
        let r = Mat3::from_fn(|i, j| self.rotation[i][j]);
        Pose::new(r, Vec3::from(self.translation)).map_err(|e| CalibError::Invalid(e.to_string()))
    }
}

/// Output of [`calibrate_rig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigCalibration {
    pub rgb: Intrinsics,
    pub thermal: Intrinsics,
    pub thermal_from_rgb: RigidTransform,
    pub rgb_view_rmse: Vec<f64>,
    pub thermal_view_rmse: Vec<f64>,
    pub max_rotation_deviation_deg: f64,
    pub max_translation_deviation: f64,
    /// Meters per reconstruction unit; 1 unless a measurement was supplied.
    pub scale: f64,
}

/// Per-camera calibration, then the relative transform over all pairs
/// observed by both cameras.
pub fn calibrate_rig(
    detections: &[ViewDetections],
    target: &TargetSpec,
    rgb_size: (u32, u32),
    thermal_size: (u32, u32),
) -> Result<RigCalibration, CalibError> {
    target.validate()?;
    for d in detections {
        d.validate(target)?;
    }
    let of = |s: Spectrum| -> Vec<&ViewDetections> { detections.iter().filter(|d| d.spectrum == s).collect() };
    let (rgb, th) = (of(Spectrum::Rgb), of(Spectrum::Thermal));
    let calib = |views: &[&ViewDetections], (w, h): (u32, u32)| {
        calibrate_camera(&views.iter().map(|v| v.points()).collect::<Vec<_>>(), target, w, h)
    };
    let rc = calib(&rgb, rgb_size)?;
    let tc = calib(&th, thermal_size)?;
    let pairs: Vec<(Pose, Pose)> = rgb
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            th.iter()
                .position(|t| t.pair_id == r.pair_id)
                .map(|j| (rc.refined.poses[i], tc.refined.poses[j]))
        })
        .collect();
    let rel = relative_pose(&pairs)?;
    Ok(RigCalibration {
        rgb: rc.refined.intrinsics,
        thermal: tc.refined.intrinsics,
        thermal_from_rgb: RigidTransform::from(&rel.transform),
        rgb_view_rmse: rc.refined.view_rmse,
        thermal_view_rmse: tc.refined.view_rmse,
        max_rotation_deviation_deg: rel.max_rotation_deviation_deg,
        max_translation_deviation: rel.max_translation_deviation,
        scale: 1.0,
    })
}

/// Simulated rig photographing the target.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRig {
    pub target: TargetSpec,
    pub rgb: Intrinsics,
    pub thermal: Intrinsics,
    pub thermal_from_rgb: Pose,
    /// RGB camera poses relative to the target.
    pub rgb_poses: Vec<Pose>,
}

impl SyntheticRig {
    /// `views` RGB poses 0.45–0.7 m from the target center, tilted 15°–40°
    /// in varied directions, with a 10 mm baseline and 2° relative rotation.
    pub fn new(views: usize, rng: &mut impl Rng) -> Self {
        let target = TargetSpec::default();
        let pts = target.points();
        let center = pts.iter().sum::<Vec3>() / pts.len() as f64;
        let rgb_poses = (0..views)
            .map(|v| {
                let az = v as f64 * std::f64::consts::TAU / views as f64 + rng.gen_range(-0.2..0.2);
                let tilt = rng.gen_range(15f64..40.0).to_radians();
                let dist = rng.gen_range(0.45..0.7);
                // Cameras sit on the -Z side, looking toward +Z through the plane.
                let eye = center + dist * Vec3::new(tilt.sin() * az.cos(), tilt.sin() * az.sin(), -tilt.cos());
                let up = Vec3::new(rng.gen_range(-0.3..0.3), -1.0, 0.0);
                Pose::look_at(&eye, &center, &up)
            })
            .collect();
        let rgb = Intrinsics::pinhole(820.0, 815.0, 318.0, 243.0, 640, 480).with_distortion(0.1, -0.05, 0.0, 0.0);
        let thermal = Intrinsics::pinhole(410.0, 408.0, 161.0, 127.0, 320, 256).with_distortion(-0.08, 0.02, 0.0, 0.0);
        let rot = exp_so3(&(Vec3::new(0.3, -0.5, 0.8).normalize() * 2f64.to_radians()));
        let thermal_from_rgb = Pose::new(rot, Vec3::new(0.01, 0.0, 0.0)).expect("rotation");
        Self {
            target,
            rgb,
            thermal,
            thermal_from_rgb,
            rgb_poses,
        }
    }

    pub fn thermal_poses(&self) -> Vec<Pose> {
        thermal_poses(&self.rgb_poses, &self.thermal_from_rgb)
    }

    /// Detections for both cameras with Gaussian pixel noise of `noise_px`.
    pub fn detections(&self, noise_px: f64, rng: &mut impl Rng) -> Vec<ViewDetections> {
        let normal = Normal::new(0.0, noise_px.max(0.0)).expect("finite sigma");
        let points = self.target.points();
        let mut out = Vec::new();
        let thermal = self.thermal_poses();
        for (spectrum, k, poses) in [(Spectrum::Rgb, &self.rgb, &self.rgb_poses), (Spectrum::Thermal, &self.thermal, &thermal)] {
            for (v, pose) in poses.iter().enumerate() {
                let cam = Camera::new(*k, *pose, spectrum);
                let pixels = points
                    .iter()
                    .map(|x| {
                        let p = cam.project(x).expect("target in front of camera");
                        let (nu, nv) = if noise_px > 0.0 { (normal.sample(rng), normal.sample(rng)) } else { (0.0, 0.0) };
                        [p.x + nu, p.y + nv]
                    })
                    .collect();
                out.push(ViewDetections {
                    id: format!("{}_{v:02}", spectrum.as_str()),
                    spectrum,
                    pixels,
                    pair_id: v as u32,
                });
            }
        }
        out
    }
}
