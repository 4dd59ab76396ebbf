//! Pinhole cameras with radial/tangential distortion, rigid poses and rays.
//!
//! Poses map world coordinates to camera coordinates: `X_c = R X + t`.
//! Camera space is right-handed with +Z looking forward, +X right and +Y
//! down in the image.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-9;
const MIN_DEPTH: f64 = 1e-9;
const FIXED_POINT_ITERS: usize = 20;
const NEWTON_ITERS: usize = 20;
const UNDISTORT_TOL: f64 = 1e-10;
const UNDISTORT_MAX_RESIDUAL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z_c = {0:e})")]
    PointBehindCamera(f64),
    #[error("distortion inversion diverged (residual {0:e})")]
    DistortionInversionDiverged(f64),
    #[error("rotation is not orthonormal (deviation {0:e})")]
    NotARotation(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Which part of the spectrum a camera (or a rendered quantity) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spectrum {
    Rgb,
    Thermal,
}

impl Spectrum {
    pub const ALL: [Spectrum; 2] = [Spectrum::Rgb, Spectrum::Thermal];

    /// Number of color channels rendered for this spectrum.
    pub fn channels(self) -> usize {
        match self {
            Spectrum::Rgb => 3,
            Spectrum::Thermal => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Spectrum::Rgb => "rgb",
            Spectrum::Thermal => "thermal",
        }
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Spectrum {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Spectrum::Rgb),
            "thermal" | "therm" | "t" => Ok(Spectrum::Thermal),
            other => Err(format!("unknown spectrum `{other}`")),
        }
    }
}

/// Rigid world-to-camera transform `[R|t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let dev = rotation_deviation(&rotation);
        if dev > ORTHO_TOL || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose after projecting `rotation` onto SO(3).
    pub fn from_approx(rotation: &Mat3, translation: Vec3) -> Self {
        Self {
            rotation: nearest_rotation(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Row-major 4×4 world-from-camera matrix (the inverse of this pose).
    pub fn world_from_camera(&self) -> Matrix4<f64> {
        let inv = self.inverse();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&inv.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&inv.translation);
        m
    }

    pub fn from_world_from_camera(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let r: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
        Ok(Pose::new(r, t)?.inverse())
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    /// Angle in radians of the relative rotation between two poses.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert(a: &Pose) -> Pose {
    a.inverse()
}

/// Max-abs deviation of `RᵀR` from identity, or of `det R` from one.
pub fn rotation_deviation(r: &Mat3) -> f64 {
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

pub fn rotation_angle(r: &Mat3) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Closest rotation in the Frobenius sense.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Rodrigues' formula for an axis-angle vector.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0);
    if theta < 1e-12 {
        return Mat3::identity() + k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + k * a + k * k * b
}

/// Pinhole intrinsics with two radial and two tangential distortion terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            width,
            height,
        }
    }

    pub fn with_distortion(mut self, k1: f64, k2: f64, p1: f64, p2: f64) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self.p1 = p1;
        self.p2 = p2;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [
            self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.p1, self.p2,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("zero resolution".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Same field of view at `1/factor` the resolution.
    pub fn downscaled(&self, factor: u32) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
            ..*self
        }
    }

    pub fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0 || self.p1 != 0.0 || self.p2 != 0.0
    }

    /// Maps undistorted normalized coordinates `(x', y')` to distorted `(x'', y'')`.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (xd, yd)
    }

    fn distort_jacobian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let dradial = self.k1 + 2.0 * self.k2 * r2; // d radial / d r2
        let dxx = radial + x * dradial * 2.0 * x + 2.0 * self.p1 * y + self.p2 * 6.0 * x;
        let dxy = x * dradial * 2.0 * y + 2.0 * self.p1 * x + self.p2 * 2.0 * y;
        let dyx = y * dradial * 2.0 * x + self.p1 * 2.0 * x + 2.0 * self.p2 * y;
        let dyy = radial + y * dradial * 2.0 * y + self.p1 * 6.0 * y + 2.0 * self.p2 * x;
        [[dxx, dxy], [dyx, dyy]]
    }

    /// Inverts [`Intrinsics::distort`]: fixed-point iteration, with Newton
    /// steps as a fallback when the fixed point contracts too slowly.
    pub fn undistort(&self, xd: f64, yd: f64) -> Result<(f64, f64), GeometryError> {
        if !self.has_distortion() {
            return Ok((xd, yd));
        }
        let (mut x, mut y) = (xd, yd);
        let mut converged = false;
        for _ in 0..FIXED_POINT_ITERS {
            let (dx, dy) = self.distort(x, y);
            let (nx, ny) = (xd - (dx - x), yd - (dy - y));
            let step = (nx - x).abs().max((ny - y).abs());
            x = nx;
            y = ny;
            if !x.is_finite() || !y.is_finite() {
                break;
            }
            if step < UNDISTORT_TOL {
                converged = true;
                break;
            }
        }
        if !converged || !x.is_finite() || !y.is_finite() {
            if !x.is_finite() || !y.is_finite() {
                x = xd;
                y = yd;
            }
            for _ in 0..NEWTON_ITERS {
                let (dx, dy) = self.distort(x, y);
                let (rx, ry) = (dx - xd, dy - yd);
                if rx.abs().max(ry.abs()) < UNDISTORT_TOL * 1e-2 {
                    break;
                }
                let [[a, b], [c, d]] = self.distort_jacobian(x, y);
                let det = a * d - b * c;
                if det.abs() < 1e-14 {
                    break;
                }
                x -= (d * rx - b * ry) / det;
                y -= (a * ry - c * rx) / det;
            }
        }
        let (dx, dy) = self.distort(x, y);
        let residual = (dx - xd).abs().max((dy - yd).abs());
        if !(residual <= UNDISTORT_MAX_RESIDUAL) {
            return Err(GeometryError::DistortionInversionDiverged(residual));
        }
        Ok((x, y))
    }
}

/// A calibrated camera: intrinsics, pose, and the spectrum it images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    spectrum: Spectrum,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose, spectrum: Spectrum) -> Self {
        Self {
            intrinsics,
            pose,
            spectrum,
        }
    }

    pub fn spectrum(&self) -> Spectrum {
        self.spectrum
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn with_pose(&self, pose: Pose) -> Self {
        Self { pose, ..*self }
    }

    pub fn project(&self, point: &Vec3) -> Result<Vector2<f64>, GeometryError> {
        project(point, self)
    }

    pub fn pixel_to_ray(&self, pixel: &Vector2<f64>) -> Result<Ray, GeometryError> {
        pixel_to_ray(pixel, self)
    }
}

/// A ray `o + t d` restricted to `[t_near, t_far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            t_near,
            t_far,
        }
    }

    pub fn direction(&self) -> &Vec3 {
        &self.direction
    }

    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_bounds(mut self, t_near: f64, t_far: f64) -> Self {
        self.t_near = t_near;
        self.t_far = t_far;
        self
    }

    /// Slab-test clip against an axis-aligned box; `None` when the interval is empty.
    pub fn clip_to_box(&self, min: &Vec3, max: &Vec3) -> Option<Ray> {
        let mut t0 = self.t_near;
        let mut t1 = self.t_far;
        for a in 0..3 {
            let o = self.origin[a];
            let d = self.direction[a];
            if d.abs() < 1e-15 {
                if o < min[a] || o > max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut ta, mut tb) = ((min[a] - o) * inv, (max[a] - o) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 < t1).then(|| self.with_bounds(t0, t1))
    }
}

/// World point to distorted pixel coordinates.
pub fn project(point: &Vec3, camera: &Camera) -> Result<Vector2<f64>, GeometryError> {
    let pc = camera.pose.transform_point(point);
    if !(pc.z > MIN_DEPTH) {
        return Err(GeometryError::PointBehindCamera(pc.z));
    }
    let k = &camera.intrinsics;
    let (xd, yd) = k.distort(pc.x / pc.z, pc.y / pc.z);
    Ok(Vector2::new(k.fx * xd + k.cx, k.fy * yd + k.cy))
}

/// Back-projects a pixel to a unit-direction world ray starting at the camera center.
pub fn pixel_to_ray(pixel: &Vector2<f64>, camera: &Camera) -> Result<Ray, GeometryError> {
    let k = &camera.intrinsics;
    let (x, y) = k.undistort((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy)?;
    let dir_cam = Vec3::new(x, y, 1.0);
    let dir_world = camera.pose.rotation().transpose() * dir_cam;
    Ok(Ray::new(camera.pose.center(), dir_world, 0.0, f64::INFINITY))
}

/// Ray through the center of integer pixel `(px, py)`.
pub fn pixel_center_ray(camera: &Camera, px: f64, py: f64) -> Result<Ray, GeometryError> {
    pixel_to_ray(&Vector2::new(px + 0.5, py + 0.5), camera)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cam(k: Intrinsics) -> Camera {
        Camera::new(k, Pose::identity(), Spectrum::Rgb)
    }

    fn random_pose(ax: f64, ay: f64, az: f64, tx: f64, ty: f64, tz: f64) -> Pose {
        let r = exp_so3(&Vec3::new(ax, ay, az));
        Pose::new(r, Vec3::new(tx, ty, tz)).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let k = Intrinsics::pinhole(500.0, 480.0, 320.0, 240.0, 640, 480).with_distortion(0.2, -0.1, 0.01, -0.01);
        let p = project(&Vec3::new(0.0, 0.0, 3.0), &cam(k)).unwrap();
        assert_eq!(p, Vector2::new(320.0, 240.0));
    }

    #[test]
    fn radial_distortion_hand_value() {
        let k = Intrinsics::pinhole(500.0, 500.0, 320.0, 320.0, 640, 640).with_distortion(0.1, 0.0, 0.0, 0.0);
        let p = project(&Vec3::new(0.1, 0.0, 1.0), &cam(k)).unwrap();
        assert_abs_diff_eq!(p.x, 370.05, epsilon = 1e-9);
        assert_abs_diff_eq!(p.y, 320.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let k = Intrinsics::pinhole(500.0, 500.0, 320.0, 320.0, 640, 640);
        assert!(matches!(
            project(&Vec3::new(0.0, 0.0, -1.0), &cam(k)),
            Err(GeometryError::PointBehindCamera(_))
        ));
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let k = Intrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480).with_distortion(0.1, 0.05, 0.0, 0.0);
        let pose = random_pose(0.1, -0.2, 0.3, 0.5, 0.1, -2.0);
        let c = Camera::new(k, pose, Spectrum::Thermal);
        let ray = pixel_to_ray(&Vector2::new(320.0, 240.0), &c).unwrap();
        let axis = pose.rotation().transpose() * Vec3::z();
        assert!((ray.direction() - axis).norm() < 1e-12);
        assert!((ray.origin - pose.center()).norm() < 1e-12);
    }

    #[test]
    fn zero_distortion_direction_closed_form() {
        let k = Intrinsics::pinhole(400.0, 420.0, 160.0, 120.0, 320, 240);
        let ray = pixel_to_ray(&Vector2::new(37.5, 201.25), &cam(k)).unwrap();
        let expected = Vec3::new((37.5 - 160.0) / 400.0, (201.25 - 120.0) / 420.0, 1.0).normalize();
        assert!((ray.direction() - expected).norm() < 1e-15);
    }

    #[test]
    fn pose_algebra_basics() {
        assert_eq!(Pose::identity().inverse(), Pose::identity());
        let a = Pose::from_translation(Vec3::new(1.0, 2.0, 3.0));
        let b = Pose::from_translation(Vec3::new(-0.5, 0.25, 4.0));
        let c = a.compose(&b);
        assert_eq!(*c.rotation(), Mat3::identity());
        assert_eq!(*c.translation(), Vec3::new(0.5, 2.25, 7.0));
    }

    #[test]
    fn non_rotation_is_rejected() {
        let mut r = Mat3::identity();
        r[(0, 0)] = 1.001;
        assert!(matches!(Pose::new(r, Vec3::zeros()), Err(GeometryError::NotARotation(_))));
        let flip = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(flip, Vec3::zeros()).is_err());
    }

    #[test]
    fn world_from_camera_round_trip() {
        let pose = random_pose(0.3, 0.2, -0.4, 0.1, -0.7, 2.0);
        let m = pose.world_from_camera();
        let back = Pose::from_world_from_camera(&m).unwrap();
        assert!((back.rotation() - pose.rotation()).abs().max() < 1e-12);
        assert!((back.translation() - pose.translation()).abs().max() < 1e-12);
        // Last column holds the camera center.
        assert!((Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]) - pose.center()).norm() < 1e-12);
    }

    #[test]
    fn look_at_centers_target() {
        let eye = Vec3::new(1.5, -2.0, 1.0);
        let pose = Pose::look_at(&eye, &Vec3::zeros(), &Vec3::z());
        let k = Intrinsics::pinhole(100.0, 100.0, 50.0, 50.0, 100, 100);
        let c = Camera::new(k, pose, Spectrum::Rgb);
        let p = project(&Vec3::zeros(), &c).unwrap();
        assert!((p - Vector2::new(50.0, 50.0)).norm() < 1e-9);
        // World up projects above the center (smaller v).
        let up = project(&Vec3::new(0.0, 0.0, 0.2), &c).unwrap();
        assert!(up.y < 50.0);
        assert!(rotation_deviation(pose.rotation()) < 1e-12);
    }

    #[test]
    fn clip_to_box_interval() {
        let r = Ray::new(Vec3::new(-3.0, 0.0, 0.0), Vec3::x(), 0.0, f64::INFINITY);
        let c = r.clip_to_box(&Vec3::repeat(-1.0), &Vec3::repeat(1.0)).unwrap();
        assert_abs_diff_eq!(c.t_near, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.t_far, 4.0, epsilon = 1e-12);
        let miss = Ray::new(Vec3::new(-3.0, 2.0, 0.0), Vec3::x(), 0.0, f64::INFINITY);
        assert!(miss.clip_to_box(&Vec3::repeat(-1.0), &Vec3::repeat(1.0)).is_none());
    }

    #[test]
    fn strong_distortion_falls_back_to_newton() {
        let k = Intrinsics::pinhole(300.0, 300.0, 320.0, 240.0, 640, 480).with_distortion(0.3, 0.3, 0.01, 0.01);
        let c = cam(k);
        let px = Vector2::new(630.0, 470.0);
        let ray = pixel_to_ray(&px, &c).unwrap();
        let back = project(&ray.point_at(2.0), &c).unwrap();
        assert!((back - px).norm() < 1e-6, "{back:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn pixel_ray_round_trip(
            u in 0.0f64..320.0, v in 0.0f64..240.0,
            k1 in -0.3f64..0.3, k2 in -0.3f64..0.3,
            p1 in -0.01f64..0.01, p2 in -0.01f64..0.01,
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            depth in 0.5f64..5.0,
        ) {
            let k = Intrinsics::pinhole(500.0, 510.0, 160.0, 120.0, 320, 240).with_distortion(k1, k2, p1, p2);
            let c = Camera::new(k, random_pose(ax, ay, az, 0.2, -0.1, 1.0), Spectrum::Rgb);
            let ray = pixel_to_ray(&Vector2::new(u, v), &c).unwrap();
            prop_assert!((ray.direction().norm() - 1.0).abs() < 1e-9);
            let back = project(&ray.point_at(depth), &c).unwrap();
            prop_assert!((back - Vector2::new(u, v)).norm() < 1e-6);
        }

        #[test]
        fn round_trip_with_k1_only(u in 0.0f64..640.0, v in 0.0f64..480.0) {
            let k = Intrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480).with_distortion(0.05, 0.0, 0.0, 0.0);
            let c = cam(k);
            let ray = pixel_to_ray(&Vector2::new(u, v), &c).unwrap();
            let back = project(&ray.point_at(2.0), &c).unwrap();
            prop_assert!((back - Vector2::new(u, v)).norm() < 1e-6);
        }

        #[test]
        fn compose_inverse_is_identity(
            ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0,
            tx in -10.0f64..10.0, ty in -10.0f64..10.0, tz in -10.0f64..10.0,
        ) {
            let a = random_pose(ax, ay, az, tx, ty, tz);
            let id = a.compose(&a.inverse());
            prop_assert!((id.rotation() - Mat3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation().abs().max() < 1e-9);
        }

        #[test]
        fn compose_is_associative(
            a in prop::array::uniform6(-2.0f64..2.0),
            b in prop::array::uniform6(-2.0f64..2.0),
            c in prop::array::uniform6(-2.0f64..2.0),
        ) {
            let pa = random_pose(a[0], a[1], a[2], a[3], a[4], a[5]);
            let pb = random_pose(b[0], b[1], b[2], b[3], b[4], b[5]);
            let pc = random_pose(c[0], c[1], c[2], c[3], c[4], c[5]);
            let l = pa.compose(&pb).compose(&pc);
            let r = pa.compose(&pb.compose(&pc));
            prop_assert!((l.rotation() - r.rotation()).abs().max() < 1e-9);
            prop_assert!((l.translation() - r.translation()).abs().max() < 1e-9);
        }

        #[test]
        fn projection_invariant_to_rigid_reparameterization(
            g in prop::array::uniform6(-1.0f64..1.0),
            x in -0.3f64..0.3, y in -0.3f64..0.3,
        ) {
            let k = Intrinsics::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480).with_distortion(0.1, -0.05, 0.002, 0.001);
            let pose = random_pose(0.1, 0.2, -0.1, 0.0, 0.0, 3.0);
            let c = Camera::new(k, pose, Spectrum::Rgb);
            let gp = random_pose(g[0], g[1], g[2], g[3], g[4], g[5]);
            let point = Vec3::new(x, y, 0.2);
            let moved = c.with_pose(pose.compose(&gp.inverse()));
            let a = project(&point, &c).unwrap();
            let b = project(&gp.transform_point(&point), &moved).unwrap();
            prop_assert!((a - b).norm() < 1e-9);
        }
    }
}
