//! On-disk RGBT datasets: `cameras.json`, 8-bit PNG RGB frames under `rgb/`,
//! little-endian PFM thermal frames under `thermal/`.

use crate::geometry::{Camera, GeometryError, Intrinsics, Pose, Spectrum, Vec3};
use crate::image::{Image, ImageError};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CAMERAS_FILE: &str = "cameras.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("schema violation at `{pointer}`: {message}")]
    SchemaViolation { pointer: String, message: String },
    #[error("resolution mismatch for frame `{frame}`: camera {expected:?}, image {found:?}")]
    ResolutionMismatch {
        frame: String,
        expected: (u32, u32),
        found: (usize, usize),
    },
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Affine map from stored thermal values back to sensor units: `raw = offset + scale · v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalNormalization {
    pub offset: f64,
    pub scale: f64,
}

impl Default for ThermalNormalization {
    fn default() -> Self {
        Self { offset: 0.0, scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub scene: String,
    pub seed: u64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub thermal_normalization: ThermalNormalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HiresRecord {
    file_path: String,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    id: String,
    spectrum: Spectrum,
    split: Split,
    pair_id: u32,
    file_path: String,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    k1: f64,
    k2: f64,
    p1: f64,
    p2: f64,
    /// World-from-camera, row-major.
    transform_matrix: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hires: Option<HiresRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CamerasFile {
    meta: DatasetMeta,
    frames: Vec<FrameRecord>,
}

/// One image with its camera. Thermal frames may carry a full-resolution
/// reference image used only for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub camera: Camera,
    pub split: Split,
    pub pair_id: u32,
    pub image: Image,
    pub hires: Option<(Camera, Image)>,
    /// Matrix as read from disk; saving reuses it so round trips are byte-exact.
    transform_matrix: [[f64; 4]; 4],
}

impl Frame {
    pub fn new(id: impl Into<String>, camera: Camera, split: Split, pair_id: u32, image: Image) -> Self {
        let m = camera.pose.world_from_camera();
        let transform_matrix = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        Self {
            id: id.into(),
            camera,
            split,
            pair_id,
            image,
            hires: None,
            transform_matrix,
        }
    }

    pub fn with_hires(mut self, camera: Camera, image: Image) -> Self {
        self.hires = Some((camera, image));
        self
    }

    pub fn spectrum(&self) -> Spectrum {
        self.camera.spectrum()
    }

    fn relative_path(&self) -> String {
        match self.spectrum() {
            Spectrum::Rgb => format!("rgb/{}.png", self.id),
            Spectrum::Thermal => format!("thermal/{}.pfm", self.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn bbox(&self) -> (Vec3, Vec3) {
        (Vec3::from(self.meta.bbox_min), Vec3::from(self.meta.bbox_max))
    }

    pub fn frames_of<'a>(&'a self, spectrum: Spectrum, split: Split) -> impl Iterator<Item = &'a Frame> + 'a {
        self.frames
            .iter()
            .filter(move |f| f.spectrum() == spectrum && f.split == split)
    }

    pub fn count(&self, spectrum: Spectrum, split: Split) -> usize {
        self.frames_of(spectrum, split).count()
    }

    /// The frame of `spectrum` sharing `pair_id`, if any.
    pub fn partner(&self, pair_id: u32, spectrum: Spectrum) -> Option<&Frame> {
        self.frames
            .iter()
            .find(|f| f.pair_id == pair_id && f.spectrum() == spectrum)
    }

    pub fn frame(&self, id: &str) -> Option<&Frame> {
        self.frames.iter().find(|f| f.id == id)
    }

    /// Keeps the first `n` thermal training frames (by pair id order) and drops the rest.
    pub fn with_thermal_train_limit(&self, n: usize) -> Dataset {
        let mut kept = 0;
        let frames = self
            .frames
            .iter()
            .filter(|f| {
                if f.spectrum() == Spectrum::Thermal && f.split == Split::Train {
                    kept += 1;
                    kept <= n
                } else {
                    true
                }
            })
            .cloned()
            .collect();
        Dataset {
            meta: self.meta.clone(),
            frames,
        }
    }

    fn to_records(&self) -> CamerasFile {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let k = &f.camera.intrinsics;
                FrameRecord {
                    id: f.id.clone(),
                    spectrum: f.spectrum(),
                    split: f.split,
                    pair_id: f.pair_id,
                    file_path: f.relative_path(),
                    width: k.width,
                    height: k.height,
                    fx: k.fx,
                    fy: k.fy,
                    cx: k.cx,
                    cy: k.cy,
                    k1: k.k1,
                    k2: k.k2,
                    p1: k.p1,
                    p2: k.p2,
                    transform_matrix: f.transform_matrix,
                    hires: f.hires.as_ref().map(|(cam, _)| {
                        let h = &cam.intrinsics;
                        HiresRecord {
                            file_path: format!("thermal_hires/{}.pfm", f.id),
                            width: h.width,
                            height: h.height,
                            fx: h.fx,
                            fy: h.fy,
                            cx: h.cx,
                            cy: h.cy,
                        }
                    }),
                }
            })
            .collect();
        CamerasFile {
            meta: self.meta.clone(),
            frames,
        }
    }

    /// Canonical `cameras.json` text (fixed key order, two-space indent).
    pub fn cameras_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_records()).expect("records serialize") + "\n"
    }

    pub fn save(&self, root: &Path) -> Result<(), DatasetError> {
        for sub in ["rgb", "thermal"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        if self.frames.iter().any(|f| f.hires.is_some()) {
            std::fs::create_dir_all(root.join("thermal_hires"))?;
        }
        let records = self.to_records();
        for (f, rec) in self.frames.iter().zip(&records.frames) {
            let path = root.join(&rec.file_path);
            match f.spectrum() {
                Spectrum::Rgb => f.image.write_png(&path)?,
                Spectrum::Thermal => f.image.write_pfm(&path)?,
            }
            if let (Some((_, img)), Some(h)) = (&f.hires, &rec.hires) {
                img.write_pfm(&root.join(&h.file_path))?;
            }
        }
        std::fs::write(root.join(CAMERAS_FILE), self.cameras_json())?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Dataset, DatasetError> {
        let path = root.join(CAMERAS_FILE);
        if !path.is_file() {
            return Err(DatasetError::MissingFile(path));
        }
        let text = std::fs::read_to_string(&path)?;
        let records = parse_cameras(&text)?;
        let mut frames = Vec::with_capacity(records.frames.len());
        let mut seen = std::collections::HashSet::new();
        for (i, rec) in records.frames.into_iter().enumerate() {
            if !seen.insert(rec.id.clone()) {
                return Err(DatasetError::SchemaViolation {
                    pointer: format!("/frames/{i}/id"),
                    message: format!("duplicate frame id `{}`", rec.id),
                });
            }
            let intrinsics = Intrinsics::pinhole(rec.fx, rec.fy, rec.cx, rec.cy, rec.width, rec.height)
                .with_distortion(rec.k1, rec.k2, rec.p1, rec.p2);
            intrinsics.validate().map_err(|e| DatasetError::SchemaViolation {
                pointer: format!("/frames/{i}"),
                message: e.to_string(),
            })?;
            let m = Matrix4::from_fn(|r, c| rec.transform_matrix[r][c]);
            let pose = Pose::from_world_from_camera(&m).map_err(|e| DatasetError::SchemaViolation {
                pointer: format!("/frames/{i}/transform_matrix"),
                message: e.to_string(),
            })?;
            let camera = Camera::new(intrinsics, pose, rec.spectrum);
            let image = read_frame_image(root, &rec.file_path, rec.spectrum)?;
            check_resolution(&rec.id, &camera, &image)?;
            let hires = match &rec.hires {
                None => None,
                Some(h) => {
                    let k = Intrinsics::pinhole(h.fx, h.fy, h.cx, h.cy, h.width, h.height)
                        .with_distortion(rec.k1, rec.k2, rec.p1, rec.p2);
                    let cam = Camera::new(k, pose, rec.spectrum);
                    let img = read_frame_image(root, &h.file_path, Spectrum::Thermal)?;
                    check_resolution(&rec.id, &cam, &img)?;
                    Some((cam, img))
                }
            };
            frames.push(Frame {
                id: rec.id,
                camera,
                split: rec.split,
                pair_id: rec.pair_id,
                image,
                hires,
                transform_matrix: rec.transform_matrix,
            });
        }
        Ok(Dataset {
            meta: records.meta,
            frames,
        })
    }
}

/// A standalone camera, in the same units as a `cameras.json` frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub spectrum: Spectrum,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
    /// World-from-camera, row-major.
    pub transform_matrix: [[f64; 4]; 4],
}

impl CameraRecord {
    pub fn from_camera(camera: &Camera) -> Self {
        let k = &camera.intrinsics;
        let m = camera.pose.world_from_camera();
        Self {
            spectrum: camera.spectrum(),
            width: k.width,
            height: k.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            k1: k.k1,
            k2: k.k2,
            p1: k.p1,
            p2: k.p2,
            transform_matrix: [0, 1, 2, 3].map(|r| [0, 1, 2, 3].map(|c| m[(r, c)])),
        }
    }

    pub fn to_camera(&self) -> Result<Camera, DatasetError> {
        let k = Intrinsics::pinhole(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .with_distortion(self.k1, self.k2, self.p1, self.p2);
        k.validate()?;
        let pose = Pose::from_world_from_camera(&Matrix4::from_fn(|r, c| self.transform_matrix[r][c]))?;
        Ok(Camera::new(k, pose, self.spectrum))
    }

    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        parse_json(text)
    }
}

fn parse_cameras(text: &str) -> Result<CamerasFile, DatasetError> {
    parse_json(text)
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, DatasetError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = json_pointer(e.path());
        DatasetError::SchemaViolation {
            pointer,
            message: e.into_inner().to_string(),
        }
    })
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

fn read_frame_image(root: &Path, rel: &str, spectrum: Spectrum) -> Result<Image, DatasetError> {
    let path = root.join(rel);
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path));
    }
    let img = match spectrum {
        Spectrum::Rgb => {
            let img = Image::read_png(&path)?;
            if img.channels == 3 {
                img
            } else {
                return Err(DatasetError::SchemaViolation {
                    pointer: rel.to_string(),
                    message: format!("RGB frame has {} channels", img.channels),
                });
            }
        }
        Spectrum::Thermal => Image::read_pfm(&path)?,
    };
    Ok(img)
}

fn check_resolution(id: &str, camera: &Camera, image: &Image) -> Result<(), DatasetError> {
    if image.width != camera.width() as usize || image.height != camera.height() as usize {
        return Err(DatasetError::ResolutionMismatch {
            frame: id.to_string(),
            expected: (camera.width(), camera.height()),
            found: (image.width, image.height),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let k = Intrinsics::pinhole(20.0, 20.0, 8.0, 6.0, 16, 12);
        let pose = Pose::look_at(&Vec3::new(2.0, 0.3, 0.7), &Vec3::zeros(), &Vec3::z());
        let rgb = Image::from_data(16, 12, 3, (0..576).map(|i| (i % 256) as f32 / 255.0).collect()).unwrap();
        let th = Image::from_data(8, 6, 1, (0..48).map(|i| i as f32 * 0.013 + 0.1).collect()).unwrap();
        let th_hi = Image::from_data(16, 12, 1, (0..192).map(|i| i as f32 * 0.004).collect()).unwrap();
        let cam_t = Camera::new(k.downscaled(2), pose, Spectrum::Thermal);
        Dataset {
            meta: DatasetMeta {
                scene: "tiny".into(),
                seed: 3,
                bbox_min: [-0.5; 3],
                bbox_max: [0.5; 3],
                thermal_normalization: ThermalNormalization::default(),
            },
            frames: vec![
                Frame::new("rgb_000", Camera::new(k, pose, Spectrum::Rgb), Split::Train, 0, rgb),
                Frame::new("thermal_000", cam_t, Split::Test, 0, th)
                    .with_hires(Camera::new(k, pose, Spectrum::Thermal), th_hi),
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.save(dir.path()).unwrap();
        let first = std::fs::read_to_string(dir.path().join(CAMERAS_FILE)).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.frames[0].image, ds.frames[0].image);
        assert_eq!(loaded.frames[1].image, ds.frames[1].image);
        assert_eq!(loaded.frames[1].hires.as_ref().unwrap().1, ds.frames[1].hires.as_ref().unwrap().1);
        let dir2 = tempfile::tempdir().unwrap();
        loaded.save(dir2.path()).unwrap();
        assert_eq!(first, std::fs::read_to_string(dir2.path().join(CAMERAS_FILE)).unwrap());
        let a = &ds.frames[0].camera;
        let b = &loaded.frames[0].camera;
        assert_eq!(a.intrinsics, b.intrinsics);
        assert!((a.pose.center() - b.pose.center()).norm() < 1e-12);
    }

    #[test]
    fn corrupt_json_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        let path = dir.path().join(CAMERAS_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"fx\": 20.0", "\"fx\": \"wide\"", 1);
        std::fs::write(&path, text).unwrap();
        match Dataset::load(dir.path()) {
            Err(DatasetError::SchemaViolation { pointer, .. }) => assert_eq!(pointer, "/frames/0/fx"),
            other => panic!("unexpected {other:?}"),
        }
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"fx\": \"wide\",", "", 1);
        std::fs::write(&path, text).unwrap();
        match Dataset::load(dir.path()) {
            Err(DatasetError::SchemaViolation { message, .. }) => assert!(message.contains("fx"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_image_and_wrong_resolution() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("rgb/rgb_000.png")).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(DatasetError::MissingFile(_))));
        Image::new(5, 5, 3).write_png(&dir.path().join("rgb/rgb_000.png")).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(DatasetError::ResolutionMismatch { .. })));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(empty.path()), Err(DatasetError::MissingFile(_))));
    }

    #[test]
    fn thermal_train_limit() {
        let mut ds = tiny();
        ds.frames[1].split = Split::Train;
        assert_eq!(ds.with_thermal_train_limit(0).count(Spectrum::Thermal, Split::Train), 0);
        assert_eq!(ds.with_thermal_train_limit(5).count(Spectrum::Thermal, Split::Train), 1);
        assert_eq!(ds.partner(0, Spectrum::Thermal).unwrap().id, "thermal_000");
    }

    #[test]
    fn camera_record_round_trip() {
        let ds = tiny();
        let cam = ds.frames[0].camera;
        let rec = CameraRecord::from_camera(&cam);
        let back = CameraRecord::parse(&serde_json::to_string(&rec).unwrap()).unwrap().to_camera().unwrap();
        assert_eq!(back.intrinsics, cam.intrinsics);
        assert!((back.pose.rotation() - cam.pose.rotation()).amax() < 1e-12);
        assert!((back.pose.translation() - cam.pose.translation()).amax() < 1e-12);
        match CameraRecord::parse(r#"{"spectrum": "rgb", "width": "wide"}"#) {
            Err(DatasetError::SchemaViolation { pointer, .. }) => assert_eq!(pointer, "/width"),
            other => panic!("{other:?}"),
        }
    }
}
