//! Scene manifests: intrinsics, camera-to-world poses and per-frame color/depth
//! references, loaded from a single relocatable JSON file.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the orthogonality and determinant checks on pose rotations.
pub const RIGID_TOLERANCE: f64 = 1e-4;

/// Default depth cutoff in meters when the manifest does not declare one.
pub const DEFAULT_MAX_DEPTH_M: f64 = 10.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed manifest at `{field}`: {message}")]
    MalformedManifest { field: String, message: String },
    #[error("frame {frame_id}: pose is not a rigid transform ({reason})")]
    NonRigidPose { frame_id: u32, reason: String },
    #[error("frame {frame_id}: referenced file {} does not exist", path.display())]
    MissingFile { frame_id: u32, path: PathBuf },
    #[error("raster is {found_w}x{found_h}, intrinsics declare {expected_w}x{expected_h}")]
    DimensionMismatch {
        expected_w: u32,
        expected_h: u32,
        found_w: u32,
        found_h: u32,
    },
    #[error("unsupported depth encoding: {0}")]
    UnsupportedDepthEncoding(String),
    #[error("unsupported color encoding: {0}")]
    UnsupportedColorEncoding(String),
    #[error("unknown frame {0}")]
    UnknownFrame(u32),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    fn malformed(field: impl Into<String>, message: impl Into<String>) -> Self {
        IngestError::MalformedManifest {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), IngestError> {
        let field = |name: &str| format!("intrinsics.{name}");
        if !(self.fx > 0.0) {
            return Err(IngestError::malformed(field("fx"), "must be > 0"));
        }
        if !(self.fy > 0.0) {
            return Err(IngestError::malformed(field("fy"), "must be > 0"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(IngestError::malformed(field("width"), "image dimensions must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(IngestError::malformed(field("cx"), "must lie in [0, width)"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(IngestError::malformed(field("cy"), "must lie in [0, height)"));
        }
        if !(self.depth_scale > 0.0) {
            return Err(IngestError::malformed(field("depth_scale"), "must be > 0"));
        }
        Ok(())
    }

    /// Pinhole projection of a camera-frame point to `(u, v)` pixel coordinates.
    pub fn project(&self, point: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        )
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    matrix: Matrix4<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            matrix: Matrix4::identity(),
        }
    }

    /// Builds a pose from a rotation and translation. The result is rigid as
    /// long as `rotation` is.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        CameraPose { matrix }
    }

    /// Parses 16 row-major values and checks rigidity.
    pub fn from_row_major(values: &[f64]) -> Result<Self, String> {
        if values.len() != 16 {
            return Err(format!("expected 16 values, found {}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err("non-finite entry".into());
        }
        let pose = CameraPose {
            matrix: Matrix4::from_row_slice(values),
        };
        pose.check_rigid()?;
        Ok(pose)
    }

    fn check_rigid(&self) -> Result<(), String> {
        let m = &self.matrix;
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(format!("bottom row is {bottom:?}, expected [0, 0, 0, 1]"));
        }
        let r = self.rotation();
        let ortho_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho_err > RIGID_TOLERANCE {
            return Err(format!("R^T R deviates from identity by {ortho_err:e}"));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > RIGID_TOLERANCE {
            return Err(format!("det(R) = {det}"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    /// Maps a camera-frame point to world coordinates.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthFormat {
    #[serde(rename = "png16")]
    Png16,
    #[serde(rename = "raw16le")]
    Raw16Le,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u32,
    /// Color image path as written in the manifest (relative to the manifest directory).
    pub color_ref: String,
    pub depth_ref: String,
    pub pose: CameraPose,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub scene_id: String,
    pub depth_format: DepthFormat,
    pub max_depth_m: f64,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameRecord>,
    /// Directory that relative frame paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    scene_id: String,
    depth_format: DepthFormat,
    #[serde(default = "default_max_depth")]
    max_depth_m: f64,
    intrinsics: CameraIntrinsics,
    frames: Vec<RawFrame>,
}

fn default_max_depth() -> f64 {
    DEFAULT_MAX_DEPTH_M
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    frame_id: u32,
    color: String,
    depth: String,
    timestamp: f64,
    pose: Vec<f64>,
}

impl SceneManifest {
    pub fn frame(&self, frame_id: u32) -> Result<&FrameRecord, IngestError> {
        self.frames
            .iter()
            .find(|f| f.frame_id == frame_id)
            .ok_or(IngestError::UnknownFrame(frame_id))
    }

    pub fn resolve(&self, reference: &str) -> PathBuf {
        self.base_dir.join(reference)
    }

    pub fn frame_ids(&self) -> Vec<u32> {
        self.frames.iter().map(|f| f.frame_id).collect()
    }

    /// Checks every invariant that does not require touching the filesystem.
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.scene_id.is_empty() {
            return Err(IngestError::malformed("scene_id", "must not be empty"));
        }
        if !(self.max_depth_m > 0.0) {
            return Err(IngestError::malformed("max_depth_m", "must be > 0"));
        }
        self.intrinsics.validate()?;
        if self.frames.is_empty() {
            return Err(IngestError::malformed("frames", "at least one frame is required"));
        }
        let mut seen = HashSet::new();
        let mut last_ts = f64::NEG_INFINITY;
        for (i, f) in self.frames.iter().enumerate() {
            if !seen.insert(f.frame_id) {
                return Err(IngestError::malformed(
                    format!("frames[{i}].frame_id"),
                    format!("duplicate frame_id {}", f.frame_id),
                ));
            }
            if !f.timestamp.is_finite() || f.timestamp < last_ts {
                return Err(IngestError::malformed(
                    format!("frames[{i}].timestamp"),
                    "timestamps must be finite and non-decreasing",
                ));
            }
            last_ts = f.timestamp;
            f.pose.check_rigid().map_err(|reason| IngestError::NonRigidPose {
                frame_id: f.frame_id,
                reason,
            })?;
        }
        Ok(())
    }

    fn to_raw(&self) -> RawManifest {
        RawManifest {
            scene_id: self.scene_id.clone(),
            depth_format: self.depth_format,
            max_depth_m: self.max_depth_m,
            intrinsics: self.intrinsics,
            frames: self
                .frames
                .iter()
                .map(|f| RawFrame {
                    frame_id: f.frame_id,
                    color: f.color_ref.clone(),
                    depth: f.depth_ref.clone(),
                    timestamp: f.timestamp,
                    pose: f.pose.to_row_major().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_raw()).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Writes the manifest JSON. Frame references are written as stored, so
    /// they must be valid relative to `path`'s directory.
    pub fn write(&self, path: &Path) -> Result<(), IngestError> {
        fs::write(path, self.to_json()).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Parses a manifest from JSON text without touching referenced files.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<SceneManifest, IngestError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawManifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        IngestError::malformed(field, e.into_inner().to_string())
    })?;
    let mut frames = Vec::with_capacity(raw.frames.len());
    for (i, f) in raw.frames.into_iter().enumerate() {
        if f.pose.len() != 16 {
            return Err(IngestError::malformed(
                format!("frames[{i}].pose"),
                format!("expected 16 numbers, found {}", f.pose.len()),
            ));
        }
        let pose = CameraPose::from_row_major(&f.pose).map_err(|reason| IngestError::NonRigidPose {
            frame_id: f.frame_id,
            reason,
        })?;
        frames.push(FrameRecord {
            frame_id: f.frame_id,
            color_ref: f.color,
            depth_ref: f.depth,
            pose,
            timestamp: f.timestamp,
        });
    }
    let manifest = SceneManifest {
        scene_id: raw.scene_id,
        depth_format: raw.depth_format,
        max_depth_m: raw.max_depth_m,
        intrinsics: raw.intrinsics,
        frames,
        base_dir: base_dir.to_path_buf(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Loads and validates a manifest; relative paths resolve against the
/// manifest's own directory.
pub fn load_manifest(path: &Path) -> Result<SceneManifest, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, &base_dir)?;
    for f in &manifest.frames {
        for r in [&f.color_ref, &f.depth_ref] {
            let p = manifest.resolve(r);
            if !p.is_file() {
                return Err(IngestError::MissingFile {
                    frame_id: f.frame_id,
                    path: p,
                });
            }
        }
    }
    Ok(manifest)
}

/// Metric depth raster; `None` marks pixels without a usable measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    values: Vec<Option<f64>>,
}

impl DepthMap {
    pub fn from_values(width: u32, height: u32, values: Vec<Option<f64>>) -> Self {
        assert_eq!(values.len(), width as usize * height as usize);
        DepthMap {
            width,
            height,
            values,
        }
    }

    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        self.values[(v * self.width + u) as usize]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Converts stored 16-bit units to meters. Zeros and depths past
    /// `max_depth_m` become invalid.
    pub fn from_raw_u16(
        width: u32,
        height: u32,
        raw: &[u16],
        depth_scale: f64,
        max_depth_m: f64,
    ) -> Self {
        let values = raw
            .iter()
            .map(|&s| {
                if s == 0 {
                    return None;
                }
                let d = s as f64 * depth_scale;
                (d <= max_depth_m).then_some(d)
            })
            .collect();
        DepthMap::from_values(width, height, values)
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl ColorImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize * 3);
        ColorImage {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        ColorImage::new(width, height, data)
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length matches dimensions")
    }
}

pub fn load_depth(
    scene: &SceneManifest,
    record: &FrameRecord,
) -> Result<DepthMap, IngestError> {
    let intr = &scene.intrinsics;
    let path = scene.resolve(&record.depth_ref);
    let raw: Vec<u16> = match scene.depth_format {
        DepthFormat::Png16 => {
            let img = decode(&path).map_err(IngestError::UnsupportedDepthEncoding)?;
            let img = match img {
                DynamicImage::ImageLuma16(buf) => buf,
                other => {
                    return Err(IngestError::UnsupportedDepthEncoding(format!(
                        "{}: expected 16-bit grayscale, found {:?}",
                        path.display(),
                        other.color()
                    )))
                }
            };
            check_dims(intr, img.width(), img.height())?;
            img.into_raw()
        }
        DepthFormat::Raw16Le => {
            let bytes = fs::read(&path).map_err(|source| IngestError::Io {
                path: path.clone(),
                source,
            })?;
            let expected = intr.width as usize * intr.height as usize * 2;
            if bytes.len() != expected {
                if bytes.len() % 2 != 0 {
                    return Err(IngestError::UnsupportedDepthEncoding(format!(
                        "{}: odd byte count {}",
                        path.display(),
                        bytes.len()
                    )));
                }
                // Raw files carry no header; report the pixel count as a single row.
                return Err(IngestError::DimensionMismatch {
                    expected_w: intr.width,
                    expected_h: intr.height,
                    found_w: (bytes.len() / 2) as u32,
                    found_h: 1,
                });
            }
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        }
    };
    Ok(DepthMap::from_raw_u16(
        intr.width,
        intr.height,
        &raw,
        intr.depth_scale,
        scene.max_depth_m,
    ))
}

fn check_dims(intr: &CameraIntrinsics, w: u32, h: u32) -> Result<(), IngestError> {
    if (w, h) != (intr.width, intr.height) {
        return Err(IngestError::DimensionMismatch {
            expected_w: intr.width,
            expected_h: intr.height,
            found_w: w,
            found_h: h,
        });
    }
    Ok(())
}

fn decode(path: &Path) -> Result<DynamicImage, String> {
    ImageReader::open(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .with_guessed_format()
        .map_err(|e| format!("{}: {e}", path.display()))?
        .decode()
        .map_err(|e| format!("{}: {e}", path.display()))
}

pub fn load_color(scene: &SceneManifest, record: &FrameRecord) -> Result<ColorImage, IngestError> {
    let path = scene.resolve(&record.color_ref);
    if !path.is_file() {
        return Err(IngestError::MissingFile {
            frame_id: record.frame_id,
            path,
        });
    }
    let img = decode(&path).map_err(IngestError::UnsupportedColorEncoding)?;
    let rgb = match img {
        DynamicImage::ImageRgb8(buf) => buf,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            img.to_rgb8()
        }
        other => {
            return Err(IngestError::UnsupportedColorEncoding(format!(
                "{}: expected 8-bit color, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(ColorImage::new(rgb.width(), rgb.height(), rgb.into_raw()))
}
