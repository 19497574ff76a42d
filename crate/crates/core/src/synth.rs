//! Seeded synthetic RGB-D scenes: a box room with furniture, rendered by
//! analytic ray casting along a camera path, plus pose-derived embeddings
//! and a voxel coverage score for judging keyframe sets.

use std::collections::{HashMap, HashSet};
use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{EmbeddingError, EmbeddingMatrix};
use crate::features::{back_project, to_world};
use crate::scene::{
    load_depth, CameraIntrinsics, CameraPose, ColorImage, DepthFormat, FrameRecord, IngestError, SceneManifest,
};

/// Edge length of coverage voxels in meters.
pub const COVERAGE_VOXEL_M: f64 = 0.25;

const DEPTH_SCALE: f64 = 0.001;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{}: {message}", path.display())]
    Write { path: std::path::PathBuf, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    /// One lap around the room center at varying speed, looking inward.
    Circle,
    /// A straight pass along the room, looking at the side wall.
    Line,
    /// Bounded wandering with a drifting heading.
    RandomWalk,
}

impl FromStr for PathKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "circle" => Ok(PathKind::Circle),
            "line" => Ok(PathKind::Line),
            "random-walk" => Ok(PathKind::RandomWalk),
            _ => Err(format!("unknown path kind `{s}` (expected circle, line or random-walk)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub path: PathKind,
    pub frame_count: usize,
    /// Room extents along x, y, z in meters; z is up.
    pub room: [f64; 3],
    pub embedding_dim: usize,
    pub width: u32,
    pub height: u32,
    /// Share of frames rendered with a blur.
    pub blur_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            path: PathKind::Circle,
            frame_count: 100,
            room: [6.0, 5.0, 3.0],
            embedding_dim: 32,
            width: 64,
            height: 48,
            blur_fraction: 0.15,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.frame_count < 2 {
            return bad("frame_count must be at least 2");
        }
        if self.room.iter().any(|&e| !(e >= 2.0 && e <= 50.0)) {
            return bad("room extents must lie in [2, 50] m");
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2");
        }
        if self.width < 16 || self.height < 16 {
            return bad("images must be at least 16x16");
        }
        if !(0.0..=1.0).contains(&self.blur_fraction) {
            return bad("blur_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        // roughly 63° horizontal field of view
        let f = self.width as f64 * 0.8125;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
            depth_scale: DEPTH_SCALE,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Aabb {
    /// Entry distance of a ray starting outside the box.
    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let t1 = (self.min[a] - o[a]) / d[a];
            let t2 = (self.max[a] - o[a]) / d[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_near {
                t_near = lo;
                axis = a;
            }
            t_far = t_far.min(hi);
        }
        (t_near > 1e-9 && t_near <= t_far).then_some((t_near, axis))
    }
}

struct Room {
    extent: Vector3<f64>,
    furniture: Vec<(Aabb, [f64; 3])>,
    wall_colors: [[f64; 3]; 6],
}

struct Hit {
    t: f64,
    point: Vector3<f64>,
    albedo: [f64; 3],
}

impl Room {
    fn generate(rng: &mut ChaCha8Rng, extent: Vector3<f64>) -> Room {
        let mut color = || [rng.gen_range(40.0..220.0), rng.gen_range(40.0..220.0), rng.gen_range(40.0..220.0)];
        let wall_colors = [color(), color(), color(), color(), color(), color()];
        let count = rng.gen_range(3..=6);
        let furniture = (0..count)
            .map(|_| {
                let size = Vector3::new(rng.gen_range(0.4..1.2), rng.gen_range(0.4..1.2), rng.gen_range(0.4..1.0));
                let x = rng.gen_range(0.1..(extent.x - size.x - 0.1));
                let y = rng.gen_range(0.1..(extent.y - size.y - 0.1));
                let min = Vector3::new(x, y, 0.0);
                let c = [rng.gen_range(30.0..230.0), rng.gen_range(30.0..230.0), rng.gen_range(30.0..230.0)];
                (Aabb { min, max: min + size }, c)
            })
            .collect();
        Room {
            extent,
            furniture,
            wall_colors,
        }
    }

    /// Nearest surface along a ray from inside the room.
    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Hit {
        let mut best_t = f64::INFINITY;
        let mut albedo = [0.0; 3];
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                continue;
            }
            let (t, face) = if d[a] > 0.0 {
                ((self.extent[a] - o[a]) / d[a], 2 * a + 1)
            } else {
                (-o[a] / d[a], 2 * a)
            };
            if t < best_t {
                best_t = t;
                albedo = self.wall_colors[face];
            }
        }
        for (b, c) in &self.furniture {
            if let Some((t, axis)) = b.hit(o, d) {
                if t < best_t {
                    best_t = t;
                    // shade faces by orientation so box edges show up
                    let k = [0.8, 0.9, 1.0][axis];
                    albedo = [c[0] * k, c[1] * k, c[2] * k];
                }
            }
        }
        Hit {
            t: best_t,
            point: o + d * best_t,
            albedo,
        }
    }
}

/// World-from-camera rotation for a camera looking along `forward` with z up.
fn look_rotation(forward: Vector3<f64>) -> Matrix3<f64> {
    let f = forward.normalize();
    let right = f.cross(&Vector3::z()).normalize();
    let down = f.cross(&right);
    Matrix3::from_columns(&[right, down, f])
}

fn forward_from(yaw: f64, pitch_down: f64) -> Vector3<f64> {
    Vector3::new(
        pitch_down.cos() * yaw.cos(),
        pitch_down.cos() * yaw.sin(),
        -pitch_down.sin(),
    )
}

/// Camera-to-world poses along the requested path.
fn camera_path(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, extent: &Vector3<f64>) -> Vec<CameraPose> {
    let n = spec.frame_count;
    let center = Vector3::new(extent.x / 2.0, extent.y / 2.0, 0.0);
    let eye_h = (1.5f64).min(extent.z - 0.3);
    match spec.path {
        PathKind::Circle => {
            let radius = 0.35 * extent.x.min(extent.y);
            // speed varies smoothly so frames bunch up on part of the lap
            let amp = rng.gen_range(0.5..0.9);
            let phase = rng.gen_range(0.0..TAU);
            let start = rng.gen_range(0.0..TAU);
            let steps: Vec<f64> = (0..n)
                .map(|k| {
                    let s = k as f64 / n as f64;
                    (1.0 + amp * (TAU * s + phase).sin()) * rng.gen_range(0.8..1.2)
                })
                .collect();
            let total: f64 = steps.iter().sum();
            let mut acc = 0.0;
            steps
                .iter()
                .map(|s| {
                    let theta = start + TAU * acc / total;
                    acc += s;
                    let pos = Vector3::new(center.x + radius * theta.cos(), center.y + radius * theta.sin(), eye_h);
                    let to_center = center - pos;
                    let yaw = to_center.y.atan2(to_center.x);
                    let pitch = rng.gen_range(0.15..0.35);
                    CameraPose::from_parts(look_rotation(forward_from(yaw, pitch)), pos)
                })
                .collect()
        }
        PathKind::Line => {
            let x0 = 0.2 * extent.x;
            let x1 = 0.8 * extent.x;
            let y = 0.3 * extent.y;
            (0..n)
                .map(|k| {
                    let s = k as f64 / (n - 1) as f64;
                    let pos = Vector3::new(x0 + (x1 - x0) * s, y, eye_h);
                    let yaw = PI / 2.0 + rng.gen_range(-0.2..0.2);
                    let pitch = rng.gen_range(0.1..0.3);
                    CameraPose::from_parts(look_rotation(forward_from(yaw, pitch)), pos)
                })
                .collect()
        }
        PathKind::RandomWalk => {
            let margin = 0.5;
            let mut pos = Vector3::new(center.x, center.y, eye_h);
            let mut yaw = rng.gen_range(0.0..TAU);
            (0..n)
                .map(|_| {
                    yaw += rng.gen_range(-0.25..0.25);
                    let step = Vector3::new(yaw.cos(), yaw.sin(), 0.0) * 0.08;
                    pos += step;
                    for a in 0..2 {
                        if pos[a] < margin || pos[a] > extent[a] - margin {
                            pos[a] = pos[a].clamp(margin, extent[a] - margin);
                            yaw += PI / 2.0;
                        }
                    }
                    pos.z = (eye_h + rng.gen_range(-0.1..0.1)).min(extent.z - 0.2);
                    let pitch = rng.gen_range(0.1..0.35);
                    CameraPose::from_parts(look_rotation(forward_from(yaw, pitch)), pos)
                })
                .collect()
        }
    }
}

fn checker(p: &Vector3<f64>) -> f64 {
    let cell = |x: f64| (x / 0.25).floor() as i64;
    if (cell(p.x) + cell(p.y) + cell(p.z)).rem_euclid(2) == 0 {
        1.12
    } else {
        0.88
    }
}

fn box_blur(img: &ColorImage) -> ColorImage {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            let mut n = 0;
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx >= 0 && yy >= 0 && xx < w && yy < h {
                        let p = img.pixel(xx as u32, yy as u32);
                        for c in 0..3 {
                            acc[c] += p[c] as u32;
                        }
                        n += 1;
                    }
                }
            }
            out.set_pixel(x as u32, y as u32, acc.map(|a| ((a + n / 2) / n) as u8));
        }
    }
    out
}

fn render(
    room: &Room,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    noise_seed: u64,
    blurred: bool,
) -> (Vec<u16>, ColorImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let r = pose.rotation();
    let o = pose.translation();
    let mut depth = Vec::with_capacity((intr.width * intr.height) as usize);
    let mut color = ColorImage::filled(intr.width, intr.height, [0, 0, 0]);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let ray_cam = Vector3::new(
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            );
            let d = r * ray_cam;
            let hit = room.cast(&o, &d);
            // unit camera-z ray: the hit distance is the depth
            let mm = (hit.t / DEPTH_SCALE).round();
            depth.push(if mm.is_finite() && mm > 0.0 && mm < 65535.0 { mm as u16 } else { 0 });
            let shade = checker(&hit.point);
            let px = hit.albedo.map(|c| (c * shade + rng.gen_range(-3.0..3.0)).round().clamp(0.0, 255.0) as u8);
            color.set_pixel(u, v, px);
        }
    }
    let color = if blurred { box_blur(&box_blur(&color)) } else { color };
    (depth, color)
}

/// Direction-tuned embedding: von Mises bumps over heading, so frames that
/// look the same way are similar regardless of position.
fn direction_embedding(pose: &CameraPose, dim: usize, jitter: &mut ChaCha8Rng) -> Vec<f64> {
    let f = pose.rotation().column(2).into_owned();
    let yaw = f.y.atan2(f.x);
    let kappa = 4.0;
    (0..dim)
        .map(|m| {
            let mu = TAU * m as f64 / dim as f64;
            (kappa * ((yaw - mu).cos() - 1.0)).exp() + jitter.gen_range(0.0..1e-3)
        })
        .collect()
}

fn write_err(path: &Path, e: impl ToString) -> SynthError {
    SynthError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Renders the scene into `out_dir` (scene.json, color/, depth/,
/// embeddings.json + .bin). Output bytes depend only on the spec.
pub fn generate_scene(
    spec: &SyntheticSpec,
    scene_id: &str,
    out_dir: &Path,
) -> Result<(SceneManifest, EmbeddingMatrix), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let extent = Vector3::new(spec.room[0], spec.room[1], spec.room[2]);
    let room = Room::generate(&mut rng, extent);
    let poses = camera_path(spec, &mut rng, &extent);
    let intr = spec.intrinsics();
    let blur: Vec<bool> = (0..spec.frame_count).map(|_| rng.gen_bool(spec.blur_fraction)).collect();
    let noise_base: u64 = rng.gen();

    for sub in ["color", "depth"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| write_err(&d, e))?;
    }

    let frames: Vec<FrameRecord> = (0..spec.frame_count)
        .into_par_iter()
        .map(|i| {
            let (depth, color) = render(&room, &intr, &poses[i], noise_base.wrapping_add(i as u64), blur[i]);
            let color_ref = format!("color/{i:06}.png");
            let depth_ref = format!("depth/{i:06}.png");
            let cpath = out_dir.join(&color_ref);
            color.to_rgb_image().save(&cpath).map_err(|e| write_err(&cpath, e))?;
            let dpath = out_dir.join(&depth_ref);
            image::ImageBuffer::<image::Luma<u16>, _>::from_raw(intr.width, intr.height, depth)
                .expect("depth buffer size")
                .save(&dpath)
                .map_err(|e| write_err(&dpath, e))?;
            Ok(FrameRecord {
                frame_id: i as u32,
                color_ref,
                depth_ref,
                pose: poses[i].clone(),
                timestamp: i as f64 * 0.1,
            })
        })
        .collect::<Result<_, SynthError>>()?;

    let manifest = SceneManifest {
        scene_id: scene_id.to_string(),
        depth_format: DepthFormat::Png16,
        max_depth_m: 65.0,
        intrinsics: intr,
        frames,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.write(&out_dir.join("scene.json"))?;

    let mut jitter = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let rows: Vec<Vec<f64>> = poses
        .iter()
        .map(|p| direction_embedding(p, spec.embedding_dim, &mut jitter))
        .collect();
    let ids: Vec<u32> = (0..spec.frame_count as u32).collect();
    let store = EmbeddingMatrix::from_rows(&format!("synthetic-direction-{}", spec.embedding_dim), ids, rows)?;
    store.write(out_dir)?;
    Ok((manifest, store))
}

type VoxelKey = (i64, i64, i64);

/// Fraction of the observed volume's voxels seen by a subset of frames.
/// The volume is the grid of `COVERAGE_VOXEL_M` cells spanning the bounding
/// box of every frame's points.
pub struct CoverageEvaluator {
    frames: HashMap<u32, Vec<VoxelKey>>,
    total_cells: u64,
}

impl CoverageEvaluator {
    pub fn new(scene: &SceneManifest) -> Result<Self, IngestError> {
        let per_frame: Vec<(u32, Vec<VoxelKey>)> = scene
            .frames
            .par_iter()
            .map(|f| {
                let depth = load_depth(scene, f)?;
                let pts = to_world(&back_project(&depth, &scene.intrinsics, 1), &f.pose);
                let mut keys: Vec<VoxelKey> = pts
                    .iter()
                    .map(|p| {
                        let c = |x: f64| (x / COVERAGE_VOXEL_M).floor() as i64;
                        (c(p.x), c(p.y), c(p.z))
                    })
                    .collect();
                keys.sort_unstable();
                keys.dedup();
                Ok((f.frame_id, keys))
            })
            .collect::<Result<_, IngestError>>()?;
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (_, keys) in &per_frame {
            for k in keys {
                lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
                hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
            }
        }
        let total_cells = if lo.0 > hi.0 {
            0
        } else {
            ((hi.0 - lo.0 + 1) * (hi.1 - lo.1 + 1) * (hi.2 - lo.2 + 1)) as u64
        };
        Ok(CoverageEvaluator {
            frames: per_frame.into_iter().collect(),
            total_cells,
        })
    }

    pub fn total_cells(&self) -> u64 {
        self.total_cells
    }

    /// Unknown frame ids contribute nothing.
    pub fn score(&self, frames: &[u32]) -> f64 {
        if self.total_cells == 0 {
            return 0.0;
        }
        let mut seen: HashSet<VoxelKey> = HashSet::new();
        for id in frames {
            if let Some(keys) = self.frames.get(id) {
                seen.extend(keys.iter().copied());
            }
        }
        seen.len() as f64 / self.total_cells as f64
    }
}
