//! Per-frame spatial statistics: back-projected world-frame point clouds,
//! their mean/covariance summary, and variance-of-Laplacian sharpness.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{
    load_color, load_depth, CameraIntrinsics, CameraPose, ColorImage, DepthMap, IngestError,
    SceneManifest,
};
use crate::selector::SelectionConfig;

/// Point clouds smaller than this are flagged degenerate by `cloud_stats`.
pub const MIN_STATS_POINTS: usize = 4;
/// Frames with fewer valid depth pixels are degenerate and get quality −∞.
pub const MIN_VALID_DEPTH_POINTS: usize = 100;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image is {width}x{height}; the Laplacian needs at least 3x3")]
    ImageTooSmall { width: u32, height: u32 },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("feature cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudStats {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub point_count: usize,
    /// Determinant of the covariance.
    pub spread: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub frame_id: u32,
    pub timestamp: f64,
    pub stats: PointCloudStats,
    pub sharpness: f64,
    /// `stats.spread + beta * sharpness`, or −∞ for degenerate frames.
    pub quality: f64,
}

/// Lifts sampled pixels with valid depth into camera-frame points.
/// Pixels are visited on the grid `u % stride == 0 && v % stride == 0`.
pub fn back_project(depth: &DepthMap, intr: &CameraIntrinsics, stride: u32) -> Vec<Vector3<f64>> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for v in (0..depth.height).step_by(stride as usize) {
        for u in (0..depth.width).step_by(stride as usize) {
            if let Some(d) = depth.get(u, v) {
                out.push(back_project_pixel(u as f64, v as f64, d, intr));
            }
        }
    }
    out
}

#[inline]
pub fn back_project_pixel(u: f64, v: f64, depth: f64, intr: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new(
        (u - intr.cx) * depth / intr.fx,
        (v - intr.cy) * depth / intr.fy,
        depth,
    )
}

pub fn to_world(points: &[Vector3<f64>], pose: &CameraPose) -> Vec<Vector3<f64>> {
    let r = pose.rotation();
    let t = pose.translation();
    points.iter().map(|p| r * p + t).collect()
}

/// Population mean and covariance (divide by N) of a point set.
pub fn cloud_stats(points: &[Vector3<f64>]) -> PointCloudStats {
    let n = points.len();
    if n == 0 {
        return PointCloudStats {
            mean: Vector3::zeros(),
            covariance: Matrix3::zeros(),
            point_count: 0,
            spread: 0.0,
            degenerate: true,
        };
    }
    let inv_n = 1.0 / n as f64;
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) * inv_n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov *= inv_n;
    // Force exact symmetry; the outer-product sum already is up to rounding.
    let cov = (cov + cov.transpose()) * 0.5;
    let degenerate = n < MIN_STATS_POINTS;
    let spread = if degenerate { 0.0 } else { cov.determinant() };
    PointCloudStats {
        mean,
        covariance: cov,
        point_count: n,
        spread,
        degenerate,
    }
}

/// Rec.601 luma as reals in [0, 255].
pub fn luma(image: &ColorImage) -> Vec<f64> {
    image
        .data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
pub fn laplacian_variance(image: &ColorImage) -> Result<f64, FeatureError> {
    let (w, h) = (image.width as usize, image.height as usize);
    if w < 3 || h < 3 {
        return Err(FeatureError::ImageTooSmall {
            width: image.width,
            height: image.height,
        });
    }
    let l = luma(image);
    let mut responses = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = y * w + x;
            responses.push(l[c - w] + l[c + w] + l[c - 1] + l[c + 1] - 4.0 * l[c]);
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    let var = responses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(var)
}

/// Sampling stride that keeps at most `max_points` of `valid_pixels` points.
pub fn sampling_stride(valid_pixels: usize, max_points: usize) -> u32 {
    let max_points = max_points.max(1);
    if valid_pixels <= max_points {
        return 1;
    }
    let ratio = valid_pixels as f64 / max_points as f64;
    let mut stride = ratio.sqrt().ceil() as u32;
    // guard against sqrt rounding just below an integer
    while (stride as f64) * (stride as f64) < ratio {
        stride += 1;
    }
    stride.max(1)
}

pub fn quality_score(stats: &PointCloudStats, sharpness: f64, beta: f64, valid_pixels: usize) -> f64 {
    if stats.degenerate || valid_pixels < MIN_VALID_DEPTH_POINTS {
        f64::NEG_INFINITY
    } else {
        stats.spread + beta * sharpness
    }
}

/// Spatial features of a single frame from already-decoded rasters.
pub fn frame_features_from_rasters(
    frame_id: u32,
    timestamp: f64,
    depth: &DepthMap,
    color: &ColorImage,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    config: &SelectionConfig,
) -> Result<FrameFeatures, FeatureError> {
    let valid = depth.valid_count();
    let stride = sampling_stride(valid, config.max_points);
    let points = to_world(&back_project(depth, intr, stride), pose);
    let mut stats = cloud_stats(&points);
    if valid < MIN_VALID_DEPTH_POINTS {
        stats.degenerate = true;
    }
    let sharpness = laplacian_variance(color)?;
    let quality = quality_score(&stats, sharpness, config.beta, valid);
    Ok(FrameFeatures {
        frame_id,
        timestamp,
        stats,
        sharpness,
        quality,
    })
}

pub fn compute_frame_features(
    scene: &SceneManifest,
    frame_id: u32,
    config: &SelectionConfig,
) -> Result<FrameFeatures, FeatureError> {
    let record = scene.frame(frame_id)?;
    let depth = load_depth(scene, record)?;
    let color = load_color(scene, record)?;
    frame_features_from_rasters(
        frame_id,
        record.timestamp,
        &depth,
        &color,
        &scene.intrinsics,
        &record.pose,
        config,
    )
}

/// Features for every frame in manifest order, computed in parallel. With
/// `normalize_quality` set, spread and sharpness are z-scored across the
/// non-degenerate frames before being combined.
pub fn compute_scene_features(
    scene: &SceneManifest,
    config: &SelectionConfig,
) -> Result<Vec<FrameFeatures>, FeatureError> {
    let mut features = scene
        .frames
        .par_iter()
        .map(|f| compute_frame_features(scene, f.frame_id, config))
        .collect::<Result<Vec<_>, _>>()?;
    if config.normalize_quality {
        normalize_quality(&mut features, config.beta);
    }
    Ok(features)
}

fn normalize_quality(features: &mut [FrameFeatures], beta: f64) {
    let live: Vec<usize> = (0..features.len())
        .filter(|&i| features[i].quality.is_finite())
        .collect();
    if live.is_empty() {
        return;
    }
    let z = |vals: Vec<f64>| -> Vec<f64> {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        vals.iter()
            .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
            .collect()
    };
    let spread = z(live.iter().map(|&i| features[i].stats.spread).collect());
    let sharp = z(live.iter().map(|&i| features[i].sharpness).collect());
    for (k, &i) in live.iter().enumerate() {
        features[i].quality = spread[k] + beta * sharp[k];
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    scene_id: String,
    frames: Vec<CacheEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    frame_id: u32,
    timestamp: f64,
    mean: [f64; 3],
    covariance: [f64; 9],
    point_count: usize,
    degenerate: bool,
    sharpness: f64,
    /// `null` encodes the −∞ quality of degenerate frames.
    quality: Option<f64>,
}

/// Writes `features.json`. Floats use shortest round-trip formatting, so
/// reading the file back reproduces every value bit for bit.
pub fn write_features_cache(
    path: &Path,
    scene_id: &str,
    features: &[FrameFeatures],
) -> Result<(), FeatureError> {
    let file = CacheFile {
        version: 1,
        scene_id: scene_id.to_string(),
        frames: features
            .iter()
            .map(|f| {
                let c = &f.stats.covariance;
                let mut cov = [0.0; 9];
                for r in 0..3 {
                    for k in 0..3 {
                        cov[r * 3 + k] = c[(r, k)];
                    }
                }
                CacheEntry {
                    frame_id: f.frame_id,
                    timestamp: f.timestamp,
                    mean: [f.stats.mean.x, f.stats.mean.y, f.stats.mean.z],
                    covariance: cov,
                    point_count: f.stats.point_count,
                    degenerate: f.stats.degenerate,
                    sharpness: f.sharpness,
                    quality: f.quality.is_finite().then_some(f.quality),
                }
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("cache serializes") + "\n";
    fs::write(path, text).map_err(|e| FeatureError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_features_cache(path: &Path) -> Result<(String, Vec<FrameFeatures>), FeatureError> {
    let err = |message: String| FeatureError::Cache {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let file: CacheFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    let features = file
        .frames
        .into_iter()
        .map(|e| {
            let covariance = Matrix3::from_row_slice(&e.covariance);
            FrameFeatures {
                frame_id: e.frame_id,
                timestamp: e.timestamp,
                stats: PointCloudStats {
                    mean: Vector3::from(e.mean),
                    spread: if e.degenerate { 0.0 } else { covariance.determinant() },
                    covariance,
                    point_count: e.point_count,
                    degenerate: e.degenerate,
                },
                sharpness: e.sharpness,
                quality: e.quality.unwrap_or(f64::NEG_INFINITY),
            }
        })
        .collect();
    Ok((file.scene_id, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_intr() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 4,
            height: 4,
            depth_scale: 0.001,
        }
    }

    #[test]
    fn back_project_direct_substitution() {
        let mut vals = vec![None; 16];
        vals[3 * 4 + 2] = Some(2.0);
        let d = DepthMap::from_values(4, 4, vals);
        let pts = back_project(&d, &unit_intr(), 1);
        assert_eq!(pts, vec![Vector3::new(4.0, 6.0, 2.0)]);
    }

    #[test]
    fn back_project_principal_ray() {
        let intr = CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            depth_scale: 0.001,
        };
        assert_eq!(back_project_pixel(320.0, 240.0, 1.5, &intr), Vector3::new(0.0, 0.0, 1.5));
    }

    #[test]
    fn back_project_skips_invalid_and_strides() {
        let d = DepthMap::from_values(4, 4, vec![None; 16]);
        assert!(back_project(&d, &unit_intr(), 1).is_empty());
        let d = DepthMap::from_values(4, 4, vec![Some(1.0); 16]);
        let pts = back_project(&d, &unit_intr(), 2);
        // pixels (0,0), (2,0), (0,2), (2,2)
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[3], Vector3::new(2.0, 2.0, 1.0));
    }

    #[test]
    fn world_transform_cases() {
        let p = vec![Vector3::new(0.3, -1.0, 2.0)];
        assert_eq!(to_world(&p, &CameraPose::identity()), p);
        let t = CameraPose::from_parts(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(to_world(&[Vector3::zeros()], &t), vec![Vector3::new(1.0, 2.0, 3.0)]);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let r = CameraPose::from_parts(*rz.matrix(), Vector3::zeros());
        let q = to_world(&[Vector3::new(1.0, 0.0, 0.0)], &r)[0];
        assert!((q - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn two_point_population_covariance() {
        let s = cloud_stats(&[Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)]);
        assert_eq!(s.mean, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(s.covariance, Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0)));
        assert_eq!(s.spread, 0.0);
        assert!(s.degenerate);
    }

    #[test]
    fn single_and_empty_clouds_are_degenerate() {
        let s = cloud_stats(&[Vector3::new(1.0, 2.0, 3.0)]);
        assert!(s.degenerate);
        assert_eq!(s.spread, 0.0);
        let e = cloud_stats(&[]);
        assert!(e.degenerate);
        assert_eq!(e.point_count, 0);
        assert_eq!(e.mean, Vector3::zeros());
    }

    #[test]
    fn unit_cube_monte_carlo() {
        // Uniform on [0,1]^3: mean 1/2, variance 1/12 per axis.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<_> = (0..1000)
            .map(|_| Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen()))
            .collect();
        let s = cloud_stats(&pts);
        for k in 0..3 {
            assert!((s.mean[k] - 0.5).abs() <= 0.05);
            assert!((s.covariance[(k, k)] - 1.0 / 12.0).abs() <= 0.02);
        }
        assert!(!s.degenerate);
    }

    #[test]
    fn laplacian_constant_and_single_interior() {
        let img = ColorImage::filled(5, 4, [10, 200, 30]);
        assert_eq!(laplacian_variance(&img).unwrap(), 0.0);
        let mut img = ColorImage::filled(3, 3, [0, 0, 0]);
        img.set_pixel(1, 1, [255, 255, 255]);
        assert_eq!(laplacian_variance(&img).unwrap(), 0.0);
        assert!(matches!(
            laplacian_variance(&ColorImage::filled(2, 5, [0, 0, 0])),
            Err(FeatureError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn laplacian_checkerboard_matches_hand_convolution() {
        // 4x4 checkerboard, luma 255 where (x + y) is even.
        let mut img = ColorImage::filled(4, 4, [0, 0, 0]);
        for y in 0..4 {
            for x in 0..4 {
                if (x + y) % 2 == 0 {
                    img.set_pixel(x, y, [255, 255, 255]);
                }
            }
        }
        // Interior (1,1),(2,2) are white: 4 black neighbours -> -4*255 = -1020.
        // Interior (2,1),(1,2) are black: 4 white neighbours -> 4*255 = 1020.
        // Responses {-1020, 1020, 1020, -1020}: mean 0, variance 1020^2.
        let luma255 = 0.299 * 255.0 + 0.587 * 255.0 + 0.114 * 255.0;
        let expected = (4.0 * luma255) * (4.0 * luma255);
        assert_relative_eq!(laplacian_variance(&img).unwrap(), expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 1020.0 * 1020.0, max_relative = 1e-9);
    }

    #[test]
    fn stride_caps_points() {
        assert_eq!(sampling_stride(100, 4096), 1);
        assert_eq!(sampling_stride(4096, 4096), 1);
        assert_eq!(sampling_stride(307_200, 4096), 9);
        assert_eq!(sampling_stride(4 * 4096, 4096), 2);
    }

    #[test]
    fn degenerate_frames_get_negative_infinite_quality() {
        let cfg = SelectionConfig::default();
        let mut vals = vec![None; 100];
        for v in vals.iter_mut().take(50) {
            *v = Some(2.0);
        }
        let depth = DepthMap::from_values(10, 10, vals);
        let color = ColorImage::filled(10, 10, [5, 5, 5]);
        let f = frame_features_from_rasters(
            0,
            0.0,
            &depth,
            &color,
            &unit_intr(),
            &CameraPose::identity(),
            &cfg,
        )
        .unwrap();
        assert!(f.stats.degenerate);
        assert_eq!(f.quality, f64::NEG_INFINITY);
    }

    fn random_rigid(rng: &mut ChaCha8Rng) -> (Matrix3<f64>, Vector3<f64>) {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let r = Rotation3::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..3.0));
        let t = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        (*r.matrix(), t)
    }

    #[test]
    fn rigid_covariance_of_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let pts: Vec<_> = (0..200)
                .map(|_| Vector3::new(rng.gen_range(0.0..3.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..2.0)))
                .collect();
            let (r, t) = random_rigid(&mut rng);
            let moved: Vec<_> = pts.iter().map(|p| r * p + t).collect();
            let a = cloud_stats(&pts);
            let b = cloud_stats(&moved);
            assert!((b.mean - (r * a.mean + t)).norm() < 1e-9);
            assert!((b.covariance - r * a.covariance * r.transpose()).abs().max() < 1e-9);
            assert!((b.spread - a.spread).abs() <= 1e-9 * a.spread.abs());
        }
    }

    proptest! {
        #[test]
        fn stats_permutation_invariant(
            pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 4..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let pts: Vec<_> = pts.into_iter().map(|(x, y, z)| Vector3::new(x, y, z)).collect();
            let mut shuffled = pts.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = cloud_stats(&pts);
            let b = cloud_stats(&shuffled);
            prop_assert!((a.mean - b.mean).abs().max() < 1e-12);
            prop_assert!((a.covariance - b.covariance).abs().max() < 1e-10);
            let eig = a.covariance.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|&e| e >= -1e-9));
            prop_assert!(a.spread >= -1e-12);
        }

        #[test]
        fn back_project_reprojects(u in 0u32..640, v in 0u32..480, d in 0.1f64..10.0) {
            let intr = CameraIntrinsics { fx: 525.0, fy: 520.0, cx: 319.5, cy: 239.5, width: 640, height: 480, depth_scale: 0.001 };
            let q = back_project_pixel(u as f64, v as f64, d, &intr);
            let (pu, pv) = intr.project(&q);
            prop_assert!((pu - u as f64).abs() < 1e-9);
            prop_assert!((pv - v as f64).abs() < 1e-9);
            prop_assert_eq!(q.z, d);
        }

        #[test]
        fn laplacian_transpose_invariant_for_symmetric(vals in prop::collection::vec(0u8..=255, 21)) {
            // symmetric 6x6 luma built from the upper triangle
            let n = 6u32;
            let mut img = ColorImage::filled(n, n, [0, 0, 0]);
            let mut k = 0;
            for y in 0..n {
                for x in y..n {
                    let g = vals[k];
                    k += 1;
                    img.set_pixel(x, y, [g, g, g]);
                    img.set_pixel(y, x, [g, g, g]);
                }
            }
            let mut t = img.clone();
            for y in 0..n {
                for x in 0..n {
                    t.set_pixel(x, y, img.pixel(y, x));
                }
            }
            let a = laplacian_variance(&img).unwrap();
            prop_assert_eq!(a, laplacian_variance(&t).unwrap());
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn quality_monotone_in_sharpness(s1 in 0.0f64..1e4, s2 in 0.0f64..1e4, beta in 0.0f64..10.0, spread in 0.0f64..10.0) {
            let stats = PointCloudStats { mean: Vector3::zeros(), covariance: Matrix3::identity(), point_count: 500, spread, degenerate: false };
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(quality_score(&stats, lo, beta, 500) <= quality_score(&stats, hi, beta, 500));
        }
    }

    #[test]
    fn laplacian_positive_for_nonconstant_interior() {
        let mut img = ColorImage::filled(5, 5, [100, 100, 100]);
        img.set_pixel(2, 2, [101, 101, 101]);
        assert!(laplacian_variance(&img).unwrap() > 0.0);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.json");
        let pts: Vec<_> = (0..10)
            .map(|i| Vector3::new(i as f64 * 0.1, (i * i) as f64 * 0.013, 1.0 / (i + 1) as f64))
            .collect();
        let stats = cloud_stats(&pts);
        let feats = vec![
            FrameFeatures { frame_id: 3, timestamp: 0.5, stats: stats.clone(), sharpness: 12.345678901234567, quality: stats.spread + 12.345678901234567 },
            FrameFeatures { frame_id: 4, timestamp: 0.6, stats: cloud_stats(&[]), sharpness: 0.0, quality: f64::NEG_INFINITY },
        ];
        write_features_cache(&path, "scene", &feats).unwrap();
        let (id, back) = read_features_cache(&path).unwrap();
        assert_eq!(id, "scene");
        assert_eq!(back[0].stats.mean, feats[0].stats.mean);
        assert_eq!(back[0].stats.covariance, feats[0].stats.covariance);
        assert_eq!(back[0].sharpness, feats[0].sharpness);
        assert_eq!(back[0].quality, feats[0].quality);
        assert_eq!(back[1].quality, f64::NEG_INFINITY);
    }
}
