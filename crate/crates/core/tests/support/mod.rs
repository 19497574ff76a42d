//! Independent reference implementations and fixture builders shared by the
//! integration tests. Nothing here calls into the code it checks.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spatial_prompt::embeddings::EmbeddingMatrix;
use spatial_prompt::features::{FrameFeatures, PointCloudStats};
use spatial_prompt::scene::{CameraIntrinsics, CameraPose, DepthFormat, FrameRecord, SceneManifest};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// goldens

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Byte comparison against `tests/fixtures/<rel>`; `UPDATE_GOLDENS=1`
/// rewrites the file instead.
pub fn check_golden(rel: &str, actual: &str) -> Result<(), String> {
    let path = fixtures_dir().join(rel);
    if std::env::var("UPDATE_GOLDENS").as_deref() == Ok("1") {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        return Ok(());
    }
    let line = expected
        .lines()
        .zip(actual.lines())
        .position(|(a, b)| a != b)
        .unwrap_or(expected.lines().count().min(actual.lines().count()));
    Err(format!(
        "{rel} differs at line {}:\n  golden: {:?}\n  actual: {:?}",
        line + 1,
        expected.lines().nth(line).unwrap_or("<eof>"),
        actual.lines().nth(line).unwrap_or("<eof>")
    ))
}

// ---------------------------------------------------------------------------
// selection oracle

/// `Δᵀ P⁻¹ Δ` with `P` inverted explicitly. Ill-conditioned pools get the
/// relative ridge, judged by the singular-value ratio.
pub fn oracle_mahalanobis(a: &PointCloudStats, b: &PointCloudStats, ridge: f64) -> f64 {
    let delta = a.mean - b.mean;
    let mut pooled = (a.covariance + b.covariance) / 2.0;
    let sv = pooled.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    if lo <= 0.0 || hi / lo > 1e12 {
        let mut shift = ridge * (a.covariance.trace() + b.covariance.trace()) / 2.0 / 3.0;
        if shift <= 0.0 {
            shift = ridge;
        }
        pooled += Matrix3::identity() * shift;
    }
    let inv = pooled.try_inverse().expect("pooled covariance invertible");
    let d = (delta.transpose() * inv * delta)[(0, 0)];
    d.max(0.0)
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Literal greedy pruning: rescan every surviving pair each round.
pub fn oracle_select(
    features: &[FrameFeatures],
    embeddings: &HashMap<u32, Vec<f64>>,
    alpha: f64,
    ridge: f64,
    n_max: usize,
) -> Vec<u32> {
    let mut alive: Vec<&FrameFeatures> = features.iter().collect();
    alive.sort_by_key(|f| f.frame_id);
    while alive.len() > n_max {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..alive.len() {
            for j in i + 1..alive.len() {
                let (a, b) = (alive[i], alive[j]);
                let d = if a.stats.degenerate || b.stats.degenerate {
                    f64::NEG_INFINITY
                } else {
                    let s = oracle_cosine(&embeddings[&a.frame_id], &embeddings[&b.frame_id]);
                    oracle_mahalanobis(&a.stats, &b.stats, ridge) + alpha * (1.0 - s)
                };
                // strict `<` keeps the first pair in id order on ties
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (_, i, j) = best.unwrap();
        let drop = if alive[i].quality > alive[j].quality { j } else { i };
        alive.remove(drop);
    }
    alive.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap());
    alive.iter().map(|f| f.frame_id).collect()
}

pub fn stats(mean: Vector3<f64>, covariance: Matrix3<f64>, degenerate: bool) -> PointCloudStats {
    PointCloudStats {
        mean,
        covariance,
        point_count: if degenerate { 2 } else { 1000 },
        spread: if degenerate { 0.0 } else { covariance.determinant() },
        degenerate,
    }
}

pub fn random_spd(rng: &mut ChaCha8Rng, scale: f64) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    (a * a.transpose() + Matrix3::identity() * 0.05) * scale
}

/// A random selection problem. `exact` instances use integer means, scaled
/// identity covariances, one-hot embeddings and a handful of quality
/// levels, so fused distances are exact and ties are common.
pub struct Instance {
    pub features: Vec<FrameFeatures>,
    pub rows: HashMap<u32, Vec<f64>>,
    pub store: EmbeddingMatrix,
    pub alpha: f64,
    pub n_max: usize,
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, exact: bool) -> Instance {
    let mut ids: Vec<u32> = (0..n as u32 * 3).collect();
    // shuffled, non-contiguous ids with timestamps unrelated to id order
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    ids.truncate(n);
    // distinct timestamps in an order unrelated to ids
    let mut times: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        times.swap(i, rng.gen_range(0..=i));
    }
    let dim = 3;
    // one power-of-four scale per instance keeps Cholesky and explicit
    // inversion bit-identical
    let exact_scale = [0.25, 1.0, 4.0][rng.gen_range(0..3)];
    let mut features = Vec::new();
    let mut rows = HashMap::new();
    for (k, &id) in ids.iter().enumerate() {
        let degenerate = rng.gen_bool(0.1);
        let (mean, cov, emb) = if exact {
            let m = Vector3::new(rng.gen_range(-2..=2) as f64, rng.gen_range(-2..=2) as f64, 0.0);
            let mut e = vec![0.0; dim];
            e[rng.gen_range(0..dim)] = 1.0;
            (m, Matrix3::identity() * exact_scale, e)
        } else {
            let m = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let e: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.05..1.0)).collect();
            let scale = rng.gen_range(0.2..2.0);
            (m, random_spd(rng, scale), e)
        };
        let sharp = if exact { rng.gen_range(0..4) as f64 } else { rng.gen_range(0.0..100.0) };
        let st = stats(mean, cov, degenerate);
        let quality = if degenerate { f64::NEG_INFINITY } else { st.spread + sharp };
        features.push(FrameFeatures {
            frame_id: id,
            timestamp: times[k] as f64 * 0.5,
            stats: st,
            sharpness: sharp,
            quality,
        });
        rows.insert(id, emb);
    }
    let store = EmbeddingMatrix::from_rows("test", ids.clone(), ids.iter().map(|i| rows[i].clone()).collect()).unwrap();
    Instance {
        features,
        rows,
        store,
        alpha: if exact { [0.0, 1.0, 5.0][rng.gen_range(0..3)] } else { rng.gen_range(0.0..10.0) },
        n_max: rng.gen_range(1..=n),
    }
}

// ---------------------------------------------------------------------------
// metric oracle

fn toks(s: &str) -> Vec<String> {
    s.to_lowercase().split_whitespace().map(String::from).collect()
}

pub fn ref_em(pred: &str, refs: &[String]) -> f64 {
    let p = toks(pred).join(" ");
    refs.iter().any(|r| toks(r).join(" ") == p) as u8 as f64
}

fn lcs(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs(a, b, i + 1, j + 1, memo)
    } else {
        lcs(a, b, i + 1, j, memo).max(lcs(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

pub fn ref_rouge_l(pred: &str, refs: &[String]) -> f64 {
    let p = toks(pred);
    let mut best: f64 = 0.0;
    for r in refs {
        let r = toks(r);
        if p.is_empty() || r.is_empty() {
            continue;
        }
        let l = lcs(&p, &r, 0, 0, &mut HashMap::new()) as f64;
        if l == 0.0 {
            continue;
        }
        let (prec, rec) = (l / p.len() as f64, l / r.len() as f64);
        let b2 = 1.44;
        best = best.max((1.0 + b2) * prec * rec / (rec + b2 * prec));
    }
    best
}

fn grams(t: &[String], n: usize) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for i in 0..(t.len() + 1).saturating_sub(n) {
        *m.entry(t[i..i + n].join("\u{1}")).or_default() += 1;
    }
    m
}

pub fn ref_bleu(pred: &str, refs: &[String], n: usize) -> f64 {
    let p = toks(pred);
    if p.is_empty() {
        return 0.0;
    }
    let rs: Vec<Vec<String>> = refs.iter().map(|r| toks(r)).collect();
    let mut precisions = Vec::new();
    for k in 1..=n {
        if k > p.len() {
            break;
        }
        let cand = grams(&p, k);
        let mut matched = 0;
        for (g, c) in &cand {
            let max_ref = rs.iter().map(|r| grams(r, k).get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            matched += (*c).min(max_ref);
        }
        precisions.push(matched as f64 / (p.len() - k + 1) as f64);
    }
    if precisions.iter().any(|&x| x == 0.0) {
        return 0.0;
    }
    let mut best_len = usize::MAX;
    for r in &rs {
        let (d, bd) = (r.len().abs_diff(p.len()), best_len.abs_diff(p.len()));
        if d < bd || (d == bd && r.len() < best_len) {
            best_len = r.len();
        }
    }
    let bp = if p.len() < best_len { (1.0 - best_len as f64 / p.len() as f64).exp() } else { 1.0 };
    let geo = precisions.iter().map(|x| x.ln()).sum::<f64>() / precisions.len() as f64;
    bp * geo.exp()
}

// ---------------------------------------------------------------------------
// hand-built fixture scenes

pub fn fixture_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 10.0,
        fy: 10.0,
        cx: 6.0,
        cy: 4.5,
        width: 12,
        height: 9,
        depth_scale: 0.001,
    }
}

/// Writes a scene with analytic images: a color ramp keyed by frame id and a
/// slanted depth plane. Returns the manifest path.
pub fn write_fixture_scene(dir: &Path, scene_id: &str, poses: &[CameraPose]) -> PathBuf {
    let intr = fixture_intrinsics();
    fs::create_dir_all(dir.join("color")).unwrap();
    fs::create_dir_all(dir.join("depth")).unwrap();
    let mut frames = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let color = image::RgbImage::from_fn(intr.width, intr.height, |u, v| {
            let k = i as u32 * 37;
            image::Rgb([
                ((u * 20 + k) % 256) as u8,
                ((v * 25 + 2 * k) % 256) as u8,
                (((u ^ v) * 16 + 3 * k) % 256) as u8,
            ])
        });
        color.save(dir.join(format!("color/{i}.png"))).unwrap();
        let depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(intr.width, intr.height, |u, v| {
            image::Luma([1000 + 50 * u as u16 + 30 * v as u16 + 7 * ((u * v + i as u32) % 5) as u16 + 100 * i as u16])
        });
        depth.save(dir.join(format!("depth/{i}.png"))).unwrap();
        frames.push(FrameRecord {
            frame_id: i as u32,
            color_ref: format!("color/{i}.png"),
            depth_ref: format!("depth/{i}.png"),
            pose: pose.clone(),
            timestamp: i as f64,
        });
    }
    let manifest = SceneManifest {
        scene_id: scene_id.to_string(),
        depth_format: DepthFormat::Png16,
        max_depth_m: 10.0,
        intrinsics: intr,
        frames,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("scene.json");
    manifest.write(&path).unwrap();
    let ids: Vec<u32> = (0..poses.len() as u32).collect();
    let rows = ids
        .iter()
        .map(|&i| (0..4).map(|d| 1.0 + ((i * 7 + d * 3) % 5) as f64).collect())
        .collect();
    EmbeddingMatrix::from_rows("fixture", ids, rows).unwrap().write(dir).unwrap();
    path
}

pub fn rot_zyx(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> Matrix3<f64> {
    let (y, p, r) = (yaw_deg.to_radians(), pitch_deg.to_radians(), roll_deg.to_radians());
    let rz = Matrix3::new(y.cos(), -y.sin(), 0.0, y.sin(), y.cos(), 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(p.cos(), 0.0, p.sin(), 0.0, 1.0, 0.0, -p.sin(), 0.0, p.cos());
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, r.cos(), -r.sin(), 0.0, r.sin(), r.cos());
    rz * ry * rx
}

pub fn pose(t: [f64; 3], yaw: f64, pitch: f64, roll: f64) -> CameraPose {
    CameraPose::from_parts(rot_zyx(yaw, pitch, roll), Vector3::new(t[0], t[1], t[2]))
}

/// The three prompt fixture scenes: ordinary poses, a gimbal-locked pose,
/// and values that round to negative zero.
pub fn prompt_fixture_scenes() -> Vec<(&'static str, Vec<CameraPose>)> {
    vec![
        (
            "ordinary",
            vec![
                pose([1.234, -0.5, 1.5], 30.0, 10.0, -5.0),
                pose([2.0, 0.255, 1.49], -120.0, -20.0, 45.0),
                pose([-3.1, 4.0, 0.0], 179.96, 0.0, 0.0),
            ],
        ),
        (
            "gimbal",
            vec![
                pose([0.0, 0.0, 1.0], 40.0, 90.0, 0.0),
                pose([0.5, 0.5, 1.0], -75.0, -90.0, 0.0),
            ],
        ),
        (
            "negzero",
            vec![
                pose([-0.004, -0.0049, 0.001], -0.04, 0.0, -0.01),
                pose([-0.0, 0.005, -0.005], 0.0, -0.049, 0.0),
            ],
        ),
    ]
}
