//! Greedy keyframe pruning over a fused spatial/semantic pair distance.
//!
//! Every pair of frames gets `d' = d + alpha * (1 - S)`, where `d` is the
//! squared-form Mahalanobis distance between the frames' world-frame point
//! clouds under their pooled covariance, and `S` is the cosine similarity of
//! their embeddings. While more than `n_max` frames survive, the surviving
//! pair with the smallest `d'` is resolved by dropping its lower-quality
//! member.
//!
//! Pair distances never change once computed, so a binary heap over all
//! pairs with lazy invalidation (skip entries touching a removed frame)
//! yields exactly the sequence of global minima a full rescan would, at
//! O(N^2 log N) instead of O(N^3).

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embeddings::EmbeddingMatrix;
use crate::features::{FrameFeatures, PointCloudStats};

/// Pooled covariances above this condition number are ridge-regularized.
pub const MAX_CONDITION: f64 = 1e12;
/// Largest frame count accepted by `select_keyframes`; the pair table is O(N^2).
pub const MAX_SELECT_FRAMES: usize = 5000;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("no frames to select from")]
    EmptyInput,
    #[error("frame statistics are degenerate")]
    DegenerateStats,
    #[error("pooled covariance is singular even after regularization")]
    SingularCovariance,
    #[error("duplicate frame id {0}")]
    DuplicateFrame(u32),
    #[error("frame {0} has no embedding")]
    MissingEmbedding(u32),
    #[error("{count} frames exceeds the limit of {max}; decimate the trajectory first")]
    TooManyFrames { count: usize, max: usize },
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Weight of the semantic dissimilarity term.
    pub alpha: f64,
    /// Weight of sharpness in the quality score.
    pub beta: f64,
    pub n_max: usize,
    pub ridge_epsilon: f64,
    /// Cap on back-projected points per frame.
    pub max_points: usize,
    pub normalize_quality: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            alpha: 5.0,
            beta: 1.0,
            n_max: 30,
            ridge_epsilon: 1e-6,
            max_points: 4096,
            normalize_quality: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        let bad = |m: &str| Err(SelectError::InvalidConfig(m.to_string()));
        if self.n_max < 1 {
            return bad("n_max must be at least 1");
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be a finite value >= 0");
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta must be a finite value >= 0");
        }
        if !(self.ridge_epsilon > 0.0) {
            return bad("ridge_epsilon must be > 0");
        }
        if self.max_points < 1 {
            return bad("max_points must be at least 1");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; keys caches of selections.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalStep {
    pub removed: u32,
    pub survivor: u32,
    /// `None` when the pair involved a degenerate frame (d' = −∞).
    #[serde(with = "finite_or_null")]
    pub d_prime: f64,
    pub step: usize,
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Surviving frames in timestamp order.
    pub kept: Vec<u32>,
    pub removal_log: Vec<RemovalStep>,
    pub pair_count_evaluated: usize,
}

fn condition_number(m: &Matrix3<f64>) -> f64 {
    let eig = m.symmetric_eigenvalues();
    let max = eig.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Squared-form Mahalanobis distance `Δᵀ ((Σa + Σb)/2)⁻¹ Δ` (no square root).
///
/// When the pooled covariance is ill-conditioned (planar or linear clouds)
/// it is shifted by `ridge * mean(tr Σa, tr Σb) / 3 * I` before solving.
pub fn mahalanobis(a: &PointCloudStats, b: &PointCloudStats, ridge: f64) -> Result<f64, SelectError> {
    if a.degenerate || b.degenerate {
        return Err(SelectError::DegenerateStats);
    }
    let delta: Vector3<f64> = a.mean - b.mean;
    if delta == Vector3::zeros() {
        return Ok(0.0);
    }
    let mut pooled = (a.covariance + b.covariance) * 0.5;
    if condition_number(&pooled) > MAX_CONDITION {
        let mean_trace = 0.5 * (a.covariance.trace() + b.covariance.trace());
        let mut shift = ridge * mean_trace / 3.0;
        if !(shift > 0.0) {
            // all-zero covariance: fall back to an absolute ridge
            shift = ridge;
        }
        pooled += Matrix3::identity() * shift;
    }
    let x = match pooled.cholesky() {
        Some(c) => c.solve(&delta),
        None => pooled.lu().solve(&delta).ok_or(SelectError::SingularCovariance)?,
    };
    Ok(delta.dot(&x).max(0.0))
}

pub fn fused_distance(d: f64, s: f64, alpha: f64) -> f64 {
    d + alpha * (1.0 - s)
}

#[derive(Debug, Clone, Copy)]
struct PairEntry {
    d_prime: f64,
    // indices into the id-sorted frame order, lo < hi
    lo: u32,
    hi: u32,
}

impl PartialEq for PairEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for PairEntry {}
impl PartialOrd for PairEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PairEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d_prime
            .total_cmp(&other.d_prime)
            .then(self.lo.cmp(&other.lo))
            .then(self.hi.cmp(&other.hi))
    }
}

/// Fused distance for one pair. Pairs touching a degenerate frame get −∞ so
/// they are resolved first, and the degenerate member (quality −∞) loses.
pub fn pair_distance(
    a: &FrameFeatures,
    b: &FrameFeatures,
    store: &EmbeddingMatrix,
    config: &SelectionConfig,
) -> Result<f64, SelectError> {
    if a.stats.degenerate || b.stats.degenerate {
        return Ok(f64::NEG_INFINITY);
    }
    let d = mahalanobis(&a.stats, &b.stats, config.ridge_epsilon)?;
    let s = store
        .cosine_similarity(a.frame_id, b.frame_id)
        .map_err(|_| SelectError::MissingEmbedding(a.frame_id.max(b.frame_id)))?;
    Ok(fused_distance(d, s, config.alpha))
}

fn timestamp_order(features: &[FrameFeatures], alive: impl Fn(usize) -> bool) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..features.len()).filter(|&i| alive(i)).collect();
    idx.sort_by(|&x, &y| features[x].timestamp.total_cmp(&features[y].timestamp).then(x.cmp(&y)));
    idx.into_iter().map(|i| features[i].frame_id).collect()
}

pub fn select_keyframes(
    features: &[FrameFeatures],
    store: &EmbeddingMatrix,
    config: &SelectionConfig,
) -> Result<SelectionResult, SelectError> {
    config.validate()?;
    if features.is_empty() {
        return Err(SelectError::EmptyInput);
    }
    if features.len() > MAX_SELECT_FRAMES {
        return Err(SelectError::TooManyFrames {
            count: features.len(),
            max: MAX_SELECT_FRAMES,
        });
    }
    let mut seen = HashSet::new();
    for f in features {
        if !seen.insert(f.frame_id) {
            return Err(SelectError::DuplicateFrame(f.frame_id));
        }
        if !store.contains(f.frame_id) {
            return Err(SelectError::MissingEmbedding(f.frame_id));
        }
    }
    let n = features.len();
    if n <= config.n_max {
        return Ok(SelectionResult {
            kept: timestamp_order(features, |_| true),
            removal_log: Vec::new(),
            pair_count_evaluated: 0,
        });
    }

    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by_key(|&i| features[i].frame_id);

    let pairs: Vec<PairEntry> = (0..n)
        .into_par_iter()
        .map(|lo| {
            let a = &features[by_id[lo]];
            (lo + 1..n)
                .map(|hi| {
                    let d_prime = pair_distance(a, &features[by_id[hi]], store, config)?;
                    Ok(PairEntry {
                        d_prime,
                        lo: lo as u32,
                        hi: hi as u32,
                    })
                })
                .collect::<Result<Vec<_>, SelectError>>()
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let pair_count = pairs.len();
    let mut heap: BinaryHeap<Reverse<PairEntry>> = pairs.into_iter().map(Reverse).collect();

    let mut alive = vec![true; n];
    let mut remaining = n;
    let mut log = Vec::with_capacity(n - config.n_max);
    while remaining > config.n_max {
        let Reverse(pair) = heap.pop().expect("a live pair exists while more than one frame survives");
        let (lo, hi) = (pair.lo as usize, pair.hi as usize);
        if !alive[lo] || !alive[hi] {
            continue;
        }
        let fi = &features[by_id[lo]];
        let fj = &features[by_id[hi]];
        let (removed, survivor) = if fi.quality > fj.quality { (hi, lo) } else { (lo, hi) };
        alive[removed] = false;
        remaining -= 1;
        log.push(RemovalStep {
            removed: features[by_id[removed]].frame_id,
            survivor: features[by_id[survivor]].frame_id,
            d_prime: pair.d_prime,
            step: log.len(),
        });
    }

    let mut alive_by_input = vec![false; n];
    for (pos, &i) in by_id.iter().enumerate() {
        alive_by_input[i] = alive[pos];
    }
    Ok(SelectionResult {
        kept: timestamp_order(features, |i| alive_by_input[i]),
        removal_log: log,
        pair_count_evaluated: pair_count,
    })
}

/// Every `floor(N / n_max)`-th frame starting at index 0, at most `n_max` frames.
pub fn uniform_keyframes(frame_ids: &[u32], n_max: usize) -> Vec<u32> {
    let n = frame_ids.len();
    if n <= n_max || n_max == 0 {
        return frame_ids.to_vec();
    }
    let step = n / n_max;
    (0..n_max).map(|k| frame_ids[k * step]).collect()
}
