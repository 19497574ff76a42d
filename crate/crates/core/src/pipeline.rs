//! Scene-level glue: features → keyframes, with an optional on-disk cache.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::{load_embeddings, EmbeddingMatrix};
use crate::features::compute_scene_features;
use crate::scene::{load_manifest, SceneManifest};
use crate::selector::{select_keyframes, uniform_keyframes, RemovalStep, SelectionConfig, SelectionResult};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyframeStrategy {
    /// Greedy closest-pair pruning.
    Greedy,
    /// Every floor(N / n_max)-th frame.
    Uniform,
}

pub const KEYFRAMES_VERSION: u32 = 1;

/// On-disk record of a keyframe selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeSet {
    pub version: u32,
    pub scene_id: String,
    pub strategy: KeyframeStrategy,
    pub config: SelectionConfig,
    pub config_fingerprint: String,
    /// Timestamp order.
    pub kept: Vec<u32>,
    pub pair_count_evaluated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removal_log: Option<Vec<RemovalStep>>,
}

impl KeyframeSet {
    pub fn new(
        scene_id: &str,
        strategy: KeyframeStrategy,
        config: &SelectionConfig,
        result: SelectionResult,
        with_log: bool,
    ) -> Self {
        KeyframeSet {
            version: KEYFRAMES_VERSION,
            scene_id: scene_id.to_string(),
            strategy,
            config: config.clone(),
            config_fingerprint: config.fingerprint(),
            kept: result.kept,
            pair_count_evaluated: result.pair_count_evaluated,
            removal_log: with_log.then_some(result.removal_log),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("keyframes serialize") + "\n"
    }
}

pub fn select_scene(
    scene: &SceneManifest,
    store: &EmbeddingMatrix,
    config: &SelectionConfig,
    strategy: KeyframeStrategy,
) -> Result<SelectionResult, Error> {
    config.validate()?;
    match strategy {
        KeyframeStrategy::Greedy => {
            let features = compute_scene_features(scene, config)?;
            Ok(select_keyframes(&features, store, config)?)
        }
        KeyframeStrategy::Uniform => Ok(SelectionResult {
            kept: uniform_keyframes(&scene.frame_ids(), config.n_max),
            removal_log: Vec::new(),
            pair_count_evaluated: 0,
        }),
    }
}

/// Cache file for a (scene, config, strategy) triple.
pub fn selection_cache_path(
    dir: &Path,
    scene_id: &str,
    config: &SelectionConfig,
    strategy: KeyframeStrategy,
) -> PathBuf {
    let key = format!("{scene_id}\n{}\n{strategy:?}", config.fingerprint());
    let hash = hex::encode(Sha256::digest(key.as_bytes()));
    let safe: String = scene_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    dir.join(format!("{safe}-{}.json", &hash[..16]))
}

pub fn select_scene_cached(
    scene: &SceneManifest,
    store: &EmbeddingMatrix,
    config: &SelectionConfig,
    strategy: KeyframeStrategy,
    cache_dir: Option<&Path>,
) -> Result<SelectionResult, Error> {
    let Some(dir) = cache_dir else {
        return select_scene(scene, store, config, strategy);
    };
    let path = selection_cache_path(dir, &scene.scene_id, config, strategy);
    if let Ok(text) = fs::read_to_string(&path) {
        match serde_json::from_str::<SelectionResult>(&text) {
            Ok(r) => {
                log::debug!("selection cache hit {}", path.display());
                return Ok(r);
            }
            Err(e) => log::warn!("ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    let result = select_scene(scene, store, config, strategy)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = serde_json::to_string(&result).expect("selection serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}

/// Locates scenes as `<root>/<scene_id>/scene.json` with a sibling
/// `embeddings.json`.
#[derive(Debug, Clone)]
pub struct SceneDirectory {
    pub root: PathBuf,
}

impl SceneDirectory {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SceneDirectory { root: root.into() }
    }

    pub fn manifest_path(&self, scene_id: &str) -> PathBuf {
        self.root.join(scene_id).join("scene.json")
    }

    pub fn load(&self, scene_id: &str) -> Result<(SceneManifest, EmbeddingMatrix), Error> {
        let manifest = load_manifest(&self.manifest_path(scene_id))?;
        let store = load_embeddings(&self.root.join(scene_id).join("embeddings.json"), &manifest)?;
        Ok((manifest, store))
    }
}
