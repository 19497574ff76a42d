//! Per-frame vision-language embeddings read from a JSON header plus a
//! little-endian f32 sidecar, and cosine similarity between frames.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::SceneManifest;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("embedding coverage: missing frames {missing:?}, extra frames {extra:?}")]
    FrameCoverageError { missing: Vec<u32>, extra: Vec<u32> },
    #[error("frame {frame_id}: embedding contains a non-finite value")]
    NonFiniteEmbedding { frame_id: u32 },
    #[error("frame {frame_id}: embedding is the zero vector")]
    ZeroEmbedding { frame_id: u32 },
    #[error("no embedding for frame {0}")]
    UnknownFrame(u32),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingHeader {
    pub dim: usize,
    pub count: usize,
    pub model: String,
    pub frame_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    frame_ids: Vec<u32>,
    data: Vec<f64>,
    norms: Vec<f64>,
    model_tag: String,
    index: HashMap<u32, usize>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from rows given in `frame_ids` order.
    pub fn from_rows(
        model_tag: impl Into<String>,
        frame_ids: Vec<u32>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, EmbeddingError> {
        if frame_ids.len() != rows.len() {
            return Err(EmbeddingError::HeaderMismatch(format!(
                "{} frame ids for {} rows",
                frame_ids.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(EmbeddingError::HeaderMismatch("dim must be positive".into()));
        }
        let mut index = HashMap::with_capacity(frame_ids.len());
        let mut data = Vec::with_capacity(dim * rows.len());
        let mut norms = Vec::with_capacity(rows.len());
        for (row, (&id, values)) in frame_ids.iter().zip(&rows).enumerate() {
            if values.len() != dim {
                return Err(EmbeddingError::HeaderMismatch(format!(
                    "row for frame {id} has {} values, expected {dim}",
                    values.len()
                )));
            }
            if index.insert(id, row).is_some() {
                return Err(EmbeddingError::HeaderMismatch(format!("duplicate frame id {id}")));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFiniteEmbedding { frame_id: id });
            }
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(EmbeddingError::ZeroEmbedding { frame_id: id });
            }
            norms.push(norm);
            data.extend_from_slice(values);
        }
        Ok(EmbeddingMatrix {
            dim,
            frame_ids,
            data,
            norms,
            model_tag: model_tag.into(),
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn frame_ids(&self) -> &[u32] {
        &self.frame_ids
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn row(&self, frame_id: u32) -> Result<&[f64], EmbeddingError> {
        let r = *self
            .index
            .get(&frame_id)
            .ok_or(EmbeddingError::UnknownFrame(frame_id))?;
        Ok(&self.data[r * self.dim..(r + 1) * self.dim])
    }

    pub fn contains(&self, frame_id: u32) -> bool {
        self.index.contains_key(&frame_id)
    }

    /// Cosine similarity. Arguments are put in canonical (min, max) order so
    /// `cosine_similarity(i, j)` and `cosine_similarity(j, i)` share bits.
    pub fn cosine_similarity(&self, i: u32, j: u32) -> Result<f64, EmbeddingError> {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        let ra = *self.index.get(&a).ok_or(EmbeddingError::UnknownFrame(a))?;
        let rb = *self.index.get(&b).ok_or(EmbeddingError::UnknownFrame(b))?;
        let fa = &self.data[ra * self.dim..(ra + 1) * self.dim];
        let fb = &self.data[rb * self.dim..(rb + 1) * self.dim];
        let dot: f64 = fa.iter().zip(fb).map(|(x, y)| x * y).sum();
        Ok(dot / (self.norms[ra] * self.norms[rb]))
    }

    pub fn header(&self) -> EmbeddingHeader {
        EmbeddingHeader {
            dim: self.dim,
            count: self.count(),
            model: self.model_tag.clone(),
            frame_ids: self.frame_ids.clone(),
        }
    }

    /// Writes `<dir>/embeddings.json` and `<dir>/embeddings.bin`. Values are
    /// narrowed to f32.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, EmbeddingError> {
        let header_path = dir.join("embeddings.json");
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EmbeddingError::Io { path, source }
        };
        let header = serde_json::to_string_pretty(&self.header()).expect("header serializes") + "\n";
        fs::write(&header_path, header).map_err(io(&header_path))?;
        let bin_path = dir.join("embeddings.bin");
        let bytes: Vec<u8> = self
            .data
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(&bin_path, bytes).map_err(io(&bin_path))?;
        Ok(header_path)
    }
}

/// Path of the binary sidecar belonging to a header file.
pub fn sidecar_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

/// Loads the header/binary pair and checks it covers exactly the scene's frames.
pub fn load_embeddings(
    header_path: &Path,
    scene: &SceneManifest,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let store = load_embeddings_unchecked(header_path)?;
    let have: BTreeSet<u32> = store.frame_ids.iter().copied().collect();
    let want: BTreeSet<u32> = scene.frames.iter().map(|f| f.frame_id).collect();
    let missing: Vec<u32> = want.difference(&have).copied().collect();
    let extra: Vec<u32> = have.difference(&want).copied().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(EmbeddingError::FrameCoverageError { missing, extra });
    }
    Ok(store)
}

/// Loads the header/binary pair without checking it against a scene.
pub fn load_embeddings_unchecked(header_path: &Path) -> Result<EmbeddingMatrix, EmbeddingError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EmbeddingError::Io { path, source }
    };
    let text = fs::read_to_string(header_path).map_err(io(header_path))?;
    let header: EmbeddingHeader = serde_json::from_str(&text)
        .map_err(|e| EmbeddingError::HeaderMismatch(format!("unparseable header: {e}")))?;
    if header.count != header.frame_ids.len() {
        return Err(EmbeddingError::HeaderMismatch(format!(
            "count {} but {} frame_ids",
            header.count,
            header.frame_ids.len()
        )));
    }
    if header.dim == 0 || header.count == 0 {
        return Err(EmbeddingError::HeaderMismatch("dim and count must be positive".into()));
    }
    let bin_path = sidecar_path(header_path);
    let bytes = fs::read(&bin_path).map_err(io(&bin_path))?;
    let expected = header.count * header.dim * 4;
    if bytes.len() != expected {
        return Err(EmbeddingError::HeaderMismatch(format!(
            "header declares {}x{} floats ({expected} bytes), binary has {} bytes",
            header.count,
            header.dim,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let rows = values.chunks_exact(header.dim).map(<[f64]>::to_vec).collect();
    EmbeddingMatrix::from_rows(header.model, header.frame_ids, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::parse_manifest;
    use proptest::prelude::*;

    fn scene(n: u32) -> SceneManifest {
        let frames: Vec<String> = (0..n)
            .map(|i| {
                format!(
                    r#"{{"frame_id": {i}, "color": "c.png", "depth": "d.png", "timestamp": {i}, "pose": [1,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1]}}"#
                )
            })
            .collect();
        let text = format!(
            r#"{{"scene_id": "s", "depth_format": "png16", "intrinsics": {{"fx": 1, "fy": 1, "cx": 0, "cy": 0, "width": 2, "height": 2, "depth_scale": 0.001}}, "frames": [{}]}}"#,
            frames.join(",")
        );
        parse_manifest(&text, Path::new(".")).unwrap()
    }

    fn rows(n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..dim).map(|k| 1.0 + (i * dim + k) as f64).collect())
            .collect()
    }

    #[test]
    fn loads_matching_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::from_rows("test", vec![0, 1, 2], rows(3, 4)).unwrap();
        let header = m.write(dir.path()).unwrap();
        let back = load_embeddings(&header, &scene(3)).unwrap();
        assert_eq!((back.count(), back.dim()), (3, 4));
        assert_eq!(back.row(2).unwrap(), m.row(2).unwrap());
    }

    #[test]
    fn missing_frame_is_coverage_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::from_rows("test", vec![0, 1], rows(2, 4)).unwrap();
        let header = m.write(dir.path()).unwrap();
        match load_embeddings(&header, &scene(3)) {
            Err(EmbeddingError::FrameCoverageError { missing, extra }) => {
                assert_eq!(missing, vec![2]);
                assert!(extra.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extra_frame_is_coverage_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::from_rows("test", vec![0, 1, 7], rows(3, 4)).unwrap();
        let header = m.write(dir.path()).unwrap();
        assert!(matches!(
            load_embeddings(&header, &scene(2)),
            Err(EmbeddingError::FrameCoverageError { .. })
        ));
    }

    #[test]
    fn binary_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let header = EmbeddingHeader {
            dim: 4,
            count: 3,
            model: "m".into(),
            frame_ids: vec![0, 1, 2],
        };
        let hp = dir.path().join("embeddings.json");
        fs::write(&hp, serde_json::to_string(&header).unwrap()).unwrap();
        fs::write(dir.path().join("embeddings.bin"), vec![0u8; 100 * 4]).unwrap();
        assert!(matches!(
            load_embeddings(&hp, &scene(3)),
            Err(EmbeddingError::HeaderMismatch(_))
        ));
    }

    #[test]
    fn rejects_zero_and_non_finite_rows() {
        assert!(matches!(
            EmbeddingMatrix::from_rows("m", vec![0, 1], vec![vec![1.0, 0.0], vec![0.0, 0.0]]),
            Err(EmbeddingError::ZeroEmbedding { frame_id: 1 })
        ));
        assert!(matches!(
            EmbeddingMatrix::from_rows("m", vec![0], vec![vec![f64::NAN, 1.0]]),
            Err(EmbeddingError::NonFiniteEmbedding { frame_id: 0 })
        ));
    }

    #[test]
    fn cosine_closed_forms() {
        let m = EmbeddingMatrix::from_rows(
            "m",
            vec![0, 1, 2, 3],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0]],
        )
        .unwrap();
        assert_eq!(m.cosine_similarity(0, 3).unwrap(), 1.0);
        assert_eq!(m.cosine_similarity(0, 1).unwrap(), 0.0);
        assert!((m.cosine_similarity(2, 0).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(matches!(m.cosine_similarity(0, 9), Err(EmbeddingError::UnknownFrame(9))));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_bounded_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
            let m = EmbeddingMatrix::from_rows("m", vec![4, 9], vec![a.clone(), b.clone()]).unwrap();
            let s = m.cosine_similarity(4, 9).unwrap();
            prop_assert_eq!(s.to_bits(), m.cosine_similarity(9, 4).unwrap().to_bits());
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s));
            prop_assert!((m.cosine_similarity(4, 4).unwrap() - 1.0).abs() < 1e-6);
            let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
            let m2 = EmbeddingMatrix::from_rows("m", vec![4, 9], vec![scaled, b]).unwrap();
            prop_assert!((m2.cosine_similarity(4, 9).unwrap() - s).abs() < 1e-9);
        }
    }
}
