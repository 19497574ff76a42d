//! Four-part prompts: preamble, pose-annotated keyframes, annotation, query.

mod image;
mod pose;

use std::collections::HashSet;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{load_color, IngestError, SceneManifest};

pub use self::image::{encode_jpeg, resize_bilinear, resize_image, JPEG_MEDIA_TYPE};
pub use self::pose::{
    format_fixed, format_pose_block, format_position, format_rotation, is_gimbal_locked,
    matrix_to_euler, rotation_to_euler, EulerAngles, GIMBAL_LOCK_COS,
};

pub const PREAMBLE: &str =
    "You will be provided with images captured from specific camera positions and orientations as follows:";

pub const DEFAULT_ANNOTATION: &str = "Note that the user does not know the images that you have. \
Therefore, you should answer the question as concisely as possible without directly referring to \
the image with words such as “image” or “photo.”";

/// Annotation used when benchmark few-shot answers are withheld.
pub const ZERO_SHOT_ANNOTATION: &str = "The answer should be a phrase or a single word.";

pub const DEFAULT_TARGET_HEIGHT: u32 = 336;
pub const DEFAULT_JPEG_QUALITY: u8 = 90;
pub const PROMPT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no keyframes given")]
    EmptyInput,
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("keyframe {0} is not part of the scene")]
    UnknownFrame(u32),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("image encoding failed: {0}")]
    Encode(String),
    #[error("malformed prompt JSON: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnnotationSpec {
    /// The generic "do not refer to the images" instruction.
    Default,
    ZeroShot,
    /// Caller-rendered text, e.g. a benchmark few-shot annotation.
    Text(String),
    None,
}

impl AnnotationSpec {
    pub fn render(&self) -> String {
        match self {
            AnnotationSpec::Default => DEFAULT_ANNOTATION.to_string(),
            AnnotationSpec::ZeroShot => ZERO_SHOT_ANNOTATION.to_string(),
            AnnotationSpec::Text(t) => t.clone(),
            AnnotationSpec::None => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptOptions {
    /// Optional role sentence placed before the preamble.
    pub role: Option<String>,
    pub include_pose: bool,
    pub target_height: u32,
    pub jpeg_quality: u8,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            role: None,
            include_pose: true,
            target_height: DEFAULT_TARGET_HEIGHT,
            jpeg_quality: DEFAULT_JPEG_QUALITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub media_type: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyframeBlock {
    pub frame_id: u32,
    /// Empty when poses are withheld.
    pub position_text: String,
    pub rotation_text: String,
    pub image: ImagePayload,
}

impl KeyframeBlock {
    pub fn has_pose(&self) -> bool {
        !self.position_text.is_empty()
    }

    /// Text that precedes the image in the chat request.
    pub fn caption(&self) -> String {
        if self.has_pose() {
            format!("{}\n{}\nImage data:", self.position_text, self.rotation_text)
        } else {
            "Image data:".to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub preamble: String,
    pub blocks: Vec<KeyframeBlock>,
    pub annotation: String,
    pub query: String,
}

#[derive(Serialize, Deserialize)]
struct BundleJson {
    version: u32,
    preamble: String,
    blocks: Vec<BlockJson>,
    annotation: String,
    query: String,
}

#[derive(Serialize, Deserialize)]
struct BlockJson {
    frame_id: u32,
    position: String,
    rotation: String,
    image_b64: String,
    media_type: String,
}

impl PromptBundle {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.blocks.is_empty() {
            return Err(PromptError::EmptyInput);
        }
        if self.query.trim().is_empty() {
            return Err(PromptError::EmptyQuery);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let j = BundleJson {
            version: PROMPT_FORMAT_VERSION,
            preamble: self.preamble.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockJson {
                    frame_id: b.frame_id,
                    position: b.position_text.clone(),
                    rotation: b.rotation_text.clone(),
                    image_b64: BASE64.encode(&b.image.bytes),
                    media_type: b.image.media_type.clone(),
                })
                .collect(),
            annotation: self.annotation.clone(),
            query: self.query.clone(),
        };
        serde_json::to_string_pretty(&j).expect("bundle serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let j: BundleJson =
            serde_json::from_str(text).map_err(|e| PromptError::Malformed(e.to_string()))?;
        let blocks = j
            .blocks
            .into_iter()
            .map(|b| {
                Ok(KeyframeBlock {
                    frame_id: b.frame_id,
                    position_text: b.position,
                    rotation_text: b.rotation,
                    image: ImagePayload {
                        media_type: b.media_type,
                        bytes: BASE64
                            .decode(b.image_b64)
                            .map_err(|e| PromptError::Malformed(e.to_string()))?,
                    },
                })
            })
            .collect::<Result<Vec<_>, PromptError>>()?;
        Ok(PromptBundle {
            preamble: j.preamble,
            blocks,
            annotation: j.annotation,
            query: j.query,
        })
    }

    /// Human-readable rendering with image placeholders.
    pub fn render_text(&self) -> String {
        let mut sections = vec![self.preamble.clone()];
        for b in &self.blocks {
            let mut s = String::new();
            if b.has_pose() {
                s.push_str(&b.position_text);
                s.push('\n');
                s.push_str(&b.rotation_text);
                s.push('\n');
            }
            s.push_str(&format!(
                "Image data: <frame {} {} {} bytes>",
                b.frame_id,
                b.image.media_type,
                b.image.bytes.len()
            ));
            sections.push(s);
        }
        if !self.annotation.is_empty() {
            sections.push(self.annotation.clone());
        }
        sections.push(self.query.clone());
        sections.join("\n\n") + "\n"
    }
}

pub fn preamble(role: Option<&str>) -> String {
    match role.map(str::trim).filter(|r| !r.is_empty()) {
        Some(r) => format!("{r} {PREAMBLE}"),
        None => PREAMBLE.to_string(),
    }
}

/// One block per kept frame, in the scene's timestamp order.
pub fn build_blocks(
    scene: &SceneManifest,
    kept: &[u32],
    options: &PromptOptions,
) -> Result<Vec<KeyframeBlock>, PromptError> {
    if kept.is_empty() {
        return Err(PromptError::EmptyInput);
    }
    let wanted: HashSet<u32> = kept.iter().copied().collect();
    let known: HashSet<u32> = scene.frames.iter().map(|f| f.frame_id).collect();
    if let Some(&missing) = kept.iter().find(|id| !known.contains(id)) {
        return Err(PromptError::UnknownFrame(missing));
    }
    scene
        .frames
        .iter()
        .filter(|f| wanted.contains(&f.frame_id))
        .map(|f| {
            let color = load_color(scene, f)?;
            let resized = resize_image(&color, options.target_height);
            let bytes = encode_jpeg(&resized, options.jpeg_quality)
                .map_err(|e| PromptError::Encode(e.to_string()))?;
            let (position_text, rotation_text) = if options.include_pose {
                format_pose_block(&f.pose)
            } else {
                (String::new(), String::new())
            };
            Ok(KeyframeBlock {
                frame_id: f.frame_id,
                position_text,
                rotation_text,
                image: ImagePayload {
                    media_type: JPEG_MEDIA_TYPE.to_string(),
                    bytes,
                },
            })
        })
        .collect()
}

pub fn assemble(
    blocks: Vec<KeyframeBlock>,
    query: &str,
    annotation: &AnnotationSpec,
    role: Option<&str>,
) -> Result<PromptBundle, PromptError> {
    let bundle = PromptBundle {
        preamble: preamble(role),
        blocks,
        annotation: annotation.render(),
        query: query.to_string(),
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn build_prompt(
    scene: &SceneManifest,
    kept: &[u32],
    query: &str,
    annotation: &AnnotationSpec,
    options: &PromptOptions,
) -> Result<PromptBundle, PromptError> {
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let blocks = build_blocks(scene, kept, options)?;
    assemble(blocks, query, annotation, options.role.as_deref())
}
