//! Chat backends for prompt bundles: an OpenAI-compatible HTTP client, a
//! fingerprint-keyed replay file, a recorder, and an echo double.

mod http;
mod replay;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::PromptBundle;

pub use self::http::{HttpBackend, HttpSettings, DEFAULT_BASE_URL};
pub use self::replay::{EchoBackend, RecordingBackend, ReplayBackend, ReplayEntry};

/// Environment variable holding the API key for HTTP backends.
pub const API_KEY_ENV: &str = "SPATIAL_PROMPT_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend unavailable after {retries} retries: {message}")]
    BackendUnavailable { message: String, retries: u32 },
    #[error("no API key: set the {var} environment variable")]
    MissingApiKey { var: &'static str },
    #[error("no recorded response for fingerprint {fingerprint}")]
    ReplayMiss { fingerprint: String },
    #[error("provider returned HTTP {status}: {body_excerpt}")]
    ProviderError { status: u16, body_excerpt: String },
    #[error("replay file {}: {message}", path.display())]
    ReplayFile { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChatPart {
    Text { text: String },
    Image { media_type: String, data: Vec<u8> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ChatParams {
    fn default() -> Self {
        ChatParams {
            temperature: 0.0,
            max_output_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_tag: String,
    pub parts: Vec<ChatPart>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub answer_text: String,
    pub latency_ms: u64,
    pub backend_tag: String,
    pub raw_ref: Option<String>,
}

/// Flattens a bundle into ordered parts: preamble, then caption and image per
/// keyframe, then annotation, then query. Empty text parts are dropped.
pub fn to_chat_request(bundle: &PromptBundle, model_tag: &str, params: ChatParams) -> ChatRequest {
    let mut parts = Vec::with_capacity(3 + 2 * bundle.blocks.len());
    let text = |parts: &mut Vec<ChatPart>, t: String| {
        if !t.is_empty() {
            parts.push(ChatPart::Text { text: t });
        }
    };
    text(&mut parts, bundle.preamble.clone());
    for b in &bundle.blocks {
        text(&mut parts, b.caption());
        parts.push(ChatPart::Image {
            media_type: b.image.media_type.clone(),
            data: b.image.bytes.clone(),
        });
    }
    text(&mut parts, bundle.annotation.clone());
    text(&mut parts, bundle.query.clone());
    ChatRequest {
        model_tag: model_tag.to_string(),
        parts,
        temperature: params.temperature,
        max_output_tokens: params.max_output_tokens,
    }
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum CanonicalPart<'a> {
    Text { text: &'a str },
    Image { media_type: &'a str, sha256: String },
}

/// Hex SHA-256 over the canonical JSON of the request parts, with images
/// replaced by the hash of their bytes.
pub fn fingerprint(request: &ChatRequest) -> String {
    let canon: Vec<CanonicalPart> = request
        .parts
        .iter()
        .map(|p| match p {
            ChatPart::Text { text } => CanonicalPart::Text { text },
            ChatPart::Image { media_type, data } => CanonicalPart::Image {
                media_type,
                sha256: hex::encode(Sha256::digest(data)),
            },
        })
        .collect();
    let json = serde_json::to_string(&canon).expect("parts serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub trait ChatBackend: Send + Sync {
    fn tag(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendConfig {
    Http(HttpSettings),
    Replay { path: PathBuf },
    Record { path: PathBuf, inner: Box<BackendConfig> },
    Echo,
}

pub fn connect(config: &BackendConfig) -> Result<Box<dyn ChatBackend>, LlmError> {
    Ok(match config {
        BackendConfig::Http(settings) => Box::new(HttpBackend::from_env(settings.clone())?),
        BackendConfig::Replay { path } => Box::new(ReplayBackend::load(path)?),
        BackendConfig::Record { path, inner } => Box::new(RecordingBackend::new(connect(inner)?, path)?),
        BackendConfig::Echo => Box::new(EchoBackend),
    })
}

pub fn send(request: &ChatRequest, backend: &BackendConfig) -> Result<ChatResponse, LlmError> {
    connect(backend)?.send(request)
}

/// Sends every request with at most `in_flight` outstanding; results keep
/// input order.
pub fn send_all(
    backend: &dyn ChatBackend,
    requests: &[ChatRequest],
    in_flight: usize,
) -> Vec<Result<ChatResponse, LlmError>> {
    bounded_map(requests, in_flight, |r| backend.send(r))
}

/// Applies `f` to every item on at most `workers` threads; output keeps
/// input order.
pub fn bounded_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let workers = workers.max(1).min(items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

pub(crate) fn backoff(base: Duration, attempt: u32) -> Duration {
    base.saturating_mul(1u32 << attempt.min(16))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{assemble, AnnotationSpec, ImagePayload, KeyframeBlock, JPEG_MEDIA_TYPE};

    fn bundle(blocks: usize, annotation: AnnotationSpec) -> PromptBundle {
        let blocks = (0..blocks as u32)
            .map(|i| KeyframeBlock {
                frame_id: i,
                position_text: format!("Camera position: [x={i}.00m, y=0.00m, z=0.00m]"),
                rotation_text: "Camera rotation: [x=0.0°, y=0.0°, z=0.0°]".into(),
                image: ImagePayload { media_type: JPEG_MEDIA_TYPE.into(), bytes: vec![i as u8; 4] },
            })
            .collect();
        assemble(blocks, "What color is the chair?", &annotation, None).unwrap()
    }

    #[test]
    fn part_order_and_count() {
        let r = to_chat_request(&bundle(2, AnnotationSpec::Default), "m", ChatParams::default());
        assert_eq!(r.parts.len(), 7);
        assert!(matches!(&r.parts[0], ChatPart::Text { text } if text.starts_with("You will be provided")));
        assert!(matches!(&r.parts[1], ChatPart::Text { text } if text.starts_with("Camera position: [x=0.00m")));
        assert!(matches!(&r.parts[2], ChatPart::Image { data, .. } if data == &vec![0u8; 4]));
        assert!(matches!(&r.parts[3], ChatPart::Text { text } if text.starts_with("Camera position: [x=1.00m")));
        assert!(matches!(&r.parts[4], ChatPart::Image { .. }));
        assert!(matches!(&r.parts[5], ChatPart::Text { text } if text.starts_with("Note that")));
        assert!(matches!(&r.parts[6], ChatPart::Text { text } if text == "What color is the chair?"));
    }

    #[test]
    fn empty_annotation_elided() {
        let r = to_chat_request(&bundle(2, AnnotationSpec::None), "m", ChatParams::default());
        assert_eq!(r.parts.len(), 6);
    }

    #[test]
    fn params_carried() {
        let p = ChatParams { temperature: 0.0, max_output_tokens: 77 };
        let r = to_chat_request(&bundle(1, AnnotationSpec::Default), "gpt-x", p);
        assert_eq!((r.temperature, r.max_output_tokens, r.model_tag.as_str()), (0.0, 77, "gpt-x"));
    }

    #[test]
    fn fingerprint_depends_on_content_only() {
        let a = to_chat_request(&bundle(2, AnnotationSpec::Default), "m1", ChatParams::default());
        let b = to_chat_request(&bundle(2, AnnotationSpec::Default), "m2", ChatParams { temperature: 1.0, max_output_tokens: 5 });
        assert_eq!(fingerprint(&a), fingerprint(&b));
        let c = to_chat_request(&bundle(2, AnnotationSpec::ZeroShot), "m1", ChatParams::default());
        assert_ne!(fingerprint(&a), fingerprint(&c));
        assert_eq!(fingerprint(&a).len(), 64);
    }

    #[test]
    fn fingerprint_is_pinned() {
        // Guards against accidental changes to the canonical form; replay
        // files recorded earlier must keep resolving.
        let r = ChatRequest {
            model_tag: "m".into(),
            parts: vec![
                ChatPart::Text { text: "hi".into() },
                ChatPart::Image { media_type: "image/jpeg".into(), data: vec![] },
            ],
            temperature: 0.0,
            max_output_tokens: 1,
        };
        let empty_sha = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
        let canon = format!(
            r#"[{{"type":"text","text":"hi"}},{{"type":"image","media_type":"image/jpeg","sha256":"{empty_sha}"}}]"#
        );
        assert_eq!(fingerprint(&r), hex::encode(Sha256::digest(canon.as_bytes())));
    }

    #[test]
    fn send_all_keeps_order() {
        let reqs: Vec<_> = (0..20)
            .map(|i| ChatRequest {
                model_tag: "m".into(),
                parts: vec![ChatPart::Text { text: format!("q{i}") }],
                temperature: 0.0,
                max_output_tokens: 1,
            })
            .collect();
        let out = send_all(&EchoBackend, &reqs, 4);
        for (i, r) in out.into_iter().enumerate() {
            assert_eq!(r.unwrap().answer_text, format!("q{i}"));
        }
    }

    #[test]
    fn backoff_doubles() {
        let b = Duration::from_millis(10);
        assert_eq!(backoff(b, 0), Duration::from_millis(10));
        assert_eq!(backoff(b, 3), Duration::from_millis(80));
    }
}
