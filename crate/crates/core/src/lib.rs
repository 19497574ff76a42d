//! Keyframe-driven prompting for spatial question answering over RGB-D scans.
//!
//! A scan is reduced to a handful of keyframes by greedily pruning the most
//! redundant pair of frames, where redundancy mixes the Mahalanobis distance
//! between the frames' world-space point clouds with embedding similarity.
//! The keyframes, their camera poses and an answer-style annotation are then
//! packed into a multimodal chat prompt.

pub mod embeddings;
mod error;
pub mod eval;
pub mod features;
pub mod llm;
pub mod pipeline;
pub mod prompt;
pub mod scene;
pub mod selector;
pub mod synth;

pub use error::Error;
