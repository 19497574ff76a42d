//! Effective settings: flags > environment > TOML file > defaults.

use std::path::Path;
use std::time::Duration;

use clap::Args;
use serde::{Deserialize, Serialize};

use spatial_prompt::llm::{ChatParams, HttpSettings, DEFAULT_BASE_URL};
use spatial_prompt::prompt::{PromptOptions, DEFAULT_JPEG_QUALITY, DEFAULT_TARGET_HEIGHT};
use spatial_prompt::selector::SelectionConfig;
use spatial_prompt::Error;

pub const DEFAULT_MODEL: &str = "gpt-4o-2024-11-20";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub alpha: f64,
    pub beta: f64,
    pub max_frames: usize,
    pub ridge_epsilon: f64,
    pub max_points: usize,
    pub normalize_quality: bool,
    pub target_height: u32,
    pub jpeg_quality: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub base_url: String,
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// Worker threads for feature extraction; 0 picks the core count.
    pub jobs: usize,
    /// Concurrent chat requests during evaluation.
    pub in_flight: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let sel = SelectionConfig::default();
        Settings {
            alpha: sel.alpha,
            beta: sel.beta,
            max_frames: sel.n_max,
            ridge_epsilon: sel.ridge_epsilon,
            max_points: sel.max_points,
            normalize_quality: sel.normalize_quality,
            target_height: DEFAULT_TARGET_HEIGHT,
            jpeg_quality: DEFAULT_JPEG_QUALITY,
            role: None,
            model: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            max_output_tokens: ChatParams::default().max_output_tokens,
            base_url: DEFAULT_BASE_URL.to_string(),
            max_retries: 3,
            timeout_secs: 120,
            jobs: 0,
            in_flight: 4,
        }
    }
}

/// Setting overrides shared by every subcommand.
#[derive(Debug, Default, Args)]
pub struct SettingArgs {
    /// TOML settings file
    #[arg(long, global = true, env = "SPATIAL_PROMPT_CONFIG", value_name = "PATH")]
    pub config: Option<std::path::PathBuf>,
    /// Weight of embedding dissimilarity in the pair distance
    #[arg(long, global = true, env = "SPATIAL_PROMPT_ALPHA")]
    pub alpha: Option<f64>,
    /// Weight of sharpness in frame quality
    #[arg(long, global = true, env = "SPATIAL_PROMPT_BETA")]
    pub beta: Option<f64>,
    /// Number of keyframes to keep
    #[arg(long, global = true, env = "SPATIAL_PROMPT_MAX_FRAMES")]
    pub max_frames: Option<usize>,
    #[arg(long, global = true, env = "SPATIAL_PROMPT_RIDGE_EPSILON")]
    pub ridge_epsilon: Option<f64>,
    /// Cap on back-projected points per frame
    #[arg(long, global = true, env = "SPATIAL_PROMPT_MAX_POINTS")]
    pub max_points: Option<usize>,
    /// Z-score spread and sharpness across the scene before combining
    #[arg(long, global = true, env = "SPATIAL_PROMPT_NORMALIZE_QUALITY")]
    pub normalize_quality: Option<bool>,
    /// Height keyframe images are resized to
    #[arg(long, global = true, env = "SPATIAL_PROMPT_TARGET_HEIGHT")]
    pub target_height: Option<u32>,
    #[arg(long, global = true, env = "SPATIAL_PROMPT_JPEG_QUALITY")]
    pub jpeg_quality: Option<u8>,
    /// Role sentence placed before the prompt preamble
    #[arg(long, global = true, env = "SPATIAL_PROMPT_ROLE")]
    pub role: Option<String>,
    #[arg(long, global = true, env = "SPATIAL_PROMPT_MODEL")]
    pub model: Option<String>,
    #[arg(long, global = true, env = "SPATIAL_PROMPT_TEMPERATURE")]
    pub temperature: Option<f64>,
    #[arg(long, global = true, env = "SPATIAL_PROMPT_MAX_OUTPUT_TOKENS")]
    pub max_output_tokens: Option<u32>,
    /// OpenAI-compatible endpoint root (everything before /chat/completions)
    #[arg(long, global = true, env = "SPATIAL_PROMPT_BASE_URL")]
    pub base_url: Option<String>,
    #[arg(long, global = true, env = "SPATIAL_PROMPT_MAX_RETRIES")]
    pub max_retries: Option<u32>,
    #[arg(long, global = true, env = "SPATIAL_PROMPT_TIMEOUT_SECS")]
    pub timeout_secs: Option<u64>,
    /// Worker threads for feature extraction (0 = all cores)
    #[arg(long, global = true, env = "SPATIAL_PROMPT_JOBS")]
    pub jobs: Option<usize>,
    /// Concurrent chat requests
    #[arg(long, global = true, env = "SPATIAL_PROMPT_IN_FLIGHT")]
    pub in_flight: Option<usize>,
}

pub fn parse_settings_file(text: &str, origin: &Path) -> Result<Settings, Error> {
    toml::from_str(text).map_err(|e| Error::Invalid(format!("{}: {}", origin.display(), e.message())))
}

impl SettingArgs {
    pub fn resolve(&self) -> Result<Settings, Error> {
        let mut s = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parse_settings_file(&text, path)?
            }
            None => Settings::default(),
        };
        macro_rules! overlay {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    s.$f = v.clone();
                }
            )*};
        }
        overlay!(
            alpha, beta, max_frames, ridge_epsilon, max_points, normalize_quality, target_height, jpeg_quality,
            model, temperature, max_output_tokens, base_url, max_retries, timeout_secs, jobs, in_flight
        );
        if let Some(r) = &self.role {
            s.role = Some(r.clone());
        }
        s.selection().validate()?;
        if s.target_height == 0 || !(1..=100).contains(&s.jpeg_quality) {
            return Err(Error::Invalid("target_height must be > 0 and jpeg_quality in 1..=100".into()));
        }
        Ok(s)
    }
}

impl Settings {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            alpha: self.alpha,
            beta: self.beta,
            n_max: self.max_frames,
            ridge_epsilon: self.ridge_epsilon,
            max_points: self.max_points,
            normalize_quality: self.normalize_quality,
        }
    }

    pub fn prompt_options(&self) -> PromptOptions {
        PromptOptions {
            role: self.role.clone(),
            include_pose: true,
            target_height: self.target_height,
            jpeg_quality: self.jpeg_quality,
        }
    }

    pub fn chat_params(&self) -> ChatParams {
        ChatParams {
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }

    pub fn http_settings(&self) -> HttpSettings {
        HttpSettings {
            base_url: self.base_url.clone(),
            max_retries: self.max_retries,
            timeout: Duration::from_secs(self.timeout_secs),
            ..HttpSettings::default()
        }
    }

    /// One `key=value` TOML line per setting.
    pub fn to_toml_lines(&self) -> String {
        let value = toml::Value::try_from(self).expect("settings serialize");
        let table = value.as_table().expect("settings are a table");
        let mut out = String::new();
        // declaration order rather than the table's sorted order
        for key in FIELD_ORDER {
            if let Some(v) = table.get(*key) {
                out.push_str(&format!("{key}={v}\n"));
            }
        }
        out
    }
}

const FIELD_ORDER: &[&str] = &[
    "alpha",
    "beta",
    "max_frames",
    "ridge_epsilon",
    "max_points",
    "normalize_quality",
    "target_height",
    "jpeg_quality",
    "role",
    "model",
    "temperature",
    "max_output_tokens",
    "base_url",
    "max_retries",
    "timeout_secs",
    "jobs",
    "in_flight",
];
