//! Session configuration file.
//!
//! ```json
//! {
//!   "mode": "replay",
//!   "source": { "trace": "labels.csv" },
//!   "arm": "experiment",
//!   "engine": { "policy": { "base_gap": 120 } },
//!   "pacing": { "tick_ms": 0 },
//!   "telemetry": { "url": "http://localhost:8088", "batch_size": 60 },
//!   "output_dir": "sessions",
//!   "participants": { "friendship_duration": 4.5 }
//! }
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! `LULL_TELEMETRY_URL` and `LULL_TELEMETRY_TOKEN` override the telemetry
//! block.

use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use lull_core::engine::EngineConfig;
use lull_core::sessionlog::{Arm, RetryPolicy};
use lull_core::sim::ProfileSpec;

pub const ENV_TELEMETRY_URL: &str = "LULL_TELEMETRY_URL";
pub const ENV_TELEMETRY_TOKEN: &str = "LULL_TELEMETRY_TOKEN";
pub const ENV_LISTEN: &str = "LULL_LISTEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Live,
    Replay,
    Simulate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    /// Label trace (`t,label` CSV) for replay.
    pub trace: Option<PathBuf>,
    /// Mono 16-bit WAV stream for live mode; a FIFO works.
    pub audio: Option<PathBuf>,
    /// Dyad profile for simulate mode.
    pub profile: Option<ProfileSpec>,
    /// Behaviour seed for simulate mode.
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pacing {
    /// Milliseconds per tick. Defaults to 1000 in live mode and 0 (virtual
    /// time) otherwise.
    pub tick_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryConfig {
    pub url: Option<String>,
    pub token: Option<String>,
    pub batch_size: usize,
    pub retry: RetryPolicy,
    /// How long the end of a session waits for outstanding uploads.
    pub drain_timeout_ms: u64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self {
            url: None,
            token: None,
            batch_size: 60,
            retry: RetryPolicy::default(),
            drain_timeout_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Participants {
    pub friendship_duration: Option<f64>,
    pub intimacy_pre: Option<f64>,
    pub intimacy_post: Option<f64>,
    /// Timestamp of the first row. Live sessions default to the local clock;
    /// replay and simulate use a fixed date so output is reproducible.
    pub start_time: Option<NaiveDateTime>,
}

fn experiment() -> Arm {
    Arm::Experiment
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub mode: RunMode,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default = "experiment")]
    pub arm: Arm,
    /// Session length in seconds. Replay stops at the end of the trace.
    #[serde(default)]
    pub duration: Option<u64>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub stories: Option<PathBuf>,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub pacing: Pacing,
    #[serde(default)]
    pub telemetry: TelemetryConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub participants: Participants,
}

pub const DEFAULT_DURATION: u64 = 3600;

impl SessionConfig {
    pub fn new(mode: RunMode) -> Self {
        Self {
            mode,
            session_id: None,
            arm: Arm::Experiment,
            duration: None,
            engine: EngineConfig::default(),
            corpus: None,
            stories: None,
            source: SourceConfig::default(),
            pacing: Pacing::default(),
            telemetry: TelemetryConfig::default(),
            output_dir: None,
            participants: Participants::default(),
        }
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = serde_json::from_str(text)?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Reads, resolves and validates a config file, then applies environment
    /// overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_json(&text, base)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.stories);
        fix(&mut self.source.trace);
        fix(&mut self.source.audio);
        fix(&mut self.output_dir);
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(url) = var(ENV_TELEMETRY_URL).filter(|s| !s.is_empty()) {
            self.telemetry.url = Some(url);
        }
        if let Some(token) = var(ENV_TELEMETRY_TOKEN).filter(|s| !s.is_empty()) {
            self.telemetry.token = Some(token);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        match self.mode {
            RunMode::Replay if self.source.trace.is_none() => return invalid("replay mode needs source.trace"),
            RunMode::Live if self.source.audio.is_none() => return invalid("live mode needs source.audio"),
            RunMode::Simulate if self.source.profile.is_none() => {
                return invalid("simulate mode needs source.profile")
            }
            _ => {}
        }
        if self.duration == Some(0) {
            return invalid("duration must be >= 1");
        }
        if self.telemetry.batch_size == 0 {
            return invalid("telemetry.batch_size must be >= 1");
        }
        if let Some(url) = &self.telemetry.url {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(ConfigError::Invalid(format!("telemetry.url `{url}` is not an http(s) URL")));
            }
        }
        if let Some(profile) = &self.source.profile {
            profile.resolve().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(id) = &self.session_id {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(ConfigError::Invalid(format!("session_id `{id}` is not a usable file name")));
            }
        }
        self.engine.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn tick_ms(&self) -> u64 {
        self.pacing
            .tick_ms
            .unwrap_or(if self.mode == RunMode::Live { 1000 } else { 0 })
    }

    /// Upper bound on session length; replay may end earlier with its trace.
    pub fn max_seconds(&self) -> Option<u64> {
        match self.mode {
            RunMode::Replay => self.duration,
            _ => Some(self.duration.unwrap_or(DEFAULT_DURATION)),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}
