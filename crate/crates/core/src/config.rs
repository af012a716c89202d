//! TOML run configuration for the `extract` command.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boosting::PipelineConfig;
use crate::llm::{Backend, BackendProfile, FailingBackend, HttpBackend, RetryPolicy, ScriptedBackend, Transcript};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Replies come from a script file.
    #[default]
    Scripted,
    /// Replies come from a previously recorded transcript.
    Replay,
    /// OpenAI-compatible chat completions endpoint.
    Http,
    /// Every request fails; for exercising degraded paths.
    Failing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub script: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    /// Overrides `SCHEMACODER_LLM_ENDPOINT`.
    pub endpoint: Option<String>,
    /// Overrides `SCHEMACODER_LLM_MODEL`.
    pub model: Option<String>,
    pub context_budget: usize,
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            script: None,
            transcript: None,
            endpoint: None,
            model: None,
            context_budget: BackendProfile::default().context_budget,
            retry: RetryPolicy::default(),
        }
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<(Arc<dyn Backend>, BackendProfile), ConfigError> {
        let profile = |name: &str, deterministic: bool| BackendProfile {
            name: name.to_owned(),
            context_budget: self.context_budget,
            supports_deterministic: deterministic,
        };
        match self.kind {
            BackendKind::Scripted => {
                let path = self
                    .script
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("backend.script is required for kind = \"scripted\"".into()))?;
                let backend = ScriptedBackend::from_script_file(path).map_err(|message| ConfigError::Parse {
                    path: path.display().to_string(),
                    message,
                })?;
                Ok((Arc::new(backend), profile("scripted", true)))
            }
            BackendKind::Replay => {
                let path = self
                    .transcript
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("backend.transcript is required for kind = \"replay\"".into()))?;
                let records = Transcript::load(path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                Ok((Arc::new(ScriptedBackend::from_transcript(&records)), profile("replay", true)))
            }
            BackendKind::Http => {
                let from_env = HttpBackend::from_env();
                let endpoint = self
                    .endpoint
                    .clone()
                    .or_else(|| from_env.as_ref().map(|b| b.endpoint.clone()))
                    .ok_or_else(|| {
                        ConfigError::Invalid("http backend needs backend.endpoint or SCHEMACODER_LLM_ENDPOINT".into())
                    })?;
                let model = self
                    .model
                    .clone()
                    .or_else(|| from_env.as_ref().map(|b| b.model.clone()))
                    .unwrap_or_else(|| "gpt-4o".to_owned());
                let key = std::env::var("SCHEMACODER_LLM_KEY").ok();
                Ok((Arc::new(HttpBackend::new(endpoint, model, key)), profile("http", false)))
            }
            BackendKind::Failing => Ok((Arc::new(FailingBackend { transient: true }), profile("failing", true))),
        }
    }
}

/// Paths are resolved relative to the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub log: PathBuf,
    pub truth: PathBuf,
    #[serde(default)]
    pub background: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("schemacoder-out")
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Every referenced input file must exist.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let mut inputs = vec![("log", Some(&self.log)), ("truth", Some(&self.truth))];
        inputs.push(("background", self.background.as_ref()));
        inputs.push(("backend.script", self.backend.script.as_ref()));
        inputs.push(("backend.transcript", self.backend.transcript.as_ref()));
        for (field, path) in inputs {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(ConfigError::Invalid(format!("{field}: no such file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        cfg.pipeline.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.log);
        join(&mut self.truth);
        join(&mut self.output_dir);
        if let Some(p) = self.background.as_mut() {
            join(p);
        }
        if let Some(p) = self.backend.script.as_mut() {
            join(p);
        }
        if let Some(p) = self.backend.transcript.as_mut() {
            join(p);
        }
    }

    pub fn read_background(&self) -> Result<String, ConfigError> {
        match &self.background {
            None => Ok(String::new()),
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            }),
        }
    }
}
