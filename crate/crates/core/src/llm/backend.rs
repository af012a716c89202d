use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::transcript::{prompt_hash, TranscriptRecord};
use super::{BackendError, CompletionRequest, Purpose};

/// A text-completion provider.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

/// One scripted response. `trigger` is a regular expression searched in the
/// prompt; `{{N}}` in `reply` is replaced by capture group N (JSON-escaped).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    pub purpose: Purpose,
    #[serde(default)]
    pub trigger: Option<String>,
    pub reply: String,
    #[serde(default)]
    pub max_uses: Option<u32>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    replies: HashMap<String, String>,
    #[serde(default)]
    rules: Vec<ScriptRule>,
}

/// Deterministic backend for tests and replay.
///
/// Lookup order: exact prompt hash, then the first rule whose purpose matches,
/// whose trigger (if any) matches the prompt, and whose use budget is not spent.
/// Anything else is a fatal error.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    by_hash: HashMap<String, String>,
    rules: Vec<(ScriptRule, Option<Regex>)>,
    uses: Mutex<Vec<u32>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_reply(mut self, prompt: &str, reply: impl Into<String>) -> Self {
        self.by_hash.insert(prompt_hash(prompt), reply.into());
        self
    }

    pub fn with_rule(mut self, rule: ScriptRule) -> Self {
        self.push_rule(rule).expect("valid trigger");
        self
    }

    /// Shorthand for a rule with no trigger and unlimited uses.
    pub fn always(self, purpose: Purpose, reply: impl Into<String>) -> Self {
        self.with_rule(ScriptRule {
            purpose,
            trigger: None,
            reply: reply.into(),
            max_uses: None,
        })
    }

    /// Replies are consumed in order, one use each.
    pub fn sequence<I, S>(mut self, purpose: Purpose, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        for reply in replies {
            self = self.with_rule(ScriptRule {
                purpose,
                trigger: None,
                reply: reply.into(),
                max_uses: Some(1),
            });
        }
        self
    }

    fn push_rule(&mut self, rule: ScriptRule) -> Result<(), regex::Error> {
        let trigger = rule.trigger.as_deref().map(Regex::new).transpose()?;
        self.rules.push((rule, trigger));
        self.uses.get_mut().unwrap().push(0);
        Ok(())
    }

    /// Loads `{"replies": {hash: reply}, "rules": [...]}`.
    pub fn from_script_file(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_script_str(&text)
    }

    pub fn from_script_str(text: &str) -> Result<Self, String> {
        let file: ScriptFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut backend = ScriptedBackend {
            by_hash: file.replies,
            ..Default::default()
        };
        for rule in file.rules {
            backend.push_rule(rule).map_err(|e| e.to_string())?;
        }
        Ok(backend)
    }

    /// Builds a replay backend from recorded successful exchanges.
    pub fn from_transcript(records: &[TranscriptRecord]) -> Self {
        let mut backend = ScriptedBackend::new();
        for r in records {
            if let Some(reply) = &r.reply {
                backend.by_hash.insert(r.prompt_hash.clone(), reply.clone());
            }
        }
        backend
    }
}

fn json_escape(s: &str) -> String {
    let quoted = serde_json::to_string(s).expect("string serializes");
    quoted[1..quoted.len() - 1].to_owned()
}

fn expand(reply: &str, caps: &regex::Captures<'_>) -> String {
    let mut out = reply.to_owned();
    for i in (0..caps.len()).rev() {
        let text = caps.get(i).map(|m| m.as_str()).unwrap_or("");
        out = out.replace(&format!("{{{{{i}}}}}"), &json_escape(text));
    }
    out
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        if let Some(reply) = self.by_hash.get(&prompt_hash(&request.prompt)) {
            return Ok(reply.clone());
        }
        let mut uses = self.uses.lock().unwrap_or_else(|p| p.into_inner());
        for (i, (rule, trigger)) in self.rules.iter().enumerate() {
            if rule.purpose != request.purpose {
                continue;
            }
            if rule.max_uses.is_some_and(|max| uses[i] >= max) {
                continue;
            }
            let reply = match trigger {
                None => rule.reply.clone(),
                Some(re) => match re.captures(&request.prompt) {
                    Some(caps) => expand(&rule.reply, &caps),
                    None => continue,
                },
            };
            uses[i] += 1;
            return Ok(reply);
        }
        Err(BackendError::fatal(
            request.purpose,
            "no scripted reply for prompt",
        ))
    }
}

/// Always fails with a fixed error kind. Useful for fault injection.
#[derive(Debug, Clone)]
pub struct FailingBackend {
    pub transient: bool,
}

impl Backend for FailingBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        if self.transient {
            Err(BackendError::transient(request.purpose, "backend unreachable"))
        } else {
            Err(BackendError::fatal(request.purpose, "backend refused request"))
        }
    }
}

/// OpenAI-style chat-completion client.
#[derive(Debug)]
pub struct HttpBackend {
    pub endpoint: String,
    pub model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build();
        HttpBackend {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            agent: config.into(),
        }
    }

    /// Reads `SCHEMACODER_LLM_ENDPOINT`, `SCHEMACODER_LLM_KEY` and
    /// `SCHEMACODER_LLM_MODEL`. Returns `None` when no endpoint is set.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("SCHEMACODER_LLM_ENDPOINT").ok()?;
        let model = std::env::var("SCHEMACODER_LLM_MODEL").unwrap_or_else(|_| "gpt-4o".to_owned());
        let key = std::env::var("SCHEMACODER_LLM_KEY").ok();
        Some(HttpBackend::new(endpoint, model, key))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let purpose = request.purpose;
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        if !request.stop_markers.is_empty() {
            body["stop"] = serde_json::json!(request.stop_markers);
        }
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(&body).map_err(|e| match e {
            ureq::Error::Io(_)
            | ureq::Error::Timeout(_)
            | ureq::Error::ConnectionFailed
            | ureq::Error::HostNotFound => BackendError::transient(purpose, e.to_string()),
            other => BackendError::fatal(purpose, other.to_string()),
        })?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(BackendError::transient(purpose, format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(BackendError::fatal(purpose, format!("HTTP {status}")));
        }
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::fatal(purpose, format!("bad response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| BackendError::fatal(purpose, "response has no message content"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canned_reply_by_hash() {
        let b = ScriptedBackend::new().with_reply("hello", "world");
        let r = b.complete(&CompletionRequest::new(Purpose::Explore, "hello")).unwrap();
        assert_eq!(r, "world");
        let miss = b.complete(&CompletionRequest::new(Purpose::Explore, "other"));
        assert!(miss.is_err());
    }

    #[test]
    fn trigger_captures_are_substituted() {
        let b = ScriptedBackend::new().with_rule(ScriptRule {
            purpose: Purpose::Select,
            trigger: Some(r"(?m)^(job \d+ done)$".into()),
            reply: r#"{"segments":[{"text":"{{1}}"}]}"#.into(),
            max_uses: None,
        });
        let r = b
            .complete(&CompletionRequest::new(Purpose::Select, "lines:\njob 7 done\n"))
            .unwrap();
        assert_eq!(r, r#"{"segments":[{"text":"job 7 done"}]}"#);
    }

    #[test]
    fn sequence_is_consumed_in_order() {
        let b = ScriptedBackend::new().sequence(Purpose::Mutate, ["a", "b"]);
        let req = CompletionRequest::new(Purpose::Mutate, "p");
        assert_eq!(b.complete(&req).unwrap(), "a");
        assert_eq!(b.complete(&req).unwrap(), "b");
        assert!(b.complete(&req).is_err());
    }

    #[test]
    fn purpose_must_match() {
        let b = ScriptedBackend::new().always(Purpose::Merge, "m");
        assert!(b.complete(&CompletionRequest::new(Purpose::Boost, "p")).is_err());
    }

    #[test]
    fn script_file_format() {
        let text = r#"{"rules":[{"purpose":"explore","reply":"1. Q?","max_uses":1}]}"#;
        let b = ScriptedBackend::from_script_str(text).unwrap();
        assert_eq!(
            b.complete(&CompletionRequest::new(Purpose::Explore, "x")).unwrap(),
            "1. Q?"
        );
    }

    #[test]
    fn unreachable_http_endpoint_is_transient() {
        let b = HttpBackend::new("http://127.0.0.1:9/v1/chat/completions", "m", None);
        let err = b
            .complete(&CompletionRequest::new(Purpose::Explore, "x"))
            .unwrap_err();
        assert!(err.is_transient(), "{err}");
    }
}
