//! Text-completion backends, token accounting and prompt rendering.

mod backend;
mod prompts;
mod transcript;

pub use backend::{Backend, FailingBackend, HttpBackend, ScriptRule, ScriptedBackend};
pub use prompts::{render_prompt, template_source, TemplateError, PROMPT_VERSION};
pub use transcript::{prompt_hash, Transcript, TranscriptRecord};

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which pipeline stage issued a request. Also selects the prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Explore,
    Select,
    Pattern,
    Merge,
    Mutate,
    Boost,
}

impl Purpose {
    pub const ALL: [Purpose; 6] = [
        Purpose::Explore,
        Purpose::Select,
        Purpose::Pattern,
        Purpose::Merge,
        Purpose::Mutate,
        Purpose::Boost,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Explore => "explore",
            Purpose::Select => "select",
            Purpose::Pattern => "pattern",
            Purpose::Merge => "merge",
            Purpose::Mutate => "mutate",
            Purpose::Boost => "boost",
        }
    }

    pub fn default_temperature(self) -> f32 {
        match self {
            Purpose::Explore => 0.8,
            Purpose::Mutate => 0.7,
            _ => 0.2,
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_output_tokens: usize,
    pub temperature: f32,
    pub stop_markers: Vec<String>,
    pub purpose: Purpose,
}

impl CompletionRequest {
    pub fn new(purpose: Purpose, prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            max_output_tokens: 2048,
            temperature: purpose.default_temperature(),
            stop_markers: Vec::new(),
            purpose,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    pub context_budget: usize,
    pub supports_deterministic: bool,
}

impl Default for BackendProfile {
    fn default() -> Self {
        BackendProfile {
            name: "scripted".to_owned(),
            context_budget: 128_000,
            supports_deterministic: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendErrorKind {
    Transient,
    Fatal,
    BudgetExceeded,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{kind:?} backend error during {purpose}: {message}")]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub purpose: Purpose,
    pub message: String,
}

impl BackendError {
    pub fn transient(purpose: Purpose, message: impl Into<String>) -> Self {
        BackendError {
            kind: BackendErrorKind::Transient,
            purpose,
            message: message.into(),
        }
    }

    pub fn fatal(purpose: Purpose, message: impl Into<String>) -> Self {
        BackendError {
            kind: BackendErrorKind::Fatal,
            purpose,
            message: message.into(),
        }
    }

    pub fn is_transient(&self) -> bool {
        self.kind == BackendErrorKind::Transient
    }
}

/// Exponential backoff schedule for transient failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub base_ms: u64,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_ms: 1000,
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let scale = u64::from(self.factor).saturating_pow(attempt.saturating_sub(1));
        Duration::from_millis(self.base_ms.saturating_mul(scale))
    }
}

/// Estimated token count: one token per four bytes, rounded up.
pub fn count_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// A shareable handle wrapping a backend with budget checks, retries and an
/// optional transcript.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn Backend>,
    pub profile: BackendProfile,
    pub retry: RetryPolicy,
    transcript: Option<Arc<Transcript>>,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient")
            .field("profile", &self.profile)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn Backend>, profile: BackendProfile) -> Self {
        LlmClient {
            backend,
            profile,
            retry: RetryPolicy::default(),
            transcript: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_transcript(mut self, transcript: Arc<Transcript>) -> Self {
        self.transcript = Some(transcript);
        self
    }

    pub fn transcript(&self) -> Option<&Arc<Transcript>> {
        self.transcript.as_ref()
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        if request.prompt.is_empty() {
            return Err(BackendError::fatal(request.purpose, "empty prompt"));
        }
        let tokens = count_tokens(&request.prompt);
        if tokens > self.profile.context_budget {
            return Err(BackendError {
                kind: BackendErrorKind::BudgetExceeded,
                purpose: request.purpose,
                message: format!(
                    "prompt needs ~{tokens} tokens, budget is {}",
                    self.profile.context_budget
                ),
            });
        }

        let attempts = self.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            let started = transcript::now_millis();
            let outcome = self.backend.complete(request);
            if let Some(t) = &self.transcript {
                t.record(request, &outcome, started, attempt);
            }
            match outcome {
                Err(e) if e.is_transient() && attempt < attempts => {
                    log::debug!("transient failure ({}), retry {attempt}", e.message);
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// One packed group from [`group_by_token_limit`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGroup<P> {
    pub items: Vec<(String, P)>,
    pub tokens: usize,
    /// A lone item larger than the limit.
    pub oversized: bool,
}

/// Greedy in-order packing of items into groups of at most `limit` tokens.
pub fn group_by_token_limit<P>(items: Vec<(String, P)>, limit: usize) -> Vec<TokenGroup<P>> {
    let mut groups: Vec<TokenGroup<P>> = Vec::new();
    let mut current: Option<TokenGroup<P>> = None;
    for (text, payload) in items {
        let size = count_tokens(&text);
        if size > limit {
            groups.extend(current.take());
            groups.push(TokenGroup {
                items: vec![(text, payload)],
                tokens: size,
                oversized: true,
            });
            continue;
        }
        match current.as_mut() {
            Some(g) if g.tokens + size <= limit => {
                g.tokens += size;
                g.items.push((text, payload));
            }
            _ => {
                groups.extend(current.take());
                current = Some(TokenGroup {
                    items: vec![(text, payload)],
                    tokens: size,
                    oversized: false,
                });
            }
        }
    }
    groups.extend(current);
    groups
}

/// Pulls the JSON object out of a model reply, tolerating code fences and
/// surrounding prose.
pub fn extract_json(reply: &str) -> Option<&str> {
    let body = match reply.find("```") {
        Some(open) => {
            let rest = &reply[open + 3..];
            let rest = rest.strip_prefix("json").unwrap_or(rest);
            match rest.find("```") {
                Some(close) => &rest[..close],
                None => rest,
            }
        }
        None => reply,
    };
    let start = body.find('{')?;
    let end = body.rfind('}')?;
    (end > start).then(|| &body[start..=end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn token_counts() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("12345678"), 2);
        assert_eq!(count_tokens("123456789"), 3);
    }

    proptest! {
        #[test]
        fn token_count_subadditive(a in ".{0,64}", b in ".{0,64}") {
            let joined = format!("{a}{b}");
            prop_assert!(count_tokens(&joined) <= count_tokens(&a) + count_tokens(&b) + 1);
            prop_assert!(count_tokens(&joined) >= count_tokens(&a));
        }

        #[test]
        fn packing_respects_limit_and_order(sizes in proptest::collection::vec(0usize..200, 0..100), limit in 1usize..60) {
            let items: Vec<(String, usize)> = sizes.iter().enumerate().map(|(i, &s)| ("x".repeat(s), i)).collect();
            let groups = group_by_token_limit(items, limit);
            let mut order = Vec::new();
            for g in &groups {
                prop_assert!(!g.items.is_empty());
                if g.oversized {
                    prop_assert_eq!(g.items.len(), 1);
                    prop_assert!(g.tokens > limit);
                } else {
                    prop_assert!(g.tokens <= limit);
                }
                order.extend(g.items.iter().map(|(_, p)| *p));
            }
            prop_assert_eq!(order, (0..sizes.len()).collect::<Vec<_>>());
        }
    }

    fn sized(tokens: usize) -> String {
        "x".repeat(tokens * 4)
    }

    #[test]
    fn packing_forced_example() {
        let items = vec![(sized(10), 0), (sized(10), 1), (sized(10), 2)];
        let groups = group_by_token_limit(items, 25);
        let shape: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| g.items.iter().map(|(_, p)| *p).collect())
            .collect();
        assert_eq!(shape, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn oversized_item_is_flagged_singleton() {
        let groups = group_by_token_limit(vec![(sized(30), ())], 25);
        assert_eq!(groups.len(), 1);
        assert!(groups[0].oversized);
    }

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl Backend for Flaky {
        fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
            if n <= self.failures {
                Err(BackendError::transient(request.purpose, "connection reset"))
            } else {
                Ok("ok".to_owned())
            }
        }
    }

    fn quick_retry() -> RetryPolicy {
        RetryPolicy {
            base_ms: 0,
            ..Default::default()
        }
    }

    #[test]
    fn five_transient_failures_surface_after_fifth_attempt() {
        let backend = Arc::new(Flaky {
            failures: 5,
            calls: AtomicU32::new(0),
        });
        let client = LlmClient::new(backend.clone(), BackendProfile::default()).with_retry(quick_retry());
        let err = client
            .complete(&CompletionRequest::new(Purpose::Explore, "hi"))
            .unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::Transient);
        assert_eq!(err.purpose, Purpose::Explore);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn transient_then_success_recovers() {
        let backend = Arc::new(Flaky {
            failures: 4,
            calls: AtomicU32::new(0),
        });
        let client = LlmClient::new(backend.clone(), BackendProfile::default()).with_retry(quick_retry());
        let reply = client
            .complete(&CompletionRequest::new(Purpose::Merge, "hi"))
            .unwrap();
        assert_eq!(reply, "ok");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn over_budget_prompt_never_reaches_backend() {
        let backend = Arc::new(Flaky {
            failures: 0,
            calls: AtomicU32::new(0),
        });
        let profile = BackendProfile {
            context_budget: 1024,
            ..Default::default()
        };
        let client = LlmClient::new(backend.clone(), profile);
        let err = client
            .complete(&CompletionRequest::new(Purpose::Pattern, "z".repeat(4 * 1024 + 1)))
            .unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::BudgetExceeded);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn backoff_schedule() {
        let r = RetryPolicy::default();
        assert_eq!(r.delay(1), Duration::from_secs(1));
        assert_eq!(r.delay(2), Duration::from_secs(2));
        assert_eq!(r.delay(4), Duration::from_secs(8));
    }

    #[test]
    fn json_extraction() {
        assert_eq!(extract_json("sure:\n```json\n{\"a\":1}\n```\n"), Some("{\"a\":1}"));
        assert_eq!(extract_json("x {\"a\":{}} y"), Some("{\"a\":{}}"));
        assert_eq!(extract_json("no json here"), None);
    }
}
