//! The only place that talks to embedding and chat-completion providers.
//!
//! [`Gateway`] wraps a pair of backends with an embedding cache, an in-flight
//! request limiter, a per-call timeout, jittered exponential retry and the
//! one-shot repair reprompt for malformed structured output.

pub mod http;
pub mod mock;
pub mod prompts;
pub mod verdict;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::Semaphore;
use uuid::Uuid;

use crate::scoring::{normalize, EmbeddingVector};
pub use prompts::Task;
pub use verdict::{
    AuditVerdict, CodeReflection, IntentAlignment, KnownCode, ReflectionBody, ResolutionAction,
    ResolutionSuggestion, Severity,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("provider request timed out")]
    Timeout,
    #[error("provider transport failure: {0}")]
    Transport(String),
    #[error("provider rejected request ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("provider unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("structured output failed validation: {}", .errors.join("; "))]
    VerdictParse { errors: Vec<String> },
    #[error("provider returned an invalid embedding: {0}")]
    InvalidEmbedding(String),
}

impl ProviderError {
    fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Timeout | ProviderError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTier {
    Fast,
    Reasoning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// Everything a chat backend receives. `context` duplicates the structured
/// payload embedded in the user message so in-process mocks need not parse
/// prompt text.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub task: Task,
    pub tier: ModelTier,
    pub messages: Vec<ChatMessage>,
    pub context: Value,
    /// 0 for the first request, 1 for the repair reprompt.
    pub repair_attempt: u32,
}

#[async_trait]
pub trait EmbeddingBackend: Send + Sync {
    fn dim(&self) -> usize;
    async fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub credential: Secret,
    pub embed_model: String,
    pub fast_model: String,
    pub reasoning_model: String,
    pub embed_dim: Option<usize>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing environment variable {0}")]
    Missing(&'static str),
    #[error("invalid value for {0}: {1}")]
    Invalid(&'static str, String),
}

impl ProviderConfig {
    pub const MAX_RETRIES_CAP: u32 = 5;

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.timeout.is_zero() {
            return Err(ConfigError::Invalid("timeout", "must be positive".into()));
        }
        if self.max_retries > Self::MAX_RETRIES_CAP {
            return Err(ConfigError::Invalid(
                "max_retries",
                format!("must be at most {}", Self::MAX_RETRIES_CAP),
            ));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::Invalid(
                "max_in_flight",
                "must be positive".into(),
            ));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(ConfigError::Invalid("endpoint", self.endpoint.clone()));
        }
        Ok(())
    }

    /// Reads `CODEAUDIT_PROVIDER_*` variables. Credentials are only ever
    /// taken from the environment.
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let req = |k: &'static str| get(k).ok_or(ConfigError::Missing(k));
        let parse = |k: &'static str, default: u64| -> Result<u64, ConfigError> {
            get(k)
                .map(|v| {
                    v.parse::<u64>()
                        .map_err(|e| ConfigError::Invalid(k, e.to_string()))
                })
                .unwrap_or(Ok(default))
        };
        let config = Self {
            endpoint: req("CODEAUDIT_PROVIDER_ENDPOINT")?
                .trim_end_matches('/')
                .to_string(),
            credential: Secret::new(req("CODEAUDIT_PROVIDER_KEY")?),
            embed_model: req("CODEAUDIT_EMBED_MODEL")?,
            fast_model: req("CODEAUDIT_FAST_MODEL")?,
            reasoning_model: req("CODEAUDIT_REASONING_MODEL")?,
            embed_dim: get("CODEAUDIT_EMBED_DIM")
                .map(|v| {
                    v.parse()
                        .map_err(|_| ConfigError::Invalid("CODEAUDIT_EMBED_DIM", v))
                })
                .transpose()?,
            timeout: Duration::from_secs(parse("CODEAUDIT_PROVIDER_TIMEOUT_SECS", 60)?),
            max_retries: parse("CODEAUDIT_PROVIDER_MAX_RETRIES", 3)? as u32,
            max_in_flight: parse("CODEAUDIT_PROVIDER_MAX_IN_FLIGHT", 4)? as usize,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let jitter = rand::rng().random_range(0.5..1.5);
        self.base_delay.mul_f64(2f64.powi(attempt as i32) * jitter)
    }
}

pub struct Gateway {
    embedder: Arc<dyn EmbeddingBackend>,
    chat: Arc<dyn ChatBackend>,
    cache: RwLock<HashMap<String, EmbeddingVector>>,
    limiter: Semaphore,
    retry: RetryPolicy,
    timeout: Duration,
}

impl Gateway {
    pub const DEFAULT_IN_FLIGHT: usize = 4;

    pub fn new(embedder: Arc<dyn EmbeddingBackend>, chat: Arc<dyn ChatBackend>) -> Self {
        Self {
            embedder,
            chat,
            cache: RwLock::new(HashMap::new()),
            limiter: Semaphore::new(Self::DEFAULT_IN_FLIGHT),
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(60),
        }
    }

    pub fn from_config(config: &ProviderConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let backend = Arc::new(http::HttpBackend::new(config.clone()));
        Ok(Self::new(backend.clone(), backend)
            .with_timeout(config.timeout)
            .with_concurrency(config.max_in_flight)
            .with_retry(RetryPolicy {
                max_attempts: config.max_retries.max(1),
                ..RetryPolicy::default()
            }))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_concurrency(mut self, max_in_flight: usize) -> Self {
        self.limiter = Semaphore::new(max_in_flight.max(1));
        self
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    async fn with_retries<T, F, Fut>(&self, mut call: F) -> Result<T, ProviderError>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, ProviderError>>,
    {
        let attempts = self.retry.max_attempts.max(1);
        let mut last = ProviderError::Timeout;
        for attempt in 0..attempts {
            let result = {
                let _permit = self.limiter.acquire().await.expect("limiter never closed");
                match tokio::time::timeout(self.timeout, call()).await {
                    Ok(r) => r,
                    Err(_) => Err(ProviderError::Timeout),
                }
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    tracing::debug!(attempt, error = %e, "provider call failed, retrying");
                    last = e;
                    if attempt + 1 < attempts {
                        tokio::time::sleep(self.retry.delay(attempt)).await;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(ProviderError::Unavailable {
            attempts,
            last: last.to_string(),
        })
    }

    /// Embeds `text` as a unit vector. Identical text is served from cache.
    pub async fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        if let Some(hit) = self.cache.read().get(text) {
            return Ok(hit.clone());
        }
        let raw = self.with_retries(|| self.embedder.embed(text)).await?;
        if raw.len() != self.dim() {
            return Err(ProviderError::InvalidEmbedding(format!(
                "expected {} dimensions, got {}",
                self.dim(),
                raw.len()
            )));
        }
        let vector = EmbeddingVector::new(raw)
            .and_then(|v| normalize(&v))
            .map_err(|e| ProviderError::InvalidEmbedding(e.to_string()))?;
        self.cache
            .write()
            .entry(text.to_string())
            .or_insert(vector.clone());
        Ok(vector)
    }

    pub fn cached_embeddings(&self) -> usize {
        self.cache.read().len()
    }

    /// Runs one structured completion with a single repair reprompt.
    async fn structured<T>(
        &self,
        task: Task,
        tier: ModelTier,
        context: &Value,
        vars: &[(&str, String)],
        parse: impl Fn(&str) -> Result<T, Vec<String>>,
    ) -> Result<T, ProviderError> {
        let (system, user) = prompts::template(task).render(context, vars);
        let mut request = ChatRequest {
            task,
            tier,
            messages: vec![
                ChatMessage {
                    role: Role::System,
                    content: system,
                },
                ChatMessage {
                    role: Role::User,
                    content: user,
                },
            ],
            context: context.clone(),
            repair_attempt: 0,
        };
        let raw = self.with_retries(|| self.chat.complete(&request)).await?;
        let errors = match parse(&raw) {
            Ok(v) => return Ok(v),
            Err(errors) => errors,
        };
        tracing::warn!(
            ?task,
            ?errors,
            "structured output invalid, sending repair prompt"
        );
        request.messages.push(ChatMessage {
            role: Role::Assistant,
            content: raw,
        });
        request.messages.push(ChatMessage {
            role: Role::User,
            content: format!(
                "Your previous reply failed validation:\n- {}\nReply again with only the corrected JSON object.",
                errors.join("\n- ")
            ),
        });
        request.repair_attempt = 1;
        let raw = self.with_retries(|| self.chat.complete(&request)).await?;
        parse(&raw).map_err(|errors| ProviderError::VerdictParse { errors })
    }

    pub async fn audit_completion(
        &self,
        context: &Value,
        known_codes: &[KnownCode],
        grounding_band: f64,
    ) -> Result<AuditVerdict, ProviderError> {
        self.structured(
            Task::Audit,
            ModelTier::Reasoning,
            context,
            &[("grounding_band", format!("{grounding_band}"))],
            |raw| verdict::parse_verdict(raw, known_codes),
        )
        .await
    }

    /// `sample_size` is the number of segments actually placed in the
    /// context; the model's own claims about it are ignored.
    pub async fn reflect_completion(
        &self,
        code_id: Uuid,
        context: &Value,
        sample_size: usize,
        prior_version: Option<u32>,
        now: DateTime<Utc>,
    ) -> Result<CodeReflection, ProviderError> {
        let body = self
            .structured(
                Task::Reflection,
                ModelTier::Reasoning,
                context,
                &[],
                verdict::parse_reflection,
            )
            .await?;
        Ok(CodeReflection {
            code_id,
            evolving_definition: body.evolving_definition,
            theoretical_lens: body.theoretical_lens,
            derivation_trace: body.derivation_trace,
            sample_size,
            version: prior_version.unwrap_or(0) + 1,
            created_at: now,
        })
    }

    pub async fn label_facet(&self, exemplars: &[String]) -> Result<String, ProviderError> {
        let context = serde_json::json!({ "exemplars": exemplars });
        self.structured(
            Task::FacetLabel,
            ModelTier::Fast,
            &context,
            &[],
            verdict::parse_label,
        )
        .await
    }

    pub async fn resolution_suggestion(
        &self,
        context: &Value,
    ) -> Result<ResolutionSuggestion, ProviderError> {
        self.structured(
            Task::Resolution,
            ModelTier::Reasoning,
            context,
            &[],
            verdict::parse_resolution,
        )
        .await
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{Delayed, FnChat, MockEmbedder, ScriptedChat};
    use super::*;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    fn verdict_json(score: f64) -> String {
        json!({
            "consistency_score": score,
            "intent_alignment": "aligned",
            "severity": "info",
            "headline": "Consistent",
            "finding": "Matches prior usage.",
            "action_suggestion": "No action needed.",
            "alternative_codes": []
        })
        .to_string()
    }

    #[tokio::test]
    async fn embed_is_unit_and_cached() {
        let gw = Gateway::new(
            Arc::new(MockEmbedder::new(64, 7)),
            Arc::new(ScriptedChat::new(vec![])),
        );
        let a = gw.embed_text("teachers feel unsupported").await.unwrap();
        let b = gw.embed_text("teachers feel unsupported").await.unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a, b);
        assert_eq!(gw.cached_embeddings(), 1);
        assert_eq!(gw.embed_text("   \n").await, Err(ProviderError::EmptyInput));
    }

    #[tokio::test]
    async fn verdict_roundtrips_from_script() {
        let chat = Arc::new(ScriptedChat::new(vec![Ok(verdict_json(0.8))]));
        let gw = Gateway::new(Arc::new(MockEmbedder::new(8, 1)), chat.clone());
        let v = gw.audit_completion(&json!({}), &[], 0.15).await.unwrap();
        assert_eq!(v.consistency_score, 0.8);
        assert_eq!(v.headline, "Consistent");
        assert_eq!(chat.requests().len(), 1);
    }

    #[tokio::test]
    async fn truncated_payload_gets_one_repair_then_fails() {
        let bad = verdict_json(0.8)[..30].to_string();
        let chat = Arc::new(ScriptedChat::new(vec![Ok(bad.clone()), Ok(bad)]));
        let gw = Gateway::new(Arc::new(MockEmbedder::new(8, 1)), chat.clone());
        let err = gw
            .audit_completion(&json!({}), &[], 0.15)
            .await
            .unwrap_err();
        assert!(matches!(err, ProviderError::VerdictParse { .. }));
        let reqs = chat.requests();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[1].repair_attempt, 1);
        assert!(reqs[1]
            .messages
            .last()
            .unwrap()
            .content
            .contains("failed validation"));
    }

    #[tokio::test]
    async fn repair_can_succeed() {
        let chat = Arc::new(ScriptedChat::new(vec![
            Ok("nonsense".into()),
            Ok(verdict_json(0.5)),
        ]));
        let gw = Gateway::new(Arc::new(MockEmbedder::new(8, 1)), chat);
        assert_eq!(
            gw.audit_completion(&json!({}), &[], 0.15)
                .await
                .unwrap()
                .consistency_score,
            0.5
        );
    }

    #[tokio::test]
    async fn transport_errors_retry_then_give_up() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let chat = FnChat::new(move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            Err(ProviderError::Transport("connection reset".into()))
        });
        let gw = Gateway::new(Arc::new(MockEmbedder::new(8, 1)), Arc::new(chat))
            .with_retry(fast_retry());
        let err = gw
            .audit_completion(&json!({}), &[], 0.15)
            .await
            .unwrap_err();
        assert!(matches!(
            err,
            ProviderError::Unavailable { attempts: 3, .. }
        ));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn transient_failure_recovers() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let chat = FnChat::new(move |_| {
            if c.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(ProviderError::Transport("503".into()))
            } else {
                Ok(verdict_json(0.9))
            }
        });
        let gw = Gateway::new(Arc::new(MockEmbedder::new(8, 1)), Arc::new(chat))
            .with_retry(fast_retry());
        assert!(gw.audit_completion(&json!({}), &[], 0.15).await.is_ok());
    }

    #[tokio::test]
    async fn timeouts_count_as_unavailable() {
        let chat = Delayed::new(ScriptedChat::new(vec![]), Duration::from_millis(200));
        let gw = Gateway::new(Arc::new(MockEmbedder::new(8, 1)), Arc::new(chat))
            .with_retry(RetryPolicy {
                max_attempts: 2,
                base_delay: Duration::from_millis(1),
            })
            .with_timeout(Duration::from_millis(20));
        let err = gw
            .audit_completion(&json!({}), &[], 0.15)
            .await
            .unwrap_err();
        assert!(matches!(
            err,
            ProviderError::Unavailable { attempts: 2, .. }
        ));
    }

    #[tokio::test]
    async fn limiter_caps_in_flight_calls() {
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        struct Probe {
            live: Arc<AtomicUsize>,
            peak: Arc<AtomicUsize>,
        }
        #[async_trait]
        impl ChatBackend for Probe {
            async fn complete(&self, _: &ChatRequest) -> Result<String, ProviderError> {
                let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                tokio::time::sleep(Duration::from_millis(20)).await;
                self.live.fetch_sub(1, Ordering::SeqCst);
                Ok(r#"{"label":"x"}"#.into())
            }
        }
        let gw = Arc::new(
            Gateway::new(
                Arc::new(MockEmbedder::new(8, 1)),
                Arc::new(Probe {
                    live: live.clone(),
                    peak: peak.clone(),
                }),
            )
            .with_concurrency(2),
        );
        let tasks: Vec<_> = (0..8)
            .map(|_| {
                let gw = gw.clone();
                tokio::spawn(async move { gw.label_facet(&["a".into()]).await })
            })
            .collect();
        for t in tasks {
            t.await.unwrap().unwrap();
        }
        assert_eq!(peak.load(Ordering::SeqCst), 2);
    }

    #[tokio::test]
    async fn reflection_versions_and_sample_size() {
        let body = json!({
            "evolving_definition": "d", "theoretical_lens": "l", "derivation_trace": "t"
        })
        .to_string();
        let chat = Arc::new(ScriptedChat::new(vec![Ok(body.clone()), Ok(body)]));
        let gw = Gateway::new(Arc::new(MockEmbedder::new(8, 1)), chat);
        let now = Utc::now();
        let r1 = gw
            .reflect_completion(Uuid::nil(), &json!({}), 30, None, now)
            .await
            .unwrap();
        assert_eq!((r1.version, r1.sample_size), (1, 30));
        let r2 = gw
            .reflect_completion(Uuid::nil(), &json!({}), 4, Some(r1.version), now)
            .await
            .unwrap();
        assert_eq!(r2.version, 2);
    }

    #[test]
    fn config_validation() {
        let env: HashMap<&str, &str> = [
            ("CODEAUDIT_PROVIDER_ENDPOINT", "https://llm.example/v1/"),
            ("CODEAUDIT_PROVIDER_KEY", "sk-test"),
            ("CODEAUDIT_EMBED_MODEL", "embed"),
            ("CODEAUDIT_FAST_MODEL", "fast"),
            ("CODEAUDIT_REASONING_MODEL", "reason"),
        ]
        .into_iter()
        .collect();
        let cfg = ProviderConfig::from_lookup(|k| env.get(k).map(|s| s.to_string())).unwrap();
        assert_eq!(cfg.endpoint, "https://llm.example/v1");
        assert_eq!(cfg.max_retries, 3);
        assert!(!format!("{cfg:?}").contains("sk-test"));

        let mut bad = cfg.clone();
        bad.max_retries = 6;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.timeout = Duration::ZERO;
        assert!(bad.validate().is_err());
        assert!(matches!(
            ProviderConfig::from_lookup(|_| None),
            Err(ConfigError::Missing("CODEAUDIT_PROVIDER_ENDPOINT"))
        ));
    }
}
