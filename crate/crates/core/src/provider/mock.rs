//! Deterministic in-process providers for tests and offline runs.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, EmbeddingBackend, ProviderError, Task};

/// Hashed bag-of-words embedder.
///
/// Every token maps to a fixed Gaussian direction derived from
/// `sha256(seed, token)`; a text embeds as the normalised sum of its token
/// directions plus a small text-seeded noise term. Shared words therefore
/// raise cosine similarity, and the output is a pure function of
/// `(text, seed)`.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    noise: f64,
}

impl MockEmbedder {
    pub const DEFAULT_DIM: usize = 384;
    pub const DEFAULT_NOISE: f64 = 0.05;

    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            seed,
            noise: Self::DEFAULT_NOISE,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    fn gaussian(&self, domain: u8, key: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([domain]);
        h.update(key.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    }

    pub fn tokens(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    /// Synchronous form of [`EmbeddingBackend::embed`]; not normalised by
    /// the gateway yet but already unit length.
    pub fn embed_sync(&self, text: &str) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim];
        for token in Self::tokens(text) {
            for (s, x) in sum.iter_mut().zip(self.gaussian(0, &token)) {
                *s += x;
            }
        }
        normalise_in_place(&mut sum);
        if self.noise > 0.0 {
            for (s, x) in sum.iter_mut().zip(self.gaussian(1, text)) {
                *s += self.noise * x;
            }
        }
        if !normalise_in_place(&mut sum) {
            // no tokens and no noise; fall back to the text direction
            sum = self.gaussian(1, text);
            normalise_in_place(&mut sum);
        }
        sum
    }
}

fn normalise_in_place(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

#[async_trait]
impl EmbeddingBackend for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        Ok(self.embed_sync(text))
    }
}

/// Replays a fixed list of responses in order and records every request.
#[derive(Default)]
pub struct ScriptedChat {
    responses: Mutex<VecDeque<Result<String, ProviderError>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new(responses: Vec<Result<String, ProviderError>>) -> Self {
        Self {
            responses: Mutex::new(responses.into()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn push(&self, response: Result<String, ProviderError>) {
        self.responses.lock().push_back(response);
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().clone()
    }
}

#[async_trait]
impl ChatBackend for ScriptedChat {
    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        self.seen.lock().push(request.clone());
        self.responses
            .lock()
            .pop_front()
            .unwrap_or_else(|| Err(ProviderError::Transport("script exhausted".into())))
    }
}

type ChatFn = dyn Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync;

/// Chat backend driven by a closure.
pub struct FnChat(Arc<ChatFn>);

impl FnChat {
    pub fn new(
        f: impl Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self(Arc::new(f))
    }
}

#[async_trait]
impl ChatBackend for FnChat {
    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        (self.0)(request)
    }
}

/// A well-behaved model stand-in: audit scores echo the deterministic
/// similarity, severity follows the band, reflections summarise the sample
/// and labels pick the most frequent content word.
#[derive(Debug, Default, Clone)]
pub struct GroundedMockChat;

impl GroundedMockChat {
    fn audit(context: &Value) -> Value {
        let stage1 = &context["stage1"];
        let sim = stage1["centroid_similarity"].as_f64();
        let band = stage1["band"].as_str().unwrap_or("none");
        let (severity, intent, headline) = match band {
            "strong" => (
                "info",
                "aligned",
                "Consistent with your earlier use of this code",
            ),
            "moderate" => ("warning", "partial", "Partly consistent with earlier use"),
            "flagged" => (
                "critical",
                "misaligned",
                "Departs from how you have used this code",
            ),
            _ => ("info", "partial", "Not enough history to compare yet"),
        };
        let code = context["code"]["name"].as_str().unwrap_or("this code");
        json!({
            "consistency_score": sim.unwrap_or(0.5).clamp(0.0, 1.0),
            "intent_alignment": intent,
            "severity": severity,
            "headline": headline,
            "finding": format!("Compared with prior segments coded `{code}`, similarity is {}.",
                sim.map(|s| format!("{s:.2}")).unwrap_or_else(|| "unavailable".into())),
            "drift_warning": null,
            "action_suggestion": if band == "flagged" {
                "Review the code definition or consider an alternative code."
            } else {
                "No action needed."
            },
            "alternative_codes": [],
            "justification": null
        })
    }

    fn reflection(context: &Value) -> Value {
        let n = context["segments"].as_array().map_or(0, Vec::len);
        let code = context["code"]["name"].as_str().unwrap_or("code");
        let version = context["prior_reflection"]["version"].as_u64().unwrap_or(0);
        json!({
            "evolving_definition": format!("`{code}` as applied across {n} sampled segments."),
            "theoretical_lens": "Inductive, grounded in the researcher's own applications.",
            "derivation_trace": format!("Derived from {n} segments; supersedes version {version}."),
        })
    }

    fn label(context: &Value) -> Value {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for ex in context["exemplars"].as_array().into_iter().flatten() {
            for t in MockEmbedder::tokens(ex.as_str().unwrap_or_default()) {
                if t.len() >= 4 {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let best = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(t, _)| t)
            .unwrap_or_else(|| "facet".into());
        json!({ "label": best })
    }
}

impl GroundedMockChat {
    /// The reply this mock gives to `request`, usable from other mocks.
    pub fn reply(request: &ChatRequest) -> Result<String, ProviderError> {
        let out = match request.task {
            Task::Audit => Self::audit(&request.context),
            Task::Reflection => Self::reflection(&request.context),
            Task::FacetLabel => Self::label(&request.context),
            Task::Resolution => json!({
                "action": "discuss",
                "suggestion": "Talk through both readings of the span and agree a rule."
            }),
        };
        Ok(out.to_string())
    }
}

#[async_trait]
impl ChatBackend for GroundedMockChat {
    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        Self::reply(request)
    }
}

/// Adds a fixed latency in front of any backend.
pub struct Delayed<B> {
    inner: B,
    delay: Duration,
}

impl<B> Delayed<B> {
    pub fn new(inner: B, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

#[async_trait]
impl<B: EmbeddingBackend> EmbeddingBackend for Delayed<B> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    async fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        tokio::time::sleep(self.delay).await;
        self.inner.embed(text).await
    }
}

#[async_trait]
impl<B: ChatBackend> ChatBackend for Delayed<B> {
    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        tokio::time::sleep(self.delay).await;
        self.inner.complete(request).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::IndexedRandom;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn pure_function_of_text_and_seed() {
        let e = MockEmbedder::new(128, 3);
        assert_eq!(e.embed_sync("Hello world"), e.embed_sync("Hello world"));
        assert_ne!(
            e.embed_sync("Hello world"),
            MockEmbedder::new(128, 4).embed_sync("Hello world")
        );
        let v = e.embed_sync("Hello world");
        assert!((dot(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shared_words_raise_similarity() {
        let e = MockEmbedder::new(384, 11);
        let a = e.embed_sync("nurses describe burnout after night shifts");
        let b = e.embed_sync("nurses describe burnout after weekend shifts");
        let c = e.embed_sync("budget spreadsheets arrived late from finance");
        assert!(dot(&a, &b) > 0.7);
        assert!(dot(&a, &c) < 0.3);
    }

    #[test]
    fn punctuation_only_text_still_embeds() {
        let e = MockEmbedder::new(16, 1);
        let v = e.embed_sync("?!");
        assert!((dot(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_word_corpus_is_mostly_dissimilar() {
        // 1000 pairs of 8-word texts drawn from a 2000-word vocabulary.
        let vocab: Vec<String> = (0..2000).map(|i| format!("w{i}")).collect();
        let e = MockEmbedder::new(MockEmbedder::DEFAULT_DIM, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut text = || {
            (0..8)
                .map(|_| vocab.choose(&mut rng).unwrap().as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut total = 0.0;
        for _ in 0..1000 {
            let (a, b) = (text(), text());
            if a == b {
                continue;
            }
            total += dot(&e.embed_sync(&a), &e.embed_sync(&b));
        }
        let mean = total / 1000.0;
        assert!(mean < 0.5, "mean pairwise cosine {mean}");
    }
}
