//! OpenAI-compatible HTTP backend (`/embeddings`, `/chat/completions`).

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::{ChatBackend, ChatRequest, EmbeddingBackend, ModelTier, ProviderConfig, ProviderError};

pub struct HttpBackend {
    config: ProviderConfig,
    client: reqwest::Client,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(config: ProviderConfig) -> Self {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .expect("reqwest client builds with static options");
        Self { config, client }
    }

    async fn post<T: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: serde_json::Value,
    ) -> Result<T, ProviderError> {
        let url = format!("{}/{}", self.config.endpoint, path);
        let resp = self
            .client
            .post(url)
            .bearer_auth(self.config.credential.expose())
            .json(&body)
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    ProviderError::Timeout
                } else {
                    ProviderError::Transport(e.to_string())
                }
            })?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ProviderError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(ProviderError::Rejected {
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        resp.json::<T>()
            .await
            .map_err(|e| ProviderError::Transport(format!("bad response body: {e}")))
    }
}

#[async_trait]
impl EmbeddingBackend for HttpBackend {
    fn dim(&self) -> usize {
        self.config.embed_dim.unwrap_or(1536)
    }

    async fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let resp: EmbeddingResponse = self
            .post(
                "embeddings",
                json!({ "model": self.config.embed_model, "input": text }),
            )
            .await?;
        resp.data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| ProviderError::InvalidEmbedding("empty data array".into()))
    }
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let model = match request.tier {
            ModelTier::Fast => &self.config.fast_model,
            ModelTier::Reasoning => &self.config.reasoning_model,
        };
        let resp: ChatResponse = self
            .post(
                "chat/completions",
                json!({
                    "model": model,
                    "messages": request.messages,
                    "response_format": { "type": "json_object" },
                }),
            )
            .await?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Transport("completion has no content".into()))
    }
}
