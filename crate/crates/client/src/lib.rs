//! Typed client for the codeaudit HTTP service and its push channel.

use std::time::Duration;

use codeaudit_core::api::*;
use codeaudit_core::facets::FacetResult;
use codeaudit_core::pipeline::AuditConfig;
use codeaudit_core::provider::CodeReflection;
use codeaudit_core::vector_store::ConsistencyScoreRecord;
use futures::{SinkExt, StreamExt};
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::client::IntoClientRequest;
use tokio_tungstenite::tungstenite::http::HeaderValue;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};
use uuid::Uuid;

pub use codeaudit_core::api;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("{status}: {} ({})", .detail.message, .detail.code)]
    Api {
        status: StatusCode,
        detail: ErrorDetail,
    },
    #[error("push channel: {0}")]
    Socket(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("unexpected response body: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("not logged in")]
    NoToken,
    #[error("token contains characters not allowed in a header")]
    BadToken,
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
            _ => None,
        }
    }

    /// The service's machine-readable error code, if it sent one.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { detail, .. } => Some(&detail.code),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone, Default)]
pub struct AlertFilter {
    pub code_id: Option<Uuid>,
    pub include_dismissed: bool,
}

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
    token: Option<String>,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("client builds with static settings");
        Self {
            http,
            base: base.into().trim_end_matches('/').to_string(),
            token: None,
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        let rb = self.http.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    async fn finish(rb: RequestBuilder) -> Result<reqwest::Response> {
        let resp = rb.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let bytes = resp.bytes().await?;
        let detail = serde_json::from_slice::<ErrorBody>(&bytes)
            .map(|b| b.error)
            .unwrap_or_else(|_| ErrorDetail {
                code: "http_error".into(),
                message: String::from_utf8_lossy(&bytes).into_owned(),
                fields: Vec::new(),
            });
        Err(ClientError::Api { status, detail })
    }

    async fn call<T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&impl Serialize>,
    ) -> Result<T> {
        let mut rb = self.request(method, path);
        if let Some(b) = body {
            rb = rb.json(b);
        }
        let bytes = Self::finish(rb).await?.bytes().await?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.call(Method::GET, path, None::<&()>).await
    }

    async fn post<T: DeserializeOwned>(&self, path: &str, body: &impl Serialize) -> Result<T> {
        self.call(Method::POST, path, Some(body)).await
    }

    async fn empty(&self, method: Method, path: &str) -> Result<()> {
        Self::finish(self.request(method, path)).await.map(drop)
    }

    /// Sends an arbitrary request and returns status and JSON body (or
    /// `Value::Null` when the body is empty or not JSON).
    pub async fn raw(
        &self,
        method: Method,
        path: &str,
        body: Option<Value>,
    ) -> Result<(StatusCode, Value)> {
        let mut rb = self.request(method, path);
        if let Some(b) = body {
            rb = rb.json(&b);
        }
        let resp = rb.send().await?;
        let status = resp.status();
        let bytes = resp.bytes().await?;
        Ok((
            status,
            serde_json::from_slice(&bytes).unwrap_or(Value::Null),
        ))
    }

    pub async fn health(&self) -> Result<Value> {
        self.get("/health").await
    }

    pub async fn register(&self, username: &str, password: &str) -> Result<UserProfile> {
        let creds = Credentials {
            username: username.into(),
            password: password.into(),
        };
        self.post("/api/auth/register", &creds).await
    }

    /// Logs in and keeps the session token for later calls.
    pub async fn login(&mut self, username: &str, password: &str) -> Result<Session> {
        let creds = Credentials {
            username: username.into(),
            password: password.into(),
        };
        let session: Session = self.post("/api/auth/login", &creds).await?;
        self.token = Some(session.token.clone());
        Ok(session)
    }

    pub async fn logout(&mut self) -> Result<()> {
        self.empty(Method::POST, "/api/auth/logout").await?;
        self.token = None;
        Ok(())
    }

    pub async fn me(&self) -> Result<UserProfile> {
        self.get("/api/me").await
    }

    pub async fn projects(&self) -> Result<Vec<Project>> {
        self.get("/api/projects").await
    }

    pub async fn create_project(&self, name: &str, settings: Option<Value>) -> Result<Project> {
        let body = CreateProject {
            name: name.into(),
            settings,
        };
        self.post("/api/projects", &body).await
    }

    pub async fn project(&self, project: Uuid) -> Result<Project> {
        self.get(&format!("/api/projects/{project}")).await
    }

    pub async fn members(&self, project: Uuid) -> Result<Vec<Member>> {
        self.get(&format!("/api/projects/{project}/members")).await
    }

    pub async fn add_member(&self, project: Uuid, username: &str) -> Result<Member> {
        let body = AddMember {
            username: username.into(),
        };
        self.post(&format!("/api/projects/{project}/members"), &body)
            .await
    }

    pub async fn settings(&self, project: Uuid) -> Result<AuditConfig> {
        self.get(&format!("/api/projects/{project}/settings")).await
    }

    pub async fn update_settings(&self, project: Uuid, patch: &Value) -> Result<AuditConfig> {
        self.call(
            Method::PATCH,
            &format!("/api/projects/{project}/settings"),
            Some(patch),
        )
        .await
    }

    pub async fn upload_document(
        &self,
        project: Uuid,
        title: &str,
        body: &str,
    ) -> Result<DocumentRecord> {
        let doc = CreateDocument {
            title: title.into(),
            body: body.into(),
        };
        self.post(&format!("/api/projects/{project}/documents"), &doc)
            .await
    }

    pub async fn documents(&self, project: Uuid) -> Result<Vec<DocumentRecord>> {
        self.get(&format!("/api/projects/{project}/documents"))
            .await
    }

    pub async fn document(&self, project: Uuid, document: Uuid) -> Result<DocumentRecord> {
        self.get(&format!("/api/projects/{project}/documents/{document}"))
            .await
    }

    pub async fn create_code(&self, project: Uuid, code: &CreateCode) -> Result<CodeRecord> {
        self.post(&format!("/api/projects/{project}/codes"), code)
            .await
    }

    pub async fn codes(&self, project: Uuid) -> Result<Vec<CodeRecord>> {
        self.get(&format!("/api/projects/{project}/codes")).await
    }

    pub async fn update_code(
        &self,
        project: Uuid,
        code: Uuid,
        update: &UpdateCode,
    ) -> Result<CodeRecord> {
        self.call(
            Method::PATCH,
            &format!("/api/projects/{project}/codes/{code}"),
            Some(update),
        )
        .await
    }

    pub async fn delete_code(&self, project: Uuid, code: Uuid) -> Result<()> {
        self.empty(
            Method::DELETE,
            &format!("/api/projects/{project}/codes/{code}"),
        )
        .await
    }

    /// Records a segment. Audits run in the background; their results come
    /// over the push channel.
    pub async fn apply_code(&self, project: Uuid, apply: &ApplyCode) -> Result<ApplyCodeResponse> {
        self.post(&format!("/api/projects/{project}/segments"), apply)
            .await
    }

    pub async fn segments(&self, project: Uuid) -> Result<Vec<SegmentRecord>> {
        self.get(&format!("/api/projects/{project}/segments")).await
    }

    pub async fn delete_segment(&self, project: Uuid, segment: Uuid) -> Result<()> {
        self.empty(
            Method::DELETE,
            &format!("/api/projects/{project}/segments/{segment}"),
        )
        .await
    }

    pub async fn alerts(&self, project: Uuid, filter: &AlertFilter) -> Result<Vec<AlertRecord>> {
        let mut path = format!(
            "/api/projects/{project}/alerts?include_dismissed={}",
            filter.include_dismissed
        );
        if let Some(c) = filter.code_id {
            path.push_str(&format!("&code_id={c}"));
        }
        self.get(&path).await
    }

    pub async fn dismiss_alert(&self, project: Uuid, alert: Uuid) -> Result<AlertRecord> {
        self.post(
            &format!("/api/projects/{project}/alerts/{alert}/dismiss"),
            &(),
        )
        .await
    }

    pub async fn scores(
        &self,
        project: Uuid,
        code: Option<Uuid>,
    ) -> Result<Vec<ConsistencyScoreRecord>> {
        let path = match code {
            Some(c) => format!("/api/projects/{project}/scores?code_id={c}"),
            None => format!("/api/projects/{project}/scores"),
        };
        self.get(&path).await
    }

    pub async fn score(&self, project: Uuid, score: Uuid) -> Result<ConsistencyScoreRecord> {
        self.get(&format!("/api/projects/{project}/scores/{score}"))
            .await
    }

    pub async fn reflections(&self, project: Uuid, code: Uuid) -> Result<Vec<CodeReflection>> {
        self.get(&format!("/api/projects/{project}/codes/{code}/reflections"))
            .await
    }

    pub async fn request_facets(
        &self,
        project: Uuid,
        code: Uuid,
        seed: Option<u64>,
    ) -> Result<JobAccepted> {
        self.post(
            &format!("/api/projects/{project}/codes/{code}/facets"),
            &FacetRequest { seed },
        )
        .await
    }

    pub async fn facets(&self, project: Uuid, code: Uuid) -> Result<FacetReport> {
        self.get(&format!("/api/projects/{project}/codes/{code}/facets"))
            .await
    }

    pub async fn icr(&self, project: Uuid) -> Result<IcrReport> {
        self.get(&format!("/api/projects/{project}/icr")).await
    }

    pub async fn suggest_resolution(
        &self,
        project: Uuid,
        disagreement: &codeaudit_core::icr::Disagreement,
    ) -> Result<ResolutionAdvice> {
        let body = SuggestResolution {
            disagreement: disagreement.clone(),
        };
        self.post(&format!("/api/projects/{project}/icr/suggestions"), &body)
            .await
    }

    pub async fn resolve(
        &self,
        project: Uuid,
        body: &ResolveDisagreement,
    ) -> Result<ResolutionRecord> {
        self.post(&format!("/api/projects/{project}/icr/resolutions"), body)
            .await
    }

    pub async fn resolutions(&self, project: Uuid) -> Result<Vec<ResolutionRecord>> {
        self.get(&format!("/api/projects/{project}/icr/resolutions"))
            .await
    }

    pub async fn dashboard(&self, project: Uuid) -> Result<Dashboard> {
        self.get(&format!("/api/projects/{project}/dashboard"))
            .await
    }

    /// The project's edit history after global sequence number `after`.
    pub async fn history(&self, project: Uuid, after: u64) -> Result<Vec<Value>> {
        self.get(&format!("/api/projects/{project}/history?after={after}"))
            .await
    }

    /// A gzipped tar archive of the project.
    pub async fn export(&self, project: Uuid) -> Result<Vec<u8>> {
        let resp =
            Self::finish(self.request(Method::GET, &format!("/api/projects/{project}/export")))
                .await?;
        Ok(resp.bytes().await?.to_vec())
    }

    pub async fn import(&self, archive: Vec<u8>) -> Result<Project> {
        let rb = self
            .request(Method::POST, "/api/import")
            .header(reqwest::header::CONTENT_TYPE, "application/gzip")
            .body(archive);
        let bytes = Self::finish(rb).await?.bytes().await?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Opens the project's push channel. With `last_event_id`, buffered
    /// events after that id are delivered first.
    pub async fn subscribe(
        &self,
        project: Uuid,
        last_event_id: Option<u64>,
    ) -> Result<EventStream> {
        let token = self.token.as_deref().ok_or(ClientError::NoToken)?;
        let ws_base = if let Some(rest) = self.base.strip_prefix("https://") {
            format!("wss://{rest}")
        } else {
            format!("ws://{}", self.base.trim_start_matches("http://"))
        };
        let mut url = format!("{ws_base}/api/projects/{project}/events");
        if let Some(id) = last_event_id {
            url.push_str(&format!("?last_event_id={id}"));
        }
        let mut request = url.into_client_request()?;
        let bearer =
            HeaderValue::from_str(&format!("Bearer {token}")).map_err(|_| ClientError::BadToken)?;
        request.headers_mut().insert("authorization", bearer);
        let (socket, _) = tokio_tungstenite::connect_async(request).await?;
        Ok(EventStream {
            socket,
            last_event_id,
        })
    }
}

/// Live events from one project.
pub struct EventStream {
    socket: WebSocketStream<MaybeTlsStream<TcpStream>>,
    last_event_id: Option<u64>,
}

impl EventStream {
    /// Next event, or `None` once the server closes the channel.
    pub async fn next(&mut self) -> Option<Result<PushEvent>> {
        loop {
            match self.socket.next().await? {
                Ok(Message::Text(text)) => {
                    let parsed =
                        serde_json::from_str::<PushEvent>(&text).map_err(ClientError::from);
                    if let Ok(e) = &parsed {
                        self.last_event_id = Some(e.event_id);
                    }
                    return Some(parsed);
                }
                Ok(Message::Close(_)) => return None,
                Ok(_) => continue,
                Err(e) => return Some(Err(e.into())),
            }
        }
    }

    /// Waits up to `timeout` for the next event; `None` on timeout or close.
    pub async fn next_within(&mut self, timeout: Duration) -> Option<Result<PushEvent>> {
        tokio::time::timeout(timeout, self.next())
            .await
            .ok()
            .flatten()
    }

    /// Id of the last event received, for reconnecting.
    pub fn last_event_id(&self) -> Option<u64> {
        self.last_event_id
    }

    pub async fn close(mut self) {
        let _ = self.socket.send(Message::Close(None)).await;
    }
}

/// Convenience for pulling a facet result out of a `facet_ready` payload.
pub fn facet_result(event: &PushEvent) -> Option<FacetResult> {
    (event.kind == EventKind::FacetReady)
        .then(|| serde_json::from_value::<FacetReport>(event.payload["facets"].clone()).ok())
        .flatten()
        .map(|r| r.result)
}
