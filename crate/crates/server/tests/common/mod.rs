#![allow(dead_code)]

use std::time::Duration;

use codeaudit_client::Client;
use codeaudit_core::provider::Gateway;
use codeaudit_server::config::ProviderChoice;
use codeaudit_server::{app, AppState, ServerConfig};
use tokio::net::TcpListener;

pub struct TestServer {
    pub base: String,
    pub state: AppState,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

impl TestServer {
    pub fn client(&self) -> Client {
        Client::new(self.base.clone())
    }

    /// Registers `name` and returns a logged-in client.
    pub async fn user(&self, name: &str) -> Client {
        let mut c = self.client();
        c.register(name, "correct horse battery")
            .await
            .expect("register");
        c.login(name, "correct horse battery").await.expect("login");
        c
    }

    pub async fn idle(&self) {
        tokio::time::timeout(Duration::from_secs(60), self.state.queue.wait_idle())
            .await
            .expect("queue drains within a minute");
    }
}

pub fn mock_config(dim: usize) -> ServerConfig {
    ServerConfig {
        listen: ([127, 0, 0, 1], 0).into(),
        provider: ProviderChoice::Mock {
            dim,
            seed: 7,
            delay: Duration::ZERO,
            embed_delay: Duration::ZERO,
        },
        ..ServerConfig::default()
    }
}

pub async fn start(config: ServerConfig) -> TestServer {
    let state = AppState::build(&config).expect("state builds");
    serve(state).await
}

pub async fn start_with(config: ServerConfig, gateway: Gateway) -> TestServer {
    let state = AppState::with_gateway(&config, gateway).expect("state builds");
    serve(state).await
}

async fn serve(state: AppState) -> TestServer {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let router = app(state.clone());
    let task = tokio::spawn(async move {
        axum::serve(listener, router).await.unwrap();
    });
    TestServer {
        base: format!("http://{addr}"),
        state,
        task,
    }
}

/// A small interview excerpt with a few obvious themes.
pub const INTERVIEW: &str = "I moved here for work and the commute is long. \
My manager supports flexible hours which helps with childcare. \
Housing costs keep rising and rent takes most of my salary. \
Honestly the commute and the rent both wear me down. \
My neighbours are friendly and we share childcare on weekends. \
Work has been stressful since the reorganisation last spring.";

/// Character range of the `n`th sentence of [`INTERVIEW`].
pub fn sentence(n: usize) -> (usize, usize) {
    let mut start = 0;
    for (i, part) in INTERVIEW.split_inclusive(". ").enumerate() {
        let len = part.chars().count();
        if i == n {
            return (start, start + part.trim_end().chars().count());
        }
        start += len;
    }
    panic!("no sentence {n}");
}
