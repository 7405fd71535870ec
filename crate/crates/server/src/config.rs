use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use codeaudit_core::provider::{ConfigError, ProviderConfig};

/// Which model backend the service talks to.
#[derive(Debug, Clone)]
pub enum ProviderChoice {
    /// Deterministic offline stand-ins. `delay` is added to every chat
    /// completion and `embed_delay` to every embedding call.
    Mock {
        dim: usize,
        seed: u64,
        delay: Duration,
        embed_delay: Duration,
    },
    Http(ProviderConfig),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub provider: ProviderChoice,
    pub token_ttl: Duration,
    /// Codes audited concurrently.
    pub workers: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: ([127, 0, 0, 1], 8080).into(),
            data_dir: None,
            provider: ProviderChoice::Mock {
                dim: 384,
                seed: 0,
                delay: Duration::ZERO,
                embed_delay: Duration::ZERO,
            },
            token_ttl: Duration::from_secs(24 * 60 * 60),
            workers: 8,
        }
    }
}

impl ServerConfig {
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Reads `CODEAUDIT_*` settings through `get`. Provider credentials are
    /// only ever read here and never written anywhere.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let defaults = Self::default();
        let parse = |key: &'static str| -> Result<Option<u64>, ConfigError> {
            get(key)
                .map(|v| {
                    v.trim()
                        .parse::<u64>()
                        .map_err(|_| ConfigError::Invalid(key, v.clone()))
                })
                .transpose()
        };
        let listen = match get("CODEAUDIT_LISTEN") {
            Some(v) => v
                .parse()
                .map_err(|_| ConfigError::Invalid("CODEAUDIT_LISTEN", v.clone()))?,
            None => defaults.listen,
        };
        let use_http = match get("CODEAUDIT_PROVIDER").as_deref() {
            Some("http") => true,
            Some("mock") => false,
            Some(other) => {
                return Err(ConfigError::Invalid(
                    "CODEAUDIT_PROVIDER",
                    other.to_string(),
                ))
            }
            None => get("CODEAUDIT_PROVIDER_ENDPOINT").is_some(),
        };
        let provider = if use_http {
            ProviderChoice::Http(ProviderConfig::from_lookup(&get)?)
        } else {
            ProviderChoice::Mock {
                dim: parse("CODEAUDIT_MOCK_DIM")?.unwrap_or(384) as usize,
                seed: parse("CODEAUDIT_MOCK_SEED")?.unwrap_or(0),
                delay: Duration::from_millis(parse("CODEAUDIT_MOCK_DELAY_MS")?.unwrap_or(0)),
                embed_delay: Duration::from_millis(
                    parse("CODEAUDIT_MOCK_EMBED_DELAY_MS")?.unwrap_or(0),
                ),
            }
        };
        Ok(Self {
            listen,
            data_dir: get("CODEAUDIT_DATA_DIR").map(PathBuf::from),
            provider,
            token_ttl: parse("CODEAUDIT_TOKEN_TTL_SECS")?
                .map(Duration::from_secs)
                .unwrap_or(defaults.token_ttl),
            workers: parse("CODEAUDIT_WORKERS")?.map_or(defaults.workers, |w| w.max(1) as usize),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn lookup(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn defaults_to_in_memory_mock() {
        let c = ServerConfig::from_lookup(lookup(&[])).unwrap();
        assert!(c.data_dir.is_none());
        assert!(matches!(c.provider, ProviderChoice::Mock { dim: 384, .. }));
        assert_eq!(c.token_ttl, Duration::from_secs(86_400));
    }

    #[test]
    fn endpoint_selects_http() {
        let c = ServerConfig::from_lookup(lookup(&[
            ("CODEAUDIT_PROVIDER_ENDPOINT", "http://localhost:9"),
            ("CODEAUDIT_PROVIDER_KEY", "k"),
            ("CODEAUDIT_EMBED_MODEL", "e"),
            ("CODEAUDIT_FAST_MODEL", "f"),
            ("CODEAUDIT_REASONING_MODEL", "r"),
            ("CODEAUDIT_LISTEN", "0.0.0.0:9000"),
        ]))
        .unwrap();
        assert!(matches!(c.provider, ProviderChoice::Http(_)));
        assert_eq!(c.listen.port(), 9000);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ServerConfig::from_lookup(lookup(&[("CODEAUDIT_PROVIDER", "magic")])).is_err());
        assert!(ServerConfig::from_lookup(lookup(&[("CODEAUDIT_MOCK_DIM", "many")])).is_err());
        assert!(ServerConfig::from_lookup(lookup(&[("CODEAUDIT_LISTEN", "nowhere")])).is_err());
    }
}
