use std::collections::HashMap;
use std::time::Duration;

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use uuid::Uuid;

pub fn hash_password(password: &str) -> String {
    let salt = SaltString::encode_b64(&rand::random::<[u8; 16]>())
        .expect("16 bytes is a valid salt length");
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .expect("argon2 accepts any password bytes")
        .to_string()
}

pub fn verify_password(password: &str, hash: &str) -> bool {
    PasswordHash::new(hash).is_ok_and(|parsed| {
        Argon2::default()
            .verify_password(password.as_bytes(), &parsed)
            .is_ok()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenError {
    Invalid,
    Expired,
}

#[derive(Debug, Clone)]
struct SessionEntry {
    user_id: Uuid,
    expires_at: DateTime<Utc>,
}

/// In-memory bearer-token sessions. Tokens are opaque random strings.
pub struct Sessions {
    ttl: Duration,
    tokens: Mutex<HashMap<String, SessionEntry>>,
}

impl Sessions {
    pub fn new(ttl: Duration) -> Self {
        Self {
            ttl,
            tokens: Mutex::new(HashMap::new()),
        }
    }

    pub fn issue(&self, user_id: Uuid) -> (String, DateTime<Utc>) {
        let token = format!("{}{}", Uuid::new_v4().simple(), Uuid::new_v4().simple());
        let expires_at = Utc::now() + self.ttl;
        self.tokens.lock().insert(
            token.clone(),
            SessionEntry {
                user_id,
                expires_at,
            },
        );
        (token, expires_at)
    }

    pub fn resolve(&self, token: &str) -> Result<Uuid, TokenError> {
        let tokens = self.tokens.lock();
        let entry = tokens.get(token).ok_or(TokenError::Invalid)?;
        if Utc::now() >= entry.expires_at {
            return Err(TokenError::Expired);
        }
        Ok(entry.user_id)
    }

    pub fn revoke(&self, token: &str) -> bool {
        self.tokens.lock().remove(token).is_some()
    }
}
