//! Users file, password hashing, session tokens and login throttling.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::ServiceError;

/// `hex(sha256(salt || password))`.
pub fn hash_password(salt: &str, password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(password.as_bytes());
    hex::encode(h.finalize())
}

/// A users-file line `username:salt$hash` with a fresh random salt.
pub fn user_line(username: &str, password: &str) -> String {
    let mut salt = [0u8; 16];
    rand::rng().fill_bytes(&mut salt);
    let salt = hex::encode(salt);
    format!("{username}:{salt}${}", hash_password(&salt, password))
}

#[derive(Clone, Debug)]
pub struct Account {
    pub username: String,
    salt: String,
    hash: String,
}

impl Account {
    pub fn verify(&self, password: &str) -> bool {
        let got = hash_password(&self.salt, password);
        // length is fixed, compare without early exit
        got.bytes().zip(self.hash.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
            && got.len() == self.hash.len()
    }
}

pub fn parse_users(text: &str) -> Result<HashMap<String, Account>, ServiceError> {
    let mut users = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || ServiceError::Config(format!("users file line {}: expected username:salt$hash", i + 1));
        let (name, rest) = line.split_once(':').ok_or_else(bad)?;
        let (salt, hash) = rest.split_once('$').ok_or_else(bad)?;
        if name.is_empty() || hash.len() != 64 {
            return Err(bad());
        }
        let account = Account {
            username: name.to_string(),
            salt: salt.to_string(),
            hash: hash.to_ascii_lowercase(),
        };
        if users.insert(name.to_string(), account).is_some() {
            return Err(ServiceError::Config(format!("duplicate user '{name}'")));
        }
    }
    Ok(users)
}

pub fn read_users(path: &Path) -> Result<HashMap<String, Account>, ServiceError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
    parse_users(&text)
}

#[derive(Clone, Copy, Debug)]
pub struct AuthPolicy {
    pub token_ttl: Duration,
    /// Consecutive failures before the account is locked.
    pub max_failures: u32,
    pub lockout: Duration,
}

impl Default for AuthPolicy {
    fn default() -> Self {
        AuthPolicy {
            token_ttl: Duration::from_secs(8 * 3600),
            max_failures: 5,
            lockout: Duration::from_secs(60),
        }
    }
}

#[derive(Default)]
struct Failures {
    count: u32,
    locked_until: Option<Instant>,
}

pub struct Sessions {
    policy: AuthPolicy,
    tokens: HashMap<String, (String, Instant)>,
    failures: HashMap<String, Failures>,
}

pub enum LoginError {
    Invalid,
    Throttled,
}

impl Sessions {
    pub fn new(policy: AuthPolicy) -> Self {
        Sessions {
            policy,
            tokens: HashMap::new(),
            failures: HashMap::new(),
        }
    }

    pub fn login(
        &mut self,
        users: &HashMap<String, Account>,
        username: &str,
        password: &str,
    ) -> Result<String, LoginError> {
        let now = Instant::now();
        let f = self.failures.entry(username.to_string()).or_default();
        if let Some(until) = f.locked_until {
            if now < until {
                return Err(LoginError::Throttled);
            }
            *f = Failures::default();
        }
        match users.get(username) {
            Some(a) if a.verify(password) => {
                *f = Failures::default();
                let mut bytes = [0u8; 32];
                rand::rng().fill_bytes(&mut bytes);
                let token = hex::encode(bytes);
                self.tokens
                    .insert(token.clone(), (username.to_string(), now + self.policy.token_ttl));
                Ok(token)
            }
            _ => {
                f.count += 1;
                if f.count >= self.policy.max_failures {
                    f.locked_until = Some(now + self.policy.lockout);
                    log::warn!("login for '{username}' locked after {} failures", f.count);
                    return Err(LoginError::Throttled);
                }
                Err(LoginError::Invalid)
            }
        }
    }

    /// Username for a live token; expired tokens are dropped.
    pub fn resolve(&mut self, token: &str) -> Option<String> {
        let now = Instant::now();
        match self.tokens.get(token) {
            Some((user, expiry)) if now < *expiry => Some(user.clone()),
            Some(_) => {
                self.tokens.remove(token);
                None
            }
            None => None,
        }
    }
}
