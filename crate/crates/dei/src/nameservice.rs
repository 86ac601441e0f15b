//! A minimal registry where DEIs announce themselves and IPEs look them up.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sloop_core::{Error, Result};

use crate::clock::Clock;
use crate::server::ApiError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeiDescriptor {
    pub name: String,
    pub address: String,
    pub workflows: Vec<String>,
}

impl DeiDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.address.is_empty() {
            return Err(Error::validation("descriptor needs a name and an address"));
        }
        if self.workflows.is_empty() {
            return Err(Error::validation("descriptor needs at least one workflow"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub descriptor: DeiDescriptor,
    pub registered_at: u64,
    pub last_heartbeat: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub name: String,
    /// False when an identical descriptor was already listed.
    pub created: bool,
}

pub struct NameService {
    clock: Arc<dyn Clock>,
    entries: RwLock<BTreeMap<String, Registration>>,
}

impl NameService {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    /// Idempotent for an identical descriptor; a changed one replaces it.
    pub fn register(&self, d: DeiDescriptor) -> Result<Ack> {
        d.validate()?;
        let now = self.clock.now();
        let mut e = self.entries.write();
        let created = match e.get_mut(&d.name) {
            Some(r) if r.descriptor == d => {
                r.last_heartbeat = now;
                false
            }
            _ => {
                e.insert(
                    d.name.clone(),
                    Registration {
                        descriptor: d.clone(),
                        registered_at: now,
                        last_heartbeat: now,
                    },
                );
                true
            }
        };
        Ok(Ack { name: d.name, created })
    }

    pub fn heartbeat(&self, name: &str) -> Result<()> {
        let now = self.clock.now();
        let mut e = self.entries.write();
        let r = e.get_mut(name).ok_or_else(|| Error::not_found(format!("dei {name}")))?;
        r.last_heartbeat = now;
        Ok(())
    }

    pub fn list(&self) -> Vec<Registration> {
        self.entries.read().values().cloned().collect()
    }

    /// First listed DEI serving `workflow`.
    pub fn find(&self, workflow: &str) -> Option<DeiDescriptor> {
        self.entries
            .read()
            .values()
            .find(|r| r.descriptor.workflows.iter().any(|w| w == workflow))
            .map(|r| r.descriptor.clone())
    }
}

pub fn router(ns: Arc<NameService>) -> Router {
    async fn register(State(ns): State<Arc<NameService>>, Json(d): Json<DeiDescriptor>) -> Result<Json<Ack>, ApiError> {
        Ok(Json(ns.register(d)?))
    }
    async fn heartbeat(State(ns): State<Arc<NameService>>, Path(name): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
        ns.heartbeat(&name)?;
        Ok(Json(serde_json::json!({ "ok": true })))
    }
    async fn list(State(ns): State<Arc<NameService>>) -> Json<Vec<Registration>> {
        Json(ns.list())
    }
    Router::new()
        .route("/api/v1/register", post(register))
        .route("/api/v1/heartbeat/{name}", post(heartbeat))
        .route("/api/v1/deis", get(list))
        .with_state(ns)
}

#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub attempts: u32,
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            attempts: 6,
            initial: Duration::from_millis(200),
            max: Duration::from_secs(5),
        }
    }
}

/// Registers with the name service at `url`, retrying with exponential
/// backoff. Exhausted retries surface as `Unavailable`, meaning the DEI keeps
/// running unlisted.
pub fn register_dei(url: &str, d: &DeiDescriptor, backoff: Backoff) -> Result<Ack> {
    d.validate()?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .map_err(|e| Error::Unavailable(e.to_string()))?;
    let endpoint = format!("{}/api/v1/register", url.trim_end_matches('/'));
    let mut delay = backoff.initial;
    let mut last = String::new();
    for attempt in 0..backoff.attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(delay);
            delay = (delay * 2).min(backoff.max);
        }
        match client.post(&endpoint).json(d).send() {
            Ok(r) if r.status().is_success() => return r.json().map_err(|e| Error::Unavailable(e.to_string())),
            Ok(r) if r.status().is_client_error() => return Err(Error::validation(r.text().unwrap_or_default())),
            Ok(r) => last = format!("status {}", r.status()),
            Err(e) => last = e.to_string(),
        }
        log::warn!("name service registration attempt {} failed: {last}", attempt + 1);
    }
    Err(Error::Unavailable(format!("name service at {url}: {last}")))
}

pub fn list_deis(url: &str) -> Result<Vec<Registration>> {
    let r = reqwest::blocking::get(format!("{}/api/v1/deis", url.trim_end_matches('/'))).map_err(|e| Error::Unavailable(e.to_string()))?;
    r.json().map_err(|e| Error::Unavailable(e.to_string()))
}
