//! Generation backends behind one synchronous contract.
//!
//! Three implementations: a live OpenAI-compatible HTTP client, a replay
//! backend over a recorded store, and a deterministic synthetic oracle whose
//! ground-truth answer distributions are known analytically. Requests are
//! identified by a canonical fingerprint that excludes timestamps and
//! transport details, so replay and retry are exact.

mod live;
mod replay;
mod synthetic;

pub use live::{chat_completion_body, LiveBackend, LiveConfig, API_KEY_ENV};
pub use replay::{ReplayBackend, ReplayStore, RecordingBackend};
pub use synthetic::{SyntheticBackend, SyntheticModel, SyntheticModelSpec};

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::records::{DecodingPolicy, GenerationRecord, PolicyKind};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("policy `{policy}` is not supported by backend `{backend_id}`: {reason}")]
    UnsupportedPolicy {
        backend_id: String,
        policy: PolicyKind,
        reason: String,
    },
    #[error("no recorded response for fingerprint {fingerprint}")]
    NotRecorded { fingerprint: String },
    #[error("replay store integrity violation: {0}")]
    StoreIntegrity(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

impl BackendError {
    /// Transient failures worth another attempt: transport drops, rate
    /// limits, and server-side errors. Client errors and contract violations
    /// are final.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::RateLimited(_) => true,
            BackendError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Everything that determines a generation, and nothing that does not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_text: Option<String>,
    pub policy: DecodingPolicy,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    /// Which configured backend should serve this; part of identity because
    /// ensemble members answering the same prompt are distinct requests.
    pub backend_id: String,
}

/// JSON with object keys sorted recursively, the canonical form hashed by
/// [`request_fingerprint`].
pub fn canonical_json(value: &serde_json::Value) -> String {
    fn write(value: &serde_json::Value, out: &mut String) {
        match value {
            serde_json::Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, key) in keys.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&serde_json::to_string(key).expect("string encodes"));
                    out.push(':');
                    write(&map[*key], out);
                }
                out.push('}');
            }
            serde_json::Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            leaf => out.push_str(&serde_json::to_string(leaf).expect("leaf encodes")),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// Stable hex identity of a request: sha256 of its canonical JSON. Changes
/// iff any semantic field (including the seed) changes.
pub fn request_fingerprint(request: &GenerationRequest) -> String {
    let value = serde_json::to_value(request).expect("request serializes");
    let canonical = canonical_json(&value);
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}

/// A source of generations. Implementations must tolerate concurrent calls.
///
/// Returned records carry text, the echoed policy, and logprobs when the
/// backend supplied them; `prompt_id` and `variant_key` are left empty for
/// the orchestration layer to fill.
pub trait GenerationBackend: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationRecord, BackendError>;
}

/// Named backends available to a collection run.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    backends: HashMap<String, Arc<dyn GenerationBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        BackendRegistry::default()
    }

    pub fn insert(&mut self, backend: Arc<dyn GenerationBackend>) {
        self.backends.insert(backend.id().to_owned(), backend);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn GenerationBackend>, BackendError> {
        self.backends
            .get(id)
            .cloned()
            .ok_or_else(|| BackendError::Config(format!("no backend registered under `{id}`")))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.backends.keys().cloned().collect();
        ids.sort();
        ids
    }
}

/// Exponential backoff schedule for transient failures.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(200),
            max_delay: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    /// Millisecond-scale delays for tests.
    pub fn fast() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        }
    }

    /// Delay before the attempt after `attempt` (1-based): base doubled per
    /// failure, capped, plus uniform jitter up to half the step.
    fn delay_after(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32 << (attempt - 1).min(16));
        let capped = exp.min(self.max_delay);
        let jitter_cap = capped.as_millis() as u64 / 2;
        let jitter = if jitter_cap == 0 {
            0
        } else {
            rand::rng().random_range(0..=jitter_cap)
        };
        capped + Duration::from_millis(jitter)
    }
}

/// Runs `op` until it succeeds, fails fatally, or exhausts the schedule.
/// Safe for generation because requests carry explicit seeds and are
/// therefore idempotent.
pub fn with_retries<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut attempt = 1;
    loop {
        match op() {
            Ok(value) => return Ok(value),
            Err(err) if err.is_retryable() && attempt < policy.max_attempts => {
                let delay = policy.delay_after(attempt);
                tracing::warn!(attempt, ?delay, error = %err, "retrying after transient failure");
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

/// Counting semaphore bounding in-flight requests. Default cap 8.
pub struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

pub const DEFAULT_IN_FLIGHT_CAP: usize = 8;

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        assert!(permits > 0, "semaphore needs at least one permit");
        Semaphore {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore wait");
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

pub struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().expect("semaphore lock");
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}
