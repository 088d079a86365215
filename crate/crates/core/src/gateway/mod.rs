//! Uniform client layer over the four model roles the pipeline uses.
//!
//! Every request goes through [`Gateway`], which adds a content-addressed
//! response cache, bounded retries for transient failures, and a per-role
//! counting semaphore. Backends only implement [`Backend::call`].
//!
//! Embeddings are unit-normalized here, whatever the backend returns, so a
//! cosine similarity downstream is a plain dot product.

mod cache;
pub mod http;
mod limiter;
pub mod mock;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::records::{sha256_hex, RecordError};

pub use cache::{Cache, CacheEntry};
pub use limiter::{Limiter, Permit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Chat,
    Vision,
    Embed,
    #[serde(rename = "imagegen")]
    ImageGen,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Chat, Role::Vision, Role::Embed, Role::ImageGen];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Chat => "chat",
            Role::Vision => "vision",
            Role::Embed => "embed",
            Role::ImageGen => "imagegen",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Request purposes. Carried in the cache key; the mock backend uses them
/// to pick a behaviour, HTTP backends ignore them.
pub mod purpose {
    pub const EXTRACT_TEXTUAL: &str = "extract_textual";
    pub const EXTRACT_VISUAL: &str = "extract_visual";
    pub const MERGE_FEATURES: &str = "merge_features";
    pub const PROBE: &str = "probe";
    pub const VERIFY: &str = "verify";
    pub const EVALUATE: &str = "evaluate";
    pub const GENERAL: &str = "general";
}

fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_concurrent() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_image_bytes() -> usize {
    20 * 1024 * 1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub role: Role,
    #[serde(default)]
    pub base_url: String,
    pub model_id: String,
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_max_image_bytes")]
    pub max_image_bytes: usize,
}

impl BackendConfig {
    pub fn new(role: Role, model_id: impl Into<String>) -> Self {
        Self {
            role,
            base_url: String::new(),
            model_id: model_id.into(),
            api_key_env: String::new(),
            max_concurrent: default_max_concurrent(),
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            retry_backoff_ms: default_backoff_ms(),
            max_image_bytes: default_max_image_bytes(),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_concurrent < 1 {
            return Err(GatewayError::InvalidConfig(format!("{}: max_concurrent must be >= 1", self.role)));
        }
        if self.retries > 10 {
            return Err(GatewayError::InvalidConfig(format!("{}: retries must be <= 10", self.role)));
        }
        if self.model_id.is_empty() {
            return Err(GatewayError::InvalidConfig(format!("{}: model_id is empty", self.role)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

/// Sampling parameters forwarded to chat and vision backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { temperature: 0.0, top_p: 1.0, max_tokens: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Chat { purpose: String, messages: Vec<Message>, decode: DecodeParams },
    Vision { purpose: String, image: Vec<u8>, messages: Vec<Message>, decode: DecodeParams },
    EmbedText { text: String },
    EmbedImage { image: Vec<u8> },
    GenerateImage { prompt: String, n: usize, seed: u64 },
}

impl Request {
    pub fn role(&self) -> Role {
        match self {
            Request::Chat { .. } => Role::Chat,
            Request::Vision { .. } => Role::Vision,
            Request::EmbedText { .. } | Request::EmbedImage { .. } => Role::Embed,
            Request::GenerateImage { .. } => Role::ImageGen,
        }
    }

    /// JSON form with image bytes replaced by their SHA-256. Keys are sorted.
    pub fn canonical(&self) -> Value {
        match self {
            Request::Chat { purpose, messages, decode } => json!({
                "op": "chat", "purpose": purpose, "messages": messages, "decode": decode,
            }),
            Request::Vision { purpose, image, messages, decode } => json!({
                "op": "vision", "purpose": purpose, "image_sha256": sha256_hex(image),
                "messages": messages, "decode": decode,
            }),
            Request::EmbedText { text } => json!({ "op": "embed_text", "text": text }),
            Request::EmbedImage { image } => json!({ "op": "embed_image", "image_sha256": sha256_hex(image) }),
            Request::GenerateImage { prompt, n, seed } => json!({
                "op": "generate_image", "prompt": prompt, "n": n, "seed": seed,
            }),
        }
    }

    /// Cache key: SHA-256 over role, model id and the canonical request.
    pub fn cache_key(&self, model_id: &str) -> String {
        let body = json!({ "role": self.role(), "model_id": model_id, "request": self.canonical() });
        sha256_hex(body.to_string().as_bytes())
    }

    fn image(&self) -> Option<&[u8]> {
        match self {
            Request::Vision { image, .. } | Request::EmbedImage { image } => Some(image),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageOutcome {
    Image(#[serde(with = "b64")] Vec<u8>),
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Text(String),
    Vector(Vec<f64>),
    Images(Vec<ImageOutcome>),
}

mod b64 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Network failure, timeout, throttling or server error; retried.
    Transient(String),
    /// Rejected request (HTTP 4xx, precondition); never retried.
    Fatal(String),
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendError::Transient(m) => write!(f, "transient: {m}"),
            BackendError::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

pub trait Backend: Send + Sync {
    fn call(&self, request: &Request) -> Result<Response, BackendError>;
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("no backend configured for role {0}")]
    NotConfigured(Role),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("{role} request {key} failed after {attempts} attempts: {message}")]
    Backend { role: Role, key: String, attempts: u32, message: String },
    #[error("{role} request {key} rejected: {message}")]
    Rejected { role: Role, key: String, message: String },
    #[error("image of {size} bytes exceeds the {limit}-byte limit of the {role} backend")]
    ImageTooLarge { role: Role, size: usize, limit: usize },
    #[error("embedding integrity: {0}")]
    Integrity(String),
    #[error("image generation {key} produced no images ({rejections} rejected)")]
    NoImages { key: String, rejections: usize },
    #[error("{role} backend returned an unexpected response shape")]
    UnexpectedResponse { role: Role },
    #[error(transparent)]
    Cache(#[from] RecordError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub space_id: String,
}

impl Embedding {
    /// Cosine similarity of two unit vectors from the same space.
    pub fn dot(&self, other: &Embedding) -> Result<f64, GatewayError> {
        if self.space_id != other.space_id {
            return Err(GatewayError::Integrity(format!(
                "comparing embeddings from spaces `{}` and `{}`",
                self.space_id, other.space_id
            )));
        }
        if self.vector.len() != other.vector.len() {
            return Err(GatewayError::Integrity(format!(
                "dimension {} vs {} in space `{}`",
                self.vector.len(),
                other.vector.len(),
                self.space_id
            )));
        }
        Ok(self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImages {
    pub images: Vec<Vec<u8>>,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Default)]
struct RoleCounters {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    attempts: AtomicU64,
}

/// Per-role counters; `attempts` counts backend invocations (network calls).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RoleStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub attempts: u64,
    pub peak_in_flight: usize,
}

struct RoleClient {
    config: BackendConfig,
    backend: Arc<dyn Backend>,
    limiter: Limiter,
    counters: RoleCounters,
}

pub struct Gateway {
    roles: HashMap<Role, RoleClient>,
    cache: Cache,
    dims: Mutex<HashMap<String, usize>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut roles: Vec<_> = self.roles.iter().map(|(r, c)| (*r, c.config.model_id.clone())).collect();
        roles.sort();
        f.debug_struct("Gateway").field("roles", &roles).field("cache", &self.cache).finish()
    }
}

impl Gateway {
    pub fn new(cache: Cache) -> Self {
        Self { roles: HashMap::new(), cache, dims: Mutex::new(HashMap::new()) }
    }

    pub fn with_backend(mut self, config: BackendConfig, backend: Arc<dyn Backend>) -> Result<Self, GatewayError> {
        config.validate()?;
        let limiter = Limiter::new(config.max_concurrent);
        self.roles.insert(
            config.role,
            RoleClient { config, backend, limiter, counters: RoleCounters::default() },
        );
        Ok(self)
    }

    pub fn config(&self, role: Role) -> Option<&BackendConfig> {
        self.roles.get(&role).map(|c| &c.config)
    }

    pub fn model_id(&self, role: Role) -> Option<&str> {
        self.config(role).map(|c| c.model_id.as_str())
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn stats(&self, role: Role) -> RoleStats {
        self.roles
            .get(&role)
            .map(|c| RoleStats {
                requests: c.counters.requests.load(Ordering::SeqCst),
                cache_hits: c.counters.cache_hits.load(Ordering::SeqCst),
                attempts: c.counters.attempts.load(Ordering::SeqCst),
                peak_in_flight: c.limiter.peak(),
            })
            .unwrap_or_default()
    }

    /// Sends one request through cache, limiter and retries.
    pub fn execute(&self, request: &Request) -> Result<Response, GatewayError> {
        let role = request.role();
        let client = self.roles.get(&role).ok_or(GatewayError::NotConfigured(role))?;
        client.counters.requests.fetch_add(1, Ordering::SeqCst);
        if let Some(image) = request.image() {
            if image.len() > client.config.max_image_bytes {
                return Err(GatewayError::ImageTooLarge {
                    role,
                    size: image.len(),
                    limit: client.config.max_image_bytes,
                });
            }
        }
        let key = request.cache_key(&client.config.model_id);
        if let Some(bytes) = self.cache.get(role, &key)? {
            if let Ok(response) = serde_json::from_slice::<Response>(&bytes) {
                client.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(response);
            }
            tracing::warn!(%role, %key, "unreadable cache entry, refetching");
        }

        let _permit = client.limiter.acquire();
        let attempts_allowed = client.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts_allowed {
            if attempt > 0 && client.config.retry_backoff_ms > 0 {
                let factor = 1u64 << (attempt - 1).min(6);
                std::thread::sleep(Duration::from_millis(client.config.retry_backoff_ms * factor));
            }
            client.counters.attempts.fetch_add(1, Ordering::SeqCst);
            match client.backend.call(request) {
                Ok(response) => {
                    let bytes = serde_json::to_vec(&response).map_err(RecordError::from)?;
                    self.cache.put(role, &key, &client.config.model_id, &bytes)?;
                    return Ok(response);
                }
                Err(BackendError::Fatal(message)) => return Err(GatewayError::Rejected { role, key, message }),
                Err(BackendError::Transient(message)) => {
                    tracing::debug!(%role, %key, attempt, %message, "transient backend failure");
                    last = message;
                }
            }
        }
        Err(GatewayError::Backend { role, key, attempts: attempts_allowed, message: last })
    }

    fn text(&self, request: Request) -> Result<String, GatewayError> {
        let role = request.role();
        match self.execute(&request)? {
            Response::Text(t) => Ok(t),
            _ => Err(GatewayError::UnexpectedResponse { role }),
        }
    }

    pub fn chat(&self, purpose: &str, messages: Vec<Message>, decode: &DecodeParams) -> Result<String, GatewayError> {
        self.text(Request::Chat { purpose: purpose.into(), messages, decode: decode.clone() })
    }

    pub fn vision_chat(
        &self,
        purpose: &str,
        image: &[u8],
        messages: Vec<Message>,
        decode: &DecodeParams,
    ) -> Result<String, GatewayError> {
        self.text(Request::Vision {
            purpose: purpose.into(),
            image: image.to_vec(),
            messages,
            decode: decode.clone(),
        })
    }

    fn embed(&self, request: Request) -> Result<Embedding, GatewayError> {
        let space_id = self.model_id(Role::Embed).ok_or(GatewayError::NotConfigured(Role::Embed))?.to_string();
        let raw = match self.execute(&request)? {
            Response::Vector(v) => v,
            _ => return Err(GatewayError::UnexpectedResponse { role: Role::Embed }),
        };
        {
            let mut dims = self.dims.lock().expect("dims lock");
            let expected = *dims.entry(space_id.clone()).or_insert(raw.len());
            if expected != raw.len() {
                return Err(GatewayError::Integrity(format!(
                    "space `{space_id}` returned dimension {} after {expected}",
                    raw.len()
                )));
            }
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GatewayError::Integrity(format!("space `{space_id}` returned a zero or non-finite vector")));
        }
        Ok(Embedding { vector: raw.iter().map(|x| x / norm).collect(), space_id })
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding, GatewayError> {
        self.embed(Request::EmbedText { text: text.to_string() })
    }

    pub fn embed_image(&self, image: &[u8]) -> Result<Embedding, GatewayError> {
        self.embed(Request::EmbedImage { image: image.to_vec() })
    }

    /// Generates `n` images. Individual rejections are reported, not fatal,
    /// unless nothing at all was produced.
    pub fn generate_image(&self, prompt: &str, n: usize, seed: u64) -> Result<GeneratedImages, GatewayError> {
        if n == 0 {
            return Err(GatewayError::InvalidConfig("generate_image needs n >= 1".into()));
        }
        let request = Request::GenerateImage { prompt: prompt.to_string(), n, seed };
        let outcomes = match self.execute(&request)? {
            Response::Images(v) => v,
            _ => return Err(GatewayError::UnexpectedResponse { role: Role::ImageGen }),
        };
        let mut images = Vec::new();
        let mut rejections = Vec::new();
        for (index, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                ImageOutcome::Image(bytes) => images.push(bytes),
                ImageOutcome::Rejected(reason) => rejections.push(Rejection { index, reason }),
            }
        }
        if images.is_empty() {
            let model_id = self.model_id(Role::ImageGen).unwrap_or_default();
            return Err(GatewayError::NoImages { key: request.cache_key(model_id), rejections: rejections.len() });
        }
        Ok(GeneratedImages { images, rejections })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    /// Counts calls; fails transiently for the first `fail_first` of them.
    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
        fatal: bool,
    }

    impl Backend for Flaky {
        fn call(&self, request: &Request) -> Result<Response, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fatal {
                return Err(BackendError::Fatal("401 unauthorized".into()));
            }
            if n < self.fail_first {
                return Err(BackendError::Transient("connection refused".into()));
            }
            Ok(match request {
                Request::EmbedText { .. } | Request::EmbedImage { .. } => Response::Vector(vec![3.0, 4.0]),
                Request::GenerateImage { n, .. } => Response::Images(
                    (0..*n)
                        .map(|i| {
                            if i == 1 {
                                ImageOutcome::Rejected("content policy".into())
                            } else {
                                ImageOutcome::Image(vec![i as u8])
                            }
                        })
                        .collect(),
                ),
                _ => Response::Text(format!("reply {n}")),
            })
        }
    }

    fn gateway(role: Role, retries: u32, fail_first: usize, fatal: bool) -> (Gateway, Arc<Flaky>) {
        let backend = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first, fatal });
        let mut cfg = BackendConfig::new(role, "m");
        cfg.retries = retries;
        cfg.retry_backoff_ms = 0;
        let g = Gateway::new(Cache::in_memory()).with_backend(cfg, backend.clone()).unwrap();
        (g, backend)
    }

    #[test]
    fn identical_chat_hits_cache() {
        let (g, b) = gateway(Role::Chat, 0, 0, false);
        let msgs = vec![Message::user("hi")];
        let a = g.chat(purpose::GENERAL, msgs.clone(), &DecodeParams::default()).unwrap();
        let c = g.chat(purpose::GENERAL, msgs, &DecodeParams::default()).unwrap();
        assert_eq!(a, c);
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
        assert_eq!(g.stats(Role::Chat).cache_hits, 1);
    }

    #[test]
    fn down_backend_errors_after_retries_plus_one_attempts() {
        let (g, b) = gateway(Role::Chat, 2, usize::MAX, false);
        let err = g.chat(purpose::GENERAL, vec![Message::user("x")], &DecodeParams::default()).unwrap_err();
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
        match err {
            GatewayError::Backend { attempts, key, .. } => {
                assert_eq!(attempts, 3);
                assert_eq!(key.len(), 64);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn transient_then_success_is_cached_once() {
        let (g, b) = gateway(Role::Chat, 3, 2, false);
        g.chat(purpose::GENERAL, vec![Message::user("x")], &DecodeParams::default()).unwrap();
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
        assert_eq!(g.cache().len(), 1);
    }

    #[test]
    fn fatal_is_not_retried() {
        let (g, b) = gateway(Role::Chat, 5, 0, true);
        let err = g.chat(purpose::GENERAL, vec![Message::user("x")], &DecodeParams::default()).unwrap_err();
        assert!(matches!(err, GatewayError::Rejected { .. }));
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn oversized_image_is_rejected_before_network() {
        let (g, b) = gateway(Role::Vision, 3, 0, false);
        let big = vec![0u8; default_max_image_bytes() + 1];
        let err = g.vision_chat(purpose::GENERAL, &big, vec![], &DecodeParams::default()).unwrap_err();
        assert!(matches!(err, GatewayError::ImageTooLarge { .. }));
        assert_eq!(b.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn embeddings_are_normalized() {
        let (g, _) = gateway(Role::Embed, 0, 0, false);
        let e = g.embed_text("x").unwrap();
        assert!((e.vector[0] - 0.6).abs() < 1e-12 && (e.vector[1] - 0.8).abs() < 1e-12);
        assert_eq!(e.space_id, "m");
    }

    #[test]
    fn embedding_space_mismatch_is_integrity_error() {
        let a = Embedding { vector: vec![1.0], space_id: "a".into() };
        let b = Embedding { vector: vec![1.0], space_id: "b".into() };
        assert!(matches!(a.dot(&b), Err(GatewayError::Integrity(_))));
    }

    #[test]
    fn generation_soft_rejections() {
        let (g, _) = gateway(Role::ImageGen, 0, 0, false);
        let out = g.generate_image("p", 3, 1).unwrap();
        assert_eq!(out.images.len(), 2);
        assert_eq!(out.rejections, vec![Rejection { index: 1, reason: "content policy".into() }]);
    }

    #[test]
    fn config_limits() {
        let mut cfg = BackendConfig::new(Role::Chat, "m");
        cfg.retries = 11;
        assert!(cfg.validate().is_err());
        cfg.retries = 10;
        cfg.max_concurrent = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cache_key_ignores_image_identity_beyond_hash() {
        let a = Request::EmbedImage { image: vec![1, 2, 3] };
        let b = Request::EmbedImage { image: vec![1, 2, 3] };
        let c = Request::EmbedImage { image: vec![1, 2, 4] };
        assert_eq!(a.cache_key("m"), b.cache_key("m"));
        assert_ne!(a.cache_key("m"), c.cache_key("m"));
        assert_ne!(a.cache_key("m"), a.cache_key("other"));
    }
}
