//! Logit providers: anything that maps `(image, prompt, prefix)` to
//! next-token logits.
//!
//! Built-in backends are the synthetic simulator ([`crate::sim::SimProvider`]),
//! trace replay ([`ReplayProvider`]) and the line-delimited JSON wire client
//! ([`WireClient`]) that talks to an external model adapter.

mod trace;
mod wire;

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::ImageRef;

pub use trace::{RecordingProvider, ReplayProvider, TraceFile, TraceHeader, TraceRecord, TRACE_FORMAT, TRACE_VERSION};
pub use wire::{serve, serve_tcp, ErrorCode, WireClient, WireError, WireRequest, WireResponse, DEFAULT_TIMEOUT};

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request {0} timed out after {1:?}")]
    Timeout(u64, Duration),
    #[error("session error: {0}")]
    Session(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("adapter error: {0}")]
    Remote(String),
    #[error("persistence error: {0}")]
    Persistence(String),
}

/// The conditioning tuple for one next-token query.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogitRequest {
    pub request_id: u64,
    pub image_ref: ImageRef,
    pub prompt_tokens: Vec<TokenId>,
    pub prefix_tokens: Vec<TokenId>,
}

impl LogitRequest {
    pub fn new(request_id: u64, image_ref: ImageRef, prompt_tokens: Vec<TokenId>, prefix_tokens: Vec<TokenId>) -> Self {
        Self { request_id, image_ref, prompt_tokens, prefix_tokens }
    }

    /// Content hash of `(image_ref, prompt, prefix)`; the request id is not part of it.
    pub fn key(&self) -> String {
        request_key(&self.image_ref, &self.prompt_tokens, &self.prefix_tokens)
    }
}

/// Hex SHA-256 over a length-prefixed encoding of the conditioning tuple.
pub fn request_key(image_ref: &ImageRef, prompt: &[TokenId], prefix: &[TokenId]) -> String {
    let mut h = Sha256::new();
    let image = image_ref.as_str().as_bytes();
    h.update((image.len() as u64).to_le_bytes());
    h.update(image);
    for part in [prompt, prefix] {
        h.update((part.len() as u64).to_le_bytes());
        for t in part {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitResponse {
    pub request_id: u64,
    pub logits: Vec<f64>,
    pub eos_token_id: TokenId,
    pub vocab_size: usize,
}

/// Constants fixed for the lifetime of a provider session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub vocab_size: usize,
    pub eos_token_id: TokenId,
}

/// Latches the first observed [`SessionInfo`] and rejects any later change.
#[derive(Debug, Default)]
pub struct SessionGuard(OnceLock<SessionInfo>);

impl SessionGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> Option<SessionInfo> {
        self.0.get().copied()
    }

    pub fn observe(&self, info: SessionInfo) -> Result<SessionInfo, ProviderError> {
        let fixed = *self.0.get_or_init(|| info);
        if fixed != info {
            return Err(ProviderError::Session(format!("session constants changed from {fixed:?} to {info:?}")));
        }
        Ok(fixed)
    }

    /// Validates a response against the session, latching it if it is the first.
    pub fn check(&self, resp: &LogitResponse) -> Result<(), ProviderError> {
        let info = self.observe(SessionInfo { vocab_size: resp.vocab_size, eos_token_id: resp.eos_token_id })?;
        if resp.logits.len() != info.vocab_size {
            return Err(ProviderError::Session(format!(
                "response {} has {} logits, session vocabulary is {}",
                resp.request_id,
                resp.logits.len(),
                info.vocab_size
            )));
        }
        Ok(())
    }
}

/// Source of next-token logits. Implementations must be pure with respect
/// to the request content within a session and safe to call concurrently.
pub trait LogitProvider: Send + Sync {
    fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError>;

    /// Short identity recorded in run snapshots.
    fn describe(&self) -> String;
}

impl<P: LogitProvider + ?Sized> LogitProvider for &P {
    fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
        (**self).fetch_logits(req)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for Arc<P> {
    fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
        (**self).fetch_logits(req)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for Box<P> {
    fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
        (**self).fetch_logits(req)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Returns the same logits for every request; the loopback "echo" adapter.
#[derive(Debug, Clone)]
pub struct StaticProvider {
    logits: Vec<f64>,
    eos_token_id: TokenId,
}

impl StaticProvider {
    pub fn new(logits: Vec<f64>, eos_token_id: TokenId) -> Self {
        Self { logits, eos_token_id }
    }
}

impl LogitProvider for StaticProvider {
    fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
        Ok(LogitResponse {
            request_id: req.request_id,
            logits: self.logits.clone(),
            eos_token_id: self.eos_token_id,
            vocab_size: self.logits.len(),
        })
    }

    fn describe(&self) -> String {
        format!("static(vocab={})", self.logits.len())
    }
}

/// Sleeps a fixed duration before every fetch. Used to emulate model latency.
#[derive(Debug, Clone)]
pub struct DelayedProvider<P> {
    inner: P,
    delay: Duration,
}

impl<P> DelayedProvider<P> {
    pub fn new(inner: P, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl<P: LogitProvider> LogitProvider for DelayedProvider<P> {
    fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
        std::thread::sleep(self.delay);
        self.inner.fetch_logits(req)
    }

    fn describe(&self) -> String {
        format!("{}+delay({}us)", self.inner.describe(), self.delay.as_micros())
    }
}
