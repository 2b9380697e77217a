//! Recording and replaying provider sessions.
//!
//! A trace is a JSON-lines file: one header object followed by one record
//! per distinct request. Records are keyed by the content hash of
//! `(image_ref, prompt_tokens, prefix_tokens)` and sorted by key, so the same
//! session always serializes to the same bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{LogitProvider, LogitRequest, LogitResponse, ProviderError, SessionGuard, SessionInfo, TokenId};
use crate::fusion::ImageRef;

pub const TRACE_FORMAT: &str = "hdd-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    /// Absent only for a session that never answered a request.
    pub vocab_size: Option<usize>,
    pub eos_token_id: Option<TokenId>,
    pub image_refs: Vec<ImageRef>,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub key: String,
    pub image_ref: ImageRef,
    pub prompt_tokens: Vec<TokenId>,
    pub prefix_tokens: Vec<TokenId>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

fn persist(e: impl std::fmt::Display) -> ProviderError {
    ProviderError::Persistence(e.to_string())
}

impl TraceFile {
    pub fn session(&self) -> Option<SessionInfo> {
        Some(SessionInfo { vocab_size: self.header.vocab_size?, eos_token_id: self.header.eos_token_id? })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ProviderError> {
        serde_json::to_writer(&mut w, &self.header).map_err(persist)?;
        w.write_all(b"\n").map_err(persist)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(persist)?;
            w.write_all(b"\n").map_err(persist)?;
        }
        w.flush().map_err(persist)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProviderError> {
        let f = File::create(path.as_ref()).map_err(persist)?;
        self.write_to(BufWriter::new(f))
    }

    /// Parses and validates a trace: format and version, header/record
    /// agreement, vocabulary size of every record, key integrity and
    /// uniqueness.
    pub fn read_from(r: impl BufRead) -> Result<Self, ProviderError> {
        let mut lines = r.lines();
        let header_line = lines.next().ok_or_else(|| persist("empty trace file"))?.map_err(persist)?;
        let header: TraceHeader =
            serde_json::from_str(&header_line).map_err(|e| persist(format!("bad header: {e}")))?;
        if header.format != TRACE_FORMAT {
            return Err(persist(format!("not a trace file (format `{}`)", header.format)));
        }
        if header.version != TRACE_VERSION {
            return Err(persist(format!("unsupported trace version {}", header.version)));
        }
        let mut records = Vec::with_capacity(header.records);
        let mut seen = BTreeSet::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(persist)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(&line).map_err(|e| persist(format!("bad record {}: {e}", i + 1)))?;
            let vocab = header.vocab_size.ok_or_else(|| persist("records present but header has no vocab_size"))?;
            if rec.logits.len() != vocab {
                return Err(persist(format!(
                    "record {} has {} logits, header declares vocab_size {vocab}",
                    i + 1,
                    rec.logits.len()
                )));
            }
            if super::request_key(&rec.image_ref, &rec.prompt_tokens, &rec.prefix_tokens) != rec.key {
                return Err(persist(format!("record {} key does not match its content", i + 1)));
            }
            if !seen.insert(rec.key.clone()) {
                return Err(persist(format!("duplicate record key {}", rec.key)));
            }
            records.push(rec);
        }
        if records.len() != header.records {
            return Err(persist(format!("header declares {} records, found {}", header.records, records.len())));
        }
        Ok(Self { header, records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let f = File::open(path.as_ref()).map_err(persist)?;
        Self::read_from(BufReader::new(f))
    }
}

/// Wraps a provider and keeps every distinct `(request → logits)` pair.
pub struct RecordingProvider<P> {
    inner: P,
    session: SessionGuard,
    records: Mutex<BTreeMap<String, TraceRecord>>,
}

impl<P: LogitProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, session: SessionGuard::new(), records: Mutex::new(BTreeMap::new()) }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    /// Snapshot of everything recorded so far.
    pub fn record_trace(&self) -> TraceFile {
        let records: Vec<TraceRecord> = self.records.lock().expect("recorder lock").values().cloned().collect();
        let image_refs: BTreeSet<ImageRef> = records.iter().map(|r| r.image_ref.clone()).collect();
        let session = self.session.get();
        TraceFile {
            header: TraceHeader {
                format: TRACE_FORMAT.to_owned(),
                version: TRACE_VERSION,
                vocab_size: session.map(|s| s.vocab_size),
                eos_token_id: session.map(|s| s.eos_token_id),
                image_refs: image_refs.into_iter().collect(),
                records: records.len(),
            },
            records,
        }
    }
}

impl<P: LogitProvider> LogitProvider for RecordingProvider<P> {
    fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
        let resp = self.inner.fetch_logits(req)?;
        self.session.check(&resp)?;
        let key = req.key();
        let mut records = self.records.lock().expect("recorder lock");
        match records.get(&key) {
            Some(prev) if prev.logits != resp.logits => {
                return Err(ProviderError::Session(format!(
                    "provider is not pure: request {key} answered differently"
                )));
            }
            Some(_) => {}
            None => {
                records.insert(
                    key.clone(),
                    TraceRecord {
                        key,
                        image_ref: req.image_ref.clone(),
                        prompt_tokens: req.prompt_tokens.clone(),
                        prefix_tokens: req.prefix_tokens.clone(),
                        logits: resp.logits.clone(),
                    },
                );
            }
        }
        Ok(resp)
    }

    fn describe(&self) -> String {
        format!("record({})", self.inner.describe())
    }
}

/// Serves logits from a loaded trace. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    session: Option<SessionInfo>,
    table: HashMap<String, Vec<f64>>,
    source: String,
}

impl ReplayProvider {
    pub fn new(trace: TraceFile) -> Self {
        let session = trace.session();
        let table = trace.records.into_iter().map(|r| (r.key, r.logits)).collect();
        Self { session, table, source: "memory".into() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let mut p = Self::new(TraceFile::load(path.as_ref())?);
        p.source = path.as_ref().display().to_string();
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl LogitProvider for ReplayProvider {
    fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
        let key = req.key();
        let (Some(session), Some(logits)) = (self.session, self.table.get(&key)) else {
            return Err(ProviderError::NotFound(format!(
                "no recorded response for image `{}` with a {}-token prefix (key {key})",
                req.image_ref,
                req.prefix_tokens.len()
            )));
        };
        Ok(LogitResponse {
            request_id: req.request_id,
            logits: logits.clone(),
            eos_token_id: session.eos_token_id,
            vocab_size: session.vocab_size,
        })
    }

    fn describe(&self) -> String {
        format!("replay({})", self.source)
    }
}
