//! Line-delimited JSON protocol between the engine and an external model
//! adapter.
//!
//! Each request is one compact JSON object per line:
//!
//! ```text
//! {"request_id":7,"image_ref":"img/0001.png","prompt_tokens":[1,2],"prefix_tokens":[]}
//! ```
//!
//! Each response names the request it answers. The first successful response
//! of a session additionally carries `vocab_size` and `eos_token_id`:
//!
//! ```text
//! {"request_id":7,"logits":[0.25,-1.5,3.0],"vocab_size":3,"eos_token_id":2}
//! {"request_id":8,"logits":[0.5,-1.0,2.0]}
//! {"request_id":9,"error":{"code":"not_found","message":"unknown image_ref"}}
//! ```
//!
//! Responses may arrive in any order; the client matches them by
//! `request_id` and multiplexes concurrent callers over one connection.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LogitProvider, LogitRequest, LogitResponse, ProviderError, SessionGuard, SessionInfo, TokenId};
use crate::fusion::ImageRef;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub request_id: u64,
    pub image_ref: ImageRef,
    pub prompt_tokens: Vec<TokenId>,
    pub prefix_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    InvalidRequest,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    /// `None` only for errors about a line whose id could not be read.
    pub request_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_token_id: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl WireResponse {
    fn failure(request_id: Option<u64>, code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            request_id,
            logits: None,
            vocab_size: None,
            eos_token_id: None,
            error: Some(WireError { code, message: message.into() }),
        }
    }
}

type Pending = Arc<Mutex<HashMap<u64, Sender<Result<WireResponse, ProviderError>>>>>;

/// Protocol client. Safe to share across threads; concurrent fetches are
/// multiplexed over the single connection.
pub struct WireClient {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Pending,
    closed: Arc<AtomicBool>,
    session: Arc<SessionGuard>,
    timeout: Duration,
    child: Mutex<Option<Child>>,
    label: String,
}

impl WireClient {
    /// Uses an already-connected stream pair.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration, label: impl Into<String>) -> Self
    where
        R: io::Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let pending: Pending = Arc::new(Mutex::new(HashMap::new()));
        let closed = Arc::new(AtomicBool::new(false));
        let session = Arc::new(SessionGuard::new());
        {
            let pending = Arc::clone(&pending);
            let closed = Arc::clone(&closed);
            let session = Arc::clone(&session);
            thread::Builder::new()
                .name("wire-reader".into())
                .spawn(move || read_loop(BufReader::new(reader), pending, closed, session))
                .expect("spawn wire reader");
        }
        Self {
            writer: Mutex::new(Box::new(writer)),
            pending,
            closed,
            session,
            timeout,
            child: Mutex::new(None),
            label: label.into(),
        }
    }

    /// Spawns `command` through `sh -c` and speaks the protocol over its stdio.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, ProviderError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError::Transport(format!("cannot spawn adapter `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let client = Self::from_streams(stdout, stdin, timeout, format!("adapter({command})"));
        *client.child.lock().expect("child lock") = Some(child);
        Ok(client)
    }

    pub fn connect(addr: impl ToSocketAddrs + std::fmt::Display, timeout: Duration) -> Result<Self, ProviderError> {
        let label = format!("adapter(tcp://{addr})");
        let stream = TcpStream::connect(&addr).map_err(|e| ProviderError::Transport(format!("connect {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let reader = stream.try_clone().map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self::from_streams(reader, stream, timeout, label))
    }

    pub fn session(&self) -> Option<SessionInfo> {
        self.session.get()
    }

    fn send(&self, req: &LogitRequest) -> Result<(), ProviderError> {
        let wire = WireRequest {
            request_id: req.request_id,
            image_ref: req.image_ref.clone(),
            prompt_tokens: req.prompt_tokens.clone(),
            prefix_tokens: req.prefix_tokens.clone(),
        };
        let mut line = serde_json::to_vec(&wire).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        line.push(b'\n');
        let mut w = self.writer.lock().expect("writer lock");
        w.write_all(&line).and_then(|_| w.flush()).map_err(|e| ProviderError::Transport(format!("write failed: {e}")))
    }

    fn interpret(&self, request_id: u64, resp: WireResponse) -> Result<LogitResponse, ProviderError> {
        if let Some(err) = resp.error {
            return Err(match err.code {
                ErrorCode::NotFound => ProviderError::NotFound(err.message),
                ErrorCode::InvalidRequest => ProviderError::InvalidRequest(err.message),
                _ => ProviderError::Remote(format!("{:?}: {}", err.code, err.message)),
            });
        }
        let logits = resp
            .logits
            .ok_or_else(|| ProviderError::Protocol(format!("response {request_id} has neither logits nor error")))?;
        let info = match (resp.vocab_size, resp.eos_token_id, self.session.get()) {
            (Some(vocab_size), Some(eos_token_id), _) => SessionInfo { vocab_size, eos_token_id },
            (None, None, Some(info)) => info,
            (None, None, None) => {
                return Err(ProviderError::Protocol(
                    "first response did not declare vocab_size and eos_token_id".into(),
                ))
            }
            _ => return Err(ProviderError::Protocol("vocab_size and eos_token_id must be sent together".into())),
        };
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(ProviderError::Protocol(format!("response {request_id} contains non-finite logits")));
        }
        let out = LogitResponse { request_id, logits, eos_token_id: info.eos_token_id, vocab_size: info.vocab_size };
        if let Err(e) = self.session.check(&out) {
            // A session whose constants moved cannot be trusted any further.
            self.closed.store(true, Ordering::SeqCst);
            return Err(e);
        }
        Ok(out)
    }
}

impl LogitProvider for WireClient {
    fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(ProviderError::Transport("connection closed".into()));
        }
        let (tx, rx) = mpsc::channel();
        {
            let mut pending = self.pending.lock().expect("pending lock");
            if pending.contains_key(&req.request_id) {
                return Err(ProviderError::Protocol(format!("request_id {} already in flight", req.request_id)));
            }
            pending.insert(req.request_id, tx);
        }
        if let Err(e) = self.send(req) {
            self.pending.lock().expect("pending lock").remove(&req.request_id);
            return Err(e);
        }
        match rx.recv_timeout(self.timeout) {
            Ok(Ok(resp)) => self.interpret(req.request_id, resp),
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().expect("pending lock").remove(&req.request_id);
                Err(ProviderError::Timeout(req.request_id, self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(ProviderError::Transport("connection closed".into())),
        }
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}

impl Drop for WireClient {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.lock().ok().and_then(|mut c| c.take()) {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Routes responses to waiting callers by request id. Session constants are
/// latched here, in arrival order, so that callers interpreting responses
/// concurrently all see the announcement.
fn read_loop(reader: impl BufRead, pending: Pending, closed: Arc<AtomicBool>, session: Arc<SessionGuard>) {
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<WireResponse, _> = serde_json::from_str(&line);
        let (id, msg) = match parsed {
            Ok(resp) => match resp.request_id {
                Some(id) => match (resp.vocab_size, resp.eos_token_id) {
                    (Some(vocab_size), Some(eos_token_id)) => {
                        match session.observe(SessionInfo { vocab_size, eos_token_id }) {
                            Ok(_) => (id, Ok(resp)),
                            Err(e) => {
                                closed.store(true, Ordering::SeqCst);
                                (id, Err(e))
                            }
                        }
                    }
                    _ => (id, Ok(resp)),
                },
                None => {
                    // Adapter could not attribute an error; nothing to route it to.
                    continue;
                }
            },
            Err(e) => {
                // Unparseable line: try to salvage the id so the caller fails fast.
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(|x| x.as_u64()));
                match id {
                    Some(id) => (id, Err(ProviderError::Protocol(format!("malformed response: {e}")))),
                    None => continue,
                }
            }
        };
        if let Some(tx) = pending.lock().expect("pending lock").remove(&id) {
            let _ = tx.send(msg);
        }
    }
    closed.store(true, Ordering::SeqCst);
    let mut pending = pending.lock().expect("pending lock");
    for (_, tx) in pending.drain() {
        let _ = tx.send(Err(ProviderError::Transport("adapter closed the connection".into())));
    }
}

/// Answers protocol requests from `reader` using `provider`, in order, until
/// end of input. Malformed lines get an error response, never silence.
/// Returns the number of lines answered.
pub fn serve<P: LogitProvider>(provider: &P, reader: impl BufRead, writer: impl Write) -> io::Result<usize> {
    let mut writer = BufWriter::new(writer);
    let mut announced = false;
    let mut answered = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<WireRequest>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(|x| x.as_u64()));
                WireResponse::failure(id, ErrorCode::InvalidRequest, format!("malformed request: {e}"))
            }
            Ok(req) => {
                let id = req.request_id;
                let req = LogitRequest::new(id, req.image_ref, req.prompt_tokens, req.prefix_tokens);
                match provider.fetch_logits(&req) {
                    Ok(r) => {
                        let first = !announced;
                        announced = true;
                        WireResponse {
                            request_id: Some(id),
                            logits: Some(r.logits),
                            vocab_size: first.then_some(r.vocab_size),
                            eos_token_id: first.then_some(r.eos_token_id),
                            error: None,
                        }
                    }
                    Err(ProviderError::NotFound(m)) => WireResponse::failure(Some(id), ErrorCode::NotFound, m),
                    Err(ProviderError::InvalidRequest(m)) => {
                        WireResponse::failure(Some(id), ErrorCode::InvalidRequest, m)
                    }
                    Err(e) => WireResponse::failure(Some(id), ErrorCode::Internal, e.to_string()),
                }
            }
        };
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        answered += 1;
    }
    Ok(answered)
}

/// Accepts connections on `listener` and serves each on its own thread.
/// Runs until the listener fails.
pub fn serve_tcp<P: LogitProvider + 'static>(provider: Arc<P>, listener: TcpListener) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true).ok();
        let provider = Arc::clone(&provider);
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = serve(&*provider, reader, stream);
        });
    }
    Ok(())
}
