//! Newline-delimited JSON protocol that lets an external process act as a
//! [`Scorer`].
//!
//! The backend speaks first with a `handshake` line declaring its vocabulary
//! and capabilities, then answers each `score_request` with a
//! `score_response` (or an `error`). Every message is one UTF-8 JSON object
//! terminated by `\n`, discriminated by its `type` field. Floating-point
//! values are written as decimals with 17 significant digits, and excluded
//! logits as the string `"-inf"`. See `docs/protocol.md`.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::decode::{Capabilities, ScoreContext, Scorer, ScorerError};
use crate::dist::{Logit, LogitVector, Vocabulary};

pub const PROTOCOL_VERSION: u32 = 1;
pub const TIMEOUT_ENV: &str = "LCD_SCORER_TIMEOUT_MS";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed message at byte {offset}: {message}")]
    Malformed { offset: u64, message: String },
    #[error("truncated message at byte {offset}: stream ended before newline")]
    Truncated { offset: u64 },
    #[error("unexpected message: expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: String },
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("peer reported error: {0}")]
    Peer(String),
    #[error("connection closed")]
    Closed,
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ProtocolError {
    fn from(e: std::io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}

impl From<ProtocolError> for ScorerError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::VocabularyMismatch(m) => ScorerError::VocabularyMismatch(m),
            ProtocolError::Peer(m) => ScorerError::Backend(m),
            ProtocolError::Closed | ProtocolError::Timeout(_) | ProtocolError::Io(_) => {
                ScorerError::Unavailable(e.to_string())
            }
            other => ScorerError::Protocol(other.to_string()),
        }
    }
}

/// Timeout from `LCD_SCORER_TIMEOUT_MS`, else 30 s.
pub fn timeout_from_env() -> Duration {
    std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(Duration::from_millis)
        .unwrap_or(DEFAULT_TIMEOUT)
}

/// Decimal with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn raw_number<S: Serializer>(v: f64, s: S) -> Result<S::Ok, S::Error> {
    if !v.is_finite() {
        return Err(serde::ser::Error::custom("non-finite number"));
    }
    RawValue::from_string(format_f64(v))
        .map_err(serde::ser::Error::custom)?
        .serialize(s)
}

fn serialize_logits<S: Serializer>(logits: &LogitVector, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    struct Wire(Logit);
    impl Serialize for Wire {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            match self.0 {
                Logit::Value(v) => raw_number(v, s),
                Logit::Excluded => s.serialize_str("-inf"),
            }
        }
    }
    let mut seq = s.serialize_seq(Some(logits.len()))?;
    for l in logits.iter() {
        seq.serialize_element(&Wire(l))?;
    }
    seq.end()
}

fn serialize_temperature<S: Serializer>(t: &f64, s: S) -> Result<S::Ok, S::Error> {
    raw_number(*t, s)
}

fn deserialize_temperature<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let t = f64::deserialize(d)?;
    if t.is_finite() && t > 0.0 {
        Ok(t)
    } else {
        Err(serde::de::Error::custom("temperature must be positive"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Handshake {
    pub protocol_version: u32,
    pub vocabulary: Vocabulary,
    pub capabilities: Capabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub protocol_version: u32,
    pub session_id: String,
    pub prompt_tokens: Vec<usize>,
    pub generated_tokens: Vec<usize>,
    pub include_grounding: bool,
    /// Backends divide their logits by this. The engine always sends 1 and
    /// applies temperature itself.
    #[serde(
        serialize_with = "serialize_temperature",
        deserialize_with = "deserialize_temperature"
    )]
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreResponse {
    pub session_id: String,
    #[serde(serialize_with = "serialize_logits")]
    pub logits: LogitVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Handshake(Handshake),
    ScoreRequest(ScoreRequest),
    ScoreResponse(ScoreResponse),
    Error(ErrorMessage),
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Handshake(_) => "handshake",
            Message::ScoreRequest(_) => "score_request",
            Message::ScoreResponse(_) => "score_response",
            Message::Error(_) => "error",
        }
    }
}

/// One line, including the trailing newline.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut line = serde_json::to_vec(msg).expect("protocol messages serialize");
    line.push(b'\n');
    line
}

/// Decodes one line. A trailing `\n` or `\r\n` is ignored. `base_offset` is
/// the stream position of the line's first byte, used in error offsets.
pub fn decode_message_at(line: &[u8], base_offset: u64) -> Result<Message, ProtocolError> {
    let body = line.strip_suffix(b"\n").unwrap_or(line);
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    serde_json::from_slice(body).map_err(|e| {
        // serde_json columns are 1-based byte positions within the line
        let column = e.column().saturating_sub(1) as u64;
        ProtocolError::Malformed {
            offset: base_offset + column.min(body.len() as u64),
            message: e.to_string(),
        }
    })
}

pub fn decode_message(line: &[u8]) -> Result<Message, ProtocolError> {
    decode_message_at(line, 0)
}

/// A newline-delimited frame read from a stream.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Line {
        offset: u64,
        bytes: Vec<u8>,
    },
    /// Bytes after the last newline when the stream ended.
    Truncated {
        offset: u64,
    },
    Eof,
}

/// Splits a byte stream into frames, tracking byte offsets. A malformed
/// frame does not affect the next one.
pub struct FrameReader<R> {
    inner: R,
    offset: u64,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn next_frame(&mut self) -> std::io::Result<Frame> {
        let mut bytes = Vec::new();
        let n = self.inner.read_until(b'\n', &mut bytes)?;
        let offset = self.offset;
        self.offset += n as u64;
        Ok(if n == 0 {
            Frame::Eof
        } else if bytes.last() != Some(&b'\n') {
            Frame::Truncated { offset }
        } else {
            Frame::Line { offset, bytes }
        })
    }

    /// Next decoded message, `None` at clean end of stream.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        match self.next_frame()? {
            Frame::Eof => Ok(None),
            Frame::Truncated { offset } => Err(ProtocolError::Truncated { offset }),
            Frame::Line { offset, bytes } => decode_message_at(&bytes, offset).map(Some),
        }
    }
}

/// Summary of a finished [`serve`] loop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub responses: usize,
    pub errors: usize,
}

pub fn handshake_for(scorer: &dyn Scorer) -> Handshake {
    Handshake {
        protocol_version: PROTOCOL_VERSION,
        vocabulary: scorer.vocabulary().clone(),
        capabilities: scorer.capabilities(),
    }
}

fn answer(scorer: &dyn Scorer, req: &ScoreRequest) -> Result<ScoreResponse, String> {
    if req.protocol_version != PROTOCOL_VERSION {
        return Err(format!(
            "unsupported protocol version {}",
            req.protocol_version
        ));
    }
    let size = scorer.vocabulary().size();
    if let Some(t) = req
        .prompt_tokens
        .iter()
        .chain(&req.generated_tokens)
        .find(|&&t| t >= size)
    {
        return Err(format!("token {t} outside vocabulary of size {size}"));
    }
    let ctx = ScoreContext {
        session_id: &req.session_id,
        prompt: &req.prompt_tokens,
        generated: &req.generated_tokens,
        include_grounding: req.include_grounding,
    };
    let mut logits = scorer.score(&ctx).map_err(|e| e.to_string())?;
    if req.temperature != 1.0 {
        logits = LogitVector::from_logits(
            logits
                .iter()
                .map(|l| match l {
                    Logit::Value(v) => Logit::Value(v / req.temperature),
                    Logit::Excluded => Logit::Excluded,
                })
                .collect(),
        );
    }
    Ok(ScoreResponse {
        session_id: req.session_id.clone(),
        logits,
    })
}

/// Serves `scorer` until the input stream ends. Bad lines are answered with
/// an `error` message and the loop continues with the next line.
pub fn serve(
    scorer: &dyn Scorer,
    reader: impl BufRead,
    mut writer: impl Write,
) -> Result<ServeStats, ProtocolError> {
    writer.write_all(&encode_message(&Message::Handshake(handshake_for(scorer))))?;
    writer.flush()?;
    let mut frames = FrameReader::new(reader);
    let mut stats = ServeStats::default();
    loop {
        let reply = match frames.next_message() {
            Ok(None) => return Ok(stats),
            Ok(Some(Message::ScoreRequest(req))) => match answer(scorer, &req) {
                Ok(resp) => Message::ScoreResponse(resp),
                Err(message) => Message::Error(ErrorMessage {
                    session_id: Some(req.session_id),
                    message,
                }),
            },
            Ok(Some(other)) => Message::Error(ErrorMessage {
                session_id: None,
                message: format!("expected score_request, got {}", other.kind()),
            }),
            Err(e @ ProtocolError::Truncated { .. }) => {
                let _ = writer.write_all(&encode_message(&Message::Error(ErrorMessage {
                    session_id: None,
                    message: e.to_string(),
                })));
                let _ = writer.flush();
                return Ok(ServeStats {
                    errors: stats.errors + 1,
                    ..stats
                });
            }
            Err(e) => Message::Error(ErrorMessage {
                session_id: None,
                message: e.to_string(),
            }),
        };
        if matches!(reply, Message::Error(_)) {
            stats.errors += 1;
        } else {
            stats.responses += 1;
        }
        writer.write_all(&encode_message(&reply))?;
        writer.flush()?;
    }
}

enum Closer {
    Child(Child),
    Tcp(TcpStream),
    Thread(Option<thread::JoinHandle<()>>),
}

/// Client side of one connection: line writer plus a reader thread, so
/// every receive can honor a timeout regardless of transport.
pub struct Connection {
    writer: Box<dyn Write + Send>,
    frames: Receiver<std::io::Result<Frame>>,
    timeout: Duration,
    closer: Option<Closer>,
}

impl Connection {
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut frames = FrameReader::new(BufReader::new(reader));
            loop {
                let frame = frames.next_frame();
                let done = !matches!(frame, Ok(Frame::Line { .. }));
                if tx.send(frame).is_err() || done {
                    break;
                }
            }
        });
        Self {
            writer: Box::new(writer),
            frames: rx,
            timeout,
            closer: None,
        }
    }

    /// Runs `command` with piped stdin/stdout; stderr is inherited.
    pub fn spawn(command: &mut Command, timeout: Duration) -> Result<Self, ProtocolError> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut conn = Self::from_streams(stdout, stdin, timeout);
        conn.closer = Some(Closer::Child(child));
        Ok(conn)
    }

    pub fn tcp(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, ProtocolError> {
        let addrs: Vec<_> = addr.to_socket_addrs()?.collect();
        let first = addrs
            .first()
            .ok_or_else(|| ProtocolError::Io("address resolved to nothing".into()))?;
        let stream = TcpStream::connect_timeout(first, timeout)?;
        let reader = stream.try_clone()?;
        let closer = stream.try_clone()?;
        let mut conn = Self::from_streams(reader, stream, timeout);
        conn.closer = Some(Closer::Tcp(closer));
        Ok(conn)
    }

    /// Serves `scorer` on an in-process thread over OS pipes.
    pub fn loopback(scorer: Arc<dyn Scorer>, timeout: Duration) -> Result<Self, ProtocolError> {
        let (server_in, client_out) = std::io::pipe()?;
        let (client_in, server_out) = std::io::pipe()?;
        let handle = thread::spawn(move || {
            let _ = serve(&*scorer, BufReader::new(server_in), server_out);
        });
        let mut conn = Self::from_streams(client_in, client_out, timeout);
        conn.closer = Some(Closer::Thread(Some(handle)));
        Ok(conn)
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), ProtocolError> {
        self.send_raw(&encode_message(msg))
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
        self.writer
            .write_all(bytes)
            .and_then(|_| self.writer.flush())
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::BrokenPipe => ProtocolError::Closed,
                _ => e.into(),
            })
    }

    /// Next raw frame, waiting at most the connection timeout.
    pub fn recv_frame(&mut self) -> Result<Frame, ProtocolError> {
        match self.frames.recv_timeout(self.timeout) {
            Ok(Ok(frame)) => Ok(frame),
            Ok(Err(e)) => Err(e.into()),
            Err(RecvTimeoutError::Timeout) => Err(ProtocolError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(ProtocolError::Closed),
        }
    }

    pub fn recv(&mut self) -> Result<Message, ProtocolError> {
        match self.recv_frame()? {
            Frame::Line { offset, bytes } => decode_message_at(&bytes, offset),
            Frame::Truncated { offset } => Err(ProtocolError::Truncated { offset }),
            Frame::Eof => Err(ProtocolError::Closed),
        }
    }

    pub fn recv_handshake(&mut self) -> Result<Handshake, ProtocolError> {
        match self.recv()? {
            Message::Handshake(h) if h.protocol_version == PROTOCOL_VERSION => Ok(h),
            Message::Handshake(h) => Err(ProtocolError::Version(h.protocol_version)),
            other => Err(ProtocolError::Unexpected {
                expected: "handshake",
                got: other.kind().into(),
            }),
        }
    }

    /// Sends a request and waits for its response.
    pub fn request(&mut self, req: &ScoreRequest) -> Result<ScoreResponse, ProtocolError> {
        self.send(&Message::ScoreRequest(req.clone()))?;
        match self.recv()? {
            Message::ScoreResponse(resp) if resp.session_id == req.session_id => Ok(resp),
            Message::ScoreResponse(resp) => Err(ProtocolError::Unexpected {
                expected: "response for the requesting session",
                got: format!("response for session {:?}", resp.session_id),
            }),
            Message::Error(e) => Err(ProtocolError::Peer(e.message)),
            other => Err(ProtocolError::Unexpected {
                expected: "score_response",
                got: other.kind().into(),
            }),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // closing our write side ends a well-behaved server loop
        self.writer = Box::new(std::io::sink());
        match self.closer.take() {
            Some(Closer::Child(mut child)) => {
                let _ = child.kill();
                let _ = child.wait();
            }
            Some(Closer::Tcp(stream)) => {
                let _ = stream.shutdown(Shutdown::Both);
            }
            Some(Closer::Thread(mut handle)) => {
                if let Some(h) = handle.take() {
                    let _ = h.join();
                }
            }
            None => {}
        }
    }
}

struct RemoteState {
    conn: Connection,
    broken: Option<String>,
}

/// A [`Scorer`] backed by a protocol connection. Requests are strictly
/// sequential; after a timeout or transport failure the scorer stays
/// unavailable.
pub struct RemoteScorer {
    vocab: Vocabulary,
    capabilities: Capabilities,
    state: Mutex<RemoteState>,
}

impl std::fmt::Debug for RemoteScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteScorer")
            .field("vocab_size", &self.vocab.size())
            .field("capabilities", &self.capabilities)
            .finish()
    }
}

impl RemoteScorer {
    /// Completes the handshake. When `expected` is given, the declared
    /// vocabulary must match it exactly.
    pub fn connect(
        mut conn: Connection,
        expected: Option<&Vocabulary>,
    ) -> Result<Self, ProtocolError> {
        let handshake = conn.recv_handshake()?;
        if let Some(expected) = expected {
            if handshake.vocabulary != *expected {
                return Err(ProtocolError::VocabularyMismatch(format!(
                    "backend declared {} tokens (eos {}), expected {} (eos {})",
                    handshake.vocabulary.size(),
                    handshake.vocabulary.eos_id(),
                    expected.size(),
                    expected.eos_id()
                )));
            }
        }
        Ok(Self {
            vocab: handshake.vocabulary,
            capabilities: handshake.capabilities,
            state: Mutex::new(RemoteState { conn, broken: None }),
        })
    }

    pub fn loopback(scorer: Arc<dyn Scorer>) -> Result<Self, ProtocolError> {
        Self::loopback_with_timeout(scorer, timeout_from_env())
    }

    pub fn loopback_with_timeout(
        scorer: Arc<dyn Scorer>,
        timeout: Duration,
    ) -> Result<Self, ProtocolError> {
        let expected = scorer.vocabulary().clone();
        Self::connect(Connection::loopback(scorer, timeout)?, Some(&expected))
    }
}

impl Scorer for RemoteScorer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn score(&self, ctx: &ScoreContext<'_>) -> Result<LogitVector, ScorerError> {
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(reason) = &state.broken {
            return Err(ScorerError::Unavailable(reason.clone()));
        }
        let req = ScoreRequest {
            protocol_version: PROTOCOL_VERSION,
            session_id: ctx.session_id.to_owned(),
            prompt_tokens: ctx.prompt.to_vec(),
            generated_tokens: ctx.generated.to_vec(),
            include_grounding: ctx.include_grounding,
            temperature: 1.0,
        };
        match state.conn.request(&req) {
            Ok(resp) if resp.logits.len() == self.vocab.size() => Ok(resp.logits),
            Ok(resp) => Err(ScorerError::Protocol(format!(
                "response has {} logits, vocabulary has {}",
                resp.logits.len(),
                self.vocab.size()
            ))),
            Err(e) => {
                let err = ScorerError::from(e.clone());
                if matches!(err, ScorerError::Unavailable(_) | ScorerError::Protocol(_)) {
                    state.broken = Some(e.to_string());
                }
                Err(err)
            }
        }
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }
}
