//! Conformance checks for scorer backends, plus golden transcript replay.
//!
//! A transcript is a text file of lines prefixed `> ` (bytes the client
//! sends, verbatim) or `< ` (a message the backend must send). Lines starting
//! with `#` and blank lines are ignored. Expected and received messages are
//! compared after canonical re-encoding, so only float formatting may
//! differ; `error` messages are compared by session id only.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::dist::{Logit, LogitVector};
use crate::protocol::{
    decode_message, encode_message, Connection, Handshake, Message, ProtocolError, ScoreRequest,
    PROTOCOL_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{status}] {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TranscriptLine {
    Send(Vec<u8>),
    Expect(Message),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcript {
    pub lines: Vec<TranscriptLine>,
}

impl Transcript {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(sent) = line.strip_prefix("> ") {
                let mut bytes = sent.as_bytes().to_vec();
                bytes.push(b'\n');
                lines.push(TranscriptLine::Send(bytes));
            } else if let Some(expected) = line.strip_prefix("< ") {
                let msg = decode_message(expected.as_bytes())
                    .map_err(|e| format!("transcript line {}: {e}", i + 1))?;
                lines.push(TranscriptLine::Expect(msg));
            } else {
                return Err(format!(
                    "transcript line {}: expected '> ' or '< ' prefix",
                    i + 1
                ));
            }
        }
        Ok(Self { lines })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }

    /// Sends each line of `sent` and records what comes back, one reply per
    /// line. The handshake is recorded first.
    pub fn record(conn: &mut Connection, sent: &[Vec<u8>]) -> Result<Self, ProtocolError> {
        let mut lines = vec![TranscriptLine::Expect(Message::Handshake(
            conn.recv_handshake()?,
        ))];
        for bytes in sent {
            conn.send_raw(bytes)?;
            lines.push(TranscriptLine::Send(bytes.clone()));
            lines.push(TranscriptLine::Expect(conn.recv()?));
        }
        Ok(Self { lines })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            match line {
                TranscriptLine::Send(bytes) => {
                    out.push_str("> ");
                    out.push_str(String::from_utf8_lossy(bytes).trim_end_matches('\n'));
                }
                TranscriptLine::Expect(msg) => {
                    out.push_str("< ");
                    out.push_str(
                        String::from_utf8_lossy(&encode_message(msg)).trim_end_matches('\n'),
                    );
                }
            }
            out.push('\n');
        }
        out
    }
}

fn same_message(expected: &Message, got: &Message) -> bool {
    match (expected, got) {
        (Message::Error(a), Message::Error(b)) => a.session_id == b.session_id,
        _ => encode_message(expected) == encode_message(got),
    }
}

/// Replays a transcript on a fresh connection.
pub fn replay(conn: &mut Connection, transcript: &Transcript) -> Result<usize, String> {
    let mut compared = 0;
    for (i, line) in transcript.lines.iter().enumerate() {
        match line {
            TranscriptLine::Send(bytes) => conn.send_raw(bytes).map_err(|e| e.to_string())?,
            TranscriptLine::Expect(expected) => {
                let got = conn.recv().map_err(|e| format!("entry {}: {e}", i + 1))?;
                if !same_message(expected, &got) {
                    return Err(format!(
                        "entry {}: expected {} got {}",
                        i + 1,
                        String::from_utf8_lossy(&encode_message(expected)).trim_end(),
                        String::from_utf8_lossy(&encode_message(&got)).trim_end()
                    ));
                }
                compared += 1;
            }
        }
    }
    Ok(compared)
}

fn request(
    session: &str,
    prompt: Vec<usize>,
    generated: Vec<usize>,
    grounding: bool,
) -> ScoreRequest {
    ScoreRequest {
        protocol_version: PROTOCOL_VERSION,
        session_id: session.to_owned(),
        prompt_tokens: prompt,
        generated_tokens: generated,
        include_grounding: grounding,
        temperature: 1.0,
    }
}

fn bits(l: &LogitVector) -> Vec<Option<u64>> {
    l.iter().map(|x| x.value().map(f64::to_bits)).collect()
}

type Check = fn(&mut Connection, &Handshake) -> Result<String, String>;

fn check_shape(conn: &mut Connection, hs: &Handshake) -> Result<String, String> {
    let size = hs.vocabulary.size();
    let resp = conn
        .request(&request("shape", vec![], vec![], true))
        .map_err(|e| e.to_string())?;
    if resp.logits.len() != size {
        return Err(format!(
            "{} logits for vocabulary of {size}",
            resp.logits.len()
        ));
    }
    if resp.logits.iter().all(Logit::is_excluded) {
        return Err("every logit excluded".into());
    }
    Ok(format!("{size} logits, session echoed"))
}

fn check_determinism(conn: &mut Connection, hs: &Handshake) -> Result<String, String> {
    let size = hs.vocabulary.size();
    let prefix: Vec<usize> = (0..6).map(|i| (i * 7 + 1) % size).collect();
    let req = request("det", prefix[..2].to_vec(), prefix[2..].to_vec(), true);
    let a = conn.request(&req).map_err(|e| e.to_string())?;
    let b = conn.request(&req).map_err(|e| e.to_string())?;
    if bits(&a.logits) != bits(&b.logits) {
        return Err("repeated request returned different logits".into());
    }
    Ok("repeated request bit-identical".into())
}

fn check_sessions(conn: &mut Connection, hs: &Handshake) -> Result<String, String> {
    let size = hs.vocabulary.size();
    let a = request("session-a", vec![1 % size], vec![], true);
    let b = request("session-b", vec![1 % size], vec![2 % size, 3 % size], true);
    let ra = conn.request(&a).map_err(|e| e.to_string())?;
    let rb = conn.request(&b).map_err(|e| e.to_string())?;
    let ra2 = conn.request(&a).map_err(|e| e.to_string())?;
    if bits(&ra.logits) != bits(&ra2.logits) {
        return Err("interleaved session changed another session's answer".into());
    }
    if rb.session_id != "session-b" {
        return Err("wrong session id".into());
    }
    Ok("two sessions interleaved on one connection".into())
}

fn check_malformed_recovery(conn: &mut Connection, _hs: &Handshake) -> Result<String, String> {
    conn.send_raw(b"{\"type\":\"score_request\",\"session_id\":\n")
        .map_err(|e| e.to_string())?;
    match conn.recv().map_err(|e| e.to_string())? {
        Message::Error(_) => {}
        other => return Err(format!("expected error, got {}", other.kind())),
    }
    conn.request(&request("after-error", vec![], vec![], true))
        .map_err(|e| format!("no recovery after malformed line: {e}"))?;
    Ok("malformed line answered with error, next request served".into())
}

fn check_token_bounds(conn: &mut Connection, hs: &Handshake) -> Result<String, String> {
    let size = hs.vocabulary.size();
    match conn.request(&request("bounds", vec![size], vec![], true)) {
        Err(ProtocolError::Peer(_)) => {}
        Ok(_) => return Err(format!("token {size} accepted")),
        Err(e) => return Err(e.to_string()),
    }
    conn.request(&request("bounds", vec![], vec![], true))
        .map_err(|e| e.to_string())?;
    Ok("out-of-vocabulary token rejected".into())
}

fn check_temperature(conn: &mut Connection, _hs: &Handshake) -> Result<String, String> {
    let base = request("temp", vec![], vec![1], true);
    let hot = ScoreRequest {
        temperature: 2.0,
        ..base.clone()
    };
    let a = conn.request(&base).map_err(|e| e.to_string())?;
    let b = conn.request(&hot).map_err(|e| e.to_string())?;
    for (x, y) in a.logits.iter().zip(b.logits.iter()) {
        match (x, y) {
            (Logit::Excluded, Logit::Excluded) => {}
            (Logit::Value(x), Logit::Value(y))
                if (x / 2.0 - y).abs() <= 1e-12 * x.abs().max(1.0) => {}
            _ => return Err("temperature 2 did not halve the logits".into()),
        }
    }
    Ok("logits divided by temperature".into())
}

fn check_grounding(conn: &mut Connection, hs: &Handshake) -> Result<String, String> {
    let with = conn
        .request(&request("ground", vec![1], vec![], true))
        .map_err(|e| e.to_string())?;
    let without = conn
        .request(&request("ground", vec![1], vec![], false))
        .map_err(|e| e.to_string())?;
    if !hs.capabilities.grounding && bits(&with.logits) != bits(&without.logits) {
        return Err("backend without grounding capability answered differently".into());
    }
    Ok(if hs.capabilities.grounding {
        "grounded and grounding-free requests served".into()
    } else {
        "include_grounding ignored by non-grounding backend".into()
    })
}

/// Runs every check on its own connection from `connect`.
pub fn run_conformance(
    connect: &dyn Fn() -> Result<Connection, ProtocolError>,
    golden: Option<&Transcript>,
) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let handshake = connect().and_then(|mut c| c.recv_handshake());
    let hs = match handshake {
        Ok(hs) => {
            results.push(CheckResult {
                name: "handshake",
                passed: true,
                detail: format!(
                    "version {}, {} tokens, eos {}",
                    hs.protocol_version,
                    hs.vocabulary.size(),
                    hs.vocabulary.eos_id()
                ),
            });
            hs
        }
        Err(e) => {
            results.push(CheckResult {
                name: "handshake",
                passed: false,
                detail: e.to_string(),
            });
            return results;
        }
    };

    let checks: [(&'static str, Check); 7] = [
        ("response_shape", check_shape),
        ("determinism", check_determinism),
        ("session_interleaving", check_sessions),
        ("malformed_recovery", check_malformed_recovery),
        ("token_bounds", check_token_bounds),
        ("temperature", check_temperature),
        ("grounding", check_grounding),
    ];
    for (name, check) in checks {
        let outcome = connect().map_err(|e| e.to_string()).and_then(|mut c| {
            let hs_here = c.recv_handshake().map_err(|e| e.to_string())?;
            if hs_here != hs {
                return Err("handshake differs between connections".into());
            }
            check(&mut c, &hs)
        });
        results.push(match outcome {
            Ok(detail) => CheckResult {
                name,
                passed: true,
                detail,
            },
            Err(detail) => CheckResult {
                name,
                passed: false,
                detail,
            },
        });
    }

    if let Some(transcript) = golden {
        let outcome = connect()
            .map_err(|e| e.to_string())
            .and_then(|mut c| replay(&mut c, transcript));
        results.push(match outcome {
            Ok(n) => CheckResult {
                name: "golden_transcript",
                passed: true,
                detail: format!("{n} messages matched"),
            },
            Err(detail) => CheckResult {
                name: "golden_transcript",
                passed: false,
                detail,
            },
        });
    }
    results
}
