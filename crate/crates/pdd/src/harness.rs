//! Candidate execution harness and language-neutral wire protocol.
//!
//! Candidates are ordinary subprocesses speaking newline-delimited JSON
//! frames over stdin/stdout. Each frame carries a `type` tag:
//!
//! * `hello` — one handshake frame, candidate → harness, sent on start
//! * `request` — harness → candidate: `{"type":"request","seq":n,"body":{..}}`
//! * `response` — candidate → harness: `{"type":"response","seq":n,"body":{..}}`
//! * `error` — candidate → harness: `{"type":"error","seq":n,"kind":"..","message":".."}`
//! * `effect` — candidate → harness: `{"type":"effect","kind":"..","target":".."}`
//! * `metrics` — candidate → harness: `{"type":"metrics","declared_duration_ms":n,"peak_memory_mb":n}`
//!
//! Side effects are mediated, not intercepted: a candidate declares its
//! effects as frames, and the harness records them in the trace the
//! validators and runtime verifiers consume. Effects arriving after the
//! final response but within the grace window are flagged `post_response`.


use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::canon::{ContentDigest, Doc};
use crate::time::{SystemClock, UtcTime};
use crate::Clock;

pub const DEFAULT_HANDSHAKE_TIMEOUT_MS: u64 = 5_000;
pub const DEFAULT_INVOKE_DEADLINE_MS: u64 = 5_000;
pub const DEFAULT_GRACE_MS: u64 = 200;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("candidate failed to launch: {detail}")]
    LaunchFailure { detail: String },
    #[error("candidate sent no handshake within {waited_ms} ms")]
    HandshakeTimeout { waited_ms: u64 },
    /// A malformed wire message. The candidate is disqualified.
    #[error("framing error: {detail}")]
    FramingError { detail: String },
    #[error("candidate unresponsive: {detail}")]
    CandidateUnresponsive { detail: String },
    #[error("invalid candidate manifest {file}: {detail}")]
    Manifest { file: String, detail: String },
    #[error("harness I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Candidate identity
// ---------------------------------------------------------------------------

/// A candidate implementation: how to launch it and what bytes it is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRef {
    pub artifact_id: String,
    pub artifact_digest: ContentDigest,
    pub launch_command: Vec<String>,
    pub language: String,
    pub runtime: String,
}

impl CandidateRef {
    /// Build a reference for an executable artifact, digesting its bytes.
    pub fn for_artifact(
        artifact_id: &str,
        artifact: &Path,
        args: &[String],
        language: &str,
        runtime: &str,
    ) -> std::io::Result<Self> {
        let bytes = std::fs::read(artifact)?;
        let mut launch_command = vec![artifact.to_string_lossy().into_owned()];
        launch_command.extend_from_slice(args);
        Ok(Self {
            artifact_id: artifact_id.to_string(),
            artifact_digest: ContentDigest::of_bytes(&bytes),
            launch_command,
            language: language.to_string(),
            runtime: runtime.to_string(),
        })
    }
}

/// Parse a candidate manifest file:
/// `{artifact_id, launch_command, language, runtime, artifact?}`.
///
/// `artifact` defaults to the first launch-command element; the digest is
/// recomputed from that file's bytes. Relative paths resolve against the
/// manifest's directory.
pub fn load_candidate_manifest(path: &Path) -> Result<CandidateRef, HarnessError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Raw {
        artifact_id: String,
        launch_command: Vec<String>,
        language: String,
        runtime: String,
        #[serde(default)]
        artifact: Option<String>,
    }
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Manifest {
        file: file.clone(),
        detail: e.to_string(),
    })?;
    let raw: Raw = serde_yaml::from_str(&text).map_err(|e| HarnessError::Manifest {
        file: file.clone(),
        detail: e.to_string(),
    })?;
    if raw.launch_command.is_empty() {
        return Err(HarnessError::Manifest {
            file,
            detail: "launch_command must not be empty".to_string(),
        });
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |s: &str| {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let artifact_path = resolve(raw.artifact.as_deref().unwrap_or(&raw.launch_command[0]));
    let bytes = std::fs::read(&artifact_path).map_err(|e| HarnessError::Manifest {
        file: file.clone(),
        detail: format!("cannot read artifact {}: {e}", artifact_path.display()),
    })?;
    let mut launch_command = raw.launch_command;
    launch_command[0] = resolve(&launch_command[0]).to_string_lossy().into_owned();
    Ok(CandidateRef {
        artifact_id: raw.artifact_id,
        artifact_digest: ContentDigest::of_bytes(&bytes),
        launch_command,
        language: raw.language,
        runtime: raw.runtime,
    })
}

// ---------------------------------------------------------------------------
// Trace model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    NetworkCall,
    FsRead,
    FsWrite,
    DependencyUse,
    SecretAccess,
    BackgroundTask,
}

impl EffectKind {
    /// Effect kinds the idempotence checks treat as state-mutating.
    pub fn is_state_mutating(self) -> bool {
        matches!(
            self,
            EffectKind::NetworkCall | EffectKind::FsWrite | EffectKind::BackgroundTask
        )
    }
}

/// One declared side effect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectEvent {
    pub kind: EffectKind,
    pub target: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub post_response: bool,
}

/// The candidate's reply to one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Response(Doc),
    Error { kind: String, message: String },
    Timeout,
}

impl Outcome {
    pub fn response(&self) -> Option<&Doc> {
        match self {
            Outcome::Response(doc) => Some(doc),
            _ => None,
        }
    }

    pub fn error_kind(&self) -> Option<&str> {
        match self {
            Outcome::Error { kind, .. } => Some(kind),
            _ => None,
        }
    }
}

/// One request/outcome exchange with its declared effects and measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub seq: u64,
    pub request: Doc,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub effects: Vec<EffectEvent>,
    pub latency_ms: u64,
    #[serde(default)]
    pub peak_memory_mb: u64,
}

/// The observation record for a session: every exchange in send order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTrace {
    pub invocations: Vec<InvocationRecord>,
    pub started_at: UtcTime,
    pub ended_at: UtcTime,
}

impl EffectTrace {
    pub fn check(&self) -> Result<(), String> {
        let mut last = 0u64;
        for inv in &self.invocations {
            if inv.seq <= last {
                return Err(format!(
                    "invocation sequence must strictly increase: {} after {last}",
                    inv.seq
                ));
            }
            last = inv.seq;
        }
        if self.started_at > self.ended_at {
            return Err("trace started after it ended".to_string());
        }
        Ok(())
    }

    /// Concatenate traces, renumbering invocations into one send order.
    pub fn merged(traces: Vec<EffectTrace>) -> EffectTrace {
        let started_at = traces.iter().map(|t| t.started_at).min();
        let ended_at = traces.iter().map(|t| t.ended_at).max();
        let mut invocations = Vec::new();
        let mut seq = 0u64;
        for trace in traces {
            for mut inv in trace.invocations {
                seq += 1;
                inv.seq = seq;
                invocations.push(inv);
            }
        }
        let now = SystemClock.now();
        EffectTrace {
            invocations,
            started_at: started_at.unwrap_or(now),
            ended_at: ended_at.unwrap_or(now),
        }
    }

    pub fn load(path: &Path) -> Result<EffectTrace, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let trace: EffectTrace =
            serde_json::from_str(&text).map_err(|e| HarnessError::FramingError {
                detail: format!("invalid trace file {}: {e}", path.display()),
            })?;
        trace.check().map_err(|detail| HarnessError::FramingError { detail })?;
        Ok(trace)
    }
}

// ---------------------------------------------------------------------------
// Harness policy and sessions
// ---------------------------------------------------------------------------

/// How latency is measured.
///
/// Synthetic mode also pins the trace's start/end timestamps to the epoch,
/// so a replayed run reproduces the trace byte for byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClockMode {
    /// Wall time, floored at the candidate-declared duration.
    #[default]
    Wall,
    /// Candidate-declared durations only; deterministic for replay.
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct HarnessPolicy {
    pub handshake_timeout_ms: u64,
    pub default_deadline_ms: u64,
    pub grace_ms: u64,
    pub clock_mode: ClockMode,
}

impl Default for HarnessPolicy {
    fn default() -> Self {
        Self {
            handshake_timeout_ms: DEFAULT_HANDSHAKE_TIMEOUT_MS,
            default_deadline_ms: DEFAULT_INVOKE_DEADLINE_MS,
            grace_ms: DEFAULT_GRACE_MS,
            clock_mode: ClockMode::Wall,
        }
    }
}

impl HarnessPolicy {
    pub fn synthetic() -> Self {
        Self {
            clock_mode: ClockMode::Synthetic,
            ..Self::default()
        }
    }
}

/// A live exchange channel with one candidate.
pub trait Session: Send {
    fn invoke(&mut self, request: &Doc, deadline_ms: u64) -> Result<InvocationRecord, HarnessError>;

    /// Drain the grace window and return the complete ordered trace,
    /// closing the session.
    fn collect_trace(&mut self) -> Result<EffectTrace, HarnessError>;
}

/// Opens fresh sessions against one candidate.
pub trait SessionFactory: Sync {
    fn open(&self) -> Result<Box<dyn Session>, HarnessError>;
}

/// Launches a candidate subprocess per session.
#[derive(Debug, Clone)]
pub struct ProcessCandidate {
    pub candidate: CandidateRef,
    pub policy: HarnessPolicy,
}

impl ProcessCandidate {
    pub fn new(candidate: CandidateRef, policy: HarnessPolicy) -> Self {
        Self { candidate, policy }
    }
}

impl SessionFactory for ProcessCandidate {
    fn open(&self) -> Result<Box<dyn Session>, HarnessError> {
        Ok(Box::new(spawn(&self.candidate, self.policy.clone())?))
    }
}

#[derive(Debug)]
enum Frame {
    Hello,
    Response { seq: u64, body: Doc },
    Error { seq: u64, kind: String, message: String },
    Effect { kind: EffectKind, target: String },
    Metrics { declared_duration_ms: Option<u64>, peak_memory_mb: Option<u64> },
}

fn parse_frame(line: &str) -> Result<Frame, String> {
    let doc: Doc = serde_json::from_str(line).map_err(|e| format!("not a document: {e}"))?;
    let kind = doc
        .get("type")
        .and_then(Doc::as_str)
        .ok_or_else(|| "frame has no type tag".to_string())?;
    match kind {
        "hello" => Ok(Frame::Hello),
        "response" => Ok(Frame::Response {
            seq: doc.get("seq").and_then(Doc::as_u64).ok_or("response frame has no seq")?,
            body: doc.get("body").cloned().ok_or("response frame has no body")?,
        }),
        "error" => Ok(Frame::Error {
            seq: doc.get("seq").and_then(Doc::as_u64).ok_or("error frame has no seq")?,
            kind: doc
                .get("kind")
                .and_then(Doc::as_str)
                .ok_or("error frame has no kind")?
                .to_string(),
            message: doc
                .get("message")
                .and_then(Doc::as_str)
                .unwrap_or_default()
                .to_string(),
        }),
        "effect" => {
            let effect_kind: EffectKind = serde_json::from_value(
                doc.get("kind").cloned().ok_or("effect frame has no kind")?,
            )
            .map_err(|e| format!("unknown effect kind: {e}"))?;
            Ok(Frame::Effect {
                kind: effect_kind,
                target: doc
                    .get("target")
                    .and_then(Doc::as_str)
                    .ok_or("effect frame has no target")?
                    .to_string(),
            })
        }
        "metrics" => Ok(Frame::Metrics {
            declared_duration_ms: doc.get("declared_duration_ms").and_then(Doc::as_u64),
            peak_memory_mb: doc.get("peak_memory_mb").and_then(Doc::as_u64),
        }),
        other => Err(format!("unknown frame type {other:?}")),
    }
}

/// A session backed by a child process.
#[derive(Debug)]
pub struct ProcessSession {
    child: Child,
    stdin: ChildStdin,
    frames: Receiver<Result<Frame, String>>,
    policy: HarnessPolicy,
    next_seq: u64,
    invocations: Vec<InvocationRecord>,
    started_at: UtcTime,
    closed: bool,
}

/// Spawn a candidate, open the wire channel, and wait for the handshake.
pub fn spawn(candidate: &CandidateRef, policy: HarnessPolicy) -> Result<ProcessSession, HarnessError> {
    let (program, args) = candidate
        .launch_command
        .split_first()
        .ok_or_else(|| HarnessError::LaunchFailure {
            detail: "empty launch command".to_string(),
        })?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| HarnessError::LaunchFailure {
            detail: format!("{program}: {e}"),
        })?;
    let stdin = child.stdin.take().ok_or_else(|| HarnessError::LaunchFailure {
        detail: "candidate stdin unavailable".to_string(),
    })?;
    let stdout = child.stdout.take().ok_or_else(|| HarnessError::LaunchFailure {
        detail: "candidate stdout unavailable".to_string(),
    })?;

    let (tx, rx): (Sender<Result<Frame, String>>, _) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let reader = BufReader::new(stdout);
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            let frame = parse_frame(&line).map_err(|e| format!("{e} in line {line:?}"));
            if tx.send(frame).is_err() {
                break;
            }
        }
    });

    let started_at = match policy.clock_mode {
        ClockMode::Wall => SystemClock.now(),
        ClockMode::Synthetic => UtcTime::from_unix_seconds(0),
    };
    let mut session = ProcessSession {
        child,
        stdin,
        frames: rx,
        policy,
        next_seq: 0,
        invocations: Vec::new(),
        started_at,
        closed: false,
    };

    match session
        .frames
        .recv_timeout(Duration::from_millis(session.policy.handshake_timeout_ms))
    {
        Ok(Ok(Frame::Hello)) => Ok(session),
        Ok(Ok(_)) => {
            session.shutdown();
            Err(HarnessError::FramingError {
                detail: "first frame was not a hello handshake".to_string(),
            })
        }
        Ok(Err(detail)) => {
            session.shutdown();
            Err(HarnessError::FramingError { detail })
        }
        Err(RecvTimeoutError::Timeout) => {
            let waited_ms = session.policy.handshake_timeout_ms;
            session.shutdown();
            Err(HarnessError::HandshakeTimeout { waited_ms })
        }
        Err(RecvTimeoutError::Disconnected) => {
            let status = session.child.wait().ok();
            session.closed = true;
            Err(HarnessError::LaunchFailure {
                detail: match status {
                    Some(s) => format!("candidate exited before handshake with {s}"),
                    None => "candidate exited before handshake".to_string(),
                },
            })
        }
    }
}

impl ProcessSession {
    fn shutdown(&mut self) {
        if !self.closed {
            let _ = self.child.kill();
            let _ = self.child.wait();
            self.closed = true;
        }
    }
}

impl Session for ProcessSession {
    fn invoke(&mut self, request: &Doc, deadline_ms: u64) -> Result<InvocationRecord, HarnessError> {
        self.next_seq += 1;
        let seq = self.next_seq;
        let frame = serde_json::json!({"type": "request", "seq": seq, "body": request});
        let line = serde_json::to_string(&frame).expect("request frame serializes");
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush())
            .map_err(|e| HarnessError::CandidateUnresponsive {
                detail: format!("write failed: {e}"),
            })?;

        let start = Instant::now();
        let deadline = Duration::from_millis(deadline_ms);
        let mut effects: Vec<EffectEvent> = Vec::new();
        let mut declared_duration_ms: Option<u64> = None;
        let mut peak_memory_mb: u64 = 0;

        let outcome = loop {
            let remaining = deadline.saturating_sub(start.elapsed());
            if remaining.is_zero() {
                break Outcome::Timeout;
            }
            match self.frames.recv_timeout(remaining) {
                Ok(Ok(Frame::Effect { kind, target })) => effects.push(EffectEvent {
                    kind,
                    target,
                    post_response: false,
                }),
                Ok(Ok(Frame::Metrics {
                    declared_duration_ms: d,
                    peak_memory_mb: m,
                })) => {
                    if let Some(d) = d {
                        declared_duration_ms = Some(d);
                    }
                    if let Some(m) = m {
                        peak_memory_mb = peak_memory_mb.max(m);
                    }
                }
                Ok(Ok(Frame::Response { seq: got, body })) if got == seq => {
                    break Outcome::Response(body)
                }
                Ok(Ok(Frame::Error { seq: got, kind, message })) if got == seq => {
                    break Outcome::Error { kind, message }
                }
                Ok(Ok(Frame::Response { seq: got, .. } | Frame::Error { seq: got, .. })) => {
                    return Err(HarnessError::FramingError {
                        detail: format!("outcome for seq {got} while awaiting {seq}"),
                    })
                }
                Ok(Ok(Frame::Hello)) => {
                    return Err(HarnessError::FramingError {
                        detail: "unexpected second hello".to_string(),
                    })
                }
                Ok(Err(detail)) => return Err(HarnessError::FramingError { detail }),
                Err(RecvTimeoutError::Timeout) => break Outcome::Timeout,
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(HarnessError::CandidateUnresponsive {
                        detail: "candidate closed its output mid-invocation".to_string(),
                    })
                }
            }
        };

        let latency_ms = if matches!(outcome, Outcome::Timeout) {
            deadline_ms
        } else {
            match self.policy.clock_mode {
                ClockMode::Synthetic => declared_duration_ms.unwrap_or(0),
                ClockMode::Wall => {
                    let measured = start.elapsed().as_millis() as u64;
                    measured.max(declared_duration_ms.unwrap_or(0))
                }
            }
        };

        let record = InvocationRecord {
            seq,
            request: request.clone(),
            outcome,
            effects,
            latency_ms,
            peak_memory_mb,
        };
        self.invocations.push(record.clone());
        Ok(record)
    }

    fn collect_trace(&mut self) -> Result<EffectTrace, HarnessError> {
        // Grace window: late effects become post_response on the final
        // invocation.
        let grace = Duration::from_millis(self.policy.grace_ms);
        let start = Instant::now();
        loop {
            let remaining = grace.saturating_sub(start.elapsed());
            if remaining.is_zero() {
                break;
            }
            match self.frames.recv_timeout(remaining) {
                Ok(Ok(Frame::Effect { kind, target })) => {
                    if let Some(last) = self.invocations.last_mut() {
                        last.effects.push(EffectEvent {
                            kind,
                            target,
                            post_response: true,
                        });
                    }
                }
                Ok(_) => {}
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        self.shutdown();
        let ended_at = match self.policy.clock_mode {
            ClockMode::Wall => SystemClock.now(),
            ClockMode::Synthetic => self.started_at,
        };
        let trace = EffectTrace {
            invocations: std::mem::take(&mut self.invocations),
            started_at: self.started_at,
            ended_at,
        };
        trace.check().map_err(|detail| HarnessError::FramingError { detail })?;
        Ok(trace)
    }
}

impl Drop for ProcessSession {
    fn drop(&mut self) {
        self.shutdown();
    }
}

// ---------------------------------------------------------------------------
// In-memory sessions (validation plumbing and tests)
// ---------------------------------------------------------------------------

/// A session over a pure function, used by tests and the protocol-respecting
/// client harness. Latency and memory are taken from the handler's declared
/// metrics.
pub struct FnSession<F> {
    handler: F,
    next_seq: u64,
    invocations: Vec<InvocationRecord>,
    started_at: UtcTime,
}

/// What an in-memory handler returns for one request.
pub struct FnReply {
    pub outcome: Outcome,
    pub effects: Vec<EffectEvent>,
    pub declared_duration_ms: u64,
    pub peak_memory_mb: u64,
}

impl<F> FnSession<F>
where
    F: FnMut(&Doc, u64) -> FnReply + Send,
{
    pub fn new(handler: F) -> Self {
        Self {
            handler,
            next_seq: 0,
            invocations: Vec::new(),
            started_at: SystemClock.now(),
        }
    }
}

impl<F> Session for FnSession<F>
where
    F: FnMut(&Doc, u64) -> FnReply + Send,
{
    fn invoke(&mut self, request: &Doc, _deadline_ms: u64) -> Result<InvocationRecord, HarnessError> {
        self.next_seq += 1;
        let reply = (self.handler)(request, self.next_seq);
        let record = InvocationRecord {
            seq: self.next_seq,
            request: request.clone(),
            outcome: reply.outcome,
            effects: reply.effects,
            latency_ms: reply.declared_duration_ms,
            peak_memory_mb: reply.peak_memory_mb,
        };
        self.invocations.push(record.clone());
        Ok(record)
    }

    fn collect_trace(&mut self) -> Result<EffectTrace, HarnessError> {
        Ok(EffectTrace {
            invocations: std::mem::take(&mut self.invocations),
            started_at: self.started_at,
            ended_at: SystemClock.now(),
        })
    }
}

// Effect targets use kind-specific syntax; this helper documents it.
/// `host:port` for network calls, a path for filesystem effects, a bare
/// name otherwise.
pub fn effect_target_is_well_formed(kind: EffectKind, target: &str) -> bool {
    match kind {
        EffectKind::NetworkCall => target.split_once(':').map(|(h, p)| {
            !h.is_empty() && p.chars().all(|c| c.is_ascii_digit()) && !p.is_empty()
        }) == Some(true),
        EffectKind::FsRead | EffectKind::FsWrite => target.starts_with('/'),
        _ => !target.is_empty(),
    }
}
