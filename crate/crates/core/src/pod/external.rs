//! Host side of the plugin protocol: newline-delimited JSON over a child
//! process's stdin and stdout.

use super::solver::{
    feature_rows, Head, Solver, SolverError, SolverFactory, SolverRegistry, SolverSpec, TaskIo, TrainState,
};
use crate::data::SplitMix64;
use crate::sail::ast::Literal;
use crate::types::{unify, SemanticType};
use crate::value::Value;
use serde_json::{json, Value as Json};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

pub const PROTOCOL_VERSION: u64 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const PLUGIN_PATH_VAR: &str = "SAIBENCH_PLUGIN_PATH";

/// What the plugin said about itself in its `meta` reply.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginMeta {
    pub tasks: Vec<String>,
    pub input: String,
    pub output: String,
    pub grad: bool,
}

/// Finds `program` in the plugin path, then the regular search path.
pub fn resolve_plugin(program: &str) -> PathBuf {
    if program.contains('/') {
        return PathBuf::from(program);
    }
    if let Some(dirs) = std::env::var_os(PLUGIN_PATH_VAR) {
        for d in std::env::split_paths(&dirs) {
            let cand = d.join(program);
            if cand.is_file() {
                return cand;
            }
        }
    }
    PathBuf::from(program)
}

/// A live plugin process.
pub struct PluginSession {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
    /// Every line sent (`>`) and received (`<`), for transcripts.
    pub transcript: Vec<String>,
}

impl PluginSession {
    pub fn spawn(program: &Path, args: &[String], timeout: Duration) -> Result<PluginSession, SolverError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| SolverError::ProtocolError(format!("cannot start {}: {e}", program.display())))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(PluginSession { child, stdin, lines: rx, timeout, transcript: Vec::new() })
    }

    pub fn send(&mut self, msg: &Json) -> Result<(), SolverError> {
        let line = serde_json::to_string(msg).expect("json serializes");
        let w = self.stdin.as_mut().ok_or_else(|| SolverError::ProtocolError("plugin stdin closed".into()))?;
        writeln!(w, "{line}")
            .and_then(|_| w.flush())
            .map_err(|e| SolverError::ProtocolError(format!("write failed: {e}")))?;
        self.transcript.push(format!("> {line}"));
        Ok(())
    }

    /// Next reply. A `fail` reply becomes [`SolverError::Failed`].
    pub fn recv(&mut self) -> Result<Json, SolverError> {
        let line = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(SolverError::ProtocolError(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => return Err(SolverError::Timeout(self.timeout.as_millis() as u64)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(SolverError::ProtocolError("plugin closed its output".into()))
            }
        };
        self.transcript.push(format!("< {line}"));
        let v: Json =
            serde_json::from_str(&line).map_err(|e| SolverError::ProtocolError(format!("bad reply `{line}`: {e}")))?;
        if v["t"] == "fail" {
            return Err(SolverError::Failed(v["reason"].as_str().unwrap_or("unspecified").to_string()));
        }
        Ok(v)
    }

    /// Sends `msg` and expects a reply of type `want`.
    pub fn call(&mut self, msg: &Json, want: &str) -> Result<Json, SolverError> {
        self.send(msg)?;
        let r = self.recv()?;
        if r["t"] != want {
            return Err(SolverError::ProtocolError(format!("expected `{want}`, got {r}")));
        }
        Ok(r)
    }

    pub fn hello(&mut self) -> Result<PluginMeta, SolverError> {
        let m = self.call(&json!({"t": "hello", "v": PROTOCOL_VERSION}), "meta")?;
        let text = |k: &str| {
            m[k].as_str().map(str::to_string).ok_or_else(|| SolverError::ProtocolError(format!("meta lacks `{k}`")))
        };
        let tasks = m["tasks"]
            .as_array()
            .ok_or_else(|| SolverError::ProtocolError("meta lacks `tasks`".into()))?
            .iter()
            .filter_map(|t| t.as_str().map(str::to_string))
            .collect();
        Ok(PluginMeta { tasks, input: text("in")?, output: text("out")?, grad: m["grad"].as_bool().unwrap_or(false) })
    }

    /// Says goodbye and waits briefly for the process to exit.
    pub fn close(&mut self) {
        if self.stdin.is_some() {
            let _ = self.send(&json!({"t": "bye"}));
            self.stdin = None;
        }
        for _ in 0..50 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for PluginSession {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

/// Checks the advertised capabilities against what the scenario needs.
pub fn check_handshake(meta: &PluginMeta, tasks: &[String], input: &str, output: &str) -> Result<(), SolverError> {
    for t in tasks {
        if !meta.tasks.contains(t) {
            return Err(SolverError::HandshakeRejected(format!("plugin does not offer task `{t}`")));
        }
    }
    for (side, theirs, ours) in [("input", &meta.input, input), ("output", &meta.output, output)] {
        let a = SemanticType::parse(theirs)
            .map_err(|e| SolverError::HandshakeRejected(format!("bad {side} type `{theirs}`: {e}")))?;
        let b = SemanticType::parse(ours)
            .map_err(|e| SolverError::HandshakeRejected(format!("bad {side} type `{ours}`: {e}")))?;
        if unify(&a, &b).is_err() {
            return Err(SolverError::HandshakeRejected(format!("{side} type {theirs} does not match {ours}")));
        }
    }
    Ok(())
}

fn literal_json(l: &Literal) -> Json {
    serde_json::to_value(l).unwrap_or(Json::Null)
}

fn rows(v: &Json, key: &str) -> Result<Vec<Vec<f64>>, SolverError> {
    let bad = || SolverError::ProtocolError(format!("`{key}` is not a list of number lists"));
    v[key]
        .as_array()
        .ok_or_else(bad)?
        .iter()
        .map(|r| r.as_array().ok_or_else(bad)?.iter().map(|x| x.as_f64().ok_or_else(bad)).collect())
        .collect()
}

pub struct ExternalSolver {
    session: PluginSession,
    pub meta: PluginMeta,
    hp: Json,
    seed: u64,
    io: Option<TaskIo>,
}

impl ExternalSolver {
    /// Starts the plugin and completes the handshake.
    pub fn start(
        program: &Path,
        args: &[String],
        timeout: Duration,
        spec: &SolverSpec,
    ) -> Result<ExternalSolver, SolverError> {
        let mut session = PluginSession::spawn(program, args, timeout)?;
        let meta = session.hello()?;
        check_handshake(&meta, &spec.tasks, &spec.input, &spec.output)?;
        let hp: serde_json::Map<String, Json> =
            spec.params.iter().map(|(k, v)| (k.clone(), literal_json(v))).collect();
        Ok(ExternalSolver { session, meta, hp: Json::Object(hp), seed: spec.seed, io: None })
    }

    pub fn transcript(&self) -> &[String] {
        &self.session.transcript
    }
}

impl Solver for ExternalSolver {
    fn name(&self) -> &str {
        "external"
    }

    fn configure(&mut self, io: TaskIo) -> Result<(), SolverError> {
        if self.io.is_none() {
            self.session.call(&json!({"t": "init", "hp": self.hp, "seed": self.seed}), "ok")?;
        }
        self.io = Some(io);
        Ok(())
    }

    fn train_epoch(&mut self, x: &[Value], y: &[Vec<f64>], _: &mut SplitMix64) -> Result<Vec<f64>, SolverError> {
        let xs = feature_rows(x, self.io.map(|i| i.in_dim))?;
        let r = self.session.call(&json!({"t": "train", "x": xs, "y": y}), "loss")?;
        let v = r["v"].as_f64().ok_or_else(|| SolverError::ProtocolError("loss without `v`".into()))?;
        if !v.is_finite() {
            return Err(SolverError::TrainingDiverged(format!("plugin loss {v}")));
        }
        // the protocol reports one mean loss per pass
        Ok(vec![v; x.len()])
    }

    fn predict(&mut self, x: &[Value]) -> Result<Vec<Vec<f64>>, SolverError> {
        let xs = feature_rows(x, self.io.map(|i| i.in_dim))?;
        let r = self.session.call(&json!({"t": "predict", "x": xs}), "pred")?;
        let y = rows(&r, "y")?;
        if y.len() != x.len() {
            return Err(SolverError::ProtocolError(format!("{} predictions for {} inputs", y.len(), x.len())));
        }
        if let Some(Head::Classify(k) | Head::Regress(k)) = self.io.map(|i| i.head) {
            if y.iter().any(|r| r.len() != k) {
                return Err(SolverError::ProtocolError(format!("prediction rows are not {k} wide")));
            }
        }
        Ok(y)
    }

    fn input_gradient(&mut self, x: &Value) -> Result<Vec<f64>, SolverError> {
        if !self.meta.grad {
            return Err(SolverError::Unsupported("plugin".into()));
        }
        let r = self.session.call(&json!({"t": "grad", "wrt": "input", "x": [x.features()]}), "grad")?;
        rows(&r, "g")?.into_iter().next().ok_or_else(|| SolverError::ProtocolError("empty gradient".into()))
    }

    fn state(&self) -> TrainState {
        // `state()` is a snapshot accessor; saving needs a round trip, see `save`
        TrainState::empty("external")
    }

    fn restore(&mut self, state: &TrainState) -> Result<(), SolverError> {
        if let Some(b) = &state.blob {
            self.session.call(&json!({"t": "load", "b64": b}), "ok")?;
        }
        Ok(())
    }

    fn finish(&mut self) {
        self.session.close();
    }
}

impl ExternalSolver {
    pub fn save(&mut self) -> Result<TrainState, SolverError> {
        let r = self.session.call(&json!({"t": "save"}), "state")?;
        let b = r["b64"].as_str().ok_or_else(|| SolverError::ProtocolError("state without `b64`".into()))?;
        let mut s = TrainState::empty("external");
        s.blob = Some(b.to_string());
        Ok(s)
    }
}

/// Builds [`ExternalSolver`]s from a model's `plugin` meta (a command line).
pub struct ExternalFactory {
    pub timeout: Duration,
}

impl Default for ExternalFactory {
    fn default() -> ExternalFactory {
        ExternalFactory { timeout: DEFAULT_TIMEOUT }
    }
}

impl SolverFactory for ExternalFactory {
    fn name(&self) -> &'static str {
        "external"
    }
    fn build(&self, spec: &SolverSpec, _: &SolverRegistry) -> Result<Box<dyn Solver>, SolverError> {
        let cmd = spec.meta_str("plugin").ok_or_else(|| SolverError::BadInput("model has no `plugin` meta".into()))?;
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| SolverError::BadInput("empty plugin command".into()))?;
        let args: Vec<String> = parts.collect();
        let timeout = spec
            .meta
            .get("timeout_ms")
            .and_then(Literal::as_f64)
            .map(|ms| Duration::from_millis(ms as u64))
            .unwrap_or(self.timeout);
        Ok(Box::new(ExternalSolver::start(&resolve_plugin(&program), &args, timeout, spec)?))
    }
}
