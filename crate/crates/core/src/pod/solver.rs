//! The solver interface the pod drives step by step, and the registry of
//! named solver factories.

use crate::data::SplitMix64;
use crate::sail::ast::Literal;
use crate::value::Value;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("{0} does not support gradients")]
    Unsupported(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("unknown solver `{0}`")]
    UnknownSolver(String),
    #[error("state does not fit this solver: {0}")]
    BadState(String),
    #[error("plugin handshake rejected: {0}")]
    HandshakeRejected(String),
    #[error("plugin protocol error: {0}")]
    ProtocolError(String),
    #[error("plugin did not answer within {0} ms")]
    Timeout(u64),
    #[error("plugin failed: {0}")]
    Failed(String),
}

/// What the model is asked to emit for the current task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Class scores over `k` classes.
    Classify(usize),
    /// A real vector of the given width.
    Regress(usize),
}

impl Head {
    pub fn width(self) -> usize {
        match self {
            Head::Classify(k) | Head::Regress(k) => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskIo {
    pub in_dim: usize,
    pub head: Head,
}

/// Weights plus bookkeeping; the only thing that survives between tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub solver: String,
    pub weights: Vec<f64>,
    /// (tensor name, shape); shapes partition `weights` in order.
    pub shapes: Vec<(String, Vec<usize>)>,
    pub epoch: u64,
    pub rng: u64,
    /// Opaque state of an external solver.
    pub blob: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct StateWire {
    solver: String,
    shapes: Vec<(String, Vec<usize>)>,
    epoch: u64,
    rng: u64,
    /// Little-endian f64 bytes, so reloading is bit-exact.
    weights: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blob: Option<String>,
}

impl TrainState {
    pub fn empty(solver: &str) -> TrainState {
        TrainState { solver: solver.into(), weights: Vec::new(), shapes: Vec::new(), epoch: 0, rng: 0, blob: None }
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty() && self.blob.is_none()
    }

    pub fn check_finite(&self) -> Result<(), SolverError> {
        match self.weights.iter().position(|w| !w.is_finite()) {
            Some(i) => Err(SolverError::TrainingDiverged(format!("weight {i} is {}", self.weights[i]))),
            None => Ok(()),
        }
    }

    /// Slices of `weights` by tensor name.
    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        let mut at = 0;
        for (n, shape) in &self.shapes {
            let len: usize = shape.iter().product();
            if n == name {
                return Some((shape, &self.weights[at..at + len]));
            }
            at += len;
        }
        None
    }

    pub fn to_json(&self) -> String {
        let bytes: Vec<u8> = self.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
        let wire = StateWire {
            solver: self.solver.clone(),
            shapes: self.shapes.clone(),
            epoch: self.epoch,
            rng: self.rng,
            weights: B64.encode(bytes),
            blob: self.blob.clone(),
        };
        serde_json::to_string(&wire).expect("state serializes")
    }

    pub fn from_json(text: &str) -> Result<TrainState, SolverError> {
        let w: StateWire = serde_json::from_str(text).map_err(|e| SolverError::BadState(e.to_string()))?;
        let bytes = B64.decode(w.weights).map_err(|e| SolverError::BadState(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(SolverError::BadState("weight bytes not a multiple of 8".into()));
        }
        let weights: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let expect: usize = w.shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if expect != weights.len() {
            return Err(SolverError::BadState(format!("{} weights for shapes totalling {expect}", weights.len())));
        }
        Ok(TrainState { solver: w.solver, weights, shapes: w.shapes, epoch: w.epoch, rng: w.rng, blob: w.blob })
    }
}

/// A step-wise learner. The pod owns the loop: it sets the task, feeds
/// epochs, asks for predictions and gradients.
pub trait Solver: Send {
    fn name(&self) -> &str;

    /// Prepare for a task. Called before the first epoch of every training
    /// segment and before testing an untrained solver. A solver already
    /// holding weights for a different head carries what it can.
    fn configure(&mut self, io: TaskIo) -> Result<(), SolverError>;

    /// One pass over the segment. Returns the per-sample training losses
    /// observed during the pass.
    fn train_epoch(&mut self, x: &[Value], y: &[Vec<f64>], rng: &mut SplitMix64) -> Result<Vec<f64>, SolverError>;

    /// Raw outputs: class scores for a classification head, values otherwise.
    fn predict(&mut self, x: &[Value]) -> Result<Vec<Vec<f64>>, SolverError>;

    /// Gradient of the first output with respect to the input features.
    fn input_gradient(&mut self, x: &Value) -> Result<Vec<f64>, SolverError>;

    fn state(&self) -> TrainState;

    fn restore(&mut self, state: &TrainState) -> Result<(), SolverError>;

    /// Lets external solvers shut down cleanly.
    fn finish(&mut self) {}
}

/// Everything a factory may need to build a solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSpec {
    pub params: BTreeMap<String, Literal>,
    pub meta: BTreeMap<String, Literal>,
    pub seed: u64,
    /// Task kinds the problem will ask for (`classify`, `predict`, ...).
    pub tasks: Vec<String>,
    pub input: String,
    pub output: String,
}

impl SolverSpec {
    pub fn num(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).and_then(Literal::as_f64).unwrap_or(default)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Literal::as_str)
    }
}

pub trait SolverFactory: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, spec: &SolverSpec, registry: &SolverRegistry) -> Result<Box<dyn Solver>, SolverError>;
}

/// Solver kinds by name, chosen at run time from a model's `solver` meta.
#[derive(Clone, Default)]
pub struct SolverRegistry {
    factories: BTreeMap<String, Arc<dyn SolverFactory>>,
}

impl std::fmt::Debug for SolverRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl SolverRegistry {
    pub fn builtin() -> SolverRegistry {
        let mut r = SolverRegistry::default();
        r.register(Arc::new(super::linear::LinearFactory));
        r.register(Arc::new(super::mlp::MlpFactory));
        r.register(Arc::new(super::knn::KnnFactory));
        r.register(Arc::new(super::perm_sum::PermSumFactory));
        r.register(Arc::new(super::external::ExternalFactory::default()));
        r
    }

    pub fn register(&mut self, f: Arc<dyn SolverFactory>) {
        self.factories.insert(f.name().to_string(), f);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, spec: &SolverSpec) -> Result<Box<dyn Solver>, SolverError> {
        let f = self.factories.get(name).ok_or_else(|| SolverError::UnknownSolver(name.into()))?;
        f.build(spec, self)
    }
}

/// Features of every value, checked for a common width.
pub fn feature_rows(x: &[Value], width: Option<usize>) -> Result<Vec<Vec<f64>>, SolverError> {
    x.iter()
        .map(|v| {
            let f = v.features();
            match width {
                Some(w) if f.len() != w => {
                    Err(SolverError::BadInput(format!("expected {w} features, got {}", f.len())))
                }
                _ => Ok(f),
            }
        })
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-sample loss the pod reports: 0/1 error for classes, mean squared
/// error otherwise.
pub fn sample_loss(head: Head, pred: &[f64], target: &[f64]) -> f64 {
    match head {
        Head::Classify(_) => (argmax(pred) != argmax(target)) as u8 as f64,
        Head::Regress(_) => {
            let n = target.len().max(1) as f64;
            pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n
        }
    }
}
