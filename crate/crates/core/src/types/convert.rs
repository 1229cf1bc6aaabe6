//! Converter graph: nodes are types, edges are converters. Chains are found
//! by breadth-first search; an edge `A -> B` also applies element-wise under
//! any number of `List` layers.

use super::{unify, Dim, SemanticType};
use crate::value::Value;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_MAX_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConverterEdge {
    pub id: String,
    pub name: String,
    pub src: SemanticType,
    pub dst: SemanticType,
    /// Builtin kernel implementing the edge, when there is one.
    pub kernel: Option<String>,
}

/// One hop of a resolved chain, instantiated at concrete types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionStep {
    pub edge: usize,
    pub name: String,
    pub kernel: Option<String>,
    /// Number of `List` layers the edge is mapped over.
    pub lift: usize,
    pub src: SemanticType,
    pub dst: SemanticType,
}

pub type Chain = Vec<ConversionStep>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no conversion from {src} to {dst} within {max_len} steps")]
pub struct NoPath {
    pub src: String,
    pub dst: String,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConversionError {
    #[error("converter `{step}` has no kernel")]
    NoKernel { step: String },
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("converter `{step}` expects {expected}, got {actual}")]
    IllTyped { step: String, expected: String, actual: String },
    #[error("kernel `{kernel}` rejected value: {reason}")]
    Rejected { kernel: String, reason: String },
}

/// A builtin converter implementation.
pub trait ConverterKernel: Send + Sync {
    fn name(&self) -> &'static str;
    /// Output type for a given input type, or None if the kernel cannot take it.
    fn output_type(&self, input: &SemanticType) -> Option<SemanticType>;
    fn apply(&self, v: &Value) -> Result<Value, ConversionError>;
    /// Maps a gradient over the output's flat features back onto the input's.
    fn pullback(&self, input: &Value, grad_out: &[f64]) -> Result<Vec<f64>, ConversionError>;
}

fn rejected(kernel: &str, reason: impl Into<String>) -> ConversionError {
    ConversionError::Rejected { kernel: kernel.into(), reason: reason.into() }
}

struct Flatten;

impl ConverterKernel for Flatten {
    fn name(&self) -> &'static str {
        "flatten"
    }
    fn output_type(&self, input: &SemanticType) -> Option<SemanticType> {
        match input {
            SemanticType::Image { h, w, c } => {
                let n = match (h, w, c) {
                    (Dim::Fixed(a), Dim::Fixed(b), Dim::Fixed(d)) => Dim::Fixed(a * b * d),
                    _ => Dim::Wild,
                };
                Some(SemanticType::Tensor { shape: vec![n] })
            }
            _ => None,
        }
    }
    fn apply(&self, v: &Value) -> Result<Value, ConversionError> {
        match v {
            Value::Image { data, .. } => Ok(Value::vector(data.clone())),
            other => Err(rejected("flatten", format!("not an image: {}", other.type_name()))),
        }
    }
    fn pullback(&self, input: &Value, grad_out: &[f64]) -> Result<Vec<f64>, ConversionError> {
        // rows are copied unchanged, so the Jacobian is the identity
        if input.features().len() != grad_out.len() {
            return Err(rejected("flatten", "gradient length mismatch"));
        }
        Ok(grad_out.to_vec())
    }
}

struct AtomEmbed;

impl ConverterKernel for AtomEmbed {
    fn name(&self) -> &'static str {
        "atom_embed"
    }
    fn output_type(&self, input: &SemanticType) -> Option<SemanticType> {
        matches!(input, SemanticType::Atom).then(|| SemanticType::vector(8))
    }
    fn apply(&self, v: &Value) -> Result<Value, ConversionError> {
        match v {
            Value::Atom(a) => {
                let mut d = vec![a.z];
                d.extend_from_slice(&a.pos);
                d.extend_from_slice(&a.vel);
                d.push(0.0);
                Ok(Value::vector(d))
            }
            other => Err(rejected("atom_embed", format!("not an atom: {}", other.type_name()))),
        }
    }
    fn pullback(&self, _input: &Value, grad_out: &[f64]) -> Result<Vec<f64>, ConversionError> {
        if grad_out.len() != 8 {
            return Err(rejected("atom_embed", "gradient length mismatch"));
        }
        Ok(grad_out[..7].to_vec())
    }
}

struct Concat;

impl ConverterKernel for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn output_type(&self, input: &SemanticType) -> Option<SemanticType> {
        match input {
            SemanticType::List { elem } if matches!(**elem, SemanticType::Tensor { .. }) => {
                Some(SemanticType::tensor(&[None]))
            }
            _ => None,
        }
    }
    fn apply(&self, v: &Value) -> Result<Value, ConversionError> {
        let items = v.as_list().ok_or_else(|| rejected("concat", "not a list"))?;
        let mut out = Vec::new();
        for it in items {
            match it {
                Value::Tensor { data, .. } => out.extend_from_slice(data),
                other => return Err(rejected("concat", format!("element is {}", other.type_name()))),
            }
        }
        Ok(Value::vector(out))
    }
    fn pullback(&self, input: &Value, grad_out: &[f64]) -> Result<Vec<f64>, ConversionError> {
        if input.features().len() != grad_out.len() {
            return Err(rejected("concat", "gradient length mismatch"));
        }
        Ok(grad_out.to_vec())
    }
}

/// Name-keyed kernel registry.
#[derive(Clone, Default)]
pub struct KernelRegistry {
    kernels: BTreeMap<String, Arc<dyn ConverterKernel>>,
}

impl std::fmt::Debug for KernelRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.kernels.keys()).finish()
    }
}

impl KernelRegistry {
    pub fn empty() -> KernelRegistry {
        KernelRegistry::default()
    }

    pub fn builtin() -> KernelRegistry {
        let mut r = KernelRegistry::default();
        r.register(Arc::new(Flatten));
        r.register(Arc::new(AtomEmbed));
        r.register(Arc::new(Concat));
        r
    }

    pub fn register(&mut self, k: Arc<dyn ConverterKernel>) {
        self.kernels.insert(k.name().to_string(), k);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn ConverterKernel>> {
        self.kernels.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.kernels.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConverterGraph {
    edges: Vec<ConverterEdge>,
    kernels: KernelRegistry,
}

fn strip_lists(t: &SemanticType, depth: usize) -> Option<&SemanticType> {
    let mut cur = t;
    for _ in 0..depth {
        match cur {
            SemanticType::List { elem } => cur = elem,
            _ => return None,
        }
    }
    Some(cur)
}

fn wrap_lists(mut t: SemanticType, depth: usize) -> SemanticType {
    for _ in 0..depth {
        t = SemanticType::list(t);
    }
    t
}

fn list_depth(t: &SemanticType) -> usize {
    match t {
        SemanticType::List { elem } => 1 + list_depth(elem),
        _ => 0,
    }
}

impl ConverterGraph {
    pub fn new(kernels: KernelRegistry) -> ConverterGraph {
        ConverterGraph { edges: Vec::new(), kernels }
    }

    pub fn kernels(&self) -> &KernelRegistry {
        &self.kernels
    }

    /// Appends an edge; registration order is the tie-break order.
    pub fn add_edge(&mut self, edge: ConverterEdge) -> usize {
        self.edges.push(edge);
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[ConverterEdge] {
        &self.edges
    }

    /// Successors of `t`, in (edge index, lift depth) order.
    fn successors(&self, t: &SemanticType) -> Vec<ConversionStep> {
        let mut out = Vec::new();
        let depth = list_depth(t);
        for (i, e) in self.edges.iter().enumerate() {
            for lift in 0..=depth {
                let inner = strip_lists(t, lift).expect("depth bounded by list_depth");
                let Ok(sub) = unify(inner, &e.src) else { continue };
                let produced = match e.kernel.as_deref().and_then(|k| self.kernels.get(k)) {
                    Some(k) => match k.output_type(&sub.unified) {
                        Some(o) => o,
                        None => continue,
                    },
                    None => e.dst.clone(),
                };
                out.push(ConversionStep {
                    edge: i,
                    name: e.name.clone(),
                    kernel: e.kernel.clone(),
                    lift,
                    src: t.clone(),
                    dst: wrap_lists(produced, lift),
                });
            }
        }
        out
    }

    /// Shortest chain from `src` to something unifying with `dst`; equal
    /// lengths are broken by the smallest (edge, lift) sequence.
    pub fn find_conversion(
        &self,
        src: &SemanticType,
        dst: &SemanticType,
        max_len: usize,
    ) -> Result<Chain, NoPath> {
        if unify(src, dst).is_ok() {
            return Ok(Vec::new());
        }
        let no_path = || NoPath { src: src.to_string(), dst: dst.to_string(), max_len };
        // each queue entry carries its own path; graphs are tiny and max_len small
        let mut seen: HashSet<SemanticType> = HashSet::from([src.clone()]);
        let mut queue: VecDeque<(SemanticType, Chain)> = VecDeque::from([(src.clone(), Vec::new())]);
        while let Some((t, path)) = queue.pop_front() {
            if path.len() >= max_len {
                continue;
            }
            for step in self.successors(&t) {
                if !seen.insert(step.dst.clone()) {
                    continue;
                }
                let mut next = path.clone();
                let reached = step.dst.clone();
                next.push(step);
                if unify(&reached, dst).is_ok() {
                    return Ok(next);
                }
                queue.push_back((reached, next));
            }
        }
        Err(no_path())
    }
}

fn apply_lifted(
    k: &dyn ConverterKernel,
    lift: usize,
    v: &Value,
    step: &str,
) -> Result<Value, ConversionError> {
    if lift == 0 {
        return k.apply(v);
    }
    let items = v.as_list().ok_or_else(|| ConversionError::IllTyped {
        step: step.into(),
        expected: "List".into(),
        actual: v.type_name(),
    })?;
    Ok(Value::List(items.iter().map(|x| apply_lifted(k, lift - 1, x, step)).collect::<Result<_, _>>()?))
}

fn pullback_lifted(
    k: &dyn ConverterKernel,
    lift: usize,
    input: &Value,
    grad: &[f64],
) -> Result<Vec<f64>, ConversionError> {
    if lift == 0 {
        return k.pullback(input, grad);
    }
    let items = input.as_list().ok_or_else(|| rejected(k.name(), "not a list"))?;
    let mut out = Vec::new();
    let mut off = 0;
    for it in items {
        let width = apply_lifted(k, lift - 1, it, k.name())?.features().len();
        let g = grad.get(off..off + width).ok_or_else(|| rejected(k.name(), "gradient too short"))?;
        out.extend(pullback_lifted(k, lift - 1, it, g)?);
        off += width;
    }
    if off != grad.len() {
        return Err(rejected(k.name(), "gradient length mismatch"));
    }
    Ok(out)
}

fn kernel_for<'a>(
    kernels: &'a KernelRegistry,
    step: &ConversionStep,
) -> Result<&'a Arc<dyn ConverterKernel>, ConversionError> {
    let name = step.kernel.as_deref().ok_or_else(|| ConversionError::NoKernel { step: step.name.clone() })?;
    kernels.get(name).ok_or_else(|| ConversionError::UnknownKernel(name.into()))
}

/// Runs a value through every step of `chain`, returning all intermediates
/// (the input first, the final output last).
pub fn apply_chain_trace(
    kernels: &KernelRegistry,
    chain: &[ConversionStep],
    value: &Value,
) -> Result<Vec<Value>, ConversionError> {
    let mut trace = vec![value.clone()];
    for step in chain {
        let cur = trace.last().expect("trace starts non-empty");
        if !cur.conforms(&step.src) {
            return Err(ConversionError::IllTyped {
                step: step.name.clone(),
                expected: step.src.to_string(),
                actual: cur.type_name(),
            });
        }
        let k = kernel_for(kernels, step)?;
        let next = apply_lifted(k.as_ref(), step.lift, cur, &step.name)?;
        trace.push(next);
    }
    Ok(trace)
}

pub fn apply_chain(
    kernels: &KernelRegistry,
    chain: &[ConversionStep],
    value: &Value,
) -> Result<Value, ConversionError> {
    Ok(apply_chain_trace(kernels, chain, value)?.pop().expect("non-empty trace"))
}

/// Gradient with respect to the input's features, given the gradient with
/// respect to the chain output's features.
pub fn pullback_chain(
    kernels: &KernelRegistry,
    chain: &[ConversionStep],
    value: &Value,
    grad_out: &[f64],
) -> Result<Vec<f64>, ConversionError> {
    let trace = apply_chain_trace(kernels, chain, value)?;
    let mut g = grad_out.to_vec();
    for (i, step) in chain.iter().enumerate().rev() {
        let k = kernel_for(kernels, step)?;
        g = pullback_lifted(k.as_ref(), step.lift, &trace[i], &g)?;
    }
    Ok(g)
}
