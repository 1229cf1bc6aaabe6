//! Cost estimates, redundancy pruning and lane scheduling.

use crate::data::{DataBindings, GeneratedData};
use crate::data::SourceCall;
use crate::eval::tape::{Arg, TapeGraph};
use crate::eval::{dry_run, EvalContext, ModuleMetadata};
use crate::planner::ConcreteScenario;
use crate::repo::RepoIndex;
use crate::sail::ast::Literal;
use crate::sail::ModuleKind;
use crate::types::{apply_chain, KernelRegistry};
use crate::value::Value;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const DEFAULT_CALIBRATION: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OrchestrationError {
    #[error("scenario {sid} runs on `{hardware}`, which has no lanes")]
    NoCompatibleHardware { sid: String, hardware: String },
    #[error("cannot profile {sid}: {reason}")]
    Profile { sid: String, reason: String },
}

/// Sizes of one scenario, from dry runs with its hyperparameters bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub train_n: usize,
    pub test_n: usize,
    pub epochs: usize,
    /// Model-side feature width and output width.
    pub in_dim: usize,
    pub out_dim: usize,
    /// Raw input elements across every train and test sample.
    pub input_elements: usize,
    pub forward_flops: f64,
    /// Whether the model has weights to fit.
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub est_flops: f64,
    pub est_seconds: f64,
}

/// Multiply-adds per sample of a model tape, counted as 2 per weight.
/// Returns the count and whether any node carries weights.
pub fn forward_flops(
    tape: &TapeGraph,
    in_dim: usize,
    out_dim: usize,
    list_len: usize,
    params: &BTreeMap<String, Literal>,
) -> (f64, bool) {
    let mut dims: BTreeMap<usize, usize> = BTreeMap::new();
    let mut flops = 0.0;
    let mut weighted = false;
    let dim_of = |dims: &BTreeMap<usize, usize>, a: Option<&Arg>| match a {
        Some(Arg::Node(i)) => dims.get(i).copied().unwrap_or(in_dim),
        _ => in_dim,
    };
    let width = params.get("width").and_then(Literal::as_f64).unwrap_or(16.0) as usize;
    for n in &tape.nodes {
        if n.object() != "Model" {
            continue;
        }
        let d = dim_of(&dims, n.args.first());
        let out = match n.method() {
            "input" => in_dim,
            "Dense" => {
                let units = match n.args.get(1) {
                    Some(Arg::Lit(l)) => l.as_f64().unwrap_or(1.0) as usize,
                    _ => width,
                };
                flops += 2.0 * (d * units) as f64;
                weighted = true;
                units
            }
            "Tanh" | "Softmax" => {
                flops += d as f64;
                d
            }
            "Sub" => {
                // one small tanh network per element over an 8-wide embedding
                flops += (list_len * (2 * 8 * width + width + 2 * width)) as f64;
                weighted = true;
                list_len
            }
            "Sum" => {
                flops += d as f64;
                1
            }
            "Predict" | "Classify" => {
                if d != out_dim {
                    flops += 2.0 * (d * out_dim) as f64;
                }
                out_dim
            }
            _ => d,
        };
        dims.insert(n.id, out);
    }
    (flops, weighted)
}

/// Training passes plus one inference per test sample.
pub fn est_flops(forward: f64, trainable: bool, train_n: usize, epochs: usize, test_n: usize) -> f64 {
    let train = if trainable { forward * (train_n * epochs) as f64 } else { 0.0 };
    train + forward * test_n as f64
}

pub fn estimate_cost(p: &Profile, peak_flops: f64, calibration: f64) -> CostEstimate {
    let f = est_flops(p.forward_flops, p.trainable, p.train_n, p.epochs, p.test_n);
    CostEstimate { est_flops: f, est_seconds: f / peak_flops * calibration }
}

fn member_meta(
    repo: &RepoIndex,
    id: &str,
    params: &BTreeMap<String, Literal>,
    stack: &[ModuleMetadata],
    seed: u64,
) -> Result<(ModuleMetadata, TapeGraph), String> {
    let rec = repo.by_id(id).ok_or_else(|| format!("module {id} is not in the repository"))?;
    let ctx = EvalContext { stack: stack.to_vec(), params: params.clone(), seed };
    let (meta, tape) = dry_run(&rec.decl, &ctx).map_err(|e| e.to_string())?;
    if meta.failed {
        return Err(format!("{} fails: {}", rec.name, meta.reason.unwrap_or_default()));
    }
    Ok((meta, tape))
}

/// One generated element of the problem's first source, as the model sees it.
fn sample_element(
    problem: &ModuleMetadata,
    s: &ConcreteScenario,
    kernels: &KernelRegistry,
    seed: u64,
) -> Result<Option<(Value, Value, Value)>, String> {
    let Some(src) = problem.sources.first() else { return Ok(None) };
    let data = GeneratedData::new(&s.problem.name, seed);
    let call = SourceCall {
        generator: src.generator.clone(),
        n: 1,
        split: src.split.clone(),
        input: src.input.clone(),
        output: src.output.clone(),
    };
    let el = data.bind(&call).map_err(|e| e.to_string())?;
    let Some(Value::Tuple(xy)) = el.into_iter().next() else { return Ok(None) };
    let x = apply_chain(kernels, &s.compat.chain_in, &xy[0]).map_err(|e| e.to_string())?;
    Ok(Some((xy[0].clone(), x, xy[1].clone())))
}

pub fn profile(repo: &RepoIndex, s: &ConcreteScenario, seed: u64) -> Result<Profile, OrchestrationError> {
    let err = |reason: String| OrchestrationError::Profile { sid: s.sid.clone(), reason };
    let (pm, _) = member_meta(repo, &s.problem.id, &s.problem.params, &[], seed).map_err(err)?;
    let (_, mtape) = member_meta(repo, &s.model.id, &s.model.params, std::slice::from_ref(&pm), seed).map_err(err)?;
    let mut train_n = 0;
    let mut test_n = 0;
    for src in &pm.sources {
        let n = src.n.unwrap_or(0);
        if src.feeds.iter().any(|f| f.starts_with("Train.")) {
            train_n += n;
        }
        if src.feeds.iter().any(|f| f.starts_with("Test.") || f.starts_with("Gradient.")) {
            test_n += n;
        }
    }
    let kernels = repo.converters.kernels();
    let (raw_len, in_dim, list_len) = match sample_element(&pm, s, kernels, seed).map_err(err)? {
        Some((raw, x, _)) => (raw.features().len(), x.features().len(), raw.as_list().map_or(1, <[Value]>::len)),
        None => (0, 0, 1),
    };
    let out_dim = s.compat.output.element_count().unwrap_or(1) as usize;
    let (fwd, trainable) = forward_flops(&mtape, in_dim, out_dim, list_len, &s.model.params);
    let epochs = s.model.params.get("epochs").and_then(Literal::as_f64).unwrap_or(1.0) as usize;
    Ok(Profile {
        train_n,
        test_n,
        epochs: if train_n == 0 { 0 } else { epochs },
        in_dim,
        out_dim,
        input_elements: raw_len * (train_n + test_n),
        forward_flops: fwd,
        trainable,
    })
}

/// ⌊log2 n⌋, with 0 for n ≤ 1.
pub fn size_bucket(elements: usize) -> u32 {
    if elements <= 1 {
        0
    } else {
        usize::BITS - 1 - elements.leading_zeros()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EquivalenceKey {
    /// Same program on the same machine at a similar size runs at a similar rate.
    Throughput { model: String, software: String, hardware: String, bucket: u32 },
    /// Precision does not depend on where the program runs.
    Precision { model: String, model_params: String, problem: String, problem_params: String },
}

pub fn keys(s: &ConcreteScenario, p: &Profile) -> [EquivalenceKey; 2] {
    let js = |m: &BTreeMap<String, Literal>| serde_json::to_string(m).expect("params serialize");
    [
        EquivalenceKey::Throughput {
            model: s.model.id.clone(),
            software: s.software.id.clone(),
            hardware: s.hardware.id.clone(),
            bucket: size_bucket(p.input_elements),
        },
        EquivalenceKey::Precision {
            model: s.model.id.clone(),
            model_params: js(&s.model.params),
            problem: s.problem.id.clone(),
            problem_params: js(&s.problem.params),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub sid: String,
    pub reason: String,
}

/// Greedy cover: keeps an item iff it is the first to carry one of its keys.
pub fn prune<K: Ord + Clone>(items: &[(String, Vec<K>)]) -> (Vec<String>, Vec<Dropped>) {
    let mut seen: BTreeSet<K> = BTreeSet::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (sid, ks) in items {
        let fresh: Vec<&K> = ks.iter().filter(|k| !seen.contains(*k)).collect();
        if fresh.is_empty() {
            dropped.push(Dropped { sid: sid.clone(), reason: "every equivalence key already covered".into() });
        } else {
            seen.extend(ks.iter().cloned());
            kept.push(sid.clone());
        }
    }
    (kept, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub sid: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub hardware: String,
    pub index: usize,
    pub tasks: Vec<Slot>,
}

impl Lane {
    pub fn end(&self) -> f64 {
        self.tasks.last().map_or(0.0, |t| t.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lanes: Vec<Lane>,
    pub makespan: f64,
}

impl Schedule {
    /// Scenario ids in lane order, each lane front to back.
    pub fn order(&self) -> Vec<&str> {
        self.lanes.iter().flat_map(|l| l.tasks.iter().map(|t| t.sid.as_str())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub sid: String,
    pub hardware: String,
    pub est_seconds: f64,
}

/// Longest processing time first onto the least-loaded compatible lane;
/// equal durations go in scenario-id order, equal loads to the lower lane.
pub fn schedule(tasks: &[Task], lanes_per_hardware: &BTreeMap<String, usize>) -> Result<Schedule, OrchestrationError> {
    let mut lanes: Vec<Lane> = lanes_per_hardware
        .iter()
        .flat_map(|(h, n)| (0..*n).map(move |i| Lane { hardware: h.clone(), index: i, tasks: Vec::new() }))
        .collect();
    let mut order: Vec<&Task> = tasks.iter().collect();
    order.sort_by(|a, b| b.est_seconds.total_cmp(&a.est_seconds).then_with(|| a.sid.cmp(&b.sid)));
    for t in order {
        let best = lanes
            .iter()
            .enumerate()
            .filter(|(_, l)| l.hardware == t.hardware)
            .min_by(|(i, a), (j, b)| (a.end() + t.est_seconds).total_cmp(&(b.end() + t.est_seconds)).then(i.cmp(j)))
            .map(|(i, _)| i)
            .ok_or_else(|| OrchestrationError::NoCompatibleHardware { sid: t.sid.clone(), hardware: t.hardware.clone() })?;
        let start = lanes[best].end();
        lanes[best].tasks.push(Slot { sid: t.sid.clone(), start, end: start + t.est_seconds });
    }
    let makespan = lanes.iter().map(Lane::end).fold(0.0, f64::max);
    Ok(Schedule { lanes, makespan })
}

/// Hardware descriptor fields the scheduler and cost model read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareDescriptor {
    pub name: String,
    pub peak_flops: f64,
    pub mem_bytes: f64,
    pub accelerator: bool,
    pub lanes: usize,
}

impl HardwareDescriptor {
    pub fn from_meta(meta: &ModuleMetadata) -> HardwareDescriptor {
        HardwareDescriptor {
            name: meta.name.clone(),
            peak_flops: meta.meta_f64("peak_flops").filter(|p| *p > 0.0).unwrap_or(1e9),
            mem_bytes: meta.meta_f64("mem_bytes").unwrap_or(0.0),
            accelerator: meta.meta_bool("accelerator").unwrap_or(false),
            lanes: meta.meta_f64("lanes").map_or(1, |l| l.max(0.0) as usize),
        }
    }
}

pub fn hardware_table(repo: &RepoIndex) -> BTreeMap<String, HardwareDescriptor> {
    repo.of_kind(ModuleKind::Hardware)
        .filter_map(|r| r.metadata.as_ref())
        .map(|m| (m.name.clone(), HardwareDescriptor::from_meta(m)))
        .collect()
}
