use super::solver::{sample_loss, Head, Solver, SolverError, SolverRegistry, SolverSpec, TaskIo};
use crate::data::md::{rmsd, velocity_verlet};
use crate::data::{derive_seed, GeneratedData, GeneratorRegistry, HarmonicSystem, SplitMix64};
use crate::eval::{dry_run, full_run, EvalContext, FullRunError, ModuleMetadata, PrimitiveEvent};
use crate::metrics::{MeasurementRecord, MetricError, MetricRegistry, MetricState, Observation, Phase};
use crate::orchestrator::{self, HardwareDescriptor, OrchestrationError, Profile, DEFAULT_CALIBRATION};
use crate::planner::{Binding, ConcreteScenario};
use crate::repo::RepoIndex;
use crate::types::{apply_chain, pullback_chain, ConversionError, KernelRegistry};
use crate::value::{Atom, Value};
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

pub const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PodError {
    #[error("provisioning failed: {0}")]
    Provision(String),
    #[error(transparent)]
    Run(#[from] FullRunError),
    #[error(transparent)]
    Conversion(#[from] ConversionError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Cost(#[from] OrchestrationError),
    #[error("fixture: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Time charged from the cost model, so reruns are bit-identical.
    #[default]
    Simulated,
    Native,
}

impl FromStr for ClockMode {
    type Err = String;
    fn from_str(s: &str) -> Result<ClockMode, String> {
        match s {
            "simulated" => Ok(ClockMode::Simulated),
            "native" => Ok(ClockMode::Native),
            other => Err(format!("unknown clock mode `{other}` (simulated or native)")),
        }
    }
}

enum Clock {
    Native(Instant),
    Simulated(f64),
}

impl Clock {
    fn new(mode: ClockMode) -> Clock {
        match mode {
            ClockMode::Native => Clock::Native(Instant::now()),
            ClockMode::Simulated => Clock::Simulated(0.0),
        }
    }

    fn charge(&mut self, ms: f64) {
        if let Clock::Simulated(t) = self {
            *t += ms;
        }
    }

    fn elapsed_ms(&self) -> f64 {
        match self {
            Clock::Native(t) => t.elapsed().as_secs_f64() * 1e3,
            Clock::Simulated(t) => *t,
        }
    }
}

/// What a pod needs besides the scenario itself.
#[derive(Clone)]
pub struct PodEnv {
    pub seed: u64,
    pub mode: ClockMode,
    pub calibration: f64,
    pub solvers: SolverRegistry,
    pub metrics: MetricRegistry,
}

impl PodEnv {
    pub fn new(seed: u64) -> PodEnv {
        PodEnv {
            seed,
            mode: ClockMode::Simulated,
            calibration: DEFAULT_CALIBRATION,
            solvers: SolverRegistry::builtin(),
            metrics: MetricRegistry::builtin(),
        }
    }
}

/// Result of provisioning: member metadata with parameters bound.
#[derive(Debug, Clone)]
pub struct Provisioned {
    pub problem: ModuleMetadata,
    pub model: ModuleMetadata,
    pub hardware: ModuleMetadata,
    pub software: ModuleMetadata,
    pub tag: String,
}

fn run_member(repo: &RepoIndex, b: &Binding, stack: &[ModuleMetadata], seed: u64) -> Result<ModuleMetadata, PodError> {
    let rec = repo.by_id(&b.id).ok_or_else(|| PodError::Provision(format!("module {} is gone", b.name)))?;
    let ctx = EvalContext { stack: stack.to_vec(), params: b.params.clone(), seed };
    let (meta, _) = dry_run(&rec.decl, &ctx).map_err(|e| PodError::Provision(format!("{}: {e}", b.name)))?;
    if meta.failed {
        return Err(PodError::Provision(format!(
            "{} {} refuses: {}",
            rec.kind,
            b.name,
            meta.reason.as_deref().unwrap_or("no reason given")
        )));
    }
    Ok(meta)
}

/// Replays the tuple with concrete parameters and reads the environment tag
/// from the software member.
pub fn provision(repo: &RepoIndex, s: &ConcreteScenario, seed: u64) -> Result<Provisioned, PodError> {
    let mut stack = Vec::new();
    for b in [&s.problem, &s.model, &s.hardware, &s.software] {
        let m = run_member(repo, b, &stack, seed)?;
        stack.push(m);
    }
    let software = stack.pop().expect("four members");
    let hardware = stack.pop().expect("four members");
    let model = stack.pop().expect("four members");
    let problem = stack.pop().expect("four members");
    let tag = software.tag.clone().unwrap_or_else(|| software.name.clone());
    let accel = hardware.meta_bool("accelerator").unwrap_or(false);
    if tag.ends_with("-gpu") && !accel {
        return Err(PodError::Provision(format!("tag {tag} needs an accelerator, {} has none", hardware.name)));
    }
    Ok(Provisioned { problem, model, hardware, software, tag })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestOutcome {
    pub predictions: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct PodOutput {
    pub sid: String,
    pub tag: String,
    pub records: Vec<MeasurementRecord>,
    pub epochs_run: u64,
    pub test: Option<TestOutcome>,
    /// Clock reading when the pod finished.
    pub elapsed_ms: f64,
}

struct Segment {
    prim: String,
    xs: Vec<Value>,
    ys: Vec<Value>,
}

/// Consecutive training events of the same primitive.
fn segments(events: &[PrimitiveEvent]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for e in events.iter().filter(|e| e.object() == "Train") {
        let (Some(x), Some(y)) = (e.args.first(), e.args.get(1)) else { continue };
        match out.last_mut() {
            Some(s) if s.prim == e.prim => {
                s.xs.push(x.clone());
                s.ys.push(y.clone());
            }
            _ => out.push(Segment { prim: e.prim.clone(), xs: vec![x.clone()], ys: vec![y.clone()] }),
        }
    }
    out
}

fn head_of(v: &Value) -> Head {
    match v {
        Value::Label { k, .. } => Head::Classify(*k),
        other => Head::Regress(other.features().len()),
    }
}

struct Metrics<'a> {
    bindings: &'a [Binding],
    metas: Vec<&'a std::collections::BTreeMap<String, crate::sail::ast::Literal>>,
    builtins: Vec<String>,
    registry: &'a MetricRegistry,
}

impl Metrics<'_> {
    fn fresh(&self) -> Result<Vec<Box<dyn MetricState>>, MetricError> {
        self.builtins.iter().zip(&self.metas).map(|(b, m)| self.registry.create(b, m)).collect()
    }
}

struct Pod<'a> {
    s: &'a ConcreteScenario,
    env: &'a PodEnv,
    kernels: &'a KernelRegistry,
    clock: Clock,
    train_ms: f64,
    test_ms: f64,
    records: Vec<MeasurementRecord>,
}

impl Pod<'_> {
    fn emit(&mut self, phase: Phase, it: u64, metric: &str, v: f64) {
        self.records.push(MeasurementRecord {
            sid: self.s.sid.clone(),
            phase,
            it,
            metric: metric.to_string(),
            v,
            wall_ms: self.clock.elapsed_ms().max(0.0) as u64,
            seed: self.env.seed,
        });
    }

    fn emit_all(&mut self, m: &Metrics, states: Vec<Box<dyn MetricState>>, phase: Phase, it: u64) {
        for (b, st) in m.bindings.iter().zip(states) {
            if let Some(v) = st.finalize() {
                self.emit(phase, it, &b.name, v);
            }
        }
    }

    fn inputs(&self, xs: &[Value]) -> Result<Vec<Value>, ConversionError> {
        xs.iter().map(|x| apply_chain(self.kernels, &self.s.compat.chain_in, x)).collect()
    }

    /// Problem targets in model space; values the output chain does not
    /// accept (reconstruction targets, say) pass through untouched.
    fn targets(&self, ys: &[Value]) -> Result<Vec<Value>, ConversionError> {
        let chain = &self.s.compat.chain_out;
        ys.iter()
            .map(|y| match chain.first() {
                Some(step) if y.conforms(&step.src) => apply_chain(self.kernels, chain, y),
                _ => Ok(y.clone()),
            })
            .collect()
    }
}

fn check_losses(losses: &[f64], what: &str) -> Result<(), SolverError> {
    match losses.iter().position(|l| !l.is_finite()) {
        Some(i) => Err(SolverError::TrainingDiverged(format!("{what}: sample {i} has loss {}", losses[i]))),
        None => Ok(()),
    }
}

fn atoms_of(v: &Value) -> Result<Vec<Atom>, PodError> {
    let items = v.as_list().ok_or_else(|| PodError::Fixture(format!("expected a list of atoms, got {}", v.type_name())))?;
    items
        .iter()
        .map(|a| match a {
            Value::Atom(a) => Ok(*a),
            other => Err(PodError::Fixture(format!("expected an atom, got {}", other.type_name()))),
        })
        .collect()
}

fn atom_list(atoms: &[Atom]) -> Value {
    Value::List(atoms.iter().copied().map(Value::Atom).collect())
}

fn scalar(v: Option<&Value>) -> Option<f64> {
    match v {
        Some(Value::Scalar(x)) => Some(*x),
        _ => None,
    }
}

/// Forces the trained model implies at `pos`: minus the gradient of its
/// energy with respect to positions. Falls back to central differences
/// when the solver has no gradient.
fn model_forces(
    solver: &mut dyn Solver,
    kernels: &KernelRegistry,
    chain: &crate::types::Chain,
    template: &[Atom],
    pos: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>, PodError> {
    let place = |p: &[[f64; 3]]| {
        let atoms: Vec<Atom> = template.iter().zip(p).map(|(a, q)| Atom { pos: *q, ..*a }).collect();
        atom_list(&atoms)
    };
    let raw = place(pos);
    let x = apply_chain(kernels, chain, &raw)?;
    match solver.input_gradient(&x) {
        Ok(g) => {
            let g = pullback_chain(kernels, chain, &raw, &g)?;
            let per = g.len() / template.len().max(1);
            if per < 4 {
                return Err(PodError::Fixture(format!("{per} gradient features per atom, need position entries")));
            }
            Ok((0..template.len()).map(|i| [-g[i * per + 1], -g[i * per + 2], -g[i * per + 3]]).collect())
        }
        Err(SolverError::Unsupported(_)) => {
            let mut energy = |p: &[[f64; 3]]| -> Result<f64, PodError> {
                let x = apply_chain(kernels, chain, &place(p))?;
                let out = solver.predict(std::slice::from_ref(&x))?;
                out.first().and_then(|r| r.first()).copied().ok_or_else(|| PodError::Fixture("empty prediction".into()))
            };
            let mut f = vec![[0.0; 3]; pos.len()];
            for i in 0..pos.len() {
                for a in 0..3 {
                    let mut up = pos.to_vec();
                    let mut down = pos.to_vec();
                    up[i][a] += FD_EPS;
                    down[i][a] -= FD_EPS;
                    f[i][a] = -(energy(&up)? - energy(&down)?) / (2.0 * FD_EPS);
                }
            }
            Ok(f)
        }
        Err(e) => Err(e.into()),
    }
}

fn simulator_for<'r>(problem: &ModuleMetadata, generators: &'r GeneratorRegistry) -> Option<&'r HarmonicSystem> {
    problem
        .sources
        .iter()
        .filter(|s| s.feeds.iter().any(|f| f.starts_with("Gradient.")))
        .find_map(|s| generators.get(&s.generator)?.simulator())
}

fn solver_spec(s: &ConcreteScenario, p: &Provisioned, seed: u64) -> SolverSpec {
    SolverSpec {
        params: s.model.params.clone(),
        meta: p.model.meta.clone(),
        seed: derive_seed(&["solver", &s.sid, &seed.to_string()]),
        // plugins name learning tasks in lower case; Compare is evaluation, not a task
        tasks: p.problem.tasks.iter().filter(|t| *t != "Compare").map(|t| t.to_lowercase()).collect(),
        input: s.compat.input.to_string(),
        output: s.compat.output.to_string(),
    }
}

/// Simulated cost per sample, milliseconds, for training and inference.
fn sample_costs(profile: &Profile, hw: &HardwareDescriptor, calibration: f64) -> (f64, f64) {
    let per = profile.forward_flops / hw.peak_flops * calibration * 1e3;
    (if profile.trainable { per } else { 0.0 }, per)
}

/// Runs one scenario end to end and returns its measurement records.
pub fn run_scenario(repo: &RepoIndex, s: &ConcreteScenario, env: &PodEnv) -> Result<PodOutput, PodError> {
    let prov = provision(repo, s, env.seed)?;
    let kernels = repo.converters.kernels();
    let profile = orchestrator::profile(repo, s, env.seed)?;
    let hw = HardwareDescriptor::from_meta(&prov.hardware);
    let (train_ms, test_ms) = sample_costs(&profile, &hw, env.calibration);

    let metrics = {
        let mut metas = Vec::new();
        let mut builtins = Vec::new();
        for b in &s.metrics {
            let rec = repo.by_id(&b.id).ok_or_else(|| PodError::Provision(format!("metric {} is gone", b.name)))?;
            let builtin = rec.decl.meta_str("builtin").unwrap_or(&b.name).to_string();
            metas.push(&rec.decl.meta);
            builtins.push(builtin);
        }
        Metrics { bindings: &s.metrics, metas, builtins, registry: &env.metrics }
    };
    metrics.fresh()?;

    let problem_rec = repo.by_id(&s.problem.id).ok_or_else(|| PodError::Provision("problem is gone".into()))?;
    let data = GeneratedData::new(&s.problem.name, env.seed);
    let ctx = EvalContext { stack: Vec::new(), params: s.problem.params.clone(), seed: env.seed };
    let events = full_run(&problem_rec.decl, &ctx, &data)?;

    let spec = solver_spec(s, &prov, env.seed);
    let solver_name = prov.model.meta_str("solver").unwrap_or(&prov.model.name).to_string();
    let mut solver = env.solvers.build(&solver_name, &spec)?;
    let mut pod = Pod { s, env, kernels, clock: Clock::new(env.mode), train_ms, test_ms, records: Vec::new() };
    let result = drive(&mut pod, solver.as_mut(), &metrics, &events, &prov, s, env.seed);
    solver.finish();
    let (epochs_run, test) = result?;
    let elapsed_ms = pod.clock.elapsed_ms();
    Ok(PodOutput { sid: s.sid.clone(), tag: prov.tag, records: pod.records, epochs_run, test, elapsed_ms })
}

fn drive(
    pod: &mut Pod,
    solver: &mut dyn Solver,
    metrics: &Metrics,
    events: &[PrimitiveEvent],
    prov: &Provisioned,
    s: &ConcreteScenario,
    seed: u64,
) -> Result<(u64, Option<TestOutcome>), PodError> {
    let epochs = s.model.params.get("epochs").and_then(|l| l.as_f64()).unwrap_or(1.0).max(0.0) as u64;
    let mut rng = SplitMix64::new(derive_seed(&["shuffle", &s.sid, &seed.to_string()]));
    let mut configured: Option<TaskIo> = None;
    let mut it = 0u64;

    for seg in segments(events) {
        let xs = pod.inputs(&seg.xs)?;
        let ys = pod.targets(&seg.ys)?;
        let head = head_of(&ys[0]);
        let io = TaskIo { in_dim: xs[0].features().len(), head };
        solver.configure(io)?;
        configured = Some(io);
        let rows: Vec<Vec<f64>> = ys.iter().map(Value::features).collect();
        for _ in 0..epochs {
            let losses = solver.train_epoch(&xs, &rows, &mut rng)?;
            check_losses(&losses, &seg.prim)?;
            let mut states = metrics.fresh()?;
            for l in &losses {
                pod.clock.charge(pod.train_ms);
                let obs = Observation { loss: Some(*l), elapsed_ms: pod.clock.elapsed_ms() };
                states.iter_mut().for_each(|m| m.step(&obs));
            }
            pod.emit_all(metrics, states, Phase::Train, it);
            it += 1;
        }
    }

    let compares: Vec<&PrimitiveEvent> = events.iter().filter(|e| e.prim == "Test.Compare").collect();
    let mut test = None;
    if !compares.is_empty() {
        let raw_x: Vec<Value> = compares.iter().map(|e| e.args[0].clone()).collect();
        let raw_y: Vec<Value> = compares.iter().map(|e| e.args[1].clone()).collect();
        let xs = pod.inputs(&raw_x)?;
        let ys = pod.targets(&raw_y)?;
        let head = head_of(&ys[0]);
        let io = TaskIo { in_dim: xs[0].features().len(), head };
        if configured != Some(io) {
            solver.configure(io)?;
        }
        let preds = solver.predict(&xs)?;
        let targets: Vec<Vec<f64>> = ys.iter().map(Value::features).collect();
        let losses: Vec<f64> = preds.iter().zip(&targets).map(|(p, t)| sample_loss(head, p, t)).collect();
        check_losses(&losses, "test predictions")?;
        let mut states = metrics.fresh()?;
        for l in &losses {
            pod.clock.charge(pod.test_ms);
            let obs = Observation { loss: Some(*l), elapsed_ms: pod.clock.elapsed_ms() };
            states.iter_mut().for_each(|m| m.step(&obs));
        }
        pod.emit_all(metrics, states, Phase::Test, 0);
        test = Some(TestOutcome { predictions: preds, targets, head });
    }

    let fixtures: Vec<&PrimitiveEvent> = events.iter().filter(|e| e.prim == "Gradient.Verlet").collect();
    if !fixtures.is_empty() {
        let generators = GeneratorRegistry::builtin();
        let sys = simulator_for(&prov.problem, &generators)
            .ok_or_else(|| PodError::Fixture("no reference simulator behind the fixture source".into()))?
            .clone();
        for (i, e) in fixtures.iter().enumerate() {
            let atoms = atoms_of(&e.args[0])?;
            let steps = scalar(e.args.get(1)).unwrap_or(10.0).max(0.0) as usize;
            let h = scalar(e.args.get(2)).unwrap_or(0.01);
            let pos: Vec<[f64; 3]> = atoms.iter().map(|a| a.pos).collect();
            let vel: Vec<[f64; 3]> = atoms.iter().map(|a| a.vel).collect();
            let reference = velocity_verlet::<PodError>(&pos, &vel, sys.mass, h, steps, |p| Ok(sys.forces(p)))?;
            let chain = &s.compat.chain_in;
            let kernels = pod.kernels;
            let model = velocity_verlet(&pos, &vel, sys.mass, h, steps, |p| {
                model_forces(solver, kernels, chain, &atoms, p)
            })?;
            for v in model.pos.iter().chain(&model.vel).flatten().flatten() {
                if !v.is_finite() {
                    return Err(SolverError::TrainingDiverged(format!("fixture {i} trajectory is not finite")).into());
                }
            }
            pod.clock.charge(pod.test_ms * (steps + 1) as f64);
            pod.emit(Phase::Test, i as u64, "fixture_pos_rmsd", rmsd(&reference.pos, &model.pos));
            pod.emit(Phase::Test, i as u64, "fixture_vel_rmsd", rmsd(&reference.vel, &model.vel));
        }
    }
    Ok((it, test))
}
