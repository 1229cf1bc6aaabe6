//! The five stages and the files that pass between them.

use crate::metrics::{from_jsonl, to_jsonl, MeasurementRecord, Phase};
use crate::orchestrator::{
    self, estimate_cost, hardware_table, keys, prune, schedule, CostEstimate, Dropped, EquivalenceKey,
    OrchestrationError, Profile, Schedule, Task,
};
use crate::planner::{plan, ConcreteScenario, Filters, PlanError, PlanOptions, Skip, SkipReport};
use crate::pod::{run_scenario, ClockMode, PodEnv};
use crate::ranking::{build_leaderboard, ranking_def, Leaderboard, RankingError, Row};
use crate::repo::{RepoError, RepoIndex};
use crate::sail::ModuleKind;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const ARTIFACT_VERSION: u64 = 1;

pub const REPO_FILE: &str = "repo.json";
pub const PLAN_FILE: &str = "plan.json";
pub const SCHEDULE_FILE: &str = "schedule.json";
pub const SKIPS_FILE: &str = "skips.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const FAILURES_FILE: &str = "failures.json";
pub const LEADERBOARD_FILE: &str = "leaderboard.json";
pub const REPORT_FILE: &str = "report.md";
pub const CSV_FILE: &str = "report.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact {0}; run the previous stage first")]
    MissingArtifact(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
    #[error("{path}: artifact version {found:?}, expected {ARTIFACT_VERSION}")]
    VersionMismatch { path: String, found: Option<u64> },
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Orchestration(#[from] OrchestrationError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error("jobs must be at least 1")]
    NoJobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub max_chain: usize,
    pub filters: Vec<String>,
    pub mode: ClockMode,
    pub calibration: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 1,
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
            max_chain: crate::types::convert::DEFAULT_MAX_LEN,
            filters: Vec::new(),
            mode: ClockMode::Simulated,
            calibration: orchestrator::DEFAULT_CALIBRATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedScenario {
    pub label: String,
    #[serde(flatten)]
    pub scenario: ConcreteScenario,
    pub profile: Profile,
    pub cost: CostEstimate,
    pub keys: Vec<EquivalenceKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub v: u64,
    pub seed: u64,
    pub max_chain: usize,
    pub filters: Vec<String>,
    pub tuples: usize,
    /// Scenarios that survived pruning, in plan order.
    pub scenarios: Vec<PlannedScenario>,
}

impl PlanFile {
    pub fn get(&self, sid: &str) -> Option<&PlannedScenario> {
        self.scenarios.iter().find(|p| p.scenario.sid == sid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedScenario {
    pub sid: String,
    pub label: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipsFile {
    pub v: u64,
    pub skips: Vec<Skip>,
    pub pruned: Vec<PrunedScenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub v: u64,
    #[serde(flatten)]
    pub schedule: Schedule,
    /// Estimated seconds by scenario id.
    pub est_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub sid: String,
    pub label: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailuresFile {
    pub v: u64,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardFile {
    pub v: u64,
    pub leaderboards: Vec<Leaderboard>,
}

pub struct PlanOutput {
    pub plan: PlanFile,
    pub schedule: ScheduleFile,
    pub skips: SkipsFile,
}

/// Discovery, concretization, profiling, pruning and scheduling.
pub fn stage_plan(repo: &RepoIndex, cfg: &RunConfig) -> Result<PlanOutput, PipelineError> {
    let filters = Filters::parse(&cfg.filters)?;
    let view = filters.apply(repo);
    let opts = PlanOptions { seed: cfg.seed, max_chain: cfg.max_chain };
    let raw = plan(&view, &opts)?;
    let mut skips: SkipReport = raw.skips;
    let hw = hardware_table(repo);

    let mut profiled = Vec::new();
    for s in raw.scenarios {
        match orchestrator::profile(repo, &s, cfg.seed) {
            Ok(p) => profiled.push((s, p)),
            Err(e) => skips.add(s.label(), format!("profile: {e}"), s.sid.clone()),
        }
    }
    let keyed: Vec<(String, Vec<EquivalenceKey>)> =
        profiled.iter().map(|(s, p)| (s.sid.clone(), keys(s, p).to_vec())).collect();
    let (kept, dropped) = prune(&keyed);
    let label_of: BTreeMap<&str, String> = profiled.iter().map(|(s, _)| (s.sid.as_str(), s.label())).collect();
    let pruned = dropped
        .into_iter()
        .map(|Dropped { sid, reason }| PrunedScenario { label: label_of[sid.as_str()].clone(), sid, reason })
        .collect();

    let mut scenarios = Vec::new();
    for ((s, p), (_, ks)) in profiled.into_iter().zip(keyed) {
        if !kept.contains(&s.sid) {
            continue;
        }
        let peak = hw.get(&s.hardware.name).map_or(1e9, |h| h.peak_flops);
        let cost = estimate_cost(&p, peak, cfg.calibration);
        scenarios.push(PlannedScenario { label: s.label(), scenario: s, profile: p, cost, keys: ks });
    }

    let tasks: Vec<Task> = scenarios
        .iter()
        .map(|p| Task {
            sid: p.scenario.sid.clone(),
            hardware: p.scenario.hardware.name.clone(),
            est_seconds: p.cost.est_seconds,
        })
        .collect();
    let lanes: BTreeMap<String, usize> = hw.values().map(|h| (h.name.clone(), h.lanes)).collect();
    let sched = schedule(&tasks, &lanes)?;
    let est_seconds = tasks.iter().map(|t| (t.sid.clone(), t.est_seconds)).collect();

    Ok(PlanOutput {
        plan: PlanFile {
            v: ARTIFACT_VERSION,
            seed: cfg.seed,
            max_chain: cfg.max_chain,
            filters: cfg.filters.clone(),
            tuples: raw.tuples,
            scenarios,
        },
        schedule: ScheduleFile { v: ARTIFACT_VERSION, schedule: sched, est_seconds },
        skips: SkipsFile { v: ARTIFACT_VERSION, skips: skips.skips, pruned },
    })
}

pub struct RunOutput {
    pub records: Vec<MeasurementRecord>,
    pub failures: Vec<Failure>,
}

/// Runs every scheduled scenario on a pool of `jobs` workers. Output order
/// follows the schedule, whatever order the pods finish in.
pub fn stage_run(
    repo: &RepoIndex,
    plan: &PlanFile,
    sched: &ScheduleFile,
    cfg: &RunConfig,
) -> Result<RunOutput, PipelineError> {
    if cfg.jobs == 0 {
        return Err(PipelineError::NoJobs);
    }
    let mut env = PodEnv::new(plan.seed);
    env.mode = cfg.mode;
    env.calibration = cfg.calibration;
    let order: Vec<&PlannedScenario> = sched.schedule.order().into_iter().filter_map(|sid| plan.get(sid)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| PipelineError::Malformed { path: "thread pool".into(), message: e.to_string() })?;
    let outcomes: Vec<_> = pool.install(|| {
        order.par_iter().map(|p| (p, run_scenario(repo, &p.scenario, &env))).collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (p, out) in outcomes {
        match out {
            Ok(o) => records.extend(o.records),
            Err(e) => failures.push(Failure { sid: p.scenario.sid.clone(), label: p.label.clone(), error: e.to_string() }),
        }
    }
    Ok(RunOutput { records, failures })
}

/// Test-phase values at the final evaluation, keyed by metric.
fn final_values(records: &[MeasurementRecord]) -> BTreeMap<&str, BTreeMap<String, f64>> {
    let mut out: BTreeMap<&str, BTreeMap<String, f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.phase == Phase::Test && r.it == 0) {
        out.entry(&r.sid).or_default().insert(r.metric.clone(), r.v);
    }
    out
}

/// One leaderboard per ranking module; within it, scenarios only compete
/// against others on the same problem instance.
pub fn stage_rank(
    repo: &RepoIndex,
    plan: &PlanFile,
    records: &[MeasurementRecord],
) -> Result<LeaderboardFile, PipelineError> {
    let values = final_values(records);
    let mut by_ranking: BTreeMap<&str, BTreeMap<String, Vec<Row>>> = BTreeMap::new();
    for p in &plan.scenarios {
        let Some(v) = values.get(p.scenario.sid.as_str()) else { continue };
        for r in &p.scenario.rankings {
            by_ranking
                .entry(r.id.as_str())
                .or_default()
                .entry(p.scenario.problem.label())
                .or_default()
                .push(Row { sid: p.scenario.sid.clone(), values: v.clone() });
        }
    }
    let mut leaderboards = Vec::new();
    for rec in repo.of_kind(ModuleKind::Ranking) {
        let Some(rows) = by_ranking.get(rec.id.as_str()) else { continue };
        let def = ranking_def(&rec.decl)?;
        leaderboards.push(build_leaderboard(&def, rows));
    }
    Ok(LeaderboardFile { v: ARTIFACT_VERSION, leaderboards })
}

pub fn read_text(path: &Path) -> Result<String, PipelineError> {
    match std::fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(PipelineError::MissingArtifact(path.display().to_string()))
        }
        Err(source) => Err(PipelineError::Io { path: path.display().to_string(), source }),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.display().to_string(), source })?;
    }
    std::fs::write(path, text).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifacts serialize") + "\n"
}

/// Reads a versioned JSON artifact.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = read_text(path)?;
    let malformed = |e: serde_json::Error| PipelineError::Malformed { path: path.display().to_string(), message: e.to_string() };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(malformed)?;
    let v = raw.get("v").and_then(serde_json::Value::as_u64);
    if v != Some(ARTIFACT_VERSION) {
        return Err(PipelineError::VersionMismatch { path: path.display().to_string(), found: v });
    }
    serde_json::from_value(raw).map_err(malformed)
}

pub fn read_repo(path: &Path) -> Result<RepoIndex, PipelineError> {
    Ok(RepoIndex::from_json(&read_text(path)?)?)
}

pub fn read_results(path: &Path) -> Result<Vec<MeasurementRecord>, PipelineError> {
    from_jsonl(&read_text(path)?)
        .map_err(|e| PipelineError::Malformed { path: path.display().to_string(), message: e.to_string() })
}

pub fn write_results(path: &Path, records: &[MeasurementRecord]) -> Result<(), PipelineError> {
    write_text(path, &to_jsonl(records))
}

/// A sibling artifact of `primary`, in the same directory.
pub fn sibling(primary: &Path, name: &str) -> PathBuf {
    match primary.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.join(name),
        _ => PathBuf::from(name),
    }
}
