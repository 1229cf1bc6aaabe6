//! Scenario discovery: a context-stack walk over the kind-ordered product
//! of modules, where every candidate is dry-run against the modules chosen
//! before it.

use crate::eval::{dry_run, EvalContext, ModuleMetadata};
use crate::repo::{ModuleRecord, RepoIndex};
use crate::sail::ast::Literal;
use crate::sail::ModuleKind;
use crate::types::convert::DEFAULT_MAX_LEN;
use crate::types::{unify, Chain, ConverterGraph, SemanticType};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

/// Canonical evaluation order of tuple members.
pub const KIND_ORDER: [ModuleKind; 6] = [
    ModuleKind::Problem,
    ModuleKind::Model,
    ModuleKind::Hardware,
    ModuleKind::Software,
    ModuleKind::Metric,
    ModuleKind::Ranking,
];

pub const GRID_LIMIT: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("hyperparameter grid of {size} points exceeds {GRID_LIMIT}")]
    GridTooLarge { size: usize },
    #[error("bad filter `{0}` (expected kind=glob)")]
    BadFilter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub seed: u64,
    pub max_chain: usize,
}

impl Default for PlanOptions {
    fn default() -> PlanOptions {
        PlanOptions { seed: 1, max_chain: DEFAULT_MAX_LEN }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub id: String,
    pub kind: ModuleKind,
    pub name: String,
    #[serde(skip)]
    pub metadata: Option<ModuleMetadata>,
}

impl Member {
    pub fn meta(&self) -> &ModuleMetadata {
        self.metadata.as_ref().expect("dry-run metadata present during planning")
    }
}

/// Converter chains between problem and model, and the resulting model-side
/// types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compat {
    pub chain_in: Chain,
    pub chain_out: Chain,
    pub input: SemanticType,
    pub output: SemanticType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTuple {
    /// One member per kind, in [`KIND_ORDER`].
    pub members: Vec<Member>,
    pub compat: Compat,
}

impl ScenarioTuple {
    pub fn member(&self, kind: ModuleKind) -> &Member {
        self.members.iter().find(|m| m.kind == kind).expect("tuple has every kind")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Skip {
    pub module: String,
    pub reason: String,
    /// How many contexts rejected the module for this reason.
    pub count: usize,
    /// The first context that did.
    pub context: String,
}

/// Why candidates were rejected, one line per (module, reason).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skips: Vec<Skip>,
}

impl SkipReport {
    pub fn add(&mut self, module: String, reason: String, context: String) {
        match self.skips.iter_mut().find(|s| s.module == module && s.reason == reason) {
            Some(s) => s.count += 1,
            None => self.skips.push(Skip { module, reason, count: 1, context }),
        }
    }
}

/// Model compatibility through converter chains.
pub fn resolve_model_compat(
    problem: &ModuleMetadata,
    model: &ModuleMetadata,
    graph: &ConverterGraph,
    max_len: usize,
) -> Result<Compat, String> {
    let (Some(pi), Some(po)) = (&problem.input, &problem.output) else {
        return Err(format!("problem `{}` has no inferable I/O types", problem.name));
    };
    let (Some(mi), Some(mo)) = (&model.input, &model.output) else {
        return Err(format!("model `{}` has no inferable I/O types", model.name));
    };
    let chain_in = graph
        .find_conversion(pi, mi, max_len)
        .map_err(|e| format!("input: {e}"))?;
    let chain_out = graph
        .find_conversion(po, mo, max_len)
        .map_err(|e| format!("output: {e}"))?;
    let reached_in = chain_in.last().map(|s| s.dst.clone()).unwrap_or_else(|| pi.clone());
    let reached_out = chain_out.last().map(|s| s.dst.clone()).unwrap_or_else(|| po.clone());
    let input = unify(&reached_in, mi).map_err(|e| e.to_string())?.unified;
    let output = unify(&reached_out, mo).map_err(|e| e.to_string())?.unified;
    Ok(Compat { chain_in, chain_out, input, output })
}

/// Checks every `requires` clause whose target kind is among `members`.
/// Converter requirements are met by a converter on either chain.
pub fn apply_relationships(members: &[&Member], compat: Option<&Compat>) -> Result<(), String> {
    for m in members {
        for r in &m.meta().relationships {
            if r.kind == ModuleKind::Converter {
                if let Some(c) = compat {
                    if !c.chain_in.iter().chain(&c.chain_out).any(|s| s.name == r.name) {
                        return Err(format!("requires converter {}", r.name));
                    }
                }
                continue;
            }
            if let Some(other) = members.iter().find(|o| o.kind == r.kind) {
                if other.name != r.name {
                    return Err(format!("requires {} {}", r.kind, r.name));
                }
            }
        }
    }
    Ok(())
}

struct Chosen {
    member: Member,
    compat: Option<Compat>,
}

fn evaluate(
    rec: &ModuleRecord,
    chosen: &[Chosen],
    graph: &ConverterGraph,
    opts: &PlanOptions,
) -> Result<Chosen, String> {
    let ctx = EvalContext {
        stack: chosen.iter().map(|c| c.member.meta().clone()).collect(),
        params: BTreeMap::new(),
        seed: opts.seed,
    };
    let (meta, _) = dry_run(&rec.decl, &ctx).map_err(|e| format!("evaluation error: {e}"))?;
    if meta.failed {
        return Err(meta.reason.unwrap_or_else(|| "failed".into()));
    }
    let member = Member { id: rec.id.clone(), kind: rec.kind, name: rec.name.clone(), metadata: Some(meta) };
    let mut compat = chosen.iter().find_map(|c| c.compat.clone());
    if rec.kind == ModuleKind::Model {
        let problem = chosen
            .iter()
            .find(|c| c.member.kind == ModuleKind::Problem)
            .ok_or("model evaluated without a problem")?;
        compat = Some(resolve_model_compat(problem.member.meta(), member.meta(), graph, opts.max_chain)?);
    }
    let mut all: Vec<&Member> = chosen.iter().map(|c| &c.member).collect();
    all.push(&member);
    apply_relationships(&all, compat.as_ref())?;
    Ok(Chosen { member, compat: if rec.kind == ModuleKind::Model { compat } else { None } })
}

fn context_label(chosen: &[Chosen]) -> String {
    chosen.iter().map(|c| format!("{}={}", c.member.kind, c.member.name)).collect::<Vec<_>>().join(",")
}

/// Every tuple whose members all dry-run successfully in sequence.
pub fn discover(repo: &RepoIndex, opts: &PlanOptions) -> (Vec<ScenarioTuple>, SkipReport) {
    let lists: Vec<Vec<&ModuleRecord>> = KIND_ORDER.iter().map(|k| repo.of_kind(*k).collect()).collect();
    let mut out = Vec::new();
    let mut skips = SkipReport::default();
    if lists.iter().any(Vec::is_empty) {
        return (out, skips);
    }
    let n = KIND_ORDER.len();
    let mut iters = vec![0usize; n];
    let mut stack: Vec<Chosen> = Vec::with_capacity(n);
    let mut level = 0;
    loop {
        if iters[level] < lists[level].len() {
            let rec = lists[level][iters[level]];
            iters[level] += 1;
            match evaluate(rec, &stack, &repo.converters, opts) {
                Ok(c) => {
                    stack.push(c);
                    if level + 1 == n {
                        let compat = stack.iter().find_map(|c| c.compat.clone()).expect("model sets compat");
                        out.push(ScenarioTuple {
                            members: stack.iter().map(|c| c.member.clone()).collect(),
                            compat,
                        });
                        stack.pop();
                    } else {
                        level += 1;
                    }
                }
                Err(reason) => {
                    let who = format!("{}:{}", rec.kind, rec.name);
                    skips.add(who, reason, context_label(&stack));
                }
            }
        } else {
            iters[level] = 0;
            if level == 0 {
                // popping the empty stack ends the walk
                break;
            }
            stack.pop();
            level -= 1;
        }
    }
    (out, skips)
}

/// One module of a concrete scenario with its bound parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub id: String,
    pub name: String,
    pub params: BTreeMap<String, Literal>,
}

impl Binding {
    /// `name[k=v,...]`, or just the name without parameters.
    pub fn label(&self) -> String {
        if self.params.is_empty() {
            return self.name.clone();
        }
        let parts: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}[{}]", self.name, parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcreteScenario {
    pub sid: String,
    pub problem: Binding,
    pub model: Binding,
    pub hardware: Binding,
    pub software: Binding,
    pub metrics: Vec<Binding>,
    pub rankings: Vec<Binding>,
    pub compat: Compat,
}

impl ConcreteScenario {
    pub fn label(&self) -> String {
        format!(
            "{} / {} / {} / {}",
            self.problem.label(),
            self.model.label(),
            self.hardware.label(),
            self.software.label()
        )
    }

    /// Identity of what actually gets executed.
    fn exec_key(&self) -> String {
        let key = (
            &self.problem,
            &self.model,
            &self.hardware,
            &self.software,
            self.compat.chain_in.iter().map(|s| (&s.name, s.lift)).collect::<Vec<_>>(),
            self.compat.chain_out.iter().map(|s| (&s.name, s.lift)).collect::<Vec<_>>(),
        );
        serde_json::to_string(&key).expect("key serializes")
    }
}

/// A full hyperparameter assignment for one tuple, keyed `kind.param`.
pub type GridPoint = BTreeMap<(ModuleKind, String), Literal>;

/// Cartesian product of every member's suggestion lists, last parameter
/// varying fastest.
pub fn expand_hypergrid(tuple: &ScenarioTuple) -> Result<Vec<GridPoint>, PlanError> {
    let mut axes: Vec<((ModuleKind, String), &Vec<Literal>)> = Vec::new();
    for m in &tuple.members {
        for (p, vals) in &m.meta().suggestions {
            axes.push(((m.kind, p.clone()), vals));
        }
    }
    let size = axes.iter().try_fold(1usize, |acc, (_, v)| acc.checked_mul(v.len())).unwrap_or(usize::MAX);
    if size > GRID_LIMIT {
        return Err(PlanError::GridTooLarge { size });
    }
    let mut points = vec![GridPoint::new()];
    for (key, vals) in axes {
        let mut next = Vec::with_capacity(points.len() * vals.len());
        for p in &points {
            for v in vals {
                let mut q = p.clone();
                q.insert(key.clone(), v.clone());
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

pub fn scenario_id(key: &str) -> String {
    hex::encode(&Sha256::digest(key.as_bytes())[..8])
}

fn binding(m: &Member, point: &GridPoint, defaults: &BTreeMap<String, Literal>) -> Binding {
    let mut params = defaults.clone();
    for ((k, p), v) in point {
        if *k == m.kind {
            params.insert(p.clone(), v.clone());
        }
    }
    Binding { id: m.id.clone(), name: m.name.clone(), params }
}

/// Module-declared defaults for parameters outside the grid.
fn defaults_of(repo: &RepoIndex, m: &Member) -> BTreeMap<String, Literal> {
    repo.by_id(&m.id)
        .map(|r| {
            r.decl
                .params
                .iter()
                .filter(|p| p.suggest.is_none())
                .filter_map(|p| p.default.clone().map(|d| (p.name.clone(), d)))
                .collect()
        })
        .unwrap_or_default()
}

/// Re-runs every member with its grid values bound; a member may reject a
/// particular grid point.
fn validate_point(repo: &RepoIndex, tuple: &ScenarioTuple, bindings: &[Binding], seed: u64) -> Result<(), String> {
    let mut ctx = EvalContext::new(seed);
    for (m, b) in tuple.members.iter().zip(bindings) {
        let rec = repo.by_id(&m.id).ok_or("record vanished")?;
        ctx.params = b.params.clone();
        let (meta, _) = dry_run(&rec.decl, &ctx).map_err(|e| e.to_string())?;
        if meta.failed {
            return Err(format!("{}:{} {}", m.kind, m.name, meta.reason.unwrap_or_default()));
        }
        ctx.stack.push(meta);
    }
    Ok(())
}

/// Expands tuples over their grids and fuses tuples that differ only in
/// metric or ranking into one executable scenario.
pub fn concretize(
    repo: &RepoIndex,
    tuples: &[ScenarioTuple],
    opts: &PlanOptions,
    skips: &mut SkipReport,
) -> Result<Vec<ConcreteScenario>, PlanError> {
    let mut out: Vec<ConcreteScenario> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for t in tuples {
        for point in expand_hypergrid(t)? {
            let bs: Vec<Binding> = t.members.iter().map(|m| binding(m, &point, &defaults_of(repo, m))).collect();
            if let Err(reason) = validate_point(repo, t, &bs, opts.seed) {
                let who = t.members.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join("/");
                let at: Vec<String> = point.iter().map(|((k, p), v)| format!("{k}.{p}={v}")).collect();
                skips.add(format!("grid:{who}"), reason, at.join(","));
                continue;
            }
            let mut c = ConcreteScenario {
                sid: String::new(),
                problem: bs[0].clone(),
                model: bs[1].clone(),
                hardware: bs[2].clone(),
                software: bs[3].clone(),
                metrics: vec![bs[4].clone()],
                rankings: vec![bs[5].clone()],
                compat: t.compat.clone(),
            };
            let key = c.exec_key();
            match index.get(&key) {
                Some(&i) => {
                    let s = &mut out[i];
                    if !s.metrics.contains(&bs[4]) {
                        s.metrics.push(bs[4].clone());
                    }
                    if !s.rankings.contains(&bs[5]) {
                        s.rankings.push(bs[5].clone());
                    }
                }
                None => {
                    c.sid = scenario_id(&key);
                    index.insert(key, out.len());
                    out.push(c);
                }
            }
        }
    }
    Ok(out)
}

/// `kind=glob` filters: alternatives within one kind, all kinds must match.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Filters {
    by_kind: BTreeMap<ModuleKind, Vec<glob::Pattern>>,
}

impl Filters {
    pub fn parse(specs: &[String]) -> Result<Filters, PlanError> {
        let mut f = Filters::default();
        for s in specs {
            let (k, g) = s.split_once('=').ok_or_else(|| PlanError::BadFilter(s.clone()))?;
            let kind = ModuleKind::from_keyword(k.trim()).ok_or_else(|| PlanError::BadFilter(s.clone()))?;
            let pat = glob::Pattern::new(g.trim()).map_err(|_| PlanError::BadFilter(s.clone()))?;
            f.by_kind.entry(kind).or_default().push(pat);
        }
        Ok(f)
    }

    pub fn accepts(&self, r: &ModuleRecord) -> bool {
        match self.by_kind.get(&r.kind) {
            Some(pats) => pats.iter().any(|p| p.matches(&r.name)),
            None => true,
        }
    }

    pub fn apply(&self, repo: &RepoIndex) -> RepoIndex {
        repo.filtered(|r| self.accepts(r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub scenarios: Vec<ConcreteScenario>,
    pub tuples: usize,
    pub skips: SkipReport,
}

/// discover + concretize.
pub fn plan(repo: &RepoIndex, opts: &PlanOptions) -> Result<Plan, PlanError> {
    let (tuples, mut skips) = discover(repo, opts);
    let scenarios = concretize(repo, &tuples, opts, &mut skips)?;
    Ok(Plan { scenarios, tuples: tuples.len(), skips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sail::parse;

    fn repo(src: &str) -> RepoIndex {
        let mods = parse(src)
            .unwrap()
            .into_iter()
            .map(|d| {
                let t = src[d.span.offset..d.span.end()].to_string();
                ("x.sail".to_string(), d, t)
            })
            .collect();
        RepoIndex::from_modules(mods).unwrap()
    }

    const BASE: &str = r#"
problem "p" { foreach s in Data.synthetic(4, Tensor[2], Scalar) { Test.Compare(s.x, s.y) } }
model "m" { let x = Model.input(Tensor[2]) Model.Predict(x, Scalar) }
hardware "h" { meta accelerator = false }
software "s" { Env.tag("s") }
metric "wallclock" { meta builtin = "wallclock" }
"#;

    #[test]
    fn singleton_product_gives_one_tuple() {
        let r = repo(&format!("{BASE} ranking \"r\" {{ meta mode = \"total\" }}"));
        let (t, skips) = discover(&r, &PlanOptions::default());
        assert_eq!(t.len(), 1);
        assert!(skips.skips.is_empty());
        assert!(t[0].compat.chain_in.is_empty() && t[0].compat.chain_out.is_empty());
    }

    #[test]
    fn requires_clause_accepts_and_rejects() {
        let r = repo(&format!("{BASE} ranking \"r\" {{ requires metric \"wallclock\" }}"));
        assert_eq!(discover(&r, &PlanOptions::default()).0.len(), 1);
        let r = repo(&format!("{BASE} ranking \"r\" {{ requires metric \"mean_loss\" }}"));
        let (t, skips) = discover(&r, &PlanOptions::default());
        assert!(t.is_empty());
        assert!(skips.skips[0].reason.starts_with("requires metric mean_loss"), "{:?}", skips);
    }

    #[test]
    fn empty_kind_gives_nothing() {
        assert!(discover(&repo(BASE), &PlanOptions::default()).0.is_empty());
    }

    #[test]
    fn grid_sizes() {
        let src = format!("{BASE} ranking \"r\" {{ }}").replace(
            "model \"m\" {",
            "model \"m\" { param lr: Scalar = 0.1 suggest [0.1, 0.01] param width: Scalar = 8 suggest [8, 16]",
        );
        let r = repo(&src);
        let (t, _) = discover(&r, &PlanOptions::default());
        let g = expand_hypergrid(&t[0]).unwrap();
        assert_eq!(g.len(), 4);
        // last parameter (width) varies fastest
        let widths: Vec<_> = g.iter().map(|p| p[&(ModuleKind::Model, "width".to_string())].clone()).collect();
        assert_eq!(widths[0], Literal::Num(8.0));
        assert_eq!(widths[1], Literal::Num(16.0));
        let plain = repo(&format!("{BASE} ranking \"r\" {{ }}"));
        let (t, _) = discover(&plain, &PlanOptions::default());
        assert_eq!(expand_hypergrid(&t[0]).unwrap(), vec![GridPoint::new()]);
    }

    #[test]
    fn oversized_grid_is_rejected() {
        let params: String =
            (0..7).map(|i| format!("param a{i}: Scalar = 0 suggest [0, 1] ")).collect();
        let src = format!("{BASE} ranking \"r\" {{ }}").replace("model \"m\" {", &format!("model \"m\" {{ {params}"));
        let r = repo(&src);
        let (t, _) = discover(&r, &PlanOptions::default());
        assert_eq!(expand_hypergrid(&t[0]), Err(PlanError::GridTooLarge { size: 128 }));
    }

    #[test]
    fn fused_scenarios_collect_metrics() {
        let src = format!(
            "{BASE} metric \"mean_loss\" {{ meta builtin = \"mean_loss\" }} ranking \"r\" {{ }}"
        );
        let r = repo(&src);
        let p = plan(&r, &PlanOptions::default()).unwrap();
        assert_eq!(p.tuples, 2);
        assert_eq!(p.scenarios.len(), 1);
        assert_eq!(p.scenarios[0].metrics.len(), 2);
    }

    #[test]
    fn filters_and_alternatives() {
        let f = Filters::parse(&["model=m*".into(), "model=knn".into()]).unwrap();
        let r = repo(&format!("{BASE} ranking \"r\" {{ }}"));
        assert!(f.accepts(r.get(ModuleKind::Model, "m").unwrap()));
        let f = Filters::parse(&["problem=zzz".into()]).unwrap();
        assert_eq!(f.apply(&r).count(ModuleKind::Problem), 0);
        assert!(Filters::parse(&["nonsense".into()]).is_err());
    }
}
