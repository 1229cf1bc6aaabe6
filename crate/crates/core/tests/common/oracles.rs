//! Independent oracles. Each check takes a seed (or a seed range) and
//! returns what went wrong, so proptest and the acceptance target share
//! them.

use saibench::data::rng::SplitMix64;
use saibench::metrics::{nearest_rank, MetricState, Observation, PercentileLoss};
use saibench::orchestrator::{prune, schedule, EquivalenceKey, Schedule, Task};
use saibench::pod::linear::LinearSolver;
use saibench::pod::mlp::{head_loss, MlpNet};
use saibench::pod::perm_sum::PermSumSolver;
use saibench::pod::{Head, Solver, TaskIo};
use saibench::ranking::{dominates, rank_partial, rank_total, Direction, Mode, RankingDef, Row, Term};
use saibench::sail::ast::*;
use saibench::sail::{parse, render, tokenize, Span};
use saibench::types::convert::{ConverterEdge, ConverterGraph, KernelRegistry};
use saibench::types::SemanticType;
use saibench::value::{Atom, Value};
use std::collections::{BTreeMap, BTreeSet};

pub type Check = Result<(), String>;

// ---------- converter graphs ----------

/// Random graph over `Tensor[1..=n]`, compared against Floyd–Warshall on
/// `queries` random pairs.
pub fn converter_graph(seed: u64, queries: usize) -> Check {
    let mut rng = SplitMix64::new(seed);
    let n = 2 + rng.below(49) as usize;
    let m = rng.below(201) as usize;
    let ty = |i: usize| SemanticType::vector(i as u64 + 1);
    let mut g = ConverterGraph::new(KernelRegistry::empty());
    const INF: usize = usize::MAX / 4;
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for e in 0..m {
        let (a, b) = (rng.below(n as u64) as usize, rng.below(n as u64) as usize);
        g.add_edge(ConverterEdge { id: format!("e{e}"), name: format!("c{e}"), src: ty(a), dst: ty(b), kernel: None });
        d[a][b] = d[a][b].min(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    for _ in 0..queries {
        let (a, b) = (rng.below(n as u64) as usize, rng.below(n as u64) as usize);
        // a bound below the true distance must also report no path
        let max_len = if rng.below(4) == 0 { rng.below(4) as usize } else { n };
        let want = (d[a][b] <= max_len).then_some(d[a][b]);
        let got = g.find_conversion(&ty(a), &ty(b), max_len);
        match (&got, want) {
            (Ok(chain), Some(len)) => {
                if chain.len() != len {
                    return Err(format!("seed {seed}: {a}->{b} chain {} vs oracle {len}", chain.len()));
                }
                let mut at = ty(a);
                for step in chain {
                    let e = &g.edges()[step.edge];
                    if e.src != at || step.dst != e.dst {
                        return Err(format!("seed {seed}: {a}->{b} chain is not a walk"));
                    }
                    at = e.dst.clone();
                }
                if at != ty(b) {
                    return Err(format!("seed {seed}: {a}->{b} chain ends at {at}"));
                }
            }
            (Err(_), None) => {}
            (got, want) => {
                return Err(format!("seed {seed}: {a}->{b} max {max_len}: got {:?}, oracle {want:?}", got.as_ref().map(Vec::len)))
            }
        }
    }
    Ok(())
}

// ---------- gradients ----------

pub const FD_EPS: f64 = 1e-5;

/// ‖a − b‖ / max(‖a‖, ‖b‖), or the absolute gap when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = n(a).max(n(b));
    if scale < 1e-8 {
        n(&diff)
    } else {
        n(&diff) / scale
    }
}

fn central(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            a[i] += FD_EPS;
            let up = f(&a);
            a[i] -= 2.0 * FD_EPS;
            let dn = f(&a);
            (up - dn) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Worst input-gradient error of a fitted polynomial model over `points`.
pub fn linear_gradients(seed: u64, points: usize) -> Result<f64, String> {
    let mut rng = SplitMix64::new(seed);
    let degree = 1 + rng.below(3) as usize;
    let d = 1 + rng.below(4) as usize;
    let mut s = LinearSolver::new(degree);
    s.configure(TaskIo { in_dim: d, head: Head::Regress(1) }).map_err(|e| e.to_string())?;
    let xs: Vec<Value> = (0..60).map(|_| Value::vector((0..d).map(|_| rng.normal()).collect())).collect();
    let ys: Vec<Vec<f64>> =
        xs.iter().map(|v| vec![v.features().iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x.sin()).sum()]).collect();
    s.train_epoch(&xs, &ys, &mut rng).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x: Vec<f64> = (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let g = s.input_gradient(&Value::vector(x.clone())).map_err(|e| e.to_string())?;
        let fd = central(&mut |p| s.predict(&[Value::vector(p.to_vec())]).unwrap()[0][0], &x);
        worst = worst.max(rel_err(&g, &fd));
    }
    Ok(worst)
}

/// Worst error of the MLP's weight and input gradients over `points`
/// random (net, input, target) triples.
pub fn mlp_gradients(seed: u64, points: usize) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let d = 1 + rng.below(5) as usize;
        let hidden = 1 + rng.below(8) as usize;
        let classify = rng.below(2) == 0;
        let out = if classify { 2 + rng.below(3) as usize } else { 1 + rng.below(2) as usize };
        let head = if classify { Head::Classify(out) } else { Head::Regress(out) };
        let mut net = MlpNet::new(d, hidden, out, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect();
        if rng.below(2) == 0 {
            let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..d).map(|_| 3.0 * rng.normal() + 1.0).collect()).collect();
            net.fit_inputs(&rows);
        }
        let t: Vec<f64> = if classify {
            let k = rng.below(out as u64) as usize;
            (0..out).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
        } else {
            (0..out).map(|_| rng.normal()).collect()
        };
        let (h, z) = net.forward(&x);
        let (_, dz) = head_loss(head, &z, &t);
        let mut g = net.zero_grads();
        let dx = net.backward(&x, &h, &dz, &mut g);
        let analytic = [&g.w1[..], &g.b1, &g.w2, &g.b2].concat();
        let p = net.flat_params();
        let fd_w = central(
            &mut |q| {
                let mut n2 = net.clone();
                n2.set_flat_params(q);
                head_loss(head, &n2.forward(&x).1, &t).0
            },
            &p,
        );
        let fd_x = central(&mut |q| head_loss(head, &net.forward(q).1, &t).0, &x);
        worst = worst.max(rel_err(&analytic, &fd_w)).max(rel_err(&dx, &fd_x));
    }
    worst
}

// ---------- permutation invariance ----------

fn random_atom(rng: &mut SplitMix64) -> Value {
    let z = [1.0, 6.0, 8.0][rng.below(3) as usize];
    let mut v = || [rng.normal(), rng.normal(), rng.normal()];
    Value::Atom(Atom { z, pos: v(), vel: v() })
}

/// A perm-sum model nudged away from its initial weights.
pub fn perm_sum_model(seed: u64) -> PermSumSolver {
    let mut rng = SplitMix64::new(seed);
    let mut s = PermSumSolver::new(8, 0.05, seed);
    s.configure(TaskIo { in_dim: 0, head: Head::Regress(1) }).unwrap();
    let xs: Vec<Value> = (0..20).map(|_| Value::List((0..3).map(|_| random_atom(&mut rng)).collect())).collect();
    let ys: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.normal()]).collect();
    for _ in 0..3 {
        s.train_epoch(&xs, &ys, &mut rng).unwrap();
    }
    s
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Bit-identical output over every ordering of 6 atoms and `sampled`
/// shuffles of 20; returns the number of orderings compared.
pub fn permutation_invariance(seed: u64, sampled: usize) -> Result<usize, String> {
    let s = perm_sum_model(seed);
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let mut count = 0;
    let six: Vec<Value> = (0..6).map(|_| random_atom(&mut rng)).collect();
    let base = s.forward(&Value::List(six.clone())).map_err(|e| e.to_string())?.to_bits();
    for p in permutations(6) {
        let v = s.forward(&Value::List(p.iter().map(|&i| six[i].clone()).collect())).unwrap();
        if v.to_bits() != base {
            return Err(format!("6 atoms, order {p:?}: {v} vs {}", f64::from_bits(base)));
        }
        count += 1;
    }
    let mut twenty: Vec<Value> = (0..20).map(|_| random_atom(&mut rng)).collect();
    let base = s.forward(&Value::List(twenty.clone())).unwrap().to_bits();
    for k in 0..sampled {
        rng.shuffle(&mut twenty);
        let v = s.forward(&Value::List(twenty.clone())).unwrap();
        if v.to_bits() != base {
            return Err(format!("20 atoms, shuffle {k}: {v} vs {}", f64::from_bits(base)));
        }
        count += 1;
    }
    Ok(count)
}

// ---------- scheduling ----------

pub fn valid_schedule(tasks: &[Task], lanes: &BTreeMap<String, usize>, s: &Schedule) -> Check {
    let mut seen = BTreeSet::new();
    let mut ends: f64 = 0.0;
    for l in &s.lanes {
        if l.index >= *lanes.get(&l.hardware).unwrap_or(&0) {
            return Err(format!("lane {}#{} does not exist", l.hardware, l.index));
        }
        let mut t = 0.0;
        for slot in &l.tasks {
            let task = tasks.iter().find(|x| x.sid == slot.sid).ok_or(format!("unknown task {}", slot.sid))?;
            if task.hardware != l.hardware {
                return Err(format!("{} placed on {}", slot.sid, l.hardware));
            }
            if slot.start != t || (slot.end - slot.start - task.est_seconds).abs() > 1e-9 {
                return Err(format!("{} slot {}..{} after {t}", slot.sid, slot.start, slot.end));
            }
            if !seen.insert(slot.sid.clone()) {
                return Err(format!("{} scheduled twice", slot.sid));
            }
            t = slot.end;
        }
        ends = ends.max(t);
    }
    if seen.len() != tasks.len() {
        return Err(format!("{} of {} tasks scheduled", seen.len(), tasks.len()));
    }
    if (ends - s.makespan).abs() > 1e-9 {
        return Err(format!("makespan {} but lanes end at {ends}", s.makespan));
    }
    Ok(())
}

fn brute_force_opt(w: &[f64], m: usize) -> f64 {
    let mut best = f64::INFINITY;
    let mut load = vec![0.0; m];
    fn go(i: usize, w: &[f64], load: &mut [f64], best: &mut f64) {
        if i == w.len() {
            *best = best.min(load.iter().cloned().fold(0.0, f64::max));
            return;
        }
        for l in 0..load.len() {
            load[l] += w[i];
            if load[l] < *best {
                go(i + 1, w, load, best);
            }
            load[l] -= w[i];
        }
    }
    go(0, w, &mut load, &mut best);
    best
}

/// One random instance: ≤ 8 tasks on ≤ 3 identical lanes; returns
/// makespan / optimum.
pub fn lpt_ratio(seed: u64) -> Result<f64, String> {
    let mut rng = SplitMix64::new(seed);
    let n = 1 + rng.below(8) as usize;
    let m = 1 + rng.below(3) as usize;
    let tasks: Vec<Task> = (0..n)
        .map(|i| Task {
            sid: format!("t{i}"),
            hardware: "h".into(),
            est_seconds: if rng.below(2) == 0 { 1.0 + rng.below(20) as f64 } else { rng.uniform(0.1, 10.0) },
        })
        .collect();
    let lanes = BTreeMap::from([("h".to_string(), m)]);
    let s = schedule(&tasks, &lanes).map_err(|e| e.to_string())?;
    valid_schedule(&tasks, &lanes, &s).map_err(|e| format!("seed {seed}: {e}"))?;
    let w: Vec<f64> = tasks.iter().map(|t| t.est_seconds).collect();
    let opt = brute_force_opt(&w, m);
    let ratio = s.makespan / opt;
    if ratio > 4.0 / 3.0 + 1e-12 {
        return Err(format!("seed {seed}: makespan {} vs optimum {opt} for {w:?} on {m}", s.makespan));
    }
    Ok(ratio)
}

/// Random scenario set with deliberately colliding keys; pruning must keep
/// at least one witness of every key.
pub fn prune_coverage(seed: u64) -> Result<usize, String> {
    let mut rng = SplitMix64::new(seed);
    let n = 1 + rng.below(40) as usize;
    let mut pick = |k: u64| rng.below(k);
    let items: Vec<(String, Vec<EquivalenceKey>)> = (0..n)
        .map(|i| {
            let model = format!("m{}", pick(3));
            let keys = vec![
                EquivalenceKey::Throughput {
                    model: model.clone(),
                    software: format!("s{}", pick(2)),
                    hardware: format!("h{}", pick(2)),
                    bucket: pick(3) as u32,
                },
                EquivalenceKey::Precision {
                    model,
                    model_params: format!("{{\"k\":{}}}", pick(2)),
                    problem: format!("p{}", pick(3)),
                    problem_params: "{}".into(),
                },
            ];
            (format!("sid{i:02}"), keys)
        })
        .collect();
    let (kept, dropped) = prune(&items);
    if kept.len() + dropped.len() != n {
        return Err(format!("seed {seed}: {} kept + {} dropped != {n}", kept.len(), dropped.len()));
    }
    let all: BTreeSet<&EquivalenceKey> = items.iter().flat_map(|(_, k)| k).collect();
    let covered: BTreeSet<&EquivalenceKey> =
        items.iter().filter(|(s, _)| kept.contains(s)).flat_map(|(_, k)| k).collect();
    if all != covered {
        return Err(format!("seed {seed}: {} keys lost", all.len() - covered.len()));
    }
    // nothing kept is redundant given the items kept before it
    let mut seen = BTreeSet::new();
    for (sid, ks) in items.iter().filter(|(s, _)| kept.contains(s)) {
        if ks.iter().all(|k| seen.contains(k)) {
            return Err(format!("seed {seed}: {sid} kept without a new key"));
        }
        seen.extend(ks.iter());
    }
    Ok(dropped.len())
}

// ---------- metrics and rankings ----------

/// Nearest rank straight from the definition: the smallest sample value
/// with at least p% of the sample at or below it.
fn percentile_by_definition(v: &[f64], p: f64) -> f64 {
    let n = v.len() as f64;
    let need = (p / 100.0 * n).max(1.0);
    v.iter()
        .copied()
        .filter(|c| v.iter().filter(|x| *x <= c).count() as f64 >= need - 1e-9)
        .fold(f64::INFINITY, f64::min)
}

pub fn percentile(seed: u64) -> Check {
    let mut rng = SplitMix64::new(seed);
    let n = 1 + rng.below(60) as usize;
    let v: Vec<f64> =
        (0..n).map(|_| if rng.below(3) == 0 { rng.below(5) as f64 } else { rng.normal() }).collect();
    let p = [50.0, 90.0, 99.0, 100.0, 1.0, rng.uniform(0.0, 100.0)][rng.below(6) as usize];
    let want = percentile_by_definition(&v, p);
    let got = nearest_rank(&v, p);
    let mut state = PercentileLoss::new(p);
    for x in &v {
        state.step(&Observation { loss: Some(*x), elapsed_ms: 0.0 });
    }
    if got != Some(want) || state.finalize() != Some(want) {
        return Err(format!("seed {seed}: p{p} of {v:?}: {got:?} vs {want}"));
    }
    Ok(())
}

fn random_rows(rng: &mut SplitMix64, terms: &[Term]) -> Vec<Row> {
    let n = 1 + rng.below(12) as usize;
    (0..n)
        .map(|i| Row {
            sid: format!("{:016x}", rng.next_u64() ^ i as u64),
            values: terms
                .iter()
                .map(|t| {
                    // a coarse grid makes ties and dominance common
                    let v = if rng.below(2) == 0 { rng.below(4) as f64 } else { rng.uniform(-5.0, 5.0) };
                    (t.metric.clone(), v)
                })
                .collect(),
        })
        .collect()
}

fn random_def(rng: &mut SplitMix64, mode: Mode) -> RankingDef {
    let k = 1 + rng.below(3) as usize;
    RankingDef {
        name: "r".into(),
        mode,
        terms: (0..k)
            .map(|i| Term {
                metric: format!("q{i}"),
                weight: rng.uniform(0.1, 2.0),
                direction: if rng.below(2) == 0 { Direction::Min } else { Direction::Max },
            })
            .collect(),
    }
}

fn pairwise_dominates(a: &Row, b: &Row, terms: &[Term]) -> bool {
    let better = |t: &Term, x: f64, y: f64| match t.direction {
        Direction::Min => x < y,
        Direction::Max => x > y,
    };
    let all_ok = terms.iter().all(|t| !better(t, b.values[&t.metric], a.values[&t.metric]));
    let some = terms.iter().any(|t| better(t, a.values[&t.metric], b.values[&t.metric]));
    all_ok && some
}

pub fn dominance(seed: u64) -> Check {
    let mut rng = SplitMix64::new(seed);
    let def = random_def(&mut rng, Mode::Partial);
    let rows = random_rows(&mut rng, &def.terms);
    let (g, excluded) = rank_partial(&rows, &def);
    if !excluded.is_empty() {
        return Err(format!("seed {seed}: complete rows were excluded"));
    }
    let want: BTreeSet<(String, String)> = rows
        .iter()
        .flat_map(|a| rows.iter().map(move |b| (a, b)))
        .filter(|(a, b)| a.sid != b.sid && pairwise_dominates(a, b, &def.terms))
        .map(|(a, b)| (a.sid.clone(), b.sid.clone()))
        .collect();
    let got: BTreeSet<(String, String)> = g.edges.iter().cloned().collect();
    if got != want || got.len() != g.edges.len() {
        return Err(format!("seed {seed}: edges {got:?} vs oracle {want:?}"));
    }
    for a in &rows {
        for b in &rows {
            if dominates(a, b, &def.terms) != pairwise_dominates(a, b, &def.terms) {
                return Err(format!("seed {seed}: dominates({}, {}) disagrees", a.sid, b.sid));
            }
        }
    }
    // strata are a topological layering: every edge goes strictly downwards, so no cycle
    let layer: BTreeMap<&str, usize> =
        g.strata.iter().enumerate().flat_map(|(i, s)| s.iter().map(move |x| (x.as_str(), i))).collect();
    if layer.len() != rows.len() {
        return Err(format!("seed {seed}: strata cover {} of {} nodes", layer.len(), rows.len()));
    }
    for (a, b) in &g.edges {
        if layer[a.as_str()] >= layer[b.as_str()] {
            return Err(format!("seed {seed}: edge {a} -> {b} does not descend"));
        }
    }
    Ok(())
}

pub fn rescaling_invariance(seed: u64) -> Check {
    let mut rng = SplitMix64::new(seed);
    let def = random_def(&mut rng, Mode::Total);
    let rows = random_rows(&mut rng, &def.terms);
    let col = &def.terms[rng.below(def.terms.len() as u64) as usize].metric;
    let c = [1e-3, 0.5, 3.0, 1e4][rng.below(4) as usize];
    let scaled: Vec<Row> = rows
        .iter()
        .map(|r| {
            let mut r = r.clone();
            *r.values.get_mut(col).unwrap() *= c;
            r
        })
        .collect();
    let (a, _) = rank_total(&rows, &def);
    let (b, _) = rank_total(&scaled, &def);
    let order = |e: &[saibench::ranking::Entry]| e.iter().map(|x| x.sid.clone()).collect::<Vec<_>>();
    if order(&a) != order(&b) {
        return Err(format!("seed {seed}: scaling {col} by {c} reorders the board"));
    }
    for (x, y) in a.iter().zip(&b) {
        if (x.score - y.score).abs() > 1e-8 {
            return Err(format!("seed {seed}: score of {} moved {} -> {}", x.sid, x.score, y.score));
        }
    }
    Ok(())
}

// ---------- parser ----------

const IDENTS: [&str; 8] = ["a", "b", "s", "x_1", "train", "n", "foo", "Bar"];
const METHODS: [&str; 7] = ["input", "Dense", "problem", "model", "two_gaussians", "Compare", "tag"];
const OBJECTS: [WellKnown; 6] =
    [WellKnown::Train, WellKnown::Test, WellKnown::Model, WellKnown::Env, WellKnown::Data, WellKnown::Gradient];
const KINDS: [ModuleKind; 7] = ModuleKind::ALL;

fn pick<'a, T>(rng: &mut SplitMix64, xs: &'a [T]) -> &'a T {
    &xs[rng.below(xs.len() as u64) as usize]
}

fn gen_string(rng: &mut SplitMix64) -> String {
    const CHARS: [char; 10] = ['a', 'Z', ' ', '"', '\\', '\n', '\t', 'é', '1', '-'];
    (0..rng.below(6)).map(|_| *pick(rng, &CHARS)).collect()
}

fn gen_number(rng: &mut SplitMix64) -> f64 {
    match rng.below(4) {
        0 => rng.below(100) as f64,
        1 => rng.uniform(0.0, 10.0),
        2 => 10f64.powi(rng.below(30) as i32 - 15) * rng.uniform(1.0, 9.0),
        _ => (rng.below(1000) as f64) / 8.0,
    }
}

fn gen_literal(rng: &mut SplitMix64, signed: bool) -> Literal {
    match rng.below(4) {
        0 => Literal::Str(gen_string(rng)),
        1 => Literal::Bool(rng.below(2) == 0),
        _ => {
            let v = gen_number(rng);
            Literal::Num(if signed && rng.below(3) == 0 { -v } else { v })
        }
    }
}

fn gen_dim(rng: &mut SplitMix64) -> DimExpr {
    if rng.below(2) == 0 {
        DimExpr::Wild
    } else {
        DimExpr::Fixed(1 + rng.below(64))
    }
}

fn gen_type(rng: &mut SplitMix64, depth: u32) -> TypeExpr {
    match rng.below(if depth == 0 { 5 } else { 6 }) {
        0 => TypeExpr::Scalar,
        1 => TypeExpr::Tensor((0..1 + rng.below(3)).map(|_| gen_dim(rng)).collect()),
        2 => TypeExpr::Atom,
        3 => TypeExpr::Image(gen_dim(rng), gen_dim(rng), gen_dim(rng)),
        4 => TypeExpr::Label(gen_dim(rng)),
        _ => TypeExpr::List(Box::new(gen_type(rng, depth - 1))),
    }
}

fn e(kind: ExprKind) -> Expr {
    Expr { kind, span: Span::default() }
}

fn gen_call(rng: &mut SplitMix64, depth: u32) -> Call {
    Call {
        object: *pick(rng, &OBJECTS),
        method: pick(rng, &METHODS).to_string(),
        args: (0..rng.below(4)).map(|_| gen_expr(rng, depth.saturating_sub(1))).collect(),
        span: Span::default(),
    }
}

fn gen_expr(rng: &mut SplitMix64, depth: u32) -> Expr {
    let leaf = depth == 0 || rng.below(3) == 0;
    if leaf {
        return match rng.below(3) {
            0 => e(ExprKind::Lit(gen_literal(rng, true))),
            1 => e(ExprKind::Ident(pick(rng, &IDENTS).to_string())),
            _ => e(ExprKind::Type(gen_type(rng, 2))),
        };
    }
    const OPS: [BinaryOp; 12] = [
        BinaryOp::Or,
        BinaryOp::And,
        BinaryOp::Eq,
        BinaryOp::Ne,
        BinaryOp::Lt,
        BinaryOp::Le,
        BinaryOp::Gt,
        BinaryOp::Ge,
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mul,
        BinaryOp::Div,
    ];
    match rng.below(4) {
        0 => {
            let op = if rng.below(2) == 0 { UnaryOp::Not } else { UnaryOp::Neg };
            e(ExprKind::Unary { op, expr: Box::new(gen_expr(rng, depth - 1)) })
        }
        1 => e(ExprKind::Binary {
            op: *pick(rng, &OPS),
            lhs: Box::new(gen_expr(rng, depth - 1)),
            rhs: Box::new(gen_expr(rng, depth - 1)),
        }),
        2 => {
            let base = match rng.below(3) {
                0 => e(ExprKind::Ident(pick(rng, &IDENTS).to_string())),
                1 => e(ExprKind::Call(gen_call(rng, depth - 1))),
                _ => gen_expr(rng, depth - 1),
            };
            e(ExprKind::Field { base: Box::new(base), field: pick(rng, &["x", "y", "name", "output", "model"]).to_string() })
        }
        _ => e(ExprKind::Call(gen_call(rng, depth))),
    }
}

fn gen_block(rng: &mut SplitMix64, depth: u32) -> Vec<Stmt> {
    (0..rng.below(4)).map(|_| gen_stmt(rng, depth)).collect()
}

fn gen_stmt(rng: &mut SplitMix64, depth: u32) -> Stmt {
    let kind = match rng.below(if depth == 0 { 4 } else { 6 }) {
        0 => StmtKind::Let { name: pick(rng, &IDENTS).to_string(), value: gen_expr(rng, 3) },
        1 => StmtKind::Call(gen_call(rng, 2)),
        2 => StmtKind::FailWhen {
            cond: gen_expr(rng, 3),
            reason: (rng.below(2) == 0).then(|| gen_string(rng)),
        },
        3 => StmtKind::Return(gen_expr(rng, 2)),
        4 => StmtKind::ForEach {
            var: pick(rng, &IDENTS).to_string(),
            source: gen_expr(rng, 2),
            body: gen_block(rng, depth - 1),
        },
        _ => StmtKind::If {
            cond: gen_expr(rng, 3),
            then: gen_block(rng, depth - 1),
            otherwise: (rng.below(2) == 0).then(|| gen_block(rng, depth - 1)),
        },
    };
    Stmt { kind, span: Span::default() }
}

/// A random, spanless module list.
pub fn random_modules(seed: u64) -> Vec<ModuleDecl> {
    let mut rng = SplitMix64::new(seed);
    (0..1 + rng.below(3))
        .map(|i| ModuleDecl {
            kind: *pick(&mut rng, &KINDS),
            name: format!("mod{i}{}", gen_string(&mut rng)),
            params: (0..rng.below(3))
                .map(|j| ParamDecl {
                    name: format!("p{j}"),
                    ty: gen_type(&mut rng, 1),
                    default: (rng.below(2) == 0).then(|| gen_literal(&mut rng, true)),
                    suggest: (rng.below(2) == 0).then(|| (0..1 + rng.below(3)).map(|_| gen_literal(&mut rng, true)).collect()),
                    span: Span::default(),
                })
                .collect(),
            meta: (0..rng.below(3)).map(|j| (format!("k{j}"), gen_literal(&mut rng, true))).collect(),
            requires: (0..rng.below(2))
                .map(|_| Requirement { kind: *pick(&mut rng, &KINDS), name: gen_string(&mut rng), span: Span::default() })
                .collect(),
            body: gen_block(&mut rng, 2),
            span: Span::default(),
        })
        .collect()
}

pub fn strip(v: &[ModuleDecl]) -> Vec<ModuleDecl> {
    v.iter().map(ModuleDecl::without_spans).collect()
}

/// parse(render(ast)) == ast, and printing is a fixpoint.
pub fn round_trip(decls: &[ModuleDecl]) -> Check {
    let text = render(decls);
    let back = parse(&text).map_err(|e| format!("{e}\n{text}"))?;
    if strip(&back) != strip(decls) {
        return Err(format!("structure changed:\n{text}"));
    }
    if render(&back) != text {
        return Err(format!("printing is not a fixpoint:\n{text}"));
    }
    Ok(())
}

const REPLACEMENTS: [&str; 30] = [
    "{", "}", "(", ")", "[", "]", ",", ":", ".", "?", "=", "==", "<", "+", "*", "!", "&&", "problem", "model", "let",
    "foreach", "in", "if", "else", "fail", "meta", "param", "42", "\"s\"", "#",
];

/// Outcome of one corruption of `src`.
pub enum Corruption {
    /// The mutated text still parses; not counted.
    StillValid,
    /// Tokens between the mutation and the error's context span (0 when
    /// inside it), and between the mutation and the offending token.
    Located { distance: usize, point: usize, detail: String },
}

fn token_index(toks: &[saibench::sail::Token], offset: usize) -> usize {
    toks.iter().position(|t| t.span.end() > offset).unwrap_or(toks.len())
}

/// Replaces one token of `src` and measures how far the reported error is
/// from it, in tokens of the mutated text.
pub fn corrupt_once(src: &str, rng: &mut SplitMix64) -> Result<Corruption, String> {
    let toks = tokenize(src).map_err(|e| e.to_string())?;
    if toks.is_empty() {
        return Err("nothing to corrupt".into());
    }
    let i = rng.below(toks.len() as u64) as usize;
    let sp = toks[i].span;
    let original = &src[sp.offset..sp.end()];
    let mut rep = *pick(rng, &REPLACEMENTS);
    while rep == original {
        rep = pick(rng, &REPLACEMENTS);
    }
    // the replacement becomes token i of the mutated text
    let mutated = format!("{} {rep} {}", &src[..sp.offset], &src[sp.end()..]);
    let err = match parse(&mutated) {
        Ok(_) => return Ok(Corruption::StillValid),
        Err(e) => e,
    };
    let (point, distance) = match tokenize(&mutated) {
        Ok(mt) => {
            let point = token_index(&mt, err.span().offset).abs_diff(i);
            let ctx = err.context();
            let lo = token_index(&mt, ctx.offset);
            let hi = token_index(&mt, ctx.end().saturating_sub(1).max(ctx.offset));
            let d = if (lo..=hi).contains(&i) { 0 } else { i.abs_diff(lo).min(i.abs_diff(hi)) };
            (point, d)
        }
        // a lex error can only come from the replacement itself
        Err(_) => {
            let d = usize::from(err.span().offset != sp.offset + 1);
            (d, d)
        }
    };
    let detail = format!("line {}: `{original}` -> `{rep}`: {err}", sp.line);
    Ok(Corruption::Located { distance, point, detail })
}

pub struct CorruptionStats {
    /// (context distance, point distance, description) per located error.
    pub located: Vec<(usize, usize, String)>,
    pub still_valid: usize,
}

/// `wanted` corruptions that break the parse, spread over `sources`;
/// returns the located distances and how many mutations stayed valid.
pub fn corruptions(sources: &[String], seed: u64, wanted: usize) -> Result<CorruptionStats, String> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    let mut valid = 0;
    let mut k = 0;
    while out.len() < wanted {
        match corrupt_once(&sources[k % sources.len()], &mut rng)? {
            Corruption::StillValid => valid += 1,
            Corruption::Located { distance, point, detail } => out.push((distance, point, detail)),
        }
        k += 1;
        if k > wanted * 20 {
            return Err("too many corruptions stay valid".into());
        }
    }
    Ok(CorruptionStats { located: out, still_valid: valid })
}
