//! Leaderboards: weighted total orders and dominance graphs.

use crate::eval::{dry_run, EvalContext};
use crate::eval::tape::Arg;
use crate::sail::ast::{Literal, ModuleDecl};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RankingError {
    #[error("ranking `{0}` does not evaluate: {1}")]
    Eval(String, String),
    #[error("ranking `{name}`: {message}")]
    Malformed { name: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub metric: String,
    pub weight: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Total,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingDef {
    pub name: String,
    pub mode: Mode,
    pub terms: Vec<Term>,
}

/// Reads the `Test.Rank(metric, weight, direction)` calls and `mode` meta
/// of a ranking module.
pub fn ranking_def(decl: &ModuleDecl) -> Result<RankingDef, RankingError> {
    let bad = |m: String| RankingError::Malformed { name: decl.name.clone(), message: m };
    let (meta, tape) = dry_run(decl, &EvalContext::new(0)).map_err(|e| RankingError::Eval(decl.name.clone(), e.to_string()))?;
    let mode = match meta.meta_str("mode").unwrap_or("total") {
        "total" => Mode::Total,
        "partial" => Mode::Partial,
        other => return Err(bad(format!("unknown mode `{other}`"))),
    };
    let mut terms = Vec::new();
    for n in tape.nodes.iter().filter(|n| n.prim == "Test.Rank") {
        let lit = |i: usize| match n.args.get(i) {
            Some(Arg::Lit(l)) => Some(l.clone()),
            _ => None,
        };
        let metric = lit(0).and_then(|l| l.as_str().map(str::to_string)).ok_or_else(|| bad("metric name must be a string".into()))?;
        let weight = match lit(1) {
            Some(Literal::Num(w)) if w.is_finite() => w,
            None if n.args.len() < 2 => 1.0,
            _ => return Err(bad(format!("weight of `{metric}` must be a finite number"))),
        };
        let direction = match lit(2).as_ref().and_then(Literal::as_str) {
            None | Some("min") => Direction::Min,
            Some("max") => Direction::Max,
            Some(d) => return Err(bad(format!("unknown direction `{d}`"))),
        };
        if terms.iter().any(|t: &Term| t.metric == metric) {
            return Err(bad(format!("`{metric}` ranked twice")));
        }
        terms.push(Term { metric, weight, direction });
    }
    if terms.is_empty() {
        return Err(bad("no Test.Rank terms".into()));
    }
    Ok(RankingDef { name: decl.name.clone(), mode, terms })
}

/// Final metric values of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub sid: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub rank: usize,
    pub sid: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub sid: String,
    pub reason: String,
}

fn split_complete<'a>(rows: &'a [Row], def: &RankingDef) -> (Vec<&'a Row>, Vec<Excluded>) {
    let mut keep = Vec::new();
    let mut out = Vec::new();
    for r in rows {
        match def.terms.iter().find(|t| !r.values.get(&t.metric).is_some_and(|v| v.is_finite())) {
            Some(t) => out.push(Excluded { sid: r.sid.clone(), reason: format!("missing metric {}", t.metric) }),
            None => keep.push(r),
        }
    }
    (keep, out)
}

pub const SCORE_QUANTUM: f64 = 1e-9;

/// Weighted sum of min-max normalised metrics, oriented so that higher is
/// better. Scores are rounded to [`SCORE_QUANTUM`] and ties go to the
/// smaller scenario id.
pub fn rank_total(rows: &[Row], def: &RankingDef) -> (Vec<Entry>, Vec<Excluded>) {
    let (keep, excluded) = split_complete(rows, def);
    let mut score = vec![0.0; keep.len()];
    for t in &def.terms {
        let col: Vec<f64> = keep.iter().map(|r| r.values[&t.metric]).collect();
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (s, v) in score.iter_mut().zip(&col) {
            let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            let good = match t.direction {
                Direction::Min => 1.0 - norm,
                Direction::Max => norm,
            };
            *s += t.weight * good;
        }
    }
    let mut entries: Vec<Entry> = keep
        .iter()
        .zip(score)
        .map(|(r, s)| Entry { rank: 0, sid: r.sid.clone(), score: (s / SCORE_QUANTUM).round() * SCORE_QUANTUM })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.sid.cmp(&b.sid)));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    (entries, excluded)
}

/// `a` is at least as good as `b` everywhere and better somewhere.
pub fn dominates(a: &Row, b: &Row, terms: &[Term]) -> bool {
    let mut strict = false;
    for t in terms {
        let (x, y) = (a.values[&t.metric], b.values[&t.metric]);
        let (better, worse) = match t.direction {
            Direction::Min => (x < y, x > y),
            Direction::Max => (x > y, x < y),
        };
        if worse {
            return false;
        }
        strict |= better;
    }
    strict
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DominanceGraph {
    pub nodes: Vec<String>,
    /// (better, worse), by scenario id.
    pub edges: Vec<(String, String)>,
    /// Pareto fronts, best first.
    pub strata: Vec<Vec<String>>,
}

pub fn rank_partial(rows: &[Row], def: &RankingDef) -> (DominanceGraph, Vec<Excluded>) {
    let (mut keep, excluded) = split_complete(rows, def);
    keep.sort_by(|a, b| a.sid.cmp(&b.sid));
    let mut g = DominanceGraph { nodes: keep.iter().map(|r| r.sid.clone()).collect(), ..Default::default() };
    let n = keep.len();
    let mut beaten_by = vec![BTreeSet::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dominates(keep[i], keep[j], &def.terms) {
                g.edges.push((keep[i].sid.clone(), keep[j].sid.clone()));
                beaten_by[j].insert(i);
            }
        }
    }
    let mut left: BTreeSet<usize> = (0..n).collect();
    while !left.is_empty() {
        let front: Vec<usize> =
            left.iter().copied().filter(|j| beaten_by[*j].iter().all(|i| !left.contains(i))).collect();
        // dominance is a strict order, so some element is always maximal
        debug_assert!(!front.is_empty());
        for j in &front {
            left.remove(j);
        }
        g.strata.push(front.into_iter().map(|j| keep[j].sid.clone()).collect());
    }
    (g, excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Board {
    /// Scenarios are only compared within one problem.
    pub problem: String,
    pub entries: Vec<Entry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<DominanceGraph>,
    pub excluded: Vec<Excluded>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub ranking: RankingDef,
    pub boards: Vec<Board>,
}

/// One leaderboard per ranking, one board per problem within it.
pub fn build_leaderboard(def: &RankingDef, rows_by_problem: &BTreeMap<String, Vec<Row>>) -> Leaderboard {
    let boards = rows_by_problem
        .iter()
        .map(|(problem, rows)| match def.mode {
            Mode::Total => {
                let (entries, excluded) = rank_total(rows, def);
                Board { problem: problem.clone(), entries, graph: None, excluded }
            }
            Mode::Partial => {
                let (graph, excluded) = rank_partial(rows, def);
                let entries = graph
                    .strata
                    .iter()
                    .enumerate()
                    .flat_map(|(i, s)| s.iter().map(move |sid| Entry { rank: i + 1, sid: sid.clone(), score: 0.0 }))
                    .collect();
                Board { problem: problem.clone(), entries, graph: Some(graph), excluded }
            }
        })
        .collect();
    Leaderboard { ranking: def.clone(), boards }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sail::parse;

    fn row(sid: &str, vals: &[(&str, f64)]) -> Row {
        Row { sid: sid.into(), values: vals.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }

    fn def(terms: &[(&str, f64)]) -> RankingDef {
        RankingDef {
            name: "r".into(),
            mode: Mode::Total,
            terms: terms
                .iter()
                .map(|(m, w)| Term { metric: m.to_string(), weight: *w, direction: Direction::Min })
                .collect(),
        }
    }

    #[test]
    fn reads_rank_terms() {
        let d = parse(r#"ranking "r" { meta mode = "partial" Test.Rank("a", 0.7, "min") Test.Rank("b", 0.3, "max") }"#)
            .unwrap();
        let r = ranking_def(&d[0]).unwrap();
        assert_eq!(r.mode, Mode::Partial);
        assert_eq!(r.terms[1], Term { metric: "b".into(), weight: 0.3, direction: Direction::Max });
        let d = parse(r#"ranking "r" { Test.Rank("a", 1, "sideways") }"#).unwrap();
        assert!(ranking_def(&d[0]).is_err());
    }

    #[test]
    fn single_and_dominating() {
        let d = def(&[("a", 1.0), ("b", 5.0)]);
        let (e, _) = rank_total(&[row("x", &[("a", 3.0), ("b", 9.0)])], &d);
        assert_eq!(e[0].rank, 1);
        let (e, _) = rank_total(&[row("x", &[("a", 3.0), ("b", 9.0)]), row("y", &[("a", 1.0), ("b", 2.0)])], &d);
        assert_eq!(e[0].sid, "y");
    }

    #[test]
    fn hand_computed_three_way() {
        // a: 0,5,10 -> goodness 1, .5, 0 ; b: 4,0,2 -> 0, 1, .5
        let rows = [
            row("s1", &[("a", 0.0), ("b", 4.0)]),
            row("s2", &[("a", 5.0), ("b", 0.0)]),
            row("s3", &[("a", 10.0), ("b", 2.0)]),
        ];
        let (e, _) = rank_total(&rows, &def(&[("a", 0.5), ("b", 0.5)]));
        let got: Vec<(&str, f64)> = e.iter().map(|e| (e.sid.as_str(), e.score)).collect();
        assert_eq!(got, vec![("s2", 0.75), ("s1", 0.5), ("s3", 0.25)]);
    }

    #[test]
    fn missing_metric_excludes() {
        let (e, x) = rank_total(&[row("x", &[("a", 1.0)]), row("y", &[("a", 2.0), ("b", 1.0)])], &def(&[("a", 1.0), ("b", 1.0)]));
        assert_eq!(e.len(), 1);
        assert_eq!(x, vec![Excluded { sid: "x".into(), reason: "missing metric b".into() }]);
    }

    #[test]
    fn partial_order_basics() {
        let d = def(&[("a", 1.0), ("b", 1.0)]);
        let (g, _) = rank_partial(&[row("x", &[("a", 1.0), ("b", 1.0)]), row("y", &[("a", 1.0), ("b", 1.0)])], &d);
        assert!(g.edges.is_empty());
        assert_eq!(g.strata, vec![vec!["x".to_string(), "y".to_string()]]);
        let (g, _) = rank_partial(&[row("x", &[("a", 1.0), ("b", 1.0)]), row("y", &[("a", 2.0), ("b", 1.0)])], &d);
        assert_eq!(g.edges, vec![("x".to_string(), "y".to_string())]);
        assert_eq!(g.strata.len(), 2);
    }
}
