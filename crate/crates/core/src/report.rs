//! Markdown and CSV reports.

use crate::metrics::{combine_work_precision, MeasurementRecord, Phase, WorkPoint};
use crate::pipeline::{Failure, LeaderboardFile, PlanFile, SkipsFile};
use crate::ranking::{Direction, Mode};
use crate::repo::RepoIndex;
use crate::sail::ModuleKind;
use std::collections::BTreeMap;
use std::fmt::Write;

/// Most work–precision points printed per scenario; the CSV has them all.
pub const MAX_CURVE_ROWS: usize = 12;

pub struct ReportInput<'a> {
    pub plan: &'a PlanFile,
    pub skips: &'a SkipsFile,
    pub records: &'a [MeasurementRecord],
    pub failures: &'a [Failure],
    pub leaderboards: &'a LeaderboardFile,
    /// Axes of the work–precision curves.
    pub time_metric: Option<String>,
    pub loss_metric: Option<String>,
}

pub struct Report {
    pub markdown: String,
    pub csv: String,
    /// No scenario produced a record.
    pub empty: bool,
    pub curves: usize,
}

/// Work axis: the first metric declared with a time axis. Precision axis:
/// a mean-loss metric when there is one, else the first loss-axis metric.
pub fn curve_axes(repo: &RepoIndex) -> (Option<String>, Option<String>) {
    let metrics: Vec<_> = repo.of_kind(ModuleKind::Metric).collect();
    let axis = |r: &&crate::repo::ModuleRecord| r.decl.meta_str("axis").map(str::to_string);
    let time = metrics.iter().find(|r| axis(r).as_deref() == Some("time")).map(|r| r.name.clone());
    let loss = metrics
        .iter()
        .find(|r| r.decl.meta_str("builtin") == Some("mean_loss"))
        .or_else(|| metrics.iter().find(|r| axis(r).as_deref() == Some("loss")))
        .map(|r| r.name.clone());
    (time, loss)
}

fn fmt_v(v: f64) -> String {
    if v == 0.0 || (1e-3..1e6).contains(&v.abs()) {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

/// Up to `max` points: both ends plus evenly spaced interior ones.
fn thin(points: &[WorkPoint], max: usize) -> Vec<&WorkPoint> {
    if points.len() <= max {
        return points.iter().collect();
    }
    let last = points.len() - 1;
    let mut idx: Vec<usize> = (0..max).map(|i| i * last / (max - 1)).collect();
    idx.dedup();
    idx.into_iter().map(|i| &points[i]).collect()
}

pub fn emit_report(input: &ReportInput) -> Report {
    let mut md = String::new();
    let plan = input.plan;
    let label: BTreeMap<&str, &str> =
        plan.scenarios.iter().map(|p| (p.scenario.sid.as_str(), p.label.as_str())).collect();
    let ran: std::collections::BTreeSet<&str> = input.records.iter().map(|r| r.sid.as_str()).collect();

    let _ = writeln!(md, "# Benchmark report\n");
    let _ = writeln!(
        md,
        "Seed {}. {} feasible tuples, {} scenarios planned, {} pruned, {} with measurements, {} failed.\n",
        plan.seed,
        plan.tuples,
        plan.scenarios.len(),
        input.skips.pruned.len(),
        ran.len(),
        input.failures.len()
    );

    let empty = input.records.is_empty();
    if empty {
        let _ = writeln!(md, "## No measurements\n");
        let _ = writeln!(md, "No scenario produced a measurement record, so there is nothing to rank.\n");
    }

    for lb in &input.leaderboards.leaderboards {
        let def = &lb.ranking;
        let mode = match def.mode {
            Mode::Total => "total",
            Mode::Partial => "partial",
        };
        let _ = writeln!(md, "## Leaderboard `{}` ({mode} order)\n", def.name);
        let terms: Vec<String> = def
            .terms
            .iter()
            .map(|t| {
                let dir = match t.direction {
                    Direction::Min => "lower is better",
                    Direction::Max => "higher is better",
                };
                format!("`{}` weight {} ({dir})", t.metric, t.weight)
            })
            .collect();
        let _ = writeln!(md, "Terms: {}.\n", terms.join("; "));
        for b in &lb.boards {
            let _ = writeln!(md, "### {}\n", b.problem);
            let mut head = String::from("| rank | scenario | sid |");
            let mut rule = String::from("|---:|---|---|");
            if def.mode == Mode::Total {
                head.push_str(" score |");
                rule.push_str("---:|");
            }
            for t in &def.terms {
                let _ = write!(head, " {} |", t.metric);
                rule.push_str("---:|");
            }
            let _ = writeln!(md, "{head}\n{rule}");
            for e in &b.entries {
                let mut row = format!("| {} | {} | `{}` |", e.rank, label.get(e.sid.as_str()).unwrap_or(&"?"), e.sid);
                if def.mode == Mode::Total {
                    let _ = write!(row, " {:.4} |", e.score);
                }
                for t in &def.terms {
                    let v = input
                        .records
                        .iter()
                        .find(|r| r.sid == e.sid && r.phase == Phase::Test && r.it == 0 && r.metric == t.metric);
                    let _ = write!(row, " {} |", v.map_or("".to_string(), |r| fmt_v(r.v)));
                }
                let _ = writeln!(md, "{row}");
            }
            if let Some(g) = &b.graph {
                let _ = writeln!(md, "\n{} dominance edges over {} strata.", g.edges.len(), g.strata.len());
            }
            for x in &b.excluded {
                let _ = writeln!(md, "\nExcluded `{}`: {}.", x.sid, x.reason);
            }
            let _ = writeln!(md);
        }
    }

    let mut curves = 0;
    if let (Some(t), Some(l)) = (&input.time_metric, &input.loss_metric) {
        if let Ok(cs) = combine_work_precision(input.records, t, l) {
            let order: BTreeMap<&str, usize> =
                plan.scenarios.iter().enumerate().map(|(i, p)| (p.scenario.sid.as_str(), i)).collect();
            let mut cs = cs;
            cs.sort_by_key(|c| order.get(c.sid.as_str()).copied().unwrap_or(usize::MAX));
            curves = cs.len();
            if !cs.is_empty() {
                let _ = writeln!(md, "## Work–precision\n");
                let _ = writeln!(md, "Work is `{t}` in ms, precision is training `{l}`, one point per epoch.\n");
            }
            for c in &cs {
                let shown = thin(&c.points, MAX_CURVE_ROWS);
                let _ = writeln!(md, "### {} (`{}`)\n", label.get(c.sid.as_str()).unwrap_or(&"?"), c.sid);
                if shown.len() < c.points.len() {
                    let _ = writeln!(md, "{} of {} points shown.\n", shown.len(), c.points.len());
                }
                let _ = writeln!(md, "| epoch | {t} | {l} |\n|---:|---:|---:|");
                for p in shown {
                    let _ = writeln!(md, "| {} | {} | {} |", p.it, fmt_v(p.work), fmt_v(p.precision));
                }
                let _ = writeln!(md);
            }
        }
    }

    let fixtures: Vec<&MeasurementRecord> =
        input.records.iter().filter(|r| r.phase == Phase::Test && r.metric.starts_with("fixture_")).collect();
    if !fixtures.is_empty() {
        let _ = writeln!(md, "## Trajectory fixtures\n");
        let _ = writeln!(md, "RMSD of the model-force trajectory against the reference simulator, averaged over fixtures.\n");
        let _ = writeln!(md, "| scenario | fixtures | position RMSD | velocity RMSD |\n|---|---:|---:|---:|");
        let mut by: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &fixtures {
            let e = by.entry(&r.sid).or_default();
            match r.metric.as_str() {
                "fixture_pos_rmsd" => e.0.push(r.v),
                "fixture_vel_rmsd" => e.1.push(r.v),
                _ => {}
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        for p in &plan.scenarios {
            if let Some((pos, vel)) = by.get(p.scenario.sid.as_str()) {
                let _ = writeln!(md, "| {} | {} | {} | {} |", p.label, pos.len(), fmt_v(mean(pos)), fmt_v(mean(vel)));
            }
        }
        let _ = writeln!(md);
    }

    if !input.failures.is_empty() {
        let _ = writeln!(md, "## Failed scenarios\n");
        for f in input.failures {
            let _ = writeln!(md, "- {} (`{}`): {}", f.label, f.sid, f.error);
        }
        let _ = writeln!(md);
    }

    let _ = writeln!(md, "## Appendix: skipped modules\n");
    if input.skips.skips.is_empty() {
        let _ = writeln!(md, "None.\n");
    } else {
        let _ = writeln!(md, "| module | reason | times | first context |\n|---|---|---:|---|");
        for s in &input.skips.skips {
            let _ = writeln!(md, "| {} | {} | {} | {} |", s.module, s.reason, s.count, s.context);
        }
        let _ = writeln!(md);
    }
    let _ = writeln!(md, "## Appendix: pruned scenarios\n");
    if input.skips.pruned.is_empty() {
        let _ = writeln!(md, "None.");
    } else {
        for p in &input.skips.pruned {
            let _ = writeln!(md, "- {} (`{}`): {}", p.label, p.sid, p.reason);
        }
    }

    Report { markdown: md, csv: records_csv(plan, input.records), empty, curves }
}

pub const CSV_HEADER: [&str; 12] =
    ["sid", "scenario", "problem", "model", "hardware", "software", "phase", "it", "metric", "v", "wall_ms", "seed"];

/// One row per measurement record.
pub fn records_csv(plan: &PlanFile, records: &[MeasurementRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in records {
        let p = plan.get(&r.sid);
        let b = |f: fn(&crate::pipeline::PlannedScenario) -> String| p.map(f).unwrap_or_default();
        let phase = match r.phase {
            Phase::Train => "train",
            Phase::Test => "test",
        };
        w.write_record([
            r.sid.clone(),
            b(|p| p.label.clone()),
            b(|p| p.scenario.problem.label()),
            b(|p| p.scenario.model.label()),
            b(|p| p.scenario.hardware.label()),
            b(|p| p.scenario.software.label()),
            phase.to_string(),
            r.it.to_string(),
            r.metric.clone(),
            r.v.to_string(),
            r.wall_ms.to_string(),
            r.seed.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}
