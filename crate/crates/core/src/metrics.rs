//! Iterative metrics and the measurement record format.

use crate::sail::ast::Literal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("unknown builtin metric `{0}`")]
    UnknownBuiltin(String),
    #[error("no `{0}` axis in the records")]
    MissingAxis(String),
}

/// One thing a metric may look at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub loss: Option<f64>,
    /// Milliseconds since the pod started.
    pub elapsed_ms: f64,
}

pub trait MetricState: Send {
    fn step(&mut self, obs: &Observation);
    /// `None` when nothing was observed; calling twice gives the same value.
    fn finalize(&self) -> Option<f64>;
}

#[derive(Debug, Default)]
pub struct Wallclock {
    last: Option<f64>,
}

impl MetricState for Wallclock {
    fn step(&mut self, obs: &Observation) {
        self.last = Some(obs.elapsed_ms);
    }
    fn finalize(&self) -> Option<f64> {
        self.last
    }
}

#[derive(Debug, Default)]
pub struct MeanLoss {
    sum: f64,
    n: usize,
}

impl MetricState for MeanLoss {
    fn step(&mut self, obs: &Observation) {
        if let Some(l) = obs.loss {
            self.sum += l;
            self.n += 1;
        }
    }
    fn finalize(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Nearest-rank percentile: the smallest value with at least `p` percent
/// of the sample at or below it.
pub fn nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

#[derive(Debug)]
pub struct PercentileLoss {
    pub p: f64,
    reservoir: Vec<f64>,
}

impl PercentileLoss {
    pub fn new(p: f64) -> PercentileLoss {
        PercentileLoss { p, reservoir: Vec::new() }
    }
}

impl MetricState for PercentileLoss {
    fn step(&mut self, obs: &Observation) {
        if let Some(l) = obs.loss {
            self.reservoir.push(l);
        }
    }
    fn finalize(&self) -> Option<f64> {
        nearest_rank(&self.reservoir, self.p)
    }
}

#[derive(Debug)]
pub struct HardFail {
    pub threshold: f64,
    seen: bool,
    failed: bool,
}

impl HardFail {
    pub fn new(threshold: f64) -> HardFail {
        HardFail { threshold, seen: false, failed: false }
    }
}

impl MetricState for HardFail {
    fn step(&mut self, obs: &Observation) {
        if let Some(l) = obs.loss {
            self.seen = true;
            self.failed |= l > self.threshold;
        }
    }
    fn finalize(&self) -> Option<f64> {
        self.seen.then_some(if self.failed { 1.0 } else { 0.0 })
    }
}

type MetricCtor = dyn Fn(&BTreeMap<String, Literal>) -> Box<dyn MetricState> + Send + Sync;

/// Builtin metric kinds by name; a metric module picks one with its
/// `builtin` meta and configures it with the rest.
#[derive(Clone, Default)]
pub struct MetricRegistry {
    ctors: BTreeMap<String, Arc<MetricCtor>>,
}

impl MetricRegistry {
    pub fn builtin() -> MetricRegistry {
        let mut r = MetricRegistry::default();
        let num = |m: &BTreeMap<String, Literal>, k: &str, d: f64| m.get(k).and_then(Literal::as_f64).unwrap_or(d);
        r.register("wallclock", Arc::new(|_| Box::new(Wallclock::default())));
        r.register("mean_loss", Arc::new(|_| Box::new(MeanLoss::default())));
        r.register("percentile_loss", Arc::new(move |m| Box::new(PercentileLoss::new(num(m, "p", 99.0)))));
        r.register("hard_fail", Arc::new(move |m| Box::new(HardFail::new(num(m, "threshold", 0.5)))));
        r
    }

    pub fn register(&mut self, name: &str, ctor: Arc<MetricCtor>) {
        self.ctors.insert(name.to_string(), ctor);
    }

    pub fn create(&self, builtin: &str, meta: &BTreeMap<String, Literal>) -> Result<Box<dyn MetricState>, MetricError> {
        self.ctors.get(builtin).map(|c| c(meta)).ok_or_else(|| MetricError::UnknownBuiltin(builtin.into()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ctors.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub sid: String,
    pub phase: Phase,
    pub it: u64,
    pub metric: String,
    pub v: f64,
    pub wall_ms: u64,
    pub seed: u64,
}

impl MeasurementRecord {
    pub fn key(&self) -> (&str, Phase, u64, &str) {
        (&self.sid, self.phase, self.it, &self.metric)
    }
}

pub fn to_jsonl(records: &[MeasurementRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

pub fn from_jsonl(text: &str) -> Result<Vec<MeasurementRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkPoint {
    pub it: u64,
    pub work: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkPrecisionCurve {
    pub sid: String,
    pub points: Vec<WorkPoint>,
}

/// Pairs the time-like and loss-like training records of each scenario by
/// epoch.
pub fn combine_work_precision(
    records: &[MeasurementRecord],
    time_metric: &str,
    loss_metric: &str,
) -> Result<Vec<WorkPrecisionCurve>, MetricError> {
    let train = || records.iter().filter(|r| r.phase == Phase::Train);
    if !train().any(|r| r.metric == time_metric) {
        return Err(MetricError::MissingAxis(time_metric.into()));
    }
    if !train().any(|r| r.metric == loss_metric) {
        return Err(MetricError::MissingAxis(loss_metric.into()));
    }
    type Slot = (Option<f64>, Option<f64>);
    let mut by: BTreeMap<&str, BTreeMap<u64, Slot>> = BTreeMap::new();
    for r in train() {
        let slot = by.entry(&r.sid).or_default().entry(r.it).or_default();
        if r.metric == time_metric {
            slot.0 = Some(r.v);
        } else if r.metric == loss_metric {
            slot.1 = Some(r.v);
        }
    }
    let mut out = Vec::new();
    for (sid, epochs) in by {
        let mut points: Vec<WorkPoint> = epochs
            .into_iter()
            .filter_map(|(it, (w, p))| Some(WorkPoint { it, work: w?, precision: p? }))
            .collect();
        if points.is_empty() {
            continue;
        }
        points.sort_by(|a, b| a.work.total_cmp(&b.work).then(a.it.cmp(&b.it)));
        out.push(WorkPrecisionCurve { sid: sid.to_string(), points });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed(m: &mut dyn MetricState, losses: &[f64]) {
        for (i, l) in losses.iter().enumerate() {
            m.step(&Observation { loss: Some(*l), elapsed_ms: i as f64 });
        }
    }

    #[test]
    fn builtins() {
        let r = MetricRegistry::builtin();
        let mut p = r.create("percentile_loss", &BTreeMap::new()).unwrap();
        feed(p.as_mut(), &(1..=100).map(f64::from).collect::<Vec<_>>());
        assert_eq!(p.finalize(), Some(99.0));
        let mut h = HardFail::new(0.5);
        feed(&mut h, &[0.1, 0.2]);
        assert_eq!(h.finalize(), Some(0.0));
        feed(&mut h, &[0.7]);
        assert_eq!(h.finalize(), Some(1.0));
        let mut m = MeanLoss::default();
        feed(&mut m, &[2.0, 4.0]);
        assert_eq!(m.finalize(), Some(3.0));
        assert_eq!(m.finalize(), Some(3.0));
        assert_eq!(MeanLoss::default().finalize(), None);
        assert!(r.create("nope", &BTreeMap::new()).is_err());
    }

    #[test]
    fn nearest_rank_edges() {
        assert_eq!(nearest_rank(&[], 50.0), None);
        assert_eq!(nearest_rank(&[5.0], 99.0), Some(5.0));
        assert_eq!(nearest_rank(&[3.0, 1.0, 2.0, 4.0], 50.0), Some(2.0));
        assert_eq!(nearest_rank(&[3.0, 1.0, 2.0, 4.0], 0.0), Some(1.0));
        assert_eq!(nearest_rank(&[3.0, 1.0, 2.0, 4.0], 100.0), Some(4.0));
    }

    fn rec(sid: &str, it: u64, metric: &str, v: f64) -> MeasurementRecord {
        MeasurementRecord { sid: sid.into(), phase: Phase::Train, it, metric: metric.into(), v, wall_ms: 0, seed: 1 }
    }

    #[test]
    fn work_precision_pairs_epochs() {
        let rs = vec![
            rec("a", 2, "wallclock", 30.0),
            rec("a", 0, "wallclock", 10.0),
            rec("a", 1, "wallclock", 20.0),
            rec("a", 0, "mean_loss", 0.9),
            rec("a", 1, "mean_loss", 0.5),
            rec("a", 2, "mean_loss", 0.4),
        ];
        let c = combine_work_precision(&rs, "wallclock", "mean_loss").unwrap();
        assert_eq!(c.len(), 1);
        let w: Vec<f64> = c[0].points.iter().map(|p| p.work).collect();
        assert_eq!(w, vec![10.0, 20.0, 30.0]);
        let no_time: Vec<_> = rs.into_iter().filter(|r| r.metric != "wallclock").collect();
        assert_eq!(
            combine_work_precision(&no_time, "wallclock", "mean_loss"),
            Err(MetricError::MissingAxis("wallclock".into()))
        );
    }

    #[test]
    fn record_line_has_exact_fields() {
        let r = MeasurementRecord {
            sid: "s".into(),
            phase: Phase::Test,
            it: 17,
            metric: "mean_loss".into(),
            v: 0.123,
            wall_ms: 4,
            seed: 1,
        };
        assert_eq!(
            to_jsonl(std::slice::from_ref(&r)),
            "{\"sid\":\"s\",\"phase\":\"test\",\"it\":17,\"metric\":\"mean_loss\",\"v\":0.123,\"wall_ms\":4,\"seed\":1}\n"
        );
        assert_eq!(from_jsonl(&to_jsonl(std::slice::from_ref(&r))).unwrap(), vec![r]);
    }
}
