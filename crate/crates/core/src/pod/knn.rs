//! k nearest neighbours over the most recent training segment. Nothing is
//! learned, so the persisted state is always empty.

use super::solver::{
    argmax, feature_rows, Head, Solver, SolverError, SolverFactory, SolverRegistry, SolverSpec, TaskIo, TrainState,
};
use crate::data::SplitMix64;
use crate::value::Value;

pub struct KnnSolver {
    pub k: usize,
    io: Option<TaskIo>,
    memory: Vec<(Vec<f64>, Vec<f64>)>,
}

impl KnnSolver {
    pub fn new(k: usize) -> KnnSolver {
        KnnSolver { k: k.max(1), io: None, memory: Vec::new() }
    }

    fn query(&self, f: &[f64]) -> Vec<f64> {
        let width = self.io.map(|io| io.head.width()).unwrap_or(0);
        if self.memory.is_empty() {
            return vec![0.0; width];
        }
        let mut d: Vec<(f64, usize)> = self
            .memory
            .iter()
            .enumerate()
            .map(|(i, (x, _))| (x.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &d[..self.k.min(d.len())];
        match self.io.map(|io| io.head) {
            Some(Head::Classify(k)) => {
                let mut votes = vec![0.0; k];
                for &(_, i) in near {
                    votes[argmax(&self.memory[i].1)] += 1.0;
                }
                let win = argmax(&votes);
                (0..k).map(|c| (c == win) as u8 as f64).collect()
            }
            _ => {
                let mut avg = vec![0.0; width];
                for &(_, i) in near {
                    for (a, t) in avg.iter_mut().zip(&self.memory[i].1) {
                        *a += t / near.len() as f64;
                    }
                }
                avg
            }
        }
    }
}

impl Solver for KnnSolver {
    fn name(&self) -> &str {
        "knn"
    }

    fn configure(&mut self, io: TaskIo) -> Result<(), SolverError> {
        if self.io != Some(io) {
            self.memory.clear();
        }
        self.io = Some(io);
        Ok(())
    }

    fn train_epoch(&mut self, x: &[Value], y: &[Vec<f64>], _: &mut SplitMix64) -> Result<Vec<f64>, SolverError> {
        let rows = feature_rows(x, self.io.map(|io| io.in_dim))?;
        self.memory = rows.into_iter().zip(y.iter().cloned()).collect();
        // leave-one-in: every stored point is its own nearest neighbour at k=1
        let head = self.io.map(|io| io.head).unwrap_or(Head::Regress(0));
        Ok(self.memory.iter().map(|(x, t)| super::solver::sample_loss(head, &self.query(x), t)).collect())
    }

    fn predict(&mut self, x: &[Value]) -> Result<Vec<Vec<f64>>, SolverError> {
        let rows = feature_rows(x, self.io.map(|io| io.in_dim))?;
        Ok(rows.iter().map(|r| self.query(r)).collect())
    }

    fn input_gradient(&mut self, _: &Value) -> Result<Vec<f64>, SolverError> {
        Err(SolverError::Unsupported("knn".into()))
    }

    fn state(&self) -> TrainState {
        TrainState::empty("knn")
    }

    fn restore(&mut self, _: &TrainState) -> Result<(), SolverError> {
        Ok(())
    }
}

pub struct KnnFactory;

impl SolverFactory for KnnFactory {
    fn name(&self) -> &'static str {
        "knn"
    }
    fn build(&self, spec: &SolverSpec, _: &SolverRegistry) -> Result<Box<dyn Solver>, SolverError> {
        Ok(Box::new(KnnSolver::new(spec.num("k", 5.0).max(1.0) as usize)))
    }
}
