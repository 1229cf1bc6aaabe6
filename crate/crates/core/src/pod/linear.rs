//! Least squares over polynomial features, solved in closed form by SVD.

use super::solver::{
    feature_rows, Head, Solver, SolverError, SolverFactory, SolverRegistry, SolverSpec, TaskIo, TrainState,
};
use crate::data::SplitMix64;
use crate::value::Value;
use nalgebra::DMatrix;

/// Monomials of total degree ≤ `degree` over `n` variables, as sorted index
/// lists; the empty list is the bias.
pub fn monomials(n: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &frontier {
            let start = m.last().copied().unwrap_or(0);
            for i in start..n {
                let mut q = m.clone();
                q.push(i);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn expand(x: &[f64], terms: &[Vec<usize>]) -> Vec<f64> {
    terms.iter().map(|t| t.iter().map(|&i| x[i]).product()).collect()
}

/// d(term)/dx_k for every term.
fn expand_grad(x: &[f64], terms: &[Vec<usize>], k: usize) -> Vec<f64> {
    terms
        .iter()
        .map(|t| {
            let mut s = 0.0;
            for (pos, &i) in t.iter().enumerate() {
                if i == k {
                    s += t.iter().enumerate().filter(|(p, _)| *p != pos).map(|(_, &j)| x[j]).product::<f64>();
                }
            }
            s
        })
        .collect()
}

pub struct LinearSolver {
    pub degree: usize,
    pub in_dim: usize,
    pub out: usize,
    pub head: Option<Head>,
    terms: Vec<Vec<usize>>,
    /// `w[t * out + o]`.
    pub w: Vec<f64>,
}

impl LinearSolver {
    pub fn new(degree: usize) -> LinearSolver {
        LinearSolver { degree, in_dim: 0, out: 0, head: None, terms: Vec::new(), w: Vec::new() }
    }

    fn output(&self, f: &[f64]) -> Vec<f64> {
        let phi = expand(f, &self.terms);
        (0..self.out).map(|o| phi.iter().enumerate().map(|(t, p)| p * self.w[t * self.out + o]).sum()).collect()
    }

    /// Weights for the bias followed by each input, when degree is 1.
    pub fn affine_weights(&self) -> Vec<f64> {
        (0..self.terms.len()).map(|t| self.w[t * self.out]).collect()
    }
}

impl Solver for LinearSolver {
    fn name(&self) -> &str {
        "linear"
    }

    fn configure(&mut self, io: TaskIo) -> Result<(), SolverError> {
        if self.in_dim != io.in_dim || self.out != io.head.width() || self.terms.is_empty() {
            self.in_dim = io.in_dim;
            self.out = io.head.width();
            self.terms = monomials(io.in_dim, self.degree);
            self.w = vec![0.0; self.terms.len() * self.out];
        }
        self.head = Some(io.head);
        Ok(())
    }

    fn train_epoch(&mut self, x: &[Value], y: &[Vec<f64>], _: &mut SplitMix64) -> Result<Vec<f64>, SolverError> {
        let rows = feature_rows(x, Some(self.in_dim))?;
        let n = rows.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let p = self.terms.len();
        let phi: Vec<f64> = rows.iter().flat_map(|r| expand(r, &self.terms)).collect();
        let a = DMatrix::from_row_slice(n, p, &phi);
        let yflat: Vec<f64> = y.iter().flat_map(|r| r.iter().copied()).collect();
        if yflat.len() != n * self.out {
            return Err(SolverError::BadInput(format!("targets are not {} wide", self.out)));
        }
        let b = DMatrix::from_row_slice(n, self.out, &yflat);
        let svd = a.svd(true, true);
        let tol = svd.singular_values.max() * 1e-12 * (n.max(p) as f64);
        let sol = svd.solve(&b, tol).map_err(|e| SolverError::BadInput(e.to_string()))?;
        for t in 0..p {
            for o in 0..self.out {
                self.w[t * self.out + o] = sol[(t, o)];
            }
        }
        if let Some(i) = self.w.iter().position(|v| !v.is_finite()) {
            return Err(SolverError::TrainingDiverged(format!("weight {i} is {}", self.w[i])));
        }
        let head = self.head.unwrap_or(Head::Regress(self.out));
        Ok(rows.iter().zip(y).map(|(r, t)| super::solver::sample_loss(head, &self.output(r), t)).collect())
    }

    fn predict(&mut self, x: &[Value]) -> Result<Vec<Vec<f64>>, SolverError> {
        let rows = feature_rows(x, Some(self.in_dim))?;
        Ok(rows.iter().map(|r| self.output(r)).collect())
    }

    fn input_gradient(&mut self, x: &Value) -> Result<Vec<f64>, SolverError> {
        let f = x.features();
        if f.len() != self.in_dim {
            return Err(SolverError::BadInput(format!("expected {} features, got {}", self.in_dim, f.len())));
        }
        Ok((0..self.in_dim)
            .map(|k| {
                expand_grad(&f, &self.terms, k).iter().enumerate().map(|(t, d)| d * self.w[t * self.out]).sum()
            })
            .collect())
    }

    fn state(&self) -> TrainState {
        let mut s = TrainState::empty("linear");
        if self.terms.is_empty() {
            return s;
        }
        s.shapes = vec![("dims".into(), vec![2]), ("w".into(), vec![self.terms.len(), self.out])];
        s.weights = [vec![self.in_dim as f64, self.degree as f64], self.w.clone()].concat();
        s
    }

    fn restore(&mut self, s: &TrainState) -> Result<(), SolverError> {
        if s.is_empty() {
            *self = LinearSolver::new(self.degree);
            return Ok(());
        }
        s.check_finite()?;
        let (_, dims) = s.tensor("dims").ok_or_else(|| SolverError::BadState("missing dims".into()))?;
        let (shape, w) = s.tensor("w").ok_or_else(|| SolverError::BadState("missing w".into()))?;
        let (in_dim, degree) = (dims[0] as usize, dims[1] as usize);
        let terms = monomials(in_dim, degree);
        if terms.len() != shape[0] {
            return Err(SolverError::ShapeMismatch(format!("{} terms vs {}", terms.len(), shape[0])));
        }
        self.in_dim = in_dim;
        self.degree = degree;
        self.out = shape[1];
        self.terms = terms;
        self.w = w.to_vec();
        Ok(())
    }
}

pub struct LinearFactory;

impl SolverFactory for LinearFactory {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn build(&self, spec: &SolverSpec, _: &SolverRegistry) -> Result<Box<dyn Solver>, SolverError> {
        let d = spec.num("degree", 1.0);
        if !(1.0..=3.0).contains(&d) {
            return Err(SolverError::BadInput(format!("degree {d}")));
        }
        Ok(Box::new(LinearSolver::new(d as usize)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(2, 1), vec![vec![], vec![0], vec![1]]);
        assert_eq!(monomials(24, 2).len(), 1 + 24 + 300);
        assert_eq!(monomials(3, 3).len(), 20);
    }

    #[test]
    fn recovers_noiseless_plane() {
        let mut s = LinearSolver::new(1);
        s.configure(TaskIo { in_dim: 2, head: Head::Regress(1) }).unwrap();
        let mut rng = SplitMix64::new(4);
        let xs: Vec<Value> = (0..50).map(|_| Value::vector(vec![rng.normal(), rng.normal()])).collect();
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .map(|v| {
                let f = v.features();
                vec![2.0 * f[0] - f[1] + 1.0]
            })
            .collect();
        s.train_epoch(&xs, &ys, &mut rng).unwrap();
        let w = s.affine_weights();
        for (got, want) in w.iter().zip([1.0, 2.0, -1.0]) {
            assert!((got - want).abs() < 1e-9, "{w:?}");
        }
        assert_eq!(s.input_gradient(&xs[0]).unwrap().len(), 2);
    }

    #[test]
    fn untrained_predicts_zero_and_state_round_trips() {
        let mut s = LinearSolver::new(2);
        s.configure(TaskIo { in_dim: 3, head: Head::Regress(1) }).unwrap();
        let x = Value::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.predict(std::slice::from_ref(&x)).unwrap(), vec![vec![0.0]]);
        s.w.iter_mut().enumerate().for_each(|(i, w)| *w = i as f64 * 0.1);
        let st = s.state();
        let mut t = LinearSolver::new(1);
        t.restore(&st).unwrap();
        assert_eq!(t.predict(std::slice::from_ref(&x)).unwrap(), s.predict(std::slice::from_ref(&x)).unwrap());
    }

    #[test]
    fn quadratic_gradient_is_analytic() {
        let mut s = LinearSolver::new(2);
        s.configure(TaskIo { in_dim: 2, head: Head::Regress(1) }).unwrap();
        // terms: 1, x0, x1, x0x0, x0x1, x1x1
        s.w = vec![0.0, 1.0, 0.0, 3.0, 2.0, 0.0];
        let g = s.input_gradient(&Value::vector(vec![0.5, 2.0])).unwrap();
        assert_eq!(g, vec![1.0 + 6.0 * 0.5 + 2.0 * 2.0, 2.0 * 0.5]);
    }
}
