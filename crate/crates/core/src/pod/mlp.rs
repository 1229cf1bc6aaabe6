//! One tanh hidden layer, trained by minibatch SGD with hand-written
//! backprop.

use super::solver::{
    feature_rows, Head, Solver, SolverError, SolverFactory, SolverRegistry, SolverSpec, TaskIo, TrainState,
};
use crate::data::{derive_seed, SplitMix64};
use crate::value::Value;

pub const BATCH: usize = 32;

/// Dense(in→hidden) → tanh → Dense(hidden→out). Row-major weights,
/// `w1[i * hidden + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    pub in_dim: usize,
    pub hidden: usize,
    pub out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Input standardization `(x - shift) * scale`, fixed by the first
    /// data the net trains on.
    pub norm: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.uniform(-a, a)).collect()
}

impl MlpNet {
    pub fn new(in_dim: usize, hidden: usize, out: usize, rng: &mut SplitMix64) -> MlpNet {
        let w1 = xavier(in_dim, hidden, rng);
        let w2 = xavier(hidden, out, rng);
        MlpNet { in_dim, hidden, out, w1, b1: vec![0.0; hidden], w2, b2: vec![0.0; out], norm: None }
    }

    /// Fresh output layer, hidden layer kept.
    pub fn with_head(&self, out: usize, rng: &mut SplitMix64) -> MlpNet {
        MlpNet { out, w2: xavier(self.hidden, out, rng), b2: vec![0.0; out], ..self.clone() }
    }

    /// Per-feature mean and inverse spread of `rows`; constant features are only centered.
    pub fn fit_inputs(&mut self, rows: &[Vec<f64>]) {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; self.in_dim];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; self.in_dim];
        for r in rows {
            var.iter_mut().zip(r).zip(&mean).for_each(|((v, x), m)| *v += (x - m).powi(2) / n);
        }
        let scale = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        self.norm = Some((mean, scale));
    }

    fn normalized(&self, x: &[f64]) -> Vec<f64> {
        match &self.norm {
            Some((shift, scale)) => x.iter().zip(shift).zip(scale).map(|((x, m), s)| (x - m) * s).collect(),
            None => x.to_vec(),
        }
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.hidden],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.out],
        }
    }

    /// Hidden activations and raw outputs.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x = &self.normalized(x);
        let mut h = self.b1.clone();
        for (i, xi) in x.iter().enumerate() {
            let row = &self.w1[i * self.hidden..(i + 1) * self.hidden];
            for (hj, w) in h.iter_mut().zip(row) {
                *hj += xi * w;
            }
        }
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut z = self.b2.clone();
        for (j, hj) in h.iter().enumerate() {
            let row = &self.w2[j * self.out..(j + 1) * self.out];
            for (zo, w) in z.iter_mut().zip(row) {
                *zo += hj * w;
            }
        }
        (h, z)
    }

    /// Accumulates weight gradients for one sample and returns dL/dx.
    pub fn backward(&self, x: &[f64], h: &[f64], dz: &[f64], g: &mut MlpGrads) -> Vec<f64> {
        let x = &self.normalized(x);
        let mut da = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            let row = &self.w2[j * self.out..(j + 1) * self.out];
            let mut dh = 0.0;
            for o in 0..self.out {
                g.w2[j * self.out + o] += h[j] * dz[o];
                dh += row[o] * dz[o];
            }
            da[j] = dh * (1.0 - h[j] * h[j]);
        }
        for (o, d) in dz.iter().enumerate() {
            g.b2[o] += d;
        }
        let mut dx = vec![0.0; self.in_dim];
        for i in 0..self.in_dim {
            let row = &self.w1[i * self.hidden..(i + 1) * self.hidden];
            let mut s = 0.0;
            for j in 0..self.hidden {
                g.w1[i * self.hidden + j] += x[i] * da[j];
                s += row[j] * da[j];
            }
            dx[i] = s * self.norm.as_ref().map_or(1.0, |(_, sc)| sc[i]);
        }
        for (j, d) in da.iter().enumerate() {
            g.b1[j] += d;
        }
        dx
    }

    pub fn step(&mut self, g: &MlpGrads, scale: f64) {
        let upd = |w: &mut [f64], d: &[f64]| w.iter_mut().zip(d).for_each(|(w, d)| *w -= scale * d);
        upd(&mut self.w1, &g.w1);
        upd(&mut self.b1, &g.b1);
        upd(&mut self.w2, &g.w2);
        upd(&mut self.b2, &g.b2);
    }

    pub fn flat_params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_flat_params(&mut self, p: &[f64]) {
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.hidden);
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }

    pub fn to_state(&self, solver: &str, epoch: u64, rng: u64) -> TrainState {
        let mut weights = self.flat_params();
        let mut shapes = vec![
            ("w1".into(), vec![self.in_dim, self.hidden]),
            ("b1".into(), vec![self.hidden]),
            ("w2".into(), vec![self.hidden, self.out]),
            ("b2".into(), vec![self.out]),
        ];
        if let Some((shift, scale)) = &self.norm {
            weights.extend(shift.iter().chain(scale));
            shapes.push(("x_shift".into(), vec![self.in_dim]));
            shapes.push(("x_scale".into(), vec![self.in_dim]));
        }
        TrainState { solver: solver.into(), weights, shapes, epoch, rng, blob: None }
    }

    pub fn from_state(s: &TrainState) -> Result<MlpNet, SolverError> {
        let shape = |n: &str| s.tensor(n).ok_or_else(|| SolverError::BadState(format!("missing tensor {n}")));
        let (s1, w1) = shape("w1")?;
        let (_, b1) = shape("b1")?;
        let (s2, w2) = shape("w2")?;
        let (_, b2) = shape("b2")?;
        if s1.len() != 2 || s2.len() != 2 || s1[1] != s2[0] {
            return Err(SolverError::BadState("inconsistent layer shapes".into()));
        }
        Ok(MlpNet {
            in_dim: s1[0],
            hidden: s1[1],
            out: s2[1],
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2.to_vec(),
            norm: match (s.tensor("x_shift"), s.tensor("x_scale")) {
                (Some((_, m)), Some((_, sc))) if m.len() == s1[0] && sc.len() == s1[0] => Some((m.to_vec(), sc.to_vec())),
                _ => None,
            },
        })
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss and dL/dz for one sample.
pub fn head_loss(head: Head, z: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    match head {
        Head::Classify(_) => {
            let p = softmax(z);
            let c = super::solver::argmax(target);
            let loss = -p[c].max(1e-300).ln();
            let dz = p.iter().zip(target).map(|(p, t)| p - t).collect();
            (loss, dz)
        }
        Head::Regress(n) => {
            let n = n.max(1) as f64;
            let loss = z.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
            let dz = z.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect();
            (loss, dz)
        }
    }
}

/// Keeps the hidden layer of `state`, gives it a fresh head for `io`.
pub fn carry_weights(state: &TrainState, io: TaskIo, seed: u64) -> Result<TrainState, SolverError> {
    let net = MlpNet::from_state(state)?;
    if net.in_dim != io.in_dim {
        return Err(SolverError::ShapeMismatch(format!(
            "hidden layer expects {} inputs, task has {}",
            net.in_dim, io.in_dim
        )));
    }
    let mut rng = SplitMix64::new(derive_seed(&["head", &seed.to_string(), &io.head.width().to_string()]));
    let carried = net.with_head(io.head.width(), &mut rng);
    Ok(carried.to_state(&state.solver, 0, rng.state()))
}

pub struct MlpSolver {
    pub hidden: usize,
    pub lr: f64,
    pub seed: u64,
    pub net: Option<MlpNet>,
    pub head: Option<Head>,
    pub epoch: u64,
}

impl MlpSolver {
    pub fn new(hidden: usize, lr: f64, seed: u64) -> MlpSolver {
        MlpSolver { hidden, lr, seed, net: None, head: None, epoch: 0 }
    }

    fn net(&self) -> Result<&MlpNet, SolverError> {
        self.net.as_ref().ok_or_else(|| SolverError::BadInput("solver used before configure".into()))
    }
}

impl Solver for MlpSolver {
    fn name(&self) -> &str {
        "mlp"
    }

    fn configure(&mut self, io: TaskIo) -> Result<(), SolverError> {
        match &self.net {
            None => {
                let mut rng = SplitMix64::new(derive_seed(&["mlp", &self.seed.to_string()]));
                self.net = Some(MlpNet::new(io.in_dim, self.hidden, io.head.width(), &mut rng));
            }
            Some(net) if net.in_dim == io.in_dim && Some(io.head) == self.head => {}
            Some(net) => {
                let st = carry_weights(&net.to_state("mlp", self.epoch, 0), io, self.seed)?;
                self.net = Some(MlpNet::from_state(&st)?);
                self.epoch = 0;
            }
        }
        self.head = Some(io.head);
        Ok(())
    }

    fn train_epoch(&mut self, x: &[Value], y: &[Vec<f64>], rng: &mut SplitMix64) -> Result<Vec<f64>, SolverError> {
        let head = self.head.ok_or_else(|| SolverError::BadInput("no task configured".into()))?;
        let lr = self.lr;
        let net = self.net.as_mut().ok_or_else(|| SolverError::BadInput("no task configured".into()))?;
        let rows = feature_rows(x, Some(net.in_dim))?;
        if net.norm.is_none() {
            net.fit_inputs(&rows);
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        rng.shuffle(&mut order);
        let mut losses = vec![0.0; rows.len()];
        for batch in order.chunks(BATCH) {
            let mut g = net.zero_grads();
            for &i in batch {
                let (h, z) = net.forward(&rows[i]);
                let (loss, dz) = head_loss(head, &z, &y[i]);
                if !loss.is_finite() {
                    return Err(SolverError::TrainingDiverged(format!("loss {loss} at sample {i}")));
                }
                losses[i] = loss;
                net.backward(&rows[i], &h, &dz, &mut g);
            }
            net.step(&g, lr / batch.len() as f64);
        }
        self.epoch += 1;
        Ok(losses)
    }

    fn predict(&mut self, x: &[Value]) -> Result<Vec<Vec<f64>>, SolverError> {
        let net = self.net()?;
        let rows = feature_rows(x, Some(net.in_dim))?;
        Ok(rows
            .iter()
            .map(|r| {
                let z = net.forward(r).1;
                match self.head {
                    Some(Head::Classify(_)) => softmax(&z),
                    _ => z,
                }
            })
            .collect())
    }

    fn input_gradient(&mut self, x: &Value) -> Result<Vec<f64>, SolverError> {
        let net = self.net()?;
        let f = x.features();
        if f.len() != net.in_dim {
            return Err(SolverError::BadInput(format!("expected {} features, got {}", net.in_dim, f.len())));
        }
        let (h, _) = net.forward(&f);
        let mut dz = vec![0.0; net.out];
        dz[0] = 1.0;
        let mut g = net.zero_grads();
        Ok(net.backward(&f, &h, &dz, &mut g))
    }

    fn state(&self) -> TrainState {
        match &self.net {
            Some(n) => n.to_state("mlp", self.epoch, self.seed),
            None => TrainState::empty("mlp"),
        }
    }

    fn restore(&mut self, state: &TrainState) -> Result<(), SolverError> {
        if state.is_empty() {
            self.net = None;
            return Ok(());
        }
        state.check_finite()?;
        let net = MlpNet::from_state(state)?;
        if net.hidden != self.hidden {
            return Err(SolverError::ShapeMismatch(format!("hidden width {} vs {}", net.hidden, self.hidden)));
        }
        self.net = Some(net);
        self.epoch = state.epoch;
        Ok(())
    }
}

pub struct MlpFactory;

impl SolverFactory for MlpFactory {
    fn name(&self) -> &'static str {
        "mlp"
    }
    fn build(&self, spec: &SolverSpec, _: &SolverRegistry) -> Result<Box<dyn Solver>, SolverError> {
        let width = spec.num("width", 16.0);
        if width < 1.0 {
            return Err(SolverError::BadInput(format!("width {width}")));
        }
        Ok(Box::new(MlpSolver::new(width as usize, spec.num("lr", 0.1), spec.seed)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_input(net: &MlpNet, x: &[f64], eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                a[i] += eps;
                let up = net.forward(&a).1[0];
                a[i] -= 2.0 * eps;
                let dn = net.forward(&a).1[0];
                (up - dn) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(3);
        let net = MlpNet::new(3, 5, 2, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let t = [0.0, 1.0];
        let (h, z) = net.forward(&x);
        let (_, dz) = head_loss(Head::Classify(2), &z, &t);
        let mut g = net.zero_grads();
        net.backward(&x, &h, &dz, &mut g);
        let analytic = [&g.w1[..], &g.b1, &g.w2, &g.b2].concat();
        let p = net.flat_params();
        let eps = 1e-5;
        for i in 0..p.len() {
            let mut n2 = net.clone();
            let mut q = p.clone();
            q[i] += eps;
            n2.set_flat_params(&q);
            let up = head_loss(Head::Classify(2), &n2.forward(&x).1, &t).0;
            q[i] -= 2.0 * eps;
            n2.set_flat_params(&q);
            let dn = head_loss(Head::Classify(2), &n2.forward(&x).1, &t).0;
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - analytic[i]).abs() <= 1e-7 + 1e-5 * fd.abs(), "param {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut s = MlpSolver::new(6, 0.1, 5);
        s.configure(TaskIo { in_dim: 4, head: Head::Regress(1) }).unwrap();
        let x = Value::vector(vec![0.5, -0.2, 0.9, 0.1]);
        let g = s.input_gradient(&x).unwrap();
        let fd = fd_input(s.net.as_ref().unwrap(), &x.features(), 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn carry_keeps_hidden_and_replaces_head() {
        let mut rng = SplitMix64::new(1);
        let net = MlpNet::new(2, 16, 2, &mut rng);
        let st = net.to_state("mlp", 12, 0);
        let c = carry_weights(&st, TaskIo { in_dim: 2, head: Head::Classify(3) }, 9).unwrap();
        assert_eq!(c.tensor("w1").unwrap(), (&[2usize, 16][..], &net.w1[..]));
        assert_eq!(c.tensor("w2").unwrap().0, &[16, 3]);
        assert_eq!(c.epoch, 0);
        let bad = carry_weights(&st, TaskIo { in_dim: 5, head: Head::Classify(3) }, 9);
        assert!(matches!(bad, Err(SolverError::ShapeMismatch(_))));
    }

    #[test]
    fn regression_fits_a_line() {
        let mut s = MlpSolver::new(8, 0.1, 1);
        s.configure(TaskIo { in_dim: 1, head: Head::Regress(1) }).unwrap();
        let xs: Vec<Value> = (0..64).map(|i| Value::vector(vec![i as f64 / 32.0 - 1.0])).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|v| vec![0.5 * v.features()[0]]).collect();
        let mut rng = SplitMix64::new(2);
        let first: f64 = s.train_epoch(&xs, &ys, &mut rng).unwrap().iter().sum();
        let mut last = first;
        for _ in 0..200 {
            last = s.train_epoch(&xs, &ys, &mut rng).unwrap().iter().sum();
        }
        assert!(last < first * 0.05, "{first} -> {last}");
    }
}
