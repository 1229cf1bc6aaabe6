//! Set model: a small network applied to every embedded atom, results
//! summed. The sum runs in an order fixed by hashing each element's input,
//! so any permutation of the atoms gives the same bits.

use super::mlp::{head_loss, MlpNet, BATCH};
use super::solver::{Head, Solver, SolverError, SolverFactory, SolverRegistry, SolverSpec, TaskIo, TrainState};
use crate::data::{derive_seed, SplitMix64};
use crate::types::{ConverterKernel, KernelRegistry};
use crate::value::Value;
use std::sync::Arc;

pub const EMBED: usize = 8;

fn fnv1a(v: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for x in v {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Embeds each atom and returns the embeddings in canonical summation order.
fn canonical(embed: &dyn ConverterKernel, atoms: &[Value]) -> Result<Vec<Vec<f64>>, SolverError> {
    let mut rows: Vec<(u64, Vec<u64>, Vec<f64>)> = atoms
        .iter()
        .map(|a| {
            let e = embed.apply(a).map_err(|e| SolverError::BadInput(e.to_string()))?.features();
            Ok((fnv1a(&e), e.iter().map(|x| x.to_bits()).collect(), e))
        })
        .collect::<Result<_, SolverError>>()?;
    rows.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(rows.into_iter().map(|r| r.2).collect())
}

/// Σ sub(embed(atom)) in canonical order.
pub fn perm_invariant_forward(
    sub: &MlpNet,
    embed: &dyn ConverterKernel,
    atoms: &[Value],
) -> Result<f64, SolverError> {
    let mut s = 0.0;
    for e in canonical(embed, atoms)? {
        s += sub.forward(&e).1[0];
    }
    Ok(s)
}

pub struct PermSumSolver {
    pub hidden: usize,
    pub lr: f64,
    pub seed: u64,
    pub sub: Option<MlpNet>,
    embed: Arc<dyn ConverterKernel>,
    epoch: u64,
}

impl PermSumSolver {
    pub fn new(hidden: usize, lr: f64, seed: u64) -> PermSumSolver {
        let embed = KernelRegistry::builtin().get("atom_embed").expect("builtin kernel").clone();
        PermSumSolver { hidden, lr, seed, sub: None, embed, epoch: 0 }
    }

    fn atoms(x: &Value) -> Result<&[Value], SolverError> {
        x.as_list().ok_or_else(|| SolverError::BadInput(format!("expected a list of atoms, got {}", x.type_name())))
    }

    fn sub(&self) -> Result<&MlpNet, SolverError> {
        self.sub.as_ref().ok_or_else(|| SolverError::BadInput("solver used before configure".into()))
    }

    pub fn forward(&self, x: &Value) -> Result<f64, SolverError> {
        perm_invariant_forward(self.sub()?, self.embed.as_ref(), Self::atoms(x)?)
    }
}

impl Solver for PermSumSolver {
    fn name(&self) -> &str {
        "perm_sum"
    }

    fn configure(&mut self, io: TaskIo) -> Result<(), SolverError> {
        if io.head != Head::Regress(1) {
            return Err(SolverError::ShapeMismatch(format!("set sum produces one value, task wants {:?}", io.head)));
        }
        if self.sub.is_none() {
            let mut rng = SplitMix64::new(derive_seed(&["perm_sum", &self.seed.to_string()]));
            self.sub = Some(MlpNet::new(EMBED, self.hidden, 1, &mut rng));
        }
        Ok(())
    }

    fn train_epoch(&mut self, x: &[Value], y: &[Vec<f64>], rng: &mut SplitMix64) -> Result<Vec<f64>, SolverError> {
        let sets: Vec<Vec<Vec<f64>>> =
            x.iter().map(|v| canonical(self.embed.as_ref(), Self::atoms(v)?)).collect::<Result<_, _>>()?;
        let lr = self.lr;
        let net = self.sub.as_mut().ok_or_else(|| SolverError::BadInput("no task configured".into()))?;
        if net.norm.is_none() {
            net.fit_inputs(&sets.concat());
        }
        let mut order: Vec<usize> = (0..sets.len()).collect();
        rng.shuffle(&mut order);
        let mut losses = vec![0.0; sets.len()];
        for batch in order.chunks(BATCH) {
            let mut g = net.zero_grads();
            for &i in batch {
                let fw: Vec<(Vec<f64>, f64)> = sets[i]
                    .iter()
                    .map(|e| {
                        let (h, z) = net.forward(e);
                        (h, z[0])
                    })
                    .collect();
                let total: f64 = fw.iter().map(|f| f.1).sum();
                let (loss, dz) = head_loss(Head::Regress(1), &[total], &y[i]);
                if !loss.is_finite() {
                    return Err(SolverError::TrainingDiverged(format!("loss {loss} at sample {i}")));
                }
                losses[i] = loss;
                for (e, (h, _)) in sets[i].iter().zip(&fw) {
                    net.backward(e, h, &dz, &mut g);
                }
            }
            net.step(&g, lr / batch.len() as f64);
        }
        self.epoch += 1;
        Ok(losses)
    }

    fn predict(&mut self, x: &[Value]) -> Result<Vec<Vec<f64>>, SolverError> {
        x.iter().map(|v| Ok(vec![self.forward(v)?])).collect()
    }

    fn input_gradient(&mut self, x: &Value) -> Result<Vec<f64>, SolverError> {
        let net = self.sub()?;
        let mut out = Vec::new();
        for a in Self::atoms(x)? {
            let e = self.embed.apply(a).map_err(|e| SolverError::BadInput(e.to_string()))?.features();
            let (h, _) = net.forward(&e);
            let mut g = net.zero_grads();
            let de = net.backward(&e, &h, &[1.0], &mut g);
            out.extend(self.embed.pullback(a, &de).map_err(|e| SolverError::BadInput(e.to_string()))?);
        }
        Ok(out)
    }

    fn state(&self) -> TrainState {
        match &self.sub {
            Some(n) => n.to_state("perm_sum", self.epoch, self.seed),
            None => TrainState::empty("perm_sum"),
        }
    }

    fn restore(&mut self, state: &TrainState) -> Result<(), SolverError> {
        if state.is_empty() {
            self.sub = None;
            return Ok(());
        }
        state.check_finite()?;
        let net = MlpNet::from_state(state)?;
        if net.in_dim != EMBED || net.out != 1 {
            return Err(SolverError::ShapeMismatch(format!("sub network {}→{}", net.in_dim, net.out)));
        }
        self.sub = Some(net);
        self.epoch = state.epoch;
        Ok(())
    }
}

pub struct PermSumFactory;

impl SolverFactory for PermSumFactory {
    fn name(&self) -> &'static str {
        "perm_sum"
    }
    fn build(&self, spec: &SolverSpec, _: &SolverRegistry) -> Result<Box<dyn Solver>, SolverError> {
        match spec.meta_str("sub").unwrap_or("mlp") {
            "mlp" => {}
            other => return Err(SolverError::UnknownSolver(format!("{other} (as per-element sub-model)"))),
        }
        Ok(Box::new(PermSumSolver::new(spec.num("width", 16.0).max(1.0) as usize, spec.num("lr", 0.05), spec.seed)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Atom;

    fn atom(z: f64, x: f64) -> Value {
        Value::Atom(Atom { z, pos: [x, 0.5 * x, -x], vel: [0.1, 0.0, x] })
    }

    #[test]
    fn empty_and_singleton() {
        let mut s = PermSumSolver::new(4, 0.1, 1);
        s.configure(TaskIo { in_dim: 0, head: Head::Regress(1) }).unwrap();
        assert_eq!(s.forward(&Value::List(vec![])).unwrap(), 0.0);
        let a = atom(1.0, 0.3);
        let e = s.embed.apply(&a).unwrap().features();
        assert_eq!(s.forward(&Value::List(vec![a])).unwrap(), s.sub.as_ref().unwrap().forward(&e).1[0]);
    }

    #[test]
    fn order_does_not_matter() {
        let mut s = PermSumSolver::new(8, 0.1, 2);
        s.configure(TaskIo { in_dim: 0, head: Head::Regress(1) }).unwrap();
        let atoms: Vec<Value> = (0..5).map(|i| atom(i as f64, 0.37 * i as f64 - 0.6)).collect();
        let mut rev = atoms.clone();
        rev.reverse();
        assert_eq!(
            s.forward(&Value::List(atoms)).unwrap().to_bits(),
            s.forward(&Value::List(rev)).unwrap().to_bits()
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut s = PermSumSolver::new(6, 0.1, 3);
        s.configure(TaskIo { in_dim: 0, head: Head::Regress(1) }).unwrap();
        let x = Value::List(vec![atom(8.0, 0.2), atom(1.0, -0.4)]);
        let g = s.input_gradient(&x).unwrap();
        let f = x.features();
        for i in 0..f.len() {
            let mut a = f.clone();
            a[i] += 1e-5;
            let up = s.forward(&x.with_features(&a).unwrap()).unwrap();
            a[i] -= 2e-5;
            let dn = s.forward(&x.with_features(&a).unwrap()).unwrap();
            assert!(((up - dn) / 2e-5 - g[i]).abs() < 1e-7, "{i}");
        }
    }

    #[test]
    fn training_reduces_loss() {
        let mut s = PermSumSolver::new(8, 0.05, 4);
        s.configure(TaskIo { in_dim: 0, head: Head::Regress(1) }).unwrap();
        let xs: Vec<Value> = (0..40)
            .map(|i| Value::List(vec![atom(1.0, i as f64 / 40.0), atom(8.0, -(i as f64) / 40.0)]))
            .collect();
        let ys: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 40.0]).collect();
        let mut rng = SplitMix64::new(1);
        let first: f64 = s.train_epoch(&xs, &ys, &mut rng).unwrap().iter().sum();
        let mut last = first;
        for _ in 0..100 {
            last = s.train_epoch(&xs, &ys, &mut rng).unwrap().iter().sum();
        }
        assert!(last < first, "{first} -> {last}");
    }
}
