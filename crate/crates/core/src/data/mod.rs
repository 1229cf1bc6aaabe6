//! Synthetic data sources. Every `Data.<name>` primitive in a problem body
//! resolves to a generator registered here.

pub mod md;
pub mod rng;

use crate::types::{Dim, SemanticType};
use crate::value::{Atom, Value};
pub use md::HarmonicSystem;
pub use rng::{derive_seed, SplitMix64};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

/// A resolved `Data.*` call: which generator, how many elements, which split.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceCall {
    pub generator: String,
    pub n: usize,
    pub split: String,
    pub input: SemanticType,
    pub output: SemanticType,
}

impl SourceCall {
    pub fn element_type(&self) -> SemanticType {
        SemanticType::Tuple { items: vec![self.input.clone(), self.output.clone()] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("unknown data source `{0}`")]
    UnknownGenerator(String),
    #[error("source `{source_name}` element {index}: expected {expected}, got {actual}")]
    IllTyped { source_name: String, index: usize, expected: String, actual: String },
    #[error("source `{source_name}` exhausted after {got} of {want} elements")]
    Exhausted { source_name: String, got: usize, want: usize },
}

pub trait DataGenerator: Send + Sync {
    fn name(&self) -> &'static str;
    /// Input and output type of one `(x, y)` element.
    fn element_types(&self) -> (SemanticType, SemanticType);
    fn generate(&self, n: usize, rng: &mut SplitMix64) -> Vec<Value>;
    /// Reference physics behind the data, for trajectory fixtures.
    fn simulator(&self) -> Option<&HarmonicSystem> {
        None
    }
}

fn pair(x: Value, y: Value) -> Value {
    Value::Tuple(vec![x, y])
}

/// Two isotropic Gaussian blobs at (-1,-1) and (1,1), sigma 0.6.
pub struct TwoGaussians;

impl DataGenerator for TwoGaussians {
    fn name(&self) -> &'static str {
        "two_gaussians"
    }
    fn element_types(&self) -> (SemanticType, SemanticType) {
        (SemanticType::vector(2), SemanticType::label(2))
    }
    fn generate(&self, n: usize, rng: &mut SplitMix64) -> Vec<Value> {
        (0..n)
            .map(|_| {
                let class = rng.below(2) as usize;
                let m = if class == 0 { -1.0 } else { 1.0 };
                let x = vec![m + 0.6 * rng.normal(), m + 0.6 * rng.normal()];
                pair(Value::vector(x), Value::Label { k: 2, class })
            })
            .collect()
    }
}

/// Random polynomials of degree at most 3: x = (c0, c1, c2, c3, t), y = p(t).
pub struct PolyFamily;

impl DataGenerator for PolyFamily {
    fn name(&self) -> &'static str {
        "poly_family"
    }
    fn element_types(&self) -> (SemanticType, SemanticType) {
        (SemanticType::vector(5), SemanticType::scalar())
    }
    fn generate(&self, n: usize, rng: &mut SplitMix64) -> Vec<Value> {
        (0..n)
            .map(|_| {
                let degree = rng.below(4) as usize;
                let mut c = [0.0; 4];
                for ci in c.iter_mut().take(degree + 1) {
                    *ci = rng.uniform(-1.0, 1.0);
                }
                let t = rng.uniform(-1.0, 1.0);
                let y = c[0] + t * (c[1] + t * (c[2] + t * c[3]));
                pair(Value::vector(vec![c[0], c[1], c[2], c[3], t]), Value::Scalar(y))
            })
            .collect()
    }
}

/// Perturbed configurations of [`HarmonicSystem`], labelled with the
/// simulator's potential energy.
pub struct MdHarmonic {
    pub system: HarmonicSystem,
    pub displacement: f64,
    pub speed: f64,
}

impl Default for MdHarmonic {
    fn default() -> MdHarmonic {
        MdHarmonic { system: HarmonicSystem::default(), displacement: 0.4, speed: 0.5 }
    }
}

impl MdHarmonic {
    pub fn sample(&self, rng: &mut SplitMix64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
        let a = self.displacement;
        let s = self.speed;
        let pos = self
            .system
            .centers
            .iter()
            .map(|c| [c[0] + rng.uniform(-a, a), c[1] + rng.uniform(-a, a), c[2] + rng.uniform(-a, a)])
            .collect();
        let vel = self
            .system
            .centers
            .iter()
            .map(|_| [rng.uniform(-s, s), rng.uniform(-s, s), rng.uniform(-s, s)])
            .collect();
        (pos, vel)
    }
}

impl DataGenerator for MdHarmonic {
    fn name(&self) -> &'static str {
        "md_harmonic"
    }
    fn element_types(&self) -> (SemanticType, SemanticType) {
        (SemanticType::list(SemanticType::Atom), SemanticType::scalar())
    }
    fn generate(&self, n: usize, rng: &mut SplitMix64) -> Vec<Value> {
        (0..n)
            .map(|_| {
                let (pos, vel) = self.sample(rng);
                let atoms = self.system.atoms(&pos, &vel).into_iter().map(Value::Atom).collect();
                pair(Value::List(atoms), Value::Scalar(self.system.potential(&pos)))
            })
            .collect()
    }
    fn simulator(&self) -> Option<&HarmonicSystem> {
        Some(&self.system)
    }
}

/// 4x4 grey patches holding a noisy disc; the label says whether the disc
/// covers the patch center.
pub struct Patches;

impl DataGenerator for Patches {
    fn name(&self) -> &'static str {
        "patches"
    }
    fn element_types(&self) -> (SemanticType, SemanticType) {
        let d = Dim::Fixed;
        (SemanticType::Image { h: d(4), w: d(4), c: d(1) }, SemanticType::label(2))
    }
    fn generate(&self, n: usize, rng: &mut SplitMix64) -> Vec<Value> {
        (0..n)
            .map(|_| {
                let cx = rng.uniform(0.0, 4.0);
                let cy = rng.uniform(0.0, 4.0);
                let r = rng.uniform(0.8, 1.6);
                let mut data = Vec::with_capacity(16);
                for i in 0..4 {
                    for j in 0..4 {
                        let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                        let inside = (px - cx).powi(2) + (py - cy).powi(2) <= r * r;
                        data.push(if inside { 1.0 } else { 0.0 } + 0.1 * rng.normal());
                    }
                }
                let covers = (2.0 - cx).powi(2) + (2.0 - cy).powi(2) <= r * r;
                pair(Value::Image { h: 4, w: 4, c: 1, data }, Value::Label { k: 2, class: covers as usize })
            })
            .collect()
    }
}

/// A value inhabiting `ty`, with wildcard dims taken as 2 and lists of 3.
pub fn random_value(ty: &SemanticType, rng: &mut SplitMix64) -> Value {
    let size = |d: &Dim| match d {
        Dim::Fixed(v) => *v as usize,
        Dim::Wild => 2,
    };
    match ty {
        SemanticType::Scalar { .. } => Value::Scalar(rng.uniform(-1.0, 1.0)),
        SemanticType::Tensor { shape } => {
            let shape: Vec<usize> = shape.iter().map(size).collect();
            let n = shape.iter().product();
            Value::Tensor { shape, data: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect() }
        }
        SemanticType::List { elem } => Value::List((0..3).map(|_| random_value(elem, rng)).collect()),
        SemanticType::Atom => Value::Atom(Atom {
            z: (1 + rng.below(8)) as f64,
            pos: [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
            vel: [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
        }),
        SemanticType::Image { h, w, c } => {
            let (h, w, c) = (size(h), size(w), size(c));
            Value::Image { h, w, c, data: (0..h * w * c).map(|_| rng.next_f64()).collect() }
        }
        SemanticType::Label { k } => {
            let k = size(k);
            Value::Label { k, class: rng.below(k as u64) as usize }
        }
        SemanticType::Tuple { items } => Value::Tuple(items.iter().map(|t| random_value(t, rng)).collect()),
    }
}

/// Generator name used by `Data.synthetic(n, Tin, Tout)`.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Clone, Default)]
pub struct GeneratorRegistry {
    gens: BTreeMap<String, Arc<dyn DataGenerator>>,
}

impl GeneratorRegistry {
    pub fn builtin() -> GeneratorRegistry {
        let mut r = GeneratorRegistry::default();
        r.register(Arc::new(TwoGaussians));
        r.register(Arc::new(PolyFamily));
        r.register(Arc::new(MdHarmonic::default()));
        r.register(Arc::new(Patches));
        r
    }

    pub fn register(&mut self, g: Arc<dyn DataGenerator>) {
        self.gens.insert(g.name().to_string(), g);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn DataGenerator>> {
        self.gens.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.gens.keys().map(String::as_str)
    }
}

/// Supplies the concrete elements behind each data source during a full run.
pub trait DataBindings {
    fn bind(&self, call: &SourceCall) -> Result<Vec<Value>, DataError>;
}

/// Seeded generated data. The seed depends on the problem, the generator,
/// the split and the run seed, so every model sees the same instances.
pub struct GeneratedData {
    pub registry: GeneratorRegistry,
    pub problem: String,
    pub run_seed: u64,
}

impl GeneratedData {
    pub fn new(problem: &str, run_seed: u64) -> GeneratedData {
        GeneratedData { registry: GeneratorRegistry::builtin(), problem: problem.into(), run_seed }
    }

    pub fn seed_for(&self, call: &SourceCall) -> u64 {
        derive_seed(&[&self.problem, &call.generator, &call.split, &self.run_seed.to_string()])
    }
}

impl DataBindings for GeneratedData {
    fn bind(&self, call: &SourceCall) -> Result<Vec<Value>, DataError> {
        let mut rng = SplitMix64::new(self.seed_for(call));
        if call.generator == SYNTHETIC {
            let t = call.element_type();
            return Ok((0..call.n).map(|_| random_value(&t, &mut rng)).collect());
        }
        let g = self
            .registry
            .get(&call.generator)
            .ok_or_else(|| DataError::UnknownGenerator(call.generator.clone()))?;
        Ok(g.generate(call.n, &mut rng))
    }
}

/// Replaces whole sources (by generator and split) and defers the rest.
pub struct OverrideData<'a> {
    pub inner: &'a dyn DataBindings,
    pub overrides: BTreeMap<(String, String), Vec<Value>>,
}

impl DataBindings for OverrideData<'_> {
    fn bind(&self, call: &SourceCall) -> Result<Vec<Value>, DataError> {
        match self.overrides.get(&(call.generator.clone(), call.split.clone())) {
            Some(v) => Ok(v.clone()),
            None => self.inner.bind(call),
        }
    }
}
