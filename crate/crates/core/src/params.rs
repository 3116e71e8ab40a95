//! Trainable tensors, the partitioned Adam optimizer and a finite-difference
//! gradient checker.
//!
//! Every tensor belongs to exactly one [`Partition`]: the backbone's embedding
//! tables are [`Partition::Main`], the generator's weights [`Partition::Gen`].
//! An optimizer step names the partition it updates and never touches the other.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cdr::{CdrModel, Mode};
use crate::error::{Error, Result};
use crate::generator::GeneratorParams;

pub type Matrix = Array2<f64>;

/// Gradients keyed by tensor name.
pub type Grads = BTreeMap<String, Matrix>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Main,
    Gen,
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Partition::Main => f.write_str("MAIN"),
            Partition::Gen => f.write_str("GEN"),
        }
    }
}

/// A fixed collection of named tensors.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(&str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)>;

    fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors_mut().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

/// Free-standing named tensors, mostly useful for tests and tools.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors(pub BTreeMap<String, Matrix>);

impl ParamSet for NamedTensors {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v)).collect()
    }
}

/// Entries drawn i.i.d. from N(0, std²).
pub fn init_embeddings(n: usize, d: usize, std: f64, rng: &mut impl Rng) -> Result<Matrix> {
    if n == 0 || d == 0 {
        return Err(Error::invalid(format!("embedding table must be non-empty, got {n}x{d}")));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(Array2::from_shape_simple_fn((n, d), || normal.sample(rng)))
}

pub const DEFAULT_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: θ ← θ − lr·wd·θ alongside the Adam update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

/// First/second moments per tensor and one step counter per partition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub moments: BTreeMap<String, Moments>,
    pub steps: BTreeMap<Partition, u64>,
}

impl AdamState {
    /// One bias-corrected Adam update of every tensor in `params`, which must
    /// be exactly the tensors of `partition`.
    pub fn step<P: ParamSet + ?Sized>(
        &mut self,
        params: &mut P,
        partition: Partition,
        grads: &Grads,
        cfg: &AdamConfig,
    ) -> Result<()> {
        cfg.validate()?;
        let names: BTreeSet<String> = params.tensors().iter().map(|(n, _)| n.to_string()).collect();
        let grad_names: BTreeSet<String> = grads.keys().cloned().collect();
        if names != grad_names {
            return Err(Error::PartitionMismatch {
                partition: partition.to_string(),
                detail: format!("expected {names:?}, got {grad_names:?}"),
            });
        }
        for (name, value) in params.tensors() {
            let g = &grads[name];
            if g.dim() != value.dim() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: value.dim(),
                    actual: g.dim(),
                });
            }
        }

        let t = {
            let s = self.steps.entry(partition).or_insert(0);
            *s += 1;
            *s
        };
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let (b1, b2, lr, eps, wd) = (cfg.beta1, cfg.beta2, cfg.lr, cfg.eps, cfg.weight_decay);

        for (name, value) in params.tensors_mut() {
            let g = &grads[name];
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Matrix::zeros(value.dim()),
                v: Matrix::zeros(value.dim()),
            });
            let theta = value.as_slice_mut().expect("standard layout");
            let m = mom.m.as_slice_mut().expect("standard layout");
            let v = mom.v.as_slice_mut().expect("standard layout");
            let g = g.as_standard_layout();
            let g = g.as_slice().expect("standard layout");
            for k in 0..theta.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * wd * theta[k] + lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// All trainable state of a run: backbone tensors (MAIN), generator tensors
/// (GEN, absent outside the generator mode) and the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub model: CdrModel,
    pub generator: Option<GeneratorParams>,
    pub adam: AdamState,
}

impl ParameterStore {
    pub fn new(model: CdrModel, generator: Option<GeneratorParams>) -> Self {
        Self {
            model,
            generator,
            adam: AdamState::default(),
        }
    }

    pub fn adam_step(&mut self, grads: &Grads, cfg: &AdamConfig, partition: Partition) -> Result<()> {
        match partition {
            Partition::Main => self.adam.step(&mut self.model, partition, grads, cfg),
            Partition::Gen => match self.generator.as_mut() {
                Some(gen) => self.adam.step(gen, partition, grads, cfg),
                None => Err(Error::PartitionMismatch {
                    partition: partition.to_string(),
                    detail: "no generator parameters in this store".into(),
                }),
            },
        }
    }

    pub fn partition_of(&self, name: &str) -> Option<Partition> {
        if self.model.tensor(name).is_some() {
            Some(Partition::Main)
        } else if self.generator.as_ref().and_then(|g| g.tensor(name)).is_some() {
            Some(Partition::Gen)
        } else {
            None
        }
    }

    /// FNV-1a over the bit patterns of every tensor and Adam moment in `partition`.
    pub fn checksum(&self, partition: Partition) -> u64 {
        let mut h = Fnv::new();
        let tensors = match partition {
            Partition::Main => self.model.tensors(),
            Partition::Gen => self.generator.as_ref().map(|g| g.tensors()).unwrap_or_default(),
        };
        for (name, value) in tensors {
            h.write(name.as_bytes());
            h.write_matrix(value);
            if let Some(mom) = self.adam.moments.get(name) {
                h.write_matrix(&mom.m);
                h.write_matrix(&mom.v);
            }
        }
        h.write(&self.adam.steps.get(&partition).copied().unwrap_or(0).to_le_bytes());
        h.finish()
    }

    pub fn to_checkpoint(&self, epoch: usize) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut push = |name: &str, value: &Matrix, partition: Partition| {
            let mom = self.adam.moments.get(name);
            tensors.push(TensorRecord {
                name: name.to_string(),
                partition,
                shape: [value.nrows(), value.ncols()],
                values: flat(value),
                m: mom.map(|m| flat(&m.m)),
                v: mom.map(|m| flat(&m.v)),
            });
        };
        for (name, value) in self.model.tensors() {
            push(name, value, Partition::Main);
        }
        if let Some(gen) = &self.generator {
            for (name, value) in gen.tensors() {
                push(name, value, Partition::Gen);
            }
        }
        Checkpoint {
            format: 1,
            epoch,
            mode: self.model.mode,
            lambda: self.model.lambda,
            gamma1: self.generator.as_ref().map(|g| g.gamma1),
            source_of_target: self.model.source_of_target.clone(),
            steps: self.adam.steps.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let find = |name: &str| -> Result<&TensorRecord> {
            ck.tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))
        };
        let mut model = CdrModel::empty(ck.mode, ck.lambda, ck.source_of_target.clone());
        let mut adam = AdamState {
            moments: BTreeMap::new(),
            steps: ck.steps.clone(),
        };
        let mut restore = |set: &mut dyn ParamSet| -> Result<()> {
            for (name, slot) in set.tensors_mut() {
                let rec = find(name)?;
                *slot = rec.matrix(&rec.values)?;
                if let (Some(m), Some(v)) = (&rec.m, &rec.v) {
                    adam.moments.insert(
                        name.to_string(),
                        Moments {
                            m: rec.matrix(m)?,
                            v: rec.matrix(v)?,
                        },
                    );
                }
            }
            Ok(())
        };
        restore(&mut model)?;
        let generator = match ck.gamma1 {
            Some(gamma1) => {
                let mut g = GeneratorParams::identity(1, gamma1);
                restore(&mut g)?;
                Some(g)
            }
            None => None,
        };
        Ok(Self {
            model,
            generator,
            adam,
        })
    }
}

fn flat(m: &Matrix) -> Vec<f64> {
    m.iter().copied().collect()
}

/// On-disk form of a [`ParameterStore`]: tensor name → shape → row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub epoch: usize,
    pub mode: Mode,
    pub lambda: f64,
    pub gamma1: Option<f64>,
    pub source_of_target: Vec<Option<usize>>,
    pub steps: BTreeMap<Partition, u64>,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub partition: Partition,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
    pub m: Option<Vec<f64>>,
    pub v: Option<Vec<f64>>,
}

impl TensorRecord {
    fn matrix(&self, data: &[f64]) -> Result<Matrix> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), data.to_vec()).map_err(|_| Error::ShapeMismatch {
            name: self.name.clone(),
            expected: (self.shape[0], self.shape[1]),
            actual: (data.len(), 1),
        })
    }
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        crate::report::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn write_matrix(&mut self, m: &Matrix) {
        for x in m.iter() {
            self.write(&x.to_bits().to_le_bytes());
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Compares `analytic` against central differences at `n_probe` random
/// coordinates and returns the largest `|a − fd| / max(1, |a|, |fd|)`.
///
/// A probe picks a tensor uniformly among those in `analytic`, then a
/// coordinate uniformly within it. Parameters are restored bit-exactly.
pub fn finite_diff_check<P, F>(
    mut loss: F,
    params: &mut P,
    analytic: &Grads,
    h: f64,
    n_probe: usize,
    seed: u64,
) -> Result<f64>
where
    P: ParamSet + ?Sized,
    F: FnMut(&P) -> f64,
{
    if analytic.is_empty() {
        return Err(Error::invalid("no analytic gradients to check"));
    }
    for (name, g) in analytic {
        let t = params
            .tensor(name)
            .ok_or_else(|| Error::invalid(format!("unknown tensor `{name}`")))?;
        if t.dim() != g.dim() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: t.dim(),
                actual: g.dim(),
            });
        }
    }
    let names: Vec<&String> = analytic.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut eval = |p: &P| -> Result<f64> {
        let v = loss(p);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("loss during finite-difference probe".into()))
        }
    };
    eval(params)?;
    for _ in 0..n_probe {
        let name = names[rng.random_range(0..names.len())];
        let g = &analytic[name];
        let (r, c) = (rng.random_range(0..g.nrows()), rng.random_range(0..g.ncols()));
        let original = params.tensor(name).unwrap()[[r, c]];

        params.tensor_mut(name).unwrap()[[r, c]] = original + h;
        let plus = eval(params);
        params.tensor_mut(name).unwrap()[[r, c]] = original - h;
        let minus = eval(params);
        params.tensor_mut(name).unwrap()[[r, c]] = original;

        let fd = (plus? - minus?) / (2.0 * h);
        let a = g[[r, c]];
        let rel = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
