use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Var};
use super::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Normal { std: f32 },
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::He { fan_in } => {
                let d = Normal::new(0.0, (2.0 / fan_in.max(1) as f32).sqrt()).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out).max(1) as f32).sqrt();
                let d = Uniform::new_inclusive(-a, a).expect("valid range");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(Entry { name, value: Tensor::new(shape.to_vec(), data), trainable: true });
        ParamId(self.entries.len() as u32 - 1)
    }

    /// A fixed buffer: stored and checkpointed like a parameter, never differentiated or updated.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Entry { name: name.into(), value, trainable: false });
        ParamId(self.entries.len() as u32 - 1)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0 as usize].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0 as usize].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(|i| ParamId(i as u32))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0 as usize].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0 as usize].value
    }

    /// Wrap every parameter as a graph leaf for one forward pass.
    pub fn bind(&self) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    if e.trainable {
                        Var::parameter(ParamId(i as u32), e.value.clone())
                    } else {
                        Var::constant(e.value.clone())
                    }
                })
                .collect(),
        }
    }

    /// Same parameters as constants, for inference without gradient bookkeeping.
    pub fn bind_frozen(&self) -> Bound {
        Bound { vars: self.entries.iter().map(|e| Var::constant(e.value.clone())).collect() }
    }
}

/// Parameters as graph variables.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> &Var {
        &self.vars[id.0 as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |e: &Entry| vec![0.0f32; e.value.len()];
        Self {
            config,
            step: 0,
            m: params.entries.iter().map(zeros).collect(),
            v: params.entries.iter().map(zeros).collect(),
        }
    }

    /// One update; parameters without a gradient only receive weight decay.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f32) {
        assert_eq!(self.m.len(), params.len(), "optimizer built for another store");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, entry) in params.entries.iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let w = entry.value.data_mut();
            let decay = 1.0 - lr * c.weight_decay;
            let Some(g) = grads.param(ParamId(i as u32)) else {
                w.iter_mut().for_each(|x| *x *= decay);
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gi), mi), vi) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x = *x * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }

    /// Moment buffers flattened in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn from_moments(config: AdamConfig, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Self {
        Self { config, step, m, v }
    }
}
