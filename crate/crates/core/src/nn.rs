//! Parameter storage, layer helpers, the Adam optimizer and shared training
//! configuration.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LddmError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = t;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.entries.iter().map(|(_, t)| g.param(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Gradients in store order.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|((_, t), &v)| grads.get(v, t.shape()))
            .collect()
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| LddmError::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Adds `{name}.weight` `[co, ci, kd, kh, kw]` and `{name}.bias` `[co]`.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    ci: usize,
    co: usize,
    k: [usize; 3],
    rng: &mut R,
) {
    let fan_in = (ci * k[0] * k[1] * k[2]) as f64;
    store.insert(
        format!("{name}.weight"),
        normal_tensor(&[co, ci, k[0], k[1], k[2]], (2.0 / fan_in).sqrt(), rng),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[co]));
}

/// Adds `{name}.weight` `[out, in]` and `{name}.bias` `[out]`; `gain` scales the init.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    input: usize,
    output: usize,
    gain: f64,
    rng: &mut R,
) {
    store.insert(
        format!("{name}.weight"),
        normal_tensor(&[output, input], gain * (1.0 / input as f64).sqrt(), rng),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[output]));
}

pub fn conv(
    g: &mut Graph,
    p: &Bound,
    name: &str,
    x: Var,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.try_get(&format!("{name}.bias"));
    g.conv3d(x, w, b, stride, pad)
}

pub fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.try_get(&format!("{name}.bias"));
    g.linear(x, w, b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

/// Optimisation settings shared by every training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Optimizer steps. Ignored when `epochs` is set.
    #[serde(default)]
    pub steps: usize,
    /// Full passes over the dataset; overrides `steps` when present.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(LddmError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(LddmError::Config("batch size must be positive".into()));
        }
        if self.epochs.is_none() && self.steps == 0 {
            return Err(LddmError::Config("step count must be positive".into()));
        }
        if self.epochs == Some(0) {
            return Err(LddmError::Config("epoch count must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        match self.epochs {
            Some(e) => e * dataset_len.div_ceil(self.batch_size.min(dataset_len).max(1)),
            None => self.steps,
        }
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub losses: Vec<f64>,
}

impl TrainingLog {
    pub fn mean(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Yields batches of dataset indices from epoch-wise shuffled permutations.
/// Batches never exceed the dataset size.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            batch: batch.min(len).max(1),
        }
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in store.tensors_mut().enumerate() {
            let g = grads[k].data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Sinusoidal embedding of integer timesteps: `[N, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let j = i % half.max(1);
            let freq = (-(10000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let a = t as f64 * freq;
            data.push(if i < half { a.sin() } else { a.cos() });
        }
    }
    Tensor::new(vec![ts.len(), dim], data).expect("embedding shape")
}
