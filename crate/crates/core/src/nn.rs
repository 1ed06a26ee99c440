//! Parameter storage, layers and the Adam optimizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace all values with another store of identical layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ShapeMismatch("parameter names differ".into()));
        }
        for (name, (dst, src)) in self.names.iter().zip(self.tensors.iter_mut().zip(&other.tensors)) {
            if dst.shape() != src.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Place every parameter on `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        Bound { vars: self.tensors.iter().map(|t| graph.leaf(t.clone(), trainable)).collect() }
    }
}

/// Parameters of a [`ParamStore`] placed on a graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Gradient for every parameter, zeros where none reached it.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    }
}

/// Seeded initializer shared by the layer constructors.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Kaiming-normal with fan-in, scaled by `scale`.
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize, slope: f64, scale: f64) -> Tensor {
        let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt() * scale;
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut self.rng)).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        scale: f64,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = init.kaiming(&[out_channels, in_channels, kernel, kernel], fan_in, 0.0, scale);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding: kernel / 2 }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(&p.var(self.weight), Some(&p.var(self.bias)), self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = init.kaiming(&[outputs, inputs], inputs, 0.0, 1.0);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.linear(&p.var(self.weight), &p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, eps: 1e-5 }
    }

    /// Always normalizes with batch statistics.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.batch_norm(&p.var(self.gamma), &p.var(self.beta), self.eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are part of the checkpointed state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        for _ in 0..500 {
            let g = Graph::new();
            let p = store.bind(&g, true);
            let x = p.var(id);
            let loss = x.mul(&x).sum();
            let grads = g.backward(loss);
            opt.update(&mut store, &p.gradients(&grads));
        }
        assert!(store.get(id).l2_norm() < 1e-2);
        assert_eq!(opt.step, 500);
    }

    #[test]
    fn init_is_seeded() {
        let a = Init::new(3).kaiming(&[4, 4], 4, 0.0, 1.0);
        let b = Init::new(3).kaiming(&[4, 4], 4, 0.0, 1.0);
        assert_eq!(a, b);
    }
}
