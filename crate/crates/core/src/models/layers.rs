//! Parameterized building blocks shared by every architecture.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Array, Graph, Tensor};
use crate::rng::derive_seed;

use super::params::{Binding, ParamId, ParamStore};
use super::ModelError;

pub(crate) const INIT_STD: f64 = 0.02;
const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Per-forward-pass state: train/eval switch, dropout seeds and the batch
/// statistics that batch-norm layers want folded into their running averages.
#[derive(Debug, Clone)]
pub struct Pass {
    train: bool,
    seed: u64,
    dropout_calls: u64,
    bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone)]
struct BnUpdate {
    mean_id: ParamId,
    var_id: ParamId,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Pass {
    pub fn train(seed: u64) -> Self {
        Pass {
            train: true,
            seed,
            dropout_calls: 0,
            bn_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Pass {
            train: false,
            seed: 0,
            dropout_calls: 0,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn next_dropout_seed(&mut self) -> u64 {
        self.dropout_calls += 1;
        derive_seed(self.seed, &[self.dropout_calls])
    }

    /// Folds recorded batch statistics into the store's running averages.
    pub fn apply_to(&self, store: &mut ParamStore) {
        for u in &self.bn_updates {
            for (r, b) in store.get_mut(u.mean_id).data_mut().iter_mut().zip(&u.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in store.get_mut(u.var_id).data_mut().iter_mut().zip(&u.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    pub(crate) fn dropout(&mut self, g: &mut Graph, x: Tensor, p: f64) -> Result<Tensor, ModelError> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let seed = self.next_dropout_seed();
        Ok(g.dropout(x, p, seed)?)
    }
}

/// Registers parameters in declaration order, drawing initial values from
/// one seeded stream.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng) -> Self {
        Init { store, rng }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], mean: f64, std: f64) -> ParamId {
        let dist = Normal::new(mean, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Array::new(shape.to_vec(), data), true)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], v: f64, trainable: bool) -> ParamId {
        self.store.add(name, Array::full(shape, v), trainable)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, inp: usize, out: usize) -> Self {
        Linear {
            w: init.normal(&format!("{name}.w"), &[inp, out], 0.0, INIT_STD),
            b: init.fill(&format!("{name}.b"), &[out], 0.0, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Tensor) -> Result<Tensor, ModelError> {
        Ok(g.linear(x, p.get(self.w), Some(p.get(self.b)))?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Conv {
            w: init.normal(&format!("{name}.w"), &[cout, cin, k, k], 0.0, INIT_STD),
            b: bias.then(|| init.fill(&format!("{name}.b"), &[cout], 0.0, true)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Tensor) -> Result<Tensor, ModelError> {
        let b = self.b.map(|b| p.get(b));
        Ok(g.conv2d(x, p.get(self.w), b, self.stride, self.pad)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: init.normal(&format!("{name}.gamma"), &[c], 1.0, INIT_STD),
            beta: init.fill(&format!("{name}.beta"), &[c], 0.0, true),
            mean: init.fill(&format!("{name}.running_mean"), &[c], 0.0, false),
            var: init.fill(&format!("{name}.running_var"), &[c], 1.0, false),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        store: &ParamStore,
        pass: &mut Pass,
        x: Tensor,
    ) -> Result<Tensor, ModelError> {
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        if pass.train {
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            pass.bn_updates.push(BnUpdate {
                mean_id: self.mean,
                var_id: self.var,
                mean,
                var,
            });
            Ok(y)
        } else {
            Ok(g.batch_norm_eval(x, gamma, beta, store.get(self.mean), store.get(self.var), BN_EPS)?)
        }
    }
}

/// Layer norm over the trailing axes described by `shape`.
#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    dims: usize,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, shape: &[usize]) -> Self {
        LayerNorm {
            gamma: init.fill(&format!("{name}.gamma"), shape, 1.0, true),
            beta: init.fill(&format!("{name}.beta"), shape, 0.0, true),
            dims: shape.len(),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Tensor) -> Result<Tensor, ModelError> {
        Ok(g.layer_norm(x, p.get(self.gamma), p.get(self.beta), self.dims, LN_EPS)?)
    }
}

/// One image-shaped channel per class, looked up and broadcast to `[N,1,S,S]`.
#[derive(Debug, Clone)]
pub(crate) struct ChannelEmbedding {
    table: ParamId,
    classes: usize,
    size: usize,
}

impl ChannelEmbedding {
    pub fn new(init: &mut Init, name: &str, classes: usize, size: usize, mean: f64) -> Self {
        ChannelEmbedding {
            table: init.normal(&format!("{name}.table"), &[classes, size * size], mean, INIT_STD),
            classes,
            size,
        }
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    pub fn lookup(&self, g: &mut Graph, p: &Binding, labels: &[usize]) -> Result<Tensor, ModelError> {
        check_labels(labels, self.classes)?;
        let rows = g.embedding(p.get(self.table), labels)?;
        Ok(g.reshape(rows, &[labels.len(), 1, self.size, self.size])?)
    }
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<(), ModelError> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(ModelError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}
