//! Parameters, layers and the Adam optimiser on top of [`crate::autodiff`].

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Grads, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are stored here too but are not optimised.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Places every parameter on the graph; trainable ones as gradient leaves.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.variable(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Collects batch-norm nodes from a training-mode forward pass so running
/// statistics can be updated afterwards.
#[derive(Default)]
pub struct ForwardCtx {
    pub train: bool,
    bn_nodes: Vec<(BatchNorm, Var)>,
}

impl ForwardCtx {
    pub fn train() -> Self {
        ForwardCtx { train: true, bn_nodes: Vec::new() }
    }

    pub fn eval() -> Self {
        ForwardCtx { train: false, bn_nodes: Vec::new() }
    }

    /// Exponential-moving-average update of every running statistic touched in this pass.
    pub fn update_running_stats(&self, g: &Graph, store: &mut ParamStore, momentum: f64) {
        for (bn, node) in &self.bn_nodes {
            let Some(stats) = g.batch_stats(*node) else { continue };
            let count = g.value(*node).len() / stats.mean.len();
            let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
            let rm = store.get_mut(bn.running_mean);
            for (r, m) in rm.iter_mut().zip(&stats.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            let rv = store.get_mut(bn.running_var);
            for (r, v) in rv.iter_mut().zip(&stats.var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
    }
}

pub fn kaiming_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn xavier_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid range");
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample(dist))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal(rng, &[in_dim, out_dim], in_dim),
            true,
        );
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_dim])), true);
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Var {
        g.linear(x, bind.var(self.weight), Some(bind.var(self.bias)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let ones = ArrayD::from_elem(IxDyn(&[channels]), 1.0);
        let zeros = ArrayD::zeros(IxDyn(&[channels]));
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ones.clone(), true),
            beta: store.add(format!("{name}.beta"), zeros.clone(), true),
            running_mean: store.add(format!("{name}.running_mean"), zeros, false),
            running_var: store.add(format!("{name}.running_var"), ones, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, store: &ParamStore, ctx: &mut ForwardCtx, x: Var) -> Var {
        let (gamma, beta) = (bind.var(self.gamma), bind.var(self.beta));
        if ctx.train {
            let y = g.batch_norm(x, gamma, beta, None, BN_EPS);
            ctx.bn_nodes.push((*self, y));
            y
        } else {
            let rm = store.get(self.running_mean).as_slice().expect("contiguous").to_vec();
            let rv = store.get(self.running_var).as_slice().expect("contiguous").to_vec();
            g.batch_norm(x, gamma, beta, Some((&rm, &rv)), BN_EPS)
        }
    }
}

/// Convolution (no bias) followed by batch normalisation, over `[N, C, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub geom: ConvGeom,
}

impl ConvBn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal(rng, &[out_ch, in_ch, kernel.0, kernel.1], fan_in),
            true,
        );
        let bn = BatchNorm::new(store, &format!("{name}.bn"), out_ch);
        let geom = ConvGeom { kernel, stride, pad: (kernel.0 / 2, kernel.1 / 2) };
        ConvBn { weight, bn, geom }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, store: &ParamStore, ctx: &mut ForwardCtx, x: Var) -> Var {
        let y = g.conv2d(x, bind.var(self.weight), self.geom);
        self.bn.forward(g, bind, store, ctx, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        Adam { cfg, m: vec![None; store.len()], v: vec![None; store.len()], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, bind: &Binding, grads: &Grads) {
        self.t += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..store.params.len() {
            if !store.params[i].trainable {
                continue;
            }
            let Some(grad) = grads.get(bind.var(ParamId(i))) else { continue };
            let m = self.m[i].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let p = &mut store.params[i].value;
            ndarray::Zip::from(p).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= learning_rate * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
