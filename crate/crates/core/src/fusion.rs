//! Pairwise multi-head cross-attention and the three-pair fusion.
//!
//! Each 256-vector is split into `tokens` tokens. Queries come from the first
//! modality, keys and values from the second; attention runs over the token
//! axis within a sample. Each head's output tokens are mean-pooled and the
//! heads concatenated, so one pair yields `heads * head_dim` values.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Binding, Linear, ParamStore};
use crate::rng::Rng;
use crate::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub tokens: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { heads: 8, head_dim: 32, tokens: 8 }
    }
}

impl FusionConfig {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.tokens == 0 {
            return Err(Error::InvalidArgument("fusion heads, head_dim and tokens must be positive".into()));
        }
        if input_dim % self.tokens != 0 {
            return Err(Error::InvalidArgument(format!(
                "input width {input_dim} does not split into {} tokens",
                self.tokens
            )));
        }
        Ok(())
    }

    pub fn pair_width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Query, key and value projections of one modality pair.
#[derive(Debug, Clone, Copy)]
pub struct PairFusion {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub cfg: FusionConfig,
    pub input_dim: usize,
}

/// Graph handles of one pair's attention.
#[derive(Debug, Clone, Copy)]
pub struct PairOutput {
    /// `[N, heads * head_dim]`
    pub output: Var,
    /// Scaled logits `Q K^T / sqrt(d_k)`, `[N * heads, T, T]`.
    pub logits: Var,
    /// Softmax of `logits` over keys.
    pub weights: Var,
}

impl PairFusion {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input_dim: usize, cfg: FusionConfig) -> Result<Self> {
        cfg.validate(input_dim)?;
        let tw = input_dim / cfg.tokens;
        let w = cfg.pair_width();
        Ok(PairFusion {
            query: Linear::new(store, rng, &format!("{name}.q"), tw, w),
            key: Linear::new(store, rng, &format!("{name}.k"), tw, w),
            value: Linear::new(store, rng, &format!("{name}.v"), tw, w),
            cfg,
            input_dim,
        })
    }

    /// `[N, D]` to `[N * H, T, d_k]` through one projection.
    fn heads(&self, g: &mut Graph, bind: &Binding, proj: &Linear, z: Var, n: usize) -> Var {
        let FusionConfig { heads, head_dim, tokens } = self.cfg;
        let t = g.reshape(z, &[n * tokens, self.input_dim / tokens]);
        let p = proj.forward(g, bind, t);
        let p = g.reshape(p, &[n, tokens, heads, head_dim]);
        let p = g.permute(p, &[0, 2, 1, 3]);
        g.reshape(p, &[n * heads, tokens, head_dim])
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, z_p: Var, z_q: Var) -> Result<PairOutput> {
        let n = check_input(g, z_p, self.input_dim)?;
        if check_input(g, z_q, self.input_dim)? != n {
            return Err(shape_err([n, self.input_dim], g.shape(z_q)));
        }
        let q = self.heads(g, bind, &self.query, z_p, n);
        let k = self.heads(g, bind, &self.key, z_q, n);
        let v = self.heads(g, bind, &self.value, z_q, n);
        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.bmm(q, kt);
        let logits = g.scale(scores, 1.0 / (self.cfg.head_dim as f64).sqrt());
        let weights = g.softmax(logits);
        let attended = g.bmm(weights, v);
        let pooled = g.mean_axis(attended, 1);
        let output = g.reshape(pooled, &[n, self.cfg.pair_width()]);
        Ok(PairOutput { output, logits, weights })
    }
}

fn check_input(g: &Graph, z: Var, dim: usize) -> Result<usize> {
    match g.shape(z) {
        [n, d] if *d == dim => Ok(*n),
        s => Err(shape_err([s.first().copied().unwrap_or(0), dim], s)),
    }
}

/// Query/key modality order of the three pairs.
pub const PAIR_ORDER: [(Modality, Modality); 3] = [
    (Modality::Vibration, Modality::Current),
    (Modality::Current, Modality::Acoustic),
    (Modality::Acoustic, Modality::Vibration),
];

#[derive(Debug, Clone, Copy)]
pub struct TripleFusion {
    pub pairs: [PairFusion; 3],
}

impl TripleFusion {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input_dim: usize, cfg: FusionConfig) -> Result<Self> {
        let mut make = |(p, q): (Modality, Modality)| {
            PairFusion::new(store, rng, &format!("{name}.{}{}", p.tag(), q.tag()), input_dim, cfg)
        };
        Ok(TripleFusion { pairs: [make(PAIR_ORDER[0])?, make(PAIR_ORDER[1])?, make(PAIR_ORDER[2])?] })
    }

    pub fn output_dim(&self) -> usize {
        3 * self.pairs[0].cfg.pair_width()
    }

    /// `z` indexed by [`Modality::index`]; returns `[N, 3 * heads * head_dim]`.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, z: [Var; 3]) -> Result<(Var, [PairOutput; 3])> {
        let mut outs = Vec::with_capacity(3);
        for (pf, (p, q)) in self.pairs.iter().zip(PAIR_ORDER) {
            outs.push(pf.forward(g, bind, z[p.index()], z[q.index()])?);
        }
        let fused = g.concat(&[outs[0].output, outs[1].output, outs[2].output], 1);
        Ok((fused, [outs[0], outs[1], outs[2]]))
    }
}
