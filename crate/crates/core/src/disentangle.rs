//! Modality-level and domain-level disentanglement.
//!
//! Both levels split a representation into an invariant and a specific
//! embedding with two single-layer networks. Invariant embeddings are aligned
//! with a multi-bandwidth Gaussian MMD; invariant/specific and specific/specific
//! pairs are decorrelated with the Frobenius norm of their cross-covariance.
//! Sums over `a != b` run over ordered pairs, so each unordered pair counts twice.

use ndarray::{Array2, ArrayView2, Ix2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Binding, Linear, ParamStore};
use crate::rng::Rng;

/// Negative-side slope of the embedding nonlinearity.
pub const EMBED_LEAK: f64 = 0.2;

pub const EMBED_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Bandwidths are the median pairwise distance of the joint set times each multiplier.
    MedianHeuristic { multipliers: Vec<f64> },
    Fixed { bandwidths: Vec<f64> },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::MedianHeuristic { multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0] }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let v = match self {
            KernelSpec::MedianHeuristic { multipliers } => multipliers,
            KernelSpec::Fixed { bandwidths } => bandwidths,
        };
        if v.is_empty() || v.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::InvalidArgument(format!("kernel needs at least one positive bandwidth, got {v:?}")));
        }
        Ok(())
    }

    /// Concrete bandwidths for the pair of sets; never differentiated through.
    pub fn bandwidths(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Vec<f64> {
        match self {
            KernelSpec::Fixed { bandwidths } => bandwidths.clone(),
            KernelSpec::MedianHeuristic { multipliers } => {
                let med = median_pairwise_distance(x, y);
                let base = if med > 0.0 && med.is_finite() { med } else { 1.0 };
                multipliers.iter().map(|m| m * base).collect()
            }
        }
    }
}

/// Median Euclidean distance over distinct pairs of the joint row set.
pub fn median_pairwise_distance(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
    let rows: Vec<_> = x.rows().into_iter().chain(y.rows()).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(rows[i].iter().zip(rows[j].iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

fn rows_cols(g: &Graph, v: Var) -> Result<(usize, usize)> {
    match g.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::InvalidArgument(format!("expected a matrix of embeddings, got shape {s:?}"))),
    }
}

/// Graph MMD between the rows of `x` and `y`.
pub fn mmd(g: &mut Graph, x: Var, y: Var, kernel: &KernelSpec) -> Result<Var> {
    let (nx, dx) = rows_cols(g, x)?;
    let (ny, dy) = rows_cols(g, y)?;
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidArgument(format!("mmd needs at least 2 samples per set, got {nx} and {ny}")));
    }
    if dx != dy {
        return Err(shape_err([ny, dx], [ny, dy]));
    }
    let sigmas = kernel.bandwidths(as2(g, x), as2(g, y));
    Ok(g.mmd(x, y, &sigmas))
}

/// Graph Frobenius norm of the cross-covariance of paired rows.
pub fn covariance_penalty(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (na, _) = rows_cols(g, a)?;
    let (nb, _) = rows_cols(g, b)?;
    if na != nb {
        return Err(Error::InvalidArgument(format!("covariance penalty needs paired sets, got {na} and {nb} rows")));
    }
    if na < 2 {
        return Err(Error::InvalidArgument("covariance penalty needs at least 2 samples".into()));
    }
    Ok(g.cov_penalty(a, b))
}

fn as2(g: &Graph, v: Var) -> ArrayView2<'_, f64> {
    g.value(v).view().into_dimensionality::<Ix2>().expect("checked rank")
}

pub fn mmd_value(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, kernel: &KernelSpec) -> Result<f64> {
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(Error::InvalidArgument("mmd needs at least 2 samples per set".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(shape_err([y.nrows(), x.ncols()], y.shape()));
    }
    Ok(autodiff::mmd_biased(x, y, &kernel.bandwidths(x, y)))
}

pub fn covariance_penalty_value(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance penalty needs paired sets of at least 2, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let ac = autodiff::center_columns(a);
    let bc = autodiff::center_columns(b);
    let cov: Array2<f64> = ac.t().dot(&bc) / (a.nrows() as f64 - 1.0);
    Ok(cov.iter().map(|e| e * e).sum::<f64>().sqrt())
}

/// Invariant and specific embedding networks, each a linear map followed by a
/// leaky ReLU. The leak keeps the covariance penalties from parking the
/// embeddings in a dead, constant region where the classifier sees nothing.
#[derive(Debug, Clone, Copy)]
pub struct EmbedPair {
    pub inv: Linear,
    pub spe: Linear,
}

/// Graph handles of one batch of disentangled embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairVars {
    pub inv: Var,
    pub spe: Var,
}

impl EmbedPair {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        EmbedPair {
            inv: Linear::new(store, rng, &format!("{name}.inv"), in_dim, out_dim),
            spe: Linear::new(store, rng, &format!("{name}.spe"), in_dim, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.inv.in_dim
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Result<PairVars> {
        let (n, d) = rows_cols(g, x)?;
        if d != self.in_dim() {
            return Err(shape_err([n, self.in_dim()], [n, d]));
        }
        let inv = self.inv.forward(g, bind, x);
        let spe = self.spe.forward(g, bind, x);
        Ok(PairVars { inv: g.leaky_relu(inv, EMBED_LEAK), spe: g.leaky_relu(spe, EMBED_LEAK) })
    }
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Option<Var> {
    let mut it = terms.iter().copied();
    let first = it.next()?;
    Some(it.fold(first, |acc, t| g.add(acc, t)))
}

/// Alignment + intra + inter terms over a set of embedding groups.
/// Inter-group covariance pairs rows by index up to the smaller group size.
fn level_loss(g: &mut Graph, groups: &[PairVars], kernel: &KernelSpec) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let d = mmd(g, groups[i].inv, groups[j].inv, kernel)?;
            terms.push(g.scale(d, 2.0));
        }
    }
    for p in groups {
        terms.push(covariance_penalty(g, p.inv, p.spe)?);
    }
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let (ni, _) = rows_cols(g, groups[i].spe)?;
            let (nj, _) = rows_cols(g, groups[j].spe)?;
            let n = ni.min(nj);
            let a = if ni > n { g.slice(groups[i].spe, 0, 0, n) } else { groups[i].spe };
            let b = if nj > n { g.slice(groups[j].spe, 0, 0, n) } else { groups[j].spe };
            let c = covariance_penalty(g, a, b)?;
            terms.push(g.scale(c, 2.0));
        }
    }
    Ok(sum_all(g, &terms))
}

/// Modality-level loss: per source domain over the three modality pairs, averaged over domains.
pub fn modality_loss(g: &mut Graph, per_domain: &[Vec<PairVars>], kernel: &KernelSpec) -> Result<Var> {
    if per_domain.is_empty() {
        return Err(Error::InvalidArgument("modality loss needs at least one domain".into()));
    }
    let mut per = Vec::with_capacity(per_domain.len());
    for pairs in per_domain {
        if pairs.len() < 2 {
            return Err(Error::InvalidArgument("modality loss needs at least two modalities".into()));
        }
        per.push(level_loss(g, pairs, kernel)?.expect("non-empty"));
    }
    let total = sum_all(g, &per).expect("non-empty");
    Ok(g.scale(total, 1.0 / per_domain.len() as f64))
}

/// Domain-level loss over one embedding batch per source domain.
pub fn domain_loss(g: &mut Graph, per_domain: &[PairVars], kernel: &KernelSpec) -> Result<Var> {
    if per_domain.is_empty() {
        return Err(Error::InvalidArgument("domain loss needs at least one domain".into()));
    }
    Ok(level_loss(g, per_domain, kernel)?.expect("non-empty"))
}
