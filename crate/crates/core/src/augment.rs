//! Cross-domain mixed fusion.
//!
//! Each modality of a training sample is, with probability `gate_p`, blended
//! with the same modality of a same-class sample drawn from another source
//! domain. The blend coefficient comes from a Beta(0.2, 0.2) draw that is
//! reflected past 1 (external interpolation) with probability `ext_p`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::PreparedSample;
use crate::rng::Rng;
use crate::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    pub beta_a: f64,
    pub beta_b: f64,
    pub gate_p: f64,
    pub ext_p: f64,
    pub enabled: bool,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig { beta_a: 0.2, beta_b: 0.2, gate_p: 0.5, ext_p: 0.5, enabled: true }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta shape parameters must be positive, got ({}, {})",
                self.beta_a, self.beta_b
            )));
        }
        if !prob(self.gate_p) || !prob(self.ext_p) {
            return Err(Error::InvalidArgument(format!(
                "mix probabilities must lie in [0,1], got gate_p={} ext_p={}",
                self.gate_p, self.ext_p
            )));
        }
        Ok(())
    }

    fn beta(&self) -> Beta<f64> {
        Beta::new(self.beta_a, self.beta_b).expect("validated shape parameters")
    }
}

/// Sample indices bucketed by (domain, class).
#[derive(Debug, Clone, Default)]
pub struct ClassDomainIndex {
    buckets: BTreeMap<(String, u8), Vec<usize>>,
    domains: Vec<String>,
}

impl ClassDomainIndex {
    pub fn build(samples: &[PreparedSample]) -> Self {
        let mut buckets: BTreeMap<(String, u8), Vec<usize>> = BTreeMap::new();
        let mut domains: Vec<String> = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if !domains.contains(&s.domain) {
                domains.push(s.domain.clone());
            }
            buckets.entry((s.domain.clone(), s.label)).or_default().push(i);
        }
        domains.sort();
        ClassDomainIndex { buckets, domains }
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn bucket(&self, domain: &str, label: u8) -> &[usize] {
        self.buckets.get(&(domain.to_string(), label)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

/// Lower bound on the Beta draw; keeps the internal branch inside (0, 1) and
/// the external branch strictly above 1 under floating-point rounding.
const ALPHA_EPS: f64 = f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixCoefficient {
    /// The Beta draw, clamped to `[eps, 1 - eps]`.
    pub raw: f64,
    pub external: bool,
    pub alpha: f64,
}

pub fn draw_mix_coefficient(cfg: &MixConfig, rng: &mut Rng) -> MixCoefficient {
    let raw = cfg.beta().sample(rng).clamp(ALPHA_EPS, 1.0 - ALPHA_EPS);
    let external = rng.random::<f64>() < cfg.ext_p;
    let alpha = if external { 2.0 - raw.max(1.0 - raw) } else { raw };
    MixCoefficient { raw, external, alpha }
}

/// `alpha` in (0, 1) from the Beta draw, or in (1, 1.5] when reflected.
pub fn sample_mix_coefficient(cfg: &MixConfig, rng: &mut Rng) -> f64 {
    draw_mix_coefficient(cfg, rng).alpha
}

/// Counters shared across workers; read by the leakage audit.
#[derive(Debug, Default)]
pub struct MixCounters {
    calls: AtomicU64,
    mixed_modalities: AtomicU64,
    empty_bucket: AtomicU64,
}

impl MixCounters {
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn mixed_modalities(&self) -> u64 {
        self.mixed_modalities.load(Ordering::Relaxed)
    }

    /// Times a selected (domain, class) bucket was empty and mixing was skipped.
    pub fn empty_bucket(&self) -> u64 {
        self.empty_bucket.load(Ordering::Relaxed)
    }
}

/// What happened to one modality of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MixEvent {
    pub modality: Modality,
    pub gated: bool,
    pub partner_domain: Option<String>,
    pub partner: Option<usize>,
    pub coefficient: Option<MixCoefficient>,
}

fn blend(dst: &mut [f32], partner: &[f32], alpha: f64) {
    for (x, &y) in dst.iter_mut().zip(partner) {
        *x = (alpha * *x as f64 + (1.0 - alpha) * y as f64) as f32;
    }
}

/// Applies `alpha * anchor + (1 - alpha) * partner` to one modality.
pub fn blend_modality(anchor: &mut PreparedSample, partner: &PreparedSample, m: Modality, alpha: f64) {
    blend(anchor.modality_slice_mut(m), partner.modality_slice(m), alpha);
}

pub fn mix_sample(
    anchor: &PreparedSample,
    index: &ClassDomainIndex,
    dataset: &[PreparedSample],
    cfg: &MixConfig,
    rng: &mut Rng,
    counters: Option<&MixCounters>,
) -> Result<PreparedSample> {
    mix_sample_logged(anchor, index, dataset, cfg, rng, counters).map(|(s, _)| s)
}

/// [`mix_sample`] plus the per-modality event log.
pub fn mix_sample_logged(
    anchor: &PreparedSample,
    index: &ClassDomainIndex,
    dataset: &[PreparedSample],
    cfg: &MixConfig,
    rng: &mut Rng,
    counters: Option<&MixCounters>,
) -> Result<(PreparedSample, Vec<MixEvent>)> {
    if let Some(c) = counters {
        c.calls.fetch_add(1, Ordering::Relaxed);
    }
    let mut out = anchor.clone();
    if !cfg.enabled {
        return Ok((out, Vec::new()));
    }
    let others: Vec<&String> = index.domains().iter().filter(|d| **d != anchor.domain).collect();
    if others.len() + 1 != index.domains().len() {
        return Err(Error::Validation(format!("anchor domain {} is not a source domain", anchor.domain)));
    }
    if others.is_empty() {
        return Err(Error::Validation("cross-domain mixing needs at least two source domains".into()));
    }
    let mut events = Vec::with_capacity(Modality::ALL.len());
    for m in Modality::ALL {
        let mut ev = MixEvent { modality: m, gated: false, partner_domain: None, partner: None, coefficient: None };
        if rng.random::<f64>() < cfg.gate_p {
            ev.gated = true;
            let domain = others[rng.random_range(0..others.len())];
            ev.partner_domain = Some(domain.clone());
            let bucket = index.bucket(domain, anchor.label);
            if bucket.is_empty() {
                if let Some(c) = counters {
                    c.empty_bucket.fetch_add(1, Ordering::Relaxed);
                }
            } else {
                let p = bucket[rng.random_range(0..bucket.len())];
                let coef = draw_mix_coefficient(cfg, rng);
                blend_modality(&mut out, &dataset[p], m, coef.alpha);
                ev.partner = Some(p);
                ev.coefficient = Some(coef);
                if let Some(c) = counters {
                    c.mixed_modalities.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        events.push(ev);
    }
    Ok((out, events))
}
