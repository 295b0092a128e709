//! Training objective, task schemes, evaluation, ablations and sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{mix_sample, ClassDomainIndex, MixConfig, MixCounters};
use crate::autodiff::{Graph, Var};
use crate::container::{self, Manifest};
use crate::disentangle::{self, KernelSpec, PairVars};
use crate::encoders::{batch_input, EncoderConfig};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::fusion::FusionConfig;
use crate::model::{FusionKind, Model, ModelSpec};
use crate::nn::{Adam, AdamConfig, Binding, ForwardCtx, Linear};
use crate::preprocess::{self, NormStats, PreparedSample};
use crate::rng;
use crate::{Modality, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub sources: Vec<String>,
    pub target: String,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, sources: &[&str], target: &str) -> Result<Self> {
        let t = TaskSpec { id: id.into(), sources: sources.iter().map(|s| s.to_string()).collect(), target: target.into() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.contains(&self.target) {
            return Err(Error::Validation(format!("task {}: target {} is among the sources", self.id, self.target)));
        }
        if self.sources.len() < 2 {
            return Err(Error::Validation(format!("task {}: at least two source conditions are required", self.id)));
        }
        let unique: BTreeSet<_> = self.sources.iter().collect();
        if unique.len() != self.sources.len() {
            return Err(Error::Validation(format!("task {}: duplicate source conditions", self.id)));
        }
        Ok(())
    }

    pub fn conditions(&self) -> Vec<String> {
        let mut c = self.sources.clone();
        c.push(self.target.clone());
        c
    }
}

/// The nine cross-condition tasks: T1..T4 leave one constant-speed condition
/// out, T5..T9 train on C1..C3 and test on a time-varying condition.
pub fn standard_tasks() -> Vec<TaskSpec> {
    let rows: [(&str, [&str; 3], &str); 9] = [
        ("T1", ["C2", "C3", "C4"], "C1"),
        ("T2", ["C1", "C3", "C4"], "C2"),
        ("T3", ["C1", "C2", "C4"], "C3"),
        ("T4", ["C1", "C2", "C3"], "C4"),
        ("T5", ["C1", "C2", "C3"], "C5"),
        ("T6", ["C1", "C2", "C3"], "C6"),
        ("T7", ["C1", "C2", "C3"], "C7"),
        ("T8", ["C1", "C2", "C3"], "C8"),
        ("T9", ["C1", "C2", "C3"], "C9"),
    ];
    rows.iter().map(|(id, s, t)| TaskSpec::new(*id, s, t).expect("valid table")).collect()
}

pub fn standard_task(id: &str) -> Option<TaskSpec> {
    standard_tasks().into_iter().find(|t| t.id == id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    WoDis,
    WoModalityDis,
    WoDomainDis,
    WoMix,
    Concat,
    ConcatEmb,
    Add,
    AddEmb,
    Full,
    SingleVib,
    SingleCur,
    SingleAco,
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::Baseline,
        Variant::WoDis,
        Variant::WoModalityDis,
        Variant::WoDomainDis,
        Variant::WoMix,
        Variant::Concat,
        Variant::ConcatEmb,
        Variant::Add,
        Variant::AddEmb,
        Variant::Full,
        Variant::SingleVib,
        Variant::SingleCur,
        Variant::SingleAco,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::WoDis => "wo_dis",
            Variant::WoModalityDis => "wo_modality_dis",
            Variant::WoDomainDis => "wo_domain_dis",
            Variant::WoMix => "wo_mix",
            Variant::Concat => "concat",
            Variant::ConcatEmb => "concat_emb",
            Variant::Add => "add",
            Variant::AddEmb => "add_emb",
            Variant::Full => "full",
            Variant::SingleVib => "single_vib",
            Variant::SingleCur => "single_cur",
            Variant::SingleAco => "single_aco",
        }
    }

    fn fusion_kind(self) -> FusionKind {
        match self {
            Variant::Baseline | Variant::Concat => FusionKind::Concat,
            Variant::ConcatEmb => FusionKind::ConcatEmb,
            Variant::Add => FusionKind::Add,
            Variant::AddEmb => FusionKind::AddEmb,
            Variant::SingleVib | Variant::SingleCur | Variant::SingleAco => FusionKind::Single,
            _ => FusionKind::Attention,
        }
    }

    fn modalities(self) -> Vec<Modality> {
        match self {
            Variant::SingleVib => vec![Modality::Vibration],
            Variant::SingleCur => vec![Modality::Current],
            Variant::SingleAco => vec![Modality::Acoustic],
            _ => Modality::ALL.to_vec(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub adam: AdamConfig,
    pub batch_per_domain: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub variant: Variant,
    pub mix: MixConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub kernel: KernelSpec,
    pub bn_momentum: f64,
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_m: 0.1,
            lambda_d: 0.5,
            adam: AdamConfig::default(),
            batch_per_domain: 64,
            epochs: 50,
            patience: 10,
            val_fraction: 0.1,
            seed: 0,
            variant: Variant::Full,
            mix: MixConfig::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            kernel: KernelSpec::default(),
            bn_momentum: 0.1,
            eval_chunk: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_m >= 0.0 && self.lambda_d >= 0.0) {
            return Err(Error::InvalidArgument("trade-off coefficients must be non-negative".into()));
        }
        if self.batch_per_domain < 2 {
            return Err(Error::InvalidArgument("batch_per_domain must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument("val_fraction must lie in [0, 1)".into()));
        }
        if self.adam.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        self.mix.validate()?;
        self.kernel.validate()
    }

    /// The configuration and network actually trained for `self.variant`.
    pub fn resolve(&self) -> (TrainConfig, ModelSpec) {
        let mut cfg = self.clone();
        match self.variant {
            Variant::WoDis => (cfg.lambda_m, cfg.lambda_d) = (0.0, 0.0),
            Variant::WoModalityDis => cfg.lambda_m = 0.0,
            Variant::WoDomainDis => cfg.lambda_d = 0.0,
            Variant::WoMix => cfg.mix.enabled = false,
            Variant::Baseline => {
                (cfg.lambda_m, cfg.lambda_d) = (0.0, 0.0);
                cfg.mix.enabled = false;
            }
            _ => {}
        }
        let spec = ModelSpec {
            encoder: cfg.encoder.clone(),
            fusion: cfg.fusion,
            fusion_kind: self.variant.fusion_kind(),
            modalities: self.variant.modalities(),
            embed_dim: disentangle::EMBED_DIM,
        };
        (cfg, spec)
    }
}

/// Loss components of one step (or an average of steps).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls: f64,
    pub modality: f64,
    pub domain: f64,
    pub total: f64,
}

impl LossBundle {
    /// Recomputes the weighted total from the components.
    pub fn weighted_total(&self, lambda_m: f64, lambda_d: f64) -> f64 {
        self.cls + lambda_m * self.modality + lambda_d * self.domain
    }
}

/// Graph handles of the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls: Var,
    pub modality: Option<Var>,
    pub domain: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBundle {
        LossBundle {
            cls: g.scalar(self.cls),
            modality: self.modality.map_or(0.0, |m| g.scalar(m)),
            domain: g.scalar(self.domain),
            total: g.scalar(self.total),
        }
    }
}

/// Class probabilities from the domain-level pair.
pub fn classify(g: &mut Graph, bind: &Binding, classifier: &Linear, pair: PairVars) -> Var {
    let logits = crate::model::classify_logits(g, bind, classifier, pair);
    g.softmax(logits)
}

/// Row ranges of each domain inside a concatenated batch.
fn domain_rows(sizes: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let r = (start, start + n);
            start += n;
            r
        })
        .collect()
}

fn slice_pair(g: &mut Graph, p: PairVars, (a, b): (usize, usize), whole: usize) -> PairVars {
    if a == 0 && b == whole {
        return p;
    }
    PairVars { inv: g.slice(p.inv, 0, a, b), spe: g.slice(p.spe, 0, a, b) }
}

/// Classification, modality-level and domain-level losses of a batch made of
/// consecutive per-domain blocks of sizes `domain_sizes`.
pub fn total_loss(
    g: &mut Graph,
    out: &crate::model::ForwardOut,
    domain_sizes: &[usize],
    labels: &[usize],
    lambda_m: f64,
    lambda_d: f64,
    kernel: &KernelSpec,
) -> Result<LossVars> {
    let n: usize = domain_sizes.iter().sum();
    if labels.len() != n || domain_sizes.is_empty() || domain_sizes.contains(&0) {
        return Err(Error::InvalidArgument("labels must cover every non-empty domain block".into()));
    }
    let m = domain_sizes.len() as f64;
    let weights: Vec<f64> = domain_sizes.iter().flat_map(|&k| std::iter::repeat_n(1.0 / (m * k as f64), k)).collect();
    let cls = g.cross_entropy(out.logits, labels, &weights);
    let rows = domain_rows(domain_sizes);

    let modality = if out.modality_pairs.is_empty() {
        None
    } else {
        let per_domain: Vec<Vec<PairVars>> = rows
            .iter()
            .map(|&r| out.modality_pairs.iter().map(|&p| slice_pair(g, p, r, n)).collect())
            .collect();
        Some(disentangle::modality_loss(g, &per_domain, kernel)?)
    };
    let per_domain: Vec<PairVars> = rows.iter().map(|&r| slice_pair(g, out.domain_pair, r, n)).collect();
    let domain = disentangle::domain_loss(g, &per_domain, kernel)?;

    let mut total = cls;
    if let Some(lm) = modality {
        let w = g.scale(lm, lambda_m);
        total = g.add(total, w);
    }
    let w = g.scale(domain, lambda_d);
    total = g.add(total, w);
    Ok(LossVars { cls, modality, domain, total })
}

/// Instrumentation for the no-leakage guarantees.
#[derive(Debug, Default)]
pub struct Audit {
    pub mix: MixCounters,
    accesses: Mutex<Vec<(Phase, String)>>,
    eval_mix_calls: AtomicU64,
    stats_violations: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub touched_in_training: BTreeSet<String>,
    pub touched_in_eval: BTreeSet<String>,
    pub mix_calls: u64,
    pub mix_calls_during_eval: u64,
    pub stats_violations: u64,
}

impl AuditReport {
    /// Counts every departure from: training reads exactly the sources,
    /// evaluation reads only the target, no mixing or foreign statistics at evaluation.
    pub fn violations(&self, task: &TaskSpec) -> u64 {
        let sources: BTreeSet<String> = task.sources.iter().cloned().collect();
        let train_bad = self.touched_in_training.symmetric_difference(&sources).count() as u64;
        let eval_bad = self.touched_in_eval.iter().filter(|c| **c != task.target).count() as u64;
        train_bad + eval_bad + self.mix_calls_during_eval + self.stats_violations
    }
}

impl Audit {
    fn record(&self, phase: Phase, conditions: &[String]) {
        let mut log = self.accesses.lock().expect("audit lock");
        log.extend(conditions.iter().map(|c| (phase, c.clone())));
    }

    pub fn report(&self) -> AuditReport {
        let log = self.accesses.lock().expect("audit lock");
        let pick = |p: Phase| log.iter().filter(|(ph, _)| *ph == p).map(|(_, c)| c.clone()).collect();
        AuditReport {
            touched_in_training: pick(Phase::Train),
            touched_in_eval: pick(Phase::Eval),
            mix_calls: self.mix.calls(),
            mix_calls_during_eval: self.eval_mix_calls.load(Ordering::Relaxed),
            stats_violations: self.stats_violations.load(Ordering::Relaxed),
        }
    }
}

/// Prepared, un-normalised samples by condition. Every read is logged on the given [`Audit`].
pub enum DataStore {
    Memory(BTreeMap<String, Vec<PreparedSample>>),
    Dir { dir: std::path::PathBuf, manifest: Manifest },
}

impl DataStore {
    pub fn from_samples(samples: Vec<PreparedSample>) -> Self {
        let mut map: BTreeMap<String, Vec<PreparedSample>> = BTreeMap::new();
        for s in samples {
            map.entry(s.domain.clone()).or_default().push(s);
        }
        DataStore::Memory(map)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        if manifest.kind != container::DatasetKind::Prepared {
            return Err(Error::Format(format!("{} does not hold prepared data", dir.display())));
        }
        Ok(DataStore::Dir { dir: dir.to_path_buf(), manifest })
    }

    pub fn conditions(&self) -> Vec<String> {
        match self {
            DataStore::Memory(m) => m.keys().cloned().collect(),
            DataStore::Dir { manifest, .. } => manifest.condition_ids(),
        }
    }

    pub fn fetch(&self, conditions: &[String], phase: Phase, audit: &Audit) -> Result<Vec<PreparedSample>> {
        audit.record(phase, conditions);
        match self {
            DataStore::Memory(map) => {
                let mut out = Vec::new();
                for c in conditions {
                    let v = map.get(c).ok_or_else(|| Error::Validation(format!("condition {c} is not in the dataset")))?;
                    out.extend(v.iter().cloned());
                }
                Ok(out)
            }
            DataStore::Dir { dir, manifest } => container::read_prepared_conditions(dir, manifest, conditions),
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBundle,
    pub val_accuracy: f64,
    pub val_ce: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochRecord>,
    /// Every step's loss components, in order.
    pub steps: Vec<LossBundle>,
    pub best_epoch: usize,
}

/// A trained network together with what is needed to evaluate it.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub stats: NormStats,
    pub task: TaskSpec,
    pub cfg: TrainConfig,
    pub curve: TrainingCurve,
}

fn split_holdout(samples: Vec<PreparedSample>, frac: f64, seed: u64) -> (Vec<PreparedSample>, Vec<PreparedSample>) {
    let mut groups: BTreeMap<(String, u8), Vec<PreparedSample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.domain.clone(), s.label)).or_default().push(s);
    }
    let mut rng = rng::substream(seed, &["split"]);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut g) in groups {
        g.shuffle(&mut rng);
        let k = ((g.len() as f64) * frac).round() as usize;
        let k = k.min(g.len().saturating_sub(1));
        let rest = g.split_off(k);
        val.extend(g);
        train.extend(rest);
    }
    (train, val)
}

/// Class-stratified order of one domain's indices: classes are interleaved
/// round by round so any aligned window of `classes` positions covers them all.
fn stratified_order(indices: &[usize], samples: &[PreparedSample], rng: &mut rng::Rng) -> Vec<usize> {
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(samples[i].label).or_default().push(i);
    }
    let mut queues: Vec<Vec<usize>> = by_class
        .into_values()
        .map(|mut v| {
            v.shuffle(rng);
            v.reverse();
            v
        })
        .collect();
    let mut out = Vec::with_capacity(indices.len());
    while queues.iter().any(|q| !q.is_empty()) {
        let mut round: Vec<usize> = queues.iter_mut().filter_map(|q| q.pop()).collect();
        round.shuffle(rng);
        out.extend(round);
    }
    out
}

fn forward_batch(
    model: &Model,
    g: &mut Graph,
    bind: &Binding,
    ctx: &mut ForwardCtx,
    samples: &[&PreparedSample],
) -> Result<crate::model::ForwardOut> {
    let inputs = model
        .spec
        .modalities
        .iter()
        .map(|&m| Ok(g.constant(batch_input(m, samples)?)))
        .collect::<Result<Vec<_>>>()?;
    model.forward(g, bind, ctx, &inputs)
}

fn validation(model: &Model, val: &[PreparedSample], cfg: &TrainConfig) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((0.0, 0.0));
    }
    let refs: Vec<&PreparedSample> = val.iter().collect();
    let probs = model.predict(&refs, Execution::default(), cfg.eval_chunk)?;
    let mut correct = 0usize;
    let mut ce = 0.0;
    for (i, s) in val.iter().enumerate() {
        let row = probs.row(i);
        let y = s.label as usize - 1;
        if argmax(row.iter().copied()) == y {
            correct += 1;
        }
        ce -= row[y].max(1e-300).ln();
    }
    Ok((100.0 * correct as f64 / val.len() as f64, ce / val.len() as f64))
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Observer for per-epoch progress.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Trains on the task's source conditions. If `stats` is `None` they are
/// fitted on the fetched source data; supplied statistics must name only sources.
pub fn train(
    task: &TaskSpec,
    cfg: &TrainConfig,
    data: &DataStore,
    stats: Option<NormStats>,
    audit: &Audit,
    mut hook: Option<EpochHook<'_>>,
) -> Result<Trained> {
    task.validate()?;
    cfg.validate()?;
    let (run_cfg, spec) = cfg.resolve();
    let source_data = data.fetch(&task.sources, Phase::Train, audit)?;
    if let Some(s) = source_data.iter().find(|s| !task.sources.contains(&s.domain)) {
        return Err(Error::Leakage(format!("training data contains condition {}", s.domain)));
    }
    let stats = match stats {
        Some(st) => {
            st.assert_provenance(&task.sources)?;
            st
        }
        None => preprocess::fit_norm_stats(&source_data, &task.sources)?,
    };
    let mut source_data = source_data;
    preprocess::normalize(&mut source_data, &stats);
    let (train_set, val_set) = split_holdout(source_data, run_cfg.val_fraction, run_cfg.seed);

    let domains: Vec<String> = task.sources.clone();
    let per_domain: Vec<Vec<usize>> = domains
        .iter()
        .map(|d| (0..train_set.len()).filter(|&i| train_set[i].domain == *d).collect())
        .collect();
    if let Some((d, _)) = domains.iter().zip(&per_domain).find(|(_, v)| v.len() < 2) {
        return Err(Error::Validation(format!("source {d} has fewer than two training samples")));
    }
    let batch = run_cfg.batch_per_domain.min(per_domain.iter().map(Vec::len).min().unwrap_or(0));
    let steps_per_epoch = (per_domain.iter().map(Vec::len).min().unwrap_or(0) / batch).max(1);
    let index = ClassDomainIndex::build(&train_set);

    let mut model = Model::new(spec, run_cfg.seed)?;
    let mut opt = Adam::new(run_cfg.adam, &model.store);
    let mut shuffle_rng = rng::substream(run_cfg.seed, &["shuffle"]);
    let mut mix_rng = rng::substream(run_cfg.seed, &["mix"]);
    let mut curve = TrainingCurve::default();
    let mut best: Option<(f64, f64, crate::nn::ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 0..run_cfg.epochs {
        let orders: Vec<Vec<usize>> = per_domain.iter().map(|ix| stratified_order(ix, &train_set, &mut shuffle_rng)).collect();
        let mut acc = LossBundle::default();
        for step in 0..steps_per_epoch {
            let mut batch_samples: Vec<PreparedSample> = Vec::with_capacity(batch * domains.len());
            for order in &orders {
                for &i in &order[step * batch..(step + 1) * batch] {
                    let s = if run_cfg.mix.enabled {
                        mix_sample(&train_set[i], &index, &train_set, &run_cfg.mix, &mut mix_rng, Some(&audit.mix))?
                    } else {
                        train_set[i].clone()
                    };
                    batch_samples.push(s);
                }
            }
            let refs: Vec<&PreparedSample> = batch_samples.iter().collect();
            let labels: Vec<usize> = refs.iter().map(|s| s.label as usize - 1).collect();
            let sizes = vec![batch; domains.len()];

            let mut g = Graph::new();
            let bind = model.store.bind(&mut g);
            let mut ctx = ForwardCtx::train();
            let out = forward_batch(&model, &mut g, &bind, &mut ctx, &refs)?;
            let lv = total_loss(&mut g, &out, &sizes, &labels, run_cfg.lambda_m, run_cfg.lambda_d, &run_cfg.kernel)?;
            let lb = lv.values(&g);
            for (name, v) in [("cls", lb.cls), ("modality", lb.modality), ("domain", lb.domain), ("total", lb.total)] {
                if !v.is_finite() {
                    return Err(Error::NonFinite { epoch, step, component: name });
                }
            }
            let grads = g.backward(lv.total);
            opt.step(&mut model.store, &bind, &grads);
            ctx.update_running_stats(&g, &mut model.store, run_cfg.bn_momentum);
            curve.steps.push(lb);
            acc.cls += lb.cls;
            acc.modality += lb.modality;
            acc.domain += lb.domain;
            acc.total += lb.total;
        }
        let k = steps_per_epoch as f64;
        let loss = LossBundle { cls: acc.cls / k, modality: acc.modality / k, domain: acc.domain / k, total: acc.total / k };
        let (val_accuracy, val_ce) = validation(&model, &val_set, &run_cfg)?;
        let rec = EpochRecord { epoch, steps: steps_per_epoch, loss, val_accuracy, val_ce };
        if let Some(h) = hook.as_mut() {
            h(&rec);
        }
        curve.epochs.push(rec);

        let improved = match &best {
            None => true,
            Some((ba, bc, _)) => val_accuracy > *ba || (val_accuracy == *ba && val_ce < *bc),
        };
        if improved {
            best = Some((val_accuracy, val_ce, model.store.clone()));
            curve.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if run_cfg.patience > 0 && since_best >= run_cfg.patience {
                break;
            }
        }
    }
    if !val_set.is_empty() {
        if let Some((_, _, store)) = best {
            model.store = store;
        }
    }
    Ok(Trained { model, stats, task: task.clone(), cfg: cfg.clone(), curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub variant: Variant,
    pub seed: u64,
    /// Percent.
    pub accuracy: f64,
    /// `confusion[true][predicted]`, classes 1..8 at indices 0..7.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub samples: usize,
}

impl EvalReport {
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for (i, row) in self.confusion.iter().enumerate() {
            c[i] = row.iter().sum();
        }
        c
    }
}

/// Accuracy and confusion of `model` on already-normalised samples.
pub fn evaluate_samples(model: &Model, samples: &[PreparedSample], exec: Execution, chunk: usize) -> Result<([[usize; NUM_CLASSES]; NUM_CLASSES], f64)> {
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let probs = model.predict(&refs, exec, chunk)?;
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (i, s) in samples.iter().enumerate() {
        confusion[s.label as usize - 1][argmax(probs.row(i).iter().copied())] += 1;
    }
    let correct: usize = (0..NUM_CLASSES).map(|k| confusion[k][k]).sum();
    let acc = if samples.is_empty() { 0.0 } else { 100.0 * correct as f64 / samples.len() as f64 };
    Ok((confusion, acc))
}

/// Evaluates on the task's target condition, normalised with the source statistics.
pub fn evaluate(trained: &Trained, data: &DataStore, audit: &Audit, exec: Execution) -> Result<EvalReport> {
    let task = &trained.task;
    if trained.stats.assert_provenance(&task.sources).is_err() || trained.stats.sources.contains(&task.target) {
        audit.stats_violations.fetch_add(1, Ordering::Relaxed);
        return Err(Error::Leakage("normalisation statistics do not come from the source conditions".into()));
    }
    let mix_before = audit.mix.calls();
    let mut target = data.fetch(std::slice::from_ref(&task.target), Phase::Eval, audit)?;
    preprocess::normalize(&mut target, &trained.stats);
    let (confusion, accuracy) = evaluate_samples(&trained.model, &target, exec, trained.cfg.eval_chunk)?;
    audit.eval_mix_calls.fetch_add(audit.mix.calls() - mix_before, Ordering::Relaxed);
    Ok(EvalReport {
        task: task.id.clone(),
        variant: trained.cfg.variant,
        seed: trained.cfg.seed,
        accuracy,
        confusion,
        samples: target.len(),
    })
}

/// One train + evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub report: EvalReport,
    pub curve: TrainingCurve,
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub audit: AuditReport,
}

pub fn run_ablation(variant: Variant, task: &TaskSpec, cfg: &TrainConfig, data: &DataStore) -> Result<RunRecord> {
    let cfg = TrainConfig { variant, ..cfg.clone() };
    let (resolved, _) = cfg.resolve();
    let audit = Audit::default();
    let trained = train(task, &cfg, data, None, &audit, None)?;
    let report = evaluate(&trained, data, &audit, Execution::Sequential)?;
    Ok(RunRecord {
        report,
        curve: trained.curve,
        lambda_m: resolved.lambda_m,
        lambda_d: resolved.lambda_d,
        audit: audit.report(),
    })
}

/// Runs independent jobs, in parallel when `exec` allows. Each run is itself
/// sequential, so results do not depend on the policy.
pub fn run_many(exec: Execution, jobs: &[(Variant, TaskSpec, TrainConfig)], data: &DataStore) -> Vec<Result<RunRecord>> {
    exec::map_collect(exec, jobs, |(v, t, c)| run_ablation(*v, t, c, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub task: String,
    pub seed: u64,
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub accuracy: f64,
    pub config: TrainConfig,
}

/// Accuracy of the full model over the `lambda_m x lambda_d` grid.
pub fn sweep(
    exec: Execution,
    task: &TaskSpec,
    lambda_m: &[f64],
    lambda_d: &[f64],
    cfg: &TrainConfig,
    data: &DataStore,
) -> Result<Vec<SweepRecord>> {
    if lambda_m.is_empty() || lambda_d.is_empty() {
        return Err(Error::InvalidArgument("sweep grids must be non-empty".into()));
    }
    let jobs: Vec<(Variant, TaskSpec, TrainConfig)> = lambda_m
        .iter()
        .flat_map(|&lm| lambda_d.iter().map(move |&ld| (lm, ld)))
        .map(|(lm, ld)| (Variant::Full, task.clone(), TrainConfig { lambda_m: lm, lambda_d: ld, variant: Variant::Full, ..cfg.clone() }))
        .collect();
    run_many(exec, &jobs, data)
        .into_iter()
        .zip(&jobs)
        .map(|(r, (_, _, c))| {
            let r = r?;
            Ok(SweepRecord { task: task.id.clone(), seed: c.seed, lambda_m: c.lambda_m, lambda_d: c.lambda_d, accuracy: r.report.accuracy, config: c.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    task: TaskSpec,
    config: TrainConfig,
    spec: ModelSpec,
    stats: NormStats,
    curve: TrainingCurve,
    params: Vec<ParamEntry>,
}

pub const CHECKPOINT_META: &str = "checkpoint.json";
pub const CHECKPOINT_PARAMS: &str = "params.bin";

/// Writes `checkpoint.json` (names, shapes, offsets, config, statistics) and
/// `params.bin` (little-endian f64 values, including batch-norm buffers).
pub fn save_checkpoint(trained: &Trained, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut params = Vec::new();
    for (_, p) in trained.model.store.iter() {
        params.push(ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset: bytes.len() / 8, trainable: p.trainable });
        for v in p.value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        task: trained.task.clone(),
        config: trained.cfg.clone(),
        spec: trained.model.spec.clone(),
        stats: trained.stats.clone(),
        curve: trained.curve.clone(),
        params,
    };
    std::fs::write(dir.join(CHECKPOINT_PARAMS), bytes)?;
    std::fs::write(dir.join(CHECKPOINT_META), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Trained> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(CHECKPOINT_META))?)?;
    let bytes = std::fs::read(dir.join(CHECKPOINT_PARAMS))?;
    let mut model = Model::new(meta.spec.clone(), meta.config.seed)?;
    if model.store.len() != meta.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, the network {}",
            meta.params.len(),
            model.store.len()
        )));
    }
    for e in &meta.params {
        let id = model.store.id(&e.name).ok_or_else(|| Error::Format(format!("unknown tensor {}", e.name)))?;
        let n: usize = e.shape.iter().product();
        if model.store.get(id).shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("tensor {} has shape {:?} in the checkpoint", e.name, e.shape)));
        }
        let raw = bytes
            .get(e.offset * 8..(e.offset + n) * 8)
            .ok_or_else(|| Error::Format(format!("tensor {} runs past the end of the data", e.name)))?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        *model.store.get_mut(id) = ArrayD::from_shape_vec(IxDyn(&e.shape), vals).expect("sized");
    }
    Ok(Trained { model, stats: meta.stats, task: meta.task, cfg: meta.config, curve: meta.curve })
}
