//! Synthetic tri-modal motor signals.
//!
//! Each (condition, fault class) pair is one continuous simulation whose clock
//! starts 10 s after motor start-up. Consecutive samples are non-overlapping
//! 0.2 s windows. Every modality is the sum of base components locked to the
//! shaft and supply phases, fault-signature components scaled by load, and
//! white Gaussian noise at a per-modality SNR.
//!
//! The fault recipes are surrogates chosen for separability and for an
//! informativeness ordering vibration > acoustic > current. They do not model
//! real motor electromagnetics.

use std::f64::consts::PI;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::rng;
use crate::{Modality, NUM_CLASSES};

pub const VIB_RATE: f64 = 5120.0;
pub const CUR_RATE: f64 = 5120.0;
pub const ACO_RATE: f64 = 44100.0;
pub const SEGMENT_S: f64 = 0.2;
pub const VIB_LEN: usize = 1024;
pub const CUR_LEN: usize = 1024;
pub const ACO_LEN: usize = 8820;
pub const VIB_CH: usize = 3;
pub const CUR_CH: usize = 3;
pub const ACO_CH: usize = 6;
/// Acquisition starts this long after start-up.
pub const WARMUP_S: f64 = 10.0;
const POLE_PAIRS: f64 = 2.0;

pub fn sample_rate(m: Modality) -> f64 {
    match m {
        Modality::Vibration => VIB_RATE,
        Modality::Current => CUR_RATE,
        Modality::Acoustic => ACO_RATE,
    }
}

pub fn segment_len(m: Modality) -> usize {
    match m {
        Modality::Vibration => VIB_LEN,
        Modality::Current => CUR_LEN,
        Modality::Acoustic => ACO_LEN,
    }
}

pub fn channels(m: Modality) -> usize {
    match m {
        Modality::Vibration => VIB_CH,
        Modality::Current => CUR_CH,
        Modality::Acoustic => ACO_CH,
    }
}

/// A piecewise-linear operating profile: either constant, or a triangle wave
/// that starts at `min` at t = 0 and cycles between the bounds at `rate` units/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Constant { value: f64 },
    Triangle { min: f64, max: f64, rate: f64 },
}

impl Profile {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Profile::Constant { value } => value,
            Profile::Triangle { min, max, rate } => {
                let rise = (max - min) / rate;
                let phase = t.rem_euclid(2.0 * rise);
                if phase <= rise {
                    min + rate * phase
                } else {
                    max - rate * (phase - rise)
                }
            }
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Profile::Constant { value } => (value, value),
            Profile::Triangle { min, max, .. } => (min, max),
        }
    }

    /// Breakpoints `(t, value)` of the piecewise-linear profile on `[t0, t1]`.
    pub fn knots(&self, t0: f64, t1: f64) -> Vec<(f64, f64)> {
        match *self {
            Profile::Constant { value } => vec![(t0, value), (t1, value)],
            Profile::Triangle { min, max, rate } => {
                let rise = (max - min) / rate;
                let mut out = vec![(t0, self.at(t0))];
                let mut k = (t0 / rise).floor() + 1.0;
                while k * rise < t1 {
                    let t = k * rise;
                    out.push((t, if (k as i64) % 2 == 1 { max } else { min }));
                    k += 1.0;
                }
                out.push((t1, self.at(t1)));
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub id: String,
    /// Shaft speed in RPM.
    pub speed_profile: Profile,
    /// Load in percent of maximum.
    pub load_profile: Profile,
    pub duration_s: f64,
}

fn make_profile(what: &str, range: (f64, f64), rate: f64) -> Result<Profile> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && rate.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what}: non-finite profile")));
    }
    if hi < lo {
        return Err(Error::InvalidArgument(format!("{what}: range upper bound below lower bound")));
    }
    if lo == hi {
        if rate != 0.0 {
            return Err(Error::InvalidArgument(format!("{what}: constant range with non-zero rate")));
        }
        return Ok(Profile::Constant { value: lo });
    }
    if rate <= 0.0 {
        return Err(Error::InvalidArgument(format!("{what}: non-constant range needs a positive rate")));
    }
    Ok(Profile::Triangle { min: lo, max: hi, rate })
}

/// Builds a working condition from speed and load ranges with their change rates.
pub fn make_condition(
    id: &str,
    speed_rpm_range: (f64, f64),
    speed_rate: f64,
    load_range: (f64, f64),
    load_rate: f64,
    duration_s: f64,
) -> Result<ConditionSpec> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {duration_s}")));
    }
    if speed_rpm_range.0 <= 0.0 {
        return Err(Error::InvalidArgument("speed must be positive".into()));
    }
    if load_range.0 < 0.0 || load_range.1 > 100.0 {
        return Err(Error::InvalidArgument("load must lie in [0, 100] percent".into()));
    }
    Ok(ConditionSpec {
        id: id.to_string(),
        speed_profile: make_profile("speed", speed_rpm_range, speed_rate)?,
        load_profile: make_profile("load", load_range, load_rate)?,
        duration_s,
    })
}

/// The nine working conditions C1..C9 (100 s each).
pub fn standard_conditions() -> Vec<ConditionSpec> {
    let rows: [(&str, (f64, f64), f64, (f64, f64), f64); 9] = [
        ("C1", (1200.0, 1200.0), 0.0, (100.0, 100.0), 0.0),
        ("C2", (1800.0, 1800.0), 0.0, (100.0, 100.0), 0.0),
        ("C3", (2400.0, 2400.0), 0.0, (100.0, 100.0), 0.0),
        ("C4", (2700.0, 2700.0), 0.0, (100.0, 100.0), 0.0),
        ("C5", (1200.0, 2400.0), 150.0, (100.0, 100.0), 0.0),
        ("C6", (1200.0, 2400.0), 300.0, (100.0, 100.0), 0.0),
        ("C7", (1200.0, 2400.0), 600.0, (100.0, 100.0), 0.0),
        ("C8", (1800.0, 1800.0), 0.0, (0.0, 100.0), 20.0),
        ("C9", (1800.0, 1800.0), 0.0, (0.0, 100.0), 2.0),
    ];
    rows.iter()
        .map(|(id, s, sr, l, lr)| make_condition(id, *s, *sr, *l, *lr, 100.0).expect("valid table row"))
        .collect()
}

pub fn standard_condition(id: &str) -> Option<ConditionSpec> {
    standard_conditions().into_iter().find(|c| c.id == id)
}

/// Where a component's frequency comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    /// `order` times the shaft rotation frequency.
    Rotation,
    /// `order` times the supply (line) frequency.
    Supply,
    /// `order` times a fixed frequency in Hz (structural or acoustic resonance).
    Fixed { hz: f64 },
}

/// One sinusoid: frequency `order * f_source + offset * f_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub source: Source,
    pub order: f64,
    /// Sideband offset as a multiple of the rotation frequency.
    pub offset: f64,
    pub amplitude: f64,
    pub phase: f64,
    /// Per-channel gains; empty means unit gain on every channel.
    pub gains: Vec<f64>,
}

fn comp(source: Source, order: f64, offset: f64, amplitude: f64) -> Component {
    Component { source, order, offset, amplitude, phase: 0.0, gains: Vec::new() }
}

fn with_gains(mut c: Component, gains: &[f64]) -> Component {
    c.gains = gains.to_vec();
    c
}

fn with_phase(mut c: Component, phase: f64) -> Component {
    c.phase = phase;
    c
}

fn sidebands(source: Source, order: f64, offset: f64, amplitude: f64) -> [Component; 2] {
    [comp(source, order, -offset, amplitude), comp(source, order, offset, amplitude)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Signature {
    pub vibration: Vec<Component>,
    pub current: Vec<Component>,
    pub acoustic: Vec<Component>,
}

impl Signature {
    pub fn components(&self, m: Modality) -> &[Component] {
        match m {
            Modality::Vibration => &self.vibration,
            Modality::Current => &self.current,
            Modality::Acoustic => &self.acoustic,
        }
    }

    pub fn is_silent(&self) -> bool {
        Modality::ALL
            .iter()
            .all(|m| self.components(*m).iter().all(|c| c.amplitude == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultKind {
    N,
    BRB,
    SWF,
    PMR,
    BF,
    RB,
    AMR,
    RU,
}

impl FaultKind {
    pub const ALL: [FaultKind; NUM_CLASSES] = [
        FaultKind::N,
        FaultKind::BRB,
        FaultKind::SWF,
        FaultKind::PMR,
        FaultKind::BF,
        FaultKind::RB,
        FaultKind::AMR,
        FaultKind::RU,
    ];

    /// Class label in 1..=8.
    pub fn label(self) -> u8 {
        FaultKind::ALL.iter().position(|k| *k == self).unwrap() as u8 + 1
    }

    pub fn from_label(label: u8) -> Option<FaultKind> {
        FaultKind::ALL.get((label as usize).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::N => "N",
            FaultKind::BRB => "BRB",
            FaultKind::SWF => "SWF",
            FaultKind::PMR => "PMR",
            FaultKind::BF => "BF",
            FaultKind::RB => "RB",
            FaultKind::AMR => "AMR",
            FaultKind::RU => "RU",
        }
    }

    pub fn from_name(name: &str) -> Option<FaultKind> {
        FaultKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultClass {
    pub label: u8,
    pub name: String,
    pub signature: Signature,
}

// Outer-race defect frequency as a multiple of shaft speed.
const BPFO: f64 = 3.58;
const BPFI: f64 = 5.42;

/// Default fault recipe for a class.
pub fn fault_class(kind: FaultKind) -> FaultClass {
    use Source::*;
    let vib_res = Fixed { hz: 1650.0 };
    let aco_res = Fixed { hz: 6200.0 };
    let sig = match kind {
        FaultKind::N => Signature::default(),
        FaultKind::BRB => Signature {
            vibration: [
                sidebands(Supply, 2.0, 1.0, 0.35).to_vec(),
                vec![comp(Rotation, 6.0, 0.0, 0.3)],
            ]
            .concat(),
            current: sidebands(Supply, 1.0, 0.5, 0.05).to_vec(),
            acoustic: sidebands(Supply, 2.0, 1.0, 0.2).to_vec(),
        },
        FaultKind::SWF => Signature {
            vibration: vec![
                comp(Supply, 2.0, 0.0, 0.5),
                comp(Supply, 4.0, 0.0, 0.3),
                comp(Supply, 6.0, 0.0, 0.2),
            ],
            current: vec![with_gains(comp(Supply, 3.0, 0.0, 0.05), &[1.0, 0.4, 0.7])],
            acoustic: vec![comp(Supply, 4.0, 0.0, 0.25), comp(Supply, 6.0, 0.0, 0.2)],
        },
        FaultKind::PMR => Signature {
            vibration: vec![
                with_gains(comp(Rotation, 2.0, 0.0, 0.6), &[1.0, 1.0, 0.3]),
                comp(Rotation, 4.0, 0.0, 0.3),
                comp(Rotation, 8.0, 0.0, 0.2),
            ],
            current: sidebands(Supply, 1.0, 1.0, 0.03).to_vec(),
            acoustic: vec![comp(Rotation, 2.0, 0.0, 0.25), comp(Rotation, 8.0, 0.0, 0.2)],
        },
        FaultKind::BF => Signature {
            vibration: [
                vec![comp(vib_res, 1.0, 0.0, 0.3), comp(Rotation, BPFO, 0.0, 0.25), comp(Rotation, BPFI, 0.0, 0.2)],
                sidebands(vib_res, 1.0, BPFO, 0.2).to_vec(),
            ]
            .concat(),
            current: sidebands(Supply, 1.0, BPFO, 0.02).to_vec(),
            acoustic: [vec![comp(aco_res, 1.0, 0.0, 0.3)], sidebands(aco_res, 1.0, BPFO, 0.2).to_vec()].concat(),
        },
        FaultKind::RB => Signature {
            vibration: vec![
                with_gains(comp(Rotation, 1.0, 0.0, 0.3), &[0.3, 0.3, 1.0]),
                comp(Rotation, 5.0, 0.0, 0.35),
                comp(Rotation, 10.0, 0.0, 0.2),
            ],
            current: sidebands(Supply, 1.0, 1.0, 0.02).to_vec(),
            acoustic: vec![comp(Rotation, 5.0, 0.0, 0.25)],
        },
        FaultKind::AMR => Signature {
            vibration: vec![
                with_gains(comp(Rotation, 1.0, 0.0, 0.25), &[0.3, 0.3, 1.0]),
                with_gains(comp(Rotation, 2.0, 0.0, 0.3), &[0.4, 0.4, 1.0]),
                with_gains(comp(Rotation, 3.0, 0.0, 0.5), &[0.5, 0.5, 1.0]),
            ],
            current: sidebands(Supply, 1.0, 2.0, 0.03).to_vec(),
            acoustic: vec![comp(Rotation, 3.0, 0.0, 0.25)],
        },
        FaultKind::RU => Signature {
            vibration: vec![
                with_gains(with_phase(comp(Rotation, 1.0, 0.0, 0.8), 0.0), &[1.0, 1.0, 0.2]),
                comp(Rotation, 12.0, 0.0, 0.15),
            ],
            current: sidebands(Supply, 1.0, 1.0, 0.025).to_vec(),
            acoustic: vec![comp(Rotation, 1.0, 0.0, 0.3), comp(Rotation, 12.0, 0.0, 0.15)],
        },
    };
    FaultClass { label: kind.label(), name: kind.name().to_string(), signature: sig }
}

pub fn fault_classes() -> Vec<FaultClass> {
    FaultKind::ALL.iter().map(|k| fault_class(*k)).collect()
}

/// Components present under every health state.
pub fn base_components(m: Modality) -> Vec<Component> {
    use Source::*;
    match m {
        Modality::Vibration => vec![
            with_gains(comp(Rotation, 1.0, 0.0, 1.0), &[1.0, 0.8, 0.3]),
            comp(Rotation, 2.0, 0.0, 0.25),
            comp(Supply, 2.0, 0.0, 0.15),
        ],
        Modality::Current => vec![
            comp(Supply, 1.0, 0.0, 1.0),
            comp(Supply, 5.0, 0.0, 0.03),
            comp(Supply, 7.0, 0.0, 0.02),
        ],
        Modality::Acoustic => vec![
            comp(Rotation, 1.0, 0.0, 0.2),
            comp(Rotation, 2.0, 0.0, 0.15),
            comp(Rotation, 3.0, 0.0, 0.1),
            comp(Supply, 2.0, 0.0, 0.3),
            // fan blade pass
            comp(Rotation, 9.0, 0.0, 0.4),
        ],
    }
}

const MIC_GAINS: [f64; ACO_CH] = [1.0, 0.9, 0.8, 0.85, 0.7, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub vibration_snr_db: f64,
    pub current_snr_db: f64,
    pub acoustic_snr_db: f64,
    /// Relative standard deviation of per-sample amplitude jitter on every component.
    pub amplitude_jitter: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { vibration_snr_db: 10.0, current_snr_db: 20.0, acoustic_snr_db: 5.0, amplitude_jitter: 0.05 }
    }
}

impl NoiseConfig {
    pub fn snr_db(&self, m: Modality) -> f64 {
        match m {
            Modality::Vibration => self.vibration_snr_db,
            Modality::Current => self.current_snr_db,
            Modality::Acoustic => self.acoustic_snr_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawMultiModalSample {
    /// `[1024, 3]` at 5120 Hz.
    pub vibration: Array2<f32>,
    /// `[1024, 3]` at 5120 Hz.
    pub current: Array2<f32>,
    /// `[8820, 6]` at 44100 Hz.
    pub acoustic: Array2<f32>,
    pub label: u8,
    pub domain: String,
}

impl RawMultiModalSample {
    pub fn modality(&self, m: Modality) -> &Array2<f32> {
        match m {
            Modality::Vibration => &self.vibration,
            Modality::Current => &self.current,
            Modality::Acoustic => &self.acoustic,
        }
    }
}

/// Load-dependent slip; supply frequency follows `f_s = p f_r / (1 - s)`.
fn slip(load_pct: f64) -> f64 {
    0.01 + 0.03 * load_pct / 100.0
}

fn load_gain(load_pct: f64) -> f64 {
    0.4 + 0.6 * load_pct / 100.0
}

fn channel_phase(m: Modality, c: &Component, ch: usize) -> f64 {
    match (m, c.source) {
        // three-phase stator: supply-locked terms lag by 120 degrees per phase
        (Modality::Current, Source::Supply) => -(ch as f64) * c.order * 2.0 * PI / 3.0,
        _ => 0.0,
    }
}

fn channel_gain(m: Modality, c: &Component, ch: usize) -> f64 {
    let g = c.gains.get(ch).copied().unwrap_or(1.0);
    if m == Modality::Acoustic {
        g * MIC_GAINS[ch]
    } else {
        g
    }
}

fn reference_power(m: Modality) -> f64 {
    base_components(m)
        .iter()
        .map(|c| {
            let a = c.amplitude * channel_gain(m, c, 0);
            a * a / 2.0
        })
        .sum()
}

/// Generates one modality of `n` consecutive windows.
fn simulate_modality(
    condition: &ConditionSpec,
    fault: &FaultClass,
    m: Modality,
    n: usize,
    noise: &NoiseConfig,
    seed: u64,
) -> Vec<Array2<f32>> {
    let fs = sample_rate(m);
    let len = segment_len(m);
    let nch = channels(m);
    let dt = 1.0 / fs;
    let mut rng = rng::substream(seed, &["synthgen", &condition.id, fault.name.as_str(), m.tag()]);
    let base = base_components(m);
    let faults = fault.signature.components(m);
    let sigma = (reference_power(m) / 10f64.powf(noise.snr_db(m) / 10.0)).sqrt();

    // Integrate shaft and supply phase from start-up to the first window.
    let freqs = |t: f64| {
        let fr = condition.speed_profile.at(t) / 60.0;
        let fsup = POLE_PAIRS * fr / (1.0 - slip(condition.load_profile.at(t)));
        (fr, fsup)
    };
    let mut theta_r = 0.0f64;
    let mut theta_s = 0.0f64;
    let warm_steps = (WARMUP_S * fs).round() as usize;
    let mut t = 0.0f64;
    for k in 0..warm_steps {
        t = k as f64 * dt;
        let (fr, fsup) = freqs(t + 0.5 * dt);
        theta_r += 2.0 * PI * fr * dt;
        theta_s += 2.0 * PI * fsup * dt;
    }
    t += dt;

    let mut out = Vec::with_capacity(n);
    let ncomp = base.len() + faults.len();
    for _ in 0..n {
        let jitter: Vec<f64> = (0..ncomp)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (1.0 + noise.amplitude_jitter * z).max(0.0)
            })
            .collect();
        let mut seg = Array2::<f32>::zeros((len, nch));
        let mut acc = vec![0.0f64; nch];
        for i in 0..len {
            let lg = load_gain(condition.load_profile.at(t));
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (ci, c) in base.iter().chain(faults.iter()).enumerate() {
                let amp = c.amplitude * jitter[ci] * if ci >= base.len() { lg } else { 1.0 };
                if amp == 0.0 {
                    continue;
                }
                let carrier = match c.source {
                    Source::Rotation => c.order * theta_r,
                    Source::Supply => c.order * theta_s,
                    Source::Fixed { hz } => 2.0 * PI * c.order * hz * t,
                };
                let arg = carrier + c.offset * theta_r + c.phase;
                let phased = m == Modality::Current && matches!(c.source, Source::Supply);
                let common = if phased { 0.0 } else { arg.sin() };
                for (ch, a) in acc.iter_mut().enumerate() {
                    let s = if phased { (arg + channel_phase(m, c, ch)).sin() } else { common };
                    *a += amp * channel_gain(m, c, ch) * s;
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                seg[[i, ch]] = (a + sigma * z) as f32;
            }
            let (fr, fsup) = freqs(t + 0.5 * dt);
            theta_r += 2.0 * PI * fr * dt;
            theta_s += 2.0 * PI * fsup * dt;
            t += dt;
        }
        out.push(seg);
    }
    out
}

/// `n` consecutive windows of one continuous simulation of `fault` under `condition`.
pub fn generate_samples(
    condition: &ConditionSpec,
    fault: &FaultClass,
    n: usize,
    seed: u64,
) -> Result<Vec<RawMultiModalSample>> {
    generate_samples_with(condition, fault, n, seed, &NoiseConfig::default())
}

pub fn generate_samples_with(
    condition: &ConditionSpec,
    fault: &FaultClass,
    n: usize,
    seed: u64,
    noise: &NoiseConfig,
) -> Result<Vec<RawMultiModalSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    if n as f64 * SEGMENT_S > condition.duration_s + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{n} windows of {SEGMENT_S} s exceed the {} s recording of {}",
            condition.duration_s, condition.id
        )));
    }
    if !(1..=NUM_CLASSES as u8).contains(&fault.label) {
        return Err(Error::InvalidArgument(format!("fault label {} out of range", fault.label)));
    }
    let mut per_mod: Vec<std::vec::IntoIter<Array2<f32>>> = Modality::ALL
        .iter()
        .map(|m| simulate_modality(condition, fault, *m, n, noise, seed).into_iter())
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(RawMultiModalSample {
            vibration: per_mod[0].next().unwrap(),
            current: per_mod[1].next().unwrap(),
            acoustic: per_mod[2].next().unwrap(),
            label: fault.label,
            domain: condition.id.clone(),
        });
    }
    Ok(out)
}

/// Generates every (condition, class) block, optionally in parallel. Output is
/// ordered by condition, then by class label.
pub fn generate_corpus(
    exec: Execution,
    conditions: &[ConditionSpec],
    classes: &[FaultClass],
    per_class: usize,
    seed: u64,
    noise: &NoiseConfig,
) -> Result<Vec<(String, u8, Vec<RawMultiModalSample>)>> {
    let jobs: Vec<(&ConditionSpec, &FaultClass)> =
        conditions.iter().flat_map(|c| classes.iter().map(move |f| (c, f))).collect();
    exec::map_collect(exec, &jobs, |(c, f)| {
        generate_samples_with(c, f, per_class, seed, noise).map(|s| (c.id.clone(), f.label, s))
    })
    .into_iter()
    .collect()
}
