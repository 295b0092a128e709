//! Raw segments to network inputs.
//!
//! Vibration: per-channel log-magnitude STFT (Hann, centred with reflect
//! padding), 127-point FFT with hop 33, giving 64 bins x 32 frames.
//! Acoustic: per-channel log Mel power spectrogram, 512-point FFT, hop 138,
//! 64 triangular filters on the 2595/700 Mel scale over 0..Nyquist, 64 frames.
//! Current: passed through. All three are then standardised per channel with
//! statistics fitted on source-domain data only.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exec::{self, Execution};
use crate::synthgen::{self, RawMultiModalSample};
use crate::Modality;

pub const STFT_FFT: usize = 127;
pub const STFT_HOP: usize = 33;
pub const VIB_BINS: usize = 64;
pub const VIB_FRAMES: usize = 32;
pub const MEL_FFT: usize = 512;
pub const MEL_HOP: usize = 138;
pub const N_MELS: usize = 64;
pub const MEL_FRAMES: usize = 64;
/// Added before taking logs, so silence maps to `ln(1e-8)`.
pub const LOG_FLOOR: f64 = 1e-8;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    /// `[64, 32, 3]`: frequency x frame x channel.
    pub vib_tf: Array3<f32>,
    /// `[1024, 3]`.
    pub cur_wave: Array2<f32>,
    /// `[64, 64, 6]`: mel x frame x channel.
    pub aco_mel: Array3<f32>,
    /// 1..=8
    pub label: u8,
    pub domain: String,
}

impl PreparedSample {
    pub fn is_finite(&self) -> bool {
        self.vib_tf.iter().chain(self.cur_wave.iter()).chain(self.aco_mel.iter()).all(|v| v.is_finite())
    }

    pub fn modality_slice(&self, m: Modality) -> &[f32] {
        match m {
            Modality::Vibration => self.vib_tf.as_slice(),
            Modality::Current => self.cur_wave.as_slice(),
            Modality::Acoustic => self.aco_mel.as_slice(),
        }
        .expect("standard layout")
    }

    pub fn modality_slice_mut(&mut self, m: Modality) -> &mut [f32] {
        match m {
            Modality::Vibration => self.vib_tf.as_slice_mut(),
            Modality::Current => self.cur_wave.as_slice_mut(),
            Modality::Acoustic => self.aco_mel.as_slice_mut(),
        }
        .expect("standard layout")
    }
}

/// Per-sample shapes, in the order vibration, current, acoustic.
pub fn prepared_shapes() -> Vec<(Modality, Vec<usize>)> {
    vec![
        (Modality::Vibration, vec![VIB_BINS, VIB_FRAMES, synthgen::VIB_CH]),
        (Modality::Current, vec![synthgen::CUR_LEN, synthgen::CUR_CH]),
        (Modality::Acoustic, vec![N_MELS, MEL_FRAMES, synthgen::ACO_CH]),
    ]
}

pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// numpy-style `reflect` padding (edge sample not repeated).
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    assert!(n > pad, "signal too short to reflect-pad");
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| x[n - 1 - i]));
    out
}

/// Centred short-time Fourier transform with a fixed frame count.
#[derive(Clone)]
pub struct Spectrogram {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n_fft: usize,
    hop: usize,
    frames: usize,
}

impl Spectrogram {
    pub fn new(n_fft: usize, hop: usize, frames: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Spectrogram { fft, window: hann_periodic(n_fft), n_fft, hop, frames }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames centred framing yields before trimming or padding.
    pub fn natural_frames(&self, len: usize) -> usize {
        1 + (len + 2 * (self.n_fft / 2) - self.n_fft) / self.hop
    }

    /// Power (`|X|^2`) per bin and frame; frames beyond the signal are zero.
    pub fn power(&self, signal: &[f64]) -> Array2<f64> {
        let padded = reflect_pad(signal, self.n_fft / 2);
        let natural = self.natural_frames(signal.len());
        let mut out = Array2::<f64>::zeros((self.bins(), self.frames));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for f in 0..natural.min(self.frames) {
            let start = f * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..self.bins() {
                out[[k, f]] = buf[k].norm_sqr();
            }
        }
        out
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank `[n_mels, n_fft/2 + 1]` with centres equally spaced in Mel.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Array2<f64> {
    let bins = n_fft / 2 + 1;
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::<f64>::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate / n_fft as f64;
            let up = (f - lo) / (c - lo);
            let down = (hi - f) / (hi - c);
            fb[[m, k]] = up.min(down).max(0.0);
        }
    }
    fb
}

/// Reusable transform state (FFT plans, window, filterbank).
#[derive(Clone)]
pub struct Preprocessor {
    stft: Spectrogram,
    mel: Spectrogram,
    filterbank: Array2<f64>,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self::new()
    }
}

impl Preprocessor {
    pub fn new() -> Self {
        Preprocessor {
            stft: Spectrogram::new(STFT_FFT, STFT_HOP, VIB_FRAMES),
            mel: Spectrogram::new(MEL_FFT, MEL_HOP, MEL_FRAMES),
            filterbank: mel_filterbank(N_MELS, MEL_FFT, synthgen::ACO_RATE, 0.0, synthgen::ACO_RATE / 2.0),
        }
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    pub fn stft_image(&self, window: ArrayView2<'_, f32>) -> Result<Array3<f32>> {
        if window.nrows() != synthgen::VIB_LEN {
            return Err(shape_err([synthgen::VIB_LEN, window.ncols()], window.shape()));
        }
        let nch = window.ncols();
        let mut out = Array3::<f32>::zeros((VIB_BINS, VIB_FRAMES, nch));
        for ch in 0..nch {
            let sig: Vec<f64> = window.column(ch).iter().map(|&v| v as f64).collect();
            let p = self.stft.power(&sig);
            debug_assert_eq!(p.nrows(), VIB_BINS);
            for ((k, f), v) in p.indexed_iter() {
                out[[k, f, ch]] = (v.sqrt() + LOG_FLOOR).ln() as f32;
            }
        }
        Ok(out)
    }

    pub fn mel_image(&self, window: ArrayView2<'_, f32>) -> Result<Array3<f32>> {
        if window.nrows() != synthgen::ACO_LEN {
            return Err(shape_err([synthgen::ACO_LEN, window.ncols()], window.shape()));
        }
        let nch = window.ncols();
        let mut out = Array3::<f32>::zeros((N_MELS, MEL_FRAMES, nch));
        for ch in 0..nch {
            let sig: Vec<f64> = window.column(ch).iter().map(|&v| v as f64).collect();
            let mel = self.filterbank.dot(&self.mel.power(&sig));
            for ((m, f), v) in mel.indexed_iter() {
                out[[m, f, ch]] = (v + LOG_FLOOR).ln() as f32;
            }
        }
        Ok(out)
    }

    pub fn prepare(&self, raw: &RawMultiModalSample) -> Result<PreparedSample> {
        if raw.current.dim() != (synthgen::CUR_LEN, synthgen::CUR_CH) {
            return Err(shape_err([synthgen::CUR_LEN, synthgen::CUR_CH], raw.current.shape()));
        }
        Ok(PreparedSample {
            vib_tf: self.stft_image(raw.vibration.view())?,
            cur_wave: raw.current.as_standard_layout().into_owned(),
            aco_mel: self.mel_image(raw.acoustic.view())?,
            label: raw.label,
            domain: raw.domain.clone(),
        })
    }

    pub fn prepare_all(&self, exec: Execution, raws: &[RawMultiModalSample]) -> Result<Vec<PreparedSample>> {
        exec::map_collect(exec, raws, |r| self.prepare(r)).into_iter().collect()
    }
}

/// Log-magnitude STFT image `[64, 32, C]` of a `[1024, C]` window.
pub fn stft_image(window: ArrayView2<'_, f32>) -> Result<Array3<f32>> {
    Preprocessor::new().stft_image(window)
}

/// Log Mel image `[64, 64, C]` of an `[8820, C]` window.
pub fn mel_image(window: ArrayView2<'_, f32>) -> Result<Array3<f32>> {
    Preprocessor::new().mel_image(window)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub vib_tf: ChannelStats,
    pub cur_wave: ChannelStats,
    pub aco_mel: ChannelStats,
    /// Condition ids the statistics were fitted on.
    pub sources: Vec<String>,
}

impl NormStats {
    pub fn channel_stats(&self, m: Modality) -> &ChannelStats {
        match m {
            Modality::Vibration => &self.vib_tf,
            Modality::Current => &self.cur_wave,
            Modality::Acoustic => &self.aco_mel,
        }
    }

    /// Fails unless every fitting condition is one of `allowed`.
    pub fn assert_provenance(&self, allowed: &[String]) -> Result<()> {
        match self.sources.iter().find(|s| !allowed.contains(s)) {
            Some(s) => Err(Error::Leakage(format!("normalisation statistics were fitted on {s}"))),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn fit_channels(samples: &[PreparedSample], m: Modality) -> ChannelStats {
    let nch = match m {
        Modality::Vibration => synthgen::VIB_CH,
        Modality::Current => synthgen::CUR_CH,
        Modality::Acoustic => synthgen::ACO_CH,
    };
    let mut sum = vec![0.0f64; nch];
    let mut count = 0usize;
    for s in samples {
        for (i, v) in s.modality_slice(m).iter().enumerate() {
            sum[i % nch] += *v as f64;
        }
        count += s.modality_slice(m).len() / nch;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1) as f64).collect();
    let mut sq = vec![0.0f64; nch];
    for s in samples {
        for (i, v) in s.modality_slice(m).iter().enumerate() {
            let d = *v as f64 - mean[i % nch];
            sq[i % nch] += d * d;
        }
    }
    let std = sq.iter().map(|s| (s / count.max(1) as f64).sqrt().max(STD_FLOOR)).collect();
    ChannelStats { mean, std }
}

/// Per-channel mean and (population) standard deviation over `samples`, which
/// must all come from the listed source conditions.
pub fn fit_norm_stats(samples: &[PreparedSample], sources: &[String]) -> Result<NormStats> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot fit statistics on an empty set".into()));
    }
    if let Some(s) = samples.iter().find(|s| !sources.contains(&s.domain)) {
        return Err(Error::Leakage(format!("sample from {} offered to a fit over {sources:?}", s.domain)));
    }
    Ok(NormStats {
        vib_tf: fit_channels(samples, Modality::Vibration),
        cur_wave: fit_channels(samples, Modality::Current),
        aco_mel: fit_channels(samples, Modality::Acoustic),
        sources: sources.to_vec(),
    })
}

pub fn normalize_sample(sample: &mut PreparedSample, stats: &NormStats) {
    for m in Modality::ALL {
        let cs = stats.channel_stats(m).clone();
        let nch = cs.mean.len();
        for (i, v) in sample.modality_slice_mut(m).iter_mut().enumerate() {
            let ch = i % nch;
            *v = ((*v as f64 - cs.mean[ch]) / cs.std[ch].max(STD_FLOOR)) as f32;
        }
    }
}

pub fn normalize(samples: &mut [PreparedSample], stats: &NormStats) {
    for s in samples {
        normalize_sample(s, stats);
    }
}

/// Channel axis of a prepared tensor is always the last one.
pub fn channel_axis(m: Modality) -> Axis {
    match m {
        Modality::Current => Axis(1),
        _ => Axis(2),
    }
}
