mod common;

use common::*;
use mmdg_core::preprocess::*;
use mmdg_core::synthgen::{self, FaultKind};
use mmdg_core::{Error, Execution, Modality};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use std::f64::consts::PI;

fn sinusoid(len: usize, nch: usize, freq: f64, rate: f64) -> Array2<f32> {
    Array2::from_shape_fn((len, nch), |(i, c)| ((2.0 * PI * freq * i as f64 / rate) + c as f64).sin() as f32)
}

/// Reflect padding, Hann window and a direct DFT of one frame, written out longhand.
fn dft_frame_magnitude(x: &[f64], n_fft: usize, hop: usize, frame: usize) -> Vec<f64> {
    let pad = n_fft / 2;
    let at = |j: isize| -> f64 {
        let n = x.len() as isize;
        let k = if j < 0 { -j } else if j >= n { 2 * (n - 1) - j } else { j };
        x[k as usize]
    };
    let start = (frame * hop) as isize - pad as isize;
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n_fft {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos();
                let v = at(start + i as isize) * w;
                let ang = -2.0 * PI * (k * i) as f64 / n_fft as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

#[test]
fn prepared_shapes_match_the_published_sizes() {
    let raw = synthgen::generate_samples(&synthgen::standard_condition("C3").unwrap(), &synthgen::fault_class(FaultKind::SWF), 2, 0)
        .unwrap();
    let p = Preprocessor::new().prepare(&raw[0]).unwrap();
    assert_eq!(p.vib_tf.dim(), (64, 32, 3));
    assert_eq!(p.cur_wave.dim(), (1024, 3));
    assert_eq!(p.aco_mel.dim(), (64, 64, 6));
    assert!(p.is_finite());
    assert_eq!(p.cur_wave, raw[0].current);
    assert_eq!((p.label, p.domain.as_str()), (3, "C3"));
    // Natural framing already yields the published widths.
    assert_eq!(Spectrogram::new(STFT_FFT, STFT_HOP, VIB_FRAMES).natural_frames(1024), 32);
    assert_eq!(Spectrogram::new(MEL_FFT, MEL_HOP, MEL_FRAMES).natural_frames(8820), 64);
}

#[test]
fn zero_input_gives_the_log_floor() {
    let floor = (LOG_FLOOR).ln() as f32;
    let v = stft_image(Array2::<f32>::zeros((1024, 3)).view()).unwrap();
    assert!(v.iter().all(|x| *x == floor));
    let a = mel_image(Array2::<f32>::zeros((8820, 6)).view()).unwrap();
    assert!(a.iter().all(|x| *x == floor));
}

#[test]
fn wrong_lengths_are_rejected() {
    assert!(matches!(stft_image(Array2::<f32>::zeros((1000, 3)).view()), Err(Error::Shape { .. })));
    assert!(matches!(mel_image(Array2::<f32>::zeros((1024, 6)).view()), Err(Error::Shape { .. })));
}

#[test]
fn bin_centred_sinusoid_peaks_at_its_bin() {
    for k in [8usize, 17, 30, 55] {
        let f = k as f64 * 5120.0 / STFT_FFT as f64;
        let img = stft_image(sinusoid(1024, 3, f, 5120.0).view()).unwrap();
        for ch in 0..3 {
            for frame in 0..VIB_FRAMES {
                let col: Vec<f32> = (0..VIB_BINS).map(|b| img[[b, frame, ch]]).collect();
                let arg = (0..VIB_BINS).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
                // Frames 2..=29 see only real samples; the outer ones include
                // reflected padding, whose phase kink may shift the peak one bin.
                let tol = if (2..=29).contains(&frame) { 0 } else { 1 };
                assert!(arg.abs_diff(k) <= tol, "bin {k}, channel {ch}, frame {frame}: argmax {arg}");
            }
        }
    }
}

#[test]
fn stft_matches_a_direct_dft() {
    let mut r = rng(1);
    let x = randn2(&mut r, 1024, 1);
    let sig: Vec<f64> = x.column(0).to_vec();
    let img = stft_image(x.mapv(|v| v as f32).view()).unwrap();
    let sig32: Vec<f64> = sig.iter().map(|v| *v as f32 as f64).collect();
    for frame in [0usize, 1, 15, 30, 31] {
        let mag = dft_frame_magnitude(&sig32, STFT_FFT, STFT_HOP, frame);
        for (b, m) in mag.iter().enumerate() {
            let expect = (m + LOG_FLOOR).ln();
            assert!((img[[b, frame, 0]] as f64 - expect).abs() < 1e-4, "frame {frame} bin {b}");
        }
    }
}

#[test]
fn mel_filterbank_shape_and_scale() {
    assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
    assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    let fb = Preprocessor::new().filterbank().clone();
    assert_eq!(fb.dim(), (64, 257));
    assert!(fb.iter().all(|w| (0.0..=1.0).contains(w)));
}

#[test]
fn white_noise_energy_follows_filter_bandwidth() {
    let pre = Preprocessor::new();
    let fb = pre.filterbank();
    let mut r = rng(2);
    let mut energy = vec![0.0; N_MELS];
    for _ in 0..6 {
        let noise = randn2(&mut r, 8820, 6).mapv(|v| v as f32);
        let img = pre.mel_image(noise.view()).unwrap();
        for ((m, _, _), v) in img.indexed_iter() {
            energy[m] += (*v as f64).exp() - LOG_FLOOR;
        }
    }
    let rowsum: Vec<f64> = fb.rows().into_iter().map(|r| r.sum()).collect();
    let used: Vec<usize> = (0..N_MELS).filter(|&m| rowsum[m] > 0.0).collect();
    assert!(used.len() > N_MELS / 2);
    let ratio: Vec<f64> = used.iter().map(|&m| energy[m] / rowsum[m]).collect();
    let mean = ratio.iter().sum::<f64>() / ratio.len() as f64;
    for (&m, q) in used.iter().zip(&ratio) {
        assert!((q / mean - 1.0).abs() < 0.1, "filter {m}: {q} vs {mean}");
    }
    // Mel filters widen with frequency, so the top rows collect more energy.
    let lo = used[..4].iter().map(|&m| energy[m]).sum::<f64>();
    let hi = used[used.len() - 4..].iter().map(|&m| energy[m]).sum::<f64>();
    assert!(hi > lo);
}

#[test]
fn preprocessing_is_pure_and_order_free() {
    let raws = synthgen::generate_samples(&synthgen::standard_condition("C1").unwrap(), &synthgen::fault_class(FaultKind::RU), 4, 3)
        .unwrap();
    let pre = Preprocessor::new();
    let a = pre.prepare_all(Execution::Sequential, &raws).unwrap();
    let b = pre.prepare_all(Execution::default(), &raws).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[2], pre.prepare(&raws[2]).unwrap());
}

fn channel_moments(samples: &[PreparedSample], m: Modality) -> (Vec<f64>, Vec<f64>) {
    let nch = *prepared_shapes().iter().find(|(k, _)| *k == m).unwrap().1.last().unwrap();
    let mut vals: Vec<Vec<f64>> = vec![Vec::new(); nch];
    for s in samples {
        for (i, v) in s.modality_slice(m).iter().enumerate() {
            vals[i % nch].push(*v as f64);
        }
    }
    let mean: Vec<f64> = vals.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let std = vals.iter().zip(&mean).map(|(v, mu)| (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt()).collect();
    (mean, std)
}

#[test]
fn normalisation_standardises_the_fitting_set() {
    let mut data = prepared_corpus(&["C1", "C2"], 3, 4);
    let sources = vec!["C1".to_string(), "C2".to_string()];
    let stats = fit_norm_stats(&data, &sources).unwrap();
    normalize(&mut data, &stats);
    for m in Modality::ALL {
        let (mean, std) = channel_moments(&data, m);
        assert!(mean.iter().all(|v| v.abs() < 1e-5), "{m:?} mean {mean:?}");
        assert!(std.iter().all(|v| (v - 1.0).abs() < 1e-5), "{m:?} std {std:?}");
    }
}

#[test]
fn constant_channels_normalise_to_zero() {
    let mut data = prepared_corpus(&["C1"], 1, 5);
    for s in data.iter_mut() {
        s.cur_wave.column_mut(1).fill(3.5);
        s.vib_tf.index_axis_mut(ndarray::Axis(2), 0).fill(-2.0);
    }
    let stats = fit_norm_stats(&data, &["C1".to_string()]).unwrap();
    assert_eq!(stats.cur_wave.std[1], STD_FLOOR);
    normalize(&mut data, &stats);
    for s in &data {
        assert!(s.cur_wave.column(1).iter().all(|v| *v == 0.0));
        assert!(s.vib_tf.index_axis(ndarray::Axis(2), 0).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn normalisation_is_not_idempotent() {
    let mut data = prepared_corpus(&["C4"], 1, 6);
    let stats = fit_norm_stats(&data, &["C4".to_string()]).unwrap();
    normalize(&mut data, &stats);
    let once = data.clone();
    normalize(&mut data, &stats);
    assert_ne!(once, data);
}

#[test]
fn statistics_record_and_enforce_provenance() {
    let data = prepared_corpus(&["C1", "C3"], 1, 7);
    let only_c1 = vec!["C1".to_string()];
    assert!(matches!(fit_norm_stats(&data, &only_c1), Err(Error::Leakage(_))));
    let both = vec!["C1".to_string(), "C3".to_string()];
    let stats = fit_norm_stats(&data, &both).unwrap();
    assert!(stats.assert_provenance(&both).is_ok());
    assert!(matches!(stats.assert_provenance(&only_c1), Err(Error::Leakage(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.json");
    stats.save(&path).unwrap();
    assert_eq!(NormStats::load(&path).unwrap(), stats);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn standardisation_holds_for_arbitrary_affine_data(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let mut data: Vec<PreparedSample> = (0..3)
            .map(|i| PreparedSample {
                vib_tf: Array3::from_shape_fn((64, 32, 3), |_| (randn(&mut r, &[1])[0] * scale + shift) as f32),
                cur_wave: randn2(&mut r, 1024, 3).mapv(|v| (v * scale + shift) as f32),
                aco_mel: Array3::from_shape_fn((64, 64, 6), |_| (randn(&mut r, &[1])[0] * scale - shift) as f32),
                label: i as u8 + 1,
                domain: "C9".into(),
            })
            .collect();
        let stats = fit_norm_stats(&data, &["C9".to_string()]).unwrap();
        normalize(&mut data, &stats);
        for m in Modality::ALL {
            let (mean, std) = channel_moments(&data, m);
            prop_assert!(mean.iter().all(|v| v.abs() < 1e-5));
            prop_assert!(std.iter().all(|v| (v - 1.0).abs() < 1e-5));
        }
    }
}
