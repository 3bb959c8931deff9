//! Training-time augmentations: additive noise at a target SNR, room impulse
//! response convolution, speed perturbation and frequency-band dropping.

use ndarray::Axis;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::resample::resample_by_ratio;
use super::{FeatureMatrix, Waveform};
use crate::error::{Error, Result};

pub const SPEED_FACTORS: [f64; 3] = [0.9, 1.0, 1.1];

/// One augmentation draw for an utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub noise_snr_db: (f64, f64),
    pub rir: Option<Waveform>,
    pub speed_factor: f64,
    /// `(start_bin, width)` in mel bins.
    pub freq_drop: Option<(usize, usize)>,
}

impl AugmentSpec {
    pub fn validate(&self, n_bins: usize) -> Result<()> {
        let (lo, hi) = self.noise_snr_db;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::invalid("SNR range must be finite and ordered"));
        }
        if !(self.speed_factor > 0.0) {
            return Err(Error::invalid("speed factor must be positive"));
        }
        if let Some((start, width)) = self.freq_drop {
            if start + width > n_bins {
                return Err(Error::invalid(format!(
                    "frequency drop [{start}, {}) exceeds {n_bins} bins",
                    start + width
                )));
            }
        }
        Ok(())
    }
}

/// Augmentation schedule: each utterance is augmented with `probability`,
/// using one kind drawn uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub probability: f64,
    pub snr_db: (f64, f64),
    pub max_freq_drop: usize,
    pub kinds: Vec<AugmentKind>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.6,
            snr_db: (5.0, 20.0),
            max_freq_drop: 8,
            kinds: vec![
                AugmentKind::Noise,
                AugmentKind::Reverb,
                AugmentKind::Speed,
                AugmentKind::FreqDrop,
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    Noise,
    Reverb,
    Speed,
    FreqDrop,
}

/// Adds `noise` (tiled or cropped to the signal length) scaled so that the
/// signal-to-noise ratio over the whole utterance is `snr_db`.
pub fn add_noise(wave: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if wave.sample_rate != noise.sample_rate {
        return Err(Error::invalid("signal and noise sample rates differ"));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("SNR must be finite"));
    }
    if noise.is_empty() {
        return Err(Error::invalid("noise waveform is empty"));
    }
    let tiled: Vec<f64> = noise.samples.iter().cycle().take(wave.len()).copied().collect();
    let p_noise = super::wave::power(&tiled);
    if p_noise <= 0.0 {
        return Err(Error::invalid("noise has zero power"));
    }
    let scale = noise_scale(wave.power(), p_noise, snr_db);
    let samples = wave.samples.iter().zip(&tiled).map(|(s, n)| s + scale * n).collect();
    Ok(Waveform {
        samples,
        sample_rate: wave.sample_rate,
    })
}

/// Gain applied to noise of power `p_noise` to reach `snr_db` against a
/// signal of power `p_signal`.
pub fn noise_scale(p_signal: f64, p_noise: f64, snr_db: f64) -> f64 {
    (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Convolves with `rir`, truncates to the input length and rescales to the
/// input's peak amplitude.
pub fn apply_rir(wave: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(Error::invalid("impulse response is empty"));
    }
    if wave.is_empty() {
        return Ok(wave.clone());
    }
    let mut out = fft_convolve(&wave.samples, &rir.samples);
    out.truncate(wave.len());
    let (peak_in, peak_out) = (wave.peak(), out.iter().fold(0.0f64, |m, s| m.max(s.abs())));
    if peak_out > 0.0 {
        let g = peak_in / peak_out;
        out.iter_mut().for_each(|s| *s *= g);
    }
    Ok(Waveform {
        samples: out,
        sample_rate: wave.sample_rate,
    })
}

/// Full linear convolution via zero-padded FFTs.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let full = a.len() + b.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let (mut fa, mut fb) = (pad(a), pad(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa.iter().take(full).map(|c| c.re / n as f64).collect()
}

/// Playback-speed change by resampling: duration scales by `1/factor` and
/// pitch by `factor`. The sample rate is unchanged.
pub fn speed_perturb(wave: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid("speed factor must be positive"));
    }
    if factor == 1.0 {
        return Ok(wave.clone());
    }
    Ok(Waveform {
        samples: resample_by_ratio(&wave.samples, 1.0 / factor),
        sample_rate: wave.sample_rate,
    })
}

/// Replaces bins `[start, start + width)` of every frame with that bin's mean
/// over the utterance.
pub fn freq_drop(features: &FeatureMatrix, start: usize, width: usize) -> Result<FeatureMatrix> {
    if start + width > features.n_bins() {
        return Err(Error::invalid(format!(
            "frequency drop [{start}, {}) exceeds {} bins",
            start + width,
            features.n_bins()
        )));
    }
    let mut out = features.clone();
    if width == 0 || features.n_frames() == 0 {
        return Ok(out);
    }
    for b in start..start + width {
        let mut col = out.frames.column_mut(b);
        let mean = col.mean_axis(Axis(0)).unwrap().into_scalar();
        col.fill(mean);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::logmel;
    use crate::audio::test_util::{peak_frequency, sine, white_noise};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snr_db(signal: &Waveform, mixed: &Waveform) -> f64 {
        let residual: Vec<f64> = mixed.samples.iter().zip(&signal.samples).map(|(m, s)| m - s).collect();
        10.0 * (signal.power() / crate::audio::wave::power(&residual)).log10()
    }

    #[test]
    fn huge_snr_leaves_signal_untouched() {
        let s = white_noise(4000, 16000, 0.5, 1);
        let n = white_noise(1000, 16000, 0.5, 2);
        let out = add_noise(&s, &n, 100.0).unwrap();
        let rms = (out
            .samples
            .iter()
            .zip(&s.samples)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / s.len() as f64)
            .sqrt();
        assert!(rms < 1e-4);
    }

    #[test]
    fn closed_form_scale() {
        assert!((noise_scale(1.0, 1.0, 0.0) - 1.0).abs() < 1e-6);
        assert!((noise_scale(1.0, 1.0, 10.0) - 10f64.powf(-0.5)).abs() < 1e-6);
    }

    #[test]
    fn zero_power_noise_is_rejected() {
        let s = white_noise(100, 16000, 0.5, 1);
        let n = Waveform::new(vec![0.0; 50], 16000).unwrap();
        assert!(add_noise(&s, &n, 10.0).is_err());
        let n8 = white_noise(100, 8000, 0.5, 1);
        assert!(add_noise(&s, &n8, 10.0).is_err());
    }

    proptest! {
        #[test]
        fn requested_snr_is_achieved(snr in -10.0f64..40.0, seed in 0u64..500, len in 100usize..3000) {
            let s = white_noise(len, 16000, 0.7, seed);
            let n = white_noise(len / 3 + 1, 16000, 0.2, seed + 1);
            let out = add_noise(&s, &n, snr).unwrap();
            prop_assert!((snr_db(&s, &out) - snr).abs() < 0.1);
        }
    }

    #[test]
    fn unit_impulse_is_identity() {
        let s = white_noise(500, 16000, 0.5, 3);
        let d = Waveform::new(vec![1.0], 16000).unwrap();
        let out = apply_rir(&s, &d).unwrap();
        for (a, b) in out.samples.iter().zip(&s.samples) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delayed_impulse_shifts() {
        // peak early so truncation does not change the renormalisation
        let mut x = vec![0.0; 300];
        x[5] = 1.0;
        for (i, v) in x.iter_mut().enumerate().skip(6) {
            *v = 0.3 * ((i as f64) * 0.1).sin();
        }
        let s = Waveform::new(x, 16000).unwrap();
        let mut d = vec![0.0; 8];
        d[7] = 1.0;
        let out = apply_rir(&s, &Waveform::new(d, 16000).unwrap()).unwrap();
        for i in 0..300 {
            let expect = if i >= 7 { s.samples[i - 7] } else { 0.0 };
            assert!((out.samples[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rir_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = Waveform::new(x.clone(), 16000).unwrap();
        let out = apply_rir(&s, &Waveform::new(h.clone(), 16000).unwrap()).unwrap();
        // O(N*K) oracle with the same truncation and peak renormalisation
        let mut direct = vec![0.0; x.len()];
        for (n, d) in direct.iter_mut().enumerate() {
            for (k, hk) in h.iter().enumerate() {
                if k <= n {
                    *d += hk * x[n - k];
                }
            }
        }
        let pin = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let pout = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in out.samples.iter().zip(&direct) {
            assert!((a - b * pin / pout).abs() < 1e-6);
        }
        assert!(apply_rir(&s, &Waveform::new(vec![], 16000).unwrap()).is_err());
    }

    #[test]
    fn speed_lengths_and_pitch() {
        let s = white_noise(11000, 16000, 0.3, 1);
        assert_eq!(speed_perturb(&s, 1.0).unwrap(), s);
        assert_eq!(speed_perturb(&s, 1.1).unwrap().len(), 10000);
        let tone = sine(1000.0, 16000, 16000, 0.5);
        let slow = speed_perturb(&tone, 0.9).unwrap();
        let bin = 16000.0 / slow.len() as f64;
        assert!((peak_frequency(&slow) - 900.0).abs() <= bin);
        assert!(speed_perturb(&s, 0.0).is_err());
    }

    #[test]
    fn freq_drop_cases() {
        let f = logmel(&white_noise(4000, 16000, 0.3, 2), 80).unwrap();
        assert_eq!(freq_drop(&f, 13, 0).unwrap(), f);

        let all = freq_drop(&f, 0, 80).unwrap();
        for b in 0..80 {
            let col = all.frames.column(b);
            assert!(col.iter().all(|&v| v == col[0]));
            let mean = f.frames.column(b).mean().unwrap();
            assert!((col[0] - mean).abs() < 1e-12);
        }

        let band = freq_drop(&f, 10, 10).unwrap();
        for ((t, b), &v) in band.frames.indexed_iter() {
            if !(10..20).contains(&b) {
                assert_eq!(v.to_bits(), f.frames[[t, b]].to_bits());
            }
        }
        assert!(freq_drop(&f, 75, 6).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = AugmentSpec {
            noise_snr_db: (5.0, 20.0),
            rir: None,
            speed_factor: 1.1,
            freq_drop: Some((70, 10)),
        };
        assert!(spec.validate(80).is_ok());
        spec.freq_drop = Some((75, 10));
        assert!(spec.validate(80).is_err());
        spec.freq_drop = None;
        spec.speed_factor = -1.0;
        assert!(spec.validate(80).is_err());
    }
}
