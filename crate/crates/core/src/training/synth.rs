//! Synthetic speakers: white noise shaped by a fixed per-speaker spectral
//! envelope, with per-utterance channel colouring, gain and loudness
//! modulation as nuisance.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::dataconfig::UtteranceRecord;
use crate::error::{Error, Result};

pub const SYNTHETIC_DATASET: &str = "synthetic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 50,
            seconds: 2.0,
            sample_rate: 16_000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 || self.utts_per_speaker == 0 {
            return Err(Error::invalid(
                "synthetic data needs at least 2 speakers and 1 utterance each",
            ));
        }
        if !(self.seconds >= 0.1) || !self.seconds.is_finite() || self.sample_rate < 8_000 {
            return Err(Error::invalid(
                "synthetic utterances must be at least 0.1 s at 8 kHz or more",
            ));
        }
        Ok(())
    }
}

/// One spectral bump in dB over log frequency.
#[derive(Clone, Copy, Debug)]
struct Peak {
    centre_hz: f64,
    width_oct: f64,
    gain_db: f64,
}

impl Peak {
    fn db(&self, f: f64) -> f64 {
        let d = (f.max(1.0) / self.centre_hz).log2() / self.width_oct;
        self.gain_db * (-0.5 * d * d).exp()
    }
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(1 << 32).wrapping_add(b));
    rng
}

fn speaker_peaks(seed: u64, speaker: usize) -> Vec<Peak> {
    let mut rng = stream(seed, speaker as u64 + 1, 0);
    (0..4)
        .map(|_| Peak {
            centre_hz: 2f64.powf(rng.gen_range(7.5..12.5)),
            width_oct: rng.gen_range(0.1..0.25),
            gain_db: rng.gen_range(8.0..14.0) * if rng.gen_bool(0.75) { 1.0 } else { -1.0 },
        })
        .collect()
}

/// Utterance `index` of `speaker`; indices beyond `utts_per_speaker` give
/// held-out material from the same speakers.
pub fn synthetic_utterance(spec: &SyntheticSpec, speaker: usize, index: usize) -> Result<Waveform> {
    spec.validate()?;
    generate(spec, speaker, index, &mut FftPlanner::new())
}

fn generate(spec: &SyntheticSpec, speaker: usize, index: usize, planner: &mut FftPlanner<f64>) -> Result<Waveform> {
    let rate = spec.sample_rate as f64;
    let n = (spec.seconds * rate).round() as usize;
    let peaks = speaker_peaks(spec.seed, speaker);
    let mut rng = stream(spec.seed, speaker as u64 + 1, index as u64 + 1);

    // nuisance: channel bumps, tilt, overall gain, pitch-like shift of the speaker's peaks
    let channel: Vec<Peak> = (0..4)
        .map(|_| Peak {
            centre_hz: 2f64.powf(rng.gen_range(7.0..13.0)),
            width_oct: rng.gen_range(0.3..1.0),
            gain_db: rng.gen_range(-15.0..15.0),
        })
        .collect();
    let tilt_db_per_oct = rng.gen_range(-6.0..6.0);
    let gain_db = rng.gen_range(-20.0..20.0);
    let warp = 2f64.powf(rng.gen_range(-0.04..0.04));

    let envelope = |f: f64| {
        let spk: f64 = peaks.iter().map(|p| p.db(f / warp)).sum();
        let ch: f64 = channel.iter().map(|p| p.db(f)).sum();
        let tilt = tilt_db_per_oct * (f.max(50.0) / 1000.0).log2();
        10f64.powf((spk + ch + tilt + gain_db) / 20.0)
    };

    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let gains: Vec<f64> = (0..=n / 2).map(|k| envelope(k as f64 * rate / n as f64)).collect();
    for (k, c) in buf.iter_mut().enumerate() {
        *c *= gains[k.min(n - k)];
    }
    planner.plan_fft_inverse(n).process(&mut buf);

    // slow loudness modulation, 2-6 Hz
    let mod_hz = rng.gen_range(2.0..6.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let scale = 0.1 / n as f64;
    let samples = buf
        .iter()
        .enumerate()
        .map(|(t, c)| {
            let m = 0.6 + 0.4 * (2.0 * PI * mod_hz * t as f64 / rate + phase).sin();
            c.re * scale * m
        })
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Record for a synthetic utterance.
pub fn synthetic_record(spec: &SyntheticSpec, speaker: usize, index: usize) -> UtteranceRecord {
    UtteranceRecord {
        utterance_id: format!("spk{speaker:03}-utt{index:04}"),
        speaker_id: format!("spk{speaker:03}"),
        duration: spec.seconds,
        language: "none".into(),
        dataset: SYNTHETIC_DATASET.into(),
        sample_rate: spec.sample_rate,
        path: None,
    }
}

/// `utts_per_speaker` training utterances per speaker, speaker-major.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<(UtteranceRecord, Waveform)>> {
    synthetic_range(spec, 0..spec.utts_per_speaker)
}

/// Utterances with the given per-speaker indices, speaker-major.
pub fn synthetic_range(
    spec: &SyntheticSpec,
    indices: std::ops::Range<usize>,
) -> Result<Vec<(UtteranceRecord, Waveform)>> {
    spec.validate()?;
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(spec.n_speakers * indices.len());
    for s in 0..spec.n_speakers {
        for i in indices.clone() {
            out.push((synthetic_record(spec, s, i), generate(spec, s, i, &mut planner)?));
        }
    }
    Ok(out)
}
