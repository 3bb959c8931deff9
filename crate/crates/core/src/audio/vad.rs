//! Energy-based voice activity detection.
//!
//! Frames are 30 ms long with a 10 ms hop. A frame is speech when its
//! log-energy exceeds a threshold taken from the utterance's own energy
//! distribution (a percentile chosen by the aggressiveness level), capped at
//! an absolute speech level so that loud content is never discarded. Speech
//! decisions are held for three further frames.

use super::Waveform;
use crate::error::{Error, Result};

pub const FRAME_SECS: f64 = 0.030;
pub const HOP_SECS: f64 = 0.010;
pub const HANGOVER_FRAMES: usize = 3;
/// Frames louder than this (dB relative to full scale, mean square) are speech
/// regardless of the percentile threshold.
pub const SPEECH_LEVEL_DB: f64 = -40.0;
const ENERGY_FLOOR: f64 = 1e-10;

/// Per-frame speech decisions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VadMask {
    pub frames: Vec<bool>,
    pub frame_len: usize,
    pub hop: usize,
}

impl VadMask {
    pub fn speech_frames(&self) -> usize {
        self.frames.iter().filter(|&&b| b).count()
    }

    /// Sample-level keep flags: the union of the windows of speech frames.
    pub fn sample_mask(&self, n_samples: usize) -> Vec<bool> {
        let mut keep = vec![false; n_samples];
        for (i, _) in self.frames.iter().enumerate().filter(|(_, &s)| s) {
            let start = (i * self.hop).min(n_samples);
            let end = (i * self.hop + self.frame_len).min(n_samples);
            keep[start..end].iter_mut().for_each(|k| *k = true);
        }
        keep
    }
}

/// Percentile of frame energies used as threshold for each aggressiveness.
pub fn percentile_for(aggressiveness: u8) -> Result<f64> {
    match aggressiveness {
        0 => Ok(0.10),
        1 => Ok(0.20),
        2 => Ok(0.30),
        3 => Ok(0.40),
        a => Err(Error::invalid(format!("VAD aggressiveness {a} not in 0..=3"))),
    }
}

/// Number of VAD frames for `n` samples; the last frame is zero-padded so that
/// every sample is covered.
pub fn frame_count(n: usize, frame_len: usize, hop: usize) -> usize {
    if n == 0 {
        0
    } else if n <= frame_len {
        1
    } else {
        1 + (n - frame_len).div_ceil(hop)
    }
}

pub fn frame_energies_db(samples: &[f64], frame_len: usize, hop: usize) -> Vec<f64> {
    (0..frame_count(samples.len(), frame_len, hop))
        .map(|i| {
            let start = i * hop;
            let end = (start + frame_len).min(samples.len());
            let e = samples[start..end].iter().map(|v| v * v).sum::<f64>() / frame_len as f64;
            10.0 * (e + ENERGY_FLOOR).log10()
        })
        .collect()
}

fn frame_decisions(samples: &[f64], frame_len: usize, hop: usize, pct: f64) -> Vec<bool> {
    let energies = frame_energies_db(samples, frame_len, hop);
    let mut frames = vec![false; energies.len()];
    if energies.is_empty() {
        return frames;
    }
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = (pct * (sorted.len() - 1) as f64).floor() as usize;
    let threshold = sorted[rank].min(SPEECH_LEVEL_DB);
    let mut hold = 0;
    for (f, &e) in frames.iter_mut().zip(&energies) {
        if e > threshold {
            *f = true;
            hold = HANGOVER_FRAMES;
        } else if hold > 0 {
            *f = true;
            hold -= 1;
        }
    }
    frames
}

/// Returns the concatenated speech samples and a per-frame summary of what
/// was kept (a frame is speech when most of its samples survive).
///
/// The frame rule is reapplied to its own output until nothing more is
/// removed, so trimming is idempotent.
pub fn vad_trim(wave: &Waveform, aggressiveness: u8) -> Result<(Waveform, VadMask)> {
    if wave.sample_rate != 8000 && wave.sample_rate != 16000 {
        return Err(Error::invalid(format!(
            "VAD supports 8 kHz and 16 kHz, got {} Hz",
            wave.sample_rate
        )));
    }
    let pct = percentile_for(aggressiveness)?;
    let sr = wave.sample_rate as f64;
    let frame_len = (FRAME_SECS * sr).round() as usize;
    let hop = (HOP_SECS * sr).round() as usize;

    let mut kept: Vec<usize> = (0..wave.len()).collect();
    loop {
        let current: Vec<f64> = kept.iter().map(|&i| wave.samples[i]).collect();
        let pass = VadMask {
            frames: frame_decisions(&current, frame_len, hop, pct),
            frame_len,
            hop,
        };
        let keep = pass.sample_mask(current.len());
        if keep.iter().all(|&k| k) {
            break;
        }
        kept = kept.into_iter().zip(keep).filter(|(_, k)| *k).map(|(i, _)| i).collect();
    }

    let mut survived = vec![false; wave.len()];
    kept.iter().for_each(|&i| survived[i] = true);
    let frames = (0..frame_count(wave.len(), frame_len, hop))
        .map(|f| {
            let start = f * hop;
            let end = (start + frame_len).min(wave.len());
            2 * survived[start..end].iter().filter(|&&k| k).count() > end - start
        })
        .collect();
    Ok((
        Waveform {
            samples: kept.iter().map(|&i| wave.samples[i]).collect(),
            sample_rate: wave.sample_rate,
        },
        VadMask { frames, frame_len, hop },
    ))
}
