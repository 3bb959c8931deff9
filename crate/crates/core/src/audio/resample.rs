//! Band-limited resampling with a Hann-windowed sinc kernel.

use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side, at the kernel's cutoff.
const ZERO_CROSSINGS: f64 = 24.0;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.97;

/// Resamples to `target_rate`. Output length is `round(len * target / src)`;
/// a same-rate call returns an exact copy.
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if wave.sample_rate == 0 || target_rate == 0 {
        return Err(Error::invalid("sample rates must be positive"));
    }
    if wave.sample_rate == target_rate {
        return Ok(wave.clone());
    }
    let ratio = target_rate as f64 / wave.sample_rate as f64;
    Ok(Waveform {
        samples: resample_by_ratio(&wave.samples, ratio),
        sample_rate: target_rate,
    })
}

/// Resamples a sequence so that output sample `n` sits at input position
/// `n / ratio`. Output length is `round(len * ratio)`.
pub(crate) fn resample_by_ratio(x: &[f64], ratio: f64) -> Vec<f64> {
    let out_len = (x.len() as f64 * ratio).round() as usize;
    if x.is_empty() {
        return vec![0.0; out_len];
    }
    let cutoff = ROLLOFF * ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let last = x.len() as isize - 1;

    (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(last);
            let mut acc = 0.0;
            let mut norm = 0.0;
            for k in lo..=hi {
                let tau = t - k as f64;
                let w = kernel(tau, cutoff, half_width);
                acc += w * x[k as usize];
                norm += w;
            }
            if norm.abs() > 1e-12 {
                acc / norm
            } else {
                0.0
            }
        })
        .collect()
}

fn kernel(tau: f64, cutoff: f64, half_width: f64) -> f64 {
    let u = tau / half_width;
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (PI * u).cos());
    let arg = PI * cutoff * tau;
    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
    cutoff * sinc * window
}
