//! Log-mel and MFCC front end.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    LogMel,
    Mfcc,
}

/// `T x F` frame matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Array2<f64>,
    /// Seconds between consecutive frames.
    pub frame_shift: f64,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.frames.ncols()
    }

    /// Writes the `GSRF` dump: magic, `u32` T, `u32` F (little endian), then
    /// row-major `f32` values.
    pub fn write_gsrf(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(12 + 4 * self.frames.len());
        buf.extend_from_slice(b"GSRF");
        buf.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_bins() as u32).to_le_bytes());
        for v in self.frames.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a `GSRF` dump. The header carries no frame shift or kind; the
    /// defaults of the 10 ms log-mel front end are assumed.
    pub fn read_gsrf(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
        if bytes.len() < 12 || &bytes[..4] != b"GSRF" {
            return Err(bad("not a GSRF feature file"));
        }
        let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != 4 * t * f {
            return Err(bad("payload size does not match header"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            frames: Array2::from_shape_vec((t, f), data).map_err(|e| bad(&e.to_string()))?,
            frame_shift: 0.010,
            kind: FeatureKind::LogMel,
        })
    }
}

/// STFT and filterbank settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop_len: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub eps: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            win_len: 400,
            hop_len: 160,
            n_fft: 512,
            n_mels: 80,
            f_min: 20.0,
            f_max: 7600.0,
            eps: 1e-10,
        }
    }
}

/// Log-mel front end with precomputed window, filterbank and FFT plan.
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    /// `n_fft/2+1 x n_mels`.
    filterbank: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        if cfg.win_len == 0 || cfg.hop_len == 0 || cfg.n_mels == 0 {
            return Err(Error::invalid("frontend lengths must be positive"));
        }
        if cfg.n_fft < cfg.win_len {
            return Err(Error::invalid("n_fft must cover the window"));
        }
        if !(0.0 <= cfg.f_min && cfg.f_min < cfg.f_max && cfg.f_max <= cfg.sample_rate as f64 / 2.0) {
            return Err(Error::invalid("mel range must lie within (0, Nyquist]"));
        }
        let window = (0..cfg.win_len)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / cfg.win_len as f64).cos())
            .collect();
        let filterbank = mel_filterbank(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.cfg.win_len {
            0
        } else {
            (n_samples - self.cfg.win_len) / self.cfg.hop_len + 1
        }
    }

    /// `log(mel energy + eps)`, one row per 25 ms frame.
    pub fn logmel(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        if wave.sample_rate != self.cfg.sample_rate {
            return Err(Error::invalid(format!(
                "front end expects {} Hz, got {} Hz",
                self.cfg.sample_rate, wave.sample_rate
            )));
        }
        let n_frames = self.n_frames(wave.len());
        if n_frames == 0 {
            return Err(Error::invalid(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                wave.len(),
                self.cfg.win_len
            )));
        }
        let n_bins = self.cfg.n_fft / 2 + 1;
        let mut power = Array2::zeros((n_frames, n_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for t in 0..n_frames {
            let start = t * self.cfg.hop_len;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (&s, &w)) in wave.samples[start..start + self.cfg.win_len]
                .iter()
                .zip(&self.window)
                .enumerate()
            {
                buf[i].re = s * w;
            }
            self.fft.process(&mut buf);
            for (k, c) in buf.iter().take(n_bins).enumerate() {
                power[[t, k]] = c.norm_sqr();
            }
        }
        let eps = self.cfg.eps;
        let frames = power.dot(&self.filterbank).mapv(|e| (e + eps).ln());
        Ok(FeatureMatrix {
            frames,
            frame_shift: self.cfg.hop_len as f64 / self.cfg.sample_rate as f64,
            kind: FeatureKind::LogMel,
        })
    }

    /// Log-mel followed by an orthonormal DCT-II over the mel axis, keeping
    /// the first `n_coeffs` coefficients.
    pub fn mfcc(&self, wave: &Waveform, n_coeffs: usize) -> Result<FeatureMatrix> {
        if n_coeffs == 0 || n_coeffs > self.cfg.n_mels {
            return Err(Error::invalid(format!("n_coeffs must be in 1..={}", self.cfg.n_mels)));
        }
        let lm = self.logmel(wave)?;
        let dct = dct_matrix(self.cfg.n_mels);
        let basis = dct.slice(ndarray::s![..n_coeffs, ..]);
        Ok(FeatureMatrix {
            frames: lm.frames.dot(&basis.t()),
            frame_shift: lm.frame_shift,
            kind: FeatureKind::Mfcc,
        })
    }
}

/// Log-mel features with the default 25 ms / 10 ms / 512-point settings.
pub fn logmel(wave: &Waveform, n_mels: usize) -> Result<FeatureMatrix> {
    Frontend::new(FrontendConfig {
        n_mels,
        ..Default::default()
    })?
    .logmel(wave)
}

/// MFCCs over `n_coeffs` mel bands with a full DCT.
pub fn mfcc(wave: &Waveform, n_coeffs: usize) -> Result<FeatureMatrix> {
    Frontend::new(FrontendConfig {
        n_mels: n_coeffs,
        ..Default::default()
    })?
    .mfcc(wave, n_coeffs)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_fft/2+1 x n_mels`.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    Array2::from_shape_fn((n_bins, cfg.n_mels), |(k, m)| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= l || f >= r {
            0.0
        } else if f <= c {
            (f - l) / (c - l)
        } else {
            (r - f) / (r - c)
        }
    })
}

/// Orthonormal DCT-II matrix; row `k` is basis function `k`.
pub fn dct_matrix(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(k, i)| {
        let s = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        s * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
    })
}
