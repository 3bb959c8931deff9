use std::path::Path;

use crate::error::{Error, Result};

/// Mono PCM audio with nominal amplitude range `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude; zero for an empty waveform.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Reads a 16-bit PCM mono WAV file, scaling samples by `1/32768`.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::invalid(format!(
                "{}: expected 16-bit PCM mono, got {} channel(s) {}-bit {:?}",
                path.display(),
                spec.channels,
                spec.bits_per_sample,
                spec.sample_format
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<Vec<_>, _>>()
            .map_err(wav_err)?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit PCM mono; samples are clipped to the representable range.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            w.write_sample(v).map_err(wav_err)?;
        }
        w.finalize().map_err(wav_err)
    }
}

pub(crate) fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}
