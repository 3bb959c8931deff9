//! Audio front end: WAV input, resampling, VAD, features and augmentation.

pub mod augment;
pub mod features;
pub mod resample;
pub mod vad;
pub mod wave;

pub use augment::{add_noise, apply_rir, freq_drop, speed_perturb, AugmentConfig, AugmentKind, AugmentSpec};
pub use features::{logmel, mfcc, FeatureKind, FeatureMatrix, Frontend, FrontendConfig};
pub use resample::resample;
pub use vad::{vad_trim, VadMask};
pub use wave::Waveform;

use ndarray::Array2;

/// Subtracts each bin's mean over time.
pub fn mean_normalize(frames: &Array2<f64>) -> Array2<f64> {
    match frames.mean_axis(ndarray::Axis(0)) {
        Some(mean) => frames - &mean,
        None => frames.clone(),
    }
}
