//! Embedding extractors.
//!
//! Parameters live in a [`ParamStore`]; models are stateless descriptions
//! that build a forward graph against a store, so many threads can embed with
//! one parameter set at once.

pub mod checkpoint;
mod config;
pub mod conformer;
pub mod ecapa;
mod layers;

use ndarray::Array2;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ConformerConfig, EcapaConfig, ModelConfig, RAWNET3_PARAMS, RES2NET_SE50_PARAMS};
pub use conformer::{concat_layers, conformer_block, conformer_block_forward, mfa_concat, Conformer};
pub use ecapa::Ecapa;

use crate::audio::{logmel, mfcc, resample, vad_trim, FeatureKind, FeatureMatrix, Waveform};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

/// Sample rate the front end and models expect.
pub const MODEL_RATE: u32 = 16_000;

/// Fixed-size utterance representation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub v: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("embedding must be non-empty and finite"));
        }
        Ok(Self { v })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }
}

/// Either extractor behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Conformer(Conformer),
    Ecapa(Ecapa),
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Ok(match cfg {
            ModelConfig::Conformer(c) => Model::Conformer(Conformer::new(c)?),
            ModelConfig::Ecapa(c) => Model::Ecapa(Ecapa::new(c)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Conformer(m) => ModelConfig::Conformer(m.cfg.clone()),
            Model::Ecapa(m) => ModelConfig::Ecapa(m.cfg.clone()),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.config().embed_dim()
    }

    pub fn count_params(&self) -> usize {
        match self {
            Model::Conformer(m) => m.count_params(),
            Model::Ecapa(m) => m.count_params(),
        }
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        match self {
            Model::Conformer(m) => m.init_params(seed),
            Model::Ecapa(m) => m.init_params(seed),
        }
    }

    /// Unchecked forward pass; `x` must already have the right width.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        match self {
            Model::Conformer(m) => m.forward(g, p, x),
            Model::Ecapa(m) => m.forward(g, p, x),
        }
    }

    pub fn forward_checked(&self, g: &mut Graph, p: &ParamStore, feats: &Array2<f64>) -> Result<Var> {
        match self {
            Model::Conformer(m) => m.forward_checked(g, p, feats),
            Model::Ecapa(m) => m.forward_checked(g, p, feats),
        }
    }

    /// Checks that `p` has exactly the tensors this model initialises.
    pub fn check_params(&self, p: &ParamStore) -> Result<()> {
        let reference = self.init_params(0);
        if reference.len() != p.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.len(),
                p.len()
            )));
        }
        for (name, t) in reference.iter() {
            match p.get(name) {
                Some(v) if v.dim() == t.dim() => {}
                Some(v) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` is {:?}, expected {:?}",
                        v.dim(),
                        t.dim()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        Ok(())
    }

    pub fn embed(&self, p: &ParamStore, feats: &FeatureMatrix) -> Result<SpeakerEmbedding> {
        let mut g = Graph::new();
        let e = self.forward_checked(&mut g, p, &feats.frames)?;
        SpeakerEmbedding::new(g.value(e).iter().copied().collect())
    }

    /// Features of the kind and width this model consumes.
    pub fn features(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        let cfg = self.config();
        match cfg.feature_kind() {
            FeatureKind::LogMel => logmel(wave, cfg.input_dim()),
            FeatureKind::Mfcc => mfcc(wave, cfg.input_dim()),
        }
    }

    /// Waveform to embedding. Audio at other rates is first resampled to
    /// 16 kHz; with `vad` set, silence is trimmed at that aggressiveness.
    pub fn embed_waveform(&self, p: &ParamStore, wave: &Waveform, vad: Option<u8>) -> Result<SpeakerEmbedding> {
        let wave = prepare_waveform(wave, vad)?;
        let feats = self.features(&wave)?;
        self.embed(p, &feats)
    }
}

/// Resamples to the model rate and optionally trims silence.
pub fn prepare_waveform(wave: &Waveform, vad: Option<u8>) -> Result<Waveform> {
    let wave = if wave.sample_rate == MODEL_RATE {
        wave.clone()
    } else {
        resample(wave, MODEL_RATE)?
    };
    match vad {
        Some(level) => Ok(vad_trim(&wave, level)?.0),
        None => Ok(wave),
    }
}

/// Closed-form parameter count of a configuration, classifier excluded.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::new(cfg.clone())?.count_params())
}

pub fn mfa_conformer_embed(
    features: &FeatureMatrix,
    params: &ParamStore,
    cfg: &ConformerConfig,
) -> Result<SpeakerEmbedding> {
    Model::Conformer(Conformer::new(cfg.clone())?).embed(params, features)
}

pub fn ecapa_embed(features: &FeatureMatrix, params: &ParamStore, cfg: &EcapaConfig) -> Result<SpeakerEmbedding> {
    Model::Ecapa(Ecapa::new(cfg.clone())?).embed(params, features)
}
