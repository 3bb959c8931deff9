//! Verification scoring: cosine back end, equal error rate, trial lists and
//! diarisation-derived trials.

mod eer;
mod io;
mod rttm;
mod trials;

use std::collections::HashMap;

pub use eer::{compute_eer, roc_points, Eer, EerReport, RocPoint};
pub use io::{embedding_lookup, read_embeddings, read_scores, write_embeddings, write_scores};
pub use rttm::{
    generate_trials, mark_overlaps, parse_rttm, read_rttm, write_overlap_mask, SegmentAnnotation, TrialGenConfig,
};
pub use trials::{load_trial_list, parse_trial_list, Protocol, TrialFormat};

use crate::arch::SpeakerEmbedding;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enrol_id: String,
    pub test_id: String,
    pub target: bool,
}

impl Trial {
    pub fn new(enrol: impl Into<String>, test: impl Into<String>, target: bool) -> Self {
        Self {
            enrol_id: enrol.into(),
            test_id: test.into(),
            target,
        }
    }
}

/// Trials and their scores, index-aligned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub trials: Vec<Trial>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(trials: Vec<Trial>, scores: Vec<f64>) -> Result<Self> {
        if trials.len() != scores.len() {
            return Err(Error::invalid(format!(
                "{} trials but {} scores",
                trials.len(),
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("score {i} is not finite")));
        }
        Ok(Self { trials, scores })
    }

    /// Builds a set from bare target and non-target scores.
    pub fn from_scores(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let mut trials = Vec::with_capacity(targets.len() + nontargets.len());
        let mut scores = Vec::with_capacity(trials.capacity());
        for (i, s) in targets.iter().enumerate() {
            trials.push(Trial::new(format!("t{i}e"), format!("t{i}t"), true));
            scores.push(*s);
        }
        for (i, s) in nontargets.iter().enumerate() {
            trials.push(Trial::new(format!("n{i}e"), format!("n{i}t"), false));
            scores.push(*s);
        }
        Self::new(trials, scores)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.len() - self.n_target()
    }

    pub fn target_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.trials
            .iter()
            .zip(&self.scores)
            .filter(|(t, _)| t.target)
            .map(|(_, s)| *s)
    }

    pub fn nontarget_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.trials
            .iter()
            .zip(&self.scores)
            .filter(|(t, _)| !t.target)
            .map(|(_, s)| *s)
    }
}

/// Cosine similarity; both vectors are length-normalised here.
pub fn cosine_score(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    cosine(a.as_slice(), b.as_slice())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cannot score a zero-norm embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One cosine score per trial, in trial order.
pub fn score_trials(lookup: &HashMap<String, SpeakerEmbedding>, trials: &[Trial], exec: Exec) -> Result<ScoreSet> {
    let get = |id: &str| lookup.get(id).ok_or_else(|| Error::Unresolved(id.to_string()));
    let scores = par::try_map(exec, trials, |t| cosine_score(get(&t.enrol_id)?, get(&t.test_id)?))?;
    ScoreSet::new(trials.to_vec(), scores)
}
