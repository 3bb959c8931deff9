//! Mini-batch sampling.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataconfig::UtteranceRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSpec {
    pub batch_size: usize,
    /// Draw every utterance of a batch from a different speaker.
    pub distinct_speakers: bool,
    /// Length of the random training crop.
    pub crop_seconds: f64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 200,
            distinct_speakers: true,
            crop_seconds: 2.0,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.crop_seconds > 0.0) || !self.crop_seconds.is_finite() {
            return Err(Error::invalid("crop_seconds must be positive"));
        }
        Ok(())
    }
}

/// Indices into `records` for one batch.
pub(crate) fn sample_indices(records: &[UtteranceRecord], spec: &BatchSpec, rng: &mut impl Rng) -> Result<Vec<usize>> {
    spec.validate()?;
    if !spec.distinct_speakers {
        if records.len() < spec.batch_size {
            return Err(Error::invalid(format!(
                "batch of {} from {} utterances",
                spec.batch_size,
                records.len()
            )));
        }
        return Ok(sample(rng, records.len(), spec.batch_size).into_vec());
    }
    let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_speaker.entry(r.speaker_key()).or_default().push(i);
    }
    if by_speaker.len() < spec.batch_size {
        return Err(Error::invalid(format!(
            "batch of {} distinct speakers but only {} available",
            spec.batch_size,
            by_speaker.len()
        )));
    }
    let speakers: Vec<&Vec<usize>> = by_speaker.values().collect();
    let chosen = sample(rng, speakers.len(), spec.batch_size);
    Ok(chosen
        .into_iter()
        .map(|s| {
            let utts = speakers[s];
            utts[rng.gen_range(0..utts.len())]
        })
        .collect())
}

/// `(utterance_id, speaker)` pairs, speakers qualified by dataset.
pub fn sample_batch(records: &[UtteranceRecord], spec: &BatchSpec, seed: u64) -> Result<Vec<(String, String)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_indices(records, spec, &mut rng)?
        .into_iter()
        .map(|i| (records[i].utterance_id.clone(), records[i].speaker_key()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn manifest(n_speakers: usize, per_speaker: usize) -> Vec<UtteranceRecord> {
        (0..n_speakers * per_speaker)
            .map(|i| UtteranceRecord {
                utterance_id: format!("u{i}"),
                speaker_id: format!("s{}", i % n_speakers),
                duration: 3.0,
                language: "en".into(),
                dataset: "voxceleb12-dev".into(),
                sample_rate: 16_000,
                path: None,
            })
            .collect()
    }

    #[test]
    fn exactly_enough_speakers_uses_each_once() {
        let m = manifest(200, 3);
        let b = sample_batch(&m, &BatchSpec::default(), 1).unwrap();
        assert_eq!(b.len(), 200);
        let spk: HashSet<&String> = b.iter().map(|(_, s)| s).collect();
        assert_eq!(spk.len(), 200);
    }

    #[test]
    fn large_speaker_pool() {
        let m = manifest(87_223, 1);
        let b = sample_batch(&m, &BatchSpec::default(), 5).unwrap();
        assert_eq!(b.iter().map(|(_, s)| s).collect::<HashSet<_>>().len(), 200);
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let m = manifest(300, 4);
        let spec = BatchSpec::default();
        assert_eq!(sample_batch(&m, &spec, 9).unwrap(), sample_batch(&m, &spec, 9).unwrap());
        assert_ne!(
            sample_batch(&m, &spec, 9).unwrap(),
            sample_batch(&m, &spec, 10).unwrap()
        );
    }

    #[test]
    fn too_few_speakers() {
        let m = manifest(199, 10);
        assert!(matches!(
            sample_batch(&m, &BatchSpec::default(), 0),
            Err(Error::InvalidArgument(_))
        ));
        let relaxed = BatchSpec {
            distinct_speakers: false,
            ..BatchSpec::default()
        };
        assert_eq!(sample_batch(&m, &relaxed, 0).unwrap().len(), 200);
    }

    #[test]
    fn same_raw_id_in_two_datasets_counts_twice() {
        let mut m = manifest(1, 1);
        let mut other = m[0].clone();
        other.dataset = "mls-refined".into();
        other.utterance_id = "v0".into();
        m.push(other);
        let spec = BatchSpec {
            batch_size: 2,
            ..BatchSpec::default()
        };
        assert_eq!(sample_batch(&m, &spec, 3).unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn never_repeats_a_speaker(n_spk in 1usize..60, per in 1usize..5, batch in 1usize..60, seed in any::<u64>()) {
            let m = manifest(n_spk, per);
            let spec = BatchSpec { batch_size: batch, ..BatchSpec::default() };
            match sample_batch(&m, &spec, seed) {
                Ok(b) => {
                    prop_assert_eq!(b.len(), batch);
                    let spk: HashSet<&String> = b.iter().map(|(_, s)| s).collect();
                    prop_assert_eq!(spk.len(), batch);
                    for (u, s) in &b {
                        let r = m.iter().find(|r| &r.utterance_id == u).unwrap();
                        prop_assert_eq!(&r.speaker_key(), s);
                    }
                }
                Err(_) => prop_assert!(batch > n_spk),
            }
        }
    }
}
