//! Desk-scale generalisation probe: train on synthetic speakers, then score
//! every pair of held-out utterances from the same speakers.

use super::config::{DataSpec, TrainConfig};
use super::synth::{synthetic_range, SyntheticSpec};
use super::trainer::{all_pairs_eer, embed_all, Trainer, TrainingSet};
use super::{AamParams, BatchSpec, OptimizerSpec, ScheduleSpec};
use crate::arch::{ConformerConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub untrained_eer: f64,
    pub trained_eer: f64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub steps: u64,
}

/// Conformer with width 32 and 2 layers on 20 speakers of 50 utterances.
pub fn probe_config(max_steps: u64) -> TrainConfig {
    TrainConfig {
        seed: 11,
        max_steps,
        checkpoint_every: 0,
        model: ModelConfig::Conformer(ConformerConfig {
            n_layers: 2,
            model_dim: 32,
            n_heads: 4,
            ff_units: 64,
            conv_kernel: 7,
            embed_dim: 16,
            input_dim: 40,
            subsample_factor: 2,
            pool_attention_dim: 16,
        }),
        aam: AamParams::default(),
        schedule: ScheduleSpec::CosineWarmup {
            lr_max: 3e-3,
            lr_min: 1e-5,
            warmup_steps: max_steps / 10,
            total_steps: max_steps,
        },
        batch: BatchSpec {
            batch_size: 20,
            distinct_speakers: true,
            crop_seconds: 1.0,
        },
        optimizer: OptimizerSpec::adamw(),
        augment: None,
        data: DataSpec {
            manifest: None,
            synthetic: Some(SyntheticSpec {
                n_speakers: 20,
                utts_per_speaker: 50,
                seconds: 1.5,
                sample_rate: 16_000,
                seed: 5,
            }),
        },
    }
}

/// Trains `cfg` (whose data must be synthetic) and reports held-out EERs
/// before and after, using `held_out` further utterances per speaker.
pub fn run_probe(cfg: TrainConfig, held_out: usize, exec: Exec) -> Result<ProbeResult> {
    let spec = cfg
        .data
        .synthetic
        .clone()
        .ok_or_else(|| Error::Config("the probe needs synthetic data".into()))?;
    let data = TrainingSet::load(&cfg.data, None)?;
    let test = synthetic_range(&spec, spec.utts_per_speaker..spec.utts_per_speaker + held_out)?;
    let labels: Vec<usize> = (0..test.len()).map(|i| i / held_out).collect();
    let waves: Vec<_> = test.into_iter().map(|(_, w)| w).collect();

    let mut trainer = Trainer::new(cfg, data, exec)?;
    let untrained = embed_all(trainer.model(), &trainer.model_params(), &waves, exec)?;
    let untrained_eer = all_pairs_eer(&labels, &untrained)?;
    let mut losses = Vec::new();
    trainer.run(|_, r| {
        losses.push(r.loss);
        Ok(())
    })?;
    let trained_eer = all_pairs_eer(&labels, &trainer.embed(&waves)?)?;
    Ok(ProbeResult {
        untrained_eer,
        trained_eer,
        first_loss: losses[0],
        last_loss: *losses.last().unwrap_or(&f64::NAN),
        steps: losses.len() as u64,
    })
}
