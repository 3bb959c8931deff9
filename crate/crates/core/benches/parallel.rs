use std::collections::HashMap;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gsr_core::arch::{ConformerConfig, Model, ModelConfig, SpeakerEmbedding};
use gsr_core::eval::{score_trials, Trial};
use gsr_core::par::Exec;
use gsr_core::training::synth::{synthetic_range, SyntheticSpec};
use gsr_core::training::{embed_all, probe, Trainer, TrainingSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lookup: HashMap<String, SpeakerEmbedding> = (0..2_000)
        .map(|i| {
            let v = (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (format!("u{i}"), SpeakerEmbedding::new(v).unwrap())
        })
        .collect();
    let trials: Vec<Trial> = (0..50_000)
        .map(|_| {
            let a = rng.gen_range(0..2_000);
            let b = rng.gen_range(0..2_000);
            Trial::new(format!("u{a}"), format!("u{b}"), rng.gen_bool(0.5))
        })
        .collect();
    let mut g = c.benchmark_group("score_trials");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| score_trials(&lookup, &trials, exec).unwrap())
        });
    }
    g.finish();
}

fn small_conformer() -> ModelConfig {
    ModelConfig::Conformer(ConformerConfig {
        n_layers: 2,
        model_dim: 32,
        n_heads: 4,
        ff_units: 64,
        conv_kernel: 7,
        embed_dim: 16,
        input_dim: 40,
        subsample_factor: 2,
        pool_attention_dim: 16,
    })
}

fn embedding(c: &mut Criterion) {
    let spec = SyntheticSpec {
        n_speakers: 4,
        utts_per_speaker: 4,
        seconds: 1.0,
        ..SyntheticSpec::default()
    };
    let waves: Vec<_> = synthetic_range(&spec, 0..4)
        .unwrap()
        .into_iter()
        .map(|(_, w)| w)
        .collect();
    let model = Model::new(small_conformer()).unwrap();
    let params = model.init_params(0);
    let mut g = c.benchmark_group("embed_all");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| embed_all(&model, &params, &waves, exec).unwrap())
        });
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let mut cfg = probe::probe_config(1_000);
    cfg.batch.batch_size = 8;
    if let Some(s) = cfg.data.synthetic.as_mut() {
        s.n_speakers = 8;
        s.utts_per_speaker = 4;
    }
    let data = TrainingSet::load(&cfg.data, None).unwrap();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, exec) in MODES {
        let mut trainer = Trainer::new(cfg.clone(), data.clone(), exec).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| trainer.step().unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, scoring, embedding, training_step);
criterion_main!(benches);
