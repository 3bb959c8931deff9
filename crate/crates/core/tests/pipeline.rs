use std::collections::HashMap;
use std::path::Path;

use gsr_core::arch::{load_checkpoint, Model, SpeakerEmbedding};
use gsr_core::dataconfig::{compose, read_descriptors, validate, write_manifest, Version};
use gsr_core::eval::{
    embedding_lookup, generate_trials, mark_overlaps, parse_rttm, read_embeddings, score_trials, write_embeddings,
    EerReport, Trial, TrialGenConfig,
};
use gsr_core::par::Exec;
use gsr_core::training::synth::{synthetic_record, synthetic_utterance, SyntheticSpec};
use gsr_core::training::{train, TrainConfig, TrainingSet, FINAL_CHECKPOINT, METRICS_FILE};
use tempfile::TempDir;

const MODEL: &str = r#"
seed = 5
max_steps = 6

[model]
arch = "conformer"
n_layers = 1
model_dim = 8
n_heads = 2
ff_units = 16
conv_kernel = 3
embed_dim = 6
input_dim = 16
subsample_factor = 2
pool_attention_dim = 4

[schedule]
kind = "cosine-warmup"
lr_max = 2e-3
lr_min = 1e-5
warmup_steps = 2
total_steps = 6

[batch]
batch_size = 3
crop_seconds = 0.3

[optimizer]
kind = "adamw"
"#;

/// Narrow-band synthetic corpus written as WAVs plus a manifest tagged as
/// the VoxCeleb member.
fn write_corpus(dir: &Path) -> Vec<(String, usize)> {
    let spec = SyntheticSpec {
        n_speakers: 3,
        utts_per_speaker: 4,
        seconds: 0.5,
        sample_rate: 8_000,
        seed: 9,
    };
    let mut records = Vec::new();
    let mut ids = Vec::new();
    for s in 0..spec.n_speakers {
        for u in 0..spec.utts_per_speaker {
            let mut r = synthetic_record(&spec, s, u);
            let file = format!("{}.wav", r.utterance_id);
            synthetic_utterance(&spec, s, u)
                .unwrap()
                .write_wav(dir.join(&file))
                .unwrap();
            r.dataset = "voxceleb12-dev".into();
            r.path = Some(file.clone());
            ids.push((file, s));
            records.push(r);
        }
    }
    write_manifest(dir.join("train.tsv"), &records).unwrap();
    ids
}

#[test]
fn manifest_to_scores() {
    let dir = TempDir::new().unwrap();
    let files = write_corpus(dir.path());

    let descriptors = read_descriptors(dir.path().join("train.tsv")).unwrap();
    let config = compose(Version::V0, &descriptors).unwrap();
    assert_eq!(config.totals.n_speakers, 3);
    assert_eq!(config.totals.n_utterances, 12);
    let report = validate(&config);
    assert_eq!(report.violations().count(), 0);
    // 8 kHz audio without the resample marker
    assert_eq!(report.warnings().count(), 1);

    let cfg = TrainConfig::from_toml(&format!("{MODEL}\n[data]\nmanifest = \"train.tsv\"\n")).unwrap();
    let data = TrainingSet::load(&cfg.data, Some(dir.path())).unwrap();
    assert_eq!((data.len(), data.n_speakers()), (12, 3));
    let out = train(cfg, data, &dir.path().join("run"), Exec::auto()).unwrap();
    assert_eq!(out.steps, 6);

    let ckpt = load_checkpoint(dir.path().join("run").join(FINAL_CHECKPOINT)).unwrap();
    let model = Model::new(ckpt.config).unwrap();
    let mut items = Vec::new();
    for (file, _) in &files {
        let wave = gsr_core::audio::Waveform::read_wav(dir.path().join(file)).unwrap();
        items.push((file.clone(), model.embed_waveform(&ckpt.params, &wave, None).unwrap()));
    }
    let emb_path = dir.path().join("emb.txt");
    write_embeddings(&emb_path, &items).unwrap();
    let loaded = read_embeddings(&emb_path).unwrap();
    assert_eq!(loaded, items);

    let mut trials = Vec::new();
    for (i, (a, sa)) in files.iter().enumerate() {
        for (b, sb) in &files[i + 1..] {
            trials.push(Trial::new(a.clone(), b.clone(), sa == sb));
        }
    }
    let scores = score_trials(&embedding_lookup(loaded), &trials, Exec::auto()).unwrap();
    let report = EerReport::from_scores(&scores, None).unwrap();
    assert_eq!((report.n_target, report.n_nontarget), (18, 48));
    assert!((0.0..=1.0).contains(&report.eer));
}

#[test]
fn training_log_does_not_depend_on_exec_mode() {
    let cfg = TrainConfig::from_toml(&format!(
        "{MODEL}\n[data.synthetic]\nn_speakers = 3\nutts_per_speaker = 3\nseconds = 0.4\n"
    ))
    .unwrap();
    let dir = TempDir::new().unwrap();
    let mut logs = Vec::new();
    for (name, exec) in [("seq", Exec::Sequential), ("par", Exec::Parallel)] {
        let data = TrainingSet::load(&cfg.data, None).unwrap();
        let out = train(cfg.clone(), data, &dir.path().join(name), exec).unwrap();
        logs.push(std::fs::read(out.metrics).unwrap());
        assert!(dir.path().join(name).join(METRICS_FILE).is_file());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn diarisation_segments_to_scores() {
    let rttm = "\
SPEAKER s1 1 0.00 2.00 <NA> <NA> alice <NA> <NA>
SPEAKER s1 1 2.50 1.50 <NA> <NA> bob <NA> <NA>
SPEAKER s1 1 3.80 1.00 <NA> <NA> alice <NA> <NA>
SPEAKER s1 1 6.00 2.00 <NA> <NA> alice <NA> <NA>
SPEAKER s1 1 9.00 1.00 <NA> <NA> bob <NA> <NA>
SPEAKER s2 1 0.00 3.00 <NA> <NA> carol <NA> <NA>
SPEAKER s2 1 4.00 3.00 <NA> <NA> carol <NA> <NA>
SPEAKER s2 1 8.00 1.00 <NA> <NA> dave <NA> <NA>
";
    let mut segs = parse_rttm("test.rttm", rttm).unwrap();
    // bob at 2.5-4.0 overlaps alice at 3.8-4.8
    assert_eq!(mark_overlaps(&mut segs), 2);
    let trials = generate_trials(&segs, &TrialGenConfig::default(), 0);
    // s1 keeps three clean segments, s2 all three
    assert_eq!(trials.len(), 6);
    assert_eq!(trials.iter().filter(|t| t.target).count(), 2);

    let voice = |who: &str| match who {
        "alice" => vec![1.0, 0.1, 0.0],
        "bob" => vec![0.0, 1.0, 0.2],
        "carol" => vec![0.1, 0.0, 1.0],
        _ => vec![-1.0, 0.5, 0.0],
    };
    let lookup: HashMap<String, SpeakerEmbedding> = segs
        .iter()
        .map(|s| (s.id(), SpeakerEmbedding::new(voice(&s.speaker_id)).unwrap()))
        .collect();
    let scores = score_trials(&lookup, &trials, Exec::Sequential).unwrap();
    assert_eq!(EerReport::from_scores(&scores, None).unwrap().eer, 0.0);
}
