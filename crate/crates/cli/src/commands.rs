use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gsr_core::arch::{load_checkpoint, Model};
use gsr_core::audio::Waveform;
use gsr_core::dataconfig::{self, read_descriptors, write_manifest, write_stub, Version};
use gsr_core::eval::{
    embedding_lookup, load_trial_list, read_embeddings, read_scores, score_trials, write_embeddings, write_scores,
    EerReport, Protocol, ScoreSet, TrialFormat,
};
use gsr_core::par::{self, Exec};
use gsr_core::training::{self, TrainConfig, TrainingSet};

fn resolve(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(root) if p.is_relative() => root.join(p),
        _ => p.to_path_buf(),
    }
}

pub fn manifest(
    version: Version,
    descriptors: &[PathBuf],
    out: Option<&Path>,
    root: Option<&Path>,
) -> anyhow::Result<()> {
    let mut all = Vec::new();
    for p in descriptors {
        all.extend(read_descriptors(resolve(root, p))?);
    }
    let config = dataconfig::compose(version, &all)?;
    let report = dataconfig::validate(&config);
    for w in report.warnings() {
        eprintln!("warning: {}", w.message);
    }
    let violations: Vec<&str> = report.violations().map(|i| i.message.as_str()).collect();
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        anyhow::bail!(gsr_core::Error::Composition {
            version: version.to_string(),
            message: format!("{} validation violation(s)", violations.len()),
        });
    }

    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "dataset\tspeakers\tutterances\thours")?;
    for m in &config.members {
        writeln!(stdout, "{}\t{}", m.name, m.totals())?;
    }
    writeln!(stdout, "{version}\t{}", config.totals)?;

    if let Some(out) = out {
        if config.members.iter().all(|m| !m.is_stub()) {
            let records: Vec<_> = config.records().cloned().collect();
            write_manifest(out, &records)?;
        } else {
            write_stub(out, &config.members)?;
        }
    }
    Ok(())
}

pub fn train(config: &Path, seed: Option<u64>, out: &Path, root: Option<&Path>, exec: Exec) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let base = root
        .map(Path::to_path_buf)
        .or_else(|| config.parent().map(Path::to_path_buf));
    let data = TrainingSet::load(&cfg.data, base.as_deref())?;
    let output = training::train(cfg, data, out, exec)?;
    println!("steps\t{}", output.steps);
    println!("metrics\t{}", output.metrics.display());
    println!("checkpoint\t{}", output.final_checkpoint.display());
    Ok(())
}

pub fn read_wav_list(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

pub fn embed(
    checkpoint: &Path,
    entries: &[String],
    vad: Option<u8>,
    out: &Path,
    root: Option<&Path>,
    exec: Exec,
) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = Model::new(ckpt.config)?;
    let params = ckpt.params;
    let embeddings = par::try_map(exec, entries, |entry| {
        let wave = Waveform::read_wav(resolve(root, Path::new(entry)))?;
        model.embed_waveform(&params, &wave, vad)
    })?;
    let items: Vec<_> = entries.iter().cloned().zip(embeddings).collect();
    write_embeddings(out, &items)?;
    println!("embeddings\t{}", items.len());
    println!("dim\t{}", model.embed_dim());
    Ok(())
}

pub enum ScoreSource {
    Embeddings(PathBuf),
    Scores(PathBuf),
}

pub fn eval(
    trials: &Path,
    format: TrialFormat,
    protocol: Option<Protocol>,
    source: ScoreSource,
    out: Option<&Path>,
    exec: Exec,
) -> anyhow::Result<()> {
    let trials = load_trial_list(trials, format, protocol)?;
    let set = match source {
        ScoreSource::Embeddings(path) => score_trials(&embedding_lookup(read_embeddings(path)?), &trials, exec)?,
        ScoreSource::Scores(path) => {
            let table: HashMap<(String, String), f64> =
                read_scores(path)?.into_iter().map(|(e, t, s)| ((e, t), s)).collect();
            let scores = trials
                .iter()
                .map(|t| {
                    table
                        .get(&(t.enrol_id.clone(), t.test_id.clone()))
                        .copied()
                        .ok_or_else(|| gsr_core::Error::Unresolved(format!("{} {}", t.enrol_id, t.test_id)))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            ScoreSet::new(trials, scores)?
        }
    };
    if let Some(out) = out {
        write_scores(out, &set)?;
    }
    let report = EerReport::from_scores(&set, protocol.map(Protocol::name))?;
    print!("{report}");
    Ok(())
}
