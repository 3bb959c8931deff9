//! The training loop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::aam::aam_loss_var;
use super::batch::sample_indices;
use super::config::{DataSpec, TrainConfig};
use super::optim::Optimizer;
use super::schedule::lr_at;
use super::synth::synthetic_corpus;
use crate::arch::{save_checkpoint, Model, SpeakerEmbedding, MODEL_RATE};
use crate::audio::{
    add_noise, apply_rir, freq_drop, resample, speed_perturb, AugmentConfig, AugmentKind, FeatureKind, FeatureMatrix,
    Frontend, FrontendConfig, Waveform,
};
use crate::dataconfig::UtteranceRecord;
use crate::error::{Error, Result};
use crate::eval::{compute_eer, ScoreSet, Trial};
use crate::par::{self, Exec};
use crate::tensor::{Graph, ParamStore};

/// Name of the class-weight matrix added to the model's parameters during
/// training; it is not part of saved checkpoints.
pub const AAM_WEIGHT: &str = "aam.weight";

/// Utterances held in memory at the model rate, with class labels assigned
/// by sorted dataset-qualified speaker.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    records: Vec<UtteranceRecord>,
    waves: Vec<Waveform>,
    labels: Vec<usize>,
    speakers: Vec<String>,
}

impl TrainingSet {
    pub fn new(items: Vec<(UtteranceRecord, Waveform)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut class: BTreeMap<String, usize> = items.iter().map(|(r, _)| (r.speaker_key(), 0)).collect();
        for (i, v) in class.values_mut().enumerate() {
            *v = i;
        }
        let mut records = Vec::with_capacity(items.len());
        let mut waves = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        for (r, w) in items {
            labels.push(class[&r.speaker_key()]);
            waves.push(if w.sample_rate == MODEL_RATE {
                w
            } else {
                resample(&w, MODEL_RATE)?
            });
            records.push(r);
        }
        Ok(Self {
            records,
            waves,
            labels,
            speakers: class.into_keys().collect(),
        })
    }

    /// Loads every record's WAV file; relative paths are taken from `root`.
    pub fn from_records(records: Vec<UtteranceRecord>, root: Option<&Path>) -> Result<Self> {
        let mut items = Vec::with_capacity(records.len());
        for r in records {
            let rel = r
                .path
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("utterance `{}` has no audio path", r.utterance_id)))?;
            let path = match root {
                Some(root) if Path::new(rel).is_relative() => root.join(rel),
                _ => PathBuf::from(rel),
            };
            let wave = Waveform::read_wav(&path)?;
            items.push((r, wave));
        }
        Self::new(items)
    }

    /// Materialises the data section of a training config.
    pub fn load(data: &DataSpec, root: Option<&Path>) -> Result<Self> {
        match (&data.manifest, &data.synthetic) {
            (Some(m), None) => {
                let path = match root {
                    Some(root) if m.is_relative() => root.join(m),
                    _ => m.clone(),
                };
                let records = crate::dataconfig::read_manifest(&path)?;
                let base = root
                    .map(Path::to_path_buf)
                    .or_else(|| path.parent().map(Path::to_path_buf));
                Self::from_records(records, base.as_deref())
            }
            (None, Some(s)) => Self::new(synthetic_corpus(s)?),
            _ => Err(Error::Config(
                "data: set exactly one of `manifest` or `synthetic`".into(),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl StepRecord {
    /// `step<TAB>lr<TAB>loss`.
    pub fn log_line(&self) -> String {
        format!("{}\t{:.6e}\t{:.8}", self.step, self.lr, self.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum AugmentDraw {
    Noise { snr_db: f64, seed: u64 },
    Reverb { rt60: f64, seed: u64 },
    Speed(f64),
    FreqDrop { start: usize, width: usize },
}

/// Everything random about one batch item, drawn up front so the parallel
/// part of a step is a pure function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ItemPlan {
    index: usize,
    offset: usize,
    augment: Option<AugmentDraw>,
}

/// Frontend matching a model's input.
pub fn model_frontend(model: &Model) -> Result<Frontend> {
    Frontend::new(FrontendConfig {
        n_mels: model.config().input_dim(),
        ..FrontendConfig::default()
    })
}

/// Features of the kind and width `model` consumes, from a shared frontend.
pub fn model_features(model: &Model, frontend: &Frontend, wave: &Waveform) -> Result<FeatureMatrix> {
    let cfg = model.config();
    match cfg.feature_kind() {
        FeatureKind::LogMel => frontend.logmel(wave),
        FeatureKind::Mfcc => frontend.mfcc(wave, cfg.input_dim()),
    }
}

fn synthetic_rir(rt60: f64, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (rt60 * MODEL_RATE as f64) as usize;
    // exponential decay reaching -60 dB at rt60
    let decay = 6.9 / n as f64;
    let mut taps: Vec<f64> = (0..n.max(1))
        .map(|i| rng.gen_range(-1.0..1.0) * (-decay * i as f64).exp())
        .collect();
    taps[0] = 1.0;
    Waveform::new(taps, MODEL_RATE)
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    frontend: Frontend,
    data: TrainingSet,
    params: ParamStore,
    optimizer: Optimizer,
    exec: Exec,
    step: u64,
    last_good: Option<u64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: TrainingSet, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        if data.n_speakers() < 2 {
            return Err(Error::invalid("training needs at least 2 speakers"));
        }
        let model = Model::new(cfg.model.clone())?;
        let frontend = model_frontend(&model)?;
        let mut params = model.init_params(cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA4A4);
        let w = Array2::from_shape_simple_fn((data.n_speakers(), model.embed_dim()), || rng.gen_range(-1.0..1.0));
        params.insert(AAM_WEIGHT, w);
        let optimizer = Optimizer::new(cfg.optimizer.clone(), &params)?;
        Ok(Self {
            cfg,
            model,
            frontend,
            data,
            params,
            optimizer,
            exec,
            step: 0,
            last_good: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// All trained tensors, class weights included.
    pub fn training_params(&self) -> &ParamStore {
        &self.params
    }

    /// Model tensors only, as saved in checkpoints.
    pub fn model_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for (name, t) in self.params.iter().filter(|(n, _)| !n.starts_with("aam.")) {
            p.insert(name, t.clone());
        }
        p
    }

    pub(crate) fn plan_batch(&self, step: u64) -> Result<Vec<ItemPlan>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        let indices = sample_indices(self.data.records(), &self.cfg.batch, &mut rng)?;
        let crop = (self.cfg.batch.crop_seconds * MODEL_RATE as f64).round() as usize;
        let mut plans = Vec::with_capacity(indices.len());
        for index in indices {
            let len = self.data.waves[index].len();
            let offset = if len > crop { rng.gen_range(0..=len - crop) } else { 0 };
            let augment = self
                .cfg
                .augment
                .as_ref()
                .and_then(|a| draw_augment(a, self.model.config().input_dim(), &mut rng));
            plans.push(ItemPlan { index, offset, augment });
        }
        Ok(plans)
    }

    fn item_features(&self, plan: &ItemPlan) -> Result<Array2<f64>> {
        let wave = &self.data.waves[plan.index];
        let crop = (self.cfg.batch.crop_seconds * MODEL_RATE as f64).round() as usize;
        let end = (plan.offset + crop).min(wave.len());
        let mut w = Waveform {
            samples: wave.samples[plan.offset..end].to_vec(),
            sample_rate: wave.sample_rate,
        };
        let mut drop = None;
        match plan.augment {
            Some(AugmentDraw::Noise { snr_db, seed }) => {
                let noise = white_noise(w.len(), seed);
                w = add_noise(&w, &noise, snr_db)?;
            }
            Some(AugmentDraw::Reverb { rt60, seed }) => {
                let rir = synthetic_rir(rt60, seed)?;
                w = apply_rir(&w, &rir)?;
            }
            Some(AugmentDraw::Speed(f)) => w = speed_perturb(&w, f)?,
            Some(AugmentDraw::FreqDrop { start, width }) => drop = Some((start, width)),
            None => {}
        }
        let mut feats = model_features(&self.model, &self.frontend, &w)?;
        if let Some((start, width)) = drop {
            feats = freq_drop(&feats, start, width)?;
        }
        Ok(feats.frames)
    }

    /// Mean loss over the batch and its gradient for every training tensor.
    pub(crate) fn loss_and_grads(&self, params: &ParamStore, plans: &[ItemPlan]) -> Result<(f64, ParamStore)> {
        let b = plans.len() as f64;
        let (margin, scale) = (self.cfg.aam.margin, self.cfg.aam.scale);
        let per_item = par::try_map(self.exec, plans, |plan| -> Result<(f64, ParamStore)> {
            let feats = self.item_features(plan)?;
            let mut g = Graph::new();
            let emb = self.model.forward_checked(&mut g, params, &feats)?;
            let w = g.param(params, AAM_WEIGHT);
            let label = self.data.labels[plan.index];
            let (loss, _) = aam_loss_var(&mut g, emb, w, &[label], margin, scale);
            let scaled = g.scale(loss, 1.0 / b);
            let mut grads = params.zeros_like();
            g.backward(scaled).accumulate_into(&mut grads);
            Ok((g.value(loss)[[0, 0]], grads))
        })?;
        let mut total = params.zeros_like();
        let mut loss = 0.0;
        for (l, gr) in &per_item {
            loss += l;
            for i in 0..total.len() {
                *total.by_index_mut(i) += gr.by_index(i).1;
            }
        }
        Ok((loss / b, total))
    }

    fn diverged(&self, step: u64) -> Error {
        Error::Diverged {
            step,
            last_good: self.last_good,
        }
    }

    /// Runs the next optimisation step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let plans = self.plan_batch(step)?;
        let (loss, grads) = self.loss_and_grads(&self.params, &plans)?;
        if !loss.is_finite() || !all_finite(&grads) {
            return Err(self.diverged(step));
        }
        let lr = lr_at(step, &self.cfg.schedule);
        self.optimizer.step(&mut self.params, &grads, lr);
        if !all_finite(&self.params) {
            return Err(self.diverged(step));
        }
        self.step = step;
        self.last_good = Some(step);
        Ok(StepRecord { step, lr, loss })
    }

    /// Steps until `max_steps`, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.max_steps {
            let rec = self.step()?;
            sink(self, &rec)?;
        }
        Ok(())
    }

    /// Embeds whole utterances with the current parameters.
    pub fn embed(&self, waves: &[Waveform]) -> Result<Vec<SpeakerEmbedding>> {
        embed_all(&self.model, &self.model_params(), waves, self.exec)
    }
}

fn draw_augment(a: &AugmentConfig, n_bins: usize, rng: &mut impl Rng) -> Option<AugmentDraw> {
    if a.kinds.is_empty() || !rng.gen_bool(a.probability) {
        return None;
    }
    Some(match a.kinds[rng.gen_range(0..a.kinds.len())] {
        AugmentKind::Noise => AugmentDraw::Noise {
            snr_db: rng.gen_range(a.snr_db.0..=a.snr_db.1),
            seed: rng.gen(),
        },
        AugmentKind::Reverb => AugmentDraw::Reverb {
            rt60: rng.gen_range(0.2..0.8),
            seed: rng.gen(),
        },
        AugmentKind::Speed => AugmentDraw::Speed(if rng.gen_bool(0.5) { 0.9 } else { 1.1 }),
        AugmentKind::FreqDrop => {
            let width = rng.gen_range(0..=a.max_freq_drop.min(n_bins));
            AugmentDraw::FreqDrop {
                start: rng.gen_range(0..=n_bins - width),
                width,
            }
        }
    })
}

fn white_noise(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform {
        samples: (0..len).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
        sample_rate: MODEL_RATE,
    }
}

fn all_finite(p: &ParamStore) -> bool {
    p.iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
}

/// Embeddings of whole utterances, in input order.
pub fn embed_all(model: &Model, params: &ParamStore, waves: &[Waveform], exec: Exec) -> Result<Vec<SpeakerEmbedding>> {
    let frontend = model_frontend(model)?;
    par::try_map(exec, waves, |w| {
        let w = if w.sample_rate == MODEL_RATE {
            w.clone()
        } else {
            resample(w, MODEL_RATE)?
        };
        model.embed(params, &model_features(model, &frontend, &w)?)
    })
}

/// EER over every pair of the given utterances, target when the speakers
/// match.
pub fn all_pairs_eer(labels: &[usize], embeddings: &[SpeakerEmbedding]) -> Result<f64> {
    let mut trials = Vec::new();
    let mut scores = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            trials.push(Trial::new(i.to_string(), j.to_string(), labels[i] == labels[j]));
            scores.push(crate::eval::cosine_score(&embeddings[i], &embeddings[j])?);
        }
    }
    Ok(compute_eer(&ScoreSet::new(trials, scores)?)?.eer)
}

/// Paths written by [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub steps: u64,
}

pub const METRICS_FILE: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "final.gsrm";

/// Trains to completion, writing the metrics log, periodic checkpoints and a
/// final checkpoint into `out_dir`. On divergence the log keeps every step
/// up to the last good one.
pub fn train(cfg: TrainConfig, data: TrainingSet, out_dir: &Path, exec: Exec) -> Result<TrainOutput> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut log = BufWriter::new(file);
    let mut trainer = Trainer::new(cfg, data, exec)?;
    let every = trainer.config().checkpoint_every;
    let model_cfg = trainer.config().model.clone();
    let mut checkpoints = Vec::new();
    let result = trainer.run(|t, rec| {
        writeln!(log, "{}", rec.log_line()).map_err(|e| Error::io(&metrics, e))?;
        if every > 0 && rec.step % every == 0 {
            let path = out_dir.join(format!("step-{:06}.gsrm", rec.step));
            save_checkpoint(&path, &model_cfg, &t.model_params())?;
            checkpoints.push(path);
        }
        Ok(())
    });
    log.flush().map_err(|e| Error::io(&metrics, e))?;
    result?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &model_cfg, &trainer.model_params())?;
    Ok(TrainOutput {
        metrics,
        final_checkpoint,
        checkpoints,
        steps: trainer.steps_done(),
    })
}
