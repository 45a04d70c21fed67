//! Alternating optimization of the domain task module and the domain
//! generation module, plus checkpoints and epoch logs.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{AdamW, AdamWConfig, BnMode, Tape, Tensor, Var};
use crate::error::{CheckpointError, Error, Result};
use crate::losses::{self, BatchLayout, EmbeddingBatch, LossWeights};
use crate::model::{classify, project, Group, ModelBundle, ModelConfig};
use crate::spectra::{normalize, same_condition, Spectrum};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Draw each batch from a few classes so every anchor has a positive.
    pub class_balanced: bool,
    pub classes_per_batch: usize,
    /// Generator learning rate as a fraction of `optimizer.lr`.
    #[serde(default = "one")]
    pub generator_lr_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            batch_size: 12,
            epochs: 100,
            seed: 0,
            class_balanced: true,
            classes_per_batch: 4,
            generator_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    /// Reduced networks for the short axis and a 100-epoch CPU budget.
    ///
    /// The task networks step at 1e-3 so that about 600 steps suffice; the
    /// generators keep 1e-4.
    pub fn desk(length: usize, classes: usize) -> Self {
        let mut optimizer = AdamWConfig::default();
        optimizer.lr = 1e-3;
        Self {
            model: ModelConfig {
                length,
                classes,
                generator_channels: [8, 16],
                extractor_stem: 16,
                extractor_modules: vec![24, 32, 48],
                embedding_dim: 32,
                ..ModelConfig::default()
            },
            optimizer,
            generator_lr_scale: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.generator_lr_scale > 0.0 && self.generator_lr_scale.is_finite()) {
            return Err(Error::Config("generator_lr_scale must be positive".into()));
        }
        if self.class_balanced && self.classes_per_batch == 0 {
            return Err(Error::Config("classes_per_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized model inputs with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_spectra(spectra: &[&Spectrum]) -> Self {
        Self {
            rows: spectra.iter().map(|s| normalize(&s.intensities)).collect(),
            labels: spectra.iter().map(|s| s.strain_label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub(crate) fn tensor(&self) -> Result<Tensor<f32>> {
        let l = self.rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.rows.iter().flatten().copied().collect();
        Tensor::from_f64(&[self.rows.len(), 1, l], &flat)
    }

    fn has_pair(&self) -> bool {
        self.labels
            .iter()
            .enumerate()
            .any(|(i, y)| self.labels[i + 1..].contains(y))
    }
}

/// Reproducible position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal string: the word position is 68 bits wide.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

const SAMPLER_STREAM: u64 = 1;

pub fn sampler_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(SAMPLER_STREAM);
    r
}

/// Index batches for one epoch: `ceil(n / batch_size)` batches.
///
/// Class-balanced mode picks `C'` classes with at least two samples and
/// splits the batch between them as evenly as possible, so each included
/// class contributes at least two samples.
pub fn epoch_batches(labels: &[usize], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    let n_batches = n.div_ceil(cfg.batch_size);
    if !cfg.class_balanced {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        return Ok(idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect());
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    labels.iter().enumerate().for_each(|(i, &y)| members[y].push(i));
    let eligible: Vec<usize> = (0..classes).filter(|&c| members[c].len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Sampler("no class has two or more samples".into()));
    }
    let c_prime = cfg.classes_per_batch.min(eligible.len()).min(cfg.batch_size / 2).max(1);
    let mut out = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let chosen: Vec<usize> = eligible.choose_multiple(rng, c_prime).copied().collect();
        let base = cfg.batch_size / c_prime;
        let extra = cfg.batch_size % c_prime;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for (j, &c) in chosen.iter().enumerate() {
            let want = (base + usize::from(j < extra)).min(members[c].len());
            batch.extend(members[c].choose_multiple(rng, want).copied());
        }
        out.push(batch);
    }
    Ok(out)
}

/// Loss values of one step (a).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskStepLog {
    pub l_dt: f64,
    pub l_task: f64,
    pub l_invariance: f64,
    pub correct: usize,
    pub seen: usize,
}

/// Loss values of one step (b).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationStepLog {
    pub l_dg: f64,
    pub l_generation: f64,
    pub l_semantics: f64,
}

fn item(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

fn check_batch(bundle: &ModelBundle<f32>, batch: &Batch) -> Result<()> {
    if bundle.generators.is_empty() {
        return Err(Error::Usage("bundle has no domain generators".into()));
    }
    if batch.is_empty() || !batch.has_pair() {
        return Err(Error::Sampler("batch has no class with two or more samples".into()));
    }
    Ok(())
}

/// Forward of step (a) and its backward pass; gradients land in the
/// registry but no parameter moves.
pub fn task_gradients(bundle: &mut ModelBundle<f32>, batch: &Batch, w: &LossWeights) -> Result<TaskStepLog> {
    check_batch(bundle, batch)?;
    bundle.set_frozen(Group::Generators, true);
    Group::TASK.iter().for_each(|&g| bundle.set_frozen(g, false));
    bundle.zero_grad();
    let gens = bundle.generators.clone();
    let ext = bundle.extractor.clone();
    let (proj, cls) = (bundle.projection.expect("full bundle"), bundle.classifier);
    let n = batch.len();
    let mut tape = Tape::new();
    let log = {
        let mut ctx = bundle.ctx(&mut tape);
        let x = ctx.tape.constant(batch.tensor()?);
        let mut parts = vec![x];
        for g in &gens {
            parts.push(g.generate(&mut ctx, x, BnMode::TrainFrozen)?);
        }
        let omega = ctx.tape.concat(&parts)?;
        let feat = ext.extract(&mut ctx, omega, BnMode::Train)?;
        let z = project(&mut ctx, &proj, feat)?;
        let logits = classify(&mut ctx, &cls, feat)?;
        let layout = BatchLayout::omega(&batch.labels, gens.len());
        let t = &mut *ctx.tape;
        let task = losses::task_loss(t, logits, &layout.labels)?;
        let inv = losses::invariance_loss(t, &EmbeddingBatch { z, layout }, w.tau)?;
        let dt = losses::dt_loss(t, task, inv, w.beta)?;
        let lv = t.value(logits).data();
        let c = lv.len() / (n * (gens.len() + 1));
        let correct = (0..n)
            .filter(|&i| {
                let row: Vec<f64> = lv[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
                crate::model::argmax(&row) == batch.labels[i]
            })
            .count();
        t.backward(dt)?;
        TaskStepLog {
            l_dt: item(t, dt),
            l_task: item(t, task),
            l_invariance: item(t, inv),
            correct,
            seen: n,
        }
    };
    bundle.collect_grads(&tape);
    Ok(log)
}

/// Step (a): generators frozen; extractor and heads minimize β·L_task + L_inv.
pub fn step_task(bundle: &mut ModelBundle<f32>, batch: &Batch, w: &LossWeights, opt: &mut AdamW<f32>) -> Result<TaskStepLog> {
    let log = task_gradients(bundle, batch, w)?;
    opt.step(bundle.params.iter_mut());
    bundle.zero_grad();
    Ok(log)
}

/// Forward of step (b) and its backward pass into the generators.
pub fn generation_gradients(bundle: &mut ModelBundle<f32>, batch: &Batch, w: &LossWeights) -> Result<GenerationStepLog> {
    check_batch(bundle, batch)?;
    bundle.set_frozen(Group::Generators, false);
    Group::TASK.iter().for_each(|&g| bundle.set_frozen(g, true));
    bundle.zero_grad();
    let gens = bundle.generators.clone();
    let ext = bundle.extractor.clone();
    let (proj, cls) = (bundle.projection.expect("full bundle"), bundle.classifier);
    let n = batch.len();
    let mut tape = Tape::new();
    let log = {
        let mut ctx = bundle.ctx(&mut tape);
        let x = ctx.tape.constant(batch.tensor()?);
        let mut parts = vec![x];
        for g in &gens {
            parts.push(g.generate(&mut ctx, x, BnMode::Train)?);
        }
        let omega = ctx.tape.concat(&parts)?;
        let feat = ext.extract(&mut ctx, omega, BnMode::TrainFrozen)?;
        let z = project(&mut ctx, &proj, feat)?;
        let logits = classify(&mut ctx, &cls, feat)?;
        let blocks = (1..=gens.len())
            .map(|k| ctx.tape.slice_rows(logits, k * n, (k + 1) * n))
            .collect::<Result<Vec<Var>>>()?;
        let layout = BatchLayout::omega(&batch.labels, gens.len());
        let t = &mut *ctx.tape;
        let gen = losses::generation_loss(t, &EmbeddingBatch { z, layout }, w.tau)?;
        let sem = losses::semantics_loss(t, &blocks, &batch.labels)?;
        let dg = losses::dg_loss(t, gen, sem, w.alpha)?;
        t.backward(dg)?;
        GenerationStepLog {
            l_dg: item(t, dg),
            l_generation: item(t, gen),
            l_semantics: item(t, sem),
        }
    };
    bundle.collect_grads(&tape);
    Ok(log)
}

/// Step (b): task networks frozen; generators minimize α·L_gen + L_sem.
pub fn step_generation(
    bundle: &mut ModelBundle<f32>,
    batch: &Batch,
    w: &LossWeights,
    opt: &mut AdamW<f32>,
) -> Result<GenerationStepLog> {
    let log = generation_gradients(bundle, batch, w)?;
    opt.step(bundle.params.iter_mut());
    bundle.zero_grad();
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_dt: f64,
    pub l_task: f64,
    pub l_invariance: f64,
    pub l_dg: f64,
    pub l_generation: f64,
    pub l_semantics: f64,
    pub train_accuracy: f64,
}

impl EpochLog {
    pub(crate) fn from_steps(epoch: usize, a: &[TaskStepLog], b: &[GenerationStepLog]) -> Self {
        let mean = |v: &mut dyn Iterator<Item = f64>, n: usize| v.sum::<f64>() / n.max(1) as f64;
        let (na, nb) = (a.len(), b.len());
        let seen: usize = a.iter().map(|s| s.seen).sum();
        let correct: usize = a.iter().map(|s| s.correct).sum();
        Self {
            epoch,
            l_dt: mean(&mut a.iter().map(|s| s.l_dt), na),
            l_task: mean(&mut a.iter().map(|s| s.l_task), na),
            l_invariance: mean(&mut a.iter().map(|s| s.l_invariance), na),
            l_dg: mean(&mut b.iter().map(|s| s.l_dg), nb),
            l_generation: mean(&mut b.iter().map(|s| s.l_generation), nb),
            l_semantics: mean(&mut b.iter().map(|s| s.l_semantics), nb),
            train_accuracy: correct as f64 / seen.max(1) as f64,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_dt, self.l_task, self.l_invariance, self.l_dg, self.l_generation, self.l_semantics, self.train_accuracy]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Which half of an iteration just finished.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Task,
    Generation,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait TrainObserver {
    fn before_training(&mut self, _bundle: &ModelBundle<f32>) {}
    fn after_step(&mut self, _phase: Phase, _bundle: &ModelBundle<f32>) {}
    fn after_epoch(&mut self, _log: &EpochLog) {}
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    pub bundle: ModelBundle<f32>,
    pub logs: Vec<EpochLog>,
    pub rng: RngState,
}

/// Checks that the training set is one condition with a class pair.
pub fn check_train_set(train: &[Spectrum], classes: usize) -> Result<()> {
    let first = train.first().ok_or_else(|| Error::Config("empty training set".into()))?;
    if train.iter().any(|s| !same_condition(s.condition, first.condition)) {
        return Err(Error::Config("training spectra must share one acquisition condition".into()));
    }
    if let Some(s) = train.iter().find(|s| s.strain_label >= classes) {
        return Err(Error::Config(format!("label {} exceeds class count {classes}", s.strain_label)));
    }
    let mut counts = vec![0usize; classes];
    train.iter().for_each(|s| counts[s.strain_label] += 1);
    if counts.iter().all(|&c| c < 2) {
        return Err(Error::Sampler("no class has two or more training samples".into()));
    }
    Ok(())
}

pub fn train(train_set: &[Spectrum], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(train_set, cfg, &mut ())
}

/// Per epoch and per batch: step (a) then step (b).
pub fn train_observed(train_set: &[Spectrum], cfg: &TrainConfig, obs: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_train_set(train_set, cfg.model.classes)?;
    let mut bundle = ModelBundle::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let labels: Vec<usize> = train_set.iter().map(|s| s.strain_label).collect();
    let mut rng = sampler_rng(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut gen_opt = AdamW::new(AdamWConfig {
        lr: cfg.optimizer.lr * cfg.generator_lr_scale,
        ..cfg.optimizer
    });
    let mut logs = Vec::with_capacity(cfg.epochs);
    obs.before_training(&bundle);
    for epoch in 0..cfg.epochs {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for idx in epoch_batches(&labels, cfg, &mut rng)? {
            let spectra: Vec<&Spectrum> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_spectra(&spectra);
            if !batch.has_pair() {
                continue;
            }
            a.push(step_task(&mut bundle, &batch, &cfg.weights, &mut opt)?);
            obs.after_step(Phase::Task, &bundle);
            b.push(step_generation(&mut bundle, &batch, &cfg.weights, &mut gen_opt)?);
            obs.after_step(Phase::Generation, &bundle);
        }
        let log = EpochLog::from_steps(epoch, &a, &b);
        if !log.is_finite() {
            return Err(Error::Usage(format!("non-finite loss in epoch {epoch}")));
        }
        obs.after_epoch(&log);
        logs.push(log);
    }
    Group::TASK.iter().for_each(|&g| bundle.set_frozen(g, false));
    bundle.set_frozen(Group::Generators, false);
    Ok(TrainOutcome {
        bundle,
        logs,
        rng: RngState::capture(cfg.seed, &rng),
    })
}

pub fn write_epoch_logs(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::new();
    for l in logs {
        out.push_str(&serde_json::to_string(l).expect("plain struct"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// What kind of network a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Acdg,
    Erm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub epoch: usize,
    pub rng: RngState,
    /// Echo of the run configuration that produced the weights.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";
const FORMAT: u32 = 1;

pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    pub manifest: Manifest,
}

/// Writes `manifest.json` and `params.bin` (f32, little-endian) into `dir`.
pub fn save(
    bundle: &ModelBundle<f32>,
    dir: &Path,
    kind: ModelKind,
    epoch: usize,
    rng: RngState,
    config: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in bundle.named_arrays() {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
        });
        data.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
    }
    let manifest = Manifest {
        format: FORMAT,
        kind,
        model: bundle.config.clone(),
        epoch,
        rng,
        config,
        tensors,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("plain struct") + "\n";
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PAYLOAD_FILE);
    let mut f = fs::File::create(&ppath).map_err(|e| Error::io(&ppath, e))?;
    f.write_all(&payload).map_err(|e| Error::io(&ppath, e))?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let ppath = dir.join(PAYLOAD_FILE);
    if !mpath.is_file() || !ppath.is_file() {
        return Err(CheckpointError::Missing(dir.to_path_buf()).into());
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::CorruptManifest(format!("unsupported format {}", manifest.format)).into());
    }
    let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let mut bundle = match manifest.kind {
        ModelKind::Acdg => ModelBundle::<f32>::new(manifest.model.clone(), 0),
        ModelKind::Erm => ModelBundle::<f32>::classifier_only(manifest.model.clone(), 0),
    }
    .map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;

    let mut arrays = bundle.named_arrays_mut();
    if arrays.len() != manifest.tensors.len() {
        return Err(CheckpointError::CorruptManifest(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            arrays.len()
        ))
        .into());
    }
    for (entry, (name, shape, _)) in manifest.tensors.iter().zip(arrays.iter()) {
        if &entry.name != name {
            return Err(CheckpointError::CorruptManifest(format!("expected tensor {name}, found {}", entry.name)).into());
        }
        if &entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                manifest: entry.shape.clone(),
                model: shape.clone(),
            }
            .into());
        }
    }
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: payload.len(),
        }
        .into());
    }
    let mut offset = 0;
    for (entry, (name, _, data)) in manifest.tensors.iter().zip(arrays.iter_mut()) {
        if entry.offset != offset {
            return Err(CheckpointError::CorruptManifest(format!("tensor {name} has offset {}", entry.offset)).into());
        }
        for (v, chunk) in data.iter_mut().zip(payload[offset..].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        offset += data.len() * 4;
    }
    drop(arrays);
    Ok(Checkpoint { bundle, manifest })
}
