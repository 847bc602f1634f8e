//! Training, checkpointing, evaluation and prediction.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{check_divisible, ClassVocabulary, MaskBundle, Sample, TaskKind, TaskQuery};
use crate::datagen::{load_manifest, load_samples, DatasetManifest, MixedSampler};
use crate::error::{Error, Result};
use crate::instruction_codec::{lm_loss, prompt_ids, render_target_response, TokenVocabulary, EOS_ID};
use crate::io::{read_label, read_rgb, write_label, write_rgb, LABEL_PALETTE};
use crate::losses::{LossReport, LossWeights};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::{ChangeModel, ModelConfig};
use crate::optim::{AdamW, AdamWConfig, GradAccumulator};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; by default one pass over every source.
    pub steps_per_epoch: Option<usize>,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Dataset manifests, relative to the config file.
    pub manifests: Vec<PathBuf>,
    pub model: ModelConfig,
    pub precision: Precision,
    /// Text-only steps on the response templates before joint training.
    pub text_warmup_steps: usize,
    pub text_warmup_lr: f64,
    pub lr_schedule: LrSchedule,
}

/// Learning rate over the `epochs × steps_per_epoch` steps of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step.min(total) as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 0.01,
            batch_size: 1,
            grad_accum_steps: 8,
            epochs: 1,
            steps_per_epoch: None,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_dir: None,
            manifests: Vec::new(),
            model: ModelConfig::default(),
            precision: Precision::F32,
            text_warmup_steps: 0,
            text_warmup_lr: 3e-3,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("batch_size and grad_accum_steps must be positive".into()));
        }
        if !(self.text_warmup_lr > 0.0 && self.text_warmup_lr.is_finite()) {
            return Err(Error::Config("text_warmup_lr must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        self.loss_weights.validate()?;
        self.model.validate()
    }

    /// Reads TOML or JSON (by extension); relative manifest and checkpoint
    /// paths are resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut cfg.manifests {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        if let Some(d) = &mut cfg.checkpoint_dir {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Training samples of one source with the query used for all of them.
#[derive(Clone, Debug)]
pub struct TrainSource {
    pub query: TaskQuery,
    pub samples: Vec<Sample>,
}

impl TrainSource {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Invalid("source has no samples".into()))?;
        Ok(Self {
            query: TaskQuery::for_sample(first)?,
            samples,
        })
    }

    pub fn from_manifest(m: &DatasetManifest, split: &str) -> Result<Self> {
        Ok(Self {
            query: TaskQuery::new(m.task, m.vocabulary.clone())?,
            samples: load_samples(m, split)?,
        })
    }
}

/// Token vocabulary covering every class name of the given vocabularies.
pub fn token_vocabulary<'a>(vocabs: impl IntoIterator<Item = &'a ClassVocabulary>) -> TokenVocabulary {
    let binary = ClassVocabulary::binary();
    let mut all: Vec<&ClassVocabulary> = vocabs.into_iter().collect();
    all.push(&binary);
    TokenVocabulary::new(all)
}

/// Both task templates for every class vocabulary in use: binary queries
/// keep single-class vocabularies and fall back to the generic class
/// otherwise.
pub fn warmup_queries<'a>(vocabs: impl IntoIterator<Item = &'a ClassVocabulary>) -> Result<Vec<TaskQuery>> {
    let mut out: Vec<TaskQuery> = Vec::new();
    for v in vocabs {
        let binary = if v.len() == 1 { v.clone() } else { ClassVocabulary::binary() };
        for q in [TaskQuery::new(TaskKind::Bcd, binary)?, TaskQuery::new(TaskKind::Scd, v.clone())?] {
            if !out.iter().any(|o| o.instruction == q.instruction) {
                out.push(q);
            }
        }
    }
    Ok(out)
}

/// Trains only the language stand-in on the response templates of
/// `queries` until the mean next-token loss drops below `target` or
/// `max_steps` is reached. Returns the steps taken and the last loss.
pub fn warmup_language(model: &ChangeModel, queries: &[TaskQuery], lr: f64, max_steps: usize, target: f64) -> Result<(usize, f64)> {
    let sequences = queries
        .iter()
        .map(|q| {
            let prompt = prompt_ids(model.vocab(), &q.instruction)?;
            let mut response = model.vocab().encode(render_target_response(q.task))?;
            response.push(EOS_ID);
            Ok((prompt, response))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut last = f64::INFINITY;
    for step in 0..max_steps {
        let mut acc = GradAccumulator::new();
        let mut total = 0.0;
        for (prompt, response) in &sequences {
            let loss = lm_loss(model.lm(), prompt, response)?;
            total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            acc.add(model.params(), &loss.backward()?)?;
        }
        last = total / sequences.len() as f64;
        if !last.is_finite() {
            return Err(Error::NonFinite { term: "txt".into(), step });
        }
        if last < target {
            return Ok((step, last));
        }
        opt.step(model.params(), &acc.take_mean()?)?;
    }
    Ok((max_steps, last))
}

/// Serialized training state.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: TokenVocabulary,
    pub step: u64,
    pub epoch: u64,
    pub offset: usize,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub adam_step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    vocab: BTreeMap<String, u32>,
    step: u64,
    epoch: u64,
    offset: usize,
    adam_step: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocab: self.vocab.to_map(),
            step: self.step,
            epoch: self.epoch,
            offset: self.offset,
            adam_step: self.adam_step,
        };
        let mut info = HashMap::new();
        info.insert("changetok".to_string(), serde_json::to_string(&meta)?);
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (prefix, map) in [("param.", &self.params), ("adam.m.", &self.adam_m), ("adam.v.", &self.adam_v)] {
            for (k, v) in map {
                tensors.push((format!("{prefix}{k}"), v.contiguous()?));
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get("changetok"))
            .ok_or_else(|| Error::Checkpoint(format!("{} has no training metadata", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut params = BTreeMap::new();
        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        for (k, v) in tensors {
            if let Some(n) = k.strip_prefix("param.") {
                params.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("adam.m.") {
                adam_m.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("adam.v.") {
                adam_v.insert(n.to_string(), v);
            }
        }
        Ok(Self {
            config: meta.config,
            vocab: TokenVocabulary::from_map(&meta.vocab)?,
            step: meta.step,
            epoch: meta.epoch,
            offset: meta.offset,
            params,
            adam_m,
            adam_v,
            adam_step: meta.adam_step,
        })
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<ChangeModel> {
        let m = ChangeModel::new(
            &self.config.model,
            self.vocab.clone(),
            self.config.seed,
            self.config.precision.dtype(),
        )?;
        m.params().load(&self.params)?;
        Ok(m)
    }
}

pub struct Trainer {
    model: ChangeModel,
    opt: AdamW,
    cfg: TrainConfig,
    sources: Vec<TrainSource>,
    sampler: MixedSampler,
    epoch: u64,
    offset: usize,
    step: u64,
    log: Vec<LossReport>,
    last_grads: BTreeMap<String, Tensor>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, sources: Vec<TrainSource>) -> Result<Self> {
        cfg.validate()?;
        let vocab = token_vocabulary(sources.iter().map(|s| &s.query.vocabulary));
        let model = ChangeModel::new(&cfg.model, vocab, cfg.seed, cfg.precision.dtype())?;
        if cfg.text_warmup_steps > 0 {
            let queries = warmup_queries(sources.iter().map(|s| &s.query.vocabulary))?;
            let (steps, loss) = warmup_language(&model, &queries, cfg.text_warmup_lr, cfg.text_warmup_steps, 0.01)?;
            log::info!("language warm-up: {steps} steps, loss {loss:.4}");
        }
        Self::assemble(cfg, sources, model)
    }

    fn assemble(cfg: TrainConfig, sources: Vec<TrainSource>, model: ChangeModel) -> Result<Self> {
        for s in &sources {
            if !model.vocab().covers(&s.query.vocabulary) {
                return Err(Error::Invalid(format!(
                    "token vocabulary lacks classes of {:?}",
                    s.query.vocabulary.classes()
                )));
            }
        }
        let sampler = MixedSampler::new(sources.iter().map(|s| s.samples.len()).collect(), cfg.batch_size, cfg.seed)?;
        Ok(Self {
            model,
            opt: AdamW::new(cfg.adamw()),
            cfg,
            sources,
            sampler,
            epoch: 0,
            offset: 0,
            step: 0,
            log: Vec::new(),
            last_grads: BTreeMap::new(),
        })
    }

    /// Continues from a checkpoint on the given sources.
    pub fn resume(ckpt: &Checkpoint, sources: Vec<TrainSource>) -> Result<Self> {
        let model = ckpt.model()?;
        let mut t = Self::assemble(ckpt.config.clone(), sources, model)?;
        t.opt.restore(ckpt.adam_m.clone(), ckpt.adam_v.clone(), ckpt.adam_step);
        t.epoch = ckpt.epoch;
        t.offset = ckpt.offset;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn from_config(cfg: TrainConfig) -> Result<Self> {
        if cfg.manifests.is_empty() {
            return Err(Error::Config("no manifests given".into()));
        }
        let sources = cfg
            .manifests
            .iter()
            .map(|p| TrainSource::from_manifest(&load_manifest(p)?, "train"))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cfg, sources)
    }

    pub fn model(&self) -> &ChangeModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn sources(&self) -> &[TrainSource] {
        &self.sources
    }

    pub fn log(&self) -> &[LossReport] {
        &self.log
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Mean gradients applied by the last step, keyed by parameter name.
    /// Parameters absent from the map received no gradient at all.
    pub fn last_gradients(&self) -> &BTreeMap<String, Tensor> {
        &self.last_grads
    }

    /// Rate applied by the next optimizer step.
    pub fn current_lr(&self) -> f64 {
        let total = self.cfg.epochs * self.steps_per_epoch();
        self.cfg.lr_schedule.lr(self.cfg.learning_rate, self.step as usize, total)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| self.sampler.batches_per_epoch().div_ceil(self.cfg.grad_accum_steps))
    }

    fn next_batch(&mut self) -> crate::datagen::SourceBatch {
        loop {
            let epoch = self.sampler.epoch(self.epoch);
            if let Some(b) = epoch.get(self.offset) {
                self.offset += 1;
                return b.clone();
            }
            self.epoch += 1;
            self.offset = 0;
        }
    }

    /// One optimizer step over `grad_accum_steps` micro-batches.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let accum = self.cfg.grad_accum_steps;
        let mut acc = GradAccumulator::new();
        let mut mean = LossReport {
            gated: true,
            ..Default::default()
        };
        for _ in 0..accum {
            let b = self.next_batch();
            let src = &self.sources[b.source];
            let batch: Vec<&Sample> = b.indices.iter().map(|&i| &src.samples[i]).collect();
            let (loss, r) = self.model.loss(&batch, &src.query, &self.cfg.loss_weights)?;
            if let Some(term) = r.non_finite_term() {
                return Err(Error::NonFinite {
                    term: term.to_string(),
                    step: self.step as usize,
                });
            }
            acc.add(self.model.params(), &loss.backward()?)?;
            let k = accum as f64;
            mean.total += r.total / k;
            mean.txt += r.txt / k;
            mean.bce += r.bce / k;
            mean.dice += r.dice / k;
            mean.ss += r.ss / k;
            mean.sc += r.sc / k;
            mean.gated &= r.gated;
        }
        let grads = acc.take_mean()?;
        self.opt.cfg.lr = self.current_lr();
        self.opt.step(self.model.params(), &grads)?;
        self.last_grads = grads;
        self.step += 1;
        log::debug!(
            "step {} total {:.5} txt {:.5} bce {:.5} dice {:.5} ss {:.5} sc {:.5}",
            self.step,
            mean.total,
            mean.txt,
            mean.bce,
            mean.dice,
            mean.ss,
            mean.sc
        );
        self.log.push(mean);
        Ok(mean)
    }

    /// Runs `epochs × steps_per_epoch` steps and writes a checkpoint if a
    /// directory is configured.
    pub fn run(&mut self) -> Result<()> {
        let total = self.cfg.epochs * self.steps_per_epoch();
        for _ in 0..total {
            self.train_step()?;
        }
        if let Some(dir) = self.cfg.checkpoint_dir.clone() {
            self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (m, v) = self.opt.moments();
        Ok(Checkpoint {
            config: self.cfg.clone(),
            vocab: self.model.vocab().clone(),
            step: self.step,
            epoch: self.epoch,
            offset: self.offset,
            params: self.model.params().snapshot()?,
            adam_m: m.clone(),
            adam_v: v.clone(),
            adam_step: self.opt.step_count(),
        })
    }

    pub fn into_model(self) -> ChangeModel {
        self.model
    }
}

/// Anything that turns a batch into mask logits.
pub trait Predictor {
    fn predict(&self, batch: &[&Sample], query: &TaskQuery) -> Result<Vec<MaskBundle>>;
}

impl Predictor for ChangeModel {
    fn predict(&self, batch: &[&Sample], query: &TaskQuery) -> Result<Vec<MaskBundle>> {
        self.predict_batch(batch, query)
    }
}

/// Emits the ground truth as saturated logits.
pub struct OraclePredictor;

fn one_hot(labels: &Array2<u8>, c: usize) -> Array3<f32> {
    let (h, w) = labels.dim();
    Array3::from_shape_fn((c, h, w), |(k, y, x)| if labels[[y, x]] as usize == k { 10.0 } else { -10.0 })
}

impl Predictor for OraclePredictor {
    fn predict(&self, batch: &[&Sample], query: &TaskQuery) -> Result<Vec<MaskBundle>> {
        let c = query.vocabulary.num_labels();
        Ok(batch
            .iter()
            .map(|s| MaskBundle {
                change_logits: s.gt.change_mask.mapv(|v| if v == 1 { 10.0 } else { -10.0 }),
                t1_logits: s.gt.sem_t1.as_ref().map(|m| one_hot(m, c)),
                t2_logits: s.gt.sem_t2.as_ref().map(|m| one_hot(m, c)),
            })
            .collect())
    }
}

/// Independent uniform logits per pixel.
pub struct RandomPredictor {
    rng: std::cell::RefCell<ChaCha8Rng>,
}

impl RandomPredictor {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl Predictor for RandomPredictor {
    fn predict(&self, batch: &[&Sample], query: &TaskQuery) -> Result<Vec<MaskBundle>> {
        let mut rng = self.rng.borrow_mut();
        let c = query.vocabulary.num_labels();
        Ok(batch
            .iter()
            .map(|s| {
                let (h, w) = s.gt.change_mask.dim();
                let mut logits = |shape: (usize, usize, usize)| Array3::from_shape_fn(shape, |_| rng.random_range(-1.0f32..1.0));
                let change = logits((1, h, w)).index_axis_move(ndarray::Axis(0), 0);
                let sem = query.task.is_scd().then(|| (logits((c, h, w)), logits((c, h, w))));
                MaskBundle {
                    change_logits: change,
                    t1_logits: sem.as_ref().map(|s| s.0.clone()),
                    t2_logits: sem.map(|s| s.1),
                }
            })
            .collect())
    }
}

/// Zeroes predicted labels outside the predicted change area.
pub fn mask_semantic(labels: &Array2<u8>, change: &Array2<u8>) -> Array2<u8> {
    Zip::from(labels).and(change).map_collect(|&l, &c| if c == 1 { l } else { 0 })
}

/// Thresholds at 0.5 (and argmax for semantic maps) and aggregates metrics.
pub fn evaluate(predictor: &dyn Predictor, samples: &[Sample], query: &TaskQuery, batch_size: usize) -> Result<MetricReport> {
    let mut acc = if query.task.is_scd() {
        MetricAccumulator::semantic(query.vocabulary.len())
    } else {
        MetricAccumulator::binary()
    };
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        for s in &batch {
            if s.task() != query.task {
                return Err(Error::Invalid(format!("{} sample evaluated with a {} query", s.task(), query.task)));
            }
        }
        let bundles = predictor.predict(&batch, query)?;
        for (s, b) in batch.iter().zip(&bundles) {
            let change = b.change_prediction();
            acc.add_binary(change.view(), s.gt.change_mask.view())?;
            if let (Some((p1, p2)), Some(g1), Some(g2)) = (b.semantic_prediction(), &s.gt.sem_t1, &s.gt.sem_t2) {
                let (p1, p2) = (mask_semantic(&p1, &change), mask_semantic(&p2, &change));
                acc.add_semantic((p1.view(), p2.view()), (g1.view(), g2.view()))?;
            }
        }
    }
    Ok(acc.report())
}

/// Evaluates a stored checkpoint on one split of a manifest.
pub fn evaluate_checkpoint(ckpt: &Path, manifest: &Path, split: &str) -> Result<MetricReport> {
    let model = Checkpoint::load(ckpt)?.model()?;
    let m = load_manifest(manifest)?;
    let query = TaskQuery::new(m.task, m.vocabulary.clone())?;
    evaluate(&model, &load_samples(&m, split)?, &query, 4)
}

/// Scores every `*_change.png` in `pred_dir` against the file of the same
/// name in `gt_dir`. When both directories also hold `*_sem1.png` and
/// `*_sem2.png` for every pair the report is semantic; `num_classes`
/// defaults to the largest label seen.
pub fn score_directories(pred_dir: &Path, gt_dir: &Path, num_classes: Option<usize>) -> Result<MetricReport> {
    let mut stems: Vec<String> = std::fs::read_dir(gt_dir)
        .map_err(|e| Error::io(gt_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_change.png"))
                .map(str::to_string)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Invalid(format!("no *_change.png files in {}", gt_dir.display())));
    }
    let file = |dir: &Path, stem: &str, kind: &str| dir.join(format!("{stem}_{kind}.png"));
    let semantic = stems.iter().all(|s| {
        ["sem1", "sem2"]
            .iter()
            .all(|k| file(pred_dir, s, k).is_file() && file(gt_dir, s, k).is_file())
    });
    let mut pairs = Vec::with_capacity(stems.len());
    for stem in &stems {
        let read = |dir: &Path, kind: &str| -> Result<Array2<u8>> {
            let m = read_label(&file(dir, stem, kind))?;
            if kind == "change" {
                Ok(m.mapv(|v| u8::from(v != 0)))
            } else {
                Ok(m)
            }
        };
        let (pc, gc) = (read(pred_dir, "change")?, read(gt_dir, "change")?);
        let sem = if semantic {
            Some((
                read(pred_dir, "sem1")?,
                read(pred_dir, "sem2")?,
                read(gt_dir, "sem1")?,
                read(gt_dir, "sem2")?,
            ))
        } else {
            None
        };
        pairs.push((pc, gc, sem));
    }
    let mut acc = if semantic {
        let seen = pairs
            .iter()
            .flat_map(|(_, _, s)| {
                let s = s.as_ref().expect("semantic");
                [&s.0, &s.1, &s.2, &s.3].into_iter().flat_map(|m| m.iter().copied())
            })
            .max()
            .unwrap_or(0) as usize;
        let n = num_classes.unwrap_or(seen.max(1));
        if seen > n {
            return Err(Error::LabelRange {
                value: seen as u32,
                classes: n,
                path: Some(pred_dir.to_path_buf()),
            });
        }
        MetricAccumulator::semantic(n)
    } else {
        MetricAccumulator::binary()
    };
    for (pc, gc, sem) in &pairs {
        acc.add_binary(pc.view(), gc.view())?;
        if let Some((p1, p2, g1, g2)) = sem {
            acc.add_semantic((p1.view(), p2.view()), (g1.view(), g2.view()))?;
        }
    }
    Ok(acc.report())
}

fn colourise(labels: &Array2<u8>) -> Array3<f32> {
    let (h, w) = labels.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        LABEL_PALETTE[labels[[y, x]] as usize % LABEL_PALETTE.len()][c] as f32 / 255.0
    })
}

/// Side-by-side strip of the inputs and every predicted map.
pub fn composite(img1: &Array3<f32>, img2: &Array3<f32>, change: &Array2<u8>, sem: Option<&(Array2<u8>, Array2<u8>)>) -> Array3<f32> {
    let rgb = |a: &Array3<f32>| {
        if a.dim().2 >= 3 {
            a.slice(ndarray::s![.., .., 0..3]).to_owned()
        } else {
            let g = a.index_axis(ndarray::Axis(2), 0);
            Array3::from_shape_fn((a.dim().0, a.dim().1, 3), |(y, x, _)| g[[y, x]])
        }
    };
    let mut panels = vec![rgb(img1), rgb(img2), colourise(change)];
    if let Some((a, b)) = sem {
        panels.push(colourise(a));
        panels.push(colourise(b));
    }
    let views: Vec<_> = panels.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views).expect("panels share height")
}

/// Writes `change.png` (and `sem1.png`, `sem2.png` for semantic queries,
/// `composite.png` on request) into `out`. Returns the written paths.
pub fn predict_to_dir(
    model: &ChangeModel,
    img1: &Array3<f32>,
    img2: &Array3<f32>,
    query: &TaskQuery,
    out: &Path,
    figure: bool,
) -> Result<Vec<PathBuf>> {
    let (h, w, _) = img1.dim();
    check_divisible(h, w)?;
    let bundle = model.predict_pair(img1, img2, query)?;
    let change = bundle.change_prediction();
    let mut written = vec![out.join("change.png")];
    write_label(&written[0], &change)?;
    let sem = bundle
        .semantic_prediction()
        .map(|(a, b)| (mask_semantic(&a, &change), mask_semantic(&b, &change)));
    if let Some((a, b)) = &sem {
        for (name, map) in [("sem1.png", a), ("sem2.png", b)] {
            let p = out.join(name);
            write_label(&p, map)?;
            written.push(p);
        }
    }
    if figure {
        let p = out.join("composite.png");
        write_rgb(&p, &composite(img1, img2, &change, sem.as_ref()))?;
        written.push(p);
    }
    Ok(written)
}

/// Loads a checkpoint and two PNGs and writes predicted masks.
pub fn predict_files(
    ckpt: &Path,
    t1: &Path,
    t2: &Path,
    task: TaskKind,
    classes: &[String],
    out: &Path,
    figure: bool,
) -> Result<Vec<PathBuf>> {
    let model = Checkpoint::load(ckpt)?.model()?;
    let vocab = if classes.is_empty() {
        ClassVocabulary::binary()
    } else {
        ClassVocabulary::new(classes)?
    };
    if !model.vocab().covers(&vocab) {
        return Err(Error::Invalid(format!("checkpoint vocabulary does not know classes {classes:?}")));
    }
    let query = TaskQuery::new(task, vocab)?;
    let (a, b) = (read_rgb(t1)?, read_rgb(t2)?);
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{} and {} differ in size", t1.display(), t2.display())));
    }
    predict_to_dir(&model, &a, &b, &query, out, figure)
}
