//! The assembled model: language stand-in, vision encoder and token decoder.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data_model::{MaskBundle, Sample, TaskKind, TaskQuery};
use crate::error::{Error, Result};
use crate::instruction_codec::{
    class_name_ids, encode_query, EncodedQuery, ExtractionMode, LmConfig, StubLm, TaskProjector, TokenVocabulary,
};
use crate::losses::{mask_loss, total_loss, LossReport, LossWeights, Targets};
use crate::nn::ParamStore;
use crate::token_decoder::{generate_masks, init_queries, DecoderConfig, FusedStreams, MaskTensors, TokenDecoder};
use crate::vision_encoder::{BackboneConfig, VisionEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    /// Token budget for greedy generation at inference.
    pub max_response: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            max_response: 24,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone.out_channels != self.decoder.d_model {
            return Err(Error::Config(format!(
                "backbone width {} must equal decoder width {}",
                self.backbone.out_channels, self.decoder.d_model
            )));
        }
        if !self.decoder.d_model.is_multiple_of(4) || !self.decoder.d_model.is_multiple_of(self.decoder.heads) {
            return Err(Error::Config(format!(
                "decoder width {} must be divisible by 4 and by {} heads",
                self.decoder.d_model, self.decoder.heads
            )));
        }
        if !self.lm.d_model.is_multiple_of(self.lm.heads) {
            return Err(Error::Config("language width not divisible by heads".into()));
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
pub struct ForwardOutput {
    pub masks: MaskTensors,
    pub streams: FusedStreams,
    pub query: EncodedQuery,
}

#[derive(Debug)]
pub struct ChangeModel {
    params: ParamStore,
    vocab: TokenVocabulary,
    lm: StubLm,
    projector: TaskProjector,
    encoder: VisionEncoder,
    decoder: TokenDecoder,
    cfg: ModelConfig,
}

/// Stacks H×W×C images into a (B, C, H, W) tensor.
pub fn images_to_tensor(images: &[&Array3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let dims = first.dim();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.dim() != dims {
            return Err(Error::Shape(format!("batch images differ: {:?} vs {:?}", img.dim(), dims)));
        }
        data.extend(img.iter().copied());
    }
    let (h, w, c) = dims;
    Ok(Tensor::from_vec(data, (images.len(), h, w, c), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?)
}

fn labels_to_tensor(maps: &[&Array2<u8>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = maps[0].dim();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dim() != (h, w) {
            return Err(Error::Shape("batch masks differ in size".into()));
        }
        data.extend(m.iter().map(|&v| v as u32));
    }
    Ok(Tensor::from_vec(data, (maps.len(), h, w), device)?.to_dtype(dtype)?)
}

/// Ground truth of a batch as loss targets.
pub fn targets(batch: &[&Sample], dtype: DType, device: &Device) -> Result<Targets> {
    let change: Vec<_> = batch.iter().map(|s| &s.gt.change_mask).collect();
    let sem = |pick: fn(&Sample) -> Option<&Array2<u8>>| -> Result<Option<Tensor>> {
        let maps: Option<Vec<_>> = batch.iter().map(|s| pick(s)).collect();
        maps.map(|m| labels_to_tensor(&m, DType::U32, device)).transpose()
    };
    Ok(Targets {
        change: labels_to_tensor(&change, dtype, device)?,
        sem_t1: sem(|s| s.gt.sem_t1.as_ref())?,
        sem_t2: sem(|s| s.gt.sem_t2.as_ref())?,
    })
}

fn to_array2(t: &Tensor) -> Result<Array2<f32>> {
    let (h, w) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec((h, w), v).map_err(|e| Error::Shape(e.to_string()))
}

fn to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::Shape(e.to_string()))
}

/// Splits batched logits into per-sample bundles.
pub fn bundles(masks: &MaskTensors) -> Result<Vec<MaskBundle>> {
    let b = masks.change.dim(0)?;
    (0..b)
        .map(|i| {
            Ok(MaskBundle {
                change_logits: to_array2(&masks.change.get(i)?)?,
                t1_logits: masks.t1.as_ref().map(|t| to_array3(&t.get(i)?)).transpose()?,
                t2_logits: masks.t2.as_ref().map(|t| to_array3(&t.get(i)?)).transpose()?,
            })
        })
        .collect()
}

impl ChangeModel {
    pub fn new(cfg: &ModelConfig, vocab: TokenVocabulary, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new(seed, dtype);
        let lm = StubLm::new(&mut p, &cfg.lm, vocab.len())?;
        let projector = TaskProjector::new(&mut p, cfg.lm.d_model, cfg.decoder.d_model)?;
        let encoder = VisionEncoder::new(&mut p, &cfg.backbone)?;
        let decoder = TokenDecoder::new(&mut p, &cfg.decoder, cfg.lm.d_model)?;
        Ok(Self {
            params: p,
            vocab,
            lm,
            projector,
            encoder,
            decoder,
            cfg: cfg.clone(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vocab(&self) -> &TokenVocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn lm(&self) -> &StubLm {
        &self.lm
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn encode_query(&self, query: &TaskQuery, mode: ExtractionMode) -> Result<EncodedQuery> {
        encode_query(
            &self.lm,
            &self.projector,
            &self.vocab,
            query.task,
            &query.instruction,
            mode,
            self.cfg.max_response,
        )
    }

    /// Greedy response text for a query.
    pub fn respond(&self, query: &TaskQuery) -> Result<Vec<u32>> {
        Ok(self.encode_query(query, ExtractionMode::Generated)?.response)
    }

    /// Full pipeline on (B, C, H, W) image batches.
    pub fn forward_tensors(&self, img1: &Tensor, img2: &Tensor, query: &TaskQuery, mode: ExtractionMode) -> Result<ForwardOutput> {
        let (b, _, h, w) = img1.dims4()?;
        let encoded = self.encode_query(query, mode)?;
        let e0 = init_queries(&encoded.embeddings, b)?;
        let (p1, p2) = self.encoder.encode_pair(img1, img2)?;
        let (e4, refined) = self.decoder.refine_all(&p1, &p2, &e0)?;
        let mut f1 = Vec::with_capacity(refined.len());
        let mut f2 = Vec::with_capacity(refined.len());
        for seq in &refined {
            let (a, c) = crate::token_decoder::split_reshape(seq)?;
            f1.push(a);
            f2.push(c);
        }
        let semantic = query.task.is_scd();
        let streams = self.decoder.fuse_streams(&f1, &f2, semantic)?;
        let names = self.lm.name_embeddings(&class_name_ids(&self.vocab, &query.vocabulary)?)?;
        let proj = self.decoder.split_project(&e4, &names)?;
        let masks = generate_masks(&streams, &proj, (h, w))?;
        Ok(ForwardOutput {
            masks,
            streams,
            query: encoded,
        })
    }

    fn check_batch(batch: &[&Sample], query: &TaskQuery) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        for s in batch {
            if s.task() != query.task {
                return Err(Error::Invalid(format!(
                    "sample from {} is {} but the query is {}",
                    s.source_id,
                    s.task(),
                    query.task
                )));
            }
            if query.task == TaskKind::Scd && s.vocabulary.num_labels() != query.vocabulary.num_labels() {
                return Err(Error::Invalid(format!(
                    "sample vocabulary has {} labels, query has {}",
                    s.vocabulary.num_labels(),
                    query.vocabulary.num_labels()
                )));
            }
        }
        Ok(())
    }

    fn batch_images(&self, batch: &[&Sample]) -> Result<(Tensor, Tensor)> {
        let i1: Vec<_> = batch.iter().map(|s| &s.pair.img1).collect();
        let i2: Vec<_> = batch.iter().map(|s| &s.pair.img2).collect();
        Ok((
            images_to_tensor(&i1, self.dtype(), self.device())?,
            images_to_tensor(&i2, self.dtype(), self.device())?,
        ))
    }

    /// Teacher-forced training loss of one batch sharing `query`.
    pub fn loss(&self, batch: &[&Sample], query: &TaskQuery, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
        Self::check_batch(batch, query)?;
        let (img1, img2) = self.batch_images(batch)?;
        let out = self.forward_tensors(&img1, &img2, query, ExtractionMode::TeacherForced)?;
        let tg = targets(batch, self.dtype(), self.device())?;
        let ml = mask_loss(&out.masks, &tg, &out.streams, weights, query.task.is_scd())?;
        let txt = out
            .query
            .txt_loss
            .ok_or_else(|| Error::Invalid("teacher forcing produced no text loss".into()))?;
        total_loss(&txt, &ml, weights)
    }

    /// Inference on a batch of samples; the response is generated greedily.
    pub fn predict_batch(&self, batch: &[&Sample], query: &TaskQuery) -> Result<Vec<MaskBundle>> {
        Self::check_batch(batch, query)?;
        let (img1, img2) = self.batch_images(batch)?;
        let out = self.forward_tensors(&img1, &img2, query, ExtractionMode::Generated)?;
        bundles(&out.masks)
    }

    /// Inference on a bare image pair.
    pub fn predict_pair(&self, img1: &Array3<f32>, img2: &Array3<f32>, query: &TaskQuery) -> Result<MaskBundle> {
        let t1 = images_to_tensor(&[img1], self.dtype(), self.device())?;
        let t2 = images_to_tensor(&[img2], self.dtype(), self.device())?;
        let out = self.forward_tensors(&t1, &t2, query, ExtractionMode::Generated)?;
        Ok(bundles(&out.masks)?.remove(0))
    }
}
