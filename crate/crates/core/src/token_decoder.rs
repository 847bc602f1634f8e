//! Token driven decoder.
//!
//! The three task queries (t1, t2, change) are refined level by level against
//! the concatenated dual-temporal visual tokens, coarsest level first. Each
//! level also refines the visual tokens by attending back to the queries.
//! The refined tokens are split per temporal image, upsampled to stride 4 and
//! fused into three streams (t1, t2 and their difference), which the
//! projected queries turn into mask logits by a channel dot product.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Linear};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruction_codec::TaskEmbeddings;
use crate::nn::{gelu, resize_bilinear, sinusoidal_2d, Attention, FeedForward, Init, LayerNorm, ParamStore};
use crate::vision_encoder::FeaturePyramid;

pub const NUM_LEVELS: usize = 4;

/// Row indices of the query matrix.
pub const ROW_T1: usize = 0;
pub const ROW_T2: usize = 1;
pub const ROW_CHANGE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

/// Task queries, (B, 3, d), rows ordered (t1, t2, change).
#[derive(Clone, Debug)]
pub struct QueryState {
    pub queries: Tensor,
    pub level: usize,
}

/// Flattened tokens of one level: temporal-1 cells then temporal-2 cells,
/// each row-major. Shape (B, 2·h·w, d).
#[derive(Clone, Debug)]
pub struct VisualSequence {
    pub tokens: Tensor,
    pub height: usize,
    pub width: usize,
}

/// Stride-4 feature maps, each (B, d, H/4, W/4). The temporal streams are
/// only built for semantic queries.
#[derive(Clone, Debug)]
pub struct FusedStreams {
    pub t1: Option<Tensor>,
    pub t2: Option<Tensor>,
    pub change: Tensor,
}

#[derive(Clone, Debug)]
pub struct ProjectedTaskEmbeddings {
    /// (B, d)
    pub change: Tensor,
    /// (B, C, d) class banks; row `c` scores label `c`.
    pub t1_bank: Tensor,
    pub t2_bank: Tensor,
}

/// Mask logits for a batch.
#[derive(Clone, Debug)]
pub struct MaskTensors {
    /// (B, H, W)
    pub change: Tensor,
    /// (B, C, H, W), semantic queries only.
    pub t1: Option<Tensor>,
    pub t2: Option<Tensor>,
}

/// Broadcasts projected task embeddings (3, d) to `batch` initial queries.
pub fn init_queries(emb: &TaskEmbeddings, batch: usize) -> Result<QueryState> {
    let (rows, d) = emb.projected.dims2()?;
    if rows != 3 {
        return Err(Error::Shape(format!("expected 3 task embeddings, got {rows}")));
    }
    Ok(QueryState {
        queries: emb.projected.unsqueeze(0)?.broadcast_as((batch, 3, d))?.contiguous()?,
        level: 0,
    })
}

/// (B, d, h, w) pair into one (B, 2hw, d) sequence.
pub fn flatten_concat(f1: &Tensor, f2: &Tensor) -> Result<VisualSequence> {
    if f1.dims() != f2.dims() {
        return Err(Error::Shape(format!(
            "temporal features differ: {:?} vs {:?}",
            f1.dims(),
            f2.dims()
        )));
    }
    let (_, _, h, w) = f1.dims4()?;
    let flat = |f: &Tensor| -> Result<Tensor> { Ok(f.flatten_from(2)?.transpose(1, 2)?) };
    Ok(VisualSequence {
        tokens: Tensor::cat(&[flat(f1)?, flat(f2)?], 1)?,
        height: h,
        width: w,
    })
}

/// Inverse of [`flatten_concat`].
pub fn split_reshape(seq: &VisualSequence) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = seq.tokens.dims3()?;
    if n % 2 != 0 {
        return Err(Error::Shape(format!("odd token count {n}")));
    }
    if n != 2 * seq.height * seq.width {
        return Err(Error::Shape(format!(
            "{n} tokens do not fill two {}x{} grids",
            seq.height, seq.width
        )));
    }
    let half = n / 2;
    let unflat = |t: Tensor| -> Result<Tensor> { Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, d, seq.height, seq.width))?) };
    Ok((unflat(seq.tokens.narrow(1, 0, half)?)?, unflat(seq.tokens.narrow(1, half, half)?)?))
}

/// One refinement level: query self-attention, query→visual cross-attention
/// and a feedforward produce the new queries; visual→query cross-attention
/// then refines the tokens. Pre-norm residual blocks throughout.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_q2t_q: LayerNorm,
    ln_q2t_t: LayerNorm,
    q2t: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    ln_t2q_t: LayerNorm,
    ln_t2q_q: LayerNorm,
    t2q: Attention,
}

impl DecoderLayer {
    pub fn new(p: &mut ParamStore, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln_self: p.layer_norm(&format!("{name}.ln_self"), d)?,
            self_attn: Attention::new(p, &format!("{name}.self_attn"), d, cfg.heads)?,
            ln_q2t_q: p.layer_norm(&format!("{name}.ln_q2t_q"), d)?,
            ln_q2t_t: p.layer_norm(&format!("{name}.ln_q2t_t"), d)?,
            q2t: Attention::new(p, &format!("{name}.q2t"), d, cfg.heads)?,
            ln_ffn: p.layer_norm(&format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(p, &format!("{name}.ffn"), d, d * cfg.ffn_mult, d)?,
            ln_t2q_t: p.layer_norm(&format!("{name}.ln_t2q_t"), d)?,
            ln_t2q_q: p.layer_norm(&format!("{name}.ln_t2q_q"), d)?,
            t2q: Attention::new(p, &format!("{name}.t2q"), d, cfg.heads)?,
        })
    }

    /// `query_pe` (B, 3, d) is added to queries wherever they act as
    /// attention queries or keys. Visual tokens carry the time-stamped
    /// encoding as keys and the spatial one as queries, so a token's update
    /// does not depend on which image it came from.
    pub fn forward(
        &self,
        prev: &QueryState,
        query_pe: &Tensor,
        seq: &VisualSequence,
        token_pe: &TokenEncoding,
    ) -> Result<(QueryState, VisualSequence)> {
        let mut e = prev.queries.clone();
        let t = &seq.tokens;

        let h = self.ln_self.forward(&e)?;
        let hq = (&h + query_pe)?;
        e = (&e + self.self_attn.forward(&hq, &hq, &h, None)?)?;

        let h = self.ln_q2t_q.forward(&e)?;
        let tn = self.ln_q2t_t.forward(t)?;
        let tk = tn.broadcast_add(&token_pe.temporal)?;
        e = (&e + self.q2t.forward(&(&h + query_pe)?, &tk, &tn, None)?)?;

        e = (&e + self.ffn.forward(&self.ln_ffn.forward(&e)?)?)?;

        let tn = self.ln_t2q_t.forward(t)?;
        let en = self.ln_t2q_q.forward(&e)?;
        let refined = (t + self
            .t2q
            .forward(&tn.broadcast_add(&token_pe.spatial)?, &(&en + query_pe)?, &en, None)?)?;

        Ok((
            QueryState {
                queries: e,
                level: prev.level + 1,
            },
            VisualSequence {
                tokens: refined,
                height: seq.height,
                width: seq.width,
            },
        ))
    }
}

/// Encodings of a level's (2hw, d) token sequence: spatial plus a learned
/// per-date vector, and spatial alone.
#[derive(Clone, Debug)]
pub struct TokenEncoding {
    pub temporal: Tensor,
    pub spatial: Tensor,
}

/// Pointwise fusion of the concatenated levels: 1×1 conv, GELU, 1×1 conv.
#[derive(Clone, Debug)]
pub struct PointwiseFuse {
    inner: Conv2d,
    outer: Conv2d,
}

impl PointwiseFuse {
    pub fn new(p: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            inner: p.conv2d(&format!("{name}.inner"), c_in, c_out, 1, 1, 0)?,
            outer: p.conv2d(&format!("{name}.outer"), c_out, c_out, 1, 1, 0)?,
        })
    }
}

impl Module for PointwiseFuse {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.outer.forward(&gelu(&self.inner.forward(x)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct TokenDecoder {
    layers: Vec<DecoderLayer>,
    temporal: Tensor,
    fuse_t1: PointwiseFuse,
    fuse_t2: PointwiseFuse,
    fuse_change: PointwiseFuse,
    change_proj: Linear,
    class_head: FeedForward,
    d: usize,
}

/// Parameter name prefixes that only feed the semantic losses.
pub const SEMANTIC_ONLY_PARAMS: [&str; 3] = ["decoder.fuse_t1.", "decoder.fuse_t2.", "decoder.class_head."];

impl TokenDecoder {
    pub fn new(p: &mut ParamStore, cfg: &DecoderConfig, d_name: usize) -> Result<Self> {
        let d = cfg.d_model;
        let layers = (0..NUM_LEVELS)
            .map(|i| DecoderLayer::new(p, &format!("decoder.layers.{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            temporal: p.tensor("decoder.temporal", &[2, d], Init::Normal(0.5))?,
            fuse_t1: PointwiseFuse::new(p, "decoder.fuse_t1", NUM_LEVELS * d, d)?,
            fuse_t2: PointwiseFuse::new(p, "decoder.fuse_t2", NUM_LEVELS * d, d)?,
            fuse_change: PointwiseFuse::new(p, "decoder.fuse_change", NUM_LEVELS * d, d)?,
            change_proj: p.linear("decoder.change_proj", d, d)?,
            class_head: FeedForward::new(p, "decoder.class_head", d + d_name, d, d)?,
            d,
        })
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn layer(&self, i: usize) -> &DecoderLayer {
        &self.layers[i]
    }

    /// Positional encodings for both halves of a level's token sequence.
    pub fn token_encoding(&self, h: usize, w: usize, dtype: DType, device: &Device) -> Result<TokenEncoding> {
        let pe = sinusoidal_2d(h, w, self.d, dtype, device)?;
        let first = pe.broadcast_add(&self.temporal.get(0)?)?;
        let second = pe.broadcast_add(&self.temporal.get(1)?)?;
        Ok(TokenEncoding {
            temporal: Tensor::cat(&[first, second], 0)?,
            spatial: Tensor::cat(&[&pe, &pe], 0)?,
        })
    }

    /// Threads the queries through all levels, coarsest first.
    pub fn refine_all(&self, p1: &FeaturePyramid, p2: &FeaturePyramid, e0: &QueryState) -> Result<(QueryState, Vec<VisualSequence>)> {
        if p1.levels.len() != NUM_LEVELS || p2.levels.len() != NUM_LEVELS {
            return Err(Error::Shape(format!(
                "expected {NUM_LEVELS} pyramid levels, got {} and {}",
                p1.levels.len(),
                p2.levels.len()
            )));
        }
        let mut e = e0.clone();
        let mut refined = Vec::with_capacity(NUM_LEVELS);
        for (i, layer) in self.layers.iter().enumerate() {
            let seq = flatten_concat(&p1.levels[i], &p2.levels[i])?;
            let pe = self.token_encoding(seq.height, seq.width, seq.tokens.dtype(), seq.tokens.device())?;
            let (next, t_hat) = layer.forward(&e, &e0.queries, &seq, &pe)?;
            e = next;
            refined.push(t_hat);
        }
        Ok((e, refined))
    }

    /// Upsamples every level to the finest grid and concatenates along
    /// channels: (B, 4d, H/4, W/4).
    pub fn stack_levels(maps: &[Tensor]) -> Result<Tensor> {
        if maps.len() != NUM_LEVELS {
            return Err(Error::Shape(format!("expected {NUM_LEVELS} levels, got {}", maps.len())));
        }
        let (_, _, h, w) = maps[NUM_LEVELS - 1].dims4()?;
        let up = maps
            .iter()
            .map(|m| resize_bilinear(m, h, w))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&up, 1)?)
    }

    /// Stacks the t1, t2 and difference levels and fuses each stack with
    /// its own pointwise fuse.
    pub fn fuse_streams(&self, f1: &[Tensor], f2: &[Tensor], semantic: bool) -> Result<FusedStreams> {
        if f1.len() != f2.len() {
            return Err(Error::Shape(format!("{} vs {} levels", f1.len(), f2.len())));
        }
        let diffs = f1.iter().zip(f2).map(|(a, b)| a - b).collect::<candle_core::Result<Vec<_>>>()?;
        let change = self.fuse_change.forward(&Self::stack_levels(&diffs)?)?;
        let (t1, t2) = if semantic {
            (
                Some(self.fuse_t1.forward(&Self::stack_levels(f1)?)?),
                Some(self.fuse_t2.forward(&Self::stack_levels(f2)?)?),
            )
        } else {
            (None, None)
        };
        Ok(FusedStreams { t1, t2, change })
    }

    /// Change embedding from the change row; class banks from the temporal
    /// rows each concatenated with every class-name embedding (C, d_name).
    pub fn split_project(&self, e4: &QueryState, class_names: &Tensor) -> Result<ProjectedTaskEmbeddings> {
        let (b, rows, d) = e4.queries.dims3()?;
        if rows != 3 {
            return Err(Error::Shape(format!("expected 3 query rows, got {rows}")));
        }
        let (c, dn) = class_names.dims2()?;
        if c == 0 {
            return Err(Error::Shape("empty class bank".into()));
        }
        let row = |i: usize| e4.queries.narrow(1, i, 1);
        let change = self.change_proj.forward(&row(ROW_CHANGE)?.squeeze(1)?)?;
        let names = class_names.unsqueeze(0)?.broadcast_as((b, c, dn))?;
        let bank = |i: usize| -> Result<Tensor> {
            let q = row(i)?.broadcast_as((b, c, d))?;
            Ok(self.class_head.forward(&Tensor::cat(&[&q, &names], 2)?)?)
        };
        Ok(ProjectedTaskEmbeddings {
            change,
            t1_bank: bank(ROW_T1)?,
            t2_bank: bank(ROW_T2)?,
        })
    }
}

/// Channel dot products of streams with their embeddings, upsampled to
/// `out_size`. Semantic logits are produced only when the temporal streams
/// exist.
pub fn generate_masks(streams: &FusedStreams, proj: &ProjectedTaskEmbeddings, out_size: (usize, usize)) -> Result<MaskTensors> {
    let (b, d, h, w) = streams.change.dims4()?;
    let (out_h, out_w) = out_size;
    let score = |feat: &Tensor, emb: &Tensor| -> Result<Tensor> {
        // emb: (B, k, d) against feat (B, d, h, w) -> (B, k, out_h, out_w)
        let k = emb.dim(1)?;
        let logits = emb.matmul(&feat.reshape((b, d, h * w))?)?.reshape((b, k, h, w))?;
        Ok(resize_bilinear(&logits, out_h, out_w)?)
    };
    let change = score(&streams.change, &proj.change.unsqueeze(1)?)?.squeeze(1)?;
    let t1 = streams.t1.as_ref().map(|f| score(f, &proj.t1_bank)).transpose()?;
    let t2 = streams.t2.as_ref().map(|f| score(f, &proj.t2_bank)).transpose()?;
    Ok(MaskTensors { change, t1, t2 })
}
