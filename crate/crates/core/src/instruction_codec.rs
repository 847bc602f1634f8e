//! Language side of the model: instruction templates, a word-level token
//! vocabulary with the three task tokens, a small causal transformer that
//! generates the response, and extraction of task-token hidden states.

use std::collections::BTreeMap;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Embedding, Linear};
use serde::{Deserialize, Serialize};

use crate::data_model::{ClassVocabulary, TaskKind, BACKGROUND_CLASS, GENERIC_CHANGE_CLASS};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, log_softmax, Attention, FeedForward, Init, LayerNorm, ParamStore};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const T1: &str = "[T1]";
pub const T2: &str = "[T2]";
pub const CHANGE: &str = "[CHANGE]";

/// Fixed ids, stable across save/load.
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const T1_ID: u32 = 4;
pub const T2_ID: u32 = 5;
pub const CHANGE_ID: u32 = 6;

const SPECIALS: [&str; 7] = [PAD, BOS, EOS, UNK, T1, T2, CHANGE];

/// Task tokens in query-row order.
pub const TASK_TOKEN_IDS: [u32; 3] = [T1_ID, T2_ID, CHANGE_ID];

const TEMPLATE_WORDS: &[&str] = &[
    "please",
    "segment",
    "all",
    "areas",
    "that",
    "have",
    "undergone",
    "the",
    "semantic",
    "masks",
    "of",
    "changed",
    "classes",
    "mask",
    "is",
    "are",
    "and",
    ".",
    ",",
    ":",
    BACKGROUND_CLASS,
    GENERIC_CHANGE_CLASS,
];

/// Default instruction for a task. Binary queries naming a specific class
/// append it so that sources with different positive classes get different
/// prompts.
pub fn render_instruction(task: TaskKind, vocabulary: &ClassVocabulary) -> String {
    let classes = vocabulary.classes().join(", ");
    match task {
        TaskKind::Bcd if vocabulary.is_generic_binary() => "please segment all areas that have undergone change.".to_string(),
        TaskKind::Bcd => format!("please segment all areas that have undergone change. classes: {classes}."),
        TaskKind::Scd => format!("please segment the semantic masks of the changed areas. classes: {classes}."),
    }
}

/// Ground-truth response used for teacher forcing.
pub fn render_target_response(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Bcd => "the change mask is [CHANGE].",
        TaskKind::Scd => "the semantic masks are [T1] [T2] and the change mask is [CHANGE].",
    }
}

/// Lowercases and splits on whitespace, with `. , :` as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if matches!(ch, '.' | ',' | ':') {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out.into_iter()
        .map(|t| match t.as_str() {
            "[t1]" => T1.to_string(),
            "[t2]" => T2.to_string(),
            "[change]" => CHANGE.to_string(),
            _ => t,
        })
        .collect()
}

/// Closed word-level vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl TokenVocabulary {
    /// Specials, template words, then every word of the given class names.
    pub fn new<'a>(class_vocabularies: impl IntoIterator<Item = &'a ClassVocabulary>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: BTreeMap::new(),
        };
        for t in SPECIALS.iter().chain(TEMPLATE_WORDS) {
            v.push(t);
        }
        for cv in class_vocabularies {
            for name in cv.classes() {
                for w in tokenize(name) {
                    v.push(&w);
                }
            }
        }
        v
    }

    fn push(&mut self, token: &str) {
        if !self.ids.contains_key(token) {
            self.ids.insert(token.to_string(), self.tokens.len() as u32);
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Token ids of `text`; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        tokenize(text)
            .into_iter()
            .map(|t| self.id(&t).ok_or(Error::UnknownToken(t)))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }

    /// True when every class name can be encoded.
    pub fn covers(&self, vocabulary: &ClassVocabulary) -> bool {
        vocabulary.classes().iter().all(|c| self.encode(c).is_ok())
    }

    pub fn to_map(&self) -> BTreeMap<String, u32> {
        self.ids.clone()
    }

    pub fn from_map(map: &BTreeMap<String, u32>) -> Result<Self> {
        let mut tokens = vec![String::new(); map.len()];
        for (t, &i) in map {
            let slot = tokens
                .get_mut(i as usize)
                .ok_or_else(|| Error::Invalid(format!("token id {i} out of range")))?;
            if !slot.is_empty() {
                return Err(Error::Invalid(format!("token id {i} used twice")));
            }
            *slot = t.clone();
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Invalid(format!("special token {s} must have id {i}")));
            }
        }
        Ok(Self { tokens, ids: map.clone() })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_map())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_map(&serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            max_len: 64,
            ffn_mult: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct LmBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// Small causal transformer standing in for the multimodal language model.
#[derive(Clone, Debug)]
pub struct StubLm {
    tokens: Embedding,
    positions: Tensor,
    blocks: Vec<LmBlock>,
    ln_f: LayerNorm,
    head: Linear,
    cfg: LmConfig,
    vocab_size: usize,
}

/// Output of one forward pass over token positions.
pub struct LmOutput {
    /// Last-layer hidden states, (n, d_model).
    pub hidden: Tensor,
    /// Next-token logits, (n, vocab).
    pub logits: Tensor,
}

impl StubLm {
    pub fn new(p: &mut ParamStore, cfg: &LmConfig, vocab_size: usize) -> Result<Self> {
        let d = cfg.d_model;
        let blocks = (0..cfg.layers)
            .map(|i| {
                Ok(LmBlock {
                    ln1: p.layer_norm(&format!("lm.blocks.{i}.ln1"), d)?,
                    attn: Attention::new(p, &format!("lm.blocks.{i}.attn"), d, cfg.heads)?,
                    ln2: p.layer_norm(&format!("lm.blocks.{i}.ln2"), d)?,
                    ffn: FeedForward::new(p, &format!("lm.blocks.{i}.ffn"), d, d * cfg.ffn_mult, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tokens: p.embedding("lm.tokens", vocab_size, d, 0.5)?,
            positions: p.tensor("lm.positions", &[cfg.max_len, d], Init::Normal(0.1))?,
            blocks,
            ln_f: p.layer_norm("lm.ln_f", d)?,
            head: p.linear("lm.head", d, vocab_size)?,
            cfg: cfg.clone(),
            vocab_size,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dtype(&self) -> DType {
        self.positions.dtype()
    }

    /// Runs the causal stack over `ids`, optionally preceded by `prefix`
    /// context vectors (k, d_model). Outputs cover only the token positions.
    pub fn forward(&self, ids: &[u32], prefix: Option<&Tensor>) -> Result<LmOutput> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        let k = prefix.map(|p| p.dim(0)).transpose()?.unwrap_or(0);
        let n = ids.len() + k;
        if n > self.cfg.max_len {
            return Err(Error::Invalid(format!(
                "sequence of {n} exceeds maximum length {}",
                self.cfg.max_len
            )));
        }
        let dev = self.positions.device();
        let id_t = Tensor::new(ids, dev)?;
        let mut x = self.tokens.forward(&id_t)?;
        if let Some(p) = prefix {
            x = Tensor::cat(&[&p.to_dtype(x.dtype())?, &x], 0)?;
        }
        x = (x + self.positions.narrow(0, 0, n)?)?.unsqueeze(0)?;
        let mask = causal_mask(n, x.dtype(), dev)?;
        for b in &self.blocks {
            let h = b.ln1.forward(&x)?;
            x = (&x + b.attn.forward(&h, &h, &h, Some(&mask))?)?;
            x = (&x + b.ffn.forward(&b.ln2.forward(&x)?)?)?;
        }
        let hidden = self.ln_f.forward(&x)?.squeeze(0)?.narrow(0, k, ids.len())?;
        let logits = self.head.forward(&hidden)?;
        Ok(LmOutput { hidden, logits })
    }

    /// Greedy decoding after `prompt`. Returns at most `max_len` new tokens,
    /// stopping before EOS.
    pub fn generate(&self, prompt: &[u32], max_len: usize) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Invalid("empty prompt".into()));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len && seq.len() < self.cfg.max_len {
            let logits = self.forward(&seq, None)?.logits;
            let last = logits.get(seq.len() - 1)?;
            let next = last.argmax(D::Minus1)?.to_scalar::<u32>()?;
            if next == EOS_ID {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// Mean token embedding of each name, (names, d_model).
    pub fn name_embeddings(&self, names: &[Vec<u32>]) -> Result<Tensor> {
        let rows = names
            .iter()
            .map(|ids| {
                let t = Tensor::new(ids.as_slice(), self.positions.device())?;
                Ok(self.tokens.forward(&t)?.mean(0)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }
}

/// Mean next-token cross-entropy of `target` given `prompt`, computed from
/// logits over the concatenated sequence.
pub fn next_token_loss(logits: &Tensor, prompt_len: usize, target: &[u32]) -> Result<Tensor> {
    if target.is_empty() {
        return Err(Error::Invalid("empty target".into()));
    }
    let preds = logits.narrow(0, prompt_len - 1, target.len())?;
    let logp = log_softmax(&preds, 1)?;
    let idx = Tensor::new(target, logits.device())?.unsqueeze(1)?;
    let picked = logp.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Mean cross-entropy over target positions only; `target` should end in EOS.
pub fn lm_loss(lm: &StubLm, prompt: &[u32], target: &[u32]) -> Result<Tensor> {
    let seq: Vec<u32> = prompt.iter().chain(target).copied().collect();
    let out = lm.forward(&seq, None)?;
    next_token_loss(&out.logits, prompt.len(), target)
}

/// MLP mapping task-token hidden states into the decoder width, plus the
/// learned fallback queries used when a token is absent.
#[derive(Clone, Debug)]
pub struct TaskProjector {
    mlp: FeedForward,
    defaults: Tensor,
    d_out: usize,
}

impl TaskProjector {
    pub fn new(p: &mut ParamStore, d_lm: usize, d_dec: usize) -> Result<Self> {
        Ok(Self {
            mlp: FeedForward::new(p, "projector.mlp", d_lm, d_lm, d_dec)?,
            defaults: p.tensor("projector.defaults", &[3, d_dec], Init::Normal(0.5))?,
            d_out: d_dec,
        })
    }

    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        Ok(self.mlp.forward(h)?)
    }

    pub fn width(&self) -> usize {
        self.d_out
    }

    pub fn default_query(&self, row: usize) -> Result<Tensor> {
        Ok(self.defaults.get(row)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractionMode {
    /// Response is the rendered target (training).
    TeacherForced,
    /// Response was produced by greedy generation (inference).
    Generated,
}

/// Task-token embeddings in row order (t1, t2, change).
#[derive(Clone, Debug)]
pub struct TaskEmbeddings {
    /// Raw last-layer hidden states, (d_lm), where the token occurred.
    pub raw: [Option<Tensor>; 3],
    /// Projected queries, (3, d_dec); absent rows hold the fallback query.
    pub projected: Tensor,
    pub present: [bool; 3],
}

impl TaskEmbeddings {
    pub fn any_present(&self) -> bool {
        self.present.iter().any(|&p| p)
    }
}

/// Which task tokens a query consumes.
pub fn required_tokens(task: TaskKind) -> [bool; 3] {
    match task {
        TaskKind::Bcd => [false, false, true],
        TaskKind::Scd => [true, true, true],
    }
}

/// Result of encoding one query.
pub struct EncodedQuery {
    pub embeddings: TaskEmbeddings,
    /// Response tokens (without EOS).
    pub response: Vec<u32>,
    /// Next-token loss over the response; teacher-forced mode only.
    pub txt_loss: Option<Tensor>,
}

/// Prompt ids: BOS followed by the instruction.
pub fn prompt_ids(vocab: &TokenVocabulary, instruction: &str) -> Result<Vec<u32>> {
    let mut ids = vec![BOS_ID];
    ids.extend(vocab.encode(instruction)?);
    Ok(ids)
}

/// Hidden states at the first occurrence of each task token in `response`,
/// projected; tokens the task does not use, or that are missing, fall back
/// to the learned default query and are flagged absent.
pub fn extract_task_embeddings(
    hidden: &Tensor,
    prompt_len: usize,
    response: &[u32],
    task: TaskKind,
    projector: &TaskProjector,
) -> Result<TaskEmbeddings> {
    let wanted = required_tokens(task);
    let mut raw: [Option<Tensor>; 3] = [None, None, None];
    let mut present = [false; 3];
    let mut rows = Vec::with_capacity(3);
    for (row, &tok) in TASK_TOKEN_IDS.iter().enumerate() {
        let pos = response.iter().position(|&t| t == tok).filter(|_| wanted[row]);
        match pos {
            Some(pos) => {
                let h = hidden.get(prompt_len + pos)?;
                rows.push(projector.project(&h.unsqueeze(0)?)?.squeeze(0)?);
                raw[row] = Some(h);
                present[row] = true;
            }
            None => rows.push(projector.default_query(row)?),
        }
    }
    Ok(TaskEmbeddings {
        raw,
        projected: Tensor::stack(&rows, 0)?,
        present,
    })
}

/// Runs the language stand-in for one query. Teacher-forced mode scores the
/// rendered target and extracts from it in the same pass; generated mode
/// decodes greedily first.
pub fn encode_query(
    lm: &StubLm,
    projector: &TaskProjector,
    vocab: &TokenVocabulary,
    task: TaskKind,
    instruction: &str,
    mode: ExtractionMode,
    max_response: usize,
) -> Result<EncodedQuery> {
    let prompt = prompt_ids(vocab, instruction)?;
    match mode {
        ExtractionMode::TeacherForced => {
            let response = vocab.encode(render_target_response(task))?;
            let mut seq = prompt.clone();
            seq.extend(&response);
            seq.push(EOS_ID);
            let out = lm.forward(&seq, None)?;
            let target: Vec<u32> = seq[prompt.len()..].to_vec();
            let txt_loss = next_token_loss(&out.logits, prompt.len(), &target)?;
            let embeddings = extract_task_embeddings(&out.hidden, prompt.len(), &response, task, projector)?;
            Ok(EncodedQuery {
                embeddings,
                response,
                txt_loss: Some(txt_loss),
            })
        }
        ExtractionMode::Generated => {
            let response = lm.generate(&prompt, max_response)?;
            let mut seq = prompt.clone();
            seq.extend(&response);
            let out = lm.forward(&seq, None)?;
            let embeddings = extract_task_embeddings(&out.hidden, prompt.len(), &response, task, projector)?;
            Ok(EncodedQuery {
                embeddings,
                response,
                txt_loss: None,
            })
        }
    }
}

/// Name-embedding rows for labels `0..=N`: background first, then classes.
pub fn class_name_ids(vocab: &TokenVocabulary, classes: &ClassVocabulary) -> Result<Vec<Vec<u32>>> {
    classes.names_with_background().into_iter().map(|n| vocab.encode(n)).collect()
}
