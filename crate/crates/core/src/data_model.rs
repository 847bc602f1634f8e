//! Shared domain types: image pairs, class vocabularies, ground truth and
//! predicted mask bundles, plus sample validation.

use std::fmt;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// Name of label index 0 in every semantic label map.
pub const BACKGROUND_CLASS: &str = "nochange";

/// Class name of a vocabulary that asks for any change at all.
pub const GENERIC_CHANGE_CLASS: &str = "change";

/// Spatial dimensions must be multiples of this (coarsest pyramid stride).
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Bcd,
    Scd,
}

impl TaskKind {
    pub fn is_scd(self) -> bool {
        matches!(self, TaskKind::Scd)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Bcd => "bcd",
            TaskKind::Scd => "scd",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bcd" => Ok(TaskKind::Bcd),
            "scd" => Ok(TaskKind::Scd),
            other => Err(Error::Invalid(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Ordered change classes. Label 0 is always [`BACKGROUND_CLASS`] and is not
/// stored; `classes()[k]` carries label `k + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassVocabulary {
    classes: Vec<String>,
}

impl ClassVocabulary {
    pub fn new<I, S>(classes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        if classes.is_empty() {
            return Err(Error::Invalid("vocabulary needs at least one class".into()));
        }
        for (i, name) in classes.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::Invalid("class names must be non-empty".into()));
            }
            if name.chars().any(|c| c.is_uppercase()) {
                return Err(Error::Invalid(format!("class name {name:?} must be lowercase")));
            }
            if name.chars().any(|c| matches!(c, '.' | ',' | ':' | '[' | ']' | '<' | '>')) {
                return Err(Error::Invalid(format!("class name {name:?} contains a reserved character")));
            }
            if name == BACKGROUND_CLASS {
                return Err(Error::Invalid(format!("{BACKGROUND_CLASS:?} is implicit")));
            }
            if classes[..i].contains(name) {
                return Err(Error::Invalid(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { classes })
    }

    /// Single generic "change" class.
    pub fn binary() -> Self {
        Self {
            classes: vec![GENERIC_CHANGE_CLASS.to_string()],
        }
    }

    /// Number of change classes N (excludes the background label).
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Number of label values including background (N + 1).
    pub fn num_labels(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Name of label `index`; 0 is the background.
    pub fn name(&self, index: usize) -> Option<&str> {
        match index {
            0 => Some(BACKGROUND_CLASS),
            i => self.classes.get(i - 1).map(String::as_str),
        }
    }

    pub fn names_with_background(&self) -> Vec<&str> {
        std::iter::once(BACKGROUND_CLASS)
            .chain(self.classes.iter().map(String::as_str))
            .collect()
    }

    pub fn is_generic_binary(&self) -> bool {
        self.classes.len() == 1 && self.classes[0] == GENERIC_CHANGE_CLASS
    }
}

impl TryFrom<Vec<String>> for ClassVocabulary {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassVocabulary> for Vec<String> {
    fn from(v: ClassVocabulary) -> Self {
        v.classes
    }
}

/// Dual-temporal images, each `H × W × C` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub img1: Array3<f32>,
    pub img2: Array3<f32>,
}

impl ImagePair {
    pub fn new(img1: Array3<f32>, img2: Array3<f32>) -> Result<Self> {
        if img1.dim() != img2.dim() {
            return Err(Error::Shape(format!(
                "temporal images differ: {:?} vs {:?}",
                img1.dim(),
                img2.dim()
            )));
        }
        Ok(Self { img1, img2 })
    }

    pub fn height(&self) -> usize {
        self.img1.dim().0
    }

    pub fn width(&self) -> usize {
        self.img1.dim().1
    }

    pub fn channels(&self) -> usize {
        self.img1.dim().2
    }

    pub fn swapped(&self) -> Self {
        Self {
            img1: self.img2.clone(),
            img2: self.img1.clone(),
        }
    }
}

/// Fails unless both dimensions are multiples of [`SIZE_MULTIPLE`].
pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(SIZE_MULTIPLE) || !width.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::Shape(format!(
            "image size {height}x{width} is not a positive multiple of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Binary `H × W` map, 1 = changed.
    pub change_mask: Array2<u8>,
    /// Land-cover label maps in `[0, N]`; present only for SCD samples.
    pub sem_t1: Option<Array2<u8>>,
    pub sem_t2: Option<Array2<u8>>,
}

impl GroundTruth {
    pub fn binary(change_mask: Array2<u8>) -> Self {
        Self {
            change_mask,
            sem_t1: None,
            sem_t2: None,
        }
    }

    pub fn semantic(sem_t1: Array2<u8>, sem_t2: Array2<u8>) -> Result<Self> {
        let change_mask = binarize_semantic_change(&sem_t1, &sem_t2)?;
        Ok(Self {
            change_mask,
            sem_t1: Some(sem_t1),
            sem_t2: Some(sem_t2),
        })
    }

    pub fn is_scd(&self) -> bool {
        self.sem_t1.is_some() && self.sem_t2.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pair: ImagePair,
    pub gt: GroundTruth,
    pub source_id: String,
    pub vocabulary: ClassVocabulary,
}

impl Sample {
    pub fn task(&self) -> TaskKind {
        if self.gt.is_scd() {
            TaskKind::Scd
        } else {
            TaskKind::Bcd
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskQuery {
    pub task: TaskKind,
    pub instruction: String,
    pub vocabulary: ClassVocabulary,
}

impl TaskQuery {
    /// Query with the default rendered instruction.
    pub fn new(task: TaskKind, vocabulary: ClassVocabulary) -> Result<Self> {
        if task == TaskKind::Bcd && vocabulary.len() != 1 {
            return Err(Error::Invalid(format!(
                "binary queries take exactly one class, got {}",
                vocabulary.len()
            )));
        }
        let instruction = crate::instruction_codec::render_instruction(task, &vocabulary);
        Ok(Self {
            task,
            instruction,
            vocabulary,
        })
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Result<Self> {
        let instruction = instruction.into();
        if instruction.trim().is_empty() {
            return Err(Error::Invalid("instruction must be non-empty".into()));
        }
        self.instruction = instruction;
        Ok(self)
    }

    pub fn for_sample(sample: &Sample) -> Result<Self> {
        Self::new(sample.task(), sample.vocabulary.clone())
    }
}

/// Per-sample model output as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBundle {
    /// `H × W` change logits.
    pub change_logits: Array2<f32>,
    /// `C × H × W` semantic logits (C = N + 1), SCD only.
    pub t1_logits: Option<Array3<f32>>,
    pub t2_logits: Option<Array3<f32>>,
}

impl MaskBundle {
    pub fn is_finite(&self) -> bool {
        self.change_logits.iter().all(|v| v.is_finite())
            && self
                .t1_logits
                .iter()
                .chain(self.t2_logits.iter())
                .all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn change_probability(&self) -> Array2<f32> {
        self.change_logits.mapv(|x| 1.0 / (1.0 + (-x).exp()))
    }

    /// Thresholds the change probability at 0.5.
    pub fn change_prediction(&self) -> Array2<u8> {
        self.change_logits.mapv(|x| u8::from(x > 0.0))
    }

    /// Per-temporal argmax label maps (SCD only).
    pub fn semantic_prediction(&self) -> Option<(Array2<u8>, Array2<u8>)> {
        Some((argmax_channels(self.t1_logits.as_ref()?), argmax_channels(self.t2_logits.as_ref()?)))
    }
}

fn argmax_channels(logits: &Array3<f32>) -> Array2<u8> {
    let (c, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if logits[[k, y, x]] > logits[[best, y, x]] {
                best = k;
            }
        }
        best as u8
    })
}

/// A broken sample invariant. Reported as data by [`validate_sample`].
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("temporal images differ in shape: {0:?} vs {1:?}")]
    PairShape((usize, usize, usize), (usize, usize, usize)),
    #[error("image size {0}x{1} is not a positive multiple of 32")]
    NotDivisible(usize, usize),
    #[error("image has {0} channels, expected 1 to 4")]
    Channels(usize),
    #[error("{0} pixel values outside [0, 1]")]
    PixelRange(usize),
    #[error("change mask shape {0:?} does not match image {1:?}")]
    MaskShape((usize, usize), (usize, usize)),
    #[error("change mask has {0} values other than 0 and 1")]
    MaskNotBinary(usize),
    #[error("semantic maps must be paired")]
    UnpairedSemantic,
    #[error("semantic map shape {0:?} does not match image {1:?}")]
    SemanticShape((usize, usize), (usize, usize)),
    #[error("semantic label {0} exceeds class count {1}")]
    LabelRange(u8, usize),
    #[error("unchanged pixels must keep class ({0} pixels differ)")]
    UnchangedClassDiffers(usize),
    #[error("binary vocabulary must have exactly one class, has {0}")]
    BinaryVocabulary(usize),
}

/// Checks every sample invariant and lists the ones that fail.
pub fn validate_sample(sample: &Sample) -> Vec<Violation> {
    let mut out = Vec::new();
    let (d1, d2) = (sample.pair.img1.dim(), sample.pair.img2.dim());
    if d1 != d2 {
        out.push(Violation::PairShape(d1, d2));
    }
    let (h, w, c) = d1;
    if check_divisible(h, w).is_err() {
        out.push(Violation::NotDivisible(h, w));
    }
    if !(1..=4).contains(&c) {
        out.push(Violation::Channels(c));
    }
    let bad_pixels = sample
        .pair
        .img1
        .iter()
        .chain(sample.pair.img2.iter())
        .filter(|v| !(0.0..=1.0).contains(*v))
        .count();
    if bad_pixels > 0 {
        out.push(Violation::PixelRange(bad_pixels));
    }

    let gt = &sample.gt;
    if gt.change_mask.dim() != (h, w) {
        out.push(Violation::MaskShape(gt.change_mask.dim(), (h, w)));
    }
    let not_binary = gt.change_mask.iter().filter(|&&v| v > 1).count();
    if not_binary > 0 {
        out.push(Violation::MaskNotBinary(not_binary));
    }

    let n = sample.vocabulary.len();
    match (&gt.sem_t1, &gt.sem_t2) {
        (Some(s1), Some(s2)) => {
            for s in [s1, s2] {
                if s.dim() != (h, w) {
                    out.push(Violation::SemanticShape(s.dim(), (h, w)));
                }
                if let Some(&max) = s.iter().max() {
                    if max as usize > n {
                        out.push(Violation::LabelRange(max, n));
                    }
                }
            }
            if s1.dim() == s2.dim() && s1.dim() == gt.change_mask.dim() {
                let mut differing = 0usize;
                Zip::from(&gt.change_mask).and(s1).and(s2).for_each(|&m, &a, &b| {
                    if m == 0 && a != b {
                        differing += 1;
                    }
                });
                if differing > 0 {
                    out.push(Violation::UnchangedClassDiffers(differing));
                }
            }
        }
        (None, None) => {
            if n != 1 {
                out.push(Violation::BinaryVocabulary(n));
            }
        }
        _ => out.push(Violation::UnpairedSemantic),
    }
    out
}

/// 1 where the two label maps disagree, else 0.
pub fn binarize_semantic_change(sem_t1: &Array2<u8>, sem_t2: &Array2<u8>) -> Result<Array2<u8>> {
    if sem_t1.dim() != sem_t2.dim() {
        return Err(Error::Shape(format!(
            "semantic maps differ: {:?} vs {:?}",
            sem_t1.dim(),
            sem_t2.dim()
        )));
    }
    Ok(Zip::from(sem_t1).and(sem_t2).map_collect(|&a, &b| u8::from(a != b)))
}
