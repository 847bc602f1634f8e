//! Pixel-level scores for binary and semantic change detection.
//!
//! Binary scores come from a TP/FP/FN/TN tally. Semantic scores come from a
//! confusion matrix `Q` where `q[i][j]` counts pixels predicted as class `i`
//! whose ground truth is class `j`, and label 0 means "no change".

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl BinaryCounts {
    /// Tallies a binary prediction against binary ground truth.
    pub fn tally(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
        }
        let mut c = Self::default();
        Zip::from(pred).and(gt).for_each(|&p, &g| match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        });
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcdScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision, recall, F1 and IoU of the change class.
///
/// A prediction with no positives scored against ground truth with no
/// positives is a perfect agreement and scores 1 on every metric; any other
/// vanishing denominator scores 0.
pub fn bcd_metrics(c: &BinaryCounts) -> BcdScores {
    if c.tp + c.fp + c.fn_ == 0 {
        return BcdScores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            iou: 1.0,
        };
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    BcdScores {
        precision,
        recall,
        f1: harmonic(precision, recall),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
    }
}

/// `(N+1) × (N+1)` confusion matrix, rows = prediction, columns = truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScdConfusion {
    n: usize,
    q: Vec<u64>,
}

impl ScdConfusion {
    /// Empty matrix for `n` change classes.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            q: vec![0; (n + 1) * (n + 1)],
        }
    }

    /// Builds a matrix from explicit rows.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k < 2 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square with N >= 1".into()));
        }
        Ok(Self {
            n: k - 1,
            q: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, pred: usize, truth: usize) -> u64 {
        self.q[pred * (self.n + 1) + truth]
    }

    fn add(&mut self, pred: usize, truth: usize, count: u64) {
        let k = self.n + 1;
        self.q[pred * k + truth] += count;
    }

    pub fn total(&self) -> u64 {
        self.q.iter().sum()
    }

    /// Adds one label map pair; labels above `N` are an error.
    pub fn accumulate(&mut self, pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
        }
        let n = self.n;
        let out_of_range = pred.iter().chain(gt.iter()).copied().find(|&v| v as usize > n);
        if let Some(value) = out_of_range {
            return Err(Error::LabelRange {
                value: value as u32,
                classes: n,
                path: None,
            });
        }
        Zip::from(pred).and(gt).for_each(|&p, &g| self.add(p as usize, g as usize, 1));
        Ok(())
    }

    /// Adds counts of another matrix of the same size.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape(format!("cannot merge {} and {} class matrices", self.n, other.n)));
        }
        for (a, b) in self.q.iter_mut().zip(&other.q) {
            *a += b;
        }
        Ok(())
    }

    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            n: self.n,
            q: self.q.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Confusion over both temporal maps of a pair.
pub fn scd_confusion(
    pred_t1: ArrayView2<'_, u8>,
    pred_t2: ArrayView2<'_, u8>,
    gt_t1: ArrayView2<'_, u8>,
    gt_t2: ArrayView2<'_, u8>,
    n: usize,
) -> Result<ScdConfusion> {
    let mut q = ScdConfusion::new(n);
    q.accumulate(pred_t1, gt_t1)?;
    q.accumulate(pred_t2, gt_t2)?;
    Ok(q)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouScores {
    pub iou_nc: f64,
    pub iou_c: f64,
    pub miou: f64,
}

pub fn miou(q: &ScdConfusion) -> MiouScores {
    let k = q.n + 1;
    let q00 = q.get(0, 0);
    let row0: u64 = (0..k).map(|j| q.get(0, j)).sum();
    let col0: u64 = (0..k).map(|i| q.get(i, 0)).sum();
    let iou_nc = ratio(q00, row0 + col0 - q00);
    let change_block: u64 = (1..k).flat_map(|i| (1..k).map(move |j| (i, j))).map(|(i, j)| q.get(i, j)).sum();
    let iou_c = ratio(change_block, q.total() - q00);
    MiouScores {
        iou_nc,
        iou_c,
        miou: (iou_nc + iou_c) / 2.0,
    }
}

/// Separated kappa: kappa over the matrix with `q[0][0]` zeroed, scaled by
/// `exp(IoU_c - 1)`.
///
/// An all-zero reduced matrix scores 0. When the expected agreement is 1 the
/// kappa is 1 for perfect observed agreement and 0 otherwise.
pub fn sek(q: &ScdConfusion) -> f64 {
    let k = q.n + 1;
    let hat = |i: usize, j: usize| if i == 0 && j == 0 { 0 } else { q.get(i, j) };
    let total: u64 = q.total() - q.get(0, 0);
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let diag: u64 = (0..k).map(|i| hat(i, i)).sum();
    let rho = diag as f64 / total;
    let eta: f64 = (0..k)
        .map(|i| {
            let row: u64 = (0..k).map(|j| hat(i, j)).sum();
            let col: u64 = (0..k).map(|j| hat(j, i)).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (total * total);
    let kappa = if eta >= 1.0 {
        if rho >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (rho - eta) / (1.0 - eta)
    };
    (miou(q).iou_c - 1.0).exp() * kappa
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FscdScores {
    pub precision: f64,
    pub recall: f64,
    pub f_scd: f64,
}

pub fn f_scd(q: &ScdConfusion) -> FscdScores {
    let k = q.n + 1;
    let hits: u64 = (1..k).map(|i| q.get(i, i)).sum();
    let predicted: u64 = (1..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| q.get(i, j)).sum();
    let actual: u64 = (0..k).flat_map(|i| (1..k).map(move |j| (i, j))).map(|(i, j)| q.get(i, j)).sum();
    let precision = ratio(hits, predicted);
    let recall = ratio(hits, actual);
    FscdScores {
        precision,
        recall,
        f_scd: harmonic(precision, recall),
    }
}

/// Metric report in the JSON layout shared by `eval` and `metrics`.
///
/// For semantic tasks `IoU` carries `IoU_c` and `P`/`R`/`F1` score the
/// binarized change map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "IoU")]
    pub iou: f64,
    #[serde(rename = "mIoU")]
    pub miou: Option<f64>,
    #[serde(rename = "SeK")]
    pub sek: Option<f64>,
    #[serde(rename = "F_scd")]
    pub f_scd: Option<f64>,
    #[serde(rename = "IoU_nc")]
    pub iou_nc: Option<f64>,
    #[serde(rename = "IoU_c")]
    pub iou_c: Option<f64>,
}

impl MetricReport {
    pub fn binary(counts: &BinaryCounts) -> Self {
        let s = bcd_metrics(counts);
        Self {
            p: s.precision,
            r: s.recall,
            f1: s.f1,
            iou: s.iou,
            miou: None,
            sek: None,
            f_scd: None,
            iou_nc: None,
            iou_c: None,
        }
    }

    pub fn semantic(counts: &BinaryCounts, q: &ScdConfusion) -> Self {
        let b = bcd_metrics(counts);
        let m = miou(q);
        Self {
            p: b.precision,
            r: b.recall,
            f1: b.f1,
            iou: m.iou_c,
            miou: Some(m.miou),
            sek: Some(sek(q)),
            f_scd: Some(f_scd(q).f_scd),
            iou_nc: Some(m.iou_nc),
            iou_c: Some(m.iou_c),
        }
    }

    /// Rows of `name value` with five decimals; absent values print `-`.
    pub fn table(&self) -> String {
        let rows: [(&str, Option<f64>); 9] = [
            ("P", Some(self.p)),
            ("R", Some(self.r)),
            ("F1", Some(self.f1)),
            ("IoU", Some(self.iou)),
            ("mIoU", self.miou),
            ("SeK", self.sek),
            ("F_scd", self.f_scd),
            ("IoU_nc", self.iou_nc),
            ("IoU_c", self.iou_c),
        ];
        rows.iter()
            .map(|(k, v)| match v {
                Some(v) => format!("{k:<7}{v:.5}\n"),
                None => format!("{k:<7}-\n"),
            })
            .collect()
    }
}

/// Accumulates counts over many samples.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    pub counts: BinaryCounts,
    pub confusion: Option<ScdConfusion>,
}

impl MetricAccumulator {
    pub fn binary() -> Self {
        Self {
            counts: BinaryCounts::default(),
            confusion: None,
        }
    }

    pub fn semantic(n: usize) -> Self {
        Self {
            counts: BinaryCounts::default(),
            confusion: Some(ScdConfusion::new(n)),
        }
    }

    pub fn add_binary(&mut self, pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<()> {
        self.counts.merge(&BinaryCounts::tally(pred, gt)?);
        Ok(())
    }

    /// Adds change-masked semantic maps for both temporal images.
    pub fn add_semantic(
        &mut self,
        pred: (ArrayView2<'_, u8>, ArrayView2<'_, u8>),
        gt: (ArrayView2<'_, u8>, ArrayView2<'_, u8>),
    ) -> Result<()> {
        let q = self
            .confusion
            .as_mut()
            .ok_or_else(|| Error::Invalid("binary accumulator given semantic maps".into()))?;
        q.accumulate(pred.0, gt.0)?;
        q.accumulate(pred.1, gt.1)
    }

    pub fn report(&self) -> MetricReport {
        match &self.confusion {
            Some(q) => MetricReport::semantic(&self.counts, q),
            None => MetricReport::binary(&self.counts),
        }
    }
}
