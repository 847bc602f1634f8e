//! Training objective: next-token loss on the response plus the weighted
//! mask terms. Semantic terms are only built for semantic batches.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_softmax;
use crate::token_decoder::{FusedStreams, MaskTensors};

pub const DICE_EPS: f64 = 1.0;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub ss: f64,
    pub sc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 2.0,
            dice: 0.5,
            ss: 0.5,
            sc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("bce", self.bce), ("dice", self.dice), ("ss", self.ss), ("sc", self.sc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of every term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub txt: f64,
    pub bce: f64,
    pub dice: f64,
    pub ss: f64,
    pub sc: f64,
    pub gated: bool,
}

impl LossReport {
    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("txt", self.txt),
            ("bce", self.bce),
            ("dice", self.dice),
            ("ss", self.ss),
            ("sc", self.sc),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Ground truth for one batch as tensors.
#[derive(Clone, Debug)]
pub struct Targets {
    /// (B, H, W) in {0, 1}, same dtype as the logits.
    pub change: Tensor,
    /// (B, H, W) u32 labels, semantic batches only.
    pub sem_t1: Option<Tensor>,
    pub sem_t2: Option<Tensor>,
}

impl Targets {
    pub fn is_scd(&self) -> bool {
        self.sem_t1.is_some()
    }
}

/// Differentiable mask terms of one batch.
#[derive(Clone, Debug)]
pub struct MaskLoss {
    pub total: Tensor,
    pub bce: Tensor,
    pub dice: Tensor,
    pub ss: Option<Tensor>,
    pub sc: Option<Tensor>,
}

impl MaskLoss {
    pub fn gated(&self) -> bool {
        self.ss.is_none()
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// log(1 + e^x) with the shift detached, so the gradient is sigmoid(x)
/// everywhere including x = 0.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let m = x.relu()?.detach();
    let s = (m.neg()?.exp()? + x.broadcast_sub(&m)?.exp()?)?.log()?;
    Ok((m + s)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?.exp()?)
}

/// Mean binary cross-entropy on sigmoid(logits).
pub fn bce_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(logits, gt, "bce")?;
    Ok((softplus(logits)? - (logits * gt)?)?.mean_all()?)
}

/// 1 − (2Σpg + ε)/(Σp + Σg + ε) per sample, averaged over the batch. A 2-D
/// input is treated as a single sample.
pub fn dice_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(logits, gt, "dice")?;
    let (logits, gt) = if logits.rank() == 2 {
        (logits.unsqueeze(0)?, gt.unsqueeze(0)?)
    } else {
        (logits.clone(), gt.clone())
    };
    let p = sigmoid(&logits)?.flatten_from(1)?;
    let g = gt.flatten_from(1)?;
    let inter = ((&p * &g)?.sum(1)? * 2.0)?;
    let denom = (p.sum(1)? + g.sum(1)?)?;
    let ratio = ((inter + DICE_EPS)? / (denom + DICE_EPS)?)?;
    Ok(ratio.neg()?.affine(1.0, 1.0)?.mean_all()?)
}

fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    // logits (B, C, H, W), labels (B, H, W)
    let (b, c, h, w) = logits.dims4()?;
    if labels.dims() != [b, h, w] {
        return Err(Error::Shape(format!("labels {:?} vs logits {:?}", labels.dims(), logits.dims())));
    }
    let labels = labels.to_dtype(DType::U32)?;
    let max = labels.max_all()?.to_scalar::<u32>()?;
    if max as usize >= c {
        return Err(Error::LabelRange {
            value: max,
            classes: c - 1,
            path: None,
        });
    }
    let logp = log_softmax(logits, 1)?;
    let picked = logp.gather(&labels.unsqueeze(1)?.contiguous()?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Mean cross-entropy over both temporal label maps.
pub fn ss_loss(t1_logits: &Tensor, t2_logits: &Tensor, sem_t1: &Tensor, sem_t2: &Tensor) -> Result<Tensor> {
    let a = cross_entropy(t1_logits, sem_t1)?;
    let b = cross_entropy(t2_logits, sem_t2)?;
    Ok(((a + b)? * 0.5)?)
}

/// Nearest-neighbour downsampling of (B, H, W) by an integer factor, keeping
/// pixel (f·y, f·x) for cell (y, x).
pub fn downsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("cannot downsample {h}x{w} by {factor}")));
    }
    let dev = x.device();
    let rows = Tensor::arange_step(0u32, h as u32, factor as u32, dev)?;
    let cols = Tensor::arange_step(0u32, w as u32, factor as u32, dev)?;
    Ok(x.index_select(&rows, 1)?.index_select(&cols, 2)?)
}

/// Cosine embedding loss between the temporal streams (B, d, h, w): 1 − s on
/// unchanged cells, max(0, s) on changed cells. `gt_change` is (B, H, W).
pub fn sc_loss(f_t1: &Tensor, f_t2: &Tensor, gt_change: &Tensor) -> Result<Tensor> {
    check_same(f_t1, f_t2, "sc streams")?;
    let (_, _, h, _) = f_t1.dims4()?;
    let (_, gh, _) = gt_change.dims3()?;
    if h == 0 || gh % h != 0 {
        return Err(Error::Shape(format!("mask height {gh} is not a multiple of {h}")));
    }
    let g = downsample_nearest(gt_change, gh / h)?;
    let dot = (f_t1 * f_t2)?.sum(1)?;
    let n1 = (f_t1.sqr()?.sum(1)? + NORM_EPS)?;
    let n2 = (f_t2.sqr()?.sum(1)? + NORM_EPS)?;
    check_same(&dot, &g, "sc mask")?;
    let s = (dot / (n1 * n2)?.sqrt()?)?;
    let unchanged = (g.affine(-1.0, 1.0)? * s.affine(-1.0, 1.0)?)?;
    let changed = (&g * s.relu()?)?;
    Ok((unchanged + changed)?.mean_all()?)
}

/// Weighted mask loss. Semantic terms are only constructed when `is_scd`.
pub fn mask_loss(masks: &MaskTensors, targets: &Targets, streams: &FusedStreams, w: &LossWeights, is_scd: bool) -> Result<MaskLoss> {
    if is_scd != targets.is_scd() || is_scd != masks.t1.is_some() {
        return Err(Error::Invalid(format!(
            "task is {} but semantic targets are {} and semantic logits are {}",
            if is_scd { "scd" } else { "bcd" },
            if targets.is_scd() { "present" } else { "absent" },
            if masks.t1.is_some() { "present" } else { "absent" },
        )));
    }
    let bce = bce_loss(&masks.change, &targets.change)?;
    let dice = dice_loss(&masks.change, &targets.change)?;
    let mut total = ((&bce * w.bce)? + (&dice * w.dice)?)?;
    let (mut ss, mut sc) = (None, None);
    if is_scd {
        let missing = || Error::Invalid("semantic batch without semantic streams".into());
        let (l1, l2) = (masks.t1.as_ref().ok_or_else(missing)?, masks.t2.as_ref().ok_or_else(missing)?);
        let (s1, s2) = (
            targets.sem_t1.as_ref().ok_or_else(missing)?,
            targets.sem_t2.as_ref().ok_or_else(missing)?,
        );
        let (f1, f2) = (streams.t1.as_ref().ok_or_else(missing)?, streams.t2.as_ref().ok_or_else(missing)?);
        let ss_t = ss_loss(l1, l2, s1, s2)?;
        let sc_t = sc_loss(f1, f2, &targets.change)?;
        total = ((total + (&ss_t * w.ss)?)? + (&sc_t * w.sc)?)?;
        ss = Some(ss_t);
        sc = Some(sc_t);
    }
    Ok(MaskLoss { total, bce, dice, ss, sc })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Adds the text loss and reads every term back as a scalar.
pub fn total_loss(txt: &Tensor, mask: &MaskLoss, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    let total = (txt + &mask.total)?;
    let opt = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map(scalar).transpose().map(|v| v.unwrap_or(0.0)) };
    let (txt_v, bce, dice, ss, sc) = (
        scalar(txt)?,
        scalar(&mask.bce)?,
        scalar(&mask.dice)?,
        opt(&mask.ss)?,
        opt(&mask.sc)?,
    );
    let report = LossReport {
        total: txt_v + w.bce * bce + w.dice * dice + w.ss * ss + w.sc * sc,
        txt: txt_v,
        bce,
        dice,
        ss,
        sc,
        gated: mask.gated(),
    };
    Ok((total, report))
}

/// Per-pixel argmax of (B, C, H, W) logits.
pub fn argmax_channels(logits: &Tensor) -> Result<Tensor> {
    Ok(logits.argmax(1)?.to_dtype(DType::U32)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        scalar(x).unwrap()
    }

    fn randn(shape: &[usize]) -> Tensor {
        Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    fn bernoulli(shape: &[usize]) -> Tensor {
        Tensor::rand(0f64, 1.0, shape, &Device::Cpu)
            .unwrap()
            .ge(0.5)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1().unwrap()
    }

    /// Central differences of `f` at `x` against its autodiff gradient.
    fn check_grad(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) {
        let var = Var::from_tensor(x).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g = vals(grads.get(var.as_tensor()).unwrap());
        let base = vals(x);
        let eps = 1e-5;
        for i in 0..base.len() {
            let at = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                s(&f(&t(v, x.dims())))
            };
            let fd = (at(eps) - at(-eps)) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "element {i}: fd {fd} vs analytic {}", g[i]);
        }
    }

    #[test]
    fn bce_examples() {
        let gt = bernoulli(&[4, 4]);
        let zero = Tensor::zeros((4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!((s(&bce_loss(&zero, &gt).unwrap()) - 2f64.ln()).abs() < 1e-12);
        let sat = gt.affine(40.0, -20.0).unwrap();
        assert!(s(&bce_loss(&sat, &gt).unwrap()) < 1e-8);
        assert!(bce_loss(&zero, &bernoulli(&[4, 2])).is_err());
        check_grad(&randn(&[4, 4]), |x| bce_loss(x, &gt).unwrap());
        check_grad(&zero, |x| bce_loss(x, &gt).unwrap());
    }

    #[test]
    fn dice_examples() {
        let gt = bernoulli(&[4, 4]);
        let sat = gt.affine(60.0, -30.0).unwrap();
        assert!(s(&dice_loss(&sat, &gt).unwrap()) <= 1e-6);
        let ones = Tensor::full(40f64, (4, 4), &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        assert!((s(&dice_loss(&ones, &zeros).unwrap()) - (1.0 - 1.0 / 17.0)).abs() < 1e-9);
        let z2 = Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!((s(&dice_loss(&z2, &z2).unwrap()) - 2.0 / 3.0).abs() < 1e-12);
        check_grad(&randn(&[4, 4]), |x| dice_loss(x, &gt).unwrap());
        let gb = bernoulli(&[2, 4, 4]);
        check_grad(&randn(&[2, 4, 4]), |x| dice_loss(x, &gb).unwrap());
    }

    #[test]
    fn ss_examples() {
        let labels = t(vec![0.0, 1.0, 3.0, 2.0], &[1, 2, 2]).to_dtype(DType::U32).unwrap();
        let uniform = Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!((s(&ss_loss(&uniform, &uniform, &labels, &labels).unwrap()) - 4f64.ln()).abs() < 1e-12);

        let onehot = |lab: &Tensor, c: usize| {
            let l: Vec<u32> = lab.flatten_all().unwrap().to_vec1().unwrap();
            let mut v = vec![-30.0; c * l.len()];
            for (i, &k) in l.iter().enumerate() {
                v[k as usize * l.len() + i] = 30.0;
            }
            t(v, &[1, c, 2, 2])
        };
        let sat = onehot(&labels, 4);
        assert!(s(&ss_loss(&sat, &sat, &labels, &labels).unwrap()) < 1e-8);

        let bad = t(vec![0.0, 4.0, 1.0, 1.0], &[1, 2, 2]).to_dtype(DType::U32).unwrap();
        assert!(matches!(
            ss_loss(&uniform, &uniform, &bad, &labels),
            Err(Error::LabelRange { value: 4, .. })
        ));

        let l3 = t(vec![0.0, 1.0, 2.0, 1.0], &[1, 2, 2]).to_dtype(DType::U32).unwrap();
        let l3b = t(vec![2.0, 2.0, 0.0, 1.0], &[1, 2, 2]).to_dtype(DType::U32).unwrap();
        let other = randn(&[1, 3, 2, 2]);
        check_grad(&randn(&[1, 3, 2, 2]), |x| ss_loss(x, &other, &l3, &l3b).unwrap());
    }

    #[test]
    fn sc_examples() {
        let f = randn(&[1, 8, 2, 2]);
        let unchanged = Tensor::zeros((1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let changed = unchanged.ones_like().unwrap();
        assert!(s(&sc_loss(&f, &f, &unchanged).unwrap()).abs() < 1e-12);
        assert!(s(&sc_loss(&f, &f.neg().unwrap(), &changed).unwrap()).abs() < 1e-12);
        // orthogonal per cell: support on disjoint channels
        let mut a = vec![0.0; 8 * 4];
        let mut b = vec![0.0; 8 * 4];
        for cell in 0..4 {
            a[cell] = 1.0 + cell as f64;
            b[4 + cell] = 2.0;
        }
        let (a, b) = (t(a, &[1, 8, 2, 2]), t(b, &[1, 8, 2, 2]));
        assert!((s(&sc_loss(&a, &b, &unchanged).unwrap()) - 1.0).abs() < 1e-12);
        let zero = f.zeros_like().unwrap();
        assert!((s(&sc_loss(&zero, &f, &unchanged).unwrap()) - 1.0).abs() < 1e-12);

        let gt = bernoulli(&[1, 8, 8]);
        let f2 = randn(&[1, 3, 2, 2]);
        check_grad(&randn(&[1, 3, 2, 2]), |x| sc_loss(x, &f2, &gt).unwrap());
    }

    #[test]
    fn nearest_downsample_picks_top_left() {
        let x = t((0..16).map(|v| v as f64).collect(), &[1, 4, 4]);
        assert_eq!(vals(&downsample_nearest(&x, 2).unwrap()), vec![0.0, 2.0, 8.0, 10.0]);
        assert!(downsample_nearest(&x, 3).is_err());
    }

    fn streams(semantic: bool) -> FusedStreams {
        FusedStreams {
            t1: semantic.then(|| randn(&[1, 4, 2, 2])),
            t2: semantic.then(|| randn(&[1, 4, 2, 2])),
            change: randn(&[1, 4, 2, 2]),
        }
    }

    fn masks(semantic: bool) -> MaskTensors {
        MaskTensors {
            change: randn(&[1, 8, 8]),
            t1: semantic.then(|| randn(&[1, 3, 8, 8])),
            t2: semantic.then(|| randn(&[1, 3, 8, 8])),
        }
    }

    fn targets(semantic: bool) -> Targets {
        let sem = || {
            Tensor::rand(0f64, 3.0, (1, 8, 8), &Device::Cpu)
                .unwrap()
                .floor()
                .unwrap()
                .to_dtype(DType::U32)
                .unwrap()
        };
        Targets {
            change: bernoulli(&[1, 8, 8]),
            sem_t1: semantic.then(sem),
            sem_t2: semantic.then(sem),
        }
    }

    #[test]
    fn gating_and_composition() {
        let w = LossWeights::default();
        let bcd = mask_loss(&masks(false), &targets(false), &streams(false), &w, false).unwrap();
        assert!(bcd.gated());
        let txt = Tensor::new(0.3f64, &Device::Cpu).unwrap();
        let (_, r) = total_loss(&txt, &bcd, &w).unwrap();
        assert!(r.gated && r.ss == 0.0 && r.sc == 0.0);
        assert!((r.total - (0.3 + 2.0 * r.bce + 0.5 * r.dice)).abs() < 1e-12);

        let scd = mask_loss(&masks(true), &targets(true), &streams(true), &w, true).unwrap();
        let (tot, r) = total_loss(&txt, &scd, &w).unwrap();
        assert!(!r.gated);
        assert!((r.total - (0.3 + 2.0 * r.bce + 0.5 * r.dice + 0.5 * r.ss + 1.0 * r.sc)).abs() < 1e-12);
        assert!((s(&tot) - r.total).abs() < 1e-12);

        let zero_w = LossWeights {
            bce: 0.0,
            dice: 0.0,
            ss: 0.0,
            sc: 0.0,
        };
        let z = mask_loss(&masks(true), &targets(true), &streams(true), &zero_w, true).unwrap();
        assert_eq!(s(&z.total), 0.0);

        assert!(mask_loss(&masks(false), &targets(true), &streams(false), &w, true).is_err());
        assert!(mask_loss(&masks(true), &targets(true), &streams(true), &w, false).is_err());
    }

    #[test]
    fn total_composition_cases() {
        let w = LossWeights::default();
        let m = mask_loss(&masks(true), &targets(true), &streams(true), &w, true).unwrap();
        for txt in [0.0, 1.7] {
            let (tot, r) = total_loss(&Tensor::new(txt, &Device::Cpu).unwrap(), &m, &w).unwrap();
            assert!((s(&tot) - (txt + s(&m.total))).abs() < 1e-12);
            assert!((r.total - s(&tot)).abs() < 1e-12);
        }
        let zw = LossWeights {
            bce: 0.0,
            dice: 0.0,
            ss: 0.0,
            sc: 0.0,
        };
        let zm = mask_loss(&masks(false), &targets(false), &streams(false), &zw, false).unwrap();
        let (_, r) = total_loss(&Tensor::new(0.9f64, &Device::Cpu).unwrap(), &zm, &zw).unwrap();
        assert!((r.total - 0.9).abs() < 1e-12);
    }

    #[test]
    fn semantic_streams_get_no_gradient_on_binary_batches() {
        let w = LossWeights::default();
        let st = streams(true);
        let t1 = Var::from_tensor(st.t1.as_ref().unwrap()).unwrap();
        let m = masks(false);
        let loss = mask_loss(
            &m,
            &targets(false),
            &FusedStreams {
                t1: None,
                t2: None,
                change: st.change.clone(),
            },
            &w,
            false,
        )
        .unwrap();
        let grads = loss.total.backward().unwrap();
        assert!(grads.get(t1.as_tensor()).is_none());
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            bce: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn losses_nonnegative_and_pixel_permutation_invariant(
            logits in proptest::collection::vec(-6.0f64..6.0, 16),
            gt in proptest::collection::vec(0u8..2, 16),
            sem in proptest::collection::vec(0u32..3, 16),
            semlog in proptest::collection::vec(-4.0f64..4.0, 48),
            perm in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let g: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
            let x = t(logits.clone(), &[1, 4, 4]);
            let gx = t(g.clone(), &[1, 4, 4]);
            let lab = Tensor::from_vec(sem.clone(), (1, 4, 4), &Device::Cpu).unwrap();
            let sl = t(semlog.clone(), &[1, 3, 4, 4]);
            let bce = s(&bce_loss(&x, &gx).unwrap());
            let dice = s(&dice_loss(&x, &gx).unwrap());
            let ss = s(&ss_loss(&sl, &sl, &lab, &lab).unwrap());
            prop_assert!(bce >= 0.0 && dice >= 0.0 && ss >= 0.0);

            let px: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
            let pg: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
            let ps: Vec<u32> = perm.iter().map(|&i| sem[i]).collect();
            let psl: Vec<f64> = (0..3).flat_map(|c| perm.iter().map(move |&i| (c, i))).map(|(c, i)| semlog[c * 16 + i]).collect();
            let x2 = t(px, &[1, 4, 4]);
            let g2 = t(pg, &[1, 4, 4]);
            let l2 = Tensor::from_vec(ps, (1, 4, 4), &Device::Cpu).unwrap();
            let sl2 = t(psl, &[1, 3, 4, 4]);
            prop_assert!((s(&bce_loss(&x2, &g2).unwrap()) - bce).abs() < 1e-12);
            prop_assert!((s(&dice_loss(&x2, &g2).unwrap()) - dice).abs() < 1e-12);
            prop_assert!((s(&ss_loss(&sl2, &sl2, &l2, &l2).unwrap()) - ss).abs() < 1e-12);

            let f1 = t(semlog[..16].to_vec(), &[1, 4, 2, 2]);
            let f2 = t(semlog[16..32].to_vec(), &[1, 4, 2, 2]);
            let sc = s(&sc_loss(&f1, &f2, &gx.repeat((1, 1, 1)).unwrap()).unwrap());
            prop_assert!(sc >= 0.0);
        }
    }
}
