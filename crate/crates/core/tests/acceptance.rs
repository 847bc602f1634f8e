//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion to
//! stderr (bypassing the test harness capture) and fails if any criterion
//! fails.
//!
//! Run alone with `cargo test -p changetok-core --test acceptance`.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use changetok::data_model::{Sample, TaskKind, TaskQuery};
use changetok::datagen::{generate_scd_source, generate_splits, ShapeFamily, SplitSizes, SyntheticSpec};
use changetok::harness::{evaluate, token_vocabulary, Checkpoint, Precision, TrainConfig, TrainSource, Trainer};
use changetok::instruction_codec::{lm_loss, prompt_ids, render_target_response, LmConfig, EOS_ID};
use changetok::losses::{bce_loss, dice_loss, sc_loss, ss_loss, LossWeights};
use changetok::metrics::{f_scd, miou, sek, MetricAccumulator, ScdConfusion};
use changetok::model::{ChangeModel, ModelConfig};
use changetok::nn::ParamStore;
use changetok::token_decoder::{flatten_concat, DecoderConfig, QueryState, TokenDecoder, SEMANTIC_ONLY_PARAMS};
use changetok::vision_encoder::BackboneConfig;

struct Outcome {
    pass: bool,
    detail: String,
}

fn emit(id: usize, name: &str, o: &Outcome, elapsed: Duration) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] {id}. {name:<26} {verdict}  {} ({:.1} s)",
        o.detail,
        elapsed.as_secs_f64()
    );
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let o = f();
    (o, start.elapsed())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

// ---------------------------------------------------------------- 1. metrics

#[derive(Debug)]
struct Brute {
    p: f64,
    r: f64,
    f1: f64,
    iou: f64,
}

fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn brute_binary(pred: &[bool], gt: &[bool]) -> Brute {
    let both = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let either = pred.iter().zip(gt).filter(|(p, g)| **p || **g).count();
    let np = pred.iter().filter(|p| **p).count();
    let ng = gt.iter().filter(|g| **g).count();
    if either == 0 {
        return Brute {
            p: 1.0,
            r: 1.0,
            f1: 1.0,
            iou: 1.0,
        };
    }
    let (p, r) = (frac(both, np), frac(both, ng));
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Brute {
        p,
        r,
        f1,
        iou: frac(both, either),
    }
}

/// mIoU, SeK and F_scd straight from pixel label lists.
fn brute_semantic(pred: &[u8], gt: &[u8], n: usize) -> (f64, f64, f64, f64) {
    let pairs: Vec<(u8, u8)> = pred.iter().copied().zip(gt.iter().copied()).collect();
    let count = |f: &dyn Fn(u8, u8) -> bool| pairs.iter().filter(|(p, g)| f(*p, *g)).count();
    let iou_nc = frac(count(&|p, g| p == 0 && g == 0), count(&|p, g| p == 0 || g == 0));
    let iou_c = frac(count(&|p, g| p != 0 && g != 0), count(&|p, g| p != 0 || g != 0));
    let kept: Vec<(u8, u8)> = pairs.iter().copied().filter(|&(p, g)| !(p == 0 && g == 0)).collect();
    let sek = if kept.is_empty() {
        0.0
    } else {
        let m = kept.len() as f64;
        let rho = kept.iter().filter(|(p, g)| p == g).count() as f64 / m;
        let eta: f64 = (0..=n as u8)
            .map(|k| {
                let a = kept.iter().filter(|(p, _)| *p == k).count() as f64;
                let b = kept.iter().filter(|(_, g)| *g == k).count() as f64;
                a * b
            })
            .sum::<f64>()
            / (m * m);
        let kappa = if eta >= 1.0 {
            f64::from(rho >= 1.0)
        } else {
            (rho - eta) / (1.0 - eta)
        };
        kappa * (iou_c - 1.0).exp()
    };
    let hits = count(&|p, g| p != 0 && p == g);
    let (ps, rs) = (frac(hits, count(&|p, _| p != 0)), frac(hits, count(&|_, g| g != 0)));
    let fs = if ps + rs > 0.0 { 2.0 * ps * rs / (ps + rs) } else { 0.0 };
    ((iou_nc + iou_c) / 2.0, sek, fs, iou_c)
}

fn random_map(r: &mut ChaCha8Rng, max: u8, density: f64) -> Array2<u8> {
    Array2::from_shape_fn((8, 8), |_| if r.random_bool(density) { r.random_range(1..=max) } else { 0 })
}

fn criterion_metrics() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut check = |a: f64, b: f64| worst = worst.max((a - b).abs());
    let densities = [0.0, 0.05, 0.3, 0.5, 0.9, 1.0];

    let (mut all_p, mut all_g) = (Vec::new(), Vec::new());
    let mut total = MetricAccumulator::binary();
    for _ in 0..1000 {
        let dp = densities[r.random_range(0..densities.len())];
        let dg = densities[r.random_range(0..densities.len())];
        let pred = random_map(&mut r, 1, dp);
        let gt = random_map(&mut r, 1, dg);
        let mut acc = MetricAccumulator::binary();
        acc.add_binary(pred.view(), gt.view()).unwrap();
        total.add_binary(pred.view(), gt.view()).unwrap();
        let got = acc.report();
        let p: Vec<bool> = pred.iter().map(|&v| v != 0).collect();
        let g: Vec<bool> = gt.iter().map(|&v| v != 0).collect();
        let want = brute_binary(&p, &g);
        check(got.p, want.p);
        check(got.r, want.r);
        check(got.f1, want.f1);
        check(got.iou, want.iou);
        all_p.extend(p);
        all_g.extend(g);
    }
    let (got, want) = (total.report(), brute_binary(&all_p, &all_g));
    check(got.iou, want.iou);
    check(got.f1, want.f1);

    let n = 3;
    for _ in 0..500 {
        let d = [densities[r.random_range(1..5)], densities[r.random_range(1..5)]];
        let maps: Vec<Array2<u8>> = (0..4).map(|i| random_map(&mut r, n as u8, d[i / 2])).collect();
        let mut acc = MetricAccumulator::semantic(n);
        acc.add_semantic((maps[0].view(), maps[1].view()), (maps[2].view(), maps[3].view()))
            .unwrap();
        let got = acc.report();
        let pred: Vec<u8> = maps[0].iter().chain(maps[1].iter()).copied().collect();
        let gt: Vec<u8> = maps[2].iter().chain(maps[3].iter()).copied().collect();
        let (m, s, f, c) = brute_semantic(&pred, &gt, n);
        check(got.miou.unwrap(), m);
        check(got.sek.unwrap(), s);
        check(got.f_scd.unwrap(), f);
        check(got.iou_c.unwrap(), c);
    }
    let exact = worst <= 1e-12;

    // fixture, rows = prediction
    let q = ScdConfusion::from_rows(&[vec![10, 1, 0], vec![2, 5, 1], vec![0, 1, 6]]).unwrap();
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for i in 0..3u8 {
        for j in 0..3u8 {
            for _ in 0..q.get(i as usize, j as usize) {
                pred.push(i);
                gt.push(j);
            }
        }
    }
    let (bm, bs, bf, _) = brute_semantic(&pred, &gt, 2);
    let (fm, fs, ff) = (miou(&q).miou, sek(&q), f_scd(&q).f_scd);
    let fixture = (fm - bm).abs() <= 1e-12
        && (fs - bs).abs() <= 1e-12
        && (ff - bf).abs() <= 1e-12
        && (fm - 0.79087).abs() < 5e-5
        && (fs - 0.38393).abs() < 5e-5
        && (ff - 0.75862).abs() < 5e-5;
    Outcome {
        pass: exact && fixture,
        detail: format!("max deviation {worst:.1e}; fixture mIoU {fm:.5} SeK {fs:.5} F_scd {ff:.5}"),
    }
}

// --------------------------------------------------------------- 2. gradients

const FD_EPS: f64 = 1e-5;

/// Below `FD_FLOOR` the comparison is absolute: a loss of magnitude ~5
/// evaluated in float64 moves by whole ulps between the two probes, so the
/// central difference at this step cannot resolve smaller gradients.
const FD_FLOOR: f64 = 1e-5;

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(FD_FLOOR)
}

/// Worst relative error of the gradient of `f` w.r.t. a tensor input.
fn fd_input(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let g = flat(grads.get(var.as_tensor()).unwrap());
    let base = flat(x);
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let at = |d: f64| {
            let mut v = base.clone();
            v[i] += d;
            scalar(&f(&Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap()))
        };
        worst = worst.max(rel_err((at(FD_EPS) - at(-FD_EPS)) / (2.0 * FD_EPS), g[i]));
    }
    worst
}

/// Worst relative error over `per_tensor` evenly spaced entries of every
/// parameter whose name passes `keep`.
fn fd_params(p: &ParamStore, keep: &dyn Fn(&str) -> bool, per_tensor: usize, f: &dyn Fn() -> Tensor) -> (f64, usize) {
    let grads = f().backward().unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, var) in p.iter() {
        if !keep(name) {
            continue;
        }
        let base = flat(var.as_tensor());
        let g = grads.get(var.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; base.len()]);
        let step = (base.len() / per_tensor).max(1);
        for i in (0..base.len()).step_by(step).take(per_tensor) {
            let at = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                var.set(&Tensor::from_vec(v, var.shape(), var.device()).unwrap()).unwrap();
                let l = scalar(&f());
                var.set(&Tensor::from_vec(base.clone(), var.shape(), var.device()).unwrap())
                    .unwrap();
                l
            };
            worst = worst.max(rel_err((at(FD_EPS) - at(-FD_EPS)) / (2.0 * FD_EPS), g[i]));
            checked += 1;
        }
    }
    (worst, checked)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        lm: LmConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            max_len: 48,
            ffn_mult: 2,
        },
        backbone: BackboneConfig {
            in_channels: 3,
            stage_channels: [4, 4, 8],
            out_channels: 8,
        },
        decoder: DecoderConfig {
            d_model: 8,
            heads: 2,
            ffn_mult: 2,
        },
        max_response: 16,
    }
}

fn tiny_scd_samples(n: usize) -> Vec<Sample> {
    generate_scd_source(&SyntheticSpec {
        task: TaskKind::Scd,
        size: 32,
        families: ShapeFamily::ALL.to_vec(),
        change_rate: 0.15,
        splits: SplitSizes { train: n, val: 0, test: 0 },
        seed: 21,
        ..Default::default()
    })
    .unwrap()
}

fn criterion_gradients() -> Outcome {
    let mut r = rng(2);
    let mut parts: Vec<(&str, f64)> = Vec::new();

    let logits = randn(&mut r, &[2, 8, 8]);
    let gt_vals: Vec<f64> = (0..128).map(|_| f64::from(r.random_bool(0.3))).collect();
    let gt = Tensor::from_vec(gt_vals, (2, 8, 8), &Device::Cpu).unwrap();
    parts.push(("bce", fd_input(&logits, &|x| bce_loss(x, &gt).unwrap())));
    parts.push(("dice", fd_input(&logits, &|x| dice_loss(x, &gt).unwrap())));

    let sem = randn(&mut r, &[2, 4, 6, 6]);
    let lab = |r: &mut ChaCha8Rng| {
        let v: Vec<u32> = (0..72).map(|_| r.random_range(0..4)).collect();
        Tensor::from_vec(v, (2, 6, 6), &Device::Cpu).unwrap()
    };
    let (l1, l2) = (lab(&mut r), lab(&mut r));
    let other = randn(&mut r, &[2, 4, 6, 6]);
    parts.push(("ss", fd_input(&sem, &|x| ss_loss(x, &other, &l1, &l2).unwrap())));

    let f1 = randn(&mut r, &[2, 5, 4, 4]);
    let f2 = randn(&mut r, &[2, 5, 4, 4]);
    let change: Vec<f64> = (0..512).map(|_| f64::from(r.random_bool(0.4))).collect();
    let change = Tensor::from_vec(change, (2, 16, 16), &Device::Cpu).unwrap();
    let sc_a = fd_input(&f1, &|x| sc_loss(x, &f2, &change).unwrap());
    let sc_b = fd_input(&f2, &|x| sc_loss(&f1, x, &change).unwrap());
    parts.push(("sc", sc_a.max(sc_b)));

    let samples = tiny_scd_samples(2);
    let query = TaskQuery::for_sample(&samples[0]).unwrap();
    let vocab = token_vocabulary([&query.vocabulary]);
    let model = ChangeModel::new(&tiny_model(), vocab, 5, DType::F64).unwrap();
    let prompt = prompt_ids(model.vocab(), &query.instruction).unwrap();
    let mut target = model.vocab().encode(render_target_response(TaskKind::Scd)).unwrap();
    target.push(EOS_ID);
    let (txt, _) = fd_params(model.params(), &|n| n.starts_with("lm."), 3, &|| {
        lm_loss(model.lm(), &prompt, &target).unwrap()
    });
    parts.push(("txt", txt));

    let cfg = DecoderConfig {
        d_model: 8,
        heads: 2,
        ffn_mult: 2,
    };
    let mut p = ParamStore::new(9, DType::F64);
    let dec = TokenDecoder::new(&mut p, &cfg, 6).unwrap();
    let q_pe = randn(&mut r, &[1, 3, 8]);
    let seq = flatten_concat(&randn(&mut r, &[1, 8, 2, 2]), &randn(&mut r, &[1, 8, 2, 2])).unwrap();
    let t_pe = dec.token_encoding(2, 2, DType::F64, &Device::Cpu).unwrap();
    let (wq, wt) = (randn(&mut r, &[1, 3, 8]), randn(&mut r, &[1, 8, 8]));
    let e0 = randn(&mut r, &[1, 3, 8]);
    let readout = |e: &Tensor, s: &changetok::token_decoder::VisualSequence| -> Tensor {
        let state = QueryState {
            queries: e.clone(),
            level: 0,
        };
        let (q, t) = dec.layer(0).forward(&state, &q_pe, s, &t_pe).unwrap();
        ((q.queries * &wq).unwrap().sum_all().unwrap() + (t.tokens * &wt).unwrap().sum_all().unwrap()).unwrap()
    };
    let wrt_queries = fd_input(&e0, &|e| readout(e, &seq));
    let (wrt_params, _) = fd_params(&p, &|n| n.starts_with("decoder.layers.0."), 4, &|| readout(&e0, &seq));
    parts.push(("decoder layer", wrt_queries.max(wrt_params)));

    let batch: Vec<&Sample> = samples.iter().collect();
    let w = LossWeights::default();
    let (full, checked) = fd_params(model.params(), &|_| true, 2, &|| model.loss(&batch, &query, &w).unwrap().0);
    parts.push(("full forward", full));

    let worst = parts.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = parts.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome {
        pass: worst < 1e-4,
        detail: format!("max rel err {worst:.1e} [{detail}; {checked} full-model entries]"),
    }
}

// --------------------------------------------------------------- 3, 6, 7, 9

fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        grad_accum_steps: 1,
        text_warmup_steps: 400,
        seed,
        ..Default::default()
    }
}

struct BcdRun {
    trainer: Trainer,
    source: TrainSource,
    iou: f64,
    steps: usize,
    gating_violations: Vec<String>,
}

fn bcd_overfit() -> BcdRun {
    let samples = generate_splits(&SyntheticSpec {
        splits: SplitSizes { train: 8, val: 0, test: 0 },
        seed: 3,
        ..Default::default()
    })
    .unwrap()
    .remove("train")
    .unwrap();
    let source = TrainSource::new(samples).unwrap();
    let mut trainer = Trainer::new(overfit_config(11), vec![source.clone()]).unwrap();
    let mut gating_violations = Vec::new();
    let (mut iou, mut steps) = (0.0, 0);
    while steps < 500 {
        let r = trainer.train_step().unwrap();
        steps += 1;
        if r.ss != 0.0 || r.sc != 0.0 || !r.gated {
            gating_violations.push(format!("step {steps}: ss {} sc {}", r.ss, r.sc));
        }
        for name in trainer.last_gradients().keys() {
            if SEMANTIC_ONLY_PARAMS.iter().any(|p| name.starts_with(p)) {
                gating_violations.push(format!("step {steps}: gradient for {name}"));
            }
        }
        if steps % 25 == 0 {
            iou = evaluate(trainer.model(), &source.samples, &source.query, 8).unwrap().iou;
            if iou >= 0.95 {
                break;
            }
        }
    }
    BcdRun {
        trainer,
        source,
        iou,
        steps,
        gating_violations,
    }
}

fn criterion_gating(run: &BcdRun) -> Outcome {
    let semantic_params = run
        .trainer
        .model()
        .params()
        .iter()
        .filter(|(n, _)| SEMANTIC_ONLY_PARAMS.iter().any(|p| n.starts_with(p)))
        .count();
    let logged = run.trainer.log().iter().all(|r| r.ss == 0.0 && r.sc == 0.0);
    Outcome {
        pass: run.gating_violations.is_empty() && logged && semantic_params > 0,
        detail: match run.gating_violations.first() {
            None => format!(
                "ss = sc = 0 over {} steps; {semantic_params} semantic-only tensors never received a gradient",
                run.trainer.log().len()
            ),
            Some(v) => format!("{} violations, first: {v}", run.gating_violations.len()),
        },
    }
}

fn criterion_tokens(run: &BcdRun) -> Outcome {
    let model = run.trainer.model();
    let vocab = model.vocab();
    let count = |ids: &[u32], tok: &str| {
        let id = vocab.id(tok).unwrap();
        ids.iter().filter(|&&i| i == id).count()
    };
    let bcd = model.respond(&run.source.query).unwrap();
    let scd_query = TaskQuery::new(TaskKind::Scd, run.source.query.vocabulary.clone()).unwrap();
    let scd = model.respond(&scd_query).unwrap();
    let pass = count(&bcd, "[CHANGE]") >= 1 && ["[T1]", "[T2]", "[CHANGE]"].iter().all(|t| count(&scd, t) == 1);
    Outcome {
        pass,
        detail: format!("bcd -> \"{}\"; scd -> \"{}\"", vocab.decode(&bcd), vocab.decode(&scd)),
    }
}

fn criterion_identity(run: &BcdRun) -> Outcome {
    let model = run.trainer.model();
    let (mut below, mut total, mut sum) = (0usize, 0usize, 0.0f64);
    for s in &run.source.samples {
        for img in [&s.pair.img1, &s.pair.img2] {
            let prob = model.predict_pair(img, img, &run.source.query).unwrap().change_probability();
            below += prob.iter().filter(|&&p| p < 0.5).count();
            total += prob.len();
            sum += prob.iter().map(|&p| p as f64).sum::<f64>();
        }
    }
    let share = below as f64 / total as f64;
    let mean = sum / total as f64;
    Outcome {
        pass: share >= 0.99 && mean < 0.2,
        detail: format!("{:.2}% of pixels below 0.5, mean probability {mean:.4}", 100.0 * share),
    }
}

// ---------------------------------------------------------------- 4. semantic

fn criterion_scd_overfit() -> Outcome {
    let samples = generate_splits(&SyntheticSpec {
        task: TaskKind::Scd,
        families: ShapeFamily::ALL.to_vec(),
        splits: SplitSizes { train: 8, val: 0, test: 0 },
        seed: 5,
        ..Default::default()
    })
    .unwrap()
    .remove("train")
    .unwrap();
    let source = TrainSource::new(samples).unwrap();
    let mut trainer = Trainer::new(overfit_config(12), vec![source.clone()]).unwrap();
    let start = Instant::now();
    let mut best = None;
    let mut steps = 0;
    while steps < 1200 && start.elapsed() < Duration::from_secs(570) {
        trainer.train_step().unwrap();
        steps += 1;
        if steps % 25 == 0 {
            let rep = evaluate(trainer.model(), &source.samples, &source.query, 8).unwrap();
            let (m, s) = (rep.miou.unwrap(), rep.sek.unwrap());
            best = Some((m, s));
            if m >= 0.90 && s > 0.0 {
                break;
            }
        }
    }
    let (m, s) = best.unwrap_or((0.0, 0.0));
    Outcome {
        pass: m >= 0.90 && s > 0.0 && start.elapsed() < Duration::from_secs(600),
        detail: format!("train mIoU {m:.4}, SeK {s:.4} after {steps} steps"),
    }
}

// ---------------------------------------------------------------- 5. conflict

fn criterion_conflict() -> Outcome {
    let mut sources = Vec::new();
    let mut held_out = Vec::new();
    for (i, fam) in [ShapeFamily::Square, ShapeFamily::Circle].into_iter().enumerate() {
        let mut splits = generate_splits(&SyntheticSpec {
            source_id: format!("{}-positive", fam.name()),
            positive: vec![fam],
            splits: SplitSizes {
                train: CONFLICT_TRAIN,
                val: 32,
                test: 32,
            },
            seed: 100 + i as u64 * 10_000,
            ..Default::default()
        })
        .unwrap();
        let src = TrainSource::new(splits.remove("train").unwrap()).unwrap();
        held_out.push((src.query.clone(), splits.remove("val").unwrap(), splits.remove("test").unwrap()));
        sources.push(src);
    }
    let mut trainer = Trainer::new(overfit_config(13), sources).unwrap();
    // checkpoint selection on val: the worse of the two sources decides
    let mut best: Option<(f64, u64, Checkpoint)> = None;
    while trainer.step_count() < CONFLICT_MAX_STEPS {
        trainer.train_step().unwrap();
        if !trainer.step_count().is_multiple_of(50) {
            continue;
        }
        let worst = held_out
            .iter()
            .map(|(q, val, _)| evaluate(trainer.model(), val, q, 8).unwrap().iou)
            .fold(f64::INFINITY, f64::min);
        if best.as_ref().is_none_or(|(b, _, _)| worst > *b) {
            best = Some((worst, trainer.step_count(), trainer.checkpoint().unwrap()));
        }
        if worst >= 0.90 {
            break;
        }
    }
    let (val_iou, step, ckpt) = best.expect("at least one evaluation");
    let model = ckpt.model().unwrap();
    let ious: Vec<f64> = held_out
        .iter()
        .map(|(q, _, test)| evaluate(&model, test, q, 8).unwrap().iou)
        .collect();
    Outcome {
        pass: ious.iter().all(|&v| v >= 0.90),
        detail: format!(
            "test IoU squares-positive {:.4}, circles-positive {:.4} (checkpoint of step {step}, worst val IoU {val_iou:.4})",
            ious[0], ious[1]
        ),
    }
}

const CONFLICT_TRAIN: usize = 512;
const CONFLICT_MAX_STEPS: u64 = 4000;

// ------------------------------------------------------------ 8. determinism

/// Largest elementwise difference over every tensor, relative to the largest
/// magnitude in `b`. Tensors whose gradient is zero up to rounding (attention
/// key biases, say) would make a per-tensor ratio meaningless.
fn rel_diff(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (k, x) in a {
        let Some(y) = b.get(k) else { return f64::INFINITY };
        let (x, y) = (flat(x), flat(y));
        scale = y.iter().fold(scale, |m, v| m.max(v.abs()));
        diff = x.iter().zip(&y).fold(diff, |m, (p, q)| m.max((p - q).abs()));
    }
    diff / scale.max(f64::MIN_POSITIVE)
}

fn criterion_determinism() -> Outcome {
    let source = TrainSource::new(tiny_scd_samples(8)).unwrap();
    let base = TrainConfig {
        learning_rate: 1e-3,
        model: tiny_model(),
        seed: 8,
        ..Default::default()
    };
    let run = |cfg: TrainConfig, steps: usize| {
        let mut t = Trainer::new(cfg, vec![source.clone()]).unwrap();
        for _ in 0..steps {
            t.train_step().unwrap();
        }
        t
    };
    let a = run(base.clone(), 4);
    let b = run(base.clone(), 4);
    let identical = a.log() == b.log();

    let f64_cfg = |batch_size, grad_accum_steps| TrainConfig {
        batch_size,
        grad_accum_steps,
        precision: Precision::F64,
        ..base.clone()
    };
    let before = run(f64_cfg(8, 1), 0).model().params().snapshot().unwrap();
    let micro = run(f64_cfg(1, 8), 1);
    let full = run(f64_cfg(8, 1), 1);
    let grads = rel_diff(micro.last_gradients(), full.last_gradients());
    let delta = |t: &Trainer| -> BTreeMap<String, Tensor> {
        t.model()
            .params()
            .snapshot()
            .unwrap()
            .into_iter()
            .map(|(k, v)| {
                let d = (v - &before[&k]).unwrap();
                (k, d)
            })
            .collect()
    };
    let updates = rel_diff(&delta(&micro), &delta(&full));
    Outcome {
        pass: identical && grads <= 1e-6 && updates <= 1e-6,
        detail: format!(
            "loss logs {}; accum 8x1 vs 1x8: gradient rel diff {grads:.1e}, update rel diff {updates:.1e}",
            if identical { "identical" } else { "differ" }
        ),
    }
}

// -------------------------------------------------------------------- runner

/// Criteria to run: all, or the comma-separated ids in `ACCEPTANCE_ONLY`.
fn selected() -> Vec<usize> {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(v) if !v.trim().is_empty() => v
            .split(',')
            .map(|s| s.trim().parse().expect("ACCEPTANCE_ONLY takes criterion ids like 2,8"))
            .collect(),
        _ => (1..=9).collect(),
    }
}

#[test]
fn acceptance_suite() {
    let want = selected();
    let mut failed = Vec::new();
    let mut record = |id: usize, name: &str, o: Outcome, t: Duration, limit: Option<u64>| {
        let late = limit.is_some_and(|s| t > Duration::from_secs(s));
        let o = if late {
            Outcome {
                pass: false,
                detail: format!("{} [over the {} s budget]", o.detail, limit.unwrap()),
            }
        } else {
            o
        };
        emit(id, name, &o, t);
        if !o.pass {
            failed.push(id);
        }
    };

    if want.contains(&1) {
        let (o, t) = timed(criterion_metrics);
        record(1, "metric oracle", o, t, Some(30));
    }
    if want.contains(&2) {
        let (o, t) = timed(criterion_gradients);
        record(2, "gradient suite", o, t, Some(120));
    }

    // 6, 7 and 9 inspect the model trained for 3
    let run = [3, 6, 7, 9].iter().any(|i| want.contains(i)).then(|| {
        let start = Instant::now();
        let run = bcd_overfit();
        (run, start.elapsed())
    });
    if let Some((run, t)) = &run {
        if want.contains(&3) {
            record(
                3,
                "bcd overfit",
                Outcome {
                    pass: run.iou >= 0.95,
                    detail: format!("train IoU {:.4} after {} steps", run.iou, run.steps),
                },
                *t,
                Some(300),
            );
        }
    }

    if want.contains(&4) {
        let (o, t) = timed(criterion_scd_overfit);
        record(4, "scd overfit", o, t, Some(600));
    }
    if want.contains(&5) {
        let (o, t) = timed(criterion_conflict);
        record(5, "conflict joint training", o, t, None);
    }
    if let Some((run, _)) = &run {
        if want.contains(&6) {
            let (o, t) = timed(|| criterion_gating(run));
            record(6, "gating exactness", o, t, None);
        }
        if want.contains(&7) {
            let (o, t) = timed(|| criterion_tokens(run));
            record(7, "token contract", o, t, None);
        }
    }
    if want.contains(&8) {
        let (o, t) = timed(criterion_determinism);
        record(8, "determinism/accumulation", o, t, None);
    }
    if let Some((run, _)) = &run {
        if want.contains(&9) {
            let (o, t) = timed(|| criterion_identity(run));
            record(9, "identity pair", o, t, None);
        }
    }

    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
