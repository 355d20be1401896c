//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are printed as they are
//! produced; the process fails if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sand::data::{generate, step_labels_from, Dataset, GenSpec, Generator, Splits};
use sand::encoder::{build_mask, AttentionPath, Forward, HeadSpec, ModelConfig, SandModel, TaskKind};
use sand::heads::{binary_loss, MultiTaskWeights};
use sand::interp::{dense_interpolate, InterpWeights};
use sand::metrics::{auprc, auroc, min_se_pplus, weighted_kappa};
use sand::tape::dropout_mask;
use sand::train::{compute_gradients, train, MultiBatch, TaskData, TrainConfig, TrainOutcome};
use sand::{grad_check, Result, Tape, Tensor, Var};
use sand_cli::bench::time_encoder;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let c = tape.constant(random(tape.shape(y), seed, 2.0));
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

// ---------------------------------------------------------------- 1

type Op = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn primitive_cases() -> Vec<(&'static str, Tensor, Op)> {
    let x = random(&[2, 3, 4], 1, 2.0);
    let other = random(&[2, 3, 4], 2, 2.0);
    let row = random(&[4], 3, 2.0);
    let w = random(&[4, 5], 4, 1.0);
    let mask = dropout_mask(&[2, 3, 4], 0.3, &mut ChaCha8Rng::seed_from_u64(5));
    let conv_w = random(&[5, 4, 3], 6, 1.0);
    let conv_b = random(&[5], 7, 1.0);
    let gamma = random(&[4], 8, 1.5);
    let (q, k, v) = (random(&[2, 6, 4], 9, 1.0), random(&[2, 6, 4], 10, 1.0), random(&[2, 6, 4], 11, 1.0));
    let c = |t: &Tensor| t.clone();
    let mut cases: Vec<(&'static str, Tensor, Op)> = vec![
        ("add", c(&x), Box::new(move |t, a| {
            let o = t.constant(other.clone());
            t.add(a, o)
        })),
        ("add-broadcast", c(&row), Box::new({
            let x = x.clone();
            move |t, r| {
                let xv = t.constant(x.clone());
                t.add(xv, r)
            }
        })),
        ("sub", c(&x), Box::new(|t, a| {
            let o = t.constant(random(&[2, 3, 4], 12, 2.0));
            t.sub(o, a)
        })),
        ("mul", c(&x), Box::new(|t, a| t.mul(a, a))),
        ("affine", c(&x), Box::new(|t, a| Ok(t.affine(a, -1.5, 0.25)))),
        ("scale", c(&x), Box::new(|t, a| Ok(t.scale(a, 0.7)))),
        ("relu", c(&x), Box::new(|t, a| Ok(t.relu(a)))),
        ("sigmoid", c(&x), Box::new(|t, a| Ok(t.sigmoid(a)))),
        ("log", c(&x), Box::new(|t, a| {
            let s = t.sigmoid(a);
            Ok(t.clamp_log(s, 1e-12, 1.0 - 1e-12))
        })),
        ("dropout-mask", c(&x), Box::new(move |t, a| t.mask_mul(a, mask.clone()))),
        ("mean", c(&x), Box::new(|t, a| {
            let sq = t.mul(a, a)?;
            Ok(t.mean(sq))
        })),
        ("reshape", c(&x), Box::new(|t, a| t.reshape(a, &[6, 4]))),
        ("transpose", c(&x), Box::new(|t, a| t.transpose(a, 0, 2))),
        ("concat", c(&x), Box::new(|t, a| t.concat(&[a, a], 1))),
        ("slice", c(&x), Box::new(|t, a| t.slice(a, 2, 1, 2))),
        ("matmul-lhs", c(&x), Box::new(move |t, a| {
            let wv = t.constant(w.clone());
            t.matmul(a, wv)
        })),
        ("matmul-rhs", random(&[4, 5], 13, 1.0), Box::new({
            let x = x.clone();
            move |t, wv| {
                let xv = t.constant(x.clone());
                t.matmul(xv, wv)
            }
        })),
        ("softmax", c(&x), Box::new(|t, a| t.softmax_last(a))),
        ("conv1d", c(&x), Box::new({
            let (cw, cb) = (conv_w.clone(), conv_b.clone());
            move |t, a| {
                let (wv, bv) = (t.constant(cw.clone()), t.constant(cb.clone()));
                t.conv1d(a, wv, bv)
            }
        })),
        ("conv1d-weight", conv_w.clone(), Box::new({
            let (x, cb) = (x.clone(), conv_b.clone());
            move |t, wv| {
                let (xv, bv) = (t.constant(x.clone()), t.constant(cb.clone()));
                t.conv1d(xv, wv, bv)
            }
        })),
        ("conv1d-bias", conv_b, Box::new({
            let x = x.clone();
            move |t, bv| {
                let (xv, wv) = (t.constant(x.clone()), t.constant(conv_w.clone()));
                t.conv1d(xv, wv, bv)
            }
        })),
        ("layer-norm", c(&x), Box::new({
            let g = gamma.clone();
            move |t, a| {
                let (gv, bv) = (t.constant(g.clone()), t.constant(random(&[4], 14, 1.0)));
                t.layer_norm(a, gv, bv)
            }
        })),
        ("layer-norm-gamma", gamma, Box::new({
            let x = x.clone();
            move |t, gv| {
                let (xv, bv) = (t.constant(x.clone()), t.constant(random(&[4], 14, 1.0)));
                t.layer_norm(xv, gv, bv)
            }
        })),
    ];
    for (which, name) in ["banded-attention-q", "banded-attention-k", "banded-attention-v"].into_iter().enumerate() {
        let ops = [q.clone(), k.clone(), v.clone()];
        let at = ops[which].clone();
        cases.push((name, at, Box::new(move |t, a| {
            let mut vs = ops.clone().map(|o| t.constant(o));
            vs[which] = a;
            t.banded_attention::<ChaCha8Rng>(vs[0], vs[1], vs[2], 2, 2, true, None)
        })));
    }
    cases
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "");
    for (i, (name, x, f)) in primitive_cases().iter().enumerate() {
        let err = grad_check(
            |t, v| {
                let y = f(t, v)?;
                project(t, y, 100 + i as u64)
            },
            x,
            1e-5,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        if err > worst_op.0 {
            worst_op = (err, name);
        }
    }
    let model = SandModel::new(ModelConfig {
        input_dim: 3,
        d_model: 16,
        layers: 2,
        heads: 4,
        mask_window: 3,
        t_max: 8,
        seed: 21,
        tasks: vec![HeadSpec { name: "main".into(), kind: TaskKind::Binary, interp_factor: 4 }],
        ..ModelConfig::default()
    })
    .unwrap();
    let x = random(&[2, 8, 3], 22, 1.0);
    let lengths = [8, 8];
    let loss = |tape: &mut Tape, bound: &sand::encoder::Bound, xv| {
        let enc = model.encode_var(tape, bound, xv, &mut Forward::eval())?;
        let p = model.head_forward(0, tape, bound, enc.output, &lengths)?;
        binary_loss(tape, p, &[1, 0])
    };
    let mut worst_model = grad_check(
        |tape, xv| {
            let bound = model.bind(tape);
            loss(tape, &bound, xv)
        },
        &x,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    for (i, p) in model.params().iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let err = grad_check(
            |tape, pv| {
                let mut bound = model.bind(tape);
                bound.replace(i, pv);
                let xv = tape.constant(x.clone());
                loss(tape, &bound, xv)
            },
            &p.value,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst_model = worst_model.max(err);
    }
    let elapsed = start.elapsed();
    ensure(
        worst_op.0 < 1e-6 && worst_model < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "worst primitive {:.2e} ({}), full model {:.2e}, {:.1}s",
            worst_op.0,
            worst_op.1,
            worst_model,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn encode(model: &SandModel, x: &Tensor, path: AttentionPath) -> Tensor {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let enc = model.encode(&mut tape, &bound, x, &mut Forward { dropout: None, path }).unwrap();
    tape.value(enc.output).clone()
}

fn step_diff(a: &Tensor, b: &Tensor, t: usize) -> f64 {
    let d = a.shape()[2];
    (0..d).map(|j| (a.at(&[0, t, j]) - b.at(&[0, t, j])).abs()).fold(0.0, f64::max)
}

fn causal_config() -> ModelConfig {
    ModelConfig {
        input_dim: 4,
        d_model: 16,
        layers: 2,
        heads: 4,
        mask_window: 3,
        t_max: 16,
        seed: 31,
        ..ModelConfig::default()
    }
}

fn criterion_2() -> Check {
    let model = SandModel::new(causal_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let len = 16;
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let x = random(&[1, len, 4], 1000 + trial, 1.0);
        let t = rng.random_range(0..len - 1);
        let mut y = x.clone();
        for s in t + 1..len {
            for c in 0..4 {
                let at = y.offset(&[0, s, c]);
                y.data_mut()[at] += rng.random_range(-5.0..5.0);
            }
        }
        let (a, b) = (encode(&model, &x, AttentionPath::Banded), encode(&model, &y, AttentionPath::Banded));
        for s in 0..=t {
            worst = worst.max(step_diff(&a, &b, s));
        }
    }
    // Locality: output t depends on inputs t - N·r ..= t only.
    let reach = 2 * 3;
    let t = 14;
    let x = random(&[1, len, 4], 33, 1.0);
    let a = encode(&model, &x, AttentionPath::Banded);
    let mut outside = 0.0f64;
    let mut inside = f64::INFINITY;
    for s in 0..=t {
        let mut y = x.clone();
        let at = y.offset(&[0, s, 0]);
        y.data_mut()[at] += 3.0;
        let moved = step_diff(&a, &encode(&model, &y, AttentionPath::Banded), t);
        if s + reach < t {
            outside = outside.max(moved);
        } else {
            inside = inside.min(moved);
        }
    }
    ensure(
        worst <= 1e-12 && outside <= 1e-12 && inside > 1e-9,
        format!(
            "max past change {worst:.1e} over 100 inputs; beyond N·r={reach}: {outside:.1e}, within: min {inside:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Check {
    let cfg = causal_config();
    let model = SandModel::new(cfg.clone()).unwrap();
    let len = 12;
    let x = random(&[2, len, 4], 34, 1.0);
    let mask = build_mask(len, cfg.mask_window, true).unwrap();
    let (mut sum_err, mut outside) = (0.0f64, 0usize);
    for path in [AttentionPath::Banded, AttentionPath::Dense] {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = model.encode(&mut tape, &bound, &x, &mut Forward { dropout: None, path }).unwrap();
        for rec in enc.attention {
            let w = SandModel::attention_weights(&tape, rec).unwrap();
            for b in 0..2 {
                for h in 0..cfg.heads {
                    for i in 0..len {
                        let mut total = 0.0;
                        for j in 0..len {
                            let v = w.at(&[b, h, i, j]);
                            if mask.at(&[i, j]) == 0.0 {
                                total += v;
                            } else if v != 0.0 {
                                outside += 1;
                            }
                        }
                        sum_err = sum_err.max((total - 1.0).abs());
                    }
                }
            }
        }
    }
    ensure(
        sum_err <= 1e-12 && outside == 0,
        format!("max |row sum - 1| = {sum_err:.1e}, nonzero weights outside band: {outside}"),
    )
}

// ---------------------------------------------------------------- 4

/// Interpolation accumulated step by step and slot by slot, as a loop.
fn interp_loop(seq: &[f64], len: usize, d: usize, factor: usize) -> Vec<f64> {
    let mut u = vec![0.0; factor * d];
    for t in 1..=len {
        let s = (factor * t) as f64 / len as f64;
        for m in 1..=factor {
            let w = (1.0 - (s - m as f64).abs() / factor as f64).powi(2);
            for j in 0..d {
                u[(m - 1) * d + j] += w * seq[(t - 1) * d + j];
            }
        }
    }
    u
}

fn criterion_4() -> Check {
    let d = 3;
    let mut worst = 0.0f64;
    for len in 1..=64 {
        let seq = random(&[1, len, d], 40 + len as u64, 2.0);
        for factor in 1..=len {
            let mut tape = Tape::new();
            let s = tape.constant(seq.clone());
            let u = dense_interpolate(&mut tape, s, &InterpWeights::build(len, factor).unwrap()).unwrap();
            let oracle = interp_loop(seq.data(), len, d, factor);
            for (a, o) in tape.value(u).data().iter().zip(&oracle) {
                worst = worst.max((a - o).abs());
            }
        }
    }
    let w = InterpWeights::build(5, 3).unwrap();
    let row: Vec<f64> = (0..3).map(|m| w.get(0, m)).collect();
    let expect = [0.75111, 0.28444, 0.04000];
    let row_err = row.iter().zip(&expect).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
    ensure(
        worst <= 1e-12 && row_err <= 1e-5,
        format!("matrix vs loop {worst:.1e} for T<=64; T=5 M=3 row 1 = {row:.5?}"),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let y: Vec<bool> = (0..200).map(|_| rng.random_bool(0.35)).collect();
        let s: Vec<f64> = y
            .iter()
            .map(|&l| ((rng.random::<f64>() + if l { 0.25 } else { 0.0 }) * 25.0).round() / 25.0)
            .collect();
        // Every (positive, negative) pair.
        let (mut good, mut pairs) = (0.0, 0.0);
        for i in 0..200 {
            for j in 0..200 {
                if y[i] && !y[j] {
                    pairs += 1.0;
                    good += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        // Every threshold, counted from scratch.
        let mut th = s.clone();
        th.sort_by(|a, b| b.total_cmp(a));
        th.dedup();
        let p = y.iter().filter(|&&v| v).count() as f64;
        let pts: Vec<(f64, f64)> = th
            .iter()
            .map(|&t| {
                let tp = s.iter().zip(&y).filter(|(v, l)| **v >= t && **l).count() as f64;
                let called = s.iter().filter(|v| **v >= t).count() as f64;
                (tp / p, tp / called)
            })
            .collect();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for k in 0..pts.len() {
            let best = pts[k..].iter().map(|q| q.1).fold(0.0, f64::max);
            ap += (pts[k].0 - prev) * best;
            prev = pts[k].0;
        }
        let minse = pts.iter().map(|(r, q)| r.min(*q)).fold(0.0, f64::max);
        worst = worst
            .max((auroc(&s, &y).unwrap() - good / pairs).abs())
            .max((auprc(&s, &y).unwrap() - ap).abs())
            .max((min_se_pplus(&s, &y).unwrap() - minse).abs());
    }
    // Weighted kappa from the confusion matrix formula.
    let mut kappa_err = 0.0f64;
    let matrices: [&[&[f64]]; 3] = [
        &[&[10.0, 3.0, 1.0, 0.0], &[2.0, 12.0, 4.0, 1.0], &[0.0, 3.0, 9.0, 2.0], &[1.0, 0.0, 2.0, 8.0]],
        &[&[5.0, 5.0, 0.0], &[0.0, 0.0, 5.0], &[5.0, 0.0, 0.0]],
        &[&[7.0, 1.0], &[2.0, 4.0]],
    ];
    for m in matrices {
        let c = m.len();
        let n: f64 = m.iter().flat_map(|r| r.iter()).sum();
        let (mut o, mut e) = (0.0, 0.0);
        let (mut t, mut pr) = (Vec::new(), Vec::new());
        for i in 0..c {
            for j in 0..c {
                let w = i.abs_diff(j) as f64 / (c - 1) as f64;
                let row: f64 = m[i].iter().sum();
                let col: f64 = (0..c).map(|k| m[k][j]).sum();
                o += w * m[i][j];
                e += w * row * col / n;
                for _ in 0..m[i][j] as usize {
                    t.push(i);
                    pr.push(j);
                }
            }
        }
        kappa_err = kappa_err.max((weighted_kappa(&t, &pr, c).unwrap() - (1.0 - o / e)).abs());
    }
    ensure(
        worst <= 1e-12 && kappa_err <= 1e-12,
        format!("threshold metrics vs brute force {worst:.1e} (10 × 200 samples); kappa vs formula {kappa_err:.1e}"),
    )
}

// ---------------------------------------------------------------- shared

fn splits(spec: &GenSpec) -> Splits {
    let (ds, m) = generate(spec).unwrap();
    Splits::from_counts(&ds, m.counts)
}

fn model(input_dim: usize, d: usize, layers: usize, r: usize, t_max: usize, tasks: Vec<HeadSpec>) -> SandModel {
    SandModel::new(ModelConfig {
        input_dim,
        d_model: d,
        heads: 4,
        layers,
        mask_window: r,
        t_max,
        seed: 7,
        dropout_residue: 0.1,
        dropout_attention: 0.1,
        tasks,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn head(name: &str, kind: TaskKind, m: usize) -> HeadSpec {
    HeadSpec { name: name.into(), kind, interp_factor: m }
}

fn best_headline(out: &TrainOutcome, task: usize) -> f64 {
    out.best().and_then(|b| b.val[task].headline()).unwrap_or(f64::NAN)
}

fn fit(model: &mut SandModel, tasks: &[(usize, &Dataset, &Dataset)], cfg: &TrainConfig) -> TrainOutcome {
    let data: Vec<TaskData> = tasks.iter().map(|&(head, train, val)| TaskData { head, train, val }).collect();
    train(model, &data, cfg, &MultiTaskWeights::default()).unwrap()
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Check {
    let s = splits(&GenSpec::new(Generator::WindowedBinary, 2000, 48, 8, 61));
    let mut m = model(8, 32, 2, 8, 48, vec![head("ihm", TaskKind::Binary, 6)]);
    let cfg = TrainConfig { lr: 1e-3, batch_size: 32, epochs: 20, patience: 5, seed: 62, ..TrainConfig::default() };
    let start = Instant::now();
    let out = fit(&mut m, &[(0, &s.train, &s.val)], &cfg);
    let elapsed = start.elapsed();
    let first = out.history.iter().find(|r| r.val[0].headline().unwrap_or(0.0) >= 0.95).map(|r| r.epoch);
    let auc = best_headline(&out, 0);
    ensure(
        auc >= 0.95 && first.is_some() && elapsed < Duration::from_secs(120),
        format!(
            "val AUROC {auc:.4} (>= 0.95 first at epoch {first:?}), {} epochs in {:.1}s on {} thread(s)",
            out.history.len(),
            elapsed.as_secs_f64(),
            rayon_threads()
        ),
    )
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get().min(4))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    let mut spec = GenSpec::new(Generator::LongRange, 3000, 100, 8, 71);
    spec.labels = 3;
    spec.motif_pos = 1;
    let s = splits(&spec);
    let cfg = TrainConfig { lr: 3e-3, batch_size: 32, epochs: 14, patience: 0, seed: 72, ..TrainConfig::default() };
    let mut results = Vec::new();
    for r in [98, 99] {
        let mut m = SandModel::new(ModelConfig {
            input_dim: 8,
            d_model: 32,
            heads: 4,
            layers: 1,
            mask_window: r,
            t_max: 100,
            seed: 73,
            tasks: vec![head("ph", TaskKind::Multilabel(3), 4)],
            ..ModelConfig::default()
        })
        .unwrap();
        let out = fit(&mut m, &[(0, &s.train, &s.val)], &cfg);
        results.push((r, best_headline(&out, 0)));
    }
    let (short, long) = (results[0].1, results[1].1);
    ensure(
        short <= 0.6 && long >= 0.9,
        format!("macro AUROC {short:.4} at N·r=98, {long:.4} at N·r=99 (T=100, motif at t=1)"),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let time = |t, masked| time_encoder(t, 16, 64, 1, 8, 8, 1, masked, 7, 81).unwrap();
    let banded = time(512, true) / time(256, true);
    let dense = time(512, false) / time(256, false);
    ensure(
        (1.6..=2.6).contains(&banded) && dense >= 3.2,
        format!("time(T=512)/time(T=256) at r=16, d=64: masked {banded:.2}, unmasked {dense:.2}"),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let s = splits(&GenSpec::new(Generator::WindowedBinary, 2000, 48, 8, 91));
    let dc_train = step_labels_from(&s.train, 1, 0.3).unwrap();
    let dc_val = step_labels_from(&s.val, 1, 0.3).unwrap();
    let cfg = TrainConfig { lr: 1e-3, batch_size: 32, epochs: 8, patience: 0, seed: 92, ..TrainConfig::default() };
    let ihm = head("ihm", TaskKind::Binary, 6);
    let dc = head("dc", TaskKind::StepBinary, 1);

    let mut joint = model(8, 32, 2, 8, 48, vec![ihm.clone(), dc.clone()]);
    let out = fit(&mut joint, &[(0, &s.train, &s.val), (1, &dc_train, &dc_val)], &cfg);
    let joint_scores = [best_headline(&out, 0), best_headline(&out, 1)];
    let losses: Vec<f64> = out.history.iter().take(5).map(|r| r.train_loss).collect();
    let monotone = losses.windows(2).all(|w| w[1] < w[0]);

    let mut single = Vec::new();
    for (h, train_ds, val_ds) in [(ihm, &s.train, &s.val), (dc, &dc_train, &dc_val)] {
        let mut m = model(8, 32, 2, 8, 48, vec![h]);
        let out = fit(&mut m, &[(0, train_ds, val_ds)], &cfg);
        single.push(best_headline(&out, 0));
    }
    let gap = (joint_scores[0] - single[0]).abs().max((joint_scores[1] - single[1]).abs());

    // Gradient of the weighted objective against the weighted per-task sum.
    let fresh = model(8, 32, 2, 8, 48, vec![head("ihm", TaskKind::Binary, 6), head("dc", TaskKind::StepBinary, 1)]);
    let train_ds = sand::data::standardize(&s.train, None).unwrap().0;
    let dc_ds = step_labels_from(&train_ds, 1, 0.3).unwrap();
    let idx: Vec<usize> = (0..24).collect();
    let both = MultiBatch::gather(&[&train_ds, &dc_ds], &idx).unwrap();
    let w = MultiTaskWeights::default();
    let (wi, wd) = (w.mortality, w.decompensation);
    let g = compute_gradients(&fresh, &[0, 1], &[wi, wd], &both, 1, None).unwrap();
    let gi = compute_gradients(&fresh, &[0], &[1.0], &MultiBatch::gather(&[&train_ds], &idx).unwrap(), 1, None).unwrap();
    let gd = compute_gradients(&fresh, &[1], &[1.0], &MultiBatch::gather(&[&dc_ds], &idx).unwrap(), 1, None).unwrap();
    let mut grad_err = 0.0f64;
    for ((a, b), c) in g.grads.iter().zip(&gi.grads).zip(&gd.grads) {
        let a = a.as_ref().map(|t| t.data().to_vec());
        let n = a.as_ref().map_or(0, Vec::len);
        let b = b.as_ref().map_or(vec![0.0; n], |t| t.data().to_vec());
        let c = c.as_ref().map_or(vec![0.0; n], |t| t.data().to_vec());
        for i in 0..n {
            let expect = wi * b[i] + wd * c[i];
            grad_err = grad_err.max((a.as_ref().unwrap()[i] - expect).abs());
        }
    }

    ensure(
        gap <= 0.05 && grad_err <= 1e-10 && monotone,
        format!(
            "λ={:?}; joint ihm AUROC {:.4} / dc AUROC {:.4} vs single {:.4} / {:.4} (max gap {gap:.4}); \
             gradient vs weighted sum {grad_err:.1e}; joint loss falls over epochs 1-5: {monotone}",
            w.as_array(),
            joint_scores[0],
            joint_scores[1],
            single[0],
            single[1]
        ),
    )
}

// ---------------------------------------------------------------- 10

fn sand(args: &[&str], dir: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sand")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "sand {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn criterion_10() -> Check {
    let root = tempfile::tempdir().unwrap();
    let config = "d_model = 32\nheads = 4\nlayers = 2\nmask_window = 6\ninterp_factor = 6\n\
                  dropout_residue = 0.1\ndropout_attention = 0.1\nbatch_size = 16\nepochs = 3\n";
    std::fs::write(root.path().join("model.kv"), config).unwrap();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let d = root.path();
        sand(&["gen", "--task", "windowed-binary", "--n", "300", "--len", "24", "--seed", "5", "--out", &format!("{run}/data")], d);
        sand(
            &[
                "train", "--config", "model.kv", "--train", &format!("{run}/data/train.ndjson"), "--val",
                &format!("{run}/data/val.ndjson"), "--seed", "11", "--out", &format!("{run}/model"),
            ],
            d,
        );
        sand(
            &["eval", "--checkpoint", &format!("{run}/model/model.ckpt"), "--data", &format!("{run}/data/test.ndjson"), "--out", &format!("{run}/model")],
            d,
        );
        let read = |p: &str| std::fs::read(d.join(run).join(p)).unwrap();
        files.push([
            read("data/train.ndjson"),
            read("model/model.ckpt"),
            read("model/history.csv"),
            read("model/metrics.kv"),
            read("model/eval.main.kv"),
        ]);
    }
    let same = files[0] == files[1];
    ensure(
        same,
        format!(
            "two gen/train/eval runs: dataset, checkpoint ({} bytes), history, metrics and eval report {}",
            files[0][1].len(),
            if same { "bitwise identical" } else { "differ" }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient correctness", criterion_1),
        ("causality and locality", criterion_2),
        ("attention contract", criterion_3),
        ("dense interpolation oracle", criterion_4),
        ("metric oracles", criterion_5),
        ("learnability", criterion_6),
        ("long-range dependency", criterion_7),
        ("complexity", criterion_8),
        ("multi-task", criterion_9),
        ("reproducibility", criterion_10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|k| k != n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n:>2} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
