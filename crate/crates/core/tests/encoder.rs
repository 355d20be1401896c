use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sand::encoder::checkpoint;
use sand::encoder::{
    build_mask, scaled_dot_attention, AttentionPath, Forward, HeadSpec, ModelConfig, SandModel, TaskKind,
};
use sand::heads::binary_loss;
use sand::{grad_check, Error, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        d_model: 16,
        layers: 2,
        heads: 4,
        mask_window: 2,
        t_max: 32,
        seed: 11,
        tasks: vec![HeadSpec {
            name: "main".into(),
            kind: TaskKind::Binary,
            interp_factor: 3,
        }],
        ..ModelConfig::default()
    }
}

fn encode(model: &SandModel, x: &Tensor, path: AttentionPath) -> Tensor {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut fwd = Forward { dropout: None, path };
    let enc = model.encode(&mut tape, &bound, x, &mut fwd).unwrap();
    tape.value(enc.output).clone()
}

fn step_diff(a: &Tensor, b: &Tensor, t: usize) -> f64 {
    let (bs, d) = (a.shape()[0], a.shape()[2]);
    let mut worst = 0.0f64;
    for row in 0..bs {
        for j in 0..d {
            worst = worst.max((a.at(&[row, t, j]) - b.at(&[row, t, j])).abs());
        }
    }
    worst
}

fn set(model: &mut SandModel, name: &str, value: Tensor) {
    model.params_mut().by_name_mut(name).unwrap().value = value;
}

#[test]
fn zero_embedding_exposes_positional_rows() {
    let mut model = SandModel::new(small_config()).unwrap();
    let w = model.params().by_name("embed.conv.weight").unwrap().value.shape().to_vec();
    set(&mut model, "embed.conv.weight", Tensor::zeros(&w));
    let table = model.params().by_name("embed.positional").unwrap().value.clone();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(random(&[2, 5, 3], 1));
    let e = model.embed_input(&mut tape, &bound, x, &mut Forward::eval()).unwrap();
    let e = tape.value(e);
    for b in 0..2 {
        for t in 0..5 {
            for j in 0..16 {
                assert_eq!(e.at(&[b, t, j]), table.at(&[t, j]));
            }
        }
    }
}

#[test]
fn embedding_is_symmetric_under_channel_relabeling() {
    let model = SandModel::new(ModelConfig { kernel_size: 3, ..small_config() }).unwrap();
    let perm = [2usize, 0, 1];
    let x = random(&[2, 6, 3], 2);
    let mut xp = x.clone();
    for b in 0..2 {
        for t in 0..6 {
            for c in 0..3 {
                let at = xp.offset(&[b, t, c]);
                xp.data_mut()[at] = x.at(&[b, t, perm[c]]);
            }
        }
    }
    let w = model.params().by_name("embed.conv.weight").unwrap().value.clone();
    let mut wp = w.clone();
    for o in 0..16 {
        for c in 0..3 {
            for k in 0..3 {
                let at = wp.offset(&[o, c, k]);
                wp.data_mut()[at] = w.at(&[o, perm[c], k]);
            }
        }
    }
    let mut permuted = model.clone();
    set(&mut permuted, "embed.conv.weight", wp);

    let embed = |m: &SandModel, x: &Tensor| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let e = m.embed_input(&mut tape, &bound, xv, &mut Forward::eval()).unwrap();
        tape.value(e).clone()
    };
    assert!(embed(&model, &x).max_abs_diff(&embed(&permuted, &xp)) < 1e-12);
}

#[test]
fn embedding_matches_hand_convolution() {
    // Kernel 3 over ones(1, 3, 2): w[o, c, k] = 0.01·(o + 1) + 0.1·c + 0.001·k,
    // bias[o] = 0.5 - 0.01·o, zero padding at both ends.
    let cfg = ModelConfig {
        input_dim: 2,
        d_model: 4,
        heads: 2,
        kernel_size: 3,
        ..small_config()
    };
    let mut model = SandModel::new(cfg).unwrap();
    let w = |o: usize, c: usize, k: usize| 0.01 * (o + 1) as f64 + 0.1 * c as f64 + 0.001 * k as f64;
    let mut wt = Tensor::zeros(&[4, 2, 3]);
    for o in 0..4 {
        for c in 0..2 {
            for k in 0..3 {
                let at = wt.offset(&[o, c, k]);
                wt.data_mut()[at] = w(o, c, k);
            }
        }
    }
    set(&mut model, "embed.conv.weight", wt);
    set(
        &mut model,
        "embed.conv.bias",
        Tensor::new(vec![4], (0..4).map(|o| 0.5 - 0.01 * o as f64).collect()).unwrap(),
    );
    let table = model.params().by_name("embed.positional").unwrap().value.clone();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(Tensor::ones(&[1, 3, 2]));
    let e = model.embed_input(&mut tape, &bound, x, &mut Forward::eval()).unwrap();
    let e = tape.value(e);
    for t in 0..3usize {
        for o in 0..4 {
            let mut expect = 0.5 - 0.01 * o as f64 + table.at(&[t, o]);
            for k in 0..3usize {
                let src = t as isize + k as isize - 1;
                if (0..3).contains(&src) {
                    expect += w(o, 0, k) + w(o, 1, k);
                }
            }
            assert!((e.at(&[0, t, o]) - expect).abs() < 1e-14, "t={t} o={o}");
        }
    }
}

#[test]
fn sequences_longer_than_t_max_are_rejected() {
    let model = SandModel::new(small_config()).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = Tensor::zeros(&[1, 33, 3]);
    let err = model.encode(&mut tape, &bound, &x, &mut Forward::eval()).err().unwrap();
    assert!(matches!(err, Error::Capacity { len: 33, t_max: 32 }));
}

#[test]
fn identical_keys_average_the_open_values() {
    let (t, dk, r) = (5, 2, 2);
    let mut tape = Tape::new();
    let q = tape.constant(random(&[1, t, dk], 3));
    let k = tape.constant(Tensor::full(&[1, t, dk], 0.7));
    let vt = random(&[1, t, dk], 4);
    let v = tape.constant(vt.clone());
    let mask = tape.constant(build_mask(t, r, true).unwrap());
    let (out, _) = scaled_dot_attention::<ChaCha8Rng>(&mut tape, q, k, v, Some(mask), None).unwrap();
    let out = tape.value(out);
    for i in 0..t {
        let lo = i.saturating_sub(r);
        for j in 0..dk {
            let mean = (lo..=i).map(|s| vt.at(&[0, s, j])).sum::<f64>() / (i - lo + 1) as f64;
            assert!((out.at(&[0, i, j]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn aligned_large_key_dominates() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
    let k = tape.constant(Tensor::from_rows(&[&[0.0, 1.0], &[100.0, 0.0]]).unwrap());
    let v = tape.constant(Tensor::from_rows(&[&[-3.0, 5.0], &[2.0, 7.0]]).unwrap());
    let (out, _) = scaled_dot_attention::<ChaCha8Rng>(&mut tape, q, k, v, None, None).unwrap();
    assert!(tape.value(out).max_abs_diff(&Tensor::from_rows(&[&[2.0, 7.0]]).unwrap()) < 1e-12);
}

#[test]
fn single_head_attention_matches_hand_evaluation() {
    let qm = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let km = [[1.0, 2.0], [0.5, -1.0], [0.0, 1.0]];
    let vm = [[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]];
    let rows = |m: &[[f64; 2]; 3]| Tensor::from_rows(&[&m[0][..], &m[1][..], &m[2][..]]).unwrap();
    let mut tape = Tape::new();
    let q = tape.constant(rows(&qm));
    let k = tape.constant(rows(&km));
    let v = tape.constant(rows(&vm));
    let mask = tape.constant(build_mask(3, 10, true).unwrap());
    let (out, _) = scaled_dot_attention::<ChaCha8Rng>(&mut tape, q, k, v, Some(mask), None).unwrap();
    let out = tape.value(out);
    for t in 0..3 {
        let scores: Vec<f64> = (0..=t)
            .map(|s| (qm[t][0] * km[s][0] + qm[t][1] * km[s][1]) / 2f64.sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..2 {
            let expect: f64 = (0..=t).map(|s| scores[s].exp() / z * vm[s][j]).sum();
            assert!((out.at(&[t, j]) - expect).abs() < 1e-14);
        }
    }
}

fn layer_norm_rows(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for v in row.iter_mut() {
            *v = (*v - mean) / (var + 1e-5).sqrt();
        }
    }
    out
}

#[test]
fn zero_sublayers_leave_two_layer_norms() {
    let mut model = SandModel::new(ModelConfig { layers: 1, ..small_config() }).unwrap();
    for p in model.params_mut().iter_mut() {
        if p.name.starts_with("block0.attn") || p.name.starts_with("block0.ff") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let x = random(&[2, 5, 16], 5);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let (y, _) = model.attention_module(0, &mut tape, &bound, xv, &mut Forward::eval()).unwrap();
    let expect = layer_norm_rows(&layer_norm_rows(&x));
    assert!(tape.value(y).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn one_layer_encoder_is_embedding_then_module() {
    let model = SandModel::new(ModelConfig { layers: 1, ..small_config() }).unwrap();
    let x = random(&[2, 7, 3], 6);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let e = model.embed_input(&mut tape, &bound, xv, &mut Forward::eval()).unwrap();
    let (y, _) = model.attention_module(0, &mut tape, &bound, e, &mut Forward::eval()).unwrap();
    assert_eq!(tape.value(y), &encode(&model, &x, AttentionPath::Banded));
}

#[test]
fn eval_forward_is_bitwise_repeatable() {
    let model = SandModel::new(small_config()).unwrap();
    let x = random(&[3, 9, 3], 7);
    assert_eq!(encode(&model, &x, AttentionPath::Banded), encode(&model, &x, AttentionPath::Banded));
}

#[test]
fn banded_and_dense_paths_agree() {
    for (window, seed) in [(1, 1), (2, 2), (5, 3), (20, 4)] {
        let model = SandModel::new(ModelConfig { mask_window: window, seed, ..small_config() }).unwrap();
        let x = random(&[2, 11, 3], seed + 10);
        let a = encode(&model, &x, AttentionPath::Banded);
        let b = encode(&model, &x, AttentionPath::Dense);
        assert!(a.max_abs_diff(&b) < 1e-12, "r={window}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn future_inputs_never_reach_the_past() {
    let model = SandModel::new(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t_len = 12;
    for trial in 0..100 {
        let x = random(&[1, t_len, 3], 100 + trial);
        let t = rng.random_range(0..t_len - 1);
        let mut y = x.clone();
        for s in t + 1..t_len {
            for c in 0..3 {
                let at = y.offset(&[0, s, c]);
                y.data_mut()[at] += rng.random_range(-5.0..5.0);
            }
        }
        let a = encode(&model, &x, AttentionPath::Banded);
        let b = encode(&model, &y, AttentionPath::Banded);
        for s in 0..=t {
            assert!(step_diff(&a, &b, s) <= 1e-12, "trial {trial}, t={t}, s={s}");
        }
        assert!(step_diff(&a, &b, t_len - 1) > 0.0);
    }
}

#[test]
fn wider_kernels_leak_only_half_a_kernel_ahead() {
    let model = SandModel::new(ModelConfig { kernel_size: 3, ..small_config() }).unwrap();
    let x = random(&[1, 10, 3], 9);
    let mut y = x.clone();
    let at = y.offset(&[0, 6, 1]);
    y.data_mut()[at] += 1.0;
    let a = encode(&model, &x, AttentionPath::Banded);
    let b = encode(&model, &y, AttentionPath::Banded);
    for s in 0..5 {
        assert_eq!(step_diff(&a, &b, s), 0.0);
    }
    assert!(step_diff(&a, &b, 5) > 0.0);
}

#[test]
fn information_travels_at_most_layers_times_window() {
    // N = 2, r = 2: output at t depends on inputs t - 4 ..= t only.
    let model = SandModel::new(small_config()).unwrap();
    let reach = 4;
    let t = 10;
    let x = random(&[1, 12, 3], 10);
    let a = encode(&model, &x, AttentionPath::Banded);
    for s in 0..=t {
        let mut y = x.clone();
        let at = y.offset(&[0, s, 0]);
        y.data_mut()[at] += 3.0;
        let moved = step_diff(&a, &encode(&model, &y, AttentionPath::Banded), t);
        if s + reach < t {
            assert!(moved <= 1e-12, "input {s} reached output {t}");
        } else {
            assert!(moved > 1e-9, "input {s} should reach output {t}");
        }
    }
}

#[test]
fn attention_rows_are_distributions_inside_the_band() {
    for path in [AttentionPath::Banded, AttentionPath::Dense] {
        let cfg = small_config();
        let model = SandModel::new(cfg.clone()).unwrap();
        let x = random(&[2, 9, 3], 12);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = model.encode(&mut tape, &bound, &x, &mut Forward { dropout: None, path }).unwrap();
        let mask = build_mask(9, cfg.mask_window, true).unwrap();
        for rec in enc.attention {
            let w = SandModel::attention_weights(&tape, rec).unwrap();
            assert_eq!(w.shape(), &[2, cfg.heads, 9, 9]);
            for b in 0..2 {
                for h in 0..cfg.heads {
                    for i in 0..9 {
                        let mut total = 0.0;
                        for j in 0..9 {
                            let v = w.at(&[b, h, i, j]);
                            if mask.at(&[i, j]) == 0.0 {
                                total += v;
                            } else {
                                assert_eq!(v, 0.0, "{path:?} ({i},{j})");
                            }
                        }
                        assert!((total - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn one_module_gradients() {
    let cfg = ModelConfig {
        input_dim: 2,
        d_model: 8,
        heads: 2,
        layers: 1,
        ..small_config()
    };
    let model = SandModel::new(cfg).unwrap();
    let c = random(&[1, 4, 8], 13);
    let err = grad_check(
        |tape, x| {
            let bound = model.bind(tape);
            let (y, _) = model.attention_module(0, tape, &bound, x, &mut Forward::eval())?;
            let cv = tape.constant(c.clone());
            let p = tape.mul(y, cv)?;
            Ok(tape.sum(p))
        },
        &random(&[1, 4, 8], 14),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn full_model_gradients_through_the_loss() {
    let cfg = ModelConfig {
        d_model: 16,
        layers: 2,
        heads: 4,
        kernel_size: 3,
        ..small_config()
    };
    let model = SandModel::new(cfg).unwrap();
    let x = random(&[2, 8, 3], 15);
    let lengths = [8, 6];
    let labels = [1, 0];
    let loss = |tape: &mut Tape, bound: &sand::encoder::Bound, xv| {
        let enc = model.encode_var(tape, bound, xv, &mut Forward::eval())?;
        let p = model.head_forward(0, tape, bound, enc.output, &lengths)?;
        binary_loss(tape, p, &labels)
    };

    let mut worst = grad_check(
        |tape, xv| {
            let bound = model.bind(tape);
            loss(tape, &bound, xv)
        },
        &x,
        1e-5,
    )
    .unwrap();
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
        .unwrap();
        assert!(err < 1e-4, "{}: {err}", p.name);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = ModelConfig {
        tasks: vec![
            HeadSpec { name: "ihm".into(), kind: TaskKind::Binary, interp_factor: 4 },
            HeadSpec { name: "los".into(), kind: TaskKind::Multiclass(10), interp_factor: 2 },
        ],
        learn_positional: true,
        ..small_config()
    };
    let mut model = SandModel::new(cfg).unwrap();
    model.input_stats = Some(sand::data::ChannelStats {
        mean: vec![0.1, -0.2, 0.3],
        std: vec![1.5, 1.0, 0.25],
    });
    model.heads_mut()[1].bucket_values = Some((0..10).map(|v| v as f64 * 24.0 + 0.1).collect());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.params(), model.params());
    assert_eq!(loaded.input_stats, model.input_stats);
    assert_eq!(loaded.heads()[1].bucket_values, model.heads()[1].bucket_values);
    assert_eq!(checkpoint::to_bytes(&loaded), checkpoint::to_bytes(&model));

    let x = random(&[2, 7, 3], 16);
    for head in 0..2 {
        assert_eq!(loaded.predict(head, &x, &[7, 5]).unwrap(), model.predict(head, &x, &[7, 5]).unwrap());
    }

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[40] ^= 1;
    assert!(matches!(checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { d_model: 15, ..small_config() },
        ModelConfig { input_dim: 16, ..small_config() },
        ModelConfig { kernel_size: 2, ..small_config() },
        ModelConfig { layers: 0, ..small_config() },
        ModelConfig { mask_window: 0, ..small_config() },
        ModelConfig { mask_window: 33, ..small_config() },
        ModelConfig { include_self: false, ..small_config() },
        ModelConfig { dropout_input: 1.0, ..small_config() },
    ];
    for cfg in bad {
        assert!(matches!(SandModel::new(cfg), Err(Error::Config(_))));
    }
}
