use canet::autodiff::Tape;
use canet::data::{synth_generate, Normalization, SynthSpec};
use canet::model::*;
use canet::params::ParamSet;
use canet::rng::RngState;
use canet::tensor::Tensor;
use canet::train::*;
use canet::Error;
use proptest::prelude::*;

fn tiny(variant: Variant, dropout: f64) -> Model {
    Model::new(NetworkSpec {
        model: ModelConfig {
            num_classes_a: 4,
            proj_dim: 16,
            reduction: 4,
            spatial_kernel: 3,
            dropout,
            ..ModelConfig::default()
        },
        backbone: BackboneConfig {
            widths: vec![4, 8],
            strides: vec![2, 2],
            kernel: 3,
        },
        variant,
    })
    .unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        resize_to: 32,
        crop_to: 28,
        ..TrainConfig::default()
    }
}

fn synth_prepared(n: usize, seed: u64, resize_to: usize) -> Prepared {
    let spec = SynthSpec {
        seed,
        ..SynthSpec::default()
    };
    let s = synth_generate(&spec, n).unwrap();
    Prepared::new(&s, &Normalization::compute(&s).unwrap(), resize_to).unwrap()
}

#[test]
fn adam_matches_scalar_recurrence() {
    let mut p = ParamSet::<f64>::new();
    p.insert("w", Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
    let mut adam = Adam::new(&p);
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
    let mut w = [0.5f64, -1.0, 2.0];
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    for t in 1..=6 {
        let g: Vec<f64> = (0..3).map(|i| (t as f64 * 0.7 + i as f64).sin()).collect();
        adam.step(&mut p, &[Tensor::from_f64(vec![3], &g).unwrap()], lr).unwrap();
        for i in 0..3 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
        for i in 0..3 {
            assert!((p.get("w").unwrap().data()[i] - w[i]).abs() < 1e-12);
        }
    }
    // First step moves each coordinate by lr against the gradient sign.
    let mut q = ParamSet::<f64>::new();
    q.insert("w", Tensor::zeros(vec![2])).unwrap();
    let mut a = Adam::new(&q);
    a.step(&mut q, &[Tensor::from_f64(vec![2], &[3.0, -0.2]).unwrap()], 0.1).unwrap();
    let d = q.get("w").unwrap().data().to_vec();
    assert!((d[0] + 0.1).abs() < 1e-8 && (d[1] - 0.1).abs() < 1e-7);
}

#[test]
fn adam_rejects_missing_gradients() {
    let mut p = ParamSet::<f32>::new();
    p.insert("a", Tensor::zeros(vec![2])).unwrap();
    p.insert("b", Tensor::zeros(vec![2])).unwrap();
    let mut adam = Adam::new(&p);
    let err = adam.step(&mut p, &[Tensor::zeros(vec![2])], 0.1).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    let err = adam.step(&mut p, &[Tensor::zeros(vec![2]), Tensor::zeros(vec![3])], 0.1).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn cosine_schedule_endpoints() {
    let base = 3e-4;
    assert_eq!(cosine_lr(0, 100, base, None), base);
    assert!((cosine_lr(50, 100, base, None) - base / 2.0).abs() < 1e-15);
    assert!((cosine_lr(25, 100, base, None) - base * (1.0 + (std::f64::consts::PI / 4.0).cos()) / 2.0).abs() < 1e-15);
    assert_eq!(cosine_lr(100, 100, base, None), 0.0);
    assert_eq!(cosine_lr(250, 100, base, None), 0.0);
    assert!(cosine_lr(99, 100, base, None) < base * 1e-3);
    // Restarts repeat the curve.
    assert_eq!(cosine_lr(40, 100, base, Some(40)), base);
    assert_eq!(cosine_lr(45, 100, base, Some(40)), cosine_lr(5, 100, base, Some(40)));
    for s in 0..100 {
        assert!(cosine_lr(s + 1, 100, base, None) <= cosine_lr(s, 100, base, None));
    }
}

proptest! {
    #[test]
    fn flips_are_involutions(h in 1usize..7, w in 1usize..7, seed in 0u64..1000, fh: bool, fv: bool) {
        let mut rng = RngState::new(seed);
        let img = Tensor::from_fn(vec![3, h, w], |_| rng.uniform() as f32);
        let once = flip(&img, fh, fv);
        prop_assert_eq!(flip(&once, fh, fv), img.clone());
        if fh && !fv {
            prop_assert_eq!(once.get(&[1, 0, 0]), img.get(&[1, 0, w - 1]));
        }
        if fv && !fh {
            prop_assert_eq!(once.get(&[2, 0, 0]), img.get(&[2, h - 1, 0]));
        }
    }

    #[test]
    fn augment_stays_within_input_range(seed in 0u64..500) {
        let mut rng = RngState::new(seed);
        let img = Tensor::from_fn(vec![3, 36, 36], |_| rng.uniform() as f32);
        let cfg = TrainConfig { resize_to: 36, crop_to: 32, ..TrainConfig::default() };
        let out = augment(&img, &mut RngState::new(seed).split(3), &cfg).unwrap();
        prop_assert_eq!(out.shape(), &[3, 32, 32]);
        let (lo, hi) = (img.data().iter().cloned().fold(f32::MAX, f32::min), img.data().iter().cloned().fold(f32::MIN, f32::max));
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }
}

#[test]
fn resize_and_crop_basics() {
    let img = Tensor::from_fn(vec![3, 8, 8], |i| i as f32);
    assert_eq!(resize_bilinear(&img, 8, 8).unwrap(), img);
    let flat = Tensor::full(vec![3, 5, 7], 0.25f32);
    let r = resize_bilinear(&flat, 11, 3).unwrap();
    assert_eq!(r.shape(), &[3, 11, 3]);
    assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    // 2x downsampling with half-pixel centres averages 2×2 blocks.
    let g = Tensor::from_fn(vec![1, 4, 4], |i| i as f32);
    let d = resize_bilinear(&g, 2, 2).unwrap();
    assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
    let c = center_crop(&img, 4).unwrap();
    assert_eq!(c.get(&[0, 0, 0]), img.get(&[0, 2, 2]));
    assert_eq!(c.get(&[2, 3, 3]), img.get(&[2, 5, 5]));
    assert!(matches!(center_crop(&img, 9), Err(Error::Parameter(_))));
}

#[test]
fn augment_shapes_and_errors() {
    let mut rng = RngState::new(1);
    let paper = TrainConfig {
        resize_to: 256,
        crop_to: 224,
        ..TrainConfig::default()
    };
    paper.validate().unwrap();
    let img = Tensor::from_fn(vec![3, 256, 256], |_| rng.uniform() as f32);
    for s in 0..5 {
        let out = augment(&img, &mut RngState::new(s), &paper).unwrap();
        assert_eq!(out.shape(), &[3, 224, 224]);
    }
    assert_eq!(center_crop(&img, 224).unwrap().shape(), &[3, 224, 224]);

    let desk = TrainConfig::default();
    desk.validate().unwrap();
    assert_eq!(
        augment(&Tensor::zeros(vec![3, 72, 72]), &mut rng, &desk).unwrap().shape(),
        &[3, 64, 64]
    );

    let tight = TrainConfig {
        resize_to: 64,
        crop_to: 64,
        ..TrainConfig::default()
    };
    assert!(matches!(tight.validate(), Err(Error::Config(_))));
    let small = Tensor::zeros(vec![3, 64, 64]);
    let mut hit = false;
    for s in 0..20 {
        match augment(&small, &mut RngState::new(s), &tight) {
            Err(Error::Parameter(_)) => hit = true,
            Ok(o) => assert_eq!(o.shape(), &[3, 64, 64]),
            Err(e) => panic!("{e}"),
        }
    }
    assert!(hit);
}

#[test]
fn augment_is_a_function_of_the_stream() {
    let mut rng = RngState::new(5);
    let img = Tensor::from_fn(vec![3, 36, 36], |_| rng.uniform() as f32);
    let cfg = TrainConfig {
        resize_to: 36,
        crop_to: 32,
        ..TrainConfig::default()
    };
    let a = augment(&img, &mut RngState::new(9).split(4), &cfg).unwrap();
    let b = augment(&img, &mut RngState::new(9).split(4), &cfg).unwrap();
    let c = augment(&img, &mut RngState::new(9).split(5), &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn toy_separable_problem_reaches_full_accuracy() {
    // Two Gaussian blobs, linearly separable with a margin.
    let mut rng = RngState::new(11);
    let n = 64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let c = if y == 1 { 1.5 } else { -1.5 };
        xs.push(c + rng.uniform_in(-1.0, 1.0));
        xs.push(-c + rng.uniform_in(-1.0, 1.0));
        ys.push(y);
    }
    let x = Tensor::<f32>::from_f64(vec![n, 2], &xs).unwrap();
    let mut p = ParamSet::<f32>::new();
    p.insert("w", Tensor::from_fn(vec![2, 2], |_| rng.uniform_in(-0.1, 0.1) as f32)).unwrap();
    p.insert("b", Tensor::zeros(vec![2])).unwrap();
    let mut adam = Adam::new(&p);
    let mut solved_at = None;
    for step in 0..200 {
        let tape = Tape::new();
        let b = p.bind(&tape).unwrap();
        let logits = tape.constant(x.clone()).unwrap().linear(&b.var("w").unwrap(), b.opt_var("b").as_ref()).unwrap();
        let preds = argmax_rows(&logits.value());
        if preds == ys && solved_at.is_none() {
            solved_at = Some(step);
        }
        let loss = logits.softmax_cross_entropy(&ys).unwrap();
        let mut g = tape.backward(loss).unwrap();
        let grads = b.gradients(&mut g);
        drop(b);
        adam.step(&mut p, &grads, 0.05).unwrap();
    }
    assert!(solved_at.is_some(), "never reached 100% train accuracy");
}

#[test]
fn fixed_batch_loss_decreases_in_most_trials() {
    let data = synth_prepared(8, 3, 32);
    let x = stack(
        &data
            .images
            .iter()
            .map(|im| center_crop(im, 28).unwrap())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let trials = 10;
    let mut ok = 0;
    for seed in 0..trials {
        // Dropout is the only source of noise.
        let model = tiny(Variant::FULL, 0.3);
        let mut p = model.init::<f32>(&mut RngState::new(seed)).unwrap();
        let mut adam = Adam::new(&p);
        let mut drop = RngState::new(seed).split(1);
        let mut losses = Vec::new();
        for _ in 0..51 {
            let l = train_step(&model, &mut p, &mut adam, x.clone(), &data.labels_a, &data.labels_b, 0.25, 1e-3, Some(&mut drop)).unwrap();
            losses.push(l);
        }
        // Windowed means must not rise: Adam may wobble step to step.
        let means: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        if means.windows(2).all(|w| w[1] <= w[0]) && losses[50] < losses[0] {
            ok += 1;
        }
    }
    assert!(ok * 10 >= trials * 9, "only {ok}/{trials} trials decreased");
}

#[test]
fn training_writes_history_and_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny(Variant::FULL, 0.3);
    let data = synth_prepared(20, 1, 32);
    let cfg = small_cfg();
    let run = RunDir {
        dir: dir.path().to_path_buf(),
        manifest: Manifest::new(model.spec().clone(), cfg.resize_to, cfg.crop_to),
    };
    let init = model.init(&mut RngState::new(cfg.seed)).unwrap();
    let out = train(&model, init, &data, None, &cfg, Some(&run)).unwrap();
    assert_eq!(out.steps, 6);
    assert_eq!(out.history.len(), 2);
    let text = std::fs::read_to_string(run.history_path()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(HISTORY_HEADER));
    assert_eq!(lines.count(), 2);
    // Last step of the run sits at the bottom of the cosine curve.
    let last = out.history.last().unwrap();
    assert!(last.lr < cfg.lr * 0.1 && last.lr > 0.0);
    assert!(last.eval_joint_ac.is_some());
    let (m, manifest, p) = load_checkpoint::<f32>(&run.best_dir()).unwrap();
    assert_eq!(manifest.epoch, out.best_epoch);
    assert_eq!(p.tensors(), out.best.tensors());
    assert_eq!(m.variant(), Variant::FULL);
    assert!(manifest.metrics.is_some());
}

#[test]
fn training_is_bit_reproducible() {
    let model = tiny(Variant::FULL, 0.3);
    let data = synth_prepared(20, 2, 32);
    let cfg = small_cfg();
    let run = |seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        let c = TrainConfig { seed, ..cfg.clone() };
        let rd = RunDir {
            dir: dir.path().to_path_buf(),
            manifest: Manifest::new(model.spec().clone(), c.resize_to, c.crop_to),
        };
        let out = train(&model, model.init(&mut RngState::new(seed)).unwrap(), &data, None, &c, Some(&rd)).unwrap();
        let hist = std::fs::read(rd.history_path()).unwrap();
        let mut files: Vec<_> = std::fs::read_dir(rd.best_dir())
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        (out.last, hist, bytes)
    };
    let (a, ha, ba) = run(4);
    let (b, hb, bb) = run(4);
    assert_eq!(a.tensors(), b.tensors());
    assert_eq!(ha, hb);
    assert_eq!(ba, bb);
    let (c, _, _) = run(5);
    assert_ne!(a.tensors(), c.tensors());
}

#[test]
fn max_steps_truncates_the_run() {
    let model = tiny(Variant::JointBaseline, 0.0);
    let data = synth_prepared(20, 1, 32);
    let cfg = TrainConfig {
        max_steps: Some(4),
        epochs: 10,
        ..small_cfg()
    };
    assert_eq!(total_steps(data.len(), &cfg), 4);
    let out = train(&model, model.init(&mut RngState::new(0)).unwrap(), &data, None, &cfg, None).unwrap();
    assert_eq!(out.steps, 4);
    assert_eq!(out.history.len(), 2);
    assert!(out.history[1].eval_joint_ac.is_some());
}

#[test]
fn non_finite_loss_names_the_batch() {
    let model = tiny(Variant::FULL, 0.0);
    let data = synth_prepared(12, 1, 32);
    let mut p = model.init::<f32>(&mut RngState::new(0)).unwrap();
    p.get_mut("head.dr.refined.b").unwrap().data_mut()[0] = f32::NAN;
    let err = train(&model, p, &data, None, &small_cfg(), None).unwrap_err();
    match err {
        Error::Diverged { at, .. } => assert!(at.starts_with("epoch 0 batch 0"), "{at}"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn evaluation_is_deterministic_and_ignores_dropout() {
    let model = tiny(Variant::FULL, 0.5);
    let data = synth_prepared(10, 6, 32);
    let p = model.init::<f32>(&mut RngState::new(2)).unwrap();
    let (r1, p1) = evaluate(&model, &p, &data, 28, 4).unwrap();
    let (r2, p2) = evaluate(&model, &p, &data, 28, 7).unwrap();
    assert_eq!(r1.to_json(), r2.to_json());
    assert_eq!(p1, p2);
    let (_, probs) = p1.a.unwrap();
    for row in probs.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { crop_to: 80, ..TrainConfig::default() },
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { lambda: f64::NAN, ..TrainConfig::default() },
        TrainConfig { scale_range: [0.9, 0.8], ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    let parsed: Result<TrainConfig, _> = serde_json::from_str(r#"{"epochs": 3, "bogus": 1}"#);
    assert!(parsed.is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(parsed.epochs, 3);
    assert_eq!(parsed.batch_size, 16);
}
