use ac2d::causal::CausalMode;
use ac2d::image::Image;
use ac2d::model::{Model, ModelConfig, Profile, Variant};
use ac2d::nn::ParamStore;
use ac2d::rules::RuleSet;
use ac2d::synth::{synth_generate, SynthSpec};
use ac2d::train::{
    augment, clip_global_norm, evaluate, lr_at, make_batch, train, AdamW, AugmentConfig, ScheduleConfig, TrainConfig,
};
use ac2d_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        c: 8,
        k: 2,
        l: 16,
        n: [1, 1, 2],
        trunk_width: 8,
        trunk_heads: [1, 2],
        variant,
        ..ModelConfig::profile(Profile::Desk, vec![1, 12])
    }
}

fn tiny_data(n: usize, seed: u64) -> ac2d::dataset::Dataset {
    let spec = SynthSpec {
        image_side: 24,
        blob_radius: 1.5,
        ..SynthSpec::desk(vec![1, 12])
    };
    synth_generate(&spec, &RuleSet::default(), n, seed).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_endpoints_are_exact() {
    for (base, warm, total) in [(1e-3, 10, 100), (0.125, 1, 2), (2e-3 / 256.0 * 16.0, 125, 2500)] {
        let s = ScheduleConfig {
            base_lr: base,
            warmup_steps: warm,
            total_steps: total,
        };
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(warm, &s), base);
        assert!(lr_at(total, &s) <= 1e-8 * base);
        for t in warm..total {
            assert!(lr_at(t + 1, &s) <= lr_at(t, &s));
        }
    }
}

#[test]
fn clipping_handles_adversarial_gradients() {
    let cases: Vec<Vec<f64>> = vec![
        vec![1e300, -1e300, 1e300],
        vec![1e-300, 2e-300],
        vec![1e200, 1e-200, -3.0, 0.0],
        vec![f64::MAX / 4.0; 8],
        vec![0.0; 5],
    ];
    for data in cases {
        let mut g = vec![Tensor::<f64>::from_f64(&[data.len()], &data).unwrap()];
        clip_global_norm(&mut g, 3.0).unwrap();
        let norm = g[0].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 3.0 + 1e-6, "{data:?} -> {norm}");
    }
    let mut g = vec![Tensor::<f32>::from_f64(&[2], &[3e38, -3e38]).unwrap()];
    clip_global_norm(&mut g, 3.0).unwrap();
    let norm = g[0].data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    assert!(norm <= 3.0 + 1e-6);
    let mut bad = vec![Tensor::<f64>::from_f64(&[1], &[f64::NAN]).unwrap()];
    assert!(clip_global_norm(&mut bad, 3.0).is_err());
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_the_bound(
        vals in prop::collection::vec(-1e6f64..1e6, 1..50),
        exp in -200i32..200,
    ) {
        let scaled: Vec<f64> = vals.iter().map(|v| v * 10f64.powi(exp)).collect();
        let mut g = vec![Tensor::<f64>::from_f64(&[scaled.len()], &scaled).unwrap()];
        let before = clip_global_norm(&mut g, 3.0).unwrap();
        let after = g[0].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(after <= 3.0 + 1e-6);
        if before <= 3.0 {
            prop_assert_eq!(g[0].data(), &scaled[..]);
        }
    }

    #[test]
    fn schedule_is_bounded(base in 1e-6f64..1.0, warm in 1usize..50, extra in 1usize..500, t in 0usize..600) {
        let s = ScheduleConfig { base_lr: base, warmup_steps: warm, total_steps: warm + extra };
        let v = lr_at(t, &s);
        prop_assert!((0.0..=base).contains(&v));
    }
}

#[test]
fn adamw_matches_a_scalar_loop() {
    let mut store = ParamStore::<f64>::default();
    store.add("w", Tensor::from_f64(&[1, 2], &[0.5, -1.5]).unwrap());
    store.add("b", Tensor::from_f64(&[1], &[0.25]).unwrap());
    let mut opt = AdamW::new(&store, 0.05, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = [0.5, -1.5, 0.25];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for t in 1..=10 {
        let g: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lr = 0.01 * t as f64;
        opt.step(
            &mut store,
            vec![Tensor::from_f64(&[1, 2], &g[..2]).unwrap(), Tensor::from_f64(&[1], &g[2..]).unwrap()],
            lr,
        )
        .unwrap();
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        let s = if norm > 3.0 { 3.0 / norm } else { 1.0 };
        for i in 0..3 {
            let gi = g[i] * s;
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            let wd = if i < 2 { 0.05 } else { 0.0 };
            x[i] -= lr * (mh / (vh.sqrt() + 1e-8) + wd * x[i]);
        }
    }
    let got: Vec<f64> = store.values().iter().flat_map(|t| t.data().to_vec()).collect();
    for i in 0..3 {
        assert!((got[i] - x[i]).abs() < 1e-12, "{got:?} vs {x:?}");
    }
    assert_eq!(opt.steps(), 10);
}

#[test]
fn center_crop_moves_landmarks_by_the_offset() {
    let rules = RuleSet::default();
    let data = tiny_data(1, 0);
    let s = &data.samples[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (view, lm) = augment(&s.image, &s.landmarks, &AugmentConfig::eval(16), &rules, &mut rng).unwrap();
    assert_eq!((view.width, view.height), (16, 16));
    for (a, b) in lm.points.iter().zip(&s.landmarks.points) {
        assert_eq!(a[0], b[0] - 4.0);
        assert_eq!(a[1], b[1] - 4.0);
    }
    assert_eq!(view.get(1, 0, 0), s.image.get(1, 4, 4));
}

#[test]
fn mirroring_twice_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..3 * 5 * 7).map(|_| rng.random()).collect();
    let img = Image::from_data(7, 5, data).unwrap();
    assert_eq!(img.mirrored().mirrored(), img);
    assert_eq!(img.mirrored().get(2, 3, 0), img.get(2, 3, 6));
}

#[test]
fn batches_carry_normalized_priors() {
    let rules = RuleSet::default();
    let data = tiny_data(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = make_batch::<f64, _>(&data.samples, &[0, 2], &[1, 12], &AugmentConfig::train(16, 0.2), 1.0, &rules, &mut rng)
        .unwrap();
    assert_eq!(batch.images.shape(), &[2, 3, 16, 16]);
    for p in &batch.priors {
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(batch.labels.data(), &[data.samples[0].labels[0] as f64, data.samples[0].labels[1] as f64, data.samples[2].labels[0] as f64, data.samples[2].labels[1] as f64]);
}

#[test]
fn smoke_run_every_variant() {
    let rules = RuleSet::default();
    let data = tiny_data(8, 3);
    for v in Variant::ALL {
        let mut model = Model::<f32>::build(&tiny(v)).unwrap();
        let report = train(&mut model, &data, None, &quick(), &rules, None).unwrap();
        assert_eq!(report.epochs.len(), 2);
        assert_eq!(report.steps, 4);
        assert!(report.epochs.iter().all(|e| e.loss.is_finite()));
        if v == Variant::B {
            assert!(model.banks.is_empty());
            assert!(report.epochs.iter().all(|e| e.loss_a == 0.0));
        } else {
            assert!(report.epochs.iter().all(|e| e.loss_a > 0.0));
        }
    }
}

#[test]
fn seeded_runs_write_identical_logs() {
    let rules = RuleSet::default();
    let data = tiny_data(8, 4);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::<f32>::build(&tiny(Variant::Ac2d)).unwrap();
        train(&mut model, &data, None, &quick(), &rules, Some(dir.path())).unwrap();
        (
            std::fs::read(dir.path().join("metrics.csv")).unwrap(),
            std::fs::read(dir.path().join("model.ckpt")).unwrap(),
        )
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("epoch,loss_u,loss_a,loss,kl,f1_au1,f1_au12,f1_avg\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn evaluation_reproduces_the_logged_scores() {
    let rules = RuleSet::default();
    let data = tiny_data(8, 5);
    let eval = tiny_data(6, 6);
    let mut model = Model::<f32>::build(&tiny(Variant::Av)).unwrap();
    let report = train(&mut model, &data, Some(&eval), &quick(), &rules, None).unwrap();
    let again = evaluate(&model, &eval, &rules, Some(&report.stats), 5).unwrap();
    let last = report.epochs.last().unwrap();
    assert_eq!(again.report.f1, last.f1);
    assert!((again.kl - last.kl).abs() < 1e-5);
    assert_eq!(again.predictions, report.final_eval.predictions.iter().map(|r| r.clone()).collect::<Vec<_>>());
}

#[test]
fn static_banks_hold_the_epoch_end_mean() {
    let rules = RuleSet::default();
    let data = tiny_data(8, 7);
    let mut model = Model::<f64>::build(&tiny(Variant::AvCes)).unwrap();
    train(&mut model, &data, None, &quick(), &rules, None).unwrap();
    assert_eq!(model.config.causal_mode, CausalMode::Literal);
    let batch = make_batch::<f64, _>(
        &data.samples,
        &(0..8).collect::<Vec<_>>(),
        &[1, 12],
        &AugmentConfig::eval(16),
        1.0,
        &rules,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let pred = model.predict(batch.images, None).unwrap();
    let f = &pred.features[0];
    let dim = model.banks[0].dim();
    let snapshot = &model.banks[0].snapshot()[0];
    for c in 0..dim {
        let mean = (0..8).map(|b| f[b * dim + c]).sum::<f64>() / 8.0;
        assert!((snapshot[c] as f64 - mean).abs() < 1e-5, "{} vs {mean}", snapshot[c]);
    }
}

#[test]
fn empty_or_mismatched_data_is_rejected() {
    let rules = RuleSet::default();
    let mut data = tiny_data(2, 8);
    let model = Model::<f32>::build(&tiny(Variant::B)).unwrap();
    let mut other = tiny_data(2, 8);
    other.meta.aus = vec![1, 2];
    assert!(matches!(evaluate(&model, &other, &rules, None, 4), Err(ac2d::Error::Config(_))));
    data.samples.clear();
    assert!(matches!(evaluate(&model, &data, &rules, None, 4), Err(ac2d::Error::Usage(_))));
    let mut model = model;
    assert!(matches!(train(&mut model, &data, None, &quick(), &rules, None), Err(ac2d::Error::Usage(_))));
}
