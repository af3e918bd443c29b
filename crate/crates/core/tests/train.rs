mod common;

use common::*;
use maskcap::data::synth::{synth_generate, SynthConfig, SynthOntology};
use maskcap::data::Vocabulary;
use maskcap::model::{Model, ModelConfig, ModelKind};
use maskcap::numkern::Tensor;
use maskcap::train::{clip_gradients, plateau_schedule, prepare, Adam, Plateau, TrainConfig, Trainer, LOG_HEADER};
use maskcap::Error;
use proptest::prelude::*;

#[test]
fn clip_leaves_small_gradients_alone() {
    let mut g = Tensor::vector(vec![0.3, 0.4]).unwrap();
    let norm = clip_gradients(&mut [("g", &mut g)], 1.0).unwrap();
    assert_eq!(norm, 0.5);
    assert_eq!(g.data(), &[0.3, 0.4]);
}

#[test]
fn clip_scales_to_max_norm() {
    let mut g = Tensor::vector(vec![3.0, 4.0]).unwrap();
    clip_gradients(&mut [("g", &mut g)], 1.0).unwrap();
    assert!((g.data()[0] - 0.6).abs() < 1e-15 && (g.data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn clip_names_non_finite_parameter() {
    let mut a = Tensor::vector(vec![1.0]).unwrap();
    let mut b = Tensor::vector(vec![1.0]).unwrap();
    b.data_mut()[0] = f64::NAN;
    let err = clip_gradients(&mut [("a", &mut a), ("cell2.bias", &mut b)], 1.0).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("cell2.bias")), "{err}");
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_max(v in prop::collection::vec(-100.0f64..100.0, 1..20), max in 0.01f64..10.0) {
        let mut g = Tensor::vector(v).unwrap();
        clip_gradients(&mut [("g", &mut g)], max).unwrap();
        prop_assert!(g.sq_norm().sqrt() <= max + 1e-12);
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = Tensor::vector(vec![0.5, -0.2]).unwrap();
    let g = Tensor::zeros(&[2]);
    let mut adam = Adam::new([&p], 0.9, 0.999, 1e-8);
    adam.update(&mut [&mut p], &[&g], 0.001).unwrap();
    assert_eq!(p.data(), &[0.5, -0.2]);
    assert_eq!(adam.step, 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = Tensor::vector(vec![0.0]).unwrap();
    let g = Tensor::vector(vec![1.0]).unwrap();
    let mut adam = Adam::new([&p], 0.9, 0.999, 1e-8);
    adam.update(&mut [&mut p], &[&g], 0.001).unwrap();
    let want = -0.001 / (1.0 + 1e-8);
    assert!((p.data()[0] - want).abs() < 1e-15);
}

#[test]
fn adam_minimizes_square() {
    let mut p = Tensor::vector(vec![1.0]).unwrap();
    let mut adam = Adam::new([&p], 0.9, 0.999, 1e-8);
    for _ in 0..100 {
        let g = Tensor::vector(vec![2.0 * p.data()[0]]).unwrap();
        adam.update(&mut [&mut p], &[&g], 0.1).unwrap();
    }
    assert!(p.data()[0].abs() < 0.1, "{}", p.data()[0]);
}

fn run_schedule(losses: &[f64]) -> Vec<f64> {
    let mut s = Plateau::new(0.001, 10.0, 3);
    losses
        .iter()
        .map(|&l| {
            plateau_schedule(&mut s, l);
            s.lr()
        })
        .collect()
}

#[test]
fn schedule_traces() {
    assert_eq!(run_schedule(&[5.0, 4.0, 3.0]), vec![0.001; 3]);
    assert_eq!(run_schedule(&[5.0, 5.0, 5.0, 5.0]), vec![0.001, 0.001, 0.001, 0.0001]);
    assert_eq!(
        run_schedule(&[5.0, 4.0, 4.0, 4.0, 4.0]),
        vec![0.001, 0.001, 0.001, 0.001, 0.0001]
    );
}

proptest! {
    #[test]
    fn schedule_rate_is_lr0_over_power_of_ten(losses in prop::collection::vec(0.0f64..10.0, 1..60)) {
        let mut s = Plateau::new(0.001, 10.0, 3);
        let mut k = 0;
        for l in losses {
            plateau_schedule(&mut s, l);
            prop_assert!(s.reductions >= k);
            k = s.reductions;
            prop_assert_eq!(s.lr(), 0.001 / 10f64.powi(k as i32));
            prop_assert!(s.lr() <= 0.001);
        }
    }
}

fn synth_setup(samples: usize) -> (Vec<maskcap::train::Prepared>, ModelConfig) {
    let ont = SynthOntology::standard(3, 8, 8).unwrap();
    let out = synth_generate(&ont, &SynthConfig { samples, ..Default::default() }).unwrap();
    let vocab = Vocabulary::build(out.dataset.captions(), 1);
    let data = prepare(&out.dataset, &vocab).unwrap();
    let cfg = ModelConfig { word_dim: 8, attn_dim: 8, mask_hidden: 8, ..ModelConfig::desk(8, 8, 4, vocab.len()) };
    (data, cfg)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (data, cfg) = synth_setup(10);
    let model = Model::new(cfg, 1).unwrap();
    let tc = TrainConfig { lr0: 0.0, epochs: 1, batch: 50, ..Default::default() };
    let mut t = Trainer::new(model.clone(), ModelKind::Interpret, tc).unwrap();
    t.fit(&data, &[], None).unwrap();
    assert_eq!(t.model.params, model.params);
}

#[test]
fn training_is_deterministic_and_logs_csv() {
    let (data, cfg) = synth_setup(40);
    let (val, train) = data.split_at(10);
    let tc = TrainConfig { epochs: 5, batch: 16, lr0: 0.01, seed: 9, ..Default::default() };
    let run = |log: Option<&mut dyn std::io::Write>| {
        let mut t = Trainer::new(Model::new(cfg.clone(), 4).unwrap(), ModelKind::Interpret, tc.clone()).unwrap();
        let h = t.fit(train, val, log).unwrap();
        (h, t.model.params, t.max_applied_norm)
    };
    let mut buf = Vec::new();
    let (h1, p1, norm) = run(Some(&mut buf));
    let (h2, p2, _) = run(None);
    assert_eq!(p1, p2);
    let curve = |h: &[maskcap::train::EpochLog]| h.iter().map(|e| (e.train_nll, e.val_nll)).collect::<Vec<_>>();
    assert_eq!(curve(&h1), curve(&h2));
    for w in h1.windows(2) {
        assert!(w[1].train_nll < w[0].train_nll, "{h1:?}");
    }
    assert!(norm <= 1.0 + 1e-12);
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[1].split(',').count(), 6);
}

#[test]
fn interpret_training_requires_masks() {
    let (mut data, cfg) = synth_setup(5);
    data[2].mask = None;
    let mut t = Trainer::new(Model::new(cfg, 1).unwrap(), ModelKind::Interpret, TrainConfig::default()).unwrap();
    assert!(matches!(t.train_epoch(&data), Err(Error::Config(_))));
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let (data, _) = synth_setup(5);
    let mut t = Trainer::new(tiny_model(0, 0.1), ModelKind::Base, TrainConfig::default()).unwrap();
    assert!(matches!(t.train_epoch(&data), Err(Error::Dimension { .. })));
}

#[test]
fn best_model_tracks_lowest_validation() {
    let (data, cfg) = synth_setup(5);
    let mut t = Trainer::new(Model::new(cfg, 1).unwrap(), ModelKind::Base, TrainConfig::default()).unwrap();
    t.end_epoch(3.0);
    let snapshot = t.model.params.clone();
    t.train_epoch(&data).unwrap();
    t.end_epoch(4.0);
    assert_eq!(t.best_model().params, snapshot);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { batch: 0, ..Default::default() },
        TrainConfig { clip_max_norm: 0.0, ..Default::default() },
        TrainConfig { plateau_factor: 1.0, ..Default::default() },
        TrainConfig { beta2: 1.0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
