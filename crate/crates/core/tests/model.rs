mod common;

use common::*;
use maskcap::model::{
    batch_loss, batch_loss_and_grad, Example, GateSource, MaskGate, Model, Objective, SceneContext,
};
use maskcap::numkern::grad_check;
use maskcap::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_grads(objective: Objective, with_project: bool) {
    let mut cfg = tiny_config();
    if with_project {
        cfg.hidden1 = 6;
        cfg.project_attended = true;
    }
    let mut model = Model::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (_, t) in model.params.named_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let scenes = [random_scene(&mut rng, &cfg, 3), random_scene(&mut rng, &cfg, 2)];
    let caps = [random_caption(&mut rng, cfg.vocab, 3), random_caption(&mut rng, cfg.vocab, 2)];
    let masks = [vec![1.0, 0.0, 1.0], vec![0.0, 1.0]];
    let examples: Vec<Example> = (0..2)
        .map(|i| Example {
            scene: &scenes[i],
            caption: &caps[i],
            mask_gt: Some(&masks[i]),
        })
        .collect();
    let like = model.params.clone();
    let report = grad_check(
        |flat| {
            let m = Model::from_parts(cfg.clone(), params_from(&cfg, &like, flat))?;
            let (stats, g) = batch_loss_and_grad(&m, &examples, objective)?;
            Ok((stats.loss, flatten(&g)))
        },
        &flatten(&model.params),
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{objective:?}: {report:?}");
}

#[test]
fn gradients_base() {
    check_grads(Objective::base(), false);
}

#[test]
fn gradients_interpret_predicted_gate() {
    check_grads(Objective::interpret(GateSource::Predicted), false);
}

#[test]
fn gradients_interpret_ground_truth_gate_with_projection() {
    check_grads(Objective::interpret(GateSource::GroundTruth), true);
}

#[test]
fn all_ones_mask_matches_base() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = tiny_model(2, 0.5);
    let scene = random_scene(&mut rng, &m.config, 3);
    let cap = random_caption(&mut rng, 12, 5);
    let base = m.forward_base(&scene, &cap).unwrap();
    let ones = [1.0; 3];
    let masked = m.forward_interpret(&scene, &cap, &ones, MaskGate::Fixed(&ones), 1.0).unwrap();
    assert!((base.nll - masked.nll).abs() <= 1e-10);
}

#[test]
fn bce_of_half_prediction_is_l_ln2() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = tiny_model(4, 0.3);
    m.params.mask_out.data_mut().fill(0.0);
    m.params.mask_out_bias.data_mut().fill(0.0);
    let scene = random_scene(&mut rng, &m.config, 3);
    let out = m
        .forward_interpret(&scene, &[5, 6], &[0.0; 3], MaskGate::Predicted, 1.0)
        .unwrap();
    assert!(out.trace.mask_pred.unwrap().iter().all(|&p| p == 0.5));
    assert!((out.bce.unwrap() - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((out.loss - out.nll - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn inference_path_matches_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = tiny_model(5, 0.4);
    let scene = random_scene(&mut rng, &m.config, 3);
    let cap = random_caption(&mut rng, 12, 4);
    let mask = [0.3, 0.0, 0.9];
    for gated in [false, true] {
        let out = if gated {
            m.forward_interpret(&scene, &cap, &mask, MaskGate::Fixed(&mask), 1.0).unwrap()
        } else {
            m.forward_base(&scene, &cap).unwrap()
        };
        let ctx = SceneContext::new(&m, &scene, gated.then_some(&mask[..])).unwrap();
        let mut state = ctx.initial_state();
        let inputs = std::iter::once(maskcap::data::BOS).chain(cap.iter().copied());
        for (tok, tr) in inputs.zip(&out.trace.steps) {
            let s = ctx.step(&state, tok).unwrap();
            for (a, b) in s.attention.iter().zip(&tr.attention) {
                assert!((a - b).abs() < 1e-12);
            }
            for (lp, p) in s.log_probs.iter().zip(&tr.probs) {
                assert!((lp.exp() - p).abs() < 1e-12);
            }
            state = s.state;
            assert_eq!(state.h2, tr.h2);
        }
    }
    let pred = m.predict_mask(&scene).unwrap();
    let out = m.forward_interpret(&scene, &cap, &[1.0, 0.0, 0.0], MaskGate::Predicted, 1.0).unwrap();
    for (a, b) in pred.iter().zip(out.trace.mask_pred.unwrap()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn batch_loss_is_mean_of_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = tiny_model(6, 0.3);
    let scenes: Vec<_> = (0..3).map(|_| random_scene(&mut rng, &m.config, 3)).collect();
    let caps: Vec<_> = (0..3).map(|_| random_caption(&mut rng, 12, 3)).collect();
    let ex: Vec<Example> = scenes
        .iter()
        .zip(&caps)
        .map(|(s, c)| Example { scene: s, caption: c, mask_gt: None })
        .collect();
    let stats = batch_loss(&m, &ex, Objective::base()).unwrap();
    let want: f64 = scenes.iter().zip(&caps).map(|(s, c)| m.forward_base(s, c).unwrap().nll).sum::<f64>() / 3.0;
    assert!((stats.loss - want).abs() < 1e-12);
    assert_eq!(stats.targets, 12);
}

#[test]
fn rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = tiny_model(7, 0.3);
    let scene = random_scene(&mut rng, &m.config, 3);
    assert!(matches!(m.forward_base(&scene, &[99]), Err(Error::Dimension { .. })));
    assert!(matches!(
        m.forward_interpret(&scene, &[5], &[1.0, 0.0], MaskGate::Predicted, 1.0),
        Err(Error::Dimension { .. })
    ));
    assert!(matches!(
        m.forward_interpret(&scene, &[5], &[1.0, 0.0, 2.0], MaskGate::Predicted, 1.0),
        Err(Error::Domain(_))
    ));
    let too_many = random_scene(&mut rng, &m.config, 4);
    assert!(matches!(m.forward_base(&too_many, &[5]), Err(Error::Dimension { .. })));
    let ex = [Example { scene: &scene, caption: &[5], mask_gt: None }];
    assert!(matches!(
        batch_loss(&m, &ex, Objective::interpret(GateSource::Predicted)),
        Err(Error::Config(_))
    ));
}
