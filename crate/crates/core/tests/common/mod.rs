#![allow(dead_code)]

use std::collections::BTreeMap;

use maskcap::model::{Model, ModelConfig, ModelParams, SceneInput};
use maskcap::numkern::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// V = D = H1 = H2 = 8, L = 3, vocab = 12.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        word_dim: 5,
        attn_dim: 6,
        mask_hidden: 4,
        ..ModelConfig::desk(8, 8, 3, 12)
    }
}

/// Same model with weights redrawn at a larger scale, so gradients are not tiny.
pub fn tiny_model(seed: u64, scale: f64) -> Model {
    let mut m = Model::new(tiny_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in m.params.named_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    m
}

pub fn random_scene(rng: &mut impl Rng, cfg: &ModelConfig, slots: usize) -> SceneInput {
    let ent: Vec<f64> = (0..slots * cfg.entity_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let glob: Vec<f64> = (0..cfg.global_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    SceneInput::new(
        Tensor::new(vec![slots, cfg.entity_dim], ent).unwrap(),
        Tensor::vector(glob).unwrap(),
    )
    .unwrap()
}

pub fn random_caption(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(4..vocab)).collect()
}

pub fn params_from(cfg: &ModelConfig, like: &ModelParams, flat: &[Tensor]) -> ModelParams {
    let map: BTreeMap<String, Tensor> = like
        .named()
        .iter()
        .zip(flat)
        .map(|((n, _), t)| (n.to_string(), t.clone()))
        .collect();
    ModelParams::from_named(cfg, map).unwrap()
}

pub fn flatten(p: &ModelParams) -> Vec<Tensor> {
    p.named().into_iter().map(|(_, t)| t.clone()).collect()
}
