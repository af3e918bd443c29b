//! Caption decoder with entity attention, with and without mask gating.
//!
//! Per decoding step `t`, given the global feature `I_v`, entity features
//! `a_1..a_L` and the previous word `w_t`:
//!
//! ```text
//! h1      = LSTM1(I_v ⊕ w_t, h1_prev)
//! e_j     = r · tanh(W_ae a_j + W_he h1)
//! α       = softmax(e)                       (unmasked)
//! α_j     = exp(e_j) m_j / Σ_k exp(e_k) m_k   (masked, mask m ∈ [0,1]^L)
//! â       = Σ_j α_j a_j
//! h2      = LSTM2(â + h1, h2_prev)
//! p_{t+1} = softmax(W_vocab (I_v ⊕ h2))
//! ```
//!
//! The mask is either predicted per entity by a one-hidden-layer MLP on the
//! entity feature alone, or supplied by the caller.

mod forward;
mod infer;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use forward::{
    batch_loss, batch_loss_and_grad, BatchStats, Example, ForwardOutput, ForwardTrace, GateSource, MaskGate,
    Objective, SceneInput, StepTrace,
};
pub use infer::{MaskedAttention, RecurrentState, SceneContext, StepOutput};

use crate::error::{Error, Result};
use crate::numkern::{CellParams, Tensor};

/// Initialization bound for all weights.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Plain soft attention.
    Base,
    /// Attention gated by an entity mask.
    Interpret,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Base => "base",
            ModelKind::Interpret => "interpret",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ModelKind::Base),
            "interpret" => Ok(ModelKind::Interpret),
            _ => Err(Error::Config(format!("unknown model kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// V: global feature dimension.
    pub global_dim: usize,
    /// D: entity feature dimension.
    pub entity_dim: usize,
    /// Maximum entity slots per sample.
    pub slots: usize,
    /// T: word embedding dimension.
    pub word_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// M: attention projection dimension.
    pub attn_dim: usize,
    pub vocab: usize,
    pub mask_hidden: usize,
    /// Learned D→H1 projection of the attended feature. Required when D ≠ H1.
    #[serde(default)]
    pub project_attended: bool,
}

impl ModelConfig {
    /// Small configuration for CPU experiments. Requires `entity_dim` as the hidden size.
    pub fn desk(global_dim: usize, entity_dim: usize, slots: usize, vocab: usize) -> Self {
        ModelConfig {
            global_dim,
            entity_dim,
            slots,
            word_dim: 32,
            hidden1: entity_dim,
            hidden2: entity_dim,
            attn_dim: 32,
            vocab,
            mask_hidden: 16,
            project_attended: false,
        }
    }

    /// Full-size reference configuration with 15 knowledge-graph entity
    /// slots of dimension 500 and 2048-d pooled global features.
    pub fn reference_entities(vocab: usize) -> Self {
        ModelConfig {
            global_dim: 2048,
            entity_dim: 500,
            slots: 15,
            word_dim: 300,
            hidden1: 512,
            hidden2: 512,
            attn_dim: 512,
            vocab,
            mask_hidden: 512,
            project_attended: true,
        }
    }

    /// Full-size reference configuration with 36 detector regions of dimension 2048.
    pub fn reference_regions(vocab: usize) -> Self {
        ModelConfig {
            entity_dim: 2048,
            slots: 36,
            ..ModelConfig::reference_entities(vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("global_dim", self.global_dim),
            ("entity_dim", self.entity_dim),
            ("slots", self.slots),
            ("word_dim", self.word_dim),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("attn_dim", self.attn_dim),
            ("vocab", self.vocab),
            ("mask_hidden", self.mask_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab <= crate::data::RESERVED.len() {
            return Err(Error::Config("vocabulary has no content tokens".into()));
        }
        if !self.project_attended && self.entity_dim != self.hidden1 {
            return Err(Error::Config(format!(
                "attended features (D = {}) are added to h1 (H1 = {}); enable project_attended or make them equal",
                self.entity_dim, self.hidden1
            )));
        }
        Ok(())
    }
}

/// Every learnable tensor of the decoder and the mask predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `vocab × T`
    pub word_embedding: Tensor,
    /// Input `V + T`, hidden `H1`.
    pub cell1: CellParams,
    /// Input `H1`, hidden `H2`.
    pub cell2: CellParams,
    /// W_ae, `M × D`
    pub attn_entity: Tensor,
    /// W_he, `M × H1`
    pub attn_hidden: Tensor,
    /// Reduces the `M`-dim attention activation to a scalar score.
    pub attn_reduce: Tensor,
    /// Optional `H1 × D` projection of the attended feature.
    pub attn_project: Option<Tensor>,
    /// W_vocab, `vocab × (V + H2)`
    pub output: Tensor,
    /// `mask_hidden × D`
    pub mask_hidden: Tensor,
    pub mask_hidden_bias: Tensor,
    pub mask_out: Tensor,
    /// Single-element output bias.
    pub mask_out_bias: Tensor,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        ModelParams {
            word_embedding: Tensor::uniform(&[cfg.vocab, cfg.word_dim], INIT_RANGE, r),
            cell1: CellParams::init(cfg.global_dim + cfg.word_dim, cfg.hidden1, r),
            cell2: CellParams::init(cfg.hidden1, cfg.hidden2, r),
            attn_entity: Tensor::uniform(&[cfg.attn_dim, cfg.entity_dim], INIT_RANGE, r),
            attn_hidden: Tensor::uniform(&[cfg.attn_dim, cfg.hidden1], INIT_RANGE, r),
            attn_reduce: Tensor::uniform(&[cfg.attn_dim], INIT_RANGE, r),
            attn_project: cfg
                .project_attended
                .then(|| Tensor::uniform(&[cfg.hidden1, cfg.entity_dim], INIT_RANGE, r)),
            output: Tensor::uniform(&[cfg.vocab, cfg.global_dim + cfg.hidden2], INIT_RANGE, r),
            mask_hidden: Tensor::uniform(&[cfg.mask_hidden, cfg.entity_dim], INIT_RANGE, r),
            mask_hidden_bias: Tensor::zeros(&[cfg.mask_hidden]),
            mask_out: Tensor::uniform(&[cfg.mask_hidden], INIT_RANGE, r),
            mask_out_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    /// Stable, ordered parameter names and tensors.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("word_embedding", &self.word_embedding),
            ("cell1.w_input", &self.cell1.w_input),
            ("cell1.w_hidden", &self.cell1.w_hidden),
            ("cell1.bias", &self.cell1.bias),
            ("cell2.w_input", &self.cell2.w_input),
            ("cell2.w_hidden", &self.cell2.w_hidden),
            ("cell2.bias", &self.cell2.bias),
            ("attn.entity", &self.attn_entity),
            ("attn.hidden", &self.attn_hidden),
            ("attn.reduce", &self.attn_reduce),
        ];
        if let Some(p) = &self.attn_project {
            out.push(("attn.project", p));
        }
        out.extend([
            ("output.vocab", &self.output),
            ("mask.hidden", &self.mask_hidden),
            ("mask.hidden_bias", &self.mask_hidden_bias),
            ("mask.out", &self.mask_out),
            ("mask.out_bias", &self.mask_out_bias),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("word_embedding", &mut self.word_embedding),
            ("cell1.w_input", &mut self.cell1.w_input),
            ("cell1.w_hidden", &mut self.cell1.w_hidden),
            ("cell1.bias", &mut self.cell1.bias),
            ("cell2.w_input", &mut self.cell2.w_input),
            ("cell2.w_hidden", &mut self.cell2.w_hidden),
            ("cell2.bias", &mut self.cell2.bias),
            ("attn.entity", &mut self.attn_entity),
            ("attn.hidden", &mut self.attn_hidden),
            ("attn.reduce", &mut self.attn_reduce),
        ];
        if let Some(p) = &mut self.attn_project {
            out.push(("attn.project", p));
        }
        out.extend([
            ("output.vocab", &mut self.output),
            ("mask.hidden", &mut self.mask_hidden),
            ("mask.hidden_bias", &mut self.mask_hidden_bias),
            ("mask.out", &mut self.mask_out),
            ("mask.out_bias", &mut self.mask_out_bias),
        ]);
        out
    }

    /// Rebuilds parameters from named tensors, checking every shape against `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut params = ModelParams::init(cfg, 0);
        for (name, slot) in params.named_mut() {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(params)
    }

    pub fn sq_norm(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sq_norm()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// A configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let reference = ModelParams::init(&config, 0);
        let shapes_match = reference
            .named()
            .iter()
            .zip(params.named())
            .all(|((a, x), (b, y))| a == &b && x.shape() == y.shape())
            && reference.named().len() == params.named().len();
        if !shapes_match {
            return Err(Error::Config("parameter shapes do not match the configuration".into()));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Model { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_attended_dim() {
        let mut cfg = ModelConfig::desk(8, 8, 3, 12);
        cfg.hidden1 = 6;
        assert!(matches!(Model::new(cfg.clone(), 0), Err(Error::Config(_))));
        cfg.project_attended = true;
        let m = Model::new(cfg, 0).unwrap();
        assert_eq!(m.params.attn_project.as_ref().unwrap().shape(), &[6, 8]);
    }

    #[test]
    fn reference_configs_validate() {
        ModelConfig::reference_entities(9989).validate().unwrap();
        ModelConfig::reference_regions(9989).validate().unwrap();
    }

    #[test]
    fn init_conventions() {
        let m = Model::new(ModelConfig::desk(4, 4, 2, 10), 1).unwrap();
        let h = m.config.hidden1;
        let b = m.params.cell1.bias.data();
        assert!(b[..h].iter().all(|&v| v == 0.0));
        assert!(b[h..2 * h].iter().all(|&v| v == 1.0));
        assert!(m.params.output.data().iter().all(|v| v.abs() <= INIT_RANGE));
    }

    #[test]
    fn named_round_trip() {
        let m = Model::new(ModelConfig::desk(4, 4, 2, 10), 1).unwrap();
        let map: BTreeMap<String, Tensor> = m.params.named().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(ModelParams::from_named(&m.config, map).unwrap(), m.params);
    }
}
