//! Tape-free inference: mask prediction and single decoding steps.

use super::{Model, SceneInput};
use crate::error::{Error, Result};
use crate::numkern::kernels::{log_softmax, masked_softmax, matvec, sigmoid, softmax, vecmat};
use crate::numkern::lstm_step;

/// Attention weights over entity slots and the resulting attended feature.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedAttention {
    pub weights: Vec<f64>,
    /// `Σ_j α_j a_j`, before any projection.
    pub attended: Vec<f64>,
    /// The mask had (near) zero mass and plain softmax was used instead.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Log-probabilities over the whole vocabulary for the next token.
    pub log_probs: Vec<f64>,
    pub attention: Vec<f64>,
    pub degenerate: bool,
    pub state: RecurrentState,
}

/// Per-scene quantities that stay fixed while decoding.
#[derive(Clone, Debug)]
pub struct SceneContext<'m> {
    model: &'m Model,
    entities: Vec<f64>,
    global: Vec<f64>,
    /// `L × M` entity half of the attention pre-activation.
    entity_proj: Vec<f64>,
    mask: Option<Vec<f64>>,
    slots: usize,
}

impl Model {
    /// Per-entity mask probabilities from the entity features alone.
    pub fn predict_mask(&self, scene: &SceneInput) -> Result<Vec<f64>> {
        scene.check_against(self)?;
        let p = &self.params;
        let (h, d) = (self.config.mask_hidden, self.config.entity_dim);
        Ok(scene
            .entities
            .data()
            .chunks_exact(d)
            .map(|a| {
                let z = matvec(p.mask_hidden.data(), h, d, a);
                let act: Vec<f64> = z
                    .iter()
                    .zip(p.mask_hidden_bias.data())
                    .map(|(v, b)| (v + b).tanh())
                    .collect();
                let logit: f64 = act.iter().zip(p.mask_out.data()).map(|(a, w)| a * w).sum();
                sigmoid(logit + p.mask_out_bias.data()[0])
            })
            .collect())
    }
}

impl<'m> SceneContext<'m> {
    /// `mask = None` decodes with plain attention; otherwise every step is
    /// gated by `mask`, one value in `[0, 1]` per entity slot.
    pub fn new(model: &'m Model, scene: &SceneInput, mask: Option<&[f64]>) -> Result<Self> {
        scene.check_against(model)?;
        let slots = scene.slots();
        if let Some(m) = mask {
            if m.len() != slots {
                return Err(Error::dim("mask", format!("length {} for {slots} entity slots", m.len())));
            }
            if let Some(v) = m.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!("mask entry {v} outside [0, 1]")));
            }
        }
        let (m_dim, d) = (model.config.attn_dim, model.config.entity_dim);
        let entity_proj = scene
            .entities
            .data()
            .chunks_exact(d)
            .flat_map(|a| matvec(model.params.attn_entity.data(), m_dim, d, a))
            .collect();
        Ok(SceneContext {
            model,
            entities: scene.entities.data().to_vec(),
            global: scene.global.data().to_vec(),
            entity_proj,
            mask: mask.map(<[f64]>::to_vec),
            slots,
        })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn mask(&self) -> Option<&[f64]> {
        self.mask.as_deref()
    }

    pub fn initial_state(&self) -> RecurrentState {
        let c = &self.model.config;
        RecurrentState {
            h1: vec![0.0; c.hidden1],
            c1: vec![0.0; c.hidden1],
            h2: vec![0.0; c.hidden2],
            c2: vec![0.0; c.hidden2],
        }
    }

    /// Unnormalized scores `e_j = r · tanh(W_ae a_j + W_he h1)`.
    pub fn scores(&self, h1: &[f64]) -> Result<Vec<f64>> {
        let c = &self.model.config;
        if h1.len() != c.hidden1 {
            return Err(Error::dim("attention", format!("h1 has length {}, expected {}", h1.len(), c.hidden1)));
        }
        let p = &self.model.params;
        let q = matvec(p.attn_hidden.data(), c.attn_dim, c.hidden1, h1);
        Ok(self
            .entity_proj
            .chunks_exact(c.attn_dim)
            .map(|row| {
                row.iter()
                    .zip(&q)
                    .zip(p.attn_reduce.data())
                    .map(|((a, b), r)| (a + b).tanh() * r)
                    .sum()
            })
            .collect())
    }

    /// Attention for a given `h1`, gated by the context mask if there is one.
    pub fn attend(&self, h1: &[f64]) -> Result<MaskedAttention> {
        let e = self.scores(h1)?;
        let (weights, degenerate) = match &self.mask {
            None => (softmax(&e), false),
            Some(m) => {
                let r = masked_softmax(&e, m);
                (r.weights, r.degenerate)
            }
        };
        let attended = vecmat(&weights, &self.entities, self.slots, self.model.config.entity_dim);
        Ok(MaskedAttention {
            weights,
            attended,
            degenerate,
        })
    }

    /// Feeds `token` and returns the next-token distribution.
    pub fn step(&self, state: &RecurrentState, token: usize) -> Result<StepOutput> {
        let c = &self.model.config;
        let p = &self.model.params;
        if token >= c.vocab {
            return Err(Error::dim("step", format!("token {token} outside vocabulary of {}", c.vocab)));
        }
        let w = p.word_embedding.row(token);
        let x: Vec<f64> = self.global.iter().chain(w).copied().collect();
        let (h1, c1) = lstm_step(&p.cell1, &x, &state.h1, &state.c1)?;
        let att = self.attend(&h1)?;
        let attended = match &p.attn_project {
            Some(proj) => matvec(proj.data(), c.hidden1, c.entity_dim, &att.attended),
            None => att.attended,
        };
        let x2: Vec<f64> = attended.iter().zip(&h1).map(|(a, b)| a + b).collect();
        let (h2, c2) = lstm_step(&p.cell2, &x2, &state.h2, &state.c2)?;
        let z: Vec<f64> = self.global.iter().chain(&h2).copied().collect();
        let logits = matvec(p.output.data(), c.vocab, c.global_dim + c.hidden2, &z);
        let log_probs = log_softmax(&logits);
        if log_probs.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("next-token distribution".into()));
        }
        Ok(StepOutput {
            log_probs,
            attention: att.weights,
            degenerate: att.degenerate,
            state: RecurrentState { h1, c1, h2, c2 },
        })
    }
}
