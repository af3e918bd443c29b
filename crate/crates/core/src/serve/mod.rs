//! Read-only HTTP inference service.
//!
//! | method | path           | body                                   |
//! |--------|----------------|----------------------------------------|
//! | GET    | `/api/health`  | `{"status":"ok","kind":..,"samples":n}`|
//! | GET    | `/api/samples` | list of [`SampleInfo`]                 |
//! | POST   | `/api/caption` | [`CaptionRequest`] → [`CaptionResponse`] |
//!
//! Everything else is served from the static directory, when one is given.
//! Errors are `{"error":{"kind":..,"field":..,"message":..}}` with status 400
//! for invalid requests and 404 for unknown samples.

mod http;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, SceneSample};
use crate::decode::{generate, DecodeOptions};
use crate::model::{ModelKind, SceneInput};

pub use http::{router, run};

pub const DEFAULT_PORT: u16 = 8080;
/// Largest beam a request may ask for.
pub const MAX_BEAM: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub sample_id: u64,
    pub labels: Vec<String>,
    /// Reference captions, tokens joined by single spaces.
    pub references: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRequest {
    pub sample_id: u64,
    #[serde(default)]
    pub mask: Option<Vec<f64>>,
    #[serde(default)]
    pub beam: Option<usize>,
    #[serde(default)]
    pub use_predicted_mask: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub sample_id: u64,
    pub caption: Vec<String>,
    pub logp: f64,
    /// The mask that gated attention; all ones when attention was unmasked.
    pub mask_used: Vec<f64>,
    /// Present for interpret-kind models.
    pub mask_pred: Option<Vec<f64>>,
    /// One row per emitted token, one column per entity.
    pub attention: Vec<Vec<f64>>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ServiceError {
    #[serde(skip)]
    pub status: u16,
    pub kind: &'static str,
    pub field: Option<&'static str>,
    pub message: String,
}

impl ServiceError {
    fn bad(field: &'static str, message: impl Into<String>) -> Self {
        ServiceError {
            status: 400,
            kind: "invalid_request",
            field: Some(field),
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ServiceError {
            status: 500,
            kind: "internal",
            field: None,
            message: message.into(),
        }
    }
}

/// Immutable model and dataset snapshot behind the endpoints.
#[derive(Debug)]
pub struct Service {
    pub checkpoint: Checkpoint,
    samples: BTreeMap<u64, SceneSample>,
    pub max_len: usize,
}

impl Service {
    pub fn new(checkpoint: Checkpoint, dataset: Dataset) -> crate::Result<Self> {
        let samples: BTreeMap<u64, SceneSample> = dataset.samples.into_iter().map(|s| (s.id, s)).collect();
        for s in samples.values() {
            SceneInput::from_sample(s)?.check_against(&checkpoint.model)?;
        }
        Ok(Service {
            checkpoint,
            samples,
            max_len: DecodeOptions::default().max_len,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.checkpoint.kind
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> Vec<SampleInfo> {
        self.samples
            .values()
            .map(|s| SampleInfo {
                sample_id: s.id,
                labels: s.entities.iter().map(|e| e.label.clone()).collect(),
                references: s.captions.iter().map(|c| c.join(" ")).collect(),
            })
            .collect()
    }

    pub fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse, ServiceError> {
        let sample = self.samples.get(&req.sample_id).ok_or_else(|| ServiceError {
            status: 404,
            kind: "not_found",
            field: Some("sample_id"),
            message: format!("no sample with id {}", req.sample_id),
        })?;
        let slots = sample.entities.len();
        let beam = req.beam.unwrap_or(DecodeOptions::default().beam);
        if !(1..=MAX_BEAM).contains(&beam) {
            return Err(ServiceError::bad("beam", format!("beam must be in 1..={MAX_BEAM}")));
        }
        if let Some(m) = &req.mask {
            if m.len() != slots {
                return Err(ServiceError::bad("mask", format!("expected {slots} values, got {}", m.len())));
            }
            if let Some((j, v)) = m.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(ServiceError::bad("mask", format!("entry {j} = {v} is outside [0, 1]")));
            }
        }
        // A base-kind model has no trained predictor but still accepts an
        // explicit mask, which gates its attention the same way.
        let decode_kind = match (self.kind(), &req.mask, req.use_predicted_mask) {
            (_, Some(_), true) => {
                return Err(ServiceError::bad("mask", "give either mask or use_predicted_mask, not both"))
            }
            (ModelKind::Interpret, None, false) => {
                return Err(ServiceError::bad("mask", "interpret models need a mask or use_predicted_mask"))
            }
            (ModelKind::Base, None, true) => {
                return Err(ServiceError::bad("use_predicted_mask", "base models have no mask predictor"))
            }
            (ModelKind::Base, None, false) => ModelKind::Base,
            _ => ModelKind::Interpret,
        };
        let scene = SceneInput::from_sample(sample).map_err(|e| ServiceError::internal(e.to_string()))?;
        let model = &self.checkpoint.model;
        let opts = DecodeOptions { beam, max_len: self.max_len };
        let g = generate(model, &scene, decode_kind, req.mask.as_deref(), &opts)
            .map_err(|e| ServiceError::internal(e.to_string()))?;
        let mask_pred = match self.kind() {
            ModelKind::Interpret => g.trace.mask_pred.clone(),
            ModelKind::Base => None,
        };
        let resp = CaptionResponse {
            sample_id: sample.id,
            caption: self.checkpoint.vocab.decode(&g.tokens),
            logp: g.logp,
            mask_used: g.trace.mask.clone().unwrap_or_else(|| vec![1.0; slots]),
            mask_pred,
            attention: g.trace.steps,
            degenerate: g.trace.degenerate,
        };
        check_response(&resp, slots)?;
        Ok(resp)
    }
}

fn check_response(r: &CaptionResponse, slots: usize) -> Result<(), ServiceError> {
    let lengths_ok = r.mask_used.len() == slots
        && r.mask_pred.as_ref().is_none_or(|m| m.len() == slots)
        && r.attention.iter().all(|row| row.len() == slots);
    if !lengths_ok {
        return Err(ServiceError::internal("response arrays do not match the entity count"));
    }
    if !r.degenerate && r.attention.iter().any(|row| (row.iter().sum::<f64>() - 1.0).abs() > 1e-6) {
        return Err(ServiceError::internal("attention row does not sum to one"));
    }
    Ok(())
}
