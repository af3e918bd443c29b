//! Mini-batch training: Adam, global-norm clipping and a plateau schedule.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{
    batch_loss, batch_loss_and_grad, BatchStats, Example, GateSource, Model, ModelKind, ModelParams, Objective,
    SceneInput,
};
use crate::numkern::Tensor;

/// Header of the per-epoch training log.
pub const LOG_HEADER: &str = "epoch,train_nll,train_bce,val_nll,lr,seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch: usize,
    pub epochs: usize,
    pub clip_max_norm: f64,
    /// The learning rate is divided by this on a plateau.
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Weight of the mask BCE term.
    pub lambda_mask: f64,
    pub mask_gating: GateSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            batch: 50,
            epochs: 25,
            clip_max_norm: 1.0,
            plateau_factor: 10.0,
            plateau_patience: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            lambda_mask: 1.0,
            mask_gating: GateSource::Predicted,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clip_max_norm", self.clip_max_norm),
            ("eps", self.eps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("lr0 must be non-negative".into()));
        }
        if !(self.plateau_factor > 1.0) {
            return Err(Error::Config("plateau_factor must exceed 1".into()));
        }
        if self.batch == 0 || self.plateau_patience == 0 {
            return Err(Error::Config("batch and plateau_patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.lambda_mask >= 0.0) {
            return Err(Error::Config("lambda_mask must be non-negative".into()));
        }
        Ok(())
    }

    pub fn objective(&self, kind: ModelKind) -> Objective {
        Objective {
            kind,
            gate: self.mask_gating,
            lambda: self.lambda_mask,
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [(&str, &mut Tensor)], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm {max_norm} must be positive")));
    }
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    let norm = grads.iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Tensor>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Vec<f64>> = shapes.into_iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn for_params(p: &ModelParams, cfg: &TrainConfig) -> Self {
        Adam::new(p.named().into_iter().map(|(_, t)| t), cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(
                "adam",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::dim("adam", format!("tensor {i} changed size")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("parameter {i} after Adam update")));
            }
        }
        Ok(())
    }

    pub fn step_params(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        let g: Vec<&Tensor> = grads.named().into_iter().map(|(_, t)| t).collect();
        let mut p: Vec<&mut Tensor> = params.named_mut().into_iter().map(|(_, t)| t).collect();
        self.update(&mut p, &g, lr)
    }
}

/// Validation-driven step schedule: `lr = lr0 / factor^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr0: f64,
    pub factor: f64,
    pub patience: usize,
    pub reductions: u32,
    pub best: Option<f64>,
    pub since_improvement: usize,
}

impl Plateau {
    pub fn new(lr0: f64, factor: f64, patience: usize) -> Self {
        Plateau {
            lr0,
            factor,
            patience,
            reductions: 0,
            best: None,
            since_improvement: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr0 / self.factor.powi(self.reductions as i32)
    }
}

/// Records one epoch's validation loss. Returns true when the rate was cut.
pub fn plateau_schedule(state: &mut Plateau, val_loss: f64) -> bool {
    if state.best.is_none_or(|b| val_loss < b) {
        state.best = Some(val_loss);
        state.since_improvement = 0;
        return false;
    }
    state.since_improvement += 1;
    if state.since_improvement >= state.patience {
        state.reductions += 1;
        state.since_improvement = 0;
        return true;
    }
    false
}

/// A sample's features with one caption already encoded.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample_id: u64,
    pub scene: SceneInput,
    pub caption: Vec<usize>,
    pub mask: Option<Vec<f64>>,
}

impl Prepared {
    pub fn example(&self) -> Example<'_> {
        Example {
            scene: &self.scene,
            caption: &self.caption,
            mask_gt: self.mask.as_deref(),
        }
    }
}

/// One entry per (sample, caption), in dataset order.
pub fn prepare(dataset: &Dataset, vocab: &Vocabulary) -> Result<Vec<Prepared>> {
    let mut out = Vec::new();
    for s in &dataset.samples {
        let scene = SceneInput::from_sample(s)?;
        for (c, caption) in s.captions.iter().enumerate() {
            out.push(Prepared {
                sample_id: s.id,
                scene: scene.clone(),
                caption: vocab.encode(caption),
                mask: s.mask(c).map(|m| m.iter().map(|&b| f64::from(b)).collect()),
            });
        }
    }
    Ok(out)
}

/// Teacher-forced statistics over `data` in chunks of `batch`.
pub fn evaluate(model: &Model, data: &[Prepared], objective: Objective, batch: usize) -> Result<BatchStats> {
    let mut total = BatchStats::default();
    for chunk in data.chunks(batch.max(1)) {
        let ex: Vec<Example> = chunk.iter().map(Prepared::example).collect();
        total.merge(&batch_loss(model, &ex, objective)?);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    /// Zero for the base kind.
    pub train_bce: f64,
    pub val_nll: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
    pub train_accuracy: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.train_nll, self.train_bce, self.val_nll, self.lr, self.seconds
        )
    }
}

/// Mutable training state for one model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub kind: ModelKind,
    pub config: TrainConfig,
    pub adam: Adam,
    pub schedule: Plateau,
    pub epoch: usize,
    pub best: Option<(f64, ModelParams)>,
    rng: ChaCha8Rng,
    /// Largest post-clip global gradient norm applied so far.
    pub max_applied_norm: f64,
}

impl Trainer {
    pub fn new(model: Model, kind: ModelKind, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            adam: Adam::for_params(&model.params, &config),
            schedule: Plateau::new(config.lr0, config.plateau_factor, config.plateau_patience),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            kind,
            config,
            epoch: 0,
            best: None,
            max_applied_norm: 0.0,
        })
    }

    pub fn objective(&self) -> Objective {
        self.config.objective(self.kind)
    }

    fn check_data(&self, data: &[Prepared]) -> Result<()> {
        if let Some(p) = data.first() {
            p.scene.check_against(&self.model)?;
        }
        if self.kind == ModelKind::Interpret {
            if let Some(p) = data.iter().find(|p| p.mask.is_none()) {
                return Err(Error::Config(format!(
                    "sample {} has no ground-truth masks; run build-masks first",
                    p.sample_id
                )));
            }
        }
        Ok(())
    }

    /// One gradient step on `batch`; returns its statistics.
    pub fn step(&mut self, batch: &[Example<'_>]) -> Result<BatchStats> {
        let (stats, mut grads) = batch_loss_and_grad(&self.model, batch, self.objective())?;
        let mut named = grads.named_mut();
        let norm = clip_gradients(&mut named, self.config.clip_max_norm)?;
        self.max_applied_norm = self.max_applied_norm.max(norm.min(self.config.clip_max_norm));
        self.adam.step_params(&mut self.model.params, &grads, self.schedule.lr())?;
        Ok(stats)
    }

    /// One pass over `train` in a seeded random order; the last short batch is kept.
    pub fn train_epoch(&mut self, train: &[Prepared]) -> Result<BatchStats> {
        self.check_data(train)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = BatchStats::default();
        for chunk in order.chunks(self.config.batch) {
            let ex: Vec<Example> = chunk.iter().map(|&i| train[i].example()).collect();
            total.merge(&self.step(&ex)?);
        }
        self.epoch += 1;
        Ok(total)
    }

    /// Validation caption NLL, without the mask term, for model selection.
    pub fn validate(&self, val: &[Prepared]) -> Result<f64> {
        Ok(evaluate(&self.model, val, self.objective(), self.config.batch)?.mean_nll())
    }

    /// Feeds the schedule and keeps the best parameters seen.
    pub fn end_epoch(&mut self, val_nll: f64) {
        if self.best.as_ref().is_none_or(|(b, _)| val_nll < *b) {
            self.best = Some((val_nll, self.model.params.clone()));
        }
        if plateau_schedule(&mut self.schedule, val_nll) {
            log::info!("epoch {}: learning rate reduced to {}", self.epoch, self.schedule.lr());
        }
    }

    /// Runs the configured number of epochs and returns the log. When `val`
    /// is empty the training NLL stands in for model selection.
    pub fn fit(&mut self, train: &[Prepared], val: &[Prepared], mut log: Option<&mut dyn Write>) -> Result<Vec<EpochLog>> {
        self.check_data(train)?;
        self.check_data(val)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io("training log", e))?;
        }
        let mut history = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let started = Instant::now();
            let lr = self.schedule.lr();
            let stats = self.train_epoch(train)?;
            let val_nll = if val.is_empty() { stats.mean_nll() } else { self.validate(val)? };
            self.end_epoch(val_nll);
            let entry = EpochLog {
                epoch: self.epoch,
                train_nll: stats.mean_nll(),
                train_bce: stats.mean_bce(),
                val_nll,
                lr,
                seconds: started.elapsed().as_secs_f64(),
                train_accuracy: stats.accuracy(),
            };
            log::info!("{}", entry.csv_row());
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", entry.csv_row()).map_err(|e| Error::io("training log", e))?;
            }
            history.push(entry);
        }
        Ok(history)
    }

    /// The best-validation model, or the current one if no epoch has ended.
    pub fn best_model(&self) -> Model {
        match &self.best {
            Some((_, p)) => Model {
                config: self.model.config.clone(),
                params: p.clone(),
            },
            None => self.model.clone(),
        }
    }
}
