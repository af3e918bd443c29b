//! Teacher-forced forward passes on the tape, losses and parameter gradients.

use super::{Model, ModelKind, ModelParams};
use crate::data::{SceneSample, BOS, EOS};
use crate::error::{Error, Result};
use crate::numkern::{lstm_cell, CellVars, Gradients, Tape, Tensor, Var};

/// Entity and global features of one scene, checked against a model config.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput {
    /// `L × D`
    pub entities: Tensor,
    /// `V`
    pub global: Tensor,
}

impl SceneInput {
    pub fn new(entities: Tensor, global: Tensor) -> Result<Self> {
        if entities.shape().len() != 2 || global.shape().len() != 1 {
            return Err(Error::dim(
                "scene",
                format!("entities {:?}, global {:?}", entities.shape(), global.shape()),
            ));
        }
        Ok(SceneInput { entities, global })
    }

    pub fn from_sample(s: &SceneSample) -> Result<Self> {
        let d = s.entities.first().map_or(0, |e| e.feature.len());
        let flat: Vec<f64> = s.entities.iter().flat_map(|e| e.feature.iter().copied()).collect();
        SceneInput::new(
            Tensor::new(vec![s.entities.len(), d], flat)?,
            Tensor::vector(s.global.clone())?,
        )
    }

    pub fn slots(&self) -> usize {
        self.entities.shape()[0]
    }

    pub fn check_against(&self, model: &Model) -> Result<()> {
        let c = &model.config;
        let (l, d) = (self.entities.shape()[0], self.entities.shape()[1]);
        if d != c.entity_dim || self.global.len() != c.global_dim || l > c.slots {
            return Err(Error::dim(
                "scene",
                format!(
                    "scene has L={l}, D={d}, V={}; model expects L≤{}, D={}, V={}",
                    self.global.len(),
                    c.slots,
                    c.entity_dim,
                    c.global_dim
                ),
            ));
        }
        Ok(())
    }
}

/// Where masked attention takes its mask from.
#[derive(Clone, Copy, Debug)]
pub enum MaskGate<'a> {
    /// The model's own per-entity prediction.
    Predicted,
    /// A caller-supplied mask with entries in `[0, 1]`.
    Fixed(&'a [f64]),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTrace {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub attention: Vec<f64>,
    pub probs: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    pub steps: Vec<StepTrace>,
    pub mask_pred: Option<Vec<f64>>,
    /// Set when any step fell back to unmasked attention.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Caption NLL plus the weighted mask BCE (interpret only).
    pub loss: f64,
    pub nll: f64,
    pub bce: Option<f64>,
    /// Steps whose most probable token equals the target.
    pub correct: usize,
    pub targets: usize,
    pub trace: ForwardTrace,
}

/// Parameters registered as tape leaves, in [`ModelParams::named`] order.
struct Bound {
    leaves: Vec<Var>,
    emb: Var,
    cell1: CellVars,
    cell2: CellVars,
    attn_entity_t: Var,
    attn_hidden: Var,
    attn_reduce: Var,
    attn_project: Option<Var>,
    output: Var,
    mask_hidden_t: Var,
    mask_hidden_bias: Var,
    mask_out: Var,
    mask_out_bias: Var,
}

fn bind(p: &ModelParams, tape: &mut Tape) -> Result<Bound> {
    let leaves: Vec<Var> = p.named().iter().map(|(_, t)| tape.leaf(t)).collect();
    let mut it = leaves.iter().copied();
    let mut next = || it.next().expect("leaf per parameter");
    let emb = next();
    let cell1 = CellVars {
        w_input: next(),
        w_hidden: next(),
        bias: next(),
        hidden: p.cell1.hidden(),
    };
    let cell2 = CellVars {
        w_input: next(),
        w_hidden: next(),
        bias: next(),
        hidden: p.cell2.hidden(),
    };
    let attn_entity = next();
    let attn_hidden = next();
    let attn_reduce = next();
    let attn_project = p.attn_project.as_ref().map(|_| next());
    let output = next();
    let mask_hidden = next();
    let mask_hidden_bias = next();
    let mask_out = next();
    let mask_out_bias = next();
    let attn_entity_t = tape.transpose(attn_entity)?;
    let mask_hidden_t = tape.transpose(mask_hidden)?;
    Ok(Bound {
        leaves,
        emb,
        cell1,
        cell2,
        attn_entity_t,
        attn_hidden,
        attn_reduce,
        attn_project,
        output,
        mask_hidden_t,
        mask_hidden_bias,
        mask_out,
        mask_out_bias,
    })
}

fn grads_to_params(p: &ModelParams, b: &Bound, g: &Gradients) -> ModelParams {
    let mut out = p.zeros_like();
    for ((_, slot), v) in out.named_mut().into_iter().zip(&b.leaves) {
        if let Some(gv) = g.get(*v) {
            slot.data_mut().copy_from_slice(gv);
        }
    }
    out
}

struct SceneVars {
    entities: Var,
    global: Var,
    /// `L × M` entity half of the attention pre-activation.
    entity_proj: Var,
    slots: usize,
}

fn scene_vars(tape: &mut Tape, b: &Bound, scene: &SceneInput) -> Result<SceneVars> {
    let entities = tape.constant(&scene.entities);
    let global = tape.constant(&scene.global);
    let entity_proj = tape.matmul(entities, b.attn_entity_t)?;
    Ok(SceneVars {
        entities,
        global,
        entity_proj,
        slots: scene.slots(),
    })
}

/// Per-slot `sigmoid(w₂ · tanh(W₁ a_j + b₁) + b₂)`.
fn predict_mask_var(tape: &mut Tape, b: &Bound, s: &SceneVars) -> Result<Var> {
    let hidden = tape.matmul(s.entities, b.mask_hidden_t)?;
    let hidden = tape.add_rows(hidden, b.mask_hidden_bias)?;
    let hidden = tape.tanh(hidden);
    let logits = tape.matvec(hidden, b.mask_out)?;
    let logits = tape.reshape(logits, &[s.slots, 1])?;
    let logits = tape.add_rows(logits, b.mask_out_bias)?;
    let logits = tape.reshape(logits, &[s.slots])?;
    Ok(tape.sigmoid(logits))
}

struct CaptionGraph {
    nll: Var,
    correct: usize,
    targets: usize,
    degenerate_steps: usize,
    steps: Vec<StepTrace>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn caption_graph(
    tape: &mut Tape,
    b: &Bound,
    model: &Model,
    s: &SceneVars,
    caption: &[usize],
    mask: Option<Var>,
    record: bool,
) -> Result<CaptionGraph> {
    let cfg = &model.config;
    if let Some(&bad) = caption.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::dim("caption", format!("token {bad} outside vocabulary of {}", cfg.vocab)));
    }
    let zeros1 = tape.constant_vec(vec![0.0; cfg.hidden1]);
    let zeros2 = tape.constant_vec(vec![0.0; cfg.hidden2]);
    let (mut h1, mut c1, mut h2, mut c2) = (zeros1, zeros1, zeros2, zeros2);

    let inputs = std::iter::once(BOS).chain(caption.iter().copied());
    let targets = caption.iter().copied().chain(std::iter::once(EOS));
    let mut step_losses = Vec::with_capacity(caption.len() + 1);
    let mut out = CaptionGraph {
        nll: zeros1,
        correct: 0,
        targets: 0,
        degenerate_steps: 0,
        steps: Vec::new(),
    };
    for (input, target) in inputs.zip(targets) {
        let w = tape.gather_row(b.emb, input)?;
        let x = tape.concat(&[s.global, w])?;
        (h1, c1) = lstm_cell(tape, x, h1, c1, &b.cell1)?;

        let q = tape.matvec(b.attn_hidden, h1)?;
        let pre = tape.add_rows(s.entity_proj, q)?;
        let act = tape.tanh(pre);
        let scores = tape.matvec(act, b.attn_reduce)?;
        let (alpha, degenerate) = match mask {
            None => (tape.softmax(scores)?, false),
            Some(m) => tape.masked_softmax(scores, m)?,
        };
        out.degenerate_steps += usize::from(degenerate);
        let mut attended = tape.vecmat(alpha, s.entities)?;
        if let Some(proj) = b.attn_project {
            attended = tape.matvec(proj, attended)?;
        }
        let x2 = tape.add(attended, h1)?;
        (h2, c2) = lstm_cell(tape, x2, h2, c2, &b.cell2)?;

        let z = tape.concat(&[s.global, h2])?;
        let logits = tape.matvec(b.output, z)?;
        step_losses.push(tape.softmax_nll(logits, target)?);

        let lv = tape.value(logits);
        out.correct += usize::from(argmax(lv) == target);
        out.targets += 1;
        if record {
            out.steps.push(StepTrace {
                h1: tape.value(h1).to_vec(),
                h2: tape.value(h2).to_vec(),
                attention: tape.value(alpha).to_vec(),
                probs: crate::numkern::kernels::softmax(lv),
                degenerate,
            });
        }
    }
    let all = tape.concat(&step_losses)?;
    out.nll = tape.sum(all);
    Ok(out)
}

fn check_mask(mask: &[f64], slots: usize, what: &str) -> Result<()> {
    if mask.len() != slots {
        return Err(Error::dim("mask", format!("{what} has length {} for {slots} entity slots", mask.len())));
    }
    if let Some(v) = mask.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("{what} entry {v} outside [0, 1]")));
    }
    Ok(())
}

impl Model {
    /// Unmasked teacher-forced pass. `caption` holds vocabulary ids without
    /// BOS/EOS; inputs are `BOS, c…` and targets `c…, EOS`.
    pub fn forward_base(&self, scene: &SceneInput, caption: &[usize]) -> Result<ForwardOutput> {
        scene.check_against(self)?;
        let mut tape = Tape::new();
        let b = bind(&self.params, &mut tape)?;
        let s = scene_vars(&mut tape, &b, scene)?;
        let g = caption_graph(&mut tape, &b, self, &s, caption, None, true)?;
        let nll = tape.scalar(g.nll);
        Ok(ForwardOutput {
            loss: nll,
            nll,
            bce: None,
            correct: g.correct,
            targets: g.targets,
            trace: ForwardTrace {
                steps: g.steps,
                mask_pred: None,
                degenerate: false,
            },
        })
    }

    /// Masked teacher-forced pass with joint loss `NLL + λ · BCE(mask_pred, mask_gt)`.
    pub fn forward_interpret(
        &self,
        scene: &SceneInput,
        caption: &[usize],
        mask_gt: &[f64],
        gate: MaskGate<'_>,
        lambda: f64,
    ) -> Result<ForwardOutput> {
        scene.check_against(self)?;
        check_mask(mask_gt, scene.slots(), "ground-truth mask")?;
        let mut tape = Tape::new();
        let b = bind(&self.params, &mut tape)?;
        let s = scene_vars(&mut tape, &b, scene)?;
        let pred = predict_mask_var(&mut tape, &b, &s)?;
        let gate_var = match gate {
            MaskGate::Predicted => pred,
            MaskGate::Fixed(m) => {
                check_mask(m, scene.slots(), "mask override")?;
                tape.constant_vec(m.to_vec())
            }
        };
        let g = caption_graph(&mut tape, &b, self, &s, caption, Some(gate_var), true)?;
        let bce = tape.bce(pred, mask_gt)?;
        let nll = tape.scalar(g.nll);
        let bce = tape.scalar(bce);
        Ok(ForwardOutput {
            loss: nll + lambda * bce,
            nll,
            bce: Some(bce),
            correct: g.correct,
            targets: g.targets,
            trace: ForwardTrace {
                steps: g.steps,
                mask_pred: Some(tape.value(pred).to_vec()),
                degenerate: g.degenerate_steps > 0,
            },
        })
    }
}

/// Which mask gates attention while training the masked model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateSource {
    /// The predicted mask, so caption loss also trains the mask MLP.
    Predicted,
    /// The caption's ground-truth mask; the MLP learns from the BCE term only.
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub kind: ModelKind,
    pub gate: GateSource,
    pub lambda: f64,
}

impl Objective {
    pub fn base() -> Self {
        Objective {
            kind: ModelKind::Base,
            gate: GateSource::Predicted,
            lambda: 1.0,
        }
    }

    pub fn interpret(gate: GateSource) -> Self {
        Objective {
            kind: ModelKind::Interpret,
            gate,
            lambda: 1.0,
        }
    }
}

/// One teacher-forced training example.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub scene: &'a SceneInput,
    pub caption: &'a [usize],
    pub mask_gt: Option<&'a [f64]>,
}

/// Sums over a batch; `loss` is the batch mean of the per-example objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub examples: usize,
    pub loss: f64,
    pub nll_sum: f64,
    pub bce_sum: f64,
    pub correct: usize,
    pub targets: usize,
    pub degenerate_steps: usize,
}

impl BatchStats {
    pub fn merge(&mut self, other: &BatchStats) {
        let n = (self.examples + other.examples) as f64;
        if n > 0.0 {
            self.loss = (self.loss * self.examples as f64 + other.loss * other.examples as f64) / n;
        }
        self.examples += other.examples;
        self.nll_sum += other.nll_sum;
        self.bce_sum += other.bce_sum;
        self.correct += other.correct;
        self.targets += other.targets;
        self.degenerate_steps += other.degenerate_steps;
    }

    pub fn mean_nll(&self) -> f64 {
        if self.examples == 0 {
            0.0
        } else {
            self.nll_sum / self.examples as f64
        }
    }

    pub fn mean_bce(&self) -> f64 {
        if self.examples == 0 {
            0.0
        } else {
            self.bce_sum / self.examples as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.targets == 0 {
            0.0
        } else {
            self.correct as f64 / self.targets as f64
        }
    }
}

fn build_batch(
    tape: &mut Tape,
    model: &Model,
    examples: &[Example<'_>],
    objective: Objective,
) -> Result<(Bound, Option<Var>, BatchStats)> {
    let b = bind(&model.params, tape)?;
    let mut stats = BatchStats::default();
    let mut terms = Vec::with_capacity(examples.len());
    for ex in examples {
        ex.scene.check_against(model)?;
        let s = scene_vars(tape, &b, ex.scene)?;
        let (mask, pred) = match objective.kind {
            ModelKind::Base => (None, None),
            ModelKind::Interpret => {
                let gt = ex
                    .mask_gt
                    .ok_or_else(|| Error::Config("masked objective needs ground-truth masks".into()))?;
                check_mask(gt, s.slots, "ground-truth mask")?;
                let pred = predict_mask_var(tape, &b, &s)?;
                let gate = match objective.gate {
                    GateSource::Predicted => pred,
                    GateSource::GroundTruth => tape.constant_vec(gt.to_vec()),
                };
                (Some(gate), Some((pred, gt)))
            }
        };
        let g = caption_graph(tape, &b, model, &s, ex.caption, mask, false)?;
        stats.nll_sum += tape.scalar(g.nll);
        stats.correct += g.correct;
        stats.targets += g.targets;
        stats.degenerate_steps += g.degenerate_steps;
        let term = match pred {
            Some((pred, gt)) => {
                let bce = tape.bce(pred, gt)?;
                stats.bce_sum += tape.scalar(bce);
                let weighted = tape.scale(bce, objective.lambda);
                tape.add(g.nll, weighted)?
            }
            None => g.nll,
        };
        terms.push(term);
    }
    stats.examples = examples.len();
    if terms.is_empty() {
        return Ok((b, None, stats));
    }
    let all = tape.concat(&terms)?;
    let total = tape.sum(all);
    let mean = tape.scale(total, 1.0 / examples.len() as f64);
    stats.loss = tape.scalar(mean);
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok((b, Some(mean), stats))
}

/// Batch-mean loss and its gradient with respect to every parameter.
pub fn batch_loss_and_grad(
    model: &Model,
    examples: &[Example<'_>],
    objective: Objective,
) -> Result<(BatchStats, ModelParams)> {
    let mut tape = Tape::new();
    let (b, loss, stats) = build_batch(&mut tape, model, examples, objective)?;
    let grads = match loss {
        Some(l) => grads_to_params(&model.params, &b, &tape.backward(l)?),
        None => model.params.zeros_like(),
    };
    Ok((stats, grads))
}

/// Batch statistics without a backward pass.
pub fn batch_loss(model: &Model, examples: &[Example<'_>], objective: Objective) -> Result<BatchStats> {
    let mut tape = Tape::new();
    Ok(build_batch(&mut tape, model, examples, objective)?.2)
}
