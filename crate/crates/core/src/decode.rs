//! Greedy and beam-search caption generation, optionally under a mask override.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{SceneSample, Vocabulary, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, RecurrentState, SceneContext, SceneInput};

pub const CAPTIONS_HEADER: &str = "#maskcap-captions v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Upper bound on emitted tokens, EOS included.
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { beam: 5, max_len: 20 }
    }
}

/// Attention weights of the returned hypothesis, one row per emitted token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    /// Mask that gated attention, if any.
    pub mask: Option<Vec<f64>>,
    /// Mask predicted by the model (interpret kind only), even when overridden.
    pub mask_pred: Option<Vec<f64>>,
    pub steps: Vec<Vec<f64>>,
    /// Some step fell back to unmasked attention because the mask had no mass.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Caption tokens without EOS.
    pub tokens: Vec<usize>,
    pub logp: f64,
    /// Ended with EOS rather than at `max_len`.
    pub finished: bool,
    pub trace: AttentionTrace,
}

fn emittable(token: usize) -> bool {
    !matches!(token, PAD | BOS | UNK)
}

fn context<'m>(
    model: &'m Model,
    scene: &SceneInput,
    kind: ModelKind,
    mask_override: Option<&[f64]>,
) -> Result<(SceneContext<'m>, Option<Vec<f64>>)> {
    match kind {
        ModelKind::Base => {
            if mask_override.is_some() {
                return Err(Error::Config("a mask override needs the interpret kind".into()));
            }
            Ok((SceneContext::new(model, scene, None)?, None))
        }
        ModelKind::Interpret => {
            let pred = model.predict_mask(scene)?;
            let mask = mask_override.unwrap_or(&pred);
            Ok((SceneContext::new(model, scene, Some(mask))?, Some(pred)))
        }
    }
}

fn check_options(opts: &DecodeOptions) -> Result<()> {
    if opts.beam == 0 || opts.max_len == 0 {
        return Err(Error::Config("beam and max_len must be at least 1".into()));
    }
    Ok(())
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
    state: RecurrentState,
    attention: Vec<Vec<f64>>,
    degenerate: bool,
}

/// Higher logp first; equal logp falls back to the smaller token sequence.
fn rank(a_logp: f64, a: &[usize], b_logp: f64, b: &[usize]) -> Ordering {
    b_logp.total_cmp(&a_logp).then_with(|| a.cmp(b))
}

/// Beam search without length normalization.
///
/// Each step ranks every expansion of the live hypotheses. EOS expansions
/// ranked within the top `beam` are finished; the best `beam` other
/// expansions stay live. At the last step every EOS expansion is finished.
/// Search ends once no live hypothesis outscores the best finished one, and
/// the result is the best of the finished and the length-capped hypotheses.
pub fn generate(
    model: &Model,
    scene: &SceneInput,
    kind: ModelKind,
    mask_override: Option<&[f64]>,
    opts: &DecodeOptions,
) -> Result<Generated> {
    check_options(opts)?;
    let (ctx, mask_pred) = context(model, scene, kind, mask_override)?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
        state: ctx.initial_state(),
        attention: Vec::new(),
        degenerate: false,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for t in 1..=opts.max_len {
        let last_step = t == opts.max_len;
        let mut expansions = Vec::with_capacity(live.len());
        let mut candidates: Vec<(usize, usize, f64, Vec<usize>)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let input = hyp.tokens.last().copied().unwrap_or(BOS);
            let out = ctx.step(&hyp.state, input)?;
            for (tok, lp) in out.log_probs.iter().enumerate() {
                if emittable(tok) {
                    let mut seq = hyp.tokens.clone();
                    seq.push(tok);
                    candidates.push((h, tok, hyp.logp + lp, seq));
                }
            }
            expansions.push(out);
        }
        candidates.sort_by(|a, b| rank(a.2, &a.3, b.2, &b.3));
        let extend = |h: usize, tokens: Vec<usize>, logp: f64| {
            let out = &expansions[h];
            let mut attention = live[h].attention.clone();
            attention.push(out.attention.clone());
            Hyp {
                tokens,
                logp,
                state: out.state.clone(),
                attention,
                degenerate: live[h].degenerate || out.degenerate,
            }
        };
        let mut next = Vec::with_capacity(opts.beam);
        for (r, (h, tok, logp, seq)) in candidates.into_iter().enumerate() {
            if tok == EOS {
                if r < opts.beam || last_step {
                    finished.push(extend(h, seq, logp));
                }
            } else if next.len() < opts.beam {
                next.push(extend(h, seq, logp));
            }
        }
        live = next;
        let best_finished = finished.iter().map(|f| f.logp).fold(f64::NEG_INFINITY, f64::max);
        if live.first().is_none_or(|h| h.logp <= best_finished) {
            break;
        }
    }
    let mut pool: Vec<(Hyp, bool)> = finished.into_iter().map(|h| (h, true)).collect();
    pool.extend(live.into_iter().filter(|h| h.tokens.len() == opts.max_len).map(|h| (h, false)));
    let (best, done) = pool
        .into_iter()
        .min_by(|a, b| rank(a.0.logp, &a.0.tokens, b.0.logp, &b.0.tokens))
        .ok_or_else(|| Error::NonFinite("beam search produced no hypothesis".into()))?;
    let mut tokens = best.tokens;
    if done {
        tokens.pop();
    }
    Ok(Generated {
        tokens,
        logp: best.logp,
        finished: done,
        trace: AttentionTrace {
            mask: ctx.mask().map(<[f64]>::to_vec),
            mask_pred,
            steps: best.attention,
            degenerate: best.degenerate,
        },
    })
}

/// Picks the most probable emittable token at every step (lowest id on ties).
pub fn greedy(
    model: &Model,
    scene: &SceneInput,
    kind: ModelKind,
    mask_override: Option<&[f64]>,
    max_len: usize,
) -> Result<Generated> {
    check_options(&DecodeOptions { beam: 1, max_len })?;
    let (ctx, mask_pred) = context(model, scene, kind, mask_override)?;
    let mut state = ctx.initial_state();
    let mut input = BOS;
    let mut tokens = Vec::new();
    let mut logp = 0.0;
    let mut trace = AttentionTrace {
        mask: ctx.mask().map(<[f64]>::to_vec),
        mask_pred,
        ..Default::default()
    };
    for _ in 0..max_len {
        let out = ctx.step(&state, input)?;
        let mut best = None::<(usize, f64)>;
        for (tok, &lp) in out.log_probs.iter().enumerate() {
            if emittable(tok) && best.is_none_or(|(_, b)| lp > b) {
                best = Some((tok, lp));
            }
        }
        let (tok, lp) = best.expect("vocabulary has emittable tokens");
        logp += lp;
        trace.steps.push(out.attention);
        trace.degenerate |= out.degenerate;
        if tok == EOS {
            return Ok(Generated { tokens, logp, finished: true, trace });
        }
        tokens.push(tok);
        state = out.state;
        input = tok;
    }
    Ok(Generated { tokens, logp, finished: false, trace })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub sample_id: u64,
    pub tokens: Vec<String>,
    pub logp: f64,
}

/// One top caption per sample, ordered by ascending id. Samples listed in
/// `overrides` decode under that mask.
pub fn generate_batch(
    model: &Model,
    vocab: &Vocabulary,
    kind: ModelKind,
    samples: &[SceneSample],
    overrides: &BTreeMap<u64, Vec<f64>>,
    opts: &DecodeOptions,
) -> Result<Vec<CaptionRecord>> {
    let mut order: Vec<&SceneSample> = samples.iter().collect();
    order.sort_by_key(|s| s.id);
    order
        .into_iter()
        .map(|s| {
            let scene = SceneInput::from_sample(s)?;
            let g = generate(model, &scene, kind, overrides.get(&s.id).map(Vec::as_slice), opts)?;
            Ok(CaptionRecord {
                sample_id: s.id,
                tokens: vocab.decode(&g.tokens),
                logp: g.logp,
            })
        })
        .collect()
}

pub fn captions_to_text(records: &[CaptionRecord]) -> String {
    let mut out = format!("{CAPTIONS_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}", r.sample_id, r.tokens.join(" "), r.logp);
    }
    out
}

pub fn parse_captions(text: &str, source: &str) -> Result<Vec<CaptionRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CAPTIONS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: source.into(),
                line: 1,
                msg: format!("expected header `{CAPTIONS_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: source.into(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad("expected `id<TAB>tokens<TAB>logp`"));
        }
        out.push(CaptionRecord {
            sample_id: fields[0].parse().map_err(|_| bad("bad sample id"))?,
            tokens: fields[1].split_whitespace().map(str::to_string).collect(),
            logp: fields[2].parse().map_err(|_| bad("bad logp"))?,
        });
    }
    Ok(out)
}

pub fn save_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    fs::write(path, captions_to_text(records)).map_err(|e| Error::io(path, e))
}

pub fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_captions(&text, &path.display().to_string())
}
