//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};

use maskcap::data::synth::SynthOutput;
use maskcap::data::EOS;
use maskcap::metrics::Corpus;
use maskcap::model::{Model, ModelConfig, SceneInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// String-keyed n-grams, recursive LCS, normalized tf.

pub fn grams(c: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if c.len() >= n {
        for i in 0..=c.len() - n {
            *m.entry(c[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
    }
    m
}

pub fn oracle_bleu(c: &Corpus) -> f64 {
    let mut num = [0.0; 4];
    let mut den = [0.0; 4];
    let mut clen = 0.0;
    let mut rlen = 0.0;
    for (cand, refs) in c.candidates.iter().zip(&c.references) {
        clen += cand.len() as f64;
        let mut lens: Vec<usize> = refs.iter().map(|r| r.len()).collect();
        lens.sort();
        let mut best = lens[0];
        for &l in &lens {
            if (l as i64 - cand.len() as i64).abs() < (best as i64 - cand.len() as i64).abs() {
                best = l;
            }
        }
        rlen += best as f64;
        for n in 1..=4 {
            for (g, k) in grams(cand, n) {
                let mut mx: f64 = 0.0;
                for r in refs {
                    mx = mx.max(*grams(r, n).get(&g).unwrap_or(&0.0));
                }
                num[n - 1] += k.min(mx);
                den[n - 1] += k;
            }
        }
    }
    if clen == 0.0 || num.contains(&0.0) {
        return 0.0;
    }
    let mut prod = 1.0;
    for i in 0..4 {
        prod *= num[i] / den[i];
    }
    let bp = if clen > rlen { 1.0 } else { (1.0 - rlen / clen).exp() };
    bp * prod.powf(0.25)
}

pub fn lcs_rec(a: &[String], b: &[String], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let v = if a[a.len() - 1] == b[b.len() - 1] {
        1 + lcs_rec(&a[..a.len() - 1], &b[..b.len() - 1], memo)
    } else {
        lcs_rec(&a[..a.len() - 1], b, memo).max(lcs_rec(a, &b[..b.len() - 1], memo))
    };
    memo.insert((a.len(), b.len()), v);
    v
}

pub fn oracle_rouge(c: &Corpus) -> f64 {
    let mut sum = 0.0;
    for (cand, refs) in c.candidates.iter().zip(&c.references) {
        let mut best: f64 = 0.0;
        for r in refs {
            let l = lcs_rec(cand, r, &mut BTreeMap::new()) as f64;
            if l > 0.0 {
                let p = l / cand.len() as f64;
                let rr = l / r.len() as f64;
                let b = 1.2f64;
                best = best.max((1.0 + b * b) * p * rr / (rr + b * b * p));
            }
        }
        sum += best;
    }
    sum / c.len() as f64
}

pub fn oracle_cider(c: &Corpus) -> f64 {
    let n_docs = c.len() as f64;
    let mut score = vec![0.0; c.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for refs in &c.references {
            let mut seen = BTreeSet::new();
            for r in refs {
                seen.extend(grams(r, n).into_keys());
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        let vec_of = |s: &[String]| -> BTreeMap<String, f64> {
            let g = grams(s, n);
            let total: f64 = g.values().sum();
            g.into_iter()
                .map(|(k, v)| {
                    let d = df.get(&k).copied().unwrap_or(0.0).max(1.0);
                    (k, v / total * (n_docs / d).ln())
                })
                .collect()
        };
        for (i, (cand, refs)) in c.candidates.iter().zip(&c.references).enumerate() {
            let vc = vec_of(cand);
            let mut acc = 0.0;
            for r in refs {
                let vr = vec_of(r);
                let dot: f64 = vc.iter().map(|(k, v)| v * vr.get(k).unwrap_or(&0.0)).sum();
                let na = vc.values().map(|v| v * v).sum::<f64>().sqrt();
                let nb = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    acc += dot / (na * nb);
                }
            }
            score[i] += acc / refs.len() as f64;
        }
    }
    score.iter().map(|s| s * 10.0 / 4.0).sum::<f64>() / n_docs
}

/// Four reserved tokens plus two content tokens.
pub fn toy_model(seed: u64, base: &ModelConfig) -> Model {
    let cfg = ModelConfig { vocab: 6, ..base.clone() };
    let mut m = Model::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in m.params.named_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
    }
    m
}

/// Every sequence of at most `max_len` tokens over {4, 5, EOS}: finished ones
/// end in EOS, length-capped ones have exactly `max_len` content tokens.
pub fn exhaustive(m: &Model, scene: &SceneInput, max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut consider = |seq: Vec<usize>, lp: f64| {
        let better = match &best {
            None => true,
            Some((s, b)) => lp > *b || (lp == *b && seq < *s),
        };
        if better {
            best = Some((seq, lp));
        }
    };
    let mut prefixes: Vec<Vec<usize>> = vec![vec![]];
    for len in 0..=max_len {
        for p in &prefixes {
            let out = m.forward_base(scene, p).unwrap();
            if len < max_len {
                let mut s = p.clone();
                s.push(EOS);
                consider(s, -out.nll);
            } else {
                let lp: f64 = out.trace.steps.iter().zip(p).map(|(st, &t)| st.probs[t].ln()).sum();
                consider(p.clone(), lp);
            }
        }
        prefixes = prefixes
            .iter()
            .flat_map(|p| [4, 5].map(|t| p.iter().copied().chain([t]).collect::<Vec<_>>()))
            .collect();
    }
    best.unwrap()
}

pub fn dist(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    1.0 - dot / (uu.sqrt() * vv.sqrt())
}

/// Independent mask construction: scan the caption, keep lexicon nouns with a
/// word vector, and set the bit of the closest label (first index on ties).
pub fn oracle_mask(caption: &[String], labels: &[&str], lexicon: &HashSet<String>, out: &SynthOutput) -> Vec<u8> {
    let label_vecs: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| {
            let key = l.to_lowercase().replace(' ', "_");
            out.entity_vectors.get(&key).unwrap().to_vec()
        })
        .collect();
    let mut bits = vec![0u8; labels.len()];
    for tok in caption {
        if !lexicon.contains(tok.as_str()) {
            continue;
        }
        let Some(w) = out.word_vectors.get(tok) else { continue };
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, e) in label_vecs.iter().enumerate() {
            let d = dist(w, e);
            if d < best_d - 1e-15 {
                best = j;
                best_d = d;
            }
        }
        bits[best] = 1;
    }
    bits
}
