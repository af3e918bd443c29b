//! Caption quality (BLEU-4, ROUGE-L, CIDEr) and diversity measures.
//!
//! CIDEr takes its document frequencies from the evaluated corpus's own
//! references, so scores are comparable only within one corpus.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

pub type Caption = Vec<String>;

/// Generated captions paired with their reference captions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub candidates: Vec<Caption>,
    pub references: Vec<Vec<Caption>>,
}

impl Corpus {
    pub fn new(candidates: Vec<Caption>, references: Vec<Vec<Caption>>) -> Result<Self> {
        if candidates.len() != references.len() {
            return Err(Error::dim(
                "corpus",
                format!("{} candidates for {} reference sets", candidates.len(), references.len()),
            ));
        }
        if let Some(i) = references.iter().position(Vec::is_empty) {
            return Err(Error::Domain(format!("sample {i} has no reference captions")));
        }
        Ok(Corpus { candidates, references })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with uniform 1–4-gram weights, clipped counts and the
/// closest-reference brevity penalty. No smoothing: any zero precision gives 0.
pub fn bleu4(corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Domain("BLEU of an empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in corpus.candidates.iter().zip(&corpus.references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .expect("references are non-empty");
        for n in 1..=4 {
            let counts = ngram_counts(cand, n);
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (g, c) in counts {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[n - 1] += c.min(max_ref);
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure of the best-matching reference, averaged over samples.
pub fn rouge_l(corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Domain("ROUGE-L of an empty corpus".into()));
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let total: f64 = corpus
        .candidates
        .iter()
        .zip(&corpus.references)
        .map(|(cand, refs)| {
            refs.iter()
                .map(|r| {
                    let l = lcs_len(cand, r) as f64;
                    if l == 0.0 {
                        return 0.0;
                    }
                    let p = l / cand.len() as f64;
                    let rc = l / r.len() as f64;
                    (1.0 + b2) * p * rc / (rc + b2 * p)
                })
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / corpus.len() as f64)
}

/// CIDEr scale factor.
pub const CIDER_SCALE: f64 = 10.0;

fn tfidf(tokens: &[String], n: usize, df: &HashMap<Vec<String>, usize>, log_docs: f64) -> HashMap<Vec<String>, f64> {
    let counts = ngram_counts(tokens, n);
    counts
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g.to_vec(), c as f64 * (log_docs - d.ln()))
        })
        .collect()
}

fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// Mean over samples of `10 · (1/4) Σ_n (1/m) Σ_j cos(g_n(c), g_n(s_j))`
/// with term frequency times `ln(N / df)`, `df` counted over reference sets.
pub fn cider(corpus: &Corpus) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::Domain("CIDEr needs at least two samples for document frequencies".into()));
    }
    let log_docs = (corpus.len() as f64).ln();
    let mut per_sample = vec![0.0; corpus.len()];
    for n in 1..=4 {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for refs in &corpus.references {
            let grams: HashSet<&[String]> = refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in grams {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        for (i, (cand, refs)) in corpus.candidates.iter().zip(&corpus.references).enumerate() {
            let vc = tfidf(cand, n, &df, log_docs);
            let s: f64 = refs.iter().map(|r| cosine(&vc, &tfidf(r, n, &df, log_docs))).sum();
            per_sample[i] += s / refs.len() as f64 / 4.0;
        }
    }
    Ok(CIDER_SCALE * per_sample.iter().sum::<f64>() / corpus.len() as f64)
}

/// Distinct tokens across all captions.
pub fn vocab_size(captions: &[Caption]) -> usize {
    captions.iter().flatten().collect::<HashSet<_>>().len()
}

/// Percentage of captions that are not an exact copy of a training caption.
pub fn novel_captions(generated: &[Caption], training: &HashSet<Caption>) -> f64 {
    if generated.is_empty() {
        return 0.0;
    }
    let novel = generated.iter().filter(|c| !training.contains(*c)).count();
    100.0 * novel as f64 / generated.len() as f64
}

/// For each word position, the number of distinct n-grams starting there
/// among captions long enough to contain one.
pub fn positional_ngrams(captions: &[Caption], n: usize) -> Result<Vec<usize>> {
    if !(1..=2).contains(&n) {
        return Err(Error::Domain(format!("positional n-grams need n in {{1, 2}}, got {n}")));
    }
    let longest = captions.iter().map(Vec::len).max().unwrap_or(0);
    Ok((0..(longest + 1).saturating_sub(n))
        .map(|p| {
            captions
                .iter()
                .filter(|c| c.len() >= p + n)
                .map(|c| &c[p..p + n])
                .collect::<BTreeSet<_>>()
                .len()
        })
        .collect())
}

pub fn ngram_curve_csv(series: &[usize]) -> String {
    let mut out = String::from("position,unique_count\n");
    for (p, c) in series.iter().enumerate() {
        let _ = writeln!(out, "{},{c}", p + 1);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Absent for corpora of fewer than two samples.
    pub cider: Option<f64>,
    pub vocab_size: usize,
    pub novel_captions: f64,
    pub samples: usize,
}

pub fn evaluate(corpus: &Corpus, training: &HashSet<Caption>) -> Result<EvalReport> {
    Ok(EvalReport {
        bleu4: bleu4(corpus)?,
        rouge_l: rouge_l(corpus)?,
        cider: if corpus.len() >= 2 { Some(cider(corpus)?) } else { None },
        vocab_size: vocab_size(&corpus.candidates),
        novel_captions: novel_captions(&corpus.candidates, training),
        samples: corpus.len(),
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "bleu4,{}", self.bleu4);
        let _ = writeln!(out, "rouge_l,{}", self.rouge_l);
        if let Some(c) = self.cider {
            let _ = writeln!(out, "cider,{c}");
        }
        let _ = writeln!(out, "vocab_size,{}", self.vocab_size);
        let _ = writeln!(out, "novel_captions,{}", self.novel_captions);
        let _ = writeln!(out, "samples,{}", self.samples);
        out
    }
}
