//! Ground-truth entity masks from caption nouns.
//!
//! Each noun found in a caption is embedded and matched to the closest visual
//! entity of the scene by cosine distance; that entity's bit is set. Nouns
//! without a word vector are skipped.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embed::{nearest_entity, EmbeddingStore, LabelNormalization};
use crate::error::{Error, Result};

pub const MASK_TABLE_HEADER: &str = "#maskcap-masks v1";

/// Decides which caption tokens are nouns.
#[derive(Clone, Debug)]
pub enum NounExtractor {
    /// Tokens found in a fixed noun list.
    Lexicon(HashSet<String>),
    /// Pre-tagged captions keyed by their space-joined lowercase tokens.
    ExternalTags(HashMap<String, Vec<String>>),
}

impl NounExtractor {
    pub fn lexicon<I, S>(nouns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        NounExtractor::Lexicon(nouns.into_iter().map(Into::into).collect())
    }

    /// Parses a tag file: one caption per line as `token/TAG` pairs. Tokens
    /// tagged `NOUN`, `PROPN` or `NN*` are nouns.
    pub fn parse_tags(text: &str, source: &str) -> Result<Self> {
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut tokens = Vec::new();
            let mut nouns = Vec::new();
            for pair in line.split_whitespace() {
                let (tok, tag) = pair.rsplit_once('/').ok_or_else(|| Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    msg: format!("expected token/TAG, got {pair:?}"),
                })?;
                let tok = tok.to_lowercase();
                if tag == "NOUN" || tag == "PROPN" || tag.starts_with("NN") {
                    nouns.push(tok.clone());
                }
                tokens.push(tok);
            }
            table.insert(tokens.join(" "), nouns);
        }
        Ok(NounExtractor::ExternalTags(table))
    }

    pub fn load_tags(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        NounExtractor::parse_tags(&text, &path.display().to_string())
    }
}

/// Nouns of `caption` in order, duplicates kept.
pub fn extract_nouns<S: AsRef<str>>(caption: &[S], extractor: &NounExtractor) -> Result<Vec<String>> {
    match extractor {
        NounExtractor::Lexicon(lex) => Ok(caption
            .iter()
            .map(AsRef::as_ref)
            .filter(|t| lex.contains(*t))
            .map(str::to_string)
            .collect()),
        NounExtractor::ExternalTags(table) => {
            let key = caption.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
            table
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::Lookup(format!("no tag entry for caption \"{key}\"")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthMask {
    pub sample_id: u64,
    pub caption_index: usize,
    pub bits: Vec<u8>,
}

impl GroundTruthMask {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

/// Embedding tables used for matching plus the key normalization.
#[derive(Clone, Copy, Debug)]
pub struct MatchStores<'a> {
    pub words: &'a EmbeddingStore,
    pub entities: &'a EmbeddingStore,
    pub normalization: LabelNormalization,
}

impl<'a> MatchStores<'a> {
    pub fn new(words: &'a EmbeddingStore, entities: &'a EmbeddingStore) -> Self {
        MatchStores {
            words,
            entities,
            normalization: LabelNormalization::default(),
        }
    }

    fn entity_vectors(&self, labels: &[&'a str]) -> Result<Vec<(&'a str, &'a [f64])>> {
        if labels.is_empty() {
            return Err(Error::Domain("mask construction needs at least one entity".into()));
        }
        labels
            .iter()
            .map(|&l| {
                let key = self.normalization.apply(l);
                self.entities
                    .get(&key)
                    .map(|v| (l, v))
                    .ok_or_else(|| Error::Lookup(format!("entity label `{l}` (key `{key}`) has no vector")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutcome {
    pub mask: GroundTruthMask,
    pub nouns: usize,
    /// Nouns skipped because they had no usable word vector.
    pub unresolved: usize,
}

/// Builds the mask for a single caption.
pub fn build_mask_gt<S: AsRef<str>>(
    caption: &[S],
    entity_labels: &[&str],
    stores: MatchStores<'_>,
    extractor: &NounExtractor,
) -> Result<MaskOutcome> {
    let entities = stores.entity_vectors(entity_labels)?;
    let nouns = extract_nouns(caption, extractor)?;
    let mut bits = vec![0u8; entities.len()];
    let mut unresolved = 0;
    for noun in &nouns {
        let key = stores.normalization.apply(noun);
        let Some(vec) = stores.words.get(&key) else {
            unresolved += 1;
            continue;
        };
        match nearest_entity(vec, &entities) {
            Ok(n) => bits[n.index] = 1,
            Err(Error::Domain(_)) | Err(Error::Dimension { .. }) => unresolved += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(MaskOutcome {
        mask: GroundTruthMask {
            sample_id: 0,
            caption_index: 0,
            bits,
        },
        nouns: nouns.len(),
        unresolved,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CoverageReport {
    pub captions: usize,
    /// Fraction of captions with at least one bit set.
    pub covered_fraction: f64,
    pub mean_bits: f64,
    pub unresolved_nouns: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskTable {
    pub masks: Vec<GroundTruthMask>,
}

impl MaskTable {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn get(&self, sample_id: u64, caption_index: usize) -> Option<&GroundTruthMask> {
        self.masks
            .iter()
            .find(|m| m.sample_id == sample_id && m.caption_index == caption_index)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MASK_TABLE_HEADER}\n");
        for m in &self.masks {
            out.push_str(&serde_json::to_string(m).expect("mask serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l.trim_end()) != Some(MASK_TABLE_HEADER) {
            return Err(Error::Parse {
                path: source.into(),
                line: 1,
                msg: format!("missing `{MASK_TABLE_HEADER}` header"),
            });
        }
        let mut masks = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            masks.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                path: source.into(),
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(MaskTable { masks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MaskTable::parse(&text, &path.display().to_string())
    }

    /// Writes the table into the dataset's per-caption `masks` field.
    pub fn apply_to(&self, dataset: &mut Dataset) -> Result<()> {
        for s in &mut dataset.samples {
            let mut masks = Vec::with_capacity(s.captions.len());
            for c in 0..s.captions.len() {
                let m = self.get(s.id, c).ok_or_else(|| {
                    Error::Lookup(format!("no mask for sample {} caption {c}", s.id))
                })?;
                masks.push(m.bits.clone());
            }
            s.masks = Some(masks);
        }
        dataset.validate()
    }
}

/// Masks for every `(sample, caption)` pair plus coverage statistics.
pub fn build_dataset_masks(
    dataset: &Dataset,
    stores: MatchStores<'_>,
    extractor: &NounExtractor,
) -> Result<(MaskTable, CoverageReport)> {
    let mut table = MaskTable::default();
    let mut report = CoverageReport::default();
    let mut covered = 0usize;
    let mut bits = 0usize;
    for s in &dataset.samples {
        let labels = s.labels();
        for (ci, caption) in s.captions.iter().enumerate() {
            let mut out = build_mask_gt(caption, &labels, stores, extractor)?;
            out.mask.sample_id = s.id;
            out.mask.caption_index = ci;
            let pc = out.mask.popcount();
            covered += usize::from(pc > 0);
            bits += pc;
            report.unresolved_nouns += out.unresolved;
            table.masks.push(out.mask);
        }
    }
    report.captions = table.len();
    if report.captions > 0 {
        report.covered_fraction = covered as f64 / report.captions as f64;
        report.mean_bits = bits as f64 / report.captions as f64;
    }
    Ok((table, report))
}
