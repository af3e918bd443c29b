//! Scene samples, the line-delimited dataset format, vocabulary handling and
//! the synthetic scene generator.
//!
//! Dataset files start with the header line `#maskcap-dataset v1`; every
//! following non-empty line is one JSON object:
//!
//! ```text
//! {"id":7,"global":[..],"entities":[{"label":"Dog","feature":[..]}],"captions":[["a","dog"]],"masks":[[1,0]]}
//! ```
//!
//! `masks` is optional and, when present, holds one bit vector per caption in
//! entity-slot order.

pub mod synth;
mod vocab;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use vocab::{tokenize, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

use crate::error::{Error, Result};

pub const DATASET_HEADER: &str = "#maskcap-dataset v1";

/// Reference split sizes of the MSCOCO Karpathy splits (train/val/test).
pub const MSCOCO_SPLITS: [usize; 3] = [113_287, 5_000, 5_000];
/// Reference caption statistics of MSCOCO: mean length, vocabulary, captions per image.
pub const MSCOCO_MEAN_CAPTION_LEN: f64 = 11.3;
pub const MSCOCO_VOCAB: usize = 9_989;
pub const MSCOCO_CAPTIONS_PER_IMAGE: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub label: String,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub id: u64,
    pub global: Vec<f64>,
    pub entities: Vec<Entity>,
    pub captions: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<Vec<u8>>>,
}

impl SceneSample {
    pub fn slots(&self) -> usize {
        self.entities.len()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.entities.iter().map(|e| e.label.as_str()).collect()
    }

    pub fn mask(&self, caption: usize) -> Option<&[u8]> {
        self.masks.as_ref().and_then(|m| m.get(caption)).map(Vec::as_slice)
    }

    fn schema(&self, field: &'static str, msg: impl Into<String>) -> Error {
        Error::Schema {
            sample_id: self.id.to_string(),
            field,
            msg: msg.into(),
        }
    }

    /// Checks internal consistency; dataset-wide dimensions are checked by [`Dataset::validate`].
    pub fn validate(&self) -> Result<()> {
        if self.global.is_empty() {
            return Err(self.schema("global", "empty feature vector"));
        }
        if self.global.iter().any(|v| !v.is_finite()) {
            return Err(self.schema("global", "non-finite value"));
        }
        if self.entities.is_empty() {
            return Err(self.schema("entities", "at least one entity slot is required"));
        }
        let d = self.entities[0].feature.len();
        for (j, e) in self.entities.iter().enumerate() {
            if e.label.is_empty() {
                return Err(self.schema("entities", format!("slot {j} has an empty label")));
            }
            if e.feature.len() != d || d == 0 {
                return Err(self.schema(
                    "entities",
                    format!("slot {j} feature length {} (expected {d})", e.feature.len()),
                ));
            }
            if e.feature.iter().any(|v| !v.is_finite()) {
                return Err(self.schema("entities", format!("slot {j} has a non-finite value")));
            }
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.captions.len() {
                return Err(self.schema(
                    "masks",
                    format!("{} masks for {} captions", masks.len(), self.captions.len()),
                ));
            }
            for (c, m) in masks.iter().enumerate() {
                if m.len() != self.slots() {
                    return Err(self.schema(
                        "masks",
                        format!("mask {c} has length {} but the sample has {} slots", m.len(), self.slots()),
                    ));
                }
                if m.iter().any(|&b| b > 1) {
                    return Err(self.schema("masks", format!("mask {c} has a non-binary entry")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn new(samples: Vec<SceneSample>) -> Result<Self> {
        let ds = Dataset { samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&SceneSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// `(V, D, max L)` or `None` for an empty dataset.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        let first = self.samples.first()?;
        let max_l = self.samples.iter().map(SceneSample::slots).max().unwrap_or(0);
        Some((first.global.len(), first.entities[0].feature.len(), max_l))
    }

    pub fn validate(&self) -> Result<()> {
        let mut dims: Option<(usize, usize)> = None;
        for s in &self.samples {
            s.validate()?;
            let here = (s.global.len(), s.entities[0].feature.len());
            match dims {
                None => dims = Some(here),
                Some((v, _)) if v != here.0 => {
                    return Err(s.schema("global", format!("dimension {} differs from {v}", here.0)));
                }
                Some((_, d)) if d != here.1 => {
                    return Err(s.schema("entities", format!("feature dimension {} differs from {d}", here.1)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn captions(&self) -> impl Iterator<Item = &Vec<String>> {
        self.samples.iter().flat_map(|s| s.captions.iter())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(DATASET_HEADER);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == DATASET_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: 1,
                    msg: format!("missing `{DATASET_HEADER}` header"),
                })
            }
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let s: SceneSample = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            samples.push(s);
        }
        Dataset::new(samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let path = resolve_split(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Dataset::parse(&text, &path.display().to_string())
}

/// Accepts either an exact file path or a split stem such as `data/val`
/// (resolved to `data/val.jsonl`).
pub fn resolve_split(path: &Path) -> PathBuf {
    if path.is_file() {
        return path.to_path_buf();
    }
    let with_ext = path.with_extension("jsonl");
    if with_ext.is_file() {
        with_ext
    } else {
        path.to_path_buf()
    }
}

/// Reads a noun lexicon: one noun per line, blank lines ignored.
pub fn load_lexicon(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect())
}
