//! Fixed embedding tables in the plain-text vector format
//! (`token v1 v2 … vD` per line, no header) and the cosine-distance lookup
//! used for noun-to-entity matching.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Inserts or replaces a vector. Returns `true` when `token` was already present.
    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<bool> {
        if token.is_empty() || token.contains(char::is_whitespace) {
            return Err(Error::Domain(format!("invalid embedding token {token:?}")));
        }
        if vector.len() != self.dim {
            return Err(Error::dim(
                "embedding",
                format!("vector for `{token}` has {} values, store has dim {}", vector.len(), self.dim),
            ));
        }
        if let Some(&i) = self.index.get(token) {
            self.vectors[i] = vector;
            return Ok(true);
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.vectors.push(vector);
        Ok(false)
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.tokens
            .iter()
            .zip(&self.vectors)
            .map(|(t, v)| (t.as_str(), v.as_slice()))
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut store: Option<EmbeddingStore> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: source.to_string(),
                line: line_no,
                msg,
            };
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-blank line has a token");
            let vector = parts
                .map(|p| p.parse::<f64>().map_err(|e| perr(format!("bad value {p:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if vector.is_empty() {
                return Err(perr(format!("token `{token}` has no vector")));
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(perr(format!("non-finite value for `{token}`")));
            }
            let st = store.get_or_insert_with(|| EmbeddingStore::new(vector.len()));
            if vector.len() != st.dim {
                return Err(perr(format!(
                    "vector length {} differs from dimension {} set by the first line",
                    vector.len(),
                    st.dim
                )));
            }
            if st.insert(token, vector)? {
                log::warn!("{source}:{line_no}: duplicate token `{token}`, keeping the later vector");
            }
        }
        store.ok_or_else(|| Error::Parse {
            path: source.to_string(),
            line: 0,
            msg: "empty embedding file".into(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, v) in self.iter() {
            out.push_str(t);
            for x in v {
                out.push(' ');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::parse(&text, &path.display().to_string())
}

/// `1 - u·v / (‖u‖‖v‖)`, clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("cosine_distance", format!("{} vs {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine distance of a zero-norm vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 2.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nearest<'a> {
    pub label: &'a str,
    pub index: usize,
    pub distance: f64,
}

/// Entity with the smallest cosine distance to `query`; ties go to the lowest index.
pub fn nearest_entity<'a, L, V>(query: &[f64], entities: &'a [(L, V)]) -> Result<Nearest<'a>>
where
    L: AsRef<str>,
    V: AsRef<[f64]>,
{
    let mut best: Option<Nearest<'a>> = None;
    for (index, (label, vector)) in entities.iter().enumerate() {
        let distance = cosine_distance(query, vector.as_ref())?;
        if best.as_ref().is_none_or(|b| distance < b.distance) {
            best = Some(Nearest {
                label: label.as_ref(),
                index,
                distance,
            });
        }
    }
    best.ok_or_else(|| Error::Domain("nearest entity over an empty list".into()))
}

/// How entity labels and nouns are turned into embedding-table keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelNormalization {
    /// Lowercase, spaces replaced by underscores (`"White Dog"` → `white_dog`).
    #[default]
    LowerUnderscore,
    Verbatim,
}

impl LabelNormalization {
    pub fn apply(self, label: &str) -> String {
        match self {
            LabelNormalization::LowerUnderscore => label.trim().to_lowercase().split_whitespace().collect::<Vec<_>>().join("_"),
            LabelNormalization::Verbatim => label.to_string(),
        }
    }
}
