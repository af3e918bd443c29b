//! Synthetic scene world: labelled entity types with seeded embeddings, a
//! fixed attribute word per type, and caption templates. Every caption mentions a non-empty
//! subset of its scene's entities, and the matching gold mask is emitted
//! alongside so that noun-based mask construction can be cross-checked.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Entity, SceneSample};
use crate::embed::{EmbeddingStore, LabelNormalization};
use crate::error::{Error, Result};

const TYPES: [(&str, &str); 24] = [
    ("Dog", "dog"),
    ("Cat", "cat"),
    ("Horse", "horse"),
    ("Sheep", "sheep"),
    ("Cattle", "cow"),
    ("Bird", "bird"),
    ("Duck", "duck"),
    ("Bicycle", "bike"),
    ("Automobile", "car"),
    ("Bus", "bus"),
    ("Train", "train"),
    ("Boat", "boat"),
    ("Birthday Cake", "cake"),
    ("Pizza", "pizza"),
    ("Banana", "banana"),
    ("Apple", "apple"),
    ("Chair", "chair"),
    ("Table", "table"),
    ("Umbrella", "umbrella"),
    ("Kite", "kite"),
    ("Frisbee", "frisbee"),
    ("Clock", "clock"),
    ("Bench", "bench"),
    ("Elephant", "elephant"),
];

const ATTRIBUTES: [&str; 8] = ["white", "black", "brown", "red", "blue", "green", "small", "large"];

/// Caption templates indexed by mention count − 1; `{}` marks an
/// `attribute noun` mention.
const TEMPLATES: [&[&str]; 3] = [
    &["a", "{}", "in", "the", "scene"],
    &["a", "{}", "next", "to", "a", "{}"],
    &["a", "{}", "next", "to", "a", "{}", "and", "a", "{}"],
];

#[derive(Clone, Debug, PartialEq)]
pub struct EntityType {
    pub label: String,
    pub noun: String,
    /// Index into the ontology's attribute words.
    pub attribute: usize,
    /// Probability that a caption mentions an entity of this type.
    pub salience: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOntology {
    pub types: Vec<EntityType>,
    pub attributes: Vec<String>,
    type_features: Vec<Vec<f64>>,
    label_vectors: Vec<Vec<f64>>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl SynthOntology {
    /// The built-in 24-type world; all vectors are seeded Gaussian draws,
    /// unit-normalized. `word_dim` is the dimension of the word-space vectors
    /// used for noun matching.
    pub fn standard(seed: u64, feature_dim: usize, word_dim: usize) -> Result<Self> {
        if feature_dim == 0 || word_dim == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let types = TYPES
            .iter()
            .map(|(label, noun)| EntityType {
                label: label.to_string(),
                noun: noun.to_string(),
                attribute: rng.random_range(0..ATTRIBUTES.len()),
                salience: rng.random_range(0.2..0.8),
            })
            .collect();
        let type_features = (0..TYPES.len()).map(|_| unit_gaussian(&mut rng, feature_dim)).collect();
        let label_vectors = (0..TYPES.len()).map(|_| unit_gaussian(&mut rng, word_dim)).collect();
        Ok(SynthOntology {
            types,
            attributes: ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            type_features,
            label_vectors,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.type_features[0].len()
    }

    pub fn lexicon(&self) -> Vec<String> {
        self.types.iter().map(|t| t.noun.clone()).collect()
    }

    /// Entity-label vectors keyed by normalized label.
    pub fn entity_vectors(&self) -> EmbeddingStore {
        let mut store = EmbeddingStore::new(self.label_vectors[0].len());
        for (t, v) in self.types.iter().zip(&self.label_vectors) {
            store
                .insert(&LabelNormalization::default().apply(&t.label), v.clone())
                .expect("labels are distinct");
        }
        store
    }

    /// Noun vectors: each noun's label vector plus Gaussian noise of standard
    /// deviation `noise` per coordinate (exact copies when `noise == 0`).
    pub fn word_vectors(&self, noise: f64, seed: u64) -> EmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_40d5);
        let mut store = EmbeddingStore::new(self.label_vectors[0].len());
        for (t, v) in self.types.iter().zip(&self.label_vectors) {
            let noisy = v
                .iter()
                .map(|x| {
                    let n: f64 = rng.sample(StandardNormal);
                    x + noise * n
                })
                .collect();
            store.insert(&t.noun, noisy).expect("nouns are distinct");
        }
        store
    }

    /// The caption mentioning the given entity types, in the order given.
    pub fn render(&self, mentions: &[usize]) -> Vec<String> {
        let template = TEMPLATES[mentions.len() - 1];
        let mut out = Vec::new();
        let mut next = mentions.iter();
        for &tok in template {
            if tok == "{}" {
                let &ty = next.next().expect("template arity matches");
                out.push(self.attributes[self.types[ty].attribute].clone());
                out.push(self.types[ty].noun.clone());
            } else {
                out.push(tok.to_string());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub slots: usize,
    pub seed: u64,
    pub first_id: u64,
    /// Per-coordinate standard deviation added to entity features.
    pub feature_noise: f64,
    /// Per-coordinate standard deviation of noun vectors around their label vectors.
    pub word_noise: f64,
    pub min_captions: usize,
    pub max_captions: usize,
    pub max_mentions: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 200,
            slots: 4,
            seed: 7,
            first_id: 0,
            feature_noise: 0.02,
            word_noise: 0.05,
            min_captions: 2,
            max_captions: 3,
            max_mentions: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub lexicon: Vec<String>,
    pub entity_vectors: EmbeddingStore,
    pub word_vectors: EmbeddingStore,
}

fn draw_subset(rng: &mut ChaCha8Rng, saliences: &[f64], max_mentions: usize) -> Vec<usize> {
    for _ in 0..256 {
        let pick: Vec<usize> = saliences
            .iter()
            .enumerate()
            .filter(|(_, &s)| rng.random_bool(s))
            .map(|(j, _)| j)
            .collect();
        if !pick.is_empty() && pick.len() <= max_mentions {
            return pick;
        }
    }
    vec![rng.random_range(0..saliences.len())]
}

/// Generates scenes from `ontology`. Pure function of `(ontology, config)`.
pub fn synth_generate(ontology: &SynthOntology, config: &SynthConfig) -> Result<SynthOutput> {
    let n_types = ontology.types.len();
    if config.slots == 0 || config.slots > n_types {
        return Err(Error::Config(format!(
            "entity slots {} must be in 1..={n_types}",
            config.slots
        )));
    }
    if config.min_captions == 0 || config.min_captions > config.max_captions {
        return Err(Error::Config("caption count range is empty".into()));
    }
    let max_mentions = config.max_mentions.clamp(1, TEMPLATES.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = ontology.feature_dim();
    let mut samples = Vec::with_capacity(config.samples);
    for n in 0..config.samples {
        let types = sample_indices(&mut rng, n_types, config.slots).into_vec();
        let entities: Vec<Entity> = types
            .iter()
            .map(|&t| {
                let feature = ontology.type_features[t]
                    .iter()
                    .map(|x| {
                        let e: f64 = rng.sample(StandardNormal);
                        x + config.feature_noise * e
                    })
                    .collect();
                Entity {
                    label: ontology.types[t].label.clone(),
                    feature,
                }
            })
            .collect();
        let mut global = vec![0.0; dim];
        for e in &entities {
            for (g, x) in global.iter_mut().zip(&e.feature) {
                *g += x / config.slots as f64;
            }
        }

        let saliences: Vec<f64> = types.iter().map(|&t| ontology.types[t].salience).collect();
        let n_caps = rng.random_range(config.min_captions..=config.max_captions);
        let mut subsets: Vec<Vec<usize>> = Vec::new();
        for _ in 0..n_caps {
            let mut pick = draw_subset(&mut rng, &saliences, max_mentions);
            for _ in 0..16 {
                if !subsets.contains(&pick) {
                    break;
                }
                pick = draw_subset(&mut rng, &saliences, max_mentions);
            }
            subsets.push(pick);
        }
        let mut captions = Vec::with_capacity(n_caps);
        let mut masks = Vec::with_capacity(n_caps);
        for subset in &subsets {
            // Mentions follow the ontology's type order.
            let mut mentions: Vec<usize> = subset.iter().map(|&j| types[j]).collect();
            mentions.sort_unstable();
            captions.push(ontology.render(&mentions));
            let mut bits = vec![0u8; config.slots];
            for &j in subset {
                bits[j] = 1;
            }
            masks.push(bits);
        }
        samples.push(SceneSample {
            id: config.first_id + n as u64,
            global,
            entities,
            captions,
            masks: Some(masks),
        });
    }
    Ok(SynthOutput {
        dataset: Dataset::new(samples)?,
        lexicon: ontology.lexicon(),
        entity_vectors: ontology.entity_vectors(),
        word_vectors: ontology.word_vectors(config.word_noise, config.seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (SynthOntology, SynthConfig) {
        let ont = SynthOntology::standard(1, 8, 8).unwrap();
        let cfg = SynthConfig {
            samples: 30,
            ..Default::default()
        };
        (ont, cfg)
    }

    #[test]
    fn regeneration_is_identical() {
        let (ont, cfg) = small();
        let a = synth_generate(&ont, &cfg).unwrap();
        let b = synth_generate(&ont, &cfg).unwrap();
        assert_eq!(a.dataset.to_text(), b.dataset.to_text());
        assert_eq!(a.word_vectors.to_text(), b.word_vectors.to_text());
    }

    #[test]
    fn captions_mention_only_scene_entities() {
        let (ont, cfg) = small();
        let out = synth_generate(&ont, &cfg).unwrap();
        let nouns: Vec<String> = ont.lexicon();
        for s in &out.dataset.samples {
            let scene_nouns: Vec<&str> = s
                .entities
                .iter()
                .map(|e| ont.types.iter().find(|t| t.label == e.label).unwrap().noun.as_str())
                .collect();
            for (c, caption) in s.captions.iter().enumerate() {
                let mentioned: Vec<&String> = caption.iter().filter(|t| nouns.contains(t)).collect();
                assert!(!mentioned.is_empty());
                assert!(mentioned.iter().all(|m| scene_nouns.contains(&m.as_str())));
                let bits = s.mask(c).unwrap();
                assert_eq!(bits.iter().filter(|&&b| b == 1).count(), mentioned.len());
            }
        }
    }

    #[test]
    fn too_many_slots_is_an_error() {
        let (ont, mut cfg) = small();
        cfg.slots = 25;
        assert!(synth_generate(&ont, &cfg).is_err());
    }

    #[test]
    fn labels_differ_from_nouns_for_some_types() {
        let ont = SynthOntology::standard(0, 4, 4).unwrap();
        assert!(ont.types.iter().any(|t| LabelNormalization::default().apply(&t.label) != t.noun));
    }
}
