//! Seeded synthetic worlds.
//!
//! Images are drawn around a handful of latent prototypes: each image picks
//! a prototype and copies each of its attribute values, resampling a value
//! uniformly with probability `noise`. Attributes are therefore correlated
//! the way features of one species are, which is what makes cell-mates
//! share values the target lacks.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ClassifierConfig, DEFAULT_WINDOW};
use crate::world::{Attribute, AttributeSchema, Lexicon, SymbolicImage, World, DEFAULT_EOS};

const VALUE_POOLS: &[(&str, &[&str])] = &[
    ("color", &["red", "blue", "green", "yellow", "purple"]),
    ("size", &["tiny", "small", "large", "huge"]),
    ("shape", &["square", "circle", "triangle", "star"]),
    ("pattern", &["striped", "dotted", "plain", "checkered"]),
    ("texture", &["smooth", "rough", "fuzzy", "glossy"]),
    ("material", &["wooden", "metal", "glass", "paper"]),
    ("border", &["thick", "thin", "dashed", "borderless"]),
    ("shade", &["pale", "dark", "bright", "muted"]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub images: usize,
    /// Values per attribute; at most as many attributes as built-in pools.
    pub values: Vec<usize>,
    pub prototypes: usize,
    pub noise: f64,
    pub function_tokens: Vec<String>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            images: 50,
            values: vec![3, 3, 3, 3, 3, 3],
            prototypes: 6,
            noise: 0.25,
            function_tokens: vec!["a".into()],
            seed: 17,
        }
    }
}

fn pick(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.gen_range(0..n as u64) as usize
}

/// Generate a world, its lexicon (one token per attribute value) and a
/// matching classifier configuration.
pub fn synth_world(spec: &SynthSpec) -> Result<(World, ClassifierConfig)> {
    if spec.values.len() > VALUE_POOLS.len() {
        return Err(Error::InvalidConfig(format!(
            "at most {} attributes are supported",
            VALUE_POOLS.len()
        )));
    }
    if spec.prototypes == 0 || !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::InvalidConfig("bad prototype count or noise".into()));
    }
    let mut attributes = Vec::new();
    for (&(name, pool), &n) in VALUE_POOLS.iter().zip(&spec.values) {
        if n == 0 || n > pool.len() {
            return Err(Error::InvalidConfig(format!(
                "attribute `{name}` supports 1..={} values",
                pool.len()
            )));
        }
        attributes.push(Attribute {
            name: name.to_string(),
            values: pool[..n].iter().map(|s| s.to_string()).collect(),
            part: None,
            aspect: None,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<usize>> = (0..spec.prototypes)
        .map(|_| attributes.iter().map(|a| pick(&mut rng, a.values.len())).collect())
        .collect();
    let width = spec.images.to_string().len();
    let images = (0..spec.images)
        .map(|k| {
            let proto = &prototypes[pick(&mut rng, prototypes.len())];
            let values = attributes
                .iter()
                .zip(proto)
                .map(|(a, &v)| {
                    let v = if rng.gen_bool(spec.noise) {
                        pick(&mut rng, a.values.len())
                    } else {
                        v
                    };
                    (a.name.clone(), a.values[v].clone())
                })
                .collect();
            SymbolicImage {
                id: format!("img{k:0width$}"),
                values,
            }
        })
        .collect();

    let mut vocab: Vec<String> = spec.function_tokens.clone();
    let mut meanings = BTreeMap::new();
    let mut aspect_keywords = BTreeMap::new();
    for a in &attributes {
        let mut by_value = BTreeMap::new();
        for v in &a.values {
            vocab.push(v.clone());
            meanings.insert(v.clone(), vec![(a.name.clone(), v.clone())]);
            by_value.insert(v.clone(), BTreeSet::from([v.clone()]));
        }
        aspect_keywords.insert(a.name.clone(), by_value);
    }
    vocab.push(DEFAULT_EOS.to_string());
    let lexicon = Lexicon {
        vocab,
        meanings,
        function_tokens: spec.function_tokens.iter().cloned().collect(),
        eos: DEFAULT_EOS.to_string(),
    };
    let world = World::new(AttributeSchema { attributes }, images, lexicon)?;
    let classifier = ClassifierConfig {
        part_keywords: BTreeMap::new(),
        aspect_keywords,
        window: DEFAULT_WINDOW,
        generic_parts: BTreeSet::new(),
    };
    Ok((world, classifier))
}
