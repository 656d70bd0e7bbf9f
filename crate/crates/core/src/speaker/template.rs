use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::SpeakerBackend;
use crate::error::{Error, Result};
use crate::prob::{support, Dist, Support};
use crate::world::{truth_value, Lexicon, TokenKind, World};

/// Weights of the truth-conditioned unigram speaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpeakerParams {
    /// Weight of a content token true of the image and not yet emitted.
    pub p_true: f64,
    /// Weight of a false or already emitted content token; also the base
    /// EOS weight.
    pub p_noise: f64,
    pub p_function: f64,
    /// EOS weight grows by this factor with every emitted token.
    pub eos_rate: f64,
    /// Prefixes this long get a point mass on EOS.
    pub max_len: usize,
}

impl Default for TemplateSpeakerParams {
    fn default() -> Self {
        TemplateSpeakerParams {
            p_true: 10.0,
            p_noise: 0.1,
            p_function: 0.5,
            eos_rate: 10.0,
            max_len: 12,
        }
    }
}

impl TemplateSpeakerParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.p_true.is_finite()
            && self.p_noise.is_finite()
            && self.p_function.is_finite()
            && self.eos_rate.is_finite()
            && self.p_true > self.p_noise
            && self.p_noise >= 0.0
            && self.p_function >= 0.0
            && self.eos_rate > 1.0
            && self.max_len >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "template speaker parameters out of range: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone)]
enum Truth {
    /// Per-image 0/1 indicator for every vocabulary entry.
    PerImage(HashMap<String, Vec<f64>>),
    /// Fraction of a cell each token is true of; the image argument is ignored.
    Averaged(Vec<f64>),
}

/// Truth-weighted unigram speaker with a repetition penalty and a
/// geometrically growing EOS hazard.
#[derive(Debug, Clone)]
pub struct TemplateSpeaker {
    vocab: Support,
    kinds: Vec<TokenKind>,
    eos: String,
    params: TemplateSpeakerParams,
    truth: Truth,
}

fn token_truth(world: &World, lexicon: &Lexicon, image_id: &str) -> Result<Vec<f64>> {
    let img = world
        .image(image_id)
        .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
    lexicon
        .vocab
        .iter()
        .map(|t| truth_value(img, t, lexicon).map(|b| if b { 1.0 } else { 0.0 }))
        .collect()
}

fn kinds(lexicon: &Lexicon) -> Vec<TokenKind> {
    lexicon
        .vocab
        .iter()
        .map(|t| lexicon.kind(t).expect("vocab token has a kind"))
        .collect()
}

pub fn template_speaker(world: &World, lexicon: &Lexicon, params: TemplateSpeakerParams) -> Result<TemplateSpeaker> {
    params.validate()?;
    let mut truth = HashMap::with_capacity(world.images.len());
    for img in &world.images {
        truth.insert(img.id.clone(), token_truth(world, lexicon, &img.id)?);
    }
    Ok(TemplateSpeaker {
        vocab: support(lexicon.vocab.iter().cloned()),
        kinds: kinds(lexicon),
        eos: lexicon.eos.clone(),
        params,
        truth: Truth::PerImage(truth),
    })
}

/// Speaker describing the feature average of `cell` rather than a single
/// image.
pub fn avg_feature_speaker(
    world: &World,
    lexicon: &Lexicon,
    params: TemplateSpeakerParams,
    cell: &BTreeSet<String>,
) -> Result<TemplateSpeaker> {
    params.validate()?;
    if cell.is_empty() {
        return Err(Error::EmptyCell);
    }
    let mut avg = vec![0.0; lexicon.vocab.len()];
    for id in cell {
        for (a, t) in avg.iter_mut().zip(token_truth(world, lexicon, id)?) {
            *a += t;
        }
    }
    let n = cell.len() as f64;
    for a in &mut avg {
        *a /= n;
    }
    Ok(TemplateSpeaker {
        vocab: support(lexicon.vocab.iter().cloned()),
        kinds: kinds(lexicon),
        eos: lexicon.eos.clone(),
        params,
        truth: Truth::Averaged(avg),
    })
}

impl TemplateSpeaker {
    pub fn params(&self) -> &TemplateSpeakerParams {
        &self.params
    }

    fn content_weight(&self, fraction: f64) -> f64 {
        let p = &self.params;
        if fraction >= 1.0 {
            p.p_true
        } else if fraction <= 0.0 {
            p.p_noise
        } else {
            p.p_noise + (p.p_true - p.p_noise) * fraction
        }
    }
}

impl SpeakerBackend for TemplateSpeaker {
    fn vocabulary(&self) -> &Support {
        &self.vocab
    }

    fn eos(&self) -> &str {
        &self.eos
    }

    fn next_token_logprobs(&self, image: &str, prefix: &[String]) -> Result<Dist> {
        let truth = match &self.truth {
            Truth::PerImage(map) => map.get(image).ok_or_else(|| Error::UnknownImage(image.to_string()))?,
            Truth::Averaged(avg) => avg,
        };
        if prefix.len() >= self.params.max_len {
            return Dist::point_mass(self.vocab.clone(), self.eos_index());
        }
        let p = &self.params;
        let logits = self
            .vocab
            .iter()
            .zip(&self.kinds)
            .zip(truth)
            .map(|((tok, kind), &fraction)| {
                let w = match kind {
                    TokenKind::Eos => p.p_noise * p.eos_rate.powi(prefix.len() as i32),
                    TokenKind::Function => p.p_function,
                    TokenKind::Content if prefix.contains(tok) => p.p_noise,
                    TokenKind::Content => self.content_weight(fraction),
                };
                w.ln()
            })
            .collect();
        Dist::log_normalize(logits, self.vocab.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::shapes6;
    use proptest::prelude::*;

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn params() -> TemplateSpeakerParams {
        TemplateSpeakerParams {
            p_true: 10.0,
            p_noise: 0.1,
            ..TemplateSpeakerParams::default()
        }
    }

    #[test]
    fn true_tokens_dominate_content_mass() {
        let w = shapes6();
        let sp = template_speaker(&w, &w.lexicon, params()).unwrap();
        let d = sp.next_token_logprobs("o1", &[]).unwrap();
        let content: Vec<usize> = w
            .lexicon
            .vocab
            .iter()
            .enumerate()
            .filter(|(_, t)| w.lexicon.kind(t).unwrap() == TokenKind::Content)
            .map(|(i, _)| i)
            .collect();
        let total: f64 = content.iter().map(|&i| d.prob(i)).sum();
        let true_mass: f64 = ["red", "small", "square"]
            .iter()
            .map(|t| d.prob(w.lexicon.index_of(t).unwrap()))
            .sum();
        // 30 / (30 + 4 * 0.1) by the weight rule
        assert!((true_mass / total - 30.0 / 30.4).abs() < 1e-12);
        assert!(true_mass / total > 0.95);
    }

    #[test]
    fn eos_forced_at_max_len() {
        let w = shapes6();
        let p = TemplateSpeakerParams { max_len: 2, ..params() };
        let sp = template_speaker(&w, &w.lexicon, p).unwrap();
        let d = sp.next_token_logprobs("o1", &toks(&["red", "small"])).unwrap();
        assert_eq!(d.argmax(), sp.eos_index());
        assert_eq!(d.prob(sp.eos_index()), 1.0);
    }

    #[test]
    fn repetition_drops_to_noise() {
        let w = shapes6();
        let sp = template_speaker(&w, &w.lexicon, params()).unwrap();
        let d = sp.next_token_logprobs("o1", &toks(&["red"])).unwrap();
        let red = d.logp()[w.lexicon.index_of("red").unwrap()];
        let blue = d.logp()[w.lexicon.index_of("blue").unwrap()];
        assert!((red - blue).abs() < 1e-12);
    }

    #[test]
    fn eos_hazard_grows() {
        let w = shapes6();
        let sp = template_speaker(&w, &w.lexicon, params()).unwrap();
        let eos = sp.eos_index();
        let d0 = sp.next_token_logprobs("o1", &[]).unwrap();
        let d1 = sp.next_token_logprobs("o1", &toks(&["a"])).unwrap();
        assert!(d1.logp()[eos] > d0.logp()[eos]);
    }

    #[test]
    fn averaged_weights() {
        let w = shapes6();
        let p = params();
        let cell: BTreeSet<String> = ["o1", "o2"].iter().map(|s| s.to_string()).collect();
        let sp = avg_feature_speaker(&w, &w.lexicon, p, &cell).unwrap();
        let d = sp.next_token_logprobs("o1", &[]).unwrap();
        let lex = &w.lexicon;
        let red = d.logp()[lex.index_of("red").unwrap()];
        let small = d.logp()[lex.index_of("small").unwrap()];
        let blue = d.logp()[lex.index_of("blue").unwrap()];
        assert!((red - blue - (p.p_true / p.p_noise).ln()).abs() < 1e-12);
        let mid = (p.p_true + p.p_noise) / 2.0;
        assert!((small - blue - (mid / p.p_noise).ln()).abs() < 1e-12);

        let whole: BTreeSet<String> = w.image_ids().into_iter().collect();
        let mut uniform_world = w.clone();
        for img in &mut uniform_world.images {
            img.values.insert("shape".into(), "square".into());
        }
        let sp = avg_feature_speaker(&uniform_world, lex, p, &whole).unwrap();
        let d = sp.next_token_logprobs("o1", &[]).unwrap();
        let square = d.logp()[lex.index_of("square").unwrap()];
        let circle = d.logp()[lex.index_of("circle").unwrap()];
        assert!((square - circle - (p.p_true / p.p_noise).ln()).abs() < 1e-12);

        assert!(matches!(
            avg_feature_speaker(&w, lex, p, &BTreeSet::new()),
            Err(Error::EmptyCell)
        ));
    }

    #[test]
    fn invalid_params_rejected() {
        let w = shapes6();
        for bad in [
            TemplateSpeakerParams {
                p_true: 0.1,
                p_noise: 0.1,
                ..params()
            },
            TemplateSpeakerParams {
                eos_rate: 1.0,
                ..params()
            },
            TemplateSpeakerParams { max_len: 0, ..params() },
            TemplateSpeakerParams {
                p_noise: -1.0,
                ..params()
            },
        ] {
            assert!(template_speaker(&w, &w.lexicon, bad).is_err());
        }
    }

    #[test]
    fn unknown_image_is_an_error() {
        let w = shapes6();
        let sp = template_speaker(&w, &w.lexicon, params()).unwrap();
        assert!(matches!(sp.next_token_logprobs("zz", &[]), Err(Error::UnknownImage(_))));
    }

    #[test]
    fn truthful_tokens_outrank_false_ones() {
        let w = shapes6();
        let sp = template_speaker(&w, &w.lexicon, params()).unwrap();
        for img in &w.images {
            let d = sp.next_token_logprobs(&img.id, &[]).unwrap();
            let mut min_true = f64::INFINITY;
            let mut max_false = f64::NEG_INFINITY;
            for (i, t) in w.lexicon.vocab.iter().enumerate() {
                if w.lexicon.kind(t).unwrap() != TokenKind::Content {
                    continue;
                }
                if truth_value(img, t, &w.lexicon).unwrap() {
                    min_true = min_true.min(d.logp()[i]);
                } else {
                    max_false = max_false.max(d.logp()[i]);
                }
            }
            assert!(min_true >= max_false);
        }
    }

    proptest! {
        #[test]
        fn singleton_average_matches_template(
            image in 0usize..6,
            prefix in prop::collection::vec(0usize..9, 0..6),
        ) {
            let w = shapes6();
            let p = params();
            let id = w.images[image].id.clone();
            let prefix: Vec<String> = prefix.iter().map(|&i| w.lexicon.vocab[i].clone()).collect();
            let t = template_speaker(&w, &w.lexicon, p).unwrap();
            let cell: BTreeSet<String> = [id.clone()].into_iter().collect();
            let a = avg_feature_speaker(&w, &w.lexicon, p, &cell).unwrap();
            let dt = t.next_token_logprobs(&id, &prefix).unwrap();
            let da = a.next_token_logprobs(&id, &prefix).unwrap();
            for (x, y) in dt.probs().iter().zip(da.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
