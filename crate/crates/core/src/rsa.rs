//! Incremental pragmatic speakers.
//!
//! At every decoding step the base speaker is queried once per context image.
//! The pragmatic listener inverts those rows with Bayes' rule under a flat
//! prior, and the pragmatic speaker rescores each candidate token with
//!
//! ```text
//! score(w) = alpha * U(w) + ln S0(w | target, prefix)
//! ```
//!
//! where `U` is the listener log-probability of the target ([`Model::S1`]),
//! the log-mass the listener puts on the target's cell ([`Model::S1C`]), or a
//! `(1 - beta)`/`beta` mix of that mass and the evenness of the listener
//! inside the cell ([`Model::S1CH`]). Scores are normalized over the
//! vocabulary, so a caption's probability is the product of its steps.
//!
//! [`exact_caption_speaker`] computes the same models with caption-level
//! normalization by brute-force enumeration; it is only usable on tiny
//! vocabularies and serves as the reference the incremental models
//! approximate.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::issue::Context;
use crate::prob::{entropy, support, Dist, Support};
use crate::speaker::{check_caption, SpeakerBackend};

/// Default cap on `|V|^max_len` for exact enumeration.
pub const DEFAULT_ENUM_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    S0,
    S1,
    S1C,
    S1CH,
}

impl Model {
    pub const ALL: [Model; 4] = [Model::S0, Model::S1, Model::S1C, Model::S1CH];

    pub fn needs_issue(self) -> bool {
        matches!(self, Model::S1C | Model::S1CH)
    }

    pub fn name(self) -> &'static str {
        match self {
            Model::S0 => "s0",
            Model::S1 => "s1",
            Model::S1C => "s1c",
            Model::S1CH => "s1ch",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s0" => Ok(Model::S0),
            "s1" => Ok(Model::S1),
            "s1c" => Ok(Model::S1C),
            "s1ch" => Ok(Model::S1CH),
            other => Err(Error::InvalidConfig(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Decode {
    Greedy,
    Beam { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    #[default]
    Flat,
}

/// How the within-cell entropy utility treats listener mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    /// Entropy of the listener restricted to the cell and renormalized.
    #[default]
    Renormalized,
    /// `-Σ p ln p` over the cell entries of the unnormalized listener.
    Masked,
}

/// First utility in the entropy-mixed speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixUtility {
    /// Log-mass on the target's cell.
    #[default]
    Issue,
    /// Log-probability of the target alone.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub budget: usize,
    pub max_len: usize,
    pub decode: Decode,
    #[serde(default)]
    pub prior: Prior,
    #[serde(default)]
    pub entropy: EntropyMode,
    #[serde(default)]
    pub mix_utility: MixUtility,
}

impl Default for RsaConfig {
    fn default() -> Self {
        RsaConfig {
            alpha: 10.0,
            beta: 0.4,
            budget: 40,
            max_len: 10,
            decode: Decode::Greedy,
            prior: Prior::Flat,
            entropy: EntropyMode::Renormalized,
            mix_utility: MixUtility::Issue,
        }
    }
}

impl RsaConfig {
    /// Per-model settings: alpha 3 for the plain speaker, alpha 10 for the
    /// issue-sensitive ones, beta 0.4, 40 context images.
    pub fn tuned_for(model: Model) -> Self {
        let base = RsaConfig::default();
        match model {
            Model::S1 => RsaConfig { alpha: 3.0, ..base },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta {} not in [0, 1]", self.beta)));
        }
        if self.budget < 2 {
            return Err(Error::InvalidConfig("budget must be at least 2".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be positive".into()));
        }
        if let Decode::Beam { width: 0 } = self.decode {
            return Err(Error::InvalidConfig("beam width must be positive".into()));
        }
        Ok(())
    }
}

/// Listener over context images after hearing `token`: Bayes' rule over
/// the per-image next-token rows with a flat prior.
pub fn listener_step(images: &Support, s0_rows: &[Dist], token: usize) -> Result<Dist> {
    if images.len() != s0_rows.len() {
        return Err(Error::InvalidDistribution(format!(
            "{} rows for {} images",
            s0_rows.len(),
            images.len()
        )));
    }
    let logits = s0_rows.iter().map(|row| row.logp()[token]).collect();
    Dist::log_normalize(logits, images.clone())
}

/// `ln L1(target | w)`.
pub fn utility_u1(l1: &Dist, target: &str) -> Result<f64> {
    l1.logp_of(target)
        .ok_or_else(|| Error::UnknownImage(target.to_string()))
}

fn cell_mask(images: &[String], target: Option<&str>, cell: &[String]) -> Result<Vec<bool>> {
    let mut mask = vec![false; images.len()];
    for id in cell {
        let i = images
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::UnknownImage(id.to_string()))?;
        mask[i] = true;
    }
    if let Some(target) = target {
        if !cell.iter().any(|id| id == target) {
            return Err(Error::InvalidIssue(format!("target `{target}` is not in its cell")));
        }
    }
    Ok(mask)
}

/// `ln Σ_{i in cell} L1(i | w)`.
pub fn utility_u1_issue(l1: &Dist, target: &str, cell: &[String]) -> Result<f64> {
    Ok(l1.log_mass_masked(&cell_mask(l1.support(), Some(target), cell)?))
}

/// Entropy of the listener restricted to the cell and renormalized.
pub fn utility_u2_entropy(l1: &Dist, cell: &[String]) -> Result<f64> {
    let mask = cell_mask(l1.support(), None, cell)?;
    Ok(entropy(&l1.mask_renormalize_masked(&mask)?))
}

fn masked_entropy(l1: &Dist, mask: &[bool]) -> f64 {
    l1.logp()
        .iter()
        .zip(mask)
        .filter(|(x, &m)| m && x.is_finite())
        .map(|(&x, _)| -x.exp() * x)
        .sum::<f64>()
        .max(0.0)
}

/// Base-speaker rows for every context image at one prefix.
#[derive(Debug, Clone)]
pub struct StepState {
    pub prefix: Vec<String>,
    images: Support,
    s0_rows: Vec<Dist>,
}

impl StepState {
    pub fn compute(backend: &dyn SpeakerBackend, images: &[String], prefix: &[String]) -> Result<Self> {
        let rows = images
            .iter()
            .map(|id| backend.next_token_logprobs(id, prefix))
            .collect::<Result<Vec<_>>>()?;
        StepState::from_rows(support(images.iter().cloned()), rows, prefix.to_vec())
    }

    pub fn from_rows(images: Support, s0_rows: Vec<Dist>, prefix: Vec<String>) -> Result<Self> {
        if images.len() != s0_rows.len() || images.is_empty() {
            return Err(Error::InvalidDistribution(format!(
                "{} rows for {} images",
                s0_rows.len(),
                images.len()
            )));
        }
        let vocab = s0_rows[0].support();
        if s0_rows.iter().any(|r| r.support() != vocab) {
            return Err(Error::InvalidDistribution(
                "base-speaker rows disagree on the vocabulary".into(),
            ));
        }
        Ok(StepState {
            prefix,
            images,
            s0_rows,
        })
    }

    pub fn images(&self) -> &Support {
        &self.images
    }

    pub fn vocab(&self) -> &Support {
        self.s0_rows[0].support()
    }

    pub fn s0_rows(&self) -> &[Dist] {
        &self.s0_rows
    }

    pub fn s0_row(&self, image: &str) -> Option<&Dist> {
        self.images.iter().position(|i| i == image).map(|i| &self.s0_rows[i])
    }

    /// Listener column for a vocabulary index.
    pub fn l1(&self, token: usize) -> Result<Dist> {
        listener_step(&self.images, &self.s0_rows, token)
    }
}

/// One incremental speaker step: a distribution over the vocabulary.
pub fn speaker_step(
    state: &StepState,
    config: &RsaConfig,
    target: &str,
    issue_cell: Option<&[String]>,
    model: Model,
) -> Result<Dist> {
    let t = state
        .images
        .iter()
        .position(|i| i == target)
        .ok_or_else(|| Error::UnknownImage(target.to_string()))?;
    let row = &state.s0_rows[t];
    if model == Model::S0 {
        return Ok(row.clone());
    }
    let mask = match (model.needs_issue(), issue_cell) {
        (true, Some(cell)) => Some(cell_mask(&state.images, Some(target), cell)?),
        (true, None) => return Err(Error::InvalidConfig(format!("model {model} needs an issue cell"))),
        (false, _) => None,
    };
    let mut scores = Vec::with_capacity(row.len());
    for (w, &log_s0) in row.logp().iter().enumerate() {
        if log_s0 == f64::NEG_INFINITY {
            scores.push(f64::NEG_INFINITY);
            continue;
        }
        if config.alpha == 0.0 {
            scores.push(log_s0);
            continue;
        }
        let l1 = state.l1(w)?;
        let u = match model {
            Model::S0 => unreachable!(),
            Model::S1 => l1.logp()[t],
            Model::S1C => l1.log_mass_masked(mask.as_deref().unwrap()),
            Model::S1CH => {
                let mask = mask.as_deref().unwrap();
                let first = match config.mix_utility {
                    MixUtility::Issue => l1.log_mass_masked(mask),
                    MixUtility::Target => l1.logp()[t],
                };
                let h = match config.entropy {
                    EntropyMode::Renormalized => entropy(&l1.mask_renormalize_masked(mask)?),
                    EntropyMode::Masked => masked_entropy(&l1, mask),
                };
                (1.0 - config.beta) * first + config.beta * h
            }
        };
        scores.push(config.alpha * u + log_s0);
    }
    Dist::log_normalize(scores, row.support().clone())
}

/// A decoded caption and its incremental log-score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<String>,
    pub score: f64,
}

impl Caption {
    /// Tokens without the trailing EOS.
    pub fn words(&self) -> &[String] {
        match self.tokens.split_last() {
            Some((_, rest)) => rest,
            None => &[],
        }
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }
}

fn step(
    backend: &dyn SpeakerBackend,
    context: &Context,
    images: &[String],
    config: &RsaConfig,
    model: Model,
    prefix: &[String],
) -> Result<Dist> {
    let cell = model.needs_issue().then_some(context.same_cell.as_slice());
    if model == Model::S0 {
        return backend.next_token_logprobs(&context.target, prefix);
    }
    let state = StepState::compute(backend, images, prefix)?;
    speaker_step(&state, config, &context.target, cell, model)
}

/// Greedy decoding; ties go to the lowest vocabulary index. A prefix of
/// `max_len` tokens is closed with a forced EOS that adds nothing to the
/// score.
pub fn decode_greedy(
    backend: &dyn SpeakerBackend,
    context: &Context,
    config: &RsaConfig,
    model: Model,
) -> Result<Caption> {
    config.validate()?;
    let images = context.images();
    let eos = backend.eos().to_string();
    let mut tokens: Vec<String> = Vec::new();
    let mut score = 0.0;
    loop {
        if tokens.len() == config.max_len {
            tokens.push(eos);
            break;
        }
        let d = step(backend, context, &images, config, model, &tokens)?;
        let w = d.argmax();
        score += d.logp()[w];
        let tok = d.support()[w].clone();
        let done = tok == eos;
        tokens.push(tok);
        if done {
            break;
        }
    }
    Ok(Caption { tokens, score })
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    score: f64,
}

/// Higher score first; equal scores fall back to lexicographic order of
/// vocabulary indices.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search over cumulative incremental log-scores.
pub fn decode_beam(
    backend: &dyn SpeakerBackend,
    context: &Context,
    config: &RsaConfig,
    model: Model,
    width: usize,
) -> Result<Caption> {
    config.validate()?;
    if width == 0 {
        return Err(Error::InvalidConfig("beam width must be positive".into()));
    }
    let images = context.images();
    let vocab = backend.vocabulary().clone();
    let eos = backend.eos_index();
    let mut live = vec![Hypothesis {
        ids: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut candidates = Vec::new();
        for hyp in live.drain(..) {
            if hyp.ids.len() == config.max_len {
                let mut ids = hyp.ids;
                ids.push(eos);
                finished.push(Hypothesis { ids, score: hyp.score });
                continue;
            }
            let prefix: Vec<String> = hyp.ids.iter().map(|&i| vocab[i].clone()).collect();
            let d = step(backend, context, &images, config, model, &prefix)?;
            for (w, &lp) in d.logp().iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut ids = hyp.ids.clone();
                ids.push(w);
                candidates.push(Hypothesis {
                    ids,
                    score: hyp.score + lp,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(width);
        for c in candidates {
            if c.ids.last() == Some(&eos) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished.sort_by(rank);
    let best = finished.into_iter().next().ok_or(Error::AllMassZero)?;
    Ok(Caption {
        tokens: best.ids.iter().map(|&i| vocab[i].clone()).collect(),
        score: best.score,
    })
}

/// Decode with the strategy named in `config.decode`.
pub fn decode(backend: &dyn SpeakerBackend, context: &Context, config: &RsaConfig, model: Model) -> Result<Caption> {
    match config.decode {
        Decode::Greedy => decode_greedy(backend, context, config, model),
        Decode::Beam { width } => decode_beam(backend, context, config, model, width),
    }
}

fn check_length(caption: &[String], max_len: usize) -> Result<()> {
    if caption.len() > max_len + 1 {
        return Err(Error::MalformedCaption(format!(
            "{} tokens before EOS exceeds max_len {max_len}",
            caption.len() - 1
        )));
    }
    Ok(())
}

/// `ln S1_inc(caption | target)`: the sum of incremental step log-probs.
/// The forced EOS after `max_len` tokens contributes zero.
pub fn caption_level_incremental(
    backend: &dyn SpeakerBackend,
    context: &Context,
    config: &RsaConfig,
    model: Model,
    caption: &[String],
) -> Result<f64> {
    config.validate()?;
    check_caption(backend, caption)?;
    check_length(caption, config.max_len)?;
    let images = context.images();
    let mut total = 0.0;
    for (n, tok) in caption.iter().enumerate() {
        if n == config.max_len {
            break;
        }
        let d = step(backend, context, &images, config, model, &caption[..n])?;
        total += d.logp()[backend.token_index(tok)?];
    }
    Ok(total)
}

/// Number of captions [`exact_caption_speaker`] would visit, measured as
/// `|V|^max_len`.
pub fn enumeration_size(vocab_len: usize, max_len: usize) -> u128 {
    (vocab_len as u128).saturating_pow(max_len as u32)
}

/// Every EOS-terminated caption with at most `max_len` words and its exact
/// caption-level probability. Captions are ordered lexicographically by
/// vocabulary index, so `argmax` ties resolve as in beam search.
#[derive(Debug, Clone)]
pub struct CaptionDist {
    pub captions: Vec<Vec<String>>,
    pub dist: Dist,
}

impl CaptionDist {
    pub fn logp_of(&self, caption: &[String]) -> Option<f64> {
        self.captions
            .iter()
            .position(|c| c == caption)
            .map(|i| self.dist.logp()[i])
    }

    pub fn argmax(&self) -> &[String] {
        &self.captions[self.dist.argmax()]
    }
}

/// Enumerate every caption and record `ln S0(caption | image)` for each
/// context image, with EOS forced after `max_len` words.
fn enumerate_s0(
    backend: &dyn SpeakerBackend,
    images: &[String],
    max_len: usize,
) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let eos = backend.eos_index();
    let vocab = backend.vocabulary().clone();
    let mut out: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    let mut stack: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), vec![0.0; images.len()])];
    while let Some((prefix, logs)) = stack.pop() {
        if prefix.len() == max_len {
            let mut caption = prefix;
            caption.push(eos);
            out.push((caption, logs));
            continue;
        }
        let words: Vec<String> = prefix.iter().map(|&i| vocab[i].clone()).collect();
        let state = StepState::compute(backend, images, &words)?;
        for w in 0..vocab.len() {
            let next: Vec<f64> = logs
                .iter()
                .zip(state.s0_rows())
                .map(|(acc, row)| acc + row.logp()[w])
                .collect();
            let mut caption = prefix.clone();
            caption.push(w);
            if w == eos {
                out.push((caption, next));
            } else {
                stack.push((caption, next));
            }
        }
    }
    // lexicographic in vocabulary indices, the order beam search breaks ties by
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out
        .into_iter()
        .map(|(ids, logs)| (ids.into_iter().map(|i| vocab[i].clone()).collect(), logs))
        .collect())
}

/// Caption-level speaker computed exactly by enumerating the caption space.
pub fn exact_caption_speaker(
    backend: &dyn SpeakerBackend,
    context: &Context,
    config: &RsaConfig,
    model: Model,
    max_len: usize,
    cap: u128,
) -> Result<CaptionDist> {
    config.validate()?;
    let size = enumeration_size(backend.vocabulary().len(), max_len);
    if size > cap {
        return Err(Error::EnumerationTooLarge { size, cap });
    }
    let images = context.images();
    let image_support = support(images.iter().cloned());
    let mask = context.cell_mask();
    let table = enumerate_s0(backend, &images, max_len)?;

    let mut captions = Vec::with_capacity(table.len());
    let mut scores = Vec::with_capacity(table.len());
    for (caption, logs) in table {
        let log_s0 = logs[0];
        let score = if log_s0 == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else if model == Model::S0 || config.alpha == 0.0 {
            log_s0
        } else {
            let l1 = Dist::log_normalize(logs, image_support.clone())?;
            let u = match model {
                Model::S0 => unreachable!(),
                Model::S1 => l1.logp()[0],
                Model::S1C => l1.log_mass_masked(&mask),
                Model::S1CH => {
                    let first = match config.mix_utility {
                        MixUtility::Issue => l1.log_mass_masked(&mask),
                        MixUtility::Target => l1.logp()[0],
                    };
                    let h = match config.entropy {
                        EntropyMode::Renormalized => entropy(&l1.mask_renormalize_masked(&mask)?),
                        EntropyMode::Masked => masked_entropy(&l1, &mask),
                    };
                    (1.0 - config.beta) * first + config.beta * h
                }
            };
            config.alpha * u + log_s0
        };
        captions.push(caption);
        scores.push(score);
    }
    let labels = support(captions.iter().map(|c| c.join(" ")));
    let dist = Dist::log_normalize(scores, labels)?;
    Ok(CaptionDist { captions, dist })
}
