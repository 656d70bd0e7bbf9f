//! Caption evaluation: a sliding-window keyword classifier that maps
//! captions to `(part, aspect = value)` pairs, attribute coverage over the
//! captions a model produces for every issue, and issue alignment of a
//! single caption.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{AttributeSchema, SymbolicImage, UNKNOWN};

pub const DEFAULT_WINDOW: usize = 6;

fn default_window() -> usize {
    DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Part name -> synonyms ("beak" -> {"beak", "bill"}).
    #[serde(default)]
    pub part_keywords: BTreeMap<String, BTreeSet<String>>,
    /// Aspect -> value -> keywords ("color" -> "brown" -> {"brown"}).
    pub aspect_keywords: BTreeMap<String, BTreeMap<String, BTreeSet<String>>>,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Whole-object nouns ("bird", "body") that stop binding.
    #[serde(default)]
    pub generic_parts: BTreeSet<String>,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidConfig("classifier window must be >= 1".into()));
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (part, words) in &self.part_keywords {
            for w in words {
                if let Some(prev) = owner.insert(w, part) {
                    return Err(Error::InvalidConfig(format!(
                        "keyword `{w}` belongs to both `{prev}` and `{part}`"
                    )));
                }
                if self.generic_parts.contains(w) {
                    return Err(Error::InvalidConfig(format!(
                        "`{w}` is both a part keyword and a generic part"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ClassifierConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn part_of(&self, token: &str) -> Option<&str> {
        self.part_keywords
            .iter()
            .find(|(_, words)| words.contains(token))
            .map(|(p, _)| p.as_str())
    }

    fn aspects_of<'a>(&'a self, token: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.aspect_keywords.iter().flat_map(move |(aspect, values)| {
            values
                .iter()
                .filter(move |(_, words)| words.contains(token))
                .map(move |(value, _)| (aspect.as_str(), value.as_str()))
        })
    }
}

const SHAPES6_CLASSIFIER: &str = include_str!("../data/shapes6.classifier.json");

/// Classifier for the bundled shape world.
pub fn shapes6_classifier() -> ClassifierConfig {
    serde_json::from_str(SHAPES6_CLASSIFIER).expect("bundled classifier is valid")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExtractedPair {
    /// `None` when the aspect word does not modify a specific part.
    pub part: Option<String>,
    pub aspect: String,
    pub value: String,
    /// Token range `[start, end)` from the aspect word to its part word.
    pub span: (usize, usize),
}

impl ExtractedPair {
    pub fn key(&self) -> (Option<&str>, &str, &str) {
        (self.part.as_deref(), &self.aspect, &self.value)
    }
}

/// Scan left to right. Each aspect word binds to the nearest following part
/// word within `window` tokens; a generic part word, or no part word at all,
/// leaves it unbound.
pub fn classify_caption(caption: &[String], config: &ClassifierConfig) -> Vec<ExtractedPair> {
    let mut out = Vec::new();
    for (i, tok) in caption.iter().enumerate() {
        let aspects: Vec<_> = config.aspects_of(tok).collect();
        if aspects.is_empty() {
            continue;
        }
        let mut bound: Option<(usize, &str)> = None;
        let end = caption.len().min(i + 1 + config.window);
        for (j, next) in caption.iter().enumerate().take(end).skip(i + 1) {
            if config.generic_parts.contains(next) {
                break;
            }
            if let Some(part) = config.part_of(next) {
                bound = Some((j, part));
                break;
            }
        }
        for (aspect, value) in aspects {
            out.push(ExtractedPair {
                part: bound.map(|(_, p)| p.to_string()),
                aspect: aspect.to_string(),
                value: value.to_string(),
                span: (i, bound.map_or(i + 1, |(j, _)| j + 1)),
            });
        }
    }
    out
}

/// Attribute an extracted pair talks about, if any.
fn attribute_of<'a>(pair: &ExtractedPair, schema: &'a AttributeSchema) -> Option<&'a str> {
    schema
        .find_by_part_aspect(pair.part.as_deref(), &pair.aspect)
        .map(|a| a.name.as_str())
}

fn strip_eos<'a>(caption: &'a [String], eos: Option<&str>) -> &'a [String] {
    match (caption.last(), eos) {
        (Some(last), Some(eos)) if last == eos => &caption[..caption.len() - 1],
        _ => caption,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when there were no extractions and precision is reported as 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub precision_undefined: bool,
}

impl Prf {
    pub fn from_ratios(p_num: usize, p_den: usize, r_num: usize, r_den: usize) -> Self {
        let (precision, undefined) = if p_den == 0 {
            (0.0, true)
        } else {
            (p_num as f64 / p_den as f64, false)
        };
        let recall = if r_den == 0 { 0.0 } else { r_num as f64 / r_den as f64 };
        Prf {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
            precision_undefined: undefined,
        }
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

/// Per-attribute tallies behind a [`CoverageReport`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageTally {
    pub extractions: usize,
    pub correct_extractions: usize,
    /// Images whose attribute is known.
    pub known: usize,
    /// Images whose attribute was correctly extracted at least once.
    pub covered: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub precision_undefined: bool,
    pub per_issue: BTreeMap<String, Prf>,
    pub counts: Counts,
    /// Extractions that map to no schema attribute.
    pub unmapped: usize,
    pub tallies: BTreeMap<String, CoverageTally>,
}

impl CoverageReport {
    pub fn overall(&self) -> Prf {
        Prf {
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
            precision_undefined: self.precision_undefined,
        }
    }

    fn from_tallies(tallies: BTreeMap<String, CoverageTally>, unmapped: usize) -> Self {
        let ext: usize = tallies.values().map(|t| t.extractions).sum::<usize>() + unmapped;
        let correct: usize = tallies.values().map(|t| t.correct_extractions).sum();
        let known: usize = tallies.values().map(|t| t.known).sum();
        let covered: usize = tallies.values().map(|t| t.covered).sum();
        let overall = Prf::from_ratios(correct, ext, covered, known);
        let per_issue = tallies
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    Prf::from_ratios(t.correct_extractions, t.extractions, t.covered, t.known),
                )
            })
            .collect();
        CoverageReport {
            precision: overall.precision,
            recall: overall.recall,
            f1: overall.f1,
            precision_undefined: overall.precision_undefined,
            per_issue,
            counts: Counts {
                true_positive: correct,
                false_positive: ext - correct,
                false_negative: known - covered,
            },
            unmapped,
            tallies,
        }
    }

    /// Pool several reports (micro-average over the underlying tallies).
    pub fn merge<'a>(reports: impl IntoIterator<Item = &'a CoverageReport>) -> Self {
        let mut tallies: BTreeMap<String, CoverageTally> = BTreeMap::new();
        let mut unmapped = 0;
        for r in reports {
            unmapped += r.unmapped;
            for (k, t) in &r.tallies {
                let acc = tallies.entry(k.clone()).or_default();
                acc.extractions += t.extractions;
                acc.correct_extractions += t.correct_extractions;
                acc.known += t.known;
                acc.covered += t.covered;
            }
        }
        CoverageReport::from_tallies(tallies, unmapped)
    }
}

/// Attribute coverage of the captions one model produced for one image
/// under every issue. Each caption is classified on its own and the
/// extractions are pooled.
pub fn attribute_coverage(
    per_issue_captions: &BTreeMap<String, Vec<String>>,
    truth: &SymbolicImage,
    schema: &AttributeSchema,
    config: &ClassifierConfig,
    eos: Option<&str>,
) -> CoverageReport {
    let mut tallies: BTreeMap<String, CoverageTally> = schema
        .attributes
        .iter()
        .map(|a| {
            let known = truth.value(&a.name).is_some_and(|v| v != UNKNOWN);
            (
                a.name.clone(),
                CoverageTally {
                    known: known as usize,
                    ..Default::default()
                },
            )
        })
        .collect();
    let mut unmapped = 0;
    for caption in per_issue_captions.values() {
        for pair in classify_caption(strip_eos(caption, eos), config) {
            match attribute_of(&pair, schema) {
                Some(attr) => {
                    let t = tallies.get_mut(attr).expect("schema attribute");
                    t.extractions += 1;
                    if truth.value(attr) == Some(pair.value.as_str()) && t.known == 1 {
                        t.correct_extractions += 1;
                        t.covered = 1;
                    }
                }
                None => unmapped += 1,
            }
        }
    }
    CoverageReport::from_tallies(tallies, unmapped)
}

/// Outcome of one caption under one issue.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    /// Some extraction addresses the issue's attribute.
    pub resolved: bool,
    /// The first such extraction carries the true value.
    pub correct: bool,
    pub on_issue: usize,
    pub off_issue: usize,
}

/// Issue alignment of one caption. The issue label must name a schema
/// attribute whose aspect the classifier knows.
pub fn issue_alignment(
    caption: &[String],
    issue_label: &str,
    truth: &SymbolicImage,
    schema: &AttributeSchema,
    config: &ClassifierConfig,
    eos: Option<&str>,
) -> Result<Alignment> {
    let attr = schema
        .get(issue_label)
        .ok_or_else(|| Error::UnknownIssueMapping(issue_label.to_string()))?;
    if !config.aspect_keywords.contains_key(attr.aspect_name())
        || attr
            .part
            .as_ref()
            .is_some_and(|p| !config.part_keywords.contains_key(p))
    {
        return Err(Error::UnknownIssueMapping(issue_label.to_string()));
    }
    let mut out = Alignment::default();
    for pair in classify_caption(strip_eos(caption, eos), config) {
        if attribute_of(&pair, schema) == Some(attr.name.as_str()) {
            if !out.resolved {
                out.resolved = true;
                out.correct = truth.value(&attr.name) == Some(pair.value.as_str());
            }
            out.on_issue += 1;
        } else {
            out.off_issue += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentTally {
    pub runs: usize,
    pub resolved: usize,
    pub correct: usize,
    pub on_issue: usize,
    pub off_issue: usize,
}

impl AlignmentTally {
    pub fn add(&mut self, a: &Alignment) {
        self.runs += 1;
        self.resolved += a.resolved as usize;
        self.correct += (a.resolved && a.correct) as usize;
        self.on_issue += a.on_issue;
        self.off_issue += a.off_issue;
    }

    fn prf(&self) -> Prf {
        Prf::from_ratios(self.on_issue, self.on_issue + self.off_issue, self.correct, self.runs)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub precision_undefined: bool,
    pub per_issue: BTreeMap<String, Prf>,
    pub counts: Counts,
    pub tallies: BTreeMap<String, AlignmentTally>,
}

impl AlignmentReport {
    pub fn overall(&self) -> Prf {
        Prf {
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
            precision_undefined: self.precision_undefined,
        }
    }

    /// Corpus report from `(issue label, alignment)` runs.
    pub fn from_runs<'a>(runs: impl IntoIterator<Item = (&'a str, &'a Alignment)>) -> Self {
        let mut tallies: BTreeMap<String, AlignmentTally> = BTreeMap::new();
        for (label, a) in runs {
            tallies.entry(label.to_string()).or_default().add(a);
        }
        let mut total = AlignmentTally::default();
        for t in tallies.values() {
            total.runs += t.runs;
            total.resolved += t.resolved;
            total.correct += t.correct;
            total.on_issue += t.on_issue;
            total.off_issue += t.off_issue;
        }
        let overall = total.prf();
        AlignmentReport {
            precision: overall.precision,
            recall: overall.recall,
            f1: overall.f1,
            precision_undefined: overall.precision_undefined,
            per_issue: tallies.iter().map(|(k, t)| (k.clone(), t.prf())).collect(),
            counts: Counts {
                true_positive: total.correct,
                false_positive: total.off_issue,
                false_negative: total.runs - total.correct,
            },
            tallies,
        }
    }
}

/// Extracted values that are false of the target but true of another image
/// in `cell_mates`.
pub fn count_cellmate_leaks(
    caption: &[String],
    truth: &SymbolicImage,
    cell_mates: &[&SymbolicImage],
    schema: &AttributeSchema,
    config: &ClassifierConfig,
    eos: Option<&str>,
) -> usize {
    classify_caption(strip_eos(caption, eos), config)
        .iter()
        .filter_map(|pair| attribute_of(pair, schema).map(|a| (a, pair.value.as_str())))
        .filter(|(attr, value)| {
            truth.value(attr) != Some(value)
                && cell_mates
                    .iter()
                    .any(|m| m.id != truth.id && m.value(attr) == Some(value))
        })
        .count()
}

/// Aligned-column text table of `(row name, scores)`.
pub fn render_table<'a>(title: &str, rows: impl IntoIterator<Item = (&'a str, &'a Prf)>) -> String {
    let rows: Vec<_> = rows.into_iter().collect();
    let width = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain([title.len()])
        .max()
        .unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(s, "{title:<width$}  {:>9}  {:>6}  {:>6}", "Precision", "Recall", "F1");
    for (name, p) in rows {
        let _ = writeln!(
            s,
            "{name:<width$}  {:>9.1}  {:>6.1}  {:>6.1}",
            100.0 * p.precision,
            100.0 * p.recall,
            100.0 * p.f1
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::shapes6;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn bird_config() -> ClassifierConfig {
        let mut part_keywords = BTreeMap::new();
        part_keywords.insert(
            "wing".to_string(),
            ["wing", "wings"].iter().map(|s| s.to_string()).collect(),
        );
        part_keywords.insert(
            "beak".to_string(),
            ["beak", "bill"].iter().map(|s| s.to_string()).collect(),
        );
        part_keywords.insert("head".to_string(), ["head"].iter().map(|s| s.to_string()).collect());
        let mut color = BTreeMap::new();
        for c in ["brown", "grey", "orange", "scarlet", "pink", "white"] {
            color.insert(c.to_string(), [c.to_string()].into_iter().collect());
        }
        let mut size = BTreeMap::new();
        size.insert("small".to_string(), ["small".to_string()].into_iter().collect());
        let mut aspect_keywords = BTreeMap::new();
        aspect_keywords.insert("color".to_string(), color);
        aspect_keywords.insert("size".to_string(), size);
        ClassifierConfig {
            part_keywords,
            aspect_keywords,
            window: DEFAULT_WINDOW,
            generic_parts: ["bird", "body"].iter().map(|s| s.to_string()).collect(),
        }
    }

    fn keys(pairs: &[ExtractedPair]) -> Vec<(Option<&str>, &str, &str)> {
        pairs.iter().map(ExtractedPair::key).collect()
    }

    #[test]
    fn coordinated_adjectives_share_a_part() {
        let pairs = classify_caption(&toks("scarlet and pink head"), &bird_config());
        assert_eq!(
            keys(&pairs),
            [(Some("head"), "color", "scarlet"), (Some("head"), "color", "pink")]
        );
        assert_eq!(pairs[0].span, (0, 4));
    }

    #[test]
    fn generic_part_blocks_binding() {
        let pairs = classify_caption(&toks("the bird has a white body"), &bird_config());
        assert_eq!(keys(&pairs), [(None, "color", "white")]);
        let pairs = classify_caption(&toks("a grey bird with brown wings"), &bird_config());
        assert_eq!(
            keys(&pairs),
            [(None, "color", "grey"), (Some("wing"), "color", "brown")]
        );
    }

    #[test]
    fn window_limits_binding() {
        let mut cfg = bird_config();
        cfg.window = 2;
        let pairs = classify_caption(&toks("brown x y head"), &cfg);
        assert_eq!(keys(&pairs), [(None, "color", "brown")]);
        let pairs = classify_caption(&toks("brown x head"), &cfg);
        assert_eq!(keys(&pairs), [(Some("head"), "color", "brown")]);
    }

    #[test]
    fn no_backward_binding() {
        let pairs = classify_caption(&toks("head is brown"), &bird_config());
        assert_eq!(keys(&pairs), [(None, "color", "brown")]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = bird_config();
        cfg.window = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = bird_config();
        cfg.part_keywords.get_mut("head").unwrap().insert("bill".into());
        assert!(cfg.validate().is_err());
        assert!(bird_config().validate().is_ok());
    }

    #[test]
    fn shapes_coverage() {
        let w = shapes6();
        let cfg = shapes6_classifier();
        let o1 = w.image("o1").unwrap();
        let mut caps = BTreeMap::new();
        caps.insert("color".to_string(), toks("red square"));
        caps.insert("size".to_string(), toks("small square"));
        let r = attribute_coverage(&caps, o1, &w.schema, &cfg, None);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.counts.true_positive, 4);

        let empty: BTreeMap<String, Vec<String>> = [("color".to_string(), vec![])].into_iter().collect();
        let r = attribute_coverage(&empty, o1, &w.schema, &cfg, None);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.precision, 0.0);
        assert!(r.precision_undefined);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn shapes_alignment() {
        let w = shapes6();
        let cfg = shapes6_classifier();
        let o1 = w.image("o1").unwrap();
        let a = issue_alignment(&toks("red square </s>"), "color", o1, &w.schema, &cfg, Some("</s>")).unwrap();
        assert_eq!(
            a,
            Alignment {
                resolved: true,
                correct: true,
                on_issue: 1,
                off_issue: 1
            }
        );
        let a = issue_alignment(&toks("small square"), "color", o1, &w.schema, &cfg, None).unwrap();
        assert!(!a.resolved && !a.correct);
        let a = issue_alignment(&toks("blue square"), "color", o1, &w.schema, &cfg, None).unwrap();
        assert!(a.resolved && !a.correct);
        assert!(matches!(
            issue_alignment(&toks("red"), "texture", o1, &w.schema, &cfg, None),
            Err(Error::UnknownIssueMapping(_))
        ));
    }

    #[test]
    fn alignment_report_aggregates() {
        let good = Alignment {
            resolved: true,
            correct: true,
            on_issue: 1,
            off_issue: 1,
        };
        let miss = Alignment {
            resolved: false,
            correct: false,
            on_issue: 0,
            off_issue: 2,
        };
        let r = AlignmentReport::from_runs([("color", &good), ("size", &miss)]);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.precision, 0.25);
        assert!((r.f1 - harmonic_mean(0.25, 0.5)).abs() < 1e-12);
        assert_eq!(r.per_issue["size"].recall, 0.0);
    }

    #[test]
    fn leaks_count_cellmate_values() {
        let w = shapes6();
        let cfg = shapes6_classifier();
        let o1 = w.image("o1").unwrap();
        let o2 = w.image("o2").unwrap();
        let n = count_cellmate_leaks(&toks("large red square"), o1, &[o1, o2], &w.schema, &cfg, None);
        assert_eq!(n, 1);
        let n = count_cellmate_leaks(&toks("blue square"), o1, &[o1, o2], &w.schema, &cfg, None);
        assert_eq!(n, 0);
    }

    #[test]
    fn table_is_aligned() {
        let p = Prf::from_ratios(1, 2, 1, 4);
        let t = render_table("model", [("s0", &p), ("s1ch", &p)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    }
}
