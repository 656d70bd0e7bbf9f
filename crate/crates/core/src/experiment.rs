//! Corpus sweeps: caption every (image, issue) pair with several models and
//! score the results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    attribute_coverage, count_cellmate_leaks, issue_alignment, Alignment, AlignmentReport, ClassifierConfig,
    CoverageReport,
};
use crate::issue::{partition_by_attribute, sample_context, Context, Issue};
use crate::rsa::{decode, Caption, Model, RsaConfig};
use crate::speaker::{avg_feature_speaker, template_speaker, SpeakerBackend, TemplateSpeakerParams};
use crate::world::World;

/// Model names accepted on the command line. `S0Avg` is the base speaker
/// run on the feature average of the target's cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    S0,
    S0Avg,
    S1,
    S1C,
    S1CH,
}

impl ModelName {
    pub const ALL: [ModelName; 5] = [
        ModelName::S0,
        ModelName::S0Avg,
        ModelName::S1,
        ModelName::S1C,
        ModelName::S1CH,
    ];

    pub fn engine_model(self) -> Model {
        match self {
            ModelName::S0 | ModelName::S0Avg => Model::S0,
            ModelName::S1 => Model::S1,
            ModelName::S1C => Model::S1C,
            ModelName::S1CH => Model::S1CH,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelName::S0Avg => "s0avg",
            other => other.engine_model().name(),
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("s0avg") {
            return Ok(ModelName::S0Avg);
        }
        Ok(match s.parse::<Model>()? {
            Model::S0 => ModelName::S0,
            Model::S1 => ModelName::S1,
            Model::S1C => ModelName::S1C,
            Model::S1CH => ModelName::S1CH,
        })
    }
}

/// One model configuration in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub label: String,
    pub model: ModelName,
    pub config: RsaConfig,
}

impl ModelRun {
    pub fn new(model: ModelName, config: RsaConfig) -> Self {
        ModelRun {
            label: model.name().to_string(),
            model,
            config,
        }
    }

    /// The model with its tuned hyperparameters.
    pub fn tuned(model: ModelName) -> Self {
        ModelRun::new(model, RsaConfig::tuned_for(model.engine_model()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub runs: Vec<ModelRun>,
    /// Attribute names to partition by.
    pub issues: Vec<String>,
    pub speaker: TemplateSpeakerParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub image: String,
    pub issue: String,
    pub model: String,
    pub caption: Vec<String>,
    pub score: f64,
    pub alignment: Option<Alignment>,
    pub cellmate_leaks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub label: String,
    pub coverage: CoverageReport,
    pub alignment: AlignmentReport,
    pub captions: usize,
    pub mean_off_issue: f64,
    pub cellmate_leaks: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub summaries: Vec<ModelSummary>,
    pub records: Vec<RunRecord>,
}

impl SweepReport {
    pub fn summary(&self, label: &str) -> Option<&ModelSummary> {
        self.summaries.iter().find(|s| s.label == label)
    }
}

/// Seed for the context of one (image, issue) pair.
pub fn context_seed(seed: u64, image_index: usize, issue_index: usize) -> u64 {
    // splitmix64 finalizer over the packed indices
    let mut z = seed
        ^ (image_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (issue_index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Caption one target under one context with one model.
pub fn caption_with(
    world: &World,
    base: &dyn SpeakerBackend,
    params: TemplateSpeakerParams,
    context: &Context,
    run: &ModelRun,
) -> Result<Caption> {
    if run.model == ModelName::S0Avg {
        let cell: BTreeSet<String> = context.same_cell.iter().cloned().collect();
        let avg = avg_feature_speaker(world, &world.lexicon, params, &cell)?;
        return decode(&avg, context, &run.config, Model::S0);
    }
    decode(base, context, &run.config, run.model.engine_model())
}

/// Run every model on every (image, issue) pair. Pairs are processed in
/// parallel; the output order is fixed.
pub fn run_sweep(world: &World, classifier: &ClassifierConfig, spec: &SweepSpec) -> Result<SweepReport> {
    for r in &spec.runs {
        r.config.validate()?;
    }
    let issues: Vec<Issue> = spec
        .issues
        .iter()
        .map(|a| partition_by_attribute(world, a))
        .collect::<Result<_>>()?;
    let base = template_speaker(world, &world.lexicon, spec.speaker)?;
    let eos = world.lexicon.eos.as_str();
    let index = world.image_index();

    let pairs: Vec<(usize, usize)> = (0..world.images.len())
        .flat_map(|i| (0..issues.len()).map(move |j| (i, j)))
        .collect();
    let records: Vec<Vec<RunRecord>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let img = &world.images[i];
            let issue = &issues[j];
            spec.runs
                .iter()
                .map(|run| {
                    let mut rec = RunRecord {
                        image: img.id.clone(),
                        issue: issue.label().to_string(),
                        model: run.label.clone(),
                        caption: Vec::new(),
                        score: 0.0,
                        alignment: None,
                        cellmate_leaks: 0,
                        error: None,
                    };
                    let seed = context_seed(spec.seed, i, j);
                    let outcome = sample_context(issue, &img.id, run.config.budget, seed).and_then(|ctx| {
                        let cap = caption_with(world, &base, spec.speaker, &ctx, run)?;
                        let align =
                            issue_alignment(&cap.tokens, issue.label(), img, &world.schema, classifier, Some(eos))?;
                        let mates: Vec<_> = ctx
                            .same_cell
                            .iter()
                            .filter_map(|id| index.get(id.as_str()).copied())
                            .collect();
                        let leaks =
                            count_cellmate_leaks(&cap.tokens, img, &mates, &world.schema, classifier, Some(eos));
                        Ok((cap, align, leaks))
                    });
                    match outcome {
                        Ok((cap, align, leaks)) => {
                            rec.caption = cap.tokens;
                            rec.score = cap.score;
                            rec.alignment = Some(align);
                            rec.cellmate_leaks = leaks;
                        }
                        Err(e) => rec.error = Some(e.to_string()),
                    }
                    rec
                })
                .collect()
        })
        .collect();
    let records: Vec<RunRecord> = records.into_iter().flatten().collect();

    let summaries = spec
        .runs
        .iter()
        .map(|run| summarize(world, classifier, &records, &run.label))
        .collect();
    Ok(SweepReport { summaries, records })
}

fn summarize(world: &World, classifier: &ClassifierConfig, records: &[RunRecord], label: &str) -> ModelSummary {
    let mine: Vec<&RunRecord> = records.iter().filter(|r| r.model == label).collect();
    let ok: Vec<&RunRecord> = mine.iter().copied().filter(|r| r.error.is_none()).collect();
    let eos = world.lexicon.eos.as_str();

    let mut by_image: BTreeMap<&str, BTreeMap<String, Vec<String>>> = BTreeMap::new();
    for r in &ok {
        by_image
            .entry(r.image.as_str())
            .or_default()
            .insert(r.issue.clone(), r.caption.clone());
    }
    let per_image: Vec<CoverageReport> = by_image
        .iter()
        .filter_map(|(id, caps)| {
            world
                .image(id)
                .map(|img| attribute_coverage(caps, img, &world.schema, classifier, Some(eos)))
        })
        .collect();
    let coverage = CoverageReport::merge(&per_image);
    let alignment = AlignmentReport::from_runs(
        ok.iter()
            .filter_map(|r| r.alignment.as_ref().map(|a| (r.issue.as_str(), a))),
    );
    let off: usize = ok.iter().filter_map(|r| r.alignment.map(|a| a.off_issue)).sum();
    ModelSummary {
        label: label.to_string(),
        coverage,
        alignment,
        captions: ok.len(),
        mean_off_issue: if ok.is_empty() {
            0.0
        } else {
            off as f64 / ok.len() as f64
        },
        cellmate_leaks: ok.iter().map(|r| r.cellmate_leaks).sum(),
        failures: mine.len() - ok.len(),
    }
}
