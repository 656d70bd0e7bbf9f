//! Run manifests: JSON files carrying every field a flag can set.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use pragcap::experiment::{ModelName, ModelRun};
use pragcap::issue::{load_issue, load_qa_table, partition_by_attribute, partition_by_qa, Issue};
use pragcap::rsa::{Decode, EntropyMode, MixUtility, RsaConfig};
use pragcap::speaker::TemplateSpeakerParams;
use pragcap::world::{load_world, shapes6, World};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerKind {
    #[default]
    Template,
    Avg,
    Remote,
}

/// Exactly one of `attribute`, `question` with `qa`, or `file`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssueSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl IssueSpec {
    pub fn resolve(&self, world: &World) -> Result<Issue> {
        match (&self.attribute, &self.question, &self.qa, &self.file) {
            (Some(a), None, None, None) => Ok(partition_by_attribute(world, a)?),
            (None, Some(q), Some(qa), None) => Ok(partition_by_qa(&load_qa_table(qa)?, q)?),
            (None, None, None, Some(f)) => Ok(load_issue(f)?),
            (None, Some(_), None, None) => bail!("--question needs --qa"),
            (None, None, None, None) => {
                bail!("no issue given: use --issue-attr, --question with --qa, or --issue-file")
            }
            _ => bail!("give exactly one issue: an attribute, a question with a QA table, or an issue file"),
        }
    }

    fn files(&self) -> impl Iterator<Item = &PathBuf> {
        self.qa.iter().chain(&self.file)
    }
}

/// Hyperparameters to override on top of a model's tuned settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsaOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    /// Beam width; absent means greedy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropyMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_utility: Option<MixUtility>,
}

impl RsaOverrides {
    pub fn merge(&mut self, flags: &RsaOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if flags.$f.is_some() { self.$f = flags.$f; } )* };
        }
        take!(alpha, beta, budget, max_len, beam, entropy, mix_utility);
    }

    pub fn config_for(&self, model: ModelName) -> Result<RsaConfig> {
        let mut c = RsaConfig::tuned_for(model.engine_model());
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(b) = self.beta {
            c.beta = b;
        }
        if let Some(b) = self.budget {
            c.budget = b;
        }
        if let Some(m) = self.max_len {
            c.max_len = m;
        }
        if let Some(width) = self.beam {
            c.decode = Decode::Beam { width };
        }
        if let Some(e) = self.entropy {
            c.entropy = e;
        }
        if let Some(m) = self.mix_utility {
            c.mix_utility = m;
        }
        c.validate()?;
        Ok(c)
    }
}

/// One caption request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// Absent means the bundled shapes world.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<PathBuf>,
    pub issue: IssueSpec,
    pub target: String,
    pub model: ModelName,
    #[serde(default)]
    pub config: RsaOverrides,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub speaker: SpeakerKind,
    #[serde(default)]
    pub speaker_params: TemplateSpeakerParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        for p in self.world.iter().chain(self.issue.files()) {
            require_file(p)?;
        }
        if self.speaker == SpeakerKind::Remote && self.endpoint.is_none() {
            bail!("--speaker remote needs --endpoint");
        }
        if self.speaker == SpeakerKind::Remote && self.model == ModelName::S0Avg {
            bail!("s0avg needs the world's features and cannot run on a remote speaker");
        }
        Ok(())
    }
}

/// A sweep over every (image, issue) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<PathBuf>,
    /// Required with `world`; the shapes world brings its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<PathBuf>,
    /// Attribute names; absent means every schema attribute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issues: Option<Vec<String>>,
    #[serde(default = "all_models")]
    pub models: Vec<ModelName>,
    #[serde(default)]
    pub config: RsaOverrides,
    #[serde(default)]
    pub speaker_params: TemplateSpeakerParams,
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
}

fn all_models() -> Vec<ModelName> {
    ModelName::ALL.to_vec()
}

impl EvalManifest {
    pub fn validate(&self) -> Result<()> {
        for p in self.world.iter().chain(&self.classifier) {
            require_file(p)?;
        }
        if self.world.is_some() && self.classifier.is_none() {
            bail!("a custom world needs --classifier");
        }
        let distinct: BTreeSet<_> = self.models.iter().collect();
        if distinct.len() != self.models.len() {
            bail!("duplicate model in the model list");
        }
        Ok(())
    }

    pub fn runs(&self) -> Result<Vec<ModelRun>> {
        self.models
            .iter()
            .map(|&m| Ok(ModelRun::new(m, self.config.config_for(m)?)))
            .collect()
    }
}

pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("file not found: {}", path.display());
    }
    Ok(())
}

pub fn read_manifest<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

/// The world at `path`, or the bundled shapes world.
pub fn world_or_default(path: Option<&Path>) -> Result<World> {
    match path {
        Some(p) => load_world(p).with_context(|| format!("loading world {}", p.display())),
        None => Ok(shapes6()),
    }
}
