//! Command-line front end for `pragcap`.
//!
//! Every subcommand returns an [`Outcome`]; `main` maps it to the process
//! exit status. Errors (bad configuration, unreadable files, speaker
//! failures) exit with status 2, a failed check with status 1.

pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pragcap::experiment::ModelName;
use pragcap::rsa::{EntropyMode, MixUtility};

use crate::manifest::{RsaOverrides, SpeakerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::CheckFailed => 1,
        }
    }
}

/// Exit status for errors.
pub const ERROR_EXIT: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "pragcap", version, about = "Issue-sensitive pragmatic image captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Caption every shapes target under the color and size issues.
    Demo(DemoArgs),
    /// Caption one target under one issue.
    Caption(CaptionArgs),
    /// Caption every (image, issue) pair with several models and score them.
    Eval(EvalArgs),
    /// Compare incremental decoding with exhaustive enumeration.
    OracleCheck(OracleArgs),
    /// Serve a template speaker over the wire protocol.
    Serve(ServeArgs),
    /// Write a seeded synthetic world and its classifier config.
    Synth(SynthArgs),
}

fn parse_model(s: &str) -> Result<ModelName, String> {
    s.parse().map_err(|e: pragcap::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum EntropyArg {
    Renormalized,
    Masked,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum MixArg {
    Issue,
    Target,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RsaFlags {
    /// Rationality
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the within-cell entropy term
    #[arg(long)]
    pub beta: Option<f64>,
    /// Number of context images, target included
    #[arg(long)]
    pub budget: Option<usize>,
    /// Words before EOS is forced
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Beam width; greedy when absent
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, value_enum)]
    pub entropy: Option<EntropyArg>,
    /// First term of the entropy-mixed utility
    #[arg(long, value_enum)]
    pub mix_utility: Option<MixArg>,
}

impl RsaFlags {
    pub fn overrides(&self) -> RsaOverrides {
        RsaOverrides {
            alpha: self.alpha,
            beta: self.beta,
            budget: self.budget,
            max_len: self.max_len,
            beam: self.beam,
            entropy: self.entropy.map(|e| match e {
                EntropyArg::Renormalized => EntropyMode::Renormalized,
                EntropyArg::Masked => EntropyMode::Masked,
            }),
            mix_utility: self.mix_utility.map(|m| match m {
                MixArg::Issue => MixUtility::Issue,
                MixArg::Target => MixUtility::Target,
            }),
        }
    }
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Models to show (repeatable); all when absent
    #[arg(long, value_parser = parse_model)]
    pub model: Vec<ModelName>,
    #[command(flatten)]
    pub rsa: RsaFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    /// JSON run manifest; flags override its fields
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// World file; the bundled shapes world when absent
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Partition by this attribute
    #[arg(long)]
    pub issue_attr: Option<String>,
    /// QA table for --question
    #[arg(long)]
    pub qa: Option<PathBuf>,
    /// Partition by the answers to this question
    #[arg(long)]
    pub question: Option<String>,
    /// Issue file with explicit cells
    #[arg(long)]
    pub issue_file: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_parser = parse_model)]
    pub model: Option<ModelName>,
    #[command(flatten)]
    pub rsa: RsaFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub speaker: Option<SpeakerKind>,
    /// host:port of a remote speaker
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Write the JSON record here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON eval manifest; flags override its fields
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Classifier config; required with --world
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Issue attributes (repeatable); every attribute when absent
    #[arg(long)]
    pub issue_attr: Vec<String>,
    /// Models (repeatable); all when absent
    #[arg(long, value_parser = parse_model)]
    pub model: Vec<ModelName>,
    #[command(flatten)]
    pub rsa: RsaFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for reports
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Vocabulary to keep, comma separated; EOS is always kept
    #[arg(long, value_delimiter = ',', default_value = "small,red,blue,square,circle")]
    pub tokens: Vec<String>,
    /// Issue attributes (repeatable)
    #[arg(long, default_values_t = ["color".to_string(), "size".to_string()])]
    pub issue_attr: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub max_len: usize,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Write the JSON report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub images: usize,
    /// World output path
    #[arg(long)]
    pub out: PathBuf,
    /// Classifier config output path
    #[arg(long)]
    pub classifier_out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Demo(a) => commands::demo(&a),
        Command::Caption(a) => commands::caption(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::OracleCheck(a) => commands::oracle_check(&a),
        Command::Serve(a) => commands::serve(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}
