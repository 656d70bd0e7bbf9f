use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;
use std::thread;

use anyhow::{bail, Context as _, Result};
use pragcap::eval::{render_table, shapes6_classifier, ClassifierConfig, Prf};
use pragcap::experiment::{caption_with, context_seed, run_sweep, ModelName, ModelRun, SweepReport, SweepSpec};
use pragcap::issue::{partition_by_attribute, sample_context, Context};
use pragcap::oracle::{oracle_suite, OracleReport};
use pragcap::rsa::{decode, Caption, RsaConfig, DEFAULT_ENUM_CAP};
use pragcap::speaker::{
    avg_feature_speaker, remote_speaker, serve_connection, template_speaker, SpeakerBackend, TemplateSpeakerParams,
};
use pragcap::synth::{synth_world, SynthSpec};
use pragcap::world::{save_world, shapes6};
use pragcap::Error;
use serde::Serialize;

use crate::manifest::{
    read_manifest, require_file, world_or_default, EvalManifest, IssueSpec, RsaOverrides, RunManifest, SpeakerKind,
};
use crate::{CaptionArgs, DemoArgs, EvalArgs, OracleArgs, Outcome, ServeArgs, SynthArgs};

/// Environment variable bounding the oracle's caption enumeration.
pub const ENUM_CAP_VAR: &str = "ISIC_ENUM_CAP";

pub fn demo(args: &DemoArgs) -> Result<Outcome> {
    let world = shapes6();
    let models = if args.model.is_empty() {
        ModelName::ALL.to_vec()
    } else {
        args.model.clone()
    };
    let overrides = args.rsa.overrides();
    let base = template_speaker(&world, &world.lexicon, TemplateSpeakerParams::default())?;
    let issues = ["color", "size"]
        .map(|a| partition_by_attribute(&world, a))
        .into_iter()
        .collect::<pragcap::Result<Vec<_>>>()?;
    let check = ModelRun::new(ModelName::S1CH, overrides.config_for(ModelName::S1CH)?);

    let mut rows = Vec::new();
    let mut same = Vec::new();
    for (i, img) in world.images.iter().enumerate() {
        let mut checked = Vec::new();
        for (j, issue) in issues.iter().enumerate() {
            let seed = context_seed(args.seed, i, j);
            for &m in &models {
                let run = ModelRun::new(m, overrides.config_for(m)?);
                let ctx = sample_context(issue, &img.id, run.config.budget, seed)?;
                let cap = caption_with(&world, &base, TemplateSpeakerParams::default(), &ctx, &run)?;
                rows.push([img.id.clone(), issue.label().to_string(), m.to_string(), cap.text()]);
            }
            let ctx = sample_context(issue, &img.id, check.config.budget, seed)?;
            checked.push(caption_with(&world, &base, TemplateSpeakerParams::default(), &ctx, &check)?.tokens);
        }
        if checked[0] == checked[1] {
            same.push(img.id.clone());
        }
    }

    print!("{}", grid(["target", "issue", "model", "caption"], &rows));
    if same.is_empty() {
        println!("\ns1ch gives different color and size captions for every target");
        Ok(Outcome::Success)
    } else {
        println!(
            "\nFAIL: s1ch gives the same color and size caption for {}",
            same.join(", ")
        );
        Ok(Outcome::CheckFailed)
    }
}

fn grid<const N: usize>(header: [&str; N], rows: &[[String; N]]) -> String {
    let mut width = header.map(str::len);
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut s, &header);
    for r in rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        line(&mut s, &cells);
    }
    s
}

#[derive(Serialize)]
struct CaptionRecord<'a> {
    target: &'a str,
    issue: &'a str,
    model: ModelName,
    speaker: SpeakerKind,
    seed: u64,
    config: &'a RsaConfig,
    context: &'a Context,
    caption: &'a [String],
    text: String,
    score: f64,
}

fn run_manifest(args: &CaptionArgs) -> Result<RunManifest> {
    let mut m = match &args.manifest {
        Some(p) => {
            require_file(p)?;
            read_manifest::<RunManifest>(p)?
        }
        None => {
            let Some(target) = args.target.clone() else {
                bail!("--target is required without --manifest");
            };
            let Some(model) = args.model else {
                bail!("--model is required without --manifest");
            };
            RunManifest {
                world: None,
                issue: IssueSpec::default(),
                target,
                model,
                config: RsaOverrides::default(),
                seed: 0,
                speaker: SpeakerKind::default(),
                speaker_params: TemplateSpeakerParams::default(),
                endpoint: None,
                out: None,
            }
        }
    };
    if args.world.is_some() {
        m.world = args.world.clone();
    }
    let flag_issue = IssueSpec {
        attribute: args.issue_attr.clone(),
        question: args.question.clone(),
        qa: args.qa.clone(),
        file: args.issue_file.clone(),
    };
    if flag_issue != IssueSpec::default() {
        m.issue = flag_issue;
    }
    if let Some(t) = &args.target {
        m.target = t.clone();
    }
    if let Some(model) = args.model {
        m.model = model;
    }
    m.config.merge(&args.rsa.overrides());
    if let Some(s) = args.seed {
        m.seed = s;
    }
    if let Some(s) = args.speaker {
        m.speaker = s;
    }
    if args.endpoint.is_some() {
        m.endpoint = args.endpoint.clone();
    }
    if args.out.is_some() {
        m.out = args.out.clone();
    }
    m.validate()?;
    Ok(m)
}

pub fn caption(args: &CaptionArgs) -> Result<Outcome> {
    let m = run_manifest(args)?;
    let world = world_or_default(m.world.as_deref())?;
    let issue = m.issue.resolve(&world)?;
    let config = m.config.config_for(m.model)?;
    let ctx = sample_context(&issue, &m.target, config.budget, m.seed)?;
    let run = ModelRun::new(m.model, config);

    let cap: Caption = match m.speaker {
        SpeakerKind::Template => {
            let base = template_speaker(&world, &world.lexicon, m.speaker_params)?;
            caption_with(&world, &base, m.speaker_params, &ctx, &run)?
        }
        SpeakerKind::Avg => {
            let cell: BTreeSet<String> = ctx.same_cell.iter().cloned().collect();
            let base = avg_feature_speaker(&world, &world.lexicon, m.speaker_params, &cell)?;
            decode(&base, &ctx, &run.config, m.model.engine_model())?
        }
        SpeakerKind::Remote => {
            let endpoint = m.endpoint.as_deref().expect("validated");
            let base = remote_speaker(endpoint).with_context(|| format!("connecting to speaker at {endpoint}"))?;
            decode(&base, &ctx, &run.config, m.model.engine_model())?
        }
    };

    println!("{}", cap.text());
    if let Some(out) = &m.out {
        let record = CaptionRecord {
            target: &m.target,
            issue: issue.label(),
            model: m.model,
            speaker: m.speaker,
            seed: m.seed,
            config: &run.config,
            context: &ctx,
            caption: &cap.tokens,
            text: cap.text(),
            score: cap.score,
        };
        write_json(out, &record)?;
    }
    Ok(Outcome::Success)
}

fn eval_manifest(args: &EvalArgs) -> Result<EvalManifest> {
    let mut m = match &args.manifest {
        Some(p) => {
            require_file(p)?;
            read_manifest::<EvalManifest>(p)?
        }
        None => {
            let Some(out) = args.out.clone() else {
                bail!("--out is required without --manifest");
            };
            EvalManifest {
                world: None,
                classifier: None,
                issues: None,
                models: ModelName::ALL.to_vec(),
                config: RsaOverrides::default(),
                speaker_params: TemplateSpeakerParams::default(),
                seed: 0,
                out,
            }
        }
    };
    if args.world.is_some() {
        m.world = args.world.clone();
    }
    if args.classifier.is_some() {
        m.classifier = args.classifier.clone();
    }
    if !args.issue_attr.is_empty() {
        m.issues = Some(args.issue_attr.clone());
    }
    if !args.model.is_empty() {
        m.models = args.model.clone();
    }
    m.config.merge(&args.rsa.overrides());
    if let Some(s) = args.seed {
        m.seed = s;
    }
    if let Some(o) = &args.out {
        m.out = o.clone();
    }
    m.validate()?;
    Ok(m)
}

pub fn eval(args: &EvalArgs) -> Result<Outcome> {
    let m = eval_manifest(args)?;
    let world = world_or_default(m.world.as_deref())?;
    let classifier = match &m.classifier {
        Some(p) => ClassifierConfig::load(p).with_context(|| format!("loading classifier {}", p.display()))?,
        None => shapes6_classifier(),
    };
    let spec = SweepSpec {
        runs: m.runs()?,
        issues: m
            .issues
            .clone()
            .unwrap_or_else(|| world.schema.names().map(str::to_string).collect()),
        speaker: m.speaker_params,
        seed: m.seed,
    };
    let report = run_sweep(&world, &classifier, &spec)?;

    fs::create_dir_all(&m.out).with_context(|| format!("creating {}", m.out.display()))?;
    write_json(&m.out.join("report.json"), &report)?;
    let (coverage, alignment) = tables(&report);
    write_text(&m.out.join("coverage.txt"), &coverage)?;
    write_text(&m.out.join("alignment.txt"), &alignment)?;
    print!("{coverage}\n{alignment}");
    let failures: usize = report.summaries.iter().map(|s| s.failures).sum();
    if failures > 0 {
        eprintln!("{failures} captions failed; see report.json");
    }
    Ok(Outcome::Success)
}

/// Coverage and alignment tables, one row per model.
pub fn tables(report: &SweepReport) -> (String, String) {
    let cov: Vec<Prf> = report.summaries.iter().map(|s| s.coverage.overall()).collect();
    let ali: Vec<Prf> = report.summaries.iter().map(|s| s.alignment.overall()).collect();
    let labels = report.summaries.iter().map(|s| s.label.as_str());
    let coverage = render_table("Coverage", labels.clone().zip(&cov));
    let mut alignment = render_table("Alignment", labels.zip(&ali));
    alignment.push('\n');
    let width = report.summaries.iter().map(|s| s.label.len()).max().unwrap_or(0).max(5);
    let _ = writeln!(
        alignment,
        "{:<width$}  {:>9}  {:>6}  {:>8}",
        "model", "off-issue", "leaks", "failures"
    );
    for s in &report.summaries {
        let _ = writeln!(
            alignment,
            "{:<width$}  {:>9.3}  {:>6}  {:>8}",
            s.label, s.mean_off_issue, s.cellmate_leaks, s.failures
        );
    }
    (coverage, alignment)
}

/// The enumeration cap from the environment, or the default.
pub fn enum_cap() -> Result<u128> {
    match std::env::var(ENUM_CAP_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{ENUM_CAP_VAR}={v:?} is not a non-negative integer")),
        Err(std::env::VarError::NotPresent) => Ok(DEFAULT_ENUM_CAP),
        Err(e) => bail!("{ENUM_CAP_VAR}: {e}"),
    }
}

pub fn oracle_check(args: &OracleArgs) -> Result<Outcome> {
    let world = world_or_default(args.world.as_deref())?;
    let lexicon = world.lexicon.restrict(&args.tokens)?;
    let speaker = template_speaker(&world, &lexicon, TemplateSpeakerParams::default())?;
    let mut config = RsaConfig::default();
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    if let Some(b) = args.beta {
        config.beta = b;
    }
    config.validate()?;
    let cap = enum_cap()?;

    let mut reports: Vec<(String, OracleReport)> = Vec::new();
    for attr in &args.issue_attr {
        let issue = partition_by_attribute(&world, attr)?;
        let report = match oracle_suite(&speaker, &issue, &config, args.max_len, cap) {
            Err(e @ Error::EnumerationTooLarge { .. }) => {
                return Err(e).context(format!("raise {ENUM_CAP_VAR} or lower --max-len"))
            }
            r => r?,
        };
        reports.push((attr.clone(), report));
    }

    let mut ok = true;
    for (attr, report) in &reports {
        println!("issue {attr}");
        for c in &report.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            if c.detail.is_empty() {
                println!("  {mark}  {}", c.name);
            } else {
                println!("  {mark}  {} ({})", c.name, c.detail);
            }
        }
        for n in &report.notes {
            println!("  note  {n}");
        }
        ok &= report.passed();
    }
    if let Some(out) = &args.out {
        let by_issue: std::collections::BTreeMap<_, _> = reports.iter().map(|(a, r)| (a, r)).collect();
        write_json(out, &by_issue)?;
    }
    Ok(if ok { Outcome::Success } else { Outcome::CheckFailed })
}

pub fn serve(args: &ServeArgs) -> Result<Outcome> {
    let world = world_or_default(args.world.as_deref())?;
    let speaker: Arc<dyn SpeakerBackend> = Arc::new(template_speaker(
        &world,
        &world.lexicon,
        TemplateSpeakerParams::default(),
    )?);
    let listener = TcpListener::bind(&args.addr).with_context(|| format!("binding {}", args.addr))?;
    eprintln!("serving {} images on {}", world.images.len(), listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                eprintln!("accept failed: {e}");
                continue;
            }
        };
        let speaker = Arc::clone(&speaker);
        thread::spawn(move || {
            if let Err(e) = serve_connection(stream, speaker.as_ref()) {
                eprintln!("connection closed: {e}");
            }
        });
    }
    Ok(Outcome::Success)
}

pub fn synth(args: &SynthArgs) -> Result<Outcome> {
    let spec = SynthSpec {
        images: args.images,
        seed: args.seed,
        ..SynthSpec::default()
    };
    let (world, classifier) = synth_world(&spec)?;
    save_world(&world, &args.out)?;
    write_json(&args.classifier_out, &classifier)?;
    println!(
        "wrote {} images to {} and the classifier to {}",
        world.images.len(),
        args.out.display(),
        args.classifier_out.display()
    );
    Ok(Outcome::Success)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
