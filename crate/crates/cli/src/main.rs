// SPDX-License-Identifier: MIT OR Apache-2.0

//! `erasure`: residual-stream erasure experiments from the command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or model error, 4 non-finite
//! activations.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use erasure::corpus::{PromptFixture, ReferenceLogits, TokenCorpus, Vocabulary};
use erasure::experiments::{self, AdversarialOptions, Sampling};
use erasure::model::{ComponentId, Model, ModelConfig};
use erasure::report::{OutputFormat, RunReport, Table};
use erasure::{synthetic, Error};
use serde_json::json;

use config::Settings;

#[derive(Parser)]
#[command(name = "erasure", version, about = "Residual-stream erasure analysis for GPT-2-style transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantile trace of a writer's projection ratio across residual checkpoints
    TraceWriter(Invocation),
    /// Projection of every later component onto a target; flags erasers
    ScanErasers(Invocation),
    /// Eraser projections and residual trace with V-composition removed
    PatchVcomp(Invocation),
    /// Writer DLA against erasure DLA, with a linear fit
    DlaCorrelate(Invocation),
    /// Head-input patching on the adversarial prompts
    Adversarial(Invocation),
    /// Compare a model against exported reference logits
    CheckReference(Invocation),
    /// Write a synthetic model, corpus and vocabulary
    Synth(SynthArgs),
}

#[derive(Args)]
struct Invocation {
    /// JSON config file mirroring the flags; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Three layers with one head erasing another
    Constructed,
    /// Random weights
    Random,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "constructed")]
    kind: SynthKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Documents in the generated corpus
    #[arg(long, default_value_t = 40)]
    docs: usize,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidComponent(_) | Error::Intervention(_) => Failure::Usage(msg),
            Error::NonFinite(_) | Error::EmptySoftmaxRow(_) => Failure::Numeric(msg),
            _ => Failure::Data(msg),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn required<T>(v: Option<T>, flag: &str) -> Outcome<T> {
    v.ok_or_else(|| Failure::Usage(format!("--{flag} is required")))
}

fn component(s: &str, model: &Model) -> Outcome<ComponentId> {
    let c: ComponentId = s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    c.validate(&model.config)?;
    Ok(c)
}

fn components(list: &[String], model: &Model) -> Outcome<Vec<ComponentId>> {
    list.iter().map(|s| component(s, model)).collect()
}

struct Context {
    settings: Settings,
    model: Model,
}

impl Context {
    fn open(inv: Invocation) -> Outcome<Self> {
        let base = match &inv.config {
            Some(path) => Settings::load(path).map_err(Failure::Usage)?,
            None => Settings::default(),
        };
        let settings = inv.settings.over(base);
        if settings.out.is_none() && matches!(settings.format, Some(OutputFormat::Csv | OutputFormat::Both)) {
            return Err(Failure::Usage("--format csv and both need --out".into()));
        }
        let model = Model::load(required(settings.model.as_deref(), "model")?)?;
        Ok(Self { settings, model })
    }

    fn corpus(&self) -> Outcome<TokenCorpus> {
        let path = required(self.settings.corpus.as_deref(), "corpus")?;
        Ok(TokenCorpus::load(path, Some(self.model.config.d_vocab))?)
    }

    fn sampling(&self) -> Sampling {
        let d = Sampling::default();
        Sampling {
            n: self.settings.n.unwrap_or(d.n),
            len: self.settings.len.unwrap_or(d.len),
            seed: self.settings.seed.unwrap_or(d.seed),
            include_pos0: self.settings.include_pos0.unwrap_or(d.include_pos0),
        }
    }

    fn threshold(&self) -> f64 {
        self.settings.threshold.unwrap_or(erasure::analysis::DEFAULT_ERASER_THRESHOLD)
    }

    fn named(&self, value: &Option<String>, flag: &str) -> Outcome<ComponentId> {
        component(required(value.as_deref(), flag)?, &self.model)
    }

    fn erasers(&self) -> Outcome<Vec<ComponentId>> {
        components(required(self.settings.erasers.as_deref(), "erasers")?, &self.model)
    }

    fn emit(&self, mut report: RunReport) -> Outcome<()> {
        if let Some(path) = &self.settings.model {
            report.config["model_path"] = json!(path);
        }
        if let Some(path) = &self.settings.corpus {
            report.config["corpus_path"] = json!(path);
        }
        report.config["settings"] = json!(self.settings.for_report());
        match &self.settings.out {
            Some(dir) => {
                for path in report.write(dir, self.settings.format.unwrap_or_default())? {
                    eprintln!("wrote {}", path.display());
                }
            }
            None => print!("{}", report.to_json()),
        }
        Ok(())
    }
}

fn trace_writer(ctx: &Context) -> Outcome<RunReport> {
    let writer = ctx.named(&ctx.settings.writer, "writer")?;
    let corpus = ctx.corpus()?;
    let sampling = ctx.sampling();
    let patch = if ctx.settings.patch_vcomp.unwrap_or(false) {
        Some(match &ctx.settings.erasers {
            Some(list) => components(list, &ctx.model)?,
            None => {
                let prompts = sampling.prompts(&ctx.model, &corpus)?;
                let scan = experiments::scan(&ctx.model, &prompts, writer, None, ctx.threshold(), sampling.include_pos0)?;
                scan.erasers
                    .into_iter()
                    .filter(|c| matches!(c, ComponentId::Head { .. }))
                    .collect()
            }
        })
    } else {
        None
    };
    let mut report = experiments::trace_writer(&ctx.model, &corpus, writer, patch.as_deref(), &sampling)?;
    if patch.is_some() && ctx.settings.erasers.is_none() {
        report
            .notes
            .push(format!("erasers detected with threshold {}", ctx.threshold()));
    }
    Ok(report)
}

fn scan_erasers(ctx: &Context) -> Outcome<RunReport> {
    let target = ctx.named(&ctx.settings.target.clone().or(ctx.settings.writer.clone()), "target")?;
    Ok(experiments::scan_erasers(
        &ctx.model,
        &ctx.corpus()?,
        target,
        ctx.settings.layers.as_deref(),
        ctx.threshold(),
        &ctx.sampling(),
    )?)
}

fn patch_vcomp(ctx: &Context) -> Outcome<RunReport> {
    let writer = ctx.named(&ctx.settings.writer, "writer")?;
    Ok(experiments::patch_vcomp(&ctx.model, &ctx.corpus()?, writer, &ctx.erasers()?, &ctx.sampling())?)
}

fn dla_correlate(ctx: &Context) -> Outcome<RunReport> {
    let writer = ctx.named(&ctx.settings.writer, "writer")?;
    Ok(experiments::dla_correlate(&ctx.model, &ctx.corpus()?, writer, &ctx.erasers()?, &ctx.sampling())?)
}

fn adversarial(ctx: &Context) -> Outcome<RunReport> {
    let target = ctx.named(&ctx.settings.target, "target")?;
    let vocab = Vocabulary::load(required(ctx.settings.vocab.as_deref(), "vocab")?)?;
    let bos = ctx.settings.bos.unwrap_or(vocab.bos_id().is_some());
    if bos && vocab.bos_id().is_none() {
        return Err(Failure::Usage("--bos needs a vocabulary with a BOS token".into()));
    }
    let fixtures = PromptFixture::all(&vocab, bos)?;
    let opts = AdversarialOptions {
        target,
        n_donors: ctx.settings.donors.unwrap_or(300),
        n_compare: ctx.settings.compare.unwrap_or(1),
        seed: ctx.settings.seed.unwrap_or(0),
    };
    let mut report = experiments::adversarial(&ctx.model, &fixtures, Some(&vocab), &ctx.corpus()?, &opts)?;
    report.config["bos"] = json!(bos);
    Ok(report)
}

/// Largest tolerated logit gap against reference fixtures.
const REFERENCE_TOLERANCE: f64 = 1e-2;

fn check_reference(ctx: &Context) -> Outcome<RunReport> {
    let path = required(ctx.settings.fixtures.as_deref(), "fixtures")?;
    let reference = ReferenceLogits::load(path)?;
    let checks = reference.check(&ctx.model)?;
    let mut report = RunReport::new(
        "check-reference",
        json!({"fixtures_path": path, "tolerance": REFERENCE_TOLERANCE}),
        0,
        &ctx.model,
    );
    let mut table = Table::new(&["fixture", "prompt", "max_abs_diff", "top2_match", "pass"]);
    let mut failed = 0;
    for (i, (f, c)) in reference.fixtures.iter().zip(&checks).enumerate() {
        let pass = c.max_abs_diff <= REFERENCE_TOLERANCE && c.top2_match;
        failed += usize::from(!pass);
        table.push(vec![json!(i), json!(f.prompt), json!(c.max_abs_diff), json!(c.top2_match), json!(pass)]);
    }
    report.tables.insert("reference".into(), table);
    report.notes.push(format!("{} of {} fixtures pass", checks.len() - failed, checks.len()));
    ctx.emit(report.clone())?;
    if failed > 0 {
        return Err(Failure::Data(format!("{failed} reference fixtures out of tolerance")));
    }
    Ok(report)
}

fn synth(args: &SynthArgs) -> Outcome<()> {
    let io = |p: &Path, e: std::io::Error| Failure::Data(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(&args.out).map_err(|e| io(&args.out, e))?;
    let vocab = Vocabulary::byte_level(vec![])?.with_bos("<|endoftext|>")?;
    let d_vocab = vocab.len();
    let model = match args.kind {
        SynthKind::Constructed => synthetic::constructed_erasure(d_vocab, 256, args.seed)?.model,
        SynthKind::Random => Model::random(
            ModelConfig::tiny(args.layers, args.d_model, args.heads, d_vocab, 256),
            args.seed,
        )?,
    };
    let mut corpus = synthetic::random_corpus(d_vocab, args.docs, 64..=256, args.seed)?;
    corpus.metadata = Some(json!({"source": "synthetic", "seed": args.seed}));
    let model_path = args.out.join("model.safetensors");
    model.save(&model_path)?;
    corpus.write(args.out.join("corpus.jsonl"))?;
    vocab.save(args.out.join("vocab.json"))?;
    eprintln!("wrote {} ({} layers)", model_path.display(), model.config.n_layers);
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    let (inv, f): (Invocation, fn(&Context) -> Outcome<RunReport>) = match cli.command {
        Command::Synth(args) => return synth(&args),
        Command::CheckReference(inv) => {
            return check_reference(&Context::open(inv)?).map(|_| ());
        }
        Command::TraceWriter(inv) => (inv, trace_writer),
        Command::ScanErasers(inv) => (inv, scan_erasers),
        Command::PatchVcomp(inv) => (inv, patch_vcomp),
        Command::DlaCorrelate(inv) => (inv, dla_correlate),
        Command::Adversarial(inv) => (inv, adversarial),
    };
    let ctx = Context::open(inv)?;
    let report = f(&ctx)?;
    ctx.emit(report)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (code, kind, msg) = match failure {
                Failure::Usage(m) => (2, "usage", m),
                Failure::Data(m) => (3, "data", m),
                Failure::Numeric(m) => (4, "numerical", m),
            };
            eprintln!("error ({kind}): {msg}");
            ExitCode::from(code)
        }
    }
}
