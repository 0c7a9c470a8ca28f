//! Command implementations behind the `nes` binary.
//!
//! Every command writes to a caller-supplied sink so the same code path is
//! exercised by the binary and by tests.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datastore::{read_captions, Datastore, DEFAULT_K};
use crate::embedder::{Embedding, FileEmbeddings, SourceSpec};
use crate::entities::{EntitySet, EntityVocabulary};
use crate::error::{Error, Result};
use crate::fusion::{AttentionWeights, FusionStrategy};
use crate::metrics::{evaluate, retrieval_counts, EvalInstance};
use crate::pipeline::{GenerationContext, Mode, Pipeline, PipelineConfig, Sources};
use crate::suppression::{Selection, DEFAULT_PROPORTION};

#[derive(Debug, Parser)]
#[command(
    name = "nes",
    version,
    about = "Retrieval-augmented captioning with negative entity suppression"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and persist a datastore from captions and their embeddings.
    Ingest(IngestArgs),
    /// Exact top-k retrieval against a persisted datastore.
    Retrieve(RetrieveArgs),
    /// Run the pipeline over a JSON-lines batch.
    Run(RunArgs),
    /// Evaluation reports.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// `id<TAB>caption` lines.
    #[arg(long)]
    pub captions: PathBuf,
    /// Embedding file (binary or JSON lines) keyed by caption id.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("query").required(true).args(["query_key", "query_vec"])))]
pub struct RetrieveArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Use the stored embedding of this record as the query.
    #[arg(long)]
    pub query_key: Option<String>,
    /// File holding a JSON array of floats.
    #[arg(long)]
    pub query_vec: Option<PathBuf>,
    #[arg(short = 'k', long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    ClipscoreForward,
    ClipscoreReverse,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    FixedThreshold,
    TopK,
    TopKMinusOne,
    Proportional,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// JSON lines: `{"id", "caption"?, "image_key"?, "synthetic_key"?, "references"?}`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one suppression report per instance (JSON lines).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flags that override values from the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub no_sir: bool,
    #[arg(long)]
    pub no_sif: bool,
    #[arg(long)]
    pub no_nef: bool,
    #[arg(long = "no-as")]
    pub no_as: bool,
    #[arg(long)]
    pub tau_sim: Option<f64>,
    #[arg(long)]
    pub tau_quality: Option<f64>,
    #[arg(long)]
    pub tau_neg: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub fusion_strategy: Option<FusionArg>,
    #[arg(long, value_enum)]
    pub suppression_strategy: Option<SelectionArg>,
    #[arg(long)]
    pub proportion: Option<f64>,
    #[arg(long)]
    pub top_m: Option<usize>,
    #[arg(short = 'k', long)]
    pub k: Option<usize>,
    /// Seed for generated attention weights when the config names no file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// CHAIR, recall and hallucination attribution over generated captions.
    Chair(ChairArgs),
    /// ACC, RC, AHC and DHC of retrieved entities.
    Retrieval(RetrievalArgs),
}

#[derive(Debug, Args)]
pub struct ChairArgs {
    /// JSON lines with `generated` (or `caption`), `references` and optional `retrieved`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    /// JSON lines with `retrieved` and `ground_truth` arrays.
    #[arg(long)]
    pub instances: PathBuf,
    /// When given, array items are captions and entities are extracted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, requires = "vocab")]
    pub synonyms: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

fn default_prefix_len() -> usize {
    4
}

/// Contents of the `run --config` file: the pipeline settings plus the
/// resources they operate on. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub vocab: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonyms: Option<PathBuf>,
    /// Image and synthetic-image embeddings, looked up by input keys.
    pub embeddings: PathBuf,
    /// Encoder for captions and entity prompts.
    pub source: SourceSpec,
    /// Encoder for text retrieval queries; defaults to `source`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_source: Option<SourceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default = "default_prefix_len")]
    pub prefix_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.vocab);
        resolve(&mut cfg.embeddings);
        if let Some(p) = cfg.synonyms.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.weights.as_mut() {
            resolve(p);
        }
        for spec in std::iter::once(&mut cfg.source).chain(cfg.retrieval_source.as_mut()) {
            if let SourceSpec::File { path } = spec {
                resolve(path);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let p = &mut cfg.pipeline;
        p.enable_sir &= !self.no_sir;
        p.enable_sif &= !self.no_sif;
        p.enable_nef &= !self.no_nef;
        p.enable_as &= !self.no_as;
        if let Some(v) = self.tau_sim {
            p.tau_sim = v;
        }
        if let Some(v) = self.tau_quality {
            p.fusion.tau_quality = v;
        }
        if let Some(v) = self.lambda {
            p.suppression.lambda = v;
        }
        if let Some(v) = self.top_m {
            p.top_m = v;
        }
        if let Some(v) = self.k {
            p.retrieval_k = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }

        p.fusion.strategy = match (self.fusion_strategy, self.alpha, p.fusion.strategy) {
            (Some(FusionArg::ClipscoreForward), None, _) => FusionStrategy::ClipscoreForward,
            (Some(FusionArg::ClipscoreReverse), None, _) => FusionStrategy::ClipscoreReverse,
            (Some(FusionArg::Fixed), Some(alpha), _) | (None, Some(alpha), FusionStrategy::Fixed { .. }) => {
                FusionStrategy::Fixed { alpha }
            }
            (Some(FusionArg::Fixed), None, FusionStrategy::Fixed { alpha }) => FusionStrategy::Fixed { alpha },
            (Some(FusionArg::Fixed), None, _) => return Err(Error::config("--fusion-strategy fixed needs --alpha")),
            (_, Some(_), _) => return Err(Error::config("--alpha only applies to the fixed fusion strategy")),
            (None, None, current) => current,
        };

        let current = p.suppression.selection;
        p.suppression.selection = match self.suppression_strategy {
            Some(SelectionArg::TopK) => Selection::TopK,
            Some(SelectionArg::TopKMinusOne) => Selection::TopKMinusOne,
            Some(SelectionArg::Proportional) => Selection::Proportional {
                proportion: self.proportion.unwrap_or(match current {
                    Selection::Proportional { proportion } => proportion,
                    _ => DEFAULT_PROPORTION,
                }),
            },
            Some(SelectionArg::FixedThreshold) => match (self.tau_neg, current) {
                (Some(tau_neg), _) | (None, Selection::FixedThreshold { tau_neg }) => {
                    Selection::FixedThreshold { tau_neg }
                }
                _ => return Err(Error::config("--suppression-strategy fixed-threshold needs --tau-neg")),
            },
            None => match (current, self.tau_neg, self.proportion) {
                (Selection::FixedThreshold { .. }, Some(tau_neg), _) => Selection::FixedThreshold { tau_neg },
                (Selection::Proportional { .. }, _, Some(proportion)) => Selection::Proportional { proportion },
                (s, None, None) => s,
                _ => {
                    return Err(Error::config(
                        "--tau-neg / --proportion do not match the configured suppression strategy",
                    ))
                }
            },
        };
        if self.tau_neg.is_some() && !matches!(p.suppression.selection, Selection::FixedThreshold { .. }) {
            return Err(Error::config("--tau-neg only applies to the fixed-threshold strategy"));
        }
        if self.proportion.is_some() && !matches!(p.suppression.selection, Selection::Proportional { .. }) {
            return Err(Error::config("--proportion only applies to the proportional strategy"));
        }
        p.validate()
    }
}

/// One line of `run` input.
#[derive(Debug, Clone, Deserialize)]
pub struct InputLine {
    pub id: String,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub image_key: Option<String>,
    #[serde(default)]
    pub synthetic_key: Option<String>,
    #[serde(default)]
    pub references: Option<Vec<String>>,
}

/// One line of `run` output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputLine {
    pub id: String,
    /// Stand-in decoder output.
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
    pub context: GenerationContext,
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => ingest(&args, out),
        Command::Retrieve(args) => retrieve(&args, out),
        Command::Run(args) => run(&args, out),
        Command::Eval(EvalCommand::Chair(args)) => eval_chair(&args, out),
        Command::Eval(EvalCommand::Retrieval(args)) => eval_retrieval(&args, out),
    }
}

pub fn ingest(args: &IngestArgs, out: &mut dyn Write) -> Result<()> {
    let captions = read_captions(BufReader::new(File::open(&args.captions)?))?;
    let embeddings = FileEmbeddings::load(&args.embeddings)?;
    let store = Datastore::from_parts(&captions, &embeddings)?;
    store.save(&args.out)?;
    writeln!(
        out,
        "ingested {} records (dim {}) into {}",
        store.len(),
        store.dim(),
        args.out.display()
    )?;
    Ok(())
}

pub fn retrieve(args: &RetrieveArgs, out: &mut dyn Write) -> Result<()> {
    let store = Datastore::load(&args.store)?;
    let query = match (&args.query_key, &args.query_vec) {
        (Some(key), _) => store
            .get(key)
            .ok_or_else(|| Error::UnknownKey(key.clone()))?
            .embedding
            .clone(),
        (None, Some(path)) => {
            let values: Vec<f32> = serde_json::from_str(&fs::read_to_string(path)?)?;
            Embedding::normalized(values)?
        }
        (None, None) => return Err(Error::config("one of --query-key or --query-vec is required")),
    };
    let result = store.retrieve(&query, args.k)?;
    if args.json {
        serde_json::to_writer(&mut *out, &result)?;
        writeln!(out)?;
    } else {
        for (rank, hit) in result.hits.iter().enumerate() {
            writeln!(out, "{}\t{}\t{:.6}\t{}", rank + 1, hit.id, hit.score, hit.caption)?;
        }
    }
    Ok(())
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        items.push(item);
    }
    Ok(items)
}

pub fn run(args: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(mode) = args.mode {
        cfg.pipeline.mode = match mode {
            ModeArg::Training => Mode::Training,
            ModeArg::Inference => Mode::Inference,
        };
    }
    args.overrides.apply(&mut cfg)?;

    let store = Datastore::load(&args.store)?;
    let vocab = EntityVocabulary::load(&cfg.vocab, cfg.synonyms.as_deref())?;
    let table = FileEmbeddings::load(&cfg.embeddings)?;
    let feature = cfg.source.build()?;
    let retrieval = cfg.retrieval_source.as_ref().map(SourceSpec::build).transpose()?;
    let weights = match &cfg.weights {
        Some(path) => AttentionWeights::load(path)?,
        None => AttentionWeights::xavier(store.dim(), cfg.prefix_len, cfg.seed)?,
    };
    let sources = Sources {
        retrieval: retrieval.as_deref().unwrap_or(feature.as_ref()),
        feature: feature.as_ref(),
    };
    let pipeline = Pipeline::new(&store, &vocab, sources, &weights, cfg.pipeline.clone())?;

    let lookup = |key: &Option<String>, field: &str, id: &str| -> Result<&Embedding> {
        let key = key
            .as_deref()
            .ok_or_else(|| Error::format(format!("instance {id:?} has no {field}")))?;
        table.get(key).ok_or_else(|| Error::UnknownKey(key.to_string()))
    };

    let inputs: Vec<InputLine> = read_json_lines(&args.input)?;
    let mut w = BufWriter::new(File::create(&args.out)?);
    let mut report = args.report.as_ref().map(File::create).transpose()?.map(BufWriter::new);
    let (mut written, mut skipped) = (0usize, 0usize);
    for line in inputs {
        let result = match cfg.pipeline.mode {
            Mode::Training => {
                let caption = line
                    .caption
                    .as_deref()
                    .ok_or_else(|| Error::format(format!("instance {:?} has no caption", line.id)))?;
                let synthetic = lookup(&line.synthetic_key, "synthetic_key", &line.id)?;
                pipeline.run_training_instance(caption, synthetic)
            }
            Mode::Inference => pipeline.run_inference_instance(lookup(&line.image_key, "image_key", &line.id)?),
        };
        let context = match result {
            Ok(ctx) => ctx,
            Err(e @ Error::QualityRejected { .. }) => {
                log::warn!("skipping {}: {e}", line.id);
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        context.check()?;
        if let Some(r) = report.as_mut() {
            #[derive(Serialize)]
            struct ReportLine<'a> {
                id: &'a str,
                #[serde(flatten)]
                report: &'a crate::suppression::SuppressionReport,
            }
            serde_json::to_writer(
                &mut *r,
                &ReportLine {
                    id: &line.id,
                    report: &context.suppression_report,
                },
            )?;
            r.write_all(b"\n")?;
        }
        let record = OutputLine {
            caption: pipeline.decode(&context)?,
            id: line.id,
            references: line.references,
            context,
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
        written += 1;
    }
    w.flush()?;
    if let Some(mut r) = report {
        r.flush()?;
    }
    writeln!(
        out,
        "wrote {written} contexts to {} ({skipped} skipped)",
        args.out.display()
    )?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TextOrTerms {
    Text(String),
    Terms(Vec<String>),
}

#[derive(Debug, Deserialize)]
struct PredLine {
    #[serde(default)]
    generated: Option<TextOrTerms>,
    #[serde(default)]
    caption: Option<String>,
    references: Option<Vec<String>>,
    #[serde(default)]
    retrieved: Option<Vec<String>>,
    #[serde(default)]
    context: Option<GenerationContext>,
}

impl PredLine {
    fn into_instance(self, vocab: &EntityVocabulary, lineno: usize) -> Result<EvalInstance> {
        let generated = match (self.generated, self.caption) {
            (Some(TextOrTerms::Text(text)), _) | (None, Some(text)) => vocab.extract(&text),
            (Some(TextOrTerms::Terms(terms)), _) => vocab.canonicalize_all(terms.iter().map(String::as_str)),
            (None, None) => return Err(Error::format(format!("line {lineno}: no generated caption"))),
        };
        let references = self
            .references
            .ok_or_else(|| Error::format(format!("line {lineno}: no references")))?;
        let retrieved = match (self.retrieved, self.context) {
            (Some(captions), _) => vocab.extract_all(captions.iter().map(String::as_str)),
            (None, Some(ctx)) => vocab.extract_all(ctx.retrieval.captions()),
            (None, None) => EntitySet::new(),
        };
        Ok(EvalInstance {
            generated,
            ground_truth: vocab.extract_all(references.iter().map(String::as_str)),
            retrieved,
        })
    }
}

pub fn eval_chair(args: &ChairArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = EntityVocabulary::load(&args.vocab, args.synonyms.as_deref())?;
    let instances = read_json_lines::<PredLine>(&args.pred)?
        .into_iter()
        .enumerate()
        .map(|(i, line)| line.into_instance(&vocab, i + 1))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&instances)?;
    report.check()?;
    if args.json {
        serde_json::to_writer(&mut *out, &report)?;
        writeln!(out)?;
    } else {
        writeln!(out, "instances           {}", instances.len())?;
        writeln!(out, "CHAIR-S             {:.4}", report.chair_s)?;
        writeln!(out, "CHAIR-I             {:.4}", report.chair_i)?;
        writeln!(out, "recall              {:.4}", report.recall)?;
        writeln!(out, "hallucinations      {}", report.total_hallucinations)?;
        writeln!(out, "  retrieval-sourced {}", report.retrieval_sourced)?;
        writeln!(out, "  model-sourced     {}", report.model_sourced)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RetrievalLine {
    retrieved: Vec<String>,
    ground_truth: Vec<String>,
}

pub fn eval_retrieval(args: &RetrievalArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = args
        .vocab
        .as_ref()
        .map(|v| EntityVocabulary::load(v, args.synonyms.as_deref()))
        .transpose()?;
    let to_set = |items: &[String]| -> EntitySet {
        match &vocab {
            Some(v) => v.extract_all(items.iter().map(String::as_str)),
            None => items.iter().map(|s| s.trim().to_lowercase()).collect(),
        }
    };
    let pairs: Vec<(EntitySet, EntitySet)> = read_json_lines::<RetrievalLine>(&args.instances)?
        .iter()
        .map(|l| (to_set(&l.retrieved), to_set(&l.ground_truth)))
        .collect();
    let counts = retrieval_counts(&pairs)?;
    let diag = counts.diagnostics();
    if args.json {
        serde_json::to_writer(&mut *out, &diag)?;
        writeln!(out)?;
    } else {
        writeln!(out, "ACC {:.4}  ({})", diag.acc, counts.acc())?;
        writeln!(out, "RC  {:.4}  ({})", diag.rc, counts.rc())?;
        writeln!(out, "AHC {:.4}  ({})", diag.ahc, counts.ahc())?;
        writeln!(out, "DHC {}", diag.dhc)?;
    }
    Ok(())
}

/// Entry point used by the binary. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
