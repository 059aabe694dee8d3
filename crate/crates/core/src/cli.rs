//! `vrag` command line: `index`, `retrieve`, `classify`, `evaluate`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::eval::{self, Classifier, FailMode, Mode, SweepConfig};
use crate::generator::{EchoModalGenerator, Generator, GeneratorConfig, HttpGenerator};
use crate::kb::{
    self, Dataset, DatasetInfo, DatasetManifest, EmbeddingMatrix, KbEntry, KnowledgeBase,
    DATASET_FILE, EMBEDDINGS_FILE,
};
use crate::retriever::{OrderingPolicy, Retriever, SelectionStrategy};

#[derive(Debug, Parser)]
#[command(
    name = "vrag",
    version,
    about = "Retrieval-augmented in-context image classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate embeddings + dataset manifest and write a dataset directory.
    Index(IndexArgs),
    /// Print the nearest demo images for a query embedding.
    Retrieve(RetrieveArgs),
    /// Classify one test image and print its record as JSON.
    Classify(ClassifyArgs),
    /// Run a sweep from a config file and write reports.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// JSONL file of `{"id", "embedding"}` records, or a KB directory
    /// (`embeddings.vre` + `manifest.jsonl`) matched by id.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Dataset manifest JSON: name, class_names, task, demo_entries, test_entries.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Embedding dimension to use when the source holds no vectors.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Dataset directory (its demo split is searched) or a KB directory.
    #[arg(long)]
    pub kb: PathBuf,
    /// File holding the query vector (JSON array or whitespace/comma separated).
    #[arg(
        long,
        conflicts_with = "query_id",
        required_unless_present = "query_id"
    )]
    pub query: Option<PathBuf>,
    /// Use the stored embedding of this entry (test split first, then demo).
    #[arg(long)]
    pub query_id: Option<String>,
    #[arg(short, long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, value_enum, default_value_t = StrategyArg::NearestNeighbor)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StrategyArg {
    NearestNeighbor,
    Random,
}

impl StrategyArg {
    fn resolve(self, seed: u64) -> SelectionStrategy {
        match self {
            StrategyArg::NearestNeighbor => SelectionStrategy::NearestNeighbor,
            StrategyArg::Random => SelectionStrategy::Random { seed },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum GeneratorKind {
    MockEcho,
    Live,
}

/// Flags shared by `classify` and `evaluate` for picking a generator.
#[derive(Debug, Args, Default)]
pub struct GeneratorArgs {
    #[arg(long, value_enum)]
    pub generator: Option<GeneratorKind>,
    #[arg(long)]
    pub endpoint_url: Option<String>,
    #[arg(long)]
    pub model_name: Option<String>,
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub max_parallel: Option<usize>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub query_id: String,
    #[arg(short, long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = StrategyArg::NearestNeighbor)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OrderingPolicy::SimilarLast)]
    pub ordering: OrderingPolicy,
    #[arg(long)]
    pub normalize: bool,
    /// Predict by majority vote over the retrieved labels instead of calling a generator.
    #[arg(long)]
    pub retriever_only: bool,
    /// Run config to take generator settings from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GeneratorArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub modes: Option<Vec<Mode>>,
    #[arg(long, value_delimiter = ',')]
    pub shot_counts: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub ordering: Option<OrderingPolicy>,
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub fail_mode: Option<FailMode>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub gen: GeneratorArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    #[serde(flatten)]
    pub live: GeneratorConfig,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::MockEcho,
            live: GeneratorConfig::default(),
        }
    }
}

/// Declarative sweep description, loaded from TOML. Relative paths are
/// resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    /// Defaults to 5, 10, 50 (and 100 for demo sets of at least 100 images).
    #[serde(default)]
    pub shot_counts: Option<Vec<usize>>,
    #[serde(default)]
    pub ordering: OrderingPolicy,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fail_mode: FailMode,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub generator: GeneratorSection,
}

fn default_modes() -> Vec<Mode> {
    vec![
        Mode::ZeroShot,
        Mode::VisualRag,
        Mode::ManyShotRandom,
        Mode::RetrieverOnly,
    ]
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.dataset_dir);
        rebase(&mut cfg.output_dir);
        if let Some(root) = cfg.generator.live.image_root.as_mut() {
            rebase(root);
        }
        Ok(cfg)
    }

    fn apply(&mut self, args: &EvaluateArgs) {
        if let Some(v) = &args.dataset_dir {
            self.dataset_dir = v.clone();
        }
        if let Some(v) = &args.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &args.modes {
            self.modes = v.clone();
        }
        if let Some(v) = &args.shot_counts {
            self.shot_counts = Some(v.clone());
        }
        if let Some(v) = args.ordering {
            self.ordering = v;
        }
        if let Some(v) = args.normalize {
            self.normalize = v;
        }
        if let Some(v) = args.seed {
            self.seed = v;
        }
        if let Some(v) = args.fail_mode {
            self.fail_mode = v;
        }
        if let Some(v) = args.workers {
            self.workers = Some(v);
        }
        args.gen.apply(&mut self.generator);
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset_dir.join(DATASET_FILE).is_file() {
            bail!(
                "dataset_dir {} has no {DATASET_FILE}",
                self.dataset_dir.display()
            );
        }
        if self.modes.is_empty() {
            bail!("no modes configured");
        }
        if let Some(root) = &self.generator.live.image_root {
            if !root.is_dir() {
                bail!("image_root {} does not exist", root.display());
            }
        }
        if self.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        Ok(())
    }

    fn needs_generator(&self) -> bool {
        self.modes.iter().any(|m| *m != Mode::RetrieverOnly)
    }
}

impl GeneratorArgs {
    fn apply(&self, section: &mut GeneratorSection) {
        if let Some(v) = self.generator {
            section.kind = v;
        }
        let live = &mut section.live;
        if let Some(v) = &self.endpoint_url {
            live.endpoint_url = v.clone();
        }
        if let Some(v) = &self.model_name {
            live.model_name = v.clone();
        }
        if let Some(v) = &self.api_key_env {
            live.api_key_env = v.clone();
        }
        if let Some(v) = self.max_parallel {
            live.max_parallel = v;
        }
        if let Some(v) = self.max_retries {
            live.max_retries = v;
        }
        if let Some(v) = self.timeout_secs {
            live.timeout_secs = v;
        }
        if let Some(v) = &self.image_root {
            live.image_root = Some(v.clone());
        }
    }
}

fn build_generator(section: &GeneratorSection) -> Result<Box<dyn Generator>> {
    Ok(match section.kind {
        GeneratorKind::MockEcho => Box::new(EchoModalGenerator),
        GeneratorKind::Live => Box::new(HttpGenerator::new(section.live.clone())?),
    })
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Index(a) => cmd_index(&a),
        Command::Retrieve(a) => cmd_retrieve(&a),
        Command::Classify(a) => cmd_classify(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

#[derive(Deserialize)]
struct SourceRecord {
    id: String,
    embedding: Vec<f32>,
}

struct EmbeddingSource {
    dim: Option<usize>,
    vectors: HashMap<String, Vec<f32>>,
}

fn load_source(path: &Path) -> Result<EmbeddingSource> {
    if path.is_dir() {
        let (matrix, entries) =
            kb::read_kb(path).with_context(|| format!("loading KB {}", path.display()))?;
        let vectors = entries
            .iter()
            .map(|e| (e.id.clone(), matrix.row(e.row).to_vec()))
            .collect();
        return Ok(EmbeddingSource {
            dim: Some(matrix.dim()),
            vectors,
        });
    }
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut dim = None;
    let mut vectors = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SourceRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: bad record", path.display(), i + 1))?;
        match dim {
            None => dim = Some(rec.embedding.len()),
            Some(d) if d != rec.embedding.len() => bail!(
                "{}:{}: embedding for {} has {} values, expected {d}",
                path.display(),
                i + 1,
                rec.id,
                rec.embedding.len()
            ),
            _ => {}
        }
        if vectors.insert(rec.id.clone(), rec.embedding).is_some() {
            bail!("{}:{}: duplicate id {}", path.display(), i + 1, rec.id);
        }
    }
    Ok(EmbeddingSource { dim, vectors })
}

fn build_split(entries: &[KbEntry], source: &EmbeddingSource, dim: usize) -> Result<KnowledgeBase> {
    let mut rows = Vec::with_capacity(entries.len());
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        match source.vectors.get(&e.id) {
            Some(v) => rows.push(v.as_slice()),
            None => missing.push(e.id.as_str()),
        }
        out.push(KbEntry {
            row: i,
            ..e.clone()
        });
    }
    if !missing.is_empty() {
        bail!(
            "no embedding for {} entries: {}",
            missing.len(),
            missing.join(", ")
        );
    }
    let matrix = EmbeddingMatrix::from_rows(dim, &rows)?;
    Ok(KnowledgeBase::new(matrix, out)?)
}

pub fn cmd_index(args: &IndexArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&args.manifest)
        .with_context(|| format!("reading {}", args.manifest.display()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.manifest.display()))?;
    let violations = kb::validate_manifest(&manifest);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("invalid: {v}");
        }
        eprintln!("{} manifest violations", violations.len());
        return Ok(ExitCode::FAILURE);
    }
    let source = load_source(&args.embeddings)?;
    let dim = match (source.dim, args.dim) {
        (Some(d), Some(flag)) if d != flag => {
            bail!("source dimension {d} differs from --dim {flag}")
        }
        (Some(d), _) | (None, Some(d)) => d,
        (None, None) => bail!("source holds no vectors; pass --dim to write an empty KB"),
    };
    let dataset = Dataset {
        info: DatasetInfo {
            name: manifest.name.clone(),
            class_names: manifest.class_names.clone(),
            task: manifest.task,
        },
        demo: build_split(&manifest.demo_entries, &source, dim).context("demo split")?,
        test: build_split(&manifest.test_entries, &source, dim).context("test split")?,
    };
    dataset.save(&args.out)?;
    println!(
        "N={} D={} classes={} test={}",
        dataset.demo.len(),
        dim,
        dataset.info.class_names.len(),
        dataset.test.len()
    );
    if dataset.demo.is_empty() {
        eprintln!("warning: knowledge base is empty (N=0)");
    }
    Ok(ExitCode::SUCCESS)
}

/// Loads the demo KB of a dataset directory, or a bare KB directory, plus
/// (for datasets) the test KB.
fn load_kb_dir(path: &Path) -> Result<(KnowledgeBase, Option<KnowledgeBase>)> {
    if path.join(DATASET_FILE).is_file() {
        let ds = Dataset::load(path)?;
        Ok((ds.demo, Some(ds.test)))
    } else if path.join(EMBEDDINGS_FILE).is_file() {
        Ok((KnowledgeBase::load(path)?, None))
    } else {
        bail!("{} is neither a dataset nor a KB directory", path.display())
    }
}

pub fn parse_vector(text: &str) -> Result<Vec<f32>> {
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    trimmed
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f32>()
                .with_context(|| format!("bad number {s:?}"))
        })
        .collect()
}

pub fn cmd_retrieve(args: &RetrieveArgs) -> Result<ExitCode> {
    if args.k == 0 {
        bail!("k must be at least 1");
    }
    let (demo, test) = load_kb_dir(&args.kb)?;
    let (key, query) = match (&args.query, &args.query_id) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            (p.display().to_string(), parse_vector(&text)?)
        }
        (None, Some(id)) => {
            let found = test
                .as_ref()
                .and_then(|t| t.find(id).map(|e| t.embedding(e)))
                .or_else(|| demo.find(id).map(|e| demo.embedding(e)))
                .ok_or_else(|| anyhow!("no entry with id {id}"))?;
            (id.clone(), found.to_vec())
        }
        (None, None) => bail!("pass --query or --query-id"),
    };
    if query.iter().any(|v| !v.is_finite()) {
        bail!("query embedding has non-finite values");
    }
    let retriever = Retriever::new(&demo, args.normalize)?;
    let demos = retriever.retrieve(args.strategy.resolve(args.seed), &key, &query, args.k)?;
    for d in demos {
        let dist = d
            .distance
            .map(|x| x.to_string())
            .unwrap_or_else(|| "-".into());
        println!("{}\t{}\t{}", d.entry.id, d.entry.labels.join(","), dist);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_classify(args: &ClassifyArgs) -> Result<ExitCode> {
    let ds = Dataset::load(&args.dataset)?;
    let query = ds
        .test
        .find(&args.query_id)
        .ok_or_else(|| anyhow!("no test entry with id {}", args.query_id))?;
    let retriever = Retriever::new(&ds.demo, args.normalize)?;
    let mut section = match &args.config {
        Some(p) => RunConfig::load(p)?.generator,
        None => GeneratorSection::default(),
    };
    args.gen.apply(&mut section);
    let generator = if args.retriever_only {
        None
    } else {
        Some(build_generator(&section)?)
    };
    let classifier = Classifier {
        info: &ds.info,
        retriever: &retriever,
        generator: generator.as_deref(),
        ordering: args.ordering,
        fail_mode: FailMode::CountIncorrect,
    };
    let emb = ds.test.embedding(query);
    let record = if args.retriever_only {
        classifier.classify_retriever_only(query, emb, args.k)?
    } else {
        classifier.classify_visual_rag(query, emb, args.k, args.strategy.resolve(args.seed))?
    };
    println!("{}", serde_json::to_string_pretty(&record)?);
    let failed = record
        .error
        .as_ref()
        .is_some_and(|e| e.kind == eval::ErrorKind::Generator);
    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(args);
    cfg.validate()?;
    // Build the generator first so a missing credential fails before any work.
    let generator = if cfg.needs_generator() {
        Some(build_generator(&cfg.generator)?)
    } else {
        None
    };
    let ds = Dataset::load(&cfg.dataset_dir)?;
    let violations = ds.validate();
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("invalid: {v}");
        }
        bail!("{} dataset violations", violations.len());
    }
    let shots = cfg
        .shot_counts
        .clone()
        .unwrap_or_else(|| eval::default_shot_counts(ds.demo.len()));
    let sweep = SweepConfig {
        ordering: cfg.ordering,
        normalize: cfg.normalize,
        seed: cfg.seed,
        fail_mode: cfg.fail_mode,
        workers: cfg.workers,
    };
    let reports = eval::run_sweep(&ds, &cfg.modes, &shots, &sweep, generator.as_deref())?;
    eval::write_reports(&reports, &cfg.output_dir)?;
    print!("{}", eval::format_summary(&reports));

    let of_mode = |m: Mode| {
        reports
            .iter()
            .filter(|r| r.mode == m)
            .cloned()
            .collect::<Vec<_>>()
    };
    let (rag, many) = (of_mode(Mode::VisualRag), of_mode(Mode::ManyShotRandom));
    if !rag.is_empty() && !many.is_empty() {
        let e = eval::efficiency_summary(&rag, &many)?;
        println!(
            "efficiency: gain {:+.2} points using {:.2}% of the examples (k={} vs k={})",
            e.accuracy_gain, e.example_ratio, e.rag_k, e.manyshot_k
        );
    }

    let failures: usize = reports.iter().map(|r| r.generator_failures()).sum();
    if failures > 0 {
        match cfg.fail_mode {
            FailMode::Skip => {
                eprintln!("warning: {failures} generator failures excluded from metrics");
                Ok(ExitCode::SUCCESS)
            }
            FailMode::CountIncorrect => {
                eprintln!("error: {failures} generator failures counted as incorrect");
                Ok(ExitCode::FAILURE)
            }
        }
    } else {
        Ok(ExitCode::SUCCESS)
    }
}
