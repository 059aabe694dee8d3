//! Classification modes, metrics and sweep reports.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::Generator;
use crate::index::IndexError;
use crate::kb::{Dataset, DatasetInfo, KbEntry, Task};
use crate::prompt::{parse_answer, render_prompt, PromptError};
use crate::retriever::{
    order_for_prompt, DemoExample, OrderingPolicy, Retriever, SelectionStrategy,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("mode {0:?} needs a generator")]
    NoGenerator(Mode),
    #[error("knowledge base is empty")]
    EmptyKb,
    #[error("k must be at least 1 for {0:?}")]
    ZeroK(Mode),
    #[error("no records to score")]
    EmptyRecords,
    #[error("metric {metric} needs a {expected:?} task")]
    WrongTask {
        metric: &'static str,
        expected: Task,
    },
    #[error("reports mix datasets {0:?} and {1:?}")]
    DatasetMismatch(String, String),
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    VisualRag,
    ZeroShot,
    ManyShotRandom,
    RetrieverOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::VisualRag => "visual_rag",
            Mode::ZeroShot => "zero_shot",
            Mode::ManyShotRandom => "many_shot_random",
            Mode::RetrieverOnly => "retriever_only",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FailMode {
    /// Generator failures stay in the denominator as incorrect.
    #[default]
    CountIncorrect,
    /// Generator failures are excluded from the metrics.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Format,
    UnknownChoice,
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub id: String,
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub mode: Mode,
    pub strategy: Option<SelectionStrategy>,
    pub k: usize,
    pub demos: Vec<DemoRecord>,
    pub prediction: Vec<String>,
    pub confidence: Option<f64>,
    pub raw_reply: Option<String>,
    pub error: Option<RecordError>,
    /// Retriever-only: the modal count was shared by several labels.
    pub tied: bool,
    pub ground_truth: Vec<String>,
    pub correct: bool,
    /// Left out of metric denominators (generator failure under `FailMode::Skip`).
    pub excluded: bool,
}

/// Single-label: the one predicted class is the true class. Multi-label:
/// exact set equality.
pub fn is_correct(prediction: &[String], truth: &[String], task: Task) -> bool {
    match task {
        Task::SingleLabel => prediction.len() == 1 && truth.contains(&prediction[0]),
        Task::MultiLabel => {
            !prediction.is_empty()
                && prediction.iter().collect::<BTreeSet<_>>()
                    == truth.iter().collect::<BTreeSet<_>>()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vote<'a> {
    /// Among the labels sharing the maximal count, the earliest in input order.
    pub label: &'a [String],
    pub tied: bool,
}

/// Majority vote over label sets in retrieval order.
pub fn majority_vote<'a>(labels: &[&'a [String]]) -> Option<Vote<'a>> {
    let mut counts: HashMap<&[String], (usize, usize)> = HashMap::new();
    for (pos, l) in labels.iter().enumerate() {
        counts.entry(*l).or_insert((0, pos)).0 += 1;
    }
    let max = counts.values().map(|c| c.0).max()?;
    let top: Vec<_> = counts.iter().filter(|(_, c)| c.0 == max).collect();
    let (label, _) = top.iter().min_by_key(|(_, c)| c.1)?;
    Some(Vote {
        label,
        tied: top.len() > 1,
    })
}

/// Runs one query through a classification mode.
pub struct Classifier<'a> {
    pub info: &'a DatasetInfo,
    pub retriever: &'a Retriever,
    pub generator: Option<&'a dyn Generator>,
    pub ordering: OrderingPolicy,
    pub fail_mode: FailMode,
}

fn demo_records(demos: &[DemoExample]) -> Vec<DemoRecord> {
    demos
        .iter()
        .map(|d| DemoRecord {
            id: d.entry.id.clone(),
            distance: d.distance,
        })
        .collect()
}

impl Classifier<'_> {
    /// retrieve, order, render, generate, parse. `k == 0` is zero-shot and a
    /// random strategy is the many-shot baseline. Parse failures are scored
    /// incorrect; generator failures follow `fail_mode`.
    pub fn classify_visual_rag(
        &self,
        query: &KbEntry,
        embedding: &[f32],
        k: usize,
        strategy: SelectionStrategy,
    ) -> Result<QueryRecord, EvalError> {
        let mode = match (k, strategy) {
            (0, _) => Mode::ZeroShot,
            (_, SelectionStrategy::Random { .. }) => Mode::ManyShotRandom,
            (_, SelectionStrategy::NearestNeighbor) => Mode::VisualRag,
        };
        let generator = self.generator.ok_or(EvalError::NoGenerator(mode))?;
        let demos = self.retriever.retrieve(strategy, &query.id, embedding, k)?;
        let demos = order_for_prompt(demos, self.ordering);
        let doc = render_prompt(&demos, &self.info.class_names, &query.image_ref)?;

        let mut record = QueryRecord {
            query_id: query.id.clone(),
            mode,
            strategy: (k > 0).then_some(strategy),
            k,
            demos: demo_records(&demos),
            prediction: Vec::new(),
            confidence: None,
            raw_reply: None,
            error: None,
            tied: false,
            ground_truth: query.labels.clone(),
            correct: false,
            excluded: false,
        };
        match generator.generate(&doc) {
            Err(e) => {
                record.error = Some(RecordError {
                    kind: ErrorKind::Generator,
                    message: e.to_string(),
                });
                record.excluded = self.fail_mode == FailMode::Skip;
            }
            Ok(reply) => {
                match parse_answer(&reply.text, &self.info.class_names, self.info.task) {
                    Ok(parsed) => {
                        record.correct = is_correct(&parsed.choices, &query.labels, self.info.task);
                        record.prediction = parsed.choices;
                        record.confidence = parsed.confidence;
                    }
                    Err(PromptError::UnknownChoice { choice, .. }) => {
                        record.error = Some(RecordError {
                            kind: ErrorKind::UnknownChoice,
                            message: choice,
                        });
                    }
                    Err(e) => {
                        record.error = Some(RecordError {
                            kind: ErrorKind::Format,
                            message: e.to_string(),
                        });
                    }
                }
                record.raw_reply = Some(reply.text);
            }
        }
        Ok(record)
    }

    /// Predicts the modal label set of the `k` nearest demos. A shared
    /// maximal count is always scored incorrect.
    pub fn classify_retriever_only(
        &self,
        query: &KbEntry,
        embedding: &[f32],
        k: usize,
    ) -> Result<QueryRecord, EvalError> {
        if k == 0 {
            return Err(EvalError::ZeroK(Mode::RetrieverOnly));
        }
        if self.retriever.entries().is_empty() {
            return Err(EvalError::EmptyKb);
        }
        let demos =
            self.retriever
                .retrieve(SelectionStrategy::NearestNeighbor, &query.id, embedding, k)?;
        let labels: Vec<&[String]> = demos.iter().map(|d| d.entry.labels.as_slice()).collect();
        let vote = majority_vote(&labels).ok_or(EvalError::EmptyKb)?;
        let correct = !vote.tied && is_correct(vote.label, &query.labels, self.info.task);
        Ok(QueryRecord {
            query_id: query.id.clone(),
            mode: Mode::RetrieverOnly,
            strategy: Some(SelectionStrategy::NearestNeighbor),
            k,
            prediction: vote.label.to_vec(),
            demos: demo_records(&demos),
            confidence: None,
            raw_reply: None,
            error: None,
            tied: vote.tied,
            ground_truth: query.labels.clone(),
            correct,
            excluded: false,
        })
    }
}

fn counted(records: &[QueryRecord]) -> impl Iterator<Item = &QueryRecord> {
    records.iter().filter(|r| !r.excluded)
}

/// Fraction of counted records that are correct.
pub fn accuracy(records: &[QueryRecord]) -> Result<f64, EvalError> {
    let (n, hits) = counted(records).fold((0usize, 0usize), |(n, h), r| {
        (n + 1, h + usize::from(r.correct))
    });
    if n == 0 {
        return Err(EvalError::EmptyRecords);
    }
    Ok(hits as f64 / n as f64)
}

/// Unweighted mean over `class_names` of per-class F1, where F1 = 2TP / (2TP + FP + FN)
/// and a class with no true or predicted members scores 0.
pub fn macro_f1(records: &[QueryRecord], class_names: &[String]) -> Result<f64, EvalError> {
    if class_names.is_empty() {
        return Err(EvalError::Invalid("class_names is empty".into()));
    }
    let records: Vec<_> = counted(records).collect();
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let total: f64 = class_names
        .iter()
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for r in &records {
                match (r.prediction.contains(c), r.ground_truth.contains(c)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                (2 * tp) as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / class_names.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub ordering: OrderingPolicy,
    pub normalize: bool,
    pub random_seed: Option<u64>,
    pub fail_mode: FailMode,
    /// How per-class F1 is defined when a class never occurs.
    pub f1_zero_division: String,
    /// How multi-label answers are written in prompts and parsed from replies.
    pub multi_label_answer_format: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub task: Task,
    pub mode: Mode,
    pub k: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub error_count: usize,
    pub excluded_count: usize,
    pub settings: ReportSettings,
    pub records: Vec<QueryRecord>,
}

impl EvaluationReport {
    /// Accuracy for single-label tasks, macro-F1 for multi-label ones.
    pub fn headline(&self) -> f64 {
        match self.task {
            Task::SingleLabel => self.accuracy.unwrap_or(0.0),
            Task::MultiLabel => self.macro_f1.unwrap_or(0.0),
        }
    }

    pub fn generator_failures(&self) -> usize {
        self.records
            .iter()
            .filter(|r| {
                r.error
                    .as_ref()
                    .is_some_and(|e| e.kind == ErrorKind::Generator)
            })
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EfficiencySummary {
    /// RAG metric minus many-shot metric, in percentage points.
    pub accuracy_gain: f64,
    /// RAG shots over many-shot shots, in percent.
    pub example_ratio: f64,
    pub rag_k: usize,
    pub manyshot_k: usize,
}

/// Compares the best many-shot run against the cheapest RAG run that matches
/// or beats it, or the closest RAG run when none does.
pub fn efficiency_summary(
    rag_reports: &[EvaluationReport],
    manyshot_reports: &[EvaluationReport],
) -> Result<EfficiencySummary, EvalError> {
    let first = rag_reports
        .first()
        .or(manyshot_reports.first())
        .ok_or(EvalError::EmptyRecords)?;
    if rag_reports.is_empty() || manyshot_reports.is_empty() {
        return Err(EvalError::Invalid(
            "both report lists must be nonempty".into(),
        ));
    }
    if let Some(other) = rag_reports
        .iter()
        .chain(manyshot_reports)
        .find(|r| r.dataset != first.dataset)
    {
        return Err(EvalError::DatasetMismatch(
            first.dataset.clone(),
            other.dataset.clone(),
        ));
    }
    let best_many = manyshot_reports
        .iter()
        .min_by(|a, b| b.headline().total_cmp(&a.headline()).then(a.k.cmp(&b.k)))
        .expect("nonempty");
    if best_many.k == 0 {
        return Err(EvalError::Invalid("many-shot report with k = 0".into()));
    }
    let target = best_many.headline();
    let rag = rag_reports
        .iter()
        .filter(|r| r.headline() >= target)
        .min_by_key(|r| r.k)
        .or_else(|| {
            rag_reports.iter().min_by(|a, b| {
                (a.headline() - target)
                    .abs()
                    .total_cmp(&(b.headline() - target).abs())
                    .then(a.k.cmp(&b.k))
            })
        })
        .expect("nonempty");
    Ok(EfficiencySummary {
        accuracy_gain: (rag.headline() - target) * 100.0,
        example_ratio: rag.k as f64 / best_many.k as f64 * 100.0,
        rag_k: rag.k,
        manyshot_k: best_many.k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ordering: OrderingPolicy,
    pub normalize: bool,
    pub seed: u64,
    pub fail_mode: FailMode,
    /// Concurrent queries; defaults to the generator's `max_parallel`.
    pub workers: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ordering: OrderingPolicy::SimilarLast,
            normalize: false,
            seed: 0,
            fail_mode: FailMode::CountIncorrect,
            workers: None,
        }
    }
}

/// 5, 10 and 50 shots, plus 100 when the demo set has at least 100 images.
pub fn default_shot_counts(demo_count: usize) -> Vec<usize> {
    let mut shots = vec![5, 10, 50];
    if demo_count >= 100 {
        shots.push(100);
    }
    shots
}

/// One report per `(mode, k)`; zero-shot runs once with `k = 0`.
pub fn run_sweep(
    dataset: &Dataset,
    modes: &[Mode],
    shot_counts: &[usize],
    config: &SweepConfig,
    generator: Option<&dyn Generator>,
) -> Result<Vec<EvaluationReport>, EvalError> {
    let needs_shots = modes.iter().any(|m| *m != Mode::ZeroShot);
    if needs_shots && shot_counts.is_empty() {
        return Err(EvalError::Invalid("shot_counts is empty".into()));
    }
    if needs_shots && shot_counts.contains(&0) {
        return Err(EvalError::Invalid("shot counts must be positive".into()));
    }
    for &m in modes {
        if m != Mode::RetrieverOnly && generator.is_none() {
            return Err(EvalError::NoGenerator(m));
        }
    }
    if dataset.test.is_empty() {
        return Err(EvalError::EmptyRecords);
    }

    let retriever = Retriever::new(&dataset.demo, config.normalize)?;
    let classifier = Classifier {
        info: &dataset.info,
        retriever: &retriever,
        generator,
        ordering: config.ordering,
        fail_mode: config.fail_mode,
    };
    let workers = config
        .workers
        .or(generator.map(|g| g.max_parallel()))
        .unwrap_or(1)
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| EvalError::Invalid(e.to_string()))?;

    let mut runs: Vec<(Mode, usize)> = Vec::new();
    for &mode in modes {
        if mode == Mode::ZeroShot {
            if !runs.contains(&(mode, 0)) {
                runs.push((mode, 0));
            }
        } else {
            for &k in shot_counts {
                if !runs.contains(&(mode, k)) {
                    runs.push((mode, k));
                }
            }
        }
    }

    let mut reports = Vec::with_capacity(runs.len());
    for (mode, k) in runs {
        let strategy = match mode {
            Mode::ManyShotRandom => SelectionStrategy::Random { seed: config.seed },
            _ => SelectionStrategy::NearestNeighbor,
        };
        let mut records: Vec<QueryRecord> = pool.install(|| {
            dataset
                .test
                .entries
                .par_iter()
                .map(|q| {
                    let emb = dataset.test.embedding(q);
                    match mode {
                        Mode::RetrieverOnly => classifier.classify_retriever_only(q, emb, k),
                        _ => classifier.classify_visual_rag(q, emb, k, strategy),
                    }
                })
                .collect::<Result<_, _>>()
        })?;
        records.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        reports.push(build_report(&dataset.info, mode, k, records, config)?);
    }
    Ok(reports)
}

fn build_report(
    info: &DatasetInfo,
    mode: Mode,
    k: usize,
    records: Vec<QueryRecord>,
    config: &SweepConfig,
) -> Result<EvaluationReport, EvalError> {
    let excluded_count = records.iter().filter(|r| r.excluded).count();
    let error_count = records.iter().filter(|r| r.error.is_some()).count();
    let scorable = excluded_count < records.len();
    let (accuracy, macro_f1) = match (info.task, scorable) {
        (_, false) => (None, None),
        (Task::SingleLabel, true) => (Some(accuracy(&records)?), None),
        (Task::MultiLabel, true) => (None, Some(macro_f1(&records, &info.class_names)?)),
    };
    Ok(EvaluationReport {
        dataset: info.name.clone(),
        task: info.task,
        mode,
        k,
        accuracy,
        macro_f1,
        error_count,
        excluded_count,
        settings: ReportSettings {
            ordering: config.ordering,
            normalize: config.normalize,
            random_seed: (mode == Mode::ManyShotRandom).then_some(config.seed),
            fail_mode: config.fail_mode,
            f1_zero_division: "zero".into(),
            multi_label_answer_format: "comma_separated".into(),
        },
        records,
    })
}

pub const SUMMARY_CSV: &str = "summary.csv";

pub fn report_file_name(report: &EvaluationReport) -> String {
    format!("report_{}_k{}.json", report.mode.as_str(), report.k)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Summary table: one row per report.
pub fn summary_csv(reports: &[EvaluationReport]) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "mode", "k", "accuracy", "macro_f1"])?;
    for r in reports {
        w.write_record([
            r.dataset.clone(),
            r.mode.as_str().to_string(),
            r.k.to_string(),
            fmt_metric(r.accuracy),
            fmt_metric(r.macro_f1),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| EvalError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes one JSON document per report plus `summary.csv` into `out_dir`.
pub fn write_reports(
    reports: &[EvaluationReport],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    for r in reports {
        let path = out_dir.join(report_file_name(r));
        let json = serde_json::to_string_pretty(r).expect("report serializes");
        fs::write(&path, json + "\n").map_err(io(&path))?;
        written.push(path);
    }
    let path = out_dir.join(SUMMARY_CSV);
    fs::write(&path, summary_csv(reports)?).map_err(io(&path))?;
    written.push(path);
    Ok(written)
}

/// Human-readable mode x k x metric table.
pub fn format_summary(reports: &[EvaluationReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:>5} {:>10} {:>7}",
        "mode", "k", "metric", "errors"
    );
    for r in reports {
        let metric = match (r.accuracy, r.macro_f1) {
            (Some(a), _) => format!("acc {:.4}", a),
            (None, Some(f)) => format!("f1 {:.4}", f),
            _ => "-".into(),
        };
        let _ = writeln!(
            s,
            "{:<18} {:>5} {:>10} {:>7}",
            r.mode.as_str(),
            r.k,
            metric,
            r.error_count
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{EchoModalGenerator, ScriptedGenerator};
    use crate::kb::{EmbeddingMatrix, KnowledgeBase};

    fn s(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    fn record(pred: &[&str], truth: &[&str], correct: bool) -> QueryRecord {
        QueryRecord {
            query_id: "q".into(),
            mode: Mode::VisualRag,
            strategy: None,
            k: 1,
            demos: vec![],
            prediction: s(pred),
            confidence: None,
            raw_reply: None,
            error: None,
            tied: false,
            ground_truth: s(truth),
            correct,
            excluded: false,
        }
    }

    fn line_dataset(demo_labels: &[&str], task: Task) -> Dataset {
        // Demo i sits at x = i; the single query sits at x = -0.5.
        let demo_rows: Vec<[f32; 1]> = (0..demo_labels.len()).map(|i| [i as f32]).collect();
        let demo_entries = demo_labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                KbEntry::new(
                    format!("d{i}"),
                    format!("d{i}.png"),
                    s(&l.split('+').collect::<Vec<_>>()),
                    i,
                )
            })
            .collect();
        Dataset {
            info: DatasetInfo {
                name: "line".into(),
                class_names: s(&["A", "B", "C"]),
                task,
            },
            demo: KnowledgeBase::new(
                EmbeddingMatrix::from_rows(1, &demo_rows).unwrap(),
                demo_entries,
            )
            .unwrap(),
            test: KnowledgeBase::new(
                EmbeddingMatrix::new(1, vec![-0.5]).unwrap(),
                vec![KbEntry::new("t0", "t0.png", s(&["A"]), 0)],
            )
            .unwrap(),
        }
    }

    fn retriever_only(demo_labels: &[&str], truth: &str) -> QueryRecord {
        let ds = line_dataset(demo_labels, Task::SingleLabel);
        let r = Retriever::new(&ds.demo, false).unwrap();
        let c = Classifier {
            info: &ds.info,
            retriever: &r,
            generator: None,
            ordering: OrderingPolicy::SimilarLast,
            fail_mode: FailMode::CountIncorrect,
        };
        let q = KbEntry::new("q", "q.png", s(&[truth]), 0);
        c.classify_retriever_only(&q, &[-0.5], demo_labels.len())
            .unwrap()
    }

    #[test]
    fn retriever_only_majority_and_ties() {
        assert!(retriever_only(&["A", "A", "B"], "A").correct);
        let tie = retriever_only(&["A", "B"], "A");
        assert!(!tie.correct && tie.tied);
        assert_eq!(tie.prediction, s(&["A"]));
        assert!(!retriever_only(&["B", "B", "A"], "A").correct);
    }

    #[test]
    fn retriever_only_needs_k_and_kb() {
        let ds = line_dataset(&[], Task::SingleLabel);
        let r = Retriever::new(&ds.demo, false).unwrap();
        let c = Classifier {
            info: &ds.info,
            retriever: &r,
            generator: None,
            ordering: OrderingPolicy::SimilarLast,
            fail_mode: FailMode::CountIncorrect,
        };
        let q = &ds.test.entries[0];
        assert!(matches!(
            c.classify_retriever_only(q, &[0.0], 3),
            Err(EvalError::EmptyKb)
        ));
        assert!(matches!(
            c.classify_retriever_only(q, &[0.0], 0),
            Err(EvalError::ZeroK(_))
        ));
    }

    #[test]
    fn visual_rag_zero_shot_and_error_paths() {
        let ds = line_dataset(&["A", "A", "B"], Task::SingleLabel);
        let r = Retriever::new(&ds.demo, false).unwrap();
        let q = &ds.test.entries[0];
        let emb = ds.test.embedding(q);

        let echo = EchoModalGenerator;
        let c = Classifier {
            info: &ds.info,
            retriever: &r,
            generator: Some(&echo),
            ordering: OrderingPolicy::SimilarLast,
            fail_mode: FailMode::CountIncorrect,
        };
        let zero = c
            .classify_visual_rag(q, emb, 0, SelectionStrategy::NearestNeighbor)
            .unwrap();
        assert_eq!(zero.mode, Mode::ZeroShot);
        assert!(zero.demos.is_empty());
        assert_eq!(zero.prediction, s(&["A"]));

        let rag = c
            .classify_visual_rag(q, emb, 3, SelectionStrategy::NearestNeighbor)
            .unwrap();
        assert!(rag.correct);
        let ids: Vec<_> = rag.demos.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, vec!["d2", "d1", "d0"]);

        let scripted = ScriptedGenerator::new(["no marker here", "Answer Choice: zebra"]);
        let c = Classifier {
            generator: Some(&scripted),
            ..c
        };
        let fmt = c
            .classify_visual_rag(q, emb, 1, SelectionStrategy::NearestNeighbor)
            .unwrap();
        assert_eq!(fmt.error.unwrap().kind, ErrorKind::Format);
        assert!(!fmt.correct && !fmt.excluded);
        let unk = c
            .classify_visual_rag(q, emb, 1, SelectionStrategy::NearestNeighbor)
            .unwrap();
        assert_eq!(unk.error.unwrap().kind, ErrorKind::UnknownChoice);

        let failed = c
            .classify_visual_rag(q, emb, 1, SelectionStrategy::NearestNeighbor)
            .unwrap();
        assert_eq!(failed.error.as_ref().unwrap().kind, ErrorKind::Generator);
        assert!(!failed.excluded);
        let skip = Classifier {
            fail_mode: FailMode::Skip,
            ..c
        };
        assert!(
            skip.classify_visual_rag(q, emb, 1, SelectionStrategy::NearestNeighbor)
                .unwrap()
                .excluded
        );
    }

    #[test]
    fn accuracy_definition() {
        assert_eq!(accuracy(&[record(&["A"], &["A"], true)]).unwrap(), 1.0);
        assert_eq!(
            accuracy(&[record(&[], &["A"], true), record(&[], &["A"], false)]).unwrap(),
            0.5
        );
        let many: Vec<_> = (0..120).map(|i| record(&[], &[], i < 77)).collect();
        assert_eq!(accuracy(&many).unwrap(), 77.0 / 120.0);
        assert!(matches!(accuracy(&[]), Err(EvalError::EmptyRecords)));
        let mut skipped = record(&[], &[], false);
        skipped.excluded = true;
        assert_eq!(
            accuracy(&[skipped.clone(), record(&[], &[], true)]).unwrap(),
            1.0
        );
        assert!(accuracy(&[skipped]).is_err());
    }

    #[test]
    fn macro_f1_edges() {
        let classes = s(&["A", "B"]);
        let perfect = vec![
            record(&["A"], &["A"], true),
            record(&["A", "B"], &["A", "B"], true),
        ];
        assert_eq!(macro_f1(&perfect, &classes).unwrap(), 1.0);
        let disjoint = vec![record(&["B"], &["A"], false), record(&["A"], &["B"], false)];
        assert_eq!(macro_f1(&disjoint, &classes).unwrap(), 0.0);
        // Class C never occurs and scores 0: mean of (1, 1, 0).
        let with_absent = s(&["A", "B", "C"]);
        assert!((macro_f1(&perfect, &with_absent).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(macro_f1(&[], &classes).is_err());
    }

    #[test]
    fn multi_label_correctness_is_set_equality() {
        assert!(is_correct(
            &s(&["B", "A"]),
            &s(&["A", "B"]),
            Task::MultiLabel
        ));
        assert!(!is_correct(&s(&["A"]), &s(&["A", "B"]), Task::MultiLabel));
        assert!(is_correct(&s(&["A"]), &s(&["A"]), Task::SingleLabel));
        assert!(!is_correct(&s(&["A", "B"]), &s(&["A"]), Task::SingleLabel));
    }

    fn report(dataset: &str, mode: Mode, k: usize, acc: f64) -> EvaluationReport {
        EvaluationReport {
            dataset: dataset.into(),
            task: Task::SingleLabel,
            mode,
            k,
            accuracy: Some(acc),
            macro_f1: None,
            error_count: 0,
            excluded_count: 0,
            settings: build_report(
                &DatasetInfo {
                    name: dataset.into(),
                    class_names: s(&["A"]),
                    task: Task::SingleLabel,
                },
                mode,
                k,
                vec![record(&[], &[], true)],
                &SweepConfig::default(),
            )
            .unwrap()
            .settings,
            records: vec![],
        }
    }

    #[test]
    fn efficiency_picks_cheapest_matching_rag() {
        let rag = vec![
            report("d", Mode::VisualRag, 50, 0.70),
            report("d", Mode::VisualRag, 5, 0.66),
            report("d", Mode::VisualRag, 10, 0.68),
        ];
        let many = vec![
            report("d", Mode::ManyShotRandom, 400, 0.60),
            report("d", Mode::ManyShotRandom, 100, 0.55),
        ];
        let e = efficiency_summary(&rag, &many).unwrap();
        assert_eq!((e.rag_k, e.manyshot_k), (5, 400));
        assert!((e.example_ratio - 1.25).abs() < 1e-12);
        assert!((e.accuracy_gain - 6.0).abs() < 1e-9);
    }

    #[test]
    fn efficiency_falls_back_to_closest() {
        let rag = vec![
            report("d", Mode::VisualRag, 5, 0.40),
            report("d", Mode::VisualRag, 10, 0.58),
        ];
        let many = vec![report("d", Mode::ManyShotRandom, 50, 0.60)];
        let e = efficiency_summary(&rag, &many).unwrap();
        assert_eq!(e.rag_k, 10);
        assert!((e.accuracy_gain + 2.0).abs() < 1e-9);
        assert!((e.example_ratio - 20.0).abs() < 1e-12);
    }

    #[test]
    fn efficiency_identical_lists() {
        let same = vec![
            report("d", Mode::VisualRag, 10, 0.5),
            report("d", Mode::VisualRag, 50, 0.7),
        ];
        let e = efficiency_summary(&same, &same).unwrap();
        assert_eq!(e.accuracy_gain, 0.0);
        assert_eq!(e.example_ratio, 100.0);
    }

    #[test]
    fn efficiency_rejects_mixed_datasets() {
        let rag = vec![report("a", Mode::VisualRag, 5, 0.5)];
        let many = vec![report("b", Mode::ManyShotRandom, 5, 0.5)];
        assert!(matches!(
            efficiency_summary(&rag, &many),
            Err(EvalError::DatasetMismatch(..))
        ));
        assert!(efficiency_summary(&[], &many).is_err());
    }

    #[test]
    fn sweep_shapes() {
        let ds = line_dataset(&["A", "A", "B", "C", "A", "B"], Task::SingleLabel);
        let echo = EchoModalGenerator;
        let cfg = SweepConfig::default();
        let zero = run_sweep(&ds, &[Mode::ZeroShot], &[5, 10, 50], &cfg, Some(&echo)).unwrap();
        assert_eq!(zero.len(), 1);
        assert_eq!(zero[0].k, 0);
        let six = run_sweep(
            &ds,
            &[Mode::VisualRag, Mode::ManyShotRandom],
            &[1, 2, 3],
            &cfg,
            Some(&echo),
        )
        .unwrap();
        assert_eq!(six.len(), 6);
        assert_eq!(six[3].settings.random_seed, Some(0));
        let seven = run_sweep(
            &ds,
            &[Mode::ZeroShot, Mode::VisualRag, Mode::RetrieverOnly],
            &[1, 2, 3],
            &cfg,
            Some(&echo),
        )
        .unwrap();
        assert_eq!(seven.len(), 7);
        assert!(run_sweep(&ds, &[Mode::VisualRag], &[1], &cfg, None).is_err());
        assert!(run_sweep(&ds, &[Mode::RetrieverOnly], &[1], &cfg, None).is_ok());
        assert!(run_sweep(&ds, &[Mode::RetrieverOnly], &[], &cfg, None).is_err());
    }

    #[test]
    fn multi_label_sweep_reports_macro_f1() {
        let ds = line_dataset(&["A+B", "A+B", "C"], Task::MultiLabel);
        let echo = EchoModalGenerator;
        let reports = run_sweep(
            &ds,
            &[Mode::VisualRag],
            &[3],
            &SweepConfig::default(),
            Some(&echo),
        )
        .unwrap();
        assert_eq!(reports[0].records[0].prediction, s(&["A", "B"]));
        assert!(reports[0].accuracy.is_none());
        // Truth {A}, prediction {A, B}: A scores 1, B (false positive) and C (absent) score 0.
        let f1 = reports[0].macro_f1.unwrap();
        assert!((f1 - (1.0 + 0.0 + 0.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn default_shots() {
        assert_eq!(default_shot_counts(60), vec![5, 10, 50]);
        assert_eq!(default_shot_counts(400), vec![5, 10, 50, 100]);
    }

    #[test]
    fn csv_layout() {
        let reports = vec![report("d", Mode::ZeroShot, 0, 0.25)];
        assert_eq!(
            summary_csv(&reports).unwrap(),
            "dataset,mode,k,accuracy,macro_f1\nd,zero_shot,0,0.250000,\n"
        );
    }

    #[test]
    fn vote_tie_reports_earliest() {
        let a = s(&["A"]);
        let b = s(&["B"]);
        let v = majority_vote(&[&b, &a, &a, &b]).unwrap();
        assert_eq!(v.label, b.as_slice());
        assert!(v.tied);
        assert!(majority_vote(&[]).is_none());
    }
}
