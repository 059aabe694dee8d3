//! Knowledge-base storage: embedding matrix plus per-image metadata.
//!
//! A KB directory holds two files:
//!
//! * `embeddings.vre` - magic `VRAGEMB1`, u32 LE count, u32 LE dim, then
//!   `count * dim` binary32 LE values, row-major.
//! * `manifest.jsonl` - one `{"id", "image_ref", "labels"}` record per line;
//!   line `i` describes matrix row `i`.
//!
//! A dataset directory groups a `dataset.json` header with `demo/` and
//! `test/` KB directories.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"VRAGEMB1";
pub const EMBEDDINGS_FILE: &str = "embeddings.vre";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_FILE: &str = "dataset.json";
pub const DEMO_DIR: &str = "demo";
pub const TEST_DIR: &str = "test";

const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),
    #[error("truncated embeddings file {path}: expected {expected} data bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("embeddings header says {header} rows but manifest has {manifest} entries")]
    CountMismatch { header: usize, manifest: usize },
    #[error("invalid matrix shape: {0}")]
    Shape(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid entry {entry}: {reason}")]
    Validation { entry: String, reason: String },
}

impl KbError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        KbError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Dense row-major `count x dim` matrix of `f32` embeddings.
///
/// Construction only checks the shape; finiteness is checked by
/// [`EmbeddingMatrix::check_finite`], which every loader and the index call.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self, KbError> {
        if dim == 0 {
            return Err(KbError::Shape("dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(KbError::Shape(format!(
                "{} values do not divide into rows of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self, KbError> {
        Self::new(dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self, KbError> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(KbError::Shape(format!(
                    "row {i} has {} values, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn check_finite(&self) -> Result<(), KbError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(KbError::NonFinite {
                row: p / self.dim,
                col: p % self.dim,
            }),
            None => Ok(()),
        }
    }

    /// Copy with every row scaled to unit L2 norm. All-zero rows are kept as is.
    pub fn normalized(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.dim) {
            normalize_in_place(row);
        }
        Self {
            dim: self.dim,
            data,
        }
    }

    /// Bit-level equality, so NaN payloads and signed zeros compare exactly.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn normalize_in_place(v: &mut [f32]) {
    let norm = v
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

/// One knowledge-base image: its reference, labels, and matrix row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbEntry {
    pub id: String,
    pub image_ref: String,
    pub labels: Vec<String>,
    #[serde(skip)]
    pub row: usize,
}

impl KbEntry {
    pub fn new(
        id: impl Into<String>,
        image_ref: impl Into<String>,
        labels: Vec<String>,
        row: usize,
    ) -> Self {
        Self {
            id: id.into(),
            image_ref: image_ref.into(),
            labels,
            row,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SingleLabel,
    MultiLabel,
}

/// Dataset-level description: class vocabulary, task and both splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub task: Task,
    #[serde(default)]
    pub demo_entries: Vec<KbEntry>,
    #[serde(default)]
    pub test_entries: Vec<KbEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    EmptyClassNames,
    DuplicateClassName,
    EmptyLabels,
    DuplicateLabel,
    UnknownLabel,
    SingleLabelArity,
    DuplicateId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// `None` for dataset-level rules (class vocabulary).
    pub entry_id: Option<String>,
    pub rule: Rule,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.entry_id {
            Some(id) => write!(f, "entry {id}: {:?}: {}", self.rule, self.detail),
            None => write!(f, "dataset: {:?}: {}", self.rule, self.detail),
        }
    }
}

pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    if manifest.class_names.is_empty() {
        out.push(Violation {
            entry_id: None,
            rule: Rule::EmptyClassNames,
            detail: "class_names is empty".into(),
        });
    }
    let mut classes = HashSet::new();
    for name in &manifest.class_names {
        if !classes.insert(name.as_str()) {
            out.push(Violation {
                entry_id: None,
                rule: Rule::DuplicateClassName,
                detail: format!("class {name:?} listed twice"),
            });
        }
    }

    let mut ids = HashSet::new();
    let all = manifest
        .demo_entries
        .iter()
        .map(|e| ("demo", e))
        .chain(manifest.test_entries.iter().map(|e| ("test", e)));
    for (split, entry) in all {
        let violation = |rule, detail: String| Violation {
            entry_id: Some(entry.id.clone()),
            rule,
            detail,
        };
        if !ids.insert(entry.id.as_str()) {
            out.push(violation(
                Rule::DuplicateId,
                format!("id repeated (seen again in {split} split)"),
            ));
        }
        if entry.labels.is_empty() {
            out.push(violation(Rule::EmptyLabels, "no labels".into()));
        }
        if manifest.task == Task::SingleLabel && entry.labels.len() > 1 {
            out.push(violation(
                Rule::SingleLabelArity,
                format!("{} labels on a single-label task", entry.labels.len()),
            ));
        }
        let mut seen = HashSet::new();
        for label in &entry.labels {
            if !seen.insert(label.as_str()) {
                out.push(violation(
                    Rule::DuplicateLabel,
                    format!("label {label:?} repeated"),
                ));
            }
            if !classes.contains(label.as_str()) {
                out.push(violation(
                    Rule::UnknownLabel,
                    format!("label {label:?} not in class_names"),
                ));
            }
        }
    }
    out
}

fn check_entries(matrix: &EmbeddingMatrix, entries: &[KbEntry]) -> Result<(), KbError> {
    if entries.len() != matrix.count() {
        return Err(KbError::CountMismatch {
            header: matrix.count(),
            manifest: entries.len(),
        });
    }
    let mut ids = HashSet::new();
    for (i, entry) in entries.iter().enumerate() {
        let invalid = |reason: String| KbError::Validation {
            entry: entry.id.clone(),
            reason,
        };
        if entry.row != i {
            return Err(invalid(format!(
                "row {} does not match position {i}",
                entry.row
            )));
        }
        if !ids.insert(entry.id.as_str()) {
            return Err(invalid("duplicate id".into()));
        }
        if entry.labels.is_empty() {
            return Err(invalid("no labels".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = entry.labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(invalid(format!("label {dup:?} repeated")));
        }
    }
    if let Err(KbError::NonFinite { row, col }) = matrix.check_finite() {
        return Err(KbError::Validation {
            entry: entries[row].id.clone(),
            reason: format!("non-finite embedding value at column {col}"),
        });
    }
    Ok(())
}

/// Writes `embeddings.vre` and `manifest.jsonl` into `dir`, creating it if needed.
pub fn write_kb(matrix: &EmbeddingMatrix, entries: &[KbEntry], dir: &Path) -> Result<(), KbError> {
    check_entries(matrix, entries)?;
    fs::create_dir_all(dir).map_err(|e| KbError::io(dir, e))?;

    let count = u32::try_from(matrix.count())
        .map_err(|_| KbError::Shape("row count exceeds u32".into()))?;
    let dim =
        u32::try_from(matrix.dim()).map_err(|_| KbError::Shape("dimension exceeds u32".into()))?;

    let emb_path = dir.join(EMBEDDINGS_FILE);
    let write_embeddings = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&emb_path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(count)?;
        w.write_u32::<LittleEndian>(dim)?;
        for &v in matrix.as_slice() {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.flush()
    };
    write_embeddings().map_err(|e| KbError::io(&emb_path, e))?;

    let man_path = dir.join(MANIFEST_FILE);
    let write_manifest = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&man_path)?);
        for entry in entries {
            serde_json::to_writer(&mut w, entry)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write_manifest().map_err(|e| KbError::io(&man_path, e))
}

/// Reads only the embeddings file.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix, KbError> {
    if !path.is_file() {
        return Err(KbError::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| KbError::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(KbError::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(KbError::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let mut header = &bytes[MAGIC.len()..HEADER_LEN];
    let count = header
        .read_u32::<LittleEndian>()
        .map_err(|e| KbError::io(path, e))? as usize;
    let dim = header
        .read_u32::<LittleEndian>()
        .map_err(|e| KbError::io(path, e))? as usize;
    let body = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| KbError::Shape("header size overflows".into()))?;
    if body.len() != expected {
        return Err(KbError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: body.len(),
        });
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let matrix = EmbeddingMatrix::new(dim, data)?;
    matrix.check_finite()?;
    Ok(matrix)
}

/// Reads only the manifest; entry rows are set from line positions.
pub fn read_manifest_lines(path: &Path) -> Result<Vec<KbEntry>, KbError> {
    if !path.is_file() {
        return Err(KbError::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path).map_err(|e| KbError::io(path, e))?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| KbError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: KbEntry = serde_json::from_str(&line).map_err(|e| KbError::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        entry.row = entries.len();
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads and validates a KB directory written by [`write_kb`] or any compatible producer.
pub fn read_kb(dir: &Path) -> Result<(EmbeddingMatrix, Vec<KbEntry>), KbError> {
    let matrix = read_embeddings(&dir.join(EMBEDDINGS_FILE))?;
    let entries = read_manifest_lines(&dir.join(MANIFEST_FILE))?;
    check_entries(&matrix, &entries)?;
    Ok((matrix, entries))
}

/// An immutable loaded KB.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub matrix: EmbeddingMatrix,
    pub entries: Vec<KbEntry>,
}

impl KnowledgeBase {
    pub fn new(matrix: EmbeddingMatrix, entries: Vec<KbEntry>) -> Result<Self, KbError> {
        check_entries(&matrix, &entries)?;
        Ok(Self { matrix, entries })
    }

    pub fn load(dir: &Path) -> Result<Self, KbError> {
        let (matrix, entries) = read_kb(dir)?;
        Ok(Self { matrix, entries })
    }

    pub fn save(&self, dir: &Path) -> Result<(), KbError> {
        write_kb(&self.matrix, &self.entries, dir)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedding(&self, entry: &KbEntry) -> &[f32] {
        self.matrix.row(entry.row)
    }

    pub fn find(&self, id: &str) -> Option<&KbEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub class_names: Vec<String>,
    pub task: Task,
}

/// Demo KB (retrieval source) and test KB (queries) for one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub demo: KnowledgeBase,
    pub test: KnowledgeBase,
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.info.name.clone(),
            class_names: self.info.class_names.clone(),
            task: self.info.task,
            demo_entries: self.demo.entries.clone(),
            test_entries: self.test.entries.clone(),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_manifest(&self.manifest())
    }

    pub fn save(&self, dir: &Path) -> Result<(), KbError> {
        fs::create_dir_all(dir).map_err(|e| KbError::io(dir, e))?;
        let path = dir.join(DATASET_FILE);
        let json = serde_json::to_string_pretty(&self.info).expect("dataset info serializes");
        fs::write(&path, json + "\n").map_err(|e| KbError::io(&path, e))?;
        self.demo.save(&dir.join(DEMO_DIR))?;
        self.test.save(&dir.join(TEST_DIR))
    }

    pub fn load(dir: &Path) -> Result<Self, KbError> {
        let path = dir.join(DATASET_FILE);
        if !path.is_file() {
            return Err(KbError::MissingFile(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| KbError::io(&path, e))?;
        let info: DatasetInfo = serde_json::from_str(&text).map_err(|e| KbError::Manifest {
            line: e.line(),
            message: e.to_string(),
        })?;
        let demo = KnowledgeBase::load(&dir.join(DEMO_DIR))?;
        let test = KnowledgeBase::load(&dir.join(TEST_DIR))?;
        if demo.matrix.dim() != test.matrix.dim() {
            return Err(KbError::Shape(format!(
                "demo dimension {} differs from test dimension {}",
                demo.matrix.dim(),
                test.matrix.dim()
            )));
        }
        Ok(Self { info, demo, test })
    }
}
