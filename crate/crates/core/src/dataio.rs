//! On-disk run format.
//!
//! A run directory holds everything exported from a trained model:
//!
//! ```text
//! run/
//!   meta.json
//!   labels.csv                      sample_id,y_true,y_score
//!   covariates.csv                  sample_id,<name1>,<name2>,...
//!   ckpt_<label>/representations.csv  sample_id,h_1,...,h_d
//!   ckpt_<label>/final_layer.json     {"weights": [...], "bias": b, "link": "sigmoid"}
//! ```
//!
//! Reading is split in two steps. [`read_run_data`] parses files into a
//! [`RunData`] and only fails on problems that make the content
//! unrepresentable (missing files, unparseable numbers, unknown kinds).
//! [`validate_run`] then lists every semantic violation. [`load_run`] does
//! both and only hands out a [`LoadedRun`] when the report is empty.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::ops::Deref;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

const META_FILE: &str = "meta.json";
const LABELS_FILE: &str = "labels.csv";
const COVARIATES_FILE: &str = "covariates.csv";
const REPRESENTATIONS_FILE: &str = "representations.csv";
const FINAL_LAYER_FILE: &str = "final_layer.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    UnsupportedSchemaVersion { path: PathBuf, found: u64 },
    #[error(
        "{path}: covariate '{name}' has unknown kind '{kind}' (expected continuous or categorical)"
    )]
    UnknownCovariateKind {
        path: PathBuf,
        name: String,
        kind: String,
    },
    #[error("{path}{}: {message}", row.map(|r| format!(" row {r}")).unwrap_or_default())]
    Malformed {
        path: PathBuf,
        row: Option<usize>,
        message: String,
    },
    #[error(
        "{path} row {row}: value '{value}' of covariate '{covariate}' is not a declared category"
    )]
    UnknownCategory {
        path: PathBuf,
        row: usize,
        covariate: String,
        value: String,
    },
    #[error("invalid run:\n{0}")]
    Invalid(ValidationReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    BinaryClassification,
    Regression,
}

impl Task {
    pub fn expected_link(self) -> Link {
        match self {
            Task::BinaryClassification => Link::Sigmoid,
            Task::Regression => Link::Identity,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::BinaryClassification => f.write_str("binary-classification"),
            Task::Regression => f.write_str("regression"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Categorical,
}

impl fmt::Display for CovariateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateKind::Continuous => f.write_str("continuous"),
            CovariateKind::Categorical => f.write_str("categorical"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateDescriptor {
    pub name: String,
    pub kind: CovariateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

impl CovariateDescriptor {
    pub fn continuous(name: impl Into<String>) -> Self {
        CovariateDescriptor {
            name: name.into(),
            kind: CovariateKind::Continuous,
            categories: None,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = S>,
    ) -> Self {
        CovariateDescriptor {
            name: name.into(),
            kind: CovariateKind::Categorical,
            categories: Some(categories.into_iter().map(Into::into).collect()),
        }
    }

    pub fn categories(&self) -> &[String] {
        self.categories.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema_version: u32,
    pub run_id: String,
    pub task: Task,
    pub n: usize,
    pub d: usize,
    pub checkpoints: Vec<String>,
    pub covariates: Vec<CovariateDescriptor>,
}

/// Penultimate-layer activations for one checkpoint, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    pub checkpoint: String,
    pub values: DMatrix<f64>,
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Sigmoid,
    Identity,
}

/// The model's last linear stage `y_hat = link(h . weights + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayer {
    pub checkpoint: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub link: Link,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    pub sample_ids: Vec<String>,
    pub y_true: Vec<f64>,
    pub y_score: Vec<f64>,
}

/// One covariate column. Categorical entries are indices into the declared
/// category list; `None` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateColumn {
    Continuous(Vec<Option<f64>>),
    Categorical(Vec<Option<usize>>),
}

impl CovariateColumn {
    pub fn len(&self) -> usize {
        match self {
            CovariateColumn::Continuous(v) => v.len(),
            CovariateColumn::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_missing(&self, i: usize) -> bool {
        match self {
            CovariateColumn::Continuous(v) => v[i].is_none(),
            CovariateColumn::Categorical(v) => v[i].is_none(),
        }
    }

    /// Number of distinct non-missing values (continuous values compared bitwise).
    pub fn distinct_count(&self) -> usize {
        match self {
            CovariateColumn::Continuous(v) => v
                .iter()
                .flatten()
                .map(|x| x.to_bits())
                .collect::<HashSet<_>>()
                .len(),
            CovariateColumn::Categorical(v) => v.iter().flatten().collect::<HashSet<_>>().len(),
        }
    }

    /// Keeps only the given row indices, in the given order.
    pub fn select(&self, rows: &[usize]) -> CovariateColumn {
        match self {
            CovariateColumn::Continuous(v) => {
                CovariateColumn::Continuous(rows.iter().map(|&i| v[i]).collect())
            }
            CovariateColumn::Categorical(v) => {
                CovariateColumn::Categorical(rows.iter().map(|&i| v[i]).collect())
            }
        }
    }
}

/// Covariate columns in the order of `RunMeta::covariates`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub sample_ids: Vec<String>,
    pub columns: Vec<CovariateColumn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub representations: RepresentationMatrix,
    pub final_layer: FinalLayer,
}

impl Checkpoint {
    pub fn label(&self) -> &str {
        &self.representations.checkpoint
    }
}

/// Parsed but not yet validated run content.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub meta: RunMeta,
    /// Same order as `meta.checkpoints`.
    pub checkpoints: Vec<Checkpoint>,
    pub labels: LabelTable,
    pub covariates: CovariateTable,
}

impl RunData {
    /// Copy restricted to the given sample rows (in the given order). Final
    /// layers are shared unchanged.
    pub fn select_samples(&self, rows: &[usize]) -> RunData {
        let pick = |ids: &[String]| rows.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
        let mut meta = self.meta.clone();
        meta.n = rows.len();
        RunData {
            meta,
            checkpoints: self
                .checkpoints
                .iter()
                .map(|c| Checkpoint {
                    representations: RepresentationMatrix {
                        checkpoint: c.representations.checkpoint.clone(),
                        values: c.representations.values.select_rows(rows),
                        sample_ids: pick(&c.representations.sample_ids),
                    },
                    final_layer: c.final_layer.clone(),
                })
                .collect(),
            labels: LabelTable {
                sample_ids: pick(&self.labels.sample_ids),
                y_true: rows.iter().map(|&i| self.labels.y_true[i]).collect(),
                y_score: rows.iter().map(|&i| self.labels.y_score[i]).collect(),
            },
            covariates: CovariateTable {
                sample_ids: pick(&self.covariates.sample_ids),
                columns: self
                    .covariates
                    .columns
                    .iter()
                    .map(|c| c.select(rows))
                    .collect(),
            },
        }
    }
}

/// A run whose every invariant has been checked. Read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun(RunData);

impl LoadedRun {
    /// Validates `data`, returning the full report on failure.
    pub fn new(data: RunData) -> Result<LoadedRun, ValidationReport> {
        let report = validate_run(&data);
        if report.is_empty() {
            Ok(LoadedRun(data))
        } else {
            Err(report)
        }
    }

    pub fn data(&self) -> &RunData {
        &self.0
    }

    pub fn into_data(self) -> RunData {
        self.0
    }

    pub fn checkpoint(&self, label: &str) -> Option<&Checkpoint> {
        self.0.checkpoints.iter().find(|c| c.label() == label)
    }

    /// The last checkpoint in meta order.
    pub fn last_checkpoint(&self) -> &Checkpoint {
        self.0
            .checkpoints
            .last()
            .expect("validated run has at least one checkpoint")
    }

    pub fn covariate(&self, name: &str) -> Option<(&CovariateDescriptor, &CovariateColumn)> {
        let idx = self.0.meta.covariates.iter().position(|c| c.name == name)?;
        Some((
            &self.0.meta.covariates[idx],
            &self.0.covariates.columns[idx],
        ))
    }
}

impl Deref for LoadedRun {
    type Target = RunData;

    fn deref(&self) -> &RunData {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

fn checkpoint_dir(label: &str) -> String {
    format!("ckpt_{label}")
}

fn representations_path(label: &str) -> String {
    format!("{}/{REPRESENTATIONS_FILE}", checkpoint_dir(label))
}

fn final_layer_path(label: &str) -> String {
    format!("{}/{FINAL_LAYER_FILE}", checkpoint_dir(label))
}

/// Lists every violated invariant of `run`. An empty report means valid.
pub fn validate_run(run: &RunData) -> ValidationReport {
    let mut report = ValidationReport::default();
    let meta = &run.meta;

    if meta.n < 2 {
        report.push(META_FILE, format!("n must be at least 2, got {}", meta.n));
    }
    if meta.d < 1 {
        report.push(META_FILE, "d must be at least 1");
    }
    if meta.checkpoints.is_empty() {
        report.push(META_FILE, "at least one checkpoint is required");
    }
    let mut seen = HashSet::new();
    for label in &meta.checkpoints {
        if !seen.insert(label) {
            report.push(META_FILE, format!("duplicate checkpoint label '{label}'"));
        }
        if label.is_empty() || label.contains(['/', '\\']) || label == "." || label == ".." {
            report.push(
                META_FILE,
                format!("checkpoint label '{label}' is not usable as a directory name"),
            );
        }
    }
    let mut seen = HashSet::new();
    for cov in &meta.covariates {
        if !seen.insert(&cov.name) {
            report.push(
                META_FILE,
                format!("duplicate covariate name '{}'", cov.name),
            );
        }
        if cov.name.is_empty() || cov.name == "sample_id" {
            report.push(META_FILE, format!("invalid covariate name '{}'", cov.name));
        }
        match cov.kind {
            CovariateKind::Continuous => {
                if cov.categories.is_some() {
                    report.push(
                        META_FILE,
                        format!(
                            "continuous covariate '{}' must not list categories",
                            cov.name
                        ),
                    );
                }
            }
            CovariateKind::Categorical => {
                let cats = cov.categories();
                if cats.len() < 2 {
                    report.push(
                        META_FILE,
                        format!(
                            "categorical covariate '{}' must declare at least 2 categories",
                            cov.name
                        ),
                    );
                }
                if cats.iter().collect::<HashSet<_>>().len() != cats.len() {
                    report.push(
                        META_FILE,
                        format!("categorical covariate '{}' repeats a category", cov.name),
                    );
                }
                if cats.iter().any(|c| c.is_empty()) {
                    report.push(
                        META_FILE,
                        format!(
                            "categorical covariate '{}' declares an empty category (empty marks missing)",
                            cov.name
                        ),
                    );
                }
            }
        }
    }

    // labels
    let labels = &run.labels;
    check_len(&mut report, LABELS_FILE, labels.sample_ids.len(), meta.n);
    let mut ids = HashSet::new();
    for (row, id) in labels.sample_ids.iter().enumerate() {
        if !ids.insert(id) {
            report.push(
                format!("{LABELS_FILE} row {}", row + 1),
                format!("duplicate sample_id '{id}'"),
            );
        }
    }
    for (row, (&yt, &ys)) in labels.y_true.iter().zip(&labels.y_score).enumerate() {
        let loc = format!(
            "{LABELS_FILE} row {} (sample {})",
            row + 1,
            labels.sample_ids[row]
        );
        if !yt.is_finite() {
            report.push(&loc, format!("non-finite y_true {yt}"));
        } else if meta.task == Task::BinaryClassification && yt != 0.0 && yt != 1.0 {
            report.push(
                &loc,
                format!("y_true must be 0 or 1 for classification, got {yt}"),
            );
        }
        if !ys.is_finite() {
            report.push(&loc, format!("non-finite y_score {ys}"));
        }
    }
    if meta.task == Task::BinaryClassification {
        let ones = labels.y_true.iter().filter(|&&v| v == 1.0).count();
        let zeros = labels.y_true.iter().filter(|&&v| v == 0.0).count();
        if ones == 0 || zeros == 0 {
            report.push(
                LABELS_FILE,
                "classification y_true must contain both classes",
            );
        }
    }

    // checkpoints
    let labels_in_data: Vec<&str> = run.checkpoints.iter().map(|c| c.label()).collect();
    let labels_in_meta: Vec<&str> = meta.checkpoints.iter().map(String::as_str).collect();
    if labels_in_data != labels_in_meta {
        report.push(
            META_FILE,
            format!("checkpoint data {labels_in_data:?} does not match meta checkpoints {labels_in_meta:?}"),
        );
    }
    for ckpt in &run.checkpoints {
        let label = ckpt.label();
        let rep_file = representations_path(label);
        let reps = &ckpt.representations;
        check_len(&mut report, &rep_file, reps.values.nrows(), meta.n);
        if reps.values.ncols() != meta.d {
            report.push(
                &rep_file,
                format!(
                    "has {} feature columns, meta d = {}",
                    reps.values.ncols(),
                    meta.d
                ),
            );
        }
        check_alignment(&mut report, &rep_file, &reps.sample_ids, &labels.sample_ids);
        for row in 0..reps.values.nrows() {
            for col in 0..reps.values.ncols() {
                let v = reps.values[(row, col)];
                if !v.is_finite() {
                    report.push(
                        format!(
                            "{rep_file} row {} (sample {}), column h_{}",
                            row + 1,
                            reps.sample_ids.get(row).map(String::as_str).unwrap_or("?"),
                            col + 1
                        ),
                        format!("non-finite value {v}"),
                    );
                }
            }
        }

        let fl_file = final_layer_path(label);
        let fl = &ckpt.final_layer;
        if fl.checkpoint != label {
            report.push(
                &fl_file,
                format!("belongs to checkpoint '{}'", fl.checkpoint),
            );
        }
        if fl.weights.len() != meta.d {
            report.push(
                &fl_file,
                format!("has {} weights, meta d = {}", fl.weights.len(), meta.d),
            );
        }
        if fl.weights.iter().any(|w| !w.is_finite()) || !fl.bias.is_finite() {
            report.push(&fl_file, "non-finite weight or bias");
        }
        if fl.link != meta.task.expected_link() {
            report.push(
                &fl_file,
                format!("link {:?} does not match task {}", fl.link, meta.task),
            );
        }
    }

    // covariates
    let covs = &run.covariates;
    check_len(&mut report, COVARIATES_FILE, covs.sample_ids.len(), meta.n);
    check_alignment(
        &mut report,
        COVARIATES_FILE,
        &covs.sample_ids,
        &labels.sample_ids,
    );
    if covs.columns.len() != meta.covariates.len() {
        report.push(
            COVARIATES_FILE,
            format!(
                "has {} covariate columns, meta declares {}",
                covs.columns.len(),
                meta.covariates.len()
            ),
        );
    }
    for (desc, column) in meta.covariates.iter().zip(&covs.columns) {
        let loc = format!("{COVARIATES_FILE} column '{}'", desc.name);
        if column.len() != meta.n {
            report.push(
                &loc,
                format!("has {} rows, meta n = {}", column.len(), meta.n),
            );
        }
        match (desc.kind, column) {
            (CovariateKind::Continuous, CovariateColumn::Continuous(values)) => {
                for (row, v) in values.iter().enumerate() {
                    if let Some(v) = v {
                        if !v.is_finite() {
                            report.push(
                                format!(
                                    "{COVARIATES_FILE} row {}, column '{}'",
                                    row + 1,
                                    desc.name
                                ),
                                format!("non-finite value {v}"),
                            );
                        }
                    }
                }
            }
            (CovariateKind::Categorical, CovariateColumn::Categorical(codes)) => {
                let k = desc.categories().len();
                if let Some(row) = codes.iter().position(|c| c.is_some_and(|c| c >= k)) {
                    report.push(
                        format!("{COVARIATES_FILE} row {}, column '{}'", row + 1, desc.name),
                        "category index out of range",
                    );
                }
            }
            _ => report.push(
                &loc,
                format!("column data does not match kind {}", desc.kind),
            ),
        }
        if column.distinct_count() < 2 {
            report.push(&loc, "fewer than 2 distinct values");
        }
    }

    report
}

fn check_len(report: &mut ValidationReport, file: &str, got: usize, n: usize) {
    if got != n {
        report.push(
            file,
            format!("row-count mismatch: {got} rows, meta n = {n}"),
        );
    }
}

fn check_alignment(
    report: &mut ValidationReport,
    file: &str,
    ids: &[String],
    reference: &[String],
) {
    if let Some(row) = ids.iter().zip(reference).position(|(a, b)| a != b) {
        report.push(
            format!("{file} row {}", row + 1),
            format!(
                "sample_id '{}' does not match {LABELS_FILE} ('{}')",
                ids[row], reference[row]
            ),
        );
    }
}

// ---------------------------------------------------------------------------
// reading

#[derive(Deserialize)]
struct RawMeta {
    schema_version: u64,
    run_id: String,
    task: Task,
    n: usize,
    d: usize,
    checkpoints: Vec<String>,
    covariates: Vec<RawCovariate>,
}

#[derive(Deserialize)]
struct RawCovariate {
    name: String,
    kind: String,
    #[serde(default)]
    categories: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct FinalLayerFile {
    weights: Vec<f64>,
    bias: f64,
    link: Link,
}

fn read_file(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn read_meta(path: &Path) -> Result<RunMeta, DataError> {
    let text = read_file(path)?;
    // Check the version before the full shape so old/new layouts report the version first.
    let probe: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?;
    if let Some(v) = probe
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
    {
        if v != u64::from(SCHEMA_VERSION) {
            return Err(DataError::UnsupportedSchemaVersion {
                path: path.to_path_buf(),
                found: v,
            });
        }
    }
    let raw: RawMeta = serde_json::from_value(probe).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.schema_version != u64::from(SCHEMA_VERSION) {
        return Err(DataError::UnsupportedSchemaVersion {
            path: path.to_path_buf(),
            found: raw.schema_version,
        });
    }
    let covariates = raw
        .covariates
        .into_iter()
        .map(|c| {
            let kind = match c.kind.as_str() {
                "continuous" => CovariateKind::Continuous,
                "categorical" => CovariateKind::Categorical,
                _ => {
                    return Err(DataError::UnknownCovariateKind {
                        path: path.to_path_buf(),
                        name: c.name,
                        kind: c.kind,
                    })
                }
            };
            Ok(CovariateDescriptor {
                name: c.name,
                kind,
                categories: c.categories,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunMeta {
        schema_version: SCHEMA_VERSION,
        run_id: raw.run_id,
        task: raw.task,
        n: raw.n,
        d: raw.d,
        checkpoints: raw.checkpoints,
        covariates,
    })
}

/// Reads a CSV file, returning the header and all data records.
fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>), DataError> {
    let text = read_file(path)?;
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let records = reader
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(csv_err)?;
    Ok((header, records))
}

fn parse_real(path: &Path, row: usize, column: &str, field: &str) -> Result<f64, DataError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| DataError::Malformed {
            path: path.to_path_buf(),
            row: Some(row),
            message: format!("column '{column}': cannot parse '{field}' as a number"),
        })
}

fn expect_header(path: &Path, header: &[String], expected: &[String]) -> Result<(), DataError> {
    if header != expected {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            row: None,
            message: format!(
                "header {} (expected {})",
                header.join(","),
                expected.join(",")
            ),
        });
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<LabelTable, DataError> {
    let (header, records) = read_csv(path)?;
    let expected: Vec<String> = ["sample_id", "y_true", "y_score"]
        .map(String::from)
        .to_vec();
    expect_header(path, &header, &expected)?;
    let mut table = LabelTable {
        sample_ids: Vec::with_capacity(records.len()),
        y_true: Vec::with_capacity(records.len()),
        y_score: Vec::with_capacity(records.len()),
    };
    for (i, rec) in records.iter().enumerate() {
        let row = i + 1;
        table.sample_ids.push(rec[0].to_string());
        table.y_true.push(parse_real(path, row, "y_true", &rec[1])?);
        table
            .y_score
            .push(parse_real(path, row, "y_score", &rec[2])?);
    }
    Ok(table)
}

fn read_covariates(path: &Path, meta: &RunMeta) -> Result<CovariateTable, DataError> {
    let (header, records) = read_csv(path)?;
    if header.first().map(String::as_str) != Some("sample_id") {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            row: None,
            message: "first column must be sample_id".into(),
        });
    }
    let declared: HashSet<&str> = meta.covariates.iter().map(|c| c.name.as_str()).collect();
    if let Some(extra) = header[1..].iter().find(|h| !declared.contains(h.as_str())) {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            row: None,
            message: format!("column '{extra}' is not declared in {META_FILE}"),
        });
    }
    let mut columns = Vec::with_capacity(meta.covariates.len());
    for desc in &meta.covariates {
        let col =
            header
                .iter()
                .position(|h| *h == desc.name)
                .ok_or_else(|| DataError::Malformed {
                    path: path.to_path_buf(),
                    row: None,
                    message: format!("missing column for covariate '{}'", desc.name),
                })?;
        let column = match desc.kind {
            CovariateKind::Continuous => {
                let mut values = Vec::with_capacity(records.len());
                for (i, rec) in records.iter().enumerate() {
                    let field = rec[col].trim();
                    values.push(if field.is_empty() {
                        None
                    } else {
                        Some(parse_real(path, i + 1, &desc.name, field)?)
                    });
                }
                CovariateColumn::Continuous(values)
            }
            CovariateKind::Categorical => {
                let cats = desc.categories();
                let mut codes = Vec::with_capacity(records.len());
                for (i, rec) in records.iter().enumerate() {
                    let field = rec[col].trim();
                    codes.push(if field.is_empty() {
                        None
                    } else {
                        let code = cats.iter().position(|c| c == field).ok_or_else(|| {
                            DataError::UnknownCategory {
                                path: path.to_path_buf(),
                                row: i + 1,
                                covariate: desc.name.clone(),
                                value: field.to_string(),
                            }
                        })?;
                        Some(code)
                    });
                }
                CovariateColumn::Categorical(codes)
            }
        };
        columns.push(column);
    }
    Ok(CovariateTable {
        sample_ids: records.iter().map(|r| r[0].to_string()).collect(),
        columns,
    })
}

fn read_representations(
    path: &Path,
    label: &str,
    d: usize,
) -> Result<RepresentationMatrix, DataError> {
    let (header, records) = read_csv(path)?;
    let expected: Vec<String> = std::iter::once("sample_id".to_string())
        .chain((1..=d).map(|j| format!("h_{j}")))
        .collect();
    expect_header(path, &header, &expected)?;
    let mut flat = Vec::with_capacity(records.len() * d);
    let mut sample_ids = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        sample_ids.push(rec[0].to_string());
        for j in 1..=d {
            flat.push(parse_real(path, i + 1, &expected[j], &rec[j])?);
        }
    }
    Ok(RepresentationMatrix {
        checkpoint: label.to_string(),
        values: DMatrix::from_row_slice(records.len(), d, &flat),
        sample_ids,
    })
}

fn read_final_layer(path: &Path, label: &str) -> Result<FinalLayer, DataError> {
    let text = read_file(path)?;
    let raw: FinalLayerFile = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(FinalLayer {
        checkpoint: label.to_string(),
        weights: raw.weights,
        bias: raw.bias,
        link: raw.link,
    })
}

/// Parses a run directory without semantic validation.
pub fn read_run_data(dir: impl AsRef<Path>) -> Result<RunData, DataError> {
    let dir = dir.as_ref();
    let meta = read_meta(&dir.join(META_FILE))?;
    let labels = read_labels(&dir.join(LABELS_FILE))?;
    let covariates = read_covariates(&dir.join(COVARIATES_FILE), &meta)?;
    let checkpoints = meta
        .checkpoints
        .iter()
        .map(|label| {
            Ok(Checkpoint {
                representations: read_representations(
                    &dir.join(representations_path(label)),
                    label,
                    meta.d,
                )?,
                final_layer: read_final_layer(&dir.join(final_layer_path(label)), label)?,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(RunData {
        meta,
        checkpoints,
        labels,
        covariates,
    })
}

/// Reads and validates a run directory.
pub fn load_run(dir: impl AsRef<Path>) -> Result<LoadedRun, DataError> {
    LoadedRun::new(read_run_data(dir)?).map_err(DataError::Invalid)
}

// ---------------------------------------------------------------------------
// writing

/// 17 significant digits, enough to round-trip any f64.
fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<(), DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer.write_record(header).map_err(csv_err)?;
    for row in rows {
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes `run` as a run directory at `dir`, creating it if needed.
pub fn write_run(run: &LoadedRun, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = &run.meta;
    write_json(&dir.join(META_FILE), meta)?;

    let labels = &run.labels;
    write_csv(
        &dir.join(LABELS_FILE),
        &["sample_id", "y_true", "y_score"].map(String::from),
        (0..meta.n).map(|i| {
            vec![
                labels.sample_ids[i].clone(),
                fmt_real(labels.y_true[i]),
                fmt_real(labels.y_score[i]),
            ]
        }),
    )?;

    let header: Vec<String> = std::iter::once("sample_id".to_string())
        .chain(meta.covariates.iter().map(|c| c.name.clone()))
        .collect();
    let covs = &run.covariates;
    write_csv(
        &dir.join(COVARIATES_FILE),
        &header,
        (0..meta.n).map(|i| {
            std::iter::once(covs.sample_ids[i].clone())
                .chain(
                    meta.covariates
                        .iter()
                        .zip(&covs.columns)
                        .map(|(desc, col)| match col {
                            CovariateColumn::Continuous(v) => {
                                v[i].map(fmt_real).unwrap_or_default()
                            }
                            CovariateColumn::Categorical(v) => v[i]
                                .map(|c| desc.categories()[c].clone())
                                .unwrap_or_default(),
                        }),
                )
                .collect()
        }),
    )?;

    for ckpt in &run.checkpoints {
        let cdir = dir.join(checkpoint_dir(ckpt.label()));
        fs::create_dir_all(&cdir).map_err(io_err(&cdir))?;
        let reps = &ckpt.representations;
        let header: Vec<String> = std::iter::once("sample_id".to_string())
            .chain((1..=meta.d).map(|j| format!("h_{j}")))
            .collect();
        write_csv(
            &cdir.join(REPRESENTATIONS_FILE),
            &header,
            (0..meta.n).map(|i| {
                std::iter::once(reps.sample_ids[i].clone())
                    .chain(reps.values.row(i).iter().map(|&v| fmt_real(v)))
                    .collect()
            }),
        )?;
        let fl = &ckpt.final_layer;
        write_json(
            &cdir.join(FINAL_LAYER_FILE),
            &FinalLayerFile {
                weights: fl.weights.clone(),
                bias: fl.bias,
                link: fl.link,
            },
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunData {
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        RunData {
            meta: RunMeta {
                schema_version: SCHEMA_VERSION,
                run_id: "mini".into(),
                task: Task::BinaryClassification,
                n: 4,
                d: 2,
                checkpoints: vec!["final".into()],
                covariates: vec![CovariateDescriptor::categorical("sex", ["f", "m"])],
            },
            checkpoints: vec![Checkpoint {
                representations: RepresentationMatrix {
                    checkpoint: "final".into(),
                    values: DMatrix::from_row_slice(
                        4,
                        2,
                        &[0.1, 0.2, -0.3, 0.4, 1.0 / 3.0, -2.5, 7.0, 1e-17],
                    ),
                    sample_ids: ids.clone(),
                },
                final_layer: FinalLayer {
                    checkpoint: "final".into(),
                    weights: vec![0.5, -1.25],
                    bias: 0.1,
                    link: Link::Sigmoid,
                },
            }],
            labels: LabelTable {
                sample_ids: ids.clone(),
                y_true: vec![0.0, 1.0, 0.0, 1.0],
                y_score: vec![0.2, 0.7, 0.4, 0.9],
            },
            covariates: CovariateTable {
                sample_ids: ids,
                columns: vec![CovariateColumn::Categorical(vec![
                    Some(0),
                    Some(1),
                    None,
                    Some(1),
                ])],
            },
        }
    }

    #[test]
    fn minimal_fixture_is_valid() {
        assert!(validate_run(&minimal()).is_empty());
    }

    #[test]
    fn nan_activation_is_one_violation_naming_the_cell() {
        let mut run = minimal();
        run.checkpoints[0].representations.values[(2, 1)] = f64::NAN;
        let report = validate_run(&run);
        assert_eq!(report.len(), 1, "{report}");
        let v = &report.violations[0];
        assert!(v.location.contains("representations.csv row 3"), "{v}");
        assert!(v.location.contains("h_2"), "{v}");
    }

    #[test]
    fn constant_covariate_is_reported() {
        let mut run = minimal();
        run.covariates.columns[0] =
            CovariateColumn::Categorical(vec![Some(1), Some(1), None, Some(1)]);
        let report = validate_run(&run);
        assert_eq!(report.len(), 1, "{report}");
        assert_eq!(report.violations[0].message, "fewer than 2 distinct values");
    }

    #[test]
    fn misaligned_sample_ids_are_reported() {
        let mut run = minimal();
        run.covariates.sample_ids.swap(0, 1);
        let report = validate_run(&run);
        assert!(report
            .violations
            .iter()
            .any(|v| v.message.contains("does not match")));
    }

    #[test]
    fn wrong_link_and_single_class() {
        let mut run = minimal();
        run.checkpoints[0].final_layer.link = Link::Identity;
        run.labels.y_true = vec![1.0; 4];
        let report = validate_run(&run);
        assert_eq!(report.len(), 2, "{report}");
    }

    #[test]
    fn real_formatting_round_trips() {
        for v in [
            0.1,
            1.0 / 3.0,
            -2.5e-300,
            6.02214076e23,
            f64::MIN_POSITIVE,
            1e-17,
        ] {
            assert_eq!(fmt_real(v).parse::<f64>().unwrap(), v);
        }
    }
}
