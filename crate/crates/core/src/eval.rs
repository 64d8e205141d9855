//! Dataset loading, pair-level metrics, reports and threshold sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::answer::{Answer, Label};
use crate::bank::{read_matrix, BankError, Embedding, EmbeddingMatrix, ReferenceBank};
use crate::comparison::Backend;
use crate::decision::Thresholds;
use crate::pair::{
    run_pairs, ConfusionPair, PairResult, PipelineConfig, PipelineError, QueryImage, TraceEvent,
};
use crate::triad::Selector;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error(transparent)]
    Matrix(#[from] BankError),
    #[error("dataset has no pairs")]
    Empty,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no result for dataset pair {0}")]
    MissingResult(String),
    #[error("result for pair {0} does not belong to the dataset")]
    UnknownResult(String),
    #[error("more than one result for pair {0}")]
    DuplicateResult(String),
    #[error("invalid sweep: {0}")]
    BadSweep(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    row: Option<usize>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    pair_id: String,
    category: String,
    question: String,
    option_a: String,
    option_b: String,
    image_1: ImageRecord,
    image_2: ImageRecord,
    answer_1: String,
    answer_2: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<ConfusionPair>,
    /// Hex SHA-256 over the dataset bytes followed by the query matrix bytes, if any.
    pub digest: String,
}

impl Dataset {
    /// Ground-truth label per image id.
    pub fn labels(&self) -> BTreeMap<String, Label> {
        self.pairs
            .iter()
            .flat_map(|p| p.images().map(|(img, l)| (img.id.clone(), l)))
            .collect()
    }
}

/// Loads a JSON-Lines dataset. Image embeddings are inline or refer to rows
/// of `query_matrix`. Image ids must be unique across the whole file.
pub fn load_dataset(path: &Path, query_matrix: Option<&Path>) -> Result<Dataset, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let matrix = match query_matrix {
        Some(p) => {
            hasher.update(fs::read(p).map_err(|source| DatasetError::Io {
                path: p.to_owned(),
                source,
            })?);
            Some(read_matrix(p)?)
        }
        None => None,
    };
    let text = String::from_utf8(bytes).map_err(|e| DatasetError::Invalid {
        line: 0,
        reason: format!("not UTF-8: {e}"),
    })?;

    let mut pairs = Vec::new();
    let mut pair_lines: HashMap<String, usize> = HashMap::new();
    let mut image_lines: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DatasetError::Invalid { line, reason };
        let rec: PairRecord = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        let label = |field: &str, v: &str| {
            Label::parse(v).ok_or_else(|| bad(format!("{field} must be \"A\" or \"B\", got {v:?}")))
        };
        let answer_1 = label("answer_1", &rec.answer_1)?;
        let answer_2 = label("answer_2", &rec.answer_2)?;
        if rec.image_1.id == rec.image_2.id {
            return Err(bad(format!(
                "image_1 and image_2 share id {:?}",
                rec.image_1.id
            )));
        }
        if let Some(first) = pair_lines.insert(rec.pair_id.clone(), line) {
            return Err(bad(format!(
                "pair_id {:?} already used on line {first}",
                rec.pair_id
            )));
        }
        for img in [&rec.image_1, &rec.image_2] {
            if let Some(first) = image_lines.insert(img.id.clone(), line) {
                return Err(bad(format!(
                    "image id {:?} already used on line {first}",
                    img.id
                )));
            }
        }
        let image_1 = query_image(rec.image_1, matrix.as_ref()).map_err(bad)?;
        let image_2 = query_image(rec.image_2, matrix.as_ref()).map_err(bad)?;
        if image_1.embedding.dim() != image_2.embedding.dim() {
            return Err(bad("image embeddings differ in dimension".into()));
        }
        let pair = ConfusionPair {
            pair_id: rec.pair_id,
            category: rec.category,
            question: rec.question,
            option_a: rec.option_a,
            option_b: rec.option_b,
            image_1,
            image_2,
            answer_1,
            answer_2,
        };
        pair.validate().map_err(|e| bad(e.to_string()))?;
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(Dataset {
        pairs,
        digest: hex::encode(hasher.finalize()),
    })
}

fn query_image(rec: ImageRecord, matrix: Option<&EmbeddingMatrix>) -> Result<QueryImage, String> {
    let values = match (rec.embedding, rec.row) {
        (Some(v), None) => v,
        (None, Some(row)) => {
            let m = matrix.ok_or_else(|| {
                format!(
                    "image {:?} uses row {row} but no query matrix was given",
                    rec.id
                )
            })?;
            m.row(row)
                .ok_or_else(|| {
                    format!(
                        "image {:?}: row {row} out of range ({} rows)",
                        rec.id, m.count
                    )
                })?
                .to_vec()
        }
        (Some(_), Some(_)) => return Err(format!("image {:?} has both embedding and row", rec.id)),
        (None, None) => return Err(format!("image {:?} has neither embedding nor row", rec.id)),
    };
    let embedding = Embedding::new(values).map_err(|e| format!("image {:?}: {e}", rec.id))?;
    Ok(QueryImage {
        id: rec.id,
        path: rec.path,
        embedding,
    })
}

/// Writes pairs with inline embeddings in the format `load_dataset` reads.
pub fn write_dataset(path: &Path, pairs: &[ConfusionPair]) -> std::io::Result<()> {
    let image = |img: &QueryImage| ImageRecord {
        id: img.id.clone(),
        path: img.path.clone(),
        embedding: Some(img.embedding.values().to_vec()),
        row: None,
    };
    let mut out = String::new();
    for p in pairs {
        let rec = PairRecord {
            pair_id: p.pair_id.clone(),
            category: p.category.clone(),
            question: p.question.clone(),
            option_a: p.option_a.clone(),
            option_b: p.option_b.clone(),
            image_1: image(&p.image_1),
            image_2: image(&p.image_2),
            answer_1: format!("{:?}", p.answer_1),
            answer_2: format!("{:?}", p.answer_2),
        };
        out.push_str(&serde_json::to_string(&rec).expect("dataset record serializes"));
        out.push('\n');
    }
    fs::write(path, out)
}

/// Exact counts behind every reported fraction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub pairs: u64,
    pub images: u64,
    pub correct_images: u64,
    pub both_correct_pairs: u64,
    pub confused_pairs: u64,
    pub abstained_images: u64,
    pub correct_nonabstained: u64,
    pub adjudicated_pairs: u64,
}

impl Counts {
    pub fn add_pair(&mut self, finals: [Answer; 2], truths: [Label; 2], adjudicated: bool) {
        let correct = [0, 1].map(|i| finals[i] == Answer::from(truths[i]));
        self.pairs += 1;
        self.images += 2;
        for i in 0..2 {
            if correct[i] {
                self.correct_images += 1;
                self.correct_nonabstained += 1;
            }
            if finals[i].is_abstain() {
                self.abstained_images += 1;
            }
        }
        if correct[0] && correct[1] {
            self.both_correct_pairs += 1;
        }
        if finals[0] == finals[1] && !finals[0].is_abstain() {
            self.confused_pairs += 1;
        }
        if adjudicated {
            self.adjudicated_pairs += 1;
        }
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub set_accuracy: f64,
    pub individual_accuracy: f64,
    pub confusion_rate: f64,
    pub abstention_rate: f64,
    pub coverage: f64,
    pub conditional_accuracy: f64,
}

impl Metrics {
    pub fn from_counts(c: &Counts) -> Self {
        let answered = c.images - c.abstained_images;
        Self {
            set_accuracy: ratio(c.both_correct_pairs, c.pairs),
            individual_accuracy: ratio(c.correct_images, c.images),
            confusion_rate: ratio(c.confused_pairs, c.pairs),
            abstention_rate: ratio(c.abstained_images, c.images),
            coverage: ratio(answered, c.images),
            conditional_accuracy: ratio(c.correct_nonabstained, answered),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub pairs: u64,
    pub set_accuracy: f64,
    pub individual_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub thresholds: Thresholds,
    pub tau_dup: f64,
    pub seed: Option<u64>,
    pub backend: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub bank_digest: String,
    pub dataset_digest: String,
    pub template_digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Metrics,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub counts: Counts,
    pub config: RunConfig,
    pub provenance: ReportProvenance,
}

/// Builds a report from per-pair counts. Config and provenance are left at
/// their defaults for the caller to fill in.
pub fn report_from_counts(overall: Counts, categories: &BTreeMap<String, Counts>) -> MetricsReport {
    MetricsReport {
        metrics: Metrics::from_counts(&overall),
        per_category: categories
            .iter()
            .map(|(k, c)| {
                (
                    k.clone(),
                    CategoryMetrics {
                        pairs: c.pairs,
                        set_accuracy: ratio(c.both_correct_pairs, c.pairs),
                        individual_accuracy: ratio(c.correct_images, c.images),
                    },
                )
            })
            .collect(),
        counts: overall,
        ..Default::default()
    }
}

/// Scores results against ground truth. Every dataset pair needs exactly one result.
pub fn compute_metrics(
    results: &[PairResult],
    dataset: &[ConfusionPair],
) -> Result<MetricsReport, EvalError> {
    let mut by_id: HashMap<&str, &PairResult> = HashMap::new();
    for r in results {
        if by_id.insert(&r.pair_id, r).is_some() {
            return Err(EvalError::DuplicateResult(r.pair_id.clone()));
        }
    }
    let known: HashMap<&str, ()> = dataset.iter().map(|p| (p.pair_id.as_str(), ())).collect();
    if let Some(r) = results
        .iter()
        .find(|r| !known.contains_key(r.pair_id.as_str()))
    {
        return Err(EvalError::UnknownResult(r.pair_id.clone()));
    }
    let mut overall = Counts::default();
    let mut categories: BTreeMap<String, Counts> = BTreeMap::new();
    for p in dataset {
        let r = by_id
            .get(p.pair_id.as_str())
            .ok_or_else(|| EvalError::MissingResult(p.pair_id.clone()))?;
        let finals = [r.final_1, r.final_2];
        let truths = [p.answer_1, p.answer_2];
        overall.add_pair(finals, truths, r.adjudicated);
        categories
            .entry(p.category.clone())
            .or_default()
            .add_pair(finals, truths, r.adjudicated);
    }
    Ok(report_from_counts(overall, &categories))
}

/// Recomputes the report from `final` trace events alone.
pub fn report_from_trace(events: &[TraceEvent]) -> MetricsReport {
    let mut overall = Counts::default();
    let mut categories: BTreeMap<String, Counts> = BTreeMap::new();
    for e in events {
        if let TraceEvent::Final {
            category,
            finals,
            truths,
            adjudicated,
            ..
        } = e
        {
            overall.add_pair(*finals, *truths, *adjudicated);
            categories.entry(category.clone()).or_default().add_pair(
                *finals,
                *truths,
                *adjudicated,
            );
        }
    }
    report_from_counts(overall, &categories)
}

pub fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let m = &self.metrics;
        let mut rows = vec![CsvRow {
            scope: "overall".into(),
            pairs: self.counts.pairs,
            set_accuracy: percent(m.set_accuracy),
            individual_accuracy: percent(m.individual_accuracy),
            confusion_rate: percent(m.confusion_rate),
            abstention_rate: percent(m.abstention_rate),
            coverage: percent(m.coverage),
            conditional_accuracy: percent(m.conditional_accuracy),
        }];
        rows.extend(self.per_category.iter().map(|(k, c)| CsvRow {
            scope: k.clone(),
            pairs: c.pairs,
            set_accuracy: percent(c.set_accuracy),
            individual_accuracy: percent(c.individual_accuracy),
            ..Default::default()
        }));
        rows
    }

    /// Percentages with two decimals: one `overall` row, then one row per category.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.csv_rows() {
            w.serialize(row)?;
        }
        Ok(String::from_utf8(
            w.into_inner()
                .map_err(|e| csv::Error::from(e.into_error()))?,
        )
        .expect("csv is UTF-8"))
    }
}

/// A rendered CSV row. Category rows leave the pair-level-only columns empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scope: String,
    pub pairs: u64,
    pub set_accuracy: String,
    pub individual_accuracy: String,
    pub confusion_rate: String,
    pub abstention_rate: String,
    pub coverage: String,
    pub conditional_accuracy: String,
}

pub fn read_report_csv(text: &str) -> Result<Vec<CsvRow>, EvalError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<CsvRow>, _>>()?)
}

/// One results line per pair (traces are written separately).
pub fn results_jsonl(results: &[PairResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).expect("results serialize"));
        out.push('\n');
    }
    out
}

pub fn read_results(path: &Path) -> Result<Vec<PairResult>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_owned(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Malformed {
                path: path.to_owned(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    P,
    M,
    T,
    Delta,
}

impl FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "p" => Ok(Self::P),
            "m" => Ok(Self::M),
            "t" => Ok(Self::T),
            "delta" => Ok(Self::Delta),
            _ => Err(format!(
                "unknown sweep parameter {s:?} (expected p, m, t or delta)"
            )),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::P => "p",
            Self::M => "m",
            Self::T => "t",
            Self::Delta => "delta",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
    pub fixed: Thresholds,
}

impl SweepSpec {
    pub fn new(
        parameter: SweepParam,
        values: Vec<f64>,
        fixed: Thresholds,
    ) -> Result<Self, EvalError> {
        let spec = Self {
            parameter,
            values,
            fixed,
        };
        if spec.values.is_empty() {
            return Err(EvalError::BadSweep("no values".into()));
        }
        if spec
            .values
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
        {
            return Err(EvalError::BadSweep(
                "values must be strictly increasing".into(),
            ));
        }
        for &v in &spec.values {
            spec.thresholds_at(v)
                .validate()
                .map_err(|e| EvalError::BadSweep(e.to_string()))?;
        }
        Ok(spec)
    }

    pub fn thresholds_at(&self, value: f64) -> Thresholds {
        let mut t = self.fixed;
        match self.parameter {
            SweepParam::P => t.p = value,
            SweepParam::M => t.m = value,
            SweepParam::T => t.t = value,
            SweepParam::Delta => t.delta = value,
        }
        t
    }
}

/// Everything a run needs besides the thresholds.
pub struct RunInputs<'a> {
    pub bank: &'a ReferenceBank,
    pub selector: &'a Selector,
    pub backend: &'a Backend,
    pub dataset: &'a Dataset,
    pub config: RunConfig,
    pub provenance: ReportProvenance,
}

/// Runs every pair at `thresholds` and scores the outcome.
pub fn evaluate_run(
    inputs: &RunInputs<'_>,
    thresholds: Thresholds,
) -> Result<(Vec<PairResult>, MetricsReport), EvalError> {
    let config = PipelineConfig { thresholds };
    let results = run_pairs(
        &config,
        inputs.bank,
        inputs.selector,
        inputs.backend,
        &inputs.dataset.pairs,
    )?;
    let mut report = compute_metrics(&results, &inputs.dataset.pairs)?;
    report.config = RunConfig {
        thresholds,
        ..inputs.config.clone()
    };
    report.provenance = inputs.provenance.clone();
    Ok((results, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
}

/// Replays a completed run at each sweep value. Pairwise comparisons must
/// come from the cache; set `replay_only` on the backend to enforce it.
pub fn sweep_thresholds(
    spec: &SweepSpec,
    inputs: &RunInputs<'_>,
) -> Result<SweepReport, EvalError> {
    let rows = spec
        .values
        .iter()
        .map(|&value| {
            let (_, report) = evaluate_run(inputs, spec.thresholds_at(value))?;
            Ok(SweepRow { value, report })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(SweepReport {
        parameter: spec.parameter,
        rows,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub parameter: String,
    pub value: String,
    pub set_accuracy: String,
    pub individual_accuracy: String,
    pub confusion_rate: String,
    pub abstention_rate: String,
    pub coverage: String,
    pub conditional_accuracy: String,
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sweep serializes");
        s.push('\n');
        s
    }

    pub fn csv_rows(&self) -> Vec<SweepCsvRow> {
        self.rows
            .iter()
            .map(|r| {
                let m = &r.report.metrics;
                SweepCsvRow {
                    parameter: self.parameter.to_string(),
                    value: r.value.to_string(),
                    set_accuracy: percent(m.set_accuracy),
                    individual_accuracy: percent(m.individual_accuracy),
                    confusion_rate: percent(m.confusion_rate),
                    abstention_rate: percent(m.abstention_rate),
                    coverage: percent(m.coverage),
                    conditional_accuracy: percent(m.conditional_accuracy),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.csv_rows() {
            w.serialize(row)?;
        }
        Ok(String::from_utf8(
            w.into_inner()
                .map_err(|e| csv::Error::from(e.into_error()))?,
        )
        .expect("csv is UTF-8"))
    }
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepCsvRow>, EvalError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<SweepCsvRow>, _>>()?)
}
