//! Citation records, the five-way intent label scheme, ingestion of the
//! line-oriented interchange format and reproducible train/validation splits.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synthetic;

/// Citation intent, in canonical order.
///
/// The discriminant doubles as the column index used by confusion matrices
/// and one-hot meta-features, so the order here is load-bearing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IntentLabel {
    Background = 0,
    Basis = 1,
    Support = 2,
    Differ = 3,
    Discuss = 4,
}

pub const NUM_LABELS: usize = 5;

impl IntentLabel {
    pub const ALL: [IntentLabel; NUM_LABELS] = [
        IntentLabel::Background,
        IntentLabel::Basis,
        IntentLabel::Support,
        IntentLabel::Differ,
        IntentLabel::Discuss,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IntentLabel::Background => "Background",
            IntentLabel::Basis => "Basis",
            IntentLabel::Support => "Support",
            IntentLabel::Differ => "Differ",
            IntentLabel::Discuss => "Discuss",
        }
    }

    /// One-line description used in prompts and instruction proposals.
    pub fn definition(self) -> &'static str {
        match self {
            IntentLabel::Background => {
                "the cited work provides general background or context for the topic"
            }
            IntentLabel::Basis => {
                "the citing work directly builds on or applies the cited method, data or framework"
            }
            IntentLabel::Support => {
                "the citing work reports findings that agree with or confirm the cited work"
            }
            IntentLabel::Differ => {
                "the citing work reports findings that conflict with or differ from the cited work"
            }
            IntentLabel::Discuss => {
                "the cited work is discussed, compared or analysed in some depth"
            }
        }
    }
}

impl fmt::Display for IntentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not a citation intent label: {token:?}")]
pub struct LabelParseError {
    pub token: String,
}

/// Case-insensitive match of the trimmed token against the five canonical names.
pub fn parse_label(token: &str) -> Result<IntentLabel, LabelParseError> {
    let trimmed = token.trim();
    IntentLabel::ALL
        .into_iter()
        .find(|label| label.as_str().eq_ignore_ascii_case(trimmed))
        .ok_or_else(|| LabelParseError {
            token: token.to_string(),
        })
}

impl FromStr for IntentLabel {
    type Err = LabelParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_label(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    Human,
    LlmAssisted,
    Adjudicated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationInstance {
    pub id: String,
    pub sentence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_before: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_after: Option<String>,
    pub article_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub journal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section_hint: Option<String>,
}

impl CitationInstance {
    /// Minimal instance with only the required fields set.
    pub fn new(id: impl Into<String>, sentence: impl Into<String>, article_id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            sentence: sentence.into(),
            context_before: None,
            context_after: None,
            article_id: article_id.into(),
            journal: None,
            year: None,
            section_hint: None,
        }
    }

    /// Surrounding context joined into one string; empty when neither side is present.
    pub fn context(&self) -> String {
        let parts: Vec<&str> = [self.context_before.as_deref(), self.context_after.as_deref()]
            .into_iter()
            .flatten()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        parts.join(" [...] ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub instance: CitationInstance,
    pub label: IntentLabel,
    pub label_source: LabelSource,
}

impl LabeledExample {
    pub fn new(instance: CitationInstance, label: IntentLabel) -> Self {
        Self {
            instance,
            label,
            label_source: LabelSource::Human,
        }
    }

    pub fn id(&self) -> &str {
        &self.instance.id
    }
}

/// One line of the interchange format. Labels are optional so the same
/// shape carries both raw extraction output and curated examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(flatten)]
    pub instance: CitationInstance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<IntentLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_source: Option<LabelSource>,
}

impl From<&LabeledExample> for DatasetRecord {
    fn from(example: &LabeledExample) -> Self {
        Self {
            instance: example.instance.clone(),
            label: Some(example.label),
            label_source: Some(example.label_source),
        }
    }
}

/// Serialize labeled examples as interchange lines (one JSON object per line).
pub fn write_labeled_records<W: std::io::Write>(
    mut out: W,
    examples: &[LabeledExample],
) -> std::io::Result<()> {
    for example in examples {
        let line = serde_json::to_string(&DatasetRecord::from(example))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecordFormat {
    /// One JSON object per line.
    #[default]
    JsonLines,
    /// A single JSON array of objects, as emitted by citation extractors.
    JsonArray,
}

impl FromStr for RecordFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jsonl" | "json_lines" | "json-lines" | "ndjson" => Ok(RecordFormat::JsonLines),
            "json" | "json_array" | "json-array" => Ok(RecordFormat::JsonArray),
            other => Err(DatasetError::Format(format!("unknown record format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    /// 1-based line number for JSON lines, 1-based element index for arrays.
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestDiagnostics {
    pub accepted: usize,
    pub skipped: usize,
    pub skipped_records: Vec<SkippedRecord>,
}

impl IngestDiagnostics {
    fn skip(&mut self, position: usize, reason: impl Into<String>) {
        self.skipped += 1;
        self.skipped_records.push(SkippedRecord {
            position,
            reason: reason.into(),
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub items: Vec<T>,
    pub diagnostics: IngestDiagnostics,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("record stream is not valid {0}")]
    Format(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Line number and the decoded value, or why it could not be decoded.
type Decoded = (usize, Result<serde_json::Value, String>);

/// Decode the stream into per-record JSON values. Only stream-level problems
/// are fatal; undecodable lines become `Err` entries for the caller to skip.
fn decode_values<R: BufRead>(
    raw: R,
    format: RecordFormat,
) -> Result<Vec<Decoded>, DatasetError> {
    match format {
        RecordFormat::JsonLines => {
            let mut values = Vec::new();
            for (index, line) in raw.lines().enumerate() {
                let line = line.map_err(|e| DatasetError::Format(format!("JSON lines: {e}")))?;
                if line.trim().is_empty() {
                    continue;
                }
                let value = serde_json::from_str::<serde_json::Value>(&line).map_err(|e| e.to_string());
                values.push((index + 1, value));
            }
            Ok(values)
        }
        RecordFormat::JsonArray => {
            let mut raw = raw;
            let mut text = String::new();
            raw.read_to_string(&mut text)
                .map_err(|e| DatasetError::Format(format!("JSON array: {e}")))?;
            if text.trim().is_empty() {
                return Ok(Vec::new());
            }
            let values: Vec<serde_json::Value> = serde_json::from_str(&text)
                .map_err(|e| DatasetError::Format(format!("JSON array: {e}")))?;
            Ok(values
                .into_iter()
                .enumerate()
                .map(|(i, v)| (i + 1, Ok(v)))
                .collect())
        }
    }
}

fn decode_record(value: serde_json::Value) -> Result<DatasetRecord, String> {
    let record: DatasetRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
    if record.instance.sentence.trim().is_empty() {
        return Err("sentence is empty".to_string());
    }
    if record.instance.id.trim().is_empty() {
        return Err("id is empty".to_string());
    }
    Ok(record)
}

fn parse_records<R: BufRead>(
    raw: R,
    format: RecordFormat,
) -> Result<Parsed<(usize, DatasetRecord)>, DatasetError> {
    let mut diagnostics = IngestDiagnostics::default();
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for (position, value) in decode_values(raw, format)? {
        let record = match value.and_then(decode_record) {
            Ok(record) => record,
            Err(reason) => {
                diagnostics.skip(position, reason);
                continue;
            }
        };
        if !seen.insert(record.instance.id.clone()) {
            diagnostics.skip(position, format!("duplicate id {:?}", record.instance.id));
            continue;
        }
        items.push((position, record));
    }
    diagnostics.accepted = items.len();
    Ok(Parsed { items, diagnostics })
}

/// Parse citation instances; label fields, if present, are ignored.
pub fn parse_citation_records<R: BufRead>(
    raw: R,
    format: RecordFormat,
) -> Result<Parsed<CitationInstance>, DatasetError> {
    let parsed = parse_records(raw, format)?;
    Ok(Parsed {
        items: parsed.items.into_iter().map(|(_, r)| r.instance).collect(),
        diagnostics: parsed.diagnostics,
    })
}

/// Parse records that must carry a gold label; unlabeled ones are skipped.
pub fn parse_labeled_records<R: BufRead>(
    raw: R,
    format: RecordFormat,
) -> Result<Parsed<LabeledExample>, DatasetError> {
    let parsed = parse_records(raw, format)?;
    let mut diagnostics = parsed.diagnostics;
    let mut items = Vec::with_capacity(parsed.items.len());
    for (position, record) in parsed.items {
        match record.label {
            Some(label) => items.push(LabeledExample {
                instance: record.instance,
                label,
                label_source: record.label_source.unwrap_or_default(),
            }),
            None => diagnostics.skip(position, format!("record {:?} has no label", record.instance.id)),
        }
    }
    diagnostics.accepted = items.len();
    Ok(Parsed { items, diagnostics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub seed: u64,
    pub ratio: f64,
    pub warnings: Vec<String>,
}

fn train_size(ratio: f64, total: usize) -> usize {
    // The epsilon keeps e.g. 0.29 * 100 from flooring to 28.
    ((ratio * total as f64) + 1e-9).floor() as usize
}

fn check_split_args(examples: &[LabeledExample], ratio: f64) -> Result<(), DatasetError> {
    if examples.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    Ok(())
}

fn size_warnings(train: usize, val: usize) -> Vec<String> {
    let mut warnings = Vec::new();
    if train == 0 {
        warnings.push("train split is empty".to_string());
    }
    if val == 0 {
        warnings.push("validation split is empty".to_string());
    }
    warnings
}

/// Seeded uniform shuffle followed by a prefix split of `floor(ratio * n)` train examples.
pub fn split_dataset(examples: &[LabeledExample], ratio: f64, seed: u64) -> Result<DatasetSplit, DatasetError> {
    check_split_args(examples, ratio)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_size(ratio, examples.len());
    let train: Vec<_> = order[..n_train].iter().map(|&i| examples[i].clone()).collect();
    let val: Vec<_> = order[n_train..].iter().map(|&i| examples[i].clone()).collect();
    let warnings = size_warnings(train.len(), val.len());
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(DatasetSplit {
        train,
        val,
        seed,
        ratio,
        warnings,
    })
}

/// Stratified variant: every class lands within one example of `ratio * class_size`
/// in train while the total train size still equals `floor(ratio * n)`.
pub fn split_dataset_stratified(
    examples: &[LabeledExample],
    ratio: f64,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    check_split_args(examples, ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_LABELS];
    for (i, example) in examples.iter().enumerate() {
        by_class[example.label.index()].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    let n_train = train_size(ratio, examples.len());
    let exact: Vec<f64> = by_class.iter().map(|m| ratio * m.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let mut remaining = n_train.saturating_sub(quota.iter().sum());
    // Hand leftover slots to the largest fractional remainders, lowest class index first on ties.
    let mut by_remainder: Vec<usize> = (0..NUM_LABELS).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - quota[a] as f64;
        let rb = exact[b] - quota[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for class in by_remainder {
        if remaining == 0 {
            break;
        }
        if quota[class] < by_class[class].len() {
            quota[class] += 1;
            remaining -= 1;
        }
    }

    let mut train_idx = Vec::with_capacity(n_train);
    let mut val_idx = Vec::new();
    for (class, members) in by_class.iter().enumerate() {
        train_idx.extend_from_slice(&members[..quota[class]]);
        val_idx.extend_from_slice(&members[quota[class]..]);
    }
    train_idx.shuffle(&mut rng);
    val_idx.shuffle(&mut rng);

    let train: Vec<_> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let val: Vec<_> = val_idx.iter().map(|&i| examples[i].clone()).collect();
    let warnings = size_warnings(train.len(), val.len());
    Ok(DatasetSplit {
        train,
        val,
        seed,
        ratio,
        warnings,
    })
}

/// Per-label counts in canonical label order; every label is always present.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassHistogram(pub [usize; NUM_LABELS]);

impl ClassHistogram {
    pub fn get(&self, label: IntentLabel) -> usize {
        self.0[label.index()]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (IntentLabel, usize)> + '_ {
        IntentLabel::ALL.into_iter().map(|l| (l, self.get(l)))
    }

    pub fn from_labels<I: IntoIterator<Item = IntentLabel>>(labels: I) -> Self {
        let mut counts = [0; NUM_LABELS];
        for label in labels {
            counts[label.index()] += 1;
        }
        ClassHistogram(counts)
    }

    /// Human-readable "Background: 12 (60.0%), ..." summary.
    pub fn summary(&self) -> String {
        let total = self.total().max(1) as f64;
        self.iter()
            .map(|(l, c)| format!("{l}: {c} ({:.1}%)", 100.0 * c as f64 / total))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl Serialize for ClassHistogram {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(NUM_LABELS))?;
        for (label, count) in self.iter() {
            map.serialize_entry(label.as_str(), &count)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ClassHistogram {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = std::collections::BTreeMap::<IntentLabel, usize>::deserialize(deserializer)?;
        let mut counts = [0; NUM_LABELS];
        for (label, count) in map {
            counts[label.index()] = count;
        }
        Ok(ClassHistogram(counts))
    }
}

pub fn class_distribution(examples: &[LabeledExample]) -> ClassHistogram {
    ClassHistogram::from_labels(examples.iter().map(|e| e.label))
}
