//! Accuracy, per-class metrics, confusion matrices and shot-count sweeps.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplit, IntentLabel, LabeledExample, NUM_LABELS};
use crate::lm::Gateway;
use crate::program::{classify_all, ParseStatus, Prediction, PromptProgram};
use crate::seeds::{stream_rng, streams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction matched a gold example")]
    EmptyEvaluation,
    #[error("{count} gold examples have no prediction (first: {first})")]
    MissingPredictions { count: usize, first: String },
    #[error("prediction for {0} appears more than once")]
    DuplicatePrediction(String),
    #[error("shot sweep needs at least one shot count")]
    NoShotCounts,
}

pub type Matrix5<T> = [[T; NUM_LABELS]; NUM_LABELS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when a denominator was zero and the affected value is reported as 0.
    #[serde(default)]
    pub undefined: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub model_ids: Vec<String>,
    pub program_fingerprints: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shot_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_mode: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n_examples: usize,
    pub n_correct: usize,
    pub per_class: BTreeMap<IntentLabel, ClassMetrics>,
    pub macro_f1: f64,
    /// Rows are gold labels, columns predicted labels, in canonical order.
    pub confusion: Matrix5<usize>,
    pub confusion_normalized: Matrix5<f64>,
    pub zero_support_rows: Vec<IntentLabel>,
    pub fallback_rate: f64,
    pub recovered_rate: f64,
    /// Gold examples without a prediction; excluded from every metric.
    pub missing_predictions: Vec<String>,
    /// Predictions whose id is not in the gold set; ignored.
    pub unmatched_predictions: usize,
    pub run_metadata: RunMetadata,
}

impl EvalReport {
    pub fn coverage(&self) -> f64 {
        let total = self.n_examples + self.missing_predictions.len();
        if total == 0 {
            0.0
        } else {
            self.n_examples as f64 / total as f64
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-class precision, recall and F1 from a count matrix.
pub fn class_metrics(confusion: &Matrix5<usize>) -> BTreeMap<IntentLabel, ClassMetrics> {
    IntentLabel::ALL
        .into_iter()
        .map(|label| {
            let c = label.index();
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            let metrics = ClassMetrics {
                precision: precision.unwrap_or(0.0),
                recall: recall.unwrap_or(0.0),
                f1: f1.unwrap_or(0.0),
                support,
                undefined: precision.is_none() || recall.is_none(),
            };
            (label, metrics)
        })
        .collect()
}

pub fn normalize_rows(confusion: &Matrix5<usize>) -> (Matrix5<f64>, Vec<IntentLabel>) {
    let mut out = [[0.0; NUM_LABELS]; NUM_LABELS];
    let mut zero = Vec::new();
    for (i, row) in confusion.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support == 0 {
            zero.push(IntentLabel::ALL[i]);
            continue;
        }
        for j in 0..NUM_LABELS {
            out[i][j] = row[j] as f64 / support as f64;
        }
    }
    (out, zero)
}

/// Row-normalized confusion matrix; zero-support rows stay all zero.
pub fn normalized_confusion(report: &EvalReport) -> Matrix5<f64> {
    normalize_rows(&report.confusion).0
}

/// Join predictions to gold on id and compute every metric. Gold examples
/// without a prediction are an error under `strict`, otherwise they are
/// listed in the report and left out of the metrics.
pub fn evaluate(predictions: &[Prediction], gold: &[LabeledExample], strict: bool) -> Result<EvalReport, EvalError> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.example_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.example_id.clone()));
        }
    }
    let gold_ids: HashSet<&str> = gold.iter().map(|e| e.id()).collect();
    let unmatched = predictions.iter().filter(|p| !gold_ids.contains(p.example_id.as_str())).count();

    let mut confusion = [[0usize; NUM_LABELS]; NUM_LABELS];
    let mut missing = Vec::new();
    let (mut fallback, mut recovered) = (0usize, 0usize);
    let mut model_ids = Vec::new();
    let mut fingerprints = Vec::new();
    for example in gold {
        let Some(p) = by_id.get(example.id()) else {
            missing.push(example.id().to_string());
            continue;
        };
        confusion[example.label.index()][p.label.index()] += 1;
        match p.parse_status {
            ParseStatus::Fallback => fallback += 1,
            ParseStatus::Recovered => recovered += 1,
            ParseStatus::Clean => {}
        }
        if !model_ids.contains(&p.model_id) {
            model_ids.push(p.model_id.clone());
        }
        if !fingerprints.contains(&p.program_fingerprint) {
            fingerprints.push(p.program_fingerprint.clone());
        }
    }
    if strict && !missing.is_empty() {
        return Err(EvalError::MissingPredictions {
            count: missing.len(),
            first: missing[0].clone(),
        });
    }
    let n: usize = confusion.iter().flatten().sum();
    if n == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    let n_correct: usize = (0..NUM_LABELS).map(|i| confusion[i][i]).sum();
    let per_class = class_metrics(&confusion);
    let macro_f1 = per_class.values().map(|m| m.f1).sum::<f64>() / NUM_LABELS as f64;
    let (confusion_normalized, zero_support_rows) = normalize_rows(&confusion);
    Ok(EvalReport {
        accuracy: n_correct as f64 / n as f64,
        n_examples: n,
        n_correct,
        per_class,
        macro_f1,
        confusion,
        confusion_normalized,
        zero_support_rows,
        fallback_rate: fallback as f64 / n as f64,
        recovered_rate: recovered as f64 / n as f64,
        missing_predictions: missing,
        unmatched_predictions: unmatched,
        run_metadata: RunMetadata {
            model_ids,
            program_fingerprints: fingerprints,
            ..Default::default()
        },
    })
}

/// 6 × 6 CSV: a header row and column of label names around the counts.
pub fn confusion_csv(report: &EvalReport, normalized: bool) -> String {
    let mut out = String::from("gold\\predicted");
    for label in IntentLabel::ALL {
        out.push(',');
        out.push_str(label.as_str());
    }
    out.push('\n');
    for (i, label) in IntentLabel::ALL.iter().enumerate() {
        out.push_str(label.as_str());
        for j in 0..NUM_LABELS {
            out.push(',');
            if normalized {
                out.push_str(&format!("{:.4}", report.confusion_normalized[i][j]));
            } else {
                out.push_str(&report.confusion[i][j].to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Per-class CSV: label, precision, recall, f1, support, undefined.
pub fn per_class_csv(report: &EvalReport) -> String {
    let mut out = String::from("label,precision,recall,f1,support,undefined\n");
    for (label, m) in &report.per_class {
        out.push_str(&format!(
            "{label},{:.4},{:.4},{:.4},{},{}\n",
            m.precision, m.recall, m.f1, m.support, m.undefined
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Shot sweep
// ---------------------------------------------------------------------------

pub fn shot_column_name(k: usize) -> String {
    if k == 0 {
        "Zero-Shot".to_string()
    } else {
        format!("{k}-Shot")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub shots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model_id: String,
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub shot_counts: Vec<usize>,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn accuracy(&self, model_id: &str, shots: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id)?
            .cells
            .iter()
            .find(|c| c.shots == shots)?
            .accuracy
    }

    /// One row per model, one column per shot count; failed cells are "-".
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Model");
        for k in &self.shot_counts {
            out.push(',');
            out.push_str(&shot_column_name(*k));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.model_id);
            for cell in &row.cells {
                out.push(',');
                match cell.accuracy {
                    Some(a) => out.push_str(&format!("{a:.3}")),
                    None => out.push('-'),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Demonstrations for a k-shot cell: the first k of one seeded shuffle of the
/// training split, so smaller k is always a prefix of larger k.
pub fn sweep_demos(train: &[LabeledExample], k: usize, seed: u64) -> Option<Vec<LabeledExample>> {
    if k > train.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream_rng(seed, streams::DEMO_PICK));
    Some(order[..k].iter().map(|&i| train[i].clone()).collect())
}

/// Evaluate `template` with k demonstrations for every model and every k.
/// A cell that fails is recorded with its error and the sweep continues.
pub fn shot_sweep(
    template: &PromptProgram,
    models: &[(String, &Gateway)],
    shot_counts: &[usize],
    split: &DatasetSplit,
    seed: u64,
) -> Result<SweepTable, EvalError> {
    if shot_counts.is_empty() {
        return Err(EvalError::NoShotCounts);
    }
    let targets: Vec<_> = split.val.iter().map(|e| e.instance.clone()).collect();
    let rows = models
        .iter()
        .map(|(model_id, gateway)| {
            let cells = shot_counts
                .par_iter()
                .map(|&k| {
                    let outcome = sweep_demos(&split.train, k, seed)
                        .ok_or_else(|| format!("{k} shots requested but the training split has {}", split.train.len()))
                        .and_then(|demos| {
                            let program = template.clone().with_demos(demos);
                            classify_all(&program, &targets, gateway).map_err(|e| e.to_string())
                        })
                        .and_then(|preds| evaluate(&preds, &split.val, false).map_err(|e| e.to_string()));
                    match outcome {
                        Ok(mut report) => {
                            report.run_metadata.shot_count = Some(k);
                            report.run_metadata.lm_mode = Some(gateway.mode().to_string());
                            SweepCell {
                                shots: k,
                                accuracy: Some(report.accuracy),
                                error: None,
                                report: Some(report),
                            }
                        }
                        Err(e) => {
                            log::warn!("{model_id} {k}-shot cell failed: {e}");
                            SweepCell {
                                shots: k,
                                accuracy: None,
                                error: Some(e),
                                report: None,
                            }
                        }
                    }
                })
                .collect();
            SweepRow {
                model_id: model_id.clone(),
                cells,
            }
        })
        .collect();
    Ok(SweepTable {
        shot_counts: shot_counts.to_vec(),
        seed,
        rows,
    })
}
