//! Hard-label ensembles over base classifiers.
//!
//! Base predictions are collected into a [`PredictionMatrix`] (examples ×
//! models). [`majority_vote`] aggregates a row directly; stacking one-hot
//! encodes each row with [`build_meta_features`] and trains a meta-model
//! ([`logistic`] or [`gbdt`]) on it. Meta-training data should come from
//! [`out_of_fold_predictions`] so that no base prediction has seen its own
//! example.

pub mod gbdt;
pub mod logistic;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassHistogram, IntentLabel, LabeledExample, NUM_LABELS};
use crate::program::Prediction;
use crate::seeds::{stream_rng, streams};

pub use gbdt::{train_gbdt, GbdtParams, RegressionTree};
pub use logistic::{train_logistic, LogisticParams};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("prediction matrix is malformed: {0}")]
    Malformed(String),
    #[error("meta-feature layout does not match the model: expected {expected} columns, found {found}")]
    SchemaMismatch { expected: usize, found: usize },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("gold labels are required: {0}")]
    MissingGold(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("base learner {learner} failed on fold {fold}: {message}")]
    BaseLearner { learner: String, fold: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Prediction matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub model_ids: Vec<String>,
    pub example_ids: Vec<String>,
    /// `labels[m][n]` is model `n`'s label for example `m`.
    pub labels: Vec<Vec<IntentLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<IntentLabel>>,
}

impl PredictionMatrix {
    pub fn new(
        model_ids: Vec<String>,
        example_ids: Vec<String>,
        labels: Vec<Vec<IntentLabel>>,
        gold: Option<Vec<IntentLabel>>,
    ) -> Result<Self, EnsembleError> {
        let pm = Self {
            model_ids,
            example_ids,
            labels,
            gold,
        };
        pm.validate()?;
        Ok(pm)
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let malformed = |m: String| Err(EnsembleError::Malformed(m));
        if self.model_ids.is_empty() {
            return malformed("no base models".into());
        }
        if self.model_ids.iter().collect::<HashSet<_>>().len() != self.model_ids.len() {
            return malformed("model ids are not distinct".into());
        }
        if self.example_ids.iter().collect::<HashSet<_>>().len() != self.example_ids.len() {
            return malformed("example ids are not distinct".into());
        }
        if self.labels.len() != self.example_ids.len() {
            return malformed(format!("{} rows for {} examples", self.labels.len(), self.example_ids.len()));
        }
        if let Some(row) = self.labels.iter().position(|r| r.len() != self.model_ids.len()) {
            return malformed(format!("row {row} has {} labels for {} models", self.labels[row].len(), self.model_ids.len()));
        }
        if let Some(gold) = &self.gold {
            if gold.len() != self.example_ids.len() {
                return malformed(format!("{} gold labels for {} examples", gold.len(), self.example_ids.len()));
            }
        }
        Ok(())
    }

    pub fn num_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn num_examples(&self) -> usize {
        self.example_ids.len()
    }

    /// Join per-model prediction lists on example id. Rows follow the order
    /// of `gold` when given (examples lacking any model's prediction are
    /// dropped and returned), otherwise the first model's order restricted to
    /// ids every model predicted.
    pub fn from_predictions(
        columns: &[(String, Vec<Prediction>)],
        gold: Option<&[LabeledExample]>,
    ) -> Result<(Self, Vec<String>), EnsembleError> {
        if columns.is_empty() {
            return Err(EnsembleError::Malformed("no base models".into()));
        }
        let maps: Vec<HashMap<&str, IntentLabel>> = columns
            .iter()
            .map(|(_, preds)| preds.iter().map(|p| (p.example_id.as_str(), p.label)).collect())
            .collect();
        let order: Vec<(String, Option<IntentLabel>)> = match gold {
            Some(gold) => gold.iter().map(|e| (e.id().to_string(), Some(e.label))).collect(),
            None => columns[0].1.iter().map(|p| (p.example_id.clone(), None)).collect(),
        };
        let mut example_ids = Vec::new();
        let mut labels = Vec::new();
        let mut gold_labels = Vec::new();
        let mut dropped = Vec::new();
        for (id, g) in order {
            let row: Option<Vec<IntentLabel>> = maps.iter().map(|m| m.get(id.as_str()).copied()).collect();
            match row {
                Some(row) => {
                    example_ids.push(id);
                    labels.push(row);
                    gold_labels.extend(g);
                }
                None => dropped.push(id),
            }
        }
        let pm = Self::new(
            columns.iter().map(|(id, _)| id.clone()).collect(),
            example_ids,
            labels,
            gold.map(|_| gold_labels),
        )?;
        Ok((pm, dropped))
    }

    fn gold_or_err(&self) -> Result<&[IntentLabel], EnsembleError> {
        self.gold
            .as_deref()
            .ok_or_else(|| EnsembleError::MissingGold("prediction matrix has no gold column".into()))
    }

    /// Accuracy of each base model against gold, in model order.
    pub fn solo_accuracies(&self) -> Result<Vec<f64>, EnsembleError> {
        let gold = self.gold_or_err()?;
        let m = self.num_examples().max(1) as f64;
        Ok((0..self.num_models())
            .map(|n| self.labels.iter().zip(gold).filter(|(r, g)| r[n] == **g).count() as f64 / m)
            .collect())
    }

    /// Sub-matrix with the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            model_ids: self.model_ids.clone(),
            example_ids: rows.iter().map(|&r| self.example_ids[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r].clone()).collect(),
            gold: self.gold.as_ref().map(|g| rows.iter().map(|&r| g[r]).collect()),
        }
    }
}

// ---------------------------------------------------------------------------
// Majority vote
// ---------------------------------------------------------------------------

/// Label with the most votes. Ties go to the tied label predicted by the
/// earliest model in `priority` (a permutation of model indices).
pub fn majority_vote(row: &[IntentLabel], priority: &[usize]) -> IntentLabel {
    assert!(!row.is_empty(), "majority_vote needs at least one vote");
    let mut counts = [0usize; NUM_LABELS];
    for label in row {
        counts[label.index()] += 1;
    }
    let best = *counts.iter().max().expect("five labels");
    priority
        .iter()
        .map(|&n| row[n])
        .chain(row.iter().copied())
        .find(|l| counts[l.index()] == best)
        .expect("the winning label was voted for")
}

/// Model indices ordered by descending solo accuracy; equal accuracies keep
/// model order.
pub fn priority_by_accuracy(accuracies: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..accuracies.len()).collect();
    order.sort_by(|&a, &b| accuracies[b].total_cmp(&accuracies[a]).then(a.cmp(&b)));
    order
}

/// Resolve a priority list of model ids against the matrix's model order.
pub fn priority_from_ids(model_ids: &[String], priority: &[String]) -> Result<Vec<usize>, EnsembleError> {
    let mut out = Vec::with_capacity(model_ids.len());
    for id in priority {
        let n = model_ids
            .iter()
            .position(|m| m == id)
            .ok_or_else(|| EnsembleError::InvalidConfig(format!("priority names unknown model {id:?}")))?;
        if out.contains(&n) {
            return Err(EnsembleError::InvalidConfig(format!("priority lists {id:?} twice")));
        }
        out.push(n);
    }
    if out.len() != model_ids.len() {
        return Err(EnsembleError::InvalidConfig("priority must list every model exactly once".into()));
    }
    Ok(out)
}

pub fn majority_vote_all(pm: &PredictionMatrix, priority: &[usize]) -> Vec<IntentLabel> {
    pm.labels.iter().map(|row| majority_vote(row, priority)).collect()
}

// ---------------------------------------------------------------------------
// Meta-features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Column {
    pub model_id: String,
    pub label: IntentLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatures {
    pub example_ids: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub column_layout: Vec<Column>,
}

impl MetaFeatures {
    pub fn num_columns(&self) -> usize {
        self.column_layout.len()
    }

    pub fn rows(&self) -> usize {
        self.matrix.len()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            example_ids: rows.iter().map(|&r| self.example_ids[r].clone()).collect(),
            matrix: rows.iter().map(|&r| self.matrix[r].clone()).collect(),
            column_layout: self.column_layout.clone(),
        }
    }
}

pub fn column_layout(model_ids: &[String]) -> Vec<Column> {
    model_ids
        .iter()
        .flat_map(|m| {
            IntentLabel::ALL.into_iter().map(move |label| Column {
                model_id: m.clone(),
                label,
            })
        })
        .collect()
}

/// One-hot encode each row: model `n` predicting label `j` sets column `5n + j`.
pub fn build_meta_features(pm: &PredictionMatrix) -> MetaFeatures {
    let width = pm.num_models() * NUM_LABELS;
    let matrix = pm
        .labels
        .iter()
        .map(|row| {
            let mut z = vec![0.0; width];
            for (n, label) in row.iter().enumerate() {
                z[n * NUM_LABELS + label.index()] = 1.0;
            }
            z
        })
        .collect();
    MetaFeatures {
        example_ids: pm.example_ids.clone(),
        matrix,
        column_layout: column_layout(&pm.model_ids),
    }
}

/// Recover hard labels from one-hot blocks (argmax per block, first wins).
fn decode_row(z: &[f64]) -> Vec<IntentLabel> {
    z.chunks(NUM_LABELS)
        .map(|block| {
            let mut best = 0;
            for (j, v) in block.iter().enumerate() {
                if *v > block[best] {
                    best = j;
                }
            }
            IntentLabel::ALL[best]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Meta-models
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaKind {
    Majority,
    Logistic,
    Gbdt,
}

impl std::str::FromStr for MetaKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "majority" => Ok(MetaKind::Majority),
            "logistic" => Ok(MetaKind::Logistic),
            "gbdt" => Ok(MetaKind::Gbdt),
            other => Err(format!("unknown meta-model kind {other:?} (expected majority, logistic or gbdt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetaParameters {
    Majority {
        priority: Vec<usize>,
    },
    Logistic {
        /// (D+1) × 5, last row is the bias.
        weights: Vec<Vec<f64>>,
    },
    Gbdt {
        base_scores: [f64; NUM_LABELS],
        shrinkage: f64,
        /// One tree per class per round.
        rounds: Vec<Vec<RegressionTree>>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_scheme: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_histogram: Option<ClassHistogram>,
}

/// A trained meta-model; this struct is also the on-disk artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub kind: MetaKind,
    pub column_layout: Vec<Column>,
    pub parameters: MetaParameters,
    pub training_meta: TrainingMeta,
}

impl MetaModel {
    pub fn majority(model_ids: &[String], priority: Vec<usize>) -> Result<Self, EnsembleError> {
        let mut sorted = priority.clone();
        sorted.sort_unstable();
        if sorted != (0..model_ids.len()).collect::<Vec<_>>() {
            return Err(EnsembleError::InvalidConfig("priority must be a permutation of model indices".into()));
        }
        Ok(Self {
            kind: MetaKind::Majority,
            column_layout: column_layout(model_ids),
            parameters: MetaParameters::Majority { priority },
            training_meta: TrainingMeta::default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EnsembleError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnsembleError> {
        let model: MetaModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.check()?;
        Ok(model)
    }

    /// Kind and parameter shapes agree with the column layout.
    pub fn check(&self) -> Result<(), EnsembleError> {
        let d = self.column_layout.len();
        let bad = |m: String| Err(EnsembleError::Malformed(m));
        match (&self.kind, &self.parameters) {
            (MetaKind::Majority, MetaParameters::Majority { priority }) => {
                if priority.len() * NUM_LABELS != d {
                    return bad("priority length does not match the column layout".into());
                }
            }
            (MetaKind::Logistic, MetaParameters::Logistic { weights }) => {
                if weights.len() != d + 1 || weights.iter().any(|w| w.len() != NUM_LABELS) {
                    return bad(format!("logistic weights must be {} x {NUM_LABELS}", d + 1));
                }
            }
            (MetaKind::Gbdt, MetaParameters::Gbdt { rounds, .. }) => {
                if rounds.iter().any(|r| r.len() != NUM_LABELS) {
                    return bad(format!("every boosting round needs {NUM_LABELS} trees"));
                }
                if rounds.iter().flatten().any(|t| t.max_feature().is_some_and(|f| f >= d)) {
                    return bad("a tree splits on a column outside the layout".into());
                }
            }
            (kind, _) => return bad(format!("parameters do not match kind {kind:?}")),
        }
        Ok(())
    }

    /// Class scores for one feature row.
    pub fn scores(&self, z: &[f64]) -> [f64; NUM_LABELS] {
        match &self.parameters {
            MetaParameters::Majority { priority } => {
                let row = decode_row(z);
                let winner = majority_vote(&row, priority);
                let mut s = [0.0; NUM_LABELS];
                for l in &row {
                    s[l.index()] += 1.0;
                }
                // ties are settled by priority; nudge the winner so argmax agrees
                s[winner.index()] += 0.5;
                s
            }
            MetaParameters::Logistic { weights } => logistic::logits(weights, z),
            MetaParameters::Gbdt {
                base_scores,
                shrinkage,
                rounds,
            } => gbdt::raw_scores(base_scores, *shrinkage, rounds, z),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaPrediction {
    #[serde(rename = "id")]
    pub example_id: String,
    pub label: IntentLabel,
    pub scores: [f64; NUM_LABELS],
}

/// Index of the largest score; the earliest label wins ties.
pub fn argmax(scores: &[f64; NUM_LABELS]) -> IntentLabel {
    let mut best = 0;
    for j in 1..NUM_LABELS {
        if scores[j] > scores[best] {
            best = j;
        }
    }
    IntentLabel::ALL[best]
}

pub fn meta_predict(model: &MetaModel, features: &MetaFeatures) -> Result<Vec<MetaPrediction>, EnsembleError> {
    if features.column_layout != model.column_layout {
        return Err(EnsembleError::SchemaMismatch {
            expected: model.column_layout.len(),
            found: features.column_layout.len(),
        });
    }
    Ok(features
        .matrix
        .iter()
        .zip(&features.example_ids)
        .map(|(z, id)| {
            let scores = model.scores(z);
            MetaPrediction {
                example_id: id.clone(),
                label: argmax(&scores),
                scores,
            }
        })
        .collect())
}

pub fn accuracy(predicted: &[IntentLabel], gold: &[IntentLabel]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

// ---------------------------------------------------------------------------
// Out-of-fold predictions
// ---------------------------------------------------------------------------

/// Fold index for every position: a seeded shuffle, then round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, streams::FOLDS));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds.max(1);
    }
    fold
}

/// A base classifier configuration that can be fitted on one part of the
/// data and asked about another.
pub trait BaseLearner: Sync {
    fn id(&self) -> String;
    fn fit_predict(
        &self,
        train: &[LabeledExample],
        heldout: &[LabeledExample],
        fold: usize,
    ) -> Result<Vec<IntentLabel>, String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutOfFold {
    pub matrix: PredictionMatrix,
    pub fold_of: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Every example is predicted by each learner fitted on the other folds only.
pub fn out_of_fold_predictions(
    learners: &[&dyn BaseLearner],
    data: &[LabeledExample],
    folds: usize,
    seed: u64,
) -> Result<OutOfFold, EnsembleError> {
    if folds < 2 {
        return Err(EnsembleError::InvalidConfig("folds must be at least 2".into()));
    }
    if learners.is_empty() {
        return Err(EnsembleError::InvalidConfig("no base learners".into()));
    }
    if data.len() < folds {
        return Err(EnsembleError::InvalidConfig(format!("{} examples cannot fill {folds} folds", data.len())));
    }
    let fold_of = fold_assignment(data.len(), folds, seed);
    let mut labels = vec![vec![IntentLabel::Background; learners.len()]; data.len()];
    let mut warnings = Vec::new();
    for fold in 0..folds {
        let (held_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| fold_of[i] == fold);
        let train: Vec<LabeledExample> = train_idx.iter().map(|&i| data[i].clone()).collect();
        let held: Vec<LabeledExample> = held_idx.iter().map(|&i| data[i].clone()).collect();
        let hist = crate::dataset::class_distribution(&train);
        let missing: Vec<_> = hist.iter().filter(|(_, c)| *c == 0).map(|(l, _)| l.as_str()).collect();
        if !missing.is_empty() {
            let w = format!("fold {fold}: training part has no {} examples", missing.join("/"));
            log::warn!("{w}");
            warnings.push(w);
        }
        for (n, learner) in learners.iter().enumerate() {
            let predicted = learner
                .fit_predict(&train, &held, fold)
                .map_err(|message| EnsembleError::BaseLearner {
                    learner: learner.id(),
                    fold,
                    message,
                })?;
            if predicted.len() != held.len() {
                return Err(EnsembleError::BaseLearner {
                    learner: learner.id(),
                    fold,
                    message: format!("returned {} labels for {} examples", predicted.len(), held.len()),
                });
            }
            for (&i, label) in held_idx.iter().zip(predicted) {
                labels[i][n] = label;
            }
        }
    }
    let matrix = PredictionMatrix::new(
        learners.iter().map(|l| l.id()).collect(),
        data.iter().map(|e| e.id().to_string()).collect(),
        labels,
        Some(data.iter().map(|e| e.label).collect()),
    )?;
    Ok(OutOfFold {
        matrix,
        fold_of,
        warnings,
    })
}

/// Base learner backed by a prompt program: `shots` demonstrations are drawn
/// from the fold's training part with a seeded shuffle.
pub struct ProgramLearner<'a> {
    pub name: String,
    pub program: crate::program::PromptProgram,
    pub gateway: &'a crate::lm::Gateway,
    pub shots: usize,
    pub seed: u64,
}

impl BaseLearner for ProgramLearner<'_> {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn fit_predict(&self, train: &[LabeledExample], heldout: &[LabeledExample], fold: usize) -> Result<Vec<IntentLabel>, String> {
        if self.shots > train.len() {
            return Err(format!("{} shots requested, {} training examples", self.shots, train.len()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(self.seed, streams::DEMO_PICK + fold as u64));
        let program = self
            .program
            .clone()
            .with_demos(order[..self.shots].iter().map(|&i| train[i].clone()));
        let targets: Vec<_> = heldout.iter().map(|e| e.instance.clone()).collect();
        crate::program::classify_all(&program, &targets, self.gateway)
            .map(|preds| preds.into_iter().map(|p| p.label).collect())
            .map_err(|e| e.to_string())
    }
}

/// Meta-predictions for every row from a meta-model trained on the other
/// folds (a cross-validated estimate of stacking accuracy).
pub fn cross_val_meta_predict<F>(
    features: &MetaFeatures,
    gold: &[IntentLabel],
    folds: usize,
    seed: u64,
    train: F,
) -> Result<Vec<IntentLabel>, EnsembleError>
where
    F: Fn(&MetaFeatures, &[IntentLabel]) -> Result<MetaModel, EnsembleError>,
{
    if folds < 2 || features.rows() < folds {
        return Err(EnsembleError::InvalidConfig(format!("cannot cross-validate {} rows over {folds} folds", features.rows())));
    }
    let fold_of = fold_assignment(features.rows(), folds, seed);
    let mut out = vec![IntentLabel::Background; features.rows()];
    for fold in 0..folds {
        let (held, rest): (Vec<usize>, Vec<usize>) = (0..features.rows()).partition(|&i| fold_of[i] == fold);
        let rest_gold: Vec<_> = rest.iter().map(|&i| gold[i]).collect();
        let model = train(&features.select_rows(&rest), &rest_gold)?;
        for (p, &i) in meta_predict(&model, &features.select_rows(&held))?.into_iter().zip(&held) {
            out[i] = p.label;
        }
    }
    Ok(out)
}
