//! Multinomial logistic regression trained by full-batch gradient descent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, argmax, EnsembleError, MetaFeatures, MetaKind, MetaModel, MetaParameters, TrainingMeta};
use crate::dataset::{ClassHistogram, IntentLabel, NUM_LABELS};
use crate::seeds::{stream_rng, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticParams {
    pub learning_rate: f64,
    pub epochs: usize,
    /// L2 penalty on the non-bias weights: loss += l2/2 * |W|^2.
    pub l2: f64,
    pub seed: u64,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 500,
            l2: 1e-3,
            seed: 0,
            init_scale: 0.01,
        }
    }
}

/// Class logits for one row; `weights` is (D+1) × 5 with the bias last.
pub fn logits(weights: &[Vec<f64>], z: &[f64]) -> [f64; NUM_LABELS] {
    let bias = &weights[weights.len() - 1];
    let mut out = [0.0; NUM_LABELS];
    out.copy_from_slice(bias);
    for (x, w) in z.iter().zip(weights) {
        if *x != 0.0 {
            for c in 0..NUM_LABELS {
                out[c] += x * w[c];
            }
        }
    }
    out
}

pub fn softmax(logits: &[f64; NUM_LABELS]) -> [f64; NUM_LABELS] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_LABELS];
    let mut total = 0.0;
    for c in 0..NUM_LABELS {
        p[c] = (logits[c] - max).exp();
        total += p[c];
    }
    for v in &mut p {
        *v /= total;
    }
    p
}

/// Mean cross-entropy plus the L2 term, and its gradient with respect to
/// every weight (same shape as `weights`).
pub fn loss_and_gradient(
    weights: &[Vec<f64>],
    features: &[Vec<f64>],
    gold: &[IntentLabel],
    l2: f64,
) -> (f64, Vec<Vec<f64>>) {
    let d = weights.len() - 1;
    let m = features.len() as f64;
    let mut grad = vec![vec![0.0; NUM_LABELS]; d + 1];
    let mut loss = 0.0;
    for (z, g) in features.iter().zip(gold) {
        let logit = logits(weights, z);
        let max = logit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + logit.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += log_norm - logit[g.index()];
        let mut residual = softmax(&logit);
        residual[g.index()] -= 1.0;
        for (x, row) in z.iter().zip(grad.iter_mut()) {
            if *x != 0.0 {
                for c in 0..NUM_LABELS {
                    row[c] += x * residual[c];
                }
            }
        }
        for c in 0..NUM_LABELS {
            grad[d][c] += residual[c];
        }
    }
    loss /= m;
    for row in &mut grad {
        for v in row.iter_mut() {
            *v /= m;
        }
    }
    for (w, g) in weights[..d].iter().zip(&mut grad[..d]) {
        for c in 0..NUM_LABELS {
            loss += 0.5 * l2 * w[c] * w[c];
            g[c] += l2 * w[c];
        }
    }
    (loss, grad)
}

pub fn initial_weights(d: usize, params: &LogisticParams) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(params.seed, streams::META_INIT);
    let mut w: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            (0..NUM_LABELS)
                .map(|_| {
                    if params.init_scale > 0.0 {
                        rng.random_range(-params.init_scale..params.init_scale)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    w.push(vec![0.0; NUM_LABELS]);
    w
}

pub fn train_logistic(
    features: &MetaFeatures,
    gold: &[IntentLabel],
    params: &LogisticParams,
) -> Result<MetaModel, EnsembleError> {
    if features.rows() == 0 {
        return Err(EnsembleError::InvalidConfig("no training rows".into()));
    }
    if gold.len() != features.rows() {
        return Err(EnsembleError::MissingGold(format!("{} gold labels for {} rows", gold.len(), features.rows())));
    }
    if params.learning_rate.is_nan() || params.learning_rate <= 0.0 || params.l2 < 0.0 {
        return Err(EnsembleError::InvalidConfig("learning_rate must be positive and l2 non-negative".into()));
    }
    let mut weights = initial_weights(features.num_columns(), params);
    let mut history = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        let (loss, grad) = loss_and_gradient(&weights, &features.matrix, gold, params.l2);
        if !loss.is_finite() {
            return Err(EnsembleError::Divergence { epoch, loss });
        }
        history.push(loss);
        for (w, g) in weights.iter_mut().zip(&grad) {
            for c in 0..NUM_LABELS {
                w[c] -= params.learning_rate * g[c];
            }
        }
        if weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(EnsembleError::Divergence { epoch, loss: f64::NAN });
        }
    }
    let predicted: Vec<IntentLabel> = features.matrix.iter().map(|z| argmax(&logits(&weights, z))).collect();
    Ok(MetaModel {
        kind: MetaKind::Logistic,
        column_layout: features.column_layout.clone(),
        parameters: MetaParameters::Logistic { weights },
        training_meta: TrainingMeta {
            seed: params.seed,
            hyperparameters: serde_json::to_value(params)?,
            loss_history: history,
            train_accuracy: Some(accuracy(&predicted, gold)),
            gold_histogram: Some(ClassHistogram::from_labels(gold.iter().copied())),
            ..Default::default()
        },
    })
}
