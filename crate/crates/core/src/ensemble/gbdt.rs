//! Gradient-boosted regression trees with a softmax objective.
//!
//! Each round computes class probabilities from the current scores, then fits
//! one depth-bounded tree per class to that class's gradient and hessian.
//! Leaves take the Newton step `-G / (H + lambda)`, scaled by the shrinkage.
//! Splits are exact and greedy; on one-hot meta-features every split is
//! "column is 0" versus "column is 1".

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logistic::softmax;
use super::{accuracy, argmax, EnsembleError, MetaFeatures, MetaKind, MetaModel, MetaParameters, TrainingMeta};
use crate::dataset::{ClassHistogram, IntentLabel, NUM_LABELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub rounds: usize,
    pub depth: usize,
    pub shrinkage: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
    /// Minimum loss reduction for a split.
    pub min_gain: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            rounds: 100,
            depth: 3,
            shrinkage: 0.1,
            lambda: 1.0,
            min_child_weight: 1e-6,
            min_gain: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    /// Rows with `z[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Flat tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, z: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if z[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .max()
    }
}

struct Fitter<'a> {
    x: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<TreeNode>,
}

impl Fitter<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.params.lambda)
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn build(&mut self, rows: &[usize], depth_left: usize) -> usize {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            value: self.leaf_value(g, h),
        });
        if depth_left == 0 || rows.len() < 2 {
            return at;
        }
        let parent = self.score(g, h);
        let width = self.x[rows[0]].len();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..width {
            let mut values: Vec<f64> = rows.iter().map(|&r| self.x[r][f]).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            for pair in values.windows(2) {
                let threshold = 0.5 * (pair[0] + pair[1]);
                let (mut gl, mut hl) = (0.0, 0.0);
                for &r in rows {
                    if self.x[r][f] < threshold {
                        gl += self.grad[r];
                        hl += self.hess[r];
                    }
                }
                let (gr, hr) = (g - gl, h - hl);
                if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                    continue;
                }
                let gain = self.score(gl, hl) + self.score(gr, hr) - parent;
                if gain > self.params.min_gain && best.is_none_or(|(b, _, _)| gain > b) {
                    best = Some((gain, f, threshold));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] < threshold);
        let left = self.build(&l, depth_left - 1);
        let right = self.build(&r, depth_left - 1);
        self.nodes[at] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

pub fn fit_tree(x: &[Vec<f64>], grad: &[f64], hess: &[f64], params: &GbdtParams) -> RegressionTree {
    let rows: Vec<usize> = (0..x.len()).collect();
    let mut fitter = Fitter {
        x,
        grad,
        hess,
        params,
        nodes: Vec::new(),
    };
    fitter.build(&rows, params.depth);
    RegressionTree { nodes: fitter.nodes }
}

pub fn raw_scores(
    base_scores: &[f64; NUM_LABELS],
    shrinkage: f64,
    rounds: &[Vec<RegressionTree>],
    z: &[f64],
) -> [f64; NUM_LABELS] {
    let mut s = *base_scores;
    for round in rounds {
        for (c, tree) in round.iter().enumerate() {
            s[c] += shrinkage * tree.predict(z);
        }
    }
    s
}

/// Smoothed log class priors.
fn log_priors(gold: &[IntentLabel]) -> [f64; NUM_LABELS] {
    let hist = ClassHistogram::from_labels(gold.iter().copied());
    let total = gold.len() as f64 + 0.5 * NUM_LABELS as f64;
    let mut out = [0.0; NUM_LABELS];
    for (c, count) in hist.0.iter().enumerate() {
        out[c] = ((*count as f64 + 0.5) / total).ln();
    }
    out
}

pub fn train_gbdt(features: &MetaFeatures, gold: &[IntentLabel], params: &GbdtParams) -> Result<MetaModel, EnsembleError> {
    if features.rows() < 2 {
        return Err(EnsembleError::InvalidConfig("gradient boosting needs at least two rows".into()));
    }
    if gold.len() != features.rows() {
        return Err(EnsembleError::MissingGold(format!("{} gold labels for {} rows", gold.len(), features.rows())));
    }
    if params.shrinkage.is_nan() || params.shrinkage <= 0.0 || params.lambda < 0.0 {
        return Err(EnsembleError::InvalidConfig("shrinkage must be positive and lambda non-negative".into()));
    }
    let base_scores = log_priors(gold);
    let hist = ClassHistogram::from_labels(gold.iter().copied());
    let mut warnings = Vec::new();
    let degenerate = hist.0.iter().filter(|c| **c > 0).count() == 1;
    if degenerate {
        let w = format!("every gold label is {}; the model predicts it constantly", gold[0]);
        log::warn!("{w}");
        warnings.push(w);
    }

    let x = &features.matrix;
    let mut scores: Vec<[f64; NUM_LABELS]> = vec![base_scores; x.len()];
    let mut rounds: Vec<Vec<RegressionTree>> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..if degenerate { 0 } else { params.rounds } {
        let probs: Vec<[f64; NUM_LABELS]> = scores.iter().map(softmax).collect();
        history.push(
            probs
                .iter()
                .zip(gold)
                .map(|(p, g)| -p[g.index()].max(1e-300).ln())
                .sum::<f64>()
                / x.len() as f64,
        );
        let trees: Vec<RegressionTree> = (0..NUM_LABELS)
            .into_par_iter()
            .map(|c| {
                let grad: Vec<f64> = probs
                    .iter()
                    .zip(gold)
                    .map(|(p, g)| p[c] - if g.index() == c { 1.0 } else { 0.0 })
                    .collect();
                let hess: Vec<f64> = probs.iter().map(|p| (p[c] * (1.0 - p[c])).max(1e-16)).collect();
                fit_tree(x, &grad, &hess, params)
            })
            .collect();
        for (s, z) in scores.iter_mut().zip(x) {
            for (c, tree) in trees.iter().enumerate() {
                s[c] += params.shrinkage * tree.predict(z);
            }
        }
        rounds.push(trees);
    }
    let predicted: Vec<IntentLabel> = scores.iter().map(argmax).collect();
    Ok(MetaModel {
        kind: MetaKind::Gbdt,
        column_layout: features.column_layout.clone(),
        parameters: MetaParameters::Gbdt {
            base_scores,
            shrinkage: params.shrinkage,
            rounds,
        },
        training_meta: TrainingMeta {
            seed: params.seed,
            hyperparameters: serde_json::to_value(params)?,
            loss_history: history,
            warnings,
            train_accuracy: Some(accuracy(&predicted, gold)),
            gold_histogram: Some(hist),
            ..Default::default()
        },
    })
}
