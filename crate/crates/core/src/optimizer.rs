//! Automated prompt search over instruction and demonstration-set candidates.
//!
//! The loop has three stages:
//!
//! 1. [`bootstrap_demos`] runs a teacher program over shuffled training
//!    examples and keeps those it labels correctly (with its reasoning) as
//!    demonstrations, producing several candidate demo sets.
//! 2. [`propose_instructions`] asks a proposer model for rewrites of a seed
//!    instruction, conditioned on the label definitions and class balance.
//! 3. [`run_trials`] samples (instruction, demo set) cells from the grid,
//!    scores each on a seeded mini-batch of the validation set and returns the
//!    best program re-scored on the full validation set.
//!
//! Every random choice draws from its own stream of the master seed, so a run
//! against a replay cache is reproducible and trials can run in parallel.

use std::collections::{HashMap, HashSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassHistogram, IntentLabel, LabeledExample, NUM_LABELS};
use crate::lm::{ChatMessage, Gateway, LmError};
use crate::program::{classify, classify_all, Demo, ProgramError, PromptProgram};
use crate::seeds::{stream_rng, streams};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("no training example qualified as a demonstration (teacher accuracy {teacher_accuracy:.3} over {evaluated} examples)")]
    BootstrapFailure { teacher_accuracy: f64, evaluated: usize },
    #[error("cannot score on an empty dataset")]
    EmptyData,
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("scoring the selected program failed: {0}")]
    Metric(String),
    #[error(transparent)]
    Program(#[from] ProgramError),
}

impl From<LmError> for OptimizerError {
    fn from(err: LmError) -> Self {
        OptimizerError::Program(ProgramError::Lm(err))
    }
}

/// Search budget. Defaults are 18 instructions, 9 demo sets of at most 6
/// bootstrapped demos and 27 trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub num_instructions: usize,
    pub num_fewshot_sets: usize,
    pub max_bootstrapped_demos: usize,
    pub num_trials: usize,
    pub eval_fraction: f64,
    pub seed: u64,
    pub balanced_demos: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            num_instructions: 18,
            num_fewshot_sets: 9,
            max_bootstrapped_demos: 6,
            num_trials: 27,
            eval_fraction: 0.25,
            seed: 0,
            balanced_demos: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |msg: &str| Err(OptimizerError::InvalidConfig(msg.to_string()));
        if self.num_instructions == 0 {
            return bad("num_instructions must be at least 1");
        }
        if self.num_fewshot_sets == 0 {
            return bad("num_fewshot_sets must be at least 1");
        }
        if self.max_bootstrapped_demos == 0 {
            return bad("max_bootstrapped_demos must be at least 1");
        }
        if self.num_trials == 0 {
            return bad("num_trials must be at least 1");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return bad("eval_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub instructions: Vec<String>,
    pub demo_sets: Vec<Vec<Demo>>,
    pub max_demos_per_set: usize,
}

impl CandidateSet {
    pub fn grid_size(&self) -> usize {
        self.instructions.len() * self.demo_sets.len()
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if self.instructions.is_empty() || self.demo_sets.is_empty() {
            return Err(OptimizerError::InvalidConfig(
                "candidate set needs at least one instruction and one demo set".into(),
            ));
        }
        if let Some((i, set)) = self
            .demo_sets
            .iter()
            .enumerate()
            .find(|(_, s)| s.len() > self.max_demos_per_set)
        {
            return Err(OptimizerError::InvalidConfig(format!(
                "demo set {i} has {} demos, limit is {}",
                set.len(),
                self.max_demos_per_set
            )));
        }
        Ok(())
    }

    /// The program for grid cell (instruction, demo set), keeping the
    /// template's signature and chain-of-thought setting.
    pub fn compose(&self, template: &PromptProgram, instruction: usize, demo_set: usize) -> PromptProgram {
        PromptProgram {
            instruction: self.instructions[instruction].clone(),
            demos: self.demo_sets[demo_set].clone(),
            signature: template.signature.clone(),
            cot_enabled: template.cot_enabled,
        }
    }
}

// ---------------------------------------------------------------------------
// Bootstrapping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub sets: Vec<Vec<Demo>>,
    /// Teacher accuracy over every example it was run on.
    pub teacher_accuracy: f64,
    pub evaluated: usize,
    /// Class histogram of each demo set, in set order.
    pub set_histograms: Vec<ClassHistogram>,
}

impl BootstrapOutcome {
    pub fn overall_histogram(&self) -> ClassHistogram {
        let mut total = [0; NUM_LABELS];
        for h in &self.set_histograms {
            for (i, c) in h.0.iter().enumerate() {
                total[i] += c;
            }
        }
        ClassHistogram(total)
    }
}

/// Bootstrap `num_sets` demonstration sets of at most `max_per_set` demos.
///
/// Each set walks its own seeded shuffle of `train`; an example qualifies when
/// the teacher's prediction matches its gold label. Teacher predictions are
/// memoized, so each training example costs at most one model call. With
/// `balanced` set, each class is first capped at `ceil(max_per_set / 5)`
/// demos and the remaining slots are then filled in shuffle order.
pub fn bootstrap_demos(
    teacher: &PromptProgram,
    train: &[LabeledExample],
    max_per_set: usize,
    num_sets: usize,
    seed: u64,
    balanced: bool,
    gateway: &Gateway,
) -> Result<BootstrapOutcome, OptimizerError> {
    if train.is_empty() {
        return Err(OptimizerError::EmptyData);
    }
    if max_per_set == 0 {
        return Err(OptimizerError::InvalidConfig("max_per_set must be at least 1".into()));
    }
    let fingerprint_teacher = teacher.clone();
    let mut verdicts: HashMap<usize, Option<Option<String>>> = HashMap::new();
    let mut correct = 0usize;
    let mut judge = |index: usize| -> Result<Option<Option<String>>, OptimizerError> {
        if let Some(v) = verdicts.get(&index) {
            return Ok(v.clone());
        }
        let example = &train[index];
        let prediction = classify(&fingerprint_teacher, &example.instance, gateway)?;
        let verdict = (prediction.label == example.label).then_some(prediction.reasoning);
        if verdict.is_some() {
            correct += 1;
        }
        verdicts.insert(index, verdict.clone());
        Ok(verdict)
    };

    let per_class_cap = max_per_set.div_ceil(NUM_LABELS);
    let mut sets = Vec::with_capacity(num_sets);
    for set_index in 0..num_sets {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(seed, streams::BOOTSTRAP + set_index as u64));
        let mut chosen: Vec<Demo> = Vec::with_capacity(max_per_set);
        let mut deferred: Vec<Demo> = Vec::new();
        let mut per_class = [0usize; NUM_LABELS];
        for index in order {
            if chosen.len() == max_per_set {
                break;
            }
            let Some(reasoning) = judge(index)? else {
                continue;
            };
            let demo = Demo {
                example: train[index].clone(),
                reasoning,
            };
            let class = demo.example.label.index();
            if balanced && per_class[class] >= per_class_cap {
                deferred.push(demo);
                continue;
            }
            per_class[class] += 1;
            chosen.push(demo);
        }
        for demo in deferred {
            if chosen.len() == max_per_set {
                break;
            }
            chosen.push(demo);
        }
        sets.push(chosen);
    }

    let evaluated = verdicts.len();
    let teacher_accuracy = correct as f64 / evaluated.max(1) as f64;
    if correct == 0 {
        return Err(OptimizerError::BootstrapFailure {
            teacher_accuracy,
            evaluated,
        });
    }
    let set_histograms = sets
        .iter()
        .map(|s| ClassHistogram::from_labels(s.iter().map(|d| d.example.label)))
        .collect();
    Ok(BootstrapOutcome {
        sets,
        teacher_accuracy,
        evaluated,
        set_histograms,
    })
}

// ---------------------------------------------------------------------------
// Instruction proposals
// ---------------------------------------------------------------------------

/// Proposer calls per candidate before falling back to a suffixed variant.
pub const PROPOSAL_RETRIES: usize = 3;

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn clean_proposal(text: &str) -> String {
    let mut body = text.trim();
    for prefix in ["Instruction:", "instruction:", "New instruction:", "**Instruction:**"] {
        if let Some(rest) = body.strip_prefix(prefix) {
            body = rest.trim();
        }
    }
    body.trim_matches(|c: char| c == '"' || c == '`' || c.is_whitespace())
        .to_string()
}

fn proposal_messages(
    seed_instruction: &str,
    dataset_summary: &str,
    accepted: &[String],
    variant: usize,
    attempt: usize,
) -> Vec<ChatMessage> {
    let mut definitions = String::new();
    for label in IntentLabel::ALL {
        definitions.push_str(&format!("- {label}: {}\n", label.definition()));
    }
    let mut previous = String::new();
    for (i, text) in accepted.iter().enumerate() {
        previous.push_str(&format!("{}. {text}\n", i + 1));
    }
    vec![
        ChatMessage::system(
            "You write task instructions for a language model that classifies the intent of citations in Turkish scholarly sentences. Reply with the new instruction only.",
        ),
        ChatMessage::user(format!(
            "Labels:\n{definitions}\nTraining data class distribution: {dataset_summary}\n\nSeed instruction:\n{seed_instruction}\n\nInstructions written so far:\n{previous}\nWrite instruction variant #{variant} (attempt {attempt}). It must differ from every instruction above.\nInstruction:"
        )),
    ]
}

/// `n` distinct instructions: the seed first, then proposer rewrites.
pub fn propose_instructions(
    seed_instruction: &str,
    dataset_summary: &str,
    n: usize,
    proposer: &Gateway,
) -> Result<Vec<String>, OptimizerError> {
    if n == 0 {
        return Err(OptimizerError::InvalidConfig("n must be at least 1".into()));
    }
    let mut accepted = vec![seed_instruction.to_string()];
    let mut seen: HashSet<String> = HashSet::from([normalize(seed_instruction)]);
    while accepted.len() < n {
        let variant = accepted.len();
        let mut last = String::new();
        let mut fresh = None;
        for attempt in 0..PROPOSAL_RETRIES {
            let mut request = proposer.request(proposal_messages(
                seed_instruction,
                dataset_summary,
                &accepted,
                variant,
                attempt,
            ));
            request.request_seed = Some((variant * PROPOSAL_RETRIES + attempt) as u64);
            let text = clean_proposal(&proposer.send(&request)?.text);
            if !text.is_empty() && !seen.contains(&normalize(&text)) {
                fresh = Some(text);
                break;
            }
            if !text.is_empty() {
                last = text;
            }
        }
        let text = fresh.unwrap_or_else(|| {
            let base = if last.is_empty() { seed_instruction.to_string() } else { last };
            let mut suffix = variant;
            loop {
                let candidate = format!("{base} (variant {suffix})");
                if !seen.contains(&normalize(&candidate)) {
                    log::warn!("proposer repeated itself for variant {variant}; using suffixed text");
                    break candidate;
                }
                suffix += n;
            }
        });
        seen.insert(normalize(&text));
        accepted.push(text);
    }
    Ok(accepted)
}

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub instruction_index: usize,
    pub demo_set_index: usize,
    pub score: f64,
    pub eval_subset_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best_program: PromptProgram,
    /// Index into `trials` of the winning cell.
    pub best_trial: usize,
    /// Winner re-scored on the full validation set.
    pub best_full_score: f64,
    pub trials: Vec<Trial>,
    pub best_score_trajectory: Vec<f64>,
    pub seed: u64,
}

impl OptimizationResult {
    pub fn best(&self) -> &Trial {
        &self.trials[self.best_trial]
    }
}

/// Decides which grid cells get evaluated.
pub trait TrialScheduler: Sync {
    fn schedule(&self, instructions: usize, demo_sets: usize, num_trials: usize, seed: u64) -> Vec<(usize, usize)>;
}

/// Uniform sampling without replacement over the grid; once every cell has
/// been drawn, further trials sample cells with replacement.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformGridScheduler;

impl TrialScheduler for UniformGridScheduler {
    fn schedule(&self, instructions: usize, demo_sets: usize, num_trials: usize, seed: u64) -> Vec<(usize, usize)> {
        let grid = instructions * demo_sets;
        let mut rng = stream_rng(seed, streams::SCHEDULE);
        let mut cells: Vec<usize> = (0..grid).collect();
        cells.shuffle(&mut rng);
        cells.truncate(num_trials.min(grid));
        while cells.len() < num_trials {
            cells.push(rng.random_range(0..grid));
        }
        cells.into_iter().map(|c| (c / demo_sets, c % demo_sets)).collect()
    }
}

/// Scoring function S(program, data) in [0, 1].
pub type Metric<'a> = dyn Fn(&PromptProgram, &[LabeledExample]) -> Result<f64, String> + Sync + 'a;

fn eval_subset(val: &[LabeledExample], fraction: f64, seed: u64, trial: usize) -> Vec<usize> {
    let size = ((fraction * val.len() as f64).ceil() as usize).clamp(1, val.len());
    if size == val.len() {
        return (0..val.len()).collect();
    }
    let mut rng = stream_rng(seed, streams::TRIAL_SUBSET + trial as u64);
    let mut picked = sample(&mut rng, val.len(), size).into_vec();
    picked.sort_unstable();
    picked
}

/// Evaluate `num_trials` grid cells and return the best program.
pub fn run_trials(
    candidates: &CandidateSet,
    template: &PromptProgram,
    val: &[LabeledExample],
    metric: &Metric<'_>,
    num_trials: usize,
    seed: u64,
    eval_fraction: f64,
) -> Result<OptimizationResult, OptimizerError> {
    run_trials_with(
        &UniformGridScheduler,
        candidates,
        template,
        val,
        metric,
        num_trials,
        seed,
        eval_fraction,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn run_trials_with(
    scheduler: &dyn TrialScheduler,
    candidates: &CandidateSet,
    template: &PromptProgram,
    val: &[LabeledExample],
    metric: &Metric<'_>,
    num_trials: usize,
    seed: u64,
    eval_fraction: f64,
) -> Result<OptimizationResult, OptimizerError> {
    candidates.validate()?;
    if num_trials == 0 {
        return Err(OptimizerError::InvalidConfig("num_trials must be at least 1".into()));
    }
    if val.is_empty() {
        return Err(OptimizerError::EmptyData);
    }
    if !(eval_fraction > 0.0 && eval_fraction <= 1.0) {
        return Err(OptimizerError::InvalidConfig("eval_fraction must lie in (0, 1]".into()));
    }

    let cells = scheduler.schedule(candidates.instructions.len(), candidates.demo_sets.len(), num_trials, seed);
    let trials: Vec<Trial> = cells
        .par_iter()
        .enumerate()
        .map(|(t, &(i, j))| {
            let subset = eval_subset(val, eval_fraction, seed, t);
            let data: Vec<LabeledExample> = subset.iter().map(|&k| val[k].clone()).collect();
            let program = candidates.compose(template, i, j);
            let (score, error) = match metric(&program, &data) {
                Ok(s) if s.is_finite() => (s, None),
                Ok(s) => (0.0, Some(format!("metric returned {s}"))),
                Err(e) => (0.0, Some(e)),
            };
            if let Some(e) = &error {
                log::warn!("trial {t} (instruction {i}, demo set {j}) failed: {e}");
            }
            Trial {
                instruction_index: i,
                demo_set_index: j,
                score,
                eval_subset_ids: data.iter().map(|e| e.id().to_string()).collect(),
                error,
            }
        })
        .collect();

    let mut best_trial = 0;
    let mut trajectory = Vec::with_capacity(trials.len());
    for (t, trial) in trials.iter().enumerate() {
        if trial.score > trials[best_trial].score {
            best_trial = t;
        }
        trajectory.push(trials[best_trial].score);
    }
    let best = &trials[best_trial];
    let best_program = candidates.compose(template, best.instruction_index, best.demo_set_index);
    let best_full_score = metric(&best_program, val).map_err(OptimizerError::Metric)?;

    Ok(OptimizationResult {
        best_program,
        best_trial,
        best_full_score,
        trials,
        best_score_trajectory: trajectory,
        seed,
    })
}

/// Accuracy of `program` on `data`.
pub fn score(program: &PromptProgram, data: &[LabeledExample], gateway: &Gateway) -> Result<f64, OptimizerError> {
    if data.is_empty() {
        return Err(OptimizerError::EmptyData);
    }
    let targets: Vec<_> = data.iter().map(|e| e.instance.clone()).collect();
    let predictions = classify_all(program, &targets, gateway)?;
    let correct = predictions
        .iter()
        .zip(data)
        .filter(|(p, e)| p.label == e.label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy metric bound to a gateway, for use with [`run_trials`].
pub fn accuracy_metric(gateway: &Gateway) -> impl Fn(&PromptProgram, &[LabeledExample]) -> Result<f64, String> + Sync + '_ {
    move |program, data| score(program, data, gateway).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Full run and report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSummary {
    pub instruction_index: usize,
    pub demo_set_index: usize,
    pub trial_score: f64,
    pub full_val_score: f64,
    pub program_fingerprint: String,
    pub program: PromptProgram,
}

/// The optimizer run artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub seed: u64,
    pub config: OptimizerConfig,
    pub model_id: String,
    pub proposer_model_id: String,
    pub teacher_accuracy: f64,
    pub demo_class_histogram: ClassHistogram,
    pub candidates: CandidateSet,
    pub trials: Vec<Trial>,
    pub best_score_trajectory: Vec<f64>,
    pub best: BestSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// Bootstrap demo sets with the zero-shot program as teacher, propose
/// instructions, then search the grid.
pub fn optimize(
    config: &OptimizerConfig,
    seed_program: &PromptProgram,
    train: &[LabeledExample],
    val: &[LabeledExample],
    gateway: &Gateway,
    proposer: &Gateway,
) -> Result<OptimizerReport, OptimizerError> {
    config.validate()?;
    let teacher = PromptProgram {
        demos: Vec::new(),
        ..seed_program.clone()
    };
    let bootstrap = bootstrap_demos(
        &teacher,
        train,
        config.max_bootstrapped_demos,
        config.num_fewshot_sets,
        config.seed,
        config.balanced_demos,
        gateway,
    )?;
    let summary = crate::dataset::class_distribution(train).summary();
    let instructions = propose_instructions(&seed_program.instruction, &summary, config.num_instructions, proposer)?;
    let candidates = CandidateSet {
        instructions,
        demo_sets: bootstrap.sets.clone(),
        max_demos_per_set: config.max_bootstrapped_demos,
    };
    let metric = accuracy_metric(gateway);
    let result = run_trials(
        &candidates,
        &teacher,
        val,
        &metric,
        config.num_trials,
        config.seed,
        config.eval_fraction,
    )?;
    let best = result.best().clone();
    Ok(OptimizerReport {
        seed: config.seed,
        config: config.clone(),
        model_id: gateway.model_id.clone(),
        proposer_model_id: proposer.model_id.clone(),
        teacher_accuracy: bootstrap.teacher_accuracy,
        demo_class_histogram: bootstrap.overall_histogram(),
        candidates,
        best_score_trajectory: result.best_score_trajectory.clone(),
        best: BestSummary {
            instruction_index: best.instruction_index,
            demo_set_index: best.demo_set_index,
            trial_score: best.score,
            full_val_score: result.best_full_score,
            program_fingerprint: result.best_program.fingerprint(),
            program: result.best_program,
        },
        trials: result.trials,
        config_digest: None,
    })
}
