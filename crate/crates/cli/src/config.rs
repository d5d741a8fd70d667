//! Run configuration: a TOML file plus command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ciw_core::dataset::RecordFormat;
use ciw_core::ensemble::{GbdtParams, LogisticParams, MetaKind};
use ciw_core::lm::LmMode;
use ciw_core::optimizer::OptimizerConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub format: RecordFormat,
    pub split: SplitConfig,
    pub backends: BTreeMap<String, BackendSpec>,
    pub lm_mode: LmMode,
    /// Replay cache journal; `<run dir>/lm_cache.jsonl` when unset.
    pub cache: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub prompt: PromptConfig,
    pub optimizer: OptimizerSettings,
    pub ensemble: EnsembleSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            format: RecordFormat::JsonLines,
            split: SplitConfig::default(),
            backends: BTreeMap::new(),
            lm_mode: LmMode::Replay,
            cache: None,
            run_dir: None,
            prompt: PromptConfig::default(),
            optimizer: OptimizerSettings::default(),
            ensemble: EnsembleSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: f64,
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            seed: 42,
            stratify: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Scripted,
}

/// How a scripted backend answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptRule {
    /// Turkish keyword heuristics.
    #[default]
    Keywords,
    /// The same reply to every request.
    Fixed,
    /// Look the target sentence up in a labeled file.
    Gold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    /// Model identifier sent to the API; the backend name when unset.
    pub model_id: Option<String>,
    /// Overrides `CIW_BASE_URL[_NAME]`.
    pub base_url: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub rule: ScriptRule,
    pub reply: Option<String>,
    pub answers: Option<PathBuf>,
    /// Fraction of targets a `gold` script answers wrongly.
    pub error_rate: f64,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            model_id: None,
            base_url: None,
            temperature: ciw_core::lm::DEFAULT_TEMPERATURE,
            max_tokens: ciw_core::lm::DEFAULT_MAX_TOKENS,
            max_in_flight: ciw_core::lm::DEFAULT_MAX_IN_FLIGHT,
            timeout_secs: 60,
            max_attempts: 3,
            rule: ScriptRule::Keywords,
            reply: None,
            answers: None,
            error_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Explicit instruction text; wins over `version`.
    pub instruction: Option<String>,
    /// `default`, `v000` or `v001`.
    pub version: String,
    pub cot: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            instruction: None,
            version: "default".to_string(),
            cot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub instructions: usize,
    pub fewshot_sets: usize,
    pub max_demos: usize,
    pub trials: usize,
    pub eval_fraction: f64,
    pub seed: u64,
    pub balanced: bool,
    pub model: Option<String>,
    pub proposer: Option<String>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            instructions: d.num_instructions,
            fewshot_sets: d.num_fewshot_sets,
            max_demos: d.max_bootstrapped_demos,
            trials: d.num_trials,
            eval_fraction: d.eval_fraction,
            seed: d.seed,
            balanced: d.balanced_demos,
            model: None,
            proposer: None,
        }
    }
}

impl OptimizerSettings {
    pub fn to_core(&self) -> OptimizerConfig {
        OptimizerConfig {
            num_instructions: self.instructions,
            num_fewshot_sets: self.fewshot_sets,
            max_bootstrapped_demos: self.max_demos,
            num_trials: self.trials,
            eval_fraction: self.eval_fraction,
            seed: self.seed,
            balanced_demos: self.balanced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    pub kind: MetaKind,
    pub folds: usize,
    pub seed: u64,
    /// Demonstrations per base program when producing out-of-fold predictions.
    pub shots: usize,
    pub logistic: LogisticParams,
    pub gbdt: GbdtParams,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        Self {
            kind: MetaKind::Logistic,
            folds: 5,
            seed: 0,
            shots: 0,
            logistic: LogisticParams::default(),
            gbdt: GbdtParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The config without where artifacts go and how models are reached
    /// (run directory, cache path, lm mode).
    pub fn digested_view(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("run_dir");
            map.remove("cache");
            map.remove("lm_mode");
        }
        value
    }

    /// SHA-256 of the canonical JSON form of [`Self::digested_view`].
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(&self.digested_view()).expect("json serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn backend(&self, name: &str) -> Result<&BackendSpec, CliError> {
        self.backends.get(name).ok_or_else(|| {
            let known: Vec<_> = self.backends.keys().map(String::as_str).collect();
            CliError::Config(format!(
                "backend {name:?} is not configured (known: {})",
                if known.is_empty() { "none".to_string() } else { known.join(", ") }
            ))
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for name in self.optimizer.model.iter().chain(&self.optimizer.proposer) {
            self.backend(name)?;
        }
        for (name, spec) in &self.backends {
            if spec.kind == BackendKind::Scripted {
                match spec.rule {
                    ScriptRule::Fixed if spec.reply.is_none() => {
                        return Err(CliError::Config(format!("backend {name:?}: rule fixed needs a reply")))
                    }
                    ScriptRule::Gold if spec.answers.is_none() => {
                        return Err(CliError::Config(format!("backend {name:?}: rule gold needs an answers file")))
                    }
                    _ => {}
                }
            }
            if !(0.0..=1.0).contains(&spec.error_rate) {
                return Err(CliError::Config(format!("backend {name:?}: error_rate must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}
