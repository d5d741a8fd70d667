//! Gateways built from `[backends.<name>]` entries.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;
use std::time::Duration;

use ciw_core::dataset::{parse_labeled_records, IntentLabel, RecordFormat, NUM_LABELS};
use ciw_core::lm::mock::{system_text, target_text, unit_hash, OfflineBackend, ScriptedBackend};
use ciw_core::lm::{ChatBackend, Gateway, HttpBackend, HttpBackendConfig, LmMode, LmRequest, ReplayCache, RetryPolicy};

use crate::config::{BackendKind, BackendSpec, ScriptRule};
use crate::error::CliError;

const SENTENCE_PREFIX: &str = "Citation Sentence:";

/// The target sentence of an assembled classification prompt.
fn target_sentence(request: &LmRequest) -> Option<&str> {
    target_text(request)
        .lines()
        .find_map(|l| l.strip_prefix(SENTENCE_PREFIX))
        .map(str::trim)
}

fn is_proposal(request: &LmRequest) -> bool {
    system_text(request).starts_with("You write task instructions")
}

const KEYWORDS: [(IntentLabel, &[&str]); 4] = [
    (IntentLabel::Basis, &["temel al", "dayan", "izlenerek", "kullanıl", "uyarlan"]),
    (IntentLabel::Support, &["destekle", "uyumlu", "benzer şekilde", "doğrula"]),
    (IntentLabel::Differ, &["farklılık", "aksine", "çeliş", "farklı olarak"]),
    (IntentLabel::Discuss, &["tartışıl", "değerlendiril", "incelen"]),
];

pub fn keyword_label(sentence: &str) -> IntentLabel {
    let lower = sentence.to_lowercase();
    KEYWORDS
        .iter()
        .find(|(_, words)| words.iter().any(|w| lower.contains(w)))
        .map(|(label, _)| *label)
        .unwrap_or(IntentLabel::Background)
}

const EMPHASES: [&str; 6] = [
    "Pay close attention to whether results are compared.",
    "Decide whether the cited method or data is actually used.",
    "Prefer Background unless the sentence gives clear evidence otherwise.",
    "Look for verbs of agreement or contradiction.",
    "Consider whether the cited work is analysed in depth.",
    "Read the surrounding context before deciding.",
];

/// Deterministic instruction rewrite for scripted proposers.
fn scripted_proposal(request: &LmRequest) -> String {
    let text = target_text(request);
    let variant = text
        .split("variant #")
        .nth(1)
        .and_then(|rest| rest.split(|c: char| !c.is_ascii_digit()).next())
        .and_then(|n| n.parse::<usize>().ok())
        .unwrap_or(0);
    let seed = text
        .split("Seed instruction:\n")
        .nth(1)
        .and_then(|rest| rest.lines().next())
        .unwrap_or("Classify the citation intent.");
    format!("Instruction: {seed} {} (#{variant})", EMPHASES[variant % EMPHASES.len()])
}

fn labeled_reply(label: IntentLabel) -> String {
    format!("Reasoning: {}\nLabel: {label}", ciw_core::program::template_reasoning(label))
}

fn load_answers(spec: &BackendSpec) -> Result<HashMap<String, IntentLabel>, CliError> {
    let path = spec.answers.as_ref().expect("validated");
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let parsed = parse_labeled_records(BufReader::new(file), RecordFormat::JsonLines)?;
    Ok(parsed
        .items
        .into_iter()
        .map(|e| (e.instance.sentence.trim().to_string(), e.label))
        .collect())
}

fn scripted(name: &str, spec: &BackendSpec) -> Result<ScriptedBackend, CliError> {
    let backend = match spec.rule {
        ScriptRule::Fixed => ScriptedBackend::fixed(spec.reply.clone().unwrap_or_default()),
        ScriptRule::Keywords => ScriptedBackend::from_fn(|r| {
            if is_proposal(r) {
                return Ok(scripted_proposal(r));
            }
            Ok(labeled_reply(keyword_label(target_sentence(r).unwrap_or_default())))
        }),
        ScriptRule::Gold => {
            let answers = load_answers(spec)?;
            let error_rate = spec.error_rate;
            let salt = name.to_string();
            ScriptedBackend::from_fn(move |r| {
                if is_proposal(r) {
                    return Ok(scripted_proposal(r));
                }
                let sentence = target_sentence(r).unwrap_or_default();
                Ok(match answers.get(sentence) {
                    Some(&gold) if unit_hash(&format!("{salt}\u{1f}{sentence}")) < error_rate => {
                        labeled_reply(IntentLabel::ALL[(gold.index() + 1) % NUM_LABELS])
                    }
                    Some(&gold) => labeled_reply(gold),
                    None => "No answer on file.".to_string(),
                })
            })
        }
    };
    Ok(backend.named(name))
}

fn http(name: &str, spec: &BackendSpec, mode: LmMode) -> Result<Arc<dyn ChatBackend>, CliError> {
    let config = match &spec.base_url {
        Some(url) => HttpBackendConfig::with_base_url(name, url),
        None => match HttpBackendConfig::from_env(name) {
            Ok(c) => c,
            // replay never reaches the network, so a missing endpoint is fine
            Err(_) if mode == LmMode::Replay => return Ok(Arc::new(OfflineBackend)),
            Err(e) => return Err(e.into()),
        },
    };
    Ok(Arc::new(HttpBackend::new(HttpBackendConfig {
        timeout: Duration::from_secs(spec.timeout_secs),
        ..config
    })))
}

pub fn gateway(name: &str, spec: &BackendSpec, mode: LmMode, cache: Arc<ReplayCache>) -> Result<Gateway, CliError> {
    let (backend, retry): (Arc<dyn ChatBackend>, RetryPolicy) = match spec.kind {
        BackendKind::Http => (
            http(name, spec, mode)?,
            RetryPolicy {
                max_attempts: spec.max_attempts,
                ..RetryPolicy::default()
            },
        ),
        BackendKind::Scripted => (Arc::new(scripted(name, spec)?), RetryPolicy::immediate(spec.max_attempts)),
    };
    let mut gw = Gateway::new(backend, spec.model_id.clone().unwrap_or_else(|| name.to_string()))
        .with_cache(cache, mode)
        .with_retry(retry)
        .with_max_in_flight(spec.max_in_flight.max(1));
    gw.temperature = spec.temperature;
    gw.max_tokens = spec.max_tokens;
    Ok(gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ciw_core::dataset::synthetic::synthetic_dataset;
    use ciw_core::program::{classify, PromptProgram};

    #[test]
    fn keywords_cover_synthetic_templates() {
        let data = synthetic_dataset(300, 5);
        let correct = data.iter().filter(|e| keyword_label(&e.instance.sentence) == e.label).count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn gold_rule_answers_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gold.jsonl");
        let data = synthetic_dataset(20, 1);
        ciw_core::dataset::write_labeled_records(File::create(&path).unwrap(), &data).unwrap();
        let spec = BackendSpec {
            kind: BackendKind::Scripted,
            rule: ScriptRule::Gold,
            answers: Some(path),
            ..Default::default()
        };
        let gw = gateway("oracle", &spec, LmMode::Passthrough, Arc::new(ReplayCache::in_memory())).unwrap();
        for e in &data {
            assert_eq!(classify(&PromptProgram::new("x"), &e.instance, &gw).unwrap().label, e.label);
        }
    }
}
