//! Few-shot chain-of-thought classification programs.
//!
//! A [`PromptProgram`] is an instruction, an ordered list of demonstrations
//! and a [`Signature`]. [`assemble_prompt`] renders it into a chat request,
//! [`parse_prediction`] turns any reply into a [`Prediction`] (it never
//! fails), and [`classify`] wires the two through a [`Gateway`].

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use parking_lot::Mutex;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{CitationInstance, DatasetRecord, IntentLabel, LabeledExample};
use crate::lm::{canonical_json, ChatMessage, Gateway, LmError, LmRequest, LmResponse};

/// Upper bound on demonstrations per prompt.
pub const DEFAULT_MAX_DEMOS: usize = 16;

/// Label assigned when a reply cannot be parsed: the majority class.
pub const FALLBACK_LABEL: IntentLabel = IntentLabel::Background;

pub const DEFAULT_INSTRUCTION: &str = "Classify the intent of the citation in the given sentence from a Turkish computer science article.";

/// Terse first-draft manual prompt.
pub const MANUAL_PROMPT_V000: &str = "What is the intent of this citation? Answer with one label.";

/// Revised manual prompt with explicit guidance on the confusable classes.
pub const MANUAL_PROMPT_V001: &str = "You are an expert in scholarly communication. Read the Turkish citation sentence and decide why the authors cite the referenced work. Choose Basis only when the citing work actually uses or builds on the cited method or data; choose Support or Differ only when results are compared, depending on whether they agree or conflict; choose Discuss when the cited work is analysed in depth; otherwise choose Background.";

pub fn manual_prompt(version: &str) -> Option<&'static str> {
    match version {
        "v000" => Some(MANUAL_PROMPT_V000),
        "v001" => Some(MANUAL_PROMPT_V001),
        _ => None,
    }
}

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("demonstration {id:?} has no sentence")]
    InvalidDemo { id: String },
    #[error("target {id:?} has no sentence")]
    EmptyTarget { id: String },
    #[error("program has {k} demonstrations, more than the limit of {max}")]
    TooManyDemos { k: usize, max: usize },
    #[error("invalid signature: {0}")]
    InvalidSignature(String),
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub input_fields: Vec<String>,
    pub output_fields: Vec<String>,
    pub task_preamble: String,
}

impl Signature {
    pub fn classification(cot: bool) -> Self {
        let mut output_fields = vec!["label".to_string()];
        if cot {
            output_fields.insert(0, "reasoning".to_string());
        }
        Self {
            input_fields: vec!["citation_sentence".into(), "context".into()],
            output_fields,
            task_preamble: "Determine the citation intent of the sentence.".into(),
        }
    }

    pub fn validate(&self, cot_enabled: bool) -> Result<(), ProgramError> {
        if !self.output_fields.iter().any(|f| f == "label") {
            return Err(ProgramError::InvalidSignature("output fields must include \"label\"".into()));
        }
        let has_reasoning = self.output_fields.iter().any(|f| f == "reasoning");
        if has_reasoning != cot_enabled {
            return Err(ProgramError::InvalidSignature(format!(
                "\"reasoning\" output field present={has_reasoning} but chain of thought enabled={cot_enabled}"
            )));
        }
        Ok(())
    }
}

/// A demonstration: a gold example plus, when bootstrapped, the teacher's reasoning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "DemoRecord", try_from = "DemoRecord")]
pub struct Demo {
    pub example: LabeledExample,
    pub reasoning: Option<String>,
}

impl Demo {
    pub fn new(example: LabeledExample) -> Self {
        Self {
            example,
            reasoning: None,
        }
    }
}

/// Serialized form of a [`Demo`]: an interchange record plus optional reasoning.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DemoRecord {
    #[serde(flatten)]
    record: DatasetRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reasoning: Option<String>,
}

impl From<Demo> for DemoRecord {
    fn from(demo: Demo) -> Self {
        DemoRecord {
            record: DatasetRecord::from(&demo.example),
            reasoning: demo.reasoning,
        }
    }
}

impl TryFrom<DemoRecord> for Demo {
    type Error = String;

    fn try_from(value: DemoRecord) -> Result<Self, Self::Error> {
        let label = value
            .record
            .label
            .ok_or_else(|| format!("demonstration {:?} has no label", value.record.instance.id))?;
        Ok(Demo {
            example: LabeledExample {
                instance: value.record.instance,
                label,
                label_source: value.record.label_source.unwrap_or_default(),
            },
            reasoning: value.reasoning,
        })
    }
}

impl From<LabeledExample> for Demo {
    fn from(example: LabeledExample) -> Self {
        Demo::new(example)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptProgram {
    pub instruction: String,
    pub demos: Vec<Demo>,
    pub signature: Signature,
    pub cot_enabled: bool,
}

impl PromptProgram {
    /// Zero-shot chain-of-thought program.
    pub fn new(instruction: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            demos: Vec::new(),
            signature: Signature::classification(true),
            cot_enabled: true,
        }
    }

    pub fn without_cot(mut self) -> Self {
        self.cot_enabled = false;
        self.signature = Signature::classification(false);
        self
    }

    pub fn with_demos<I, D>(mut self, demos: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: Into<Demo>,
    {
        self.demos = demos.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_instruction(&self, instruction: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            ..self.clone()
        }
    }

    pub fn k(&self) -> usize {
        self.demos.len()
    }

    pub fn validate(&self, max_demos: usize) -> Result<(), ProgramError> {
        self.signature.validate(self.cot_enabled)?;
        if self.demos.len() > max_demos {
            return Err(ProgramError::TooManyDemos {
                k: self.demos.len(),
                max: max_demos,
            });
        }
        for demo in &self.demos {
            if demo.example.instance.sentence.trim().is_empty() {
                return Err(ProgramError::InvalidDemo {
                    id: demo.example.instance.id.clone(),
                });
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical encoding of everything that shapes the prompt.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct DemoKey<'a> {
            id: &'a str,
            sentence: &'a str,
            context: String,
            label: IntentLabel,
            reasoning: Option<&'a str>,
        }
        #[derive(Serialize)]
        struct Key<'a> {
            instruction: &'a str,
            demos: Vec<DemoKey<'a>>,
            signature: &'a Signature,
            cot_enabled: bool,
        }
        let key = Key {
            instruction: &self.instruction,
            demos: self
                .demos
                .iter()
                .map(|d| DemoKey {
                    id: &d.example.instance.id,
                    sentence: &d.example.instance.sentence,
                    context: d.example.instance.context(),
                    label: d.example.label,
                    reasoning: d.reasoning.as_deref(),
                })
                .collect(),
            signature: &self.signature,
            cot_enabled: self.cot_enabled,
        };
        hex::encode(Sha256::digest(canonical_json(&key).as_bytes()))
    }
}

/// "citation_sentence" -> "Citation Sentence".
fn display_name(field: &str) -> String {
    field
        .split('_')
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut chars = w.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn input_value(instance: &CitationInstance, field: &str) -> String {
    let value = match field {
        "citation_sentence" | "sentence" => instance.sentence.trim().to_string(),
        "context" => instance.context(),
        "context_before" => instance.context_before.clone().unwrap_or_default(),
        "context_after" => instance.context_after.clone().unwrap_or_default(),
        "journal" => instance.journal.clone().unwrap_or_default(),
        "year" => instance.year.map(|y| y.to_string()).unwrap_or_default(),
        "section_hint" | "section" => instance.section_hint.clone().unwrap_or_default(),
        "article_id" => instance.article_id.clone(),
        _ => String::new(),
    };
    if value.is_empty() {
        "N/A".to_string()
    } else {
        value
    }
}

fn label_set() -> String {
    IntentLabel::ALL.map(|l| l.as_str()).join(", ")
}

/// Canned one-line rationale used for demos that carry no reasoning of their own.
pub fn template_reasoning(label: IntentLabel) -> String {
    let phrase = match label {
        IntentLabel::Background => "provides general background on the topic without being used or compared",
        IntentLabel::Basis => "is used as the methodological or data basis of the citing work",
        IntentLabel::Support => "reports results that the citing work confirms",
        IntentLabel::Differ => "reports results that the citing work contradicts",
        IntentLabel::Discuss => "is discussed and analysed in detail by the citing work",
    };
    format!("This citation {phrase}.")
}

fn system_message(program: &PromptProgram) -> String {
    let sig = &program.signature;
    let mut out = String::new();
    out.push_str(program.instruction.trim());
    out.push_str("\n\n");
    if !sig.task_preamble.trim().is_empty() {
        out.push_str(sig.task_preamble.trim());
        out.push_str("\n\n");
    }
    out.push_str("Input fields:\n");
    for field in &sig.input_fields {
        out.push_str(&format!("- {}\n", display_name(field)));
    }
    out.push_str("Output fields:\n");
    for field in &sig.output_fields {
        let note = match field.as_str() {
            "reasoning" => "think step by step about why the reference is cited".to_string(),
            "label" => format!("exactly one of {}", label_set()),
            _ => String::new(),
        };
        if note.is_empty() {
            out.push_str(&format!("- {}\n", display_name(field)));
        } else {
            out.push_str(&format!("- {}: {note}\n", display_name(field)));
        }
    }
    out.push_str("\nLabels:\n");
    for label in IntentLabel::ALL {
        out.push_str(&format!("- {label}: {}\n", label.definition()));
    }
    out.push_str("\nAnswer using exactly these lines:\n");
    for field in &sig.output_fields {
        out.push_str(&format!("{}: ...\n", display_name(field)));
    }
    out.trim_end().to_string()
}

fn render_inputs(signature: &Signature, instance: &CitationInstance) -> String {
    signature
        .input_fields
        .iter()
        .map(|f| format!("{}: {}", display_name(f), input_value(instance, f)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_demo_outputs(program: &PromptProgram, demo: &Demo) -> String {
    program
        .signature
        .output_fields
        .iter()
        .map(|field| {
            let value = match field.as_str() {
                "label" => demo.example.label.to_string(),
                "reasoning" => demo
                    .reasoning
                    .clone()
                    .filter(|r| !r.trim().is_empty())
                    .unwrap_or_else(|| template_reasoning(demo.example.label)),
                _ => String::new(),
            };
            format!("{}: {value}", display_name(field))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Chat messages for `program` applied to `target`: system, one user/assistant
/// pair per demonstration, then the target with its output fields blank.
pub fn assemble_messages(program: &PromptProgram, target: &CitationInstance) -> Result<Vec<ChatMessage>, ProgramError> {
    program.validate(usize::MAX)?;
    if target.sentence.trim().is_empty() {
        return Err(ProgramError::EmptyTarget { id: target.id.clone() });
    }
    let mut messages = Vec::with_capacity(2 + 2 * program.demos.len());
    messages.push(ChatMessage::system(system_message(program)));
    for demo in &program.demos {
        messages.push(ChatMessage::user(render_inputs(&program.signature, &demo.example.instance)));
        messages.push(ChatMessage::assistant(render_demo_outputs(program, demo)));
    }
    let blanks = program
        .signature
        .output_fields
        .iter()
        .map(|f| format!("{}:", display_name(f)))
        .collect::<Vec<_>>()
        .join("\n");
    messages.push(ChatMessage::user(format!(
        "{}\n\n{blanks}",
        render_inputs(&program.signature, target)
    )));
    Ok(messages)
}

/// Render the request for `target`, using the gateway's model and decoding settings.
pub fn assemble_prompt(
    program: &PromptProgram,
    target: &CitationInstance,
    gateway: &Gateway,
) -> Result<LmRequest, ProgramError> {
    Ok(gateway.request(assemble_messages(program, target)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    Recovered,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "id")]
    pub example_id: String,
    pub label: IntentLabel,
    pub parse_status: ParseStatus,
    pub model_id: String,
    pub program_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    /// Not part of the prediction file format.
    #[serde(skip)]
    pub raw_text: String,
}

fn slot_regex(field: &str) -> Regex {
    static CACHE: OnceLock<Mutex<HashMap<String, Regex>>> = OnceLock::new();
    let mut cache = CACHE.get_or_init(Default::default).lock();
    cache
        .entry(field.to_string())
        .or_insert_with(|| {
            // The field name may sit mid-line ("... Label: Basis") and carry markdown
            // decoration ("**Label:**"), but must not be the tail of a longer word.
            let name = regex::escape(&display_name(field)).replace("\\ ", "[ _]");
            Regex::new(&format!(r"(?im)(?:^|[^\p{{L}}\p{{N}}])[*_]*{name}[*_]*[ \t]*[:：][*_]*[ \t]*(.*)$"))
                .expect("slot regex")
        })
        .clone()
}

fn label_scan_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(background|basis|support|differ|discuss)\b").expect("scan regex"))
}

fn slot_label(value: &str) -> Option<IntentLabel> {
    let cleaned = value.trim().trim_matches(|c: char| "*_`\"'[]().,;:".contains(c) || c.is_whitespace());
    if let Ok(label) = crate::dataset::parse_label(cleaned) {
        return Some(label);
    }
    let first = cleaned
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())?;
    crate::dataset::parse_label(first).ok()
}

/// Total parser: slot extraction, then a single-token scan, then the fallback label.
pub fn parse_prediction(raw: &LmResponse, signature: &Signature) -> Prediction {
    let text = raw.text.as_str();

    let label_field = signature
        .output_fields
        .iter()
        .find(|f| f.as_str() == "label")
        .map(String::as_str)
        .unwrap_or("label");
    let label_re = slot_regex(label_field);
    let label_slot = label_re.captures_iter(text).last();

    let reasoning = if signature.output_fields.iter().any(|f| f == "reasoning") {
        slot_regex("reasoning").captures(text).map(|caps| {
            let value_start = caps.get(1).expect("group").start();
            let end = label_re
                .find_at(text, value_start)
                .map(|m| m.start())
                .unwrap_or(text.len());
            text[value_start..end.max(value_start)].trim().to_string()
        })
    } else {
        None
    }
    .filter(|r| !r.is_empty());

    let clean = label_slot.and_then(|caps| slot_label(caps.get(1).map_or("", |m| m.as_str())));
    let (label, parse_status) = match clean {
        Some(label) => (label, ParseStatus::Clean),
        None => {
            let hits: Vec<_> = label_scan_regex().find_iter(text).collect();
            match hits.as_slice() {
                [only] => (
                    crate::dataset::parse_label(only.as_str()).expect("scan only matches labels"),
                    ParseStatus::Recovered,
                ),
                _ => (FALLBACK_LABEL, ParseStatus::Fallback),
            }
        }
    };

    Prediction {
        example_id: String::new(),
        label,
        parse_status,
        model_id: raw.model_id.clone(),
        program_fingerprint: String::new(),
        reasoning,
        raw_text: raw.text.clone(),
    }
}

/// Classify one citation: assemble, send through the gateway, parse.
pub fn classify(program: &PromptProgram, target: &CitationInstance, gateway: &Gateway) -> Result<Prediction, ProgramError> {
    classify_with_fingerprint(program, &program.fingerprint(), target, gateway)
}

fn classify_with_fingerprint(
    program: &PromptProgram,
    fingerprint: &str,
    target: &CitationInstance,
    gateway: &Gateway,
) -> Result<Prediction, ProgramError> {
    let request = assemble_prompt(program, target, gateway)?;
    let response = gateway.send(&request)?;
    let mut prediction = parse_prediction(&response, &program.signature);
    if prediction.parse_status == ParseStatus::Fallback {
        log::debug!("{}: unparseable reply, falling back to {FALLBACK_LABEL}", target.id);
    }
    prediction.example_id = target.id.clone();
    prediction.program_fingerprint = fingerprint.to_string();
    Ok(prediction)
}

/// Classify many targets concurrently (bounded by the gateway's in-flight
/// limit); output order follows input order.
pub fn classify_all(
    program: &PromptProgram,
    targets: &[CitationInstance],
    gateway: &Gateway,
) -> Result<Vec<Prediction>, ProgramError> {
    let fingerprint = program.fingerprint();
    targets
        .par_iter()
        .map(|t| classify_with_fingerprint(program, &fingerprint, t, gateway))
        .collect()
}

pub fn write_predictions<W: Write>(mut out: W, predictions: &[Prediction]) -> std::io::Result<()> {
    for p in predictions {
        writeln!(out, "{}", serde_json::to_string(p)?)?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(input: R) -> std::io::Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1))
        })?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::synthetic_dataset;
    use crate::lm::mock::ScriptedBackend;
    use crate::lm::{request_digest, FinishReason, Role};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn response(text: &str) -> LmResponse {
        LmResponse {
            text: text.to_string(),
            model_id: "m".into(),
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
        }
    }

    fn gateway(reply: &str) -> Gateway {
        Gateway::new(Arc::new(ScriptedBackend::fixed(reply)), "mock-model")
    }

    fn sig() -> Signature {
        Signature::classification(true)
    }

    #[test]
    fn zero_shot_has_system_and_one_user_message() {
        let data = synthetic_dataset(3, 1);
        let req = assemble_prompt(&PromptProgram::new(DEFAULT_INSTRUCTION), &data[0].instance, &gateway("x")).unwrap();
        assert_eq!(req.messages.len(), 2);
        assert_eq!(req.messages[0].role, Role::System);
        assert_eq!(req.messages[1].role, Role::User);
        let system = &req.messages[0].content;
        assert!(system.starts_with(DEFAULT_INSTRUCTION));
        for label in IntentLabel::ALL {
            assert!(system.contains(label.as_str()));
        }
        assert!(req.messages[1].content.contains(&data[0].instance.sentence));
        assert!(req.messages[1].content.ends_with("Reasoning:\nLabel:"));
    }

    #[test]
    fn five_shot_renders_demos_in_order() {
        let data = synthetic_dataset(6, 2);
        let program = PromptProgram::new(DEFAULT_INSTRUCTION).with_demos(data[..5].to_vec());
        let req = assemble_prompt(&program, &data[5].instance, &gateway("x")).unwrap();
        assert_eq!(req.messages.len(), 2 + 2 * 5);
        for (i, demo) in data[..5].iter().enumerate() {
            let user = &req.messages[1 + 2 * i];
            let assistant = &req.messages[2 + 2 * i];
            assert_eq!(user.role, Role::User);
            assert!(user.content.contains(&demo.instance.sentence));
            assert_eq!(assistant.role, Role::Assistant);
            assert!(assistant.content.starts_with("Reasoning: This citation"));
            assert!(assistant.content.ends_with(&format!("Label: {}", demo.label)));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let data = synthetic_dataset(4, 3);
        let program = PromptProgram::new("x").with_demos(data[..2].to_vec());
        let gw = gateway("x");
        let a = assemble_prompt(&program, &data[3].instance, &gw).unwrap();
        let b = assemble_prompt(&program, &data[3].instance, &gw).unwrap();
        assert_eq!(request_digest(&a), request_digest(&b));
    }

    #[test]
    fn demo_without_sentence_is_rejected() {
        let mut data = synthetic_dataset(2, 4);
        data[0].instance.sentence = "  ".into();
        let program = PromptProgram::new("x").with_demos(vec![data[0].clone()]);
        assert!(matches!(
            assemble_prompt(&program, &data[1].instance, &gateway("x")),
            Err(ProgramError::InvalidDemo { .. })
        ));
    }

    #[test]
    fn bootstrapped_reasoning_replaces_template() {
        let data = synthetic_dataset(2, 5);
        let demo = Demo {
            example: data[0].clone(),
            reasoning: Some("Yöntem doğrudan kullanılmış.".into()),
        };
        let program = PromptProgram::new("x").with_demos(vec![demo]);
        let msgs = assemble_messages(&program, &data[1].instance).unwrap();
        assert!(msgs[2].content.starts_with("Reasoning: Yöntem doğrudan kullanılmış."));
        assert_ne!(program.fingerprint(), PromptProgram::new("x").with_demos(vec![data[0].clone()]).fingerprint());
    }

    #[test]
    fn without_cot_drops_reasoning() {
        let data = synthetic_dataset(2, 6);
        let program = PromptProgram::new("x").without_cot().with_demos(vec![data[0].clone()]);
        let msgs = assemble_messages(&program, &data[1].instance).unwrap();
        assert!(!msgs[2].content.contains("Reasoning"));
        assert!(msgs[3].content.ends_with("\n\nLabel:"));
        let mut bad = program.clone();
        bad.cot_enabled = true;
        assert!(matches!(bad.validate(16), Err(ProgramError::InvalidSignature(_))));
    }

    #[test]
    fn too_many_demos() {
        let data = synthetic_dataset(8, 6);
        let program = PromptProgram::new("x").with_demos(data.clone());
        assert!(matches!(program.validate(6), Err(ProgramError::TooManyDemos { k: 8, max: 6 })));
    }

    #[test]
    fn parse_clean_slot() {
        let p = parse_prediction(&response("Reasoning: cites prior method.\nLabel: Basis"), &sig());
        assert_eq!((p.label, p.parse_status), (IntentLabel::Basis, ParseStatus::Clean));
        assert_eq!(p.reasoning.as_deref(), Some("cites prior method."));
    }

    #[test]
    fn parse_inline_reasoning_and_label() {
        // The example from the contract: both slots on one line.
        let p = parse_prediction(&response("Reasoning: cites prior method. Label: Basis"), &sig());
        assert_eq!(p.label, IntentLabel::Basis);
        assert_eq!(p.parse_status, ParseStatus::Clean);
        assert_eq!(p.reasoning.as_deref(), Some("cites prior method."));
        let p = parse_prediction(&response("Relabel: Basis and Support"), &sig());
        assert_eq!(p.parse_status, ParseStatus::Fallback);
    }

    #[test]
    fn parse_recovered_single_token() {
        let p = parse_prediction(&response("I think the authors differ here from that work"), &sig());
        assert_eq!((p.label, p.parse_status), (IntentLabel::Differ, ParseStatus::Recovered));
    }

    #[test]
    fn parse_ambiguous_falls_back() {
        let text = "It could be Support, or maybe Differ.";
        assert_eq!(label_scan_regex().find_iter(text).count(), 2);
        let p = parse_prediction(&response(text), &sig());
        assert_eq!((p.label, p.parse_status), (IntentLabel::Background, ParseStatus::Fallback));
    }

    #[test]
    fn parse_markdown_and_invalid_slot() {
        let p = parse_prediction(&response("**Reasoning:** uses the dataset\n**Label:** **Basis**"), &sig());
        assert_eq!((p.label, p.parse_status), (IntentLabel::Basis, ParseStatus::Clean));
        assert_eq!(p.reasoning.as_deref(), Some("uses the dataset"));
        let p = parse_prediction(&response("Label: supporting evidence"), &sig());
        assert_eq!(p.parse_status, ParseStatus::Fallback);
        let p = parse_prediction(&response("Label: Discuss."), &sig());
        assert_eq!((p.label, p.parse_status), (IntentLabel::Discuss, ParseStatus::Clean));
        let p = parse_prediction(&response(""), &sig());
        assert_eq!(p.parse_status, ParseStatus::Fallback);
    }

    #[test]
    fn multiline_reasoning_is_captured_up_to_label() {
        let text = "Reasoning: first line\nsecond line\nLabel: Support";
        let p = parse_prediction(&response(text), &sig());
        assert_eq!(p.reasoning.as_deref(), Some("first line\nsecond line"));
        assert_eq!(p.label, IntentLabel::Support);
    }

    #[test]
    fn classify_with_mock() {
        let data = synthetic_dataset(1, 7);
        let program = PromptProgram::new("x");
        let p = classify(&program, &data[0].instance, &gateway("Label: Discuss")).unwrap();
        assert_eq!((p.label, p.parse_status), (IntentLabel::Discuss, ParseStatus::Clean));
        assert_eq!(p.example_id, data[0].instance.id);
        assert_eq!(p.program_fingerprint, program.fingerprint());
        assert_eq!(p.model_id, "mock-model");
    }

    #[test]
    fn classify_all_preserves_order() {
        let data = synthetic_dataset(40, 8);
        let targets: Vec<_> = data.iter().map(|e| e.instance.clone()).collect();
        let backend = ScriptedBackend::from_fn(|r| {
            let id = crate::lm::mock::bracket_marker(crate::lm::mock::target_text(r)).unwrap_or("").to_string();
            Ok(format!("Label: Basis\n(id {id})"))
        });
        let gw = Gateway::new(Arc::new(backend), "m");
        let preds = classify_all(&PromptProgram::new("x"), &targets, &gw).unwrap();
        for (p, t) in preds.iter().zip(&targets) {
            assert_eq!(p.example_id, t.id);
            assert!(p.raw_text.contains(&t.id));
        }
    }

    #[test]
    fn prediction_file_round_trip() {
        let p = Prediction {
            example_id: "S1".into(),
            label: IntentLabel::Differ,
            parse_status: ParseStatus::Recovered,
            model_id: "m".into(),
            program_fingerprint: "f".into(),
            reasoning: None,
            raw_text: String::new(),
        };
        let mut buf = Vec::new();
        write_predictions(&mut buf, std::slice::from_ref(&p)).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            line.trim(),
            r#"{"id":"S1","label":"Differ","parse_status":"recovered","model_id":"m","program_fingerprint":"f"}"#
        );
        assert_eq!(read_predictions(&buf[..]).unwrap(), vec![p]);
    }

    #[test]
    fn program_serializes_losslessly() {
        let data = synthetic_dataset(3, 11);
        let demo = Demo {
            example: data[0].clone(),
            reasoning: Some("uses it".into()),
        };
        let program = PromptProgram::new("x").with_demos(vec![demo, Demo::new(data[1].clone())]);
        let json = serde_json::to_string(&program).unwrap();
        let back: PromptProgram = serde_json::from_str(&json).unwrap();
        assert_eq!(back, program);
        assert_eq!(back.fingerprint(), program.fingerprint());
    }

    #[test]
    fn manual_prompts_exist() {
        assert!(manual_prompt("v000").is_some());
        assert!(manual_prompt("v001").is_some());
        assert!(manual_prompt("v002").is_none());
    }

    fn label_strategy() -> impl Strategy<Value = IntentLabel> {
        (0..5usize).prop_map(|i| IntentLabel::ALL[i])
    }

    proptest! {
        #[test]
        fn parser_is_total(text in ".{0,300}") {
            let p = parse_prediction(&response(&text), &sig());
            prop_assert!(IntentLabel::ALL.contains(&p.label));
            if p.parse_status == ParseStatus::Fallback {
                prop_assert_eq!(p.label, FALLBACK_LABEL);
            }
        }

        #[test]
        fn label_slot_round_trip(label in label_strategy()) {
            let p = parse_prediction(&response(&format!("Label: {label}")), &sig());
            prop_assert_eq!((p.label, p.parse_status), (label, ParseStatus::Clean));
        }

        #[test]
        fn demo_section_is_prefix_monotone(k in 1usize..8, seed in any::<u64>()) {
            let data = synthetic_dataset(k + 1, seed);
            let target = &data[k].instance;
            let longer = assemble_messages(&PromptProgram::new("x").with_demos(data[..k].to_vec()), target).unwrap();
            let shorter = assemble_messages(&PromptProgram::new("x").with_demos(data[..k - 1].to_vec()), target).unwrap();
            // system + demo turns of the shorter prompt are a prefix of the longer one
            let shared = shorter.len() - 1;
            prop_assert_eq!(&longer[..shared], &shorter[..shared]);
            prop_assert_eq!(longer.len(), shorter.len() + 2);
        }
    }
}
