//! Stage 1 (hypothesis generation), Stage 3 (LLM reranking) and the
//! zero-shot classification baseline: prompt construction, response parsing
//! and merging reranked prefixes back into full rankings.
//!
//! Prompt templates live in `templates/` and use `{{name}}` placeholders.
//! They are compiled in, so a given [`TEMPLATE_VERSION`] always produces
//! byte-identical prompts and therefore identical cache keys.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialoguePoint, LabelCatalog, Speaker};
use crate::llm::{ChatRequest, LlmClient, LlmError};
use crate::retrieval::RankedList;

/// Bumped whenever any template text changes.
pub const TEMPLATE_VERSION: &str = "misdiag-prompts/1";

pub const CONVERSATION_TAG: &str = "conversation";
pub const CANDIDATES_TAG: &str = "candidates";
pub const CATALOG_TAG: &str = "catalog";
pub const PREDICTION_TAG: &str = "prediction";

pub const MAX_RERANK_K: usize = 50;

const SYSTEM: &str = include_str!("../templates/system.txt");
const WITH_EXAMPLES: &str = include_str!("../templates/with_examples.txt");
const CONCISE_LABEL: &str = include_str!("../templates/concise_label.txt");
const FEW_SHOT: &str = include_str!("../templates/few_shot.txt");
const ORIGINAL_VERBOSE: &str = include_str!("../templates/original_verbose.txt");
const STRUCTURED: &str = include_str!("../templates/structured.txt");
const EXTRACT_KEY_CONCEPT: &str = include_str!("../templates/extract_key_concept.txt");
const RERANK: &str = include_str!("../templates/rerank.txt");
const ZERO_SHOT: &str = include_str!("../templates/zero_shot.txt");

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("hypothesis is empty after cleanup (raw output {raw:?})")]
    EmptyHypothesis { raw: String },
    #[error("rerank depth must be in 1..={MAX_RERANK_K}, got {0}")]
    InvalidK(usize),
    #[error("rerank input order does not match the head of the ranked list")]
    PrefixMismatch,
    #[error("template: {0}")]
    Template(String),
    #[error("label {0} is not in the catalog")]
    UnknownLabel(usize),
}

/// Fills `{{name}}` placeholders. Substituted values are not rescanned.
pub fn render(template: &str, values: &BTreeMap<&str, String>) -> Result<String, StageError> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| StageError::Template("unterminated placeholder".into()))?;
        let name = &after[..end];
        let value =
            values.get(name).ok_or_else(|| StageError::Template(format!("no value for placeholder {name:?}")))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out.trim_end().to_string())
}

/// Text between `<tag>\n` and `\n</tag>`, if present.
pub fn extract_section<'a>(prompt: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>\n");
    let close = format!("\n</{tag}>");
    let start = prompt.find(&open)? + open.len();
    let len = prompt[start..].find(&close)?;
    Some(&prompt[start..start + len])
}

fn collapse(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Plain-text rendering of a point used inside LLM prompts:
///
/// ```text
/// Question: <question>
/// A) <option text>
/// B) <option text> [CHOSEN]
/// Student answer: B
/// Student: <turn>
/// Tutor: <turn>
/// ```
///
/// Every field has its whitespace collapsed so each item stays on one line.
pub fn serialize_point(point: &DialoguePoint) -> String {
    let mut lines = Vec::with_capacity(point.options.len() + point.dialogue.len() + 2);
    lines.push(format!("Question: {}", collapse(&point.question)));
    for opt in &point.options {
        let marker = if opt.key == point.chosen { " [CHOSEN]" } else { "" };
        lines.push(format!("{}) {}{marker}", collapse(&opt.key), collapse(&opt.text)));
    }
    lines.push(format!("Student answer: {}", collapse(&point.chosen)));
    for turn in &point.dialogue {
        let who = match turn.speaker {
            Speaker::Student => "Student",
            Speaker::Tutor => "Tutor",
        };
        lines.push(format!("{who}: {}", collapse(&turn.text)));
    }
    lines.join("\n")
}

/// The student's own words, one non-empty turn per line. This is the query
/// text for the embedding and TF-IDF baselines.
pub fn serialize_dialogue(point: &DialoguePoint) -> String {
    point.student_turns().map(|t| collapse(&t.text)).filter(|t| !t.is_empty()).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    WithExamples,
    ConciseLabel,
    FewShot,
    OriginalVerbose,
    Structured,
    ExtractKeyConcept,
}

impl StrategyName {
    pub const ALL: [StrategyName; 6] = [
        StrategyName::WithExamples,
        StrategyName::ConciseLabel,
        StrategyName::FewShot,
        StrategyName::OriginalVerbose,
        StrategyName::Structured,
        StrategyName::ExtractKeyConcept,
    ];

    fn template(self) -> &'static str {
        match self {
            StrategyName::WithExamples => WITH_EXAMPLES,
            StrategyName::ConciseLabel => CONCISE_LABEL,
            StrategyName::FewShot => FEW_SHOT,
            StrategyName::OriginalVerbose => ORIGINAL_VERBOSE,
            StrategyName::Structured => STRUCTURED,
            StrategyName::ExtractKeyConcept => EXTRACT_KEY_CONCEPT,
        }
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

pub const DEFAULT_GOOD_EXAMPLES: [&str; 5] = [
    "Carries out operations from left to right regardless of priority order",
    "Adds the denominators when adding two fractions",
    "Believes multiplying by a decimal always makes a number bigger",
    "Confuses the radius and the diameter of a circle",
    "Thinks a negative number squared gives a negative answer",
];

pub const DEFAULT_ANTI_EXAMPLES: [&str; 3] = [
    "The student fails to understand that when performing operations...",
    "The student seems to think that numbers should be combined in the order they are written, which shows confusion about the rules of arithmetic.",
    "It appears that the learner has a misunderstanding about how place value works once decimals are involved in the calculation.",
];

/// A generation prompt recipe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub name: StrategyName,
    pub good_examples: Vec<String>,
    pub anti_examples: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
}

impl PromptStrategy {
    pub fn preset(name: StrategyName) -> Self {
        let good = match name {
            StrategyName::WithExamples | StrategyName::FewShot => {
                DEFAULT_GOOD_EXAMPLES.iter().map(|s| s.to_string()).collect()
            }
            _ => Vec::new(),
        };
        let anti = match name {
            StrategyName::WithExamples => DEFAULT_ANTI_EXAMPLES.iter().map(|s| s.to_string()).collect(),
            _ => Vec::new(),
        };
        Self { name, good_examples: good, anti_examples: anti, min_words: 5, max_words: 12 }
    }

    pub fn validate(&self) -> Result<(), StageError> {
        if self.name == StrategyName::WithExamples && (self.good_examples.is_empty() || self.anti_examples.is_empty()) {
            return Err(StageError::Template("with_examples needs at least one good and one bad example".into()));
        }
        if self.name == StrategyName::FewShot && self.good_examples.is_empty() {
            return Err(StageError::Template("few_shot needs at least one example".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(StageError::Template(format!("invalid word bounds {}-{}", self.min_words, self.max_words)));
        }
        Ok(())
    }

    pub fn within_bounds(&self, word_count: usize) -> bool {
        (self.min_words..=self.max_words).contains(&word_count)
    }
}

/// Model and sampling parameters for one kind of call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSettings {
    pub model: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl CallSettings {
    pub fn new(model: impl Into<String>, max_tokens: u32) -> Self {
        Self { model: model.into(), max_tokens, temperature: 0.0 }
    }

    fn request(&self, user: String) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            system: SYSTEM.trim_end().to_string(),
            user,
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        }
    }
}

fn bullet_list(items: &[String]) -> String {
    items.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")
}

pub fn build_generation_prompt(
    point: &DialoguePoint,
    strategy: &PromptStrategy,
    settings: &CallSettings,
) -> Result<ChatRequest, StageError> {
    strategy.validate()?;
    let values = BTreeMap::from([
        ("conversation", serialize_point(point)),
        ("good_examples", bullet_list(&strategy.good_examples)),
        ("anti_examples", bullet_list(&strategy.anti_examples)),
        ("min_words", strategy.min_words.to_string()),
        ("max_words", strategy.max_words.to_string()),
    ]);
    Ok(settings.request(render(strategy.name.template(), &values)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub point_id: String,
    pub text: String,
    pub word_count: usize,
    pub strategy: StrategyName,
    pub raw_text: String,
}

const QUOTES: &[char] = &['"', '\'', '`', '“', '”', '‘', '’'];

fn strip_bullet(line: &str) -> &str {
    let line = line.trim_start();
    for prefix in ["- ", "* ", "• ", "+ "] {
        if let Some(rest) = line.strip_prefix(prefix) {
            return rest;
        }
    }
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return rest;
        }
    }
    line
}

/// Cleans raw model output into a single-line label and its word count.
/// Over-long labels are kept as-is.
pub fn postprocess_hypothesis(raw: &str) -> Result<(String, usize), StageError> {
    let first = raw.trim().lines().next().unwrap_or("");
    let mut text = strip_bullet(first).trim();
    loop {
        let before = text;
        text = text.trim_matches(QUOTES).trim();
        text = text.trim_start_matches("**").trim_end_matches("**").trim();
        if text == before {
            break;
        }
    }
    let cleaned = collapse(text);
    if cleaned.is_empty() {
        return Err(StageError::EmptyHypothesis { raw: raw.to_string() });
    }
    let words = cleaned.split_whitespace().count();
    Ok((cleaned, words))
}

/// Runs Stage 1 for one point.
pub fn generate_hypothesis(
    point: &DialoguePoint,
    strategy: &PromptStrategy,
    settings: &CallSettings,
    client: &LlmClient,
) -> Result<Hypothesis, StageError> {
    let req = build_generation_prompt(point, strategy, settings)?;
    let resp = client.complete(&req)?;
    let (text, word_count) = postprocess_hypothesis(&resp.text)?;
    if !strategy.within_bounds(word_count) {
        log::info!(
            "{}: hypothesis has {word_count} words, outside {}-{}",
            point.id,
            strategy.min_words,
            strategy.max_words
        );
    }
    Ok(Hypothesis { point_id: point.id.clone(), text, word_count, strategy: strategy.name, raw_text: resp.text })
}

fn numbered(items: &[&str]) -> String {
    items.iter().enumerate().map(|(i, t)| format!("{}. {}", i + 1, collapse(t))).collect::<Vec<_>>().join("\n")
}

/// Stage 3 prompt over candidates numbered `1..=k` in the given order.
pub fn build_rerank_prompt(
    prediction: &str,
    candidates: &[&str],
    settings: &CallSettings,
) -> Result<ChatRequest, StageError> {
    let k = candidates.len();
    if k == 0 || k > MAX_RERANK_K {
        return Err(StageError::InvalidK(k));
    }
    let values = BTreeMap::from([
        ("prediction", collapse(prediction)),
        ("candidates", numbered(candidates)),
        ("k", k.to_string()),
    ]);
    Ok(settings.request(render(RERANK, &values)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankOutcome {
    pub point_id: String,
    pub input_order: Vec<usize>,
    pub output_order: Vec<usize>,
    pub parsed_ok: bool,
    pub fallback_used: bool,
}

fn digit_runs(line: &str) -> Vec<Option<usize>> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in line.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() {
            current.push(c);
        } else if !current.is_empty() {
            out.push(current.parse::<usize>().ok());
            current.clear();
        }
    }
    out
}

/// Reads the first line that contains any digit as a list of candidate
/// numbers. Anything other than an exact permutation of `1..=k` falls back to
/// the input order.
pub fn parse_rerank_response(raw: &str, point_id: &str, input_order: &[usize]) -> RerankOutcome {
    let k = input_order.len();
    let parsed = raw.lines().find(|l| l.chars().any(|c| c.is_ascii_digit())).and_then(|line| {
        let numbers: Option<Vec<usize>> = digit_runs(line).into_iter().collect();
        let numbers = numbers?;
        if numbers.len() != k {
            return None;
        }
        let mut seen = vec![false; k];
        for &n in &numbers {
            if n == 0 || n > k || seen[n - 1] {
                return None;
            }
            seen[n - 1] = true;
        }
        Some(numbers.iter().map(|&n| input_order[n - 1]).collect::<Vec<_>>())
    });
    let parsed_ok = parsed.is_some();
    RerankOutcome {
        point_id: point_id.to_string(),
        input_order: input_order.to_vec(),
        output_order: parsed.unwrap_or_else(|| input_order.to_vec()),
        parsed_ok,
        fallback_used: !parsed_ok,
    }
}

/// Replaces the head of `full` with the reranked order; the tail keeps its
/// embedding order.
pub fn apply_rerank(full: &RankedList, outcome: &RerankOutcome) -> Result<RankedList, StageError> {
    let k = outcome.input_order.len();
    if full.ordering.len() < k || full.ordering[..k] != outcome.input_order[..] {
        return Err(StageError::PrefixMismatch);
    }
    let mut sorted_in = outcome.input_order.clone();
    let mut sorted_out = outcome.output_order.clone();
    sorted_in.sort_unstable();
    sorted_out.sort_unstable();
    if sorted_in != sorted_out {
        return Err(StageError::PrefixMismatch);
    }
    let mut ordering = outcome.output_order.clone();
    ordering.extend_from_slice(&full.ordering[k..]);
    Ok(RankedList { point_id: full.point_id.clone(), true_label: full.true_label, ordering, scores: None })
}

/// Runs Stage 3 on the first `k` entries of `full`.
pub fn rerank(
    prediction: &str,
    full: &RankedList,
    catalog: &LabelCatalog,
    k: usize,
    settings: &CallSettings,
    client: &LlmClient,
) -> Result<(RerankOutcome, RankedList), StageError> {
    if k == 0 || k > MAX_RERANK_K {
        return Err(StageError::InvalidK(k));
    }
    let head = full.top(k).to_vec();
    let texts =
        head.iter().map(|&id| catalog.text(id).ok_or(StageError::UnknownLabel(id))).collect::<Result<Vec<_>, _>>()?;
    let req = build_rerank_prompt(prediction, &texts, settings)?;
    let resp = client.complete(&req)?;
    let outcome = parse_rerank_response(&resp.text, &full.point_id, &head);
    if outcome.fallback_used {
        log::warn!("{}: unparsable rerank response {:?}; keeping embedding order", full.point_id, resp.text);
    }
    let merged = apply_rerank(full, &outcome)?;
    Ok((outcome, merged))
}

/// Catalog sizes above this trigger a warning when building zero-shot prompts.
pub const ZERO_SHOT_WARN_LABELS: usize = 1000;

pub fn build_zero_shot_prompt(
    point: &DialoguePoint,
    catalog: &LabelCatalog,
    k: usize,
    settings: &CallSettings,
) -> Result<ChatRequest, StageError> {
    if catalog.len() > ZERO_SHOT_WARN_LABELS {
        log::warn!("zero-shot prompt lists {} labels; it may not fit the model context", catalog.len());
    }
    let texts: Vec<&str> = catalog.texts().iter().map(String::as_str).collect();
    let values =
        BTreeMap::from([("conversation", serialize_point(point)), ("catalog", numbered(&texts)), ("k", k.to_string())]);
    Ok(settings.request(render(ZERO_SHOT, &values)?))
}

/// Distinct in-range label numbers from the response, in order, at most
/// `depth` of them, converted to label ids.
pub fn parse_zero_shot_response(raw: &str, n_labels: usize, depth: usize) -> Vec<usize> {
    let mut seen = HashSet::new();
    raw.lines()
        .flat_map(digit_runs)
        .flatten()
        .filter(|&n| n >= 1 && n <= n_labels)
        .map(|n| n - 1)
        .filter(|id| seen.insert(*id))
        .take(depth)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotOutcome {
    pub parsed: Vec<usize>,
    pub fallback_used: bool,
}

/// Parsed labels first, then every other label in ascending id order.
pub fn zero_shot_ranking(point: &DialoguePoint, n_labels: usize, parsed: &[usize]) -> RankedList {
    let head: HashSet<usize> = parsed.iter().copied().collect();
    let mut ordering = parsed.to_vec();
    ordering.extend((0..n_labels).filter(|id| !head.contains(id)));
    RankedList { point_id: point.id.clone(), true_label: point.misconception_id, ordering, scores: None }
}

pub fn zero_shot_classify(
    point: &DialoguePoint,
    catalog: &LabelCatalog,
    k: usize,
    settings: &CallSettings,
    client: &LlmClient,
) -> Result<(ZeroShotOutcome, RankedList), StageError> {
    let req = build_zero_shot_prompt(point, catalog, k, settings)?;
    let resp = client.complete(&req)?;
    let parsed = parse_zero_shot_response(&resp.text, catalog.len(), k);
    let fallback_used = parsed.is_empty();
    if fallback_used {
        log::warn!("{}: zero-shot response had no label numbers", point.id);
    }
    let list = zero_shot_ranking(point, catalog.len(), &parsed);
    Ok((ZeroShotOutcome { parsed, fallback_used }, list))
}
