//! Dialogue corpus: data model, JSONL loading, likelihood filtering,
//! label-disjoint splitting and a synthetic generator for desk-scale runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown misconception text {text:?}")]
    UnknownMisconception { line: usize, text: String },
    #[error("line {line}: misconception_id {id} is not in the label catalog")]
    UnknownLabelId { line: usize, id: usize },
    #[error("line {line}: invalid record: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("invalid label catalog: {0}")]
    Catalog(String),
    #[error("need at least 3 distinct labels to form train/valid/test splits, found {found}")]
    TooFewLabels { found: usize },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("invalid synthetic corpus size: {0}")]
    InvalidSize(String),
    #[error("failed to encode {what}: {source}")]
    Encode {
        what: &'static str,
        #[source]
        source: serde_json::Error,
    },
}

/// Tutor-assigned likelihood that the student holds the labelled misconception.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Likelihood(u8);

impl Likelihood {
    pub const LEVELS: [u8; 5] = [0, 25, 50, 75, 100];
    /// Default retention threshold: only "likely" and "certain" annotations.
    pub const DEFAULT_THRESHOLD: Likelihood = Likelihood(75);

    pub fn new(value: u8) -> Option<Self> {
        Self::LEVELS.contains(&value).then_some(Self(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Likelihood {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Likelihood::new(value).ok_or_else(|| format!("likelihood {value} not in {{0,25,50,75,100}}"))
    }
}

impl From<Likelihood> for u8 {
    fn from(l: Likelihood) -> u8 {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Student,
    Tutor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub key: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

/// One annotated conversation about a multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialoguePoint {
    pub id: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub chosen: String,
    pub dialogue: Vec<Turn>,
    pub misconception_id: usize,
    pub likelihood: Likelihood,
}

impl DialoguePoint {
    pub fn chosen_option(&self) -> Option<&AnswerOption> {
        self.options.iter().find(|o| o.key == self.chosen)
    }

    pub fn student_turns(&self) -> impl Iterator<Item = &Turn> {
        self.dialogue.iter().filter(|t| t.speaker == Speaker::Student)
    }

    /// Checks the structural invariants every loaded point must satisfy.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        let mut keys = BTreeSet::new();
        for opt in &self.options {
            if !keys.insert(opt.key.as_str()) {
                return Err(format!("duplicate option key {:?}", opt.key));
            }
        }
        if !keys.contains(self.chosen.as_str()) {
            return Err(format!("chosen option {:?} is not one of the option keys", self.chosen));
        }
        if self.dialogue.is_empty() {
            return Err("dialogue is empty".into());
        }
        if self.student_turns().next().is_none() {
            return Err("dialogue has no student turn".into());
        }
        Ok(())
    }
}

/// Collapses runs of whitespace to single spaces and trims; case is preserved.
pub fn normalize_label_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The closed set of misconception labels, with dense ids `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelCatalog {
    labels: Vec<String>,
    by_text: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct CatalogFile {
    labels: Vec<CatalogEntry>,
}

#[derive(Serialize, Deserialize)]
struct CatalogEntry {
    label_id: usize,
    text: String,
}

impl LabelCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a catalog from texts in id order; duplicates after normalization are rejected.
    pub fn from_texts<I, S>(texts: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut catalog = Self::new();
        for text in texts {
            let norm = normalize_label_text(text.as_ref());
            if norm.is_empty() {
                return Err(CorpusError::Catalog("empty label text".into()));
            }
            if catalog.by_text.contains_key(&norm) {
                return Err(CorpusError::Catalog(format!("duplicate label text {norm:?}")));
            }
            catalog.intern(&norm);
        }
        Ok(catalog)
    }

    /// Returns the id of `text`, adding it if unseen.
    pub fn intern(&mut self, text: &str) -> usize {
        let norm = normalize_label_text(text);
        if let Some(&id) = self.by_text.get(&norm) {
            return id;
        }
        let id = self.labels.len();
        self.by_text.insert(norm.clone(), id);
        self.labels.push(norm);
        id
    }

    pub fn lookup(&self, text: &str) -> Option<usize> {
        self.by_text.get(&normalize_label_text(text)).copied()
    }

    pub fn text(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.labels.iter().enumerate().map(|(i, s)| (i, s.as_str()))
    }

    pub fn texts(&self) -> &[String] {
        &self.labels
    }

    pub fn to_json(&self) -> Result<String, CorpusError> {
        let file = CatalogFile {
            labels: self.iter().map(|(label_id, text)| CatalogEntry { label_id, text: text.to_string() }).collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|source| CorpusError::Encode { what: "catalog", source })
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let file: CatalogFile = serde_json::from_str(json).map_err(|e| CorpusError::Catalog(e.to_string()))?;
        for (expected, entry) in file.labels.iter().enumerate() {
            if entry.label_id != expected {
                return Err(CorpusError::Catalog(format!(
                    "label ids must be dense and ordered: expected {expected}, found {}",
                    entry.label_id
                )));
            }
        }
        Self::from_texts(file.labels.iter().map(|e| e.text.as_str()))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_json(&read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        write_file(path, &self.to_json()?)
    }
}

/// Wire form of one JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub chosen: String,
    pub dialogue: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misconception: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misconception_id: Option<usize>,
    pub likelihood: Likelihood,
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CorpusError> {
    fs::write(path, contents).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// How misconception references in records are resolved.
enum Resolve<'a> {
    /// Texts are interned; ids must refer to labels already seen.
    Intern(&'a mut LabelCatalog),
    /// The catalog is fixed; texts and ids must already exist.
    Fixed(&'a LabelCatalog),
}

fn resolve_record(record: CorpusRecord, line: usize, resolve: &mut Resolve<'_>) -> Result<DialoguePoint, CorpusError> {
    let catalog_len = match resolve {
        Resolve::Intern(c) => c.len(),
        Resolve::Fixed(c) => c.len(),
    };
    let by_text = match &record.misconception {
        Some(text) => {
            let id = match resolve {
                Resolve::Intern(c) => {
                    if normalize_label_text(text).is_empty() {
                        return Err(CorpusError::Invalid { line, reason: "empty misconception text".into() });
                    }
                    c.intern(text)
                }
                Resolve::Fixed(c) => {
                    c.lookup(text).ok_or_else(|| CorpusError::UnknownMisconception { line, text: text.clone() })?
                }
            };
            Some(id)
        }
        None => None,
    };
    let misconception_id = match (by_text, record.misconception_id) {
        (Some(a), Some(b)) if a != b => {
            return Err(CorpusError::Invalid {
                line,
                reason: format!("misconception text resolves to id {a} but misconception_id is {b}"),
            })
        }
        (Some(a), _) => a,
        (None, Some(id)) if id < catalog_len => id,
        (None, Some(id)) => return Err(CorpusError::UnknownLabelId { line, id }),
        (None, None) => {
            return Err(CorpusError::Malformed {
                line,
                message: "record needs `misconception` or `misconception_id`".into(),
            })
        }
    };
    let point = DialoguePoint {
        id: record.id,
        question: record.question,
        options: record.options,
        chosen: record.chosen,
        dialogue: record.dialogue,
        misconception_id,
        likelihood: record.likelihood,
    };
    point.validate().map_err(|reason| CorpusError::Invalid { line, reason })?;
    Ok(point)
}

fn parse_lines(contents: &str, mut resolve: Resolve<'_>) -> Result<Vec<DialoguePoint>, CorpusError> {
    let mut points = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, raw) in contents.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(raw).map_err(|e| CorpusError::Malformed { line, message: e.to_string() })?;
        if !ids.insert(record.id.clone()) {
            return Err(CorpusError::Invalid { line, reason: format!("duplicate point id {:?}", record.id) });
        }
        points.push(resolve_record(record, line, &mut resolve)?);
    }
    Ok(points)
}

/// Parses JSONL text, interning misconception texts into a fresh catalog
/// in first-appearance order.
pub fn parse_corpus(contents: &str) -> Result<(LabelCatalog, Vec<DialoguePoint>), CorpusError> {
    let mut catalog = LabelCatalog::new();
    let points = parse_lines(contents, Resolve::Intern(&mut catalog))?;
    Ok((catalog, points))
}

/// Parses JSONL text against an existing catalog.
pub fn parse_corpus_with_catalog(contents: &str, catalog: &LabelCatalog) -> Result<Vec<DialoguePoint>, CorpusError> {
    parse_lines(contents, Resolve::Fixed(catalog))
}

pub fn load_corpus(path: &Path) -> Result<(LabelCatalog, Vec<DialoguePoint>), CorpusError> {
    parse_corpus(&read_file(path)?)
}

pub fn load_corpus_with_catalog(path: &Path, catalog: &LabelCatalog) -> Result<Vec<DialoguePoint>, CorpusError> {
    parse_corpus_with_catalog(&read_file(path)?, catalog)
}

/// Serializes points as JSONL, writing the misconception as label text.
pub fn corpus_to_jsonl(points: &[DialoguePoint], catalog: &LabelCatalog) -> Result<String, CorpusError> {
    let mut out = String::new();
    for p in points {
        let text = catalog.text(p.misconception_id).ok_or_else(|| {
            CorpusError::Catalog(format!("point {} references missing label {}", p.id, p.misconception_id))
        })?;
        let record = CorpusRecord {
            id: p.id.clone(),
            question: p.question.clone(),
            options: p.options.clone(),
            chosen: p.chosen.clone(),
            dialogue: p.dialogue.clone(),
            misconception: Some(text.to_string()),
            misconception_id: None,
            likelihood: p.likelihood,
        };
        out.push_str(&serde_json::to_string(&record).map_err(|source| CorpusError::Encode { what: "record", source })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, points: &[DialoguePoint], catalog: &LabelCatalog) -> Result<(), CorpusError> {
    write_file(path, &corpus_to_jsonl(points, catalog)?)
}

/// Keeps the points whose likelihood is at least `threshold`, in order.
pub fn filter_by_likelihood(points: &[DialoguePoint], threshold: Likelihood) -> Vec<DialoguePoint> {
    points.iter().filter(|p| p.likelihood >= threshold).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Target share of datapoints per split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, valid: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.valid, self.test]
    }
}

/// Label-disjoint partition of the labels occurring in a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: BTreeSet<usize>,
    pub valid: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

impl SplitAssignment {
    pub fn labels(&self, split: Split) -> &BTreeSet<usize> {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, label_id: usize) -> Option<Split> {
        Split::ALL.into_iter().find(|s| self.labels(*s).contains(&label_id))
    }

    /// Points whose label belongs to `split`, in corpus order.
    pub fn select<'a>(&self, points: &'a [DialoguePoint], split: Split) -> Vec<&'a DialoguePoint> {
        let labels = self.labels(split);
        points.iter().filter(|p| labels.contains(&p.misconception_id)).collect()
    }

    pub fn to_json(&self) -> Result<String, CorpusError> {
        serde_json::to_string_pretty(self).map_err(|source| CorpusError::Encode { what: "split", source })
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let split: Self =
            serde_json::from_str(json).map_err(|e| CorpusError::Malformed { line: 1, message: e.to_string() })?;
        let disjoint = split.train.is_disjoint(&split.valid)
            && split.train.is_disjoint(&split.test)
            && split.valid.is_disjoint(&split.test);
        if !disjoint {
            return Err(CorpusError::Invalid { line: 1, reason: "split label sets overlap".into() });
        }
        Ok(split)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_json(&read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        write_file(path, &self.to_json()?)
    }
}

/// Partitions the labels occurring in `points` into train/valid/test.
///
/// Labels are visited in a seeded shuffle of ascending id order and each
/// label's whole group of points goes to the split whose datapoint count is
/// furthest below its target. Once the number of unvisited labels equals the
/// number of still-empty splits, those splits are filled first so all three
/// end up non-empty.
pub fn split_by_misconception(
    points: &[DialoguePoint],
    catalog: &LabelCatalog,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitAssignment, CorpusError> {
    let targets = fractions.as_array();
    if targets.iter().any(|f| !f.is_finite() || *f < 0.0) || (targets.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidFractions(targets));
    }
    let mut group_sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for p in points {
        if p.misconception_id >= catalog.len() {
            return Err(CorpusError::Catalog(format!(
                "point {} references missing label {}",
                p.id, p.misconception_id
            )));
        }
        *group_sizes.entry(p.misconception_id).or_default() += 1;
    }
    if group_sizes.len() < 3 {
        return Err(CorpusError::TooFewLabels { found: group_sizes.len() });
    }

    let mut order: Vec<usize> = group_sizes.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let total = points.len() as f64;
    let mut assigned = [0usize; 3];
    let mut sets: [BTreeSet<usize>; 3] = Default::default();
    for (visited, label) in order.iter().enumerate() {
        let remaining = order.len() - visited;
        let empty: Vec<usize> = (0..3).filter(|&s| sets[s].is_empty()).collect();
        let candidates: Vec<usize> = if !empty.is_empty() && remaining <= empty.len() { empty } else { vec![0, 1, 2] };
        let mut best = candidates[0];
        let mut best_deficit = f64::NEG_INFINITY;
        for s in candidates {
            let deficit = targets[s] - assigned[s] as f64 / total;
            if deficit > best_deficit + 1e-12 {
                best = s;
                best_deficit = deficit;
            }
        }
        assigned[best] += group_sizes[label];
        sets[best].insert(*label);
    }
    let [train, valid, test] = sets;
    Ok(SplitAssignment { seed, train, valid, test })
}

/// Parameters for [`generate_synthetic_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_points: usize,
    pub n_labels: usize,
    pub seed: u64,
    /// Probability in `[0, 1]` that each label word in a student turn is
    /// swapped for an unrelated vocabulary word.
    pub noise: f64,
}

impl SyntheticConfig {
    pub fn new(n_points: usize, n_labels: usize, seed: u64) -> Self {
        Self { n_points, n_labels, seed, noise: 0.0 }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }
}

const ERROR_VERBS: [&str; 18] = [
    "Confuses",
    "Misapplies",
    "Ignores",
    "Reverses",
    "Overgeneralises",
    "Misreads",
    "Forgets",
    "Miscounts",
    "Swaps",
    "Omits",
    "Doubles",
    "Halves",
    "Truncates",
    "Misorders",
    "Duplicates",
    "Neglects",
    "Inverts",
    "Misplaces",
];

const CONCEPTS: [&str; 36] = [
    "place value",
    "decimal point",
    "fraction denominator",
    "negative sign",
    "angle sum",
    "gradient",
    "y intercept",
    "median",
    "mean",
    "mode",
    "prime factor",
    "square root",
    "exponent",
    "bracket expansion",
    "common factor",
    "percentage base",
    "ratio part",
    "remainder",
    "carried digit",
    "column subtraction",
    "long division",
    "unit conversion",
    "area formula",
    "perimeter",
    "volume",
    "circle radius",
    "probability total",
    "inequality direction",
    "coordinate order",
    "translation vector",
    "rotation centre",
    "significant figure",
    "standard form",
    "mixed number",
    "improper fraction",
    "reciprocal",
];

const CONTEXTS: [&str; 16] = [
    "when dividing by ten",
    "when comparing sizes",
    "during mental arithmetic",
    "in word problems",
    "when estimating answers",
    "while simplifying expressions",
    "on number lines",
    "when reading graphs",
    "during written methods",
    "when rounding results",
    "in algebraic equations",
    "with large numbers",
    "when converting units",
    "in geometric diagrams",
    "with negative numbers",
    "when solving proportions",
];

const TUTOR_OPENERS: [&str; 4] = [
    "Can you explain how you got your answer?",
    "Talk me through what you did here.",
    "Why did you pick that option?",
    "What was your first step?",
];

const STUDENT_CLOSERS: [&str; 4] =
    ["That is how we did it in class.", "It seemed right to me.", "I was not completely sure.", "I checked it twice."];

const OPERATIONS: [&str; 4] = ["+", "-", "×", "÷"];

fn noise_vocabulary() -> Vec<String> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    for phrase in CONCEPTS.iter().chain(CONTEXTS.iter()).chain(ERROR_VERBS.iter()) {
        for w in phrase.split_whitespace() {
            words.insert(w.to_lowercase());
        }
    }
    words.into_iter().collect()
}

/// Generates a templated corpus whose student turns restate the planted
/// misconception, degraded word-by-word according to `noise`.
///
/// Structure (labels, questions, label assignment) depends only on the seed;
/// noise decisions use a separate stream that draws the same numbers at every
/// noise level, so a higher level corrupts a superset of the words a lower one
/// does.
pub fn generate_synthetic_corpus(config: &SyntheticConfig) -> Result<(LabelCatalog, Vec<DialoguePoint>), CorpusError> {
    let SyntheticConfig { n_points, n_labels, seed, noise } = *config;
    let max_labels = ERROR_VERBS.len() * CONCEPTS.len() * CONTEXTS.len();
    if n_labels < 3 {
        return Err(CorpusError::InvalidSize(format!("n_labels must be at least 3, got {n_labels}")));
    }
    if n_labels > max_labels {
        return Err(CorpusError::InvalidSize(format!("n_labels must be at most {max_labels}, got {n_labels}")));
    }
    if n_points < n_labels {
        return Err(CorpusError::InvalidSize(format!("n_points ({n_points}) must be at least n_labels ({n_labels})")));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(CorpusError::InvalidSize(format!("noise must lie in [0, 1], got {noise}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);

    let mut combos: Vec<(usize, usize, usize)> = (0..ERROR_VERBS.len())
        .flat_map(|v| (0..CONCEPTS.len()).flat_map(move |c| (0..CONTEXTS.len()).map(move |x| (v, c, x))))
        .collect();
    combos.shuffle(&mut rng);
    combos.truncate(n_labels);
    let label_texts: Vec<String> =
        combos.iter().map(|&(v, c, x)| format!("{} the {} {}", ERROR_VERBS[v], CONCEPTS[c], CONTEXTS[x])).collect();
    let catalog = LabelCatalog::from_texts(&label_texts)?;

    let mut assignment: Vec<usize> = (0..n_labels).collect();
    assignment.extend((n_labels..n_points).map(|_| rng.gen_range(0..n_labels)));
    assignment.shuffle(&mut rng);

    let vocab = noise_vocabulary();
    let mut points = Vec::with_capacity(n_points);
    for (i, &label) in assignment.iter().enumerate() {
        let (_, concept, _) = combos[label];
        let a: i64 = rng.gen_range(2..100);
        let b: i64 = rng.gen_range(2..20);
        let op = OPERATIONS[rng.gen_range(0..OPERATIONS.len())];
        let correct = match op {
            "+" => a + b,
            "-" => a - b,
            "×" => a * b,
            _ => a / b,
        };
        let mut values = vec![correct, correct + b, correct * 10, correct - 1];
        values.dedup();
        while values.len() < 4 {
            values.push(values.last().copied().unwrap_or(0) + 7);
        }
        values.shuffle(&mut rng);
        let keys = ["A", "B", "C", "D"];
        let options: Vec<AnswerOption> =
            keys.iter().zip(&values).map(|(k, v)| AnswerOption { key: k.to_string(), text: v.to_string() }).collect();
        let wrong: Vec<usize> = (0..4).filter(|&j| values[j] != correct).collect();
        let chosen = keys[wrong[rng.gen_range(0..wrong.len())]].to_string();

        let words: Vec<String> = label_texts[label].split_whitespace().map(str::to_lowercase).collect();
        let noisy: Vec<String> = words
            .into_iter()
            .map(|w| {
                let u: f64 = noise_rng.gen();
                let replacement = &vocab[noise_rng.gen_range(0..vocab.len())];
                if u < noise {
                    replacement.clone()
                } else {
                    w
                }
            })
            .collect();
        let likelihood = if rng.gen_bool(0.5) { Likelihood(75) } else { Likelihood(100) };
        let dialogue = vec![
            Turn { speaker: Speaker::Tutor, text: TUTOR_OPENERS[rng.gen_range(0..TUTOR_OPENERS.len())].to_string() },
            Turn { speaker: Speaker::Student, text: format!("I think I {}.", noisy.join(" ")) },
            Turn { speaker: Speaker::Tutor, text: "Are you sure about that step?".to_string() },
            Turn {
                speaker: Speaker::Student,
                text: STUDENT_CLOSERS[rng.gen_range(0..STUDENT_CLOSERS.len())].to_string(),
            },
        ];
        points.push(DialoguePoint {
            id: format!("syn-{i:05}"),
            question: format!("Topic: {}. What is {a} {op} {b}?", CONCEPTS[concept]),
            options,
            chosen,
            dialogue,
            misconception_id: label,
            likelihood,
        });
    }
    Ok((catalog, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(id: &str, label: usize, likelihood: u8) -> DialoguePoint {
        DialoguePoint {
            id: id.into(),
            question: "What is 2 + 2?".into(),
            options: vec![
                AnswerOption { key: "A".into(), text: "4".into() },
                AnswerOption { key: "B".into(), text: "22".into() },
            ],
            chosen: "B".into(),
            dialogue: vec![Turn { speaker: Speaker::Student, text: "I put the digits together".into() }],
            misconception_id: label,
            likelihood: Likelihood::new(likelihood).unwrap(),
        }
    }

    fn line(id: &str, misconception: &str) -> String {
        format!(
            r#"{{"id":"{id}","question":"Q","options":[{{"key":"A","text":"1"}},{{"key":"B","text":"2"}}],"chosen":"A","dialogue":[{{"speaker":"student","text":"hi"}}],"misconception":"{misconception}","likelihood":100}}"#
        )
    }

    #[test]
    fn loads_two_valid_lines() {
        let text = format!("{}\n{}\n", line("p1", "Adds  numerators"), line("p2", "Adds numerators"));
        let (catalog, points) = parse_corpus(&text).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(catalog.len(), 1);
        assert_eq!(catalog.text(0), Some("Adds numerators"));
        assert_eq!(points[0].id, "p1");
        assert_eq!(points[1].misconception_id, 0);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let (catalog, points) = parse_corpus("").unwrap();
        assert!(catalog.is_empty());
        assert!(points.is_empty());
    }

    #[test]
    fn missing_chosen_reports_line_number() {
        let bad = line("p2", "x").replace(r#""chosen":"A","#, "");
        let text = format!("{}\n{}\n", line("p1", "x"), bad);
        match parse_corpus(&text) {
            Err(CorpusError::Malformed { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("chosen"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_text_against_fixed_catalog() {
        let catalog = LabelCatalog::from_texts(["Known label"]).unwrap();
        let err = parse_corpus_with_catalog(&line("p1", "Mystery label"), &catalog).unwrap_err();
        match err {
            CorpusError::UnknownMisconception { line, text } => {
                assert_eq!(line, 1);
                assert_eq!(text, "Mystery label");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn record_may_use_label_id() {
        let catalog = LabelCatalog::from_texts(["zero", "one"]).unwrap();
        let text = line("p1", "x").replace(r#""misconception":"x""#, r#""misconception_id":1"#);
        let points = parse_corpus_with_catalog(&text, &catalog).unwrap();
        assert_eq!(points[0].misconception_id, 1);
        let out_of_range = text.replace(r#""misconception_id":1"#, r#""misconception_id":5"#);
        assert!(matches!(
            parse_corpus_with_catalog(&out_of_range, &catalog),
            Err(CorpusError::UnknownLabelId { line: 1, id: 5 })
        ));
    }

    #[test]
    fn rejects_invalid_points() {
        let bad_choice = line("p1", "x").replace(r#""chosen":"A""#, r#""chosen":"Z""#);
        assert!(matches!(parse_corpus(&bad_choice), Err(CorpusError::Invalid { line: 1, .. })));
        let tutor_only = line("p1", "x").replace(r#""speaker":"student""#, r#""speaker":"tutor""#);
        assert!(matches!(parse_corpus(&tutor_only), Err(CorpusError::Invalid { line: 1, .. })));
        let bad_likelihood = line("p1", "x").replace(r#""likelihood":100"#, r#""likelihood":60"#);
        assert!(matches!(parse_corpus(&bad_likelihood), Err(CorpusError::Malformed { line: 1, .. })));
    }

    #[test]
    fn likelihood_filter() {
        let points: Vec<_> = [0, 50, 75, 100].iter().enumerate().map(|(i, &l)| point(&format!("p{i}"), 0, l)).collect();
        let kept = filter_by_likelihood(&points, Likelihood::DEFAULT_THRESHOLD);
        assert_eq!(kept.iter().map(|p| p.likelihood.value()).collect::<Vec<_>>(), vec![75, 100]);
        assert_eq!(filter_by_likelihood(&points, Likelihood::new(0).unwrap()), points);
        assert!(filter_by_likelihood(&[], Likelihood::DEFAULT_THRESHOLD).is_empty());
    }

    #[test]
    fn ten_singleton_labels_split_seven_one_two() {
        let catalog = LabelCatalog::from_texts((0..10).map(|i| format!("label {i}"))).unwrap();
        let points: Vec<_> = (0..10).map(|i| point(&format!("p{i}"), i, 100)).collect();
        for seed in [0, 1, 42, 9999] {
            let split = split_by_misconception(&points, &catalog, SplitFractions::default(), seed).unwrap();
            assert_eq!((split.train.len(), split.valid.len(), split.test.len()), (7, 1, 2));
        }
    }

    #[test]
    fn split_is_deterministic_and_keeps_groups_together() {
        let catalog = LabelCatalog::from_texts((0..6).map(|i| format!("label {i}"))).unwrap();
        let mut points: Vec<_> = (0..6).map(|i| point(&format!("p{i}"), i, 100)).collect();
        points.extend((0..4).map(|i| point(&format!("extra{i}"), 2, 100)));
        let a = split_by_misconception(&points, &catalog, SplitFractions::default(), 7).unwrap();
        let b = split_by_misconception(&points, &catalog, SplitFractions::default(), 7).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let home = a.split_of(2).unwrap();
        for p in points.iter().filter(|p| p.misconception_id == 2) {
            assert_eq!(a.split_of(p.misconception_id), Some(home));
        }
    }

    #[test]
    fn split_needs_three_labels() {
        let catalog = LabelCatalog::from_texts(["a", "b"]).unwrap();
        let points = vec![point("p0", 0, 100), point("p1", 1, 100)];
        assert!(matches!(
            split_by_misconception(&points, &catalog, SplitFractions::default(), 1),
            Err(CorpusError::TooFewLabels { found: 2 })
        ));
        let bad = SplitFractions { train: 0.5, valid: 0.1, test: 0.1 };
        assert!(matches!(split_by_misconception(&points, &catalog, bad, 1), Err(CorpusError::InvalidFractions(_))));
    }

    #[test]
    fn split_fills_empty_splits_with_dominant_group() {
        let catalog = LabelCatalog::from_texts(["a", "b", "c"]).unwrap();
        let mut points: Vec<_> = (0..50).map(|i| point(&format!("a{i}"), 0, 100)).collect();
        points.push(point("b", 1, 100));
        points.push(point("c", 2, 100));
        for seed in 0..20 {
            let split = split_by_misconception(&points, &catalog, SplitFractions::default(), seed).unwrap();
            assert!(Split::ALL.iter().all(|s| split.labels(*s).len() == 1), "seed {seed}: {split:?}");
        }
    }

    #[test]
    fn split_json_shape() {
        let split = SplitAssignment {
            seed: 3,
            train: [0, 2].into_iter().collect(),
            valid: [1].into_iter().collect(),
            test: [3].into_iter().collect(),
        };
        let value: serde_json::Value = serde_json::from_str(&split.to_json().unwrap()).unwrap();
        assert_eq!(value, serde_json::json!({"seed": 3, "train": [0, 2], "valid": [1], "test": [3]}));
        assert_eq!(SplitAssignment::from_json(&split.to_json().unwrap()).unwrap(), split);
        let overlapping = r#"{"seed":1,"train":[0],"valid":[0],"test":[1]}"#;
        assert!(SplitAssignment::from_json(overlapping).is_err());
    }

    #[test]
    fn synthetic_small_corpus_uses_every_label() {
        let (catalog, points) = generate_synthetic_corpus(&SyntheticConfig::new(20, 10, 1)).unwrap();
        assert_eq!(points.len(), 20);
        assert_eq!(catalog.len(), 10);
        let used: BTreeSet<_> = points.iter().map(|p| p.misconception_id).collect();
        assert_eq!(used.len(), 10);
        for p in &points {
            p.validate().unwrap();
            assert!(p.likelihood >= Likelihood::DEFAULT_THRESHOLD);
        }
        let (catalog2, points2) = generate_synthetic_corpus(&SyntheticConfig::new(20, 10, 1)).unwrap();
        assert_eq!(catalog, catalog2);
        assert_eq!(points, points2);
    }

    #[test]
    fn synthetic_full_scale_sizes() {
        let (catalog, points) = generate_synthetic_corpus(&SyntheticConfig::new(922, 546, 5)).unwrap();
        assert_eq!(points.len(), 922);
        assert_eq!(catalog.len(), 546);
        let used: BTreeSet<_> = points.iter().map(|p| p.misconception_id).collect();
        assert_eq!(used.len(), 546);
    }

    #[test]
    fn synthetic_noise_zero_quotes_label() {
        let (catalog, points) = generate_synthetic_corpus(&SyntheticConfig::new(12, 6, 9)).unwrap();
        for p in &points {
            let label = catalog.text(p.misconception_id).unwrap().to_lowercase();
            assert!(p.student_turns().any(|t| t.text.contains(&label)), "{label} not in {:?}", p.dialogue);
        }
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(generate_synthetic_corpus(&SyntheticConfig::new(10, 2, 1)).is_err());
        assert!(generate_synthetic_corpus(&SyntheticConfig::new(5, 10, 1)).is_err());
        assert!(generate_synthetic_corpus(&SyntheticConfig::new(10, 5, 1).with_noise(1.5)).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let (catalog, points) = generate_synthetic_corpus(&SyntheticConfig::new(15, 5, 2)).unwrap();
        let text = corpus_to_jsonl(&points, &catalog).unwrap();
        let reloaded = parse_corpus_with_catalog(&text, &catalog).unwrap();
        assert_eq!(reloaded, points);
        assert_eq!(corpus_to_jsonl(&reloaded, &catalog).unwrap(), text);
    }

    #[test]
    fn catalog_rejects_duplicates_after_normalization() {
        assert!(LabelCatalog::from_texts(["a  b", "a b"]).is_err());
        assert!(LabelCatalog::from_texts(["A b", "a b"]).is_ok());
        let catalog = LabelCatalog::from_texts(["x", "y"]).unwrap();
        assert_eq!(LabelCatalog::from_json(&catalog.to_json().unwrap()).unwrap(), catalog);
    }
}
