//! Entity extraction from questions and triplet extraction from sentences.
//!
//! The rule-based backend works on capitalized spans ("mentions"): maximal
//! runs of capitalized words, optionally joined by lowercase connectives
//! (`of`, `the`, `de`, `von`, `&`), plus quoted titles and four-digit years.
//! Declarative sentences yield one triplet per pair of consecutive mentions,
//! with the words between them as the relation. Questions yield partial
//! triplets. Sentences opening with a reasoning cue yield nothing.

use std::collections::HashMap;
use std::io::BufRead;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::tokenize;
use crate::gateway::{GatewayError, Generator};

const CONNECTIVES: &[&str] = &["of", "the", "de", "von", "&"];

/// First tokens that mark a sentence as a reasoning conclusion.
pub const REASONING_CUES: &[&str] = &["thus", "therefore", "so", "hence"];

// Capitalized words that never start a mention.
const STOP_WORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "who",
    "whom",
    "whose",
    "what",
    "when",
    "where",
    "which",
    "why",
    "how",
    "is",
    "are",
    "was",
    "were",
    "did",
    "do",
    "does",
    "has",
    "have",
    "had",
    "can",
    "could",
    "will",
    "would",
    "in",
    "on",
    "at",
    "of",
    "for",
    "and",
    "or",
    "but",
    "to",
    "from",
    "by",
    "with",
    "he",
    "she",
    "it",
    "his",
    "her",
    "its",
    "they",
    "their",
    "them",
    "i",
    "we",
    "you",
    "this",
    "that",
    "these",
    "those",
    "there",
    "so",
    "thus",
    "therefore",
    "hence",
    "if",
    "as",
    "after",
    "before",
    "during",
    "both",
    "either",
    "neither",
    "yes",
    "no",
    "not",
    "answer",
    "question",
];

const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "has", "have", "had", "a", "an", "the",
];

const FIXTURE_EXAMPLES: &str = include_str!("../fixtures/triplet_examples.jsonl");

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("extraction backend failed for {sentence:?}: {source}")]
    Backend {
        sentence: String,
        #[source]
        source: GatewayError,
    },
    #[error("malformed extractor output for {sentence:?}: {output:?}")]
    Malformed { sentence: String, output: String },
    #[error("no fixture recorded for {sentence:?}")]
    NoFixture { sentence: String },
    #[error("fixture line {line}: {message}")]
    FixtureFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExtractionError {
    pub fn sentence(&self) -> Option<&str> {
        match self {
            Self::Backend { sentence, .. }
            | Self::Malformed { sentence, .. }
            | Self::NoFixture { sentence } => Some(sentence),
            _ => None,
        }
    }
}

/// Ordered, duplicate-free (after normalization) entity surface forms.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntitySet(Vec<String>);

impl EntitySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `surface` unless an entity with the same normalized tokens (or
    /// no tokens at all) is already present. Returns whether it was added.
    pub fn insert(&mut self, surface: impl Into<String>) -> bool {
        let surface = surface.into();
        let key = tokenize(&surface);
        if key.is_empty() || self.0.iter().any(|e| tokenize(e) == key) {
            return false;
        }
        self.0.push(surface);
        true
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for EntitySet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut set = Self::new();
        for s in iter {
            set.insert(s);
        }
        set
    }
}

/// `(head, relation, tail)`; `tail` is absent for partial triplets taken
/// from questions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<String>,
}

impl Triplet {
    pub fn full(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: Some(tail.into()),
        }
    }

    pub fn partial(head: impl Into<String>, relation: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: None,
        }
    }

    pub fn is_full(&self) -> bool {
        self.tail.is_some()
    }

    /// `["h", "r"]` or `["h", "r", "t"]`.
    pub fn to_array(&self) -> Vec<String> {
        let mut out = vec![self.head.clone(), self.relation.clone()];
        out.extend(self.tail.clone());
        out
    }

    fn from_array(parts: Vec<String>) -> Option<Self> {
        let mut it = parts.into_iter();
        let (head, relation) = (it.next()?, it.next()?);
        let tail = it.next();
        if it.next().is_some() || head.trim().is_empty() || relation.trim().is_empty() {
            return None;
        }
        Some(Self {
            head,
            relation,
            tail,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    pub source_sentence: String,
}

impl TripletSet {
    pub fn new(source_sentence: impl Into<String>, triplets: Vec<Triplet>) -> Self {
        Self {
            triplets,
            source_sentence: source_sentence.into(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Pluggable extraction backend.
pub trait Extractor: Send + Sync {
    fn extract_triplets(&self, sentence: &str) -> Result<TripletSet, ExtractionError>;

    fn extract_entities(&self, question: &str) -> EntitySet {
        extract_entities(question)
    }
}

impl<E: Extractor + ?Sized> Extractor for Arc<E> {
    fn extract_triplets(&self, sentence: &str) -> Result<TripletSet, ExtractionError> {
        (**self).extract_triplets(sentence)
    }

    fn extract_entities(&self, question: &str) -> EntitySet {
        (**self).extract_entities(question)
    }
}

/// Rule-based key-entity extraction for questions.
pub fn extract_entities(question: &str) -> EntitySet {
    mentions(question).into_iter().map(|m| m.text).collect()
}

pub fn starts_with_reasoning_cue(sentence: &str) -> bool {
    tokenize(sentence)
        .first()
        .is_some_and(|t| REASONING_CUES.contains(&t.as_str()))
}

#[derive(Debug, Clone)]
struct Word<'a> {
    core: &'a str,
    // Sentence punctuation or a possessive follows the word; no span may
    // continue past it.
    breaks_after: bool,
    possessive: bool,
}

impl Word<'_> {
    fn is_capitalized(&self) -> bool {
        self.core
            .chars()
            .find(|c| c.is_alphanumeric())
            .is_some_and(char::is_uppercase)
    }

    fn starts_with_digit(&self) -> bool {
        self.core.chars().next().is_some_and(|c| c.is_ascii_digit())
    }

    fn is_year(&self) -> bool {
        self.core.len() == 4 && self.core.bytes().all(|b| b.is_ascii_digit())
    }

    fn is_connective(&self) -> bool {
        CONNECTIVES.contains(&self.core)
    }

    fn is_stop(&self) -> bool {
        STOP_WORDS.contains(&self.core.to_lowercase().as_str())
    }
}

fn split_word(raw: &str) -> Word<'_> {
    let mut core = raw;
    let mut breaks_after = false;
    loop {
        let before = core;
        if let Some(stripped) = core.strip_suffix([',', '.', '?', '!', ';', ':', '"', '\u{201d}']) {
            core = stripped;
            breaks_after = true;
        }
        if core.ends_with(')') && !core.contains('(') {
            core = &core[..core.len() - 1];
            breaks_after = true;
        }
        if core == before {
            break;
        }
    }
    core = core.trim_start_matches(['"', '\u{201c}']);
    if core.starts_with('(') && !core.contains(')') {
        core = &core[1..];
    }
    let mut possessive = false;
    for suffix in ["'s", "\u{2019}s", "s'", "s\u{2019}"] {
        if let Some(stripped) = core.strip_suffix(suffix) {
            if !stripped.is_empty() {
                // keep the plural "s" for "s'"
                core = if suffix.starts_with('s') {
                    &core[..core.len() - suffix.len() + 1]
                } else {
                    stripped
                };
                possessive = true;
                breaks_after = true;
                break;
            }
        }
    }
    Word {
        core,
        breaks_after,
        possessive,
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Mention {
    text: String,
    start: usize,
    end: usize,
    possessive: bool,
}

fn words(text: &str) -> Vec<Word<'_>> {
    text.split_whitespace().map(split_word).collect()
}

fn mentions(text: &str) -> Vec<Mention> {
    let raws: Vec<&str> = text.split_whitespace().collect();
    let ws: Vec<Word<'_>> = raws.iter().map(|r| split_word(r)).collect();
    let mut out: Vec<Mention> = Vec::new();
    let mut i = 0;
    while i < ws.len() {
        // Quoted titles.
        if raws[i].starts_with(['"', '\u{201c}']) {
            if let Some(close) = (i..ws.len()).find(|&j| {
                let trimmed = raws[j].trim_end_matches([',', '.', '?', '!', ';', ':']);
                (j > i || trimmed.chars().count() > 1) && trimmed.ends_with(['"', '\u{201d}'])
            }) {
                let title: Vec<&str> = ws[i..=close].iter().map(|w| w.core).collect();
                out.push(Mention {
                    text: title.join(" "),
                    start: i,
                    end: close + 1,
                    possessive: ws[close].possessive,
                });
                i = close + 1;
                continue;
            }
        }

        let w = &ws[i];
        let starts_span = (w.is_capitalized() && !w.is_stop())
            || (w.starts_with_digit()
                && !w.breaks_after
                && ws
                    .get(i + 1)
                    .is_some_and(|n| n.is_capitalized() && !n.is_stop()));
        if starts_span {
            let mut end = i + 1;
            while end < ws.len() && !ws[end - 1].breaks_after {
                let next = &ws[end];
                if next.is_capitalized() || next.starts_with_digit() {
                    end += 1;
                    continue;
                }
                // A run of connectives joins only if a capitalized word follows.
                let mut j = end;
                while j < ws.len() && ws[j].is_connective() && !ws[j].breaks_after {
                    j += 1;
                }
                if j > end && j < ws.len() && ws[j].is_capitalized() {
                    end = j + 1;
                    continue;
                }
                break;
            }
            let text_words: Vec<&str> = ws[i..end].iter().map(|w| w.core).collect();
            out.push(Mention {
                text: text_words.join(" "),
                start: i,
                end,
                possessive: ws[end - 1].possessive,
            });
            i = end;
            continue;
        }
        if w.is_year() {
            out.push(Mention {
                text: w.core.to_string(),
                start: i,
                end: i + 1,
                possessive: w.possessive,
            });
        }
        i += 1;
    }
    out.retain(|m| !tokenize(&m.text).is_empty());
    out
}

fn clean_relation(words: &[Word<'_>]) -> Option<String> {
    let parts: Vec<&str> = words
        .iter()
        .map(|w| w.core.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .collect();
    let is_aux = |w: &&str| AUXILIARIES.contains(&w.to_lowercase().as_str());
    let start = parts.iter().position(|w| !is_aux(w));
    let cleaned = match start {
        Some(s) => {
            let end = parts.iter().rposition(|w| !is_aux(w)).unwrap() + 1;
            parts[s..end].join(" ")
        }
        None => parts.join(" "),
    };
    (!cleaned.is_empty()).then_some(cleaned)
}

/// Heuristic offline extractor. Pure function of the input.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleExtractor;

impl RuleExtractor {
    pub fn triplets(sentence: &str) -> TripletSet {
        let sentence_trimmed = sentence.trim();
        if starts_with_reasoning_cue(sentence_trimmed) {
            return TripletSet::new(sentence, Vec::new());
        }
        let ws = words(sentence_trimmed);
        let ms = mentions(sentence_trimmed);
        let triplets = if sentence_trimmed.ends_with('?') {
            question_triplets(&ws, &ms)
        } else {
            ms.windows(2)
                .filter_map(|pair| {
                    let relation = clean_relation(&ws[pair[0].end..pair[1].start])?;
                    Some(Triplet::full(&pair[0].text, relation, &pair[1].text))
                })
                .collect()
        };
        TripletSet::new(sentence, triplets)
    }
}

fn question_triplets(ws: &[Word<'_>], ms: &[Mention]) -> Vec<Triplet> {
    let in_mention = |i: usize| ms.iter().any(|m| (m.start..m.end).contains(&i));
    let mut out = Vec::new();
    for m in ms {
        let relation = if m.possessive {
            ws.get(m.end).map(|w| {
                w.core
                    .trim_matches(|c: char| !c.is_alphanumeric())
                    .to_string()
            })
        } else {
            let rest: Vec<Word<'_>> = ws
                .iter()
                .enumerate()
                .filter(|&(i, w)| !in_mention(i) && !w.is_stop())
                .map(|(_, w)| w.clone())
                .collect();
            clean_relation(&rest)
        };
        if let Some(relation) = relation.filter(|r| !r.is_empty()) {
            out.push(Triplet::partial(&m.text, relation));
        }
    }
    out
}

impl Extractor for RuleExtractor {
    fn extract_triplets(&self, sentence: &str) -> Result<TripletSet, ExtractionError> {
        Ok(Self::triplets(sentence))
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct FixtureRecord {
    sentence: String,
    triplets: Vec<Vec<String>>,
}

/// Replays recorded `(sentence → triplets)` pairs verbatim.
#[derive(Debug, Clone, Default)]
pub struct FixtureExtractor {
    records: HashMap<String, Vec<Triplet>>,
    order: Vec<String>,
}

impl FixtureExtractor {
    /// Reads newline-delimited `{"sentence": .., "triplets": [[h, r, t?], ..]}`.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, ExtractionError> {
        let mut fixture = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| ExtractionError::FixtureFormat {
                line: i + 1,
                message,
            };
            let record: FixtureRecord =
                serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let triplets = record
                .triplets
                .into_iter()
                .map(|parts| {
                    Triplet::from_array(parts.clone())
                        .ok_or_else(|| bad(format!("invalid triplet {parts:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            fixture.insert(record.sentence, triplets);
        }
        Ok(fixture)
    }

    /// The bundled extractor training examples.
    pub fn builtin() -> Self {
        Self::from_reader(FIXTURE_EXAMPLES.as_bytes()).expect("bundled fixture is valid")
    }

    pub fn insert(&mut self, sentence: impl Into<String>, triplets: Vec<Triplet>) {
        let sentence = sentence.into();
        if self.records.insert(sentence.clone(), triplets).is_none() {
            self.order.push(sentence);
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sentences in file order.
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }
}

impl Extractor for FixtureExtractor {
    fn extract_triplets(&self, sentence: &str) -> Result<TripletSet, ExtractionError> {
        let key = sentence.trim();
        self.records
            .get(key)
            .map(|t| TripletSet::new(sentence, t.clone()))
            .ok_or_else(|| ExtractionError::NoFixture {
                sentence: sentence.to_string(),
            })
    }
}

/// Prompts an instruction model with the bundled examples as few-shots and
/// parses a JSON array of string arrays from its reply.
pub struct RemoteExtractor<G> {
    generator: G,
    max_tokens: usize,
    prompt_prefix: String,
}

impl<G: Generator> RemoteExtractor<G> {
    pub fn new(generator: G) -> Self {
        let mut prefix = String::from(
            "Extract knowledge triplets from the sentence as a JSON array of [head, relation, tail] arrays. \
             For questions, give partial [head, relation] arrays. \
             For reasoning conclusions, give [].\n\n",
        );
        let fixture = FixtureExtractor::builtin();
        for sentence in fixture.sentences() {
            let arrays: Vec<Vec<String>> = fixture.records[sentence]
                .iter()
                .map(Triplet::to_array)
                .collect();
            prefix.push_str(&format!(
                "Sentence: {sentence}\nTriplets: {}\n\n",
                serde_json::to_string(&arrays).unwrap()
            ));
        }
        Self {
            generator,
            max_tokens: 256,
            prompt_prefix: prefix,
        }
    }

    pub fn prompt(&self, sentence: &str) -> String {
        format!(
            "{}Sentence: {}\nTriplets:",
            self.prompt_prefix,
            sentence.trim()
        )
    }
}

/// Parses the first JSON array of string arrays in `output`.
pub fn parse_triplet_output(output: &str) -> Option<Vec<Triplet>> {
    let start = output.find('[')?;
    let mut stream =
        serde_json::Deserializer::from_str(&output[start..]).into_iter::<Vec<Vec<String>>>();
    let arrays = stream.next()?.ok()?;
    arrays.into_iter().map(Triplet::from_array).collect()
}

impl<G: Generator> Extractor for RemoteExtractor<G> {
    fn extract_triplets(&self, sentence: &str) -> Result<TripletSet, ExtractionError> {
        let completion = self
            .generator
            .generate(&self.prompt(sentence), self.max_tokens)
            .map_err(|source| ExtractionError::Backend {
                sentence: sentence.to_string(),
                source,
            })?;
        let triplets =
            parse_triplet_output(&completion.text).ok_or_else(|| ExtractionError::Malformed {
                sentence: sentence.to_string(),
                output: completion.text.clone(),
            })?;
        Ok(TripletSet::new(sentence, triplets))
    }
}
