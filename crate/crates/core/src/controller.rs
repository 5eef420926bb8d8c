//! The generation loop.
//!
//! 1. Extract the question's entities and average their corpus frequency. If
//!    the average is below `tau_entity` (or there are no entities), retrieve
//!    with the question itself and put the results in the prompt.
//! 2. Generate one chunk at a time, keep only its first sentence, extract
//!    triplets from it and look up the co-occurrence of every full triplet's
//!    head and tail. If the smallest count is below `tau_cooc`, retrieve with
//!    `head relation` of the first minimizing triplet and regenerate the
//!    sentence.
//! 3. Stop once a sentence contains "so the answer is" or after
//!    `max_sentences` sentences.
//!
//! Everything that happens is recorded in a [`GenerationTrace`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{EntitySet, Extractor, Triplet, TripletSet};
use crate::gateway::{
    build_prompt, Completion, Generator, PromptAssembly, DEFAULT_FEW_SHOT, DEFAULT_INSTRUCTION,
};
use crate::index::{CorpusIndex, PhraseQuery};
use crate::retriever::{RetrievalCorpus, RetrievalEvent, Stage};

pub const STOP_PHRASE: &str = "so the answer is";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSource {
    #[default]
    CorpusStatistics,
}

/// How retrieved documents enter the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPolicy {
    /// Each retrieval replaces the previous context block.
    #[default]
    ReplaceLatest,
    /// Retrieved documents accumulate, without duplicates.
    Accumulate,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{0} must be a finite non-negative number")]
    NegativeThreshold(&'static str),
    #[error("{0} must be at least 1")]
    ZeroLimit(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tau_entity: f64,
    pub tau_cooc: u64,
    pub window_size: usize,
    pub top_k: usize,
    pub max_sentences: usize,
    pub max_tokens_per_step: usize,
    pub max_regen_per_sentence: usize,
    pub signal_source: SignalSource,
    pub context_policy: ContextPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau_entity: 1000.0,
            tau_cooc: 1,
            window_size: 1000,
            top_k: 3,
            max_sentences: 10,
            max_tokens_per_step: 128,
            max_regen_per_sentence: 1,
            signal_source: SignalSource::CorpusStatistics,
            context_policy: ContextPolicy::ReplaceLatest,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tau_entity.is_finite() && self.tau_entity >= 0.0) {
            return Err(ConfigError::NegativeThreshold("tau_entity"));
        }
        for (name, value) in [
            ("window_size", self.window_size),
            ("top_k", self.top_k),
            ("max_sentences", self.max_sentences),
            ("max_tokens_per_step", self.max_tokens_per_step),
            ("max_regen_per_sentence", self.max_regen_per_sentence),
        ] {
            if value == 0 {
                return Err(ConfigError::ZeroLimit(name));
            }
        }
        Ok(())
    }
}

/// Outcome of one retrieval decision and the numbers behind it.
///
/// `statistic` is the average entity frequency (pre-generation) or the
/// minimum co-occurrence (runtime); it is `None` when there was nothing to
/// measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerDecision {
    pub triggered: bool,
    pub stage: Stage,
    pub statistic: Option<f64>,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Triplet>,
}

/// Stage-1 decision. An empty entity set triggers with statistic 0.
pub fn pre_generation_assess(
    index: &CorpusIndex,
    entities: &EntitySet,
    config: &RunConfig,
) -> TriggerDecision {
    let phrases: Vec<PhraseQuery> = entities
        .iter()
        .filter_map(|e| PhraseQuery::parse(e).ok())
        .collect();
    let threshold = config.tau_entity;
    let (triggered, statistic) = match index.avg_entity_freq(&phrases) {
        Ok(avg) => (avg < threshold, avg),
        Err(_) => (true, 0.0),
    };
    TriggerDecision {
        triggered,
        stage: Stage::PreGeneration,
        statistic: Some(statistic),
        threshold,
        witness: None,
    }
}

/// Runtime decision for one sentence's triplets. Partial triplets, and
/// triplets whose head or tail has no tokens, are not checked.
pub fn verify_sentence(
    index: &CorpusIndex,
    triplets: &TripletSet,
    config: &RunConfig,
) -> TriggerDecision {
    let threshold = config.tau_cooc as f64;
    let mut best: Option<(u64, &Triplet)> = None;
    for triplet in &triplets.triplets {
        let Some(tail) = &triplet.tail else { continue };
        let (Ok(h), Ok(t)) = (PhraseQuery::parse(&triplet.head), PhraseQuery::parse(tail)) else {
            continue;
        };
        let count = index.cooc(&h, &t);
        if best.is_none_or(|(min, _)| count < min) {
            best = Some((count, triplet));
        }
    }
    match best {
        None => TriggerDecision {
            triggered: false,
            stage: Stage::Runtime,
            statistic: None,
            threshold,
            witness: None,
        },
        Some((min, witness)) => {
            let triggered = (min as f64) < threshold;
            TriggerDecision {
                triggered,
                stage: Stage::Runtime,
                statistic: Some(min as f64),
                threshold,
                witness: triggered.then(|| witness.clone()),
            }
        }
    }
}

/// Query for a flagged claim: head and relation, never the tail.
pub fn formulate_query(witness: &Triplet) -> String {
    format!("{} {}", witness.head, witness.relation)
}

const ABBREVIATIONS: &[&str] = &["Mr", "Dr", "St"];

/// Splits off the first sentence of a generation chunk.
///
/// A sentence ends at `.`, `!` or `?` followed by whitespace or the end of
/// the chunk, or at a line break. A period after a single letter or after
/// `Mr`, `Dr`, `St` is not a terminator. Returns `(sentence, remainder)`.
pub fn segment_first_sentence(raw: &str) -> (&str, &str) {
    let mut chars = raw.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '\n' {
            return (&raw[..i], &raw[i..]);
        }
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let at_boundary = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
        if !at_boundary {
            continue;
        }
        if c == '.' {
            let word = raw[..i].rsplit(char::is_whitespace).next().unwrap_or("");
            let word = word.trim_start_matches(|ch: char| !ch.is_alphanumeric());
            let single_letter = word.chars().count() == 1 && word.chars().all(char::is_alphabetic);
            if single_letter || ABBREVIATIONS.contains(&word) {
                continue;
            }
        }
        let end = i + c.len_utf8();
        return (&raw[..end], &raw[end..]);
    }
    (raw, "")
}

/// Prompt pieces that stay fixed for a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub few_shot_block: String,
    pub instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            few_shot_block: DEFAULT_FEW_SHOT.to_string(),
            instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallPurpose {
    Generate,
    Regenerate,
}

/// One generator call as seen by the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub step_index: usize,
    pub purpose: CallPurpose,
    pub completion_tokens: usize,
    pub prompt_tokens: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regeneration {
    pub query: String,
    /// The sentence that was flagged and replaced.
    pub rejected: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub step_index: usize,
    /// The accepted sentence.
    pub text: String,
    pub decisions: Vec<TriggerDecision>,
    pub regenerations: Vec<Regeneration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction_error: Option<String>,
}

/// Everything one question's run did. Serialized one per line for batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub entities: EntitySet,
    pub pre_generation: TriggerDecision,
    pub sentences: Vec<SentenceRecord>,
    pub retrieval_events: Vec<RetrievalEvent>,
    pub calls: Vec<CallRecord>,
    pub generated_token_count: usize,
    pub prompt_token_count: usize,
    pub llm_call_count: usize,
    pub retrieval_count: usize,
    pub final_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl GenerationTrace {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Every decision in run order: pre-generation first, then per sentence.
    pub fn decisions(&self) -> impl Iterator<Item = &TriggerDecision> {
        std::iter::once(&self.pre_generation)
            .chain(self.sentences.iter().flat_map(|s| &s.decisions))
    }
}

/// Dependencies of a run. Indexes are shared read-only; the generator and
/// extractor must tolerate concurrent use if engines run in parallel.
pub struct Engine<'a> {
    pub index: &'a CorpusIndex,
    pub corpus: &'a RetrievalCorpus,
    pub generator: &'a dyn Generator,
    pub extractor: &'a dyn Extractor,
    pub config: RunConfig,
    pub template: PromptTemplate,
}

struct RunState {
    trace: GenerationTrace,
    context: Vec<(String, String)>,
    accepted: Vec<String>,
}

impl RunState {
    fn prompt(&self, engine: &Engine<'_>) -> String {
        build_prompt(&PromptAssembly {
            few_shot_block: engine.template.few_shot_block.clone(),
            context: self.context.iter().map(|(_, text)| text.clone()).collect(),
            instruction: engine.template.instruction.clone(),
            question: self.trace.question.clone(),
            prior_sentences: self.accepted.join(" "),
        })
    }

    fn record_call(&mut self, step_index: usize, purpose: CallPurpose, c: &Completion) {
        self.trace.calls.push(CallRecord {
            step_index,
            purpose,
            completion_tokens: c.completion_tokens,
            prompt_tokens: c.prompt_tokens,
            latency_ms: c.call_latency.as_secs_f64() * 1000.0,
        });
        self.trace.llm_call_count += 1;
        self.trace.generated_token_count += c.completion_tokens;
        self.trace.prompt_token_count += c.prompt_tokens;
    }

    fn install(&mut self, engine: &Engine<'_>, event: &RetrievalEvent) {
        let docs: Vec<(String, String)> = event
            .results
            .iter()
            .filter_map(|r| {
                engine
                    .corpus
                    .passage(&r.doc_id)
                    .map(|p| (p.doc_id.clone(), p.text.clone()))
            })
            .collect();
        match engine.config.context_policy {
            ContextPolicy::ReplaceLatest => self.context = docs,
            ContextPolicy::Accumulate => {
                for doc in docs {
                    if !self.context.iter().any(|(id, _)| *id == doc.0) {
                        self.context.push(doc);
                    }
                }
            }
        }
        self.trace.retrieval_events.push(event.clone());
        self.trace.retrieval_count += 1;
    }
}

fn first_sentence(text: &str) -> String {
    segment_first_sentence(text.trim_start())
        .0
        .trim()
        .to_string()
}

impl<'a> Engine<'a> {
    pub fn new(
        index: &'a CorpusIndex,
        corpus: &'a RetrievalCorpus,
        generator: &'a dyn Generator,
        extractor: &'a dyn Extractor,
        config: RunConfig,
    ) -> Self {
        if config.window_size != index.window_size() {
            log::warn!(
                "configured window size {} differs from the index's {}; the index's is used",
                config.window_size,
                index.window_size()
            );
        }
        Self {
            index,
            corpus,
            generator,
            extractor,
            config,
            template: PromptTemplate::default(),
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn run(&self, question: &str) -> GenerationTrace {
        let cfg = &self.config;
        let entities = self.extractor.extract_entities(question);
        let pre = pre_generation_assess(self.index, &entities, cfg);
        let mut state = RunState {
            trace: GenerationTrace {
                id: None,
                question: question.to_string(),
                entities,
                pre_generation: pre.clone(),
                sentences: Vec::new(),
                retrieval_events: Vec::new(),
                calls: Vec::new(),
                generated_token_count: 0,
                prompt_token_count: 0,
                llm_call_count: 0,
                retrieval_count: 0,
                final_text: String::new(),
                failure: None,
            },
            context: Vec::new(),
            accepted: Vec::new(),
        };

        if pre.triggered {
            match self
                .corpus
                .retrieve(question, cfg.top_k, Stage::PreGeneration, 0)
            {
                Ok(event) => state.install(self, &event),
                Err(e) => log::warn!("pre-generation retrieval skipped: {e}"),
            }
        }

        for step in 0..cfg.max_sentences {
            let completion = match self
                .generator
                .generate(&state.prompt(self), cfg.max_tokens_per_step)
            {
                Ok(c) => c,
                Err(e) => {
                    state.trace.failure = Some(format!("generation failed at step {step}: {e}"));
                    break;
                }
            };
            state.record_call(step, CallPurpose::Generate, &completion);
            let mut sentence = first_sentence(&completion.text);
            if sentence.is_empty() {
                break;
            }

            let mut record = SentenceRecord {
                step_index: step,
                text: String::new(),
                decisions: Vec::new(),
                regenerations: Vec::new(),
                extraction_error: None,
            };
            let mut regen_left = cfg.max_regen_per_sentence;
            loop {
                let decision = match self.extractor.extract_triplets(&sentence) {
                    Ok(triplets) => verify_sentence(self.index, &triplets, cfg),
                    Err(e) => {
                        log::warn!("triplet extraction failed; sentence accepted unverified: {e}");
                        record.extraction_error = Some(e.to_string());
                        break;
                    }
                };
                let witness = decision.witness.clone();
                record.decisions.push(decision);
                let Some(witness) = witness else { break };
                if regen_left == 0 {
                    break;
                }
                regen_left -= 1;

                let query = formulate_query(&witness);
                match self
                    .corpus
                    .retrieve(&query, cfg.top_k, Stage::Runtime, step)
                {
                    Ok(event) => state.install(self, &event),
                    Err(e) => {
                        log::warn!("runtime retrieval skipped: {e}");
                        break;
                    }
                }
                let regenerated = match self
                    .generator
                    .generate(&state.prompt(self), cfg.max_tokens_per_step)
                {
                    Ok(c) => c,
                    Err(e) => {
                        state.trace.failure =
                            Some(format!("regeneration failed at step {step}: {e}"));
                        break;
                    }
                };
                state.record_call(step, CallPurpose::Regenerate, &regenerated);
                let new_sentence = first_sentence(&regenerated.text);
                record.regenerations.push(Regeneration {
                    query,
                    rejected: std::mem::take(&mut sentence),
                    text: new_sentence.clone(),
                });
                sentence = new_sentence;
                // The last permitted regeneration is accepted as is.
                if regen_left == 0 {
                    break;
                }
            }
            if state.trace.failure.is_some() {
                state.trace.sentences.push(SentenceRecord {
                    text: String::new(),
                    ..record
                });
                break;
            }

            let done = sentence.to_lowercase().contains(STOP_PHRASE);
            record.text = sentence.clone();
            if !sentence.is_empty() {
                state.accepted.push(sentence);
            }
            state.trace.sentences.push(record);
            if done {
                break;
            }
        }

        state.trace.final_text = state.accepted.join(" ");
        state.trace
    }
}

/// Runs one question with the default prompt template.
pub fn run_question(
    question: &str,
    index: &CorpusIndex,
    corpus: &RetrievalCorpus,
    generator: &dyn Generator,
    extractor: &dyn Extractor,
    config: &RunConfig,
) -> GenerationTrace {
    Engine::new(index, corpus, generator, extractor, config.clone()).run(question)
}
