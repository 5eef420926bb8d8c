//! Completion interface used by the generation loop and the remote triplet
//! extractor, plus prompt assembly.
//!
//! Two backends implement [`Generator`]:
//!
//! * [`RemoteGenerator`] posts to an OpenAI-style chat-completions endpoint
//!   (`POST {endpoint}/chat/completions`) with deterministic decoding.
//! * [`ScriptedGenerator`] replays a [`GeneratorScript`]; each call returns the
//!   first remaining step whose predicate matches the prompt.
//!
//! Token accounting uses whitespace-separated words throughout
//! ([`count_tokens`]) unless the remote server reports usage.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Context header line placed above numbered retrieved documents.
pub const CONTEXT_HEADER: &str =
    "Background information that may be potentially useful in addressing your question:";

/// Default task instruction.
pub const DEFAULT_INSTRUCTION: &str = "Please answer the following questions. The format of the answers should be the same as the examples given before. Specifically, you need to think through the answer to this question step by step. Each sentence should only present a fact statement. Avoid using pronouns like He/She/It or possessive pronouns like His/Her/Its, but instead use specific names. At the end of your answer, use \"So the answer is\" to provide your answer.";

/// Built-in demonstration. Longer few-shot sets are loaded from files.
pub const DEFAULT_FEW_SHOT: &str = "Question: When did the director of film Hypocrite (Film) die?\nAnswer: The film Hypocrite was directed by Miguel Morayta. Miguel Morayta died on 19 June 2013. So the answer is 19 June 2013.";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend request failed after {retries} retries: {message}")]
    Backend { message: String, retries: u32 },
    #[error("malformed backend response after {retries} retries: {message}")]
    Malformed { message: String, retries: u32 },
    #[error("generator script exhausted after {steps} steps")]
    ScriptExhausted { steps: usize },
    #[error("no remaining script step (from step {cursor}) matches the prompt")]
    PredicateMismatch { cursor: usize },
    #[error("max_tokens must be at least 1")]
    ZeroMaxTokens,
}

/// Prompt pieces, rendered in a fixed order: few-shots, retrieved context,
/// instruction, question, then the answer so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssembly {
    pub few_shot_block: String,
    pub context: Vec<String>,
    pub instruction: String,
    pub question: String,
    pub prior_sentences: String,
}

impl PromptAssembly {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            few_shot_block: DEFAULT_FEW_SHOT.to_string(),
            context: Vec::new(),
            instruction: DEFAULT_INSTRUCTION.to_string(),
            question: question.into(),
            prior_sentences: String::new(),
        }
    }
}

pub fn build_prompt(assembly: &PromptAssembly) -> String {
    let mut out = String::new();
    if !assembly.few_shot_block.trim().is_empty() {
        out.push_str(assembly.few_shot_block.trim_end());
        out.push_str("\n\n");
    }
    if !assembly.context.is_empty() {
        out.push_str(CONTEXT_HEADER);
        out.push('\n');
        for (i, doc) in assembly.context.iter().enumerate() {
            out.push_str(&format!("[{}] {}\n", i + 1, doc.trim()));
        }
        out.push('\n');
    }
    out.push_str(assembly.instruction.trim_end());
    out.push_str("\n\nQuestion: ");
    out.push_str(assembly.question.trim());
    out.push_str("\nAnswer:");
    let prior = assembly.prior_sentences.trim();
    if !prior.is_empty() {
        out.push(' ');
        out.push_str(prior);
    }
    out
}

/// Gateway token count: whitespace-separated words.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `max_tokens` whitespace-separated words of `text`,
/// preserving the original spacing between them.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> &str {
    let mut seen = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word && seen == max_tokens {
                return &text[..i];
            }
            in_word = false;
        } else if !in_word {
            in_word = true;
            seen += 1;
            if seen > max_tokens {
                return text[..i].trim_end();
            }
        }
    }
    text
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub completion_tokens: usize,
    pub prompt_tokens: usize,
    #[serde(with = "duration_ms")]
    pub call_latency: Duration,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(ms.max(0.0) / 1000.0))
    }
}

/// A completion backend. Implementations must be shareable across threads.
pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Completion, GatewayError>;
}

impl<G: Generator + ?Sized> Generator for std::sync::Arc<G> {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Completion, GatewayError> {
        (**self).generate(prompt, max_tokens)
    }
}

impl<G: Generator + ?Sized> Generator for &G {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Completion, GatewayError> {
        (**self).generate(prompt, max_tokens)
    }
}

/// Condition a prompt must satisfy for a script step to fire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Always,
    Contains(String),
    Lacks(String),
    EndsWith(String),
    All(Vec<Predicate>),
}

impl Predicate {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Predicate::Always => true,
            Predicate::Contains(s) => prompt.contains(s.as_str()),
            Predicate::Lacks(s) => !prompt.contains(s.as_str()),
            Predicate::EndsWith(s) => prompt.ends_with(s.as_str()),
            Predicate::All(ps) => ps.iter().all(|p| p.matches(prompt)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(default = "always")]
    pub when: Predicate,
    pub text: String,
}

fn always() -> Predicate {
    Predicate::Always
}

impl ScriptStep {
    pub fn new(when: Predicate, text: impl Into<String>) -> Self {
        Self {
            when,
            text: text.into(),
        }
    }

    pub fn always(text: impl Into<String>) -> Self {
        Self::new(Predicate::Always, text)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorScript {
    pub steps: Vec<ScriptStep>,
}

impl GeneratorScript {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        Self { steps }
    }
}

/// Deterministic test double replaying a [`GeneratorScript`].
///
/// A call scans forward from the current position for the first step whose
/// predicate matches, returns it, and resumes after it next time. Skipped
/// steps are never revisited.
#[derive(Debug)]
pub struct ScriptedGenerator {
    script: GeneratorScript,
    cursor: Mutex<usize>,
}

impl ScriptedGenerator {
    pub fn new(script: GeneratorScript) -> Self {
        Self {
            script,
            cursor: Mutex::new(0),
        }
    }

    pub fn position(&self) -> usize {
        *self.cursor.lock().unwrap()
    }
}

impl Generator for ScriptedGenerator {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Completion, GatewayError> {
        if max_tokens == 0 {
            return Err(GatewayError::ZeroMaxTokens);
        }
        let started = Instant::now();
        let mut cursor = self.cursor.lock().unwrap();
        if *cursor >= self.script.steps.len() {
            return Err(GatewayError::ScriptExhausted {
                steps: self.script.steps.len(),
            });
        }
        let found = self.script.steps[*cursor..]
            .iter()
            .position(|s| s.when.matches(prompt))
            .ok_or(GatewayError::PredicateMismatch { cursor: *cursor })?;
        let step = &self.script.steps[*cursor + found];
        *cursor += found + 1;

        let text = truncate_tokens(&step.text, max_tokens).to_string();
        Ok(Completion {
            completion_tokens: count_tokens(&text),
            prompt_tokens: count_tokens(prompt),
            text,
            call_latency: started.elapsed(),
        })
    }
}

/// Remote endpoint settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key_env: None,
            timeout: Duration::from_secs(60),
            max_retries: 2,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f32,
    max_tokens: usize,
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    completion_tokens: Option<usize>,
    prompt_tokens: Option<usize>,
}

struct Permits {
    used: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

/// Blocking chat-completions client with bounded in-flight requests, a
/// per-request timeout and bounded retries on transport errors, 429 and 5xx.
pub struct RemoteGenerator {
    config: RemoteConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    permits: Permits,
}

impl RemoteGenerator {
    pub fn new(config: RemoteConfig) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build();
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok());
        Self {
            agent: ureq::Agent::new_with_config(agent_config),
            api_key,
            permits: Permits {
                used: Mutex::new(0),
                freed: Condvar::new(),
                limit: config.max_in_flight.max(1),
            },
            config,
        }
    }

    fn url(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.endpoint.trim_end_matches('/')
        )
    }

    fn attempt(
        &self,
        prompt: &str,
        max_tokens: usize,
        retries: u32,
    ) -> Result<ChatResponse, Attempt> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
            max_tokens,
        };
        let mut request = self.agent.post(&self.url());
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(GatewayError::Backend {
                message: format!("HTTP {status}: {detail}"),
                retries,
            }));
        }
        response
            .body_mut()
            .read_json::<ChatResponse>()
            .map_err(|e| {
                Attempt::Fatal(GatewayError::Malformed {
                    message: e.to_string(),
                    retries,
                })
            })
    }
}

impl Generator for RemoteGenerator {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Completion, GatewayError> {
        if max_tokens == 0 {
            return Err(GatewayError::ZeroMaxTokens);
        }
        let _permit = self.permits.acquire();
        let started = Instant::now();
        let mut retries = 0;
        let response = loop {
            match self.attempt(prompt, max_tokens, retries) {
                Ok(r) => break r,
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) => {
                    if retries >= self.config.max_retries {
                        return Err(GatewayError::Backend { message, retries });
                    }
                    retries += 1;
                    log::warn!("completion request failed ({message}); retry {retries}");
                    std::thread::sleep(Duration::from_millis(100 * retries as u64));
                }
            }
        };
        let text = response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Malformed {
                message: "response has no message content".into(),
                retries,
            })?;
        let usage = response.usage;
        Ok(Completion {
            completion_tokens: usage
                .as_ref()
                .and_then(|u| u.completion_tokens)
                .unwrap_or_else(|| count_tokens(&text)),
            prompt_tokens: usage
                .as_ref()
                .and_then(|u| u.prompt_tokens)
                .unwrap_or_else(|| count_tokens(prompt)),
            text,
            call_latency: started.elapsed(),
        })
    }
}
