//! Run settings: a flat TOML file whose keys match the long flags of `run`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, ValueEnum};
use corag::controller::{ContextPolicy, RunConfig, SignalSource};
use corag::gateway::RemoteConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Remote,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Rules,
    Fixture,
    Remote,
}

fn parse_snake<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Every field is optional; unset fields fall back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Retrieve before generating when the average entity frequency is below this
    #[arg(long)]
    pub tau_entity: Option<f64>,
    /// Retrieve for a sentence when the smallest head/tail co-occurrence is below this
    #[arg(long)]
    pub tau_cooc: Option<u64>,
    /// Expected co-occurrence window of the statistics index
    #[arg(long)]
    pub window_size: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub max_sentences: Option<usize>,
    #[arg(long)]
    pub max_tokens_per_step: Option<usize>,
    #[arg(long)]
    pub max_regen_per_sentence: Option<usize>,
    #[arg(long, value_parser = parse_snake::<SignalSource>)]
    pub signal_source: Option<SignalSource>,
    /// replace_latest or accumulate
    #[arg(long, value_parser = parse_snake::<ContextPolicy>)]
    pub context_policy: Option<ContextPolicy>,

    #[arg(long, value_enum)]
    pub generator: Option<GeneratorKind>,
    /// JSON generator script for the scripted backend
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Base URL of a chat-completions endpoint
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,

    #[arg(long, value_enum)]
    pub extractor: Option<ExtractorKind>,
    /// JSONL fixture for the fixture extractor; the bundled one when unset
    #[arg(long)]
    pub fixture: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_toml(&text)?)
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: Settings) -> Self {
        overlay!(
            self,
            top,
            tau_entity,
            tau_cooc,
            window_size,
            top_k,
            max_sentences,
            max_tokens_per_step,
            max_regen_per_sentence,
            signal_source,
            context_policy,
            generator,
            script,
            endpoint,
            model,
            api_key_env,
            timeout_secs,
            max_retries,
            max_in_flight,
            extractor,
            fixture
        );
        self
    }

    pub fn run_config(&self) -> RunConfig {
        let d = RunConfig::default();
        RunConfig {
            tau_entity: self.tau_entity.unwrap_or(d.tau_entity),
            tau_cooc: self.tau_cooc.unwrap_or(d.tau_cooc),
            window_size: self.window_size.unwrap_or(d.window_size),
            top_k: self.top_k.unwrap_or(d.top_k),
            max_sentences: self.max_sentences.unwrap_or(d.max_sentences),
            max_tokens_per_step: self.max_tokens_per_step.unwrap_or(d.max_tokens_per_step),
            max_regen_per_sentence: self
                .max_regen_per_sentence
                .unwrap_or(d.max_regen_per_sentence),
            signal_source: self.signal_source.unwrap_or(d.signal_source),
            context_policy: self.context_policy.unwrap_or(d.context_policy),
        }
    }

    pub fn remote_config(&self) -> RemoteConfig {
        let d = RemoteConfig::default();
        RemoteConfig {
            endpoint: self.endpoint.clone().unwrap_or(d.endpoint),
            model: self.model.clone().unwrap_or(d.model),
            api_key_env: self.api_key_env.clone().or(d.api_key_env),
            timeout: self
                .timeout_secs
                .map(Duration::from_secs_f64)
                .unwrap_or(d.timeout),
            max_retries: self.max_retries.unwrap_or(d.max_retries),
            max_in_flight: self.max_in_flight.unwrap_or(d.max_in_flight),
        }
    }
}
