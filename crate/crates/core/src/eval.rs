//! Answer scoring and per-frequency-bin aggregation.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{GenerationTrace, STOP_PHRASE};
use crate::index::{CorpusIndex, PhraseQuery};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no trace for sample {0:?}")]
    MissingTrace(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
}

/// Reads newline-delimited samples, skipping blank lines.
pub fn read_samples<R: BufRead>(reader: R) -> Result<Vec<QaSample>, EvalError> {
    read_jsonl(reader)
}

/// Reads newline-delimited traces, skipping blank lines.
pub fn read_traces<R: BufRead>(reader: R) -> Result<Vec<GenerationTrace>, EvalError> {
    read_jsonl(reader)
}

fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(reader: R) -> Result<Vec<T>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Text after the last "so the answer is" (any case), without the final
/// period. Text without the phrase is returned whole.
pub fn extract_final_answer(text: &str) -> &str {
    // ASCII lowercasing keeps byte offsets aligned with `text`.
    let lower = text.to_ascii_lowercase();
    let answer = match lower.rfind(STOP_PHRASE) {
        Some(pos) => &text[pos + STOP_PHRASE.len()..],
        None => text,
    };
    let answer = answer.trim();
    answer.strip_suffix('.').unwrap_or(answer).trim()
}

/// Lowercase, strip punctuation, drop articles, split on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    f64::from(u8::from(
        normalize_answer(prediction) == normalize_answer(gold),
    ))
}

/// Bag-of-tokens F1 on normalized answers.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    if pred.is_empty() || gold.is_empty() {
        return f64::from(u8::from(pred == gold));
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best score over all gold answers.
pub fn best_over(prediction: &str, golds: &[String], metric: fn(&str, &str) -> f64) -> f64 {
    golds
        .iter()
        .map(|g| metric(prediction, g))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrequencyBin {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1-10")]
    UpTo10,
    #[serde(rename = "11-50")]
    UpTo50,
    #[serde(rename = "51-100")]
    UpTo100,
    #[serde(rename = "101-500")]
    UpTo500,
    #[serde(rename = "501-1k")]
    UpTo1k,
    #[serde(rename = "1k-5k")]
    UpTo5k,
    #[serde(rename = ">5k")]
    Above5k,
}

impl FrequencyBin {
    pub const ALL: [FrequencyBin; 8] = [
        FrequencyBin::Zero,
        FrequencyBin::UpTo10,
        FrequencyBin::UpTo50,
        FrequencyBin::UpTo100,
        FrequencyBin::UpTo500,
        FrequencyBin::UpTo1k,
        FrequencyBin::UpTo5k,
        FrequencyBin::Above5k,
    ];

    /// Bins the floor of `value`; upper edges are inclusive.
    pub fn of(value: f64) -> Self {
        let v = value.max(0.0).floor();
        match v {
            v if v < 1.0 => Self::Zero,
            v if v <= 10.0 => Self::UpTo10,
            v if v <= 50.0 => Self::UpTo50,
            v if v <= 100.0 => Self::UpTo100,
            v if v <= 500.0 => Self::UpTo500,
            v if v <= 1000.0 => Self::UpTo1k,
            v if v <= 5000.0 => Self::UpTo5k,
            _ => Self::Above5k,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Zero => "0",
            Self::UpTo10 => "1-10",
            Self::UpTo50 => "11-50",
            Self::UpTo100 => "51-100",
            Self::UpTo500 => "101-500",
            Self::UpTo1k => "501-1k",
            Self::UpTo5k => "1k-5k",
            Self::Above5k => ">5k",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    pub avg_retrievals: f64,
    pub avg_llm_calls: f64,
    pub avg_tokens: f64,
}

#[derive(Default)]
struct Sums {
    count: usize,
    em: f64,
    f1: f64,
    retrievals: usize,
    calls: usize,
    tokens: usize,
}

impl Sums {
    fn add(&mut self, em: f64, f1: f64, trace: &GenerationTrace) {
        self.count += 1;
        self.em += em;
        self.f1 += f1;
        self.retrievals += trace.retrieval_count;
        self.calls += trace.llm_call_count;
        self.tokens += trace.generated_token_count;
    }

    fn finish(&self) -> Metrics {
        if self.count == 0 {
            return Metrics::default();
        }
        let n = self.count as f64;
        Metrics {
            count: self.count,
            em: self.em / n,
            f1: self.f1 / n,
            avg_retrievals: self.retrievals as f64 / n,
            avg_llm_calls: self.calls as f64 / n,
            avg_tokens: self.tokens as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    /// All eight bins in ascending order, empty ones included.
    pub per_bin: Vec<(FrequencyBin, Metrics)>,
    pub failed_traces: usize,
}

/// Average frequency of the entities recorded in a trace, 0 when none.
pub fn entity_frequency(index: &CorpusIndex, trace: &GenerationTrace) -> f64 {
    let phrases: Vec<PhraseQuery> = trace
        .entities
        .iter()
        .filter_map(|e| PhraseQuery::parse(e).ok())
        .collect();
    index.avg_entity_freq(&phrases).unwrap_or(0.0)
}

/// Scores every sample against the trace with the same id.
pub fn aggregate(
    samples: &[QaSample],
    traces: &[GenerationTrace],
    index: &CorpusIndex,
) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &GenerationTrace> = traces
        .iter()
        .filter_map(|t| t.id.as_deref().map(|id| (id, t)))
        .collect();
    let mut overall = Sums::default();
    let mut bins: Vec<Sums> = FrequencyBin::ALL.iter().map(|_| Sums::default()).collect();
    let mut failed = 0;
    for sample in samples {
        let trace = by_id
            .get(sample.id.as_str())
            .ok_or_else(|| EvalError::MissingTrace(sample.id.clone()))?;
        if trace.failed() {
            failed += 1;
        }
        let prediction = extract_final_answer(&trace.final_text);
        let em = best_over(prediction, &sample.answers, exact_match);
        let f1 = best_over(prediction, &sample.answers, token_f1);
        overall.add(em, f1, trace);
        let bin = FrequencyBin::of(entity_frequency(index, trace));
        bins[bin as usize].add(em, f1, trace);
    }
    Ok(EvalReport {
        overall: overall.finish(),
        per_bin: FrequencyBin::ALL
            .iter()
            .zip(&bins)
            .map(|(b, s)| (*b, s.finish()))
            .collect(),
        failed_traces: failed,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10}{:>7}{:>8}{:>8}{:>12}{:>11}{:>10}",
            "bin", "n", "EM", "F1", "retrievals", "llm calls", "tokens"
        )?;
        let rows = self
            .per_bin
            .iter()
            .map(|(b, m)| (b.label(), m))
            .chain(std::iter::once(("all", &self.overall)));
        for (label, m) in rows {
            writeln!(
                f,
                "{:<10}{:>7}{:>8.3}{:>8.3}{:>12.2}{:>11.2}{:>10.1}",
                label, m.count, m.em, m.f1, m.avg_retrievals, m.avg_llm_calls, m.avg_tokens
            )?;
        }
        if self.failed_traces > 0 {
            writeln!(f, "failed traces: {}", self.failed_traces)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(exact_match("The Eiffel Tower", "eiffel tower"), 1.0);
        assert!((token_f1("Paris France", "Paris") - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("", "x"), 0.0);
        assert_eq!(token_f1("a", "the"), 1.0);
        assert_eq!(exact_match("Paris!", "paris"), 1.0);
    }

    #[test]
    fn final_answer_extraction() {
        assert_eq!(
            extract_final_answer("Her mother is X. So the answer is Małgorzata Braunek."),
            "Małgorzata Braunek"
        );
        assert_eq!(
            extract_final_answer("so the answer is a. SO THE ANSWER IS b."),
            "b"
        );
        assert_eq!(extract_final_answer("No marker here"), "No marker here");
    }

    #[test]
    fn bins_have_inclusive_upper_edges() {
        use FrequencyBin::*;
        let cases = [
            (0.0, Zero),
            (0.9, Zero),
            (1.0, UpTo10),
            (10.0, UpTo10),
            (10.5, UpTo10),
            (11.0, UpTo50),
            (100.0, UpTo100),
            (500.0, UpTo500),
            (1000.0, UpTo1k),
            (1000.7, UpTo1k),
            (1001.0, UpTo5k),
            (5000.0, UpTo5k),
            (5001.0, Above5k),
        ];
        for (v, bin) in cases {
            assert_eq!(FrequencyBin::of(v), bin, "{v}");
        }
        assert_eq!(serde_json::to_string(&Above5k).unwrap(), "\">5k\"");
    }

    #[test]
    fn sample_parsing() {
        let text = "{\"id\":\"q1\",\"question\":\"Who?\",\"answers\":[\"A\",\"B\"]}\n\n";
        let samples = read_samples(text.as_bytes()).unwrap();
        assert_eq!(samples[0].answers, vec!["A", "B"]);
        assert!(matches!(
            read_samples("{\"id\":1}".as_bytes()),
            Err(EvalError::Malformed { line: 1, .. })
        ));
    }
}
