//! Document ingestion, tokenization and the windowed token stream.
//!
//! Every statistic in this crate is computed over a [`TokenStream`]: the
//! concatenation of all documents' word tokens, interned into a sorted
//! vocabulary, with document start offsets and a fixed window size. Windows
//! are non-overlapping chunks of `window_size` tokens that restart at every
//! document boundary, so the last window of a document may be shorter.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// One input record: `{"id": ..., "text": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRecord {
    #[serde(rename = "id")]
    pub doc_id: String,
    pub text: String,
}

impl DocumentRecord {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("window size must be at least 1")]
    ZeroWindow,
    #[error("corpus exceeds {max} tokens", max = u32::MAX)]
    TooLarge,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: document text is empty")]
    EmptyText { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
#[error("token offset {offset} out of range for stream of {len} tokens")]
pub struct OutOfBounds {
    pub offset: usize,
    pub len: usize,
}

/// Identifies one window of the stream. Windows are numbered globally in
/// stream order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowId(pub usize);

/// Lowercases, NFC-normalizes, splits on whitespace and trims non-alphanumeric
/// characters from both ends of every token. Interior punctuation survives,
/// so `polish-russian` and `wallop's` stay single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.to_lowercase().nfc().collect();
    normalized
        .split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            (!trimmed.is_empty()).then(|| trimmed.to_string())
        })
        .collect()
}

/// Summary of an ingest run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub documents: usize,
    pub skipped_empty: usize,
}

/// Immutable, interned token stream with document boundaries.
///
/// Token ids index into `vocab`, which is sorted, so comparing ids compares
/// the underlying strings lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    vocab: Vec<String>,
    ids: Vec<u32>,
    doc_boundaries: Vec<u32>,
    window_size: usize,
    // Global start offset of every window; always contains every doc boundary.
    window_starts: Vec<u32>,
}

impl TokenStream {
    /// Tokenizes and concatenates `documents` in order.
    ///
    /// Documents that produce no tokens are skipped and counted in the
    /// returned stats.
    pub fn ingest<I>(documents: I, window_size: usize) -> Result<(Self, IngestStats), CorpusError>
    where
        I: IntoIterator<Item = DocumentRecord>,
    {
        if window_size == 0 {
            return Err(CorpusError::ZeroWindow);
        }
        let mut seen = HashSet::new();
        let mut interner: HashMap<String, u32> = HashMap::new();
        let mut first_seen: Vec<String> = Vec::new();
        let mut raw_ids: Vec<u32> = Vec::new();
        let mut doc_boundaries = Vec::new();
        let mut stats = IngestStats::default();

        for doc in documents {
            if !seen.insert(doc.doc_id.clone()) {
                return Err(CorpusError::DuplicateId(doc.doc_id));
            }
            let tokens = tokenize(&doc.text);
            if tokens.is_empty() {
                log::warn!("document {:?} has no tokens; skipped", doc.doc_id);
                stats.skipped_empty += 1;
                continue;
            }
            if raw_ids.len() + tokens.len() > u32::MAX as usize {
                return Err(CorpusError::TooLarge);
            }
            doc_boundaries.push(raw_ids.len() as u32);
            for token in tokens {
                let id = match interner.get(&token) {
                    Some(&id) => id,
                    None => {
                        let id = first_seen.len() as u32;
                        interner.insert(token.clone(), id);
                        first_seen.push(token);
                        id
                    }
                };
                raw_ids.push(id);
            }
            stats.documents += 1;
        }

        // Re-number ids so that id order equals string order.
        let mut order: Vec<u32> = (0..first_seen.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| first_seen[a as usize].cmp(&first_seen[b as usize]));
        let mut remap = vec![0u32; first_seen.len()];
        for (sorted, &old) in order.iter().enumerate() {
            remap[old as usize] = sorted as u32;
        }
        let mut slots: Vec<Option<String>> = first_seen.into_iter().map(Some).collect();
        let vocab: Vec<String> = order
            .iter()
            .map(|&old| slots[old as usize].take().expect("each id appears once"))
            .collect();
        for id in raw_ids.iter_mut() {
            *id = remap[*id as usize];
        }

        let stream = Self::from_parts(vocab, raw_ids, doc_boundaries, window_size)
            .expect("ingest produces a well-formed stream");
        Ok((stream, stats))
    }

    /// Convenience wrapper for tests and small fixtures.
    pub fn from_documents<I, S>(texts: I, window_size: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let docs = texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| DocumentRecord::new(format!("doc-{i}"), text));
        Ok(Self::ingest(docs, window_size)?.0)
    }

    /// Reassembles a stream from its stored parts, validating every invariant.
    pub fn from_parts(
        vocab: Vec<String>,
        ids: Vec<u32>,
        doc_boundaries: Vec<u32>,
        window_size: usize,
    ) -> Result<Self, String> {
        if window_size == 0 {
            return Err("window size must be at least 1".into());
        }
        if vocab.windows(2).any(|w| w[0] >= w[1]) {
            return Err("vocabulary is not strictly sorted".into());
        }
        if ids.iter().any(|&id| id as usize >= vocab.len()) {
            return Err("token id outside vocabulary".into());
        }
        if ids.is_empty() != doc_boundaries.is_empty() {
            return Err("document boundaries inconsistent with token count".into());
        }
        if let Some(&first) = doc_boundaries.first() {
            if first != 0 {
                return Err("first document boundary must be 0".into());
            }
        }
        if doc_boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err("document boundaries not strictly increasing".into());
        }
        if doc_boundaries
            .last()
            .is_some_and(|&b| b as usize >= ids.len())
        {
            return Err("document boundary past end of stream".into());
        }

        let total = ids.len();
        let mut window_starts = Vec::new();
        for (i, &start) in doc_boundaries.iter().enumerate() {
            let end = doc_boundaries.get(i + 1).map_or(total, |&e| e as usize);
            window_starts.extend((start as usize..end).step_by(window_size).map(|s| s as u32));
        }
        Ok(Self {
            vocab,
            ids,
            doc_boundaries,
            window_size,
            window_starts,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn doc_count(&self) -> usize {
        self.doc_boundaries.len()
    }

    pub fn window_count(&self) -> usize {
        self.window_starts.len()
    }

    pub fn doc_boundaries(&self) -> &[u32] {
        &self.doc_boundaries
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Sorted vocabulary lookup.
    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab
            .binary_search_by(|probe| probe.as_str().cmp(token))
            .ok()
            .map(|i| i as u32)
    }

    pub fn token(&self, offset: usize) -> Option<&str> {
        self.ids
            .get(offset)
            .map(|&id| self.vocab[id as usize].as_str())
    }

    /// Decoded tokens, mostly useful for oracles and debugging.
    pub fn tokens(&self) -> impl Iterator<Item = &str> + '_ {
        self.ids.iter().map(|&id| self.vocab[id as usize].as_str())
    }

    pub fn window_of(&self, offset: usize) -> Result<WindowId, OutOfBounds> {
        if offset >= self.len() {
            return Err(OutOfBounds {
                offset,
                len: self.len(),
            });
        }
        Ok(WindowId(self.window_index(offset)))
    }

    /// Unchecked variant of [`window_of`](Self::window_of) for hot paths.
    #[inline]
    pub(crate) fn window_index(&self, offset: usize) -> usize {
        self.window_starts
            .partition_point(|&s| s as usize <= offset)
            - 1
    }

    /// Half-open token range `[start, end)` of a window.
    pub fn window_span(&self, window: WindowId) -> (usize, usize) {
        let start = self.window_starts[window.0] as usize;
        let end = self
            .window_starts
            .get(window.0 + 1)
            .map_or(self.len(), |&s| s as usize);
        (start, end)
    }

    /// Serializes vocabulary, boundaries and ids in the index file's
    /// little-endian layout (without header or checksum).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        crate::index::format::write_stream_sections(self, &mut out);
        out
    }
}

/// Reads newline-delimited `{"id", "text"}` records. Blank lines are ignored.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<DocumentRecord>, CorpusError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DocumentRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
        if record.text.trim().is_empty() {
            return Err(CorpusError::EmptyText { line: i + 1 });
        }
        records.push(record);
    }
    Ok(records)
}
