//! Suffix-array index over a [`TokenStream`] answering phrase frequency and
//! windowed co-occurrence queries.
//!
//! A phrase is located as a contiguous range of the suffix array by two binary
//! searches over token-id comparisons, so `freq` costs O(m log n) for a phrase
//! of m tokens. `cooc` counts windows that fully contain at least one
//! occurrence of each phrase; its cost is driven by the rarer phrase.

pub mod format;
mod suffix;

use std::cmp::Ordering;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{tokenize, TokenStream, WindowId};

pub use format::FORMAT_VERSION;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("phrase is empty after tokenization")]
    EmptyPhrase,
    #[error("token {0:?} is not normalized")]
    NotNormalized(String),
    #[error("entity set is empty")]
    EmptyEntitySet,
    #[error("not an index file (bad magic bytes)")]
    BadMagic,
    #[error("index format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("index file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("index checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A non-empty sequence of normalized tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PhraseQuery(Vec<String>);

impl PhraseQuery {
    /// Tokenizes free text into a phrase.
    pub fn parse(text: &str) -> Result<Self, IndexError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(IndexError::EmptyPhrase);
        }
        Ok(Self(tokens))
    }

    /// Wraps tokens that are already normalized.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(IndexError::EmptyPhrase);
        }
        if let Some(bad) = tokens.iter().find(|t| tokenize(t) != [t.as_str()]) {
            return Err(IndexError::NotNormalized(bad.clone()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for PhraseQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

/// Immutable suffix-array index. Safe to share across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusIndex {
    stream: TokenStream,
    suffix_array: Vec<u32>,
}

impl CorpusIndex {
    pub fn build(stream: TokenStream) -> Self {
        let suffix_array = suffix::build(stream.ids(), stream.vocab().len());
        Self {
            stream,
            suffix_array,
        }
    }

    pub(crate) fn from_parts(stream: TokenStream, suffix_array: Vec<u32>) -> Self {
        Self {
            stream,
            suffix_array,
        }
    }

    pub fn stream(&self) -> &TokenStream {
        &self.stream
    }

    pub fn suffix_array(&self) -> &[u32] {
        &self.suffix_array
    }

    pub fn format_version(&self) -> u32 {
        FORMAT_VERSION
    }

    pub fn token_count(&self) -> usize {
        self.stream.len()
    }

    pub fn window_size(&self) -> usize {
        self.stream.window_size()
    }

    /// Number of (possibly overlapping) occurrences of `phrase`.
    pub fn freq(&self, phrase: &PhraseQuery) -> u64 {
        self.locate(phrase).map_or(0, |r| r.len() as u64)
    }

    /// Number of windows containing a full occurrence of both phrases.
    pub fn cooc(&self, head: &PhraseQuery, tail: &PhraseQuery) -> u64 {
        let (Some(head_range), Some(tail_range)) = (self.locate(head), self.locate(tail)) else {
            return 0;
        };
        if head_range.is_empty() || tail_range.is_empty() {
            return 0;
        }
        let (rare, rare_len, other, other_ids) = if head_range.len() <= tail_range.len() {
            (head_range, head.len(), tail_range, self.phrase_ids(tail))
        } else {
            (tail_range, tail.len(), head_range, self.phrase_ids(head))
        };
        let other_ids = other_ids.expect("located phrase has ids");

        let candidates = self.occurrence_windows(rare, rare_len);
        if candidates.is_empty() {
            return 0;
        }

        // Either collect every window of the other phrase and intersect, or
        // scan the candidate windows directly; pick the cheaper.
        let other_len = other.len() as f64;
        let collect_cost = other_len * other_len.log2().max(1.0);
        let scan_cost =
            (candidates.len() * self.stream.window_size().min(self.token_count())) as f64;
        if collect_cost <= scan_cost {
            let other_windows = self.occurrence_windows(other, other_ids.len());
            count_sorted_intersection(&candidates, &other_windows)
        } else {
            candidates
                .iter()
                .filter(|&&w| self.window_contains(w, &other_ids))
                .count() as u64
        }
    }

    /// Mean frequency over a non-empty set of phrases.
    pub fn avg_entity_freq(&self, entities: &[PhraseQuery]) -> Result<f64, IndexError> {
        if entities.is_empty() {
            return Err(IndexError::EmptyEntitySet);
        }
        let total: u64 = entities.iter().map(|e| self.freq(e)).sum();
        Ok(total as f64 / entities.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        format::save(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        format::load(path.as_ref())
    }

    fn phrase_ids(&self, phrase: &PhraseQuery) -> Option<Vec<u32>> {
        phrase
            .tokens()
            .iter()
            .map(|t| self.stream.token_id(t))
            .collect()
    }

    /// Suffix-array range of suffixes starting with `phrase`; `None` when a
    /// token is outside the vocabulary.
    fn locate(&self, phrase: &PhraseQuery) -> Option<Range<usize>> {
        let ids = self.phrase_ids(phrase)?;
        let text = self.stream.ids();
        let compare = |start: u32| -> Ordering {
            let start = start as usize;
            let end = (start + ids.len()).min(text.len());
            text[start..end].cmp(&ids[..])
        };
        let lo = self
            .suffix_array
            .partition_point(|&s| compare(s) == Ordering::Less);
        let hi = lo + self.suffix_array[lo..].partition_point(|&s| compare(s) == Ordering::Equal);
        Some(lo..hi)
    }

    /// Sorted, deduplicated windows that fully contain an occurrence.
    fn occurrence_windows(&self, range: Range<usize>, len: usize) -> Vec<usize> {
        let mut windows: Vec<usize> = self.suffix_array[range]
            .iter()
            .filter_map(|&start| {
                let start = start as usize;
                let w = self.stream.window_index(start);
                let (_, end) = self.stream.window_span(WindowId(w));
                (start + len <= end).then_some(w)
            })
            .collect();
        windows.sort_unstable();
        windows.dedup();
        windows
    }

    fn window_contains(&self, window: usize, ids: &[u32]) -> bool {
        let (start, end) = self.stream.window_span(WindowId(window));
        let tokens = &self.stream.ids()[start..end];
        tokens.len() >= ids.len() && tokens.windows(ids.len()).any(|w| w == ids)
    }
}

fn count_sorted_intersection(a: &[usize], b: &[usize]) -> u64 {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phrase(s: &str) -> PhraseQuery {
        PhraseQuery::parse(s).unwrap()
    }

    fn index(docs: &[&str], window: usize) -> CorpusIndex {
        CorpusIndex::build(TokenStream::from_documents(docs.iter().copied(), window).unwrap())
    }

    #[test]
    fn empty_index() {
        let idx = index(&[], 10);
        assert!(idx.suffix_array().is_empty());
        assert_eq!(idx.freq(&phrase("anything")), 0);
        assert_eq!(idx.cooc(&phrase("a"), &phrase("b")), 0);
    }

    #[test]
    fn suffix_array_of_bab() {
        assert_eq!(index(&["b a b"], 10).suffix_array(), &[1, 2, 0]);
    }

    #[test]
    fn freq_examples() {
        let idx = index(&["the cat sat the cat"], 1000);
        assert_eq!(idx.freq(&phrase("the cat")), 2);
        assert_eq!(idx.freq(&phrase("zzz-absent")), 0);
        assert_eq!(idx.freq(&phrase("cat sat the")), 1);
        assert_eq!(index(&["a a a"], 10).freq(&phrase("a a")), 2);
    }

    #[test]
    fn freq_does_not_cross_into_shorter_suffix() {
        let idx = index(&["x y", "x"], 10);
        assert_eq!(idx.freq(&phrase("x y")), 1);
        assert_eq!(idx.freq(&phrase("y x")), 1);
    }

    #[test]
    fn cooc_examples() {
        // windows {[h,x,t,y], [h,z]}
        let idx = index(&["h x t y h z"], 4);
        assert_eq!(idx.cooc(&phrase("h"), &phrase("t")), 1);
        assert_eq!(idx.cooc(&phrase("t"), &phrase("h")), 1);
        assert_eq!(idx.cooc(&phrase("absent"), &phrase("t")), 0);
        // "y h" straddles the window edge and is not counted
        assert_eq!(idx.cooc(&phrase("y h"), &phrase("h")), 0);
    }

    #[test]
    fn cooc_counts_windows_not_pairs() {
        let idx = index(&["a b a b", "a c"], 10);
        assert_eq!(idx.cooc(&phrase("a"), &phrase("b")), 1);
        assert_eq!(idx.cooc(&phrase("a"), &phrase("a")), 2);
    }

    #[test]
    fn avg_entity_freq_examples() {
        let idx = index(&["a b b b b"], 10);
        assert!(matches!(
            idx.avg_entity_freq(&[]),
            Err(IndexError::EmptyEntitySet)
        ));
        assert_eq!(
            idx.avg_entity_freq(&[phrase("q"), phrase("r")]).unwrap(),
            0.0
        );
        let idx = index(&["a a b b b b"], 10);
        assert_eq!(
            idx.avg_entity_freq(&[phrase("a"), phrase("b")]).unwrap(),
            3.0
        );
    }

    #[test]
    fn phrase_validation() {
        assert!(matches!(
            PhraseQuery::parse("  ... "),
            Err(IndexError::EmptyPhrase)
        ));
        assert!(PhraseQuery::from_tokens(Vec::<String>::new()).is_err());
        assert!(matches!(
            PhraseQuery::from_tokens(["Cat"]),
            Err(IndexError::NotNormalized(_))
        ));
        assert_eq!(
            PhraseQuery::parse("The Cat!").unwrap().to_string(),
            "the cat"
        );
    }
}
