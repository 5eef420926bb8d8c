//! On-disk index layout. All integers are little-endian.
//!
//! ```text
//! offset  size              field
//! 0       8                 magic  b"CORAGIDX"
//! 8       4   u32           format version (currently 1)
//! 12      4   u32           reserved, zero
//! 16      8   u64           token count n
//! 24      8   u64           window size
//! 32      8   u64           document count d
//! 40      8   u64           vocabulary size v
//! 48      8   u64           vocabulary section length in bytes (incl. padding)
//! 56      ..                vocabulary: v × (u32 byte length, UTF-8 bytes),
//!                           zero-padded to a multiple of 4
//! ..      4·d u32           document start offsets
//! ..      4·n u32           token ids
//! ..      4·n u32           suffix array
//! ..      4   u32           CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Fixed-width sections start at 4-byte-aligned offsets.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{CorpusIndex, IndexError};
use crate::corpus::TokenStream;

pub const MAGIC: &[u8; 8] = b"CORAGIDX";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 56;

pub(crate) fn write_stream_sections(stream: &TokenStream, out: &mut Vec<u8>) {
    write_vocab(stream.vocab(), out);
    write_u32s(stream.doc_boundaries(), out);
    write_u32s(stream.ids(), out);
}

fn vocab_section_len(vocab: &[String]) -> usize {
    let raw: usize = vocab.iter().map(|t| 4 + t.len()).sum();
    raw.next_multiple_of(4)
}

fn write_vocab(vocab: &[String], out: &mut Vec<u8>) {
    let start = out.len();
    for token in vocab {
        out.extend_from_slice(&(token.len() as u32).to_le_bytes());
        out.extend_from_slice(token.as_bytes());
    }
    let padded = start + vocab_section_len(vocab);
    out.resize(padded, 0);
}

fn write_u32s(values: &[u32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(index: &CorpusIndex) -> Vec<u8> {
    let stream = index.stream();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * stream.len() + 4 * stream.doc_count() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in [
        stream.len(),
        stream.window_size(),
        stream.doc_count(),
        stream.vocab().len(),
        vocab_section_len(stream.vocab()),
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    write_stream_sections(stream, &mut out);
    write_u32s(index.suffix_array(), &mut out);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save(index: &CorpusIndex, path: &Path) -> Result<(), IndexError> {
    let bytes = encode(index);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CorpusIndex, IndexError> {
    decode(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    fn u32s(&mut self, n: usize) -> Vec<u32> {
        self.take(4 * n)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<CorpusIndex, IndexError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(IndexError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(IndexError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let mut r = Reader { bytes, pos: 8 };
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(IndexError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let _reserved = r.u32();
    let n = r.u64();
    let window_size = r.u64();
    let docs = r.u64();
    let vocab_len = r.u64();
    let vocab_bytes = r.u64();

    let expected = (HEADER_LEN as u64)
        .checked_add(vocab_bytes)
        .and_then(|x| x.checked_add(docs.checked_mul(4)?))
        .and_then(|x| x.checked_add(n.checked_mul(8)?))
        .and_then(|x| x.checked_add(4))
        .ok_or_else(|| IndexError::Corrupt("header sizes overflow".into()))?;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(IndexError::Truncated { expected, found });
    }
    if found > expected {
        return Err(IndexError::Corrupt(format!(
            "{} trailing bytes after checksum",
            found - expected
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(IndexError::Checksum { stored, computed });
    }

    let (n, docs, vocab_len, vocab_bytes) = (
        n as usize,
        docs as usize,
        vocab_len as usize,
        vocab_bytes as usize,
    );
    let vocab_section = r.take(vocab_bytes);
    let vocab = parse_vocab(vocab_section, vocab_len)?;
    let boundaries = r.u32s(docs);
    let ids = r.u32s(n);
    let suffix_array = r.u32s(n);

    let stream = TokenStream::from_parts(vocab, ids, boundaries, window_size as usize)
        .map_err(IndexError::Corrupt)?;
    let mut seen = vec![false; n];
    for &s in &suffix_array {
        match seen.get_mut(s as usize) {
            Some(slot) if !*slot => *slot = true,
            _ => {
                return Err(IndexError::Corrupt(
                    "suffix array is not a permutation".into(),
                ))
            }
        }
    }
    Ok(CorpusIndex::from_parts(stream, suffix_array))
}

fn parse_vocab(section: &[u8], count: usize) -> Result<Vec<String>, IndexError> {
    let corrupt = |m: &str| IndexError::Corrupt(format!("vocabulary: {m}"));
    let mut vocab = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let len_bytes = section
            .get(pos..pos + 4)
            .ok_or_else(|| corrupt("overrun"))?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 4;
        let raw = section
            .get(pos..pos + len)
            .ok_or_else(|| corrupt("overrun"))?;
        pos += len;
        let token = std::str::from_utf8(raw).map_err(|_| corrupt("invalid UTF-8"))?;
        vocab.push(token.to_string());
    }
    if section.len() != pos.next_multiple_of(4) || section[pos..].iter().any(|&b| b != 0) {
        return Err(corrupt("bad padding"));
    }
    Ok(vocab)
}
