use corag::corpus::TokenStream;
use corag::index::{CorpusIndex, IndexError, PhraseQuery};
use proptest::prelude::*;

fn words(max_alphabet: u8, max_len: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        (0..max_alphabet).prop_map(|c| ((b'a' + c) as char).to_string()),
        1..max_len,
    )
}

fn corpus() -> impl Strategy<Value = (Vec<Vec<String>>, usize)> {
    (prop::collection::vec(words(6, 60), 1..6), 1usize..12)
}

fn build(docs: &[Vec<String>], window: usize) -> CorpusIndex {
    CorpusIndex::build(
        TokenStream::from_documents(docs.iter().map(|d| d.join(" ")), window).unwrap(),
    )
}

fn phrase(tokens: &[String]) -> PhraseQuery {
    PhraseQuery::from_tokens(tokens.iter().cloned()).unwrap()
}

fn naive_freq(stream: &[String], p: &[String]) -> u64 {
    stream.windows(p.len()).filter(|w| *w == p).count() as u64
}

fn naive_cooc(docs: &[Vec<String>], window: usize, h: &[String], t: &[String]) -> u64 {
    let has = |w: &[String], p: &[String]| w.windows(p.len()).any(|x| x == p);
    docs.iter()
        .flat_map(|d| d.chunks(window))
        .filter(|w| has(w, h) && has(w, t))
        .count() as u64
}

proptest! {
    #[test]
    fn suffixes_are_sorted_and_a_permutation((docs, window) in corpus()) {
        let index = build(&docs, window);
        let ids = index.stream().ids();
        let sa = index.suffix_array();
        let mut seen = vec![false; ids.len()];
        for &p in sa {
            prop_assert!(!seen[p as usize]);
            seen[p as usize] = true;
        }
        for pair in sa.windows(2) {
            prop_assert!(ids[pair[0] as usize..] < ids[pair[1] as usize..]);
        }
    }

    #[test]
    fn counts_match_naive_scan((docs, window) in corpus(), h in words(6, 4), t in words(6, 4)) {
        let index = build(&docs, window);
        let stream = docs.concat();
        prop_assert_eq!(index.freq(&phrase(&h)), naive_freq(&stream, &h));
        prop_assert_eq!(index.cooc(&phrase(&h), &phrase(&t)), naive_cooc(&docs, window, &h, &t));
    }

    #[test]
    fn cooc_is_symmetric((docs, window) in corpus(), h in words(6, 3), t in words(6, 3)) {
        let index = build(&docs, window);
        prop_assert_eq!(index.cooc(&phrase(&h), &phrase(&t)), index.cooc(&phrase(&t), &phrase(&h)));
    }

    #[test]
    fn appending_a_document_never_decreases_counts(
        (docs, window) in corpus(),
        extra in words(6, 40),
        h in words(6, 3),
        t in words(6, 3),
    ) {
        let before = build(&docs, window);
        let mut more = docs.clone();
        more.push(extra);
        let after = build(&more, window);
        prop_assert!(after.freq(&phrase(&h)) >= before.freq(&phrase(&h)));
        prop_assert!(after.cooc(&phrase(&h), &phrase(&t)) >= before.cooc(&phrase(&h), &phrase(&t)));
    }

    #[test]
    fn round_trip_answers_identically((docs, window) in corpus(), queries in prop::collection::vec((words(6, 4), words(6, 4)), 1..20)) {
        let index = build(&docs, window);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.bin");
        index.save(&path).unwrap();
        let loaded = CorpusIndex::load(&path).unwrap();
        prop_assert_eq!(loaded.window_size(), index.window_size());
        for (h, t) in &queries {
            prop_assert_eq!(loaded.freq(&phrase(h)), index.freq(&phrase(h)));
            prop_assert_eq!(loaded.cooc(&phrase(h), &phrase(t)), index.cooc(&phrase(h), &phrase(t)));
        }
    }
}

#[test]
fn damaged_files_fail_distinctly() {
    let index = build(&[vec!["a".into(), "b".into(), "a".into()]], 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("i.bin");
    index.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut flipped = bytes.clone();
    let last_payload = flipped.len() - 5;
    flipped[last_payload] ^= 0xff;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(
        CorpusIndex::load(&path),
        Err(IndexError::Checksum { .. })
    ));

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        CorpusIndex::load(&path),
        Err(IndexError::Truncated { .. })
    ));

    let mut versioned = bytes.clone();
    versioned[8] = 99;
    std::fs::write(&path, &versioned).unwrap();
    assert!(matches!(
        CorpusIndex::load(&path),
        Err(IndexError::VersionMismatch { found: 99, .. })
    ));
}
