use corag::controller::{run_question, ContextPolicy, RunConfig};
use corag::corpus::{DocumentRecord, TokenStream};
use corag::extraction::{FixtureExtractor, Triplet};
use corag::gateway::{GeneratorScript, ScriptStep, ScriptedGenerator};
use corag::index::CorpusIndex;
use corag::retriever::{RetrievalCorpus, Stage};
use proptest::prelude::*;

const NAMES: [&str; 4] = ["Alpha", "Beta", "Gamma", "Delta"];

fn world() -> (CorpusIndex, RetrievalCorpus) {
    let docs = ["alpha beta", "gamma delta", "alpha gamma beta"];
    let index = CorpusIndex::build(TokenStream::from_documents(docs, 4).unwrap());
    let corpus = RetrievalCorpus::build(
        docs.iter()
            .enumerate()
            .map(|(i, d)| DocumentRecord::new(format!("d{i}"), *d))
            .collect(),
    )
    .unwrap();
    (index, corpus)
}

#[derive(Debug, Clone)]
struct Plan {
    sentence_triplets: Vec<Vec<(usize, usize)>>,
    script: Vec<usize>,
    stop_at: Option<usize>,
    config: RunConfig,
}

fn plan() -> impl Strategy<Value = Plan> {
    (
        prop::collection::vec(prop::collection::vec((0..4usize, 0..4usize), 0..3), 1..6),
        prop::collection::vec(0..6usize, 0..30),
        prop::option::of(0..30usize),
        0u64..4,
        0.0f64..3.0,
        1usize..6,
        1usize..4,
        any::<bool>(),
    )
        .prop_map(
            |(
                sentence_triplets,
                script,
                stop_at,
                tau_cooc,
                tau_entity,
                max_sentences,
                regen,
                acc,
            )| Plan {
                sentence_triplets,
                script,
                stop_at,
                config: RunConfig {
                    tau_cooc,
                    tau_entity,
                    max_sentences,
                    max_regen_per_sentence: regen,
                    window_size: 4,
                    context_policy: if acc {
                        ContextPolicy::Accumulate
                    } else {
                        ContextPolicy::ReplaceLatest
                    },
                    ..RunConfig::default()
                },
            },
        )
}

proptest! {
    #[test]
    fn traces_are_consistent_and_bounded(p in plan()) {
        let (index, corpus) = world();
        let mut extractor = FixtureExtractor::default();
        let sentences: Vec<String> = p
            .sentence_triplets
            .iter()
            .enumerate()
            .map(|(i, ts)| {
                let s = format!("Claim number {i} holds.");
                let triplets = ts.iter().map(|&(h, t)| Triplet::full(NAMES[h], "r", NAMES[t])).collect();
                extractor.insert(s.clone(), triplets);
                s
            })
            .collect();
        extractor.insert("So the answer is Alpha.", vec![]);
        let steps: Vec<ScriptStep> = p
            .script
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                if Some(i) == p.stop_at {
                    ScriptStep::always("So the answer is Alpha.")
                } else {
                    ScriptStep::always(sentences[k % sentences.len()].clone())
                }
            })
            .collect();
        let generator = ScriptedGenerator::new(GeneratorScript::new(steps));
        let cfg = &p.config;
        let trace = run_question("Alpha or Beta?", &index, &corpus, &generator, &extractor, cfg);

        prop_assert!(trace.retrieval_count <= 1 + cfg.max_sentences * cfg.max_regen_per_sentence);
        prop_assert!(trace.sentences.len() <= cfg.max_sentences);
        prop_assert_eq!(trace.retrieval_count, trace.retrieval_events.len());
        prop_assert_eq!(trace.llm_call_count, trace.calls.len());
        prop_assert_eq!(trace.generated_token_count, trace.calls.iter().map(|c| c.completion_tokens).sum::<usize>());
        prop_assert_eq!(trace.prompt_token_count, trace.calls.iter().map(|c| c.prompt_tokens).sum::<usize>());
        let accepted: Vec<&str> = trace.sentences.iter().map(|s| s.text.as_str()).filter(|s| !s.is_empty()).collect();
        prop_assert_eq!(&trace.final_text, &accepted.join(" "));

        let pre_events = trace.retrieval_events.iter().filter(|e| e.stage == Stage::PreGeneration).count();
        prop_assert_eq!(pre_events, usize::from(trace.pre_generation.triggered));
        for s in &trace.sentences {
            prop_assert!(s.regenerations.len() <= cfg.max_regen_per_sentence);
            for d in &s.decisions {
                prop_assert_eq!(d.witness.is_some(), d.triggered);
                if let Some(stat) = d.statistic {
                    prop_assert_eq!(d.triggered, stat < d.threshold);
                }
            }
        }
    }

    #[test]
    fn raising_tau_cooc_never_reduces_retrievals(
        triplets in prop::collection::vec(prop::collection::vec((0..4usize, 0..4usize), 0..3), 1..6),
        low in 0u64..4,
        bump in 0u64..4,
    ) {
        let (index, corpus) = world();
        let mut extractor = FixtureExtractor::default();
        let mut steps = Vec::new();
        let mut prior: Vec<String> = Vec::new();
        for (i, ts) in triplets.iter().enumerate() {
            let s = format!("Claim number {i} holds.");
            extractor.insert(s.clone(), ts.iter().map(|&(h, t)| Triplet::full(NAMES[h], "r", NAMES[t])).collect());
            let suffix = if prior.is_empty() { "Answer:".to_string() } else { format!("Answer: {}", prior.join(" ")) };
            steps.push(ScriptStep::new(corag::gateway::Predicate::EndsWith(suffix.clone()), s.clone()));
            steps.push(ScriptStep::new(corag::gateway::Predicate::EndsWith(suffix), s.clone()));
            prior.push(s);
        }
        let script = GeneratorScript::new(steps);
        let run = |tau: u64| {
            let cfg = RunConfig { tau_cooc: tau, tau_entity: 0.0, max_sentences: triplets.len(), window_size: 4, ..RunConfig::default() };
            run_question("q", &index, &corpus, &ScriptedGenerator::new(script.clone()), &extractor, &cfg)
        };
        let a = run(low);
        let b = run(low + bump);
        prop_assert!(a.retrieval_count <= b.retrieval_count);
        prop_assert_eq!(a.final_text, b.final_text);
    }
}
