//! Command-line front end: index building, count queries, batch runs,
//! evaluation and the count service.

pub mod config;
pub mod service;

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use corag::controller::{Engine, GenerationTrace};
use corag::corpus::{read_jsonl, TokenStream};
use corag::eval::{aggregate, read_samples, read_traces};
use corag::extraction::{Extractor, FixtureExtractor, RemoteExtractor, RuleExtractor};
use corag::gateway::{Generator, GeneratorScript, RemoteGenerator, ScriptedGenerator};
use corag::index::{CorpusIndex, PhraseQuery};
use corag::retriever::RetrievalCorpus;
use serde_json::json;

use config::{ExtractorKind, GeneratorKind, Settings};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

/// An error paired with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: e.into(),
        }
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_DATA,
            error: e.into(),
        }
    }

    pub fn backend(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_BACKEND,
            error: e.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "corag",
    version,
    about = "Corpus-statistics-triggered retrieval for question answering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a statistics index
    #[command(subcommand)]
    Index(IndexCommand),
    /// Count a phrase or a phrase pair in an index
    Query {
        index: PathBuf,
        #[command(subcommand)]
        kind: QueryKind,
    },
    /// Answer every question in a dataset, writing one trace per line
    Run(Box<RunArgs>),
    /// Score traces against gold answers
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve count and co-occurrence queries over HTTP
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    Build {
        /// JSONL corpus with "id" and "text" fields
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1000)]
        window_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Subcommand)]
pub enum QueryKind {
    /// Occurrences of a phrase
    Count { phrase: String },
    /// Windows containing both phrases
    Cooc { head: String, tail: String },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Flat TOML settings; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub retrieval_corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub settings: Settings,
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Index(IndexCommand::Build {
            corpus,
            window_size,
            out,
        }) => cmd_index_build(&corpus, window_size, &out),
        Command::Query { index, kind } => {
            let index = load_index(&index)?;
            println!("{}", cmd_query(&index, &kind)?);
            Ok(())
        }
        Command::Run(args) => cmd_run(&args),
        Command::Eval {
            dataset,
            traces,
            index,
            out,
        } => cmd_eval(&dataset, &traces, &index, out.as_deref()),
        Command::Serve { index, bind } => cmd_serve(&index, &bind),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::data(anyhow::anyhow!("{}: {e}", path.display())))
}

pub fn load_index(path: &Path) -> Result<CorpusIndex, Failure> {
    CorpusIndex::load(path).map_err(|e| Failure::data(anyhow::anyhow!("{}: {e}", path.display())))
}

pub fn cmd_index_build(corpus: &Path, window_size: usize, out: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let docs = read_jsonl(open(corpus)?)
        .map_err(|e| Failure::data(anyhow::anyhow!("{}: {e}", corpus.display())))?;
    let (stream, stats) = TokenStream::ingest(docs, window_size).map_err(Failure::data)?;
    let index = CorpusIndex::build(stream);
    index.save(out).map_err(Failure::data)?;
    let summary = json!({
        "documents": stats.documents,
        "skipped_empty": stats.skipped_empty,
        "tokens": index.token_count(),
        "windows": index.stream().window_count(),
        "window_size": index.window_size(),
        "build_seconds": started.elapsed().as_secs_f64(),
    });
    println!("{summary}");
    Ok(())
}

fn parse_phrase(text: &str) -> Result<PhraseQuery, Failure> {
    PhraseQuery::parse(text).map_err(|e| Failure::usage(anyhow::anyhow!("{text:?}: {e}")))
}

/// The value `corag query` prints.
pub fn cmd_query(index: &CorpusIndex, kind: &QueryKind) -> Result<u64, Failure> {
    Ok(match kind {
        QueryKind::Count { phrase } => index.freq(&parse_phrase(phrase)?),
        QueryKind::Cooc { head, tail } => index.cooc(&parse_phrase(head)?, &parse_phrase(tail)?),
    })
}

/// Ids already written to a trace file. A torn final line is ignored.
fn completed_ids(path: &Path) -> Result<HashSet<String>, Failure> {
    let mut ids = HashSet::new();
    let Ok(file) = File::open(path) else {
        return Ok(ids);
    };
    let mut text = String::new();
    BufReader::new(file)
        .read_to_string(&mut text)
        .map_err(Failure::data)?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GenerationTrace>(line) {
            Ok(t) => ids.extend(t.id),
            Err(e) => log::warn!(
                "{}:{}: unreadable trace skipped: {e}",
                path.display(),
                i + 1
            ),
        }
    }
    Ok(ids)
}

fn open_for_append(path: &Path) -> Result<BufWriter<File>, Failure> {
    let mut file = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .map_err(Failure::data)?;
    let len = file.metadata().map_err(Failure::data)?.len();
    if len > 0 {
        let mut last = [0u8];
        file.seek(SeekFrom::Start(len - 1)).map_err(Failure::data)?;
        file.read_exact(&mut last).map_err(Failure::data)?;
        if last[0] != b'\n' {
            file.write_all(b"\n").map_err(Failure::data)?;
        }
    }
    Ok(BufWriter::new(file))
}

fn make_generator(settings: &Settings) -> Result<Arc<dyn Generator>, Failure> {
    match settings.generator.unwrap_or(GeneratorKind::Remote) {
        GeneratorKind::Scripted => {
            let path = settings.script.as_ref().ok_or_else(|| {
                Failure::usage(anyhow::anyhow!("the scripted generator needs --script"))
            })?;
            let script: GeneratorScript = serde_json::from_reader(open(path)?)
                .map_err(|e| Failure::data(anyhow::anyhow!("{}: {e}", path.display())))?;
            Ok(Arc::new(ScriptedGenerator::new(script)))
        }
        GeneratorKind::Remote => Ok(Arc::new(RemoteGenerator::new(settings.remote_config()))),
    }
}

fn make_extractor(settings: &Settings) -> Result<Box<dyn Extractor>, Failure> {
    match settings.extractor.unwrap_or(ExtractorKind::Rules) {
        ExtractorKind::Rules => Ok(Box::new(RuleExtractor)),
        ExtractorKind::Fixture => match &settings.fixture {
            None => Ok(Box::new(FixtureExtractor::builtin())),
            Some(path) => Ok(Box::new(
                FixtureExtractor::from_reader(open(path)?)
                    .map_err(|e| Failure::data(anyhow::anyhow!("{}: {e}", path.display())))?,
            )),
        },
        ExtractorKind::Remote => {
            let generator = RemoteGenerator::new(settings.remote_config());
            Ok(Box::new(RemoteExtractor::new(generator)))
        }
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let settings = match &args.config {
        Some(path) => Settings::from_file(path)
            .map_err(|e| Failure::usage(anyhow::anyhow!("{}: {e}", path.display())))?
            .overlay(args.settings.clone()),
        None => args.settings.clone(),
    };
    let config = settings.run_config();
    config.validate().map_err(Failure::usage)?;

    let samples = read_samples(open(&args.dataset)?)
        .map_err(|e| Failure::data(anyhow::anyhow!("{}: {e}", args.dataset.display())))?;
    let index = load_index(&args.index)?;
    let passages = read_jsonl(open(&args.retrieval_corpus)?)
        .map_err(|e| Failure::data(anyhow::anyhow!("{}: {e}", args.retrieval_corpus.display())))?;
    let corpus = RetrievalCorpus::build(passages).map_err(Failure::data)?;
    let generator = make_generator(&settings)?;
    let extractor = make_extractor(&settings)?;

    let done = completed_ids(&args.out)?;
    let mut out = open_for_append(&args.out)?;
    let engine = Engine::new(
        &index,
        &corpus,
        generator.as_ref(),
        extractor.as_ref(),
        config,
    );
    let mut completed = 0usize;
    let mut skipped = 0usize;
    let mut failed = Vec::new();
    for sample in &samples {
        if done.contains(&sample.id) {
            skipped += 1;
            continue;
        }
        let mut trace = engine.run(&sample.question);
        trace.id = Some(sample.id.clone());
        if let Some(reason) = &trace.failure {
            log::error!("{}: {reason}", sample.id);
            failed.push(sample.id.clone());
        }
        let line = serde_json::to_string(&trace).map_err(Failure::data)?;
        writeln!(out, "{line}")
            .and_then(|_| out.flush())
            .map_err(Failure::data)?;
        completed += 1;
    }
    println!(
        "{}",
        json!({ "completed": completed, "skipped": skipped, "failed": failed })
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::backend(anyhow::anyhow!(
            "{} question(s) failed",
            failed.len()
        )))
    }
}

pub fn cmd_eval(
    dataset: &Path,
    traces: &Path,
    index: &Path,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let samples = read_samples(open(dataset)?)
        .map_err(|e| Failure::data(anyhow::anyhow!("{}: {e}", dataset.display())))?;
    let traces = read_traces(open(traces)?)
        .map_err(|e| Failure::data(anyhow::anyhow!("{}: {e}", traces.display())))?;
    let index = load_index(index)?;
    let report = aggregate(&samples, &traces, &index).map_err(Failure::data)?;
    eprint!("{report}");
    let json = serde_json::to_string_pretty(&report).map_err(Failure::data)?;
    match out {
        Some(path) => std::fs::write(path, json + "\n").map_err(Failure::data)?,
        None => writeln!(std::io::stdout().lock(), "{json}").map_err(Failure::data)?,
    }
    Ok(())
}

pub fn cmd_serve(index: &Path, bind: &str) -> Result<(), Failure> {
    let index = Arc::new(load_index(index)?);
    let runtime = tokio::runtime::Runtime::new().map_err(Failure::backend)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| Failure::usage(anyhow::anyhow!("{bind}: {e}")))?;
        let addr = listener.local_addr().map_err(Failure::backend)?;
        println!("{}", json!({ "listening": addr.to_string() }));
        std::io::stdout().flush().ok();
        service::serve(listener, index)
            .await
            .map_err(Failure::backend)
    })
}
