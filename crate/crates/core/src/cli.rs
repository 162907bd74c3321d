//! The `cvse` command line. Every subcommand resolves one [`RunConfig`] from
//! `--config`, `--set` and the dedicated flags, then reads and writes the
//! crate's file formats.
//!
//! Exit status: 0 on success, 2 on usage errors, 3 on configuration errors
//! and 1 on anything else. Failures print a single `error[CODE]: message` line.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_override, RunConfig};
use crate::corpus::{concept_label, read_corpus, read_lexicon, tokenize, CaptionRecord, ConceptVocabulary};
use crate::dataset::Dataset;
use crate::error::{CvseError, Result};
use crate::eval::{evaluate, predict_concepts, rank_desc, retrieve_with, ConceptGallery, TextLabels};
use crate::graph::CorrelationGraph;
use crate::io::{read_features, write_json, write_matrix};
use crate::model::{CvseModel, TextVocab};
use crate::numeric::Matrix;
use crate::synthetic::{generate, SyntheticSpec};
use crate::train::{train, Prepared, Trainer};

#[derive(Debug, Parser)]
#[command(name = "cvse", version, about = "Image-text matching with concept-graph embeddings")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set graph.epsilon=0.3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shortcut for `--set train.seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; replaces `paths.out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Checkpoint to read (defaults to `<out>/checkpoint.bin`).
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select the concept vocabulary and write `vocab.tsv`.
    BuildVocab,
    /// Build the concept correlation graph and write every stage as a matrix file.
    BuildGraph,
    /// Train and write `checkpoint.bin`, `loss_log.csv` and `history.json`.
    Train,
    /// Evaluate a checkpoint and print the metrics report.
    Eval,
    /// Rank gallery images for a caption, or captions for an image.
    Retrieve {
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        query: Option<String>,
        /// Image id to use as the query instead of a caption.
        #[arg(long)]
        image: Option<String>,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Write concept vectors and top concept scores as CSV.
    ExportConcepts,
    /// Write a seeded synthetic corpus, features, lexicon, word vectors and config.
    GenSynthetic,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            match e {
                CvseError::Config { .. } => 3,
                _ => 1,
            }
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("CVSE_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Applies flags on top of file and `--set` values.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("train.seed".into(), seed.to_string()));
    }
    let mut config = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    if let Some(out) = &cli.out {
        config.paths.out_dir = Some(out.clone());
    }
    Ok(config)
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.require(&config.paths.out_dir, "paths.out_dir")?.to_owned();
    fs::create_dir_all(&dir).map_err(|e| CvseError::io(&dir, e))?;
    Ok(dir)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Command::GenSynthetic = cli.command {
        return gen_synthetic(cli);
    }
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::BuildVocab => build_vocab(&config),
        Command::BuildGraph => build_graph(&config),
        Command::Train => run_train(&config),
        Command::Eval => run_eval(cli, &config),
        Command::Retrieve { query, image, top } => run_retrieve(cli, &config, query.as_deref(), image.as_deref(), *top),
        Command::ExportConcepts => export_concepts(cli, &config),
        Command::GenSynthetic => unreachable!(),
    }
}

fn gen_synthetic(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(7);
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
    let set = generate(seed, &SyntheticSpec::default())?;
    set.write(&dir)?;
    log::info!("synthetic set (seed {seed}) written to {}", dir.display());
    Ok(())
}

fn corpus_and_vocab(config: &RunConfig) -> Result<(Vec<CaptionRecord>, ConceptVocabulary)> {
    let records = read_corpus(config.require(&config.paths.corpus, "paths.corpus")?)?;
    let lexicon = match &config.paths.lexicon {
        Some(p) => read_lexicon(p)?,
        None => HashMap::new(),
    };
    let vocab = ConceptVocabulary::build(&records, &lexicon, config.vocab.q)?;
    Ok((records, vocab))
}

fn build_vocab(config: &RunConfig) -> Result<()> {
    let (_, vocab) = corpus_and_vocab(config)?;
    let path = out_dir(config)?.join("vocab.tsv");
    vocab.write_tsv(&path)?;
    log::info!("{} concepts written to {}", vocab.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct StageSidecar<'a> {
    stage: &'a str,
    s: f64,
    u: f64,
    epsilon: f64,
    denominator: crate::graph::Denominator,
    per_caption: bool,
    concepts: Vec<&'a str>,
}

fn build_graph(config: &RunConfig) -> Result<()> {
    let (records, vocab) = corpus_and_vocab(config)?;
    let per_caption = config.graph.per_caption;
    let labels: Vec<_> = records
        .iter()
        .flat_map(|r| {
            let toks: Vec<Vec<String>> = r.captions.iter().map(|c| tokenize(c)).collect();
            if per_caption {
                toks.iter().map(|t| concept_label(std::slice::from_ref(t), &vocab)).collect()
            } else {
                vec![concept_label(&toks, &vocab)]
            }
        })
        .collect();
    let graph = CorrelationGraph::build(&labels, &config.graph)?;
    let dir = out_dir(config)?;
    vocab.write_tsv(&dir.join("vocab.tsv"))?;
    let g = &config.graph;
    let concepts: Vec<&str> = vocab.entries().iter().map(|e| e.token.as_str()).collect();
    let occurrence = Matrix::from_vec(1, graph.occurrence.len(), graph.occurrence.clone())?;
    for (stage, m) in [
        ("E", &graph.cooccurrence),
        ("N", &occurrence),
        ("P", &graph.conditional),
        ("B", &graph.rescaled),
        ("G", &graph.binary),
        ("A_norm", &graph.adjacency),
    ] {
        let sidecar = StageSidecar {
            stage,
            s: g.s,
            u: g.u,
            epsilon: g.epsilon,
            denominator: g.denominator,
            per_caption,
            concepts: concepts.clone(),
        };
        write_matrix(&dir.join(format!("{stage}.mat")), m, &sidecar)?;
    }
    log::info!("graph with {} edges written to {}", graph.edge_count(), dir.display());
    Ok(())
}

fn run_train(config: &RunConfig) -> Result<()> {
    let prepared = Prepared::load(config)?;
    let dir = out_dir(config)?;
    let outcome = train(config, &prepared, Some(&dir))?;
    write_json(&dir.join("history.json"), &outcome.history)?;
    if let Some(last) = outcome.history.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

/// A trained model with the data it was trained on, rebuilt from a checkpoint.
struct Loaded {
    trainer: Trainer,
    text_vocab: TextVocab,
    vocab: ConceptVocabulary,
    data: Dataset,
}

impl Loaded {
    fn model(&self) -> &CvseModel {
        &self.trainer.model
    }

    /// (train, held-out) split exactly as used during training.
    fn split(&self) -> (Dataset, Dataset) {
        let t = &self.trainer.config.train;
        self.data.split(t.val_fraction, t.seed)
    }
}

fn load(cli: &Cli, config: &RunConfig) -> Result<Loaded> {
    let path = match &cli.checkpoint {
        Some(p) => p.clone(),
        None => config.require(&config.paths.out_dir, "paths.out_dir")?.join("checkpoint.bin"),
    };
    let (trainer, text_vocab, vocab) = Trainer::load(&path)?;
    let records = read_corpus(config.require(&config.paths.corpus, "paths.corpus")?)?;
    let features = read_features(config.require(&config.paths.features, "paths.features")?)?;
    let per_caption = trainer.config.graph.per_caption;
    let data = Dataset::assemble(&records, &features, &vocab, &text_vocab, per_caption)?;
    Ok(Loaded { trainer, text_vocab, vocab, data })
}

fn run_eval(cli: &Cli, config: &RunConfig) -> Result<()> {
    let loaded = load(cli, config)?;
    let (gallery, held_out) = loaded.split();
    let metrics = evaluate(loaded.model(), &held_out, &gallery, config.inference.k)?;
    println!("{}", serde_json::to_string(&metrics)?);
    if let Some(dir) = &config.paths.out_dir {
        fs::create_dir_all(dir).map_err(|e| CvseError::io(dir, e))?;
        write_json(&dir.join("metrics.json"), &metrics)?;
    }
    Ok(())
}

fn run_retrieve(cli: &Cli, config: &RunConfig, query: Option<&str>, image: Option<&str>, top: usize) -> Result<()> {
    if top == 0 {
        return Err(CvseError::Parameter("--top must be at least 1".into()));
    }
    let loaded = load(cli, config)?;
    let model = loaded.model();
    let z = model.concept_matrix()?;
    let (train_split, _) = loaded.split();
    let gallery = ConceptGallery::build(model, &z, &train_split)?;
    let k = config.inference.k;
    let data = &loaded.data;

    let report = match (query, image) {
        (Some(text), _) => {
            let tokens = loaded.text_vocab.encode(text);
            if tokens.is_empty() {
                return Err(CvseError::Degenerate("query has no tokens".into()));
            }
            let label = predict_concepts(model, &z, &[&tokens], &gallery, k)?.remove(0);
            let labels = Matrix::from_vec(1, label.len(), label.to_f64())?;
            let t = model.embed_texts(&z, &[&tokens], &labels, model.config.alpha)?.fused;
            let images = model.embed_images(&z, &data.region_refs())?.fused;
            let scores = images.matmul_t(&t)?.data().to_vec();
            let concepts: Vec<&str> = label.support().into_iter().map(|i| vocab_token(&loaded, i)).collect();
            let results: Vec<_> = rank_desc(&scores)
                .into_iter()
                .take(top)
                .map(|i| json!({ "image": data.images[i].id, "score": scores[i] }))
                .collect();
            json!({ "query": text, "predicted_concepts": concepts, "results": results })
        }
        (None, Some(id)) => {
            let i = data
                .images
                .iter()
                .position(|im| im.id == id)
                .ok_or_else(|| CvseError::DataIntegrity(vec![id.to_owned()]))?;
            let r = retrieve_with(model, &z, data, TextLabels::Predicted { gallery: &gallery, k })?;
            let results: Vec<_> = r
                .texts_for_image(i)
                .into_iter()
                .take(top)
                .map(|j| {
                    let t = &data.texts[j];
                    json!({ "image": data.images[t.image].id, "caption": t.caption, "score": r.sims[(i, j)] })
                })
                .collect();
            json!({ "image": id, "results": results })
        }
        (None, None) => return Err(CvseError::Parameter("either --query or --image is required".into())),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn vocab_token(loaded: &Loaded, i: usize) -> &str {
    loaded.vocab.token(i)
}

const TOP_SCORES: usize = 10;

fn export_concepts(cli: &Cli, config: &RunConfig) -> Result<()> {
    let loaded = load(cli, config)?;
    let model = loaded.model();
    let dir = out_dir(config)?;
    let z = model.concept_matrix()?;

    let mut csv = String::from("index,token");
    for c in 0..z.cols() {
        write!(csv, ",z{c}").expect("string write");
    }
    csv.push('\n');
    for i in 0..z.rows() {
        write!(csv, "{i},{}", vocab_token(&loaded, i)).expect("string write");
        for v in z.row(i) {
            write!(csv, ",{v}").expect("string write");
        }
        csv.push('\n');
    }
    let path = dir.join("concepts.csv");
    fs::write(&path, csv).map_err(|e| CvseError::io(&path, e))?;

    let data = &loaded.data;
    let image_scores = model.embed_images(&z, &data.region_refs())?.scores;
    let labels: Vec<Vec<f64>> = data.texts.iter().map(|t| t.label.to_f64()).collect();
    let text_scores = model.embed_texts(&z, &data.token_refs(), &Matrix::stack(&labels)?, model.config.alpha)?.scores;

    let mut out = String::from("item_id,concept_token,score\n");
    let mut emit = |item: &str, scores: &[f64]| {
        for c in rank_desc(scores).into_iter().take(TOP_SCORES) {
            writeln!(out, "{item},{},{}", vocab_token(&loaded, c), scores[c]).expect("string write");
        }
    };
    for (i, im) in data.images.iter().enumerate() {
        emit(&im.id, image_scores.row(i));
    }
    let mut nth: HashMap<usize, usize> = HashMap::new();
    for (j, t) in data.texts.iter().enumerate() {
        let n = nth.entry(t.image).or_default();
        emit(&format!("{}#{n}", data.images[t.image].id), text_scores.row(j));
        *n += 1;
    }
    let path = dir.join("concept_scores.csv");
    fs::write(&path, out).map_err(|e| CvseError::io(&path, e))?;
    log::info!("concept exports written to {}", dir.display());
    Ok(())
}
