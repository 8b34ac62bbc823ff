//! Command-line surface for the guided-LSTM caption pipeline: fit the CCA
//! semantic space, train LSTM/gLSTM caption models, generate captions with
//! length-normalized beam search, retrieve captions for an image, and score
//! generations with BLEU.
//!
//! Exit codes: 0 success, 2 bad input/configuration, 3 numeric failure,
//! 4 i/o failure. Output files are written to a temp sibling and renamed, so
//! a failing run never leaves a partial file behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use glstm_core::captioner::{
    self, CaptionModel, CellKind, GuidanceMap, ModelConfig, ModelError, TrainConfig,
};
use glstm_core::decoder::{self, DecodeConfig, DecodeError, LengthNorm};
use glstm_core::metrics::{self, EvalPair, MetricsError};
use glstm_core::numkit::Vector;
use glstm_core::semspace::{
    self, CcaError, GuidanceKind, SemanticSpace, ViewPairing,
};
use glstm_core::textcorpus::{self, Corpus, CorpusError, CorpusItem, Split, Vocabulary};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cca(#[from] CcaError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

const EXIT_BAD_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

fn model_exit_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Io { .. } => EXIT_IO,
        ModelError::Divergence { .. }
        | ModelError::Num(_)
        | ModelError::Cell(_)
        | ModelError::CaptionWithoutEnd
        | ModelError::StaleCache => EXIT_NUMERIC,
        _ => EXIT_BAD_INPUT,
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_BAD_INPUT,
            CliError::Io { .. } => EXIT_IO,
            CliError::Corpus(e) => match e {
                CorpusError::Io { .. } => EXIT_IO,
                _ => EXIT_BAD_INPUT,
            },
            CliError::Model(e) => model_exit_code(e),
            CliError::Cca(e) => match e {
                CcaError::Io { .. } => EXIT_IO,
                CcaError::Degenerate { .. } | CcaError::Num(_) => EXIT_NUMERIC,
                _ => EXIT_BAD_INPUT,
            },
            CliError::Decode(e) => match e {
                DecodeError::Model(m) => model_exit_code(m),
                _ => EXIT_BAD_INPUT,
            },
            CliError::Metrics(_) => EXIT_BAD_INPUT,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "glstm",
    about = "Guided-LSTM caption generation: CCA semantic space, LSTM/gLSTM training, beam-search decoding, BLEU evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit TF-IDF + normalized CCA on the training split and write the
    /// semantic-space file
    CcaFit(CcaFitArgs),
    /// Train an LSTM or gLSTM caption model
    Train(TrainArgs),
    /// Decode captions for every test item
    Generate(GenerateArgs),
    /// Score a generation file with corpus BLEU
    Eval(EvalArgs),
    /// Rank training captions for one image
    Retrieve(RetrieveArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CellArg {
    Lstm,
    Glstm,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GuidanceArg {
    Ret,
    Emb,
    Img,
}

impl From<GuidanceArg> for GuidanceKind {
    fn from(arg: GuidanceArg) -> Self {
        match arg {
            GuidanceArg::Ret => GuidanceKind::Ret,
            GuidanceArg::Emb => GuidanceKind::Emb,
            GuidanceArg::Img => GuidanceKind::Img,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormArg {
    None,
    Polynomial,
    MinHinge,
    MaxHinge,
    Gaussian,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PairingArg {
    PerCaption,
    PerImage,
}

#[derive(Args)]
struct CcaFitArgs {
    /// Dataset manifest (JSON)
    #[arg(long)]
    manifest: PathBuf,
    /// Output semantic-space file
    #[arg(long)]
    out: PathBuf,
    /// Dimension of the common semantic space
    #[arg(long, default_value_t = 200)]
    cca_dim: usize,
    /// Eigenvalue exponent for normalized CCA
    #[arg(long, default_value_t = 4.0)]
    cca_p: f64,
    /// Guidance vocabulary size for the TF-IDF view
    #[arg(long, default_value_t = 3000)]
    bow_size: usize,
    /// Ridge scale, as a fraction of each covariance's mean diagonal
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    /// How image rows pair with caption rows
    #[arg(long, value_enum, default_value_t = PairingArg::PerCaption)]
    pairing: PairingArg,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint output path; the training log goes to <out>.log.jsonl
    #[arg(long)]
    out: PathBuf,
    /// Recurrent cell flavor
    #[arg(long, value_enum, default_value_t = CellArg::Lstm)]
    cell: CellArg,
    /// Guidance signal for gLSTM cells
    #[arg(long, value_enum)]
    guidance: Option<GuidanceArg>,
    /// Semantic-space file (required for ret/emb guidance)
    #[arg(long)]
    cca: Option<PathBuf>,
    /// Resume training from this checkpoint
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 256)]
    embed: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Keep only words seen at least this often in the training split
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    /// Retrieval depth when building ret guidance
    #[arg(long, default_value_t = 15)]
    top_t: usize,
    /// Initialize the guidance projections W_*q to zero
    #[arg(long, default_value_t = false)]
    zero_guidance_weights: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Trained checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Output captions file (JSONL)
    #[arg(long)]
    out: PathBuf,
    /// Guidance signal; required when the checkpoint is a gLSTM
    #[arg(long, value_enum)]
    guidance: Option<GuidanceArg>,
    #[arg(long)]
    cca: Option<PathBuf>,
    /// Length normalization for final caption selection
    #[arg(long, value_enum, default_value_t = NormArg::None)]
    norm: NormArg,
    /// Polynomial norm exponent
    #[arg(long, default_value_t = 1.0)]
    norm_m: f64,
    #[arg(long, default_value_t = 10)]
    beam_width: usize,
    #[arg(long, default_value_t = 30)]
    max_length: usize,
    #[arg(long, default_value_t = 15)]
    top_t: usize,
    /// Allow the UNK token to be generated
    #[arg(long, default_value_t = false)]
    allow_unk: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Generation file produced by `generate` (JSONL)
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Semantic-space file from `cca-fit`
    #[arg(long)]
    cca: PathBuf,
    /// Query image id from the manifest
    #[arg(long)]
    id: Option<String>,
    /// Or a standalone single-row feature file (CSV or binary)
    #[arg(long)]
    feature_file: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    top_t: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CcaFit(args) => cmd_cca_fit(args),
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Retrieve(args) => cmd_retrieve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::Io {
        path: tmp.display().to_string(),
        source: e,
    })?;
    fs::rename(&tmp, path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn cmd_cca_fit(args: CcaFitArgs) -> CliResult<()> {
    let corpus = textcorpus::load_manifest(&args.manifest)?;
    if corpus.train().next().is_none() {
        return Err(CliError::Config(
            "manifest has no train split; CCA fits on training data".into(),
        ));
    }
    let pairing = match args.pairing {
        PairingArg::PerCaption => ViewPairing::PerCaption,
        PairingArg::PerImage => ViewPairing::PerImage,
    };
    let d = args.cca_dim.min(corpus.feature_dim).min(args.bow_size);
    let space = semspace::fit_semantic_space(&corpus, args.bow_size, d, args.cca_p, args.ridge, pairing)?;
    semspace::save_semantic_space(&space, &args.out)?;
    println!(
        "fitted semantic space: dim {}, bow {}, {} indexed captions",
        space.cca.dim(),
        space.vectorizer.dim(),
        space.index.len()
    );
    let show = space.cca.dim().min(10);
    let values: Vec<String> = (0..show)
        .map(|j| format!("{:.6}", space.cca.correlations.get(j)))
        .collect();
    println!("top canonical correlations: {}", values.join(" "));
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_space(path: Option<&PathBuf>, what: &str) -> CliResult<SemanticSpace> {
    let path = path.ok_or_else(|| {
        CliError::Config(format!("--cca is required for {what} guidance"))
    })?;
    Ok(semspace::load_semantic_space(path)?)
}

/// Builds one guidance vector per item for every listed item id.
fn build_guidance_map(
    kind: GuidanceKind,
    items: &[&CorpusItem],
    space: Option<&SemanticSpace>,
    top_t: usize,
) -> CliResult<GuidanceMap> {
    let mut map = GuidanceMap::new();
    for item in items {
        let guidance = semspace::build_guidance(
            kind,
            &item.feature,
            space.map(|s| &s.cca),
            space.map(|s| &s.index),
            space.map(|s| &s.vectorizer),
            top_t,
        )?;
        map.insert(item.id.clone(), guidance.vector);
    }
    Ok(map)
}

fn guidance_dim_for(
    kind: GuidanceKind,
    feature_dim: usize,
    space: Option<&SemanticSpace>,
) -> usize {
    match kind {
        GuidanceKind::Img => feature_dim,
        GuidanceKind::Emb => space.map(|s| s.cca.dim()).unwrap_or(0),
        GuidanceKind::Ret => space.map(|s| s.vectorizer.dim()).unwrap_or(0),
    }
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let corpus = textcorpus::load_manifest(&args.manifest)?;
    let guidance_kind: Option<GuidanceKind> = args.guidance.map(Into::into);
    if args.cell == CellArg::Lstm && guidance_kind.is_some() {
        return Err(CliError::Config(
            "--guidance requires --cell glstm".into(),
        ));
    }
    if args.cell == CellArg::Glstm && guidance_kind.is_none() {
        return Err(CliError::Config(
            "--cell glstm requires --guidance {ret,emb,img}".into(),
        ));
    }
    let space = match guidance_kind {
        Some(GuidanceKind::Ret) => Some(load_space(args.cca.as_ref(), "ret")?),
        Some(GuidanceKind::Emb) => Some(load_space(args.cca.as_ref(), "emb")?),
        _ => None,
    };

    // Fresh model or resume from a checkpoint.
    let (model, resume_state) = match &args.model {
        Some(path) => {
            let (model, state, _) = captioner::load_checkpoint_full(path)?;
            let expect_glstm = args.cell == CellArg::Glstm;
            if expect_glstm != model.guidance_dim().is_some() {
                return Err(CliError::Config(format!(
                    "checkpoint {} cell kind does not match --cell",
                    path.display()
                )));
            }
            (model, state)
        }
        None => {
            let train_captions = corpus.split_captions(Split::Train);
            let vocab = Vocabulary::build(train_captions, args.min_count)?;
            let cell = match guidance_kind {
                None => CellKind::Lstm,
                Some(kind) => CellKind::Glstm {
                    guidance_dim: guidance_dim_for(kind, corpus.feature_dim, space.as_ref()),
                },
            };
            let model_config = ModelConfig {
                feature_dim: corpus.feature_dim,
                embed_dim: args.embed,
                hidden_dim: args.hidden,
                cell,
                biases: true,
                zero_guidance_weights: args.zero_guidance_weights,
            };
            (CaptionModel::init(vocab, &model_config, args.seed), None)
        }
    };

    let guidance_map = match guidance_kind {
        None => None,
        Some(kind) => {
            let items: Vec<&CorpusItem> = corpus
                .items
                .iter()
                .filter(|it| it.split != Split::Test)
                .collect();
            let map = build_guidance_map(kind, &items, space.as_ref(), args.top_t)?;
            if let (Some(expected), Some(sample)) = (model.guidance_dim(), map.values().next()) {
                if sample.dim() != expected {
                    return Err(CliError::Config(format!(
                        "model expects guidance dimension {expected}, {} guidance has {}",
                        kind.as_str(),
                        sample.dim()
                    )));
                }
            }
            Some(map)
        }
    };

    let train_config = TrainConfig {
        learning_rate: args.lr,
        dropout: args.dropout,
        max_epochs: args.epochs,
        patience: args.patience,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let outcome = captioner::train(
        model,
        &corpus,
        guidance_map.as_ref(),
        &train_config,
        resume_state,
    )?;

    captioner::save_checkpoint_with_state(
        &outcome.model,
        Some(&outcome.state),
        Some(&train_config),
        &args.out,
    )?;
    let mut log_lines = String::new();
    for entry in &outcome.log {
        log_lines.push_str(&serde_json::to_string(entry).expect("serializable log"));
        log_lines.push('\n');
    }
    let log_path = args.out.with_extension("log.jsonl");
    write_atomic(&log_path, log_lines.as_bytes())?;
    let stopped = outcome.log.last().map(|e| e.epoch).unwrap_or(0);
    println!(
        "stopped after epoch {stopped}; best epoch {} (mean val NLL {:.6})",
        outcome.best_epoch, outcome.best_val_nll
    );
    println!("wrote {} and {}", args.out.display(), log_path.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GenRecord {
    id: String,
    caption: String,
    score: f64,
    length: usize,
}

fn build_norm(norm: NormArg, norm_m: f64, corpus: &Corpus) -> CliResult<LengthNorm> {
    Ok(match norm {
        NormArg::None => LengthNorm::None,
        NormArg::Polynomial => LengthNorm::Polynomial { m: norm_m },
        NormArg::MinHinge => {
            let (mu, _) = decoder::length_stats(corpus)?;
            LengthNorm::min_hinge(mu)?
        }
        NormArg::MaxHinge => {
            let (mu, _) = decoder::length_stats(corpus)?;
            LengthNorm::max_hinge(mu)?
        }
        NormArg::Gaussian => {
            let (mu, sigma) = decoder::length_stats(corpus)?;
            LengthNorm::gaussian(mu, sigma)?
        }
    })
}

fn decode_threads(n_items: usize) -> CliResult<usize> {
    let default = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = match std::env::var("GLSTM_THREADS") {
        Ok(v) => v.parse::<usize>().map_err(|_| {
            CliError::Config(format!("GLSTM_THREADS must be a positive integer, got '{v}'"))
        })?,
        Err(_) => default,
    };
    Ok(cap.max(1).min(n_items.max(1)))
}

fn cmd_generate(args: GenerateArgs) -> CliResult<()> {
    let corpus = textcorpus::load_manifest(&args.manifest)?;
    let model = captioner::load_checkpoint(&args.model)?;
    let guidance_kind: Option<GuidanceKind> = args.guidance.map(Into::into);
    if model.guidance_dim().is_some() && guidance_kind.is_none() {
        return Err(CliError::Config(
            "checkpoint is a gLSTM: --guidance {ret,emb,img} is required".into(),
        ));
    }
    if model.guidance_dim().is_none() && guidance_kind.is_some() {
        return Err(CliError::Config(
            "checkpoint is a plain LSTM: --guidance does not apply".into(),
        ));
    }
    let space = match guidance_kind {
        Some(GuidanceKind::Ret) => Some(load_space(args.cca.as_ref(), "ret")?),
        Some(GuidanceKind::Emb) => Some(load_space(args.cca.as_ref(), "emb")?),
        _ => None,
    };
    let test_items: Vec<&CorpusItem> = corpus.split_items(Split::Test).collect();
    if test_items.is_empty() {
        return Err(CliError::Config("manifest has no test split".into()));
    }
    let guidance_map = match guidance_kind {
        None => None,
        Some(kind) => {
            let map = build_guidance_map(kind, &test_items, space.as_ref(), args.top_t)?;
            if let (Some(expected), Some(sample)) =
                (model.guidance_dim(), map.values().next())
            {
                if sample.dim() != expected {
                    return Err(CliError::Config(format!(
                        "model expects guidance dimension {expected}, {} guidance has {}",
                        guidance_kind.map(|k| k.as_str()).unwrap_or("?"),
                        sample.dim()
                    )));
                }
            }
            Some(map)
        }
    };
    let config = DecodeConfig {
        beam_width: args.beam_width,
        max_length: args.max_length,
        norm: build_norm(args.norm, args.norm_m, &corpus)?,
        forbid_unk: !args.allow_unk,
        normalize_during_pruning: false,
    };

    let threads = decode_threads(test_items.len())?;
    let mut records: Vec<GenRecord> = Vec::with_capacity(test_items.len());
    if threads <= 1 {
        for item in &test_items {
            records.push(decode_item(&model, item, guidance_map.as_ref(), &config)?);
        }
    } else {
        let chunks: Vec<&[&CorpusItem]> = test_items
            .chunks(test_items.len().div_ceil(threads))
            .collect();
        let results: Vec<CliResult<Vec<GenRecord>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    let model = &model;
                    let guidance_map = guidance_map.as_ref();
                    let config = &config;
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|item| decode_item(model, item, guidance_map, config))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("decode worker panicked"))
                .collect()
        });
        for r in results {
            records.extend(r?);
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = String::new();
    for record in &records {
        out.push_str(&serde_json::to_string(record).expect("serializable record"));
        out.push('\n');
    }
    write_atomic(&args.out, out.as_bytes())?;
    let mean_len =
        records.iter().map(|r| r.length as f64).sum::<f64>() / records.len() as f64;
    println!(
        "decoded {} items (mean caption length {:.2}); wrote {}",
        records.len(),
        mean_len,
        args.out.display()
    );
    Ok(())
}

fn decode_item(
    model: &CaptionModel,
    item: &CorpusItem,
    guidance_map: Option<&GuidanceMap>,
    config: &DecodeConfig,
) -> CliResult<GenRecord> {
    let guidance = match guidance_map {
        Some(map) => Some(map.get(&item.id).ok_or_else(|| {
            CliError::Config(format!("no guidance vector for item '{}'", item.id))
        })?),
        None => None,
    };
    let outcome = decoder::beam_search(model, &item.feature, guidance, config)?;
    let words = model.vocab().decode(&outcome.best.hypothesis.tokens);
    Ok(GenRecord {
        id: item.id.clone(),
        caption: words.join(" "),
        score: outcome.best.score,
        length: outcome.best.hypothesis.len(),
    })
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let corpus = textcorpus::load_manifest(&args.manifest)?;
    let text = fs::read_to_string(&args.generated).map_err(|e| CliError::Io {
        path: args.generated.display().to_string(),
        source: e,
    })?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: GenRecord = serde_json::from_str(line).map_err(|e| {
            CliError::Config(format!(
                "{} line {}: not a generation record: {e}",
                args.generated.display(),
                lineno + 1
            ))
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(CliError::Config(format!(
            "{} holds no generation records",
            args.generated.display()
        )));
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| corpus.find(&r.id).is_none())
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "generated ids missing from the manifest: {}",
            missing.join(", ")
        )));
    }
    let pairs: Vec<EvalPair> = records
        .iter()
        .map(|r| EvalPair {
            candidate: textcorpus::tokenize(&r.caption),
            references: corpus.find(&r.id).expect("checked above").captions.clone(),
        })
        .collect();
    let report = metrics::bleu(&pairs)?;
    let lengths: Vec<f64> = records.iter().map(|r| r.length as f64).collect();
    let n = lengths.len() as f64;
    let mean = lengths.iter().sum::<f64>() / n;
    let std = (lengths.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n).sqrt();
    println!(
        "{}",
        serde_json::to_string(&report).expect("serializable report")
    );
    println!("generated length: mean {mean:.2}, std {std:.2}");
    println!("METEOR and CIDEr are not computed: both need external linguistic resources");
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> CliResult<()> {
    let space = semspace::load_semantic_space(&args.cca)?;
    let feature: Vector = match (&args.id, &args.feature_file) {
        (Some(id), None) => {
            let corpus = textcorpus::load_manifest(&args.manifest)?;
            corpus
                .find(id)
                .ok_or_else(|| CliError::Config(format!("unknown image id '{id}'")))?
                .feature
                .clone()
        }
        (None, Some(path)) => {
            let m = textcorpus::load_features(path)?;
            if m.rows() != 1 {
                return Err(CliError::Config(format!(
                    "feature file {} holds {} rows, expected 1",
                    path.display(),
                    m.rows()
                )));
            }
            Vector::from_vec(m.row(0).to_vec())
        }
        _ => {
            return Err(CliError::Config(
                "exactly one of --id or --feature-file is required".into(),
            ))
        }
    };
    let hits = semspace::retrieve(&space.cca, &space.index, &feature, args.top_t)?;
    for (rank, hit) in hits.iter().enumerate() {
        println!(
            "{}\t{:.6}\t{}[{}]\t{}",
            rank + 1,
            hit.score,
            hit.item_id,
            hit.caption_idx,
            space.index.refs[hit.row].tokens.join(" ")
        );
    }
    Ok(())
}
