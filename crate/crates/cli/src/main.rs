//! `drq`: train, encode, search and evaluate shared-codebook residual
//! quantizers from the command line.
//!
//! Exit codes: 0 on success, 2 for usage or validation errors, 1 for I/O and
//! internal failures. Structured logs are written as JSON lines to stderr or
//! to `--log`.

mod log;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drq_core::io::{
    label_sets, load_codes, load_head, load_model, read_fvecs, read_labels, save_codes, save_head,
    save_model, write_atomic, write_fvecs, write_labels,
};
use drq_core::train::{distortion_losses, CodebookInit, LabelEmbeddings, RefinementHead, ScaleInit};
use drq_core::{
    encode_database, evaluate, reconstruct_hard, search_batch, synth_dataset, train,
    EvalOptions, FeatureMatrix, LossFlags, TrainConfig,
};
use serde_json::json;

use crate::log::Logger;

#[derive(Debug, Parser)]
#[command(name = "drq", version, about = "Shared-codebook residual quantization")]
struct Cli {
    /// Worker threads (1 gives single-worker mode).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Write JSON-lines logs here instead of stderr.
    #[arg(long, global = true)]
    log: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled Gaussian-mixture dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Encode vectors into a code file.
    Encode(EncodeArgs),
    /// Rank database items for each query.
    Search(SearchArgs),
    /// Compute mAP@R, precision@R and the precision-recall curve.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    clusters: usize,
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// fvecs output
    #[arg(long)]
    out: PathBuf,
    /// Label output (defaults to `<out>.labels`).
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Kmeans,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleInitArg {
    Random,
    Data,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Label embeddings (fvecs, one row per label id) for the margin loss.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    gamma: Option<f64>,
    /// Anneal gamma linearly to this value.
    #[arg(long)]
    gamma_final: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    epochs_stage3: Option<usize>,
    /// Comma-separated subset of hard,soft,joint,triplet,margin.
    #[arg(long, default_value = "hard,soft,joint")]
    loss_flags: String,
    #[arg(long)]
    triplet_margin: Option<f64>,
    #[arg(long, value_enum, default_value_t = InitArg::Kmeans)]
    init: InitArg,
    #[arg(long, default_value_t = 25)]
    kmeans_iters: usize,
    #[arg(long, value_enum, default_value_t = ScaleInitArg::Random)]
    scale_init: ScaleInitArg,
    /// Return the last parameters instead of the best monitored ones.
    #[arg(long)]
    no_keep_best: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the refinement head (defaults to `<out>.head`).
    #[arg(long)]
    head_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Refinement head applied before quantization.
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the reconstructed vectors (fvecs).
    #[arg(long)]
    reconstruct: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    head: Option<PathBuf>,
    /// Rank with only the first levels of each code.
    #[arg(long)]
    prefix_m: Option<usize>,
    /// Output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long)]
    topk: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long)]
    db_labels: Option<PathBuf>,
    #[arg(long)]
    query_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    map_cutoff: usize,
    /// Precision-recall curve output.
    #[arg(long)]
    pr_curve: Option<PathBuf>,
    /// Comma-separated ranks for precision@R.
    #[arg(long)]
    precision_at: Option<String>,
    #[arg(long, default_value_t = 100)]
    pr_points: usize,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Internal(String),
}

impl From<drq_core::Error> for Failure {
    fn from(e: drq_core::Error) -> Self {
        match e {
            drq_core::Error::Domain(_) | drq_core::Error::Config(_) => Failure::Usage(e.to_string()),
            drq_core::Error::Format(_) | drq_core::Error::Io(_) => Failure::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

/// Attaches the file name to load errors.
fn ctx<T>(path: &Path, r: drq_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        match Failure::from(e) {
            Failure::Usage(_) => Failure::Usage(msg),
            Failure::Internal(_) => Failure::Internal(msg),
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return usage("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    let mut log = Logger::open(cli.log.as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a, &mut log),
        Command::Train(a) => cmd_train(a, &mut log),
        Command::Encode(a) => cmd_encode(a, &mut log),
        Command::Search(a) => cmd_search(a, &mut log),
        Command::Eval(a) => cmd_eval(a, &mut log),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_synth(a: SynthArgs, log: &mut Logger) -> CliResult<()> {
    let data = synth_dataset(a.n, a.d, a.clusters, a.spread, a.seed)?;
    let labels_out = a.labels_out.unwrap_or_else(|| with_suffix(&a.out, ".labels"));
    log.event(json!({
        "event": "start", "command": "synth", "seed": a.seed,
        "config": {"n": a.n, "d": a.d, "clusters": a.clusters, "spread": a.spread,
                   "out": a.out, "labels_out": labels_out},
    }))?;
    write_fvecs(&a.out, &data)?;
    write_labels(&labels_out, &label_sets(&data).unwrap_or_default())?;
    log.event(json!({"event": "done", "command": "synth", "rows": data.rows()}))?;
    Ok(())
}

fn attach_labels(features: FeatureMatrix, path: &Path) -> CliResult<FeatureMatrix> {
    let sets = ctx(path, read_labels(path))?;
    if sets.len() != features.rows() {
        return usage(format!(
            "{}: {} label rows for {} vectors",
            path.display(),
            sets.len(),
            features.rows()
        ));
    }
    Ok(features.with_multi_labels(sets)?)
}

fn cmd_train(a: TrainArgs, log: &mut Logger) -> CliResult<()> {
    let loss_flags: LossFlags = a
        .loss_flags
        .parse()
        .map_err(|e: drq_core::Error| Failure::Usage(format!("--loss-flags: {e}")))?;
    let refine = loss_flags.triplet || loss_flags.adaptive_margin;
    if refine && a.labels.is_none() {
        return usage("triplet/margin losses need --labels");
    }
    if loss_flags.adaptive_margin && a.embeddings.is_none() {
        return usage("the margin loss needs --embeddings");
    }

    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        k: a.k,
        m: a.m,
        gamma: a.gamma.unwrap_or(defaults.gamma),
        gamma_final: a.gamma_final,
        lr: a.lr.unwrap_or(defaults.lr),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        epochs_stage1: a.epochs_stage1.unwrap_or(defaults.epochs_stage1),
        epochs_stage2: a.epochs_stage2.unwrap_or(defaults.epochs_stage2),
        epochs_stage3: a.epochs_stage3.unwrap_or(defaults.epochs_stage3),
        enable_stage1: refine,
        loss_flags,
        triplet_margin: a.triplet_margin.unwrap_or(defaults.triplet_margin),
        seed: a.seed,
        init: match a.init {
            InitArg::Random => CodebookInit::Random,
            InitArg::Kmeans => CodebookInit::KMeans {
                iters: a.kmeans_iters,
            },
        },
        scale_init: match a.scale_init {
            ScaleInitArg::Random => ScaleInit::Random,
            ScaleInitArg::Data => ScaleInit::DataDriven,
        },
        keep_best: !a.no_keep_best,
        ..defaults
    };
    cfg.validate()?;

    let mut features = ctx(&a.input, read_fvecs(&a.input, None))?;
    if let Some(p) = &a.labels {
        features = attach_labels(features, p)?;
    }
    let embeddings = match &a.embeddings {
        Some(p) => {
            let e = ctx(p, read_fvecs(p, None))?;
            Some(ctx(p, LabelEmbeddings::new(e.as_slice().to_vec(), e.dim()))?)
        }
        None => None,
    };
    let head_out = refine.then(|| a.head_out.clone().unwrap_or_else(|| with_suffix(&a.out, ".head")));

    log.event(json!({
        "event": "start", "command": "train", "seed": cfg.seed,
        "input": a.input, "rows": features.rows(), "dim": features.dim(),
        "config": serde_json::to_value(&cfg).map_err(|e| Failure::Internal(e.to_string()))?,
        "out": a.out, "head_out": head_out,
    }))?;
    let out = train(&features, &cfg, embeddings.as_ref())?;
    for rec in &out.log {
        let mut v = serde_json::to_value(rec).map_err(|e| Failure::Internal(e.to_string()))?;
        v["event"] = json!("epoch");
        log.event(v)?;
    }
    save_model(&a.out, &out.model)?;
    if let (Some(path), Some(head)) = (&head_out, &out.head) {
        save_head(path, head)?;
    }
    log.event(json!({
        "event": "done", "command": "train",
        "init_e_hard": out.init_e_hard, "final_e_hard": out.final_e_hard,
        "scale": out.model.scale(), "code_bits": out.model.code_bits(),
        "parameters": out.model.parameter_count(),
    }))?;
    Ok(())
}

fn maybe_head(path: Option<&Path>) -> CliResult<Option<RefinementHead>> {
    path.map(|p| ctx(p, load_head(p))).transpose()
}

/// Reads vectors and applies the refinement head when one is given.
fn read_inputs(path: &Path, head: Option<&RefinementHead>, model_dim: usize) -> CliResult<FeatureMatrix> {
    let raw_dim = head.map_or(model_dim, RefinementHead::in_dim);
    let features = ctx(path, read_fvecs(path, Some(raw_dim)))?;
    match head {
        Some(h) => Ok(h.transform(&features)?),
        None => Ok(features),
    }
}

fn cmd_encode(a: EncodeArgs, log: &mut Logger) -> CliResult<()> {
    let model = ctx(&a.model, load_model(&a.model))?;
    let head = maybe_head(a.head.as_deref())?;
    if let Some(h) = &head {
        if h.out_dim() != model.dim() {
            return usage(format!("head outputs {} dims, model expects {}", h.out_dim(), model.dim()));
        }
    }
    let features = read_inputs(&a.input, head.as_ref(), model.dim())?;
    log.event(json!({
        "event": "start", "command": "encode", "model": a.model, "input": a.input,
        "rows": features.rows(), "k": model.k(), "m": model.levels(), "code_bits": model.code_bits(),
    }))?;
    let db = encode_database(&features, &model)?;
    save_codes(&a.out, &db)?;
    if let Some(path) = &a.reconstruct {
        let mut data = Vec::with_capacity(db.len() * model.dim());
        for i in 0..db.len() {
            data.extend(reconstruct_hard(&db.code_sequence(i), &model, model.levels())?);
        }
        write_fvecs(path, &FeatureMatrix::new(data, model.dim())?)?;
    }
    let per_level = if features.is_empty() {
        Vec::new()
    } else {
        distortion_losses(&features, &model)?.per_level_hard
    };
    log.event(json!({
        "event": "done", "command": "encode", "rows": db.len(),
        "mean_e_hard_per_level": per_level,
    }))?;
    Ok(())
}

struct Loaded {
    queries: FeatureMatrix,
    db: drq_core::EncodedDatabase,
}

fn load_for_query(q: &QueryArgs) -> CliResult<Loaded> {
    let model = ctx(&q.model, load_model(&q.model))?;
    let db = ctx(&q.codes, load_codes(&q.codes, &model))?;
    let head = maybe_head(q.head.as_deref())?;
    let queries = read_inputs(&q.queries, head.as_ref(), model.dim())?;
    if queries.dim() != model.dim() {
        return usage(format!("queries have {} dims, model expects {}", queries.dim(), model.dim()));
    }
    Ok(Loaded { queries, db })
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_search(a: SearchArgs, log: &mut Logger) -> CliResult<()> {
    if a.topk == 0 {
        return usage("--topk must be at least 1");
    }
    let Loaded { queries, db } = load_for_query(&a.query)?;
    log.event(json!({
        "event": "start", "command": "search", "queries": queries.rows(), "items": db.len(),
        "topk": a.topk, "prefix_m": a.query.prefix_m,
    }))?;
    let results = search_batch(&queries, &db, a.topk, a.query.prefix_m)?;
    let mut text = String::from("# query\trank\tid\tdistance\n");
    for (q, hits) in results.iter().enumerate() {
        for (rank, h) in hits.iter().enumerate() {
            let _ = writeln!(text, "{q}\t{}\t{}\t{:.9e}", rank + 1, h.id, h.distance);
        }
    }
    emit(a.query.out.as_deref(), &text)?;
    log.event(json!({"event": "done", "command": "search"}))?;
    Ok(())
}

fn parse_ranks(csv: &str) -> CliResult<Vec<usize>> {
    csv.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => usage(format!("--precision-at: bad rank {s:?}")),
        })
        .collect()
}

fn cmd_eval(a: EvalArgs, log: &mut Logger) -> CliResult<()> {
    let (Some(db_labels), Some(query_labels)) = (&a.db_labels, &a.query_labels) else {
        return usage("eval needs --db-labels and --query-labels");
    };
    let precision_at = a.precision_at.as_deref().map(parse_ranks).transpose()?.unwrap_or_default();
    let Loaded { queries, db } = load_for_query(&a.query)?;
    let queries = attach_labels(queries, query_labels)?;
    let sets = ctx(db_labels, read_labels(db_labels))?;
    let db = db.with_labels(sets)?;
    let opts = EvalOptions {
        r_cutoff: a.map_cutoff,
        precision_at,
        pr_points: a.pr_points,
        prefix_m: a.query.prefix_m,
    };
    log.event(json!({
        "event": "start", "command": "eval", "queries": queries.rows(), "items": db.len(),
        "map_cutoff": opts.r_cutoff, "prefix_m": opts.prefix_m, "precision_at": opts.precision_at,
    }))?;
    let report = evaluate(&queries, &db, &opts)?;
    emit(a.query.out.as_deref(), &report.to_text())?;
    if let Some(p) = &a.pr_curve {
        write_atomic(p, report.pr_curve_text().as_bytes())?;
    }
    log.event(json!({
        "event": "done", "command": "eval", "map": report.map_at_r,
        "precision_at": report.precision_at_r,
    }))?;
    Ok(())
}
