use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use dbgdgm::eval::{self, Tasks};
use dbgdgm::generative::{sample_planted, EmbeddingDims, PlantedBlocks, PriorHyper, SamplerConfig};
use dbgdgm::graph::{load_corpus, split_temporal, write_corpus};
use dbgdgm::model::Model;
use dbgdgm::pipeline::{self, PipelineConfig};
use dbgdgm::trainer::{train_with, write_log, TrainingConfig, LOG_FILE};

const SEED_ENV: &str = "DBGDGM_SEED";
const GROUND_TRUTH_FILE: &str = "ground_truth.json";
/// Keys a run config file may carry besides the training settings.
const PATH_KEYS: [&str; 4] = ["data", "out", "checkpoint", "report"];

#[derive(Parser)]
#[command(name = "dbgdgm", version, about = "Hierarchical generative model for multi-subject dynamic graphs")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn region timeseries into a thresholded dynamic-graph corpus.
    Prepare(PrepareArgs),
    /// Sample a planted-block synthetic corpus.
    Synth(SynthArgs),
    /// Fit the model to a corpus.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on its test snapshots.
    Eval(EvalArgs),
    /// Evaluate the common-neighbours heuristic.
    BaselineCmn(CmnArgs),
    /// Write per-subject time-averaged embeddings as CSV.
    Export(ExportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory with `subject_<s>.csv` files (or a `timeseries/` subdirectory).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 30)]
    window: usize,
    #[arg(long, default_value_t = 5.0)]
    threshold_pct: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    subjects: usize,
    #[arg(long)]
    nodes: usize,
    #[arg(long)]
    snapshots: usize,
    #[arg(long)]
    communities: usize,
    /// Directed samples drawn per snapshot.
    #[arg(long)]
    edges: usize,
    /// Embedding width (default: max(K, 8)).
    #[arg(long)]
    dim: Option<usize>,
    /// Random-walk standard deviation for nodes and communities.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Flat JSON file of training settings (and optionally `data`/`out`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the settings tuned for planted synthetic corpora.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing checkpoint in `--out`.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    communities: Option<usize>,
    /// Sets all three embedding widths.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Sets both random-walk standard deviations.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    kl_hold_steps: Option<u64>,
    #[arg(long)]
    kl_warmup_steps: Option<u64>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Preset {
    Planted,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "recon,link,communities")]
    tasks: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct CmnArgs {
    #[arg(long)]
    data: PathBuf,
    /// Take split fractions from this run config instead of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "recon,link")]
    tasks: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Bad arguments or inputs detected by the CLI itself.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<dbgdgm::Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', " ")
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::BaselineCmn(a) => baseline_cmn(a),
        Command::Export(a) => export(a),
    }
}

/// `--seed`, then the environment fallback, then `default`.
fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => text.trim().parse().map_err(|_| usage(format!("{SEED_ENV}=`{text}` is not a seed"))),
        Err(_) => Ok(default),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let cfg = PipelineConfig {
        window: a.window,
        threshold_pct: a.threshold_pct,
    };
    cfg.validate()?;
    let inputs = pipeline::load_timeseries_dir(&a.input)?;
    let (corpus, report) = pipeline::build_corpus(&inputs, &cfg)?;
    create_dir(&a.out)?;
    write_corpus(&corpus, &a.out)?;
    report.write(&a.out)?;
    if report.zero_variance_warnings > 0 {
        eprintln!(
            "warning: {} constant region windows had their correlations set to 0",
            report.zero_variance_warnings
        );
    }
    eprintln!(
        "prepared S={} T={} V={} with {} edges per snapshot",
        report.num_subjects, report.num_snapshots, report.num_nodes, report.m
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    if a.communities > a.nodes {
        return Err(usage(format!("cannot plant K={} blocks on V={} nodes", a.communities, a.nodes)));
    }
    let h = a.dim.unwrap_or(a.communities.max(8));
    let cfg = SamplerConfig {
        num_subjects: a.subjects,
        num_snapshots: a.snapshots,
        num_nodes: a.nodes,
        num_communities: a.communities,
        edges_per_snapshot: a.edges,
        dims: EmbeddingDims::uniform(h),
        hyper: PriorHyper {
            sigma_phi: a.sigma,
            sigma_psi: a.sigma,
        },
    };
    let planted = PlantedBlocks::default();
    let sample = sample_planted(&cfg, &planted, seed)?;
    let latents = &sample.output.latents;
    let truth = json!({
        "seed": seed,
        "sampler": cfg,
        "planted": planted,
        "blocks": sample.blocks,
        "popularity": sample.params.theta_c.layers()[0].1.row(0),
        "alpha": (0..cfg.num_subjects).map(|s| latents.alpha.row(s).to_vec()).collect::<Vec<_>>(),
        "community_counts": latents.z.iter().map(|per_t| {
            per_t.iter().map(|zs| {
                let mut counts = vec![0usize; cfg.num_communities];
                zs.iter().for_each(|&z| counts[z] += 1);
                counts
            }).collect::<Vec<_>>()
        }).collect::<Vec<_>>(),
    });
    create_dir(&a.out)?;
    write_corpus(&sample.output.corpus, &a.out)?;
    write_json(&a.out.join(GROUND_TRUTH_FILE), &truth)?;
    eprintln!(
        "sampled S={} T={} V={} K={} into {}",
        cfg.num_subjects,
        cfg.num_snapshots,
        cfg.num_nodes,
        cfg.num_communities,
        a.out.display()
    );
    Ok(())
}

/// Splits a flat config document into path entries and training settings.
fn read_run_config(path: &Path) -> Result<(Map<String, Value>, Map<String, Value>)> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    let Value::Object(mut settings) = value else {
        return Err(usage(format!("config {} must be a JSON object", path.display())));
    };
    let mut paths = Map::new();
    for key in PATH_KEYS {
        if let Some(v) = settings.remove(key) {
            if !v.is_string() {
                return Err(usage(format!("config key `{key}` must be a path string")));
            }
            paths.insert(key.to_string(), v);
        }
    }
    Ok((paths, settings))
}

fn config_path(paths: &Map<String, Value>, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| paths.get(key).and_then(Value::as_str).map(PathBuf::from))
        .ok_or_else(|| usage(format!("--{key} is required (flag or config key `{key}`)")))
}

fn training_config(a: &TrainArgs) -> Result<(TrainingConfig, Map<String, Value>)> {
    let base = match a.preset {
        Some(Preset::Planted) => TrainingConfig::planted_benchmark(),
        None => TrainingConfig::default(),
    };
    let mut merged = match serde_json::to_value(&base)? {
        Value::Object(m) => m,
        _ => unreachable!("config serializes to an object"),
    };
    let mut paths = Map::new();
    let mut seed_in_file = false;
    if let Some(path) = &a.config {
        let (p, settings) = read_run_config(path)?;
        paths = p;
        seed_in_file = settings.contains_key("seed");
        for (k, v) in settings {
            if !merged.contains_key(&k) {
                return Err(usage(format!("unknown config key `{k}` in {}", path.display())));
            }
            merged.insert(k, v);
        }
    }
    let mut cfg: TrainingConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid config: {e}")))?;
    if let Some(k) = a.communities {
        cfg.num_communities = k;
    }
    if let Some(h) = a.hidden {
        (cfg.h_alpha, cfg.h_phi, cfg.h_psi) = (h, h, h);
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(wd) = a.weight_decay {
        cfg.weight_decay = wd;
    }
    if let Some(s) = a.sigma {
        (cfg.sigma_phi, cfg.sigma_psi) = (s, s);
    }
    if let Some(n) = a.max_epochs {
        cfg.max_epochs = n;
    }
    if let Some(n) = a.patience {
        cfg.patience = n;
    }
    if let Some(n) = a.kl_hold_steps {
        cfg.kl_hold_steps = n;
    }
    if let Some(n) = a.kl_warmup_steps {
        cfg.kl_warmup_steps = n;
    }
    cfg.seed = if a.seed.is_some() || !seed_in_file {
        resolve_seed(a.seed, cfg.seed)?
    } else {
        cfg.seed
    };
    cfg.validate()?;
    Ok((cfg, paths))
}

fn train(a: TrainArgs) -> Result<()> {
    let (cfg, paths) = training_config(&a)?;
    let data = config_path(&paths, "data", a.data.clone())?;
    let out = config_path(&paths, "out", a.out.clone())?;
    if Model::exists(&out) && !a.force {
        return Err(usage(format!(
            "{} already holds a checkpoint; pass --force to overwrite it",
            out.display()
        )));
    }
    let corpus = load_corpus(&data)?;
    split_temporal(corpus.num_snapshots(), cfg.fractions())?;
    if cfg.num_communities > corpus.num_nodes() {
        return Err(usage(format!(
            "K={} exceeds the corpus's V={}",
            cfg.num_communities,
            corpus.num_nodes()
        )));
    }
    eprintln!(
        "training K={} H=({}, {}, {}) lr={} patience={} max_epochs={} seed={}",
        cfg.num_communities, cfg.h_alpha, cfg.h_phi, cfg.h_psi, cfg.learning_rate, cfg.patience, cfg.max_epochs, cfg.seed
    );
    let quiet = a.quiet;
    let outcome = train_with(&corpus, &cfg, |row| {
        if !quiet && (row.epoch == 1 || row.epoch % 10 == 0) {
            eprintln!(
                "epoch {:>5}  elbo {:>14.3}  val_nll {:.5}  tau {:.4}",
                row.epoch, row.elbo, row.val_nll, row.tau
            );
        }
    })?;
    create_dir(&out)?;
    outcome.model.save(&out)?;
    write_log(&outcome.log, out.join(LOG_FILE))?;
    eprintln!(
        "ran {} epochs ({}), best epoch {}",
        outcome.log.len(),
        if outcome.stopped_early { "early stop" } else { "epoch limit" },
        outcome.best_epoch
    );
    Ok(())
}

fn load_pair(data: &Path, checkpoint: &Path) -> Result<(Model, dbgdgm::graph::DynamicGraphCorpus)> {
    if !Model::exists(checkpoint) {
        return Err(usage(format!("{} does not contain a checkpoint", checkpoint.display())));
    }
    let model = Model::load(checkpoint)?;
    let corpus = load_corpus(data)?;
    model.check_corpus(&corpus)?;
    Ok((model, corpus))
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let tasks = Tasks::parse(&a.tasks)?;
    let (model, corpus) = load_pair(&a.data, &a.checkpoint)?;
    let seed = resolve_seed(a.seed, model.config.seed)?;
    let report = eval::evaluate(&model, &corpus, &tasks, seed)?;
    report.write(&a.report)?;
    Ok(())
}

fn baseline_cmn(a: CmnArgs) -> Result<()> {
    let tasks = Tasks::parse(&a.tasks)?;
    if tasks.communities {
        return Err(usage("the common-neighbours baseline has no communities"));
    }
    let fractions = match &a.config {
        Some(path) => {
            let (_, settings) = read_run_config(path)?;
            let mut merged = match serde_json::to_value(TrainingConfig::default())? {
                Value::Object(m) => m,
                _ => unreachable!("config serializes to an object"),
            };
            for (k, v) in settings {
                if !merged.contains_key(&k) {
                    return Err(usage(format!("unknown config key `{k}` in {}", path.display())));
                }
                merged.insert(k, v);
            }
            let cfg: TrainingConfig =
                serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid config: {e}")))?;
            cfg.fractions()
        }
        None => TrainingConfig::default().fractions(),
    };
    let corpus = load_corpus(&a.data)?;
    let split = split_temporal(corpus.num_snapshots(), fractions)?;
    let seed = resolve_seed(a.seed, 0)?;
    let report = eval::evaluate_cmn(&corpus, &split, &tasks, seed)?;
    report.write(&a.report)?;
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let (model, corpus) = load_pair(&a.data, &a.checkpoint)?;
    let rows = eval::export_embeddings(&model, &corpus)?;
    eval::write_embeddings(&rows, &a.out)?;
    Ok(())
}
