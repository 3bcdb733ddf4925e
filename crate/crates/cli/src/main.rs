//! Single binary driving the full pipeline: complexity audits, training,
//! embedding extraction, and open-set evaluation. Every run that writes
//! files also writes a manifest recording the fully resolved command, and
//! `replay` re-executes a manifest so outputs can be reproduced bit for
//! bit.
//!
//! Exit codes: 0 on success, 2 for configuration and file errors, 3 for
//! numeric failures.

use clap::{Args, Parser, Subcommand};
use edgeear_core::backbone::ModelConfig;
use edgeear_core::complexity::{audit, count_madds, count_params, gamma_for_budget, graph_from_config};
use edgeear_core::data::{load_dir, resize_dataset, synth_dataset, Dataset, Subgroup};
use edgeear_core::eval::{embed_dataset, evaluate, Aggregation, EmbeddingSet};
use edgeear_core::train::{fit, load_checkpoint_model, save_checkpoint, TrainConfig};
use edgeear_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "edgeear",
    version,
    about = "Low-rank ear-recognition pipeline: audit, train, embed, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report parameter counts, multiply-accumulates, and flops.
    Complexity(ComplexityArgs),
    /// Train a model on a directory or synthetic dataset.
    Train(TrainArgs),
    /// Embed a dataset with a trained checkpoint.
    Embed(EmbedArgs),
    /// Score an embedding table with the open-set metrics.
    Eval(EvalArgs),
    /// Re-run a recorded command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ComplexityArgs {
    /// Model config (.toml or .json); omitted means the default profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Audit at this input resolution instead of the config's.
    #[arg(long)]
    input_size: Option<usize>,
    /// Also price a training classifier head for this many classes.
    #[arg(long)]
    train_classes: Option<usize>,
    /// Comma-separated rank ratios swept with every projection low-rank.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<f64>,
    /// Largest uniform rank ratio (0.01 grid) fitting this parameter
    /// budget.
    #[arg(long)]
    budget: Option<usize>,
    /// Output format: json or text.
    #[arg(long, default_value = "json")]
    format: String,
    /// Write the report to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (.toml or .json); omitted means defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Image directory, or synth:IDSxN for a generated set.
    #[arg(long)]
    data: String,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Checkpoint directory from `train`.
    #[arg(long)]
    weights: PathBuf,
    /// Image directory, or synth:IDSxN for a generated set.
    #[arg(long)]
    images: String,
    /// Embedding csv to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Seed for synthetic image sources.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Embedding csv from `embed`.
    #[arg(long)]
    embeddings: PathBuf,
    /// Output directory for metrics.json and the roc curves.
    #[arg(long)]
    out: PathBuf,
    /// How per-sample similarities combine per identity: mean or max.
    #[arg(long, default_value = "mean")]
    aggregation: String,
    /// Optional metadata csv re-tagging subgroups by sample id.
    #[arg(long)]
    subgroups: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    manifest: PathBuf,
}

/// A command with every choice pinned down: config files inlined, seeds
/// resolved, defaults expanded. Executing the same resolved command twice
/// writes identical outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
enum ResolvedCommand {
    Complexity {
        config: ModelConfig,
        train_classes: Option<usize>,
        sweep: Vec<f64>,
        budget: Option<usize>,
        format: String,
        out: Option<PathBuf>,
    },
    Train {
        config: TrainConfig,
        data: String,
        out: PathBuf,
    },
    Embed {
        weights: PathBuf,
        images: String,
        out: PathBuf,
        batch_size: usize,
        seed: u64,
    },
    Eval {
        embeddings: PathBuf,
        out: PathBuf,
        aggregation: Aggregation,
        subgroups: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    version: String,
    command: ResolvedCommand,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::Analysis(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let resolved = match cli.command {
        Command::Complexity(a) => resolve_complexity(a)?,
        Command::Train(a) => resolve_train(a)?,
        Command::Embed(a) => ResolvedCommand::Embed {
            weights: a.weights,
            images: a.images,
            out: a.out,
            batch_size: a.batch_size,
            seed: a.seed,
        },
        Command::Eval(a) => ResolvedCommand::Eval {
            embeddings: a.embeddings,
            out: a.out,
            aggregation: parse_aggregation(&a.aggregation)?,
            subgroups: a.subgroups,
        },
        Command::Replay(a) => {
            let text = std::fs::read_to_string(&a.manifest).map_err(|e| {
                Error::Load(format!("cannot read {}: {}", a.manifest.display(), e))
            })?;
            let manifest: RunManifest = serde_json::from_str(&text)
                .map_err(|e| Error::Load(format!("bad manifest {}: {}", a.manifest.display(), e)))?;
            manifest.command
        }
    };
    execute(&resolved)
}

fn configure_threads() -> Result<()> {
    match std::env::var("EDGEEAR_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "EDGEEAR_THREADS must be a positive integer, got {:?}",
                    v
                ))
            })?;
            if n == 0 {
                return Err(Error::Config("EDGEEAR_THREADS must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool setup failed: {}", e)))
        }
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {}", path.display(), e)))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e))),
        Some("json") => serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e))),
        _ => Err(Error::Config(format!(
            "{}: config files must end in .toml or .json",
            path.display()
        ))),
    }
}

fn parse_aggregation(s: &str) -> Result<Aggregation> {
    match s {
        "mean" => Ok(Aggregation::Mean),
        "max" => Ok(Aggregation::Max),
        other => Err(Error::Config(format!(
            "aggregation must be mean or max, got {:?}",
            other
        ))),
    }
}

fn resolve_complexity(a: ComplexityArgs) -> Result<ResolvedCommand> {
    let mut config: ModelConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => ModelConfig::default(),
    };
    if let Some(s) = a.input_size {
        config.input_size = s;
    }
    config.validate()?;
    if a.format != "json" && a.format != "text" {
        return Err(Error::Config(format!(
            "format must be json or text, got {:?}",
            a.format
        )));
    }
    Ok(ResolvedCommand::Complexity {
        config,
        train_classes: a.train_classes,
        sweep: a.sweep,
        budget: a.budget,
        format: a.format,
        out: a.out,
    })
}

fn resolve_train(a: TrainArgs) -> Result<ResolvedCommand> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(ResolvedCommand::Train {
        config,
        data: a.data,
        out: a.out,
    })
}

fn execute(cmd: &ResolvedCommand) -> Result<()> {
    match cmd {
        ResolvedCommand::Complexity {
            config,
            train_classes,
            sweep,
            budget,
            format,
            out,
        } => cmd_complexity(cmd, config, *train_classes, sweep, *budget, format, out.as_deref()),
        ResolvedCommand::Train { config, data, out } => cmd_train(cmd, config, data, out),
        ResolvedCommand::Embed {
            weights,
            images,
            out,
            batch_size,
            seed,
        } => cmd_embed(cmd, weights, images, out, *batch_size, *seed),
        ResolvedCommand::Eval {
            embeddings,
            out,
            aggregation,
            subgroups,
        } => cmd_eval(cmd, embeddings, out, *aggregation, subgroups.as_deref()),
    }
}

fn write_manifest(cmd: &ResolvedCommand, path: &Path) -> Result<()> {
    let manifest = RunManifest {
        tool: "edgeear".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Contract(format!("manifest serialization failed: {}", e)))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Manifest path for a single-file output: `emb.csv` gets
/// `emb.manifest.json` in the same directory.
fn manifest_path_for_file(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("output");
    out.with_file_name(format!("{}.manifest.json", stem))
}

fn parse_synth_spec(spec: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = spec.split('x').collect();
    let err = || {
        Error::Config(format!(
            "synthetic data spec must look like synth:8x12 (identities x samples), got synth:{}",
            spec
        ))
    };
    if parts.len() != 2 {
        return Err(err());
    }
    let ids: usize = parts[0].parse().map_err(|_| err())?;
    let per: usize = parts[1].parse().map_err(|_| err())?;
    if ids == 0 || per == 0 {
        return Err(err());
    }
    Ok((ids, per))
}

/// A dataset from a directory path or a synth:IDSxN spec; synthetic sets
/// are generated directly at `size`.
fn load_data(source: &str, size: usize, seed: u64) -> Result<Dataset> {
    if let Some(spec) = source.strip_prefix("synth:") {
        let (ids, per) = parse_synth_spec(spec)?;
        synth_dataset(ids, per, size, seed)
    } else {
        load_dir(Path::new(source))
    }
}

#[derive(Serialize)]
struct SweepRow {
    gamma: f64,
    params: usize,
    madds: u64,
}

#[derive(Serialize)]
struct ComplexityOutput {
    input_size: usize,
    params: usize,
    madds: u64,
    flops: u64,
    surcharge: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_head_params: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    sweep: Vec<SweepRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    budget_gamma: Option<f64>,
    per_layer: Vec<edgeear_core::complexity::LayerCost>,
}

fn cmd_complexity(
    cmd: &ResolvedCommand,
    config: &ModelConfig,
    train_classes: Option<usize>,
    sweep: &[f64],
    budget: Option<usize>,
    format: &str,
    out: Option<&Path>,
) -> Result<()> {
    let graph = graph_from_config(config)?;
    let report = audit(&graph)?;
    let train_head_params = match train_classes {
        None => None,
        Some(0) => {
            return Err(Error::Config("train_classes must be positive".into()));
        }
        // a biased linear classifier over the embedding
        Some(k) => Some(k * config.embedding_dim + k),
    };
    let mut sweep_rows = Vec::new();
    for &gamma in sweep {
        let mut c = config.clone();
        c.selective = false;
        c.global_gamma = Some(gamma);
        c.validate()?;
        let g = graph_from_config(&c)?;
        sweep_rows.push(SweepRow {
            gamma,
            params: count_params(&g),
            madds: count_madds(&g)?,
        });
    }
    let budget_gamma = match budget {
        None => None,
        Some(b) => Some(gamma_for_budget(config, b)?),
    };
    let output = ComplexityOutput {
        input_size: config.input_size,
        params: report.params,
        madds: report.madds,
        flops: report.flops,
        surcharge: report.surcharge,
        train_head_params,
        sweep: sweep_rows,
        budget_gamma,
        per_layer: report.per_layer,
    };
    let text = match format {
        "json" => {
            serde_json::to_string_pretty(&output)
                .map_err(|e| Error::Contract(format!("report serialization failed: {}", e)))?
                + "\n"
        }
        _ => {
            let mut s = String::new();
            s.push_str(&format!("input size   {}\n", output.input_size));
            s.push_str(&format!("params       {}\n", output.params));
            s.push_str(&format!("madds        {}\n", output.madds));
            s.push_str(&format!("flops        {}\n", output.flops));
            s.push_str(&format!("surcharge    {}\n", output.surcharge));
            if let Some(k) = output.train_head_params {
                s.push_str(&format!("head params  {}\n", k));
            }
            if !output.sweep.is_empty() {
                s.push_str("gamma    params      madds\n");
                for row in &output.sweep {
                    s.push_str(&format!(
                        "{:<8} {:<11} {}\n",
                        row.gamma, row.params, row.madds
                    ));
                }
            }
            if let Some(g) = output.budget_gamma {
                s.push_str(&format!("budget gamma {}\n", g));
            }
            s
        }
    };
    match out {
        None => print!("{}", text),
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, &text)?;
            write_manifest(cmd, &manifest_path_for_file(path))?;
            println!("report written to {}", path.display());
        }
    }
    Ok(())
}

fn cmd_train(cmd: &ResolvedCommand, config: &TrainConfig, data: &str, out: &Path) -> Result<()> {
    let ds = load_data(data, config.model.input_size, config.seed)?;
    let result = fit(config, &ds)?;
    save_checkpoint(out, config, &result)?;
    write_manifest(cmd, &out.join("manifest.json"))?;
    println!(
        "trained {} steps over {} epochs; best epoch {} with validation loss {:.6}; checkpoint at {}",
        result.steps_taken,
        result.history.len(),
        result.best_epoch,
        result.best_val_loss,
        out.display()
    );
    Ok(())
}

fn cmd_embed(
    cmd: &ResolvedCommand,
    weights: &Path,
    images: &str,
    out: &Path,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let (train_config, model) = load_checkpoint_model(weights)?;
    let input = train_config.model.input_size;
    let mut ds = load_data(images, input, seed)?;
    if ds.image_size != input {
        ds = resize_dataset(&ds, input)?;
    }
    let set = embed_dataset(&model, &ds, batch_size)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    set.write_csv(out)?;
    write_manifest(cmd, &manifest_path_for_file(out))?;
    println!(
        "embedded {} samples at width {} into {}",
        set.records.len(),
        set.dim,
        out.display()
    );
    Ok(())
}

/// Columns sample_id, ethnicity, gender (a data directory's metadata.csv
/// works as-is); returns sample id -> subgroup.
fn read_subgroup_tags(path: &Path) -> Result<BTreeMap<String, Subgroup>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {}", path.display(), e)))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Load(format!("bad csv header: {}", e)))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Load(format!("{} has no {} column", path.display(), name)))
    };
    let id_col = col("sample_id")?;
    let eth_col = col("ethnicity")?;
    let gen_col = col("gender")?;
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Load(format!("bad csv row: {}", e)))?;
        out.insert(
            rec[id_col].to_string(),
            Subgroup {
                ethnicity: rec[eth_col].to_string(),
                gender: rec[gen_col].to_string(),
            },
        );
    }
    Ok(out)
}

fn cmd_eval(
    cmd: &ResolvedCommand,
    embeddings: &Path,
    out: &Path,
    aggregation: Aggregation,
    subgroups: Option<&Path>,
) -> Result<()> {
    let mut set = EmbeddingSet::read_csv(embeddings)?;
    if let Some(meta) = subgroups {
        let tags = read_subgroup_tags(meta)?;
        let mut records = set.records;
        for r in &mut records {
            match tags.get(&r.sample_id) {
                Some(s) => r.subgroup = s.clone(),
                None => {
                    return Err(Error::Config(format!(
                        "subgroup file {} has no row for sample {}",
                        meta.display(),
                        r.sample_id
                    )));
                }
            }
        }
        set = EmbeddingSet::new(records)?;
    }
    let ev = evaluate(&set, aggregation)?;
    std::fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(&ev.report)
        .map_err(|e| Error::Contract(format!("report serialization failed: {}", e)))?;
    std::fs::write(out.join("metrics.json"), json + "\n")?;
    ev.macro_curve.write_csv(&out.join("roc.csv"))?;
    for s in &ev.subgroups {
        let name = format!("roc_{}_{}.csv", s.subgroup.ethnicity, s.subgroup.gender);
        s.curve.write_csv(&out.join(name))?;
    }
    write_manifest(cmd, &out.join("manifest.json"))?;
    println!(
        "eer {:.4}  auc {:.4}  fnmr@1%fmr {:.4}  rank1 {:.4}  ({} identities, {} probes) -> {}",
        ev.report.eer,
        ev.report.auc,
        ev.report.fnmr_at_1pct,
        ev.report.rank1,
        ev.report.num_identities,
        ev.report.num_probes,
        out.display()
    );
    Ok(())
}
