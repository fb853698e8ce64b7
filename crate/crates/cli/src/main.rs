//! `pderank`: train, evaluate, synthesise and verify implicit-feedback
//! rankers.

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pderank::dataset::infer_bounds;
use pderank::verify::{self, VerifyOptions};
use pderank::{
    dataset_stats, evaluate, generate_synthetic, load_checkpoint, load_interactions,
    planted_test_split, save_checkpoint, split_holdout, train, write_interactions, Backbone,
    InteractionDataset, Optimiser, RiskKind, TrainConfig,
};

use config::{merge_config, sha256_file, Manifest};

#[derive(Parser, Debug)]
#[command(
    name = "pderank",
    version,
    about = "Density-estimation rankers for implicit feedback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write manifest, checkpoint, history and metrics.
    Train(TrainArgs),
    /// Score a checkpoint against a train/test split.
    Evaluate(EvaluateArgs),
    /// Write a synthetic dataset with planted ground truth.
    Synth(SynthArgs),
    /// Run the oracle property suite.
    Verify(VerifyArgs),
}

fn risk_parser() -> impl TypedValueParser<Value = RiskKind> {
    PossibleValuesParser::new(["pde", "wd", "pairwise-ans"]).map(|s| s.parse().unwrap())
}

fn backbone_parser() -> impl TypedValueParser<Value = Backbone> {
    PossibleValuesParser::new(["mf", "lgcn"]).map(|s| s.parse().unwrap())
}

fn optimiser_parser() -> impl TypedValueParser<Value = Optimiser> {
    PossibleValuesParser::new(["adam", "sgd"]).map(|s| s.parse().unwrap())
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    /// Directory containing train.txt and test.txt.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Read `key = value` defaults from this file; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "pde", value_parser = risk_parser())]
    risk: RiskKind,
    #[arg(long, default_value = "lgcn", value_parser = backbone_parser())]
    model: Backbone,
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Propagation layers (lgcn only).
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// L2 weight.
    #[arg(long, default_value_t = 0.05)]
    lambda: f64,
    /// Norm bound for layer-0 embeddings; `inf` disables clipping.
    #[arg(long, default_value_t = 5.0)]
    clip_bound: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value = "adam", value_parser = optimiser_parser())]
    optimiser: Optimiser,
    /// Users per mini-batch.
    #[arg(long, default_value_t = 2500)]
    batch_users: usize,
    #[arg(long, default_value_t = 3000)]
    max_iterations: usize,
    /// Evaluate every N iterations (0: only at the end).
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
    /// Ranking cutoff.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Negatives per positive for pairwise-ans.
    #[arg(long, default_value_t = 5)]
    ans_m: usize,
    #[arg(long, env = "PDERANK_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Evaluate during training on this fraction of train items per user
    /// instead of test.txt.
    #[arg(long)]
    holdout_fraction: Option<f64>,
    /// Write 0 instead of wall-clock seconds to history.csv.
    #[arg(long)]
    no_timing: bool,
    /// User id bound (default: largest id in the data + 1).
    #[arg(long)]
    n_users: Option<usize>,
    /// Item id bound (default: largest id in the data + 1).
    #[arg(long)]
    n_items: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory containing train.txt and test.txt.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Write metrics.json here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-user values to this CSV file.
    #[arg(long)]
    per_user: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n_users: usize,
    #[arg(long, default_value_t = 500)]
    n_items: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    positives_per_user: usize,
    /// Planted items per user in test.txt.
    #[arg(long, default_value_t = 20)]
    test_k: usize,
    #[arg(long, env = "PDERANK_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, env = "PDERANK_SEED", default_value_t = 0)]
    seed: u64,
    /// Random distributions per instance in the generator check.
    #[arg(long, default_value_t = 10_000)]
    generator_samples: usize,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

fn main() -> ExitCode {
    let mut raw: Vec<OsString> = std::env::args_os().collect();
    if raw.get(1).is_some_and(|a| a == "train") {
        if let Some(path) = config_path(&raw[2..]) {
            match merge_config(&raw, "train", &path) {
                Ok(merged) => raw = merged,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(2);
                }
            }
        }
    }
    let cli = Cli::parse_from(&raw);
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Value of the last `--config` flag, read before clap sees the arguments
/// because the file may supply required flags.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut found = None;
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let arg = arg.to_string_lossy();
        if arg == "--config" {
            found = iter.next().map(PathBuf::from);
        } else if let Some(v) = arg.strip_prefix("--config=") {
            found = Some(PathBuf::from(v));
        }
    }
    found
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?.install(f))
}

fn split_paths(data: &Path) -> (PathBuf, PathBuf) {
    (data.join("train.txt"), data.join("test.txt"))
}

fn load_split(
    data: &Path,
    n_users: usize,
    n_items: usize,
) -> Result<(InteractionDataset, InteractionDataset)> {
    let (train_path, test_path) = split_paths(data);
    let train = load_interactions(&train_path, n_users, n_items)
        .with_context(|| format!("loading {}", train_path.display()))?;
    let test = load_interactions(&test_path, n_users, n_items)
        .with_context(|| format!("loading {}", test_path.display()))?;
    Ok((train, test))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let cfg = TrainConfig {
        risk: args.risk,
        backbone: args.model,
        dim: args.dim,
        layers: args.layers,
        lambda: args.lambda,
        clip_bound: args.clip_bound,
        learning_rate: args.lr,
        batch_users: args.batch_users,
        max_iterations: args.max_iterations,
        eval_every: args.eval_every,
        eval_k: args.k,
        ans_m: args.ans_m,
        seed: args.seed,
        optimiser: args.optimiser,
        record_timing: !args.no_timing,
    };
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return Ok(ExitCode::from(2));
    }
    let (train_path, test_path) = split_paths(&args.data);
    let (n_users, n_items) = match (args.n_users, args.n_items) {
        (Some(u), Some(i)) => (u, i),
        (u, i) => {
            let (fu, fi) = infer_bounds(&[&train_path, &test_path])?;
            (u.unwrap_or(fu), i.unwrap_or(fi))
        }
    };
    let (full_train, test) = load_split(&args.data, n_users, n_items)?;
    let stats = dataset_stats(&full_train);
    eprintln!(
        "train: {} users, {} items, {} interactions (density {:.6})",
        stats.n_users, stats.n_items, stats.n_interactions, stats.density
    );

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut manifest = Manifest::default();
    manifest.set("data", args.data.display());
    manifest.set("risk", cfg.risk);
    manifest.set("model", cfg.backbone);
    manifest.set("dim", cfg.dim);
    manifest.set("layers", cfg.layers);
    manifest.set("lambda", cfg.lambda);
    manifest.set("clip-bound", cfg.clip_bound);
    manifest.set("lr", cfg.learning_rate);
    manifest.set("optimiser", cfg.optimiser);
    manifest.set("batch-users", cfg.batch_users);
    manifest.set("max-iterations", cfg.max_iterations);
    manifest.set("eval-every", cfg.eval_every);
    manifest.set("k", cfg.eval_k);
    manifest.set("ans-m", cfg.ans_m);
    manifest.set("seed", cfg.seed);
    if let Some(t) = args.threads {
        manifest.set("threads", t);
    }
    if let Some(f) = args.holdout_fraction {
        manifest.set("holdout-fraction", f);
    }
    manifest.set("no-timing", args.no_timing);
    manifest.set("n-users", n_users);
    manifest.set("n-items", n_items);
    manifest.set("meta.version", env!("CARGO_PKG_VERSION"));
    manifest.set("meta.train-sha256", sha256_file(&train_path)?);
    manifest.set("meta.test-sha256", sha256_file(&test_path)?);
    manifest.set("meta.out", args.out.display());
    write(&args.out.join("manifest.toml"), &manifest.render())?;

    let (fit_on, monitor) = match args.holdout_fraction {
        Some(f) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            let (t, h) = split_holdout(&full_train, f, &mut rng)?;
            (t, h)
        }
        None => (full_train.clone(), test.clone()),
    };

    let outcome = with_threads(args.threads, || train(&fit_on, Some(&monitor), &cfg))?;
    let (model, history) = match outcome {
        Ok(done) => done,
        Err(failure) => {
            write(&args.out.join("history.csv"), &failure.history.to_csv())?;
            eprintln!("error: training failed: {}", failure.error);
            if let Some(last) = failure.history.records.last() {
                eprintln!(
                    "last recorded iteration {} objective {}",
                    last.iteration, last.objective
                );
            }
            return Ok(ExitCode::FAILURE);
        }
    };
    save_checkpoint(&model, args.out.join("checkpoint.txt"))?;
    write(&args.out.join("history.csv"), &history.to_csv())?;
    let metrics = with_threads(args.threads, || {
        evaluate(&model, &full_train, &test, cfg.eval_k)
    })??;
    write(&args.out.join("metrics.json"), &(metrics.to_json() + "\n"))?;
    eprintln!(
        "recall@{k} {:.4}  ndcg@{k} {:.4}  ({} users)",
        metrics.recall,
        metrics.ndcg,
        metrics.n_evaluated,
        k = cfg.eval_k
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let mut model = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let (train, test) = load_split(&args.data, model.n_users(), model.n_items())?;
    if model.backbone() == Backbone::Lgcn {
        model.attach_graph(&train)?;
    }
    let metrics = with_threads(args.threads, || evaluate(&model, &train, &test, args.k))??;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write(&dir.join("metrics.json"), &(metrics.to_json() + "\n"))?;
        }
        None => println!("{}", metrics.to_json()),
    }
    if let Some(path) = &args.per_user {
        write(path, &metrics.per_user_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let (train, truth) = generate_synthetic(
        args.n_users,
        args.n_items,
        args.dim,
        args.positives_per_user,
        args.seed,
    )?;
    let test = planted_test_split(&train, &truth, args.test_k)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_interactions(&train, args.out.join("train.txt"))?;
    write_interactions(&test, args.out.join("test.txt"))?;
    write(&args.out.join("ground_truth.tsv"), &truth.to_tsv())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let report = verify::run(&VerifyOptions {
        trials: args.trials,
        seed: args.seed,
        generator_samples: args.generator_samples,
        corrupt_gradient: args.corrupt_gradient,
    })?;
    print!("{}", report.render());
    if report.all_passed() {
        println!("all properties passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("some properties FAILED");
        Ok(ExitCode::FAILURE)
    }
}
