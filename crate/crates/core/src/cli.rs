//! Command-line interface: argument definitions and command runners.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, TrainConfig};
use crate::corpus::{preprocess, write_file, Corpus, RawCorpus, Split};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, svd_export, MetricsReport};
use crate::graphs::Graphs;
use crate::synth::SynthSpec;
use crate::trainer::{History, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mclsr", version, about = "Multi-level contrastive sequential recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, index and split a dataset; write vocabularies and statistics.
    Prep(PrepArgs),
    /// Train a model and evaluate the best checkpoint on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train the full model and the four ablations with a shared seed.
    Ablate(TrainArgs),
    /// Generate a chain-based synthetic dataset.
    Synth(SynthArgs),
    /// Export learned embeddings and a 2-D projection of item embeddings.
    ExportEmb(ExportArgs),
}

#[derive(Debug, Args)]
pub struct RunDir {
    /// Output directory; created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Training options. Each flag overrides the matching config-file key.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Config file with one `key = value` per line; must list every key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub topk_neighbors: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// One of full, no-graph, no-cl, no-feature-cl, no-interest-cl.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub keep_diagonal: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub attend_positioned: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub allow_repeats: Option<bool>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        fn put<T: ToString>(out: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
            if let Some(v) = v {
                out.push((key.to_string(), v.to_string()));
            }
        }
        let mut out = Vec::new();
        put(&mut out, "lr", &self.lr);
        put(&mut out, "batch", &self.batch);
        put(&mut out, "dim", &self.dim);
        put(&mut out, "layers", &self.layers);
        put(&mut out, "tau", &self.tau);
        put(&mut out, "alpha", &self.alpha);
        put(&mut out, "beta", &self.beta);
        put(&mut out, "gamma", &self.gamma);
        put(&mut out, "negatives", &self.negatives);
        put(&mut out, "topk-neighbors", &self.topk_neighbors);
        put(&mut out, "max-epochs", &self.max_epochs);
        put(&mut out, "patience", &self.patience);
        put(&mut out, "seed", &self.seed);
        put(&mut out, "ablation", &self.ablation);
        put(&mut out, "min-count", &self.min_count);
        put(&mut out, "keep-diagonal", &self.keep_diagonal);
        put(&mut out, "attend-positioned", &self.attend_positioned);
        put(&mut out, "allow-repeats", &self.allow_repeats);
        out
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        let overrides = self.overrides();
        match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                TrainConfig::from_file_text(&text, &overrides)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            }
            None => TrainConfig::from_overrides(&overrides),
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Dataset file: `user<TAB>item,item,...` per line, items in time order.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub run: RunDir,
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the three graph views as edge lists.
    #[arg(long)]
    pub dump_graphs: bool,
    #[arg(long, default_value_t = 50)]
    pub topk_neighbors: usize,
    #[arg(long)]
    pub keep_diagonal: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub run: RunDir,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub dump_graphs: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: RunDir,
    /// Split to evaluate: val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Use the last-epoch parameters rather than the best-validation ones.
    #[arg(long)]
    pub last: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub run: RunDir,
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    #[arg(long, default_value_t = 500)]
    pub items: usize,
    #[arg(long, default_value_t = 25)]
    pub pattern_count: usize,
    #[arg(long, default_value_t = 20)]
    pub pattern_len: usize,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: RunDir,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: String,
    seed: u64,
    config: Option<&'a TrainConfig>,
    inputs: Vec<InputDigest>,
    args: Vec<String>,
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

/// Package version, with `git describe` output appended when the source
/// tree is a git checkout.
pub fn version_string() -> String {
    let pkg = env!("CARGO_PKG_VERSION");
    let described = Process::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("{pkg}+{d}"),
        None => pkg.to_string(),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn prepare_dir(run: &RunDir) -> Result<()> {
    let dir = &run.out;
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
            .next()
            .is_some();
        if non_empty && !run.force {
            return Err(Error::Precondition(format!(
                "output directory {} exists and is not empty (use --force to reuse it)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config: Option<&TrainConfig>,
    inputs: &[&Path],
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command,
        version: version_string(),
        seed,
        config,
        inputs,
        args: std::env::args().collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("run.json"), json.as_bytes())
}

fn load_corpus(input: &Path, min_count: usize, seed: u64) -> Result<Corpus> {
    preprocess(&RawCorpus::load(input)?, min_count, seed)
}

/// Table of dataset statistics with the usual column names.
pub fn stats_table(corpus: &Corpus) -> String {
    let s = corpus.stats();
    format!(
        "# user\t# item\t# interactions\tAvg. len.\tSparsity\n{}\t{}\t{}\t{:.2}\t{:.2}%\n",
        s.users,
        s.items,
        s.interactions,
        s.avg_len,
        s.sparsity * 100.0
    )
}

pub fn run_prep(args: &PrepArgs) -> Result<()> {
    prepare_dir(&args.run)?;
    let dir = &args.run.out;
    let corpus = load_corpus(&args.input, args.min_count, args.seed)?;
    corpus.write_dataset(&dir.join("corpus.tsv"))?;
    corpus.write_vocab_and_splits(dir)?;
    let table = stats_table(&corpus);
    write_file(&dir.join("stats.tsv"), table.as_bytes())?;
    print!("{table}");
    if args.dump_graphs {
        let opts = crate::graphs::GraphOptions {
            topk_neighbors: args.topk_neighbors,
            keep_diagonal: args.keep_diagonal,
        };
        Graphs::build(&corpus, opts)?.dump(&corpus, &dir.join("graphs"))?;
    }
    let config = TrainConfig {
        min_count: args.min_count,
        seed: args.seed,
        topk_neighbors: args.topk_neighbors,
        keep_diagonal: args.keep_diagonal,
        ..TrainConfig::default()
    };
    write_manifest(dir, "prep", args.seed, Some(&config), &[&args.input])
}

/// Result of one training run, as reported by `train` and `ablate`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub history: History,
    pub test: MetricsReport,
}

fn train_into(
    corpus: &Corpus,
    config: TrainConfig,
    dir: &Path,
    resume: Option<&Path>,
    dump_graphs: bool,
) -> Result<RunSummary> {
    write_file(&dir.join("config.txt"), config.to_file_text().as_bytes())?;
    let trainer = Trainer::new(corpus, config.clone())?;
    if dump_graphs {
        trainer.graphs().dump(corpus, &dir.join("graphs"))?;
    }
    let state = match resume {
        Some(path) => {
            let mut ck = Checkpoint::load_for(path, &config, corpus.num_users(), corpus.num_items())?;
            ck.config = config.clone();
            ck
        }
        None => trainer.initial_state(),
    };
    let last_path = dir.join("last.ckpt");
    let mut history = History::default();
    let outcome = trainer.run(state, |state, record| {
        eprintln!(
            "epoch {:>3}  loss_p {:.4}  loss_il {:.4}  loss_fl {:.4}  val_recall@50 {:.4}",
            record.epoch, record.loss_p, record.loss_il, record.loss_fl, record.val_recall50
        );
        history.records.push(*record);
        write_file(&dir.join("history.csv"), history.to_csv().as_bytes())?;
        state.save(&last_path)
    })?;
    write_file(&dir.join("history.csv"), outcome.history.to_csv().as_bytes())?;

    let best = Checkpoint {
        params: outcome.best_params.clone(),
        best_params: None,
        ..outcome.last.clone()
    };
    best.save(&dir.join("best.ckpt"))?;

    let (cases, skipped) = corpus.make_eval_cases(Split::Test);
    let test = evaluate(&outcome.best_params, &cases, skipped, &trainer.eval_options())?;
    write_file(&dir.join("metrics.csv"), test.to_csv().as_bytes())?;
    Ok(RunSummary {
        config,
        history: outcome.history,
        test,
    })
}

pub fn run_train(args: &TrainArgs) -> Result<RunSummary> {
    let config = args.config.resolve()?;
    prepare_dir(&args.run)?;
    let dir = &args.run.out;
    let corpus = load_corpus(&args.input, config.min_count, config.seed)?;
    let mut inputs: Vec<&Path> = vec![&args.input];
    if let Some(r) = &args.resume {
        inputs.push(r);
    }
    write_manifest(dir, "train", config.seed, Some(&config), &inputs)?;
    let summary = train_into(&corpus, config, dir, args.resume.as_deref(), args.dump_graphs)?;
    print!("{}", summary.test.to_csv());
    Ok(summary)
}

/// Comparison table for ablation runs, one row per variant.
pub fn comparison_table(runs: &[RunSummary]) -> String {
    let mut out = String::from(
        "variant,seed,epochs,final_loss_p,final_loss_il,final_loss_fl,recall@20,recall@50,ndcg@20,ndcg@50\n",
    );
    for r in runs {
        let last = r.history.records.last();
        let f = |g: fn(&crate::trainer::EpochRecord) -> f64| last.map_or(f64::NAN, g);
        let m = |n: usize| r.test.at(n).map_or((f64::NAN, f64::NAN), |v| (v.recall, v.ndcg));
        let (r20, n20) = m(20);
        let (r50, n50) = m(50);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.config.ablation,
            r.config.seed,
            r.history.records.len(),
            f(|e| e.loss_p),
            f(|e| e.loss_il),
            f(|e| e.loss_fl),
            r20,
            r50,
            n20,
            n50
        );
    }
    out
}

pub fn run_ablate(args: &TrainArgs) -> Result<Vec<RunSummary>> {
    let base = args.config.resolve()?;
    prepare_dir(&args.run)?;
    let dir = &args.run.out;
    write_manifest(dir, "ablate", base.seed, Some(&base), &[&args.input])?;
    let corpus = load_corpus(&args.input, base.min_count, base.seed)?;
    let mut runs = Vec::new();
    for ablation in Ablation::ALL {
        eprintln!("== {ablation}");
        let sub = dir.join(ablation.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(format!("creating {}", sub.display()), e))?;
        let config = TrainConfig {
            ablation,
            ..base.clone()
        };
        runs.push(train_into(&corpus, config, &sub, None, args.dump_graphs)?);
    }
    let table = comparison_table(&runs);
    write_file(&dir.join("comparison.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(runs)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("split must be val or test, got `{other}`"))),
    }
}

pub fn run_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let split = parse_split(&args.split)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    prepare_dir(&args.run)?;
    let dir = &args.run.out;
    let cfg = &ck.config;
    write_manifest(dir, "eval", cfg.seed, Some(cfg), &[&args.input, &args.checkpoint])?;
    let corpus = load_corpus(&args.input, cfg.min_count, cfg.seed)?;
    ck.check_compatible(cfg, corpus.num_users(), corpus.num_items())?;
    let params = match (&ck.best_params, args.last) {
        (Some(best), false) => best,
        _ => &ck.params,
    };
    let (cases, skipped) = corpus.make_eval_cases(split);
    let opts = crate::evaluator::EvalOptions {
        allow_repeats: cfg.allow_repeats,
        forward: crate::model::ForwardOptions {
            attend_positioned: cfg.attend_positioned,
        },
        ..Default::default()
    };
    let report = evaluate(params, &cases, skipped, &opts)?;
    write_file(&dir.join("metrics.csv"), report.to_csv().as_bytes())?;
    print!("{}", report.to_csv());
    Ok(report)
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        users: args.users,
        items: args.items,
        pattern_count: args.pattern_count,
        pattern_len: args.pattern_len,
        noise: args.noise,
        seed: args.seed,
    };
    spec.validate()?;
    prepare_dir(&args.run)?;
    let path = args.run.out.join("dataset.tsv");
    spec.write(&path)?;
    write_manifest(&args.run.out, "synth", args.seed, None, &[])?;
    println!("{}", path.display());
    Ok(())
}

pub fn run_export(args: &ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    prepare_dir(&args.run)?;
    let dir = &args.run.out;
    let cfg = &ck.config;
    write_manifest(dir, "export-emb", cfg.seed, Some(cfg), &[&args.input, &args.checkpoint])?;
    let corpus = load_corpus(&args.input, cfg.min_count, cfg.seed)?;
    ck.check_compatible(cfg, corpus.num_users(), corpus.num_items())?;
    let params = ck.best_params.as_ref().unwrap_or(&ck.params);
    let rows = |ids: &[String], m: &ndarray::Array2<f64>| {
        let mut out = String::new();
        for (id, row) in ids.iter().zip(m.rows()) {
            out.push_str(id);
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    };
    write_file(&dir.join("item_embeddings.tsv"), rows(corpus.items.ids(), &params.item_emb).as_bytes())?;
    write_file(&dir.join("user_embeddings.tsv"), rows(corpus.users.ids(), &params.user_emb).as_bytes())?;
    let proj = svd_export(params.item_emb.view(), &corpus.items, &dir.join("item_svd.tsv"))?;
    for w in &proj.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prep(a) => run_prep(a),
        Command::Train(a) => run_train(a).map(drop),
        Command::Eval(a) => run_eval(a).map(drop),
        Command::Ablate(a) => run_ablate(a).map(drop),
        Command::Synth(a) => run_synth(a),
        Command::ExportEmb(a) => run_export(a),
    }
}
