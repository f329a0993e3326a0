//! Command-line surface for training, evaluation, baselines, and sweeps.
//!
//! Every report starts with `#`-prefixed lines echoing the resolved
//! configuration, followed by a CSV table. Output is byte-deterministic
//! for a given seed unless `--timing` swaps real wall-clock seconds into
//! the last column.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! format error, 3 numerical failure.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use tpn_core::bench::{
    eval_baseline, eval_with, semi_eval, sweep, BaselineKind, EvalReport, SweepParam, CSV_HEADER,
};
use tpn_core::episodes::{gen_synthetic, load_fsds, save_fsds, Dataset, Split, SyntheticKind};
use tpn_core::training::{gradcheck, train, Checkpoint, TrainConfig, TrainRecord};
use tpn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tpn", version, about = "Transductive label propagation for few-shot learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model episodically and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint over random test episodes.
    Eval(EvalArgs),
    /// Evaluate a non-learned baseline under the same episode stream.
    EvalBaseline(BaselineArgs),
    /// Semi-supervised evaluation with an unlabeled pool per episode.
    SemiEval(SemiArgs),
    /// Train/evaluate across a list of values for one hyperparameter.
    Sweep(SweepArgs),
    /// Compare autodiff gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset and write it as FSDS.
    GenData(GenDataArgs),
    /// Print a checkpoint's config, name-table, and shapes.
    InspectCheckpoint { checkpoint: PathBuf },
}

/// Training configuration, resolved as defaults, then the config file,
/// then individual flags.
#[derive(Args)]
struct ConfigArgs {
    /// Config file with one `key = value` per line (`#` comments allowed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Classes per episode.
    #[arg(long)]
    n_way: Option<usize>,
    /// Support examples per class at training time.
    #[arg(long)]
    k_train: Option<usize>,
    /// Support examples per class at evaluation time.
    #[arg(long)]
    k_test: Option<usize>,
    /// Query examples per class.
    #[arg(long)]
    query: Option<usize>,
    /// Neighbors kept per row of the episode graph.
    #[arg(long)]
    k_graph: Option<usize>,
    /// Propagation mixing coefficient in (0, 1).
    #[arg(long)]
    alpha: Option<f64>,
    /// Initial Adam learning rate.
    #[arg(long)]
    lr0: Option<f64>,
    /// Halve the learning rate every this many episodes.
    #[arg(long)]
    halve_every: Option<u64>,
    /// Total training episodes.
    #[arg(long)]
    max_episodes: Option<u64>,
    /// Checkpoint cadence in episodes.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Seed for all derived random streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Loss over `union` or `query_only` rows.
    #[arg(long)]
    loss_scope: Option<String>,
    /// Embedding spec: `mlp:<in>:<hidden>:<embed>` or `conv4:<channels>`.
    #[arg(long)]
    embedding: Option<String>,
}

impl ConfigArgs {
    fn resolve_from(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            cfg = TrainConfig::from_text(&text)?;
        }
        let scalar: [(&str, Option<String>); 11] = [
            ("n_way", self.n_way.map(|v| v.to_string())),
            ("k_train", self.k_train.map(|v| v.to_string())),
            ("k_test", self.k_test.map(|v| v.to_string())),
            ("k_graph", self.k_graph.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("lr0", self.lr0.map(|v| v.to_string())),
            ("halve_every", self.halve_every.map(|v| v.to_string())),
            ("max_episodes", self.max_episodes.map(|v| v.to_string())),
            ("checkpoint_every", self.checkpoint_every.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("loss_scope", self.loss_scope.clone()),
        ];
        for (key, value) in scalar {
            if let Some(v) = value {
                cfg.apply_kv(key, &v)?;
            }
        }
        if let Some(e) = &self.embedding {
            cfg.apply_kv("embedding", e)?;
        }
        if let Some(q) = self.query {
            cfg.apply_kv("t_query", &(q * cfg.n_way).to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&self) -> Result<TrainConfig> {
        self.resolve_from(TrainConfig::default())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// FSDS dataset to train on.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Append per-episode metrics (`episode,loss,lr,query_acc`) here.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Class split to train on: train, val, test, or all.
    #[arg(long, default_value = "train")]
    split: String,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// FSDS dataset to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Classes per episode [default: the checkpoint's n_way].
    #[arg(long)]
    n_way: Option<usize>,
    /// Support examples per class [default: the checkpoint's k_test].
    #[arg(long)]
    shot: Option<usize>,
    /// Query examples per class.
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the checkpoint's propagation alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the checkpoint's graph neighbor count.
    #[arg(long)]
    k_graph: Option<usize>,
    /// Class split to evaluate on: train, val, test, or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report real wall-clock seconds instead of 0.000.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct BaselineArgs {
    /// Baseline kind: fixed_sigma_lp or prototype.
    kind: String,
    /// Checkpoint whose embedding the baseline reuses; raw inputs if absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed length-scale; omit for the median pairwise distance heuristic.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k_graph: Option<usize>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SemiArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fraction of each class's examples in the labeled partition.
    #[arg(long, default_value_t = 0.4)]
    labeled_ratio: f64,
    /// Unlabeled pool examples per episode.
    #[arg(long, default_value_t = 0)]
    pool: usize,
    /// Classes outside the episode contributing pool examples.
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long, default_value_t = 15)]
    query: usize,
    /// Episodes per labeled/unlabeled split.
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Parameter to sweep: query, alpha, k_graph, or train_shot.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Evaluation episodes per value.
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    /// Seed for the evaluation episode stream.
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct GenDataArgs {
    /// gaussian-blobs, concentric-rings, or noisy-arcs.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output FSDS path; a `.split` manifest lands beside it.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::EvalBaseline(args) => cmd_baseline(args),
        Cmd::SemiEval(args) => cmd_semi(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::InspectCheckpoint { checkpoint } => cmd_inspect(&checkpoint),
    }
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    if s == "all" {
        return Ok(None);
    }
    s.parse::<Split>().map(Some)
}

fn load_restricted(path: &Path, split: &str) -> Result<Dataset> {
    let ds = load_fsds(path)?;
    Ok(ds.restricted(parse_split(split)?))
}

fn echo_config(cfg: &TrainConfig) {
    for line in cfg.canonical_text().lines() {
        println!("# {line}");
    }
}

fn echo_kv(key: &str, value: impl std::fmt::Display) {
    println!("# {key} = {value}");
}

fn print_report(report: &EvalReport, timing: bool) {
    for note in &report.notes {
        println!("# note: {note}");
    }
    if let Some(se) = report.split_stderr {
        println!("# split_stderr = {se:.6}");
    }
    println!("{CSV_HEADER}");
    println!("{}", report.csv_row(timing));
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let ds = load_restricted(&args.data, &args.split)?;
    let cfg = args.cfg.resolve()?;
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;

    echo_kv("data", args.data.display());
    echo_kv("split", &args.split);
    echo_config(&cfg);

    let mut metrics = match &args.metrics {
        Some(path) => {
            let exists = args.resume.is_some() && path.exists();
            let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
            if !exists {
                writeln!(file, "episode,loss,lr,query_acc")?;
            }
            Some(std::io::BufWriter::new(file))
        }
        None => None,
    };
    let mut sink_err: Option<std::io::Error> = None;
    let progress_every = cfg.checkpoint_every.max(1);

    let ck = {
        let mut sink = |r: &TrainRecord| {
            if let Some(w) = metrics.as_mut() {
                if sink_err.is_none() {
                    if let Err(e) = writeln!(w, "{},{},{},{}", r.episode, r.loss, r.lr, r.query_acc)
                    {
                        sink_err = Some(e);
                    }
                }
            }
            if (r.episode + 1).is_multiple_of(progress_every) {
                println!(
                    "# episode {} loss {:.6} lr {} acc {:.4}",
                    r.episode, r.loss, r.lr, r.query_acc
                );
            }
        };
        train(&ds, &cfg, resume, Some(&args.out), &mut sink)?
    };
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    if let Some(e) = sink_err {
        return Err(Error::Io(e));
    }
    println!("# wrote {} after {} episodes", args.out.display(), ck.episodes_seen);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = ck.config()?;
    let ds = load_restricted(&args.data, &args.split)?;
    let n_way = args.n_way.unwrap_or(cfg.n_way);
    let shot = args.shot.unwrap_or(cfg.k_test);
    let alpha = args.alpha.unwrap_or(cfg.alpha);
    let k_graph = args.k_graph.unwrap_or(cfg.k_graph);

    echo_kv("data", args.data.display());
    echo_kv("checkpoint", args.checkpoint.display());
    echo_kv("split", &args.split);
    echo_kv("episodes", args.episodes);
    echo_kv("eval_seed", args.seed);
    echo_kv("eval_alpha", alpha);
    echo_kv("eval_k_graph", k_graph);
    echo_config(&cfg);

    let report = eval_with(
        &ck,
        &ds,
        n_way,
        shot,
        args.query * n_way,
        args.episodes,
        args.seed,
        alpha,
        k_graph,
        "tpn",
    )?;
    print_report(&report, args.timing);
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let kind: BaselineKind = args.kind.parse()?;
    let ck = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = ck.as_ref().map(|c| c.config()).transpose()?;
    let ds = load_restricted(&args.data, &args.split)?;
    let n_way = args.n_way.or(cfg.as_ref().map(|c| c.n_way)).unwrap_or(5);
    let shot = args.shot.or(cfg.as_ref().map(|c| c.k_test)).unwrap_or(1);
    let alpha = args.alpha.or(cfg.as_ref().map(|c| c.alpha)).unwrap_or(0.99);
    let k_graph = args.k_graph.or(cfg.as_ref().map(|c| c.k_graph)).unwrap_or(20);

    echo_kv("data", args.data.display());
    echo_kv("baseline", kind.as_str());
    match &args.checkpoint {
        Some(p) => echo_kv("checkpoint", p.display()),
        None => echo_kv("features", "raw input space"),
    }
    echo_kv("split", &args.split);
    echo_kv("episodes", args.episodes);
    echo_kv("eval_seed", args.seed);
    if kind == BaselineKind::FixedSigmaLp {
        echo_kv("eval_alpha", alpha);
        echo_kv("eval_k_graph", k_graph);
    }
    if let Some(cfg) = &cfg {
        echo_config(cfg);
    }

    let report = eval_baseline(
        kind,
        ck.as_ref(),
        &ds,
        n_way,
        shot,
        args.query * n_way,
        args.episodes,
        args.seed,
        alpha,
        k_graph,
        args.sigma,
    )?;
    print_report(&report, args.timing);
    Ok(())
}

fn cmd_semi(args: SemiArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = ck.config()?;
    let ds = load_restricted(&args.data, &args.split)?;
    let n_way = args.n_way.unwrap_or(cfg.n_way);
    let shot = args.shot.unwrap_or(cfg.k_test);

    echo_kv("data", args.data.display());
    echo_kv("checkpoint", args.checkpoint.display());
    echo_kv("split", &args.split);
    echo_kv("labeled_ratio", args.labeled_ratio);
    echo_kv("pool", args.pool);
    echo_kv("distractors", args.distractors);
    echo_kv("episodes_per_split", args.episodes);
    echo_kv("eval_seed", args.seed);
    echo_config(&cfg);

    let report = semi_eval(
        &ck,
        &ds,
        args.labeled_ratio,
        args.pool,
        args.distractors,
        n_way,
        shot,
        args.query * n_way,
        args.episodes,
        args.seed,
    )?;
    print_report(&report, args.timing);
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let param: SweepParam = args.param.parse()?;
    let ds = load_fsds(&args.data)?;
    let base = args.cfg.resolve()?;

    echo_kv("data", args.data.display());
    echo_kv("sweep_param", param.as_str());
    echo_kv("episodes", args.episodes);
    echo_kv("eval_seed", args.eval_seed);
    echo_config(&base);

    let rows = sweep(&ds, &base, param, &args.values, args.episodes, args.eval_seed)?;
    println!("param,value,{CSV_HEADER}");
    for row in &rows {
        println!("{},{},{}", row.param, row.value, row.report.csv_row(args.timing));
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let tiny = TrainConfig {
        n_way: 2,
        k_train: 1,
        k_test: 1,
        t_query: 2,
        variant: tpn_core::networks::EmbeddingVariant::Mlp {
            input_dim: 2,
            hidden_dim: 8,
            embed_dim: 4,
        },
        ..TrainConfig::default()
    };
    let cfg = args.cfg.resolve_from(tiny)?;
    echo_config(&cfg);
    let report = gradcheck(&cfg)?;
    println!("group,entries,max_rel,max_abs,status");
    for g in &report.groups {
        let status = match (g.ok, g.all_zero) {
            (true, true) => "ok (all zero)",
            (true, false) => "ok",
            (false, _) => "FAIL",
        };
        println!("{},{},{:.3e},{:.3e},{}", g.name, g.count, g.max_rel, g.max_abs, status);
    }
    println!("# episode graph nodes = {}", report.episode_nodes);
    if report.passed() {
        println!("# gradcheck PASS");
        Ok(())
    } else {
        Err(Error::Numerical(
            "gradcheck failed: autodiff and finite differences disagree".to_string(),
        ))
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let kind: SyntheticKind = args.kind.parse()?;
    let ds = gen_synthetic(kind, args.classes, args.per_class, args.dim, args.noise, args.seed)?;
    save_fsds(&ds, &args.out)?;
    println!(
        "# wrote {} classes x {} examples ({}-d {}) to {}",
        args.classes,
        args.per_class,
        args.dim,
        kind.as_str(),
        args.out.display()
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    echo_kv("checkpoint", path.display());
    echo_kv("episodes_seen", ck.episodes_seen);
    echo_kv("adam_step", ck.adam.step);
    for line in ck.config_text.lines() {
        println!("# {line}");
    }
    println!("name,shape,count");
    let named = ck.params.named();
    for (name, t) in &named {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        println!("{},{},{}", name, dims.join("x"), t.numel());
    }
    println!("# total parameters = {}", ck.params.param_count());
    Ok(())
}
