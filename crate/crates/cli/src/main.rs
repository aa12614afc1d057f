//! `metricgen` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use metricgen::config::{RunConfig, StrategyKind};
use metricgen::dataset::{generate_synthetic, SyntheticSpec};
use metricgen::equivalence::{equivalent, score_vector, EquivalenceConfig, ProbeSet};
use metricgen::error::{ConfigError, DataError, GraphError, TrainError};
use metricgen::evolution::{final_evaluation, random_search, run_search_with, GenerationSnapshot};
use metricgen::report::render_compare;
use metricgen::{parse_expr, print_expr, rng, rundir, Error};

const OUTPUT_ROOT_ENV: &str = "METRICGEN_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "metricgen", version, about = "Evolutionary search for recommender similarity metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a metric search and write a run directory.
    Search(SearchArgs),
    /// Fully train one metric and print validation and test Recall/NDCG.
    Eval(EvalArgs),
    /// Write a synthetic dataset with a planted metric.
    Synth(SynthArgs),
    /// Summarize a finished run, or compare two.
    Report(ReportArgs),
    /// Check whether two metrics are equivalent on random probes.
    MecCheck(MecArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.txt and test.txt (and optionally valid.txt).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override a config key, e.g. `--set population=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(dir) = &self.data {
            cfg.train_path = Some(dir.join("train.txt"));
            cfg.test_path = Some(dir.join("test.txt"));
            let valid = dir.join("valid.txt");
            cfg.valid_path = valid.exists().then_some(valid);
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// es, full, sur or random.
    #[arg(long)]
    strategy: Option<String>,
    /// Candidate budget for random search.
    #[arg(long)]
    budget: Option<usize>,
    /// Run directory (default: <output root>/<strategy>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Metric expression, e.g. `dot(u,v)`.
    #[arg(long, conflicts_with = "metric_file", required_unless_present = "metric_file")]
    metric: Option<String>,
    /// File holding a metric expression (such as a run's best.sm).
    #[arg(long)]
    metric_file: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    /// Positives per user.
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Planted embedding dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value = "dot(u,v)")]
    metric: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory.
    #[arg(required_unless_present = "compare")]
    dir: Option<PathBuf>,
    /// Compare two run directories.
    #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with = "dir")]
    compare: Option<Vec<PathBuf>>,
    /// Print the structured summary instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct MecArgs {
    a: String,
    b: String,
    #[command(flatten)]
    config: ConfigArgs,
}

fn output_root(cfg: &RunConfig) -> PathBuf {
    cfg.output_root
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn progress(snap: &GenerationSnapshot) {
    let best = snap.population.first().map(|r| r.expression()).unwrap_or_default();
    eprintln!(
        "generation {:>3}  best {:.4}  evaluations {}  epochs {}  {}",
        snap.generation, snap.best_fitness, snap.evaluations, snap.epochs, best
    );
}

fn cmd_search(args: SearchArgs) -> anyhow::Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &args.strategy {
        cfg.strategy =
            StrategyKind::from_name(s).ok_or_else(|| ConfigError::new(format!("unknown strategy {s:?} (es, full, sur, random)")))?;
    }
    if let Some(b) = args.budget {
        cfg.random_budget = b;
    }
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let settings = cfg.settings();
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| output_root(&cfg).join(format!("{}-seed{}", cfg.strategy.name(), cfg.seed)));
    let quiet = args.quiet;
    let result = if cfg.strategy == StrategyKind::Random {
        random_search(&ds, cfg.random_budget(), &settings)?
    } else {
        run_search_with(&ds, &settings, |snap| {
            if !quiet {
                progress(snap)
            }
        })?
    };
    let summary = rundir::write_run(&dir, &cfg, &result)?;
    if !quiet {
        print!("{}", summary.render());
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn read_metric(args: &EvalArgs) -> anyhow::Result<String> {
    match (&args.metric, &args.metric_file) {
        (Some(m), _) => Ok(m.clone()),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.clone(), source })?;
            Ok(text.trim().to_string())
        }
        (None, None) => Err(anyhow!(ConfigError::new("give --metric or --metric-file"))),
    }
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let text = read_metric(&args)?;
    let graph = parse_expr(&text)?;
    let cfg = args.config.resolve()?;
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let train = cfg.train();
    let fe = final_evaluation(&graph, &ds, &train).ok_or_else(|| anyhow!("training of {} was degenerate", print_expr(&graph)))?;
    println!("metric\t{}", print_expr(&graph));
    println!("valid_recall@{}\t{:.6}", fe.valid.k, fe.valid.recall);
    println!("valid_ndcg@{}\t{:.6}", fe.valid.k, fe.valid.ndcg);
    println!("test_recall@{}\t{:.6}", fe.test.k, fe.test.recall);
    println!("test_ndcg@{}\t{:.6}", fe.test.k, fe.test.ndcg);
    println!("epochs\t{}\tbest_epoch\t{}", fe.epochs, fe.best_epoch);
    println!("final\t{}", fe.fitness);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        n_users: args.users,
        n_items: args.items,
        dim: args.dim,
        metric: parse_expr(&args.metric)?,
        per_user: args.m,
        noise: args.noise,
        seed: args.seed,
    };
    let (ds, truth) = generate_synthetic(&spec)?;
    ds.save(&args.out)?;
    truth.write_sidecar(&spec, &args.out.join("planted.txt"))?;
    println!(
        "wrote {} users, {} items to {}",
        ds.n_users(),
        ds.n_items(),
        args.out.display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    if let Some(dirs) = &args.compare {
        let a = rundir::load_summary(&dirs[0])?;
        let b = rundir::load_summary(&dirs[1])?;
        print!("{}", render_compare(&a, &b));
        return Ok(());
    }
    let dir = args.dir.as_deref().expect("clap requires a directory");
    let summary = rundir::load_summary(dir)?;
    if args.json {
        println!("{}", read_summary_json(dir)?);
    } else {
        print!("{}", summary.render());
    }
    Ok(())
}

fn read_summary_json(dir: &Path) -> anyhow::Result<String> {
    let path = dir.join(rundir::SUMMARY_FILE);
    std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_mec(args: MecArgs) -> anyhow::Result<()> {
    let a = parse_expr(&args.a)?;
    let b = parse_expr(&args.b)?;
    let cfg = args.config.resolve()?;
    let eq = EquivalenceConfig {
        delta: cfg.mec_delta,
        probes: cfg.mec_probes,
        probe_dim: cfg.mec_probe_dim,
        max_rounds: cfg.mec_max_rounds,
    };
    eq.validate()?;
    let probes = ProbeSet::generate(eq.probes, eq.probe_dim, rng::derive_seed(cfg.seed, &[4]));
    let same = equivalent(&a, &b, &probes, &eq);
    let (sa, sb) = (score_vector(&a, &probes), score_vector(&b, &probes));
    let gap = sa
        .scores
        .iter()
        .zip(&sb.scores)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    println!("{}", if same { "equivalent" } else { "not equivalent" });
    println!("max |score difference| over {} probes: {gap:e}", probes.len());
    Ok(())
}

/// The error and any causes whose text it does not already include.
fn describe(err: &anyhow::Error) -> String {
    let mut text = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

/// 1 for usage, config and graph errors, 2 for data errors, 3 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return match e {
            Error::Config(_) | Error::Graph(_) => 1,
            Error::Data(_) | Error::Train(TrainError::Data(_)) => 2,
            Error::Train(TrainError::Config(_)) => 1,
            _ => 3,
        };
    }
    if err.downcast_ref::<ConfigError>().is_some() || err.downcast_ref::<GraphError>().is_some() {
        return 1;
    }
    if err.downcast_ref::<DataError>().is_some() {
        return 2;
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Search(a) => cmd_search(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Report(a) => cmd_report(a),
        Command::MecCheck(a) => cmd_mec(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
