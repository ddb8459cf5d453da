use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

use stmom::attribution::{
    permutation_importance, rank_importance, slp_linear_attribution, write_ranked_csv, DEFAULT_PERMUTATIONS, DEFAULT_TOP,
};
use stmom::checkpoint::Checkpoint;
use stmom::features::{assemble_tensor, ex_ante_volatility};
use stmom::market_data::ValueKind;
use stmom::pipeline::{self, load_panel, parse_strategies, usable_dates, Leaf, RunConfig};
use stmom::report::{load_report, render_text, write_run, write_training_log_csv};
use stmom::Execution;

const OUTPUT_ENV: &str = "STMOM_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "stmom-output";

#[derive(Parser)]
#[command(name = "stmom", version, about = "Spatio-temporal momentum strategies and backtests")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a price or return CSV, clean it and write the returns panel.
    Ingest(IngestArgs),
    /// Run strategies over expanding windows and write report tables.
    Backtest(BacktestArgs),
    /// Train one model on a panel and save a checkpoint.
    Train(TrainArgs),
    /// Rank input features of a trained model.
    Attribution(AttributionArgs),
    /// Print the tables of a finished run.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV, long (date,asset,value) or wide (date,<asset>...).
    #[arg(long)]
    data: Option<PathBuf>,
    /// What the input values are: price or return.
    #[arg(long)]
    format: Option<ValueKind>,
    #[arg(long)]
    start: Option<NaiveDate>,
    #[arg(long)]
    end: Option<NaiveDate>,
    #[arg(long, value_enum)]
    winsorize: Option<Switch>,
}

#[derive(Args)]
struct IngestArgs {
    /// Input CSV.
    input: PathBuf,
    #[arg(long, default_value = "price")]
    format: ValueKind,
    #[arg(long, value_enum, default_value = "on")]
    winsorize: Switch,
    #[arg(long)]
    start: Option<NaiveDate>,
    #[arg(long)]
    end: Option<NaiveDate>,
    /// Where to write the returns panel (wide CSV).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Random-search iterations per window.
    #[arg(long)]
    iterations: Option<usize>,
    /// Maximum training epochs per candidate.
    #[arg(long)]
    epochs: Option<usize>,
    /// Lookback override for every model.
    #[arg(long)]
    tau: Option<usize>,
}

#[derive(Args)]
struct BacktestArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated strategies, e.g. long_only,tsmom,slp,slp_reg,slp+tsmom.
    #[arg(long)]
    strategies: Option<String>,
    /// Comma-separated master seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated transaction costs in basis points.
    #[arg(long, value_delimiter = ',')]
    costs: Option<Vec<f64>>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Model to train: slp, mlp, cnn, lstm, dmn, optionally with `_reg`.
    #[arg(long, default_value = "slp")]
    model: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Checkpoint path.
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the training log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Linear,
    Permutation,
}

#[derive(Args)]
struct AttributionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "linear")]
    method: Method,
    /// Rank features for this asset's signal.
    #[arg(long, conflicts_with = "global")]
    asset: Option<String>,
    /// Rank by attribution summed over all signals.
    #[arg(long)]
    global: bool,
    #[arg(long, default_value_t = DEFAULT_TOP)]
    top: usize,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV destination; standard output when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory, or its report.json.
    run: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
}

/// Wraps a failure that should exit with a usage/input status.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| c.downcast_ref::<stmom::Error>().is_some_and(|e| e.is_numerical()));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(UsageError("--threads must be at least 1".into()));
        }
        stmom::exec::init_thread_pool(n)?;
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Backtest(a) => backtest(a, exec),
        Command::Train(a) => train(a, exec),
        Command::Attribution(a) => attribution(a, exec),
        Command::Report(a) => report(a),
    }
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let data = pipeline::DataConfig {
        path: Some(a.input.clone()),
        format: a.format,
        start: a.start,
        end: a.end,
        winsorize: a.winsorize == Switch::On,
        ..Default::default()
    };
    let panel = load_panel(&data).with_context(|| format!("ingesting {}", a.input.display()))?;
    let d = panel.dates();
    println!("assets: {}", panel.n_assets());
    println!("dates: {} ({} to {})", panel.n_dates(), d[0], d[d.len() - 1]);
    println!("missing observations:");
    for (asset, missing) in panel.missing_report() {
        println!("  {asset}: {missing}");
    }
    if let Some(out) = a.output {
        panel.save_csv(&out)?;
        println!("returns panel written to {}", out.display());
    }
    Ok(())
}

/// Config file, then CLI flags on top.
fn resolve_config(a: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    apply_data_args(&mut cfg.data, &a.data);
    if let Some(n) = a.iterations {
        cfg.training.iterations = n;
    }
    if let Some(n) = a.epochs {
        cfg.training.base.epochs = n;
    }
    if a.tau.is_some() {
        cfg.tau = a.tau;
    }
    Ok(cfg)
}

fn apply_data_args(data: &mut pipeline::DataConfig, a: &DataArgs) {
    if let Some(p) = &a.data {
        data.path = Some(p.clone());
    }
    if let Some(f) = a.format {
        data.format = f;
    }
    if a.start.is_some() {
        data.start = a.start;
    }
    if a.end.is_some() {
        data.end = a.end;
    }
    if let Some(w) = a.winsorize {
        data.winsorize = w == Switch::On;
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn backtest(a: BacktestArgs, exec: Execution) -> anyhow::Result<()> {
    let mut cfg = resolve_config(&a.run)?;
    if let Some(s) = &a.strategies {
        cfg.strategies = parse_strategies(s)?;
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(c) = a.costs {
        cfg.costs = c;
    }
    let dir = output_dir(a.output_dir, &cfg);
    cfg.output_dir = Some(dir.clone());
    let out = pipeline::run(&cfg, exec)?;
    let files = write_run(&out, &dir)?;
    println!(
        "{} strategies over {} assets, evaluated from {}; {} files written to {}",
        out.strategies.len(),
        out.panel.n_assets,
        out.evaluation_start_date,
        files.len(),
        dir.display()
    );
    Ok(())
}

fn train(a: TrainArgs, exec: Execution) -> anyhow::Result<()> {
    let cfg = resolve_config(&a.run)?;
    let (kind, regularized) = match a.model.parse::<Leaf>()? {
        Leaf::Model { kind, regularized } => (kind, regularized),
        Leaf::Classical(_) => bail!(UsageError(format!("'{}' is not a trainable model", a.model))),
    };
    let panel = load_panel(&cfg.data)?;
    let trained = pipeline::train_on_panel(&cfg, &panel, kind, regularized, a.seed, exec)?;
    let best = trained.outcome.best_result();
    let ck = Checkpoint::from_network(&trained.outcome.network, a.seed, panel.assets().to_vec(), cfg.features.clone())?;
    ck.save(&a.output)?;
    if let Some(p) = &a.log {
        let rows: Vec<_> = trained.outcome.log.iter().cloned().map(|r| (0, r)).collect();
        write_training_log_csv(&rows, std::io::BufWriter::new(std::fs::File::create(p)?))?;
    }
    println!(
        "{} trained on {} samples ({} validation); candidate {} val loss {}; saved to {}",
        a.model,
        trained.train_samples,
        trained.val_samples,
        trained.outcome.best,
        best.val_loss.map_or("NA".into(), |v| format!("{v:.6}")),
        a.output.display()
    );
    Ok(())
}

fn attribution(a: AttributionArgs, exec: Execution) -> anyhow::Result<()> {
    if !a.checkpoint.exists() {
        bail!(UsageError(format!("checkpoint {} not found", a.checkpoint.display())));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let net = ck.to_network()?;
    if a.method == Method::Linear && net.kind() != stmom::models::ArchitectureKind::Slp {
        bail!(UsageError(format!(
            "linear attribution needs an SLP checkpoint, got {}; use --method permutation",
            net.kind()
        )));
    }
    let mut data = pipeline::DataConfig::default();
    apply_data_args(&mut data, &a.data);
    let panel = load_panel(&data)?;
    if panel.assets() != ck.assets.as_slice() {
        bail!(UsageError("panel assets differ from the checkpoint".into()));
    }
    let vol = ex_ante_volatility(&panel, ck.features.vol_span)?;
    let tensor = assemble_tensor(&panel, &vol, &ck.features, net.spec.tau, exec)?;
    let dates = usable_dates(&tensor, 0..panel.n_dates());
    let rows = match a.method {
        Method::Linear => {
            let attr = slp_linear_attribution(&net, &tensor, &dates, None)?;
            match &a.asset {
                Some(name) => {
                    let i = attr
                        .asset_index(name)
                        .ok_or_else(|| UsageError(format!("unknown asset '{name}'")))?;
                    attr.top_for_asset(i, a.top)
                }
                None => attr.top_global(a.top),
            }
        }
        Method::Permutation => {
            if a.asset.is_some() {
                bail!(UsageError("permutation importance is portfolio-level; drop --asset".into()));
            }
            let (base, imp) = permutation_importance(&net, &tensor, &panel, &vol, &dates, a.permutations, a.seed, exec)?;
            log::info!("unshuffled Sharpe {base:.4}");
            rank_importance(&imp, a.top)
        }
    };
    match &a.output {
        Some(p) => write_ranked_csv(&rows, std::io::BufWriter::new(std::fs::File::create(p)?))?,
        None => {
            let stdout = std::io::stdout();
            write_ranked_csv(&rows, stdout.lock())?;
        }
    }
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let path = if a.run.is_dir() {
        a.run.join("report.json")
    } else {
        a.run.clone()
    };
    let rep = load_report(Path::new(&path)).with_context(|| format!("reading {}", path.display()))?;
    let mut out = std::io::stdout().lock();
    match a.format {
        ReportFormat::Text => out.write_all(render_text(&rep).as_bytes())?,
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &rep)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
