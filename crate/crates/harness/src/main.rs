use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use c2f_core::diagnostics::{diagnose_grid, DistributionModel};
use c2f_core::rng::{Rng, StreamKind};
use c2f_core::schedule::SamplingMode;
use c2f_core::tasks::{Dataset, Split};
use c2f_core::train::evaluate;
use c2f_harness::checkpoint::{load_checkpoint, write_atomic};
use c2f_harness::config::{ExperimentConfig, RasterName, StrategyName, TaskName};
use c2f_harness::dataset::write_dataset;
use c2f_harness::output::emit_metrics;
use c2f_harness::run::{datasets, new_pair, run_experiment};
use c2f_harness::sweep::{label, run_sweep, sweep_table, threads_from_env, SweepSpec};
use c2f_harness::HarnessError;

#[derive(Parser, Debug)]
#[command(name = "c2f", version, about = "Coarse-to-fine training with progressive teacher forcing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one (config, seed) run.
    Train(TrainArgs),
    /// Re-score a finished run from its config and checkpoint.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Strategy x schedule x seed grid with a comparison table.
    Sweep(SweepArgs),
    /// Entropy of the training mixture over a grid of t.
    Diagnose(DiagnoseArgs),
    /// Export the train and test splits of a task.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Loc,
    Cls,
    Seg,
}

impl From<Task> for TaskName {
    fn from(t: Task) -> Self {
        match t {
            Task::Loc => TaskName::Loc,
            Task::Cls => TaskName::Cls,
            Task::Seg => TaskName::Seg,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Bl,
    Ind,
    Jnt,
    Pt,
}

impl From<StrategyArg> for StrategyName {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Bl => StrategyName::Bl,
            StrategyArg::Ind => StrategyName::Ind,
            StrategyArg::Jnt => StrategyName::Jnt,
            StrategyArg::Pt => StrategyName::Pt,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sampling {
    Hard,
    Weighted,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Raster {
    Soft,
    Hard,
}

/// Config file plus per-key overrides.
#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// TOML config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<Task>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, value_enum)]
    sampling: Option<Sampling>,
    #[arg(long, value_enum)]
    raster: Option<Raster>,
    #[arg(long)]
    raster_k: Option<f64>,
    /// Schedule start value.
    #[arg(long)]
    t0: Option<f64>,
    /// End of the constant-t0 phase, as a fraction of the run.
    #[arg(long)]
    hold: Option<f64>,
    /// Where t reaches 1, as a fraction of the run.
    #[arg(long)]
    ramp_end: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: <output_dir>/<setting>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated strategies.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "bl,ind,jnt,pt")]
    strategies: Vec<StrategyArg>,
    /// Seed list: `1..5` (inclusive) or `1,2,3`.
    #[arg(long, default_value = "1..5")]
    seeds: String,
    /// Progressive start values.
    #[arg(long, value_delimiter = ',')]
    t0s: Vec<f64>,
    /// Progressive ramp ends, fractions of the run.
    #[arg(long, value_delimiter = ',')]
    ramp_ends: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    hgt: f64,
    #[arg(long)]
    hc: f64,
    /// `start:end:step`, inclusive of the end.
    #[arg(long, default_value = "0:1:0.05")]
    grid: String,
    /// Length unit for component separation.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Distance between component means, in units of sigma.
    #[arg(long, default_value_t = 20.0)]
    separation: f64,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_error(field: &str, message: impl Into<String>) -> anyhow::Error {
    HarnessError::Config {
        field: field.into(),
        message: message.into(),
    }
    .into()
}

fn build_config(a: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(a.task.map(Into::into).unwrap_or(TaskName::Loc)),
    };
    if let (Some(t), Some(_)) = (a.task, &a.config) {
        if TaskName::from(t) != cfg.task {
            return Err(config_error("task", "flag disagrees with the config file"));
        }
    }
    macro_rules! set {
        ($($field:ident <- $value:expr),* $(,)?) => {
            $(if let Some(v) = $value { cfg.$field = v; })*
        };
    }
    set!(
        total_iters <- a.iters,
        batch_size <- a.batch_size,
        lr <- a.lr,
        n_train <- a.n_train,
        n_test <- a.n_test,
        data_seed <- a.data_seed,
        raster_k <- a.raster_k,
        t0 <- a.t0,
        hold <- a.hold,
        ramp_end <- a.ramp_end,
    );
    if let Some(s) = a.sampling {
        cfg.sampling = match s {
            Sampling::Hard => SamplingMode::Hard,
            Sampling::Weighted => SamplingMode::Weighted,
        };
    }
    if let Some(r) = a.raster {
        cfg.raster = match r {
            Raster::Soft => RasterName::Soft,
            Raster::Hard => RasterName::Hard,
        };
    }
    Ok(cfg)
}

fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    let bad = || config_error("seeds", format!("cannot parse `{text}`"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

fn parse_grid(text: &str) -> anyhow::Result<Vec<f64>> {
    let bad = || config_error("grid", format!("expected start:end:step, got `{text}`"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect::<anyhow::Result<_>>()?;
    let [start, end, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || end < start || start < 0.0 || end > 1.0 {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| (start + i as f64 * step).min(1.0)).collect())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = build_config(&a.common)?;
    if let Some(s) = a.strategy {
        cfg.strategy = s.into();
    }
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let dir = a
        .out
        .unwrap_or_else(|| cfg.output_dir.join(format!("{}-seed{seed}", label(&cfg))));
    let data = datasets(&cfg)?;
    let (record, pair) = run_experiment(&cfg, seed, &data)?;
    emit_metrics(&record, Some(&pair), &dir)?;
    println!("{}", serde_json::to_string_pretty(&record.eval)?);
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn cmd_eval(run_dir: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let mut pair = new_pair(&cfg, cfg.seeds[0])?;
    load_checkpoint(&mut pair, &run_dir.join("checkpoint.c2f"))
        .map_err(HarnessError::from)
        .with_context(|| format!("loading {}", run_dir.display()))?;
    let test = Dataset::generate(&cfg.task_config(), cfg.data_seed, Split::Test)?;
    let eval = evaluate(&pair, &cfg.build_strategy()?, &test, &cfg.infer_options())?;
    println!("{}", serde_json::to_string_pretty(&eval)?);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let base = build_config(&a.common)?;
    let spec = SweepSpec {
        strategies: a.strategies.iter().map(|&s| s.into()).collect(),
        seeds: parse_seeds(&a.seeds)?,
        t0s: if a.t0s.is_empty() { vec![base.t0] } else { a.t0s },
        ramp_ends: if a.ramp_ends.is_empty() { vec![base.ramp_end] } else { a.ramp_ends },
        base,
    };
    let out = a.out.unwrap_or_else(|| spec.base.output_dir.join("sweep"));
    let records = run_sweep(&spec, threads_from_env(), Some(&out))?;
    let table = sweep_table(&records);
    write_atomic(&out.join("sweep.md"), table.as_bytes()).map_err(|e| HarnessError::Io {
        path: out.join("sweep.md"),
        source: e,
    })?;
    print!("{table}");
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> anyhow::Result<()> {
    let model = DistributionModel::new(a.sigma, 1, a.hgt, a.hc)
        .map_err(|e| config_error("hgt", e.to_string()))?;
    if a.samples < 10_000 {
        return Err(config_error("samples", "at least 10000 samples are required"));
    }
    let ts = parse_grid(&a.grid)?;
    let mut rng = Rng::for_kind(a.seed, StreamKind::MonteCarlo, 0);
    let rows = diagnose_grid(&model, &ts, a.separation, &mut rng, a.samples)?;
    let mut csv = String::from("t,H_approx,H_mc,mc_stderr\n");
    for r in rows {
        csv += &format!("{},{},{},{}\n", r.t, r.h_approx, r.h_mc, r.mc_stderr);
    }
    match a.out {
        Some(path) => write_atomic(&path, csv.as_bytes()).map_err(|e| HarnessError::Io { path, source: e })?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gen_data(common: &CommonArgs, out: &Path) -> anyhow::Result<()> {
    let cfg = build_config(common)?;
    cfg.validate()?;
    let (train, test) = datasets(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_dataset(&train, &out.join("train.c2fd"))?;
    write_dataset(&test, &out.join("test.c2fd"))?;
    eprintln!("wrote {} and {} samples to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval { run_dir } => cmd_eval(&run_dir),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::GenData { common, out } => {
            if common.config.is_none() && common.task.is_none() {
                bail!(config_error("task", "gen-data needs --task or --config"));
            }
            cmd_gen_data(&common, &out)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<HarnessError>())
        .map(|h| h.exit_code() as u8)
        .unwrap_or(2)
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
