mod fetch;
mod pgm;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use clbench::data::{resolve_data_dir, Mnist, Protocol, Scenario};
use clbench::harness::{
    grid_search, read_report_dir, resume_experiment, run_many, run_with_checkpoint, summarize, write_table,
    Checkpoint, ConfigFile, GridFile, Method, Model, RunConfig, RunReport,
};
use clbench::models::Generator;
use clbench::rng::{stream_rng, Stream};

#[derive(Parser)]
#[command(name = "clbench", version, about = "Continual-learning benchmark on split and permuted MNIST")]
struct Cli {
    /// Directory with the four MNIST files (default: $CLBENCH_DATA_DIR, then data/mnist)
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one method on one protocol and scenario
    Run(RunArgs),
    /// Run one experiment per hyperparameter combination and pick the best
    Grid(GridArgs),
    /// Write images sampled from a checkpoint's generator as PGM files
    Sample(SampleArgs),
    /// Summarize report CSVs into a method-by-scenario table
    Compare(CompareArgs),
    /// Download the MNIST files and verify their checksums
    FetchMnist(FetchArgs),
}

/// Settings shared by `run` and `grid`; unset values fall back to the
/// config file, then to the protocol defaults.
#[derive(Args, Clone, Default)]
struct Settings {
    /// Key-value (TOML) file whose keys mirror these flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of tasks (permuted protocol only)
    #[arg(long)]
    tasks: Option<usize>,
    /// Iterations per task
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    replay_batch: Option<usize>,
    /// Units per hidden layer
    #[arg(long)]
    hidden: Option<usize>,
    /// EWC / online EWC penalty strength
    #[arg(long)]
    lambda: Option<f64>,
    /// Online EWC decay
    #[arg(long)]
    gamma: Option<f64>,
    /// SI penalty strength
    #[arg(long = "si-c")]
    si_c: Option<f64>,
    /// Percentage of hidden units gated per task for XdG
    #[arg(long = "xdg-pct")]
    xdg_pct: Option<f64>,
    /// Examples used for the Fisher estimate (default: all)
    #[arg(long = "n-fisher")]
    n_fisher: Option<usize>,
    /// Distillation temperature
    #[arg(long)]
    temperature: Option<f32>,
    /// Runs executed concurrently
    #[arg(long)]
    jobs: Option<usize>,
    /// Directory reports are written to
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Settings {
    fn as_file(&self) -> ConfigFile {
        ConfigFile {
            protocol: self.protocol,
            scenario: self.scenario,
            seed: self.seed,
            tasks: self.tasks,
            iters: self.iters,
            lr: self.lr,
            batch: self.batch,
            replay_batch: self.replay_batch,
            hidden: self.hidden,
            lambda: self.lambda,
            gamma: self.gamma,
            si_c: self.si_c,
            xdg_pct: self.xdg_pct,
            n_fisher: self.n_fisher,
            temperature: self.temperature,
            jobs: self.jobs,
            out_dir: self.out_dir.clone(),
            ..ConfigFile::default()
        }
    }
}

/// Layers `top` over `base`: any value set in `top` wins.
fn overlay(base: ConfigFile, top: ConfigFile) -> ConfigFile {
    macro_rules! pick {
        ($($f:ident),*) => {
            ConfigFile { $($f: top.$f.or(base.$f)),* }
        };
    }
    pick!(
        protocol, scenario, method, seed, seeds, tasks, iters, lr, batch, replay_batch, hidden, lambda, gamma, si_c,
        xdg_pct, n_fisher, temperature, data_dir, out_dir, jobs
    )
}

fn template(file: &ConfigFile, method: Option<Method>) -> Result<RunConfig> {
    let protocol = file.protocol.context("--protocol is required")?;
    let scenario = file.scenario.context("--scenario is required")?;
    let method = method.or(file.method).context("--method is required")?;
    let mut config = RunConfig::new(protocol, scenario, method, 0);
    file.apply(&mut config);
    config.validate()?;
    Ok(config)
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    settings: Settings,
    #[arg(long)]
    method: Option<Method>,
    /// Number of consecutive seeds to run, starting at --seed
    #[arg(long)]
    seeds: Option<usize>,
    /// Save each run's final state as <out-dir>/<run>.ckpt
    #[arg(long)]
    checkpoint: bool,
    /// Continue a saved run instead of starting a new one
    #[arg(long, conflicts_with = "checkpoint")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    settings: Settings,
    #[arg(long)]
    method: Option<Method>,
    /// TOML file with a [grid] table of value lists and optional fixed settings
    #[arg(long)]
    grid_file: PathBuf,
    /// CSV the full grid is written to (default: <out-dir>/grid-<protocol>-<scenario>-<method>.csv)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    /// Directory of report CSVs
    #[arg(long)]
    reports: PathBuf,
    /// Output CSV (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FetchArgs {
    /// Destination directory (default: the data directory)
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Base URL serving the gzipped files
    #[arg(long, default_value = fetch::DEFAULT_BASE_URL)]
    base_url: String,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args, cli.data_dir),
        Command::Grid(args) => cmd_grid(args, cli.data_dir),
        Command::Sample(args) => cmd_sample(args),
        Command::Compare(args) => cmd_compare(args),
        Command::FetchMnist(args) => {
            let dir = args.dir.unwrap_or_else(|| resolve_data_dir(cli.data_dir.as_deref()));
            fetch::fetch_all(&args.base_url, &dir)
        }
    }
}

fn load_settings(settings: &Settings) -> Result<ConfigFile> {
    let base = match &settings.config {
        Some(p) => ConfigFile::read(p)?,
        None => ConfigFile::default(),
    };
    Ok(overlay(base, settings.as_file()))
}

fn load_mnist(flag: Option<PathBuf>, file: &ConfigFile) -> Result<Mnist> {
    let dir = resolve_data_dir(flag.as_deref().or(file.data_dir.as_deref()));
    Mnist::load(&dir).with_context(|| format!("loading MNIST from {}", dir.display()))
}

fn out_dir(file: &ConfigFile) -> PathBuf {
    file.out_dir.clone().unwrap_or_else(|| PathBuf::from("reports"))
}

fn report_done(report: &RunReport, dir: &Path) -> Result<()> {
    report.save(dir)?;
    println!("{}", report.summary());
    Ok(())
}

fn cmd_run(args: RunArgs, data_dir: Option<PathBuf>) -> Result<()> {
    let mut file = load_settings(&args.settings)?;
    file.seeds = args.seeds.or(file.seeds);
    let dir = out_dir(&file);
    if let Some(path) = args.resume {
        let ckpt = Checkpoint::load(&path)?;
        let mnist = load_mnist(data_dir, &file)?;
        let report = resume_experiment(ckpt, &mnist)?;
        return report_done(&report, &dir);
    }
    let base = template(&file, args.method)?;
    let first = file.seed.unwrap_or(0);
    let configs: Vec<RunConfig> = (0..file.seeds.unwrap_or(1) as u64)
        .map(|i| RunConfig {
            seed: first + i,
            ..base.clone()
        })
        .collect();
    let mnist = load_mnist(data_dir, &file)?;
    std::fs::create_dir_all(&dir)?;
    if args.checkpoint {
        for c in &configs {
            let (report, ckpt) = run_with_checkpoint(c, &mnist)?;
            ckpt.save(&dir.join(format!("{}.ckpt", c.tag())))?;
            report_done(&report, &dir)?;
        }
        return Ok(());
    }
    let on_done = |_: usize, r: &clbench::Result<RunReport>| {
        if let Ok(rep) = r {
            if let Err(e) = report_done(rep, &dir) {
                log::error!("writing report: {e:#}");
            }
        }
    };
    let mut failed = 0;
    for r in run_many(&configs, &mnist, file.jobs.unwrap_or(1), &on_done) {
        match r {
            Ok(rep) if rep.complete => {}
            Ok(rep) => {
                failed += 1;
                log::error!("{}: {}", rep.config.tag(), rep.error.unwrap_or_default());
            }
            Err(e) => {
                failed += 1;
                log::error!("{e}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} runs failed", configs.len());
    }
    Ok(())
}

fn cmd_grid(args: GridArgs, data_dir: Option<PathBuf>) -> Result<()> {
    let grid = GridFile::read(&args.grid_file)?;
    let file = overlay(grid.fixed.clone(), load_settings(&args.settings)?);
    let mut config = template(&file, args.method)?;
    config.seed = file.seed.unwrap_or(0);
    let mnist = load_mnist(data_dir, &file)?;
    let result = grid_search(&config, &grid, &mnist, file.jobs.unwrap_or(1))?;
    let out = match args.out {
        Some(p) => p,
        None => {
            let dir = out_dir(&file);
            std::fs::create_dir_all(&dir)?;
            dir.join(format!("grid-{}-{}-{}.csv", config.protocol, config.scenario, config.method))
        }
    };
    result.write_csv(&out)?;
    match result.best_cell() {
        Some(best) => {
            let values: Vec<String> = best.values.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("best: {} (avg {:.2})", values.join(" "), best.average.unwrap_or(f64::NAN));
        }
        None => bail!("every grid cell failed; see {}", out.display()),
    }
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut rng = stream_rng(args.seed, Stream::Sampling);
    let images = match (&ckpt.state.generator, &ckpt.state.model) {
        (Some(g), _) => g.net.sample(args.n, &mut rng)?,
        (None, Model::Rtf(net)) => net.sample(args.n, &mut rng)?,
        _ => bail!("{} checkpoints have no generator", ckpt.config.method),
    };
    std::fs::create_dir_all(&args.out)?;
    let side = (images.cols() as f64).sqrt() as usize;
    for i in 0..args.n {
        let path = args.out.join(format!("sample-{i:04}.pgm"));
        pgm::write(&path, side, images.row(i))?;
    }
    println!("wrote {} images to {}", args.n, args.out.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let rows = read_report_dir(&args.reports)?;
    if rows.is_empty() {
        bail!("no report CSVs found in {}", args.reports.display());
    }
    let summaries = summarize(&rows)?;
    match args.out {
        Some(p) => write_table(&mut std::fs::File::create(&p)?, &summaries)?,
        None => write_table(&mut std::io::stdout().lock(), &summaries)?,
    }
    Ok(())
}
