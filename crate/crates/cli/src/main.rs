//! `bmfmc`: staged multi-fidelity density estimation from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bmfmc::artifacts::{read_json, write_json};
use bmfmc::costmodel::{write_speedup_csv, SpeedupTable};
use bmfmc::pipeline::{self, files, MetricsSummary, RunConfig, Stage, StageOutcome};
use bmfmc::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bmfmc", version, about = "Bayesian multi-fidelity Monte Carlo density estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, value_name = "DIR", default_value = "bmfmc-out")]
    out: PathBuf,
    /// Root seed; overrides the configuration.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Recompute even when artifacts are up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the input Monte Carlo samples.
    Sample(Common),
    /// Evaluate (or import) the LF model on every sample.
    Lf(Common),
    /// Build features, pick the HF training inputs and collect their HF outputs.
    Select(Common),
    /// Fit the Gaussian process hyperparameters.
    Fit(Common),
    /// Posterior mean and variance of the HF density, plus the plot bundle.
    Predict(Common),
    /// KLD and Monte Carlo error records.
    Metrics(Common),
    /// Every stage in order.
    Run(Common),
    /// Speed-up table; `--config` points to a table spec, default is the cylinder example.
    Speedup(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let path = c
        .config
        .as_deref()
        .ok_or_else(|| Error::Usage("--config is required for pipeline stages".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(stage: Stage, outcome: StageOutcome) {
    let what = match outcome {
        StageOutcome::Ran => "done",
        StageOutcome::UpToDate => "up to date",
    };
    eprintln!("{}: {what}", stage.name());
}

fn print_metrics(dir: &Path) -> Result<()> {
    let summary: MetricsSummary = read_json(&dir.join(files::METRICS))?;
    for r in summary.records {
        println!("{:<36} {:.6e}", r.metric, r.value);
    }
    Ok(())
}

fn stages(c: &Common, list: &[Stage]) -> Result<()> {
    let cfg = load_config(c)?;
    std::fs::create_dir_all(&c.out).map_err(|e| Error::Io { path: c.out.clone(), source: e })?;
    write_json(&c.out.join("config.json"), &cfg)?;
    for &s in list {
        report(s, pipeline::run_stage(&cfg, s, &c.out, c.force)?);
    }
    if list.contains(&Stage::Predict) {
        eprintln!("density: {}", c.out.join(files::DENSITY).display());
        eprintln!("plot bundle: {}", c.out.join(files::PLOT).display());
    }
    if list.contains(&Stage::Metrics) {
        print_metrics(&c.out)?;
    }
    Ok(())
}

fn speedup(c: &Common) -> Result<()> {
    let table = match &c.config {
        Some(p) => read_json::<SpeedupTable>(p).map_err(|e| match e {
            Error::Format { path, msg } => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?,
        None => SpeedupTable::cylinder_example(),
    };
    let results = table.evaluate()?;
    std::fs::create_dir_all(&c.out).map_err(|e| Error::Io { path: c.out.clone(), source: e })?;
    let path = c.out.join("speedup.csv");
    write_speedup_csv(&path, &results)?;
    println!("{:<12} {:>10} {:>8} {:>8} {:>8}", "label", "f_HF/LF", "n_mc", "n_train", "speedup");
    for r in &results {
        println!("{:<12} {:>10.3} {:>8} {:>8} {:>8.1}", r.label, r.f_hf_lf, r.n_mc, r.n_train, r.speedup);
    }
    eprintln!("table: {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sample(c) => stages(c, &[Stage::Sample]),
        Command::Lf(c) => stages(c, &[Stage::Lf]),
        Command::Select(c) => stages(c, &[Stage::Select]),
        Command::Fit(c) => stages(c, &[Stage::Fit]),
        Command::Predict(c) => stages(c, &[Stage::Predict]),
        Command::Metrics(c) => stages(c, &[Stage::Metrics]),
        Command::Run(c) => stages(c, &Stage::ALL),
        Command::Speedup(c) => speedup(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
