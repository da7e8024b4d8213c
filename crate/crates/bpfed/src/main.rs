//! Command-line front end: parse a config file plus flag overrides, run the
//! experiment, and print a short summary (full results land in the run
//! directory).

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use bpfed::config::RunConfig;
use bpfed::runner;
use clap::Parser;

#[derive(Parser, Debug)]
#[command(
    name = "bpfed",
    version,
    about = "Bayesian personalized federated learning simulator"
)]
struct Cli {
    /// Flat `key = value` config file; a previous run's manifest also works.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Training mode: bpfed, fedavg, fedper, fedrep, or lgfedavg.
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,
    /// Dataset: synth, mnist, or fmnist.
    #[arg(long, value_name = "NAME")]
    dataset: Option<String>,
    /// Split regime: small or large.
    #[arg(long, value_name = "REGIME")]
    size: Option<String>,
    /// Master seed for every random stream.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output root; results go to <out>/<run-name>/.
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Total clients (N).
    #[arg(long, value_name = "N")]
    clients: Option<usize>,
    /// Participants sampled per round (S).
    #[arg(long, value_name = "S")]
    participants: Option<usize>,
    /// Communication rounds (T).
    #[arg(long, value_name = "T")]
    rounds: Option<usize>,
    /// Local epochs per round (R).
    #[arg(long, value_name = "R")]
    local_epochs: Option<usize>,
    /// Minibatch size (b).
    #[arg(long, value_name = "B")]
    batch: Option<usize>,
    /// Monte Carlo samples per training step (M).
    #[arg(long, value_name = "M")]
    mc_samples: Option<usize>,
    /// Adam learning rate.
    #[arg(long, value_name = "FLOAT")]
    lr: Option<f64>,
    /// After training, personalize a held-out novel client against the
    /// frozen shared factors.
    #[arg(long)]
    novel_client: bool,
    /// Name the output directory instead of deriving it from the config.
    #[arg(long, value_name = "NAME")]
    run_name: Option<String>,
}

fn resolve(cli: &Cli) -> bpfed::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    // Flags override file values; string-typed flags go through the same
    // parser as the file so error messages match.
    if let Some(v) = &cli.mode {
        cfg.apply("mode", v)?;
    }
    if let Some(v) = &cli.dataset {
        cfg.apply("dataset", v)?;
    }
    if let Some(v) = &cli.size {
        cfg.apply("size", v)?;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    if let Some(v) = cli.clients {
        cfg.clients = v;
    }
    if let Some(v) = cli.participants {
        cfg.participants = v;
    }
    if let Some(v) = cli.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = cli.local_epochs {
        cfg.local_epochs = v;
    }
    if let Some(v) = cli.batch {
        cfg.batch = v;
    }
    if let Some(v) = cli.mc_samples {
        cfg.mc_samples = v;
    }
    if let Some(v) = cli.lr {
        cfg.lr = v;
    }
    if cli.novel_client {
        cfg.novel_client = true;
    }
    if let Some(v) = &cli.run_name {
        cfg.run_name = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> bpfed::Result<()> {
    let cfg = resolve(cli)?;
    println!(
        "bpfed: mode={} dataset={}-{} clients={} participants={} rounds={} seed={}",
        cfg.mode, cfg.dataset, cfg.size, cfg.clients, cfg.participants, cfg.rounds, cfg.seed
    );
    let _ = std::io::stdout().flush();
    let outcome = runner::run(&cfg)?;
    print!("{}", runner::render_summary(&cfg, &outcome));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
