use anyhow::Context;
use clap::{Parser, Subcommand};
use cosmicq::pipeline::stages::{parse_stages, Runner, Stage};
use cosmicq::pipeline::RunConfig;
use cosmicq::ratealgebra;
use cosmicq::Error;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

/// Cosmic-ray correlated qubit error pipeline.
#[derive(Parser, Debug)]
#[command(name = "cosmicq", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stages to run when no subcommand is given: `all` or a comma list.
    #[arg(long, global = true, default_value = "all")]
    stages: String,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample muon trajectories for the detector and chip sets.
    SampleMuons,
    /// Trace sampled muons through the scene.
    Transport,
    /// Smear depositions and tabulate cross-sections.
    Xsection,
    /// Render qubit shots, detector pulses and sync references.
    Simulate,
    /// Find bursts in the shot streams.
    Detect,
    /// Synchronize pulses, tag coincidences and decompose rates.
    Coincide,
    /// Fit the detector response to pulse spectra.
    Calibrate,
    /// Evaluate a multi-Poisson observation query.
    RateAlgebra {
        /// Query file.
        query: PathBuf,
    },
    /// Summarize recovered against injected quantities.
    Report,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Dependency { .. }) => 3,
        Some(Error::Fit(_)) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn rate_algebra(path: &PathBuf) -> anyhow::Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let q = ratealgebra::parse_query(&text)?;
    let p = ratealgebra::observation_probability(q.target, &q.lambdas, &q.efficiencies, q.order)?;
    let exp = ratealgebra::expand(&q.lambdas, q.order)?;
    let mut s = String::new();
    writeln!(s, "target = {}", q.labels.format(q.target))?;
    writeln!(s, "order = {}", q.order)?;
    writeln!(s, "probability = {p:.12e}")?;
    writeln!(s, "retained_weight = {:.12e}", exp.total_weight())?;
    writeln!(s, "tail_bound = {:.6e}", exp.tail_bound())?;
    writeln!(s, "\nterm,weight,p_observe,contribution")?;
    for r in ratealgebra::breakdown(q.target, &q.lambdas, &q.efficiencies, q.order)? {
        writeln!(s, "{},{:.6e},{:.6e},{:.6e}", ratealgebra::format_term(&r.term, &q.labels), r.term.weight, r.p_observe, r.contribution)?;
    }
    writeln!(s, "\ntarget,first_order,order3,abs_gap,rel_gap")?;
    for r in ratealgebra::first_order_check(&q.lambdas, &q.efficiencies)? {
        writeln!(s, "{},{:.6e},{:.6e},{:.3e},{:.3e}", q.labels.format(r.target), r.first_order, r.order3, r.abs_gap, r.rel_gap)?;
    }
    Ok(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().context("thread pool")?;
    }
    let stage = match &cli.command {
        Some(Command::RateAlgebra { query }) => {
            print!("{}", rate_algebra(query)?);
            return Ok(());
        }
        Some(Command::ShowConfig) => {
            print!("{}", load_config(&cli)?.to_toml());
            return Ok(());
        }
        Some(Command::SampleMuons) => Some(Stage::Sample),
        Some(Command::Transport) => Some(Stage::Transport),
        Some(Command::Xsection) => Some(Stage::Xsection),
        Some(Command::Simulate) => Some(Stage::Simulate),
        Some(Command::Detect) => Some(Stage::Detect),
        Some(Command::Coincide) => Some(Stage::Coincide),
        Some(Command::Calibrate) => Some(Stage::Calibrate),
        Some(Command::Report) => Some(Stage::Report),
        None => None,
    };
    let stages: BTreeSet<Stage> = match stage {
        Some(s) => [s].into(),
        None => parse_stages(&cli.stages)?,
    };
    let cfg = load_config(&cli)?;
    log::info!("config sha256 {} seed {}", cfg.hash_hex(), cfg.seed);
    for p in Runner::new(&cfg).run(&stages)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
