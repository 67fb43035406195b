//! Command-line pipeline: ingest or synthesize episodes, calibrate the IDM,
//! train actors, and evaluate them.
//!
//! Every invocation writes into `<out>/<subcommand>-<config hash>-seed<seed>/`
//! together with a `manifest.json` that can be passed back as `--config`.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use atd3_core::agent::{AgentError, AgentMode};
use atd3_core::data::ScenarioMix;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::{digest_file, git_describe, load_config, run_dir_name, Manifest, RunConfig, MANIFEST_VERSION};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            AgentError::Config(m) => CliError::Config(m),
            AgentError::Checkpoint(_) | AgentError::Env(_) | AgentError::NoEpisodes | AgentError::Eval(_) => {
                CliError::Data(e.to_string())
            }
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<atd3_core::data::DataError> for CliError {
    fn from(e: atd3_core::data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<atd3_core::eval::EvalError> for CliError {
    fn from(e: atd3_core::eval::EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<atd3_core::baselines::BaselineError> for CliError {
    fn from(e: atd3_core::baselines::BaselineError) -> Self {
        use atd3_core::baselines::BaselineError as B;
        match e {
            B::Config(m) | B::Params(m) => CliError::Config(m),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "atd3", version, about = "Attention-based actor-critic car-following models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract leader/follower episodes from a trajectory CSV.
    Ingest(Flags),
    /// Generate synthetic episodes.
    Synth(Flags),
    /// Calibrate the IDM on the training split with a genetic algorithm.
    CalibrateIdm(Flags),
    /// Train an actor on the training split.
    Train(Flags),
    /// Roll out a trained actor on the test split.
    Eval(Flags),
    /// Attention recency analysis of a trained attention actor on the test split.
    Attention(Flags),
    /// Rank IDM and trained actors on the test split.
    Compare(Flags),
}

impl Command {
    fn parts(&self) -> (&'static str, &Flags) {
        match self {
            Command::Ingest(f) => ("ingest", f),
            Command::Synth(f) => ("synth", f),
            Command::CalibrateIdm(f) => ("calibrate-idm", f),
            Command::Train(f) => ("train", f),
            Command::Eval(f) => ("eval", f),
            Command::Attention(f) => ("attention", f),
            Command::Compare(f) => ("compare", f),
        }
    }
}

#[derive(Debug, Args)]
struct Flags {
    /// JSON run config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Number of synthetic episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Scenario weights, e.g. smooth=0.5,stopgo=0.3,brake=0.2.
    #[arg(long)]
    mix: Option<String>,
    #[arg(long, value_parser = ["atd3", "ddpg", "ddpg-rt"])]
    mode: Option<String>,
    /// Actor checkpoint (.bin with its .json manifest); repeat for several.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Raw trajectory CSV for ingest.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Units sidecar JSON for ingest.
    #[arg(long)]
    units: Option<PathBuf>,
    /// Calibrated IDM parameters JSON.
    #[arg(long)]
    idm: Option<PathBuf>,
}

fn resolve(subcommand: &str, flags: &Flags) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let (cfg, from) = load_config(path)?;
            if let Some(from) = from {
                if from != subcommand {
                    return Err(CliError::Config(format!(
                        "manifest {} was written by {from}, not {subcommand}",
                        path.display()
                    )));
                }
            }
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(n) = flags.episodes {
        cfg.episodes = n;
    }
    if let Some(m) = &flags.mix {
        cfg.mix = m.parse::<ScenarioMix>().map_err(|e| CliError::Config(format!("--mix: {e}")))?;
    }
    if let Some(m) = &flags.mode {
        cfg.train.mode = m.parse::<AgentMode>().map_err(CliError::Config)?;
    }
    if !flags.checkpoint.is_empty() {
        cfg.checkpoints = flags.checkpoint.clone();
    }
    for (slot, flag) in [
        (&mut cfg.dataset, &flags.data),
        (&mut cfg.input, &flags.input),
        (&mut cfg.units, &flags.units),
        (&mut cfg.idm, &flags.idm),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    cfg.train.seed = cfg.seed;
    cfg.ga.seed = cfg.seed;
    cfg.train.validate()?;
    cfg.ga.validate()?;
    cfg.mix.validate()?;
    Ok(cfg)
}

/// Output location and input bookkeeping for one invocation.
pub struct RunContext {
    pub dir: PathBuf,
    pub config: RunConfig,
    inputs: Vec<PathBuf>,
}

impl RunContext {
    pub fn add_input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn execute(subcommand: &str, flags: &Flags) -> Result<PathBuf, CliError> {
    let config = resolve(subcommand, flags)?;
    let dir = flags.out.join(run_dir_name(subcommand, &config));
    fs::create_dir_all(&dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))?;
    let mut ctx = RunContext {
        dir,
        config,
        inputs: Vec::new(),
    };
    match subcommand {
        "ingest" => commands::ingest(&mut ctx)?,
        "synth" => commands::synth(&mut ctx)?,
        "calibrate-idm" => commands::calibrate(&mut ctx)?,
        "train" => commands::train(&mut ctx)?,
        "eval" => commands::eval(&mut ctx)?,
        "attention" => commands::attention(&mut ctx)?,
        "compare" => commands::compare(&mut ctx)?,
        other => unreachable!("unknown subcommand {other}"),
    }
    let inputs = ctx.inputs.iter().map(|p| digest_file(p)).collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        subcommand: subcommand.to_string(),
        seed: ctx.config.seed,
        config: ctx.config.clone(),
        git_describe: git_describe(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(ctx.path("manifest.json"), text)?;
    Ok(ctx.dir)
}

/// Parses `argv` (including the program name), runs the subcommand and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (subcommand, flags) = cli.command.parts();
    match execute(subcommand, flags) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
