use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand};
use drdm_cli::commands::{self, aggregate_seeds};
use drdm_cli::{CliError, ExperimentConfig};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "drdm", version, about = "Multi-resolution traffic diffusion harness")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; omitted sections use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run once per seed in child processes under `<out>/seed-<s>`, then aggregate.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate synthetic cities and save them as bundles.
    Synth(Common),
    /// Train a denoiser and save a checkpoint.
    Train(Common),
    /// Sample held-out tiles from a checkpoint and score them.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a generated ladder bundle against a true one.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Refine coarse grids down to the finest level without retraining.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ladder bundle holding the coarse grids.
        #[arg(long)]
        coarse: PathBuf,
        /// Level label to start from; defaults to the bundle's coarsest.
        #[arg(long)]
        level: Option<String>,
    },
    /// Export the per-step noise schedule as CSV.
    Schedule(Common),
    /// Compare analytic and numerical gradients on a small fixture.
    Gradcheck(Common),
    /// Run an ablation preset over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
    },
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::Synth(c) | Cmd::Train(c) | Cmd::Schedule(c) | Cmd::Gradcheck(c) => c,
            Cmd::Sample { common, .. }
            | Cmd::Eval { common, .. }
            | Cmd::Refine { common, .. }
            | Cmd::Ablate { common, .. } => common,
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.run.out = o.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

/// Original arguments minus `--seed`, `--out` and `--seeds`.
fn child_args() -> Vec<String> {
    let mut out = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--seed" | "--out" | "--seeds" => {
                args.next();
            }
            s if s.starts_with("--seed=") || s.starts_with("--out=") || s.starts_with("--seeds=") => {}
            _ => out.push(a),
        }
    }
    out
}

fn fan_out(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Value, CliError> {
    let exe = std::env::current_exe().map_err(|e| CliError::Usage(format!("cannot locate executable: {e}")))?;
    let base = cfg.out_dir();
    let args = child_args();
    let mut dirs = Vec::new();
    for &seed in seeds {
        let dir = base.join(format!("seed-{seed}"));
        let status = Command::new(&exe)
            .args(&args)
            .arg("--seed")
            .arg(seed.to_string())
            .arg("--out")
            .arg(&dir)
            .output()
            .map_err(|e| CliError::Child {
                seed,
                message: e.to_string(),
            })?;
        if !status.status.success() {
            let message = String::from_utf8_lossy(&status.stderr).trim().to_string();
            return Err(CliError::Child { seed, message });
        }
        dirs.push((seed, dir));
    }
    commands::prepare(cfg)?;
    let report = aggregate_seeds(&base, &dirs)?;
    Ok(json!({
        "seeds": seeds,
        "runs": dirs.iter().map(|(_, d)| d).collect::<Vec<_>>(),
        "aggregate": report.map(|r| r.rows),
    }))
}

fn run(cli: &Cli) -> Result<Value, CliError> {
    let common = cli.command.common();
    let cfg = resolve(common)?;
    let seeds = &common.seeds;
    if !seeds.is_empty() && !matches!(cli.command, Cmd::Ablate { .. }) {
        return fan_out(&cfg, seeds);
    }
    let path = |p: &Option<PathBuf>| p.as_deref().map(Path::to_path_buf);
    match &cli.command {
        Cmd::Synth(_) => commands::synth(&cfg),
        Cmd::Train(_) => commands::train(&cfg),
        Cmd::Sample { checkpoint, .. } => commands::sample(&cfg, path(checkpoint).as_deref()),
        Cmd::Eval { generated, truth, .. } => commands::eval(&cfg, path(generated).as_deref(), path(truth).as_deref()),
        Cmd::Refine {
            checkpoint,
            coarse,
            level,
            ..
        } => commands::refine(&cfg, path(checkpoint).as_deref(), coarse, level.as_deref()),
        Cmd::Schedule(_) => commands::schedule(&cfg),
        Cmd::Gradcheck(_) => commands::gradcheck(&cfg),
        Cmd::Ablate { preset, .. } => {
            let seeds = (!seeds.is_empty()).then_some(seeds.as_slice());
            commands::ablate(&cfg, preset.as_deref(), seeds)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            let err = CliError::Usage(e.to_string().lines().next().unwrap_or("bad arguments").to_string());
            eprintln!("{}", err.json_line());
            std::process::exit(err.exit_code());
        }
    };
    match run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{}", e.json_line());
            std::process::exit(e.exit_code());
        }
    }
}
