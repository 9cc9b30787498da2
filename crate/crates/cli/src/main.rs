use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gf_cli::{execute, rerun, CliError, Invocation, RunContext};
use gf_core::config::{parse_lines, Config};

#[derive(Debug, Parser)]
#[command(name = "gf", version, about = "Geometry-aligned video flow matching lab")]
struct Cli {
    /// Plain-text `key = value` config; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed for every random consumer of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run directory; defaults to `runs/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// NaN/Inf guards, f64 gradient spot checks and zeroed timestamps.
    #[arg(long, global = true)]
    checked: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a dataset of box-world clips.
    GenData,
    /// Pretrain the frozen teacher selected by `teacher.kind`.
    PretrainTeacher {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the diffusion model in the configured loss mode.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Autoregressive rollouts along sampled trajectories.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Train a readout probe on this dataset and fill depth planes.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Metrics of generated clips against their references.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a preset matrix: layer_sweep, loss_modes, teacher_kinds, external_vs_internal, drift.
    Ablate {
        preset: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        appearance_teacher: Option<PathBuf>,
    },
    /// Depth-probe RMSE of frozen diffusion features.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        model_b: Option<PathBuf>,
        /// Also probe a freshly initialized model of the same architecture.
        #[arg(long)]
        random_baseline: bool,
        #[arg(long)]
        data: PathBuf,
    },
    /// Replay a recorded run from its manifest.
    Rerun { manifest: PathBuf },
}

fn init_logging() {
    let level = match std::env::var("GF_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        None => String::new(),
    };
    for o in &cli.overrides {
        if !o.contains('=') {
            return Err(CliError::Usage(format!("--set expects KEY=VALUE, got '{o}'")));
        }
        text.push('\n');
        text.push_str(o);
    }
    parse_lines(&text)?;
    Ok(Config::parse(&text)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let inv = match cli.command.clone_invocation() {
        Some(inv) => inv,
        None => {
            let Command::Rerun { manifest } = &cli.command else { unreachable!() };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/rerun"));
            let m = rerun(manifest, &out)?;
            log::info!("rerun of {} written to {}", m.invocation.name(), out.display());
            return Ok(());
        }
    };
    let ctx = RunContext {
        config: load_config(&cli)?,
        seed: cli.seed,
        out: cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(inv.name())),
        checked: cli.checked,
    };
    let m = execute(&inv, &ctx)?;
    for f in &m.outputs {
        log::info!("wrote {}/{} ({})", ctx.out.display(), f.path, f.role);
    }
    Ok(())
}

impl Command {
    fn clone_invocation(&self) -> Option<Invocation> {
        Some(match self {
            Command::GenData => Invocation::GenData,
            Command::PretrainTeacher { data } => Invocation::PretrainTeacher { data: data.clone() },
            Command::Train { data, teacher } => Invocation::Train {
                data: data.clone(),
                teacher: teacher.clone(),
            },
            Command::Sample { model, data } => Invocation::Sample {
                model: model.clone(),
                data: data.clone(),
            },
            Command::Eval {
                generated,
                reference,
                teacher,
                model,
                data,
            } => Invocation::Eval {
                generated: generated.clone(),
                reference: reference.clone(),
                teacher: teacher.clone(),
                model: model.clone(),
                data: data.clone(),
            },
            Command::Ablate {
                preset,
                data,
                teacher,
                appearance_teacher,
            } => Invocation::Ablate {
                preset: preset.clone(),
                data: data.clone(),
                teacher: teacher.clone(),
                appearance_teacher: appearance_teacher.clone(),
            },
            Command::Probe {
                model,
                model_b,
                random_baseline,
                data,
            } => Invocation::Probe {
                model: model.clone(),
                model_b: model_b.clone(),
                random_baseline: *random_baseline,
                data: data.clone(),
            },
            Command::Rerun { .. } => return None,
        })
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
