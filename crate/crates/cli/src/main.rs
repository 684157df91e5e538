//! `multiid`: corpus generation, two-stage training, sampling, evaluation
//! and routing-map export.
//!
//! Every subcommand prints its resolved configuration as one JSON line
//! before doing any work. Failures exit nonzero with a JSON object on
//! stderr; configuration and path problems exit with code 2.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{load_config, ConfigError, RunConfig};
use multiid::supervision::{LossVariant, SupervisionMode};

#[derive(Parser)]
#[command(name = "multiid", version, about = "Multi-identity video diffusion at desk scale")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the whole run (falls back to the config, then MULTIID_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for tensor kernels; 1 gives the reproducible mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        num_clips: Option<usize>,
    },
    /// Train stage 1 or stage 2.
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        ckpt_dir: Option<PathBuf>,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        loss_variant: Option<LossVariant>,
        #[arg(long)]
        supervision: Option<SupervisionMode>,
    },
    /// Generate one clip for identities given by seed.
    Sample {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        /// Comma-separated identity seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Score generated clips and write a report.
    Eval {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Write routing maps recorded while sampling for a corpus clip.
    Viz {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        clip: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData { out, num_clips } => {
            if let Some(o) = out {
                cfg.corpus_dir = o.clone();
            }
            if let Some(n) = num_clips {
                cfg.corpus.num_clips = *n;
            }
        }
        Command::Train {
            stage,
            corpus,
            ckpt_dir,
            steps,
            lr,
            loss_variant,
            supervision,
            ..
        } => {
            let section = match stage {
                1 => &mut cfg.stage1,
                2 => &mut cfg.stage2,
                s => return Err(ConfigError::new(Some("stage"), format!("must be 1 or 2, got {s}"))),
            };
            if let Some(v) = steps {
                section.steps = *v;
            }
            if let Some(v) = lr {
                section.lr = *v;
            }
            if let Some(v) = loss_variant {
                section.loss_variant = *v;
            }
            if let Some(v) = supervision {
                section.supervision_mode = *v;
            }
            if let Some(c) = corpus {
                cfg.corpus_dir = c.clone();
            }
            if let Some(d) = ckpt_dir {
                cfg.ckpt_dir = d.clone();
            }
        }
        Command::Sample { steps, guidance, .. } => {
            if let Some(v) = steps {
                cfg.sampling.steps = *v;
            }
            if let Some(v) = guidance {
                cfg.sampling.guidance = *v;
            }
        }
        Command::Eval { report_dir, .. } => {
            if let Some(d) = report_dir {
                cfg.report_dir = d.clone();
            }
        }
        Command::Viz { steps, .. } => {
            if let Some(v) = steps {
                cfg.sampling.steps = *v;
            }
        }
    }
    cfg.apply_seed(cli.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData { .. } => commands::gen_data(cfg),
        Command::Train { stage, init, .. } => commands::train(cfg, *stage, init.as_deref()),
        Command::Sample {
            ckpt, prompt, ids, out, ..
        } => commands::sample(
            cfg,
            commands::SampleArgs {
                ckpt: ckpt.as_deref(),
                prompt,
                identity_seeds: ids,
                out: out.as_deref(),
            },
        ),
        Command::Eval { generated, .. } => commands::eval(cfg, generated.as_deref()),
        Command::Viz { ckpt, clip, out, .. } => commands::viz(cfg, ckpt.as_deref(), clip.as_deref(), out.as_deref()),
    }
}

fn config_failure(e: &ConfigError) -> ExitCode {
    eprintln!("{}", json!({ "error": "config", "key": e.key, "message": e.message }));
    ExitCode::from(2)
}

fn classify(e: &multiid::Error) -> (&'static str, u8) {
    use multiid::Error as E;
    match e {
        E::Config(_)
        | E::LambdaNegative(_)
        | E::ProbsInvalid(_)
        | E::ModeInvalid(_)
        | E::StrideInvalid(_)
        | E::GridInvalid(_) => ("config", 2),
        E::Io { .. } | E::CorruptFile(_) | E::VersionMismatch { .. } | E::Json(_) => ("io", 1),
        E::NonFiniteLoss { .. } | E::NonFiniteParams(_) => ("numeric", 1),
        _ => ("runtime", 1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // Read by the tensor backend each time it sizes its thread pool.
        std::env::set_var("RAYON_NUM_THREADS", n.max(1).to_string());
    }
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => return config_failure(&e),
    };
    println!("{}", json!({ "resolved_config": cfg }));
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigError>() {
                return config_failure(c);
            }
            let (kind, code) = e.downcast_ref::<multiid::Error>().map_or(("io", 1), classify);
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::from(code)
        }
    }
}
