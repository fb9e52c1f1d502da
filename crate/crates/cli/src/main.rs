use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acvae::env::{DiscreteAction, SpritesEnv, IMAGE_SIDE};
use acvae::governance::{effect_report, govern_rollout, traverse, zero_base, OverrideSchedule, TraversalSpec};
use acvae::metrics::evaluate;
use acvae::persist::{load_checkpoint, write_pgm, RunConfig};
use acvae::trainer::{train, RunOutput};
use acvae::{Checkpoint, Error, LatentStats};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acvae", version, about = "Train, inspect and govern action-conditional VAE agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write reports and checkpoints to a directory.
    Train {
        /// TOML run config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Random behaviour policy, representation objective only.
        #[arg(long)]
        vae_only: bool,
        /// Override the configured environment step budget.
        #[arg(long)]
        total_steps: Option<u64>,
    },
    /// Disentanglement and completeness scores as JSON.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a sweep of one latent dim into a PGM strip.
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1-based latent dim.
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
        min: f64,
        #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
        max: f64,
        #[arg(long, default_value_t = 9)]
        steps: usize,
        /// Start from the encoding of the environment reset with this seed
        /// instead of the zero latent.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_action, default_value = "noop")]
        action: DiscreteAction,
        #[arg(long)]
        zero_other_mapped: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-dim spread of decoded image summaries as JSON.
    Effects {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of encoded observations used as traversal bases.
        #[arg(long, default_value_t = 16)]
        bases: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one episode under an override schedule and write its trace.
    Govern {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON schedule: {"entries": [{"start", "end", "dim", "value"}]}.
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the read-only control API.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn parse_action(s: &str) -> Result<DiscreteAction, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown action `{s}`"))
}

/// Missing or unreadable inputs are data errors, not runtime failures.
fn input<T>(path: &Path, r: acvae::error::Result<T>) -> acvae::error::Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn open(path: &Path) -> acvae::error::Result<Checkpoint> {
    input(path, load_checkpoint(path))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> acvae::error::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn encode_reset(ck: &Checkpoint, seed: u64) -> acvae::error::Result<LatentStats> {
    let (obs, _) = SpritesEnv::new(ck.config.env).reset(seed);
    ck.model.encode(&obs)
}

fn run(cli: Cli) -> acvae::error::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            vae_only,
            total_steps,
        } => {
            let mut cfg = match &config {
                Some(p) => input(p, RunConfig::load(p))?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(t) = total_steps {
                cfg.train.total_steps = t;
            }
            cfg.train.vae_only |= vae_only;
            cfg.validate()?;
            let every = (cfg.train.total_steps / cfg.train.steps_per_update() / 20).max(1);
            let ck: Checkpoint = train(&cfg, Some(RunOutput { dir: &out }), |r| {
                if r.update % every == 0 {
                    log::info!(
                        "step {} ac {:.3} kl {:.3} policy {:.4} return {:.3}",
                        r.step,
                        r.ac_loss,
                        r.mean_kl,
                        r.policy_loss,
                        r.mean_return
                    );
                }
            })?;
            log::info!("wrote {} after {} steps", out.join("checkpoint.json").display(), ck.step_count);
        }
        Command::Metrics {
            checkpoint,
            samples,
            seed,
            out,
        } => {
            let ck = open(&checkpoint)?;
            let mut cfg = ck.config.metrics.clone();
            if let Some(n) = samples {
                cfg.samples = n;
            }
            cfg.validate()?;
            let report = evaluate(&ck.model, ck.config.env, &cfg, seed)?;
            log::info!(
                "disentanglement {:.3} completeness {:.3}",
                report.avg_disentanglement,
                report.avg_completeness
            );
            write_json(&out, &report)?;
        }
        Command::Traverse {
            checkpoint,
            dim,
            min,
            max,
            steps,
            seed,
            action,
            zero_other_mapped,
            out,
        } => {
            let ck = open(&checkpoint)?;
            let base = match seed {
                Some(s) => encode_reset(&ck, s)?,
                None => zero_base(ck.model.latent_dim()),
            };
            let mut spec = TraversalSpec::linspace(dim, min, max, steps)?;
            spec.action = action;
            spec.zero_other_mapped = zero_other_mapped;
            let images: Vec<Vec<f64>> = traverse(&ck.model, &base, &spec)?.into_iter().map(|p| p.image).collect();
            write_pgm(&out, &images, (IMAGE_SIDE, IMAGE_SIDE), (1, images.len()))?;
        }
        Command::Effects {
            checkpoint,
            bases,
            seed,
            out,
        } => {
            let ck = open(&checkpoint)?;
            let stats = (0..bases)
                .map(|i| encode_reset(&ck, seed.wrapping_add(i)))
                .collect::<acvae::error::Result<Vec<_>>>()?;
            let grid = TraversalSpec::standard(1).grid;
            write_json(&out, &effect_report(&ck.model, &stats, &grid)?)?;
        }
        Command::Govern {
            checkpoint,
            schedule,
            seed,
            out,
        } => {
            let ck = open(&checkpoint)?;
            let text = input(&schedule, std::fs::read_to_string(&schedule).map_err(Error::from))?;
            let schedule: OverrideSchedule =
                serde_json::from_str(&text).map_err(|e| Error::Usage(format!("schedule: {e}")))?;
            let trace = govern_rollout(&ck.model, ck.config.env, &schedule, seed)?;
            log::info!("horizontal displacement {:.4}", trace.horizontal_displacement());
            write_json(&out, &trace)?;
        }
        Command::Serve { checkpoint, addr } => {
            let ck = checkpoint.as_deref().map(open).transpose()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(acvae_service::serve(addr, ck))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
