use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use musicrl::config::PipelineConfig;
use musicrl::stages::{self, Workdir};
use musicrl_core::datagen::{read_clips, read_prompts, write_clips};
use musicrl_core::policy::{DEFAULT_TEMPERATURE, generate_batch};
use musicrl_core::rewards::{RewardKind, RewardSpec, score_clips, score_csv};
use musicrl_core::rl::Regime;
use musicrl_core::rng::stream;
use musicrl_core::symbolic::Prompt;
use musicrl_service::{AppState, DEFAULT_PORT, PreferenceStore};

#[derive(Parser)]
#[command(
    name = "musicrl",
    version,
    about = "Preference finetuning of a symbolic melody generator"
)]
struct Cli {
    /// Pipeline configuration (TOML); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training corpus and evaluation prompt pool.
    Corpus,
    /// Train the base policy by next-token prediction.
    Pretrain,
    /// Sample clips from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt text or `TONIC,MODE,DENSITY,REGISTER`.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        temperature: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score clips (JSONL) with the automatic rewards; writes CSV to stdout.
    Score {
        #[arg(long)]
        clips: PathBuf,
    },
    /// Calibrate the preference oracle and build the preference dataset.
    PrefsBuild,
    /// Train the reward model.
    RmTrain,
    /// Train the reward-model ablation variants.
    RmAblate,
    /// Finetune the policy under one regime.
    RlTrain {
        /// R, U, RU, QUALITY_ONLY or MULAN_ONLY.
        #[arg(long)]
        regime: String,
    },
    /// Simulated side-by-side evaluation of base, R, U and RU.
    EvalSxs,
    /// Training curves for R, U and RU.
    EvalCurves,
    /// Serve pairs for live preference collection.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "preferences.jsonl")]
        store: PathBuf,
        /// Prompt pool (JSONL); all prompts when absent.
        #[arg(long)]
        prompt_pool: Option<PathBuf>,
    },
    /// Run every stage whose inputs changed.
    Pipeline {
        /// Rerun these stages even when up to date.
        #[arg(long, value_delimiter = ',')]
        force: Vec<String>,
    },
}

fn parse_regime(tag: &str) -> Result<Regime> {
    Ok(
        serde_json::from_value(serde_json::Value::String(tag.to_string()))
            .map_err(|_| musicrl_core::Error::InvalidArgument(format!("unknown regime {tag:?}")))?,
    )
}

fn parse_prompt(text: &str) -> Result<Prompt> {
    Ok(text
        .parse::<Prompt>()
        .or_else(|_| Prompt::parse_structured(text))?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let wd = Workdir::new(&cli.workdir);
    match cli.command {
        Command::Corpus => drop(stages::run_corpus(&cfg, &wd)?),
        Command::Pretrain => drop(stages::run_pretrain(&cfg, &wd)?),
        Command::Generate {
            checkpoint,
            prompt,
            n,
            temperature,
            out,
        } => {
            let params = stages::require_checkpoint(&checkpoint, "policy")?;
            let prompt = parse_prompt(&prompt)?;
            let prompts = vec![prompt; n];
            let mut rngs: Vec<_> = (0..n as u64)
                .map(|i| stream(cfg.seed, &[0x6E4, i]))
                .collect();
            let clips: Vec<_> = generate_batch(&params, &prompts, temperature, &mut rngs)?
                .into_iter()
                .map(|g| g.clip)
                .collect();
            write_clips(&out, &clips)?;
        }
        Command::Score { clips } => {
            let clips = read_clips(&clips)?;
            print!(
                "{}",
                score_csv(&score_clips(&clips, &RewardSpec::of(RewardKind::Combined)))
            );
        }
        Command::PrefsBuild => {
            let report = stages::run_prefs(&cfg, &wd)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::RmTrain => {
            let (_, report) = stages::run_rm(&cfg, &wd)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::RmAblate => print!("{}", stages::run_rm_ablation(&cfg, &wd)?),
        Command::RlTrain { regime } => {
            let report = stages::run_rl(&cfg, &wd, parse_regime(&regime)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::EvalSxs => {
            for r in stages::run_sxs(&cfg, &wd)? {
                let p = r
                    .wilcoxon_p
                    .map(|p| format!("{p:.4}"))
                    .unwrap_or_else(|| "-".into());
                println!(
                    "{} vs {}: win_rate {:.3} W/T/L {}/{}/{} p {p} MOS {:.2}/{:.2}",
                    r.model_x, r.model_y, r.win_rate, r.wins, r.ties, r.losses, r.mos_x, r.mos_y
                );
            }
        }
        Command::EvalCurves => stages::run_curves(&cfg, &wd)?,
        Command::Serve {
            checkpoint,
            port,
            store,
            prompt_pool,
        } => serve(&cfg, checkpoint, port, store, prompt_pool)?,
        Command::Pipeline { force } => {
            let ran = stages::run_pipeline(&cfg, &wd, &force)?;
            println!(
                "ran: {}",
                if ran.is_empty() {
                    "nothing".into()
                } else {
                    ran.join(",")
                }
            );
        }
    }
    Ok(())
}

fn serve(
    cfg: &PipelineConfig,
    checkpoint: PathBuf,
    port: u16,
    store: PathBuf,
    pool: Option<PathBuf>,
) -> Result<()> {
    let pool = match pool {
        Some(path) => read_prompts(&path)?,
        None => Prompt::all().collect(),
    };
    let store = PreferenceStore::open(&store)?;
    let state = Arc::new(AppState::new(None, pool, store, cfg.seed)?);
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async move {
        // Pair requests get 503 until the checkpoint is in memory.
        let loader = Arc::clone(&state);
        tokio::task::spawn_blocking(move || {
            match stages::require_checkpoint(&checkpoint, "policy") {
                Ok(params) => {
                    loader.set_model(params);
                    tracing::info!("checkpoint loaded");
                }
                Err(e) => tracing::error!("checkpoint failed to load: {e:#}"),
            }
        });
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        musicrl_service::serve(addr, state).await.context("serving")
    })
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<musicrl_core::Error>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<musicrl_service::ServiceError>() {
            return match e {
                musicrl_service::ServiceError::Core(inner) => inner.kind(),
                musicrl_service::ServiceError::Io(..) => "io",
                musicrl_service::ServiceError::Corrupt(_) => "corrupt_store",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "other"
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('"', "\\\"");
            eprintln!("error: kind={} msg=\"{msg}\"", error_kind(&err));
            ExitCode::FAILURE
        }
    }
}
