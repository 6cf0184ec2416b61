use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use prefrl::commands;
use prefrl::config::ExperimentConfig;
use prefrl::llm::{ChatApi, LlmClient, LlmConfig};
use prefrl::pipeline::{run_pipeline, PipelineOptions};

#[derive(Parser)]
#[command(
    name = "prefrl",
    version,
    about = "Preference-derived rewards, shaping and RL experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts and the manifest.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Validate the config and write the manifest only.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Seeded rollouts of the [rollout] policy.
    Rollout(Common),
    /// Buffer, elicitation, reward model, RL and evaluation.
    Pipeline(Common),
    /// Buffer and one offline elicitation round.
    Elicit(Common),
    /// Reward-model training from fresh or stored preferences.
    TrainReward {
        #[command(flatten)]
        common: Common,
        /// Preference JSONL to train on instead of eliciting.
        #[arg(long)]
        preferences: Option<PathBuf>,
    },
    /// The pipeline without evaluation.
    TrainRl(Common),
    /// Forward, inverse and generation probes.
    Probe(Common),
    /// The pipeline with the reward-versus-value correlation only.
    EvalCorr(Common),
    /// Reshaped-MDP regret terms across lambda on a tabular environment.
    HurlDiagnose(Common),
    /// Reward expressions generated by the chat model.
    RewardCode(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// A chat client when `LLM_API_KEY` is set; commands that need one fail
/// with an error naming the variable otherwise.
fn chat_client(out: &std::path::Path) -> Result<Option<Arc<dyn ChatApi>>> {
    let Ok(mut cfg) = LlmConfig::from_env() else {
        return Ok(None);
    };
    cfg.cache_dir = Some(out.join("llm_cache"));
    let client = LlmClient::new(cfg).context("building the chat client")?;
    Ok(Some(Arc::new(client)))
}

fn options(common: &Common) -> Result<PipelineOptions> {
    Ok(PipelineOptions {
        out_dir: common.out.clone(),
        chat: chat_client(&common.out)?,
        dry_run: common.dry_run,
    })
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Rollout(c) => print(&commands::run_rollout(&load(&c)?, &options(&c)?)?),
        Command::Pipeline(c) => print(&run_pipeline(&load(&c)?, &options(&c)?)?),
        Command::Elicit(c) => print(&commands::run_elicit(&load(&c)?, &options(&c)?)?),
        Command::TrainReward {
            common,
            preferences,
        } => print(&commands::run_train_reward(
            &load(&common)?,
            &options(&common)?,
            preferences.as_deref(),
        )?),
        Command::TrainRl(c) => {
            let mut cfg = load(&c)?;
            cfg.eval.trace_episodes = 0;
            cfg.eval.corr_states = 0;
            print(&run_pipeline(&cfg, &options(&c)?)?)
        }
        Command::Probe(c) => print(&commands::run_probe(&load(&c)?, &options(&c)?)?),
        Command::EvalCorr(c) => {
            let mut cfg = load(&c)?;
            if cfg.eval.corr_states == 0 {
                bail!(
                    "eval-corr needs eval.corr_states > 0 in {}",
                    c.config.display()
                );
            }
            cfg.eval.trace_episodes = 0;
            print(&run_pipeline(&cfg, &options(&c)?)?.correlation)
        }
        Command::HurlDiagnose(c) => print(&commands::run_hurl_diagnose(&load(&c)?, &options(&c)?)?),
        Command::RewardCode(c) => print(&commands::run_reward_code(&load(&c)?, &options(&c)?)?),
    }
}
