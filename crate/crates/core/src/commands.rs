//! Standalone stages behind the CLI subcommands. Each writes its artifacts
//! and a manifest into `opts.out_dir`.

use std::path::Path;

use serde::Serialize;

use crate::agents::{write_transcripts_jsonl, LlmAgent};
use crate::annotate::{write_discard_report, Elicitor, TaggedTrajectory};
use crate::config::{ChooserKind, ExperimentConfig, RewardKind, RolloutPolicy};
use crate::dataset::{read_preference_jsonl, write_preference_jsonl, write_trajectories_jsonl};
use crate::envs::{progress_oracle, task_description, AnyEnv, ExpertPlanner};
use crate::error::{Error, Result};
use crate::pipeline::{
    base_source, build_annotator, build_env, collect_buffer, fit_bt_reward,
    fit_bt_reward_on_records, need_chat, shaped_source, stage, write_json, write_manifest,
    ExpertPolicy, PipelineOptions,
};
use crate::probes::{
    run_forward_probe, run_generation_probe, run_inverse_probe, write_probe_csv, Chooser,
    Generator, LlmChooser, LlmGenerator, OracleChooser, ProbeConfig, ProbeReport, RandomChooser,
    SimulatorGenerator,
};
use crate::rewardcode::{generate_reward_code, CandidateOutcome, FeatureEnvMap, RewardCodeRequest};
use crate::rl::tabular::{greedy_policy, value_iteration, TabularPolicy};
use crate::rl::{
    actor_critic_train, q_learning, rollouts, write_metrics_csv, ActorPolicy, BtReward, EpsilonMix,
    Policy, QPolicy, RandomPolicy, RewardSource,
};
use crate::shaping::{
    hurl_regret_decomposition, reshape_mdp, write_decomposition_csv, HurlConfig, HurlTerms,
};
use crate::types::{PreferenceRecord, Trajectory};

fn prepare(opts: &PipelineOptions) -> Result<()> {
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))
}

fn write_config(cfg: &ExperimentConfig, out: &Path, artifacts: &mut Vec<String>) -> Result<()> {
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    artifacts.push("config.toml".into());
    Ok(())
}

/// Buffer plus one offline elicitation round.
fn elicit_records(
    cfg: &ExperimentConfig,
    env: &mut AnyEnv,
    opts: &PipelineOptions,
    artifacts: &mut Vec<String>,
) -> Result<(Vec<PreferenceRecord>, Vec<TaggedTrajectory>, usize)> {
    let mut annotator = stage("config", || build_annotator(cfg, opts))?;
    let out = opts.out_dir.as_path();
    let initial = stage("buffer", || collect_buffer(env, cfg))?;
    stage("buffer", || {
        write_trajectories_jsonl(&initial, &out.join("buffer_round000.jsonl"))
    })?;
    artifacts.push("buffer_round000.jsonl".into());
    let buffer: Vec<TaggedTrajectory> = initial
        .into_iter()
        .map(|trajectory| TaggedTrajectory {
            round: 0,
            trajectory,
        })
        .collect();
    let mut elicitor = Elicitor::new(cfg.elicitation.schedule(), cfg.seed ^ 0xE1)?
        .with_goal(task_description(&cfg.env.id))
        .with_hints(cfg.annotator.hints.clone());
    stage("elicit", || elicitor.step(0, &buffer, annotator.as_mut()))?;
    stage("elicit", || {
        write_preference_jsonl(elicitor.records(), &out.join("preferences.jsonl"))
    })?;
    stage("elicit", || {
        write_discard_report(elicitor.discards(), &out.join("discards.jsonl"))
    })?;
    artifacts.extend([
        "preferences.jsonl".to_string(),
        "discards.jsonl".to_string(),
    ]);
    Ok((
        elicitor.records().to_vec(),
        buffer,
        elicitor.discards().len(),
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct ElicitSummary {
    pub records: usize,
    pub discarded: usize,
}

pub fn run_elicit(cfg: &ExperimentConfig, opts: &PipelineOptions) -> Result<ElicitSummary> {
    stage("config", || cfg.validate())?;
    prepare(opts)?;
    let mut artifacts = Vec::new();
    write_config(cfg, &opts.out_dir, &mut artifacts)?;
    let mut env = stage("config", || build_env(cfg))?;
    if opts.dry_run {
        stage("config", || build_annotator(cfg, opts).map(|_| ()))?;
        write_manifest(cfg, artifacts, &opts.out_dir)?;
        return Ok(ElicitSummary {
            records: 0,
            discarded: 0,
        });
    }
    let (records, _, discarded) = elicit_records(cfg, &mut env, opts, &mut artifacts)?;
    write_manifest(cfg, artifacts, &opts.out_dir)?;
    Ok(ElicitSummary {
        records: records.len(),
        discarded,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRewardSummary {
    pub records: usize,
    pub val_accuracy: Option<f64>,
    pub final_train_loss: Option<f64>,
}

/// Trains the reward model from `preferences` when given, otherwise from a
/// fresh buffer and elicitation round.
pub fn run_train_reward(
    cfg: &ExperimentConfig,
    opts: &PipelineOptions,
    preferences: Option<&Path>,
) -> Result<TrainRewardSummary> {
    stage("config", || cfg.validate())?;
    prepare(opts)?;
    let mut artifacts = Vec::new();
    write_config(cfg, &opts.out_dir, &mut artifacts)?;
    let mut env = stage("config", || build_env(cfg))?;
    if opts.dry_run {
        if preferences.is_none() {
            stage("config", || build_annotator(cfg, opts).map(|_| ()))?;
        }
        write_manifest(cfg, artifacts, &opts.out_dir)?;
        return Ok(TrainRewardSummary {
            records: 0,
            val_accuracy: None,
            final_train_loss: None,
        });
    }
    let (records, fitted) = match preferences {
        Some(path) => {
            let records = stage("elicit", || read_preference_jsonl(path))?;
            let fitted = stage("train-reward", || {
                fit_bt_reward_on_records(&records, &env, cfg)
            })?;
            (records, fitted)
        }
        None => {
            let (records, buffer, _) = elicit_records(cfg, &mut env, opts, &mut artifacts)?;
            let fitted = stage("train-reward", || {
                fit_bt_reward(&records, &buffer, &env, cfg)
            })?;
            (records, fitted)
        }
    };
    let (bt, report) = fitted;
    stage("train-reward", || {
        bt.model.save(&opts.out_dir.join("reward_model.json"))
    })?;
    artifacts.push("reward_model.json".into());
    let path = opts.out_dir.join("reward_train.csv");
    stage("train-reward", || {
        let mut w = csv::Writer::from_path(&path)?;
        for e in &report.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    })?;
    artifacts.push("reward_train.csv".into());
    write_manifest(cfg, artifacts, &opts.out_dir)?;
    Ok(TrainRewardSummary {
        records: records.len(),
        val_accuracy: report.final_val_accuracy(),
        final_train_loss: report.final_train_loss(),
    })
}

/// Reward for training a rollout policy; a learned reward is fitted from
/// one offline elicitation round first.
fn training_source(
    cfg: &ExperimentConfig,
    env: &mut AnyEnv,
    opts: &PipelineOptions,
    artifacts: &mut Vec<String>,
) -> Result<RewardSource> {
    let bt: Option<BtReward> = if cfg.rl.reward == RewardKind::Bt {
        let (records, buffer, _) = elicit_records(cfg, env, opts, artifacts)?;
        Some(
            stage("train-reward", || {
                fit_bt_reward(&records, &buffer, env, cfg)
            })?
            .0,
        )
    } else {
        None
    };
    stage("train-rl", || {
        shaped_source(cfg, env, base_source(cfg, env, opts, bt.as_ref())?)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
}

fn with_epsilon<'a, P: Policy<AnyEnv> + 'a>(
    policy: P,
    epsilon: f64,
) -> Box<dyn Policy<AnyEnv> + 'a> {
    if epsilon > 0.0 {
        Box::new(EpsilonMix {
            inner: policy,
            epsilon,
        })
    } else {
        Box::new(policy)
    }
}

/// Seeded rollouts of the [rollout] policy, written to `trajectories.jsonl`.
pub fn run_rollout(cfg: &ExperimentConfig, opts: &PipelineOptions) -> Result<RolloutSummary> {
    stage("config", || cfg.validate())?;
    let r = &cfg.rollout;
    let chat = if r.policy == RolloutPolicy::Llm {
        Some(stage("config", || {
            need_chat(opts, "rollout.policy = \"llm\"")
        })?)
    } else {
        None
    };
    prepare(opts)?;
    let mut artifacts = Vec::new();
    write_config(cfg, &opts.out_dir, &mut artifacts)?;
    let mut env = stage("config", || build_env(cfg))?;
    if opts.dry_run {
        write_manifest(cfg, artifacts, &opts.out_dir)?;
        return Ok(RolloutSummary {
            episodes: 0,
            mean_return: 0.0,
            success_rate: 0.0,
        });
    }
    let seed = cfg.seed ^ 0x201;
    let trajectories = match r.policy {
        RolloutPolicy::Random => stage("rollout", || {
            rollouts(&mut env, &mut RandomPolicy, r.episodes, seed)
        })?,
        RolloutPolicy::Expert => {
            let planner = stage("config", || ExpertPlanner::for_env(&env))?;
            let mut policy = with_epsilon(ExpertPolicy(planner), r.epsilon);
            stage("rollout", || {
                rollouts(&mut env, &mut policy, r.episodes, seed)
            })?
        }
        RolloutPolicy::Q => {
            let source = training_source(cfg, &mut env, opts, &mut artifacts)?;
            let mut q = cfg.rl.q.clone();
            q.rng_seed = cfg.seed;
            let outcome = stage("train-rl", || q_learning(&mut env, &source, &q))?;
            stage("train-rl", || {
                write_metrics_csv(
                    &outcome.metrics,
                    &source.id(),
                    cfg.seed,
                    &opts.out_dir.join("metrics.csv"),
                )
            })?;
            artifacts.push("metrics.csv".into());
            let mut policy = with_epsilon(
                QPolicy {
                    table: &outcome.table,
                },
                r.epsilon,
            );
            stage("rollout", || {
                rollouts(&mut env, &mut policy, r.episodes, seed)
            })?
        }
        RolloutPolicy::A2c => {
            let source = training_source(cfg, &mut env, opts, &mut artifacts)?;
            let mut a2c = cfg.rl.a2c.clone();
            a2c.rng_seed = cfg.seed;
            let outcome = stage("train-rl", || actor_critic_train(&mut env, &source, &a2c))?;
            stage("train-rl", || {
                write_metrics_csv(
                    &outcome.metrics,
                    &source.id(),
                    cfg.seed,
                    &opts.out_dir.join("metrics.csv"),
                )
            })?;
            artifacts.push("metrics.csv".into());
            let actor = ActorPolicy {
                model: outcome.model,
                greedy: false,
            };
            let mut policy = with_epsilon(actor, r.epsilon);
            stage("rollout", || {
                rollouts(&mut env, &mut policy, r.episodes, seed)
            })?
        }
        RolloutPolicy::Llm => {
            let client = chat.expect("checked above");
            let mut agent = stage("config", || {
                LlmAgent::for_env(client, r.agent.clone(), &env)
            })?;
            let out = stage("rollout", || {
                rollouts(&mut env, &mut agent, r.episodes, seed)
            })?;
            stage("rollout", || {
                write_transcripts_jsonl(&agent.transcripts, &opts.out_dir.join("transcripts.jsonl"))
            })?;
            artifacts.push("transcripts.jsonl".into());
            out
        }
    };
    stage("rollout", || {
        write_trajectories_jsonl(&trajectories, &opts.out_dir.join("trajectories.jsonl"))
    })?;
    artifacts.push("trajectories.jsonl".into());
    let n = trajectories.len().max(1) as f64;
    let summary = RolloutSummary {
        episodes: trajectories.len(),
        mean_return: trajectories
            .iter()
            .map(Trajectory::total_env_reward)
            .sum::<f64>()
            / n,
        success_rate: trajectories.iter().filter(|t| t.succeeded()).count() as f64 / n,
    };
    write_json(&summary, &opts.out_dir.join("summary.json"))?;
    artifacts.push("summary.json".into());
    write_manifest(cfg, artifacts, &opts.out_dir)?;
    Ok(summary)
}

/// Forward and inverse probes (plus generation when enabled) on the
/// configured environment, written to `probes.csv`.
pub fn run_probe(cfg: &ExperimentConfig, opts: &PipelineOptions) -> Result<Vec<ProbeReport>> {
    stage("config", || cfg.validate())?;
    let p = &cfg.probe;
    let goal = task_description(&cfg.env.id).to_string();
    let (mut chooser, mut generator): (Box<dyn Chooser<AnyEnv>>, Box<dyn Generator<AnyEnv>>) =
        match p.chooser {
            ChooserKind::Oracle => (Box::new(OracleChooser), Box::new(SimulatorGenerator)),
            ChooserKind::Random => (
                Box::new(RandomChooser::new(cfg.seed ^ 0x9C)),
                Box::new(crate::probes::ConstantGenerator(String::new())),
            ),
            ChooserKind::Llm => {
                let client = stage("config", || need_chat(opts, "probe.chooser = \"llm\""))?;
                (
                    Box::new(LlmChooser {
                        client: client.clone(),
                        task_description: goal.clone(),
                    }),
                    Box::new(LlmGenerator {
                        client,
                        task_description: goal,
                    }),
                )
            }
        };
    prepare(opts)?;
    let mut artifacts = Vec::new();
    write_config(cfg, &opts.out_dir, &mut artifacts)?;
    let mut env = stage("config", || build_env(cfg))?;
    if opts.dry_run {
        write_manifest(cfg, artifacts, &opts.out_dir)?;
        return Ok(Vec::new());
    }
    let pc = ProbeConfig {
        history_len: p.history_len,
        max_prefix: p.max_prefix,
    };
    let mut reports = vec![
        stage("probe", || {
            run_forward_probe(&mut env, chooser.as_mut(), p.n_queries, cfg.seed, &pc)
        })?,
        stage("probe", || {
            run_inverse_probe(&mut env, chooser.as_mut(), p.n_queries, cfg.seed ^ 1, &pc)
        })?,
    ];
    if p.generation {
        reports.push(stage("probe", || {
            run_generation_probe(&mut env, generator.as_mut(), p.n_queries, cfg.seed ^ 2, &pc)
        })?);
    }
    stage("probe", || {
        write_probe_csv(&reports, &opts.out_dir.join("probes.csv"))
    })?;
    artifacts.push("probes.csv".into());
    write_manifest(cfg, artifacts, &opts.out_dir)?;
    Ok(reports)
}

pub const DIAGNOSE_LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Regret-bound terms of the reshaped MDP across lambda, with the optimal
/// values of the original MDP as heuristic and the reshaped-greedy policy.
pub fn run_hurl_diagnose(cfg: &ExperimentConfig, opts: &PipelineOptions) -> Result<Vec<HurlTerms>> {
    stage("config", || cfg.validate())?;
    let env = stage("config", || build_env(cfg))?;
    let AnyEnv::Tabular(t) = &env else {
        return Err(Error::Stage {
            stage: "config",
            source: Box::new(Error::Config(format!(
                "hurl-diagnose needs a tabular environment, not {}",
                cfg.env.id
            ))),
        });
    };
    let mdp = t.mdp().clone();
    prepare(opts)?;
    let mut artifacts = Vec::new();
    write_config(cfg, &opts.out_dir, &mut artifacts)?;
    if opts.dry_run {
        write_manifest(cfg, artifacts, &opts.out_dir)?;
        return Ok(Vec::new());
    }
    let rows = stage("eval", || {
        let heuristic = value_iteration(&mdp, 1e-12)?.values;
        DIAGNOSE_LAMBDAS
            .iter()
            .map(|&lambda| {
                let hc = HurlConfig::for_mdp(&mdp, lambda, heuristic.clone())?;
                let reshaped = reshape_mdp(&mdp, &hc)?;
                let v = value_iteration(&reshaped, 1e-12)?.values;
                let policy =
                    TabularPolicy::deterministic(&greedy_policy(&reshaped, &v), mdp.n_actions)?;
                hurl_regret_decomposition(&mdp, &hc, &policy, &mdp.initial_distribution)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    stage("eval", || {
        write_decomposition_csv(&rows, &opts.out_dir.join("hurl_terms.csv"))
    })?;
    artifacts.push("hurl_terms.csv".into());
    write_manifest(cfg, artifacts, &opts.out_dir)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct RewardCodeSummary {
    pub best: String,
    pub best_index: usize,
    pub best_score: f64,
    pub parse_failures: usize,
    pub probe_states: usize,
    pub candidates: Vec<CandidateOutcome>,
}

/// Asks the chat model for reward expressions and keeps the one whose
/// outputs rank probe states most like the progress oracle.
pub fn run_reward_code(
    cfg: &ExperimentConfig,
    opts: &PipelineOptions,
) -> Result<RewardCodeSummary> {
    stage("config", || cfg.validate())?;
    let client = stage("config", || need_chat(opts, "reward-code"))?;
    prepare(opts)?;
    let mut artifacts = Vec::new();
    write_config(cfg, &opts.out_dir, &mut artifacts)?;
    let mut env = stage("config", || build_env(cfg))?;
    let features = stage("config", || FeatureEnvMap::for_env(&env))?;
    if opts.dry_run {
        write_manifest(cfg, artifacts, &opts.out_dir)?;
        return Ok(RewardCodeSummary {
            best: String::new(),
            best_index: 0,
            best_score: 0.0,
            parse_failures: 0,
            probe_states: 0,
            candidates: Vec::new(),
        });
    }
    let rc = &cfg.reward_code;
    let probe = stage("buffer", || {
        let mut policy = EpsilonMix {
            inner: ExpertPolicy(ExpertPlanner::for_env(&env)?),
            epsilon: 0.3,
        };
        let mut trajectories =
            rollouts(&mut env, &mut policy, rc.probe_episodes, cfg.seed ^ 0x5C0)?;
        trajectories.extend(rollouts(
            &mut env,
            &mut RandomPolicy,
            rc.probe_episodes,
            cfg.seed ^ 0x5C1,
        )?);
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for t in &trajectories {
            for obs in t.observations() {
                if seen.insert(obs.state_key.clone()) {
                    out.push((obs.features.clone(), progress_oracle(obs)?));
                }
            }
        }
        Ok(out)
    })?;
    let request = RewardCodeRequest {
        task_description: task_description(&cfg.env.id).to_string(),
        knowledge: rc.knowledge.clone(),
        n_candidates: rc.n_candidates,
        temperature: rc.temperature,
    };
    let report = stage("reward-code", || {
        generate_reward_code(&request, &features, client.as_ref(), &probe)
    })?;
    let summary = RewardCodeSummary {
        best: report.best.to_source(),
        best_index: report.best_index,
        best_score: report.best_score,
        parse_failures: report.parse_failures,
        probe_states: probe.len(),
        candidates: report.candidates,
    };
    write_json(&summary, &opts.out_dir.join("reward_code.json"))?;
    artifacts.push("reward_code.json".into());
    write_manifest(cfg, artifacts, &opts.out_dir)?;
    Ok(summary)
}
