//! End-to-end run: buffer collection, preference elicitation, reward-model
//! training, RL training, and evaluation. Every artifact lands in one output
//! directory next to a manifest naming the config digest and seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::annotate::{
    write_discard_report, Annotator, DiscardRecord, Elicitor, EmbeddingScorer, LlmAnnotator,
    NoisyOracle, OracleAnnotator, PromptTemplate, RandomAnnotator, RoundReport, ScalarScorer,
    SequenceOracle, TaggedTrajectory,
};
use crate::config::{
    AnnotatorKind, BufferPolicy, ExperimentConfig, RewardKind, RlAlgo, ShapingKind,
};
use crate::dataset::{write_preference_jsonl, write_trajectories_jsonl};
use crate::envs::{task_description, AnyEnv, EnvEvent, Environment, ExpertPlanner};
use crate::error::{Error, Result};
use crate::eval::{
    collect_probe_states, correlation_vs_training_stage, episode_reward_trace,
    write_correlation_csv, write_trace_csv, CorrelationRow,
};
use crate::llm::ChatApi;
use crate::rewardcode::{parse_reward_expr, FeatureEnvMap};
use crate::rewardmodel::{
    standardize_rewards, train_reward_model, FeatureSpec, RewardModel, TrainReport,
};
use crate::rl::{
    q_learning, rollouts, steps_to_success, tabular, write_metrics_csv, AcTrainer, ActorPolicy,
    BtReward, EpisodeMetrics, EpsilonMix, Policy, RandomPolicy, RewardSource, Shaping,
};
use crate::types::{Observation, PreferenceRecord, Trajectory};

/// Scripted policy for buffers and traces.
pub struct ExpertPolicy(pub ExpertPlanner);

impl Policy<AnyEnv> for ExpertPolicy {
    fn act(&mut self, env: &AnyEnv, _obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<usize> {
        env.expert_action(&mut self.0)
    }
}

#[derive(Clone, Default)]
pub struct PipelineOptions {
    pub out_dir: PathBuf,
    /// Chat service for LLM annotators and scorers.
    pub chat: Option<Arc<dyn ChatApi>>,
    /// Validate and write the manifest without running any stage.
    pub dry_run: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_digest: String,
    pub seed: u64,
    pub env_id: String,
    pub stages: Vec<&'static str>,
    pub artifacts: Vec<String>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TracePeaks {
    pub episodes: usize,
    /// Episodes in which every subgoal event that occurred is a reward peak.
    pub all_events_peak: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PipelineSummary {
    pub config_digest: String,
    pub seed: u64,
    pub reward_source: String,
    pub preference_records: usize,
    pub discarded_queries: usize,
    pub elicitation_rounds: Vec<RoundReport>,
    pub reward_model_val_accuracy: Option<f64>,
    pub rl_steps: u64,
    pub episodes: usize,
    pub final_success_rate: Option<f64>,
    pub steps_to_success: Option<u64>,
    pub trace_peaks: Option<TracePeaks>,
    pub correlation: Vec<CorrelationRow>,
}

pub(crate) fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

/// Stages the config would run, in order.
pub fn planned_stages(cfg: &ExperimentConfig) -> Vec<&'static str> {
    let mut out = Vec::new();
    if cfg.rl.reward == RewardKind::Bt {
        out.extend(["buffer", "elicit", "train-reward"]);
    }
    if cfg.rl.algo != RlAlgo::None {
        out.push("train-rl");
    }
    if cfg.eval.trace_episodes > 0 || cfg.eval.corr_states > 0 {
        out.push("eval");
    }
    out
}

pub fn build_env(cfg: &ExperimentConfig) -> Result<AnyEnv> {
    let env = AnyEnv::from_id(&cfg.env.id)?;
    match cfg.env.max_steps {
        Some(n) => env.with_max_steps(n),
        None => Ok(env),
    }
}

pub(crate) fn need_chat(opts: &PipelineOptions, what: &str) -> Result<Arc<dyn ChatApi>> {
    opts.chat
        .clone()
        .ok_or_else(|| Error::Config(format!("{what} needs a chat client; set LLM_API_KEY")))
}

pub fn build_annotator(
    cfg: &ExperimentConfig,
    opts: &PipelineOptions,
) -> Result<Box<dyn Annotator>> {
    let a = &cfg.annotator;
    Ok(match a.kind {
        AnnotatorKind::Oracle => Box::new(OracleAnnotator { epsilon: a.epsilon }),
        AnnotatorKind::Sequence => Box::new(SequenceOracle { epsilon: a.epsilon }),
        AnnotatorKind::Noisy => {
            Box::new(NoisyOracle::new(a.epsilon, a.flip_prob, cfg.seed ^ 0xA11)?)
        }
        AnnotatorKind::Random => Box::new(RandomAnnotator::new(cfg.seed ^ 0xA11)),
        AnnotatorKind::Llm => {
            let template = match &a.template {
                Some(t) => PromptTemplate::resolve(t)?,
                None => PromptTemplate::default_pair(&cfg.env.id),
            };
            let client = need_chat(opts, "annotator.kind = \"llm\"")?;
            Box::new(LlmAnnotator::new(client, template)?.sequence(a.sequence_prompt))
        }
    })
}

/// Initial elicitation buffer: `buffer_episodes` from the configured policy
/// plus `random_episodes` uniformly random ones.
pub fn collect_buffer(env: &mut AnyEnv, cfg: &ExperimentConfig) -> Result<Vec<Trajectory>> {
    let e = &cfg.elicitation;
    let mut out = match e.buffer_policy {
        BufferPolicy::Random => {
            rollouts(env, &mut RandomPolicy, e.buffer_episodes, cfg.seed ^ 0xB0F)?
        }
        BufferPolicy::ExpertMix => {
            let mut policy = EpsilonMix {
                inner: ExpertPolicy(ExpertPlanner::for_env(env)?),
                epsilon: e.buffer_epsilon,
            };
            rollouts(env, &mut policy, e.buffer_episodes, cfg.seed ^ 0xB0F)?
        }
    };
    if e.random_episodes > 0 {
        out.extend(rollouts(
            env,
            &mut RandomPolicy,
            e.random_episodes,
            cfg.seed ^ 0xB1F,
        )?);
    }
    Ok(out)
}

/// Window features for every prefix of every trajectory, used to
/// standardize and offset the learned reward.
fn reference_features(bt: &BtReward, buffer: &[TaggedTrajectory]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for t in buffer {
        let obs: Vec<Observation> = t.trajectory.observations().into_iter().cloned().collect();
        for i in 1..=obs.len() {
            out.push(bt.features(&obs[..i])?);
        }
    }
    Ok(out)
}

/// Fits the reward model on all records so far and wraps it as an RL reward.
pub fn fit_bt_reward(
    records: &[PreferenceRecord],
    buffer: &[TaggedTrajectory],
    env: &AnyEnv,
    cfg: &ExperimentConfig,
) -> Result<(BtReward, TrainReport)> {
    fit_with_reference(records, env, cfg, |bt| reference_features(bt, buffer))
}

/// Like [`fit_bt_reward`], standardizing over the records' own windows.
pub fn fit_bt_reward_on_records(
    records: &[PreferenceRecord],
    env: &AnyEnv,
    cfg: &ExperimentConfig,
) -> Result<(BtReward, TrainReport)> {
    fit_with_reference(records, env, cfg, |bt| {
        records
            .iter()
            .flat_map(|r| [&r.window_a, &r.window_b])
            .map(|w| bt.features(w.observations()))
            .collect()
    })
}

fn fit_with_reference(
    records: &[PreferenceRecord],
    env: &AnyEnv,
    cfg: &ExperimentConfig,
    reference: impl FnOnce(&BtReward) -> Result<Vec<Vec<f64>>>,
) -> Result<(BtReward, TrainReport)> {
    let spec = FeatureSpec::new(
        cfg.env.id.clone(),
        env.spec().feature_dim,
        cfg.elicitation.window_k,
    )?;
    let (model, report) =
        train_reward_model(records, &spec, &cfg.reward_model.train_config(cfg.seed))?;
    let mut bt = BtReward::new(model);
    let reference = reference(&bt)?;
    let mut model: RewardModel = (*bt.model).clone();
    if cfg.reward_model.standardize {
        model.standardize = Some(standardize_rewards(&model.params, &reference)?);
    }
    let max_ref = reference
        .iter()
        .map(|x| model.reward_features(x))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    bt = BtReward::new(model);
    bt.coef = cfg.reward_model.coef;
    bt.offset = max_ref;
    bt.add_env_reward = cfg.reward_model.add_env_reward;
    Ok((bt, report))
}

pub(crate) fn base_source(
    cfg: &ExperimentConfig,
    env: &AnyEnv,
    opts: &PipelineOptions,
    bt: Option<&BtReward>,
) -> Result<RewardSource> {
    let goal = task_description(&cfg.env.id).to_string();
    Ok(match cfg.rl.reward {
        RewardKind::Env => RewardSource::Env,
        RewardKind::Bt => RewardSource::BtModel(
            bt.cloned()
                .ok_or_else(|| Error::invalid("no reward model fitted"))?,
        ),
        RewardKind::Dsl => {
            let src = cfg.rl.expression.as_deref().unwrap_or_default();
            let map = FeatureEnvMap::new(env.feature_names())?;
            RewardSource::DslExpr(Arc::new(parse_reward_expr(src, &map)?))
        }
        RewardKind::Scalar => {
            let template = match &cfg.annotator.template {
                Some(t) => PromptTemplate::resolve(t)?,
                None => PromptTemplate::default_scalar(&cfg.env.id),
            };
            RewardSource::ScalarAnnotator(Arc::new(ScalarScorer {
                client: need_chat(opts, "rl.reward = \"scalar\"")?,
                template,
                goal_text: goal,
                hints: cfg.annotator.hints.clone(),
            }))
        }
        RewardKind::Embedding => RewardSource::ScalarAnnotator(Arc::new(EmbeddingScorer {
            client: need_chat(opts, "rl.reward = \"embedding\"")?,
            goal_text: goal,
        })),
    })
}

pub(crate) fn shaped_source(
    cfg: &ExperimentConfig,
    env: &AnyEnv,
    inner: RewardSource,
) -> Result<RewardSource> {
    Ok(match cfg.shaping.kind {
        ShapingKind::None => inner,
        ShapingKind::Count => RewardSource::shaped(
            inner,
            Shaping::Count {
                beta: cfg.shaping.beta,
            },
        ),
        ShapingKind::Hurl => {
            let AnyEnv::Tabular(t) = env else {
                return Err(Error::Config(
                    "hurl shaping needs a tabular environment".into(),
                ));
            };
            let heuristic = tabular::value_iteration(t.mdp(), 1e-10)?.values;
            RewardSource::shaped(
                inner,
                Shaping::Hurl {
                    lambda: cfg.shaping.lambda,
                    heuristic: Arc::new(heuristic),
                },
            )
        }
    })
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_reward_train_csv(report: &TrainReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in &report.epochs {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ElicitationRow {
    round: usize,
    labeled: usize,
    discarded: usize,
    dataset_size: usize,
}

/// Episodes whose subgoal events each exceed the mean of the 5 preceding
/// rewards; episodes without any subgoal event are not counted as peaks.
fn trace_eval(
    env: &mut AnyEnv,
    source: &RewardSource,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    artifacts: &mut Vec<String>,
) -> Result<TracePeaks> {
    let dir = out_dir.join("traces");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut peaks = TracePeaks::default();
    for i in 0..cfg.eval.trace_episodes {
        let mut policy = ExpertPolicy(ExpertPlanner::for_env(env)?);
        let trace = episode_reward_trace(
            env,
            source,
            &mut policy,
            cfg.seed.wrapping_add(1000 + i as u64),
            cfg.rl.a2c.gamma,
        )?;
        let path = dir.join(format!("episode_{i:03}.csv"));
        write_trace_csv(&trace, &path)?;
        artifacts.push(format!("traces/episode_{i:03}.csv"));
        let checks: Vec<bool> = [
            EnvEvent::KeyPickup,
            EnvEvent::DoorOpen,
            EnvEvent::Goal,
            EnvEvent::Solved,
        ]
        .into_iter()
        .filter_map(|e| trace.peaks_at(e, 5))
        .collect();
        peaks.episodes += 1;
        if !checks.is_empty() && checks.iter().all(|&b| b) {
            peaks.all_events_peak += 1;
        }
    }
    Ok(peaks)
}

/// Reward-versus-value correlation over the actor-critic checkpoints.
fn correlation_eval(
    env: &mut AnyEnv,
    source: &RewardSource,
    checkpoints: Vec<(String, ActorPolicy)>,
    cfg: &ExperimentConfig,
) -> Result<Vec<CorrelationRow>> {
    let base = match source {
        RewardSource::Shaped { inner, .. } => inner.as_ref(),
        other => other,
    };
    let score: Box<dyn Fn(&AnyEnv) -> Result<f64>> = match base {
        RewardSource::BtModel(bt) => {
            let bt = bt.clone();
            Box::new(move |e: &AnyEnv| bt.model.reward_features(&bt.features(&[e.observe()])?))
        }
        RewardSource::DslExpr(expr) => {
            let expr = expr.clone();
            Box::new(move |e: &AnyEnv| Ok(expr.eval_features(&e.observe().features).value))
        }
        other => {
            return Err(Error::Config(format!(
                "correlation needs a learned or expression reward, not {}",
                other.id()
            )))
        }
    };
    let mut policies: Vec<ActorPolicy> = checkpoints.iter().map(|(_, p)| p.clone()).collect();
    let mut states = collect_probe_states(
        env,
        &mut policies,
        cfg.eval.corr_episodes,
        cfg.eval.corr_states,
        cfg.seed ^ 0xC0,
    )?;
    for s in &mut states {
        s.refresh_budget()?;
    }
    let mut checkpoints = checkpoints;
    correlation_vs_training_stage(
        &states,
        &mut checkpoints,
        |e: &AnyEnv| score(e),
        cfg.eval.mc_rollouts,
        cfg.eval.mc_gamma,
        cfg.seed ^ 0xC1,
    )
}

pub fn write_manifest(
    cfg: &ExperimentConfig,
    artifacts: Vec<String>,
    out_dir: &Path,
) -> Result<Manifest> {
    let manifest = Manifest {
        tool: "prefrl",
        version: env!("CARGO_PKG_VERSION"),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        env_id: cfg.env.id.clone(),
        stages: planned_stages(cfg),
        artifacts,
        config: cfg.clone(),
    };
    write_json(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn run_pipeline(cfg: &ExperimentConfig, opts: &PipelineOptions) -> Result<PipelineSummary> {
    stage("config", || cfg.validate())?;
    let out = opts.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut env = stage("config", || build_env(cfg))?;
    let mut annotator = if cfg.rl.reward == RewardKind::Bt {
        Some(stage("config", || build_annotator(cfg, opts))?)
    } else {
        None
    };
    let toml_path = out.join("config.toml");
    std::fs::write(&toml_path, cfg.to_toml()).map_err(|e| Error::io(&toml_path, e))?;
    let mut artifacts = vec!["config.toml".to_string()];
    let mut summary = PipelineSummary {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        ..Default::default()
    };
    if opts.dry_run {
        if cfg.rl.reward != RewardKind::Bt {
            stage("config", || base_source(cfg, &env, opts, None).map(|_| ()))?;
        }
        write_manifest(cfg, artifacts, out)?;
        return Ok(summary);
    }

    let mut buffer: Vec<TaggedTrajectory> = Vec::new();
    let mut elicitor = Elicitor::new(cfg.elicitation.schedule(), cfg.seed ^ 0xE1)?
        .with_goal(task_description(&cfg.env.id))
        .with_hints(cfg.annotator.hints.clone());
    let mut elicitation_rows = Vec::new();
    let mut bt: Option<BtReward> = None;
    let mut last_report: Option<TrainReport> = None;

    if cfg.rl.reward == RewardKind::Bt {
        let initial = stage("buffer", || collect_buffer(&mut env, cfg))?;
        stage("buffer", || {
            write_trajectories_jsonl(&initial, &out.join("buffer_round000.jsonl"))
        })?;
        artifacts.push("buffer_round000.jsonl".into());
        buffer.extend(initial.into_iter().map(|trajectory| TaggedTrajectory {
            round: 0,
            trajectory,
        }));
    }

    // Elicits when due at `round` and refits the reward on all records.
    let mut refresh = |round: usize,
                       buffer: &[TaggedTrajectory],
                       env: &AnyEnv,
                       bt: &mut Option<BtReward>,
                       last_report: &mut Option<TrainReport>,
                       rows: &mut Vec<ElicitationRow>,
                       reports: &mut Vec<RoundReport>|
     -> Result<bool> {
        let Some(annotator) = annotator.as_mut() else {
            return Ok(false);
        };
        let report = stage("elicit", || {
            elicitor.step(round, buffer, annotator.as_mut())
        })?;
        let Some(report) = report else {
            return Ok(false);
        };
        rows.push(ElicitationRow {
            round,
            labeled: report.labeled,
            discarded: report.discarded,
            dataset_size: elicitor.records().len(),
        });
        reports.push(report);
        let (fitted, train) = stage("train-reward", || {
            fit_bt_reward(elicitor.records(), buffer, env, cfg)
        })?;
        *bt = Some(fitted);
        *last_report = Some(train);
        Ok(true)
    };

    let mut reports = Vec::new();
    refresh(
        0,
        &buffer,
        &env,
        &mut bt,
        &mut last_report,
        &mut elicitation_rows,
        &mut reports,
    )?;
    let mut source = stage("train-rl", || {
        let base = base_source(cfg, &env, opts, bt.as_ref())?;
        shaped_source(cfg, &env, base)
    })?;

    let mut metrics: Vec<EpisodeMetrics> = Vec::new();
    let mut ac_checkpoints: Vec<(String, ActorPolicy)> = Vec::new();
    match cfg.rl.algo {
        RlAlgo::None => {}
        RlAlgo::Q => {
            let mut q = cfg.rl.q.clone();
            q.rng_seed = cfg.seed;
            let outcome = stage("train-rl", || q_learning(&mut env, &source, &q))?;
            summary.rl_steps = outcome.metrics.last().map_or(0, |m| m.step);
            metrics = outcome.metrics;
        }
        RlAlgo::A2c => {
            let mut a2c = cfg.rl.a2c.clone();
            a2c.rng_seed = cfg.seed;
            let mut trainer = stage("train-rl", || AcTrainer::new(&mut env, &a2c))?;
            let rounds = cfg.rl.rounds as u64;
            let chunk = a2c.total_steps.div_ceil(rounds);
            for round in 0..cfg.rl.rounds {
                if round > 0
                    && refresh(
                        round,
                        &buffer,
                        &env,
                        &mut bt,
                        &mut last_report,
                        &mut elicitation_rows,
                        &mut reports,
                    )?
                {
                    source = stage("train-rl", || {
                        shaped_source(cfg, &env, base_source(cfg, &env, opts, bt.as_ref())?)
                    })?;
                }
                stage("train-rl", || {
                    trainer.train_until(&mut env, &source, chunk * (round as u64 + 1))
                })?;
                if trainer.is_stopped() {
                    break;
                }
                let online = cfg.elicitation.mode == crate::annotate::ElicitationMode::Online;
                if online && cfg.rl.reward == RewardKind::Bt && round + 1 < cfg.rl.rounds {
                    let mut policy = ActorPolicy {
                        model: trainer.model().clone(),
                        greedy: false,
                    };
                    let seed = cfg.seed.wrapping_add(0x5EED * (round as u64 + 1));
                    let fresh = stage("buffer", || {
                        rollouts(&mut env, &mut policy, cfg.elicitation.buffer_episodes, seed)
                    })?;
                    buffer.extend(fresh.into_iter().map(|trajectory| TaggedTrajectory {
                        round: round + 1,
                        trajectory,
                    }));
                }
            }
            let outcome = trainer.finish();
            summary.rl_steps = outcome.steps;
            ac_checkpoints = outcome
                .checkpoints
                .into_iter()
                .map(|c| {
                    (
                        format!("step{}", c.step),
                        ActorPolicy {
                            model: c.model,
                            greedy: false,
                        },
                    )
                })
                .collect();
            metrics = outcome.metrics;
        }
    }

    if !elicitor.records().is_empty() {
        stage("elicit", || {
            write_preference_jsonl(elicitor.records(), &out.join("preferences.jsonl"))
        })?;
        artifacts.push("preferences.jsonl".into());
    }
    if cfg.rl.reward == RewardKind::Bt {
        let discards: &[DiscardRecord] = elicitor.discards();
        stage("elicit", || {
            write_discard_report(discards, &out.join("discards.jsonl"))
        })?;
        artifacts.push("discards.jsonl".into());
        let path = out.join("elicitation.csv");
        stage("elicit", || {
            let mut w = csv::Writer::from_path(&path)?;
            for row in &elicitation_rows {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))
        })?;
        artifacts.push("elicitation.csv".into());
    }
    if let (Some(bt), Some(report)) = (&bt, &last_report) {
        stage("train-reward", || {
            bt.model.save(&out.join("reward_model.json"))
        })?;
        stage("train-reward", || {
            write_reward_train_csv(report, &out.join("reward_train.csv"))
        })?;
        artifacts.extend([
            "reward_model.json".to_string(),
            "reward_train.csv".to_string(),
        ]);
        summary.reward_model_val_accuracy = report.final_val_accuracy();
    }
    if cfg.rl.algo != RlAlgo::None {
        stage("train-rl", || {
            write_metrics_csv(&metrics, &source.id(), cfg.seed, &out.join("metrics.csv"))
        })?;
        artifacts.push("metrics.csv".into());
        let a2c = &cfg.rl.a2c;
        summary.final_success_rate = metrics.last().map(|m| m.success_rate);
        summary.steps_to_success =
            steps_to_success(&metrics, cfg.rl.success_threshold, a2c.success_window);
        summary.episodes = metrics.len();
    }

    if cfg.eval.trace_episodes > 0 {
        summary.trace_peaks = Some(stage("eval", || {
            trace_eval(&mut env, &source, cfg, out, &mut artifacts)
        })?);
    }
    if cfg.eval.corr_states > 0 {
        let rows = stage("eval", || {
            correlation_eval(&mut env, &source, ac_checkpoints, cfg)
        })?;
        stage("eval", || {
            write_correlation_csv(&rows, &out.join("correlation.csv"))
        })?;
        artifacts.push("correlation.csv".into());
        summary.correlation = rows;
    }

    summary.reward_source = source.id();
    summary.preference_records = elicitor.records().len();
    summary.discarded_queries = elicitor.discards().len();
    summary.elicitation_rounds = reports;
    write_json(&summary, &out.join("summary.json"))?;
    artifacts.push("summary.json".into());
    write_manifest(cfg, artifacts, out)?;
    Ok(summary)
}
