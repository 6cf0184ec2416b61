//! Experiment configuration: one TOML file with sections [env],
//! [annotator], [elicitation], [reward_model], [shaping], [rl], [eval],
//! plus [rollout], [probe] and [reward_code] for the standalone commands.
//! Unknown keys anywhere are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::AgentPromptConfig;
use crate::annotate::{ElicitationMode, ElicitationSchedule};
use crate::error::{Error, Result};
use crate::rewardmodel::TrainConfig;
use crate::rl::{AcConfig, QConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub env: EnvSection,
    #[serde(default)]
    pub annotator: AnnotatorSection,
    #[serde(default)]
    pub elicitation: ElicitationSection,
    #[serde(default)]
    pub reward_model: RewardModelSection,
    #[serde(default)]
    pub shaping: ShapingSection,
    #[serde(default)]
    pub rl: RlSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub reward_code: RewardCodeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    /// `wordle`, `eldrow`, `doorkey`, `corridor`, or `tabular:<name>`.
    pub id: String,
    /// Episode step limit; the environment default when absent.
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorKind {
    Oracle,
    Noisy,
    Sequence,
    Random,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorSection {
    pub kind: AnnotatorKind,
    pub epsilon: f64,
    pub flip_prob: f64,
    /// Builtin template id or template file path (LLM annotators).
    pub template: Option<String>,
    pub hints: Vec<String>,
    /// Render windows as numbered step lists with the repetition-avoidance prompt.
    pub sequence_prompt: bool,
}

impl Default for AnnotatorSection {
    fn default() -> Self {
        Self {
            kind: AnnotatorKind::Oracle,
            epsilon: 0.0,
            flip_prob: 0.0,
            template: None,
            hints: Vec::new(),
            sequence_prompt: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    Random,
    /// The environment's planner with epsilon-random actions.
    ExpertMix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElicitationSection {
    pub mode: ElicitationMode,
    pub batch_size: usize,
    pub refresh_interval: usize,
    pub window_k: usize,
    /// Episodes in the initial buffer and in each online refresh buffer.
    pub buffer_episodes: usize,
    pub buffer_policy: BufferPolicy,
    pub buffer_epsilon: f64,
    /// Extra uniformly random episodes mixed into the initial buffer.
    pub random_episodes: usize,
}

impl Default for ElicitationSection {
    fn default() -> Self {
        Self {
            mode: ElicitationMode::Offline,
            batch_size: 500,
            refresh_interval: 10,
            window_k: 1,
            buffer_episodes: 100,
            buffer_policy: BufferPolicy::Random,
            buffer_epsilon: 0.3,
            random_episodes: 0,
        }
    }
}

impl ElicitationSection {
    pub fn schedule(&self) -> ElicitationSchedule {
        ElicitationSchedule {
            mode: self.mode,
            batch_size: self.batch_size,
            refresh_interval: self.refresh_interval,
            window_k: self.window_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardModelSection {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub l2: f64,
    /// Standardize outputs over the elicitation buffer.
    pub standardize: bool,
    /// RL reward is `coef * (r - max_ref) + env_reward`, so the learned
    /// part is never positive.
    pub coef: f64,
    pub add_env_reward: bool,
}

impl Default for RewardModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            hidden: t.hidden,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            validation_fraction: t.validation_fraction,
            l2: t.l2,
            standardize: true,
            coef: 0.1,
            add_env_reward: true,
        }
    }
}

impl RewardModelSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            validation_fraction: self.validation_fraction,
            rng_seed: seed,
            l2: self.l2,
            hidden: self.hidden.clone(),
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapingKind {
    None,
    Count,
    Hurl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingSection {
    pub kind: ShapingKind,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for ShapingSection {
    fn default() -> Self {
        Self {
            kind: ShapingKind::None,
            beta: 1.0,
            lambda: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RlAlgo {
    A2c,
    Q,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Env,
    Bt,
    Dsl,
    Scalar,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub algo: RlAlgo,
    pub reward: RewardKind,
    /// Reward expression for `reward = "dsl"`.
    pub expression: Option<String>,
    /// Policy-update rounds; online elicitation refreshes between rounds.
    pub rounds: usize,
    pub success_threshold: f64,
    pub a2c: AcConfig,
    pub q: QConfig,
}

impl Default for RlSection {
    fn default() -> Self {
        Self {
            algo: RlAlgo::A2c,
            reward: RewardKind::Bt,
            expression: None,
            rounds: 1,
            success_threshold: 0.9,
            a2c: AcConfig::default(),
            q: QConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Expert episodes traced under the trained reward.
    pub trace_episodes: usize,
    /// Probe states for the reward-versus-value correlation across the
    /// actor-critic checkpoints in `rl.a2c.checkpoint_steps`; 0 disables it.
    pub corr_states: usize,
    /// Rollouts per checkpoint used to collect probe states.
    pub corr_episodes: usize,
    pub mc_rollouts: usize,
    /// Discount for the Monte-Carlo value estimates.
    pub mc_gamma: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trace_episodes: 0,
            corr_states: 0,
            corr_episodes: 20,
            mc_rollouts: 32,
            mc_gamma: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutPolicy {
    Random,
    /// The environment's planner.
    Expert,
    /// Tabular Q-learning trained on the [rl] reward, then greedy.
    Q,
    /// Actor-critic trained on the [rl] reward, then sampled.
    A2c,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub policy: RolloutPolicy,
    pub episodes: usize,
    /// Probability of replacing the policy's action with a random one.
    pub epsilon: f64,
    pub agent: AgentPromptConfig,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            policy: RolloutPolicy::Random,
            episodes: 10,
            epsilon: 0.0,
            agent: AgentPromptConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChooserKind {
    Oracle,
    Random,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub chooser: ChooserKind,
    pub n_queries: usize,
    pub history_len: usize,
    pub max_prefix: usize,
    /// Also run the free-generation probe.
    pub generation: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            chooser: ChooserKind::Oracle,
            n_queries: 200,
            history_len: 0,
            max_prefix: 20,
            generation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardCodeSection {
    pub n_candidates: usize,
    pub knowledge: String,
    pub temperature: f64,
    /// Expert and random episodes whose states score the candidates.
    pub probe_episodes: usize,
}

impl Default for RewardCodeSection {
    fn default() -> Self {
        Self {
            n_candidates: 4,
            knowledge: String::new(),
            temperature: 0.7,
            probe_episodes: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        crate::envs::AnyEnv::from_id(&self.env.id)?;
        self.elicitation.schedule().validate()?;
        if !(0.0..=0.5).contains(&self.annotator.flip_prob) {
            return Err(Error::Config(
                "annotator.flip_prob must lie in [0, 0.5]".into(),
            ));
        }
        if !(self.annotator.epsilon >= 0.0) {
            return Err(Error::Config(
                "annotator.epsilon must be non-negative".into(),
            ));
        }
        if self.rl.rounds == 0 {
            return Err(Error::Config("rl.rounds must be at least 1".into()));
        }
        if self.rl.reward == RewardKind::Dsl && self.rl.expression.is_none() {
            return Err(Error::Config(
                "rl.reward = \"dsl\" needs rl.expression".into(),
            ));
        }
        if self.elicitation.mode == ElicitationMode::Online && self.rl.algo != RlAlgo::A2c {
            return Err(Error::Config(
                "online elicitation needs rl.algo = \"a2c\"".into(),
            ));
        }
        if self.shaping.kind == ShapingKind::Hurl && !self.env.id.starts_with("tabular:") {
            return Err(Error::Config(
                "hurl shaping needs a tabular environment".into(),
            ));
        }
        if self.eval.corr_states > 0
            && (self.rl.algo != RlAlgo::A2c || self.rl.a2c.checkpoint_steps.len() < 2)
        {
            return Err(Error::Config(
                "eval.corr_states needs rl.algo = \"a2c\" and at least two rl.a2c.checkpoint_steps"
                    .into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eval.mc_gamma) {
            return Err(Error::Config("eval.mc_gamma must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.shaping.lambda) {
            return Err(Error::Config("shaping.lambda must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.rollout.epsilon) {
            return Err(Error::Config("rollout.epsilon must lie in [0, 1]".into()));
        }
        self.rollout.agent.validate()?;
        if self.reward_code.n_candidates == 0 {
            return Err(Error::Config(
                "reward_code.n_candidates must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Whether the run calls the chat service.
    pub fn needs_llm(&self) -> bool {
        let annotates = self.rl.reward == RewardKind::Bt;
        (annotates && self.annotator.kind == AnnotatorKind::Llm)
            || matches!(self.rl.reward, RewardKind::Scalar | RewardKind::Embedding)
    }

    /// Canonical JSON of the parsed config; equal configs serialize equally.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}
