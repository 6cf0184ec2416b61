//! Desk-scale environments: Wordle and Eldrow, DoorKey, RepeatCorridor, and
//! explicit tabular MDPs.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Observation;

pub mod corridor;
pub mod doorkey;
pub mod tabular;
pub mod wordle;

pub use corridor::RepeatCorridor;
pub use doorkey::{DoorKeyEnv, DoorKeyPlanner};
pub use tabular::{TabularEnv, TabularMdp};
pub use wordle::{NearOptimalWordle, WordleEnv, WordleVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: String,
    pub action_names: Vec<String>,
    pub feature_dim: usize,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn new(
        env_id: impl Into<String>,
        action_names: Vec<String>,
        feature_dim: usize,
        max_episode_steps: usize,
    ) -> Result<Self> {
        if action_names.is_empty() {
            return Err(Error::invalid("action_names must be non-empty"));
        }
        let mut sorted = action_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != action_names.len() {
            return Err(Error::invalid("action_names must be unique"));
        }
        if feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        Ok(Self {
            env_id: env_id.into(),
            action_names,
            feature_dim,
            max_episode_steps,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.action_names.len()
    }
}

/// Notable moments within an episode, used to annotate reward traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvEvent {
    KeyPickup,
    DoorOpen,
    Goal,
    Solved,
}

impl EnvEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvEvent::KeyPickup => "key_pickup",
            EnvEvent::DoorOpen => "door_open",
            EnvEvent::Goal => "goal",
            EnvEvent::Solved => "solved",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    /// Episode is over, either by termination or by the step limit.
    pub done: bool,
    /// `done` was caused by the step limit rather than a terminal state.
    pub truncated: bool,
    pub event: Option<EnvEvent>,
}

/// Single-owner episodic environment.
///
/// Cloning an environment snapshots its full logical state, which is how
/// callers reset to arbitrary states (Monte-Carlo estimation, probes).
pub trait Environment: Clone {
    fn spec(&self) -> &EnvSpec;

    /// Ordered feature names, one per feature index.
    fn feature_names(&self) -> Vec<String>;

    fn reset(&mut self, seed: u64) -> Observation;

    fn step(&mut self, action_id: usize) -> Result<StepOutcome>;

    fn observe(&self) -> Observation;

    fn is_done(&self) -> bool;

    /// Ground-truth task progress in [0, 1], read from the observation.
    fn progress(&self, obs: &Observation) -> Result<f64>;

    /// Redraws hidden quantities consistent with what has been observed.
    /// Fully observed environments leave the state unchanged.
    fn resample_hidden(&mut self, _rng: &mut ChaCha8Rng) {}

    fn env_id(&self) -> &str {
        &self.spec().env_id
    }

    fn n_actions(&self) -> usize {
        self.spec().n_actions()
    }

    fn check_foreign(&self, obs: &Observation) -> Result<()> {
        if obs.env_id != self.spec().env_id {
            return Err(Error::env(format!(
                "observation from {} given to {}",
                obs.env_id,
                self.spec().env_id
            )));
        }
        if obs.features.len() != self.spec().feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec().feature_dim,
                got: obs.features.len(),
            });
        }
        Ok(())
    }
}

/// Any bundled environment, selected by id at runtime.
#[derive(Debug, Clone)]
pub enum AnyEnv {
    Wordle(WordleEnv),
    DoorKey(DoorKeyEnv),
    Corridor(RepeatCorridor),
    Tabular(TabularEnv),
}

macro_rules! delegate {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            AnyEnv::Wordle($e) => $body,
            AnyEnv::DoorKey($e) => $body,
            AnyEnv::Corridor($e) => $body,
            AnyEnv::Tabular($e) => $body,
        }
    };
}

impl AnyEnv {
    /// Builds a bundled environment from its id: `wordle`, `eldrow`,
    /// `doorkey`, `corridor`, or `tabular:<name>` for a bundled MDP.
    pub fn from_id(env_id: &str) -> Result<Self> {
        match env_id {
            "wordle" => Ok(AnyEnv::Wordle(WordleEnv::new(WordleVariant::Wordle))),
            "eldrow" => Ok(AnyEnv::Wordle(WordleEnv::new(WordleVariant::Eldrow))),
            "doorkey" => Ok(AnyEnv::DoorKey(DoorKeyEnv::new())),
            "corridor" => Ok(AnyEnv::Corridor(RepeatCorridor::new())),
            other => {
                if let Some(name) = other.strip_prefix("tabular:") {
                    let mdp = tabular::bundled(name)?;
                    Ok(AnyEnv::Tabular(TabularEnv::new(mdp, other)?))
                } else {
                    Err(Error::Config(format!("unknown env_id {other}")))
                }
            }
        }
    }
}

impl AnyEnv {
    /// Replaces the episode step limit. Wordle's six guesses are fixed.
    pub fn with_max_steps(self, max_steps: usize) -> Result<Self> {
        if max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        match self {
            AnyEnv::Wordle(_) => Err(Error::Config("wordle episodes have a fixed length".into())),
            AnyEnv::DoorKey(_) => Ok(AnyEnv::DoorKey(DoorKeyEnv::with_max_steps(max_steps))),
            AnyEnv::Corridor(_) => Ok(AnyEnv::Corridor(RepeatCorridor::with_max_steps(max_steps))),
            AnyEnv::Tabular(t) => Ok(AnyEnv::Tabular(t.with_max_steps(max_steps))),
        }
    }

    /// Restarts the step budget without changing the state, so values of
    /// states sampled late in an episode are not cut short by truncation.
    pub fn refresh_budget(&mut self) -> Result<()> {
        match self {
            AnyEnv::DoorKey(e) => {
                let s = *e.state();
                e.set_state(s);
                Ok(())
            }
            AnyEnv::Tabular(e) => {
                let s = e.state();
                e.set_state(s);
                Ok(())
            }
            AnyEnv::Wordle(_) | AnyEnv::Corridor(_) => Ok(()),
        }
    }

    /// Scripted near-optimal action for the current state, where the
    /// environment has a planner.
    pub fn expert_action(&self, planner: &mut ExpertPlanner) -> Result<usize> {
        match (self, planner) {
            (AnyEnv::DoorKey(e), ExpertPlanner::DoorKey(p)) => Ok(p.act(e.state())),
            (AnyEnv::Wordle(e), ExpertPlanner::Wordle(p)) => {
                let g = p.guess(e.state(), e.words())?;
                e.action_of(&g)
                    .ok_or_else(|| Error::env(format!("guess {g} is not an action")))
            }
            (AnyEnv::Corridor(e), ExpertPlanner::Corridor) => {
                Ok(if e.position() + 1 < corridor::N_CELLS {
                    corridor::RIGHT
                } else {
                    corridor::LEFT
                })
            }
            (AnyEnv::Tabular(e), ExpertPlanner::Tabular(pi)) => Ok(pi[e.state()]),
            _ => Err(Error::invalid("planner does not match the environment")),
        }
    }
}

/// Per-environment scripted policy state.
#[derive(Debug, Clone)]
pub enum ExpertPlanner {
    DoorKey(DoorKeyPlanner),
    Wordle(NearOptimalWordle),
    Corridor,
    Tabular(Vec<usize>),
}

impl ExpertPlanner {
    pub fn for_env(env: &AnyEnv) -> Result<Self> {
        Ok(match env {
            AnyEnv::DoorKey(_) => ExpertPlanner::DoorKey(DoorKeyPlanner::new()),
            AnyEnv::Wordle(_) => ExpertPlanner::Wordle(NearOptimalWordle::new()),
            AnyEnv::Corridor(_) => ExpertPlanner::Corridor,
            AnyEnv::Tabular(t) => {
                ExpertPlanner::Tabular(crate::rl::tabular::value_iteration(t.mdp(), 1e-10)?.policy)
            }
        })
    }
}

impl Environment for AnyEnv {
    fn spec(&self) -> &EnvSpec {
        delegate!(self, e => e.spec())
    }
    fn feature_names(&self) -> Vec<String> {
        delegate!(self, e => e.feature_names())
    }
    fn reset(&mut self, seed: u64) -> Observation {
        delegate!(self, e => e.reset(seed))
    }
    fn step(&mut self, action_id: usize) -> Result<StepOutcome> {
        delegate!(self, e => e.step(action_id))
    }
    fn observe(&self) -> Observation {
        delegate!(self, e => e.observe())
    }
    fn is_done(&self) -> bool {
        delegate!(self, e => e.is_done())
    }
    fn progress(&self, obs: &Observation) -> Result<f64> {
        delegate!(self, e => e.progress(obs))
    }
    fn resample_hidden(&mut self, rng: &mut ChaCha8Rng) {
        delegate!(self, e => e.resample_hidden(rng))
    }
}

pub(crate) fn check_step(done: bool, action_id: usize, spec: &EnvSpec) -> Result<()> {
    if done {
        return Err(Error::env("step called after the episode ended"));
    }
    if action_id >= spec.n_actions() {
        return Err(Error::env(format!(
            "invalid action_id {action_id} for {} ({} actions)",
            spec.env_id,
            spec.n_actions()
        )));
    }
    Ok(())
}

/// Ground-truth progress of an observation, dispatched on its env id.
/// Only environments whose progress is a function of the features qualify.
pub fn progress_oracle(obs: &Observation) -> Result<f64> {
    let (dim, p) = match obs.env_id.as_str() {
        "doorkey" => (doorkey::DOORKEY_FEATURES.len(), None),
        "wordle" | "eldrow" => (wordle::WORDLE_FEATURES.len(), Some(2)),
        other => return Err(Error::env(format!("no progress oracle for {other}"))),
    };
    if obs.features.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: obs.features.len(),
        });
    }
    Ok(match p {
        Some(i) => obs.features[i].clamp(0.0, 1.0),
        None => doorkey::doorkey_progress(&obs.features),
    })
}

/// Natural-language task statement used to fill prompt templates.
pub fn task_description(env_id: &str) -> &'static str {
    match env_id {
        "wordle" | "eldrow" => {
            "The goal is to find the hidden five-letter word in at most six guesses."
        }
        "doorkey" => {
            "The agent moves in a small walled room split in two by an inner wall. \
             The goal is to reach the goal square G. The goal lies behind a locked door D, \
             which only opens once the agent carries the key K. Picking up the key and \
             opening the door are therefore necessary steps towards the goal."
        }
        "corridor" => "The agent walks left and right along a corridor of cells.",
        _ => "The agent should reach the goal of the task.",
    }
}
