use std::sync::Arc;

use crate::envs::StepOutcome;
use crate::error::{Error, Result};
use crate::rewardcode::RewardExpr;
use crate::rewardmodel::RewardModel;
use crate::shaping::EpisodicCountTable;
use crate::types::{Observation, ObservationWindow};

/// Scores an observation window (for example an LLM asked for a scalar).
pub trait WindowScorer: Send + Sync {
    fn score(&self, window: &ObservationWindow) -> Result<f64>;
    fn id(&self) -> String;
}

/// Bradley-Terry reward attached to the arrival window:
/// `coef * (r_theta(window) - offset)`, plus the environment reward when
/// `add_env_reward` is set. With `potential` the learned part becomes
/// `coef * (gamma * r_theta(window') - r_theta(window))`.
#[derive(Debug, Clone)]
pub struct BtReward {
    pub model: Arc<RewardModel>,
    pub coef: f64,
    pub offset: f64,
    pub add_env_reward: bool,
    pub potential: bool,
}

impl BtReward {
    pub fn new(model: RewardModel) -> Self {
        Self {
            model: Arc::new(model),
            coef: 1.0,
            offset: 0.0,
            add_env_reward: false,
            potential: false,
        }
    }

    pub fn window_k(&self) -> usize {
        self.model.spec.window_k
    }

    /// Features of the last k observations, padding the front by repeating
    /// the earliest observation when the history is shorter than k.
    pub fn features(&self, history: &[Observation]) -> Result<Vec<f64>> {
        let k = self.window_k();
        let dim = self.model.spec.dim;
        if history.is_empty() {
            return Err(Error::invalid("empty observation history"));
        }
        let mut out = Vec::with_capacity(k * dim);
        let start = history.len() as isize - k as isize;
        for i in 0..k as isize {
            let obs = &history[(start + i).max(0) as usize];
            if obs.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: obs.features.len(),
                });
            }
            out.extend_from_slice(&obs.features);
        }
        Ok(out)
    }

    pub fn reward(&self, history: &[Observation], env_reward: f64, gamma: f64) -> Result<f64> {
        let r = self.model.reward_features(&self.features(history)?)?;
        let extra = if self.add_env_reward { env_reward } else { 0.0 };
        let learned = if self.potential && history.len() > 1 {
            let prev = self
                .model
                .reward_features(&self.features(&history[..history.len() - 1])?)?;
            gamma * r - prev
        } else {
            r - self.offset
        };
        Ok(self.coef * learned + extra)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shaping {
    /// Divide by N(s')^beta, counting within the episode.
    Count { beta: f64 },
    /// Add (1 - lambda) gamma h(s') and discount by lambda gamma. The
    /// heuristic is indexed by tabular state (the hot feature index).
    Hurl {
        lambda: f64,
        heuristic: Arc<Vec<f64>>,
    },
}

#[derive(Clone)]
pub enum RewardSource {
    Env,
    BtModel(BtReward),
    ScalarAnnotator(Arc<dyn WindowScorer>),
    DslExpr(Arc<RewardExpr>),
    Shaped {
        inner: Box<RewardSource>,
        shaping: Shaping,
    },
}

impl std::fmt::Debug for RewardSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.id())
    }
}

fn tabular_index(obs: &Observation) -> Result<usize> {
    obs.features
        .iter()
        .position(|&v| v == 1.0)
        .ok_or_else(|| Error::invalid("heuristic shaping needs one-hot tabular observations"))
}

impl RewardSource {
    pub fn shaped(inner: RewardSource, shaping: Shaping) -> Self {
        RewardSource::Shaped {
            inner: Box::new(inner),
            shaping,
        }
    }

    pub fn id(&self) -> String {
        match self {
            RewardSource::Env => "env".into(),
            RewardSource::BtModel(_) => "bt_model".into(),
            RewardSource::ScalarAnnotator(s) => format!("scalar:{}", s.id()),
            RewardSource::DslExpr(_) => "dsl".into(),
            RewardSource::Shaped { inner, shaping } => match shaping {
                Shaping::Count { beta } => format!("count{beta}({})", inner.id()),
                Shaping::Hurl { lambda, .. } => format!("hurl{lambda}({})", inner.id()),
            },
        }
    }

    /// Discount the learner should use given the task discount.
    pub fn effective_gamma(&self, gamma: f64) -> f64 {
        match self {
            RewardSource::Shaped { inner, shaping } => {
                let g = inner.effective_gamma(gamma);
                match shaping {
                    Shaping::Hurl { lambda, .. } => lambda * g,
                    Shaping::Count { .. } => g,
                }
            }
            _ => gamma,
        }
    }

    pub fn start_episode(&self, first: &Observation) -> RewardStream<'_> {
        let mut counts = EpisodicCountTable::new();
        counts.visit(&first.state_key);
        RewardStream {
            source: self,
            history: vec![first.clone()],
            counts,
        }
    }
}

/// Per-episode reward state: the observation history and visit counts.
pub struct RewardStream<'a> {
    source: &'a RewardSource,
    history: Vec<Observation>,
    counts: EpisodicCountTable,
}

impl RewardStream<'_> {
    /// Reward for the transition into `outcome.obs`. `gamma` is the task
    /// discount before any reshaping.
    pub fn reward(&mut self, outcome: &StepOutcome, gamma: f64) -> Result<f64> {
        self.history.push(outcome.obs.clone());
        let first_visit_count = self.counts.visit(&outcome.obs.state_key);
        eval_source(
            self.source,
            &self.history,
            outcome.reward,
            gamma,
            first_visit_count,
        )
    }

    pub fn history(&self) -> &[Observation] {
        &self.history
    }
}

fn eval_source(
    source: &RewardSource,
    history: &[Observation],
    env_reward: f64,
    gamma: f64,
    count: u64,
) -> Result<f64> {
    let last = history
        .last()
        .expect("history holds the arrival observation");
    match source {
        RewardSource::Env => Ok(env_reward),
        RewardSource::BtModel(bt) => bt.reward(history, env_reward, gamma),
        RewardSource::ScalarAnnotator(scorer) => {
            let start = history.len().saturating_sub(1);
            let window = ObservationWindow::new(history[start..].to_vec())?;
            scorer.score(&window)
        }
        RewardSource::DslExpr(expr) => Ok(expr.eval_features(&last.features).value),
        RewardSource::Shaped { inner, shaping } => {
            let r = eval_source(inner, history, env_reward, gamma, count)?;
            match shaping {
                Shaping::Count { beta } => Ok(r / (count as f64).powf(*beta)),
                Shaping::Hurl { lambda, heuristic } => {
                    let s = tabular_index(last)?;
                    let h = heuristic.get(s).copied().ok_or_else(|| {
                        Error::invalid(format!("heuristic has no entry for state {s}"))
                    })?;
                    Ok(r + (1.0 - lambda) * inner.effective_gamma(gamma) * h)
                }
            }
        }
    }
}
