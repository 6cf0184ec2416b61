use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{pearson, spearman};
use crate::envs::{EnvEvent, Environment};
use crate::error::{Error, Result};
use crate::rl::{mc_value_estimate, Policy, RewardSource};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub checkpoint_id: String,
    pub n_states: usize,
    pub pearson: f64,
    pub spearman: f64,
}

/// Non-terminal states visited by `episodes` rollouts of each policy,
/// deduplicated by state key in visit order, then subsampled to at most
/// `max_states` with a seeded shuffle.
pub fn collect_probe_states<E, P>(
    env: &mut E,
    policies: &mut [P],
    episodes: usize,
    max_states: usize,
    seed: u64,
) -> Result<Vec<E>>
where
    E: Environment,
    P: Policy<E>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut states = Vec::new();
    for policy in policies.iter_mut() {
        for ep in 0..episodes {
            let mut obs = env.reset(seed.wrapping_add(ep as u64));
            while !env.is_done() {
                if seen.insert(obs.state_key.clone()) {
                    states.push(env.clone());
                }
                let a = policy.act(env, &obs, &mut rng)?;
                obs = env.step(a)?.obs;
            }
        }
    }
    if states.len() > max_states {
        states.shuffle(&mut rng);
        states.truncate(max_states);
    }
    Ok(states)
}

/// For each checkpoint, Monte-Carlo values of the probe states under that
/// checkpoint's policy, correlated against `reward` on the same states.
pub fn correlation_vs_training_stage<E, P, R>(
    probe_states: &[E],
    checkpoints: &mut [(String, P)],
    mut reward: R,
    rollouts: usize,
    gamma: f64,
    seed: u64,
) -> Result<Vec<CorrelationRow>>
where
    E: Environment,
    P: Policy<E>,
    R: FnMut(&E) -> Result<f64>,
{
    if checkpoints.len() < 2 {
        return Err(Error::invalid("need at least two checkpoints"));
    }
    let rewards: Vec<f64> = probe_states
        .iter()
        .map(&mut reward)
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for (id, policy) in checkpoints.iter_mut() {
        let values: Vec<f64> = mc_value_estimate(probe_states, policy, rollouts, gamma, seed)?
            .into_iter()
            .map(|e| e.value)
            .collect();
        // constant values (a policy that never succeeds) leave the correlation undefined
        let undefined = |r: Result<f64>| match r {
            Err(Error::Numerical(msg)) => {
                log::warn!("checkpoint {id}: {msg}; correlation reported as NaN");
                Ok(f64::NAN)
            }
            other => other,
        };
        rows.push(CorrelationRow {
            checkpoint_id: id.clone(),
            n_states: probe_states.len(),
            pearson: undefined(pearson(&rewards, &values))?,
            spearman: undefined(spearman(&rewards, &values))?,
        });
    }
    Ok(rows)
}

pub fn write_correlation_csv(rows: &[CorrelationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-step rewards of one episode with the environment events that
/// occurred on each step.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTrace {
    pub rewards: Vec<f64>,
    pub events: Vec<Option<EnvEvent>>,
}

impl RewardTrace {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn event_step(&self, event: EnvEvent) -> Option<usize> {
        self.events.iter().position(|e| *e == Some(event))
    }

    /// Whether the reward at the step of `event` exceeds the mean of up to
    /// `lookback` preceding rewards. `None` when the event did not occur or
    /// has no predecessor.
    pub fn peaks_at(&self, event: EnvEvent, lookback: usize) -> Option<bool> {
        let t = self.event_step(event)?;
        if t == 0 {
            return None;
        }
        let prev = &self.rewards[t.saturating_sub(lookback)..t];
        Some(self.rewards[t] > super::mean(prev))
    }
}

pub fn episode_reward_trace<E, P>(
    env: &mut E,
    source: &RewardSource,
    policy: &mut P,
    seed: u64,
    gamma: f64,
) -> Result<RewardTrace>
where
    E: Environment,
    P: Policy<E>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset(seed);
    let mut stream = source.start_episode(&obs);
    let mut trace = RewardTrace {
        rewards: Vec::new(),
        events: Vec::new(),
    };
    while !env.is_done() {
        let a = policy.act(env, &obs, &mut rng)?;
        let out = env.step(a)?;
        trace.rewards.push(stream.reward(&out, gamma)?);
        trace.events.push(out.event);
        obs = out.obs;
    }
    Ok(trace)
}

pub fn write_trace_csv(trace: &RewardTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "reward", "event"])?;
    for (t, (r, e)) in trace.rewards.iter().zip(&trace.events).enumerate() {
        w.write_record([
            t.to_string(),
            format!("{r:?}"),
            e.map_or("", |e| e.as_str()).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::doorkey::{DoorKeyEnv, DoorKeyPlanner};
    use crate::envs::tabular::{bundled, TabularEnv};
    use crate::rl::tabular::{policy_evaluation_exact, TabularPolicy};
    use crate::rl::{FnPolicy, RandomPolicy};

    fn planner() -> impl Policy<DoorKeyEnv> {
        let mut p = DoorKeyPlanner::new();
        FnPolicy(
            move |env: &DoorKeyEnv, _: &crate::types::Observation, _: &mut ChaCha8Rng| {
                Ok(p.act(env.state()))
            },
        )
    }

    #[test]
    fn trace_has_events_and_episode_length() {
        let mut env = DoorKeyEnv::new();
        let trace =
            episode_reward_trace(&mut env, &RewardSource::Env, &mut planner(), 3, 0.99).unwrap();
        assert_eq!(trace.len(), env.steps_taken());
        let key = trace.event_step(EnvEvent::KeyPickup).unwrap();
        let door = trace.event_step(EnvEvent::DoorOpen).unwrap();
        assert!(key < door);
        assert_eq!(trace.event_step(EnvEvent::Goal), Some(trace.len() - 1));
        // sparse reward is flat before the goal
        assert_eq!(trace.peaks_at(EnvEvent::KeyPickup, 5), Some(false));
        assert_eq!(trace.peaks_at(EnvEvent::Goal, 5), Some(true));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("t,reward,event"));
        assert_eq!(text.lines().count(), trace.len() + 1);
        assert!(text.contains(&format!("{key},0.0,key_pickup")));
    }

    #[test]
    fn affine_reward_of_values_correlates_perfectly() {
        let mdp = bundled("gridworld").unwrap();
        let mut env = TabularEnv::new(mdp.clone(), "tabular:gridworld").unwrap();
        let uniform = TabularPolicy::uniform(mdp.n_states, mdp.n_actions);
        let exact = policy_evaluation_exact(&mdp, &uniform, 1e-12).unwrap();
        let states = collect_probe_states(&mut env, &mut [RandomPolicy], 20, 200, 1).unwrap();
        assert!(states.len() >= 3);
        let mut ckpts = vec![
            ("early".to_string(), RandomPolicy),
            ("final".to_string(), RandomPolicy),
        ];
        let rows = correlation_vs_training_stage(
            &states,
            &mut ckpts,
            |e: &TabularEnv| Ok(2.0 * exact[e.state()] - 1.0),
            400,
            mdp.gamma,
            5,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].pearson > 0.95, "{rows:?}");
        assert!(correlation_vs_training_stage(
            &states,
            &mut ckpts[..1],
            |_: &TabularEnv| Ok(0.0),
            1,
            0.9,
            0
        )
        .is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corr.csv");
        write_correlation_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next(),
            Some("checkpoint_id,n_states,pearson,spearman")
        );
    }
}
