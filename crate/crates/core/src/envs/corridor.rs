//! RepeatCorridor: a 12-cell corridor whose reward penalizes arriving at a
//! cell already visited in the episode. The penalty depends on history the
//! observation does not carry, so single-observation rewards cannot express it.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_step, EnvSpec, Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::types::{state_key, Observation};

pub const N_CELLS: usize = 12;
pub const DEFAULT_MAX_STEPS: usize = 32;
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

#[derive(Debug, Clone)]
pub struct RepeatCorridor {
    spec: EnvSpec,
    pos: usize,
    visited: HashSet<usize>,
    steps: usize,
    done: bool,
    episode_id: String,
}

impl Default for RepeatCorridor {
    fn default() -> Self {
        Self::new()
    }
}

impl RepeatCorridor {
    pub fn new() -> Self {
        Self::with_max_steps(DEFAULT_MAX_STEPS)
    }

    pub fn with_max_steps(max_steps: usize) -> Self {
        let spec = EnvSpec::new(
            "corridor",
            vec!["left".into(), "right".into()],
            N_CELLS,
            max_steps,
        )
        .expect("static spec is valid");
        let mut env = Self {
            spec,
            pos: 0,
            visited: HashSet::new(),
            steps: 0,
            done: false,
            episode_id: String::new(),
        };
        env.reset(0);
        env
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

impl Environment for RepeatCorridor {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn feature_names(&self) -> Vec<String> {
        (0..N_CELLS).map(|i| format!("at_cell_{i}")).collect()
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = rng.gen_range(0..N_CELLS);
        self.visited = HashSet::from([self.pos]);
        self.steps = 0;
        self.done = false;
        self.episode_id = format!("corridor-s{seed}");
        self.observe()
    }

    fn step(&mut self, action_id: usize) -> Result<StepOutcome> {
        check_step(self.done, action_id, &self.spec)?;
        self.pos = match action_id {
            LEFT => self.pos.saturating_sub(1),
            _ => (self.pos + 1).min(N_CELLS - 1),
        };
        let revisit = !self.visited.insert(self.pos);
        self.steps += 1;
        let truncated = self.steps >= self.spec.max_episode_steps;
        self.done = truncated;
        Ok(StepOutcome {
            obs: self.observe(),
            reward: if revisit { -1.0 } else { 0.0 },
            done: self.done,
            truncated,
            event: None,
        })
    }

    fn observe(&self) -> Observation {
        let mut features = vec![0.0; N_CELLS];
        features[self.pos] = 1.0;
        Observation {
            env_id: self.spec.env_id.clone(),
            episode_id: self.episode_id.clone(),
            step_index: self.steps as u64,
            text_render: format!(
                "The agent stands in cell {} of a {N_CELLS}-cell corridor.",
                self.pos
            ),
            features,
            state_key: state_key(&format!("corridor|{}", self.pos)),
        }
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn progress(&self, _obs: &Observation) -> Result<f64> {
        Err(Error::env(
            "corridor has no progress oracle; use the sequence oracle",
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn revisits_are_penalized() {
        let mut env = RepeatCorridor::new();
        env.reset(5);
        let start = env.position();
        let first = if start == 0 { RIGHT } else { LEFT };
        let back = 1 - first;
        assert_eq!(env.step(first).unwrap().reward, 0.0);
        assert_eq!(env.step(back).unwrap().reward, -1.0);
        assert_eq!(env.position(), start);
    }

    #[test]
    fn wall_bump_counts_as_revisit() {
        let mut env = RepeatCorridor::new();
        for seed in 0..50 {
            env.reset(seed);
            if env.position() == 0 {
                assert_eq!(env.step(LEFT).unwrap().reward, -1.0);
                return;
            }
        }
        panic!("no seed started at cell 0");
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let mut env = RepeatCorridor::new();
            let mut out = vec![env.reset(11)];
            for a in [0, 1, 1, 0, 1] {
                out.push(env.step(a).unwrap().obs);
            }
            out
        };
        assert_eq!(run(), run());
    }
}
