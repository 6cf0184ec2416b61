//! Explicit finite MDPs for exact solvers, reshaping, and diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_step, EnvSpec, Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::types::{state_key, Observation};

/// (S, A, P, R, gamma) with an initial distribution and terminal flags.
/// Terminal states are absorbing with zero value.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub initial_distribution: Vec<f64>,
    pub terminal: Vec<bool>,
}

const ROW_TOL: f64 = 1e-9;

impl TabularMdp {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
        initial_distribution: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(Error::invalid("MDP needs at least one state"));
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return Err(Error::invalid("MDP needs at least one action"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma {gamma} outside [0, 1)")));
        }
        if reward.len() != n_states
            || terminal.len() != n_states
            || initial_distribution.len() != n_states
        {
            return Err(Error::invalid(
                "reward, terminal and initial sizes must match n_states",
            ));
        }
        check_distribution(&initial_distribution, n_states, "initial distribution")?;
        for s in 0..n_states {
            if transition[s].len() != n_actions || reward[s].len() != n_actions {
                return Err(Error::invalid(format!("state {s} has wrong action count")));
            }
            for a in 0..n_actions {
                check_distribution(&transition[s][a], n_states, &format!("P[{s}][{a}]"))?;
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            initial_distribution,
            terminal,
        })
    }

    /// E_{s'~P(s,a)}[f(s')]
    pub fn expect(&self, s: usize, a: usize, f: &[f64]) -> f64 {
        self.transition[s][a]
            .iter()
            .zip(f)
            .map(|(p, v)| p * v)
            .sum()
    }
}

fn check_distribution(p: &[f64], n: usize, what: &str) -> Result<()> {
    if p.len() != n {
        return Err(Error::invalid(format!(
            "{what} has length {} not {n}",
            p.len()
        )));
    }
    if p.iter().any(|&x| !(0.0..=1.0 + ROW_TOL).contains(&x)) {
        return Err(Error::invalid(format!("{what} has entries outside [0, 1]")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::invalid(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// s0 --go (r=1)--> s1 (terminal); `stay` loops on s0 with r=0.
pub fn two_state(gamma: f64) -> TabularMdp {
    TabularMdp::new(
        vec![
            vec![one_hot(2, 1), one_hot(2, 0)],
            vec![one_hot(2, 1), one_hot(2, 1)],
        ],
        vec![vec![1.0, 0.0], vec![0.0, 0.0]],
        gamma,
        one_hot(2, 0),
        vec![false, true],
    )
    .expect("valid")
}

/// Deterministic chain of `len` states, reward 1 on every step, the last
/// state terminal. With len=4 and gamma=0.5, V(start) = 1.75.
pub fn reward_chain(len: usize, gamma: f64) -> TabularMdp {
    let n = len;
    let transition = (0..n)
        .map(|s| vec![one_hot(n, (s + 1).min(n - 1))])
        .collect();
    let reward = (0..n)
        .map(|s| vec![if s + 1 < n { 1.0 } else { 0.0 }])
        .collect();
    let mut terminal = vec![false; n];
    terminal[n - 1] = true;
    TabularMdp::new(transition, reward, gamma, one_hot(n, 0), terminal).expect("valid")
}

/// Five-state slippery chain: actions left/right, 10% slip to the opposite
/// move, +1 for entering the terminal right end. Uniform start over
/// non-terminal states.
pub fn chain5() -> TabularMdp {
    let n = 5;
    let slip = 0.1;
    let mut transition = vec![vec![vec![0.0; n]; 2]; n];
    let mut reward = vec![vec![0.0; 2]; n];
    for s in 0..n {
        if s == n - 1 {
            transition[s] = vec![one_hot(n, s), one_hot(n, s)];
            continue;
        }
        let left = s.saturating_sub(1);
        let right = s + 1;
        for (a, (main, other)) in [(left, right), (right, left)].into_iter().enumerate() {
            transition[s][a][main] += 1.0 - slip;
            transition[s][a][other] += slip;
            reward[s][a] = if right == n - 1 {
                transition[s][a][n - 1]
            } else {
                0.0
            };
        }
    }
    let mut init = vec![0.25; n];
    init[n - 1] = 0.0;
    let mut terminal = vec![false; n];
    terminal[n - 1] = true;
    TabularMdp::new(transition, reward, 0.9, init, terminal).expect("valid")
}

/// 3x3 slippery gridworld: 4 moves, 80% intended, 10% each perpendicular,
/// -0.04 per step, +1 for entering the terminal bottom-right corner.
pub fn gridworld() -> TabularMdp {
    let w = 3usize;
    let n = w * w;
    let goal = n - 1;
    let moves: [(i32, i32); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
    let target = |s: usize, m: usize| -> usize {
        let (x, y) = ((s % w) as i32, (s / w) as i32);
        let (nx, ny) = (x + moves[m].0, y + moves[m].1);
        if nx < 0 || ny < 0 || nx >= w as i32 || ny >= w as i32 {
            s
        } else {
            ny as usize * w + nx as usize
        }
    };
    let mut transition = vec![vec![vec![0.0; n]; 4]; n];
    let mut reward = vec![vec![0.0; 4]; n];
    for s in 0..n {
        for a in 0..4 {
            if s == goal {
                transition[s][a][s] = 1.0;
                continue;
            }
            for (m, p) in [(a, 0.8), ((a + 1) % 4, 0.1), ((a + 3) % 4, 0.1)] {
                transition[s][a][target(s, m)] += p;
            }
            reward[s][a] = -0.04 + transition[s][a][goal];
        }
    }
    let mut init = vec![1.0 / (n - 1) as f64; n];
    init[goal] = 0.0;
    let mut terminal = vec![false; n];
    terminal[goal] = true;
    TabularMdp::new(transition, reward, 0.95, init, terminal).expect("valid")
}

/// Random "garnet" MDP: each (s, a) spreads mass over `branching` successors.
pub fn garnet(n_states: usize, n_actions: usize, branching: usize, seed: u64) -> TabularMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let mut reward = vec![vec![0.0; n_actions]; n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let mut cuts: Vec<f64> = (0..branching - 1).map(|_| rng.gen::<f64>()).collect();
            cuts.push(0.0);
            cuts.push(1.0);
            cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for piece in cuts.windows(2) {
                let next = rng.gen_range(0..n_states);
                transition[s][a][next] += piece[1] - piece[0];
            }
            // renormalize away float drift
            let sum: f64 = transition[s][a].iter().sum();
            transition[s][a].iter_mut().for_each(|p| *p /= sum);
            reward[s][a] = rng.gen::<f64>();
        }
    }
    let init = vec![1.0 / n_states as f64; n_states];
    TabularMdp::new(transition, reward, 0.9, init, vec![false; n_states]).expect("valid")
}

pub const BUNDLED: [&str; 4] = ["two_state", "chain5", "gridworld", "garnet"];

pub fn bundled(name: &str) -> Result<TabularMdp> {
    match name {
        "two_state" => Ok(two_state(0.9)),
        "chain5" => Ok(chain5()),
        "gridworld" => Ok(gridworld()),
        "garnet" => Ok(garnet(6, 3, 3, 7)),
        other => Err(Error::Config(format!("unknown bundled MDP {other}"))),
    }
}

/// Episodic environment view of a [`TabularMdp`].
#[derive(Debug, Clone)]
pub struct TabularEnv {
    spec: EnvSpec,
    mdp: TabularMdp,
    state: usize,
    rng: ChaCha8Rng,
    steps: usize,
    done: bool,
    episode_id: String,
}

pub const DEFAULT_MAX_STEPS: usize = 100;

impl TabularEnv {
    pub fn new(mdp: TabularMdp, env_id: &str) -> Result<Self> {
        let spec = EnvSpec::new(
            env_id,
            (0..mdp.n_actions).map(|a| format!("a{a}")).collect(),
            mdp.n_states,
            DEFAULT_MAX_STEPS,
        )?;
        let mut env = Self {
            spec,
            mdp,
            state: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            steps: 0,
            done: false,
            episode_id: String::new(),
        };
        env.reset(0);
        Ok(env)
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.spec.max_episode_steps = max_steps;
        self
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn set_state(&mut self, s: usize) {
        self.state = s;
        self.steps = 0;
        self.done = self.mdp.terminal[s];
    }

    fn sample(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    }
}

impl Environment for TabularEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn feature_names(&self) -> Vec<String> {
        (0..self.mdp.n_states)
            .map(|s| format!("state_{s}"))
            .collect()
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = Self::sample(&mut self.rng, &self.mdp.initial_distribution);
        self.steps = 0;
        self.done = self.mdp.terminal[self.state];
        self.episode_id = format!("{}-s{seed}", self.spec.env_id);
        self.observe()
    }

    fn step(&mut self, action_id: usize) -> Result<StepOutcome> {
        check_step(self.done, action_id, &self.spec)?;
        let reward = self.mdp.reward[self.state][action_id];
        self.state = Self::sample(&mut self.rng, &self.mdp.transition[self.state][action_id]);
        self.steps += 1;
        let terminal = self.mdp.terminal[self.state];
        let truncated = !terminal && self.steps >= self.spec.max_episode_steps;
        self.done = terminal || truncated;
        Ok(StepOutcome {
            obs: self.observe(),
            reward,
            done: self.done,
            truncated,
            event: None,
        })
    }

    fn observe(&self) -> Observation {
        Observation {
            env_id: self.spec.env_id.clone(),
            episode_id: self.episode_id.clone(),
            step_index: self.steps as u64,
            text_render: format!("state {}", self.state),
            features: one_hot(self.mdp.n_states, self.state),
            state_key: state_key(&format!("{}|{}", self.spec.env_id, self.state)),
        }
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn progress(&self, _obs: &Observation) -> Result<f64> {
        Err(Error::env("tabular MDPs have no progress oracle"))
    }

    /// Future transitions are the hidden quantity: reseed the sampler.
    fn resample_hidden(&mut self, rng: &mut ChaCha8Rng) {
        self.rng = ChaCha8Rng::seed_from_u64(rng.gen());
    }
}
