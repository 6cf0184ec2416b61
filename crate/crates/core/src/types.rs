//! Shared domain types.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A single environment snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub env_id: String,
    pub episode_id: String,
    pub step_index: u64,
    pub text_render: String,
    pub features: Vec<f64>,
    pub state_key: String,
}

/// Stable 64-bit digest of a canonical state encoding, rendered as 16 hex chars.
pub fn state_key(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(&digest[..8])
}

/// Consecutive observations from one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObservationWindow {
    observations: Vec<Observation>,
}

impl ObservationWindow {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        let first = observations.first().ok_or_else(|| {
            Error::invalid("observation window must hold at least one observation")
        })?;
        for pair in observations.windows(2) {
            if pair[1].episode_id != first.episode_id {
                return Err(Error::invalid("window spans more than one episode"));
            }
            if pair[1].step_index != pair[0].step_index + 1 {
                return Err(Error::invalid(format!(
                    "window step indices not consecutive: {} then {}",
                    pair[0].step_index, pair[1].step_index
                )));
            }
        }
        Ok(Self { observations })
    }

    pub fn single(obs: Observation) -> Self {
        Self {
            observations: vec![obs],
        }
    }

    pub fn k(&self) -> usize {
        self.observations.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn last(&self) -> &Observation {
        self.observations.last().expect("window is never empty")
    }

    /// The trailing `k` observations.
    pub fn suffix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::invalid(format!(
                "cannot take {k} trailing observations of a {}-window",
                self.k()
            )));
        }
        Ok(Self {
            observations: self.observations[self.k() - k..].to_vec(),
        })
    }

    pub fn env_id(&self) -> &str {
        &self.observations[0].env_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action_id: usize,
    pub reward_env: f64,
    pub next_obs: Observation,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub seed: u64,
}

impl Trajectory {
    /// All observations in order: the first obs followed by every next_obs.
    pub fn observations(&self) -> Vec<&Observation> {
        let mut out = Vec::with_capacity(self.transitions.len() + 1);
        if let Some(first) = self.transitions.first() {
            out.push(&first.obs);
        }
        out.extend(self.transitions.iter().map(|t| &t.next_obs));
        out
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_env_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward_env).sum()
    }

    pub fn succeeded(&self) -> bool {
        self.transitions
            .last()
            .map(|t| t.done && t.reward_env > 0.0)
            .unwrap_or(false)
    }

    /// Checks the chaining and single-terminal invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, pair) in self.transitions.windows(2).enumerate() {
            if pair[0].next_obs != pair[1].obs {
                return Err(Error::invalid(format!("transition {i} does not chain")));
            }
            if pair[0].done {
                return Err(Error::invalid(format!("done flag before the end at {i}")));
            }
        }
        Ok(())
    }
}

/// Three-way preference outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    #[serde(rename = "TIE")]
    Tie,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::A => "A",
            Label::B => "B",
            Label::Tie => "TIE",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "A" => Some(Label::A),
            "B" => Some(Label::B),
            "TIE" => Some(Label::Tie),
            _ => None,
        }
    }

    /// The label that results from swapping the two windows.
    pub fn swapped(self) -> Label {
        match self {
            Label::A => Label::B,
            Label::B => Label::A,
            Label::Tie => Label::Tie,
        }
    }
}

/// One labelled pair of observation windows.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub query_id: String,
    pub window_a: ObservationWindow,
    pub window_b: ObservationWindow,
    pub label: Label,
    pub annotator_id: String,
    pub rationale: String,
    pub created_at: String,
}

impl PreferenceRecord {
    pub fn k(&self) -> usize {
        self.window_a.k()
    }
}

/// ISO-8601 UTC timestamp with second precision.
pub fn now_timestamp() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(ep: &str, step: u64) -> Observation {
        Observation {
            env_id: "test".into(),
            episode_id: ep.into(),
            step_index: step,
            text_render: format!("step {step}"),
            features: vec![step as f64],
            state_key: state_key(&format!("{step}")),
        }
    }

    #[test]
    fn window_rejects_mixed_episodes_and_gaps() {
        assert!(ObservationWindow::new(vec![obs("a", 0), obs("b", 1)]).is_err());
        assert!(ObservationWindow::new(vec![obs("a", 0), obs("a", 2)]).is_err());
        assert!(ObservationWindow::new(vec![]).is_err());
        let w = ObservationWindow::new(vec![obs("a", 3), obs("a", 4)]).unwrap();
        assert_eq!(w.k(), 2);
        assert_eq!(w.suffix(1).unwrap().observations(), &[obs("a", 4)]);
        assert_eq!(w.suffix(2).unwrap(), w);
        assert!(w.suffix(0).is_err() && w.suffix(3).is_err());
    }

    #[test]
    fn state_key_is_stable() {
        assert_eq!(state_key("abc"), state_key("abc"));
        assert_ne!(state_key("abc"), state_key("abd"));
        assert_eq!(state_key("abc").len(), 16);
    }

    #[test]
    fn label_swap_is_involution() {
        for l in [Label::A, Label::B, Label::Tie] {
            assert_eq!(l.swapped().swapped(), l);
            assert_eq!(Label::parse(l.as_str()), Some(l));
        }
        assert_eq!(Label::parse("C"), None);
    }
}
