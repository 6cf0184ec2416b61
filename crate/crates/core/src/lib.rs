//! Preference-derived rewards for reinforcement learning.
//!
//! The crate covers the whole indirect pipeline: environments emit
//! observations, annotators (oracle, noisy, or LLM-backed) label pairs of
//! observation windows, a Bradley-Terry reward model is fit to those labels,
//! the resulting reward is optionally reshaped, and a standard RL learner
//! optimizes it. Analysis helpers compare learned rewards against
//! ground-truth value functions.

pub mod agents;
pub mod annotate;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod eval;
pub mod llm;
pub mod nn;
pub mod pipeline;
pub mod probes;
pub mod rewardcode;
pub mod rewardmodel;
pub mod rl;
pub mod shaping;
pub mod types;

pub use error::{Error, Result};
pub use types::{Label, Observation, ObservationWindow, PreferenceRecord, Trajectory, Transition};
