//! Preference and scalar annotators, prompt rendering, response parsing,
//! and elicitation schedules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::progress_oracle;
use crate::error::{Error, Result};
use crate::types::{Label, ObservationWindow};

pub mod elicit;
pub mod llm;
pub mod templates;

pub use elicit::{
    read_discard_report, run_elicitation, write_discard_report, DiscardRecord, ElicitationMode,
    ElicitationSchedule, Elicitor, RoundReport, TaggedTrajectory,
};
pub use llm::{
    annotate_llm, annotate_scalar, embedding_reward, exploration_prompt_variant,
    parse_best_description, parse_scalar, EmbeddingScorer, LlmAnnotator, ScalarScorer,
    MAX_ATTEMPTS,
};
pub use templates::{PromptTemplate, TemplateKind, ELDROW_HINTS};

/// A pair of windows presented for a preference.
#[derive(Debug, Clone, PartialEq)]
pub struct PairQuery {
    pub query_id: String,
    pub window_a: ObservationWindow,
    pub window_b: ObservationWindow,
    pub goal_text: String,
    pub hints: Vec<String>,
}

impl PairQuery {
    pub fn new(
        query_id: impl Into<String>,
        window_a: ObservationWindow,
        window_b: ObservationWindow,
    ) -> Result<Self> {
        if window_a.k() != window_b.k() {
            return Err(Error::invalid(format!(
                "windows differ in length: {} vs {}",
                window_a.k(),
                window_b.k()
            )));
        }
        let goal_text = crate::envs::task_description(window_a.env_id()).to_string();
        Ok(Self {
            query_id: query_id.into(),
            window_a,
            window_b,
            goal_text,
            hints: Vec::new(),
        })
    }

    pub fn with_goal(mut self, goal_text: impl Into<String>) -> Self {
        self.goal_text = goal_text.into();
        self
    }

    pub fn with_hints(mut self, hints: Vec<String>) -> Self {
        self.hints = hints;
        self
    }

    pub fn k(&self) -> usize {
        self.window_a.k()
    }

    pub fn swapped(&self) -> Self {
        Self {
            window_a: self.window_b.clone(),
            window_b: self.window_a.clone(),
            ..self.clone()
        }
    }
}

/// Result of one annotation request.
#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Labeled {
        label: Label,
        rationale: String,
    },
    /// No usable answer; the query is dropped and reported.
    Discarded {
        reason: String,
    },
}

impl Annotation {
    pub fn label(&self) -> Option<Label> {
        match self {
            Annotation::Labeled { label, .. } => Some(*label),
            Annotation::Discarded { .. } => None,
        }
    }
}

/// Anything that labels pair queries.
pub trait Annotator {
    fn id(&self) -> String;
    fn annotate(&mut self, query: &PairQuery) -> Result<Annotation>;
}

/// Labels a pair by comparing per-window scores: |Δ| ≤ epsilon is a tie.
pub fn annotate_by_score<F>(
    query: &PairQuery,
    epsilon: f64,
    mut score: F,
) -> Result<(Label, String)>
where
    F: FnMut(&ObservationWindow) -> Result<f64>,
{
    if query.window_a.env_id() != query.window_b.env_id() {
        return Err(Error::invalid(format!(
            "query {} mixes environments {} and {}",
            query.query_id,
            query.window_a.env_id(),
            query.window_b.env_id()
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::invalid("epsilon must be non-negative"));
    }
    let a = score(&query.window_a)?;
    let b = score(&query.window_b)?;
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite window score ({a}, {b})"
        )));
    }
    let label = if (a - b).abs() <= epsilon {
        Label::Tie
    } else if a > b {
        Label::A
    } else {
        Label::B
    };
    Ok((label, format!("score_a={a:.6} score_b={b:.6}")))
}

/// Mean ground-truth progress over a window.
pub fn window_progress(window: &ObservationWindow) -> Result<f64> {
    let obs = window.observations();
    let mut total = 0.0;
    for o in obs {
        total += progress_oracle(o)?;
    }
    Ok(total / obs.len() as f64)
}

/// Number of distinct states in a window.
pub fn unique_state_count(window: &ObservationWindow) -> f64 {
    let mut keys: Vec<&str> = window
        .observations()
        .iter()
        .map(|o| o.state_key.as_str())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len() as f64
}

pub fn annotate_oracle(query: &PairQuery, epsilon: f64) -> Result<(Label, String)> {
    annotate_by_score(query, epsilon, window_progress)
}

/// Oracle label flipped A↔B with probability `flip_prob`; ties never flip.
pub fn annotate_noisy(
    query: &PairQuery,
    epsilon: f64,
    flip_prob: f64,
    rng_seed: u64,
) -> Result<(Label, String)> {
    NoisyOracle::new(epsilon, flip_prob, rng_seed)?.label(query)
}

/// Progress oracle.
#[derive(Debug, Clone)]
pub struct OracleAnnotator {
    pub epsilon: f64,
}

impl Annotator for OracleAnnotator {
    fn id(&self) -> String {
        format!("oracle(eps={})", self.epsilon)
    }

    fn annotate(&mut self, query: &PairQuery) -> Result<Annotation> {
        let (label, rationale) = annotate_oracle(query, self.epsilon)?;
        Ok(Annotation::Labeled { label, rationale })
    }
}

/// Labels by an arbitrary window score, for example exact policy values.
/// With a temperature the label is sampled: A with probability
/// `sigmoid((score_a - score_b) / temperature)`.
pub struct ScoreAnnotator<F> {
    pub name: String,
    pub epsilon: f64,
    pub score: F,
    logistic: Option<(f64, ChaCha8Rng)>,
}

impl<F> ScoreAnnotator<F>
where
    F: FnMut(&ObservationWindow) -> Result<f64>,
{
    pub fn new(name: impl Into<String>, epsilon: f64, score: F) -> Self {
        Self {
            name: name.into(),
            epsilon,
            score,
            logistic: None,
        }
    }

    pub fn logistic(mut self, temperature: f64, seed: u64) -> Self {
        self.logistic = Some((temperature, ChaCha8Rng::seed_from_u64(seed)));
        self
    }
}

impl<F> Annotator for ScoreAnnotator<F>
where
    F: FnMut(&ObservationWindow) -> Result<f64>,
{
    fn id(&self) -> String {
        format!("{}(eps={})", self.name, self.epsilon)
    }

    fn annotate(&mut self, query: &PairQuery) -> Result<Annotation> {
        let Some((temperature, rng)) = self.logistic.as_mut() else {
            let (label, rationale) = annotate_by_score(query, self.epsilon, &mut self.score)?;
            return Ok(Annotation::Labeled { label, rationale });
        };
        if !(*temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let a = (self.score)(&query.window_a)?;
        let b = (self.score)(&query.window_b)?;
        let p_a = 1.0 / (1.0 + (-(a - b) / *temperature).exp());
        let label = if rng.gen::<f64>() < p_a {
            Label::A
        } else {
            Label::B
        };
        Ok(Annotation::Labeled {
            label,
            rationale: format!("score_a={a:.6} score_b={b:.6}"),
        })
    }
}

/// Prefers the window with more distinct states.
#[derive(Debug, Clone)]
pub struct SequenceOracle {
    pub epsilon: f64,
}

impl Annotator for SequenceOracle {
    fn id(&self) -> String {
        format!("sequence-oracle(eps={})", self.epsilon)
    }

    fn annotate(&mut self, query: &PairQuery) -> Result<Annotation> {
        let (label, rationale) =
            annotate_by_score(query, self.epsilon, |w| Ok(unique_state_count(w)))?;
        Ok(Annotation::Labeled { label, rationale })
    }
}

/// Progress oracle with seeded label flips. One rng stream serves all queries.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    epsilon: f64,
    flip_prob: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl NoisyOracle {
    pub fn new(epsilon: f64, flip_prob: f64, rng_seed: u64) -> Result<Self> {
        if !(0.0..=0.5).contains(&flip_prob) {
            return Err(Error::invalid(format!(
                "flip_prob {flip_prob} outside [0, 0.5]"
            )));
        }
        Ok(Self {
            epsilon,
            flip_prob,
            seed: rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    pub fn label(&mut self, query: &PairQuery) -> Result<(Label, String)> {
        let (label, rationale) = annotate_oracle(query, self.epsilon)?;
        // draw for every query so the stream does not depend on label outcomes
        let flip = self.rng.gen::<f64>() < self.flip_prob;
        if flip && label != Label::Tie {
            Ok((label.swapped(), format!("{rationale} flipped")))
        } else {
            Ok((label, rationale))
        }
    }
}

impl Annotator for NoisyOracle {
    fn id(&self) -> String {
        format!(
            "noisy-oracle(eps={},flip={},seed={})",
            self.epsilon, self.flip_prob, self.seed
        )
    }

    fn annotate(&mut self, query: &PairQuery) -> Result<Annotation> {
        let (label, rationale) = self.label(query)?;
        Ok(Annotation::Labeled { label, rationale })
    }
}

/// Uniformly random labels over {A, B}; a calibration baseline.
#[derive(Debug, Clone)]
pub struct RandomAnnotator {
    rng: ChaCha8Rng,
}

impl RandomAnnotator {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Annotator for RandomAnnotator {
    fn id(&self) -> String {
        "random".into()
    }

    fn annotate(&mut self, _query: &PairQuery) -> Result<Annotation> {
        let label = if self.rng.gen::<bool>() {
            Label::A
        } else {
            Label::B
        };
        Ok(Annotation::Labeled {
            label,
            rationale: String::new(),
        })
    }
}

/// Text shown to an annotator for one window. Single observations appear
/// as-is; longer windows get a header per step.
pub fn describe_window(window: &ObservationWindow) -> String {
    let obs = window.observations();
    if obs.len() == 1 {
        return obs[0].text_render.clone();
    }
    obs.iter()
        .enumerate()
        .map(|(i, o)| format!("Step {}:\n{}", i + 1, o.text_render))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// One numbered line per step, with line breaks inside a render flattened.
pub fn describe_sequence(window: &ObservationWindow) -> String {
    window
        .observations()
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let flat: Vec<&str> = o
                .text_render
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            format!("{}. {}", i + 1, flat.join(" / "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::doorkey::DOORKEY_FEATURES;
    use crate::types::{state_key, Observation};

    pub(crate) fn doorkey_obs(ep: &str, step: u64, progress_key_dist: f64) -> Observation {
        // phase 0 features: only the key and door distances drive progress
        let mut features = vec![0.0; DOORKEY_FEATURES.len()];
        features[2] = progress_key_dist;
        Observation {
            env_id: "doorkey".into(),
            episode_id: ep.into(),
            step_index: step,
            text_render: format!("{ep}@{step}"),
            features,
            state_key: state_key(&format!("{ep}/{step}/{progress_key_dist}")),
        }
    }

    fn window_with(score: f64) -> ObservationWindow {
        let mut o = doorkey_obs("e", 0, 0.0);
        o.env_id = "wordle".into();
        o.features = vec![0.0; 8];
        o.features[2] = score;
        ObservationWindow::single(o)
    }

    fn query(a: f64, b: f64) -> PairQuery {
        PairQuery::new("q", window_with(a), window_with(b)).unwrap()
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(annotate_oracle(&query(0.9, 0.2), 0.05).unwrap().0, Label::A);
        assert_eq!(annotate_oracle(&query(0.2, 0.9), 0.05).unwrap().0, Label::B);
        assert_eq!(
            annotate_oracle(&query(0.4, 0.4), 0.0).unwrap().0,
            Label::Tie
        );
        assert_eq!(
            annotate_oracle(&query(0.50, 0.52), 0.05).unwrap().0,
            Label::Tie
        );
        let (_, why) = annotate_oracle(&query(0.9, 0.2), 0.05).unwrap();
        assert_eq!(why, "score_a=0.900000 score_b=0.200000");
    }

    #[test]
    fn oracle_is_antisymmetric() {
        for (a, b) in [(0.1, 0.7), (0.7, 0.1), (0.3, 0.32), (0.5, 0.5)] {
            let q = query(a, b);
            let l = annotate_oracle(&q, 0.05).unwrap().0;
            assert_eq!(annotate_oracle(&q.swapped(), 0.05).unwrap().0, l.swapped());
        }
    }

    #[test]
    fn oracle_rejects_mixed_envs() {
        let a = window_with(0.1);
        let b = ObservationWindow::single(doorkey_obs("x", 0, 0.5));
        let q = PairQuery::new("q", a, b).unwrap();
        assert!(annotate_oracle(&q, 0.0).is_err());
    }

    #[test]
    fn noisy_zero_flip_matches_oracle() {
        let mut noisy = NoisyOracle::new(0.05, 0.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q = query(rng.gen(), rng.gen());
            assert_eq!(
                noisy.label(&q).unwrap().0,
                annotate_oracle(&q, 0.05).unwrap().0
            );
        }
    }

    #[test]
    fn noisy_half_flip_rate() {
        let mut noisy = NoisyOracle::new(0.0, 0.5, 9).unwrap();
        let q = query(0.9, 0.1);
        let flips = (0..10_000)
            .filter(|_| noisy.label(&q).unwrap().0 == Label::B)
            .count();
        let rate = flips as f64 / 10_000.0;
        assert!((rate - 0.5).abs() < 0.03, "{rate}");
        let tie = query(0.3, 0.3);
        assert!((0..200).all(|_| noisy.label(&tie).unwrap().0 == Label::Tie));
        assert!(NoisyOracle::new(0.0, 0.6, 0).is_err());
        assert_eq!(
            annotate_noisy(&q, 0.0, 0.3, 5).unwrap(),
            annotate_noisy(&q, 0.0, 0.3, 5).unwrap()
        );
    }

    #[test]
    fn sequence_oracle_prefers_diverse_window() {
        let diverse =
            ObservationWindow::new((0..4).map(|i| doorkey_obs("d", i, i as f64)).collect())
                .unwrap();
        let repetitive = ObservationWindow::new(
            (0..4)
                .map(|i| {
                    let mut o = doorkey_obs("r", i, 0.0);
                    o.state_key = state_key(if i % 2 == 0 { "left" } else { "right" });
                    o
                })
                .collect(),
        )
        .unwrap();
        let q = PairQuery::new("q", diverse, repetitive).unwrap();
        let mut oracle = SequenceOracle { epsilon: 0.0 };
        assert_eq!(oracle.annotate(&q).unwrap().label(), Some(Label::A));
    }

    #[test]
    fn window_renders() {
        let w = ObservationWindow::new(vec![doorkey_obs("e", 3, 0.0), doorkey_obs("e", 4, 0.0)])
            .unwrap();
        assert_eq!(describe_window(&w), "Step 1:\ne@3\n\nStep 2:\ne@4");
        let mut o = doorkey_obs("e", 5, 0.0);
        o.text_render = "line one\n\n  line two ".into();
        let w = ObservationWindow::new(vec![doorkey_obs("e", 4, 0.0), o]).unwrap();
        assert_eq!(describe_sequence(&w), "1. e@4\n2. line one / line two");
    }

    #[test]
    fn score_annotator_hard_and_logistic() {
        let wa = ObservationWindow::single(doorkey_obs("a", 0, 1.0));
        let wb = ObservationWindow::single(doorkey_obs("b", 0, 3.0));
        let q = PairQuery::new("q", wa, wb).unwrap();
        let score = |w: &ObservationWindow| Ok(-w.last().features[2]);
        let mut hard = ScoreAnnotator::new("neg-dist", 0.0, score);
        assert_eq!(hard.annotate(&q).unwrap().label(), Some(Label::A));
        // score gap 2 at temperature 1: A with probability sigmoid(2)
        let mut soft = ScoreAnnotator::new("neg-dist", 0.0, score).logistic(1.0, 4);
        let n = 4000;
        let a = (0..n)
            .filter(|_| soft.annotate(&q).unwrap().label() == Some(Label::A))
            .count();
        let p = 1.0 / (1.0 + (-2.0f64).exp());
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((a as f64 / n as f64 - p).abs() < 4.0 * se);
        let mut bad = ScoreAnnotator::new("neg-dist", 0.0, score).logistic(0.0, 4);
        assert!(bad.annotate(&q).is_err());
    }
}
