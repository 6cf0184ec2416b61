//! Dynamics-understanding probes: two-alternative forward (which next
//! observation follows?) and inverse (which action was taken?) queries, and
//! free-form next-observation generation.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::annotate::llm::{ask_until, parse_best_description};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::llm::ChatApi;
use crate::types::{Label, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeType {
    Forward,
    Inverse,
    Generation,
}

impl ProbeType {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeType::Forward => "forward",
            ProbeType::Inverse => "inverse",
            ProbeType::Generation => "generation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    /// Observations of context shown before the current one.
    pub history_len: usize,
    /// Random-policy steps before the probed state, drawn from [0, max_prefix).
    pub max_prefix: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            history_len: 0,
            max_prefix: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardQuery<E> {
    pub state: E,
    /// Context ending with the current observation.
    pub history: Vec<Observation>,
    pub action_id: usize,
    pub action_name: String,
    pub candidates: [Observation; 2],
    pub correct: usize,
}

#[derive(Debug, Clone)]
pub struct InverseQuery<E> {
    pub state: E,
    pub history: Vec<Observation>,
    pub next_obs: Observation,
    pub candidates: [usize; 2],
    pub candidate_names: [String; 2],
    pub correct: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationQuery<E> {
    pub state: E,
    pub history: Vec<Observation>,
    pub action_id: usize,
    pub action_name: String,
}

/// Answers two-alternative probes. `None` abstains and counts as wrong.
pub trait Chooser<E> {
    fn id(&self) -> String;
    fn choose_forward(&mut self, q: &ForwardQuery<E>) -> Result<Option<usize>>;
    fn choose_inverse(&mut self, q: &InverseQuery<E>) -> Result<Option<usize>>;
}

pub trait Generator<E> {
    fn id(&self) -> String;
    fn generate(&mut self, q: &GenerationQuery<E>) -> Result<String>;
}

fn same_view(a: &Observation, b: &Observation) -> bool {
    a.text_render == b.text_render && a.state_key == b.state_key
}

/// Knows the dynamics: simulates the snapshot.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleChooser;

impl<E: Environment> Chooser<E> for OracleChooser {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn choose_forward(&mut self, q: &ForwardQuery<E>) -> Result<Option<usize>> {
        let next = q.state.clone().step(q.action_id)?.obs;
        Ok(q.candidates.iter().position(|c| same_view(c, &next)))
    }

    fn choose_inverse(&mut self, q: &InverseQuery<E>) -> Result<Option<usize>> {
        for (i, &a) in q.candidates.iter().enumerate() {
            if same_view(&q.state.clone().step(a)?.obs, &q.next_obs) {
                return Ok(Some(i));
            }
        }
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct RandomChooser {
    rng: ChaCha8Rng,
}

impl RandomChooser {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<E> Chooser<E> for RandomChooser {
    fn id(&self) -> String {
        "random".into()
    }

    fn choose_forward(&mut self, _q: &ForwardQuery<E>) -> Result<Option<usize>> {
        Ok(Some(self.rng.gen_range(0..2)))
    }

    fn choose_inverse(&mut self, _q: &InverseQuery<E>) -> Result<Option<usize>> {
        Ok(Some(self.rng.gen_range(0..2)))
    }
}

fn context_text(history: &[Observation]) -> String {
    let (current, earlier) = history
        .split_last()
        .expect("history ends with the current observation");
    let mut out = String::new();
    if !earlier.is_empty() {
        out.push_str("Earlier observations, oldest first:\n");
        for o in earlier {
            out.push_str(&o.text_render);
            out.push_str("\n---\n");
        }
        out.push('\n');
    }
    out.push_str("Current observation:\n");
    out.push_str(&current.text_render);
    out
}

const PICK_FORMAT: &str = "Explain your reasoning, then answer by writing either (\"best_description\": 1) or (\"best_description\": 2).";

/// Asks a chat model, expecting the same answer tag as preference prompts.
pub struct LlmChooser {
    pub client: Arc<dyn ChatApi>,
    pub task_description: String,
}

impl LlmChooser {
    fn pick(&self, prompt: String) -> Result<Option<usize>> {
        let reply = ask_until(
            self.client.as_ref(),
            &prompt,
            PICK_FORMAT,
            0.0,
            1024,
            parse_best_description,
        )?;
        Ok(match reply {
            Ok((Label::A, _)) => Some(0),
            Ok((Label::B, _)) => Some(1),
            _ => None,
        })
    }
}

impl<E> Chooser<E> for LlmChooser {
    fn id(&self) -> String {
        format!("llm:{}", self.client.chat_model())
    }

    fn choose_forward(&mut self, q: &ForwardQuery<E>) -> Result<Option<usize>> {
        self.pick(format!(
            "{}\n\n{}\n\nThe agent now takes the action \"{}\". Which description is the next observation?\n\n\
             description_1:\n{}\n\ndescription_2:\n{}\n\n{PICK_FORMAT}",
            self.task_description,
            context_text(&q.history),
            q.action_name,
            q.candidates[0].text_render,
            q.candidates[1].text_render
        ))
    }

    fn choose_inverse(&mut self, q: &InverseQuery<E>) -> Result<Option<usize>> {
        self.pick(format!(
            "{}\n\n{}\n\nAfter one action the next observation is:\n{}\n\nWhich action was taken?\n\n\
             description_1: {}\n\ndescription_2: {}\n\n{PICK_FORMAT}",
            self.task_description,
            context_text(&q.history),
            q.next_obs.text_render,
            q.candidate_names[0],
            q.candidate_names[1]
        ))
    }
}

/// Ground-truth simulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimulatorGenerator;

impl<E: Environment> Generator<E> for SimulatorGenerator {
    fn id(&self) -> String {
        "simulator".into()
    }

    fn generate(&mut self, q: &GenerationQuery<E>) -> Result<String> {
        Ok(q.state.clone().step(q.action_id)?.obs.text_render)
    }
}

#[derive(Debug, Clone)]
pub struct ConstantGenerator(pub String);

impl<E> Generator<E> for ConstantGenerator {
    fn id(&self) -> String {
        "constant".into()
    }

    fn generate(&mut self, _q: &GenerationQuery<E>) -> Result<String> {
        Ok(self.0.clone())
    }
}

pub struct LlmGenerator {
    pub client: Arc<dyn ChatApi>,
    pub task_description: String,
}

/// Text between the last `<next>`/`</next>` pair, or the whole reply.
pub fn extract_generation(reply: &str) -> String {
    if let (Some(start), Some(end)) = (reply.rfind("<next>"), reply.rfind("</next>")) {
        if start < end {
            return reply[start + "<next>".len()..end].trim().to_string();
        }
    }
    reply.trim().to_string()
}

impl<E> Generator<E> for LlmGenerator {
    fn id(&self) -> String {
        format!("llm:{}", self.client.chat_model())
    }

    fn generate(&mut self, q: &GenerationQuery<E>) -> Result<String> {
        let prompt = format!(
            "{}\n\n{}\n\nThe agent now takes the action \"{}\". Write the next observation in exactly the same format \
             as the observations above, between <next> and </next>.",
            self.task_description,
            context_text(&q.history),
            q.action_name
        );
        let req = crate::llm::ChatRequest::new(
            self.client.chat_model(),
            vec![crate::llm::ChatMessage::user(prompt)],
        );
        Ok(extract_generation(&self.client.chat(&req)?.content))
    }
}

/// Whitespace- and case-normalized equality.
pub fn generation_matches(generated: &str, truth: &str) -> bool {
    let norm = |s: &str| {
        s.split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase()
    };
    let g = norm(generated);
    !g.is_empty() && g == norm(truth)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub probe_type: ProbeType,
    pub env_id: String,
    pub n: usize,
    pub accuracy: f64,
    pub stderr: f64,
    pub chooser_id: String,
    #[serde(skip)]
    pub skipped: usize,
    /// Fraction of queries whose correct answer was shown first.
    #[serde(skip)]
    pub correct_first_rate: f64,
}

fn report(
    probe_type: ProbeType,
    env_id: &str,
    chooser_id: String,
    hits: usize,
    n: usize,
    skipped: usize,
    first: usize,
) -> ProbeReport {
    let p = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    ProbeReport {
        probe_type,
        env_id: env_id.to_string(),
        n,
        accuracy: p,
        stderr: if n == 0 {
            0.0
        } else {
            (p * (1.0 - p) / n as f64).sqrt()
        },
        chooser_id,
        skipped,
        correct_first_rate: if n == 0 { 0.0 } else { first as f64 / n as f64 },
    }
}

/// A live state reached by a random prefix, with its trailing context.
fn sample_state<E: Environment>(
    env: &mut E,
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(E, Vec<Observation>)> {
    let mut obs = env.reset(rng.gen());
    let mut history = vec![obs.clone()];
    let prefix = rng.gen_range(0..cfg.max_prefix.max(1));
    for _ in 0..prefix {
        let a = rng.gen_range(0..env.n_actions());
        let mut probe = env.clone();
        let out = probe.step(a)?;
        if out.done {
            break;
        }
        *env = probe;
        obs = out.obs;
        history.push(obs.clone());
    }
    let keep = history.len().saturating_sub(cfg.history_len + 1);
    Ok((env.clone(), history.split_off(keep)))
}

/// Actions other than `action` whose successor looks different, shuffled.
fn decoys<E: Environment>(
    state: &E,
    action: usize,
    truth: &Observation,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(usize, Observation)>> {
    let mut others: Vec<usize> = (0..state.n_actions()).filter(|&a| a != action).collect();
    others.shuffle(rng);
    for a in others {
        let next = state.clone().step(a)?.obs;
        if !same_view(&next, truth) {
            return Ok(Some((a, next)));
        }
    }
    Ok(None)
}

const MAX_ATTEMPT_FACTOR: usize = 20;

pub fn run_forward_probe<E: Environment, C: Chooser<E> + ?Sized>(
    env: &mut E,
    chooser: &mut C,
    n_queries: usize,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut n, mut hits, mut skipped, mut first) = (0, 0, 0, 0);
    while n < n_queries {
        if skipped > MAX_ATTEMPT_FACTOR * n_queries.max(1) {
            return Err(Error::env("probe cannot synthesize distinct decoys"));
        }
        let (state, history) = sample_state(env, cfg, &mut rng)?;
        let action = rng.gen_range(0..state.n_actions());
        let truth = state.clone().step(action)?.obs;
        let Some((_, decoy)) = decoys(&state, action, &truth, &mut rng)? else {
            skipped += 1;
            continue;
        };
        let correct = rng.gen_range(0..2);
        let candidates = if correct == 0 {
            [truth, decoy]
        } else {
            [decoy, truth]
        };
        let q = ForwardQuery {
            action_name: state.spec().action_names[action].clone(),
            state,
            history,
            action_id: action,
            candidates,
            correct,
        };
        n += 1;
        first += usize::from(correct == 0);
        hits += usize::from(chooser.choose_forward(&q)? == Some(correct));
    }
    Ok(report(
        ProbeType::Forward,
        env.env_id(),
        chooser.id(),
        hits,
        n,
        skipped,
        first,
    ))
}

pub fn run_inverse_probe<E: Environment, C: Chooser<E> + ?Sized>(
    env: &mut E,
    chooser: &mut C,
    n_queries: usize,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut n, mut hits, mut skipped, mut first) = (0, 0, 0, 0);
    while n < n_queries {
        if skipped > MAX_ATTEMPT_FACTOR * n_queries.max(1) {
            return Err(Error::env("probe cannot synthesize distinct decoys"));
        }
        let (state, history) = sample_state(env, cfg, &mut rng)?;
        let action = rng.gen_range(0..state.n_actions());
        let next_obs = state.clone().step(action)?.obs;
        let Some((decoy, _)) = decoys(&state, action, &next_obs, &mut rng)? else {
            skipped += 1;
            continue;
        };
        let correct = rng.gen_range(0..2);
        let candidates = if correct == 0 {
            [action, decoy]
        } else {
            [decoy, action]
        };
        let names = &state.spec().action_names;
        let q = InverseQuery {
            candidate_names: [names[candidates[0]].clone(), names[candidates[1]].clone()],
            state,
            history,
            next_obs,
            candidates,
            correct,
        };
        n += 1;
        first += usize::from(correct == 0);
        hits += usize::from(chooser.choose_inverse(&q)? == Some(correct));
    }
    Ok(report(
        ProbeType::Inverse,
        env.env_id(),
        chooser.id(),
        hits,
        n,
        skipped,
        first,
    ))
}

pub fn run_generation_probe<E: Environment, G: Generator<E> + ?Sized>(
    env: &mut E,
    generator: &mut G,
    n_queries: usize,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for _ in 0..n_queries {
        let (state, history) = sample_state(env, cfg, &mut rng)?;
        let action = rng.gen_range(0..state.n_actions());
        let truth = state.clone().step(action)?.obs.text_render;
        let q = GenerationQuery {
            action_name: state.spec().action_names[action].clone(),
            state,
            history,
            action_id: action,
        };
        hits += usize::from(generation_matches(&generator.generate(&q)?, &truth));
    }
    Ok(report(
        ProbeType::Generation,
        env.env_id(),
        generator.id(),
        hits,
        n_queries,
        0,
        0,
    ))
}

/// Writes reports with columns probe_type, env_id, n, accuracy, stderr, chooser_id.
pub fn write_probe_csv(reports: &[ProbeReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
