//! LLM-backed preference, scalar, and embedding annotation.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use regex::Regex;

use super::templates::{
    PromptTemplate, TemplateKind, DESCRIPTION, DESCRIPTION_1, DESCRIPTION_2, TASK_DESCRIPTION,
};
use super::{describe_sequence, describe_window, Annotation, Annotator, PairQuery};
use crate::error::{Error, Result};
use crate::llm::{ChatApi, ChatMessage, ChatRequest};
use crate::rl::WindowScorer;
use crate::types::{Label, Observation, ObservationWindow};

/// Requests per query before it is discarded.
pub const MAX_ATTEMPTS: usize = 3;

const PAIR_REMINDER: &str = "Your answer did not end with a preference in the required format. \
Finish with exactly one of (\"best_description\": 1), (\"best_description\": 2), or (\"best_description\": None).";

const SCALAR_REMINDER: &str =
    "Your answer did not contain a score. Finish with a single number between 0 and 5.";

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#""?best\\?_description"?\s*:\s*"?(1|2|None)\b"#).expect("valid regex")
    })
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("valid regex"))
}

/// Last `("best_description": X)` tag in a response. `Some(Tie)` for None,
/// `None` when no tag is present.
pub fn parse_best_description(text: &str) -> Option<Label> {
    let last = tag_re().captures_iter(text).last()?;
    Some(match &last[1] {
        "1" => Label::A,
        "2" => Label::B,
        _ => Label::Tie,
    })
}

/// Last number in a response, clamped to [0, 5]. A number written as the
/// denominator of a fraction ("4/5") is skipped. A minus sign glued to a
/// word is read as a hyphen.
pub fn parse_scalar(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut last = None;
    for m in number_re().find_iter(text) {
        let mut start = m.start();
        let mut s = m.as_str();
        if s.starts_with('-') && start > 0 && bytes[start - 1].is_ascii_alphanumeric() {
            s = &s[1..];
            start += 1;
        }
        let before = text[..start].trim_end();
        if before.ends_with('/') {
            continue;
        }
        if let Ok(v) = s.parse::<f64>() {
            last = Some(v);
        }
    }
    last.map(|v| v.clamp(0.0, 5.0))
}

fn pair_values(query: &PairQuery, sequence: bool) -> BTreeMap<&'static str, String> {
    let render = if sequence {
        describe_sequence
    } else {
        describe_window
    };
    let mut v = BTreeMap::new();
    v.insert(DESCRIPTION_1, render(&query.window_a));
    v.insert(DESCRIPTION_2, render(&query.window_b));
    v.insert(TASK_DESCRIPTION, query.goal_text.clone());
    v
}

pub fn render_pair_prompt(query: &PairQuery, template: &PromptTemplate) -> Result<String> {
    if template.kind() != TemplateKind::Pair {
        return Err(Error::Config(format!(
            "{} is not a preference template",
            template.template_id
        )));
    }
    template.render(&pair_values(query, false), &query.hints)
}

/// Sequence-window prompt that steers away from repetitive behaviour.
pub fn exploration_prompt_variant(query: &PairQuery) -> Result<String> {
    exploration_prompt_with(query, &PromptTemplate::builtin("sequence_pref")?)
}

pub fn exploration_prompt_with(query: &PairQuery, template: &PromptTemplate) -> Result<String> {
    if query.k() < 2 {
        return Err(Error::invalid(
            "the sequence prompt needs windows of at least two observations",
        ));
    }
    if template.kind() != TemplateKind::Pair {
        return Err(Error::Config(format!(
            "{} is not a preference template",
            template.template_id
        )));
    }
    template.render(&pair_values(query, true), &query.hints)
}

/// Sends `prompt`, then resends with the previous answer and a format
/// reminder until `parse` succeeds or attempts run out. Each resend carries
/// the failed answer, so a caching client never serves a stale reply.
pub(crate) fn ask_until<T>(
    client: &dyn ChatApi,
    prompt: &str,
    reminder: &str,
    temperature: f64,
    max_tokens: u32,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<std::result::Result<(T, String), Vec<String>>> {
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut responses = Vec::new();
    for _ in 0..MAX_ATTEMPTS {
        let mut req = ChatRequest::new(client.chat_model(), messages.clone());
        req.temperature = temperature;
        req.max_tokens = max_tokens;
        let reply = client.chat(&req)?.content;
        if let Some(v) = parse(&reply) {
            return Ok(Ok((v, reply)));
        }
        messages.push(ChatMessage::assistant(reply.clone()));
        messages.push(ChatMessage::user(reminder));
        responses.push(reply);
    }
    Ok(Err(responses))
}

/// One preference query against a chat model. Responses without a tag are
/// retried; after the last attempt the query is discarded.
pub fn annotate_llm(
    query: &PairQuery,
    template: &PromptTemplate,
    client: &dyn ChatApi,
) -> Result<Annotation> {
    query_pair(client, query, template, false, 0.0, 1024)
}

fn query_pair(
    client: &dyn ChatApi,
    query: &PairQuery,
    template: &PromptTemplate,
    sequence: bool,
    temperature: f64,
    max_tokens: u32,
) -> Result<Annotation> {
    let prompt = if sequence {
        exploration_prompt_with(query, template)?
    } else {
        render_pair_prompt(query, template)?
    };
    Ok(
        match ask_until(
            client,
            &prompt,
            PAIR_REMINDER,
            temperature,
            max_tokens,
            parse_best_description,
        )? {
            Ok((label, rationale)) => Annotation::Labeled { label, rationale },
            Err(responses) => Annotation::Discarded {
                reason: format!("no preference tag after {} attempts", responses.len()),
            },
        },
    )
}

/// Scalar reward for a window in [0, 5], or `None` when the query is discarded.
pub fn annotate_scalar(
    window: &ObservationWindow,
    template: &PromptTemplate,
    client: &dyn ChatApi,
    goal_text: &str,
    hints: &[String],
) -> Result<Option<f64>> {
    if template.kind() != TemplateKind::Scalar {
        return Err(Error::Config(format!(
            "{} is not a scalar template",
            template.template_id
        )));
    }
    let mut v = BTreeMap::new();
    v.insert(DESCRIPTION, describe_window(window));
    v.insert(TASK_DESCRIPTION, goal_text.to_string());
    let prompt = template.render(&v, hints)?;
    Ok(
        ask_until(client, &prompt, SCALAR_REMINDER, 0.0, 1024, parse_scalar)?
            .ok()
            .map(|(x, _)| x),
    )
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numerical("zero-norm embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity between the embeddings of an observation and the goal.
pub fn embedding_reward(obs: &Observation, goal_text: &str, client: &dyn ChatApi) -> Result<f64> {
    let a = client.embed(&obs.text_render)?;
    let b = client.embed(goal_text)?;
    cosine(&a, &b)
}

/// Preference annotator backed by a chat model.
pub struct LlmAnnotator {
    client: Arc<dyn ChatApi>,
    template: PromptTemplate,
    /// Render windows as numbered step lists.
    pub sequence: bool,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl LlmAnnotator {
    pub fn new(client: Arc<dyn ChatApi>, template: PromptTemplate) -> Result<Self> {
        if template.kind() != TemplateKind::Pair {
            return Err(Error::Config(format!(
                "{} is not a preference template",
                template.template_id
            )));
        }
        Ok(Self {
            client,
            template,
            sequence: false,
            temperature: 0.0,
            max_tokens: 1024,
        })
    }

    pub fn sequence(mut self, on: bool) -> Self {
        self.sequence = on;
        self
    }
}

impl Annotator for LlmAnnotator {
    fn id(&self) -> String {
        format!(
            "llm:{}:{}",
            self.client.chat_model(),
            self.template.template_id
        )
    }

    fn annotate(&mut self, query: &PairQuery) -> Result<Annotation> {
        query_pair(
            self.client.as_ref(),
            query,
            &self.template,
            self.sequence,
            self.temperature,
            self.max_tokens,
        )
    }
}

/// Scalar-annotator reward for RL. A discarded query is an error here,
/// since a reward stream cannot skip a step.
pub struct ScalarScorer {
    pub client: Arc<dyn ChatApi>,
    pub template: PromptTemplate,
    pub goal_text: String,
    pub hints: Vec<String>,
}

impl WindowScorer for ScalarScorer {
    fn score(&self, window: &ObservationWindow) -> Result<f64> {
        annotate_scalar(
            window,
            &self.template,
            self.client.as_ref(),
            &self.goal_text,
            &self.hints,
        )?
        .ok_or_else(|| Error::invalid(format!("no score after {MAX_ATTEMPTS} attempts")))
    }

    fn id(&self) -> String {
        format!("scalar:{}", self.template.template_id)
    }
}

/// Cosine reward of the latest observation against the goal text.
pub struct EmbeddingScorer {
    pub client: Arc<dyn ChatApi>,
    pub goal_text: String,
}

impl WindowScorer for EmbeddingScorer {
    fn score(&self, window: &ObservationWindow) -> Result<f64> {
        embedding_reward(window.last(), &self.goal_text, self.client.as_ref())
    }

    fn id(&self) -> String {
        "embedding".into()
    }
}
