//! Prompt templates with named placeholders.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

pub const DESCRIPTION_1: &str = "description_1";
pub const DESCRIPTION_2: &str = "description_2";
pub const DESCRIPTION: &str = "description";
pub const TASK_DESCRIPTION: &str = "task_description";
pub const HINTS: &str = "hints";

const KNOWN: [&str; 5] = [
    DESCRIPTION_1,
    DESCRIPTION_2,
    DESCRIPTION,
    TASK_DESCRIPTION,
    HINTS,
];

const BUILTIN: [(&str, &str); 7] = [
    (
        "wordle_pref",
        include_str!("../../templates/wordle_pref.txt"),
    ),
    (
        "eldrow_pref",
        include_str!("../../templates/eldrow_pref.txt"),
    ),
    (
        "doorkey_pref",
        include_str!("../../templates/doorkey_pref.txt"),
    ),
    (
        "generic_pref",
        include_str!("../../templates/generic_pref.txt"),
    ),
    (
        "sequence_pref",
        include_str!("../../templates/sequence_pref.txt"),
    ),
    (
        "wordle_scalar",
        include_str!("../../templates/wordle_scalar.txt"),
    ),
    (
        "generic_scalar",
        include_str!("../../templates/generic_scalar.txt"),
    ),
];

/// In-context rule hints for Eldrow, whose color code differs from Wordle's.
pub const ELDROW_HINTS: [&str; 3] = [
    "In Eldrow, green means that the provided letter is not present anywhere in the hidden word.",
    "In Eldrow, black means that the provided letter is present in the hidden word exactly at the correct position.",
    "In Eldrow, yellow keeps its Wordle meaning: the letter is in the hidden word, but not at that position.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    /// Two descriptions, answered with a best_description tag.
    Pair,
    /// One description, answered with a number.
    Scalar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub template_id: String,
    body: String,
    kind: TemplateKind,
}

fn placeholder_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_0-9]+)\}").expect("valid regex"))
}

impl PromptTemplate {
    /// Validates the placeholders of `body`. A template is a pair template
    /// when it names both description slots and a scalar template when it
    /// names the single one.
    pub fn new(template_id: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let template_id = template_id.into();
        let body = body.into();
        let names: Vec<&str> = placeholder_re()
            .captures_iter(&body)
            .map(|c| c.get(1).map_or("", |m| m.as_str()))
            .collect();
        if let Some(bad) = names.iter().find(|n| !KNOWN.contains(n)) {
            return Err(Error::Config(format!(
                "template {template_id}: unknown placeholder {{{bad}}}"
            )));
        }
        let has = |n: &str| names.contains(&n);
        let kind = match (has(DESCRIPTION_1), has(DESCRIPTION_2), has(DESCRIPTION)) {
            (true, true, false) => TemplateKind::Pair,
            (false, false, true) => TemplateKind::Scalar,
            _ => {
                return Err(Error::Config(format!(
                    "template {template_id} must reference either {{description_1}} and {{description_2}}, or {{description}}"
                )))
            }
        };
        Ok(Self {
            template_id,
            body,
            kind,
        })
    }

    pub fn builtin(template_id: &str) -> Result<Self> {
        BUILTIN
            .iter()
            .find(|(id, _)| *id == template_id)
            .map(|(id, body)| Self::new(*id, *body))
            .unwrap_or_else(|| Err(Error::Config(format!("unknown template_id {template_id}"))))
    }

    pub fn builtin_ids() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(id, _)| *id)
    }

    /// Loads a template file; the id is the file stem.
    pub fn from_file(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("template")
            .to_string();
        Self::new(id, body)
    }

    /// Builtin id or path to a template file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if BUILTIN.iter().any(|(id, _)| *id == spec) {
            Self::builtin(spec)
        } else if Path::new(spec).is_file() {
            Self::from_file(Path::new(spec))
        } else {
            Err(Error::Config(format!("unknown template_id {spec}")))
        }
    }

    /// Default preference template for an environment.
    pub fn default_pair(env_id: &str) -> Self {
        let id = match env_id {
            "wordle" => "wordle_pref",
            "eldrow" => "eldrow_pref",
            "doorkey" => "doorkey_pref",
            _ => "generic_pref",
        };
        Self::builtin(id).expect("builtin templates are valid")
    }

    pub fn default_scalar(env_id: &str) -> Self {
        let id = if env_id == "wordle" {
            "wordle_scalar"
        } else {
            "generic_scalar"
        };
        Self::builtin(id).expect("builtin templates are valid")
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn uses(&self, placeholder: &str) -> bool {
        self.body.contains(&format!("{{{placeholder}}}"))
    }

    /// Substitutes every placeholder in one pass. Values are inserted
    /// verbatim, so braces inside descriptions are never re-expanded.
    /// Hints are rendered one per line; a template without a `{hints}` slot
    /// rejects a non-empty hint list.
    pub fn render(&self, values: &BTreeMap<&str, String>, hints: &[String]) -> Result<String> {
        if !hints.is_empty() && !self.uses(HINTS) {
            return Err(Error::Config(format!(
                "template {} has no {{hints}} placeholder",
                self.template_id
            )));
        }
        let hint_text: String = hints.iter().map(|h| format!("{h}\n")).collect();
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut last = 0;
        for caps in placeholder_re().captures_iter(&self.body) {
            let m = caps.get(0).expect("group 0");
            let name = &caps[1];
            out.push_str(&self.body[last..m.start()]);
            if name == HINTS {
                out.push_str(&hint_text);
            } else {
                let v = values.get(name).ok_or_else(|| {
                    Error::invalid(format!(
                        "no value for placeholder {{{name}}} in {}",
                        self.template_id
                    ))
                })?;
                out.push_str(v);
            }
            last = m.end();
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_with_expected_kinds() {
        for id in PromptTemplate::builtin_ids() {
            let t = PromptTemplate::builtin(id).unwrap();
            let want = if id.ends_with("_scalar") {
                TemplateKind::Scalar
            } else {
                TemplateKind::Pair
            };
            assert_eq!(t.kind(), want, "{id}");
            assert!(t.uses(HINTS), "{id}");
        }
    }

    #[test]
    fn wordle_template_keeps_response_format() {
        let t = PromptTemplate::builtin("wordle_pref").unwrap();
        assert!(t
            .body()
            .contains(r#"writing either ("best_description": 1), ("best_description": 2)."#));
        assert!(t
            .body()
            .contains(r#"You could also say ("best_description": None)."#));
        assert!(t
            .body()
            .starts_with("I will present you with two short gameplay descriptions of Wordle."));
    }

    #[test]
    fn rejects_bad_placeholders() {
        assert!(PromptTemplate::new("x", "{description_1} {description_2} {oops}").is_err());
        assert!(PromptTemplate::new("x", "{description_1} only").is_err());
        assert!(PromptTemplate::new("x", "{description} and {description_1}").is_err());
    }

    #[test]
    fn render_is_single_pass() {
        let t = PromptTemplate::new("x", "a={description_1} b={description_2}").unwrap();
        let mut v = BTreeMap::new();
        v.insert(DESCRIPTION_1, "{description_2}".to_string());
        v.insert(DESCRIPTION_2, "two".to_string());
        assert_eq!(t.render(&v, &[]).unwrap(), "a={description_2} b=two");
        assert!(t.render(&v, &["hint".into()]).is_err());
    }

    #[test]
    fn hints_follow_task_description_verbatim() {
        let t = PromptTemplate::builtin("generic_pref").unwrap();
        let mut v = BTreeMap::new();
        v.insert(TASK_DESCRIPTION, "TASK.".to_string());
        v.insert(DESCRIPTION_1, "d1".to_string());
        v.insert(DESCRIPTION_2, "d2".to_string());
        let hints = vec!["first hint".to_string(), "second {hint}".to_string()];
        let text = t.render(&v, &hints).unwrap();
        assert!(text.contains("TASK.\nfirst hint\nsecond {hint}\n"));
    }
}
