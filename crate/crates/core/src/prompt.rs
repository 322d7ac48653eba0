//! Prompt rendering for zero-shot, few-shot and point-entity prompts, and
//! the canonical JSON form of an extraction result.
//!
//! Lines are joined with `\n` and the prompt ends right after the query
//! sentence (no trailing newline).

use indexmap::{IndexMap, IndexSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_surface, Demonstration, GoldMention, Schema};

pub const DEFAULT_HEADER: &str =
    "Please list all named entities of the following entity types in the input sentence:";
pub const DEFAULT_FORMAT_LINE: &str =
    r#"You should output your results in the format {"type": [entity]} as a json."#;
pub const EXAMPLES_LINE: &str = "Here are some examples:";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("schema has no entity types")]
    EmptySchema,
    #[error("few-shot prompt needs at least one demonstration")]
    NoDemonstrations,
    #[error("point entities given for type {0:?}, which is not in the schema")]
    UnknownType(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub schema: Schema,
    pub header: String,
    pub format_line: String,
}

impl PromptConfig {
    pub fn new(schema: Schema) -> Self {
        Self {
            schema,
            header: DEFAULT_HEADER.to_string(),
            format_line: DEFAULT_FORMAT_LINE.to_string(),
        }
    }
}

/// A rendered prompt plus the inputs that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub text: String,
    pub demos_used: Vec<Demonstration>,
    pub points_used: IndexMap<String, Vec<String>>,
    pub input_sentence_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Canonical JSON of a set of mentions: one key per schema type in schema
/// order, each mapping to the deduplicated surfaces of that type in
/// first-occurrence order. Compact, no whitespace.
pub fn serialize_output(gold: &[GoldMention], schema: &Schema) -> String {
    let mut grouped: IndexMap<&str, IndexSet<&str>> =
        schema.names().map(|n| (n, IndexSet::new())).collect();
    for m in gold {
        if let Some(set) = grouped.get_mut(m.etype.as_str()) {
            let s = normalize_surface(&m.surface);
            if !s.is_empty() {
                set.insert(s);
            }
        }
    }
    render_grouped(grouped.iter().map(|(k, v)| (*k, v.iter().copied())))
}

/// Compact JSON object from `(type, surfaces)` groups, in the given order.
pub(crate) fn render_grouped<'a, G, S>(groups: G) -> String
where
    G: IntoIterator<Item = (&'a str, S)>,
    S: IntoIterator<Item = &'a str>,
{
    let mut out = String::from("{");
    for (i, (name, surfaces)) in groups.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&json_string(name));
        out.push_str(":[");
        for (j, s) in surfaces.into_iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&json_string(s));
        }
        out.push(']');
    }
    out.push('}');
    out
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn push_line(out: &mut String, line: &str) {
    if !out.is_empty() {
        out.push('\n');
    }
    out.push_str(line);
}

fn push_examples(out: &mut String, demos: &[Demonstration]) {
    push_line(out, EXAMPLES_LINE);
    for d in demos {
        push_line(out, &format!("Input: {}", d.input));
        push_line(out, &format!("Output: {}", d.output));
    }
}

fn push_tail(out: &mut String, config: &PromptConfig, input_text: &str) {
    push_line(out, &config.format_line);
    push_line(out, &format!("Input: {input_text}"));
}

/// Zero-shot prompt.
pub fn build_vanilla(
    config: &PromptConfig,
    input_id: &str,
    input_text: &str,
) -> Result<PromptBundle, PromptError> {
    render(config, &IndexMap::new(), &[], input_id, input_text)
}

/// Few-shot prompt. Rejects an empty demonstration list.
pub fn build_icl(
    config: &PromptConfig,
    demos: &[Demonstration],
    input_id: &str,
    input_text: &str,
) -> Result<PromptBundle, PromptError> {
    if config.schema.is_empty() {
        return Err(PromptError::EmptySchema);
    }
    if demos.is_empty() {
        return Err(PromptError::NoDemonstrations);
    }
    render(config, &IndexMap::new(), demos, input_id, input_text)
}

/// Point-entity prompt: each type line lists its point entities after
/// `e.g.`, separated by `", "`. A type without points keeps the bare
/// `- TYPE` line. With no demonstrations the examples block is omitted.
pub fn build_picl(
    config: &PromptConfig,
    points: &IndexMap<String, Vec<String>>,
    demos: &[Demonstration],
    input_id: &str,
    input_text: &str,
) -> Result<PromptBundle, PromptError> {
    if let Some(unknown) = points.keys().find(|k| !config.schema.contains(k)) {
        return Err(PromptError::UnknownType(unknown.clone()));
    }
    render(config, points, demos, input_id, input_text)
}

fn render(
    config: &PromptConfig,
    points: &IndexMap<String, Vec<String>>,
    demos: &[Demonstration],
    input_id: &str,
    input_text: &str,
) -> Result<PromptBundle, PromptError> {
    if config.schema.is_empty() {
        return Err(PromptError::EmptySchema);
    }
    let mut text = String::new();
    let mut points_used = IndexMap::new();
    let mut warnings = Vec::new();
    push_line(&mut text, &config.header);
    for name in config.schema.names() {
        match points.get(name) {
            Some(p) if !p.is_empty() => {
                push_line(&mut text, &format!("- {name}: e.g. {}", p.join(", ")));
                points_used.insert(name.to_string(), p.clone());
            }
            Some(_) => {
                warnings.push(format!("no point entities for {name}"));
                push_line(&mut text, &format!("- {name}"));
            }
            None => push_line(&mut text, &format!("- {name}")),
        }
    }
    if !demos.is_empty() {
        push_examples(&mut text, demos);
    }
    push_tail(&mut text, config, input_text);
    Ok(PromptBundle {
        text,
        demos_used: demos.to_vec(),
        points_used,
        input_sentence_id: input_id.to_string(),
        warnings,
    })
}

/// The query sentence of a rendered prompt: everything after the last
/// `Input: ` line marker.
pub fn query_text(prompt: &str) -> Option<&str> {
    if let Some(pos) = prompt.rfind("\nInput: ") {
        return Some(&prompt[pos + "\nInput: ".len()..]);
    }
    prompt.strip_prefix("Input: ")
}
