//! Recover a structured prediction from raw model text.
//!
//! Extraction never fails: output without a usable JSON object becomes an
//! empty prediction with [`ParseStatus::Failed`].

use indexmap::{IndexMap, IndexSet};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{GoldMention, Schema};
use crate::prompt::render_grouped;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    /// The whole output (modulo surrounding whitespace) is the object.
    Clean,
    /// The object was found inside decoration (prose, code fences).
    Repaired,
    /// No usable object.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    /// Every schema type, in schema order; surfaces trimmed and deduplicated.
    pub by_type: IndexMap<String, IndexSet<String>>,
    pub status: ParseStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Prediction {
    pub fn empty(schema: &Schema, status: ParseStatus) -> Self {
        Self {
            by_type: schema.names().map(|n| (n.to_string(), IndexSet::new())).collect(),
            status,
            notes: Vec::new(),
        }
    }

    /// Flatten to `(type, surface)` mentions.
    pub fn mentions(&self) -> Vec<GoldMention> {
        self.by_type
            .iter()
            .flat_map(|(t, set)| set.iter().map(move |s| GoldMention::new(t.clone(), s.clone())))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.by_type.values().all(IndexSet::is_empty)
    }

    /// Same compact form as [`crate::prompt::serialize_output`].
    pub fn to_canonical_json(&self) -> String {
        render_grouped(
            self.by_type
                .iter()
                .map(|(t, set)| (t.as_str(), set.iter().map(String::as_str))),
        )
    }
}

/// One line of the per-run parse diagnostics log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub sentence_id: String,
    pub parse_status: ParseStatus,
    pub note: String,
    pub raw_excerpt: String,
}

const EXCERPT_CHARS: usize = 200;

impl Diagnostic {
    /// A diagnostic for anything other than a clean, note-free parse.
    pub fn for_prediction(sentence_id: &str, raw: &str, pred: &Prediction) -> Option<Self> {
        if pred.status == ParseStatus::Clean && pred.notes.is_empty() {
            return None;
        }
        Some(Self {
            sentence_id: sentence_id.to_string(),
            parse_status: pred.status,
            note: pred.notes.join("; "),
            raw_excerpt: raw.chars().take(EXCERPT_CHARS).collect(),
        })
    }
}

pub fn extract_prediction(text: &str, schema: &Schema) -> Prediction {
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(text.trim()) {
        return from_object(&obj, schema, ParseStatus::Clean);
    }
    let stripped = strip_fences(text);
    match last_object(&stripped) {
        Some(obj) => from_object(&obj, schema, ParseStatus::Repaired),
        None => {
            let mut pred = Prediction::empty(schema, ParseStatus::Failed);
            pred.notes.push("no JSON object found".to_string());
            pred
        }
    }
}

/// Drop code-fence marker lines (```` ``` ```` or ```` ```json ````).
fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The balanced `{...}` region with the largest end offset that parses as a
/// JSON object; among regions sharing that end, the outermost.
fn last_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut best: Option<(usize, usize, serde_json::Map<String, Value>)> = None;
    for (start, _) in text.match_indices('{') {
        let Some(end) = matching_brace(bytes, start) else { continue };
        let better = match &best {
            None => true,
            Some((bs, be, _)) => end > *be || (end == *be && start < *bs),
        };
        if !better {
            continue;
        }
        if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&text[start..=end]) {
            best = Some((start, end, obj));
        }
    }
    best.map(|(_, _, obj)| obj)
}

/// Index of the `}` closing the `{` at `start`, skipping JSON string bodies.
fn matching_brace(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn from_object(
    obj: &serde_json::Map<String, Value>,
    schema: &Schema,
    status: ParseStatus,
) -> Prediction {
    let mut pred = Prediction::empty(schema, status);
    for (key, value) in obj {
        let Some(set) = pred.by_type.get_mut(key) else {
            pred.notes.push(format!("dropped unknown type {key:?}"));
            continue;
        };
        let Value::Array(items) = value else {
            pred.notes.push(format!("value of {key:?} is not an array"));
            continue;
        };
        for item in items {
            match item {
                Value::String(s) => {
                    let s = s.trim();
                    if !s.is_empty() {
                        set.insert(s.to_string());
                    }
                }
                other => pred.notes.push(format!("dropped non-string item {other} under {key:?}")),
            }
        }
    }
    pred
}
