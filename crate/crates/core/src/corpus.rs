//! NER corpora: sentences with typed gold mentions, per-type entity pools,
//! split statistics and demonstration sampling.
//!
//! JSONL (one sentence object per line) is the interchange format; BIO
//! column files are accepted through [`parse_bio`].

use std::collections::HashSet;
use std::io::{BufRead, Write};

use indexmap::{IndexMap, IndexSet};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt;
use crate::seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed BIO line {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("line {line}: malformed tag {tag:?}")]
    MalformedTag { line: usize, tag: String },
    #[error("line {line}: unknown entity type {etype:?}")]
    UnknownType { line: usize, etype: String },
    #[error("invalid entity type name {0:?}")]
    InvalidTypeName(String),
    #[error("duplicate entity type {0:?} in schema")]
    DuplicateType(String),
    #[error("sentence {id}: gold mention has empty surface")]
    EmptySurface { id: String },
    #[error("sentence {id}: gold type {etype:?} is not in the schema")]
    GoldTypeNotInSchema { id: String, etype: String },
    #[error("duplicate sentence id {0:?}")]
    DuplicateId(String),
    #[error("requested {k} demonstrations from a split of {available}")]
    TooManyDemonstrations { k: usize, available: usize },
    #[error("sentence {id}: mention {surface:?} does not align with the tokens")]
    Unalignable { id: String, surface: String },
    #[error("jsonl line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One entity label of a task, e.g. `PER`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityType {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl EntityType {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() || name.contains('\n') || name.contains('\r') {
            return Err(CorpusError::InvalidTypeName(name));
        }
        Ok(Self { name, description: None })
    }
}

/// Ordered entity-type label set. The order drives every prompt rendering
/// and every serialized output object.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<EntityType>", into = "Vec<EntityType>")]
pub struct Schema(Vec<EntityType>);

impl Schema {
    pub fn new(types: Vec<EntityType>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &types {
            if t.name.trim().is_empty() || t.name.contains('\n') || t.name.contains('\r') {
                return Err(CorpusError::InvalidTypeName(t.name.clone()));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(CorpusError::DuplicateType(t.name.clone()));
            }
        }
        Ok(Self(types))
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        names
            .iter()
            .map(|n| EntityType::new(n.as_ref()))
            .collect::<Result<Vec<_>>>()
            .and_then(Self::new)
    }

    /// The CoNLL2003 label set in its customary order.
    pub fn conll2003() -> Self {
        Self::from_names(&["PER", "ORG", "LOC", "MISC"]).expect("static schema")
    }

    pub fn types(&self) -> &[EntityType] {
        &self.0
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|t| t.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<EntityType>> for Schema {
    type Error = CorpusError;
    fn try_from(types: Vec<EntityType>) -> Result<Self> {
        Self::new(types)
    }
}

impl From<Schema> for Vec<EntityType> {
    fn from(schema: Schema) -> Self {
        schema.0
    }
}

/// A typed entity mention. Only the surface string is kept; spans are not
/// tracked.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoldMention {
    pub surface: String,
    #[serde(rename = "type")]
    pub etype: String,
}

impl GoldMention {
    pub fn new(etype: impl Into<String>, surface: impl Into<String>) -> Self {
        Self { surface: surface.into(), etype: etype.into() }
    }
}

/// Trim leading and trailing whitespace. Case and inner whitespace are kept.
pub fn normalize_surface(surface: &str) -> &str {
    surface.trim()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub gold: Vec<GoldMention>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Schema,
    pub train: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

impl Dataset {
    /// Check id uniqueness and disjointness, gold types and surfaces.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in self.train.iter().chain(&self.test) {
            if !ids.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
            for m in &s.gold {
                if normalize_surface(&m.surface).is_empty() {
                    return Err(CorpusError::EmptySurface { id: s.id.clone() });
                }
                if !self.schema.contains(&m.etype) {
                    return Err(CorpusError::GoldTypeNotInSchema {
                        id: s.id.clone(),
                        etype: m.etype.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Unique training surfaces of one entity type, in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPool {
    #[serde(rename = "type")]
    pub etype: String,
    pub entities: IndexSet<String>,
}

impl EntityPool {
    pub fn new(etype: impl Into<String>) -> Self {
        Self { etype: etype.into(), entities: IndexSet::new() }
    }

    pub fn from_surfaces<I, S>(etype: impl Into<String>, surfaces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut pool = Self::new(etype);
        for s in surfaces {
            pool.insert(s.as_ref());
        }
        pool
    }

    /// Insert a surface after normalization. Blank surfaces are ignored.
    pub fn insert(&mut self, surface: &str) -> bool {
        let s = normalize_surface(surface);
        !s.is_empty() && self.entities.insert(s.to_string())
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.entities.contains(surface)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(String::as_str)
    }
}

/// Entity pools keyed by type name, in schema order.
pub type Pools = IndexMap<String, EntityPool>;

/// An in-prompt example: the sentence text and its canonical JSON output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub sentence_id: String,
    pub input: String,
    pub output: String,
    pub gold: Vec<GoldMention>,
}

impl Demonstration {
    pub fn from_sentence(sentence: &Sentence, schema: &Schema) -> Self {
        Self {
            sentence_id: sentence.id.clone(),
            input: sentence.text.clone(),
            output: prompt::serialize_output(&sentence.gold, schema),
            gold: sentence.gold.clone(),
        }
    }
}

/// Output of [`parse_bio`].
#[derive(Debug, Clone, Default)]
pub struct BioImport {
    pub sentences: Vec<Sentence>,
    pub warnings: Vec<String>,
}

/// Read a BIO column file.
///
/// The token is the first column and the tag the last, so both two-column
/// files and the four-column CoNLL2003 layout are accepted. `-DOCSTART-`
/// lines act as sentence breaks. An `I-X` that does not continue an `X`
/// mention is repaired to `B-X` and reported in [`BioImport::warnings`].
/// Sentence ids are `{split}-{index}` with a zero-based index.
pub fn parse_bio<R: BufRead>(reader: R, schema: &Schema, split: &str) -> Result<BioImport> {
    let mut out = BioImport::default();
    let mut tokens: Vec<String> = Vec::new();
    let mut gold: Vec<GoldMention> = Vec::new();
    // (type, tokens) of the mention currently open
    let mut open: Option<(String, Vec<String>)> = None;

    fn close(open: &mut Option<(String, Vec<String>)>, gold: &mut Vec<GoldMention>) {
        if let Some((etype, toks)) = open.take() {
            gold.push(GoldMention::new(etype, toks.join(" ")));
        }
    }

    let flush = |tokens: &mut Vec<String>,
                     gold: &mut Vec<GoldMention>,
                     open: &mut Option<(String, Vec<String>)>,
                     out: &mut BioImport| {
        close(open, gold);
        if !tokens.is_empty() {
            let id = format!("{split}-{}", out.sentences.len());
            out.sentences.push(Sentence {
                id,
                text: tokens.join(" "),
                gold: std::mem::take(gold),
            });
            tokens.clear();
        }
    };

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("-DOCSTART-") {
            flush(&mut tokens, &mut gold, &mut open, &mut out);
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(CorpusError::MalformedLine { line: line_no, text: line.clone() });
        }
        let token = cols[0];
        let tag = cols[cols.len() - 1];

        if tag == "O" {
            close(&mut open, &mut gold);
            tokens.push(token.to_string());
            continue;
        }
        let (prefix, etype) = match tag.split_once('-') {
            Some((p @ ("B" | "I"), t)) if !t.is_empty() => (p, t),
            _ => return Err(CorpusError::MalformedTag { line: line_no, tag: tag.to_string() }),
        };
        if !schema.contains(etype) {
            return Err(CorpusError::UnknownType { line: line_no, etype: etype.to_string() });
        }
        let continues = prefix == "I" && matches!(&open, Some((t, _)) if t == etype);
        if continues {
            if let Some((_, toks)) = open.as_mut() {
                toks.push(token.to_string());
            }
        } else {
            if prefix == "I" {
                out.warnings.push(format!(
                    "line {line_no}: {tag} without opener, treated as B-{etype}"
                ));
            }
            close(&mut open, &mut gold);
            open = Some((etype.to_string(), vec![token.to_string()]));
        }
        tokens.push(token.to_string());
    }
    flush(&mut tokens, &mut gold, &mut open, &mut out);
    if !out.warnings.is_empty() {
        tracing::warn!(
            "{split}: repaired {} I- tags without an opener",
            out.warnings.len()
        );
    }
    Ok(out)
}

/// Serialize a sentence back to two-column BIO lines.
///
/// Tokens come from splitting `text` on single spaces; each gold mention is
/// aligned, in order, to the first matching token run after the previous one.
pub fn to_bio(sentence: &Sentence) -> Result<String> {
    let tokens: Vec<&str> = sentence.text.split(' ').collect();
    let mut tags: Vec<String> = vec!["O".to_string(); tokens.len()];
    let mut cursor = 0;
    for m in &sentence.gold {
        let wanted: Vec<&str> = m.surface.split(' ').collect();
        let found = (cursor..=tokens.len().saturating_sub(wanted.len()))
            .find(|&i| tokens[i..].starts_with(&wanted));
        let start = found.ok_or_else(|| CorpusError::Unalignable {
            id: sentence.id.clone(),
            surface: m.surface.clone(),
        })?;
        for (offset, tag) in tags[start..start + wanted.len()].iter_mut().enumerate() {
            let prefix = if offset == 0 { "B" } else { "I" };
            *tag = format!("{prefix}-{}", m.etype);
        }
        cursor = start + wanted.len();
    }
    let mut out = String::new();
    for (tok, tag) in tokens.iter().zip(&tags) {
        out.push_str(tok);
        out.push('\t');
        out.push_str(tag);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Json { line: idx + 1, source })?;
        out.push(sentence);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, sentences: &[Sentence]) -> Result<()> {
    for s in sentences {
        let line = serde_json::to_string(s).map_err(|source| CorpusError::Json { line: 0, source })?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Per-type pools of unique gold surfaces, in schema order. Mentions of
/// types outside the schema are ignored.
pub fn unique_entities(split: &[Sentence], schema: &Schema) -> Pools {
    unique_from_mentions(split.iter().flat_map(|s| s.gold.iter()), schema)
}

pub(crate) fn unique_from_mentions<'a, I>(mentions: I, schema: &Schema) -> Pools
where
    I: IntoIterator<Item = &'a GoldMention>,
{
    let mut pools: Pools = schema
        .names()
        .map(|n| (n.to_string(), EntityPool::new(n)))
        .collect();
    for m in mentions {
        if let Some(pool) = pools.get_mut(&m.etype) {
            pool.insert(&m.surface);
        }
    }
    pools
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sentences: usize,
    /// Unique (type, surface) pairs.
    pub unique_entities: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train: SplitStats,
    pub test: SplitStats,
}

pub fn split_stats(split: &[Sentence], schema: &Schema) -> SplitStats {
    SplitStats {
        sentences: split.len(),
        unique_entities: unique_entities(split, schema).values().map(EntityPool::len).sum(),
    }
}

pub fn stats(dataset: &Dataset) -> DatasetStats {
    DatasetStats {
        train: split_stats(&dataset.train, &dataset.schema),
        test: split_stats(&dataset.test, &dataset.schema),
    }
}

/// Uniformly sample `k` training sentences without replacement and render
/// them as demonstrations. The sample order is the order drawn.
pub fn sample_demonstrations(
    train: &[Sentence],
    k: usize,
    seed: u64,
    schema: &Schema,
) -> Result<Vec<Demonstration>> {
    if k > train.len() {
        return Err(CorpusError::TooManyDemonstrations { k, available: train.len() });
    }
    let mut rng = seed::rng(seed);
    Ok(index::sample(&mut rng, train.len(), k)
        .into_iter()
        .map(|i| Demonstration::from_sentence(&train[i], schema))
        .collect())
}
