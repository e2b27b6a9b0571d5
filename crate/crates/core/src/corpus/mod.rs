//! Annotated financial sentences and their instruction-tuning form.
//!
//! A corpus is a JSONL file with one sentence per line:
//!
//! ```text
//! {"id": "s1", "text": "...", "entities": {"Company": ["Regions"], "Date": null}}
//! ```
//!
//! Absent entity keys mean "no entities of that type". Each sentence becomes an
//! [`InstructionExample`] whose output is the canonical entity dictionary
//! produced by [`serialize_output`].

mod output;
mod stats;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};

pub use output::{parse_output, serialize_output, serialize_repr, ParseFailure, ParsedOutput};
pub use stats::{compute_stats, emit_distribution, DatasetStats};

/// The instruction shared by every training and evaluation example.
pub const INSTRUCTION: &str = "Do Named Entity Recognition for the following text:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityType {
    Company,
    Date,
    Location,
    Money,
    Person,
    Product,
    Quantity,
}

impl EntityType {
    /// All types in canonical order.
    pub const ALL: [EntityType; 7] = [
        EntityType::Company,
        EntityType::Date,
        EntityType::Location,
        EntityType::Money,
        EntityType::Person,
        EntityType::Product,
        EntityType::Quantity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Company => "Company",
            EntityType::Date => "Date",
            EntityType::Location => "Location",
            EntityType::Money => "Money",
            EntityType::Person => "Person",
            EntityType::Product => "Product",
            EntityType::Quantity => "Quantity",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown entity type {s:?}"))
    }
}

/// Surface strings per entity type. Duplicates are kept (multiset semantics)
/// and list order is preserved.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct EntityMap {
    lists: [Vec<String>; 7],
}

impl EntityMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, ty: EntityType) -> &[String] {
        &self.lists[ty.index()]
    }

    pub fn get_mut(&mut self, ty: EntityType) -> &mut Vec<String> {
        &mut self.lists[ty.index()]
    }

    pub fn push(&mut self, ty: EntityType, mention: impl Into<String>) {
        self.lists[ty.index()].push(mention.into());
    }

    pub fn with(mut self, ty: EntityType, mentions: &[&str]) -> Self {
        self.lists[ty.index()].extend(mentions.iter().map(|s| s.to_string()));
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntityType, &[String])> {
        EntityType::ALL
            .into_iter()
            .map(move |t| (t, self.lists[t.index()].as_slice()))
    }

    pub fn total_mentions(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_mentions() == 0
    }
}

impl Serialize for EntityMap {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(7))?;
        for (ty, mentions) in self.iter() {
            if mentions.is_empty() {
                map.serialize_entry(ty.as_str(), &Option::<()>::None)?;
            } else {
                map.serialize_entry(ty.as_str(), mentions)?;
            }
        }
        map.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotatedSentence {
    pub id: String,
    pub text: String,
    pub entities: EntityMap,
}

impl AnnotatedSentence {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (ty, mentions) in self.entities.iter() {
            if let Some(pos) = mentions.iter().position(|m| m.trim().is_empty()) {
                return Err(format!("{ty} mention #{pos} is empty"));
            }
        }
        Ok(())
    }

    /// Parses one corpus record.
    pub fn from_json_value(value: &Value) -> std::result::Result<Self, String> {
        let obj = value.as_object().ok_or("record is not a JSON object")?;
        let id = obj
            .get("id")
            .and_then(Value::as_str)
            .ok_or("missing string field \"id\"")?
            .to_string();
        let text = obj
            .get("text")
            .and_then(Value::as_str)
            .ok_or("missing string field \"text\"")?
            .to_string();
        let mut entities = EntityMap::new();
        match obj.get("entities") {
            None | Some(Value::Null) => {}
            Some(Value::Object(map)) => {
                for (key, val) in map {
                    let ty: EntityType = key.parse()?;
                    match val {
                        Value::Null => {}
                        Value::Array(items) => {
                            for item in items {
                                let s = item.as_str().ok_or_else(|| {
                                    format!("{ty} entry {item} is not a string")
                                })?;
                                entities.push(ty, s);
                            }
                        }
                        other => return Err(format!("{ty} value must be a list or null, got {other}")),
                    }
                }
            }
            Some(other) => return Err(format!("\"entities\" must be an object, got {other}")),
        }
        let sentence = AnnotatedSentence { id, text, entities };
        sentence.validate()?;
        Ok(sentence)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

/// Reads a JSONL corpus. Blank lines are skipped; any other malformed line
/// aborts the load with its 1-based line number.
pub fn load_corpus(path: &Path) -> Result<Vec<AnnotatedSentence>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&content, path)
}

pub(crate) fn parse_corpus(content: &str, path: &Path) -> Result<Vec<AnnotatedSentence>> {
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::CorpusLine {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        out.push(AnnotatedSentence::from_json_value(&value).map_err(err)?);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, sentences: &[AnnotatedSentence]) -> Result<()> {
    write_jsonl(path, sentences)
}

pub fn to_instruction(sentence: &AnnotatedSentence) -> InstructionExample {
    InstructionExample {
        instruction: INSTRUCTION.to_string(),
        input: sentence.text.clone(),
        output: serialize_output(&sentence.entities),
    }
}

pub fn load_instructions(path: &Path) -> Result<Vec<InstructionExample>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::CorpusLine {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Instruction record as written by dataset building: the triple plus the
/// source sentence id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IdentifiedExample<'a> {
    pub id: &'a str,
    #[serde(flatten)]
    pub example: InstructionExample,
}

/// Reads either an annotated corpus or an instruction JSONL file into
/// sentences with gold maps. Instruction records take their gold map from the
/// parsed `output` and their id from `id` (or `line-N` when absent).
pub fn load_labeled(path: &Path) -> Result<Vec<AnnotatedSentence>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::CorpusLine {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if value.get("output").is_none() {
            out.push(AnnotatedSentence::from_json_value(&value).map_err(err)?);
            continue;
        }
        let field = |name: &str| {
            value
                .get(name)
                .and_then(Value::as_str)
                .ok_or_else(|| err(format!("missing string field {name:?}")))
        };
        let parsed = parse_output(field("output")?).map_err(|e| err(format!("unparseable output: {e}")))?;
        let sentence = AnnotatedSentence {
            id: value
                .get("id")
                .and_then(Value::as_str)
                .map_or_else(|| format!("line-{}", idx + 1), str::to_string),
            text: field("input")?.to_string(),
            entities: parsed.entities,
        };
        sentence.validate().map_err(err)?;
        out.push(sentence);
    }
    Ok(out)
}

pub fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut buf = String::new();
    for row in rows {
        buf.push_str(&serde_json::to_string(row)?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Seeded shuffle followed by a cut at `round(train_ratio * n)`.
pub fn split_by_ratio<T: Clone>(items: &[T], train_ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&train_ratio) || !train_ratio.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "train ratio {train_ratio} must lie in [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_ratio * items.len() as f64).round() as usize;
    let mut train: Vec<usize> = order[..cut].to_vec();
    let mut test: Vec<usize> = order[cut..].to_vec();
    // keep file order inside each split
    train.sort_unstable();
    test.sort_unstable();
    Ok((
        train.into_iter().map(|i| items[i].clone()).collect(),
        test.into_iter().map(|i| items[i].clone()).collect(),
    ))
}
