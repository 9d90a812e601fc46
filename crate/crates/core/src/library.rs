//! Example libraries, validation sets and the data files shipped with the crate.
//!
//! Example library records (one JSON object per line):
//!
//! ```text
//! {"example_id": 1, "input": "...", "visual_cue": "...", "nl_command": "...",
//!  "cot_rationale": "...", "flag": "V", "umrf": { <UMRF document> }}
//! ```
//!
//! `input`, `visual_cue`, `cot_rationale` and `flag` are optional. A record
//! without `flag` contributes both orientations to a search pool.
//!
//! Validation records: `{"command": "...", "umrf_graph": { <UMRF document> }}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use crate::command::{parse_command, render_command};
use crate::prompt::{FewShotExample, OrderingFlag};
use crate::search::ValidationItem;
use crate::umrf::{graph_from_value, to_canonical_string, validate_graph, ParseMode};

pub const DEMO_EXAMPLES: &str = include_str!("../data/demo_examples.jsonl");
pub const EXAMPLE_TYPES: &str = include_str!("../data/example_types.jsonl");
pub const VALIDATION_SET: &str = include_str!("../data/validation.jsonl");
pub const LEXICON: &str = include_str!("../data/lexicon.tsv");
pub const STOPWORDS: &str = include_str!("../data/stopwords.txt");
pub const CORPUS: &str = include_str!("../data/corpus.txt");

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

fn record_err(line: usize, message: impl ToString) -> LibraryError {
    LibraryError::Record {
        line,
        message: message.to_string(),
    }
}

pub fn read_file(path: &Path) -> Result<String, LibraryError> {
    std::fs::read_to_string(path).map_err(|source| LibraryError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    example_id: u32,
    #[serde(default)]
    input: Option<String>,
    #[serde(default)]
    visual_cue: Option<String>,
    nl_command: String,
    #[serde(default)]
    cot_rationale: Option<String>,
    #[serde(default)]
    flag: Option<OrderingFlag>,
    umrf: Value,
}

/// One library entry; `flag` pins the orientation when the file sets it.
#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEntry {
    pub example: FewShotExample,
    pub flag: Option<OrderingFlag>,
}

pub fn parse_example_library(text: &str) -> Result<Vec<LibraryEntry>, LibraryError> {
    records(text)
        .map(|(line, l)| {
            let rec: ExampleRecord = serde_json::from_str(l).map_err(|e| record_err(line, e))?;
            if rec.nl_command.trim().is_empty() {
                return Err(record_err(line, "nl_command is empty"));
            }
            let parse = |s: &Option<String>| {
                s.as_deref()
                    .map(parse_command)
                    .transpose()
                    .map_err(|e| record_err(line, e))
            };
            let umrf = graph_from_value(&rec.umrf, ParseMode::Strict).map_err(|e| record_err(line, e))?;
            let violations = validate_graph(&umrf);
            if let Some(v) = violations.first() {
                return Err(record_err(line, format!("invalid umrf: {v}")));
            }
            Ok(LibraryEntry {
                example: FewShotExample {
                    example_id: rec.example_id,
                    visual_cue: parse(&rec.visual_cue)?,
                    nl_command: rec.nl_command,
                    cot_rationale: rec.cot_rationale,
                    umrf_output: umrf,
                    input: parse(&rec.input)?,
                },
                flag: rec.flag,
            })
        })
        .collect()
}

pub fn load_example_library(path: &Path) -> Result<Vec<LibraryEntry>, LibraryError> {
    parse_example_library(&read_file(path)?)
}

/// Search pool: entries with a pinned flag appear once, the others once per
/// orientation (visual-first, then language-first), in file order.
pub fn expand_pool(entries: &[LibraryEntry]) -> Vec<(FewShotExample, OrderingFlag)> {
    let mut pool = Vec::new();
    for e in entries {
        match e.flag {
            Some(f) => pool.push((e.example.clone(), f)),
            None => {
                pool.push((e.example.clone(), OrderingFlag::VisualFirst));
                pool.push((e.example.clone(), OrderingFlag::LanguageFirst));
            }
        }
    }
    pool
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ValidationRecord {
    command: String,
    umrf_graph: Value,
}

pub fn parse_validation_set(text: &str) -> Result<Vec<ValidationItem>, LibraryError> {
    records(text)
        .map(|(line, l)| {
            let rec: ValidationRecord = serde_json::from_str(l).map_err(|e| record_err(line, e))?;
            let command = parse_command(&rec.command).map_err(|e| record_err(line, e))?;
            let graph = graph_from_value(&rec.umrf_graph, ParseMode::Strict).map_err(|e| record_err(line, e))?;
            ValidationItem::new(command, graph).map_err(|e| record_err(line, e))
        })
        .collect()
}

pub fn load_validation_set(path: &Path) -> Result<Vec<ValidationItem>, LibraryError> {
    parse_validation_set(&read_file(path)?)
}

/// One document per non-empty line.
pub fn parse_corpus(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

/// The five demo examples (single navigations, two inspections, one scan).
pub fn demo_examples() -> Vec<FewShotExample> {
    parse_example_library(DEMO_EXAMPLES)
        .expect("bundled demo examples are valid")
        .into_iter()
        .map(|e| e.example)
        .collect()
}

/// The five marker-first example types used for permutation search.
pub fn example_types() -> Vec<LibraryEntry> {
    parse_example_library(EXAMPLE_TYPES).expect("bundled example types are valid")
}

pub fn validation_items() -> Vec<ValidationItem> {
    parse_validation_set(VALIDATION_SET).expect("bundled validation set is valid")
}

pub fn corpus() -> Vec<String> {
    parse_corpus(CORPUS)
}

/// Mock fixture mapping each bundled command to its canonical graph.
pub fn default_mock_fixture() -> BTreeMap<String, String> {
    let mut fixture = BTreeMap::new();
    for ex in demo_examples().into_iter().chain(example_types().into_iter().map(|e| e.example)) {
        fixture.insert(render_command(&ex.query_form()), to_canonical_string(&ex.umrf_output));
    }
    for item in validation_items() {
        fixture.insert(render_command(&item.command), to_canonical_string(&item.reference_graph));
    }
    fixture
}
