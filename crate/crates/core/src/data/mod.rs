//! Pair datasets: types, TSV/JSONL loaders and the synthetic generator.
//!
//! TSV layouts (tab-separated, one example per line, no header):
//!
//! ```text
//! click        query  title  description  url  language
//! nli          premise  hypothesis  label  language
//! translation  source  target  language
//! ```
//!
//! JSONL lines carry `{"query", "entities": [{"kind", "text"}], "label"?,
//! "language"}` for every schema; `label` defaults to positive.

pub mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pooling::{DocumentRecord, Entity, EntityKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub query: String,
    pub doc: DocumentRecord,
    pub label: Label,
    pub language: String,
    pub task: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Tsv,
    Jsonl,
}

impl FromStr for DataFormat {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(DataFormat::Tsv),
            "jsonl" => Ok(DataFormat::Jsonl),
            _ => Err(DataError::Unknown {
                what: "format",
                value: s.into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Click,
    Nli,
    Translation,
}

impl FromStr for Schema {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "click" => Ok(Schema::Click),
            "nli" => Ok(Schema::Nli),
            "translation" => Ok(Schema::Translation),
            _ => Err(DataError::Unknown {
                what: "schema",
                value: s.into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Count malformed lines instead of failing on the first one.
    pub skip_malformed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadedDataset {
    pub examples: Vec<PairExample>,
    pub skipped: usize,
    pub contradictions: usize,
}

/// Maps a label string under `schema`; `None` means the row is dropped.
fn map_label(schema: Schema, raw: Option<&str>) -> Result<Option<Label>, String> {
    let raw = raw.map(|s| s.trim().to_ascii_lowercase());
    match (schema, raw.as_deref()) {
        (_, None) | (_, Some("positive")) | (_, Some("1")) => Ok(Some(Label::Positive)),
        (Schema::Click | Schema::Nli, Some("negative")) | (Schema::Click | Schema::Nli, Some("0")) => {
            Ok(Some(Label::Negative))
        }
        (Schema::Nli, Some("entailment")) => Ok(Some(Label::Positive)),
        (Schema::Nli, Some("neutral")) => Ok(Some(Label::Negative)),
        (Schema::Nli, Some("contradiction")) => Ok(None),
        (_, Some(other)) => Err(format!("unknown label `{other}` for {schema:?} data")),
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    query: String,
    entities: Vec<Entity>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    language: String,
}

enum Row {
    Example(PairExample),
    Contradiction,
}

fn parse_tsv(line: &str, schema: Schema, task: &str) -> Result<Row, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    let want = match schema {
        Schema::Click => 5,
        Schema::Nli => 4,
        Schema::Translation => 3,
    };
    if cols.len() != want {
        return Err(format!("expected {want} tab-separated columns, found {}", cols.len()));
    }
    let (query, entities, label, language) = match schema {
        Schema::Click => (
            cols[0],
            vec![
                Entity::new(EntityKind::Title, cols[1]),
                Entity::new(EntityKind::Description, cols[2]),
                Entity::new(EntityKind::Url, cols[3]),
            ],
            None,
            cols[4],
        ),
        Schema::Nli => (cols[0], vec![Entity::new(EntityKind::Title, cols[1])], Some(cols[2]), cols[3]),
        Schema::Translation => (cols[0], vec![Entity::new(EntityKind::Title, cols[1])], None, cols[2]),
    };
    build_row(schema, task, query.to_string(), entities, label, language.to_string())
}

fn build_row(
    schema: Schema,
    task: &str,
    query: String,
    entities: Vec<Entity>,
    label: Option<&str>,
    language: String,
) -> Result<Row, String> {
    if query.trim().is_empty() {
        return Err("empty query".into());
    }
    if entities.is_empty() {
        return Err("document has no entities".into());
    }
    let Some(label) = map_label(schema, label)? else {
        return Ok(Row::Contradiction);
    };
    let language = language.trim().to_string();
    Ok(Row::Example(PairExample {
        query,
        doc: DocumentRecord::new(entities, language.clone()),
        label,
        language,
        task: task.to_string(),
    }))
}

fn parse_jsonl(line: &str, schema: Schema, task: &str) -> Result<Row, String> {
    let rec: JsonRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    build_row(schema, task, rec.query, rec.entities, rec.label.as_deref(), rec.language)
}

/// Parses a pair dataset from any reader.
pub fn read_pair_dataset<R: BufRead>(
    reader: R,
    format: DataFormat,
    schema: Schema,
    task: &str,
    opts: LoadOptions,
) -> Result<LoadedDataset> {
    let mut out = LoadedDataset::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            DataFormat::Tsv => parse_tsv(line, schema, task),
            DataFormat::Jsonl => parse_jsonl(line, schema, task),
        };
        match parsed {
            Ok(Row::Example(e)) => out.examples.push(e),
            Ok(Row::Contradiction) => out.contradictions += 1,
            Err(msg) if opts.skip_malformed => {
                log::debug!("skipping line {}: {msg}", i + 1);
                out.skipped += 1;
            }
            Err(msg) => return Err(DataError::Parse { line: i + 1, msg }),
        }
    }
    Ok(out)
}

pub fn load_pair_dataset(
    path: &Path,
    format: DataFormat,
    schema: Schema,
    task: &str,
    opts: LoadOptions,
) -> Result<LoadedDataset> {
    let f = File::open(path).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
    read_pair_dataset(BufReader::new(f), format, schema, task, opts)
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// One TSV line for `e` under `schema` (no trailing newline).
pub fn to_tsv_line(e: &PairExample, schema: Schema) -> String {
    let text = |k: EntityKind| {
        e.doc
            .entities
            .iter()
            .find(|x| x.kind == k)
            .map(|x| clean(&x.text))
            .unwrap_or_default()
    };
    match schema {
        Schema::Click => format!(
            "{}\t{}\t{}\t{}\t{}",
            clean(&e.query),
            text(EntityKind::Title),
            text(EntityKind::Description),
            text(EntityKind::Url),
            clean(&e.language)
        ),
        Schema::Nli => {
            let label = match e.label {
                Label::Positive => "entailment",
                Label::Negative => "neutral",
            };
            format!("{}\t{}\t{label}\t{}", clean(&e.query), text(EntityKind::Title), clean(&e.language))
        }
        Schema::Translation => format!("{}\t{}\t{}", clean(&e.query), text(EntityKind::Title), clean(&e.language)),
    }
}

/// One JSONL line for `e`.
pub fn to_jsonl_line(e: &PairExample) -> String {
    serde_json::json!({
        "query": e.query,
        "entities": e.doc.entities,
        "label": e.label,
        "language": e.language,
    })
    .to_string()
}
