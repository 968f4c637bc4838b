//! Run directory: one line-delimited JSON file per artifact, keys in
//! alphabetical order so identical runs give identical bytes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CanonicalRelation, EntityClass, EntityClassGroup, RelationClass, RelationClassGroup, Schema};

pub const CHUNKS: &str = "chunks.jsonl";
pub const MENTIONS: &str = "mentions.jsonl";
pub const ENTITIES: &str = "entities.jsonl";
pub const CLASSES_CANDIDATE: &str = "classes_candidate.jsonl";
pub const CLASSES_RESOLVED: &str = "classes_resolved.jsonl";
pub const CLASS_GROUPS: &str = "class_groups.jsonl";
pub const RELATIONS_RAW: &str = "relations_raw.jsonl";
pub const RELATIONS_RESOLVED: &str = "relations_resolved.jsonl";
pub const SCHEMA: &str = "schema.jsonl";
pub const ACTIONS: &str = "actions.jsonl";
pub const PROMPTS: &str = "prompts.jsonl";
pub const EVENTS: &str = "events.jsonl";
pub const NODES: &str = "nodes.jsonl";
pub const EDGES: &str = "edges.jsonl";
pub const TRIPLES: &str = "triples.tsv";
pub const VALIDATION: &str = "validation.json";
pub const MANIFEST: &str = "manifest.json";
pub const SOURCE: &str = "source.jsonl";

/// Pipeline step that writes `file`.
pub fn producer(file: &str) -> &'static str {
    match file {
        CHUNKS | SOURCE => "ingest",
        MENTIONS => "extract",
        ENTITIES => "resolve-entities",
        CLASSES_CANDIDATE | CLASSES_RESOLVED | CLASS_GROUPS => "induce-entity-schema",
        RELATIONS_RAW => "extract-relations",
        RELATIONS_RESOLVED => "resolve-relations",
        _ => "assemble",
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file} line {line}: {reason}")]
    Corrupt { file: String, line: usize, reason: String },
    #[error("{file} is missing: run {stage} first")]
    Missing { file: String, stage: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// JSON with object keys sorted (serde_json's map is ordered).
pub fn to_sorted_json<T: Serialize>(item: &T) -> String {
    let v = serde_json::to_value(item).expect("artifact records serialize");
    serde_json::to_string(&v).expect("values serialize")
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), StoreError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&to_sorted_json(item));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Read one record per non-blank line. A bad line is reported with its
/// 1-based number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            file: name.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Schema as tagged records, one element per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum SchemaRecord {
    EntityClass(EntityClass),
    EntityClassGroup(EntityClassGroup),
    CanonicalRelation(CanonicalRelation),
    RelationClass(RelationClass),
    RelationClassGroup(RelationClassGroup),
}

pub fn schema_records(s: &Schema) -> Vec<SchemaRecord> {
    let mut out: Vec<SchemaRecord> = Vec::new();
    out.extend(s.entity_class_groups.iter().cloned().map(SchemaRecord::EntityClassGroup));
    out.extend(s.entity_classes.iter().cloned().map(SchemaRecord::EntityClass));
    out.extend(s.relation_class_groups.iter().cloned().map(SchemaRecord::RelationClassGroup));
    out.extend(s.relation_classes.iter().cloned().map(SchemaRecord::RelationClass));
    out.extend(s.canonical_relations.iter().cloned().map(SchemaRecord::CanonicalRelation));
    out
}

pub fn schema_from_records(records: Vec<SchemaRecord>) -> Schema {
    let mut s = Schema::default();
    for r in records {
        match r {
            SchemaRecord::EntityClass(c) => s.entity_classes.push(c),
            SchemaRecord::EntityClassGroup(g) => s.entity_class_groups.push(g),
            SchemaRecord::CanonicalRelation(c) => s.canonical_relations.push(c),
            SchemaRecord::RelationClass(c) => s.relation_classes.push(c),
            SchemaRecord::RelationClassGroup(g) => s.relation_class_groups.push(g),
        }
    }
    s
}

/// A log line tagged with the pipeline step that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine<T> {
    pub step: String,
    #[serde(flatten)]
    pub record: T,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn has(&self, file: &str) -> bool {
        self.path(file).is_file()
    }

    fn require(&self, file: &str) -> Result<PathBuf, StoreError> {
        let p = self.path(file);
        if p.is_file() {
            Ok(p)
        } else {
            Err(StoreError::Missing {
                file: file.to_string(),
                stage: producer(file).to_string(),
            })
        }
    }

    pub fn write<T: Serialize>(&self, file: &str, items: &[T]) -> Result<(), StoreError> {
        write_jsonl(&self.path(file), items)
    }

    pub fn read<T: DeserializeOwned>(&self, file: &str) -> Result<Vec<T>, StoreError> {
        read_jsonl(&self.require(file)?)
    }

    pub fn write_json<T: Serialize>(&self, file: &str, item: &T) -> Result<(), StoreError> {
        let v = serde_json::to_value(item).expect("artifact records serialize");
        let mut text = serde_json::to_string_pretty(&v).expect("values serialize");
        text.push('\n');
        write_text(&self.path(file), &text)
    }

    pub fn read_json<T: DeserializeOwned>(&self, file: &str) -> Result<T, StoreError> {
        let p = self.require(file)?;
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            file: file.to_string(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    pub fn write_schema(&self, s: &Schema) -> Result<(), StoreError> {
        self.write(SCHEMA, &schema_records(s))
    }

    pub fn read_schema(&self) -> Result<Schema, StoreError> {
        Ok(schema_from_records(self.read(SCHEMA)?))
    }

    /// Replace the log lines of `step` in a shared log file. The new lines
    /// take the place of the old ones, so re-running a step leaves the file
    /// byte-identical; a first run appends.
    pub fn replace_log<T: Serialize + DeserializeOwned>(&self, file: &str, step: &str, records: Vec<T>) -> Result<(), StoreError> {
        let mut lines: Vec<LogLine<T>> = if self.has(file) { self.read(file)? } else { Vec::new() };
        let at = lines.iter().position(|l| l.step == step);
        lines.retain(|l| l.step != step);
        let at = at.unwrap_or(lines.len());
        let new = records.into_iter().map(|record| LogLine {
            step: step.to_string(),
            record,
        });
        lines.splice(at..at, new);
        self.write(file, &lines)
    }

    /// Log records of one step.
    pub fn read_log<T: DeserializeOwned>(&self, file: &str, step: &str) -> Result<Vec<T>, StoreError> {
        if !self.has(file) {
            return Ok(Vec::new());
        }
        let lines: Vec<LogLine<T>> = self.read(file)?;
        Ok(lines.into_iter().filter(|l| l.step == step).map(|l| l.record).collect())
    }

    /// Files in the run directory, sorted, manifest excluded.
    pub fn files(&self) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_file() && name != MANIFEST {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted() {
        assert_eq!(to_sorted_json(&json!({"b": 1, "a": {"z": 0, "c": 1}})), r#"{"a":{"c":1,"z":0},"b":1}"#);
    }

    #[test]
    fn corrupt_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        run.write(ENTITIES, &[json!({"x": 1}), json!({"x": 2})]).unwrap();
        let p = run.path(ENTITIES);
        let mut text = fs::read_to_string(&p).unwrap();
        text.truncate(text.len() - 3);
        fs::write(&p, text).unwrap();
        let err = run.read::<serde_json::Value>(ENTITIES).unwrap_err();
        assert!(matches!(&err, StoreError::Corrupt { line: 2, .. }), "{err}");
        assert!(err.to_string().starts_with("entities.jsonl line 2"));
    }

    #[test]
    fn missing_file_names_the_step() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunDir::new(dir.path()).read::<serde_json::Value>(NODES).unwrap_err();
        assert_eq!(err.to_string(), "nodes.jsonl is missing: run assemble first");
    }

    #[test]
    fn logs_are_replaced_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        run.replace_log(EVENTS, "a", vec![json!({"n": 1})]).unwrap();
        run.replace_log(EVENTS, "b", vec![json!({"n": 2})]).unwrap();
        run.replace_log(EVENTS, "a", vec![json!({"n": 3})]).unwrap();
        assert_eq!(run.read_log::<serde_json::Value>(EVENTS, "a").unwrap(), [json!({"n": 3})]);
        assert_eq!(run.read_log::<serde_json::Value>(EVENTS, "b").unwrap(), [json!({"n": 2})]);
        let steps: Vec<String> = run.read::<LogLine<serde_json::Value>>(EVENTS).unwrap().into_iter().map(|l| l.step).collect();
        assert_eq!(steps, ["a", "b"]);
    }
}
