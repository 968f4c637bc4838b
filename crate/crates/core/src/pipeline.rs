//! Step functions over a run directory, the run manifest, action replay
//! and provider selection from configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alignment::{evaluate_schema, AlignmentError, GoldTriple, ReferenceOntology, SchemaEvaluation, Scope};
use crate::assembly::{
    assemble, edge_records, graph_from_records, node_records, parse_triples_tsv, triples_tsv, AssemblyError, EdgeRecord,
    GraphParts, NodeRecord,
};
use crate::classes::{recognize_classes, replay_class_actions, run_class_resolution};
use crate::config::Config;
use crate::entity::{recognize_all, replay_entity_actions, run_entity_resolution};
use crate::ingest::{chunk, load_document, textualize, CommandTextualizer, IdentityTextualizer, IngestError, StubTextualizer, Textualizer};
use crate::metrics::{GraphScore, GraphView, MetricsError};
use crate::model::{
    ActionRecord, Chunk, ChunkId, ContextEnrichedGraph, Entity, EntityClass, EntityClassGroup, GraphValidator, Mention,
    MentionId, RelationInstance, ValidationReport,
};
use crate::neighborhood::NeighborhoodError;
use crate::provider::{
    ChatProvider, Embedder, HashEmbedder, HttpChat, HttpEmbedder, PromptRecord, Providers, RoutedChat, StageTag, StubChat,
};
use crate::relation::{recognize_all_relations, replay_relation_actions, run_relation_resolution};
use crate::retention::{doc_subgraph, graph_triples, run_benchmark, BenchmarkRecord, BenchmarkReport, RetentionError};
use crate::store::{self, read_jsonl, to_sorted_json, RunDir, StoreError};
use crate::trace::{Event, Trace};

pub const RETENTION_REPORT: &str = "retention_report.json";
pub const SCORE_REPORT: &str = "score_report.json";

pub fn schema_report_file(scope: Scope) -> String {
    format!("schema_report_{}.json", scope_name(scope))
}

pub fn audit_file(scope: Scope) -> String {
    format!("audit_{}.jsonl", scope_name(scope))
}

fn scope_name(scope: Scope) -> &'static str {
    match scope {
        Scope::Source => "source",
        Scope::Heldout => "heldout",
        Scope::Combined => "combined",
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Representation(#[from] NeighborhoodError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Retention(#[from] RetentionError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("replay of {step} failed: {reason}")]
    Replay { step: String, reason: String },
    #[error("provider setup: {0}")]
    Provider(String),
    #[error("input: {0}")]
    Input(String),
}

/// Build the providers named by the configuration. `kind_override`
/// (`stub` or `live`) replaces every per-stage choice.
pub fn providers_from_config(config: &Config, kind_override: Option<&str>) -> Result<Providers, PipelineError> {
    let p = &config.provider;
    let stub: Arc<dyn ChatProvider> = Arc::new(StubChat {
        similarity_threshold: p.stub_similarity_threshold,
    });
    let mut live: Option<Arc<dyn ChatProvider>> = None;
    let mut make = |kind: &str| -> Result<Arc<dyn ChatProvider>, PipelineError> {
        match kind {
            "stub" => Ok(stub.clone()),
            "live" => {
                if std::env::var(&p.chat.api_key_env).is_err() {
                    return Err(PipelineError::Provider(format!(
                        "environment variable {} is not set",
                        p.chat.api_key_env
                    )));
                }
                Ok(live.get_or_insert_with(|| Arc::new(HttpChat::new(p.chat.clone()))).clone())
            }
            other => Err(PipelineError::Provider(format!("unknown provider kind `{other}`"))),
        }
    };
    let default_kind = kind_override.unwrap_or(&p.kind);
    let default = make(default_kind)?;
    let mut routes = Vec::new();
    if kind_override.is_none() {
        for tag in StageTag::ALL {
            if let Some(kind) = p.stages.get(&tag.to_string()) {
                if kind != default_kind {
                    routes.push((tag, make(kind)?));
                }
            }
        }
    }
    for key in p.stages.keys() {
        if !StageTag::ALL.iter().any(|t| t.to_string() == *key) {
            return Err(PipelineError::Provider(format!("unknown stage `{key}` in provider.stages")));
        }
    }
    let chat: Arc<dyn ChatProvider> = if routes.is_empty() {
        default
    } else {
        Arc::new(RoutedChat { default, routes })
    };
    let embedder: Arc<dyn Embedder> = if default_kind == "live" && !p.stub_embeddings {
        Arc::new(HttpEmbedder::new(p.embedding.clone()))
    } else {
        Arc::new(HashEmbedder {
            dim: config.embedding.dimension,
        })
    };
    Ok(Providers { chat, embedder })
}

/// Original text of one ingested document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub doc_id: String,
    pub source: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: Value,
    pub chat_provider: String,
    pub embedder: String,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

/// One disagreement between a stored artifact and its replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub file: String,
    pub id: String,
    /// `stored_only` or `replayed_only`.
    pub side: String,
}

fn textualizer(config: &Config) -> Result<Box<dyn Textualizer>, PipelineError> {
    match config.ingest.textualizer.as_str() {
        "identity" => Ok(Box::new(IdentityTextualizer)),
        "stub" => Ok(Box::new(StubTextualizer)),
        "command" => {
            let command = config
                .ingest
                .textualizer_command
                .clone()
                .ok_or_else(|| PipelineError::Input("ingest.textualizer_command is required for `command`".into()))?;
            Ok(Box::new(CommandTextualizer { command }))
        }
        other => Err(PipelineError::Input(format!("unknown textualizer `{other}`"))),
    }
}

/// Input files: plain paths as given, directories expanded to their
/// `.txt`, `.md` and `.json` files in name order.
pub fn input_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.extension().is_some_and(|x| x == "txt" || x == "md" || x == "json"))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(PipelineError::Input(format!("{} does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(PipelineError::Input("no input documents".into()));
    }
    Ok(out)
}

fn diff<T: Serialize>(file: &str, stored: &[T], replayed: &[T], id: impl Fn(&T) -> String) -> Vec<DiffEntry> {
    let key = |items: &[T]| -> BTreeMap<String, String> { items.iter().map(|x| (to_sorted_json(x), id(x))).collect() };
    let (a, b) = (key(stored), key(replayed));
    let mut out = Vec::new();
    for (line, id) in &a {
        if !b.contains_key(line) {
            out.push(DiffEntry { file: file.into(), id: id.clone(), side: "stored_only".into() });
        }
    }
    for (line, id) in &b {
        if !a.contains_key(line) {
            out.push(DiffEntry { file: file.into(), id: id.clone(), side: "replayed_only".into() });
        }
    }
    out
}

/// A configured pipeline bound to one run directory.
pub struct Pipeline {
    pub run: RunDir,
    pub config: Config,
    pub providers: Providers,
}

impl Pipeline {
    pub fn new(run_dir: impl Into<PathBuf>, config: Config, providers: Providers) -> Self {
        Pipeline {
            run: RunDir::new(run_dir),
            config,
            providers,
        }
    }

    fn save_trace(&self, step: &str, trace: Trace) -> Result<(), PipelineError> {
        self.run.replace_log::<ActionRecord>(store::ACTIONS, step, trace.actions)?;
        self.run.replace_log::<PromptRecord>(store::PROMPTS, step, trace.prompts)?;
        self.run.replace_log::<Event>(store::EVENTS, step, trace.events)?;
        Ok(())
    }

    /// Rewrite the manifest: configuration, provider identities and a
    /// checksum of every artifact.
    pub fn write_manifest(&self) -> Result<(), PipelineError> {
        let mut files = BTreeMap::new();
        for name in self.run.files()? {
            let p = self.run.path(&name);
            let bytes = std::fs::read(&p).map_err(|e| StoreError::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            files.insert(name, hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = Manifest {
            config: serde_json::to_value(&self.config).expect("config serializes"),
            chat_provider: self.providers.chat.identity(),
            embedder: self.providers.embedder.identity(),
            files,
        };
        self.run.write_json(store::MANIFEST, &manifest)?;
        Ok(())
    }

    fn finish(&self, step: &str, trace: Trace) -> Result<(), PipelineError> {
        self.save_trace(step, trace)?;
        self.write_manifest()
    }

    pub fn chunks(&self) -> Result<Vec<Chunk>, PipelineError> {
        Ok(self.run.read(store::CHUNKS)?)
    }

    pub fn mentions(&self) -> Result<Vec<Mention>, PipelineError> {
        Ok(self.run.read(store::MENTIONS)?)
    }

    pub fn entities(&self) -> Result<Vec<Entity>, PipelineError> {
        Ok(self.run.read(store::ENTITIES)?)
    }

    /// Textualize and chunk documents. Returns the chunk count.
    pub fn ingest(&self, inputs: &[PathBuf]) -> Result<usize, PipelineError> {
        let textualizer = textualizer(&self.config)?;
        let mut sources = Vec::new();
        let mut chunks = Vec::new();
        let mut seen = BTreeSet::new();
        for path in input_files(inputs)? {
            let doc = load_document(&path)?;
            if !seen.insert(doc.doc_id().to_string()) {
                return Err(PipelineError::Input(format!("duplicate document id {}", doc.doc_id())));
            }
            let stream = textualize(&doc, textualizer.as_ref())?;
            chunks.extend(chunk(&stream, self.config.ingest.chunking));
            sources.push(SourceRecord {
                doc_id: stream.doc_id.clone(),
                source: stream.source.clone(),
                text: stream.text(),
            });
        }
        self.run.write(store::SOURCE, &sources)?;
        self.run.write(store::CHUNKS, &chunks)?;
        self.finish("ingest", Trace::default())?;
        Ok(chunks.len())
    }

    pub fn extract(&self) -> Result<usize, PipelineError> {
        let chunks = self.chunks()?;
        let (mentions, trace) = recognize_all(&chunks, &self.config, &self.providers);
        self.run.write(store::MENTIONS, &mentions)?;
        self.finish("extract", trace)?;
        Ok(mentions.len())
    }

    pub fn resolve_entities(&self) -> Result<usize, PipelineError> {
        let mentions = self.mentions()?;
        let res = run_entity_resolution(&mentions, &self.config, &self.providers)?;
        self.run.write(store::ENTITIES, &res.entities)?;
        self.finish("resolve-entities", res.trace)?;
        Ok(res.entities.len())
    }

    pub fn induce_entity_schema(&self) -> Result<usize, PipelineError> {
        let entities = self.entities()?;
        let (candidates, mut trace) = recognize_classes(&entities, &self.config, &self.providers)?;
        self.run.write(store::CLASSES_CANDIDATE, &candidates)?;
        let res = run_class_resolution(candidates, &entities, &self.config, &self.providers)?;
        self.run.write(store::CLASSES_RESOLVED, &res.classes)?;
        self.run.write(store::CLASS_GROUPS, &res.groups)?;
        trace.extend(res.trace);
        self.finish("induce-entity-schema", trace)?;
        Ok(res.classes.len())
    }

    pub fn extract_relations(&self) -> Result<usize, PipelineError> {
        let chunks = self.chunks()?;
        let mentions = self.mentions()?;
        let entities = self.entities()?;
        let (relations, trace) = recognize_all_relations(&chunks, &mentions, &entities, &self.config, &self.providers);
        self.run.write(store::RELATIONS_RAW, &relations)?;
        self.finish("extract-relations", trace)?;
        Ok(relations.len())
    }

    pub fn resolve_relations(&self) -> Result<usize, PipelineError> {
        let raw: Vec<RelationInstance> = self.run.read(store::RELATIONS_RAW)?;
        let entities = self.entities()?;
        let res = run_relation_resolution(raw, &entities, &self.config, &self.providers)?;
        self.run.write(store::RELATIONS_RESOLVED, &res.relations)?;
        self.finish("resolve-relations", res.trace)?;
        Ok(res.relations.len())
    }

    fn validator_inputs(&self) -> Result<(BTreeSet<ChunkId>, BTreeMap<MentionId, Mention>), PipelineError> {
        let chunks = self.chunks()?.into_iter().map(|c| c.id).collect();
        let mentions = self.mentions()?.into_iter().map(|m| (m.id.clone(), m)).collect();
        Ok((chunks, mentions))
    }

    /// Assemble, validate and export the graph. The validation report is
    /// written whether or not assembly succeeds.
    pub fn assemble(&self) -> Result<ValidationReport, PipelineError> {
        let parts = GraphParts {
            entities: self.entities()?,
            relations: self.run.read(store::RELATIONS_RESOLVED)?,
            classes: self.run.read(store::CLASSES_RESOLVED)?,
            groups: self.run.read(store::CLASS_GROUPS)?,
        };
        let (chunks, mentions) = self.validator_inputs()?;
        match assemble(parts, Some(&chunks), Some(&mentions)) {
            Ok((g, report)) => {
                self.run.write(store::NODES, &node_records(&g))?;
                self.run.write(store::EDGES, &edge_records(&g))?;
                self.run.write_schema(&g.schema)?;
                store::write_text(&self.run.path(store::TRIPLES), &triples_tsv(&g))?;
                self.run.write_json(store::VALIDATION, &report)?;
                self.finish("assemble", Trace::default())?;
                Ok(report)
            }
            Err(AssemblyError::Invalid(report)) => {
                self.run.write_json(store::VALIDATION, &report)?;
                self.write_manifest()?;
                Err(AssemblyError::Invalid(report).into())
            }
        }
    }

    /// Every construction step in order.
    pub fn run_all(&self, inputs: &[PathBuf]) -> Result<ValidationReport, PipelineError> {
        self.ingest(inputs)?;
        self.extract()?;
        self.resolve_entities()?;
        self.induce_entity_schema()?;
        self.extract_relations()?;
        self.resolve_relations()?;
        self.assemble()
    }

    pub fn load_graph(&self) -> Result<ContextEnrichedGraph, PipelineError> {
        let nodes: Vec<NodeRecord> = self.run.read(store::NODES)?;
        let edges: Vec<EdgeRecord> = self.run.read(store::EDGES)?;
        let schema = self.run.read_schema()?;
        Ok(graph_from_records(nodes, edges, schema))
    }

    /// Re-check the assembled graph against the chunk and mention stores.
    pub fn validate(&self) -> Result<ValidationReport, PipelineError> {
        let g = self.load_graph()?;
        let (chunks, mentions) = self.validator_inputs()?;
        Ok(GraphValidator::new().with_chunks(&chunks).with_mentions(&mentions).validate(&g))
    }

    /// Re-derive resolved artifacts from raw artifacts and the applied
    /// actions in the log, and list every disagreement.
    pub fn replay(&self) -> Result<Vec<DiffEntry>, PipelineError> {
        let fail = |step: &str| {
            let step = step.to_string();
            move |reason: String| PipelineError::Replay { step, reason }
        };
        let mentions = self.mentions()?;
        let actions: Vec<ActionRecord> = self.run.read_log(store::ACTIONS, "resolve-entities")?;
        let entities = replay_entity_actions(&mentions, &actions).map_err(fail("resolve-entities"))?;
        let stored = self.entities()?;
        let mut out = diff(store::ENTITIES, &stored, &entities, |e| e.id.to_string());

        let candidates: Vec<EntityClass> = self.run.read(store::CLASSES_CANDIDATE)?;
        let actions: Vec<ActionRecord> = self.run.read_log(store::ACTIONS, "induce-entity-schema")?;
        let (classes, groups) = replay_class_actions(candidates, &stored, &actions).map_err(fail("induce-entity-schema"))?;
        let stored_classes: Vec<EntityClass> = self.run.read(store::CLASSES_RESOLVED)?;
        let stored_groups: Vec<EntityClassGroup> = self.run.read(store::CLASS_GROUPS)?;
        out.extend(diff(store::CLASSES_RESOLVED, &stored_classes, &classes, |c| c.id.to_string()));
        out.extend(diff(store::CLASS_GROUPS, &stored_groups, &groups, |g| g.id.to_string()));

        let raw: Vec<RelationInstance> = self.run.read(store::RELATIONS_RAW)?;
        let actions: Vec<ActionRecord> = self.run.read_log(store::ACTIONS, "resolve-relations")?;
        let relations = replay_relation_actions(&raw, &actions).map_err(fail("resolve-relations"))?;
        let stored_rel: Vec<RelationInstance> = self.run.read(store::RELATIONS_RESOLVED)?;
        out.extend(diff(store::RELATIONS_RESOLVED, &stored_rel, &relations, |r| r.id.to_string()));
        Ok(out)
    }

    pub fn eval_retention(&self, benchmark: &Path) -> Result<BenchmarkReport, PipelineError> {
        let g = self.load_graph()?;
        let chunks = self.chunks()?;
        let mentions: BTreeMap<MentionId, Mention> = self.mentions()?.into_iter().map(|m| (m.id.clone(), m)).collect();
        let records: Vec<BenchmarkRecord> = read_jsonl(benchmark)?;
        let (report, trace) = run_benchmark(&g, &chunks, &mentions, &records, &self.config, &self.providers)?;
        self.run.write_json(RETENTION_REPORT, &report)?;
        self.finish("eval-retention", trace)?;
        Ok(report)
    }

    pub fn eval_schema(&self, ontology: &Path, gold: &Path, scope: Scope) -> Result<SchemaEvaluation, PipelineError> {
        let g = self.load_graph()?;
        let text = std::fs::read_to_string(ontology).map_err(|e| StoreError::Io {
            path: ontology.display().to_string(),
            source: e,
        })?;
        let ont: ReferenceOntology = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Input(format!("{}: {e}", ontology.display())))?;
        let gold: Vec<GoldTriple> = read_jsonl(gold)?;
        let (eval, trace) = evaluate_schema(&g, &ont, &gold, scope, &self.config, &self.providers)?;
        self.run.write_json(&schema_report_file(scope), &eval)?;
        self.run.write(&audit_file(scope), &eval.audit)?;
        self.finish(&format!("eval-schema-{}", scope_name(scope)), trace)?;
        Ok(eval)
    }

    /// Retrieval-free metrics of the assembled graph, per document.
    pub fn score(&self) -> Result<ScoreReport, PipelineError> {
        let g = self.load_graph()?;
        let chunks = self.chunks()?;
        let sources: Vec<SourceRecord> = self.run.read(store::SOURCE)?;
        let mut instances = BTreeMap::new();
        for s in &sources {
            let sub = doc_subgraph(&g, &chunks, &s.doc_id);
            if sub.entities.is_empty() {
                continue;
            }
            let score = GraphScore::compute_view(&GraphView::from_graph(&sub), &graph_triples(&sub), &s.text)?;
            instances.insert(s.doc_id.clone(), score);
        }
        let all: Vec<GraphScore> = instances.values().copied().collect();
        let report = ScoreReport {
            macro_avg: GraphScore::macro_average(&all),
            instances,
        };
        self.run.write_json(SCORE_REPORT, &report)?;
        self.write_manifest()?;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub instances: BTreeMap<String, GraphScore>,
    #[serde(rename = "macro")]
    pub macro_avg: GraphScore,
}

/// Score a flat triple file against a source text.
pub fn score_triples(triples_tsv: &str, source: &str) -> Result<GraphScore, PipelineError> {
    Ok(GraphScore::compute(&parse_triples_tsv(triples_tsv), source)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_prerequisite_names_the_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(dir.path(), Config::default(), Providers::stub());
        let err = p.eval_retention(Path::new("nope.jsonl")).unwrap_err();
        assert_eq!(err.to_string(), "nodes.jsonl is missing: run assemble first");
        let err = p.extract().unwrap_err();
        assert!(err.to_string().contains("run ingest first"));
    }

    #[test]
    fn unknown_provider_kind_is_rejected() {
        let mut c = Config::default();
        c.provider.kind = "magic".into();
        assert!(providers_from_config(&c, None).is_err());
        assert!(providers_from_config(&c, Some("stub")).is_ok());
        c.provider.kind = "stub".into();
        c.provider.stages.insert("retention_judge".into(), "stub".into());
        assert!(providers_from_config(&c, None).is_ok());
        c.provider.stages.insert("nonsense".into(), "stub".into());
        assert!(providers_from_config(&c, None).is_err());
    }
}
