//! Retrieval-and-judge harness: retrieval accuracy and average rank of a
//! graph against factual statements about its source text.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{Config, RetrievalConfig};
use crate::entity::entity_representations;
use crate::metrics::{composites, leakage, tricr, GraphView, MetricsError, StructuralReport};
use crate::model::{Chunk, ContextEnrichedGraph, EntityId, Mention, MentionId, RelationId};
use crate::neighborhood::NeighborhoodError;
use crate::provider::prompts::{frame, parse_reply, RETENTION_JUDGE};
use crate::provider::{embed_batch, logged_chat, ChatProvider, ChatRequest, EmbeddingVector, Providers, ProviderError, StageTag};
use crate::trace::{Event, Trace};

const STAGE: &str = "retention";

#[derive(Debug, Error)]
pub enum RetentionError {
    #[error("no statements to evaluate")]
    NoStatements,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Representation(#[from] NeighborhoodError),
}

/// One benchmark item: an article and statements derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub doc_id: String,
    pub text: String,
    pub statements: Vec<String>,
}

/// Retrieved evidence for one statement.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Subgraph {
    /// All entities by descending similarity (ties by id).
    pub ranking: Vec<(EntityId, f64)>,
    pub nodes: Vec<EntityId>,
    pub relations: Vec<RelationId>,
}

/// Entity-layer representation of every graph entity, in graph order.
pub fn entity_index(
    g: &ContextEnrichedGraph,
    mentions: &BTreeMap<MentionId, Mention>,
    config: &Config,
    providers: &Providers,
) -> Result<Vec<EmbeddingVector>, RetentionError> {
    let refs: Vec<_> = g.entities.iter().collect();
    let reps = entity_representations(&refs, mentions, config, providers.embedder.as_ref())?;
    Ok(reps.into_iter().map(|r| r.combined).collect())
}

/// Rank entities against `query`, expand the top `k` seeds breadth-first
/// (direction ignored) and keep the nodes and edges within the caps.
pub fn retrieve_subgraph(
    query: &EmbeddingVector,
    g: &ContextEnrichedGraph,
    reps: &[EmbeddingVector],
    cfg: &RetrievalConfig,
) -> Subgraph {
    let n = g.entities.len();
    let sims: Vec<f64> = reps.iter().map(|r| crate::provider::cosine(query, r)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then_with(|| g.entities[a].id.cmp(&g.entities[b].id)));

    let index: BTreeMap<&str, usize> = g.entities.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut ends = Vec::with_capacity(g.relations.len());
    for r in &g.relations {
        let pair = index.get(r.subject.as_str()).zip(index.get(r.object.as_str())).map(|(&s, &o)| (s, o));
        if let Some((s, o)) = pair {
            adj[s].push(o);
            adj[o].push(s);
        }
        ends.push(pair);
    }

    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for &s in order.iter().take(cfg.k) {
        dist[s] = 0;
        queue.push_back(s);
    }
    while let Some(v) = queue.pop_front() {
        if dist[v] >= cfg.hops {
            continue;
        }
        for &w in &adj[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }

    let mut reached: Vec<usize> = (0..n).filter(|&v| dist[v] != usize::MAX).collect();
    reached.sort_by(|&a, &b| {
        dist[a]
            .cmp(&dist[b])
            .then_with(|| sims[b].total_cmp(&sims[a]))
            .then_with(|| g.entities[a].id.cmp(&g.entities[b].id))
    });
    reached.truncate(cfg.node_cap);
    let kept: BTreeSet<usize> = reached.iter().copied().collect();

    // Edges: nearer first, then by the weaker endpoint's similarity, then id.
    let mut edges: Vec<(usize, usize, usize)> = ends
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.filter(|(s, o)| kept.contains(s) && kept.contains(o)).map(|(s, o)| (i, s, o)))
        .collect();
    edges.sort_by(|&(i, s, o), &(j, t, p)| {
        dist[s]
            .max(dist[o])
            .cmp(&dist[t].max(dist[p]))
            .then_with(|| sims[t].min(sims[p]).total_cmp(&sims[s].min(sims[o])))
            .then_with(|| g.relations[i].id.cmp(&g.relations[j].id))
    });
    edges.truncate(cfg.edge_cap);

    Subgraph {
        ranking: order.iter().map(|&i| (g.entities[i].id.clone(), sims[i])).collect(),
        nodes: reached.iter().map(|&i| g.entities[i].id.clone()).collect(),
        relations: edges.iter().map(|&(i, _, _)| g.relations[i].id.clone()).collect(),
    }
}

/// Triples of a subgraph as the judge sees them, qualifiers included.
pub fn serialize_subgraph(g: &ContextEnrichedGraph, sub: &Subgraph) -> Value {
    let names: BTreeMap<&EntityId, &str> = g.entities.iter().map(|e| (&e.id, e.canonical_name.as_str())).collect();
    let wanted: BTreeSet<&RelationId> = sub.relations.iter().collect();
    let triples: Vec<Value> = g
        .relations
        .iter()
        .filter(|r| wanted.contains(&r.id))
        .map(|r| {
            let qualifiers: BTreeMap<&str, &str> = r.qualifiers.populated().into_iter().collect();
            json!({
                "subject": names.get(&r.subject).copied().unwrap_or(""),
                "predicate": r.predicate(),
                "object": names.get(&r.object).copied().unwrap_or(""),
                "qualifiers": qualifiers,
            })
        })
        .collect();
    Value::Array(triples)
}

/// Binary verdict from the judge. An empty subgraph is never support; an
/// unreadable reply counts as unsupported.
pub fn judge(statement: &str, triples: &Value, chat: &dyn ChatProvider, budget: usize, trace: &mut Trace) -> bool {
    if triples.as_array().is_none_or(|t| t.is_empty()) {
        return false;
    }
    let prompt = frame(RETENTION_JUDGE, &json!({"statement": statement, "triples": triples}));
    let (reply, record) = logged_chat(chat, ChatRequest::new(prompt, budget, StageTag::RetentionJudge));
    trace.prompts.push(record);
    match reply {
        Err(e) => {
            trace.event(Event::new(STAGE, "provider_error", statement, e.to_string()));
            false
        }
        Ok(text) => match parse_reply(&text).and_then(|v| v.get("supported").and_then(Value::as_bool)) {
            Some(b) => b,
            None => {
                trace.event(Event::new(STAGE, "parse_failure", statement, text));
                false
            }
        },
    }
}

/// Verdict and first supporting rank of one statement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub supported: bool,
    pub rank: Option<usize>,
}

/// Judge a statement on the full retrieval, then find the smallest seed
/// count whose subgraph already supports it.
pub fn evaluate_statement(
    statement: &str,
    g: &ContextEnrichedGraph,
    reps: &[EmbeddingVector],
    cfg: &RetrievalConfig,
    providers: &Providers,
    budget: usize,
    trace: &mut Trace,
) -> Result<Verdict, RetentionError> {
    let query = embed_batch(providers.embedder.as_ref(), &[statement.to_string()], 1)?.remove(0);
    let chat = providers.chat.as_ref();
    let full = retrieve_subgraph(&query, g, reps, cfg);
    if !judge(statement, &serialize_subgraph(g, &full), chat, budget, trace) {
        return Ok(Verdict { supported: false, rank: None });
    }
    let max_r = cfg.k.min(g.entities.len());
    for r in 1..max_r {
        let sub = retrieve_subgraph(&query, g, reps, &RetrievalConfig { k: r, ..*cfg });
        if judge(statement, &serialize_subgraph(g, &sub), chat, budget, trace) {
            return Ok(Verdict { supported: true, rank: Some(r) });
        }
    }
    Ok(Verdict { supported: true, rank: Some(max_r.max(1)) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub ret_acc: f64,
    pub leak: f64,
    pub tricr: f64,
    pub rwa: f64,
    pub egu: f64,
    pub sci: f64,
    /// Mean first supporting rank; absent when nothing was supported.
    pub avg_rank: Option<f64>,
    pub structural: StructuralReport,
}

impl RetentionReport {
    /// Mean of per-instance reports. `avg_rank` averages over the instances
    /// that have one.
    pub fn macro_average(reports: &[RetentionReport]) -> RetentionReport {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&RetentionReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let ranks: Vec<f64> = reports.iter().filter_map(|r| r.avg_rank).collect();
        let structural: Vec<StructuralReport> = reports.iter().map(|r| r.structural).collect();
        RetentionReport {
            ret_acc: mean(|r| r.ret_acc),
            leak: mean(|r| r.leak),
            tricr: mean(|r| r.tricr),
            rwa: mean(|r| r.rwa),
            egu: mean(|r| r.egu),
            sci: mean(|r| r.sci),
            avg_rank: (!ranks.is_empty()).then(|| ranks.iter().sum::<f64>() / ranks.len() as f64),
            structural: StructuralReport::macro_average(&structural),
        }
    }
}

pub fn graph_triples(g: &ContextEnrichedGraph) -> Vec<(String, String, String)> {
    let names: BTreeMap<&EntityId, &str> = g.entities.iter().map(|e| (&e.id, e.canonical_name.as_str())).collect();
    g.relations
        .iter()
        .map(|r| {
            let name = |id| names.get(id).copied().unwrap_or("").to_string();
            (name(&r.subject), r.predicate().to_string(), name(&r.object))
        })
        .collect()
}

/// Score one graph instance against its statements and source text.
pub fn run_retention(
    g: &ContextEnrichedGraph,
    reps: &[EmbeddingVector],
    statements: &[String],
    source: &str,
    config: &Config,
    providers: &Providers,
) -> Result<(RetentionReport, Trace), RetentionError> {
    if statements.is_empty() {
        return Err(RetentionError::NoStatements);
    }
    let structural = StructuralReport::compute(&GraphView::from_graph(g))?;
    let names: Vec<String> = g.entities.iter().map(|e| e.canonical_name.clone()).collect();
    let leak = leakage(&names, source)?;
    let tricr = tricr(&graph_triples(g), source)?;

    let results: Vec<(Result<Verdict, RetentionError>, Trace)> = statements
        .par_iter()
        .map(|s| {
            let mut trace = Trace::default();
            let v = evaluate_statement(s, g, reps, &config.retrieval, providers, config.budgets.judge, &mut trace);
            (v, trace)
        })
        .collect();
    let mut trace = Trace::default();
    let mut verdicts = Vec::with_capacity(results.len());
    for (v, t) in results {
        trace.extend(t);
        verdicts.push(v?);
    }
    let supported: Vec<usize> = verdicts.iter().filter_map(|v| v.rank).collect();
    let ret_acc = supported.len() as f64 / statements.len() as f64;
    let avg_rank = (!supported.is_empty()).then(|| supported.iter().sum::<usize>() as f64 / supported.len() as f64);
    let c = composites(ret_acc, &structural, leak);
    Ok((
        RetentionReport {
            ret_acc,
            leak,
            tricr,
            rwa: c.rwa,
            egu: c.egu,
            sci: c.sci,
            avg_rank,
            structural,
        },
        trace,
    ))
}

/// The part of a corpus graph grounded in one document's chunks.
pub fn doc_subgraph(g: &ContextEnrichedGraph, chunks: &[Chunk], doc_id: &str) -> ContextEnrichedGraph {
    let own: BTreeSet<&str> = chunks.iter().filter(|c| c.doc_id == doc_id).map(|c| c.id.as_str()).collect();
    let grounded = |p: &BTreeSet<crate::model::ChunkId>| p.iter().any(|c| own.contains(c.as_str()));
    let relations: Vec<_> = g.relations.iter().filter(|r| grounded(&r.provenance_chunks)).cloned().collect();
    let endpoints: BTreeSet<&EntityId> = relations.iter().flat_map(|r| [&r.subject, &r.object]).collect();
    let entities = g
        .entities
        .iter()
        .filter(|e| grounded(&e.provenance_chunks) || endpoints.contains(&e.id))
        .cloned()
        .collect();
    ContextEnrichedGraph {
        entities,
        relations,
        schema: g.schema.clone(),
        schema_induced: g.schema_induced,
    }
}

/// Per-document reports and their macro average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub instances: BTreeMap<String, RetentionReport>,
    #[serde(rename = "macro")]
    pub macro_avg: RetentionReport,
}

/// Evaluate every benchmark record against the part of `g` built from its
/// document. Documents without any graph content are skipped with an event.
pub fn run_benchmark(
    g: &ContextEnrichedGraph,
    chunks: &[Chunk],
    mentions: &BTreeMap<MentionId, Mention>,
    records: &[BenchmarkRecord],
    config: &Config,
    providers: &Providers,
) -> Result<(BenchmarkReport, Trace), RetentionError> {
    let mut trace = Trace::default();
    let mut instances = BTreeMap::new();
    for rec in records {
        let sub = doc_subgraph(g, chunks, &rec.doc_id);
        if sub.entities.is_empty() {
            trace.event(Event::new(STAGE, "empty_instance", &rec.doc_id, "no graph content for document"));
            continue;
        }
        let reps = entity_index(&sub, mentions, config, providers)?;
        let (report, t) = run_retention(&sub, &reps, &rec.statements, &rec.text, config, providers)?;
        trace.extend(t);
        instances.insert(rec.doc_id.clone(), report);
    }
    let all: Vec<RetentionReport> = instances.values().copied().collect();
    if all.is_empty() {
        return Err(RetentionError::NoStatements);
    }
    Ok((
        BenchmarkReport {
            macro_avg: RetentionReport::macro_average(&all),
            instances,
        },
        trace,
    ))
}
