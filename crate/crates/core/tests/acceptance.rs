//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero on any failure that is not a recorded, known gap.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ckg_core::alignment::{
    audit_log, score_scope, verify, Anchor, AnchorKind, Candidate, Concept, InducedSchema, Level, OntologyRelation,
    ReferenceOntology, SchemaElement,
};
use ckg_core::config::{Config, RetrievalConfig};
use ckg_core::metrics::{
    avg_degree, clustering_coefficient, composites, connectivity, leakage, tricr, GraphView, StructuralReport,
};
use ckg_core::pipeline::{providers_from_config, Pipeline};
use ckg_core::provider::prompts::input_of;
use ckg_core::provider::{cosine, embed_batch, ChatProvider, ChatRequest, EmbeddingVector, FnChat, HashEmbedder, Providers, ProviderError};
use ckg_core::relation::apply_relation_reply;
use ckg_core::retention::{retrieve_subgraph, run_retention};
use ckg_core::store::{self, LogLine};
use ckg_core::trace::Trace;
use ckg_core::{
    ActionRecord, ActionStatus, ChunkId, ContextEnrichedGraph, Entity, EntityId, HintType, MentionId, QualifierSet, RelationId,
    RelationInstance, Stage,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

/// Criteria that cannot be met as stated. A known gap that starts passing
/// is reported too, so this list stays accurate.
const KNOWN_GAPS: &[&str] = &["AC1"];

fn main() {
    let checks: [(&str, fn() -> Outcome); 8] = [
        ("AC1", ac1_composites),
        ("AC2", ac2_metric_oracles),
        ("AC3", ac3_ordering_laws),
        ("AC4", ac4_pipeline_invariants),
        ("AC5", ac5_qualifier_merge),
        ("AC6", ac6_determinism),
        ("AC7", ac7_retrieval_oracle),
        ("AC8", ac8_alignment_arithmetic),
    ];
    let mut unexpected = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = check();
        let ms = start.elapsed().as_millis();
        let known = KNOWN_GAPS.contains(&name);
        match &outcome {
            Ok(detail) => println!("{name} PASS ({ms} ms) {detail}"),
            Err(detail) if known => println!("{name} FAIL [known gap] ({ms} ms) {detail}"),
            Err(detail) => println!("{name} FAIL ({ms} ms) {detail}"),
        }
        if outcome.is_ok() == known {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} unexpected outcome(s)");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

// ---------------------------------------------------------------- AC1

fn ac1_composites() -> Outcome {
    // (method, ret_acc, conn, leak, published rwa, published egu), percent.
    let rows = [
        ("OpenIE", 56.0, 74.0, 2.3, 41.5, 40.5),
        ("AutoSchemaKG", 95.1, 61.5, 36.5, 58.7, 37.3),
        ("GraphRAG", 48.4, 91.5, 0.0, 45.1, 45.1),
    ];
    let mut report = Vec::new();
    let mut misses = Vec::new();
    for (name, ret, conn, leak, rwa_pub, egu_pub) in rows {
        let s = StructuralReport {
            connectivity: conn / 100.0,
            ..Default::default()
        };
        let c = composites(ret / 100.0, &s, leak / 100.0);
        let (rwa, egu) = (c.rwa * 100.0, c.egu * 100.0);
        let ok = (rwa - rwa_pub).abs() <= 0.5 && (egu - egu_pub).abs() <= 0.5;
        report.push(format!("{name} rwa={rwa:.2}/{rwa_pub} egu={egu:.2}/{egu_pub}"));
        if !ok {
            misses.push(format!(
                "{name} off by {:.2}/{:.2} pp",
                rwa - rwa_pub,
                egu - egu_pub
            ));
        }
    }
    let summary = report.join("; ");
    if misses.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary} | outside ±0.5 pp: {}", misses.join(", ")))
    }
}

// ---------------------------------------------------------------- AC2

const VOCAB: &[&str] = &[
    "pump", "valve", "alpha", "beta", "north", "tank", "line", "feed", "main", "unit", "west", "steam",
];

fn random_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect()
}

/// Oracle tokenizer for the generated text: whitespace split, sentence
/// dots stripped, lower case.
fn oracle_words(s: &str) -> Vec<String> {
    s.split(' ')
        .map(|w| w.trim_end_matches('.').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn oracle_components(n: usize, edges: &[(usize, usize)]) -> f64 {
    // Label propagation until stable.
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for &(a, b) in edges {
            let m = label[a].min(label[b]);
            for v in [a, b] {
                if label[v] != m {
                    label[v] = m;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut sizes = BTreeMap::new();
    for l in label {
        *sizes.entry(l).or_insert(0usize) += 1;
    }
    *sizes.values().max().unwrap() as f64 / n as f64
}

fn oracle_clustering(n: usize, edges: &[(usize, usize)]) -> f64 {
    let mut adj = vec![vec![false; n]; n];
    for &(a, b) in edges {
        if a != b {
            adj[a][b] = true;
            adj[b][a] = true;
        }
    }
    let mut total = 0.0;
    for v in 0..n {
        let k = (0..n).filter(|&u| adj[v][u]).count();
        if k < 2 {
            continue;
        }
        let mut triangles = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                if adj[v][i] && adj[v][j] && adj[i][j] {
                    triangles += 1;
                }
            }
        }
        total += 2.0 * triangles as f64 / (k * (k - 1)) as f64;
    }
    total / n as f64
}

fn oracle_leakage(names: &[String], source: &str) -> f64 {
    let src = oracle_words(source);
    let leaks = names
        .iter()
        .filter(|name| {
            let w = oracle_words(name);
            (0..w.len().saturating_sub(3)).any(|i| (0..src.len().saturating_sub(3)).any(|j| w[i..i + 4] == src[j..j + 4]))
        })
        .count();
    leaks as f64 / names.len() as f64
}

fn oracle_tricr(triples: &[(String, String, String)], source: &str) -> f64 {
    let count: usize = triples
        .iter()
        .map(|(s, p, o)| oracle_words(s).len() + p.split('_').filter(|x| !x.is_empty()).count() + oracle_words(o).len())
        .sum();
    count as f64 / oracle_words(source).len() as f64
}

fn ac2_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for case in 0..100 {
        let n = rng.random_range(1..=25);
        let m = rng.random_range(0..=2 * n + 5);
        let names: Vec<String> = (0..n)
            .map(|i| {
                let len = rng.random_range(1..=6);
                format!("{} n{i}", random_words(&mut rng, len).join(" "))
            })
            .collect();
        let mut triples = Vec::new();
        let mut edges = Vec::new();
        for _ in 0..m {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            let len = rng.random_range(1..=3);
            let p = random_words(&mut rng, len).join("_");
            edges.push((a, b));
            triples.push((names[a].clone(), p, names[b].clone()));
        }
        let sentences: Vec<String> = (0..rng.random_range(1..=8))
            .map(|_| {
                let len = rng.random_range(3..=12);
                format!("{}.", random_words(&mut rng, len).join(" "))
            })
            .collect();
        let source = sentences.join(" ");
        let view = GraphView {
            names: names.clone(),
            edges: edges.clone(),
            predicates: triples.iter().map(|t| t.1.clone()).collect(),
        };
        let got = (
            connectivity(&view).map_err(|e| e.to_string())?,
            clustering_coefficient(&view),
            avg_degree(&view),
            leakage(&names, &source).map_err(|e| e.to_string())?,
            tricr(&triples, &source).map_err(|e| e.to_string())?,
        );
        let want = (
            oracle_components(n, &edges),
            oracle_clustering(n, &edges),
            m as f64 / n as f64,
            oracle_leakage(&names, &source),
            oracle_tricr(&triples, &source),
        );
        ensure(got == want, || format!("graph {case}: got {got:?}, oracle {want:?}"))?;
        checked += 1;
    }
    Ok(format!("{checked} random graphs, 5 metrics each, exact"))
}

// ---------------------------------------------------------------- AC3

fn ac3_ordering_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let unit = |rng: &mut ChaCha8Rng| match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random::<f64>(),
    };
    let mut violations = Vec::new();
    for i in 0..1000 {
        let (ret, conn, leak, clust) = (unit(&mut rng), unit(&mut rng), unit(&mut rng), unit(&mut rng));
        let deg = rng.random_range(0.0..20.0);
        let s = StructuralReport {
            connectivity: conn,
            avg_degree: deg,
            clustering: clust,
            ..Default::default()
        };
        let c = composites(ret, &s, leak);
        if !(c.egu <= c.rwa && c.rwa <= ret && c.sci >= 0.0) {
            violations.push(i);
        }
    }
    ensure(violations.is_empty(), || format!("violations at tuples {violations:?}"))?;
    Ok("1000 tuples, 0 violations".into())
}

// ---------------------------------------------------------------- AC4

fn stub_pipeline(dir: &Path) -> Result<Pipeline, String> {
    let config = Config::default();
    let providers = providers_from_config(&config, Some("stub")).map_err(|e| e.to_string())?;
    Ok(Pipeline::new(dir, config, providers))
}

fn ac4_pipeline_invariants() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = stub_pipeline(dir.path())?;
    let docs = corpus().join("docs");
    let doc_count = std::fs::read_dir(&docs).map_err(|e| e.to_string())?.count();
    let report = p.run_all(&[docs]).map_err(|e| e.to_string())?;
    ensure(report.is_empty(), || format!("assembly report: {report:?}"))?;
    let err = |e: ckg_core::pipeline::PipelineError| e.to_string();

    let chunks = p.chunks().map_err(err)?;
    ensure(doc_count >= 10 && chunks.len() >= 60, || format!("{doc_count} docs, {} chunks", chunks.len()))?;

    // Mention conservation: every mention in exactly one entity.
    let mentions = p.mentions().map_err(err)?;
    let entities = p.entities().map_err(err)?;
    let mut owner: BTreeMap<&MentionId, usize> = BTreeMap::new();
    for e in &entities {
        for m in &e.member_mentions {
            *owner.entry(m).or_default() += 1;
        }
    }
    let all: BTreeSet<&MentionId> = mentions.iter().map(|m| &m.id).collect();
    ensure(owner.keys().copied().collect::<BTreeSet<_>>() == all, || "mention union differs from mention store".into())?;
    ensure(owner.values().all(|&c| c == 1), || "a mention belongs to several entities".into())?;

    // Entity classes partition E; every class has a declared group.
    let g = p.load_graph().map_err(err)?;
    let ids: BTreeSet<&EntityId> = g.entities.iter().map(|e| &e.id).collect();
    let mut seen: BTreeSet<&EntityId> = BTreeSet::new();
    for c in &g.schema.entity_classes {
        for e in &c.member_entities {
            ensure(seen.insert(e), || format!("{e} in two classes"))?;
        }
    }
    ensure(seen == ids, || "class members do not cover E".into())?;
    ensure(
        g.entities.iter().all(|e| e.class_id.as_ref().is_some_and(|c| g.schema.class(c).is_some_and(|k| k.member_entities.contains(&e.id)))),
        || "class_id disagrees with membership".into(),
    )?;
    ensure(
        g.schema.entity_classes.iter().all(|c| c.group_id.as_ref().is_some_and(|gid| g.schema.group(gid).is_some())),
        || "class without group".into(),
    )?;

    // Relation schema totality.
    let tau = g.schema.tau_rel();
    let gamma = g.schema.gamma_rel();
    for r in &g.relations {
        let (Some(l), Some(c), Some(gr)) = (&r.canonical_label, &r.rel_cls, &r.rel_cls_group) else {
            return Err(format!("{} has an unset schema field", r.id));
        };
        ensure(tau.get(l) == Some(c) && gamma.get(c) == Some(gr), || format!("{} not in schema maps", r.id))?;
    }

    // Exactly eight qualifier keys in every serialized relation.
    for file in [store::RELATIONS_RAW, store::RELATIONS_RESOLVED, store::EDGES] {
        let rows: Vec<Value> = p.run.read(file).map_err(|e| e.to_string())?;
        for row in rows {
            let n = row["qualifiers"].as_object().map(|o| o.len());
            ensure(n == Some(8), || format!("{file}: qualifiers with {n:?} keys"))?;
        }
    }

    // Edge conservation.
    let raw: Vec<RelationInstance> = p.run.read(store::RELATIONS_RAW).map_err(|e| e.to_string())?;
    let actions: Vec<LogLine<ActionRecord>> = p.run.read(store::ACTIONS).map_err(|e| e.to_string())?;
    let merges = actions
        .iter()
        .filter(|a| a.record.stage == Stage::RelRes && a.record.kind == "merge_relations" && a.record.status == ActionStatus::Applied)
        .count();
    ensure(g.relations.len() == raw.len() - merges, || {
        format!("|R_final|={} |R_raw|={} merges={merges}", g.relations.len(), raw.len())
    })?;

    let v = p.validate().map_err(err)?;
    ensure(v.is_empty(), || format!("validate: {:?}", v.violations))?;
    Ok(format!(
        "{doc_count} docs, {} chunks, {} mentions, {} entities, {} classes, |R| {} = {} - {merges}",
        chunks.len(),
        mentions.len(),
        g.entities.len(),
        g.schema.entity_classes.len(),
        g.relations.len(),
        raw.len()
    ))
}

// ---------------------------------------------------------------- AC5

/// All qualifier sets over values {x, y} with at most two populated slots.
fn small_qualifier_sets() -> Vec<QualifierSet> {
    let mut out = vec![QualifierSet::default()];
    let keys = QualifierSet::KEYS;
    for i in 0..8 {
        for a in ["x", "y"] {
            let mut q = QualifierSet::default();
            *q.slot_mut(keys[i]).unwrap() = Some(a.into());
            out.push(q.clone());
            for j in i + 1..8 {
                for b in ["x", "y"] {
                    let mut q2 = q.clone();
                    *q2.slot_mut(keys[j]).unwrap() = Some(b.into());
                    out.push(q2);
                }
            }
        }
    }
    out
}

fn relation(id: &str, q: QualifierSet) -> RelationInstance {
    RelationInstance {
        id: id.into(),
        subject: "e_a".into(),
        object: "e_b".into(),
        raw_label: "feeds".into(),
        description: String::new(),
        hint_type: HintType::Dependency,
        qualifiers: q,
        confidence: 0.9,
        provenance_chunks: [ChunkId::from(format!("c_{id}"))].into(),
        evidence: vec![],
        canonical_label: None,
        canonical_description: None,
        rel_cls: None,
        rel_cls_group: None,
        remarks: vec![],
    }
}

/// Hand-written decision table for one slot.
enum SlotRule {
    Keep(Option<String>),
    Conflict,
}

fn slot_rule(a: &Option<String>, b: &Option<String>) -> SlotRule {
    match (a, b) {
        (None, None) => SlotRule::Keep(None),
        (Some(x), None) | (None, Some(x)) => SlotRule::Keep(Some(x.clone())),
        (Some(x), Some(y)) if x == y => SlotRule::Keep(Some(x.clone())),
        _ => SlotRule::Conflict,
    }
}

fn ac5_qualifier_merge() -> Outcome {
    let sets = small_qualifier_sets();
    let (mut merged, mut conflicts) = (0usize, 0usize);
    for qa in &sets {
        for qb in &sets {
            let mut expected = QualifierSet::default();
            let mut conflict_keys = Vec::new();
            for k in QualifierSet::KEYS {
                match slot_rule(qa.get(k).unwrap(), qb.get(k).unwrap()) {
                    SlotRule::Keep(v) => *expected.slot_mut(k).unwrap() = v,
                    SlotRule::Conflict => conflict_keys.push(k),
                }
            }
            let (ka, kb) = (RelationId::from("r_a"), RelationId::from("r_b"));
            let mut state: BTreeMap<RelationId, RelationInstance> =
                [(ka.clone(), relation("r_a", qa.clone())), (kb.clone(), relation("r_b", qb.clone()))].into();
            let batch: BTreeSet<RelationId> = [ka.clone(), kb.clone()].into();
            let mut trace = Trace::default();
            let reply = json!([{"action": "merge_relations", "relation_ids": ["r_a", "r_b"], "rationale": "same edge"}]);
            apply_relation_reply(&reply, &mut state, &batch, 1, &mut trace);
            let case = || format!("a={:?} b={:?}", qa.populated(), qb.populated());
            if conflict_keys.is_empty() {
                merged += 1;
                ensure(state.len() == 1, case)?;
                let kept = &state[&ka];
                ensure(kept.qualifiers == expected, || format!("{}: merged {:?}", case(), kept.qualifiers.populated()))?;
                // Superset of both inputs.
                for q in [qa, qb] {
                    ensure(q.populated().iter().all(|(k, v)| kept.qualifiers.get(k).unwrap().as_deref() == Some(*v)), case)?;
                }
                ensure(trace.actions.len() == 1 && trace.actions[0].status == ActionStatus::Applied, case)?;
            } else {
                conflicts += 1;
                ensure(state.len() == 2, case)?;
                ensure(state[&ka].qualifiers == *qa && state[&kb].qualifiers == *qb, case)?;
                let keys = conflict_keys.join(", ");
                ensure(state[&ka].remarks == vec![format!("qualifier conflict with r_b on {keys}")], case)?;
                ensure(state[&kb].remarks == vec![format!("qualifier conflict with r_a on {keys}")], case)?;
                ensure(trace.actions.len() == 3 && trace.actions[0].status == ActionStatus::Rejected, case)?;
            }
        }
    }
    Ok(format!("{} configurations: {merged} merged, {conflicts} conflicts", sets.len() * sets.len()))
}

// ---------------------------------------------------------------- AC6

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        out.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(out)
}

fn ac6_determinism() -> Outcome {
    let c = corpus();
    let mut dirs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = stub_pipeline(dir.path())?;
        p.run_all(&[c.join("docs")]).map_err(|e| e.to_string())?;
        p.eval_retention(&c.join("benchmark.jsonl")).map_err(|e| e.to_string())?;
        p.eval_schema(&c.join("ontology.json"), &c.join("gold.jsonl"), ckg_core::alignment::Scope::Combined)
            .map_err(|e| e.to_string())?;
        let diff = p.replay().map_err(|e| e.to_string())?;
        ensure(diff.is_empty(), || format!("replay diff: {diff:?}"))?;
        dirs.push(dir);
    }
    let (a, b) = (dir_bytes(dirs[0].path())?, dir_bytes(dirs[1].path())?);
    ensure(a.keys().eq(b.keys()), || format!("file sets differ: {:?} vs {:?}", a.keys(), b.keys()))?;
    let differing: Vec<&String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), || format!("files differ: {differing:?}"))?;
    Ok(format!("{} files byte-identical, replay diff empty", a.len()))
}

// ---------------------------------------------------------------- AC7

const NAMES: [&str; 15] = [
    "Alpha Pump", "Beta Valve", "Gamma Tank", "Delta Boiler", "Epsilon Turbine", "Zeta Filter", "Eta Sensor", "Theta Compressor",
    "Iota Manifold", "Kappa Heater", "Lambda Chiller", "Mu Separator", "Nu Reactor", "Xi Condenser", "Omicron Drum",
];
const PREDICATES: [&str; 4] = ["feeds", "monitors", "part_of", "cools"];

fn fixture_graph(rng: &mut ChaCha8Rng) -> ContextEnrichedGraph {
    let entities = NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| Entity {
            id: format!("e_{i:02}").into(),
            canonical_name: n.to_string(),
            description: format!("{n} in the plant"),
            type_hint: None,
            intrinsic: vec![],
            member_mentions: [MentionId::from(format!("m_{i}"))].into(),
            confidence: 1.0,
            provenance_chunks: [ChunkId::from("c_0")].into(),
            class_id: None,
            remarks: vec![],
        })
        .collect();
    // A sparse graph so two hops do not reach everything.
    let relations = (0..16)
        .map(|i| {
            let (s, o) = (rng.random_range(0..15), rng.random_range(0..15));
            let mut r = relation(&format!("r_{i:02}"), QualifierSet::default());
            r.subject = format!("e_{s:02}").into();
            r.object = format!("e_{o:02}").into();
            r.canonical_label = Some(PREDICATES.choose(rng).unwrap().to_string());
            r.provenance_chunks = [ChunkId::from("c_0")].into();
            r
        })
        .collect();
    ContextEnrichedGraph {
        entities,
        relations,
        ..Default::default()
    }
}

/// Brute-force retrieval: layered BFS on an adjacency matrix.
fn oracle_retrieve(
    query: &EmbeddingVector,
    g: &ContextEnrichedGraph,
    reps: &[EmbeddingVector],
    cfg: &RetrievalConfig,
) -> (Vec<EntityId>, Vec<RelationId>) {
    let n = g.entities.len();
    let sim: Vec<f64> = reps.iter().map(|r| cosine(query, r)).collect();
    let pos = |id: &EntityId| g.entities.iter().position(|e| &e.id == id).unwrap();
    let mut adj = vec![vec![false; n]; n];
    for r in &g.relations {
        let (s, o) = (pos(&r.subject), pos(&r.object));
        adj[s][o] = true;
        adj[o][s] = true;
    }
    let mut by_sim: Vec<usize> = (0..n).collect();
    by_sim.sort_by(|&a, &b| sim[b].partial_cmp(&sim[a]).unwrap().then(g.entities[a].id.cmp(&g.entities[b].id)));
    let mut dist: Vec<Option<usize>> = vec![None; n];
    let mut frontier: Vec<usize> = by_sim[..cfg.k.min(n)].to_vec();
    for &s in &frontier {
        dist[s] = Some(0);
    }
    for d in 1..=cfg.hops {
        let mut next = Vec::new();
        for &v in &frontier {
            for w in 0..n {
                if adj[v][w] && dist[w].is_none() {
                    dist[w] = Some(d);
                    next.push(w);
                }
            }
        }
        frontier = next;
    }
    let mut nodes: Vec<usize> = (0..n).filter(|&v| dist[v].is_some()).collect();
    nodes.sort_by(|&a, &b| {
        (dist[a], -sim[a])
            .partial_cmp(&(dist[b], -sim[b]))
            .unwrap()
            .then(g.entities[a].id.cmp(&g.entities[b].id))
    });
    nodes.truncate(cfg.node_cap);
    let kept: BTreeSet<usize> = nodes.iter().copied().collect();
    let mut edges: Vec<(usize, f64, &RelationId)> = g
        .relations
        .iter()
        .filter_map(|r| {
            let (s, o) = (pos(&r.subject), pos(&r.object));
            (kept.contains(&s) && kept.contains(&o)).then(|| (dist[s].max(dist[o]).unwrap(), -sim[s].min(sim[o]), &r.id))
        })
        .collect();
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.truncate(cfg.edge_cap);
    (
        nodes.iter().map(|&i| g.entities[i].id.clone()).collect(),
        edges.into_iter().map(|e| e.2.clone()).collect(),
    )
}

/// Judge that accepts a statement `s | p | o | noise` iff the triple is present.
fn triple_judge(req: &ChatRequest) -> Result<String, ProviderError> {
    let input = input_of(&req.prompt).unwrap_or(Value::Null);
    let stmt = input["statement"].as_str().unwrap_or("");
    let parts: Vec<&str> = stmt.split(" | ").collect();
    let found = input["triples"].as_array().into_iter().flatten().any(|t| {
        parts.len() >= 3 && t["subject"] == parts[0] && t["predicate"] == parts[1] && t["object"] == parts[2]
    });
    Ok(json!({ "supported": found }).to_string())
}

fn ac7_retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = fixture_graph(&mut rng);
    let embedder = HashEmbedder::default();
    let names: Vec<String> = g.entities.iter().map(|e| e.canonical_name.clone()).collect();
    let reps = embed_batch(&embedder, &names, 16).map_err(|e| e.to_string())?;
    let cfg = RetrievalConfig {
        k: 8,
        hops: 2,
        node_cap: 250,
        edge_cap: 300,
    };
    let name = |id: &EntityId| g.entities.iter().find(|e| &e.id == id).unwrap().canonical_name.clone();

    // Decoy names in the tail pull other seeds up the ranking.
    let statements: Vec<String> = (0..50)
        .map(|i| {
            let decoys: Vec<&str> = NAMES.choose_multiple(&mut rng, 3).copied().collect();
            let triple = if i % 5 == 4 {
                // Not in the graph.
                let (a, b) = (NAMES.choose(&mut rng).unwrap(), NAMES.choose(&mut rng).unwrap());
                format!("{a} | controls | {b}")
            } else {
                let r = g.relations.choose(&mut rng).unwrap();
                format!("{} | {} | {}", name(&r.subject), r.predicate(), name(&r.object))
            };
            format!("{triple} | {}", decoys.join(" "))
        })
        .collect();

    let supports = |stmt: &str, rels: &[RelationId]| {
        g.relations
            .iter()
            .filter(|r| rels.contains(&r.id))
            .any(|r| stmt.starts_with(&format!("{} | {} | {} | ", name(&r.subject), r.predicate(), name(&r.object))))
    };
    let mut ranks = Vec::new();
    for s in &statements {
        let q = embed_batch(&embedder, &[s.clone()], 1).map_err(|e| e.to_string())?.remove(0);
        let sub = retrieve_subgraph(&q, &g, &reps, &cfg);
        let (nodes, rels) = oracle_retrieve(&q, &g, &reps, &cfg);
        ensure(sub.nodes == nodes && sub.relations == rels, || format!("retrieval differs for `{s}`"))?;
        // Exhaustive per-rank re-judging.
        let max_r = cfg.k.min(g.entities.len());
        let first = (1..=max_r).find(|&r| supports(s, &oracle_retrieve(&q, &g, &reps, &RetrievalConfig { k: r, ..cfg }).1));
        if supports(s, &rels) {
            ranks.push(first.ok_or_else(|| format!("`{s}` supported at k but at no rank"))?);
        }
    }
    let want_acc = ranks.len() as f64 / statements.len() as f64;
    let want_rank = (!ranks.is_empty()).then(|| ranks.iter().sum::<usize>() as f64 / ranks.len() as f64);

    let providers = Providers {
        chat: Arc::new(FnChat(triple_judge)) as Arc<dyn ChatProvider>,
        embedder: Arc::new(embedder),
    };
    let mut config = Config::default();
    config.retrieval = cfg;
    let source = "Alpha Pump feeds Beta Valve. Eta Sensor monitors Gamma Tank.";
    let (report, _) = run_retention(&g, &reps, &statements, source, &config, &providers).map_err(|e| e.to_string())?;
    ensure(report.ret_acc == want_acc && report.avg_rank == want_rank, || {
        format!("harness ret_acc={} avg_rank={:?}, oracle {want_acc} {want_rank:?}", report.ret_acc, report.avg_rank)
    })?;
    Ok(format!("50 statements match BFS oracle; ret_acc={want_acc:.2} avg_rank={:.3}", want_rank.unwrap_or(0.0)))
}

// ---------------------------------------------------------------- AC8

fn element(id: &str, kind: AnchorKind, level: Level) -> SchemaElement {
    SchemaElement {
        id: id.into(),
        kind,
        level,
        label: id.rsplit(':').next().unwrap().into(),
        description: String::new(),
        hierarchy: String::new(),
        variants: String::new(),
        signature: String::new(),
    }
}

fn alignment_ontology() -> ReferenceOntology {
    let concept = |l: &str| Concept {
        label: l.into(),
        description: String::new(),
    };
    let rel = |l: &str, d: &str, r: &str| OntologyRelation {
        label: l.into(),
        domain: d.into(),
        range: r.into(),
        description: String::new(),
    };
    ReferenceOntology {
        concepts: vec![concept("Person"), concept("Organization"), concept("City")],
        relations: vec![
            rel("employer", "Person", "Organization"),
            rel("locatedIn", "Organization", "City"),
            rel("birthDate", "Person", "xsd:date"),
            rel("spouse", "Person", "Person"),
        ],
    }
}

fn alignment_schema() -> InducedSchema {
    use AnchorKind::{Concept as C, Relation as R};
    let elements = vec![
        element("ent:L1:ec_person", C, Level::L1),
        element("ent:L1:ec_org", C, Level::L1),
        element("ent:L1:ec_city", C, Level::L1),
        element("ent:L1:ec_misc", C, Level::L1),
        element("ent:L2:ecg_agent", C, Level::L2),
        element("ent:L2:ecg_place", C, Level::L2),
        element("rel:L1:works_at", R, Level::L1),
        element("rel:L1:located_in", R, Level::L1),
        element("rel:L1:born_on", R, Level::L1),
        element("rel:L2:employment", R, Level::L2),
        element("rel:L2:location", R, Level::L2),
        element("rel:L3:social", R, Level::L3),
    ];
    let chain = |c: &str, g: &str| vec![c.to_string(), g.to_string()];
    let entity_chain = [
        ("p1", chain("ent:L1:ec_person", "ent:L2:ecg_agent")),
        ("p2", chain("ent:L1:ec_person", "ent:L2:ecg_agent")),
        ("o1", chain("ent:L1:ec_org", "ent:L2:ecg_agent")),
        ("c1", chain("ent:L1:ec_city", "ent:L2:ecg_place")),
        ("x1", chain("ent:L1:ec_misc", "ent:L2:ecg_place")),
    ]
    .into_iter()
    .map(|(e, c)| (EntityId::from(e), c))
    .collect();
    let pairs = |ps: &[(&str, &str)]| ps.iter().map(|(s, o)| (EntityId::from(*s), EntityId::from(*o))).collect::<Vec<_>>();
    let relation_cover = [
        ("rel:L1:works_at", pairs(&[("p1", "o1"), ("p2", "o1"), ("x1", "o1")])),
        ("rel:L1:located_in", pairs(&[("o1", "c1"), ("c1", "o1")])),
        ("rel:L1:born_on", pairs(&[("p1", "p1")])),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    InducedSchema {
        elements,
        entity_chain,
        relation_cover,
    }
}

/// Planted verifier answers: (anchor label, candidate) -> (label, confidence).
/// Unlisted pairs are confidently unrelated.
fn planted() -> BTreeMap<(&'static str, &'static str), (&'static str, f64)> {
    [
        (("Person", "ent:L1:ec_person"), ("Equivalent", 0.95)),
        (("Person", "ent:L2:ecg_agent"), ("Broader", 0.90)),
        (("Organization", "ent:L1:ec_org"), ("Equivalent", 0.88)),
        (("City", "ent:L1:ec_city"), ("Narrower", 0.80)),
        (("employer", "rel:L1:works_at"), ("Equivalent", 0.97)),
        (("employer", "rel:L2:employment"), ("Narrower", 0.91)),
        (("locatedIn", "rel:L2:location"), ("Narrower", 0.93)),
        (("locatedIn", "rel:L1:located_in"), ("Equivalent", 0.90)),
        (("birthDate", "rel:L1:born_on"), ("Narrower", 0.85)),
        (("spouse", "rel:L3:social"), ("Broader", 0.95)),
        (("spouse", "rel:L2:employment"), ("Unrelated", 0.50)),
    ]
    .into()
}

fn planted_verifier(req: &ChatRequest) -> Result<String, ProviderError> {
    let input = input_of(&req.prompt).unwrap_or(Value::Null);
    let anchor = input["anchor"]["label"].as_str().unwrap_or("");
    let cand = input["candidate"]["id"].as_str().unwrap_or("");
    let (label, conf) = planted()
        .iter()
        .find(|((a, c), _)| *a == anchor && *c == cand)
        .map_or(("Unrelated", 0.95), |(_, v)| *v);
    Ok(json!({"label": label, "confidence": conf, "rationale": "planted"}).to_string())
}

fn ac8_alignment_arithmetic() -> Outcome {
    let ont = alignment_ontology();
    let schema = alignment_schema();
    // Gold frequencies: employer 3, locatedIn 2, birthDate 1, spouse 1.
    let anchor = |kind, r: &str, w: f64| Anchor {
        kind,
        reference: r.into(),
        weight: w,
    };
    let anchors = vec![
        anchor(AnchorKind::Relation, "birthDate", 1.0),
        anchor(AnchorKind::Relation, "employer", 3.0),
        anchor(AnchorKind::Relation, "locatedIn", 2.0),
        anchor(AnchorKind::Relation, "spouse", 1.0),
        anchor(AnchorKind::Concept, "City", 2.0),
        anchor(AnchorKind::Concept, "Organization", 5.0),
        anchor(AnchorKind::Concept, "Person", 5.0),
    ];
    // Candidate lists in rank order; compatible matches sit at planted ranks.
    let lists: BTreeMap<&str, Vec<&str>> = [
        ("birthDate", vec!["rel:L1:works_at", "rel:L1:located_in", "rel:L2:employment", "rel:L2:location", "rel:L3:social", "rel:L1:born_on"]),
        ("employer", vec!["rel:L1:works_at", "rel:L2:employment", "rel:L1:born_on"]),
        ("locatedIn", vec!["rel:L1:works_at", "rel:L2:location", "rel:L3:social", "rel:L1:located_in"]),
        ("spouse", vec!["rel:L3:social", "rel:L1:born_on", "rel:L2:employment"]),
        ("City", vec!["ent:L2:ecg_place", "ent:L1:ec_misc", "ent:L1:ec_city"]),
        ("Organization", vec!["ent:L1:ec_org", "ent:L2:ecg_agent"]),
        ("Person", vec!["ent:L2:ecg_agent", "ent:L1:ec_person", "ent:L1:ec_misc"]),
    ]
    .into();
    let chat = FnChat(planted_verifier);
    let mut trace = Trace::default();
    let mut judgements = Vec::new();
    for a in &anchors {
        for (i, el) in lists[a.reference.as_str()].iter().enumerate() {
            let e = schema.element(el).unwrap();
            let cand = Candidate {
                element: el.to_string(),
                level: e.level,
                similarity: 1.0 - i as f64 / 10.0,
                rank: i + 1,
            };
            judgements.push(verify(a, &ont, &cand, &schema, &chat, 2000, &mut trace));
        }
    }
    let report = score_scope(&anchors, &judgements, &ont, &schema, 5);

    // Brute-force weighted coverage and mrr from the planted table.
    let plant = planted();
    let label_of = |a: &str, c: &str| plant.get(&(a, c)).map_or("Unrelated", |v| v.0);
    let total: f64 = anchors.iter().map(|a| a.weight).sum();
    let (mut exact, mut narrower, mut mrr) = (0.0, 0.0, 0.0);
    for a in &anchors {
        let labels: Vec<&str> = lists[a.reference.as_str()].iter().map(|c| label_of(&a.reference, c)).collect();
        if labels.contains(&"Equivalent") {
            exact += a.weight;
        } else if labels.contains(&"Narrower") {
            narrower += a.weight;
        }
        for r in 1..=5usize.min(labels.len()) {
            if matches!(labels[r - 1], "Equivalent" | "Narrower") {
                mrr += a.weight / r as f64;
                break;
            }
        }
    }
    let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
    ensure(close(report.coverage_exact, exact / total), || format!("exact {} vs {}", report.coverage_exact, exact / total))?;
    ensure(close(report.coverage_narrower, narrower / total), || "narrower".into())?;
    ensure(close(report.coverage_compat, report.coverage_exact + report.coverage_narrower), || "decomposition identity".into())?;
    ensure(close(report.coverage_compat, 18.0 / 19.0), || format!("compat {}", report.coverage_compat))?;
    ensure(close(report.mrr5, mrr / total), || format!("mrr5 {} vs {}", report.mrr5, mrr / total))?;

    // Hand-checked D/R table (best compatible match per relation anchor):
    //   employer  -> works_at     2 of 3 pairs fit (x1 is no Person)   w 3
    //   locatedIn -> located_in   2 of 2 fit, reversed pair relaxed   w 2
    //   birthDate -> born_on      1 of 1 fit, primitive range passes  w 1
    //   spouse    -> none compatible, excluded
    let dr_table = [(3.0, 2.0 / 3.0), (2.0, 1.0), (1.0, 1.0)];
    let dr = dr_table.iter().map(|(w, s)| w * s).sum::<f64>() / dr_table.iter().map(|(w, _)| w).sum::<f64>();
    ensure(report.dr_consistency.is_some_and(|d| close(d, dr)), || format!("D/R {:?} vs {dr}", report.dr_consistency))?;

    // Audit routing at 0.88: exactly the planted low-confidence answers.
    let audit = audit_log(&judgements, Config::default().alignment.audit_below);
    let got: BTreeSet<(String, String)> = audit.iter().map(|j| (j.anchor.clone(), j.candidate.clone())).collect();
    let want: BTreeSet<(String, String)> = [
        ("concept:City", "ent:L1:ec_city"),
        ("relation:birthDate", "rel:L1:born_on"),
        ("relation:spouse", "rel:L2:employment"),
    ]
    .iter()
    .map(|(a, c)| (a.to_string(), c.to_string()))
    .collect();
    ensure(got == want, || format!("audit {got:?}"))?;
    Ok(format!(
        "exact {:.3} + narrower {:.3} = compat {:.3}; mrr5 {:.3}; D/R {dr:.3}; {} audited",
        report.coverage_exact,
        report.coverage_narrower,
        report.coverage_compat,
        report.mrr5,
        audit.len()
    ))
}
