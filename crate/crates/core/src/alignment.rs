//! Held-out schema evaluation: active reference anchors, retrieve-then-verify
//! alignment against the induced schema, and coverage, MRR@K and
//! domain/range consistency scores.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{AlignmentConfig, Config};
use crate::model::{ContextEnrichedGraph, EntityId};
use crate::neighborhood::{build_representations, Field, NeighborhoodError};
use crate::provider::prompts::{frame, parse_reply, SCHEMA_VERIFY};
use crate::provider::{cosine, logged_chat, ChatProvider, ChatRequest, EmbeddingVector, Providers, StageTag};
use crate::relation::majority;
use crate::text::{label_key, slug};
use crate::trace::{Event, Trace};

const STAGE: &str = "alignment";

// Field weights of the retrieval representations.
const W_LABEL: f64 = 1.0;
const W_CONTEXT: f64 = 0.25;
const W_EXAMPLES: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("gold triple {sentence_id} cites unknown relation {relation}")]
    UnknownRelation { sentence_id: String, relation: String },
    #[error("relation {relation}: {role} {concept} is not a declared concept or primitive type")]
    UndeclaredConcept {
        relation: String,
        role: &'static str,
        concept: String,
    },
    #[error("unknown scope {0} (expected source, heldout or combined)")]
    UnknownScope(String),
    #[error(transparent)]
    Representation(#[from] NeighborhoodError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub label: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyRelation {
    pub label: String,
    pub domain: String,
    pub range: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceOntology {
    pub concepts: Vec<Concept>,
    pub relations: Vec<OntologyRelation>,
}

/// Datatypes such as `xsd:date` are never concept anchors.
pub fn is_primitive(label: &str) -> bool {
    label.starts_with("xsd:")
}

impl ReferenceOntology {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        let declared: BTreeSet<&str> = self.concepts.iter().map(|c| c.label.as_str()).collect();
        for r in &self.relations {
            for (role, c) in [("domain", &r.domain), ("range", &r.range)] {
                if !is_primitive(c) && !declared.contains(c.as_str()) {
                    return Err(AlignmentError::UndeclaredConcept {
                        relation: r.label.clone(),
                        role,
                        concept: c.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn relation(&self, label: &str) -> Option<&OntologyRelation> {
        self.relations.iter().find(|r| r.label == label)
    }

    pub fn concept(&self, label: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Source,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldTriple {
    pub sentence_id: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Source,
    Heldout,
    Combined,
}

impl Scope {
    pub fn includes(self, split: Split) -> bool {
        matches!(
            (self, split),
            (Scope::Combined, _) | (Scope::Source, Split::Source) | (Scope::Heldout, Split::Heldout)
        )
    }
}

impl FromStr for Scope {
    type Err = AlignmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(Scope::Source),
            "heldout" => Ok(Scope::Heldout),
            "combined" => Ok(Scope::Combined),
            other => Err(AlignmentError::UnknownScope(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorKind {
    Concept,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub kind: AnchorKind,
    pub reference: String,
    pub weight: f64,
}

impl Anchor {
    pub fn key(&self) -> String {
        let kind = match self.kind {
            AnchorKind::Concept => "concept",
            AnchorKind::Relation => "relation",
        };
        format!("{kind}:{}", self.reference)
    }
}

/// Relations used by in-scope gold triples, weighted by frequency, then the
/// non-primitive concepts at their ends, weighted by the summed frequency of
/// the incident relations (a relation counts once per concept).
pub fn active_anchors(ont: &ReferenceOntology, gold: &[GoldTriple], scope: Scope) -> Result<Vec<Anchor>, AlignmentError> {
    let mut rel_freq: BTreeMap<&str, f64> = BTreeMap::new();
    for t in gold.iter().filter(|t| scope.includes(t.split)) {
        if ont.relation(&t.relation).is_none() {
            return Err(AlignmentError::UnknownRelation {
                sentence_id: t.sentence_id.clone(),
                relation: t.relation.clone(),
            });
        }
        *rel_freq.entry(t.relation.as_str()).or_default() += 1.0;
    }
    let mut concept_freq: BTreeMap<&str, f64> = BTreeMap::new();
    for (&label, &f) in &rel_freq {
        let r = ont.relation(label).expect("checked above");
        let ends: BTreeSet<&str> = [r.domain.as_str(), r.range.as_str()].into_iter().filter(|c| !is_primitive(c)).collect();
        for c in ends {
            *concept_freq.entry(c).or_default() += f;
        }
    }
    let relations = rel_freq.into_iter().map(|(r, w)| Anchor {
        kind: AnchorKind::Relation,
        reference: r.to_string(),
        weight: w,
    });
    let concepts = concept_freq.into_iter().map(|(c, w)| Anchor {
        kind: AnchorKind::Concept,
        reference: c.to_string(),
        weight: w,
    });
    Ok(relations.chain(concepts).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
}

/// One element of the induced schema at one hierarchy level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaElement {
    pub id: String,
    pub kind: AnchorKind,
    pub level: Level,
    pub label: String,
    pub description: String,
    /// Labels of the levels above.
    pub hierarchy: String,
    /// Member labels or surface variants.
    pub variants: String,
    /// Endpoint class signature, relations only.
    pub signature: String,
}

/// Induced schema flattened for alignment, with the class chain of every
/// entity and the endpoint pairs each relation element covers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InducedSchema {
    pub elements: Vec<SchemaElement>,
    pub entity_chain: BTreeMap<EntityId, Vec<String>>,
    pub relation_cover: BTreeMap<String, Vec<(EntityId, EntityId)>>,
}

fn join_limited<'a>(items: impl IntoIterator<Item = &'a str>, limit: usize) -> String {
    let set: BTreeSet<&str> = items.into_iter().filter(|s| !s.trim().is_empty()).collect();
    set.into_iter().take(limit).collect::<Vec<_>>().join("; ")
}

impl InducedSchema {
    /// Entity side: L1 classes, L2 class groups, L3 the dominant type hint
    /// of each class. Relation side: L1 canonical relations, L2 relation
    /// classes, L3 relation class groups.
    pub fn from_graph(g: &ContextEnrichedGraph) -> Self {
        let s = &g.schema;
        let entity = |id: &EntityId| g.entities.iter().find(|e| &e.id == id);
        let mut out = InducedSchema::default();

        let mut dominant: BTreeMap<&str, String> = BTreeMap::new();
        for c in &s.entity_classes {
            let hints: Vec<&str> = c
                .member_entities
                .iter()
                .filter_map(|e| entity(e).and_then(|e| e.type_hint.as_deref()))
                .filter(|h| !h.trim().is_empty())
                .collect();
            if !hints.is_empty() {
                dominant.insert(c.id.as_str(), majority(&hints).to_string());
            }
        }
        for c in &s.entity_classes {
            let group = c.group_id.as_ref().and_then(|gid| s.group(gid));
            let names = c.member_entities.iter().filter_map(|e| entity(e)).map(|e| e.canonical_name.as_str());
            out.elements.push(SchemaElement {
                id: format!("ent:L1:{}", c.id),
                kind: AnchorKind::Concept,
                level: Level::L1,
                label: c.label.clone(),
                description: c.description.clone(),
                hierarchy: join_limited(group.map(|g| g.label.as_str()).into_iter().chain(dominant.get(c.id.as_str()).map(String::as_str)), 5),
                variants: join_limited(names, 20),
                signature: String::new(),
            });
            for e in &c.member_entities {
                let mut chain = vec![format!("ent:L1:{}", c.id)];
                if let Some(g) = &c.group_id {
                    chain.push(format!("ent:L2:{g}"));
                }
                if let Some(h) = dominant.get(c.id.as_str()) {
                    chain.push(format!("ent:L3:{}", slug(h)));
                }
                out.entity_chain.entry(e.clone()).or_insert(chain);
            }
        }
        for grp in &s.entity_class_groups {
            let members = s.entity_classes.iter().filter(|c| c.group_id.as_ref() == Some(&grp.id));
            out.elements.push(SchemaElement {
                id: format!("ent:L2:{}", grp.id),
                kind: AnchorKind::Concept,
                level: Level::L2,
                label: grp.label.clone(),
                description: grp.description.clone(),
                hierarchy: String::new(),
                variants: join_limited(members.map(|c| c.label.as_str()), 20),
                signature: String::new(),
            });
        }
        let hints: BTreeSet<&String> = dominant.values().collect();
        for h in hints {
            let classes = s
                .entity_classes
                .iter()
                .filter(|c| dominant.get(c.id.as_str()) == Some(h))
                .map(|c| c.label.as_str());
            out.elements.push(SchemaElement {
                id: format!("ent:L3:{}", slug(h)),
                kind: AnchorKind::Concept,
                level: Level::L3,
                label: h.clone(),
                description: String::new(),
                hierarchy: String::new(),
                variants: join_limited(classes, 20),
                signature: String::new(),
            });
        }

        let class_label = |e: &EntityId| {
            s.tau_ent()
                .get(e)
                .and_then(|c| s.class(c))
                .map_or_else(String::new, |c| c.label.clone())
        };
        let tau = s.tau_rel();
        let gamma = s.gamma_rel();
        let mut raw: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
        let mut sigs: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in &g.relations {
            let canonical = r.predicate().to_string();
            let cls = tau.get(&canonical).cloned().or_else(|| r.rel_cls.clone());
            let grp = cls.as_ref().and_then(|c| gamma.get(c).cloned()).or_else(|| r.rel_cls_group.clone());
            let sig = format!("{} -> {}", class_label(&r.subject), class_label(&r.object));
            let mut ids = vec![format!("rel:L1:{canonical}")];
            ids.extend(cls.map(|c| format!("rel:L2:{c}")));
            ids.extend(grp.map(|g| format!("rel:L3:{g}")));
            for id in ids {
                out.relation_cover.entry(id.clone()).or_default().push((r.subject.clone(), r.object.clone()));
                raw.entry(id.clone()).or_default().insert(r.raw_label.as_str());
                sigs.entry(id).or_default().insert(sig.clone());
            }
        }
        let sig_of = |id: &str| join_limited(sigs.get(id).into_iter().flatten().map(String::as_str), 5);
        let raw_of = |id: &str| join_limited(raw.get(id).into_iter().flatten().copied(), 20);
        for c in &s.canonical_relations {
            let id = format!("rel:L1:{}", c.label);
            out.elements.push(SchemaElement {
                kind: AnchorKind::Relation,
                level: Level::L1,
                label: c.label.clone(),
                description: c.description.clone(),
                hierarchy: join_limited([c.rel_cls.as_str()].into_iter().chain(gamma.get(&c.rel_cls).map(String::as_str)), 5),
                variants: raw_of(&id),
                signature: sig_of(&id),
                id,
            });
        }
        for c in &s.relation_classes {
            let id = format!("rel:L2:{}", c.label);
            let members = s.canonical_relations.iter().filter(|r| r.rel_cls == c.label).map(|r| r.label.as_str());
            out.elements.push(SchemaElement {
                kind: AnchorKind::Relation,
                level: Level::L2,
                label: c.label.clone(),
                description: String::new(),
                hierarchy: c.group.clone(),
                variants: join_limited(members, 20),
                signature: sig_of(&id),
                id,
            });
        }
        for grp in &s.relation_class_groups {
            let id = format!("rel:L3:{}", grp.label);
            let members = s.relation_classes.iter().filter(|c| c.group == grp.label).map(|c| c.label.as_str());
            out.elements.push(SchemaElement {
                kind: AnchorKind::Relation,
                level: Level::L3,
                label: grp.label.clone(),
                description: String::new(),
                hierarchy: String::new(),
                variants: join_limited(members, 20),
                signature: sig_of(&id),
                id,
            });
        }
        out
    }

    pub fn element(&self, id: &str) -> Option<&SchemaElement> {
        self.elements.iter().find(|e| e.id == id)
    }
}

/// Reference-side evidence: label, domain/range context and source-split
/// gold examples. Held-out triples never contribute.
pub fn anchor_fields(anchor: &Anchor, ont: &ReferenceOntology, gold: &[GoldTriple]) -> Vec<Field> {
    let source = gold.iter().filter(|t| t.split == Split::Source);
    let (context, examples) = match anchor.kind {
        AnchorKind::Relation => {
            let r = ont.relation(&anchor.reference);
            let context = r.map_or_else(String::new, |r| format!("{} {}", label_key(&r.domain), label_key(&r.range)));
            let ex = source
                .filter(|t| t.relation == anchor.reference)
                .map(|t| format!("{} {} {}", t.subject, label_key(&t.relation), t.object));
            (context, ex.collect::<BTreeSet<_>>())
        }
        AnchorKind::Concept => {
            let incident: Vec<&OntologyRelation> = ont
                .relations
                .iter()
                .filter(|r| r.domain == anchor.reference || r.range == anchor.reference)
                .collect();
            let context = ont.concept(&anchor.reference).map_or_else(String::new, |c| c.description.clone());
            let mut ex = BTreeSet::new();
            for t in source {
                for r in incident.iter().filter(|r| r.label == t.relation) {
                    if r.domain == anchor.reference {
                        ex.insert(t.subject.clone());
                    }
                    if r.range == anchor.reference {
                        ex.insert(t.object.clone());
                    }
                }
            }
            (context, ex)
        }
    };
    vec![
        Field::new("label", label_key(&anchor.reference), W_LABEL),
        Field::new("context", context, W_CONTEXT),
        Field::new("examples", examples.into_iter().take(5).collect::<Vec<_>>().join("; "), W_EXAMPLES),
    ]
}

pub fn element_fields(e: &SchemaElement) -> Vec<Field> {
    vec![
        Field::new("label", label_key(&e.label), W_LABEL),
        Field::new("hierarchy", label_key(&e.hierarchy), W_CONTEXT),
        Field::new("variants", e.variants.clone(), W_EXAMPLES),
        Field::new("signature", e.signature.clone(), W_CONTEXT),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub element: String,
    pub level: Level,
    pub similarity: f64,
    /// 1-based position in the anchor's candidate list.
    pub rank: usize,
}

/// Same-kind elements by descending cosine (ties by id), at or above the
/// threshold, first `top_k` kept.
pub fn retrieve_candidates(
    anchor_kind: AnchorKind,
    anchor_vec: &EmbeddingVector,
    schema: &InducedSchema,
    element_vecs: &[EmbeddingVector],
    cfg: &AlignmentConfig,
) -> Vec<Candidate> {
    let mut scored: Vec<(usize, f64)> = schema
        .elements
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == anchor_kind)
        .map(|(i, _)| (i, cosine(anchor_vec, &element_vecs[i])))
        .filter(|&(_, s)| s >= cfg.threshold)
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| schema.elements[a.0].id.cmp(&schema.elements[b.0].id)));
    scored
        .into_iter()
        .take(cfg.top_k)
        .enumerate()
        .map(|(r, (i, s))| Candidate {
            element: schema.elements[i].id.clone(),
            level: schema.elements[i].level,
            similarity: s,
            rank: r + 1,
        })
        .collect()
}

/// An element proposed to more than `max_assign` anchors keeps only its
/// most similar assignments (ties by anchor order). Ranks are renumbered.
pub fn cap_assignments(per_anchor: &mut [Vec<Candidate>], max_assign: usize) {
    let mut by_element: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
    for (a, cands) in per_anchor.iter().enumerate() {
        for c in cands {
            by_element.entry(c.element.clone()).or_default().push((c.similarity, a));
        }
    }
    let mut keep: BTreeSet<(String, usize)> = BTreeSet::new();
    for (element, mut uses) in by_element {
        uses.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for (_, a) in uses.into_iter().take(max_assign) {
            keep.insert((element.clone(), a));
        }
    }
    for (a, cands) in per_anchor.iter_mut().enumerate() {
        cands.retain(|c| keep.contains(&(c.element.clone(), a)));
        for (r, c) in cands.iter_mut().enumerate() {
            c.rank = r + 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlignLabel {
    Equivalent,
    Narrower,
    Broader,
    Unrelated,
}

impl AlignLabel {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "equivalent" => Some(AlignLabel::Equivalent),
            "narrower" => Some(AlignLabel::Narrower),
            "broader" => Some(AlignLabel::Broader),
            "unrelated" => Some(AlignLabel::Unrelated),
            _ => None,
        }
    }

    pub fn compatible(self) -> bool {
        matches!(self, AlignLabel::Equivalent | AlignLabel::Narrower)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentJudgement {
    pub anchor: String,
    pub kind: AnchorKind,
    pub candidate: String,
    pub level: Level,
    pub rank: usize,
    pub similarity: f64,
    pub label: AlignLabel,
    pub confidence: f64,
    pub rationale: String,
    /// `forward` or `reverse` (relations are judged both ways).
    pub orientation: String,
}

fn anchor_payload(anchor: &Anchor, ont: &ReferenceOntology, reverse: bool) -> Value {
    match (anchor.kind, ont.relation(&anchor.reference)) {
        (AnchorKind::Relation, Some(r)) => {
            let (d, rg) = if reverse { (&r.range, &r.domain) } else { (&r.domain, &r.range) };
            json!({"kind": "relation", "label": r.label, "domain": d, "range": rg, "description": r.description})
        }
        _ => {
            let desc = ont.concept(&anchor.reference).map_or("", |c| c.description.as_str());
            json!({"kind": "concept", "label": anchor.reference, "description": desc})
        }
    }
}

fn ask(prompt_input: &Value, chat: &dyn ChatProvider, budget: usize, subject: &str, trace: &mut Trace) -> (AlignLabel, f64, String) {
    let (reply, record) = logged_chat(chat, ChatRequest::new(frame(SCHEMA_VERIFY, prompt_input), budget, StageTag::SchemaVerify));
    trace.prompts.push(record);
    let text = match reply {
        Ok(t) => t,
        Err(e) => {
            trace.event(Event::new(STAGE, "provider_error", subject, e.to_string()));
            return (AlignLabel::Unrelated, 0.0, String::new());
        }
    };
    let parsed = parse_reply(&text).and_then(|v| {
        let label = AlignLabel::parse(v.get("label")?.as_str()?)?;
        let conf = v.get("confidence")?.as_f64()?.clamp(0.0, 1.0);
        let why = v.get("rationale").and_then(Value::as_str).unwrap_or("").to_string();
        Some((label, conf, why))
    });
    parsed.unwrap_or_else(|| {
        trace.event(Event::new(STAGE, "parse_failure", subject, text));
        (AlignLabel::Unrelated, 0.0, String::new())
    })
}

/// Four-way judgement of one candidate. Relation anchors are asked in both
/// orientations and the better answer kept.
pub fn verify(
    anchor: &Anchor,
    ont: &ReferenceOntology,
    cand: &Candidate,
    schema: &InducedSchema,
    chat: &dyn ChatProvider,
    budget: usize,
    trace: &mut Trace,
) -> AlignmentJudgement {
    let el = schema.element(&cand.element);
    let candidate = json!({
        "id": cand.element,
        "label": el.map_or("", |e| e.label.as_str()),
        "description": el.map_or("", |e| e.description.as_str()),
        "level": cand.level,
        "hierarchy": el.map_or("", |e| e.hierarchy.as_str()),
        "signature": el.map_or("", |e| e.signature.as_str()),
    });
    let subject = format!("{} ~ {}", anchor.key(), cand.element);
    let orientations: &[&str] = match anchor.kind {
        AnchorKind::Relation => &["forward", "reverse"],
        AnchorKind::Concept => &["forward"],
    };
    let mut best: Option<(AlignLabel, f64, String, &str)> = None;
    for &o in orientations {
        let input = json!({"anchor": anchor_payload(anchor, ont, o == "reverse"), "candidate": candidate, "orientation": o});
        let (label, conf, why) = ask(&input, chat, budget, &subject, trace);
        let better = best.as_ref().is_none_or(|(l, c, _, _)| (label, -conf) < (*l, -*c));
        if better {
            best = Some((label, conf, why, o));
        }
    }
    let (label, confidence, rationale, orientation) = best.expect("at least one orientation");
    AlignmentJudgement {
        anchor: anchor.key(),
        kind: anchor.kind,
        candidate: cand.element.clone(),
        level: cand.level,
        rank: cand.rank,
        similarity: cand.similarity,
        label,
        confidence,
        rationale,
        orientation: orientation.to_string(),
    }
}

/// Judgements below the confidence threshold, for human review.
pub fn audit_log(judgements: &[AlignmentJudgement], below: f64) -> Vec<AlignmentJudgement> {
    judgements.iter().filter(|j| j.confidence < below).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeReport {
    pub anchor_count: usize,
    pub coverage_exact: f64,
    pub coverage_compat: f64,
    pub coverage_narrower: f64,
    pub mrr5: f64,
    /// Absent when no relation anchor has a compatible mapping.
    pub dr_consistency: Option<f64>,
    pub level_distribution: BTreeMap<Level, f64>,
}

/// Best accepted match: Equivalent before Narrower, then confidence, then rank.
fn best_match<'a>(js: &[&'a AlignmentJudgement]) -> Option<&'a AlignmentJudgement> {
    js.iter()
        .filter(|j| j.label.compatible())
        .min_by(|a, b| {
            a.label
                .cmp(&b.label)
                .then(b.confidence.total_cmp(&a.confidence))
                .then(a.rank.cmp(&b.rank))
        })
        .copied()
}

pub fn score_scope(
    anchors: &[Anchor],
    judgements: &[AlignmentJudgement],
    ont: &ReferenceOntology,
    schema: &InducedSchema,
    top_k: usize,
) -> ScopeReport {
    let mut by_anchor: BTreeMap<&str, Vec<&AlignmentJudgement>> = BTreeMap::new();
    for j in judgements {
        by_anchor.entry(j.anchor.as_str()).or_default().push(j);
    }
    let keys: Vec<String> = anchors.iter().map(Anchor::key).collect();
    let of = |k: &str| by_anchor.get(k).cloned().unwrap_or_default();

    // Elements each concept is compatibly aligned to, across levels.
    let aligned: BTreeMap<&str, BTreeSet<&str>> = anchors
        .iter()
        .zip(&keys)
        .filter(|(a, _)| a.kind == AnchorKind::Concept)
        .map(|(a, k)| {
            let els = of(k).iter().filter(|j| j.label.compatible()).map(|j| j.candidate.as_str()).collect();
            (a.reference.as_str(), els)
        })
        .collect();
    let fits = |e: &EntityId, concept: &str| {
        is_primitive(concept)
            || aligned.get(concept).is_some_and(|els| {
                schema
                    .entity_chain
                    .get(e)
                    .is_some_and(|chain| chain.iter().any(|c| els.contains(c.as_str())))
            })
    };

    let total: f64 = anchors.iter().map(|a| a.weight).sum();
    let (mut exact, mut narrower, mut mrr) = (0.0, 0.0, 0.0);
    let (mut dr_num, mut dr_den) = (0.0, 0.0);
    let mut levels: BTreeMap<Level, f64> = BTreeMap::new();
    for (a, k) in anchors.iter().zip(&keys) {
        let mut js = of(k);
        js.sort_by_key(|j| j.rank);
        let has = |l: AlignLabel| js.iter().any(|j| j.label == l);
        if has(AlignLabel::Equivalent) {
            exact += a.weight;
        } else if has(AlignLabel::Narrower) {
            narrower += a.weight;
        }
        if let Some(first) = js.iter().find(|j| j.label.compatible() && j.rank <= top_k) {
            mrr += a.weight / first.rank as f64;
        }
        let Some(best) = best_match(&js) else { continue };
        *levels.entry(best.level).or_default() += a.weight;
        if a.kind == AnchorKind::Relation {
            let Some(r) = ont.relation(&a.reference) else { continue };
            let pairs = schema.relation_cover.get(&best.candidate).map_or(&[][..], Vec::as_slice);
            let ok = pairs
                .iter()
                .filter(|(s, o)| (fits(s, &r.domain) && fits(o, &r.range)) || (fits(o, &r.domain) && fits(s, &r.range)))
                .count();
            let share = if pairs.is_empty() { 0.0 } else { ok as f64 / pairs.len() as f64 };
            dr_num += a.weight * share;
            dr_den += a.weight;
        }
    }
    let matched: f64 = levels.values().sum();
    let ratio = |x: f64| if total > 0.0 { x / total } else { 0.0 };
    ScopeReport {
        anchor_count: anchors.len(),
        coverage_exact: ratio(exact),
        coverage_narrower: ratio(narrower),
        coverage_compat: ratio(exact + narrower),
        mrr5: ratio(mrr),
        dr_consistency: (dr_den > 0.0).then(|| dr_num / dr_den),
        level_distribution: levels.into_iter().map(|(l, w)| (l, w / matched)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEvaluation {
    pub scope: Scope,
    pub report: ScopeReport,
    pub anchors: Vec<Anchor>,
    pub judgements: Vec<AlignmentJudgement>,
    pub audit: Vec<AlignmentJudgement>,
}

/// Anchors, retrieval, verification and scoring for one scope.
pub fn evaluate_schema(
    g: &ContextEnrichedGraph,
    ont: &ReferenceOntology,
    gold: &[GoldTriple],
    scope: Scope,
    config: &Config,
    providers: &Providers,
) -> Result<(SchemaEvaluation, Trace), AlignmentError> {
    ont.validate()?;
    let cfg = &config.alignment;
    let anchors = active_anchors(ont, gold, scope)?;
    let schema = InducedSchema::from_graph(g);
    let embedder = providers.embedder.as_ref();
    let batch = config.embedding.batch_size;
    let anchor_reps = build_representations(
        anchors.iter().map(|a| (a.key(), anchor_fields(a, ont, gold))).collect(),
        embedder,
        batch,
    )?;
    let element_reps = build_representations(
        schema.elements.iter().map(|e| (e.id.clone(), element_fields(e))).collect(),
        embedder,
        batch,
    )?;
    let element_vecs: Vec<EmbeddingVector> = element_reps.into_iter().map(|r| r.combined).collect();
    let mut per_anchor: Vec<Vec<Candidate>> = anchors
        .iter()
        .zip(&anchor_reps)
        .map(|(a, r)| retrieve_candidates(a.kind, &r.combined, &schema, &element_vecs, cfg))
        .collect();
    cap_assignments(&mut per_anchor, cfg.max_assign);

    let work: Vec<(&Anchor, &Candidate)> = anchors
        .iter()
        .zip(&per_anchor)
        .flat_map(|(a, cs)| cs.iter().map(move |c| (a, c)))
        .collect();
    let results: Vec<(AlignmentJudgement, Trace)> = work
        .par_iter()
        .map(|(a, c)| {
            let mut t = Trace::default();
            let j = verify(a, ont, c, &schema, providers.chat.as_ref(), config.budgets.verify, &mut t);
            (j, t)
        })
        .collect();
    let mut trace = Trace::default();
    let mut judgements = Vec::with_capacity(results.len());
    for (j, t) in results {
        trace.extend(t);
        judgements.push(j);
    }
    let audit = audit_log(&judgements, cfg.audit_below);
    for j in &audit {
        trace.event(Event::new(STAGE, "audit", format!("{} ~ {}", j.anchor, j.candidate), format!("{:?} {:.2}", j.label, j.confidence)));
    }
    let report = score_scope(&anchors, &judgements, ont, &schema, cfg.top_k);
    Ok((
        SchemaEvaluation {
            scope,
            report,
            anchors,
            judgements,
            audit,
        },
        trace,
    ))
}
