//! Relation recognition among chunk-local entities, qualifier
//! normalization, and relation resolution: canonical labels, relation
//! classes and groups, and safe duplicate merging with direction
//! normalization.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::config::{Config, Weights};
use crate::entity::entities_in_chunk;
use crate::model::{
    ActionOrigin, ActionRecord, ActionStatus, CanonicalRelation, Chunk, ChunkId, Entity, EntityId, HintType, Mention,
    MentionId, QualifierSet, RelationClass, RelationClassGroup, RelationId, RelationInstance, Stage,
};
use crate::neighborhood::{build_representations, neighborhoods, plan_batches, Field, NeighborhoodError};
use crate::provider::prompts::{frame, parse_reply, RELATION_RECOGNITION, RELATION_RESOLUTION};
use crate::provider::{logged_chat, ChatProvider, ChatRequest, Providers, StageTag};
use crate::text::slug;
use crate::trace::{ActionEntry, Event, Trace};

const STAGE: &str = "relations";

pub fn relation_id(chunk: &ChunkId, k: usize) -> RelationId {
    let base = chunk.as_str().strip_prefix("c_").unwrap_or(chunk.as_str());
    RelationId(format!("r_{base}_{k:02}"))
}

fn value_text(v: &Value) -> Option<String> {
    let s = match v {
        Value::Null => return None,
        Value::String(s) => s.trim().to_string(),
        other => other.to_string(),
    };
    (!s.is_empty()).then_some(s)
}

/// Map a raw qualifier object onto the eight canonical slots. Unknown keys
/// fold into `OtherQualifier` in sorted key order; empty values are null.
pub fn normalize_qualifiers(raw: &Map<String, Value>) -> QualifierSet {
    let mut q = QualifierSet::default();
    let mut other: Vec<String> = Vec::new();
    let mut folded: BTreeMap<&str, String> = BTreeMap::new();
    for (k, v) in raw {
        let Some(text) = value_text(v) else { continue };
        if k == "OtherQualifier" {
            other.push(text);
        } else if let Some(slot) = q.slot_mut(k) {
            *slot = Some(text);
        } else {
            folded.insert(k, text);
        }
    }
    other.extend(folded.into_iter().map(|(k, v)| format!("{k}: {v}")));
    if !other.is_empty() {
        q.other = Some(other.join("; "));
    }
    q
}

#[derive(Debug, Deserialize)]
struct RawRelation {
    #[serde(default)]
    subject_id: String,
    #[serde(default)]
    object_id: String,
    #[serde(default)]
    label: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    hint_type: Option<String>,
    #[serde(default)]
    qualifiers: Map<String, Value>,
    #[serde(default)]
    confidence: Option<f64>,
    #[serde(default)]
    evidence: Vec<String>,
}

/// Surface forms an entity may take in text: its name and every mention name.
pub fn surface_forms(e: &Entity, mentions: &BTreeMap<MentionId, Mention>) -> Vec<String> {
    let mut forms: BTreeSet<String> = e
        .member_mentions
        .iter()
        .filter_map(|m| mentions.get(m))
        .map(|m| m.name.clone())
        .collect();
    forms.insert(e.canonical_name.clone());
    forms.into_iter().filter(|f| !f.trim().is_empty()).collect()
}

/// Relations among `local` entities (`E(c)`) grounded in `chunk`.
pub fn recognize_relations(
    chunk: &Chunk,
    context: &[&Chunk],
    local: &[&Entity],
    mentions: &BTreeMap<MentionId, Mention>,
    chat: &dyn ChatProvider,
    budget: usize,
    trace: &mut Trace,
) -> Vec<RelationInstance> {
    if local.len() < 2 {
        return Vec::new();
    }
    let input = json!({
        "focus": {"id": chunk.id, "text": chunk.text},
        "context": context.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(),
        "entities": local.iter().map(|e| json!({
            "id": e.id,
            "name": e.canonical_name,
            "surface_forms": surface_forms(e, mentions),
            "type_hint": e.type_hint,
        })).collect::<Vec<_>>(),
    });
    let req = ChatRequest::new(frame(RELATION_RECOGNITION, &input), budget, StageTag::RelationRecognition);
    let (reply, record) = logged_chat(chat, req);
    trace.prompts.push(record);
    let reply = match reply {
        Ok(r) => r,
        Err(e) => {
            trace.event(Event::new(STAGE, "provider_error", chunk.id.as_str(), e.to_string()));
            return Vec::new();
        }
    };
    let raw: Vec<RawRelation> = match parse_reply(&reply)
        .and_then(|v| v.get("relations").cloned())
        .and_then(|v| serde_json::from_value(v).ok())
    {
        Some(r) => r,
        None => {
            trace.event(Event::new(STAGE, "parse_failure", chunk.id.as_str(), "unparsable relation list"));
            return Vec::new();
        }
    };
    let ids: BTreeSet<&str> = local.iter().map(|e| e.id.as_str()).collect();
    let mut out = Vec::new();
    for r in raw {
        let label = r.label.trim();
        let drop = if !ids.contains(r.subject_id.as_str()) || !ids.contains(r.object_id.as_str()) {
            Some(format!("endpoint outside the chunk's entities: {} -> {}", r.subject_id, r.object_id))
        } else if label.is_empty() {
            Some("empty label".to_string())
        } else {
            r.evidence
                .iter()
                .find(|e| !chunk.text.contains(e.as_str()))
                .map(|e| format!("evidence not in chunk: `{e}`"))
        };
        if let Some(reason) = drop {
            trace.event(Event::new(STAGE, "relation_dropped", chunk.id.as_str(), reason));
            continue;
        }
        let hint = match r.hint_type.as_deref().and_then(HintType::parse) {
            Some(h) => h,
            None => {
                trace.event(Event::new(
                    STAGE,
                    "hint_coerced",
                    chunk.id.as_str(),
                    format!("`{}` is not a hint type", r.hint_type.unwrap_or_default()),
                ));
                HintType::Association
            }
        };
        out.push(RelationInstance {
            id: relation_id(&chunk.id, out.len()),
            subject: EntityId(r.subject_id),
            object: EntityId(r.object_id),
            raw_label: label.to_string(),
            description: r.description.trim().to_string(),
            hint_type: hint,
            qualifiers: normalize_qualifiers(&r.qualifiers),
            confidence: r.confidence.unwrap_or(1.0).clamp(0.0, 1.0),
            provenance_chunks: BTreeSet::from([chunk.id.clone()]),
            evidence: r.evidence,
            canonical_label: None,
            canonical_description: None,
            rel_cls: None,
            rel_cls_group: None,
            remarks: Vec::new(),
        });
    }
    out
}

/// Recognition over a corpus, chunks in parallel, output in chunk order.
pub fn recognize_all_relations(
    chunks: &[Chunk],
    mentions: &[Mention],
    entities: &[Entity],
    config: &Config,
    providers: &Providers,
) -> (Vec<RelationInstance>, Trace) {
    let resolved = crate::entity::resolved_map(entities);
    let by_entity: BTreeMap<EntityId, Entity> = entities.iter().map(|e| (e.id.clone(), e.clone())).collect();
    let by_mention: BTreeMap<MentionId, Mention> = mentions.iter().map(|m| (m.id.clone(), m.clone())).collect();
    let window = config.ingest.context_window;
    let results: Vec<(Vec<RelationInstance>, Trace)> = chunks
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut context: Vec<&Chunk> = chunks[..i]
                .iter()
                .rev()
                .take_while(|p| p.doc_id == c.doc_id)
                .take(window)
                .collect();
            context.reverse();
            let local = entities_in_chunk(&c.id, mentions, &resolved, &by_entity);
            let mut t = Trace::default();
            let rs = recognize_relations(c, &context, &local, &by_mention, providers.chat.as_ref(), config.budgets.recognition, &mut t);
            (rs, t)
        })
        .collect();
    let mut trace = Trace::default();
    let mut out = Vec::new();
    for (rs, t) in results {
        out.extend(rs);
        trace.extend(t);
    }
    (out, trace)
}

/// Orient `r2` like `r1` when both connect the same unordered pair. The
/// re-oriented instance takes `r1`'s canonical fields; evidence and
/// provenance are untouched.
pub fn normalize_direction(r1: &RelationInstance, r2: &RelationInstance) -> Result<(RelationInstance, RelationInstance), String> {
    if r1.subject == r2.subject && r1.object == r2.object {
        return Ok((r1.clone(), r2.clone()));
    }
    if r1.subject != r2.object || r1.object != r2.subject {
        return Err(format!("{} and {} connect different entity pairs", r1.id, r2.id));
    }
    let mut flipped = r2.clone();
    std::mem::swap(&mut flipped.subject, &mut flipped.object);
    flipped.canonical_label = Some(r1.predicate().to_string());
    flipped.canonical_description = r1.canonical_description.clone();
    flipped.rel_cls = r1.rel_cls.clone();
    flipped.rel_cls_group = r1.rel_cls_group.clone();
    Ok((r1.clone(), flipped))
}

/// Keys whose values differ between the two sets (exact match after trim).
pub fn qualifier_conflicts(a: &QualifierSet, b: &QualifierSet) -> Vec<&'static str> {
    QualifierSet::KEYS
        .iter()
        .copied()
        .filter(|k| match (a.get(k).unwrap(), b.get(k).unwrap()) {
            (Some(x), Some(y)) => x.trim() != y.trim(),
            _ => false,
        })
        .collect()
}

fn qualifier_union(a: &QualifierSet, b: &QualifierSet) -> QualifierSet {
    let mut q = a.clone();
    for k in QualifierSet::KEYS {
        let slot = q.slot_mut(k).unwrap();
        if slot.is_none() {
            *slot = b.get(k).unwrap().clone();
        }
    }
    q
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RelationAction {
    SetCanonicalRel {
        relation_ids: Vec<RelationId>,
        canonical_label: String,
        #[serde(default)]
        canonical_description: Option<String>,
    },
    SetRelCls {
        relation_ids: Vec<RelationId>,
        rel_cls: String,
    },
    SetRelClsGroup {
        relation_ids: Vec<RelationId>,
        rel_cls_group: String,
        #[serde(default)]
        hint_type: Option<String>,
    },
    ModifyRelSchema {
        relation_ids: Vec<RelationId>,
        #[serde(default)]
        canonical_label: Option<String>,
        #[serde(default)]
        canonical_description: Option<String>,
        #[serde(default)]
        rel_cls: Option<String>,
        #[serde(default)]
        rel_cls_group: Option<String>,
        #[serde(default)]
        hint_type: Option<String>,
    },
    AddRelRemark {
        relation_ids: Vec<RelationId>,
        remark: String,
    },
    MergeRelations {
        relation_ids: Vec<RelationId>,
        #[serde(default)]
        inverse: bool,
    },
}

/// What applying an action did.
#[derive(Debug, Clone, PartialEq)]
pub enum Applied {
    /// Schema fields or the edge set changed.
    Structural,
    /// Only remarks changed, or nothing did.
    Cosmetic,
    /// A merge refused because qualifiers conflict; the caller records
    /// remarks on both instances.
    Conflict {
        keep: RelationId,
        drop: RelationId,
        keys: Vec<&'static str>,
    },
}

fn text_of(s: &Option<String>) -> Option<&str> {
    s.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

fn check_ids(
    ids: &[RelationId],
    state: &BTreeMap<RelationId, RelationInstance>,
    allowed: Option<&BTreeSet<RelationId>>,
) -> Result<(), String> {
    if ids.is_empty() {
        return Err("no relation ids".into());
    }
    for id in ids {
        if allowed.is_some_and(|a| !a.contains(id)) {
            return Err(format!("relation {id} is outside the batch"));
        }
        if !state.contains_key(id) {
            return Err(format!("unknown relation {id}"));
        }
    }
    Ok(())
}

fn set_field(slot: &mut Option<String>, value: Option<&str>, changed: &mut bool) {
    if let Some(v) = value {
        if slot.as_deref() != Some(v) {
            *slot = Some(v.to_string());
            *changed = true;
        }
    }
}

/// Apply one relation action. Errors leave the state untouched.
pub fn apply_relation_action(
    action: &RelationAction,
    state: &mut BTreeMap<RelationId, RelationInstance>,
    allowed: Option<&BTreeSet<RelationId>>,
) -> Result<Applied, String> {
    let schema_update = |ids: &[RelationId],
                         state: &mut BTreeMap<RelationId, RelationInstance>,
                         label: Option<&str>,
                         desc: Option<&str>,
                         cls: Option<&str>,
                         group: Option<&str>,
                         hint: Option<&str>|
     -> Result<Applied, String> {
        check_ids(ids, state, allowed)?;
        let hint = match hint {
            Some(h) => Some(HintType::parse(h).ok_or_else(|| format!("`{h}` is not a hint type"))?),
            None => None,
        };
        let mut changed = false;
        for id in ids {
            let r = state.get_mut(id).unwrap();
            set_field(&mut r.canonical_label, label, &mut changed);
            set_field(&mut r.canonical_description, desc, &mut changed);
            set_field(&mut r.rel_cls, cls, &mut changed);
            set_field(&mut r.rel_cls_group, group, &mut changed);
            if let Some(h) = hint.filter(|h| *h != r.hint_type) {
                r.hint_type = h;
                changed = true;
            }
        }
        Ok(if changed { Applied::Structural } else { Applied::Cosmetic })
    };

    match action {
        RelationAction::SetCanonicalRel {
            relation_ids,
            canonical_label,
            canonical_description,
        } => {
            let label = Some(canonical_label.trim()).filter(|s| !s.is_empty()).ok_or("empty canonical label")?;
            schema_update(relation_ids, state, Some(label), text_of(canonical_description), None, None, None)
        }
        RelationAction::SetRelCls { relation_ids, rel_cls } => {
            let cls = Some(rel_cls.trim()).filter(|s| !s.is_empty()).ok_or("empty relation class")?;
            schema_update(relation_ids, state, None, None, Some(cls), None, None)
        }
        RelationAction::SetRelClsGroup {
            relation_ids,
            rel_cls_group,
            hint_type,
        } => {
            let group = Some(rel_cls_group.trim()).filter(|s| !s.is_empty()).ok_or("empty relation class group")?;
            schema_update(relation_ids, state, None, None, None, Some(group), text_of(hint_type))
        }
        RelationAction::ModifyRelSchema {
            relation_ids,
            canonical_label,
            canonical_description,
            rel_cls,
            rel_cls_group,
            hint_type,
        } => schema_update(
            relation_ids,
            state,
            text_of(canonical_label),
            text_of(canonical_description),
            text_of(rel_cls),
            text_of(rel_cls_group),
            text_of(hint_type),
        ),
        RelationAction::AddRelRemark { relation_ids, remark } => {
            check_ids(relation_ids, state, allowed)?;
            let remark = remark.trim();
            if remark.is_empty() {
                return Err("empty remark".into());
            }
            for id in relation_ids {
                let r = state.get_mut(id).unwrap();
                if !r.remarks.iter().any(|x| x == remark) {
                    r.remarks.push(remark.to_string());
                }
            }
            Ok(Applied::Cosmetic)
        }
        RelationAction::MergeRelations { relation_ids, inverse } => {
            let [keep, drop] = relation_ids.as_slice() else {
                return Err("merge needs exactly two relation ids".into());
            };
            if keep == drop {
                return Err("cannot merge a relation with itself".into());
            }
            check_ids(relation_ids, state, allowed)?;
            let (k, d) = (&state[keep], &state[drop]);
            let same = k.subject == d.subject && k.object == d.object;
            let opposite = k.subject == d.object && k.object == d.subject;
            if !same && !(*inverse && opposite) {
                return Err(format!("{keep} and {drop} connect different entity pairs"));
            }
            let (k, d) = normalize_direction(k, d)?;
            let keys = qualifier_conflicts(&k.qualifiers, &d.qualifiers);
            if !keys.is_empty() {
                return Ok(Applied::Conflict {
                    keep: keep.clone(),
                    drop: drop.clone(),
                    keys,
                });
            }
            let mut merged = k.clone();
            merged.qualifiers = qualifier_union(&k.qualifiers, &d.qualifiers);
            for e in &d.evidence {
                if !merged.evidence.contains(e) {
                    merged.evidence.push(e.clone());
                }
            }
            merged.provenance_chunks.extend(d.provenance_chunks.iter().cloned());
            merged.confidence = k.confidence.max(d.confidence);
            if merged.description.is_empty() {
                merged.description = d.description.clone();
            }
            for (slot, other) in [
                (&mut merged.canonical_label, &d.canonical_label),
                (&mut merged.canonical_description, &d.canonical_description),
                (&mut merged.rel_cls, &d.rel_cls),
                (&mut merged.rel_cls_group, &d.rel_cls_group),
            ] {
                if slot.is_none() {
                    *slot = other.clone();
                }
            }
            for r in &d.remarks {
                if !merged.remarks.contains(r) {
                    merged.remarks.push(r.clone());
                }
            }
            state.remove(drop);
            state.insert(keep.clone(), merged);
            Ok(Applied::Structural)
        }
    }
}

fn conflict_remark(other: &RelationId, keys: &[&str]) -> String {
    format!("qualifier conflict with {other} on {}", keys.join(", "))
}

fn log_one(
    trace: &mut Trace,
    state: &mut BTreeMap<RelationId, RelationInstance>,
    allowed: Option<&BTreeSet<RelationId>>,
    round: u32,
    batch: u64,
    payload: Value,
    origin: ActionOrigin,
) -> usize {
    let kind = payload.get("action").and_then(Value::as_str).unwrap_or("unknown").to_string();
    let rationale = payload.get("rationale").and_then(Value::as_str).unwrap_or("").to_string();
    let result = serde_json::from_value::<RelationAction>(payload.clone())
        .map_err(|e| format!("invalid action: {e}"))
        .and_then(|a| apply_relation_action(&a, state, allowed));
    let structural = matches!(result, Ok(Applied::Structural));
    let (outcome, followup) = match result {
        Ok(Applied::Conflict { keep, drop, keys }) => (
            Err(format!("qualifier conflict on {}", keys.join(", "))),
            Some((keep, drop, keys)),
        ),
        Ok(_) => (Ok(()), None),
        Err(e) => (Err(e), None),
    };
    trace.record(
        Stage::RelRes,
        ActionEntry {
            round,
            batch,
            kind: &kind,
            payload,
            rationale,
            outcome,
            origin,
        },
    );
    if let Some((keep, drop, keys)) = followup {
        for (on, other) in [(&keep, &drop), (&drop, &keep)] {
            log_one(
                trace,
                state,
                None,
                round,
                batch,
                json!({"action": "add_rel_remark", "relation_ids": [on], "remark": conflict_remark(other, &keys), "rationale": "both instances retained"}),
                ActionOrigin::Pipeline,
            );
        }
    }
    structural as usize
}

/// Apply one provider reply for a batch. Returns the number of applied
/// actions that changed schema fields or merged edges. Setters that
/// change nothing and remarks do not count.
pub fn apply_relation_reply(
    reply: &Value,
    state: &mut BTreeMap<RelationId, RelationInstance>,
    batch_ids: &BTreeSet<RelationId>,
    round: u32,
    trace: &mut Trace,
) -> usize {
    let batch = trace.next_batch();
    let Some(items) = reply.as_array() else {
        trace.event(Event::new(STAGE, "malformed_actions", format!("batch {batch}"), "reply is not an array"));
        return 0;
    };
    let mut edits = 0;
    for item in items {
        edits += log_one(trace, state, Some(batch_ids), round, batch, item.clone(), ActionOrigin::Provider);
    }
    edits
}

fn relation_fields(r: &RelationInstance, entities: &BTreeMap<EntityId, Entity>, weights: &BTreeMap<String, f64>) -> Vec<Field> {
    let name = |id: &EntityId| entities.get(id).map_or(id.as_str().to_string(), |e| {
        format!("{} {}", e.canonical_name, e.type_hint.clone().unwrap_or_default())
    });
    let hints = [Some(r.hint_type.as_str().to_string()), r.canonical_label.clone(), r.rel_cls.clone()]
        .into_iter()
        .flatten()
        .collect::<Vec<_>>()
        .join(" ");
    let quals = r.qualifiers.populated().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join("; ");
    let mut fields = vec![
        Field::new("raw_label", r.raw_label.clone(), Weights::get(weights, "raw_label")),
        Field::new("description", r.description.clone(), Weights::get(weights, "description")),
        Field::new("endpoint_context", format!("{} | {}", name(&r.subject), name(&r.object)), Weights::get(weights, "endpoint_context")),
        Field::new("hints", hints, Weights::get(weights, "hints")),
        Field::new("qualifiers", quals, Weights::get(weights, "qualifiers")),
    ];
    if !fields.iter().any(|f| f.weight > 0.0 && !f.text.trim().is_empty()) {
        fields.push(Field::new("id", r.id.as_str(), 1.0));
    }
    fields
}

fn resolution_input(batch: &[&RelationInstance], entities: &BTreeMap<EntityId, Entity>) -> Value {
    let name = |id: &EntityId| entities.get(id).map_or("", |e| e.canonical_name.as_str()).to_string();
    json!({
        "relations": batch.iter().map(|r| json!({
            "id": r.id,
            "subject_id": r.subject,
            "object_id": r.object,
            "subject": name(&r.subject),
            "object": name(&r.object),
            "raw_label": r.raw_label,
            "description": r.description,
            "hint_type": r.hint_type,
            "canonical_label": r.canonical_label,
            "rel_cls": r.rel_cls,
            "rel_cls_group": r.rel_cls_group,
            "qualifiers": r.qualifiers,
            "remarks": r.remarks,
        })).collect::<Vec<_>>()
    })
}

fn propose(input: Value, chat: &dyn ChatProvider, budget: usize, label: String, trace: &mut Trace) -> Option<Value> {
    let req = ChatRequest::new(frame(RELATION_RESOLUTION, &input), budget, StageTag::RelationResolution);
    let (reply, record) = logged_chat(chat, req);
    trace.prompts.push(record);
    match reply {
        Ok(r) => {
            let v = parse_reply(&r);
            if v.is_none() {
                trace.event(Event::new(STAGE, "malformed_actions", label, "reply is not JSON"));
            }
            v
        }
        Err(e) => {
            trace.event(Event::new(STAGE, "provider_error", label, e.to_string()));
            None
        }
    }
}

/// Most frequent value; ties go to the smallest.
pub fn majority(values: &[&str]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    // Key order plus strict `>` gives ties to the smallest value.
    let mut best: Option<(&str, usize)> = None;
    for (v, c) in counts {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((v, c));
        }
    }
    best.map(|(v, _)| v.to_string()).unwrap_or_default()
}

fn pipeline_setters<F>(
    state: &mut BTreeMap<RelationId, RelationInstance>,
    trace: &mut Trace,
    round: u32,
    kind: &str,
    field: &str,
    rationale: &str,
    pick: F,
) where
    F: Fn(&RelationInstance) -> Option<String>,
{
    let mut by_value: BTreeMap<String, Vec<RelationId>> = BTreeMap::new();
    for r in state.values() {
        if let Some(v) = pick(r) {
            by_value.entry(v).or_default().push(r.id.clone());
        }
    }
    for (value, ids) in by_value {
        let batch = trace.next_batch();
        log_one(
            trace,
            state,
            None,
            round,
            batch,
            json!({"action": kind, "relation_ids": ids, field: value, "rationale": rationale}),
            ActionOrigin::Pipeline,
        );
    }
}

/// Make canonical label, class and group total, then single-valued: each
/// canonical label maps to one class and each class to one group, by
/// majority with ties to the smallest value. Logged as pipeline actions.
pub fn finalize_relations(state: &mut BTreeMap<RelationId, RelationInstance>, round: u32, trace: &mut Trace) {
    pipeline_setters(state, trace, round, "set_canonical_rel", "canonical_label", "fallback canonical label", |r| {
        r.canonical_label.is_none().then(|| slug(&r.raw_label))
    });
    pipeline_setters(state, trace, round, "set_rel_cls", "rel_cls", "fallback relation class", |r| {
        r.rel_cls.is_none().then(|| r.canonical_label.clone().unwrap())
    });
    pipeline_setters(state, trace, round, "set_rel_cls_group", "rel_cls_group", "fallback relation group", |r| {
        r.rel_cls_group.is_none().then(|| r.hint_type.as_str().to_string())
    });

    let mut cls_of: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for r in state.values() {
        cls_of.entry(r.canonical_label.clone().unwrap()).or_default().push(r.rel_cls.as_deref().unwrap());
    }
    let cls_major: BTreeMap<String, String> = cls_of.iter().map(|(k, v)| (k.clone(), majority(v))).collect();
    pipeline_setters(state, trace, round, "set_rel_cls", "rel_cls", "one class per canonical relation", |r| {
        let want = &cls_major[r.canonical_label.as_ref().unwrap()];
        (r.rel_cls.as_ref() != Some(want)).then(|| want.clone())
    });

    let mut group_of: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for r in state.values() {
        group_of.entry(r.rel_cls.clone().unwrap()).or_default().push(r.rel_cls_group.as_deref().unwrap());
    }
    let group_major: BTreeMap<String, String> = group_of.iter().map(|(k, v)| (k.clone(), majority(v))).collect();
    pipeline_setters(state, trace, round, "set_rel_cls_group", "rel_cls_group", "one group per relation class", |r| {
        let want = &group_major[r.rel_cls.as_ref().unwrap()];
        (r.rel_cls_group.as_ref() != Some(want)).then(|| want.clone())
    });
}

/// Relation-side schema records derived from finalized instances.
pub fn relation_schema(
    relations: &[RelationInstance],
) -> (Vec<CanonicalRelation>, Vec<RelationClass>, Vec<RelationClassGroup>) {
    let mut canon: BTreeMap<&str, CanonicalRelation> = BTreeMap::new();
    let mut classes: BTreeMap<&str, &str> = BTreeMap::new();
    let mut sorted: Vec<&RelationInstance> = relations.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for r in sorted {
        let (Some(label), Some(cls), Some(group)) = (&r.canonical_label, &r.rel_cls, &r.rel_cls_group) else {
            continue;
        };
        let entry = canon.entry(label).or_insert_with(|| CanonicalRelation {
            label: label.clone(),
            description: String::new(),
            rel_cls: cls.clone(),
        });
        if entry.description.is_empty() {
            entry.description = r.canonical_description.clone().unwrap_or_default();
        }
        classes.entry(cls).or_insert(group);
    }
    let groups: BTreeSet<&str> = classes.values().copied().collect();
    (
        canon.into_values().collect(),
        classes
            .into_iter()
            .map(|(l, g)| RelationClass {
                label: l.to_string(),
                group: g.to_string(),
            })
            .collect(),
        groups.into_iter().map(|g| RelationClassGroup { label: g.to_string() }).collect(),
    )
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationResolution {
    pub relations: Vec<RelationInstance>,
    pub canonical_relations: Vec<CanonicalRelation>,
    pub relation_classes: Vec<RelationClass>,
    pub relation_class_groups: Vec<RelationClassGroup>,
    pub edits_per_run: Vec<usize>,
    pub trace: Trace,
}

/// Multi-run canonicalization until structural edits plateau, then
/// finalization.
pub fn run_relation_resolution(
    relations: Vec<RelationInstance>,
    entities: &[Entity],
    config: &Config,
    providers: &Providers,
) -> Result<RelationResolution, NeighborhoodError> {
    let by_entity: BTreeMap<EntityId, Entity> = entities.iter().map(|e| (e.id.clone(), e.clone())).collect();
    let mut state: BTreeMap<RelationId, RelationInstance> = relations.into_iter().map(|r| (r.id.clone(), r)).collect();
    let mut trace = Trace::default();
    let mut edits_per_run = Vec::new();
    let cfg = config.relation_resolution;
    let (mut calm, mut run) = (0, 0);

    while run < cfg.max_runs && calm < cfg.patience && !state.is_empty() {
        run += 1;
        let items = state
            .values()
            .map(|r| (r.id.as_str().to_string(), relation_fields(r, &by_entity, &config.weights.relation)))
            .collect();
        let reps = build_representations(items, providers.embedder.as_ref(), config.embedding.batch_size)?;
        let batches = plan_batches(&neighborhoods(&reps, &config.clustering), config.clustering.batch_size);
        let proposals: Vec<(Option<Value>, Trace)> = batches
            .par_iter()
            .map(|ids| {
                let batch: Vec<&RelationInstance> = ids.iter().map(|i| &state[&RelationId(i.clone())]).collect();
                let mut t = Trace::default();
                let reply = propose(
                    resolution_input(&batch, &by_entity),
                    providers.chat.as_ref(),
                    config.budgets.resolution,
                    ids.join(","),
                    &mut t,
                );
                (reply, t)
            })
            .collect();
        let mut edits = 0;
        for (ids, (reply, t)) in batches.iter().zip(proposals) {
            trace.extend(t);
            let allowed: BTreeSet<RelationId> = ids.iter().map(|i| RelationId(i.clone())).collect();
            match reply {
                Some(r) => edits += apply_relation_reply(&r, &mut state, &allowed, run, &mut trace),
                None => {
                    trace.next_batch();
                }
            }
        }
        edits_per_run.push(edits);
        calm = if edits <= cfg.edit_threshold { calm + 1 } else { 0 };
        log::info!("relation resolution run {run}: {edits} edits, {} relations", state.len());
    }

    finalize_relations(&mut state, run + 1, &mut trace);
    let relations: Vec<RelationInstance> = state.into_values().collect();
    let (canonical_relations, relation_classes, relation_class_groups) = relation_schema(&relations);
    Ok(RelationResolution {
        relations,
        canonical_relations,
        relation_classes,
        relation_class_groups,
        edits_per_run,
        trace,
    })
}

/// Rebuild resolved relations from the raw ones and the logged actions.
pub fn replay_relation_actions(raw: &[RelationInstance], actions: &[ActionRecord]) -> Result<Vec<RelationInstance>, String> {
    let mut state: BTreeMap<RelationId, RelationInstance> = raw.iter().map(|r| (r.id.clone(), r.clone())).collect();
    for a in actions
        .iter()
        .filter(|a| a.stage == Stage::RelRes && a.status == ActionStatus::Applied)
    {
        let action: RelationAction =
            serde_json::from_value(a.payload.clone()).map_err(|e| format!("action {}: {e}", a.sequence_number))?;
        match apply_relation_action(&action, &mut state, None) {
            Ok(Applied::Conflict { .. }) => {
                return Err(format!("action {} now hits a qualifier conflict", a.sequence_number));
            }
            Ok(_) => {}
            Err(e) => return Err(format!("action {} no longer applies: {e}", a.sequence_number)),
        }
    }
    Ok(state.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(id: &str, s: &str, o: &str, label: &str) -> RelationInstance {
        RelationInstance {
            id: RelationId(id.into()),
            subject: EntityId(s.into()),
            object: EntityId(o.into()),
            raw_label: label.into(),
            description: String::new(),
            hint_type: HintType::Association,
            qualifiers: QualifierSet::default(),
            confidence: 0.5,
            provenance_chunks: BTreeSet::from([ChunkId(format!("c_{id}"))]),
            evidence: vec![format!("ev {id}")],
            canonical_label: None,
            canonical_description: None,
            rel_cls: None,
            rel_cls_group: None,
            remarks: vec![],
        }
    }

    fn state(rs: Vec<RelationInstance>) -> BTreeMap<RelationId, RelationInstance> {
        rs.into_iter().map(|r| (r.id.clone(), r)).collect()
    }

    #[test]
    fn qualifier_normalization() {
        assert_eq!(normalize_qualifiers(&Map::new()), QualifierSet::default());
        let q = normalize_qualifiers(json!({"TemporalQualifier": "during ramp-up"}).as_object().unwrap());
        assert_eq!(q.populated(), [("TemporalQualifier", "during ramp-up")]);
        let q = normalize_qualifiers(json!({"Foo": "x", "Bar": "y", "SpatialQualifier": " "}).as_object().unwrap());
        assert_eq!(q.other.as_deref(), Some("Bar: y; Foo: x"));
        assert_eq!(q.spatial, None);
    }

    #[test]
    fn direction_normalization() {
        let mut a = rel("r1", "A", "B", "feeds");
        a.canonical_label = Some("feeds".into());
        let b = rel("r2", "B", "A", "fed by");
        let (x, y) = normalize_direction(&a, &b).unwrap();
        assert_eq!((x.subject.as_str(), x.object.as_str()), ("A", "B"));
        assert_eq!((y.subject.as_str(), y.object.as_str()), ("A", "B"));
        assert_eq!(y.predicate(), "feeds");
        assert_eq!(y.evidence, b.evidence);
        let same = rel("r3", "A", "B", "x");
        assert_eq!(normalize_direction(&a, &same).unwrap().1, same);
        assert!(normalize_direction(&a, &rel("r4", "A", "C", "x")).is_err());
    }

    #[test]
    fn subset_merge_keeps_superset() {
        let mut a = rel("r1", "A", "B", "feeds");
        a.qualifiers.temporal = Some("at night".into());
        let mut b = rel("r2", "A", "B", "feeds");
        b.qualifiers.temporal = Some("at night".into());
        b.qualifiers.spatial = Some("in hall 2".into());
        let mut st = state(vec![a, b]);
        let m = RelationAction::MergeRelations {
            relation_ids: vec![RelationId("r1".into()), RelationId("r2".into())],
            inverse: false,
        };
        assert_eq!(apply_relation_action(&m, &mut st, None), Ok(Applied::Structural));
        let r = &st[&RelationId("r1".into())];
        assert_eq!(st.len(), 1);
        assert_eq!(r.qualifiers.spatial.as_deref(), Some("in hall 2"));
        assert_eq!(r.provenance_chunks.len(), 2);
        assert_eq!(r.evidence.len(), 2);
    }

    #[test]
    fn conflicting_merge_keeps_both_with_remarks() {
        let mut a = rel("r1", "A", "B", "feeds");
        a.qualifiers.temporal = Some("in 2019".into());
        let mut b = rel("r2", "A", "B", "feeds");
        b.qualifiers.temporal = Some("in 2021".into());
        let mut st = state(vec![a, b]);
        let allowed: BTreeSet<RelationId> = st.keys().cloned().collect();
        let mut t = Trace::default();
        let reply = json!([{"action": "merge_relations", "relation_ids": ["r1", "r2"]}]);
        assert_eq!(apply_relation_reply(&reply, &mut st, &allowed, 1, &mut t), 0);
        assert_eq!(st.len(), 2);
        assert_eq!(st[&RelationId("r1".into())].remarks, ["qualifier conflict with r2 on TemporalQualifier"]);
        assert_eq!(st[&RelationId("r2".into())].remarks, ["qualifier conflict with r1 on TemporalQualifier"]);
        assert_eq!(t.actions[0].status, ActionStatus::Rejected);
        assert!(t.actions[1..].iter().all(|a| a.origin == ActionOrigin::Pipeline && a.status == ActionStatus::Applied));
    }

    #[test]
    fn merge_across_pairs_rejected() {
        let mut st = state(vec![rel("r1", "A", "B", "x"), rel("r2", "A", "C", "x")]);
        let m = RelationAction::MergeRelations {
            relation_ids: vec![RelationId("r1".into()), RelationId("r2".into())],
            inverse: true,
        };
        assert!(apply_relation_action(&m, &mut st, None).is_err());
        let unknown = RelationAction::SetRelCls {
            relation_ids: vec![RelationId("r9".into())],
            rel_cls: "x".into(),
        };
        assert_eq!(apply_relation_action(&unknown, &mut st, None), Err("unknown relation r9".into()));
    }

    #[test]
    fn zero_runs_finalize_from_raw_labels() {
        let mut cfg = Config::default();
        cfg.relation_resolution.max_runs = 0;
        let out = run_relation_resolution(vec![rel("r1", "A", "B", "Drives Toward")], &[], &cfg, &Providers::stub()).unwrap();
        let r = &out.relations[0];
        assert_eq!(r.canonical_label.as_deref(), Some("drives_toward"));
        assert_eq!(r.rel_cls.as_deref(), Some("drives_toward"));
        assert_eq!(r.rel_cls_group.as_deref(), Some("ASSOCIATION"));
        assert_eq!(out.relation_classes.len(), 1);
        assert_eq!(out.relation_class_groups.len(), 1);
    }

    #[test]
    fn synonyms_share_a_canonical_label() {
        let mut cfg = Config::default();
        cfg.clustering.method = crate::neighborhood::ClusterMethod::Threshold { min_similarity: -1.0 };
        let raw = vec![rel("r1", "A", "B", "works at"), rel("r2", "C", "D", "employed by")];
        let out = run_relation_resolution(raw.clone(), &[], &cfg, &Providers::stub()).unwrap();
        assert_eq!(out.relations.len(), 2);
        assert!(out.relations.iter().all(|r| r.canonical_label.as_deref() == Some("works_at")));
        assert_eq!(replay_relation_actions(&raw, &out.trace.actions).unwrap(), out.relations);
    }

    #[test]
    fn majority_ties_pick_smallest() {
        assert_eq!(majority(&["b", "a", "b", "a"]), "a");
        assert_eq!(majority(&["b", "a", "b"]), "b");
    }
}
