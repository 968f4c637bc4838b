//! Entity recognition (chunk-local mentions) and entity resolution through
//! validated `MergeEntities` / `ModifyEntity` / `KeepEntity` actions.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{Config, Weights};
use crate::model::{
    ActionOrigin, ActionRecord, ActionStatus, Chunk, ChunkId, Entity, EntityId, IntrinsicProperty, Mention, MentionId,
    Span, Stage, ValueKind,
};
use crate::neighborhood::{build_representations, neighborhoods, plan_batches, Field, MultiFieldRepresentation};
use crate::provider::prompts::{frame, parse_reply, ENTITY_RECOGNITION, ENTITY_RESOLUTION};
use crate::provider::{logged_chat, ChatProvider, ChatRequest, Embedder, Providers, StageTag};
use crate::trace::{ActionEntry, Event, Trace};

const STAGE: &str = "entities";

pub fn mention_id(chunk: &ChunkId, k: usize) -> MentionId {
    let base = chunk.as_str().strip_prefix("c_").unwrap_or(chunk.as_str());
    MentionId(format!("m_{base}_{k:02}"))
}

pub fn entity_id_for(mention: &MentionId) -> EntityId {
    let base = mention.as_str().strip_prefix("m_").unwrap_or(mention.as_str());
    EntityId(format!("e_{base}"))
}

#[derive(Debug, Deserialize)]
struct RawIntrinsic {
    #[serde(default)]
    key: String,
    #[serde(default)]
    value: Value,
    #[serde(default)]
    value_kind: Option<ValueKind>,
    #[serde(default)]
    unit: Option<String>,
    #[serde(default)]
    evidence: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawMention {
    #[serde(default)]
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    type_hint: Option<String>,
    #[serde(default)]
    confidence: Option<f64>,
    #[serde(default)]
    evidence: Vec<String>,
    #[serde(default)]
    intrinsic: Vec<RawIntrinsic>,
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Recognize mentions in `chunk`. Context chunks are shown to the provider
/// but every accepted span and excerpt must come from the focus chunk.
pub fn recognize_entities(
    chunk: &Chunk,
    context: &[&Chunk],
    chat: &dyn ChatProvider,
    budget: usize,
    trace: &mut Trace,
) -> Vec<Mention> {
    let input = json!({
        "focus": {"id": chunk.id, "text": chunk.text},
        "context": context.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(),
    });
    let req = ChatRequest::new(frame(ENTITY_RECOGNITION, &input), budget, StageTag::EntityRecognition);
    let (reply, record) = logged_chat(chat, req);
    trace.prompts.push(record);
    let reply = match reply {
        Ok(r) => r,
        Err(e) => {
            trace.event(Event::new(STAGE, "provider_error", chunk.id.as_str(), e.to_string()));
            return Vec::new();
        }
    };
    let raw: Vec<RawMention> = match parse_reply(&reply)
        .and_then(|v| v.get("mentions").cloned())
        .and_then(|m| serde_json::from_value(m).ok())
    {
        Some(m) => m,
        None => {
            trace.event(Event::new(STAGE, "parse_failure", chunk.id.as_str(), "unparsable mention list"));
            return Vec::new();
        }
    };

    let mut out = Vec::new();
    for m in raw {
        let name = m.name.trim().to_string();
        let Some(start) = (!name.is_empty()).then(|| chunk.text.find(&name)).flatten() else {
            trace.event(Event::new(STAGE, "mention_dropped", chunk.id.as_str(), format!("name `{name}` not in chunk")));
            continue;
        };
        if let Some(bad) = m.evidence.iter().find(|e| !chunk.text.contains(e.as_str())) {
            trace.event(Event::new(
                STAGE,
                "mention_dropped",
                chunk.id.as_str(),
                format!("evidence for `{name}` not in chunk: `{bad}`"),
            ));
            continue;
        }
        let intrinsic = m
            .intrinsic
            .into_iter()
            .filter(|p| {
                let ok = !p.key.trim().is_empty() && p.evidence.iter().all(|e| chunk.text.contains(e.as_str()));
                if !ok {
                    trace.event(Event::new(STAGE, "property_dropped", chunk.id.as_str(), format!("property `{}` of `{name}`", p.key)));
                }
                ok
            })
            .map(|p| IntrinsicProperty {
                key: p.key.trim().to_string(),
                value: value_text(&p.value),
                value_kind: p.value_kind.unwrap_or_default(),
                unit: p.unit.filter(|u| !u.is_empty()),
                evidence: p.evidence,
            })
            .collect();
        out.push(Mention {
            id: mention_id(&chunk.id, out.len()),
            chunk_id: chunk.id.clone(),
            span: Span {
                start,
                end: start + name.len(),
            },
            description: m.description.trim().to_string(),
            type_hint: m.type_hint.filter(|t| !t.trim().is_empty()),
            confidence: m.confidence.unwrap_or(1.0).clamp(0.0, 1.0),
            evidence: m.evidence,
            intrinsic_candidates: intrinsic,
            name,
        });
    }
    out
}

/// Recognition over a corpus. Each chunk sees up to `context_window`
/// preceding chunks of its own document. Chunks run in parallel; output
/// order follows the input.
pub fn recognize_all(chunks: &[Chunk], config: &Config, providers: &Providers) -> (Vec<Mention>, Trace) {
    let window = config.ingest.context_window;
    let results: Vec<(Vec<Mention>, Trace)> = chunks
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let context: Vec<&Chunk> = chunks[..i]
                .iter()
                .rev()
                .take_while(|p| p.doc_id == c.doc_id)
                .take(window)
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect();
            let mut trace = Trace::default();
            let ms = recognize_entities(c, &context, providers.chat.as_ref(), config.budgets.recognition, &mut trace);
            (ms, trace)
        })
        .collect();
    let mut trace = Trace::default();
    let mut mentions = Vec::new();
    for (ms, t) in results {
        mentions.extend(ms);
        trace.extend(t);
    }
    (mentions, trace)
}

/// One entity per mention: the starting point of resolution.
pub fn initial_entities(mentions: &[Mention]) -> BTreeMap<EntityId, Entity> {
    mentions
        .iter()
        .map(|m| {
            let id = entity_id_for(&m.id);
            (
                id.clone(),
                Entity {
                    id,
                    canonical_name: m.name.clone(),
                    description: m.description.clone(),
                    type_hint: m.type_hint.clone(),
                    intrinsic: m.intrinsic_candidates.clone(),
                    member_mentions: BTreeSet::from([m.id.clone()]),
                    confidence: m.confidence,
                    provenance_chunks: BTreeSet::from([m.chunk_id.clone()]),
                    class_id: None,
                    remarks: Vec::new(),
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "action")]
pub enum EntityAction {
    MergeEntities {
        ids: Vec<EntityId>,
        #[serde(default)]
        canonical_name: Option<String>,
        #[serde(default)]
        description: Option<String>,
        #[serde(default)]
        type_hint: Option<String>,
    },
    ModifyEntity {
        id: EntityId,
        #[serde(default)]
        new_name: Option<String>,
        #[serde(default)]
        new_description: Option<String>,
        #[serde(default)]
        new_type_hint: Option<String>,
    },
    KeepEntity {
        id: EntityId,
    },
}

impl EntityAction {
    pub fn kind(&self) -> &'static str {
        match self {
            EntityAction::MergeEntities { .. } => "MergeEntities",
            EntityAction::ModifyEntity { .. } => "ModifyEntity",
            EntityAction::KeepEntity { .. } => "KeepEntity",
        }
    }
}

fn non_empty(s: &Option<String>) -> Option<&str> {
    s.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

fn check_id(
    id: &EntityId,
    state: &BTreeMap<EntityId, Entity>,
    allowed: Option<&BTreeSet<EntityId>>,
) -> Result<(), String> {
    if allowed.is_some_and(|a| !a.contains(id)) {
        return Err(format!("id {id} is outside the batch"));
    }
    if !state.contains_key(id) {
        return Err(format!("stale id {id}"));
    }
    Ok(())
}

fn push_unique(v: &mut Vec<String>, s: String) {
    if !v.contains(&s) {
        v.push(s);
    }
}

/// Union of intrinsic properties. Same key with different values keeps both
/// and records a conflict remark.
fn reconcile_intrinsic(props: Vec<IntrinsicProperty>, remarks: &mut Vec<String>) -> Vec<IntrinsicProperty> {
    let mut out: Vec<IntrinsicProperty> = Vec::new();
    for p in props {
        match out.iter_mut().find(|q| q.key == p.key && q.value == p.value && q.unit == p.unit) {
            Some(q) => {
                for e in p.evidence {
                    push_unique(&mut q.evidence, e);
                }
            }
            None => out.push(p),
        }
    }
    let mut by_key: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for p in &out {
        let shown = match &p.unit {
            Some(u) => format!("{} {u}", p.value),
            None => p.value.clone(),
        };
        by_key.entry(p.key.as_str()).or_default().push(shown);
    }
    for (k, vals) in by_key.into_iter().filter(|(_, v)| v.len() > 1) {
        push_unique(remarks, format!("intrinsic conflict on `{k}`: {}", vals.join(" | ")));
    }
    out
}

/// Apply one action. Returns whether the state changed; errors leave the
/// state untouched. `allowed` restricts ids to the proposing batch.
pub fn apply_entity_action(
    action: &EntityAction,
    state: &mut BTreeMap<EntityId, Entity>,
    mentions: &BTreeMap<MentionId, Mention>,
    allowed: Option<&BTreeSet<EntityId>>,
) -> Result<bool, String> {
    match action {
        EntityAction::MergeEntities {
            ids,
            canonical_name,
            description,
            type_hint,
        } => {
            let ids: BTreeSet<&EntityId> = ids.iter().collect();
            if ids.len() < 2 {
                return Err("merge needs at least two distinct ids".into());
            }
            for id in &ids {
                check_id(id, state, allowed)?;
            }
            let parts: Vec<Entity> = ids.iter().map(|id| state.remove(*id).unwrap()).collect();
            let target = parts[0].id.clone();
            let members: BTreeSet<MentionId> = parts.iter().flat_map(|e| e.member_mentions.iter().cloned()).collect();
            let name = non_empty(canonical_name).map(str::to_string).unwrap_or_else(|| {
                members
                    .iter()
                    .filter_map(|m| mentions.get(m).map(|m| m.name.clone()))
                    .min()
                    .unwrap_or_else(|| parts[0].canonical_name.clone())
            });
            let desc = non_empty(description)
                .map(str::to_string)
                .or_else(|| parts.iter().map(|e| e.description.clone()).find(|d| !d.is_empty()))
                .unwrap_or_default();
            let ty = non_empty(type_hint)
                .map(str::to_string)
                .or_else(|| parts.iter().find_map(|e| e.type_hint.clone()));
            let mut remarks = Vec::new();
            for e in &parts {
                for r in &e.remarks {
                    push_unique(&mut remarks, r.clone());
                }
            }
            let intrinsic = reconcile_intrinsic(parts.iter().flat_map(|e| e.intrinsic.clone()).collect(), &mut remarks);
            let merged = Entity {
                id: target.clone(),
                canonical_name: name,
                description: desc,
                type_hint: ty,
                intrinsic,
                member_mentions: members,
                confidence: parts.iter().map(|e| e.confidence).fold(0.0, f64::max),
                provenance_chunks: parts.iter().flat_map(|e| e.provenance_chunks.iter().cloned()).collect(),
                class_id: None,
                remarks,
            };
            state.insert(target, merged);
            Ok(true)
        }
        EntityAction::ModifyEntity {
            id,
            new_name,
            new_description,
            new_type_hint,
        } => {
            check_id(id, state, allowed)?;
            let e = state.get_mut(id).unwrap();
            let before = e.clone();
            if let Some(n) = non_empty(new_name) {
                e.canonical_name = n.to_string();
            }
            if let Some(d) = non_empty(new_description) {
                e.description = d.to_string();
            }
            if let Some(t) = non_empty(new_type_hint) {
                e.type_hint = Some(t.to_string());
            }
            Ok(*e != before)
        }
        EntityAction::KeepEntity { id } => {
            check_id(id, state, allowed)?;
            Ok(false)
        }
    }
}

/// Apply a provider reply (a JSON array of actions) for one batch and log
/// every action. Returns the number of applied merges.
#[allow(clippy::too_many_arguments)]
pub fn apply_entity_reply(
    reply: &Value,
    state: &mut BTreeMap<EntityId, Entity>,
    mentions: &BTreeMap<MentionId, Mention>,
    batch_ids: &BTreeSet<EntityId>,
    round: u32,
    trace: &mut Trace,
) -> usize {
    let batch = trace.next_batch();
    let Some(items) = reply.as_array() else {
        trace.event(Event::new(STAGE, "malformed_actions", format!("batch {batch}"), "reply is not an array"));
        return 0;
    };
    let mut merges = 0;
    for item in items {
        let rationale = item.get("rationale").and_then(Value::as_str).unwrap_or("").to_string();
        let kind = item.get("action").and_then(Value::as_str).unwrap_or("unknown").to_string();
        let outcome = match serde_json::from_value::<EntityAction>(item.clone()) {
            Ok(action) => apply_entity_action(&action, state, mentions, Some(batch_ids)).map(|_| {
                if matches!(action, EntityAction::MergeEntities { .. }) {
                    merges += 1;
                }
            }),
            Err(e) => Err(format!("invalid action: {e}")),
        };
        trace.record(
            Stage::EntRes,
            ActionEntry {
                round,
                batch,
                kind: &kind,
                payload: item.clone(),
                rationale,
                outcome,
                origin: ActionOrigin::Provider,
            },
        );
    }
    merges
}

fn evidence_text(e: &Entity, mentions: &BTreeMap<MentionId, Mention>) -> String {
    let mut ev: Vec<&str> = Vec::new();
    for m in e.member_mentions.iter().filter_map(|m| mentions.get(m)) {
        for x in &m.evidence {
            if !ev.contains(&x.as_str()) {
                ev.push(x);
            }
        }
    }
    ev.into_iter().take(5).collect::<Vec<_>>().join(" ")
}

/// Entity-layer multi-field representation inputs.
pub fn entity_fields(e: &Entity, mentions: &BTreeMap<MentionId, Mention>, weights: &BTreeMap<String, f64>) -> Vec<Field> {
    let intrinsic = e
        .intrinsic
        .iter()
        .map(|p| format!("{} {}", p.key, p.value))
        .collect::<Vec<_>>()
        .join("; ");
    vec![
        Field::new("name", e.canonical_name.clone(), Weights::get(weights, "name")),
        Field::new("description", e.description.clone(), Weights::get(weights, "description")),
        Field::new("type_hint", e.type_hint.clone().unwrap_or_default(), Weights::get(weights, "type_hint")),
        Field::new("intrinsic", intrinsic, Weights::get(weights, "intrinsic")),
        Field::new("evidence", evidence_text(e, mentions), Weights::get(weights, "evidence")),
    ]
}

pub fn entity_representations(
    entities: &[&Entity],
    mentions: &BTreeMap<MentionId, Mention>,
    config: &Config,
    embedder: &dyn Embedder,
) -> Result<Vec<MultiFieldRepresentation>, crate::neighborhood::NeighborhoodError> {
    let items = entities
        .iter()
        .map(|e| {
            let mut fields = entity_fields(e, mentions, &config.weights.entity);
            if !fields.iter().any(|f| f.weight > 0.0 && !f.text.trim().is_empty()) {
                fields.push(Field::new("id", e.id.as_str(), 1.0));
            }
            (e.id.as_str().to_string(), fields)
        })
        .collect();
    build_representations(items, embedder, config.embedding.batch_size)
}

/// Prompt input for one resolution batch.
pub fn resolution_input(batch: &[&Entity], mentions: &BTreeMap<MentionId, Mention>) -> Value {
    let items: Vec<Value> = batch
        .iter()
        .map(|e| {
            let aliases: BTreeSet<&str> = e
                .member_mentions
                .iter()
                .filter_map(|m| mentions.get(m))
                .map(|m| m.name.as_str())
                .filter(|n| *n != e.canonical_name)
                .collect();
            json!({
                "id": e.id,
                "name": e.canonical_name,
                "aliases": aliases,
                "description": e.description,
                "type_hint": e.type_hint,
            })
        })
        .collect();
    json!({ "items": items })
}

/// Ask the provider for actions on one batch. `None` when the call failed
/// or the reply is not JSON (logged).
pub fn propose_entity_actions(
    batch: &[&Entity],
    mentions: &BTreeMap<MentionId, Mention>,
    chat: &dyn ChatProvider,
    budget: usize,
    trace: &mut Trace,
) -> Option<Value> {
    let req = ChatRequest::new(
        frame(ENTITY_RESOLUTION, &resolution_input(batch, mentions)),
        budget,
        StageTag::EntityResolution,
    );
    let (reply, record) = logged_chat(chat, req);
    trace.prompts.push(record);
    match reply {
        Ok(r) => {
            let parsed = parse_reply(&r);
            if parsed.is_none() {
                trace.event(Event::new(STAGE, "malformed_actions", batch_label(batch), "reply is not JSON"));
            }
            parsed
        }
        Err(e) => {
            trace.event(Event::new(STAGE, "provider_error", batch_label(batch), e.to_string()));
            None
        }
    }
}

fn batch_label(batch: &[&Entity]) -> String {
    batch.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityResolution {
    pub entities: Vec<Entity>,
    pub merges_per_round: Vec<usize>,
    pub trace: Trace,
}

/// Iterative resolution: represent, cluster, batch, propose, apply, repeat
/// until a round applies at most `merge_threshold` merges or `max_rounds`
/// is reached.
pub fn run_entity_resolution(
    mentions: &[Mention],
    config: &Config,
    providers: &Providers,
) -> Result<EntityResolution, crate::neighborhood::NeighborhoodError> {
    let by_id: BTreeMap<MentionId, Mention> = mentions.iter().map(|m| (m.id.clone(), m.clone())).collect();
    let mut state = initial_entities(mentions);
    let mut trace = Trace::default();
    let mut merges_per_round = Vec::new();
    let cfg = &config.entity_resolution;

    for round in 1..=cfg.max_rounds {
        if state.len() < 2 {
            break;
        }
        let current: Vec<&Entity> = state.values().collect();
        let reps = entity_representations(&current, &by_id, config, providers.embedder.as_ref())?;
        let hoods = neighborhoods(&reps, &config.clustering);
        let batches = plan_batches(&hoods, config.clustering.batch_size);
        let proposals: Vec<(Option<Value>, Trace)> = batches
            .par_iter()
            .map(|ids| {
                let members: Vec<&Entity> = ids.iter().map(|id| &state[&EntityId(id.clone())]).collect();
                let mut t = Trace::default();
                let reply = propose_entity_actions(&members, &by_id, providers.chat.as_ref(), config.budgets.resolution, &mut t);
                (reply, t)
            })
            .collect();
        let mut merges = 0;
        for (ids, (reply, t)) in batches.iter().zip(proposals) {
            trace.extend(t);
            let allowed: BTreeSet<EntityId> = ids.iter().map(|i| EntityId(i.clone())).collect();
            match reply {
                Some(reply) => merges += apply_entity_reply(&reply, &mut state, &by_id, &allowed, round, &mut trace),
                None => {
                    trace.next_batch();
                }
            }
        }
        merges_per_round.push(merges);
        log::info!("entity resolution round {round}: {merges} merges, {} entities", state.len());
        if merges <= cfg.merge_threshold {
            break;
        }
    }
    Ok(EntityResolution {
        entities: state.into_values().collect(),
        merges_per_round,
        trace,
    })
}

/// Rebuild resolved entities from the mentions and the logged actions.
/// Only applied actions are replayed; each must apply again.
pub fn replay_entity_actions(mentions: &[Mention], actions: &[ActionRecord]) -> Result<Vec<Entity>, String> {
    let by_id: BTreeMap<MentionId, Mention> = mentions.iter().map(|m| (m.id.clone(), m.clone())).collect();
    let mut state = initial_entities(mentions);
    for a in actions
        .iter()
        .filter(|a| a.stage == Stage::EntRes && a.status == ActionStatus::Applied)
    {
        let action: EntityAction =
            serde_json::from_value(a.payload.clone()).map_err(|e| format!("action {}: {e}", a.sequence_number))?;
        apply_entity_action(&action, &mut state, &by_id, None)
            .map_err(|e| format!("action {} no longer applies: {e}", a.sequence_number))?;
    }
    Ok(state.into_values().collect())
}

/// `ResolvedEnt`: mention id to entity id.
pub fn resolved_map(entities: &[Entity]) -> BTreeMap<MentionId, EntityId> {
    entities
        .iter()
        .flat_map(|e| e.member_mentions.iter().map(move |m| (m.clone(), e.id.clone())))
        .collect()
}

/// `E(c)`: entities with at least one mention in `chunk`.
pub fn entities_in_chunk<'a>(
    chunk: &ChunkId,
    mentions: &[Mention],
    resolved: &BTreeMap<MentionId, EntityId>,
    entities: &'a BTreeMap<EntityId, Entity>,
) -> Vec<&'a Entity> {
    let ids: BTreeSet<&EntityId> = mentions
        .iter()
        .filter(|m| &m.chunk_id == chunk)
        .filter_map(|m| resolved.get(&m.id))
        .collect();
    ids.into_iter().filter_map(|id| entities.get(id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Provenance;
    use crate::provider::{CannedChat, StubChat};

    fn chunk(text: &str) -> Chunk {
        Chunk {
            id: ChunkId("c_d_0000".into()),
            doc_id: "d".into(),
            ordinal: 0,
            text: text.into(),
            token_count: text.split_whitespace().count(),
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn recognizes_alice_and_acme_in_chunk() {
        let c = chunk("Alice works at Acme.");
        let mut t = Trace::default();
        let ms = recognize_entities(&c, &[], &StubChat::default(), 8000, &mut t);
        let names: Vec<&str> = ms.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["Alice", "Acme"]);
        for m in &ms {
            assert_eq!(&c.text[m.span.start..m.span.end], m.name);
            assert!(m.evidence.iter().all(|e| c.text.contains(e.as_str())));
        }
        assert_eq!(t.prompts.len(), 1);
    }

    #[test]
    fn foreign_evidence_drops_mention() {
        let c = chunk("Alice works at Acme.");
        let input = json!({"focus": {"id": c.id, "text": c.text}, "context": Vec::<String>::new()});
        let prompt = frame(ENTITY_RECOGNITION, &input);
        let reply = r#"{"mentions":[{"name":"Alice","evidence":["Alice lives in Paris."]},{"name":"Acme","evidence":["Acme"]}]}"#;
        let chat = CannedChat::new().with_reply(&prompt, reply);
        let mut t = Trace::default();
        let ms = recognize_entities(&c, &[], &chat, 8000, &mut t);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].name, "Acme");
        assert_eq!(ms[0].confidence, 1.0);
        assert!(t.events.iter().any(|e| e.kind == "mention_dropped"));
    }

    fn mention(id: &str, chunk: &str, name: &str) -> Mention {
        Mention {
            id: MentionId(id.into()),
            chunk_id: ChunkId(chunk.into()),
            span: Span { start: 0, end: name.len() },
            name: name.into(),
            description: String::new(),
            type_hint: None,
            confidence: 0.5,
            evidence: vec![],
            intrinsic_candidates: vec![],
        }
    }

    fn state_of(ms: &[Mention]) -> (BTreeMap<EntityId, Entity>, BTreeMap<MentionId, Mention>) {
        (initial_entities(ms), ms.iter().map(|m| (m.id.clone(), m.clone())).collect())
    }

    #[test]
    fn merge_unions_mentions_and_provenance() {
        let ms = [mention("m_1", "c_1", "Pump"), mention("m_2", "c_2", "pump")];
        let (mut st, by_id) = state_of(&ms);
        let a = EntityAction::MergeEntities {
            ids: vec![EntityId("e_1".into()), EntityId("e_2".into())],
            canonical_name: None,
            description: None,
            type_hint: None,
        };
        assert_eq!(apply_entity_action(&a, &mut st, &by_id, None), Ok(true));
        assert_eq!(st.len(), 1);
        let e = &st[&EntityId("e_1".into())];
        assert_eq!(e.member_mentions.len(), 2);
        assert_eq!(e.provenance_chunks.len(), 2);
        assert_eq!(e.canonical_name, "Pump");
    }

    #[test]
    fn modify_only_touches_non_null_fields() {
        let ms = [mention("m_1", "c_1", "P-101")];
        let (mut st, by_id) = state_of(&ms);
        let a: EntityAction = serde_json::from_value(json!({
            "action": "ModifyEntity", "id": "e_1", "new_name": null, "new_description": "pump controller"
        }))
        .unwrap();
        apply_entity_action(&a, &mut st, &by_id, None).unwrap();
        let e = &st[&EntityId("e_1".into())];
        assert_eq!(e.canonical_name, "P-101");
        assert_eq!(e.description, "pump controller");
    }

    #[test]
    fn shared_id_second_merge_is_stale() {
        let ms = [mention("m_1", "c", "A"), mention("m_2", "c", "B"), mention("m_3", "c", "C")];
        let (mut st, by_id) = state_of(&ms);
        let allowed: BTreeSet<EntityId> = st.keys().cloned().collect();
        let reply = json!([
            {"action": "MergeEntities", "ids": ["e_2", "e_3"]},
            {"action": "MergeEntities", "ids": ["e_1", "e_3"]},
            {"action": "MergeEntities", "ids": ["e_1", "e_9"]},
        ]);
        let mut t = Trace::default();
        let merges = apply_entity_reply(&reply, &mut st, &by_id, &allowed, 1, &mut t);
        assert_eq!(merges, 1);
        let statuses: Vec<_> = t.actions.iter().map(|a| (a.status, a.rejection_reason.clone())).collect();
        assert_eq!(statuses[0], (ActionStatus::Applied, None));
        assert_eq!(statuses[1], (ActionStatus::Rejected, Some("stale id e_3".into())));
        assert_eq!(statuses[2], (ActionStatus::Rejected, Some("id e_9 is outside the batch".into())));
        assert!(t.actions.windows(2).all(|w| w[0].sequence_number < w[1].sequence_number));
    }

    #[test]
    fn intrinsic_conflicts_keep_both_values() {
        let mut a = mention("m_1", "c", "Pump");
        a.intrinsic_candidates = vec![IntrinsicProperty {
            key: "capacity".into(),
            value: "120".into(),
            value_kind: ValueKind::Quantity,
            unit: Some("kW".into()),
            evidence: vec![],
        }];
        let mut b = mention("m_2", "c", "Pump");
        b.intrinsic_candidates = vec![IntrinsicProperty {
            value: "150".into(),
            ..a.intrinsic_candidates[0].clone()
        }];
        let (mut st, by_id) = state_of(&[a, b]);
        let m = EntityAction::MergeEntities {
            ids: vec![EntityId("e_1".into()), EntityId("e_2".into())],
            canonical_name: None,
            description: None,
            type_hint: None,
        };
        apply_entity_action(&m, &mut st, &by_id, None).unwrap();
        let e = &st[&EntityId("e_1".into())];
        assert_eq!(e.intrinsic.len(), 2);
        assert_eq!(e.remarks, ["intrinsic conflict on `capacity`: 120 kW | 150 kW"]);
    }
}
