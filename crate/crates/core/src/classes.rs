//! Entity-class induction: candidate recognition over class-oriented
//! neighborhoods, then consolidation into classes and class groups through
//! validated actions, finishing with a deterministic finalization pass.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{Config, Weights};
use crate::model::{
    ActionOrigin, ActionRecord, ActionStatus, ClassId, Entity, EntityClass, EntityClassGroup, EntityId, GroupId, Stage,
};
use crate::neighborhood::{
    build_representations, neighborhoods, plan_batches, Field, MultiFieldRepresentation, NeighborhoodError,
};
use crate::provider::prompts::{frame, parse_reply, CLASS_RECOGNITION, CLASS_RESOLUTION};
use crate::provider::{cosine, logged_chat, ChatProvider, ChatRequest, EmbeddingVector, Providers, StageTag};
use crate::text::normalize_key;
use crate::trace::{ActionEntry, Event, Trace};

const STAGE: &str = "classes";

fn numeric_suffix(id: &str, prefix: &str) -> Option<u64> {
    id.strip_prefix(prefix)?.parse().ok()
}

/// Mutable class hierarchy shared by recognition, resolution and replay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassState {
    pub classes: BTreeMap<ClassId, EntityClass>,
    pub groups: BTreeMap<GroupId, EntityClassGroup>,
    next_class: u64,
    next_group: u64,
}

impl ClassState {
    pub fn new(classes: Vec<EntityClass>, groups: Vec<EntityClassGroup>) -> Self {
        let next_class = classes
            .iter()
            .filter_map(|c| numeric_suffix(c.id.as_str(), "ec_"))
            .max()
            .map_or(1, |n| n + 1);
        let next_group = groups
            .iter()
            .filter_map(|g| numeric_suffix(g.id.as_str(), "ecg_"))
            .max()
            .map_or(1, |n| n + 1);
        ClassState {
            classes: classes.into_iter().map(|c| (c.id.clone(), c)).collect(),
            groups: groups.into_iter().map(|g| (g.id.clone(), g)).collect(),
            next_class,
            next_group,
        }
    }

    fn fresh_class_id(&mut self) -> ClassId {
        let id = ClassId(format!("ec_{:04}", self.next_class));
        self.next_class += 1;
        id
    }

    pub fn add_class(&mut self, label: &str, description: &str, members: BTreeSet<EntityId>) -> ClassId {
        let id = self.fresh_class_id();
        self.classes.insert(
            id.clone(),
            EntityClass {
                id: id.clone(),
                label: label.to_string(),
                description: description.to_string(),
                group_id: None,
                member_entities: members,
                remarks: Vec::new(),
            },
        );
        id
    }

    /// Group with this label (case-insensitive), created when absent.
    pub fn group_for_label(&mut self, label: &str, description: Option<&str>) -> GroupId {
        let key = normalize_key(label);
        if let Some(g) = self.groups.values_mut().find(|g| normalize_key(&g.label) == key) {
            if let Some(d) = description.filter(|d| !d.trim().is_empty()) {
                g.description = d.trim().to_string();
            }
            return g.id.clone();
        }
        let id = GroupId(format!("ecg_{:04}", self.next_group));
        self.next_group += 1;
        self.groups.insert(
            id.clone(),
            EntityClassGroup {
                id: id.clone(),
                label: label.trim().to_string(),
                description: description.unwrap_or("").trim().to_string(),
            },
        );
        id
    }

    pub fn classes_of(&self, entity: &EntityId) -> Vec<&ClassId> {
        self.classes
            .values()
            .filter(|c| c.member_entities.contains(entity))
            .map(|c| &c.id)
            .collect()
    }

    /// Drop empty classes and groups no class uses. Returns removed ids.
    pub fn collect_garbage(&mut self) -> Vec<String> {
        let mut removed = Vec::new();
        self.classes.retain(|id, c| {
            let keep = !c.member_entities.is_empty();
            if !keep {
                removed.push(id.to_string());
            }
            keep
        });
        let used: BTreeSet<GroupId> = self.classes.values().filter_map(|c| c.group_id.clone()).collect();
        self.groups.retain(|id, _| {
            let keep = used.contains(id);
            if !keep {
                removed.push(id.to_string());
            }
            keep
        });
        removed
    }

    pub fn into_parts(self) -> (Vec<EntityClass>, Vec<EntityClassGroup>) {
        (self.classes.into_values().collect(), self.groups.into_values().collect())
    }
}

/// Fields of an entity's class-oriented representation: what kind of thing
/// it is rather than which thing.
pub fn class_view_fields(e: &Entity, weights: &BTreeMap<String, f64>) -> Vec<Field> {
    let keys: BTreeSet<&str> = e.intrinsic.iter().map(|p| p.key.as_str()).collect();
    vec![
        Field::new("label", e.type_hint.clone().unwrap_or_default(), Weights::get(weights, "label")),
        Field::new("description", e.description.clone(), Weights::get(weights, "description")),
        Field::new("evidence", e.canonical_name.clone(), Weights::get(weights, "evidence")),
        Field::new("members", keys.into_iter().collect::<Vec<_>>().join(" "), Weights::get(weights, "members")),
    ]
}

fn with_fallback(id: &str, mut fields: Vec<Field>) -> (String, Vec<Field>) {
    if !fields.iter().any(|f| f.weight > 0.0 && !f.text.trim().is_empty()) {
        fields.push(Field::new("id", id, 1.0));
    }
    (id.to_string(), fields)
}

pub fn entity_class_views(
    entities: &[&Entity],
    config: &Config,
    providers: &Providers,
) -> Result<Vec<MultiFieldRepresentation>, NeighborhoodError> {
    let items = entities
        .iter()
        .map(|e| with_fallback(e.id.as_str(), class_view_fields(e, &config.weights.class)))
        .collect();
    build_representations(items, providers.embedder.as_ref(), config.embedding.batch_size)
}

fn class_fields(c: &EntityClass, entities: &BTreeMap<EntityId, Entity>, weights: &BTreeMap<String, f64>) -> Vec<Field> {
    let members: Vec<&Entity> = c.member_entities.iter().filter_map(|e| entities.get(e)).collect();
    let evidence: Vec<&str> = members
        .iter()
        .map(|e| e.description.as_str())
        .filter(|d| !d.is_empty())
        .take(5)
        .collect();
    let names: Vec<&str> = members.iter().map(|e| e.canonical_name.as_str()).take(20).collect();
    vec![
        Field::new("label", c.label.clone(), Weights::get(weights, "label")),
        Field::new("description", c.description.clone(), Weights::get(weights, "description")),
        Field::new("evidence", evidence.join(" "), Weights::get(weights, "evidence")),
        Field::new("members", names.join(", "), Weights::get(weights, "members")),
    ]
}

#[derive(Debug, Deserialize)]
struct RawCandidate {
    #[serde(default)]
    label: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    members: Vec<EntityId>,
}

fn entity_item(e: &Entity) -> Value {
    json!({"id": e.id, "name": e.canonical_name, "description": e.description, "type_hint": e.type_hint})
}

fn ask_candidates(batch: &[&Entity], chat: &dyn ChatProvider, budget: usize, trace: &mut Trace) -> Vec<RawCandidate> {
    let input = json!({ "entities": batch.iter().map(|e| entity_item(e)).collect::<Vec<_>>() });
    let label = batch.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(",");
    let (reply, record) = logged_chat(chat, ChatRequest::new(frame(CLASS_RECOGNITION, &input), budget, StageTag::ClassRecognition));
    trace.prompts.push(record);
    let reply = match reply {
        Ok(r) => r,
        Err(e) => {
            trace.event(Event::new(STAGE, "provider_error", label, e.to_string()));
            return Vec::new();
        }
    };
    match parse_reply(&reply)
        .and_then(|v| v.get("classes").cloned())
        .and_then(|v| serde_json::from_value(v).ok())
    {
        Some(c) => c,
        None => {
            trace.event(Event::new(STAGE, "parse_failure", label, "unparsable class list"));
            Vec::new()
        }
    }
}

/// Add a candidate, folding it into an existing candidate with the same
/// label (case-insensitive). Members outside `allowed` are dropped.
fn admit(state: &mut ClassState, cand: RawCandidate, allowed: &BTreeSet<EntityId>, trace: &mut Trace) -> BTreeSet<EntityId> {
    let label = cand.label.trim();
    let mut members = BTreeSet::new();
    for m in cand.members {
        if allowed.contains(&m) {
            members.insert(m);
        } else {
            trace.event(Event::new(STAGE, "member_dropped", m.as_str(), format!("not offered with class `{label}`")));
        }
    }
    if label.is_empty() || members.is_empty() {
        trace.event(Event::new(STAGE, "candidate_dropped", label, "empty label or no valid members"));
        return BTreeSet::new();
    }
    let key = normalize_key(label);
    match state.classes.values_mut().find(|c| normalize_key(&c.label) == key) {
        Some(c) => {
            c.member_entities.extend(members.iter().cloned());
            if c.description.is_empty() {
                c.description = cand.description.trim().to_string();
            }
        }
        None => {
            state.add_class(label, cand.description.trim(), members.clone());
        }
    }
    members
}

/// Candidate classes covering every entity. Clustering rounds propose
/// classes for still-unassigned entities; a single-entity pass (provider
/// first, then the entity's own type hint) closes any gap.
pub fn recognize_classes(
    entities: &[Entity],
    config: &Config,
    providers: &Providers,
) -> Result<(Vec<EntityClass>, Trace), NeighborhoodError> {
    let by_id: BTreeMap<&EntityId, &Entity> = entities.iter().map(|e| (&e.id, e)).collect();
    let mut state = ClassState::new(Vec::new(), Vec::new());
    let mut trace = Trace::default();
    let mut assigned: BTreeSet<EntityId> = BTreeSet::new();
    let budget = config.budgets.resolution;

    for round in 1..=config.class_recognition.rounds {
        let open: Vec<&Entity> = entities.iter().filter(|e| !assigned.contains(&e.id)).collect();
        if open.is_empty() {
            break;
        }
        let reps = entity_class_views(&open, config, providers)?;
        let batches = plan_batches(&neighborhoods(&reps, &config.clustering), config.clustering.batch_size);
        let replies: Vec<(Vec<RawCandidate>, Trace)> = batches
            .par_iter()
            .map(|ids| {
                let batch: Vec<&Entity> = ids.iter().map(|i| by_id[&EntityId(i.clone())]).collect();
                let mut t = Trace::default();
                (ask_candidates(&batch, providers.chat.as_ref(), budget, &mut t), t)
            })
            .collect();
        for (ids, (cands, t)) in batches.iter().zip(replies) {
            trace.extend(t);
            let allowed: BTreeSet<EntityId> = ids.iter().map(|i| EntityId(i.clone())).collect();
            for c in cands {
                assigned.extend(admit(&mut state, c, &allowed, &mut trace));
            }
        }
        log::info!("class recognition round {round}: {} of {} entities assigned", assigned.len(), entities.len());
    }

    for e in entities {
        if assigned.contains(&e.id) {
            continue;
        }
        let allowed = BTreeSet::from([e.id.clone()]);
        for c in ask_candidates(&[e], providers.chat.as_ref(), budget, &mut trace) {
            assigned.extend(admit(&mut state, c, &allowed, &mut trace));
        }
        if !assigned.contains(&e.id) {
            let label = e.type_hint.clone().unwrap_or_else(|| "Entity".to_string());
            trace.event(Event::new(STAGE, "fallback_class", e.id.as_str(), label.clone()));
            let cand = RawCandidate {
                description: String::new(),
                label,
                members: vec![e.id.clone()],
            };
            assigned.extend(admit(&mut state, cand, &allowed, &mut trace));
        }
    }
    Ok((state.into_parts().0, trace))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SplitPart {
    pub label: String,
    #[serde(default)]
    pub description: String,
    pub members: Vec<EntityId>,
    #[serde(default)]
    pub provisional_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ClassAction {
    MergeClasses {
        class_ids: Vec<String>,
        #[serde(default)]
        new_label: Option<String>,
        #[serde(default)]
        new_description: Option<String>,
        #[serde(default)]
        provisional_id: Option<String>,
    },
    SplitClass {
        class_id: String,
        parts: Vec<SplitPart>,
    },
    CreateClass {
        provisional_id: String,
        label: String,
        #[serde(default)]
        description: String,
        #[serde(default)]
        members: Vec<EntityId>,
    },
    ReassignEntities {
        entity_ids: Vec<EntityId>,
        to_class_id: String,
    },
    ModifyClass {
        class_id: String,
        #[serde(default)]
        new_label: Option<String>,
        #[serde(default)]
        new_description: Option<String>,
        #[serde(default)]
        new_group: Option<String>,
        #[serde(default)]
        new_group_description: Option<String>,
    },
}

/// Id resolution within one action array: provisional ids bound so far and
/// the classes the batch may touch (`None` means any).
#[derive(Debug, Default)]
pub struct ActionScope {
    provisional: BTreeMap<String, ClassId>,
    allowed: Option<BTreeSet<ClassId>>,
}

impl ActionScope {
    pub fn batch(classes: impl IntoIterator<Item = ClassId>) -> Self {
        ActionScope {
            provisional: BTreeMap::new(),
            allowed: Some(classes.into_iter().collect()),
        }
    }

    pub fn unrestricted() -> Self {
        ActionScope::default()
    }

    fn resolve(&self, raw: &str, state: &ClassState) -> Result<ClassId, String> {
        let id = self.provisional.get(raw).cloned().unwrap_or_else(|| ClassId(raw.to_string()));
        if self.allowed.as_ref().is_some_and(|a| !a.contains(&id)) {
            return Err(format!("class {raw} is outside the batch"));
        }
        if !state.classes.contains_key(&id) {
            return Err(format!("unknown class {raw}"));
        }
        Ok(id)
    }

    fn check_fresh(&self, pid: &str, state: &ClassState) -> Result<(), String> {
        if pid.trim().is_empty() {
            return Err("empty provisional id".into());
        }
        if self.provisional.contains_key(pid) || state.classes.contains_key(&ClassId(pid.to_string())) {
            return Err(format!("duplicate id {pid}"));
        }
        Ok(())
    }

    fn bind(&mut self, pid: Option<&str>, id: &ClassId) {
        if let Some(a) = self.allowed.as_mut() {
            a.insert(id.clone());
        }
        if let Some(p) = pid {
            self.provisional.insert(p.to_string(), id.clone());
        }
    }
}

fn text_of(s: &Option<String>) -> Option<&str> {
    s.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

fn check_entities(ids: &[EntityId], known: &BTreeSet<EntityId>) -> Result<(), String> {
    match ids.iter().find(|e| !known.contains(*e)) {
        Some(e) => Err(format!("unknown entity {e}")),
        None => Ok(()),
    }
}

/// Apply one class action. Returns whether the state changed; an error
/// leaves it untouched.
pub fn apply_class_action(
    action: &ClassAction,
    state: &mut ClassState,
    known: &BTreeSet<EntityId>,
    scope: &mut ActionScope,
) -> Result<bool, String> {
    match action {
        ClassAction::MergeClasses {
            class_ids,
            new_label,
            new_description,
            provisional_id,
        } => {
            let mut ids = BTreeSet::new();
            for raw in class_ids {
                ids.insert(scope.resolve(raw, state)?);
            }
            if ids.len() < 2 {
                return Err("merge needs at least two distinct classes".into());
            }
            if let Some(p) = provisional_id.as_deref() {
                scope.check_fresh(p, state)?;
            }
            let parts: Vec<EntityClass> = ids.iter().map(|id| state.classes.remove(id).unwrap()).collect();
            let mut merged = parts[0].clone();
            for p in &parts[1..] {
                merged.member_entities.extend(p.member_entities.iter().cloned());
                if merged.description.is_empty() {
                    merged.description = p.description.clone();
                }
                if merged.group_id.is_none() {
                    merged.group_id = p.group_id.clone();
                }
                for r in &p.remarks {
                    if !merged.remarks.contains(r) {
                        merged.remarks.push(r.clone());
                    }
                }
            }
            if let Some(l) = text_of(new_label) {
                merged.label = l.to_string();
            }
            if let Some(d) = text_of(new_description) {
                merged.description = d.to_string();
            }
            let id = merged.id.clone();
            state.classes.insert(id.clone(), merged);
            scope.bind(provisional_id.as_deref(), &id);
            Ok(true)
        }
        ClassAction::SplitClass { class_id, parts } => {
            let id = scope.resolve(class_id, state)?;
            if parts.len() < 2 {
                return Err("split needs at least two parts".into());
            }
            let original = &state.classes[&id];
            let mut seen = BTreeSet::new();
            let mut total = 0;
            for p in parts {
                if p.label.trim().is_empty() || p.members.is_empty() {
                    return Err("split part needs a label and members".into());
                }
                total += p.members.len();
                seen.extend(p.members.iter().cloned());
            }
            if total != seen.len() || seen != original.member_entities {
                return Err(format!("split parts do not partition class {class_id}"));
            }
            let mut fresh = BTreeSet::new();
            for pid in parts.iter().filter_map(|p| p.provisional_id.as_deref()) {
                scope.check_fresh(pid, state)?;
                if !fresh.insert(pid) {
                    return Err(format!("duplicate id {pid}"));
                }
            }
            let original = state.classes.remove(&id).unwrap();
            for p in parts {
                let new_id = state.add_class(p.label.trim(), p.description.trim(), p.members.iter().cloned().collect());
                let c = state.classes.get_mut(&new_id).unwrap();
                c.group_id = original.group_id.clone();
                c.remarks = original.remarks.clone();
                scope.bind(p.provisional_id.as_deref(), &new_id);
            }
            Ok(true)
        }
        ClassAction::CreateClass {
            provisional_id,
            label,
            description,
            members,
        } => {
            scope.check_fresh(provisional_id, state)?;
            if label.trim().is_empty() {
                return Err("class label is empty".into());
            }
            check_entities(members, known)?;
            let id = state.add_class(label.trim(), description.trim(), members.iter().cloned().collect());
            scope.bind(Some(provisional_id), &id);
            Ok(true)
        }
        ClassAction::ReassignEntities { entity_ids, to_class_id } => {
            let to = scope.resolve(to_class_id, state)?;
            if entity_ids.is_empty() {
                return Err("no entities to reassign".into());
            }
            check_entities(entity_ids, known)?;
            let mut changed = false;
            for c in state.classes.values_mut() {
                let inside = c.id == to;
                for e in entity_ids {
                    changed |= if inside {
                        c.member_entities.insert(e.clone())
                    } else {
                        c.member_entities.remove(e)
                    };
                }
            }
            Ok(changed)
        }
        ClassAction::ModifyClass {
            class_id,
            new_label,
            new_description,
            new_group,
            new_group_description,
        } => {
            let id = scope.resolve(class_id, state)?;
            let before = (state.classes[&id].clone(), state.groups.clone());
            let group = text_of(new_group).map(|g| state.group_for_label(g, text_of(new_group_description)));
            let c = state.classes.get_mut(&id).unwrap();
            if let Some(l) = text_of(new_label) {
                c.label = l.to_string();
            }
            if let Some(d) = text_of(new_description) {
                c.description = d.to_string();
            }
            if let Some(g) = group {
                c.group_id = Some(g);
            }
            Ok(before != (state.classes[&id].clone(), state.groups.clone()))
        }
    }
}

/// Apply one provider reply (action array) for a batch. Returns the number
/// of applied state-changing actions.
pub fn apply_class_reply(
    reply: &Value,
    state: &mut ClassState,
    known: &BTreeSet<EntityId>,
    batch_classes: &BTreeSet<ClassId>,
    round: u32,
    trace: &mut Trace,
) -> usize {
    let batch = trace.next_batch();
    let Some(items) = reply.as_array() else {
        trace.event(Event::new(STAGE, "malformed_actions", format!("batch {batch}"), "reply is not an array"));
        return 0;
    };
    let mut scope = ActionScope::batch(batch_classes.iter().cloned());
    let mut edits = 0;
    for item in items {
        let kind = item.get("action").and_then(Value::as_str).unwrap_or("unknown").to_string();
        let outcome = match serde_json::from_value::<ClassAction>(item.clone()) {
            Ok(a) => apply_class_action(&a, state, known, &mut scope).map(|changed| edits += changed as usize),
            Err(e) => Err(format!("invalid action: {e}")),
        };
        trace.record(
            Stage::EntClsRes,
            ActionEntry {
                round,
                batch,
                kind: &kind,
                payload: item.clone(),
                rationale: item.get("rationale").and_then(Value::as_str).unwrap_or("").to_string(),
                outcome,
                origin: ActionOrigin::Provider,
            },
        );
    }
    edits
}

fn class_input(batch: &[&EntityClass], state: &ClassState, entities: &BTreeMap<EntityId, Entity>) -> Value {
    let classes: Vec<Value> = batch
        .iter()
        .map(|c| {
            let members: Vec<Value> = c
                .member_entities
                .iter()
                .filter_map(|e| entities.get(e))
                .map(|e| json!({"id": e.id, "name": e.canonical_name, "type_hint": e.type_hint}))
                .collect();
            json!({
                "id": c.id,
                "label": c.label,
                "description": c.description,
                "group": c.group_id.as_ref().and_then(|g| state.groups.get(g)).map(|g| g.label.clone()),
                "members": members,
            })
        })
        .collect();
    json!({ "classes": classes })
}

fn propose(input: Value, chat: &dyn ChatProvider, budget: usize, label: String, trace: &mut Trace) -> Option<Value> {
    let (reply, record) = logged_chat(chat, ChatRequest::new(frame(CLASS_RESOLUTION, &input), budget, StageTag::ClassResolution));
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

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassResolution {
    pub classes: Vec<EntityClass>,
    pub groups: Vec<EntityClassGroup>,
    pub edits_per_run: Vec<usize>,
    pub trace: Trace,
}

fn centroid(members: &BTreeSet<EntityId>, views: &BTreeMap<&str, &EmbeddingVector>) -> Option<EmbeddingVector> {
    let vs: Vec<&EmbeddingVector> = members.iter().filter_map(|m| views.get(m.as_str()).copied()).collect();
    let dim = vs.first()?.dim();
    let mut sum = vec![0.0; dim];
    for v in &vs {
        for (s, x) in sum.iter_mut().zip(&v.0) {
            *s += x;
        }
    }
    Some(EmbeddingVector::normalized(sum))
}

fn log_pipeline(trace: &mut Trace, state: &mut ClassState, known: &BTreeSet<EntityId>, round: u32, payload: Value, rationale: &str) {
    let batch = trace.next_batch();
    let kind = payload["action"].as_str().unwrap_or("unknown").to_string();
    let outcome = serde_json::from_value::<ClassAction>(payload.clone())
        .map_err(|e| e.to_string())
        .and_then(|a| apply_class_action(&a, state, known, &mut ActionScope::unrestricted()).map(|_| ()));
    trace.record(
        Stage::EntClsRes,
        ActionEntry {
            round,
            batch,
            kind: &kind,
            payload,
            rationale: rationale.to_string(),
            outcome,
            origin: ActionOrigin::Pipeline,
        },
    );
}

/// Make the hierarchy total and single-valued: one class per entity (highest
/// centroid cosine, ties to the smallest class id), a class for any
/// uncovered entity, a group for every class. Steps are logged as pipeline
/// actions so replay reproduces them; garbage collection follows.
pub fn finalize_classes(
    state: &mut ClassState,
    entities: &[Entity],
    views: &[MultiFieldRepresentation],
    round: u32,
    trace: &mut Trace,
) {
    let known: BTreeSet<EntityId> = entities.iter().map(|e| e.id.clone()).collect();
    let view: BTreeMap<&str, &EmbeddingVector> = views.iter().map(|r| (r.item_id.as_str(), &r.combined)).collect();

    let multi: Vec<(EntityId, Vec<ClassId>)> = entities
        .iter()
        .filter_map(|e| {
            let cs: Vec<ClassId> = state.classes_of(&e.id).into_iter().cloned().collect();
            (cs.len() > 1).then(|| (e.id.clone(), cs))
        })
        .collect();
    if !multi.is_empty() {
        let centroids: BTreeMap<ClassId, Option<EmbeddingVector>> = state
            .classes
            .values()
            .map(|c| (c.id.clone(), centroid(&c.member_entities, &view)))
            .collect();
        for (e, cs) in multi {
            let mut best: Option<(f64, &ClassId)> = None;
            for c in &cs {
                let s = match (view.get(e.as_str()), &centroids[c]) {
                    (Some(v), Some(cv)) => cosine(v, cv),
                    _ => 0.0,
                };
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, c));
                }
            }
            let to = best.unwrap().1.clone();
            log_pipeline(
                trace,
                state,
                &known,
                round,
                json!({"action": "reassign_entities", "entity_ids": [e], "to_class_id": to}),
                "single class assignment",
            );
        }
    }

    let mut uncovered = 0;
    for e in entities {
        if state.classes_of(&e.id).is_empty() {
            uncovered += 1;
            let label = e.type_hint.clone().unwrap_or_else(|| "Entity".into());
            log_pipeline(
                trace,
                state,
                &known,
                round,
                json!({"action": "create_class", "provisional_id": format!("uncovered_{uncovered}"), "label": label, "description": "", "members": [e.id]}),
                "uncovered entity",
            );
        }
    }

    let orphans: Vec<(ClassId, String)> = state
        .classes
        .values()
        .filter(|c| c.group_id.is_none() && !c.member_entities.is_empty())
        .map(|c| (c.id.clone(), c.label.clone()))
        .collect();
    for (id, label) in orphans {
        log_pipeline(
            trace,
            state,
            &known,
            round,
            json!({"action": "modify_class", "class_id": id, "new_group": label}),
            "class without group",
        );
    }

    for id in state.collect_garbage() {
        trace.event(Event::new(STAGE, "garbage_collected", id, "empty or unused"));
    }
}

/// Multi-run consolidation until structural edits plateau, then
/// finalization.
pub fn run_class_resolution(
    candidates: Vec<EntityClass>,
    entities: &[Entity],
    config: &Config,
    providers: &Providers,
) -> Result<ClassResolution, NeighborhoodError> {
    let by_id: BTreeMap<EntityId, Entity> = entities.iter().map(|e| (e.id.clone(), e.clone())).collect();
    let known: BTreeSet<EntityId> = by_id.keys().cloned().collect();
    let mut state = ClassState::new(candidates, Vec::new());
    let mut trace = Trace::default();
    let mut edits_per_run = Vec::new();
    let cfg = config.class_resolution;
    let mut calm = 0;
    let mut run = 0;

    while run < cfg.max_runs && calm < cfg.patience {
        run += 1;
        let live: Vec<&EntityClass> = state.classes.values().filter(|c| !c.member_entities.is_empty()).collect();
        let items = live
            .iter()
            .map(|c| with_fallback(c.id.as_str(), class_fields(c, &by_id, &config.weights.class)))
            .collect();
        let reps = build_representations(items, providers.embedder.as_ref(), config.embedding.batch_size)?;
        let batches = plan_batches(&neighborhoods(&reps, &config.clustering), config.clustering.batch_size);
        let proposals: Vec<(Option<Value>, Trace)> = batches
            .par_iter()
            .map(|ids| {
                let batch: Vec<&EntityClass> = ids.iter().map(|i| &state.classes[&ClassId(i.clone())]).collect();
                let mut t = Trace::default();
                let reply = propose(
                    class_input(&batch, &state, &by_id),
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
            let allowed: BTreeSet<ClassId> = ids.iter().map(|i| ClassId(i.clone())).collect();
            match reply {
                Some(r) => edits += apply_class_reply(&r, &mut state, &known, &allowed, run, &mut trace),
                None => {
                    trace.next_batch();
                }
            }
        }
        edits_per_run.push(edits);
        calm = if edits <= cfg.edit_threshold { calm + 1 } else { 0 };
        log::info!("class resolution run {run}: {edits} edits, {} classes", state.classes.len());
    }

    let refs: Vec<&Entity> = entities.iter().collect();
    let views = entity_class_views(&refs, config, providers)?;
    finalize_classes(&mut state, entities, &views, run + 1, &mut trace);
    let (classes, groups) = state.into_parts();
    Ok(ClassResolution {
        classes,
        groups,
        edits_per_run,
        trace,
    })
}

/// Rebuild the resolved hierarchy from the candidates and the logged
/// actions. Provisional ids are scoped by the record's batch.
pub fn replay_class_actions(
    candidates: Vec<EntityClass>,
    entities: &[Entity],
    actions: &[ActionRecord],
) -> Result<(Vec<EntityClass>, Vec<EntityClassGroup>), String> {
    let known: BTreeSet<EntityId> = entities.iter().map(|e| e.id.clone()).collect();
    let mut state = ClassState::new(candidates, Vec::new());
    let mut scope = ActionScope::unrestricted();
    let mut current_batch = None;
    for a in actions
        .iter()
        .filter(|a| a.stage == Stage::EntClsRes && a.status == ActionStatus::Applied)
    {
        if current_batch != Some(a.batch) {
            scope = ActionScope::unrestricted();
            current_batch = Some(a.batch);
        }
        let action: ClassAction =
            serde_json::from_value(a.payload.clone()).map_err(|e| format!("action {}: {e}", a.sequence_number))?;
        apply_class_action(&action, &mut state, &known, &mut scope)
            .map_err(|e| format!("action {} no longer applies: {e}", a.sequence_number))?;
    }
    state.collect_garbage();
    Ok(state.into_parts())
}
