//! Stage prompt templates and reply parsing helpers.
//!
//! A prompt is a template followed by an `### INPUT` marker and the JSON
//! payload. Templates are plain constants so they can be swapped without
//! touching the stage code.

use serde_json::Value;

pub const INPUT_MARKER: &str = "\n\n### INPUT\n";

pub const ENTITY_RECOGNITION: &str = "\
You extract entity mentions from the FOCUS chunk of a document.
Context chunks precede the focus chunk and may only be used to disambiguate.
Never extract from context chunks.
For each mention return: name (verbatim surface form from the focus chunk),
description (one short sentence), type_hint (broad type or null), confidence
in [0,1], evidence (verbatim excerpts of the focus chunk), and intrinsic
(explicitly stated key/value properties: key, value, value_kind in
number|string|quantity|identifier|date|other, unit or null, evidence).
Reply with JSON only: {\"mentions\": [...]}";

pub const ENTITY_RESOLUTION: &str = "\
You resolve co-referent entities inside one neighborhood batch.
Allowed actions (JSON array of objects, nothing else):
  {\"action\":\"MergeEntities\",\"ids\":[...],\"canonical_name\":str|null,\"description\":str|null,\"type_hint\":str|null,\"rationale\":str}
  {\"action\":\"ModifyEntity\",\"id\":str,\"new_name\":str|null,\"new_description\":str|null,\"new_type_hint\":str|null,\"rationale\":str}
  {\"action\":\"KeepEntity\",\"id\":str,\"rationale\":str}
Only use ids present in the input. Merge only when the items denote the same
real-world object. Each rationale is one line.";

pub const CLASS_RECOGNITION: &str = "\
You propose candidate entity classes for the entities below.
Each class has a label, a one-sentence description and member ids taken from
the input. Reply with JSON only: {\"classes\": [{\"label\":..., \"description\":..., \"members\":[...]}]}";

pub const CLASS_RESOLUTION: &str = "\
You consolidate candidate entity classes into classes and class groups.
Allowed actions (JSON array of objects, nothing else):
  {\"action\":\"merge_classes\",\"class_ids\":[...],\"new_label\":str|null,\"new_description\":str|null,\"provisional_id\":str|null}
  {\"action\":\"split_class\",\"class_id\":str,\"parts\":[{\"label\":str,\"description\":str,\"members\":[...],\"provisional_id\":str|null}]}
  {\"action\":\"create_class\",\"provisional_id\":str,\"label\":str,\"description\":str,\"members\":[...]}
  {\"action\":\"reassign_entities\",\"entity_ids\":[...],\"to_class_id\":str}
  {\"action\":\"modify_class\",\"class_id\":str,\"new_label\":str|null,\"new_description\":str|null,\"new_group\":str|null,\"new_group_description\":str|null}
Provisional ids introduced earlier in the array may be referenced later in
the same array. Every action carries a one-line \"rationale\".";

pub const RELATION_RECOGNITION: &str = "\
You extract directed relations among the listed entities from the FOCUS chunk.
Use only entity ids from the list and only relations explicitly supported by
the focus chunk. For each relation return: subject_id, object_id, label
(verbatim predicate phrase), description, hint_type (one of IDENTITY,
COMPOSITION, CAUSALITY, TEMPORALITY, SPATIALITY, ROLE, PURPOSE, DEPENDENCY,
COUPLING, TRANSFORMATION, COMPARISON, INFORMATION, ASSOCIATION), qualifiers
(TemporalQualifier, SpatialQualifier, OperationalConstraint,
ConditionExpression, UncertaintyQualifier, CausalHint, LogicalMarker,
OtherQualifier; null when absent), confidence and evidence excerpts.
Reply with JSON only: {\"relations\": [...]}";

pub const RELATION_RESOLUTION: &str = "\
You canonicalize relation instances and induce the relation schema.
Allowed actions (JSON array of objects, nothing else):
  {\"action\":\"set_canonical_rel\",\"relation_ids\":[...],\"canonical_label\":str,\"canonical_description\":str|null}
  {\"action\":\"set_rel_cls\",\"relation_ids\":[...],\"rel_cls\":str}
  {\"action\":\"set_rel_cls_group\",\"relation_ids\":[...],\"rel_cls_group\":str,\"hint_type\":str|null}
  {\"action\":\"modify_rel_schema\",\"relation_ids\":[...],\"canonical_label\":str|null,\"canonical_description\":str|null,\"rel_cls\":str|null,\"rel_cls_group\":str|null,\"hint_type\":str|null}
  {\"action\":\"add_rel_remark\",\"relation_ids\":[...],\"remark\":str}
  {\"action\":\"merge_relations\",\"relation_ids\":[keep, drop],\"inverse\":bool}
Merge only two instances that connect the same entity pair and say the same
thing; set inverse=true when the second is stated in the opposite direction.
Never delete instances otherwise. Every action carries a one-line \"rationale\".";

pub const RETENTION_JUDGE: &str = "\
Decide whether the statement is supported using ONLY the triples given.
Do not use outside knowledge and do not infer missing edges.
Reply with JSON only: {\"supported\": true|false}";

pub const SCHEMA_VERIFY: &str = "\
Compare a reference ontology element (anchor) with an induced schema element
(candidate). Label the candidate as Equivalent, Narrower (more specific than
the anchor), Broader, or Unrelated, with a confidence in [0,1].
Reply with JSON only: {\"label\": ..., \"confidence\": ..., \"rationale\": ...}";

/// Render a prompt from a template and its JSON input.
pub fn frame(template: &str, input: &Value) -> String {
    format!("{template}{INPUT_MARKER}{input}")
}

/// JSON input embedded in a framed prompt.
pub fn input_of(prompt: &str) -> Option<Value> {
    let (_, json) = prompt.split_once(INPUT_MARKER)?;
    serde_json::from_str(json).ok()
}

/// Parse a JSON reply, tolerating code fences and leading prose.
pub fn parse_reply(reply: &str) -> Option<Value> {
    let trimmed = reply.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    let body = trimmed
        .trim_start_matches("```json")
        .trim_start_matches("```")
        .trim_end_matches("```")
        .trim();
    if let Ok(v) = serde_json::from_str(body) {
        return Some(v);
    }
    let start = body.find(['[', '{'])?;
    let end = body.rfind([']', '}'])?;
    if end <= start {
        return None;
    }
    serde_json::from_str(&body[start..=end]).ok()
}
