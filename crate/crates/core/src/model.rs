//! Shared data model: chunks, mentions, entities, relation instances with
//! qualifiers, the two-level schema hierarchies, the assembled graph and the
//! action log records.
//!
//! Every type is a plain value object. Stages own their state and produce new
//! values; nothing here mutates shared state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

id_type!(
    /// Chunk identifier, `c_<doc>_<ordinal>`.
    ChunkId
);
id_type!(
    /// Mention identifier, `m_<doc>_<chunk ordinal>_<k>`.
    MentionId
);
id_type!(
    /// Resolved entity identifier, `e_...`.
    EntityId
);
id_type!(
    /// Relation instance identifier, `r_...`.
    RelationId
);
id_type!(
    /// Entity class identifier, `ec_<n>`.
    ClassId
);
id_type!(
    /// Entity class group identifier, `ecg_<n>`.
    GroupId
);

/// Kind of source element a piece of text came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Narrative,
    Figure,
    Table,
    Equation,
    Other,
}

/// Where a chunk's text came from. For chunks spanning several segments this
/// is the union of the segment provenance.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Page/region identifiers, e.g. `p3/table-2`. Sorted, deduplicated.
    pub regions: Vec<String>,
    pub element_kinds: Vec<ElementKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: ChunkId,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub token_count: usize,
    pub provenance: Provenance,
}

/// Byte interval `[start, end)` within a chunk's text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Number,
    #[default]
    String,
    Quantity,
    Identifier,
    Date,
    Other,
}

/// Typed key/value attribute of an entity, kept as a node annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntrinsicProperty {
    pub key: String,
    pub value: String,
    #[serde(default)]
    pub value_kind: ValueKind,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default)]
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mention {
    pub id: MentionId,
    pub chunk_id: ChunkId,
    pub span: Span,
    pub name: String,
    pub description: String,
    pub type_hint: Option<String>,
    pub confidence: f64,
    pub evidence: Vec<String>,
    pub intrinsic_candidates: Vec<IntrinsicProperty>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub canonical_name: String,
    pub description: String,
    pub type_hint: Option<String>,
    pub intrinsic: Vec<IntrinsicProperty>,
    pub member_mentions: BTreeSet<MentionId>,
    pub confidence: f64,
    pub provenance_chunks: BTreeSet<ChunkId>,
    pub class_id: Option<ClassId>,
    pub remarks: Vec<String>,
}

/// The eight contextual qualifier slots of a relation instance.
///
/// Serialization always writes all eight keys; absent values are `null`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QualifierSet {
    #[serde(rename = "TemporalQualifier", default)]
    pub temporal: Option<String>,
    #[serde(rename = "SpatialQualifier", default)]
    pub spatial: Option<String>,
    #[serde(rename = "OperationalConstraint", default)]
    pub operational: Option<String>,
    #[serde(rename = "ConditionExpression", default)]
    pub condition: Option<String>,
    #[serde(rename = "UncertaintyQualifier", default)]
    pub uncertainty: Option<String>,
    #[serde(rename = "CausalHint", default)]
    pub causal: Option<String>,
    #[serde(rename = "LogicalMarker", default)]
    pub logical: Option<String>,
    #[serde(rename = "OtherQualifier", default)]
    pub other: Option<String>,
}

impl QualifierSet {
    pub const KEYS: [&'static str; 8] = [
        "TemporalQualifier",
        "SpatialQualifier",
        "OperationalConstraint",
        "ConditionExpression",
        "UncertaintyQualifier",
        "CausalHint",
        "LogicalMarker",
        "OtherQualifier",
    ];

    pub fn get(&self, key: &str) -> Option<&Option<String>> {
        Some(match key {
            "TemporalQualifier" => &self.temporal,
            "SpatialQualifier" => &self.spatial,
            "OperationalConstraint" => &self.operational,
            "ConditionExpression" => &self.condition,
            "UncertaintyQualifier" => &self.uncertainty,
            "CausalHint" => &self.causal,
            "LogicalMarker" => &self.logical,
            "OtherQualifier" => &self.other,
            _ => return None,
        })
    }

    pub fn slot_mut(&mut self, key: &str) -> Option<&mut Option<String>> {
        Some(match key {
            "TemporalQualifier" => &mut self.temporal,
            "SpatialQualifier" => &mut self.spatial,
            "OperationalConstraint" => &mut self.operational,
            "ConditionExpression" => &mut self.condition,
            "UncertaintyQualifier" => &mut self.uncertainty,
            "CausalHint" => &mut self.causal,
            "LogicalMarker" => &mut self.logical,
            "OtherQualifier" => &mut self.other,
            _ => return None,
        })
    }

    /// Populated `(key, value)` pairs in canonical key order.
    pub fn populated(&self) -> Vec<(&'static str, &str)> {
        Self::KEYS
            .iter()
            .filter_map(|k| {
                self.get(k)
                    .and_then(|v| v.as_deref())
                    .map(|v| (*k, v))
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.populated().is_empty()
    }
}

/// Coarse single-token relation group hint emitted at recognition time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HintType {
    Identity,
    Composition,
    Causality,
    Temporality,
    Spatiality,
    Role,
    Purpose,
    Dependency,
    Coupling,
    Transformation,
    Comparison,
    Information,
    Association,
}

impl HintType {
    pub const ALL: [HintType; 13] = [
        HintType::Identity,
        HintType::Composition,
        HintType::Causality,
        HintType::Temporality,
        HintType::Spatiality,
        HintType::Role,
        HintType::Purpose,
        HintType::Dependency,
        HintType::Coupling,
        HintType::Transformation,
        HintType::Comparison,
        HintType::Information,
        HintType::Association,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HintType::Identity => "IDENTITY",
            HintType::Composition => "COMPOSITION",
            HintType::Causality => "CAUSALITY",
            HintType::Temporality => "TEMPORALITY",
            HintType::Spatiality => "SPATIALITY",
            HintType::Role => "ROLE",
            HintType::Purpose => "PURPOSE",
            HintType::Dependency => "DEPENDENCY",
            HintType::Coupling => "COUPLING",
            HintType::Transformation => "TRANSFORMATION",
            HintType::Comparison => "COMPARISON",
            HintType::Information => "INFORMATION",
            HintType::Association => "ASSOCIATION",
        }
    }

    pub fn parse(s: &str) -> Option<HintType> {
        let s = s.trim();
        HintType::ALL
            .iter()
            .copied()
            .find(|h| h.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for HintType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Directed, evidence-grounded edge. Parallel edges and self-loops are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub id: RelationId,
    pub subject: EntityId,
    pub object: EntityId,
    pub raw_label: String,
    pub description: String,
    pub hint_type: HintType,
    pub qualifiers: QualifierSet,
    pub confidence: f64,
    pub provenance_chunks: BTreeSet<ChunkId>,
    pub evidence: Vec<String>,
    pub canonical_label: Option<String>,
    pub canonical_description: Option<String>,
    pub rel_cls: Option<String>,
    pub rel_cls_group: Option<String>,
    pub remarks: Vec<String>,
}

impl RelationInstance {
    /// Predicate used for export: canonical label when set, raw label otherwise.
    pub fn predicate(&self) -> &str {
        self.canonical_label.as_deref().unwrap_or(&self.raw_label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityClass {
    pub id: ClassId,
    pub label: String,
    pub description: String,
    pub group_id: Option<GroupId>,
    pub member_entities: BTreeSet<EntityId>,
    #[serde(default)]
    pub remarks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityClassGroup {
    pub id: GroupId,
    pub label: String,
    pub description: String,
}

/// Canonical relation label with its relation class (the `τ_rel` edge).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalRelation {
    pub label: String,
    pub description: String,
    pub rel_cls: String,
}

/// Relation class with its group (the `γ_rel` edge).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationClass {
    pub label: String,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationClassGroup {
    pub label: String,
}

/// Induced schema. The four assignment maps are stored on the records
/// (class members, class group, canonical class, class group) and exposed
/// through the accessor methods.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Schema {
    pub entity_classes: Vec<EntityClass>,
    pub entity_class_groups: Vec<EntityClassGroup>,
    pub canonical_relations: Vec<CanonicalRelation>,
    pub relation_classes: Vec<RelationClass>,
    pub relation_class_groups: Vec<RelationClassGroup>,
}

impl Schema {
    /// Entity → classes. Single-valued in a well-formed schema.
    pub fn entity_assignments(&self) -> BTreeMap<&EntityId, Vec<&ClassId>> {
        let mut out: BTreeMap<&EntityId, Vec<&ClassId>> = BTreeMap::new();
        for c in &self.entity_classes {
            for e in &c.member_entities {
                out.entry(e).or_default().push(&c.id);
            }
        }
        out
    }

    pub fn tau_ent(&self) -> BTreeMap<EntityId, ClassId> {
        self.entity_assignments()
            .into_iter()
            .map(|(e, cs)| (e.clone(), cs[0].clone()))
            .collect()
    }

    pub fn gamma_ent(&self) -> BTreeMap<ClassId, GroupId> {
        self.entity_classes
            .iter()
            .filter_map(|c| c.group_id.clone().map(|g| (c.id.clone(), g)))
            .collect()
    }

    pub fn tau_rel(&self) -> BTreeMap<String, String> {
        self.canonical_relations
            .iter()
            .map(|c| (c.label.clone(), c.rel_cls.clone()))
            .collect()
    }

    pub fn gamma_rel(&self) -> BTreeMap<String, String> {
        self.relation_classes
            .iter()
            .map(|c| (c.label.clone(), c.group.clone()))
            .collect()
    }

    pub fn class(&self, id: &ClassId) -> Option<&EntityClass> {
        self.entity_classes.iter().find(|c| &c.id == id)
    }

    pub fn group(&self, id: &GroupId) -> Option<&EntityClassGroup> {
        self.entity_class_groups.iter().find(|g| &g.id == id)
    }
}

/// `G = (E, R, S)`: a directed multigraph with an induced schema.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextEnrichedGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<RelationInstance>,
    pub schema: Schema,
    /// Set once entity-schema induction has run; class assignment becomes mandatory.
    pub schema_induced: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    EntRes,
    EntClsRes,
    RelRes,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::EntRes => "EntRes",
            Stage::EntClsRes => "EntClsRes",
            Stage::RelRes => "RelRes",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionStatus {
    Applied,
    Rejected,
}

/// Who issued an action: the model, or the deterministic finalization code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionOrigin {
    #[default]
    Provider,
    Pipeline,
}

/// One validated, logged edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub stage: Stage,
    pub sequence_number: u64,
    pub round: u32,
    /// Ordinal of the provider reply (action array) this record came from.
    /// Provisional ids resolve within one batch.
    #[serde(default)]
    pub batch: u64,
    pub kind: String,
    pub payload: serde_json::Value,
    pub rationale: String,
    pub status: ActionStatus,
    pub rejection_reason: Option<String>,
    pub origin: ActionOrigin,
}

/// Invariant a [`Violation`] refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    DanglingEndpoint,
    DuplicateId,
    EmptyMembers,
    ProvenanceMismatch,
    MissingProvenance,
    UnresolvedProvenance,
    ConfidenceRange,
    TauEntNotTotal,
    TauEntMultiValued,
    GammaEntNotTotal,
    DanglingSchemaId,
    CanonicalUnset,
    TauRelNotTotal,
    TauRelMultiValued,
    GammaRelNotTotal,
    EmptyClass,
    EmptyName,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub id: String,
    pub invariant: Invariant,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Soft findings such as empty descriptions. Never make a graph invalid.
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, id: impl Into<String>, invariant: Invariant, detail: impl Into<String>) {
        self.violations.push(Violation {
            id: id.into(),
            invariant,
            detail: detail.into(),
        });
    }
}

/// Checks graph invariants, optionally against the chunk and mention stores.
#[derive(Default)]
pub struct GraphValidator<'a> {
    chunks: Option<&'a BTreeSet<ChunkId>>,
    mentions: Option<&'a BTreeMap<MentionId, Mention>>,
}

impl<'a> GraphValidator<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_chunks(mut self, chunks: &'a BTreeSet<ChunkId>) -> Self {
        self.chunks = Some(chunks);
        self
    }

    pub fn with_mentions(mut self, mentions: &'a BTreeMap<MentionId, Mention>) -> Self {
        self.mentions = Some(mentions);
        self
    }

    pub fn validate(&self, g: &ContextEnrichedGraph) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut entity_ids = BTreeSet::new();
        for e in &g.entities {
            if !entity_ids.insert(&e.id) {
                report.push(e.id.as_str(), Invariant::DuplicateId, "entity id repeated");
            }
        }

        for e in &g.entities {
            self.check_entity(e, &mut report);
        }

        let mut relation_ids = BTreeSet::new();
        for r in &g.relations {
            if !relation_ids.insert(&r.id) {
                report.push(r.id.as_str(), Invariant::DuplicateId, "relation id repeated");
            }
            for (side, end) in [("subject", &r.subject), ("object", &r.object)] {
                if !entity_ids.contains(end) {
                    report.push(
                        r.id.as_str(),
                        Invariant::DanglingEndpoint,
                        format!("{side} {end} is not an entity"),
                    );
                }
            }
            if !(0.0..=1.0).contains(&r.confidence) {
                report.push(r.id.as_str(), Invariant::ConfidenceRange, format!("{}", r.confidence));
            }
            self.check_provenance(r.id.as_str(), &r.provenance_chunks, &mut report);
            if g.schema_induced {
                if r.canonical_label.is_none() {
                    report.push(r.id.as_str(), Invariant::CanonicalUnset, "canonical label unset");
                }
                if r.rel_cls.is_none() || r.rel_cls_group.is_none() {
                    report.push(r.id.as_str(), Invariant::TauRelNotTotal, "relation class or group unset");
                }
            }
        }

        self.check_schema(g, &entity_ids, &mut report);
        report
    }

    fn check_entity(&self, e: &Entity, report: &mut ValidationReport) {
        let id = e.id.as_str();
        if e.member_mentions.is_empty() {
            report.push(id, Invariant::EmptyMembers, "no member mentions");
        }
        if e.canonical_name.trim().is_empty() {
            report.push(id, Invariant::EmptyName, "canonical name empty");
        }
        if e.description.trim().is_empty() {
            report.warnings.push(format!("entity {id} has an empty description"));
        }
        if !(0.0..=1.0).contains(&e.confidence) {
            report.push(id, Invariant::ConfidenceRange, format!("{}", e.confidence));
        }
        self.check_provenance(id, &e.provenance_chunks, report);
        if let Some(mentions) = self.mentions {
            let mut union = BTreeSet::new();
            for m in &e.member_mentions {
                match mentions.get(m) {
                    Some(m) => {
                        union.insert(m.chunk_id.clone());
                    }
                    None => report.push(id, Invariant::DanglingSchemaId, format!("unknown mention {m}")),
                }
            }
            if union != e.provenance_chunks {
                report.push(
                    id,
                    Invariant::ProvenanceMismatch,
                    "provenance chunks differ from the union of mention chunks",
                );
            }
        }
    }

    fn check_provenance(&self, id: &str, chunks: &BTreeSet<ChunkId>, report: &mut ValidationReport) {
        if chunks.is_empty() {
            report.push(id, Invariant::MissingProvenance, "no provenance chunk");
        }
        if let Some(store) = self.chunks {
            for c in chunks {
                if !store.contains(c) {
                    report.push(id, Invariant::UnresolvedProvenance, format!("chunk {c} not in store"));
                }
            }
        }
    }

    fn check_schema(
        &self,
        g: &ContextEnrichedGraph,
        entity_ids: &BTreeSet<&EntityId>,
        report: &mut ValidationReport,
    ) {
        let s = &g.schema;
        let group_ids: BTreeSet<&GroupId> = s.entity_class_groups.iter().map(|g| &g.id).collect();
        let class_ids: BTreeSet<&ClassId> = s.entity_classes.iter().map(|c| &c.id).collect();
        let assignments = s.entity_assignments();

        for c in &s.entity_classes {
            if c.member_entities.is_empty() {
                report.push(c.id.as_str(), Invariant::EmptyClass, "class has no members");
            }
            if c.description.trim().is_empty() {
                report.warnings.push(format!("class {} has an empty description", c.id));
            }
            match &c.group_id {
                None => report.push(c.id.as_str(), Invariant::GammaEntNotTotal, "class has no group"),
                Some(gid) if !group_ids.contains(gid) => {
                    report.push(c.id.as_str(), Invariant::DanglingSchemaId, format!("unknown group {gid}"))
                }
                _ => {}
            }
            for e in &c.member_entities {
                if !entity_ids.contains(e) {
                    report.push(c.id.as_str(), Invariant::DanglingSchemaId, format!("unknown entity {e}"));
                }
            }
        }
        for (e, cs) in &assignments {
            if cs.len() > 1 {
                report.push(e.as_str(), Invariant::TauEntMultiValued, format!("{} classes", cs.len()));
            }
        }
        if g.schema_induced {
            for e in &g.entities {
                if e.class_id.is_none() || !assignments.contains_key(&e.id) {
                    report.push(e.id.as_str(), Invariant::TauEntNotTotal, "entity has no class assignment");
                }
                if let Some(cid) = &e.class_id {
                    if !class_ids.contains(cid) {
                        report.push(e.id.as_str(), Invariant::DanglingSchemaId, format!("unknown class {cid}"));
                    } else if assignments.get(&e.id).is_some_and(|cs| !cs.contains(&cid)) {
                        report.push(e.id.as_str(), Invariant::TauEntMultiValued, "class_id disagrees with class members");
                    }
                }
            }
        }

        let tau_rel = s.tau_rel();
        let gamma_rel = s.gamma_rel();
        if tau_rel.len() != s.canonical_relations.len() {
            report.push("schema", Invariant::TauRelMultiValued, "canonical label listed twice");
        }
        for c in &s.canonical_relations {
            if !gamma_rel.contains_key(&c.rel_cls) {
                report.push(c.label.as_str(), Invariant::DanglingSchemaId, format!("unknown relation class {}", c.rel_cls));
            }
        }
        let rel_groups: BTreeSet<&str> = s.relation_class_groups.iter().map(|g| g.label.as_str()).collect();
        for c in &s.relation_classes {
            if !rel_groups.contains(c.group.as_str()) {
                report.push(c.label.as_str(), Invariant::GammaRelNotTotal, format!("unknown group {}", c.group));
            }
        }
        if g.schema_induced {
            for r in &g.relations {
                let (Some(label), Some(cls), Some(group)) = (&r.canonical_label, &r.rel_cls, &r.rel_cls_group) else {
                    continue;
                };
                match tau_rel.get(label) {
                    None => report.push(r.id.as_str(), Invariant::TauRelNotTotal, format!("label {label} not in schema")),
                    Some(c) if c != cls => report.push(
                        r.id.as_str(),
                        Invariant::TauRelMultiValued,
                        format!("instance class {cls} disagrees with schema {c}"),
                    ),
                    _ => {}
                }
                match gamma_rel.get(cls) {
                    Some(gr) if gr != group => report.push(
                        r.id.as_str(),
                        Invariant::GammaRelNotTotal,
                        format!("instance group {group} disagrees with schema {gr}"),
                    ),
                    None => report.push(r.id.as_str(), Invariant::GammaRelNotTotal, format!("class {cls} not in schema")),
                    _ => {}
                }
            }
        }
    }
}

/// Validate with no external stores.
pub fn validate_graph(g: &ContextEnrichedGraph) -> ValidationReport {
    GraphValidator::new().validate(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn entity(id: &str, chunk: &str) -> Entity {
        Entity {
            id: id.into(),
            canonical_name: id.to_uppercase(),
            description: "d".into(),
            type_hint: None,
            intrinsic: vec![],
            member_mentions: [MentionId::from(format!("m{id}"))].into(),
            confidence: 1.0,
            provenance_chunks: [ChunkId::from(chunk)].into(),
            class_id: None,
            remarks: vec![],
        }
    }

    fn relation(id: &str, s: &str, o: &str) -> RelationInstance {
        RelationInstance {
            id: id.into(),
            subject: s.into(),
            object: o.into(),
            raw_label: "feeds".into(),
            description: String::new(),
            hint_type: HintType::Dependency,
            qualifiers: QualifierSet::default(),
            confidence: 0.9,
            provenance_chunks: [ChunkId::from("c1")].into(),
            evidence: vec![],
            canonical_label: None,
            canonical_description: None,
            rel_cls: None,
            rel_cls_group: None,
            remarks: vec![],
        }
    }

    #[test]
    fn well_formed_graph_is_clean() {
        let g = ContextEnrichedGraph {
            entities: vec![entity("a", "c1"), entity("b", "c1")],
            relations: vec![relation("r1", "a", "b")],
            ..Default::default()
        };
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn dangling_endpoint_is_reported_once() {
        let g = ContextEnrichedGraph {
            entities: vec![entity("a", "c1")],
            relations: vec![relation("r1", "a", "zz")],
            ..Default::default()
        };
        let report = validate_graph(&g);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].invariant, Invariant::DanglingEndpoint);
        assert_eq!(report.violations[0].id, "r1");
    }

    #[test]
    fn unset_class_after_schema_stage() {
        let mut a = entity("a", "c1");
        let b = entity("b", "c1");
        a.class_id = Some("ec_1".into());
        let schema = Schema {
            entity_classes: vec![EntityClass {
                id: "ec_1".into(),
                label: "Thing".into(),
                description: "things".into(),
                group_id: Some("ecg_1".into()),
                member_entities: ["a".into()].into(),
                remarks: vec![],
            }],
            entity_class_groups: vec![EntityClassGroup {
                id: "ecg_1".into(),
                label: "Things".into(),
                description: String::new(),
            }],
            ..Default::default()
        };
        let g = ContextEnrichedGraph {
            entities: vec![a, b],
            relations: vec![],
            schema,
            schema_induced: true,
        };
        let report = validate_graph(&g);
        // Independent scan: entities with no class and no membership.
        let unassigned: Vec<&str> = g
            .entities
            .iter()
            .filter(|e| e.class_id.is_none())
            .map(|e| e.id.as_str())
            .collect();
        assert_eq!(unassigned, vec!["b"]);
        let not_total: Vec<&Violation> = report
            .violations
            .iter()
            .filter(|v| v.invariant == Invariant::TauEntNotTotal)
            .collect();
        assert_eq!(not_total.len(), 1);
        assert_eq!(not_total[0].id, "b");
        assert_eq!(report.violations.len(), 1);
    }

    #[test]
    fn empty_description_is_only_a_warning() {
        let mut a = entity("a", "c1");
        a.description.clear();
        let g = ContextEnrichedGraph {
            entities: vec![a],
            ..Default::default()
        };
        let report = validate_graph(&g);
        assert!(report.is_empty());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn qualifier_set_always_has_eight_keys() {
        let q = QualifierSet {
            temporal: Some("during ramp-up".into()),
            ..Default::default()
        };
        let v = serde_json::to_value(&q).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 8);
        for k in QualifierSet::KEYS {
            assert!(obj.contains_key(k), "{k}");
        }
        assert_eq!(obj["SpatialQualifier"], serde_json::Value::Null);
        let back: QualifierSet = serde_json::from_str(r#"{"CausalHint":"x"}"#).unwrap();
        assert_eq!(back.causal.as_deref(), Some("x"));
        assert_eq!(back.populated().len(), 1);
    }

    #[test]
    fn hint_type_round_trip() {
        for h in HintType::ALL {
            assert_eq!(HintType::parse(h.as_str()), Some(h));
            let s = serde_json::to_string(&h).unwrap();
            assert_eq!(s, format!("\"{}\"", h.as_str()));
        }
        assert_eq!(HintType::parse("role"), Some(HintType::Role));
        assert_eq!(HintType::parse("VERB"), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn opt_string() -> impl Strategy<Value = Option<String>> {
            proptest::option::of("[a-z ]{0,6}")
        }

        prop_compose! {
            fn qualifier_set()(v in proptest::collection::vec(opt_string(), 8)) -> QualifierSet {
                QualifierSet {
                    temporal: v[0].clone(), spatial: v[1].clone(), operational: v[2].clone(),
                    condition: v[3].clone(), uncertainty: v[4].clone(), causal: v[5].clone(),
                    logical: v[6].clone(), other: v[7].clone(),
                }
            }
        }

        prop_compose! {
            fn relation_strategy()(
                id in "r_[0-9]{1,3}", s in "e_[a-c]", o in "e_[a-c]", label in "[a-z ]{1,10}",
                q in qualifier_set(), conf in 0.0f64..=1.0,
                hint in 0usize..13, canon in proptest::option::of("[a-z_]{1,8}"),
                evidence in proptest::collection::vec(".{0,12}", 0..3),
            ) -> RelationInstance {
                RelationInstance {
                    id: id.into(), subject: s.into(), object: o.into(), raw_label: label,
                    description: String::new(), hint_type: HintType::ALL[hint], qualifiers: q,
                    confidence: conf, provenance_chunks: [ChunkId::from("c_0")].into(),
                    evidence, canonical_label: canon.clone(), canonical_description: None,
                    rel_cls: canon, rel_cls_group: None, remarks: vec![],
                }
            }
        }

        proptest! {
            #[test]
            fn relation_serde_round_trip(r in relation_strategy()) {
                let s = serde_json::to_string(&r).unwrap();
                let back: RelationInstance = serde_json::from_str(&s).unwrap();
                prop_assert_eq!(back, r);
            }

            #[test]
            fn qualifier_serialization_has_exactly_eight_keys(q in qualifier_set()) {
                let v = serde_json::to_value(&q).unwrap();
                prop_assert_eq!(v.as_object().unwrap().len(), 8);
                let back: QualifierSet = serde_json::from_value(v).unwrap();
                prop_assert_eq!(back, q);
            }
        }
    }
}
