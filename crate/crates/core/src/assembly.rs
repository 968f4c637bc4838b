//! Final graph assembly and the node, edge and triple exports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ChunkId, ContextEnrichedGraph, Entity, EntityClass, EntityClassGroup, GraphValidator, Mention, MentionId,
    RelationInstance, Schema, ValidationReport,
};
use crate::relation::relation_schema;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("graph validation failed with {} violation(s): {}", .0.violations.len(), summarize(.0))]
    Invalid(ValidationReport),
}

fn summarize(r: &ValidationReport) -> String {
    let mut parts: Vec<String> = r
        .violations
        .iter()
        .take(5)
        .map(|v| format!("{} ({:?}: {})", v.id, v.invariant, v.detail))
        .collect();
    if r.violations.len() > 5 {
        parts.push(format!("and {} more", r.violations.len() - 5));
    }
    parts.join("; ")
}

/// Stage outputs that make up a graph.
#[derive(Debug, Clone, Default)]
pub struct GraphParts {
    pub entities: Vec<Entity>,
    pub relations: Vec<RelationInstance>,
    pub classes: Vec<EntityClass>,
    pub groups: Vec<EntityClassGroup>,
}

/// Build `G = (E, R, S)`: attach class assignments to entities, derive the
/// relation side of the schema, and validate. Violations fail assembly;
/// warnings are returned with the graph.
pub fn assemble(
    parts: GraphParts,
    chunks: Option<&BTreeSet<ChunkId>>,
    mentions: Option<&BTreeMap<MentionId, Mention>>,
) -> Result<(ContextEnrichedGraph, ValidationReport), AssemblyError> {
    let (canonical_relations, relation_classes, relation_class_groups) = relation_schema(&parts.relations);
    let schema = Schema {
        entity_classes: parts.classes,
        entity_class_groups: parts.groups,
        canonical_relations,
        relation_classes,
        relation_class_groups,
    };
    let tau = schema.tau_ent();
    let mut entities = parts.entities;
    for e in &mut entities {
        e.class_id = tau.get(&e.id).cloned();
    }
    let mut relations = parts.relations;
    relations.sort_by(|a, b| a.id.cmp(&b.id));
    entities.sort_by(|a, b| a.id.cmp(&b.id));
    let graph = ContextEnrichedGraph {
        entities,
        relations,
        schema,
        schema_induced: true,
    };
    let mut validator = GraphValidator::new();
    if let Some(c) = chunks {
        validator = validator.with_chunks(c);
    }
    if let Some(m) = mentions {
        validator = validator.with_mentions(m);
    }
    let report = validator.validate(&graph);
    if report.is_empty() {
        Ok((graph, report))
    } else {
        Err(AssemblyError::Invalid(report))
    }
}

/// Node export: the entity with its class and group spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    #[serde(flatten)]
    pub entity: Entity,
    pub class_label: Option<String>,
    pub group_id: Option<String>,
    pub group_label: Option<String>,
}

/// Edge export: the relation instance with endpoint names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    #[serde(flatten)]
    pub relation: RelationInstance,
    pub subject_name: String,
    pub object_name: String,
}

pub fn node_records(g: &ContextEnrichedGraph) -> Vec<NodeRecord> {
    g.entities
        .iter()
        .map(|e| {
            let class = e.class_id.as_ref().and_then(|c| g.schema.class(c));
            let group = class.and_then(|c| c.group_id.as_ref()).and_then(|gid| g.schema.group(gid));
            NodeRecord {
                entity: e.clone(),
                class_label: class.map(|c| c.label.clone()),
                group_id: group.map(|g| g.id.to_string()),
                group_label: group.map(|g| g.label.clone()),
            }
        })
        .collect()
}

fn names(g: &ContextEnrichedGraph) -> BTreeMap<&str, &str> {
    g.entities.iter().map(|e| (e.id.as_str(), e.canonical_name.as_str())).collect()
}

pub fn edge_records(g: &ContextEnrichedGraph) -> Vec<EdgeRecord> {
    let names = names(g);
    g.relations
        .iter()
        .map(|r| EdgeRecord {
            relation: r.clone(),
            subject_name: names.get(r.subject.as_str()).unwrap_or(&"").to_string(),
            object_name: names.get(r.object.as_str()).unwrap_or(&"").to_string(),
        })
        .collect()
}

/// Flat triple export: subject name, predicate, object name per line.
pub fn triples_tsv(g: &ContextEnrichedGraph) -> String {
    let names = names(g);
    let clean = |s: &str| s.replace(['\t', '\n'], " ");
    g.relations
        .iter()
        .map(|r| {
            format!(
                "{}\t{}\t{}\n",
                clean(names.get(r.subject.as_str()).unwrap_or(&"")),
                clean(r.predicate()),
                clean(names.get(r.object.as_str()).unwrap_or(&""))
            )
        })
        .collect()
}

pub fn parse_triples_tsv(text: &str) -> Vec<(String, String, String)> {
    text.lines()
        .filter_map(|l| {
            let mut it = l.split('\t');
            Some((it.next()?.to_string(), it.next()?.to_string(), it.next()?.to_string()))
        })
        .collect()
}

/// Rebuild the graph from its exports.
pub fn graph_from_records(nodes: Vec<NodeRecord>, edges: Vec<EdgeRecord>, schema: Schema) -> ContextEnrichedGraph {
    ContextEnrichedGraph {
        entities: nodes.into_iter().map(|n| n.entity).collect(),
        relations: edges.into_iter().map(|e| e.relation).collect(),
        schema,
        schema_induced: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassId, EntityId, GroupId, HintType, QualifierSet, RelationId};

    fn entity(id: &str) -> Entity {
        Entity {
            id: EntityId(id.into()),
            canonical_name: id.to_uppercase(),
            description: "d".into(),
            type_hint: None,
            intrinsic: vec![],
            member_mentions: BTreeSet::from([MentionId(format!("m_{id}"))]),
            confidence: 1.0,
            provenance_chunks: BTreeSet::from([ChunkId("c_x_0000".into())]),
            class_id: None,
            remarks: vec![],
        }
    }

    fn relation(id: &str, s: &str, o: &str) -> RelationInstance {
        RelationInstance {
            id: RelationId(id.into()),
            subject: EntityId(s.into()),
            object: EntityId(o.into()),
            raw_label: "uses".into(),
            description: String::new(),
            hint_type: HintType::Association,
            qualifiers: QualifierSet::default(),
            confidence: 1.0,
            provenance_chunks: BTreeSet::from([ChunkId("c_x_0000".into())]),
            evidence: vec![],
            canonical_label: Some("uses".into()),
            canonical_description: None,
            rel_cls: Some("uses".into()),
            rel_cls_group: Some("ASSOCIATION".into()),
            remarks: vec![],
        }
    }

    fn parts() -> GraphParts {
        GraphParts {
            entities: vec![entity("a"), entity("b")],
            relations: vec![relation("r1", "a", "b")],
            classes: vec![EntityClass {
                id: ClassId("ec_0001".into()),
                label: "Thing".into(),
                description: "things".into(),
                group_id: Some(GroupId("ecg_0001".into())),
                member_entities: [EntityId("a".into()), EntityId("b".into())].into(),
                remarks: vec![],
            }],
            groups: vec![EntityClassGroup {
                id: GroupId("ecg_0001".into()),
                label: "Top".into(),
                description: String::new(),
            }],
        }
    }

    #[test]
    fn assembles_and_exports() {
        let (g, report) = assemble(parts(), None, None).unwrap();
        assert!(report.violations.is_empty());
        assert!(g.entities.iter().all(|e| e.class_id.is_some()));
        assert_eq!(triples_tsv(&g), "A\tuses\tB\n");
        let nodes = node_records(&g);
        assert_eq!(nodes[0].group_label.as_deref(), Some("Top"));
        let back = graph_from_records(nodes, edge_records(&g), g.schema.clone());
        assert_eq!(back, g);
    }

    #[test]
    fn dangling_edge_fails_naming_it() {
        let mut p = parts();
        p.relations.push(relation("r_bad", "a", "gone"));
        let err = assemble(p, None, None).unwrap_err();
        assert!(err.to_string().contains("r_bad"), "{err}");
    }

    #[test]
    fn empty_corpus_is_an_empty_graph() {
        let (g, _) = assemble(GraphParts::default(), None, None).unwrap();
        assert!(g.entities.is_empty() && g.relations.is_empty());
        assert_eq!(g.schema, Schema::default());
    }
}
