//! Context-enriched knowledge graph construction with an induced schema.
//!
//! Documents are chunked, entities and relations are extracted chunk by
//! chunk, and three resolution stages consolidate them through validated,
//! logged actions proposed by a chat model. The crate also ships the graph
//! metrics, a retrieval-and-judge retention harness and a schema alignment
//! harness against a reference ontology.
//!
//! Everything runs offline and deterministically with the rule-based stub
//! providers in [`provider`].

pub mod model;
pub mod text;
pub mod ingest;
pub mod provider;
pub mod neighborhood;
pub mod trace;
pub mod config;
pub mod entity;
pub mod classes;
pub mod relation;
pub mod store;
pub mod assembly;
pub mod metrics;
pub mod retention;
pub mod alignment;
pub mod pipeline;
pub mod synthetic;

pub use model::*;
