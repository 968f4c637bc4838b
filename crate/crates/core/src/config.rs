//! Declarative run configuration (TOML). Every key has a default, so an
//! empty file is a valid configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ChunkBounds;
use crate::neighborhood::ClusterParams;
use crate::provider::LiveConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub ingest: IngestConfig,
    pub budgets: Budgets,
    pub embedding: EmbeddingConfig,
    pub clustering: ClusterParams,
    pub weights: Weights,
    pub entity_resolution: EntityResolutionConfig,
    pub class_recognition: ClassRecognitionConfig,
    pub class_resolution: PlateauConfig,
    pub relation_resolution: PlateauConfig,
    pub retrieval: RetrievalConfig,
    pub alignment: AlignmentConfig,
    pub provider: ProviderConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            ingest: IngestConfig::default(),
            budgets: Budgets::default(),
            embedding: EmbeddingConfig::default(),
            clustering: ClusterParams::default(),
            weights: Weights::default(),
            entity_resolution: EntityResolutionConfig::default(),
            class_recognition: ClassRecognitionConfig::default(),
            class_resolution: PlateauConfig::default(),
            relation_resolution: PlateauConfig::default(),
            retrieval: RetrievalConfig::default(),
            alignment: AlignmentConfig::default(),
            provider: ProviderConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(s).map_err(|e| ConfigError::Parse {
            path: "<string>".into(),
            reason: e.to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let cfg: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let b = self.ingest.chunking;
        if b.min_tokens > b.max_tokens || b.max_tokens == 0 {
            return Err(ConfigError::Invalid(format!(
                "chunking bounds ({}, {}) are not ordered",
                b.min_tokens, b.max_tokens
            )));
        }
        if self.clustering.batch_size < 2 {
            return Err(ConfigError::Invalid("clustering.batch_size must be at least 2".into()));
        }
        if self.clustering.max_cluster_size == 0 {
            return Err(ConfigError::Invalid("clustering.max_cluster_size must be positive".into()));
        }
        for (layer, ws) in [
            ("entity", self.weights.entity.values().copied().collect::<Vec<_>>()),
            ("class", self.weights.class.values().copied().collect()),
            ("relation", self.weights.relation.values().copied().collect()),
        ] {
            if ws.iter().any(|w| *w < 0.0) || !ws.iter().any(|w| *w > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "weights.{layer}: weights must be non-negative with at least one positive"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub chunking: ChunkBounds,
    /// `identity`, `stub` or `command`.
    pub textualizer: String,
    /// Shell command for the `command` textualizer.
    pub textualizer_command: Option<String>,
    /// Preceding chunks shown as context during recognition.
    pub context_window: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            chunking: ChunkBounds::default(),
            textualizer: "identity".into(),
            textualizer_command: None,
            context_window: 4,
        }
    }
}

/// Token budgets per request family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub recognition: usize,
    pub resolution: usize,
    pub judge: usize,
    pub verify: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            recognition: 8000,
            resolution: 16000,
            judge: 16000,
            verify: 1400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub batch_size: usize,
    /// Dimension of the hashed stub embedding.
    pub dimension: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            batch_size: 32,
            dimension: 64,
        }
    }
}

/// Field weights of the multi-field representations, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Weights {
    pub entity: BTreeMap<String, f64>,
    pub class: BTreeMap<String, f64>,
    pub relation: BTreeMap<String, f64>,
}

fn weights(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            entity: weights(&[
                ("name", 0.35),
                ("description", 0.30),
                ("type_hint", 0.10),
                ("intrinsic", 0.10),
                ("evidence", 0.15),
            ]),
            class: weights(&[("label", 0.40), ("description", 0.30), ("evidence", 0.15), ("members", 0.15)]),
            relation: weights(&[
                ("raw_label", 0.30),
                ("description", 0.25),
                ("endpoint_context", 0.25),
                ("hints", 0.10),
                ("qualifiers", 0.10),
            ]),
        }
    }
}

impl Weights {
    pub fn get(layer: &BTreeMap<String, f64>, field: &str) -> f64 {
        layer.get(field).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntityResolutionConfig {
    pub max_rounds: u32,
    /// The loop stops once a round applies at most this many merges.
    pub merge_threshold: usize,
}

impl Default for EntityResolutionConfig {
    fn default() -> Self {
        EntityResolutionConfig {
            max_rounds: 5,
            merge_threshold: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassRecognitionConfig {
    /// Clustering rounds before the single-entity fallback.
    pub rounds: u32,
}

impl Default for ClassRecognitionConfig {
    fn default() -> Self {
        ClassRecognitionConfig { rounds: 2 }
    }
}

/// Multi-run loop that stops when structural edits plateau.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    /// A run with at most this many structural edits counts as calm.
    pub edit_threshold: usize,
    /// Consecutive calm runs that end the loop.
    pub patience: u32,
    pub max_runs: u32,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            edit_threshold: 0,
            patience: 2,
            max_runs: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub hops: usize,
    pub node_cap: usize,
    pub edge_cap: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 8,
            hops: 2,
            node_cap: 250,
            edge_cap: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub top_k: usize,
    pub threshold: f64,
    pub max_assign: usize,
    pub audit_below: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            top_k: 5,
            threshold: 0.20,
            max_assign: 3,
            audit_below: 0.88,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    /// `stub` or `live`.
    pub kind: String,
    /// Per-stage override of `kind`, keyed by stage tag (e.g. `retention_judge`).
    pub stages: BTreeMap<String, String>,
    pub stub_similarity_threshold: f64,
    pub chat: LiveConfig,
    pub embedding: LiveConfig,
    /// Use the hashed stub embedding even when chat is live.
    pub stub_embeddings: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: "stub".into(),
            stages: BTreeMap::new(),
            stub_similarity_threshold: 0.9,
            chat: LiveConfig::default(),
            embedding: LiveConfig {
                model: "text-embedding-3-large".into(),
                ..LiveConfig::default()
            },
            stub_embeddings: false,
        }
    }
}
