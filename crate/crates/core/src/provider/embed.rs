use serde::{Deserialize, Serialize};

use super::ProviderError;
use crate::text::fnv1a64;

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    /// L2-normalize. A zero vector stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector(values)
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity of two arbitrary vectors.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let d = a.norm() * b.norm();
    if d == 0.0 {
        0.0
    } else {
        a.dot(b) / d
    }
}

pub trait Embedder: Send + Sync {
    fn identity(&self) -> String;
    /// Embed one batch. Implementations may return unnormalized vectors.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

/// Embed `texts` in batches of `batch_size` and L2-normalize every vector.
pub fn embed_batch(
    embedder: &dyn Embedder,
    texts: &[String],
    batch_size: usize,
) -> Result<Vec<EmbeddingVector>, ProviderError> {
    if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(ProviderError::Embedding {
            index,
            reason: "empty input string".to_string(),
        });
    }
    let mut out = Vec::with_capacity(texts.len());
    for (b, batch) in texts.chunks(batch_size.max(1)).enumerate() {
        let vectors = embedder.embed(batch)?;
        if vectors.len() != batch.len() {
            return Err(ProviderError::Embedding {
                index: b * batch_size,
                reason: format!("provider returned {} vectors for {} inputs", vectors.len(), batch.len()),
            });
        }
        for (i, v) in vectors.into_iter().enumerate() {
            let v = EmbeddingVector::normalized(v);
            if v.norm() == 0.0 {
                return Err(ProviderError::Embedding {
                    index: b * batch_size + i,
                    reason: "zero vector".to_string(),
                });
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Feature-hashed bag of words: each lower-cased alphanumeric token adds 1 to
/// dimension `fnv1a64(token) % dim`; the token vectors are mean-pooled and
/// L2-normalized. Text with no alphanumeric token hashes as a whole.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 64 }
    }
}

impl HashEmbedder {
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            v[(fnv1a64(text.as_bytes()) % self.dim as u64) as usize] = 1.0;
            return v;
        }
        for t in &tokens {
            v[(fnv1a64(t.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let n = tokens.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}

impl Embedder for HashEmbedder {
    fn identity(&self) -> String {
        format!("hash-bow-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}
