//! Multi-field representations, density clustering into neighborhoods,
//! subclustering of oversized neighborhoods and bounded prompt batching.
//!
//! Neighborhoods only decide which items a resolution prompt sees together.
//! They never edit anything themselves.

pub mod hdbscan;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::{embed_batch, Embedder, EmbeddingVector, ProviderError};

#[derive(Debug, Error, PartialEq)]
pub enum NeighborhoodError {
    #[error("item {item_id}: no field with positive weight and non-empty text")]
    NoUsableField { item_id: String },
    #[error("item {item_id}: negative weight on field {field}")]
    NegativeWeight { item_id: String, field: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub text: String,
    pub weight: f64,
}

impl Field {
    pub fn new(name: &str, text: impl Into<String>, weight: f64) -> Self {
        Field {
            name: name.to_string(),
            text: text.into(),
            weight,
        }
    }

    fn usable(&self) -> bool {
        self.weight > 0.0 && !self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiFieldRepresentation {
    pub item_id: String,
    pub fields: Vec<Field>,
    pub combined: EmbeddingVector,
}

fn check_fields(item_id: &str, fields: &[Field]) -> Result<(), NeighborhoodError> {
    if let Some(f) = fields.iter().find(|f| f.weight < 0.0) {
        return Err(NeighborhoodError::NegativeWeight {
            item_id: item_id.to_string(),
            field: f.name.clone(),
        });
    }
    if !fields.iter().any(Field::usable) {
        return Err(NeighborhoodError::NoUsableField {
            item_id: item_id.to_string(),
        });
    }
    Ok(())
}

fn combine(fields: &[Field], vectors: &BTreeMap<&str, &EmbeddingVector>) -> EmbeddingVector {
    let dim = vectors.values().next().map_or(0, |v| v.dim());
    let mut sum = vec![0.0; dim];
    for f in fields.iter().filter(|f| f.usable()) {
        let v = vectors[f.text.as_str()];
        for (s, x) in sum.iter_mut().zip(&v.0) {
            *s += f.weight * x;
        }
    }
    EmbeddingVector::normalized(sum)
}

/// `normalize(Σ w_i φ(f_i))` for one item. Fields with zero weight or empty
/// text are kept in the record but contribute nothing.
pub fn build_representation(
    item_id: &str,
    fields: Vec<Field>,
    embedder: &dyn Embedder,
) -> Result<MultiFieldRepresentation, NeighborhoodError> {
    let mut reps = build_representations(vec![(item_id.to_string(), fields)], embedder, 32)?;
    Ok(reps.remove(0))
}

/// Batched variant: every distinct field text is embedded once.
pub fn build_representations(
    items: Vec<(String, Vec<Field>)>,
    embedder: &dyn Embedder,
    batch_size: usize,
) -> Result<Vec<MultiFieldRepresentation>, NeighborhoodError> {
    for (id, fields) in &items {
        check_fields(id, fields)?;
    }
    let texts: Vec<String> = items
        .iter()
        .flat_map(|(_, fs)| fs.iter().filter(|f| f.usable()).map(|f| f.text.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let vectors = embed_batch(embedder, &texts, batch_size)?;
    let lookup: BTreeMap<&str, &EmbeddingVector> = texts.iter().map(String::as_str).zip(vectors.iter()).collect();
    Ok(items
        .into_iter()
        .map(|(item_id, fields)| {
            let combined = combine(&fields, &lookup);
            MultiFieldRepresentation {
                item_id,
                fields,
                combined,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub id: String,
    /// Sorted member ids.
    pub members: Vec<String>,
    pub is_noise: bool,
}

/// Clustering backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClusterMethod {
    Hdbscan,
    /// Connected components of the graph linking pairs with cosine similarity
    /// at or above `min_similarity`. Used as a test double.
    Threshold { min_similarity: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub method: ClusterMethod,
    pub min_cluster_size: usize,
    pub max_cluster_size: usize,
    /// Items per prompt.
    pub batch_size: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            method: ClusterMethod::Hdbscan,
            min_cluster_size: 2,
            max_cluster_size: 40,
            batch_size: 10,
        }
    }
}

fn cosine_distances(vs: &[&EmbeddingVector]) -> Vec<Vec<f64>> {
    vs.iter()
        .map(|a| vs.iter().map(|b| (1.0 - a.dot(b)).max(0.0)).collect())
        .collect()
}

fn threshold_components(vs: &[&EmbeddingVector], min_similarity: f64, min_size: usize) -> Vec<Option<usize>> {
    let n = vs.len();
    let mut comp: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if vs[i].dot(vs[j]) >= min_similarity - 1e-12 {
                let (a, b) = (find(&mut comp, i), find(&mut comp, j));
                comp[a.max(b)] = a.min(b);
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut comp, i)).collect();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &roots {
        *sizes.entry(*r).or_default() += 1;
    }
    roots
        .iter()
        .map(|r| (sizes[r] >= min_size.max(2)).then_some(*r))
        .collect()
}

/// Raw clustering of items already sorted by id: groups of member indices
/// plus noise indices.
fn cluster_indices(vs: &[&EmbeddingVector], params: &ClusterParams) -> (Vec<Vec<usize>>, Vec<usize>) {
    let labels = match params.method {
        ClusterMethod::Hdbscan => {
            let d = cosine_distances(vs);
            hdbscan::hdbscan(&d, params.min_cluster_size.max(2), params.min_cluster_size.max(2))
        }
        ClusterMethod::Threshold { min_similarity } => threshold_components(vs, min_similarity, params.min_cluster_size),
    };
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut noise = Vec::new();
    for (i, l) in labels.into_iter().enumerate() {
        match l {
            Some(l) => groups.entry(l).or_default().push(i),
            None => noise.push(i),
        }
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.sort_by_key(|g| g[0]);
    (groups, noise)
}

fn sorted_reps<'a>(reps: &[&'a MultiFieldRepresentation]) -> Vec<&'a MultiFieldRepresentation> {
    let mut sorted = reps.to_vec();
    sorted.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    sorted
}

/// Assign ids `n_0000, …` in order of smallest member id.
fn relabel(mut hoods: Vec<Neighborhood>) -> Vec<Neighborhood> {
    hoods.sort_by(|a, b| a.members[0].cmp(&b.members[0]));
    for (i, h) in hoods.iter_mut().enumerate() {
        h.id = format!("n_{i:04}");
    }
    hoods
}

/// Cluster representations into neighborhoods. Noise items become singleton
/// noise neighborhoods, so the output partitions the input.
pub fn cluster(reps: &[&MultiFieldRepresentation], params: &ClusterParams) -> Vec<Neighborhood> {
    let reps = sorted_reps(reps);
    let vs: Vec<&EmbeddingVector> = reps.iter().map(|r| &r.combined).collect();
    let (groups, noise) = cluster_indices(&vs, params);
    let mut hoods: Vec<Neighborhood> = groups
        .into_iter()
        .map(|g| Neighborhood {
            id: String::new(),
            members: g.into_iter().map(|i| reps[i].item_id.clone()).collect(),
            is_noise: false,
        })
        .collect();
    hoods.extend(noise.into_iter().map(|i| Neighborhood {
        id: String::new(),
        members: vec![reps[i].item_id.clone()],
        is_noise: true,
    }));
    relabel(hoods)
}

/// Split `n` until every part has at most `max_size` members.
///
/// Members are re-clustered among themselves. Members left as noise by the
/// re-clustering form one leftover part. When a re-clustering makes no
/// progress (no cluster, or one cluster holding everything) the sorted
/// members are cut into consecutive parts of `max_size`.
pub fn subcluster_oversized(
    n: &Neighborhood,
    reps: &BTreeMap<String, &MultiFieldRepresentation>,
    params: &ClusterParams,
) -> Vec<Neighborhood> {
    let max = params.max_cluster_size.max(1);
    if n.members.len() <= max {
        return vec![n.clone()];
    }
    let mut parts = Vec::new();
    split_recursive(n.members.clone(), reps, params, max, &mut parts);
    parts
        .into_iter()
        .enumerate()
        .map(|(i, members)| Neighborhood {
            id: format!("{}.{i}", n.id),
            members,
            is_noise: false,
        })
        .collect()
}

fn split_recursive(
    mut members: Vec<String>,
    reps: &BTreeMap<String, &MultiFieldRepresentation>,
    params: &ClusterParams,
    max: usize,
    out: &mut Vec<Vec<String>>,
) {
    members.sort();
    if members.len() <= max {
        out.push(members);
        return;
    }
    let vs: Vec<&EmbeddingVector> = members.iter().map(|m| &reps[m].combined).collect();
    let (groups, noise) = cluster_indices(&vs, params);
    let progress = !groups.is_empty() && groups.iter().all(|g| g.len() < members.len());
    if !progress {
        out.extend(members.chunks(max).map(<[String]>::to_vec));
        return;
    }
    for g in groups {
        split_recursive(g.into_iter().map(|i| members[i].clone()).collect(), reps, params, max, out);
    }
    if !noise.is_empty() {
        split_recursive(noise.into_iter().map(|i| members[i].clone()).collect(), reps, params, max, out);
    }
}

/// Cut a neighborhood into prompt batches of at most `k` sorted members.
pub fn batch(n: &Neighborhood, k: usize) -> Vec<Vec<String>> {
    let mut members = n.members.clone();
    members.sort();
    members.chunks(k.max(1)).map(<[String]>::to_vec).collect()
}

/// Neighborhoods of one resolution round: cluster, then subcluster anything
/// above `max_cluster_size`.
pub fn neighborhoods(reps: &[MultiFieldRepresentation], params: &ClusterParams) -> Vec<Neighborhood> {
    let refs: Vec<&MultiFieldRepresentation> = reps.iter().collect();
    let by_id: BTreeMap<String, &MultiFieldRepresentation> = reps.iter().map(|r| (r.item_id.clone(), r)).collect();
    let hoods = cluster(&refs, params)
        .into_iter()
        .flat_map(|h| {
            if h.is_noise {
                vec![h]
            } else {
                subcluster_oversized(&h, &by_id, params)
            }
        })
        .collect();
    relabel(hoods)
}

/// Prompt batches for a round: every non-noise neighborhood cut into batches
/// of `K`, then the noise items pooled in id order into residual batches.
pub fn plan_batches(hoods: &[Neighborhood], k: usize) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = hoods
        .iter()
        .filter(|h| !h.is_noise)
        .flat_map(|h| batch(h, k))
        .collect();
    let noise: Vec<String> = hoods
        .iter()
        .filter(|h| h.is_noise)
        .flat_map(|h| h.members.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    out.extend(noise.chunks(k.max(1)).map(<[String]>::to_vec));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::HashEmbedder;

    fn rep(id: &str, text: &str) -> MultiFieldRepresentation {
        build_representation(id, vec![Field::new("name", text, 1.0)], &HashEmbedder::default()).unwrap()
    }

    #[test]
    fn weighted_sum_against_direct_arithmetic() {
        let e = HashEmbedder::default();
        let r = build_representation(
            "x",
            vec![Field::new("name", "pump", 0.6), Field::new("desc", "a device", 0.4)],
            &e,
        )
        .unwrap();
        let norm = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let a = norm(e.vector("pump"));
        let b = norm(e.vector("a device"));
        let expected = norm(a.iter().zip(&b).map(|(x, y)| 0.6 * x + 0.4 * y).collect());
        for (g, w) in r.combined.0.iter().zip(&expected) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn single_field_and_identical_fields() {
        let e = HashEmbedder::default();
        let phi = embed_batch(&e, &["valve".to_string()], 32).unwrap().remove(0);
        assert_eq!(rep("x", "valve").combined, phi);
        let two = build_representation(
            "x",
            vec![Field::new("a", "valve", 0.3), Field::new("b", "valve", 0.7)],
            &e,
        )
        .unwrap();
        for (g, w) in two.combined.0.iter().zip(&phi.0) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_rejected() {
        let err = build_representation("x", vec![Field::new("a", "valve", 0.0)], &HashEmbedder::default()).unwrap_err();
        assert_eq!(err, NeighborhoodError::NoUsableField { item_id: "x".into() });
    }

    #[test]
    fn one_item_is_noise() {
        let r = rep("a", "pump");
        let hoods = cluster(&[&r], &ClusterParams::default());
        assert_eq!(hoods.len(), 1);
        assert!(hoods[0].is_noise);
    }

    #[test]
    fn batching_sizes() {
        let n = Neighborhood {
            id: "n".into(),
            members: (0..25).map(|i| format!("m{i:02}")).collect(),
            is_noise: false,
        };
        let sizes: Vec<usize> = batch(&n, 10).iter().map(Vec::len).collect();
        assert_eq!(sizes, [10, 10, 5]);
        assert_eq!(batch(&n, 10), batch(&n, 10));
    }
}
