//! Structural and representational graph metrics and the composite scores
//! built from them. Word counts use [`crate::text::words`].

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ContextEnrichedGraph;
use crate::text::words;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("source text has no words")]
    EmptySource,
}

/// Minimal view of a graph: node names and directed edges by node index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphView {
    pub names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub predicates: Vec<String>,
}

impl GraphView {
    pub fn from_graph(g: &ContextEnrichedGraph) -> Self {
        let index: BTreeMap<&str, usize> = g.entities.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
        let mut view = GraphView {
            names: g.entities.iter().map(|e| e.canonical_name.clone()).collect(),
            ..GraphView::default()
        };
        for r in &g.relations {
            if let (Some(&s), Some(&o)) = (index.get(r.subject.as_str()), index.get(r.object.as_str())) {
                view.edges.push((s, o));
                view.predicates.push(r.predicate().to_string());
            }
        }
        view
    }

    /// Nodes are the distinct names in order of first appearance.
    pub fn from_triples(triples: &[(String, String, String)]) -> Self {
        let mut view = GraphView::default();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut node = |name: &str, names: &mut Vec<String>| {
            *index.entry(name.to_string()).or_insert_with(|| {
                names.push(name.to_string());
                names.len() - 1
            })
        };
        for (s, p, o) in triples {
            let a = node(s, &mut view.names);
            let b = node(o, &mut view.names);
            view.edges.push((a, b));
            view.predicates.push(p.clone());
        }
        view
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Undirected simple projection: parallel edges collapsed, self-loops dropped.
    pub fn undirected(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.names.len()];
        for &(a, b) in &self.edges {
            if a != b {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        adj
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Share of nodes in the largest weakly connected component.
pub fn connectivity(g: &GraphView) -> Result<f64, MetricsError> {
    let n = g.node_count();
    if n == 0 {
        return Err(MetricsError::EmptyGraph);
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for &(a, b) in &g.edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut sizes = vec![0usize; n];
    for v in 0..n {
        let r = find(&mut parent, v);
        sizes[r] += 1;
    }
    Ok(*sizes.iter().max().unwrap() as f64 / n as f64)
}

/// Mean local clustering on the undirected simple projection; nodes of
/// degree below two contribute zero. Zero for an empty graph.
pub fn clustering_coefficient(g: &GraphView) -> f64 {
    let adj = g.undirected();
    if adj.is_empty() {
        return 0.0;
    }
    let total: f64 = adj
        .iter()
        .map(|nbrs| {
            let k = nbrs.len();
            if k < 2 {
                return 0.0;
            }
            let nv: Vec<usize> = nbrs.iter().copied().collect();
            let mut links = 0usize;
            for (i, &u) in nv.iter().enumerate() {
                links += nv[i + 1..].iter().filter(|w| adj[u].contains(w)).count();
            }
            2.0 * links as f64 / (k * (k - 1)) as f64
        })
        .sum();
    total / adj.len() as f64
}

/// `|E| / |V|`; zero for an empty graph.
pub fn avg_degree(g: &GraphView) -> f64 {
    if g.node_count() == 0 {
        0.0
    } else {
        g.edge_count() as f64 / g.node_count() as f64
    }
}

pub fn avg_entity_words(names: &[String]) -> f64 {
    if names.is_empty() {
        return 0.0;
    }
    names.iter().map(|n| words(n).len()).sum::<usize>() as f64 / names.len() as f64
}

/// Share of entity names containing a 4-word sequence that appears
/// verbatim in the source. Shorter names cannot leak.
pub fn leakage(names: &[String], source: &str) -> Result<f64, MetricsError> {
    let src = words(source);
    if src.is_empty() {
        return Err(MetricsError::EmptySource);
    }
    if names.is_empty() {
        return Ok(0.0);
    }
    let grams: HashSet<&[String]> = src.windows(4).collect();
    let leaking = names
        .iter()
        .filter(|n| words(n).windows(4).any(|w| grams.contains(w)))
        .count();
    Ok(leaking as f64 / names.len() as f64)
}

/// Words in one predicate; underscores separate words.
pub fn predicate_words(p: &str) -> usize {
    words(&p.replace('_', " ")).len()
}

/// Total triple word count over source word count.
pub fn tricr(triples: &[(String, String, String)], source: &str) -> Result<f64, MetricsError> {
    let n = words(source).len();
    if n == 0 {
        return Err(MetricsError::EmptySource);
    }
    let total: usize = triples
        .iter()
        .map(|(s, p, o)| words(s).len() + predicate_words(p) + words(o).len())
        .sum();
    Ok(total as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StructuralReport {
    pub node_count: f64,
    pub edge_count: f64,
    pub avg_entity_words: f64,
    pub avg_degree: f64,
    pub connectivity: f64,
    pub clustering: f64,
}

impl StructuralReport {
    pub fn compute(g: &GraphView) -> Result<Self, MetricsError> {
        Ok(StructuralReport {
            node_count: g.node_count() as f64,
            edge_count: g.edge_count() as f64,
            avg_entity_words: avg_entity_words(&g.names),
            avg_degree: avg_degree(g),
            connectivity: connectivity(g)?,
            clustering: clustering_coefficient(g),
        })
    }

    pub fn macro_average(reports: &[StructuralReport]) -> StructuralReport {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&StructuralReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        StructuralReport {
            node_count: mean(|r| r.node_count),
            edge_count: mean(|r| r.edge_count),
            avg_entity_words: mean(|r| r.avg_entity_words),
            avg_degree: mean(|r| r.avg_degree),
            connectivity: mean(|r| r.connectivity),
            clustering: mean(|r| r.clustering),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Composites {
    pub rwa: f64,
    pub egu: f64,
    pub sci: f64,
}

/// Retrieval accuracy weighted by connectivity, its leakage-penalized form,
/// and the structural density index.
pub fn composites(ret_acc: f64, s: &StructuralReport, leak: f64) -> Composites {
    let rwa = ret_acc * s.connectivity;
    Composites {
        rwa,
        egu: rwa * (1.0 - leak),
        sci: s.avg_degree * s.clustering * s.connectivity,
    }
}

/// Metrics that need no retrieval: structure, leakage and compression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphScore {
    pub structural: StructuralReport,
    pub leak: f64,
    pub tricr: f64,
}

impl GraphScore {
    /// Score a graph given as triples; node names are the entity names.
    pub fn compute(triples: &[(String, String, String)], source: &str) -> Result<Self, MetricsError> {
        let view = GraphView::from_triples(triples);
        Self::compute_view(&view, triples, source)
    }

    pub fn compute_view(view: &GraphView, triples: &[(String, String, String)], source: &str) -> Result<Self, MetricsError> {
        Ok(GraphScore {
            structural: StructuralReport::compute(view)?,
            leak: leakage(&view.names, source)?,
            tricr: tricr(triples, source)?,
        })
    }

    pub fn macro_average(scores: &[GraphScore]) -> GraphScore {
        let n = scores.len().max(1) as f64;
        let structural: Vec<StructuralReport> = scores.iter().map(|s| s.structural).collect();
        GraphScore {
            structural: StructuralReport::macro_average(&structural),
            leak: scores.iter().map(|s| s.leak).sum::<f64>() / n,
            tricr: scores.iter().map(|s| s.tricr).sum::<f64>() / n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(n: usize, edges: &[(usize, usize)]) -> GraphView {
        GraphView {
            names: (0..n).map(|i| format!("n{i}")).collect(),
            edges: edges.to_vec(),
            predicates: vec!["p".into(); edges.len()],
        }
    }

    #[test]
    fn triangle_and_star() {
        let tri = view(3, &[(0, 1), (1, 2), (2, 0)]);
        assert_eq!(connectivity(&tri), Ok(1.0));
        assert_eq!(clustering_coefficient(&tri), 1.0);
        let star = view(4, &[(0, 1), (0, 2), (0, 3)]);
        assert_eq!(clustering_coefficient(&star), 0.0);
        assert_eq!(connectivity(&view(4, &[(0, 1), (1, 2)])), Ok(0.75));
        assert_eq!(connectivity(&view(0, &[])), Err(MetricsError::EmptyGraph));
    }

    #[test]
    fn parallel_edges_and_loops_do_not_cluster() {
        let g = view(3, &[(0, 1), (1, 0), (1, 1), (1, 2), (2, 0), (0, 2)]);
        assert_eq!(clustering_coefficient(&g), 1.0);
    }

    #[test]
    fn leakage_cases() {
        let src = "the quick brown fox jumps over the lazy dog";
        let names: Vec<String> = ["Fox", "quick brown fox jumps over", "Dog", "lazy red dog park"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(leakage(&names, src), Ok(0.25));
        assert_eq!(leakage(&names[..1], src), Ok(0.0));
    }

    #[test]
    fn tricr_counts_words() {
        let t = vec![("Alice".to_string(), "works_at".to_string(), "Acme".to_string())];
        assert_eq!(tricr(&t, "Alice works at Acme."), Ok(1.0));
        assert_eq!(tricr(&[], "x"), Ok(0.0));
    }

    #[test]
    fn composite_identities() {
        let s = StructuralReport {
            connectivity: 1.0,
            ..Default::default()
        };
        let c = composites(0.7, &s, 0.0);
        assert_eq!((c.rwa, c.egu), (0.7, 0.7));
    }

    #[test]
    fn macro_average_differs_from_pooled_ratio() {
        let a = StructuralReport::compute(&view(2, &[(0, 1)])).unwrap();
        let b = StructuralReport::compute(&view(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (1, 3)])).unwrap();
        let m = StructuralReport::macro_average(&[a, b]);
        assert_eq!(m.avg_degree, (0.5 + 1.5) / 2.0);
        assert_ne!(m.avg_degree, m.edge_count / m.node_count);
    }
}
