//! HDBSCAN over a precomputed distance matrix.
//!
//! Core distances, mutual reachability, Prim's minimum spanning tree, the
//! single-linkage hierarchy, the condensed tree and excess-of-mass cluster
//! selection. The root is never selected, so a dataset without any split
//! into two sufficiently large groups is all noise.

/// Lambda used where a merge happens at distance zero.
pub const LAMBDA_MAX: f64 = 1e12;

fn lambda(dist: f64) -> f64 {
    if dist > 0.0 {
        (1.0 / dist).min(LAMBDA_MAX)
    } else {
        LAMBDA_MAX
    }
}

/// Distance to the `min_samples`-th nearest point, the point itself counted.
pub fn core_distances(dist: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    let n = dist.len();
    let k = min_samples.clamp(1, n.max(1));
    dist.iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(f64::total_cmp);
            r[k - 1]
        })
        .collect()
}

/// Minimum spanning tree of the mutual reachability graph as `(a, b, weight)`
/// edges, in the order Prim's algorithm adds them starting from point 0.
pub fn mutual_reachability_mst(dist: &[Vec<f64>], core: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = dist.len();
    if n < 2 {
        return Vec::new();
    }
    let mr = |a: usize, b: usize| dist[a][b].max(core[a]).max(core[b]);
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let w = mr(current, j);
            if w < best[j] {
                best[j] = w;
                from[j] = current;
            }
            if best[j] < next_w || next == usize::MAX {
                next_w = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next], next, next_w));
        current = next;
    }
    edges
}

/// One merge of the single-linkage hierarchy. Node ids below `n` are points,
/// `n + i` is the cluster created by merge `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

pub fn single_linkage(n: usize, mut mst: Vec<(usize, usize, f64)>) -> Vec<Merge> {
    mst.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.min(a.1).cmp(&b.0.min(b.1))).then(a.0.max(a.1).cmp(&b.0.max(b.1))));
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut size = vec![1usize; 2 * n];
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for (i, (a, b, w)) in mst.into_iter().enumerate() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let node = n + i;
        parent[ra] = node;
        parent[rb] = node;
        size[node] = size[ra] + size[rb];
        merges.push(Merge {
            left: ra,
            right: rb,
            distance: w,
            size: size[node],
        });
    }
    merges
}

/// Row of the condensed tree: `child` (point or cluster) leaves `parent` at `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondensedRow {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub size: usize,
}

/// Condensed tree. Cluster labels start at `n` (the root).
pub fn condense(n: usize, merges: &[Merge], min_cluster_size: usize) -> Vec<CondensedRow> {
    if merges.is_empty() {
        return Vec::new();
    }
    let size_of = |node: usize| if node < n { 1 } else { merges[node - n].size };
    let leaves = |node: usize| {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                stack.push(merges[x - n].right);
                stack.push(merges[x - n].left);
            }
        }
        out
    };
    let root = n + merges.len() - 1;
    let mut rows = Vec::new();
    let mut next_label = n + 1;
    // (hierarchy node, condensed label)
    let mut stack = vec![(root, n)];
    while let Some((node, label)) = stack.pop() {
        let m = merges[node - n];
        let lam = lambda(m.distance);
        let (ls, rs) = (size_of(m.left), size_of(m.right));
        let big_l = ls >= min_cluster_size;
        let big_r = rs >= min_cluster_size;
        if big_l && big_r {
            let (ll, rl) = (next_label, next_label + 1);
            next_label += 2;
            rows.push(CondensedRow { parent: label, child: ll, lambda: lam, size: ls });
            rows.push(CondensedRow { parent: label, child: rl, lambda: lam, size: rs });
            // right pushed first so the left subtree is labelled first
            stack.push((m.right, rl));
            stack.push((m.left, ll));
        } else {
            for (child, big) in [(m.left, big_l), (m.right, big_r)] {
                if big {
                    stack.push((child, label));
                } else {
                    for p in leaves(child) {
                        rows.push(CondensedRow { parent: label, child: p, lambda: lam, size: 1 });
                    }
                }
            }
        }
    }
    rows
}

/// Excess-of-mass selection; returns the selected cluster labels.
pub fn select_clusters(n: usize, rows: &[CondensedRow]) -> Vec<usize> {
    let Some(max_label) = rows.iter().map(|r| r.parent.max(r.child)).filter(|&l| l >= n).max() else {
        return Vec::new();
    };
    let count = max_label - n + 1;
    let mut birth = vec![0.0f64; count];
    let mut parent_of = vec![usize::MAX; count];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); count];
    for r in rows.iter().filter(|r| r.child >= n) {
        birth[r.child - n] = r.lambda;
        parent_of[r.child - n] = r.parent;
        children[r.parent - n].push(r.child);
    }
    let mut stability = vec![0.0f64; count];
    for r in rows {
        stability[r.parent - n] += (r.lambda - birth[r.parent - n]) * r.size as f64;
    }
    let mut selected = vec![false; count];
    // labels are assigned parent-before-child, so descending order is bottom-up
    for c in (1..count).rev() {
        let child_sum: f64 = children[c].iter().map(|&ch| stability[ch - n]).sum();
        if children[c].is_empty() || stability[c] >= child_sum {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(d) = stack.pop() {
                selected[d - n] = false;
                stack.extend(children[d - n].iter().copied());
            }
        } else {
            stability[c] = child_sum;
        }
    }
    (1..count).filter(|&c| selected[c]).map(|c| c + n).collect()
}

/// Full HDBSCAN. Returns one label per point, `None` for noise. Cluster labels
/// are dense and numbered by the smallest point they contain.
pub fn hdbscan(dist: &[Vec<f64>], min_cluster_size: usize, min_samples: usize) -> Vec<Option<usize>> {
    let n = dist.len();
    if n < 2 || min_cluster_size > n {
        return vec![None; n];
    }
    let core = core_distances(dist, min_samples);
    let mst = mutual_reachability_mst(dist, &core);
    let merges = single_linkage(n, mst);
    let rows = condense(n, &merges, min_cluster_size.max(2));
    let selected = select_clusters(n, &rows);

    let mut parent = vec![usize::MAX; n + rows.len() + 1];
    for r in &rows {
        parent[r.child] = r.parent;
    }
    let mut raw = vec![None; n];
    for (p, slot) in raw.iter_mut().enumerate() {
        let mut c = parent[p];
        while c != usize::MAX && c != n {
            if selected.contains(&c) {
                *slot = Some(c);
                break;
            }
            c = parent[c];
        }
    }
    // renumber by smallest member
    let mut order: Vec<usize> = Vec::new();
    for l in raw.iter().flatten() {
        if !order.contains(l) {
            order.push(*l);
        }
    }
    raw.iter()
        .map(|l| l.map(|l| order.iter().position(|&o| o == l).unwrap()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> Vec<Vec<f64>> {
        points
            .iter()
            .map(|a| points.iter().map(|b| (a - b).abs()).collect())
            .collect()
    }

    #[test]
    fn two_blobs_on_a_line() {
        let d = line(&[0.0, 0.1, 0.2, 0.15, 10.0, 10.1, 10.2, 10.05]);
        let labels = hdbscan(&d, 3, 3);
        assert_eq!(labels[..4], [Some(0); 4]);
        assert_eq!(labels[4..], [Some(1); 4]);
    }

    #[test]
    fn single_blob_is_noise_without_root_selection() {
        let d = line(&[0.0, 0.1, 0.2]);
        assert_eq!(hdbscan(&d, 2, 2), vec![None; 3]);
    }

    #[test]
    fn outlier_is_noise() {
        let d = line(&[0.0, 0.1, 0.2, 5.0, 5.1, 5.2, 100.0]);
        let labels = hdbscan(&d, 3, 3);
        assert_eq!(labels[6], None);
        assert_eq!(labels[0], Some(0));
        assert_eq!(labels[3], Some(1));
    }

    #[test]
    fn mst_has_n_minus_one_edges_and_minimal_weight() {
        let d = line(&[0.0, 3.0, 1.0, 7.0]);
        let core = vec![0.0; 4];
        let mst = mutual_reachability_mst(&d, &core);
        assert_eq!(mst.len(), 3);
        let total: f64 = mst.iter().map(|e| e.2).sum();
        assert!((total - 7.0).abs() < 1e-12);
    }

    #[test]
    fn core_distance_counts_self() {
        let d = line(&[0.0, 1.0, 3.0]);
        assert_eq!(core_distances(&d, 1), vec![0.0, 0.0, 0.0]);
        assert_eq!(core_distances(&d, 2), vec![1.0, 1.0, 2.0]);
    }
}
