//! Ward-linkage agglomerative clustering by the nearest-neighbor chain
//! algorithm, with clusters represented by size and centroid.

/// One agglomeration step. Node ids `0..n` are leaves; merge `i` creates
/// node `n + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    /// Ward linkage height, `sqrt(2|A||B|/(|A|+|B|)) * ||c_A - c_B||`.
    pub height: f64,
    pub size: usize,
}

struct Node {
    centroid: Vec<f64>,
    size: usize,
    /// Rank of the lexicographically smallest member label.
    key: usize,
}

fn ward_sq(a: &Node, b: &Node) -> f64 {
    let d2: f64 = a.centroid.iter().zip(&b.centroid).map(|(x, y)| (x - y) * (x - y)).sum();
    let (na, nb) = (a.size as f64, b.size as f64);
    2.0 * na * nb / (na + nb) * d2
}

/// Builds the full merge tree. `keys[i]` orders leaves for tie-breaking;
/// among equidistant candidates the one holding the smallest key wins.
pub fn ward_tree(points: &[Vec<f64>], keys: &[usize]) -> Vec<Merge> {
    let n = points.len();
    assert_eq!(n, keys.len());
    if n < 2 {
        return Vec::new();
    }
    let mut nodes: Vec<Node> = points
        .iter()
        .zip(keys)
        .map(|(p, &k)| Node {
            centroid: p.clone(),
            size: 1,
            key: k,
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::new();

    while active.len() > 1 {
        if chain.is_empty() {
            let start = *active.iter().min_by_key(|&&i| nodes[i].key).expect("non-empty");
            chain.push(start);
        }
        let a = *chain.last().expect("non-empty chain");
        let prev = chain.len().checked_sub(2).map(|i| chain[i]);

        let mut best: Option<(usize, f64)> = prev.map(|p| (p, ward_sq(&nodes[a], &nodes[p])));
        for &c in &active {
            if c == a || Some(c) == prev {
                continue;
            }
            let d = ward_sq(&nodes[a], &nodes[c]);
            let better = match best {
                None => true,
                Some((b, bd)) => d < bd || (d == bd && Some(b) != prev && nodes[c].key < nodes[b].key),
            };
            if better {
                best = Some((c, d));
            }
        }
        let (b, d) = best.expect("at least two active clusters");

        if Some(b) == prev {
            chain.truncate(chain.len() - 2);
            let (na, nb) = (nodes[a].size, nodes[b].size);
            let total = na + nb;
            let centroid = nodes[a]
                .centroid
                .iter()
                .zip(&nodes[b].centroid)
                .map(|(x, y)| (x * na as f64 + y * nb as f64) / total as f64)
                .collect();
            let (left, right) = if nodes[a].key <= nodes[b].key { (a, b) } else { (b, a) };
            merges.push(Merge {
                left,
                right,
                height: d.max(0.0).sqrt(),
                size: total,
            });
            let id = nodes.len();
            nodes.push(Node {
                centroid,
                size: total,
                key: nodes[a].key.min(nodes[b].key),
            });
            active.retain(|&i| i != a && i != b);
            active.push(id);
        } else {
            chain.push(b);
        }
    }
    merges
}

/// Splits the tree top-down until every part has at most `max_size`
/// leaves. Returns leaf-index groups.
pub fn split_by_size(n: usize, merges: &[Merge], max_size: usize) -> Vec<Vec<usize>> {
    assert!(max_size >= 1);
    if n == 0 {
        return Vec::new();
    }
    let size = |id: usize| if id < n { 1 } else { merges[id - n].size };
    let leaves = |id: usize| {
        let mut out = Vec::new();
        let mut stack = vec![id];
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
    let root = if n == 1 { 0 } else { n + merges.len() - 1 };
    let mut groups = Vec::new();
    let mut stack = vec![root];
    while let Some(id) = stack.pop() {
        if size(id) <= max_size {
            groups.push(leaves(id));
        } else {
            let m = &merges[id - n];
            stack.push(m.right);
            stack.push(m.left);
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    /// Textbook greedy agglomeration: merge the globally closest pair each
    /// step. Independent of the chain bookkeeping above.
    fn greedy(points: &[Vec<f64>]) -> Vec<(BTreeSet<usize>, f64)> {
        let mut clusters: Vec<(BTreeSet<usize>, Vec<f64>)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (BTreeSet::from([i]), p.clone()))
            .collect();
        let mut out = Vec::new();
        while clusters.len() > 1 {
            let mut best = (0, 1, f64::INFINITY);
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let (a, b) = (&clusters[i], &clusters[j]);
                    let (na, nb) = (a.0.len() as f64, b.0.len() as f64);
                    let d2: f64 = a.1.iter().zip(&b.1).map(|(x, y)| (x - y).powi(2)).sum();
                    let d = (2.0 * na * nb / (na + nb) * d2).sqrt();
                    if d < best.2 {
                        best = (i, j, d);
                    }
                }
            }
            let (i, j, d) = best;
            let b = clusters.remove(j);
            let a = clusters.remove(i);
            let (na, nb) = (a.0.len() as f64, b.0.len() as f64);
            let c: Vec<f64> = a.1.iter().zip(&b.1).map(|(x, y)| (x * na + y * nb) / (na + nb)).collect();
            let members: BTreeSet<usize> = a.0.union(&b.0).copied().collect();
            out.push((members.clone(), d));
            clusters.push((members, c));
        }
        out
    }

    fn members(n: usize, merges: &[Merge], id: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(x) = stack.pop() {
            if x < n {
                out.insert(x);
            } else {
                stack.push(merges[x - n].left);
                stack.push(merges[x - n].right);
            }
        }
        out
    }

    #[test]
    fn chain_matches_greedy_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = rng.random_range(2..30);
            let points: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
            let keys: Vec<usize> = (0..n).collect();
            let merges = ward_tree(&points, &keys);
            assert_eq!(merges.len(), n - 1);
            let mut ours: Vec<(BTreeSet<usize>, f64)> = merges
                .iter()
                .enumerate()
                .map(|(i, m)| (members(n, &merges, n + i), m.height))
                .collect();
            let mut theirs = greedy(&points);
            ours.sort_by(|a, b| a.1.total_cmp(&b.1));
            theirs.sort_by(|a, b| a.1.total_cmp(&b.1));
            for (o, t) in ours.iter().zip(&theirs) {
                assert_eq!(o.0, t.0, "trial {trial}");
                assert!((o.1 - t.1).abs() < 1e-9 * t.1.max(1.0), "trial {trial}");
            }
        }
    }

    #[test]
    fn split_respects_cap_and_partitions() {
        let points: Vec<Vec<f64>> = (0..45).map(|_| vec![1.0, 0.0]).collect();
        let keys: Vec<usize> = (0..45).collect();
        let merges = ward_tree(&points, &keys);
        let groups = split_by_size(45, &merges, 20);
        assert!(groups.iter().all(|g| !g.is_empty() && g.len() <= 20));
        let mut all: Vec<usize> = groups.concat();
        all.sort();
        assert_eq!(all, keys);
        // Identical inputs give an identical tree.
        assert_eq!(ward_tree(&points, &keys), merges);
    }

    #[test]
    fn singleton_and_pair() {
        assert!(ward_tree(&[vec![0.0]], &[0]).is_empty());
        assert_eq!(split_by_size(1, &[], 20), vec![vec![0]]);
        let m = ward_tree(&[vec![0.0], vec![3.0]], &[1, 0]);
        assert_eq!((m[0].left, m[0].right), (1, 0));
        // sqrt(2 * 1 * 1 / 2) * 3
        assert!((m[0].height - 3.0).abs() < 1e-12);
    }
}
