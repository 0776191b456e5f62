//! Spatial coarsening of node sets: farthest-point cluster seeding on the
//! canonical geometry, nearest-seed assignment, mean feature pooling and
//! cluster-level adjacency. Everything here is deterministic given its
//! inputs, so a pooling hierarchy can be rebuilt or reloaded bit-for-bit.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;
use crate::mesh::Vec3;

/// One coarsening step: `assignment[i]` is the cluster of input node `i`,
/// clusters are `0..cluster_count`, and the pooled graph carries its own
/// adjacency plus mean member positions for the next level.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingLevel {
    pub assignment: Vec<u32>,
    pub cluster_count: usize,
    pub pooled_adjacency: SparseAdjacency,
    pub pooled_positions: Vec<Vec3>,
}

/// Chain of coarsening steps applied at fixed depths of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingHierarchy {
    pub input_nodes: usize,
    pub ratio: u32,
    pub seed: u64,
    pub levels: Vec<PoolingLevel>,
}

impl PoolingHierarchy {
    /// Node counts from the input level down through every pooled level.
    pub fn node_counts(&self) -> Vec<usize> {
        let mut counts = vec![self.input_nodes];
        counts.extend(self.levels.iter().map(|l| l.cluster_count));
        counts
    }
}

fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Clusters `positions` into `k` groups: the first seed is the node nearest
/// the centroid of all positions, subsequent seeds are chosen
/// farthest-point, and every node joins its nearest seed (ties break toward
/// the lower cluster index). Each seed is pinned to its own cluster, so all
/// `k` clusters are nonempty.
pub fn compute_clusters_k(positions: &[Vec3], k: usize) -> Result<Vec<u32>> {
    let n = positions.len();
    if k == 0 || k > n {
        return Err(Error::Shape(format!(
            "cannot form {k} clusters from {n} nodes"
        )));
    }
    let mut centroid = [0.0f64; 3];
    for p in positions {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for a in 0..3 {
        centroid[a] /= n as f64;
    }

    let mut seeds = Vec::with_capacity(k);
    let first = (0..n)
        .min_by(|&i, &j| {
            dist2(positions[i], centroid)
                .partial_cmp(&dist2(positions[j], centroid))
                .unwrap()
        })
        .unwrap();
    seeds.push(first);

    // min_d[i] = squared distance from node i to the nearest chosen seed.
    let mut min_d: Vec<f64> = positions.iter().map(|&p| dist2(p, positions[first])).collect();
    while seeds.len() < k {
        let far = (0..n)
            .max_by(|&i, &j| min_d[i].partial_cmp(&min_d[j]).unwrap())
            .unwrap();
        seeds.push(far);
        for i in 0..n {
            let d = dist2(positions[i], positions[far]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }

    let mut assignment = vec![0u32; n];
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = dist2(positions[i], positions[seeds[0]]);
        for (c, &s) in seeds.iter().enumerate().skip(1) {
            let d = dist2(positions[i], positions[s]);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignment[i] = best as u32;
    }
    for (c, &s) in seeds.iter().enumerate() {
        assignment[s] = c as u32;
    }
    Ok(assignment)
}

/// Clusters at the standard reduction `k = max(1, n / ratio)`.
pub fn compute_clusters(positions: &[Vec3], ratio: u32) -> Result<Vec<u32>> {
    if ratio == 0 {
        return Err(Error::Config("pooling ratio must be positive".into()));
    }
    let k = (positions.len() / ratio as usize).max(1);
    compute_clusters_k(positions, k)
}

pub fn cluster_sizes(assignment: &[u32], k: usize) -> Result<Vec<usize>> {
    let mut sizes = vec![0usize; k];
    for &c in assignment {
        if c as usize >= k {
            return Err(Error::Shape(format!(
                "assignment references cluster {c} out of {k}"
            )));
        }
        sizes[c as usize] += 1;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Shape("assignment leaves an empty cluster".into()));
    }
    Ok(sizes)
}

/// Pools the trailing node axis of `data` (viewed as `[outer, n]`) to
/// `[outer, k]` by unweighted mean over each cluster's members.
pub fn pool_node_axis<F: Float>(
    data: &[F],
    n: usize,
    assignment: &[u32],
    k: usize,
) -> Result<Vec<F>> {
    if n == 0 || data.len() % n != 0 || assignment.len() != n {
        return Err(Error::Shape(format!(
            "pool_node_axis: data len {} not compatible with n {n}",
            data.len()
        )));
    }
    let sizes = cluster_sizes(assignment, k)?;
    let outer = data.len() / n;
    let mut out = vec![F::zero(); outer * k];
    for o in 0..outer {
        let src = &data[o * n..(o + 1) * n];
        let dst = &mut out[o * k..(o + 1) * k];
        for (i, &v) in src.iter().enumerate() {
            dst[assignment[i] as usize] = dst[assignment[i] as usize] + v;
        }
        for (c, d) in dst.iter_mut().enumerate() {
            *d = *d / F::from(sizes[c]).unwrap();
        }
    }
    Ok(out)
}

/// Cluster-level adjacency: clusters `p` and `q` are adjacent iff some
/// member of `p` is adjacent to some member of `q`; every cluster keeps a
/// self edge.
pub fn pool_adjacency(
    adj: &SparseAdjacency,
    assignment: &[u32],
    k: usize,
) -> Result<SparseAdjacency> {
    if assignment.len() != adj.node_count() {
        return Err(Error::Shape("assignment length != node count".into()));
    }
    cluster_sizes(assignment, k)?;
    let mut pairs = Vec::new();
    for (i, j) in adj.entries() {
        let (p, q) = (assignment[i as usize], assignment[j as usize]);
        if p != q {
            pairs.push((p, q));
        }
    }
    SparseAdjacency::from_pairs_symmetrized(k, &pairs)
}

/// Builds `levels` successive coarsenings of a node set, each reducing the
/// node count by `floor(n / ratio)` (never below 1). `seed` is recorded for
/// provenance; the construction itself is deterministic.
pub fn build_hierarchy(
    positions: &[Vec3],
    adjacency: &SparseAdjacency,
    ratio: u32,
    levels: usize,
    seed: u64,
) -> Result<PoolingHierarchy> {
    if positions.len() != adjacency.node_count() {
        return Err(Error::Shape(
            "positions and adjacency disagree on node count".into(),
        ));
    }
    let mut out = PoolingHierarchy {
        input_nodes: positions.len(),
        ratio,
        seed,
        levels: Vec::with_capacity(levels),
    };
    let mut pos = positions.to_vec();
    let mut adj = adjacency.clone();
    for _ in 0..levels {
        let n = pos.len();
        let k = (n / ratio as usize).max(1);
        let assignment = compute_clusters_k(&pos, k)?;
        let pooled_adjacency = pool_adjacency(&adj, &assignment, k)?;
        let flat: Vec<f64> = pos.iter().flat_map(|p| p.iter().copied()).collect();
        // Pool x/y/z as three "outer" rows by viewing coordinates per axis.
        let mut pooled_positions = vec![[0.0f64; 3]; k];
        for axis in 0..3 {
            let row: Vec<f64> = (0..n).map(|i| flat[i * 3 + axis]).collect();
            let pooled = pool_node_axis(&row, n, &assignment, k)?;
            for (c, v) in pooled.into_iter().enumerate() {
                pooled_positions[c][axis] = v;
            }
        }
        out.levels.push(PoolingLevel {
            assignment,
            cluster_count: k,
            pooled_adjacency: pooled_adjacency.clone(),
            pooled_positions: pooled_positions.clone(),
        });
        pos = pooled_positions;
        adj = pooled_adjacency;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn line_positions(n: usize) -> Vec<Vec3> {
        (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn line_splits_into_contiguous_halves() {
        let pos = line_positions(8);
        let a = compute_clusters_k(&pos, 2).unwrap();
        // First seed is the node nearest the centroid (x = 3.5 -> node 3),
        // second is the farthest point (node 7); everything left of the
        // midpoint joins cluster 0.
        assert_eq!(a, vec![0, 0, 0, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn every_cluster_is_nonempty() {
        let mut rng = StdRng::seed_from_u64(3);
        for n in [5usize, 16, 53, 100] {
            let pos: Vec<Vec3> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let k = (n / 4).max(1);
            let a = compute_clusters_k(&pos, k).unwrap();
            let sizes = cluster_sizes(&a, k).unwrap();
            assert_eq!(sizes.len(), k);
            assert_eq!(sizes.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn pooled_features_are_cluster_means() {
        let assignment = vec![0u32, 0, 1, 1, 1];
        let data = vec![1.0f64, 3.0, 2.0, 4.0, 6.0, /* second row */ 10.0, 10.0, 10.0, 10.0, 10.0];
        let out = pool_node_axis(&data, 5, &assignment, 2).unwrap();
        assert_eq!(out, vec![2.0, 4.0, 10.0, 10.0]);
    }

    #[test]
    fn pooling_preserves_constant_fields() {
        let assignment = vec![0u32, 1, 0, 2, 1, 2, 0];
        let data = vec![0.75f32; 7];
        let out = pool_node_axis(&data, 7, &assignment, 3).unwrap();
        assert!(out.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn pooled_adjacency_links_bridged_clusters_only() {
        // Path 0-1-2-3 plus an isolated pair 4-5.
        let adj = SparseAdjacency::from_pairs_symmetrized(
            6,
            &[(0, 1), (1, 2), (2, 3), (4, 5)],
        )
        .unwrap();
        let assignment = vec![0u32, 0, 1, 1, 2, 2];
        let pooled = pool_adjacency(&adj, &assignment, 3).unwrap();
        assert!(pooled.has_edge(0, 1) && pooled.has_edge(1, 0));
        assert!(!pooled.has_edge(0, 2) && !pooled.has_edge(1, 2));
        assert!(pooled.has_unit_diagonal() && pooled.is_symmetric());
    }

    #[test]
    fn pooled_adjacency_matches_dense_reference() {
        let mut rng = StdRng::seed_from_u64(9);
        let n = 24;
        let mut pairs = Vec::new();
        for i in 0..n as u32 {
            for j in (i + 1)..n as u32 {
                if rng.gen_bool(0.15) {
                    pairs.push((i, j));
                }
            }
        }
        let adj = SparseAdjacency::from_pairs_symmetrized(n, &pairs).unwrap();
        let assignment: Vec<u32> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        if cluster_sizes(&assignment, 5).is_err() {
            return; // extremely unlikely with n = 24
        }
        let pooled = pool_adjacency(&adj, &assignment, 5).unwrap();
        for p in 0..5 {
            for q in 0..5 {
                let mut expect = p == q;
                for i in 0..n {
                    for j in 0..n {
                        if assignment[i] as usize == p
                            && assignment[j] as usize == q
                            && adj.has_edge(i, j)
                        {
                            expect = true;
                        }
                    }
                }
                assert_eq!(pooled.has_edge(p, q), expect, "clusters {p},{q}");
            }
        }
    }

    #[test]
    fn hierarchy_counts_follow_quarter_reduction() {
        let mut rng = StdRng::seed_from_u64(5);
        let pos: Vec<Vec3> = (0..100)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..0.5),
                ]
            })
            .collect();
        let adj = SparseAdjacency::full(100);
        let h = build_hierarchy(&pos, &adj, 4, 3, 0).unwrap();
        assert_eq!(h.node_counts(), vec![100, 25, 6, 1]);
    }

    #[test]
    fn clustering_is_deterministic() {
        let pos = line_positions(20);
        let a = compute_clusters(&pos, 4).unwrap();
        let b = compute_clusters(&pos, 4).unwrap();
        assert_eq!(a, b);
    }
}
