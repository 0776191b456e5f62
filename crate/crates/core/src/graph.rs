//! Binary node adjacency shared by graph construction, pooling and the
//! network's propagation steps. Stored as sorted neighbor lists; for every
//! graph built by this crate the matrix is symmetric with a unit diagonal
//! (every node has a self edge).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseAdjacency {
    n: usize,
    rows: Vec<Vec<u32>>,
}

impl SparseAdjacency {
    /// Builds from per-node neighbor lists. Lists are sorted and deduped;
    /// indices are validated.
    pub fn from_rows(rows: Vec<Vec<u32>>) -> Result<Self> {
        let n = rows.len();
        let mut rows = rows;
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&last) = row.last() {
                if last as usize >= n {
                    return Err(Error::Shape(format!(
                        "adjacency row {i} references node {last} out of {n}"
                    )));
                }
            }
        }
        Ok(Self { n, rows })
    }

    /// Builds from an edge pair list, symmetrizing and adding the diagonal.
    pub fn from_pairs_symmetrized(n: usize, pairs: &[(u32, u32)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for i in 0..n {
            rows[i].push(i as u32);
        }
        for &(i, j) in pairs {
            if i as usize >= n || j as usize >= n {
                return Err(Error::Shape(format!(
                    "edge ({i},{j}) out of range for {n} nodes"
                )));
            }
            rows[i as usize].push(j);
            rows[j as usize].push(i);
        }
        Self::from_rows(rows)
    }

    /// Self-loops only.
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            rows: (0..n as u32).map(|i| vec![i]).collect(),
        }
    }

    /// Every node adjacent to every node (including itself).
    pub fn full(n: usize) -> Self {
        let all: Vec<u32> = (0..n as u32).collect();
        Self {
            n,
            rows: vec![all; n],
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&(j as u32)).is_ok()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.rows[i].len()
    }

    /// Average row sum of the adjacency matrix (self edge included).
    pub fn avg_degree(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let total: usize = self.rows.iter().map(Vec::len).sum();
        total as f64 / self.n as f64
    }

    /// Number of stored entries (directed count; diagonal included).
    pub fn entry_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Number of undirected off-diagonal edges.
    pub fn undirected_edge_count(&self) -> usize {
        let offdiag: usize = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().filter(|&&j| j as usize != i).count())
            .sum();
        offdiag / 2
    }

    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.n {
            for &j in &self.rows[i] {
                if !self.has_edge(j as usize, i) {
                    return false;
                }
            }
        }
        true
    }

    pub fn has_unit_diagonal(&self) -> bool {
        (0..self.n).all(|i| self.has_edge(i, i))
    }

    /// True iff every edge of `self` is also an edge of `other`.
    pub fn is_subset_of(&self, other: &SparseAdjacency) -> bool {
        if self.n != other.n {
            return false;
        }
        (0..self.n).all(|i| self.rows[i].iter().all(|&j| other.has_edge(i, j as usize)))
    }

    /// All stored `(i, j)` entries (diagonal included), row-major.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| (i as u32, j)))
    }

    /// Relabels nodes by `perm` (new index of old node `i` is `perm[i]`).
    pub fn permuted(&self, perm: &[u32]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::Shape("permutation length mismatch".into()));
        }
        let mut rows = vec![Vec::new(); self.n];
        for (i, row) in self.rows.iter().enumerate() {
            let ni = perm[i] as usize;
            for &j in row {
                rows[ni].push(perm[j as usize]);
            }
        }
        Self::from_rows(rows)
    }
}
