//! Compressed sparse row matrices used for graph propagation along the
//! node axis. Matrices are constants of the computation (never trained),
//! but multiplication routes gradients through the transpose.

use super::Real;
use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<F> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    data: Vec<F>,
}

impl<F: Real> SparseMatrix<F> {
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, F)>,
    ) -> Result<Self> {
        let mut per_row: Vec<Vec<(u32, F)>> = vec![Vec::new(); rows];
        for (i, j, v) in triplets {
            if i >= rows || j >= cols {
                return Err(Error::Shape(format!(
                    "entry ({i}, {j}) outside {rows}x{cols}"
                )));
            }
            per_row[i].push((j as u32, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for mut row in per_row {
            row.sort_by_key(|&(j, _)| j);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Shape("duplicate sparse entry".into()));
                }
            }
            for (j, v) in row {
                indices.push(j);
                data.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            data,
        })
    }

    /// Symmetrically normalized adjacency `D^{-1/2} A D^{-1/2}`. The input
    /// must already contain self edges and be symmetric.
    pub fn normalized_adjacency(adj: &SparseAdjacency) -> Result<Self> {
        let n = adj.node_count();
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| {
                let d = adj.degree(i) as f64;
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        Self::from_triplets(
            n,
            n,
            adj.entries()
                .map(|(i, j)| {
                    let v = inv_sqrt[i as usize] * inv_sqrt[j as usize];
                    (i as usize, j as usize, F::cast(v))
                })
                .collect::<Vec<_>>(),
        )
    }

    /// Unnormalized graph Laplacian `D - A` over the off-diagonal edges;
    /// self edges cancel out of the quadratic form, so they are ignored.
    pub fn laplacian(adj: &SparseAdjacency) -> Result<Self> {
        let n = adj.node_count();
        let mut triplets = Vec::new();
        for i in 0..n {
            let mut off_degree = 0usize;
            for &j in adj.row(i) {
                if j as usize != i {
                    off_degree += 1;
                    triplets.push((i, j as usize, F::cast(-1.0)));
                }
            }
            triplets.push((i, i, F::cast(off_degree as f64)));
        }
        Self::from_triplets(n, n, triplets)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn transposed(&self) -> Self {
        let triplets: Vec<(usize, usize, F)> = (0..self.rows)
            .flat_map(|i| {
                let (s, e) = (self.indptr[i], self.indptr[i + 1]);
                self.indices[s..e]
                    .iter()
                    .zip(&self.data[s..e])
                    .map(move |(&j, &v)| (j as usize, i, v))
                    .collect::<Vec<_>>()
            })
            .collect();
        Self::from_triplets(self.cols, self.rows, triplets).expect("transpose is valid")
    }

    /// `y[i] = sum_j m[i][j] x[j]` for one row.
    #[inline]
    pub fn row_dot(&self, i: usize, x: &[F], stride: usize, offset: usize) -> F {
        let (s, e) = (self.indptr[i], self.indptr[i + 1]);
        let mut acc = F::zero();
        for (&j, &v) in self.indices[s..e].iter().zip(&self.data[s..e]) {
            acc = acc + v * x[offset + j as usize * stride];
        }
        acc
    }

    /// Applies the matrix along the last (node) axis of a flat buffer laid
    /// out as `[outer, cols]`, producing `[outer, rows]`.
    pub fn apply_node_axis(&self, x: &[F], outer: usize) -> Vec<F> {
        assert_eq!(x.len(), outer * self.cols);
        let mut y = vec![F::zero(); outer * self.rows];
        for o in 0..outer {
            let xoff = o * self.cols;
            let yoff = o * self.rows;
            for i in 0..self.rows {
                y[yoff + i] = self.row_dot(i, x, 1, xoff);
            }
        }
        y
    }

    pub fn to_dense(&self) -> Vec<F> {
        let mut out = vec![F::zero(); self.rows * self.cols];
        for i in 0..self.rows {
            let (s, e) = (self.indptr[i], self.indptr[i + 1]);
            for (&j, &v) in self.indices[s..e].iter().zip(&self.data[s..e]) {
                out[i * self.cols + j as usize] = v;
            }
        }
        out
    }
}
