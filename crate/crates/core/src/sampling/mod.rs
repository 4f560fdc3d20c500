//! Mesh down/up-sampling operators built once per template.
//!
//! Down-sampling selects the vertices that survive greedy quadric edge
//! collapse; up-sampling maps each fine vertex to barycentric weights on the
//! closest point of the coarse surface.

mod cache;
mod decimate;
mod upsample;

use crate::error::{Error, Result};
use crate::mesh::MeshTopology;
use crate::tensor::{Real, Tensor};

pub use cache::{load_hierarchy, load_operator, save_hierarchy, save_operator};
pub use decimate::{quadric_decimate, Decimation};
pub use upsample::{build_upsampler, closest_point_on_triangle};

/// Row-compressed sparse matrix acting along the vertex axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::shape(format!("entry ({r}, {c}) outside {rows}x{cols}")));
            }
        }
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(col, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.cols]; self.rows];
        for (r, c, v) in self.triplets() {
            out[r][c] += v;
        }
        out
    }

    fn batch_dims<T: Real>(&self, x: &Tensor<T>, expect: usize) -> Result<(usize, usize)> {
        match *x.shape() {
            [b, n, d] if n == expect => Ok((b, d)),
            ref s => Err(Error::shape(format!(
                "sampling operator expects [B, {expect}, D], got {s:?}"
            ))),
        }
    }

    /// `y[b] = A x[b]` for `x` of shape `[B, cols, D]`.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, d) = self.batch_dims(x, self.cols)?;
        let mut out = Tensor::zeros(&[batch, self.rows, d]);
        let (xs, os) = (x.data(), out.data_mut());
        for b in 0..batch {
            for r in 0..self.rows {
                let dst = (b * self.rows + r) * d;
                for (c, v) in self.row(r) {
                    let w = T::of(v);
                    let src = (b * self.cols + c) * d;
                    for j in 0..d {
                        os[dst + j] += w * xs[src + j];
                    }
                }
            }
        }
        Ok(out)
    }

    /// `y[b] = A^T x[b]` for `x` of shape `[B, rows, D]`.
    pub fn apply_transpose<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, d) = self.batch_dims(x, self.rows)?;
        let mut out = Tensor::zeros(&[batch, self.cols, d]);
        let (xs, os) = (x.data(), out.data_mut());
        for b in 0..batch {
            for r in 0..self.rows {
                let src = (b * self.rows + r) * d;
                for (c, v) in self.row(r) {
                    let w = T::of(v);
                    let dst = (b * self.cols + c) * d;
                    for j in 0..d {
                        os[dst + j] += w * xs[src + j];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One level of the sampling hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingOperator {
    pub factor: usize,
    /// `M x N` selection matrix.
    pub down: SparseMatrix,
    /// `N x M` barycentric interpolation matrix.
    pub up: SparseMatrix,
    /// Fine index of each coarse vertex, ascending.
    pub kept: Vec<usize>,
    pub coarse: MeshTopology,
}

impl SamplingOperator {
    pub fn build(fine: &MeshTopology, factor: usize) -> Result<Self> {
        let dec = quadric_decimate(fine, factor)?;
        let up = build_upsampler(&dec.coarse, fine, &dec.kept)?;
        Ok(SamplingOperator {
            factor,
            down: dec.down,
            up,
            kept: dec.kept,
            coarse: dec.coarse,
        })
    }

    pub fn fine_vertices(&self) -> usize {
        self.down.cols()
    }

    pub fn coarse_vertices(&self) -> usize {
        self.down.rows()
    }
}

/// Successive operators, each decimating the previous level's coarse mesh.
pub fn build_hierarchy(mesh: &MeshTopology, factors: &[usize]) -> Result<Vec<SamplingOperator>> {
    let mut out: Vec<SamplingOperator> = Vec::with_capacity(factors.len());
    for &p in factors {
        let fine = out.last().map_or(mesh, |op| &op.coarse);
        let op = SamplingOperator::build(fine, p)?;
        log::debug!("sampling level {}: {} -> {}", out.len(), op.fine_vertices(), op.coarse_vertices());
        out.push(op);
    }
    Ok(out)
}

/// Sparse product along the vertex axis of a `[B, N, D]` batch.
pub fn apply_sampling<T: Real>(x: &Tensor<T>, op: &SparseMatrix) -> Result<Tensor<T>> {
    op.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;
    use crate::tensor::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn triplets_sum_duplicates() {
        let m = SparseMatrix::from_triplets(2, 3, &[(1, 2, 1.0), (0, 0, 2.0), (1, 2, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.to_dense(), vec![vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 1.5]]);
        assert!(SparseMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn apply_matches_dense_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let trips: Vec<_> = (0..20)
            .map(|_| (r.random_range(0..5), r.random_range(0..7), r.random_range(-1.0..1.0)))
            .collect();
        let m = SparseMatrix::from_triplets(5, 7, &trips).unwrap();
        let dense = m.to_dense();
        let x: Tensor = Tensor::from_fn(&[2, 7, 3], |_| r.random_range(-1.0..1.0));
        let y = m.apply(&x).unwrap();
        for b in 0..2 {
            for i in 0..5 {
                for d in 0..3 {
                    let want: f64 = (0..7).map(|j| dense[i][j] * x.data()[(b * 7 + j) * 3 + d]).sum();
                    assert!((y.data()[(b * 5 + i) * 3 + d] - want).abs() <= 1e-12);
                }
            }
        }
        let g: Tensor = Tensor::from_fn(&[2, 5, 3], |_| r.random_range(-1.0..1.0));
        let xt = m.apply_transpose(&g).unwrap();
        // <A x, g> == <x, A^T g>
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn vertex_map_gradient() {
        let mesh = icosphere(1, 1.0);
        let op = SamplingOperator::build(&mesh, 4).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for m in [Arc::new(op.down.clone()), Arc::new(op.up.clone())] {
            let x = Tensor::from_fn(&[2, m.cols(), 2], |_| r.random_range(-1.0..1.0));
            let err = finite_difference_check(&[x], 1e-5, |t, v| t.vertex_map(v[0], &m)).unwrap();
            assert!(err <= 1e-10, "err = {err}");
        }
    }

    #[test]
    fn round_trips_through_sampling() {
        let mesh = icosphere(2, 100.0);
        let op = SamplingOperator::build(&mesh, 4).unwrap();
        let n = mesh.num_vertices();
        let constant = Tensor::full(&[1, n, 3], 2.5);
        let back = op.up.apply(&op.down.apply(&constant).unwrap()).unwrap();
        assert!(back.max_abs_diff(&constant) <= 1e-12);

        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor = Tensor::from_fn(&[2, n, 3], |_| r.random_range(-1.0..1.0));
        let back = op.up.apply(&op.down.apply(&x).unwrap()).unwrap();
        for b in 0..2 {
            for &v in &op.kept {
                let i = (b * n + v) * 3;
                assert_eq!(&back.data()[i..i + 3], &x.data()[i..i + 3]);
            }
        }
    }

    #[test]
    fn hierarchy_sizes() {
        let ops = build_hierarchy(&icosphere(2, 1.0), &[4, 4, 4, 4]).unwrap();
        let sizes: Vec<usize> = ops.iter().map(|o| o.coarse_vertices()).collect();
        assert_eq!(sizes, [41, 11, 3, 1]);
        for w in ops.windows(2) {
            assert_eq!(w[0].coarse_vertices(), w[1].fine_vertices());
        }
    }
}
