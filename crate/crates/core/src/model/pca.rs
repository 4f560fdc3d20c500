use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear shape model: mean plus the top `d` principal directions of the
/// flattened `3N` coordinate vectors.
#[derive(Debug, Clone)]
pub struct Pca {
    mean: DVector<f64>,
    /// `d x 3N`, orthonormal rows in order of decreasing variance.
    components: DMatrix<f64>,
    /// Variance along each component.
    pub variances: Vec<f64>,
}

fn flatten(data: &Tensor<f64>) -> Result<DMatrix<f64>> {
    match *data.shape() {
        [s, n, 3] => Ok(DMatrix::from_row_slice(s, 3 * n, data.data())),
        ref s => Err(Error::shape(format!("PCA expects [S, N, 3], got {s:?}"))),
    }
}

/// Indices of `values` sorted descending, ties by position.
fn order_desc(values: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

impl Pca {
    pub fn fit(data: &Tensor<f64>, d: usize) -> Result<Self> {
        let x = flatten(data)?;
        let (s, f) = x.shape();
        if d == 0 || d > s.min(f) {
            return Err(Error::config(format!("PCA with {d} components on {s} samples of dimension {f}")));
        }
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let scale = 1.0 / s as f64;
        let mut components = DMatrix::zeros(d, f);
        let mut variances = Vec::with_capacity(d);
        if s >= f {
            let cov = centered.transpose() * &centered * scale;
            let eig = SymmetricEigen::new(cov);
            for (r, &j) in order_desc(&eig.eigenvalues).iter().take(d).enumerate() {
                components.set_row(r, &eig.eigenvectors.column(j).transpose());
                variances.push(eig.eigenvalues[j].max(0.0));
            }
        } else {
            // Eigenvectors of the sample Gram matrix map to principal
            // directions through the data.
            let gram = &centered * centered.transpose() * scale;
            let eig = SymmetricEigen::new(gram);
            for (r, &j) in order_desc(&eig.eigenvalues).iter().take(d).enumerate() {
                let dir = centered.transpose() * eig.eigenvectors.column(j);
                let norm = dir.norm();
                if norm > 0.0 {
                    components.set_row(r, &(dir / norm).transpose());
                }
                variances.push(eig.eigenvalues[j].max(0.0));
            }
        }
        Ok(Pca {
            mean,
            components,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    /// `[S, d]` coefficients.
    pub fn encode(&self, data: &Tensor<f64>) -> Result<Tensor<f64>> {
        let x = flatten(data)?;
        if x.ncols() != self.mean.len() {
            return Err(Error::shape("PCA input dimension mismatch"));
        }
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        let codes = centered * self.components.transpose();
        let rows: Vec<f64> = codes.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        Tensor::new(vec![codes.nrows(), codes.ncols()], rows)
    }

    /// Projection of `data` onto the affine principal subspace.
    pub fn reconstruct(&self, data: &Tensor<f64>) -> Result<Tensor<f64>> {
        let codes = self.encode(data)?;
        let c = DMatrix::from_row_slice(codes.shape()[0], codes.shape()[1], codes.data());
        let mut y = c * &self.components;
        for mut row in y.row_iter_mut() {
            row += self.mean.transpose();
        }
        let out: Vec<f64> = y.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        Tensor::new(data.shape().to_vec(), out)
    }
}
