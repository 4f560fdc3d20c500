use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest standard deviation used when standardizing.
pub const STD_FLOOR: f64 = 1e-8;

/// How the per-vertex spread is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    /// One deviation per vertex and coordinate.
    #[default]
    PerCoordinate,
    /// One deviation per vertex, pooled over x, y and z.
    PerVertex,
}

/// Mean shape and spread of a training set, both `N x 3` in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Tensor<f64>,
    pub std: Tensor<f64>,
}

fn vertex_count(x: &Tensor<f64>) -> Result<(usize, usize)> {
    match *x.shape() {
        [s, n, 3] => Ok((s, n)),
        ref s => Err(Error::shape(format!("expected [S, N, 3] shapes, got {s:?}"))),
    }
}

impl Normalizer {
    /// Statistics of `data` (`[S, N, 3]`), using the population deviation.
    pub fn fit(data: &Tensor<f64>, mode: StdMode) -> Result<Self> {
        let (s, n) = vertex_count(data)?;
        if s < 2 {
            return Err(Error::config(format!("normalizer needs at least 2 samples, got {s}")));
        }
        let len = n * 3;
        let mut mean = vec![0.0; len];
        for sample in data.data().chunks(len) {
            for (m, &v) in mean.iter_mut().zip(sample) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= s as f64);
        let mut var = vec![0.0; len];
        for sample in data.data().chunks(len) {
            for ((acc, &v), &m) in var.iter_mut().zip(sample).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= s as f64);
        if mode == StdMode::PerVertex {
            for row in var.chunks_mut(3) {
                let pooled = row.iter().sum::<f64>() / 3.0;
                row.fill(pooled);
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
        Ok(Normalizer {
            mean: Tensor::new(vec![n, 3], mean)?,
            std: Tensor::new(vec![n, 3], std)?,
        })
    }

    /// Zero mean, unit spread.
    pub fn identity(n: usize) -> Self {
        Normalizer {
            mean: Tensor::zeros(&[n, 3]),
            std: Tensor::full(&[n, 3], 1.0),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.mean.shape()[0]
    }

    fn check<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        match *x.shape() {
            [_, n, 3] if n == self.num_vertices() => Ok(()),
            ref s => Err(Error::shape(format!(
                "normalizer for {} vertices cannot process {s:?}",
                self.num_vertices()
            ))),
        }
    }

    pub fn standardize<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let len = self.mean.len();
        let mut out = x.clone();
        for sample in out.data_mut().chunks_mut(len) {
            for ((v, &m), &s) in sample.iter_mut().zip(self.mean.data()).zip(self.std.data()) {
                *v = (*v - T::of(m)) / T::of(s);
            }
        }
        Ok(out)
    }

    pub fn destandardize<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let len = self.mean.len();
        let mut out = x.clone();
        for sample in out.data_mut().chunks_mut(len) {
            for ((v, &m), &s) in sample.iter_mut().zip(self.mean.data()).zip(self.std.data()) {
                *v = *v * T::of(s) + T::of(m);
            }
        }
        Ok(out)
    }
}
