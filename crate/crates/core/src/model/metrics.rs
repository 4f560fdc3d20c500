use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Euclidean distance of every vertex of every sample, `[S * N]`.
pub fn per_vertex_errors(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() || pred.shape().last() != Some(&3) {
        return Err(Error::shape(format!(
            "error needs matching [.., 3] shapes, got {:?} and {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    Ok(pred
        .data()
        .chunks(3)
        .zip(truth.data().chunks(3))
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .collect())
}

/// Mean per-vertex Euclidean distance over all vertices and samples.
pub fn reconstruction_error(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    let e = per_vertex_errors(pred, truth)?;
    if e.is_empty() {
        return Err(Error::shape("reconstruction error of an empty set"));
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_is_zero() {
        let x = Tensor::from_fn(&[2, 4, 3], |i| i as f64);
        assert_eq!(reconstruction_error(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn unit_offset_is_one() {
        let x = Tensor::from_fn(&[3, 5, 3], |i| (i as f64).sin());
        let mut y = x.clone();
        y.data_mut().iter_mut().step_by(3).for_each(|v| *v += 1.0);
        assert!((reconstruction_error(&y, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (s, n) = (3, 7);
        let a: Tensor = Tensor::from_fn(&[s, n, 3], |_| r.random_range(-1.0..1.0));
        let b: Tensor = Tensor::from_fn(&[s, n, 3], |_| r.random_range(-1.0..1.0));
        let mut total = 0.0;
        for i in 0..s {
            for v in 0..n {
                let mut d2 = 0.0;
                for c in 0..3 {
                    let k = (i * n + v) * 3 + c;
                    d2 += (a.data()[k] - b.data()[k]) * (a.data()[k] - b.data()[k]);
                }
                total += d2.sqrt();
            }
        }
        assert!((reconstruction_error(&a, &b).unwrap() - total / (s * n) as f64).abs() < 1e-12);
    }
}
