#![allow(dead_code)]

use std::sync::Arc;

use lsamesh::conv::{Activation, LsaConvConfig, LsaConvLayer, Weighting};
use lsamesh::tensor::Tensor;
use lsamesh::{NeighborOrder, NeighborTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Random receptive fields: slot 0 is the vertex itself, other slots hold
/// arbitrary vertices or padding.
pub fn random_table(n: usize, k: usize, r: &mut ChaCha8Rng) -> Arc<NeighborTable> {
    let rows: Vec<Vec<Option<usize>>> = (0..n)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if j == 0 {
                        Some(i)
                    } else if r.random_bool(0.2) {
                        None
                    } else {
                        Some(r.random_range(0..n))
                    }
                })
                .collect()
        })
        .collect();
    Arc::new(NeighborTable::from_rows(k, &rows, NeighborOrder::ByIndex).unwrap())
}

pub fn triangle_table(k: usize) -> Arc<NeighborTable> {
    let rows: Vec<Vec<Option<usize>>> = (0..3)
        .map(|i| {
            let mut row = vec![Some(i), Some((i + 1) % 3), Some((i + 2) % 3)];
            row.resize(k, None);
            row.truncate(k);
            row
        })
        .collect();
    Arc::new(NeighborTable::from_rows(k, &rows, NeighborOrder::ByIndex).unwrap())
}

/// Full layer with every parameter drawn at random.
pub fn random_layer(n: usize, cfg: LsaConvConfig, r: &mut ChaCha8Rng) -> LsaConvLayer {
    let mut layer = LsaConvLayer::new("t", n, cfg, r).unwrap();
    match &mut layer.weighting {
        Weighting::Full { p } => p.value = random(p.value.shape(), r),
        Weighting::Factorized { v, basis } => {
            v.value = random(v.value.shape(), r);
            basis.value = random(basis.value.shape(), r);
        }
    }
    layer.w.value = random(layer.w.value.shape(), r);
    layer.b.value = random(layer.b.value.shape(), r);
    layer
}

/// Scalar evaluation of `y_i = f(vec(f(X_i P_i))^T W + b)` one entry at a
/// time, with `X_i` the `D_in x K` block of gathered neighbor columns.
pub fn scalar_loop_conv(
    x: &Tensor,
    table: &NeighborTable,
    p: &Tensor,
    w: &Tensor,
    b: &Tensor,
    cfg: &LsaConvConfig,
) -> Tensor {
    let (bs, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, d_out) = (cfg.k, cfg.d_out);
    let f = |v: f64| cfg.activation.apply(v);
    let xat = |bi: usize, v: usize, c: usize| x.data()[(bi * n + v) * d + c];
    let mut out = vec![0.0; bs * n * d_out];
    for bi in 0..bs {
        for i in 0..n {
            for o in 0..d_out {
                let mut acc = b.data()[o];
                for t in 0..k {
                    for c in 0..d {
                        let mut xp = 0.0;
                        for s in 0..k {
                            let xv = table.slot(i, s).map_or(0.0, |v| xat(bi, v, c));
                            xp += xv * p.data()[(i * k + s) * k + t];
                        }
                        let h = if cfg.inner_activation { f(xp) } else { xp };
                        acc += h * w.data()[(t * d + c) * d_out + o];
                    }
                }
                out[(bi * n + i) * d_out + o] = f(acc);
            }
        }
    }
    Tensor::new(vec![bs, n, d_out], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const ELU: Activation = Activation::Elu { alpha: 1.0 };
