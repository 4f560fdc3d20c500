//! Fused gather, per-vertex weighting and inner activation.
//!
//! The kernels are compiled twice on x86-64: once for the baseline target
//! and once with AVX2 enabled, picked at run time. Both builds perform the
//! same operations in the same order, so results are bit-identical.

use crate::error::{Error, Result};
use crate::mesh::{NeighborTable, PAD_INDEX};
use crate::tensor::{elu, Real, Tensor};

/// Fused gather, per-vertex weighting and optional inner ELU, producing
/// the flattened blocks `[B * N, K * D]` that feed the shared filter.
/// `p` is `[N, K, K]`; padded slots read as zero.
pub fn neighbor_mix<T: Real>(x: &Tensor<T>, table: &NeighborTable, p: &Tensor<T>, alpha: Option<T>) -> Result<Tensor<T>> {
    let dims = mix_dims(x, table, p)?;
    let (b, n, k, d) = dims;
    let mut out = Tensor::zeros(&[b * n, k * d]);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        unsafe { forward_avx2(dims, x.data(), table, p.data(), alpha, out.data_mut()) };
        return Ok(out);
    }
    forward(dims, x.data(), table, p.data(), alpha, out.data_mut());
    Ok(out)
}

/// Adjoint of [`neighbor_mix`] given its output `out` and upstream `g`.
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub fn neighbor_mix_backward<T: Real>(
    x: &Tensor<T>,
    table: &NeighborTable,
    p: &Tensor<T>,
    alpha: Option<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    want_dx: bool,
    want_dp: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let dims = mix_dims(x, table, p)?;
    let (b, n, k, d) = dims;
    if g.shape() != [b * n, k * d] || out.shape() != g.shape() {
        return Err(Error::shape("neighbor_mix gradient shape"));
    }
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dp = want_dp.then(|| Tensor::zeros(p.shape()));
    let bufs = Grads {
        dx: dx.as_mut().map(|t| t.data_mut()),
        dp: dp.as_mut().map(|t| t.data_mut()),
    };
    let inputs = BackwardInputs {
        dims,
        x: x.data(),
        table,
        p: p.data(),
        alpha,
        out: out.data(),
        g: g.data(),
    };
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        unsafe { backward_avx2(&inputs, bufs) };
        return Ok((dx, dp));
    }
    backward(&inputs, bufs);
    Ok((dx, dp))
}

type Dims = (usize, usize, usize, usize);

fn mix_dims<T: Real>(x: &Tensor<T>, table: &NeighborTable, p: &Tensor<T>) -> Result<Dims> {
    let (n, k) = (table.num_vertices(), table.k());
    let (b, d) = match *x.shape() {
        [b, nn, d] if nn == n => (b, d),
        ref s => return Err(Error::shape(format!("neighbor_mix expects [B, {n}, D], got {s:?}"))),
    };
    if p.shape() != [n, k, k] {
        return Err(Error::shape(format!("weighting matrices {:?} do not match N = {n}, K = {k}", p.shape())));
    }
    Ok((b, n, k, d))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn forward_avx2<T: Real>(dims: Dims, xs: &[T], table: &NeighborTable, ps: &[T], alpha: Option<T>, os: &mut [T]) {
    forward(dims, xs, table, ps, alpha, os)
}

#[inline(always)]
fn forward<T: Real>((b, n, k, d): Dims, xs: &[T], table: &NeighborTable, ps: &[T], alpha: Option<T>, os: &mut [T]) {
    for bi in 0..b {
        let xb = &xs[bi * n * d..(bi + 1) * n * d];
        for i in 0..n {
            let block = &mut os[(bi * n + i) * k * d..(bi * n + i + 1) * k * d];
            let pi = &ps[i * k * k..(i + 1) * k * k];
            for (s, &v) in table.raw_row(i).iter().enumerate() {
                if v == PAD_INDEX {
                    continue;
                }
                let src = &xb[v as usize * d..(v as usize + 1) * d];
                for (t, dst) in block.chunks_exact_mut(d).enumerate() {
                    let w = pi[s * k + t];
                    if w != T::zero() {
                        axpy(w, src, dst);
                    }
                }
            }
            if let Some(a) = alpha {
                block.iter_mut().for_each(|o| *o = elu(*o, a));
            }
        }
    }
}

struct BackwardInputs<'a, T> {
    dims: Dims,
    x: &'a [T],
    table: &'a NeighborTable,
    p: &'a [T],
    alpha: Option<T>,
    out: &'a [T],
    g: &'a [T],
}

struct Grads<'a, T> {
    dx: Option<&'a mut [T]>,
    dp: Option<&'a mut [T]>,
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn backward_avx2<T: Real>(inp: &BackwardInputs<'_, T>, grads: Grads<'_, T>) {
    backward(inp, grads)
}

#[inline(always)]
fn backward<T: Real>(inp: &BackwardInputs<'_, T>, mut grads: Grads<'_, T>) {
    let (b, n, k, d) = inp.dims;
    let mut gp = vec![T::zero(); k * d];
    for bi in 0..b {
        let xb = &inp.x[bi * n * d..(bi + 1) * n * d];
        for i in 0..n {
            let range = (bi * n + i) * k * d..(bi * n + i + 1) * k * d;
            let gi = &inp.g[range.clone()];
            match inp.alpha {
                // ELU'(x) recovered from y = ELU(x): 1 for y > 0, y + alpha otherwise.
                Some(a) => {
                    for ((o, &gg), &y) in gp.iter_mut().zip(gi).zip(&inp.out[range]) {
                        *o = if y > T::zero() { gg } else { gg * (y + a) };
                    }
                }
                None => gp.copy_from_slice(gi),
            }
            let pi = &inp.p[i * k * k..(i + 1) * k * k];
            for (s, &v) in inp.table.raw_row(i).iter().enumerate() {
                if v == PAD_INDEX {
                    continue;
                }
                let v = v as usize;
                if let Some(dp) = grads.dp.as_deref_mut() {
                    let src = &xb[v * d..(v + 1) * d];
                    let row = &mut dp[(i * k + s) * k..(i * k + s + 1) * k];
                    for (r, gt) in row.iter_mut().zip(gp.chunks_exact(d)) {
                        *r += dot(src, gt);
                    }
                }
                if let Some(dx) = grads.dx.as_deref_mut() {
                    let dst = &mut dx[(bi * n + v) * d..(bi * n + v + 1) * d];
                    for (t, gt) in gp.chunks_exact(d).enumerate() {
                        let w = pi[s * k + t];
                        if w != T::zero() {
                            axpy(w, gt, dst);
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn axpy<T: Real>(w: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += w * v;
    }
}

/// Dot product with four interleaved partial sums, a fixed order that
/// vectorizes.
#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
