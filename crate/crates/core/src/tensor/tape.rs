//! Per-step reverse-mode tape.
//!
//! A [`Tape`] records every intermediate value of one forward pass. It is
//! rebuilt for each training step, so no graph outlives the step that
//! produced it.

use std::sync::Arc;

use super::{dims2, dims3, elu, Real, Tensor};
use crate::conv::{neighbor_mix, neighbor_mix_backward, soft_permute, soft_permute_backward};
use crate::error::{Error, Result};
use crate::mesh::{gather_neighbors, scatter_neighbors, NeighborTable};
use crate::sampling::SparseMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchedMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Elu(Var, T),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Gather(Var, Arc<NeighborTable>),
    SoftPermute(Var, Var),
    NeighborMix { x: Var, p: Var, table: Arc<NeighborTable>, alpha: Option<T> },
    VertexMap(Var, Arc<SparseMatrix>),
    Slice { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves, produced by [`Tape::backward`] and indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).batched_matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::BatchedMatMul(a, b), ng))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, what)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let n = *x.shape().last().unwrap_or(&0);
        if b.shape() != [n] {
            return Err(Error::shape(format!(
                "bias {:?} does not match last axis of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, &bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn elu(&mut self, a: Var, alpha: T) -> Var {
        let out = self.value(a).map(|x| elu(x, alpha));
        let ng = self.needs(a);
        self.push(out, Op::Elu(a, alpha), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        let ng = self.needs(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::of(x.len().max(1) as f64);
        let out = Tensor::scalar(x.sum() / n);
        let ng = self.needs(a);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// `[B, N, D] -> [B, N, K, D]` neighbor gather; see [`gather_neighbors`].
    pub fn gather(&mut self, x: Var, table: &Arc<NeighborTable>) -> Result<Var> {
        let out = gather_neighbors(self.value(x), table)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Gather(x, Arc::clone(table)), ng))
    }

    /// Per-vertex `X_i P_i` on a `[B, N, K, D]` block; see [`soft_permute`].
    pub fn soft_permute(&mut self, x: Var, p: Var) -> Result<Var> {
        let out = soft_permute(self.value(x), self.value(p))?;
        let ng = self.needs(x) || self.needs(p);
        Ok(self.push(out, Op::SoftPermute(x, p), ng))
    }

    /// Fused gather, weighting and inner ELU; see [`neighbor_mix`].
    pub fn neighbor_mix(&mut self, x: Var, table: &Arc<NeighborTable>, p: Var, alpha: Option<T>) -> Result<Var> {
        let out = neighbor_mix(self.value(x), table, self.value(p), alpha)?;
        let ng = self.needs(x) || self.needs(p);
        let op = Op::NeighborMix {
            x,
            p,
            table: Arc::clone(table),
            alpha,
        };
        Ok(self.push(out, op, ng))
    }

    /// Applies a sparse `[M, N]` operator along the vertex axis of `[B, N, D]`.
    pub fn vertex_map(&mut self, x: Var, op: &Arc<SparseMatrix>) -> Result<Var> {
        let out = op.apply(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::VertexMap(x, Arc::clone(op)), ng))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(src);
        if axis >= x.shape().len() || start + len > x.shape()[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} on axis {axis} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(src);
        Ok(self.push(out, Op::Slice { src, axis, start }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let ref_shape = self.value(*first).shape().to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat: {s:?} vs {ref_shape:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&ref_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let x = self.value(p);
                let n = x.shape()[axis];
                data.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Gradients of a scalar output with respect to every leaf.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let seed = Tensor::full(self.value(output).shape(), T::one());
        self.backward_with_seed(output, seed)
    }

    /// Vector-Jacobian product: propagates `seed` (same shape as `output`).
    pub fn backward_with_seed(&self, output: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        same_shape(self.value(output), &seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(av.shape())?;
                let n = bv.shape()[1];
                if self.needs(*a) {
                    // dA = dC B^T
                    let mut da = Tensor::zeros(&[m, k]);
                    T::gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (1, n as isize), T::zero(), da.data_mut());
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = A^T dC
                    let mut db = Tensor::zeros(&[k, n]);
                    T::gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1), T::zero(), db.data_mut());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchedMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (s, m, k) = dims3(av.shape())?;
                let n = bv.shape()[2];
                if self.needs(*a) {
                    let mut da = Tensor::zeros(&[s, m, k]);
                    for i in 0..s {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            (1, n as isize),
                            T::zero(),
                            &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(&[s, k, n]);
                    for i in 0..s {
                        T::gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..(i + 1) * m * k],
                            (1, k as isize),
                            &g.data()[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            T::zero(),
                            &mut db.data_mut()[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = zip_with(g, bv, |p, q| p * q);
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = zip_with(g, av, |p, q| p * q);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = Tensor::zeros(&[n]);
                    for row in g.data().chunks(n.max(1)) {
                        for (d, &x) in db.data_mut().iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Elu(a, alpha) => {
                let alpha = *alpha;
                let d = zip_with(g, out, |gg, y| if y > T::zero() { gg } else { gg * (y + alpha) });
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = zip_with(g, self.value(*a), |gg, x| {
                    if x > T::zero() {
                        gg
                    } else if x < T::zero() {
                        -gg
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let v = g.data()[0] / T::of(x.len().max(1) as f64);
                self.accumulate(grads, *a, Tensor::full(x.shape(), v));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Gather(x, table) => {
                if self.needs(*x) {
                    let d = scatter_neighbors(g, table)?;
                    self.accumulate(grads, *x, d);
                }
            }
            Op::SoftPermute(x, p) => {
                let (dx, dp) = soft_permute_backward(
                    self.value(*x),
                    self.value(*p),
                    g,
                    self.needs(*x),
                    self.needs(*p),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dp) = dp {
                    self.accumulate(grads, *p, dp);
                }
            }
            Op::NeighborMix { x, p, table, alpha } => {
                let (dx, dp) = neighbor_mix_backward(
                    self.value(*x),
                    table,
                    self.value(*p),
                    *alpha,
                    out,
                    g,
                    self.needs(*x),
                    self.needs(*p),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dp) = dp {
                    self.accumulate(grads, *p, dp);
                }
            }
            Op::VertexMap(x, op) => {
                if self.needs(*x) {
                    let d = op.apply_transpose(g)?;
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Slice { src, axis, start } => {
                if self.needs(*src) {
                    let src_shape = self.value(*src).shape().to_vec();
                    let (outer, n, inner) = split_axis(&src_shape, *axis);
                    let len = out.shape()[*axis];
                    let mut d = Tensor::zeros(&src_shape);
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        d.data_mut()[base..base + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = shape[*axis];
                    if self.needs(p) {
                        let mut d = Tensor::zeros(&shape);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.data_mut()[o * n * inner..(o + 1) * n * inner]
                                .copy_from_slice(&g.data()[from..from + n * inner]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += n;
                }
            }
        }
        Ok(())
    }
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_with: shapes checked at record time")
}
