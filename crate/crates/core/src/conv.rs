//! Local structure-aware anisotropic convolution.
//!
//! Each vertex `i` owns a `K x K` weighting matrix `P_i` that linearly
//! recombines the slots of its gathered neighbor block `X_i` (`D_in x K`).
//! A single filter bank `W` of shape `(D_in * K) x D_out` and bias `b` are
//! shared by all vertices:
//!
//! ```text
//! y_i = f(vec(f(X_i P_i))^T W + b)
//! ```
//!
//! `vec` stacks the columns of the block (slot-major), matching the storage
//! order produced by [`gather_neighbors`](crate::mesh::gather_neighbors).
//! The weighting matrices may instead be factorized as `P = V P_b`, with
//! `V` of shape `N x B` and `B` shared bases `P_b` of shape `K x K`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::NeighborTable;
use crate::tensor::{elu, Parameter, Real, Tape, Tensor, Var};

mod mix;

pub use mix::{neighbor_mix, neighbor_mix_backward};

/// Nonlinearity applied inside and after the filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Activation {
    Elu { alpha: f64 },
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Elu { alpha: 1.0 }
    }
}

impl Activation {
    fn record<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Elu { alpha } => tape.elu(x, T::of(alpha)),
            Activation::Identity => x,
        }
    }

    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Elu { alpha } => elu(x, T::of(alpha)),
            Activation::Identity => x,
        }
    }
}

/// Hyperparameters of one layer, as serialized in the model manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsaConvConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D_in")]
    pub d_in: usize,
    #[serde(rename = "D_out")]
    pub d_out: usize,
    pub factorized: bool,
    /// Number of bases when `factorized`.
    #[serde(rename = "B")]
    pub bases: usize,
    pub inner_activation: bool,
    pub activation: Activation,
}

impl LsaConvConfig {
    pub fn new(k: usize, d_in: usize, d_out: usize) -> Self {
        LsaConvConfig {
            k,
            d_in,
            d_out,
            factorized: false,
            bases: 0,
            inner_activation: true,
            activation: Activation::default(),
        }
    }

    pub fn factorized(mut self, bases: usize) -> Self {
        self.factorized = true;
        self.bases = bases;
        self
    }

    pub fn with_activation(mut self, activation: Activation, inner: bool) -> Self {
        self.activation = activation;
        self.inner_activation = inner;
        self
    }
}

/// Per-vertex weighting matrices, full or factorized.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting<T: Real> {
    Full { p: Parameter<T> },
    Factorized { v: Parameter<T>, basis: Parameter<T> },
}

/// How the weighting matrices start out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightingInit {
    #[default]
    Identity,
    Uniform { bound: f64 },
}

/// Trainable scalar counts split by role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// `P`, or `V` and `P_b` when factorized.
    pub weighting: usize,
    pub filter: usize,
    pub bias: usize,
    /// Fully connected layers (weights and biases).
    pub fc: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.weighting + self.filter + self.bias + self.fc
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;

    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            weighting: self.weighting + o.weighting,
            filter: self.filter + o.filter,
            bias: self.bias + o.bias,
            fc: self.fc + o.fc,
        }
    }
}

impl std::iter::Sum for ParamCount {
    fn sum<I: Iterator<Item = ParamCount>>(iter: I) -> Self {
        iter.fold(ParamCount::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsaConvLayer<T: Real = f64> {
    config: LsaConvConfig,
    num_vertices: usize,
    pub weighting: Weighting<T>,
    pub w: Parameter<T>,
    pub b: Parameter<T>,
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub(crate) fn glorot<T: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.random_range(-bound..=bound)))
}

impl<T: Real> LsaConvLayer<T> {
    /// Layer with identity-initialized weighting and Glorot-uniform filters.
    pub fn new(
        name: &str,
        num_vertices: usize,
        config: LsaConvConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_init(name, num_vertices, config, WeightingInit::Identity, rng)
    }

    pub fn with_init(
        name: &str,
        num_vertices: usize,
        config: LsaConvConfig,
        init: WeightingInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let LsaConvConfig { k, d_in, d_out, .. } = config;
        if k == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::config(format!("degenerate layer {config:?}")));
        }
        if config.factorized && config.bases == 0 {
            return Err(Error::config("factorized layer needs at least one basis"));
        }
        let weighting = match (config.factorized, init) {
            (false, WeightingInit::Identity) => Weighting::Full {
                p: Parameter::new(format!("{name}.P"), Tensor::eye_stack(num_vertices, k)).decay_exempt(),
            },
            (false, WeightingInit::Uniform { bound }) => Weighting::Full {
                p: Parameter::new(
                    format!("{name}.P"),
                    Tensor::from_fn(&[num_vertices, k, k], |_| T::of(rng.random_range(-bound..=bound))),
                )
                .decay_exempt(),
            },
            (true, init) => {
                let nb = config.bases;
                let mut basis = Tensor::from_fn(&[nb, k, k], |_| T::of(rng.random_range(-0.01..=0.01)));
                let mut v = Tensor::zeros(&[num_vertices, nb]);
                match init {
                    WeightingInit::Identity => {
                        basis.data_mut()[..k * k].fill(T::zero());
                        for j in 0..k {
                            basis.data_mut()[j * k + j] = T::one();
                        }
                        for i in 0..num_vertices {
                            v.data_mut()[i * nb] = T::one();
                        }
                    }
                    WeightingInit::Uniform { bound } => {
                        basis = Tensor::from_fn(&[nb, k, k], |_| T::of(rng.random_range(-bound..=bound)));
                        v = Tensor::from_fn(&[num_vertices, nb], |_| T::of(rng.random_range(-1.0..=1.0)));
                    }
                }
                Weighting::Factorized {
                    v: Parameter::new(format!("{name}.V"), v).decay_exempt(),
                    basis: Parameter::new(format!("{name}.P_b"), basis).decay_exempt(),
                }
            }
        };
        Ok(LsaConvLayer {
            config,
            num_vertices,
            weighting,
            w: Parameter::new(format!("{name}.W"), glorot(rng, k * d_in, d_out)),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[d_out])),
        })
    }

    pub fn config(&self) -> &LsaConvConfig {
        &self.config
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    /// Stops the weighting matrices from training (they stay at their
    /// current value).
    pub fn freeze_weighting(&mut self) {
        for p in self.weighting_params_mut() {
            p.trainable = false;
        }
    }

    fn weighting_params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match &mut self.weighting {
            Weighting::Full { p } => vec![p],
            Weighting::Factorized { v, basis } => vec![v, basis],
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = match &self.weighting {
            Weighting::Full { p } => vec![p],
            Weighting::Factorized { v, basis } => vec![v, basis],
        };
        out.push(&self.w);
        out.push(&self.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let Self {
            weighting, w, b, ..
        } = self;
        let mut out = match weighting {
            Weighting::Full { p } => vec![p],
            Weighting::Factorized { v, basis } => vec![v, basis],
        };
        out.push(w);
        out.push(b);
        out
    }

    /// `P[i] = sum_b V[i, b] * P_b[b]`. Only valid for factorized layers.
    pub fn materialize_p(&self) -> Result<Tensor<T>> {
        match &self.weighting {
            Weighting::Full { .. } => Err(Error::Unsupported(
                "materialize_p called on a layer with full weighting matrices".into(),
            )),
            Weighting::Factorized { v, basis } => {
                let (nb, k) = (self.config.bases, self.config.k);
                let flat = basis.value.clone().reshape(&[nb, k * k])?;
                v.value.matmul(&flat)?.reshape(&[self.num_vertices, k, k])
            }
        }
    }

    /// The weighting matrices actually applied, `[N, K, K]`.
    pub fn effective_p(&self) -> Result<Tensor<T>> {
        match &self.weighting {
            Weighting::Full { p } => Ok(p.value.clone()),
            Weighting::Factorized { .. } => self.materialize_p(),
        }
    }

    /// Trainable scalar count; frozen tensors are excluded.
    pub fn parameter_count(&self) -> ParamCount {
        let count = |p: &Parameter<T>| if p.trainable { p.len() } else { 0 };
        let weighting = match &self.weighting {
            Weighting::Full { p } => count(p),
            Weighting::Factorized { v, basis } => count(v) + count(basis),
        };
        ParamCount {
            weighting,
            filter: count(&self.w),
            bias: count(&self.b),
            fc: 0,
        }
    }

    /// Records the parameters on `tape` in [`params`](Self::params) order.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Records the layer on `tape`. `vars` come from [`register`](Self::register)
    /// (or any leaves of the same shapes); `x` is `[B, N, D_in]`.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        table: &Arc<NeighborTable>,
    ) -> Result<Var> {
        let LsaConvConfig { k, d_in, d_out, .. } = self.config;
        if table.k() != k {
            return Err(Error::shape(format!("table K = {} but layer K = {k}", table.k())));
        }
        if table.num_vertices() != self.num_vertices {
            return Err(Error::shape(format!(
                "table has {} vertices but layer has {}",
                table.num_vertices(),
                self.num_vertices
            )));
        }
        let (batch, n) = match *tape.value(x).shape() {
            [b, n, d] if d == d_in => (b, n),
            ref s => {
                return Err(Error::shape(format!("layer expects [B, N, {d_in}] input, got {s:?}")))
            }
        };
        let (p, rest) = match self.weighting {
            Weighting::Full { .. } => (vars[0], &vars[1..]),
            Weighting::Factorized { .. } => {
                let nb = self.config.bases;
                let flat = tape.reshape(vars[1], &[nb, k * k])?;
                let p = tape.matmul(vars[0], flat)?;
                (tape.reshape(p, &[n, k, k])?, &vars[2..])
            }
        };
        let (w, b) = (rest[0], rest[1]);
        let inner = match self.config.activation {
            Activation::Elu { alpha } if self.config.inner_activation => Some(T::of(alpha)),
            _ => None,
        };
        let flat = tape.neighbor_mix(x, table, p, inner)?;
        let y = tape.matmul(flat, w)?;
        let y = tape.add_bias(y, b)?;
        let y = self.config.activation.record(tape, y);
        tape.reshape(y, &[batch, n, d_out])
    }

    /// Inference without recording gradients.
    pub fn forward(&self, x: &Tensor<T>, table: &Arc<NeighborTable>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params().iter().map(|p| tape.constant(p.value.clone())).collect();
        let xv = tape.constant(x.clone());
        let y = self.forward_graph(&mut tape, &vars, xv, table)?;
        Ok(tape.value(y).clone())
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_cached(&self, x: &Tensor<T>, table: &Arc<NeighborTable>) -> Result<LsaConvTrace<'_, T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let input = tape.leaf(x.clone());
        let output = self.forward_graph(&mut tape, &vars, input, table)?;
        Ok(LsaConvTrace {
            layer: self,
            tape,
            vars,
            input,
            output,
        })
    }
}

/// Cached forward state of one layer.
pub struct LsaConvTrace<'a, T: Real> {
    layer: &'a LsaConvLayer<T>,
    tape: Tape<T>,
    vars: Vec<Var>,
    input: Var,
    output: Var,
}

/// Gradients of one layer. Weighting gradients are `Some` only for the
/// variant the layer uses and only when it is trainable.
#[derive(Debug, Clone)]
pub struct LayerGrads<T: Real> {
    pub dx: Tensor<T>,
    pub dp: Option<Tensor<T>>,
    pub dv: Option<Tensor<T>>,
    pub dbasis: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

impl<T: Real> LsaConvTrace<'_, T> {
    pub fn output(&self) -> &Tensor<T> {
        self.tape.value(self.output)
    }

    /// Back-propagates `dy` (same shape as the output).
    pub fn backward(&self, dy: Tensor<T>) -> Result<LayerGrads<T>> {
        let grads = self.tape.backward_with_seed(self.output, dy)?;
        let get = |v: Var| grads.get(v).cloned();
        let zeros_like = |v: Var| Tensor::zeros(self.tape.value(v).shape());
        let (dp, dv, dbasis, rest) = match self.layer.weighting {
            Weighting::Full { .. } => (get(self.vars[0]), None, None, &self.vars[1..]),
            Weighting::Factorized { .. } => (None, get(self.vars[0]), get(self.vars[1]), &self.vars[2..]),
        };
        Ok(LayerGrads {
            dx: get(self.input).unwrap_or_else(|| zeros_like(self.input)),
            dp,
            dv,
            dbasis,
            dw: get(rest[0]).unwrap_or_else(|| zeros_like(rest[0])),
            db: get(rest[1]).unwrap_or_else(|| zeros_like(rest[1])),
        })
    }
}

fn permute_dims<T: Real>(x: &Tensor<T>, p: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (b, n, k, d) = match *x.shape() {
        [b, n, k, d] => (b, n, k, d),
        ref s => return Err(Error::shape(format!("soft_permute expects [B, N, K, D], got {s:?}"))),
    };
    if p.shape() != [n, k, k] {
        return Err(Error::shape(format!(
            "weighting matrices {:?} do not match block [{b}, {n}, {k}, {d}]",
            p.shape()
        )));
    }
    Ok((b, n, k, d))
}

/// Per-vertex product `X_i P_i` on slot-major blocks:
/// `out[b, i, s', :] = sum_s P[i, s, s'] * x[b, i, s, :]`.
pub fn soft_permute<T: Real>(x: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, k, d) = permute_dims(x, p)?;
    let mut out = Tensor::zeros(x.shape());
    let (xs, ps) = (x.data(), p.data());
    let os = out.data_mut();
    for bi in 0..b {
        for i in 0..n {
            let base = (bi * n + i) * k * d;
            let pi = &ps[i * k * k..(i + 1) * k * k];
            for s in 0..k {
                let src = &xs[base + s * d..base + (s + 1) * d];
                for t in 0..k {
                    let w = pi[s * k + t];
                    if w == T::zero() {
                        continue;
                    }
                    let dst = &mut os[base + t * d..base + (t + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += w * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`soft_permute`] with respect to the block and/or the
/// weighting matrices.
#[allow(clippy::type_complexity)]
pub fn soft_permute_backward<T: Real>(
    x: &Tensor<T>,
    p: &Tensor<T>,
    g: &Tensor<T>,
    want_dx: bool,
    want_dp: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (b, n, k, d) = permute_dims(x, p)?;
    if g.shape() != x.shape() {
        return Err(Error::shape("soft_permute gradient shape"));
    }
    let (xs, ps, gs) = (x.data(), p.data(), g.data());
    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let dxs = dx.data_mut();
        for bi in 0..b {
            for i in 0..n {
                let base = (bi * n + i) * k * d;
                let pi = &ps[i * k * k..(i + 1) * k * k];
                for s in 0..k {
                    let dst = &mut dxs[base + s * d..base + (s + 1) * d];
                    for t in 0..k {
                        let w = pi[s * k + t];
                        if w == T::zero() {
                            continue;
                        }
                        let src = &gs[base + t * d..base + (t + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += w * v;
                        }
                    }
                }
            }
        }
        dx
    });
    let dp = want_dp.then(|| {
        let mut dp = Tensor::zeros(p.shape());
        let dps = dp.data_mut();
        for bi in 0..b {
            for i in 0..n {
                let base = (bi * n + i) * k * d;
                for s in 0..k {
                    let xrow = &xs[base + s * d..base + (s + 1) * d];
                    for t in 0..k {
                        let grow = &gs[base + t * d..base + (t + 1) * d];
                        let dot: T = xrow.iter().zip(grow).map(|(&a, &c)| a * c).sum();
                        dps[(i * k + s) * k + t] += dot;
                    }
                }
            }
        }
        dp
    });
    Ok((dx, dp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_neighbor_table, NeighborOrder};
    use crate::tensor::finite_difference_check;
    use crate::MeshTopology;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn triangle_table(k: usize) -> Arc<NeighborTable> {
        let m = MeshTopology::new(3, vec![[0, 1, 2]], None).unwrap();
        Arc::new(build_neighbor_table(&m, k, NeighborOrder::ByIndex).unwrap())
    }

    #[test]
    fn identity_weighting_is_noop() {
        let mut r = rng(1);
        let x = random(&[2, 3, 4, 5], &mut r);
        let p = Tensor::eye_stack(3, 4);
        assert_eq!(soft_permute(&x, &p).unwrap(), x);
    }

    #[test]
    fn swap_matrix_swaps_slots() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(soft_permute(&x, &p).unwrap().data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn soft_permute_matches_per_vertex_matmul() {
        let mut r = rng(2);
        let (b, n, k, d) = (2, 3, 3, 2);
        let x = random(&[b, n, k, d], &mut r);
        let p = random(&[n, k, k], &mut r);
        let got = soft_permute(&x, &p).unwrap();
        for bi in 0..b {
            for i in 0..n {
                // Oracle: X_i (D x K) times P_i (K x K), element by element.
                for c in 0..d {
                    for t in 0..k {
                        let mut want = 0.0;
                        for s in 0..k {
                            want += x.data()[((bi * n + i) * k + s) * d + c] * p.data()[(i * k + s) * k + t];
                        }
                        let have = got.data()[((bi * n + i) * k + t) * d + c];
                        assert!((have - want).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn soft_permute_gradients() {
        let mut r = rng(3);
        let inputs = [random(&[2, 3, 3, 2], &mut r), random(&[3, 3, 3], &mut r)];
        let err = finite_difference_check(&inputs, 1e-5, |t, v| t.soft_permute(v[0], v[1])).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn center_passthrough() {
        let (k, d) = (3, 2);
        let table = triangle_table(k);
        let mut layer = LsaConvLayer::<f64>::new("l", 3, LsaConvConfig::new(k, d, d), &mut rng(4)).unwrap();
        layer.config = layer.config.with_activation(Activation::Identity, false);
        layer.w.value = Tensor::from_fn(&[k * d, d], |idx| {
            let (row, col) = (idx / d, idx % d);
            if row == col { 1.0 } else { 0.0 }
        });
        let x = random(&[2, 3, d], &mut rng(5));
        assert!(layer.forward(&x, &table).unwrap().max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn bias_only_output() {
        let table = triangle_table(3);
        let mut layer = LsaConvLayer::<f64>::new("l", 3, LsaConvConfig::new(3, 2, 3), &mut rng(6)).unwrap();
        layer.w.value = Tensor::zeros(&[6, 3]);
        layer.b.value = Tensor::new(vec![3], vec![0.5, -0.5, 2.0]).unwrap();
        let y = layer.forward(&random(&[2, 3, 2], &mut rng(7)), &table).unwrap();
        let want = [0.5, elu(-0.5, 1.0), 2.0];
        for row in y.data().chunks(3) {
            assert_eq!(row, want);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let table = triangle_table(3);
        let layer = LsaConvLayer::<f64>::new("l", 3, LsaConvConfig::new(3, 2, 3), &mut rng(8)).unwrap();
        let x = random(&[2, 3, 2], &mut rng(9));
        let trace = layer.forward_cached(&x, &table).unwrap();
        let g = trace.backward(Tensor::zeros(trace.output().shape())).unwrap();
        for t in [&g.dx, g.dp.as_ref().unwrap(), &g.dw, &g.db] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bias_gradient_is_column_sum() {
        let table = triangle_table(3);
        let layer = LsaConvLayer::<f64>::new("l", 3, LsaConvConfig::new(3, 2, 3), &mut rng(10)).unwrap();
        let x = random(&[2, 3, 2], &mut rng(11));
        let trace = layer.forward_cached(&x, &table).unwrap();
        let dy = random(&[2, 3, 3], &mut rng(12));
        let g = trace.backward(dy.clone()).unwrap();
        // Outer ELU derivative recovered from the output: 1 if y > 0 else y + 1.
        let mut want = [0.0; 3];
        for (row, (yrow, dyrow)) in trace.output().data().chunks(3).zip(dy.data().chunks(3)).enumerate() {
            let _ = row;
            for c in 0..3 {
                let deriv = if yrow[c] > 0.0 { 1.0 } else { yrow[c] + 1.0 };
                want[c] += deriv * dyrow[c];
            }
        }
        for c in 0..3 {
            assert!((g.db.data()[c] - want[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn materialize_p_cases() {
        let mut r = rng(13);
        let cfg = LsaConvConfig::new(3, 2, 2).factorized(4);
        let mut layer = LsaConvLayer::<f64>::new("l", 4, cfg, &mut r).unwrap();
        let basis = random(&[4, 3, 3], &mut r);
        if let Weighting::Factorized { v, basis: pb } = &mut layer.weighting {
            v.value = Tensor::eye_stack(1, 4).reshape(&[4, 4]).unwrap();
            pb.value = basis.clone();
        }
        assert_eq!(layer.materialize_p().unwrap(), basis);

        let cfg = LsaConvConfig::new(3, 2, 2).factorized(1);
        let mut layer = LsaConvLayer::<f64>::new("l", 5, cfg, &mut r).unwrap();
        let shared = random(&[1, 3, 3], &mut r);
        if let Weighting::Factorized { v, basis: pb } = &mut layer.weighting {
            v.value = Tensor::full(&[5, 1], 1.0);
            pb.value = shared.clone();
        }
        let p = layer.materialize_p().unwrap();
        for i in 0..5 {
            assert_eq!(&p.data()[i * 9..(i + 1) * 9], shared.data());
        }

        let full = LsaConvLayer::<f64>::new("l", 5, LsaConvConfig::new(3, 2, 2), &mut r).unwrap();
        assert!(matches!(full.materialize_p(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn materialize_p_matches_contraction_loop() {
        let mut r = rng(14);
        let cfg = LsaConvConfig::new(3, 2, 2).factorized(3);
        let mut layer = LsaConvLayer::<f64>::new("l", 4, cfg, &mut r).unwrap();
        let (v, pb) = (random(&[4, 3], &mut r), random(&[3, 3, 3], &mut r));
        if let Weighting::Factorized { v: vv, basis } = &mut layer.weighting {
            vv.value = v.clone();
            basis.value = pb.clone();
        }
        let p = layer.materialize_p().unwrap();
        for i in 0..4 {
            for e in 0..9 {
                let want: f64 = (0..3).map(|bb| v.data()[i * 3 + bb] * pb.data()[bb * 9 + e]).sum();
                assert!((p.data()[i * 9 + e] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn factorized_identity_init_starts_at_identity() {
        let cfg = LsaConvConfig::new(4, 2, 2).factorized(3);
        let layer = LsaConvLayer::<f64>::new("l", 6, cfg, &mut rng(15)).unwrap();
        assert_eq!(layer.materialize_p().unwrap(), Tensor::eye_stack(6, 4));
    }

    #[test]
    fn parameter_count_arithmetic() {
        let full = LsaConvLayer::<f64>::new("l", 100, LsaConvConfig::new(9, 3, 16), &mut rng(16)).unwrap();
        let c = full.parameter_count();
        assert_eq!((c.weighting, c.filter, c.bias, c.total()), (8100, 432, 16, 8548));
        let fact = LsaConvLayer::<f64>::new("l", 100, LsaConvConfig::new(9, 3, 16).factorized(8), &mut rng(16)).unwrap();
        assert_eq!(fact.parameter_count().weighting, 800 + 648);
    }

    #[test]
    fn decay_exemption_flags() {
        let full = LsaConvLayer::<f64>::new("l", 4, LsaConvConfig::new(3, 1, 1), &mut rng(17)).unwrap();
        let flags: Vec<bool> = full.params().iter().map(|p| p.decay_exempt).collect();
        assert_eq!(flags, [true, false, false]);
        let fact = LsaConvLayer::<f64>::new("l", 4, LsaConvConfig::new(3, 1, 1).factorized(2), &mut rng(17)).unwrap();
        let flags: Vec<bool> = fact.params().iter().map(|p| p.decay_exempt).collect();
        assert_eq!(flags, [true, true, false, false]);
    }

    #[test]
    fn table_mismatch_is_rejected() {
        let layer = LsaConvLayer::<f64>::new("l", 3, LsaConvConfig::new(4, 2, 2), &mut rng(18)).unwrap();
        let x = Tensor::zeros(&[1, 3, 2]);
        assert!(layer.forward(&x, &triangle_table(3)).is_err());
        let layer = LsaConvLayer::<f64>::new("l", 3, LsaConvConfig::new(3, 2, 2), &mut rng(18)).unwrap();
        assert!(layer.forward(&Tensor::zeros(&[1, 3, 5]), &triangle_table(3)).is_err());
    }
}
