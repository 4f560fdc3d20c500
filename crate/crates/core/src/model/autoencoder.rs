use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::normalize::{Normalizer, StdMode};
use crate::conv::{glorot, Activation, LsaConvConfig, LsaConvLayer, ParamCount, WeightingInit};
use crate::error::{Error, Result};
use crate::mesh::{build_neighbor_table, MeshTopology, NeighborOrder, NeighborTable};
use crate::sampling::{build_hierarchy, SamplingOperator, SparseMatrix};
use crate::tensor::{Parameter, Real, Tape, Tensor, Var};

/// Architecture of the autoencoder.
///
/// The encoder applies one convolution per level followed by down-sampling,
/// then a linear map to the latent code. The decoder mirrors it: a linear
/// map back to the coarsest level, then up-sampling followed by one
/// convolution per level, and a final convolution to three coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub sampling_factors: Vec<usize>,
    /// Number of shared bases when the weighting matrices are factorized.
    pub factorized_bases: Option<usize>,
    pub inner_activation: bool,
    pub weighting_init: WeightingInit,
    /// Keep the weighting matrices at their initial value.
    pub freeze_weighting: bool,
    pub neighbor_order: NeighborOrder,
    pub std_mode: StdMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 8,
            k: 9,
            enc_channels: vec![16, 32, 64, 128],
            dec_channels: vec![64, 32, 32, 16],
            sampling_factors: vec![4, 4, 4, 4],
            factorized_bases: None,
            inner_activation: true,
            weighting_init: WeightingInit::Identity,
            freeze_weighting: false,
            neighbor_order: NeighborOrder::ByIndex,
            std_mode: StdMode::PerCoordinate,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.sampling_factors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 {
            return Err(Error::config("at least one sampling level is required"));
        }
        if self.enc_channels.len() != l || self.dec_channels.len() != l {
            return Err(Error::config(format!(
                "{l} sampling levels need {l} encoder and decoder channel counts, got {} and {}",
                self.enc_channels.len(),
                self.dec_channels.len()
            )));
        }
        if self.latent_dim == 0 || self.k == 0 {
            return Err(Error::config("latent_dim and K must be positive"));
        }
        if self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.sampling_factors.contains(&0) {
            return Err(Error::config("sampling factors must be at least 1"));
        }
        if self.factorized_bases == Some(0) {
            return Err(Error::config("factorized_bases must be positive"));
        }
        Ok(())
    }

    /// Vertex count of every level when the template has `n` vertices and
    /// each decimation hits its target exactly.
    pub fn nominal_level_sizes(&self, n: usize) -> Vec<usize> {
        let mut sizes = vec![n];
        for &p in &self.sampling_factors {
            sizes.push(sizes.last().unwrap().div_ceil(p));
        }
        sizes
    }

    fn conv(&self, d_in: usize, d_out: usize, activation: Activation) -> LsaConvConfig {
        let mut c = LsaConvConfig::new(self.k, d_in, d_out).with_activation(activation, self.inner_activation);
        if let Some(b) = self.factorized_bases {
            c = c.factorized(b);
        }
        c
    }

    /// `(name, level, layer config)` for every convolution in forward order.
    pub fn conv_layers(&self) -> Vec<(String, usize, LsaConvConfig)> {
        let l = self.levels();
        let elu = Activation::default();
        let mut out = Vec::new();
        let mut d_in = 3;
        for (i, &c) in self.enc_channels.iter().enumerate() {
            out.push((format!("enc{i}"), i, self.conv(d_in, c, elu)));
            d_in = c;
        }
        let mut d_in = *self.enc_channels.last().unwrap();
        for (j, &c) in self.dec_channels.iter().enumerate() {
            out.push((format!("dec{j}"), l - 1 - j, self.conv(d_in, c, elu)));
            d_in = c;
        }
        out.push((format!("dec{l}"), 0, self.conv(d_in, 3, Activation::Identity)));
        out
    }

    /// Trainable scalar count for the given level sizes, without building
    /// the model.
    pub fn parameter_count(&self, level_sizes: &[usize]) -> ParamCount {
        let mut count = ParamCount::default();
        for (_, level, c) in self.conv_layers() {
            let n = level_sizes[level];
            let k2 = c.k * c.k;
            if !self.freeze_weighting {
                count.weighting += match self.factorized_bases {
                    Some(b) => n * b + b * k2,
                    None => n * k2,
                };
            }
            count.filter += c.k * c.d_in * c.d_out;
            count.bias += c.d_out;
        }
        let flat = level_sizes[self.levels()] * self.enc_channels.last().unwrap();
        let d = self.latent_dim;
        count.fc = flat * d + d + d * flat + flat;
        count
    }
}

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Real> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
}

impl<T: Real> Dense<T> {
    fn new(name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Dense {
            w: Parameter::new(format!("{name}.W"), glorot(rng, d_in, d_out)),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    fn graph(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[0])?;
        tape.add_bias(y, vars[1])
    }
}

/// Convolutional mesh autoencoder on a fixed template.
#[derive(Debug, Clone)]
pub struct LsaAutoencoder<T: Real = f64> {
    config: ModelConfig,
    template: MeshTopology,
    sampling: Vec<SamplingOperator>,
    tables: Vec<Arc<NeighborTable>>,
    down: Vec<Arc<SparseMatrix>>,
    up: Vec<Arc<SparseMatrix>>,
    level_sizes: Vec<usize>,
    pub encoder: Vec<LsaConvLayer<T>>,
    pub fc_enc: Dense<T>,
    pub fc_dec: Dense<T>,
    pub decoder: Vec<LsaConvLayer<T>>,
    pub normalizer: Normalizer,
}

/// Parameter variables of one recorded forward pass, split by layer.
struct VarSplit<'a> {
    encoder: Vec<&'a [Var]>,
    fc_enc: &'a [Var],
    fc_dec: &'a [Var],
    decoder: Vec<&'a [Var]>,
}

impl<T: Real> LsaAutoencoder<T> {
    /// Builds the sampling hierarchy from `template` and initializes every
    /// parameter from `seed`.
    pub fn new(config: ModelConfig, template: MeshTopology, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let sampling = build_hierarchy(&template, &config.sampling_factors)?;
        Self::with_sampling(config, template, sampling, normalizer, seed)
    }

    /// Like [`new`](Self::new) with a precomputed sampling hierarchy.
    pub fn with_sampling(
        config: ModelConfig,
        template: MeshTopology,
        sampling: Vec<SamplingOperator>,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if sampling.len() != config.levels() {
            return Err(Error::config(format!(
                "{} sampling operators for {} levels",
                sampling.len(),
                config.levels()
            )));
        }
        let n = template.num_vertices();
        if normalizer.num_vertices() != n {
            return Err(Error::shape(format!(
                "normalizer has {} vertices, template {n}",
                normalizer.num_vertices()
            )));
        }
        let mut level_sizes = vec![n];
        for op in &sampling {
            if op.fine_vertices() != *level_sizes.last().unwrap() {
                return Err(Error::config("sampling operators do not chain from the template"));
            }
            level_sizes.push(op.coarse_vertices());
        }
        let mut tables = Vec::with_capacity(config.levels());
        for level in 0..config.levels() {
            let topo = if level == 0 { &template } else { &sampling[level - 1].coarse };
            tables.push(Arc::new(build_neighbor_table(topo, config.k, config.neighbor_order)?));
        }
        let down = sampling.iter().map(|o| Arc::new(o.down.clone())).collect();
        let up = sampling.iter().map(|o| Arc::new(o.up.clone())).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let specs = config.conv_layers();
        let l = config.levels();
        let flat = level_sizes[l] * config.enc_channels[l - 1];
        let mut fc = None;
        for (idx, (name, level, c)) in specs.into_iter().enumerate() {
            if idx == l {
                let fc_enc = Dense::new("fc_enc", flat, config.latent_dim, &mut rng);
                let fc_dec = Dense::new("fc_dec", config.latent_dim, flat, &mut rng);
                fc = Some((fc_enc, fc_dec));
            }
            let mut layer = LsaConvLayer::with_init(&name, level_sizes[level], c, config.weighting_init, &mut rng)?;
            if config.freeze_weighting {
                layer.freeze_weighting();
            }
            convs.push(layer);
        }
        let decoder = convs.split_off(l);
        let (fc_enc, fc_dec) = fc.expect("at least one level");
        Ok(LsaAutoencoder {
            config,
            template,
            sampling,
            tables,
            down,
            up,
            level_sizes,
            encoder: convs,
            fc_enc,
            fc_dec,
            decoder,
            normalizer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn template(&self) -> &MeshTopology {
        &self.template
    }

    pub fn sampling(&self) -> &[SamplingOperator] {
        &self.sampling
    }

    pub fn tables(&self) -> &[Arc<NeighborTable>] {
        &self.tables
    }

    /// Vertex count of the template and of every coarser level.
    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn num_vertices(&self) -> usize {
        self.level_sizes[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Every parameter in a fixed order: encoder convolutions, the two
    /// dense layers, decoder convolutions.
    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<&Parameter<T>> = self.encoder.iter().flat_map(|l| l.params()).collect();
        out.extend([&self.fc_enc.w, &self.fc_enc.b, &self.fc_dec.w, &self.fc_dec.b]);
        out.extend(self.decoder.iter().flat_map(|l| l.params()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let Self {
            encoder,
            fc_enc,
            fc_dec,
            decoder,
            ..
        } = self;
        let mut out: Vec<&mut Parameter<T>> = encoder.iter_mut().flat_map(|l| l.params_mut()).collect();
        out.extend([&mut fc_enc.w, &mut fc_enc.b, &mut fc_dec.w, &mut fc_dec.b]);
        out.extend(decoder.iter_mut().flat_map(|l| l.params_mut()));
        out
    }

    pub fn parameter_count(&self) -> ParamCount {
        let convs: ParamCount = self.encoder.iter().chain(&self.decoder).map(|l| l.parameter_count()).sum();
        let fc = [&self.fc_enc.w, &self.fc_enc.b, &self.fc_dec.w, &self.fc_dec.b]
            .iter()
            .map(|p| p.len())
            .sum();
        convs + ParamCount { fc, ..Default::default() }
    }

    /// Records every parameter on `tape`, frozen ones as constants.
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

    fn split<'a>(&self, vars: &'a [Var]) -> Result<VarSplit<'a>> {
        let want = self.params().len();
        if vars.len() != want {
            return Err(Error::shape(format!("{} parameter variables for {want} parameters", vars.len())));
        }
        let mut rest = vars;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        let encoder = self.encoder.iter().map(|l| take(l.params().len())).collect();
        let fc_enc = take(2);
        let fc_dec = take(2);
        let decoder = self.decoder.iter().map(|l| take(l.params().len())).collect();
        Ok(VarSplit {
            encoder,
            fc_enc,
            fc_dec,
            decoder,
        })
    }

    /// Standardized `[B, N, 3]` input to latent codes `[B, d]`.
    pub fn encode_graph(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let split = self.split(vars)?;
        let mut h = x;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward_graph(tape, split.encoder[i], h, &self.tables[i])?;
            h = tape.vertex_map(h, &self.down[i])?;
        }
        let shape = tape.value(h).shape().to_vec();
        let flat = tape.reshape(h, &[shape[0], shape[1] * shape[2]])?;
        self.fc_enc.graph(tape, split.fc_enc, flat)
    }

    /// Latent codes `[B, d]` to standardized `[B, N, 3]` shapes.
    pub fn decode_graph(&self, tape: &mut Tape<T>, vars: &[Var], z: Var) -> Result<Var> {
        let split = self.split(vars)?;
        let batch = match *tape.value(z).shape() {
            [b, d] if d == self.config.latent_dim => b,
            ref s => {
                return Err(Error::shape(format!(
                    "latent codes must be [B, {}], got {s:?}",
                    self.config.latent_dim
                )))
            }
        };
        let l = self.config.levels();
        let h = self.fc_dec.graph(tape, split.fc_dec, z)?;
        let mut h = tape.reshape(h, &[batch, self.level_sizes[l], self.config.enc_channels[l - 1]])?;
        for (j, layer) in self.decoder.iter().enumerate() {
            let level = l.saturating_sub(j + 1);
            if j < l {
                h = tape.vertex_map(h, &self.up[level])?;
            }
            h = layer.forward_graph(tape, split.decoder[j], h, &self.tables[level])?;
        }
        Ok(h)
    }

    /// Standardized reconstruction and latent code.
    pub fn forward_graph(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let z = self.encode_graph(tape, vars, x)?;
        let y = self.decode_graph(tape, vars, z)?;
        Ok((y, z))
    }

    fn constants(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params().iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        match *x.shape() {
            [_, n, 3] if n == self.num_vertices() => Ok(()),
            ref s => Err(Error::shape(format!(
                "model expects shapes on its {}-vertex template, got {s:?}",
                self.num_vertices()
            ))),
        }
    }

    /// Raw `[B, N, 3]` shapes to latent codes `[B, d]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let xs = tape.constant(self.normalizer.standardize(x)?);
        let z = self.encode_graph(&mut tape, &vars, xs)?;
        Ok(tape.value(z).clone())
    }

    /// Latent codes `[B, d]` to raw shapes `[B, N, 3]`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let zv = tape.constant(z.clone());
        let y = self.decode_graph(&mut tape, &vars, zv)?;
        self.normalizer.destandardize(tape.value(y))
    }

    /// Raw reconstruction and latent code.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let xs = tape.constant(self.normalizer.standardize(x)?);
        let (y, z) = self.forward_graph(&mut tape, &vars, xs)?;
        Ok((self.normalizer.destandardize(tape.value(y))?, tape.value(z).clone()))
    }

    /// Reconstructs `data` in batches of `batch` samples.
    pub fn reconstruct(&self, data: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        self.check_input(data)?;
        let s = data.shape()[0];
        let per = self.num_vertices() * 3;
        let mut out = Vec::with_capacity(data.len());
        for start in (0..s).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(s);
            let chunk = Tensor::new(vec![end - start, self.num_vertices(), 3], data.data()[start * per..end * per].to_vec())?;
            out.extend_from_slice(self.forward(&chunk)?.0.data());
        }
        Tensor::new(data.shape().to_vec(), out)
    }

    /// Copies of every parameter value, in [`params`](Self::params) order.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::shape("snapshot does not match the model"));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(format!("snapshot entry for {} has shape {:?}", p.name, v.shape())));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}
