//! Shared fixtures for the criterion benches.

use std::sync::Arc;

use lsamesh::mesh::{build_neighbor_table, icosphere};
use lsamesh::{LsaConvConfig, LsaConvLayer, MeshTopology, NeighborOrder, NeighborTable, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic values in `[-1, 1)` without an RNG dependency in callers.
pub fn filled<T: Real>(shape: &[usize], salt: usize) -> Tensor<T> {
    Tensor::from_fn(shape, |i| T::of(((i * 7919 + salt * 104_729) % 2000) as f64 / 1000.0 - 1.0))
}

pub struct ConvFixture<T: Real> {
    pub mesh: MeshTopology,
    pub table: Arc<NeighborTable>,
    pub layer: LsaConvLayer<T>,
    pub input: Tensor<T>,
}

impl<T: Real> ConvFixture<T> {
    pub fn new(subdivisions: u32, batch: usize, config: LsaConvConfig) -> Self {
        let mesh = icosphere(subdivisions, 1.0);
        let table = Arc::new(build_neighbor_table(&mesh, config.k, NeighborOrder::ByIndex).expect("icosphere table"));
        let n = mesh.num_vertices();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = LsaConvLayer::new("bench", n, config, &mut rng).expect("valid layer");
        let input = filled(&[batch, n, config.d_in], 1);
        ConvFixture { mesh, table, layer, input }
    }
}
