//! Mesh autoencoders built from local structure-aware anisotropic
//! convolutions on fixed-topology triangle meshes.

pub mod conv;
pub mod harness;
mod error;
pub mod mesh;
pub mod model;
pub mod sampling;
pub mod tensor;

pub use conv::{Activation, LsaConvConfig, LsaConvLayer, ParamCount, Weighting, WeightingInit};
pub use error::{Error, Result};
pub use mesh::{MeshTopology, NeighborOrder, NeighborTable};
pub use model::{LsaAutoencoder, ModelConfig, Normalizer, Pca, TrainConfig};
pub use sampling::{SamplingOperator, SparseMatrix};
pub use tensor::{DType, Parameter, Real, Tape, Tensor, Var};
