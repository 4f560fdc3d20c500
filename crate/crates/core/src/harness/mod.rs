//! Datasets, experiment drivers and result export.

mod dataset;
mod experiment;
mod synthetic;

pub use dataset::{stack_meshes, Dataset, DatasetSummary};
pub use experiment::{
    cached_hierarchy, export_error_map, neighbor_size_sweep, run_experiment, run_on_dataset, sweep_to_csv, Ablation, DatasetSource,
    ExperimentConfig, ExperimentReport, ParamReport, SweepRow,
};
pub use synthetic::{generate_synthetic, BaseShape, Deformer, SyntheticSpec};
