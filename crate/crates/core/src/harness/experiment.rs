use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::synthetic::{generate_synthetic, SyntheticSpec};
use crate::conv::{ParamCount, WeightingInit};
use crate::error::{Error, Result};
use crate::mesh::{write_ply_with_scalar, NeighborOrder};
use crate::model::{
    evaluate, per_vertex_errors, reconstruction_error, select_samples, split_validation, train, EpochLog,
    LsaAutoencoder, ModelConfig, Normalizer, Pca, TrainConfig, TrainOutputs,
};
use crate::mesh::MeshTopology;
use crate::sampling::{build_hierarchy, load_hierarchy, save_hierarchy, SamplingOperator};
use crate::tensor::{DType, Real, Tensor};

/// Where the shapes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Path(p) => Dataset::load(p),
            DatasetSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

/// A single controlled change to the baseline model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Neighbor slots shuffled with this seed.
    Reshuffle { seed: u64 },
    /// Weighting matrices drawn from `U(-bound, bound)` instead of identity.
    RandomInit { bound: f64 },
    /// Weighting matrices fixed at identity.
    NoWeightingMatrix,
}

impl Ablation {
    pub const RANDOM_INIT_BOUND: f64 = 0.05;

    pub fn apply(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        match *self {
            Ablation::None => {}
            Ablation::Reshuffle { seed } => m.neighbor_order = NeighborOrder::SeededShuffle { seed },
            Ablation::RandomInit { bound } => m.weighting_init = WeightingInit::Uniform { bound },
            Ablation::NoWeightingMatrix => {
                m.weighting_init = WeightingInit::Identity;
                m.freeze_weighting = true;
            }
        }
        m
    }

    pub fn label(&self) -> &'static str {
        match self {
            Ablation::None => "baseline",
            Ablation::Reshuffle { .. } => "reshuffle",
            Ablation::RandomInit { .. } => "random_init",
            Ablation::NoWeightingMatrix => "no_weighting_matrix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    /// PCA baseline size; defaults to the model's latent size.
    pub pca_dim: Option<usize>,
    pub output_dir: Option<PathBuf>,
    /// Directory of `sampling_{i}.bin` files, reused when it matches the
    /// template and factors and written otherwise.
    pub sampling_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub weighting: usize,
    pub filter: usize,
    pub bias: usize,
    pub fc: usize,
    pub total: usize,
}

impl From<ParamCount> for ParamReport {
    fn from(c: ParamCount) -> Self {
        ParamReport {
            weighting: c.weighting,
            filter: c.filter,
            bias: c.bias,
            fc: c.fc,
            total: c.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub ablation: Ablation,
    pub dtype: DType,
    pub latent_dim: usize,
    pub level_sizes: Vec<usize>,
    pub parameter_count: ParamReport,
    pub test_error_mm: f64,
    pub pca_dim: usize,
    pub pca_test_error_mm: f64,
    pub best_epoch: usize,
    pub best_val_error_mm: f64,
    pub val_indices: Vec<usize>,
    pub log: Vec<EpochLog>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Loads the dataset and runs [`run_on_dataset`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let data = config.dataset.load()?;
    run_on_dataset(config, &data)
}

/// Trains the (ablated) model and the PCA baseline on the same split and
/// reports test errors. With an output directory, writes `report.json`,
/// `log.csv` and the best checkpoint under `model/`.
pub fn run_on_dataset(config: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport> {
    match config.train.dtype {
        DType::F64 => run_typed::<f64>(config, data),
        DType::F32 => run_typed::<f32>(config, data),
    }
}

fn run_typed<T: Real>(config: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport> {
    let model_cfg = config.ablation.apply(&config.model);
    let tc = &config.train;
    let s = data.train.shape()[0];
    let (train_idx, val_idx) = split_validation(s, tc.val_size.min(s.saturating_sub(2)), tc.seed)?;
    let train_set = select_samples(&data.train, &train_idx)?;
    let val_set = select_samples(&data.train, &val_idx)?;
    let normalizer = Normalizer::fit(&train_set, model_cfg.std_mode)?;
    let sampling = match &config.sampling_cache {
        Some(dir) => cached_hierarchy(&data.template, &model_cfg.sampling_factors, dir)?,
        None => build_hierarchy(&data.template, &model_cfg.sampling_factors)?,
    };
    let mut model =
        LsaAutoencoder::<T>::with_sampling(model_cfg.clone(), data.template.clone(), sampling, normalizer, tc.seed)?;

    let outputs = TrainOutputs {
        log_csv: config.output_dir.as_ref().map(|d| d.join("log.csv")),
        checkpoint_dir: config.output_dir.as_ref().map(|d| d.join("model")),
    };
    let outcome = train(&mut model, &train_set, &val_set, tc, &outputs)?;
    let test_error_mm = evaluate(&model, &data.test, tc.batch_size.max(64))?;

    let pca_dim = config.pca_dim.unwrap_or(model_cfg.latent_dim);
    let pca = Pca::fit(&train_set, pca_dim)?;
    let pca_test_error_mm = reconstruction_error(&pca.reconstruct(&data.test)?, &data.test)?;

    let report = ExperimentReport {
        ablation: config.ablation,
        dtype: T::DTYPE,
        latent_dim: model_cfg.latent_dim,
        level_sizes: model.level_sizes().to_vec(),
        parameter_count: model.parameter_count().into(),
        test_error_mm,
        pca_dim,
        pca_test_error_mm,
        best_epoch: outcome.best_epoch,
        best_val_error_mm: outcome.best_val_error_mm,
        val_indices: val_idx,
        log: outcome.log,
        model: model_cfg,
        train: tc.clone(),
    };
    if let Some(dir) = &config.output_dir {
        crate::model::write_text(&dir.join("report.json"), &report.to_json()?)?;
    }
    log::info!(
        "{}: test {:.4} mm, PCA({pca_dim}) {:.4} mm",
        config.ablation.label(),
        report.test_error_mm,
        report.pca_test_error_mm
    );
    Ok(report)
}

/// Loads the hierarchy in `dir` if it was built for `template` with
/// `factors`; otherwise builds it and writes it there.
pub fn cached_hierarchy(template: &MeshTopology, factors: &[usize], dir: &Path) -> Result<Vec<SamplingOperator>> {
    if dir.join("sampling_0.bin").is_file() {
        if let Ok(ops) = load_hierarchy(dir, factors.len()) {
            let matches = ops.first().is_some_and(|op| op.fine_vertices() == template.num_vertices())
                && ops.iter().zip(factors).all(|(op, &f)| op.factor == f);
            if matches {
                return Ok(ops);
            }
        }
        log::warn!("sampling cache in {} does not match; rebuilding", dir.display());
    }
    let ops = build_hierarchy(template, factors)?;
    save_hierarchy(dir, &ops)?;
    Ok(ops)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub test_error_mm: f64,
    pub parameter_count: usize,
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("K,test_error_mm,parameter_count\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.k, r.test_error_mm, r.parameter_count);
    }
    s
}

/// One run per neighbor size with a shared seed. Runs in parallel threads
/// when `parallel` is set; each run writes under `<output_dir>/K<k>`.
pub fn neighbor_size_sweep(config: &ExperimentConfig, ks: &[usize], parallel: bool) -> Result<Vec<SweepRow>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::config("neighbor sizes must be a non-empty list of positive integers"));
    }
    let data = config.dataset.load()?;
    let job = |k: usize| -> Result<SweepRow> {
        let mut c = config.clone();
        c.model.k = k;
        c.output_dir = config.output_dir.as_ref().map(|d| d.join(format!("K{k}")));
        let r = run_on_dataset(&c, &data)?;
        Ok(SweepRow {
            k,
            test_error_mm: r.test_error_mm,
            parameter_count: r.parameter_count.total,
        })
    };
    let rows: Vec<SweepRow> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = ks.iter().map(|&k| scope.spawn(move || job(k))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("sweep worker panicked".into()))))
                .collect::<Result<_>>()
        })?
    } else {
        ks.iter().map(|&k| job(k)).collect::<Result<_>>()?
    };
    if let Some(dir) = &config.output_dir {
        crate::model::write_text(&dir.join("sweep.csv"), &sweep_to_csv(&rows))?;
    }
    Ok(rows)
}

/// Writes `truth`'s mesh with each vertex's reconstruction error (mm) as a
/// `error_mm` PLY property and returns the field. Both inputs are `[N, 3]`
/// or `[1, N, 3]`.
pub fn export_error_map(
    pred: &Tensor<f64>,
    truth: &Tensor<f64>,
    faces: &[[usize; 3]],
    path: &Path,
) -> Result<Vec<f64>> {
    let errors = per_vertex_errors(pred, truth)?;
    let positions: Vec<[f64; 3]> = truth.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    if let Some(bad) = faces.iter().flatten().find(|&&v| v >= positions.len()) {
        return Err(Error::shape(format!("face index {bad} outside {} vertices", positions.len())));
    }
    write_ply_with_scalar(path, &positions, faces, "error_mm", &errors)?;
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{icosahedron, load_mesh};

    #[test]
    fn ablations_change_one_factor() {
        let base = ModelConfig::default();
        let r = Ablation::Reshuffle { seed: 7 }.apply(&base);
        assert_eq!(r.neighbor_order, NeighborOrder::SeededShuffle { seed: 7 });
        assert_eq!(ModelConfig { neighbor_order: base.neighbor_order, ..r }, base);
        let u = Ablation::RandomInit { bound: 0.05 }.apply(&base);
        assert_eq!(ModelConfig { weighting_init: base.weighting_init, ..u }, base);
        let f = Ablation::NoWeightingMatrix.apply(&base);
        assert!(f.freeze_weighting);
        assert_eq!(ModelConfig { freeze_weighting: false, ..f }, base);
    }

    #[test]
    fn config_json_round_trip() {
        let c = ExperimentConfig {
            ablation: Ablation::RandomInit { bound: 0.05 },
            pca_dim: Some(4),
            ..Default::default()
        };
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, 32);
    }

    #[test]
    fn error_map_fields() {
        let dir = tempfile::tempdir().unwrap();
        let m = icosahedron(1.0);
        let truth = Tensor::new(vec![12, 3], m.positions().unwrap().iter().flatten().copied().collect()).unwrap();
        let path = dir.path().join("e.ply");
        let zero = export_error_map(&truth, &truth, m.faces(), &path).unwrap();
        assert!(zero.iter().all(|&e| e == 0.0));

        let mut moved = truth.clone();
        moved.data_mut()[4 * 3 + 1] += 0.5;
        let e = export_error_map(&moved, &truth, m.faces(), &path).unwrap();
        for (v, &x) in e.iter().enumerate() {
            assert_eq!(x, if v == 4 { 0.5 } else { 0.0 });
        }
        assert_eq!(e.iter().sum::<f64>() / 12.0, reconstruction_error(&moved, &truth).unwrap());
        assert_eq!(load_mesh(&path, None).unwrap().num_vertices(), 12);
    }
}
