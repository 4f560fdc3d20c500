//! Model directories: `model.json` manifest, `params.bin` tensor container,
//! `template.obj` and the cached sampling operators.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::autoencoder::{LsaAutoencoder, ModelConfig};
use super::normalize::Normalizer;
use super::train::{write_text, TrainConfig};
use crate::conv::{LsaConvConfig, ParamCount};
use crate::error::{Error, Result};
use crate::mesh::{load_mesh, save_mesh, MeshFormat};
use crate::sampling::{load_hierarchy, save_hierarchy};
use crate::tensor::{read_container, write_container, ContainerEntry, DType, Real, Tensor};

pub const MODEL_FORMAT: &str = "lsamesh-model";
pub const MODEL_VERSION: u32 = 1;

const NORMALIZER_MEAN: &str = "normalizer.mean";
const NORMALIZER_STD: &str = "normalizer.std";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub name: String,
    pub level: usize,
    pub num_vertices: usize,
    #[serde(flatten)]
    pub conv: LsaConvConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerManifest {
    pub mean: String,
    pub std: String,
    pub mode: super::normalize::StdMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub config: ModelConfig,
    pub level_sizes: Vec<usize>,
    pub layers: Vec<LayerManifest>,
    pub parameter_count: ParamCount,
    pub normalizer: NormalizerManifest,
    pub params: String,
    pub template: String,
    pub sampling_levels: usize,
    /// Training settings the parameters came from, including the loss.
    pub train: Option<TrainConfig>,
}

impl<T: Real> LsaAutoencoder<T> {
    pub fn manifest(&self, train: Option<&TrainConfig>) -> ModelManifest {
        let layers = self
            .config()
            .conv_layers()
            .into_iter()
            .map(|(name, level, conv)| LayerManifest {
                name,
                level,
                num_vertices: self.level_sizes()[level],
                conv,
            })
            .collect();
        ModelManifest {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            dtype: T::DTYPE,
            config: self.config().clone(),
            level_sizes: self.level_sizes().to_vec(),
            layers,
            parameter_count: self.parameter_count(),
            normalizer: NormalizerManifest {
                mean: NORMALIZER_MEAN.into(),
                std: NORMALIZER_STD.into(),
                mode: self.config().std_mode,
            },
            params: "params.bin".into(),
            template: "template.obj".into(),
            sampling_levels: self.sampling().len(),
            train: train.cloned(),
        }
    }

    /// Parameter and normalizer tensors as container entries.
    pub fn checkpoint_entries(&self) -> Vec<ContainerEntry> {
        let mut entries: Vec<ContainerEntry> = self.params().iter().map(|p| p.to_entry()).collect();
        for (name, t) in [(NORMALIZER_MEAN, &self.normalizer.mean), (NORMALIZER_STD, &self.normalizer.std)] {
            entries.push(ContainerEntry::from_tensor(name, t).with_flags(false, false));
        }
        entries
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_container(path, &self.checkpoint_entries())
    }

    /// Overwrites parameters and normalizer from a container, matching by
    /// name. Values stored in another precision are converted.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = read_container(path)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("{} has no tensor named {name}", path.display())))
        };
        let mean = find(NORMALIZER_MEAN)?.to_tensor::<f64>()?;
        let std = find(NORMALIZER_STD)?.to_tensor::<f64>()?;
        if mean.shape() != self.normalizer.mean.shape() || std.shape() != self.normalizer.std.shape() {
            return Err(Error::shape("checkpoint normalizer does not match the template"));
        }
        let mut values = Vec::new();
        for p in self.params() {
            let e = find(&p.name)?;
            let t: Tensor<T> = e.to_tensor()?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(format!("checkpoint tensor {} has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
            }
            values.push((t, e.trainable));
        }
        for (p, (t, trainable)) in self.params_mut().into_iter().zip(values) {
            p.value = t;
            p.trainable = trainable;
        }
        self.normalizer = Normalizer { mean, std };
        Ok(())
    }

    /// Writes a self-contained model directory.
    pub fn save(&self, dir: &Path, train: Option<&TrainConfig>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest(train);
        write_text(&dir.join("model.json"), &serde_json::to_string_pretty(&manifest)?)?;
        self.save_checkpoint(&dir.join(&manifest.params))?;
        save_mesh(&dir.join(&manifest.template), self.template(), Some(MeshFormat::Obj))?;
        save_hierarchy(dir, self.sampling())
    }

    /// Reads a directory written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_model_manifest(dir)?;
        let template = load_mesh(&dir.join(&manifest.template), Some(MeshFormat::Obj))?;
        let sampling = load_hierarchy(dir, manifest.sampling_levels)?;
        let n = template.num_vertices();
        let mut model = Self::with_sampling(manifest.config, template, sampling, Normalizer::identity(n), 0)?;
        model.load_checkpoint(&dir.join(&manifest.params))?;
        Ok(model)
    }
}

pub fn read_model_manifest(dir: &Path) -> Result<ModelManifest> {
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    if manifest.format != MODEL_FORMAT || manifest.version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "{} is {} v{}, expected {MODEL_FORMAT} v{MODEL_VERSION}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;
    use crate::tensor::read_manifest;

    fn model() -> LsaAutoencoder<f64> {
        let cfg = ModelConfig {
            latent_dim: 4,
            enc_channels: vec![4, 4, 4, 4],
            dec_channels: vec![4, 4, 4, 4],
            ..Default::default()
        };
        let mut nz = Normalizer::identity(42);
        nz.mean = Tensor::from_fn(&[42, 3], |i| (i as f64).cos());
        LsaAutoencoder::new(cfg, icosphere(1, 10.0), nz, 9).unwrap()
    }

    #[test]
    fn directory_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        m.save(dir.path(), None).unwrap();
        let back = LsaAutoencoder::<f64>::load(dir.path()).unwrap();
        let x = Tensor::from_fn(&[3, 42, 3], |i| (i as f64 * 0.37).sin() * 10.0);
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert_eq!(back.template(), m.template());
    }

    #[test]
    fn manifest_audit_matches_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        m.save(dir.path(), None).unwrap();
        let records = read_manifest(&dir.path().join("params.bin")).unwrap();
        let trainable: usize = records
            .iter()
            .filter(|r| r.trainable)
            .map(|r| r.shape.iter().product::<usize>())
            .sum();
        assert_eq!(trainable, m.parameter_count().total());
        let man = read_model_manifest(dir.path()).unwrap();
        assert_eq!(man.parameter_count, m.parameter_count());
        assert_eq!(man.layers.len(), 9);
    }

    #[test]
    fn checkpoint_converts_precision() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let path = dir.path().join("p.bin");
        m.save_checkpoint(&path).unwrap();
        let cfg = m.config().clone();
        let mut single = LsaAutoencoder::<f32>::new(cfg, m.template().clone(), Normalizer::identity(42), 1).unwrap();
        single.load_checkpoint(&path).unwrap();
        assert_eq!(single.normalizer, m.normalizer);
        assert_eq!(single.fc_enc.w.value, m.fc_enc.w.value.cast::<f32>());
    }
}
