//! Dataset directories.
//!
//! The archive form holds `template.obj`, `train.bin` and `test.bin` (tensor
//! containers with `vertices` `[S, N, 3]` and optionally `latents`) and a
//! `dataset.json` summary. The mesh form holds `train/` and `test/`
//! directories of registered OBJ, PLY or OFF meshes sharing one topology,
//! plus an optional `template.*` mesh.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{load_mesh, save_mesh, MeshFormat, MeshTopology};
use crate::tensor::{read_container, write_container, ContainerEntry, Tensor};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub template: MeshTopology,
    pub train: Tensor<f64>,
    pub test: Tensor<f64>,
    pub train_latents: Option<Tensor<f64>>,
    pub test_latents: Option<Tensor<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_vertices: usize,
    pub num_faces: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub latent_dim: Option<usize>,
    /// Generator settings for synthetic data.
    pub source: Option<serde_json::Value>,
}

impl Dataset {
    pub fn num_vertices(&self) -> usize {
        self.template.num_vertices()
    }

    pub fn summary(&self, source: Option<serde_json::Value>) -> DatasetSummary {
        DatasetSummary {
            num_vertices: self.num_vertices(),
            num_faces: self.template.faces().len(),
            num_train: self.train.shape()[0],
            num_test: self.test.shape()[0],
            latent_dim: self.train_latents.as_ref().map(|t| t.shape()[1]),
            source,
        }
    }

    pub fn save(&self, dir: &Path, source: Option<serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_mesh(&dir.join("template.obj"), &self.template, Some(MeshFormat::Obj))?;
        for (file, verts, latents) in [
            ("train.bin", &self.train, &self.train_latents),
            ("test.bin", &self.test, &self.test_latents),
        ] {
            let mut entries = vec![ContainerEntry::from_tensor("vertices", verts)];
            if let Some(l) = latents {
                entries.push(ContainerEntry::from_tensor("latents", l));
            }
            write_container(&dir.join(file), &entries)?;
        }
        let path = dir.join("dataset.json");
        let text = serde_json::to_string_pretty(&self.summary(source))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if dir.join("dataset.json").is_file() {
            return load_archive(dir);
        }
        if dir.join("train").is_dir() && dir.join("test").is_dir() {
            return load_mesh_dirs(dir);
        }
        Err(Error::config(format!(
            "{} is neither a dataset archive (dataset.json) nor a train/ + test/ mesh directory",
            dir.display()
        )))
    }
}

fn load_split(path: &Path) -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
    let entries = read_container(path)?;
    let get = |name: &str| entries.iter().find(|e| e.name == name).map(|e| e.to_tensor::<f64>()).transpose();
    let verts = get("vertices")?.ok_or_else(|| Error::Format(format!("{} has no vertices tensor", path.display())))?;
    Ok((verts, get("latents")?))
}

fn load_archive(dir: &Path) -> Result<Dataset> {
    let template = load_mesh(&dir.join("template.obj"), Some(MeshFormat::Obj))?;
    let (train, train_latents) = load_split(&dir.join("train.bin"))?;
    let (test, test_latents) = load_split(&dir.join("test.bin"))?;
    for t in [&train, &test] {
        if t.shape().len() != 3 || t.shape()[1] != template.num_vertices() || t.shape()[2] != 3 {
            return Err(Error::shape(format!(
                "dataset tensor {:?} does not match the {}-vertex template",
                t.shape(),
                template.num_vertices()
            )));
        }
    }
    Ok(Dataset {
        template,
        train,
        test,
        train_latents,
        test_latents,
    })
}

fn mesh_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && MeshFormat::from_path(p).is_ok())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!("no meshes in {}", dir.display())));
    }
    Ok(files)
}

/// Stacks registered meshes into `[S, N, 3]`, checking they share `faces`.
pub fn stack_meshes(files: &[PathBuf], template: &MeshTopology) -> Result<Tensor<f64>> {
    let mut data = Vec::with_capacity(files.len() * template.num_vertices() * 3);
    for f in files {
        let m = load_mesh(f, None)?;
        if m.num_vertices() != template.num_vertices() || m.faces() != template.faces() {
            return Err(Error::shape(format!("{} does not share the template topology", f.display())));
        }
        data.extend(m.require_positions()?.iter().flatten());
    }
    Tensor::new(vec![files.len(), template.num_vertices(), 3], data)
}

fn load_mesh_dirs(dir: &Path) -> Result<Dataset> {
    let train_files = mesh_files(&dir.join("train"))?;
    let test_files = mesh_files(&dir.join("test"))?;
    let template = match ["obj", "ply", "off"].iter().map(|e| dir.join(format!("template.{e}"))).find(|p| p.is_file()) {
        Some(p) => load_mesh(&p, None)?,
        None => load_mesh(&train_files[0], None)?,
    };
    Ok(Dataset {
        train: stack_meshes(&train_files, &template)?,
        test: stack_meshes(&test_files, &template)?,
        template,
        train_latents: None,
        test_latents: None,
    })
}
