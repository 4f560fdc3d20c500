use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MeshTopology;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Sentinel stored in padded slots.
pub const PAD_INDEX: u32 = u32::MAX;

/// How slots `1..K` of each row are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum NeighborOrder {
    /// Ascending vertex index.
    #[default]
    ByIndex,
    /// Retained neighbors permuted per vertex from one seeded stream.
    SeededShuffle { seed: u64 },
}

/// Padded per-vertex receptive fields of width `K`.
///
/// Slot 0 of row `i` is always `i`; slots `1..` hold one-ring neighbors,
/// followed by [`PAD_INDEX`] padding.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    num_vertices: usize,
    k: usize,
    indices: Vec<u32>,
    order: NeighborOrder,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    num_vertices: usize,
    k: usize,
    order: NeighborOrder,
    pad_index: u32,
}

pub fn build_neighbor_table(
    topology: &MeshTopology,
    k: usize,
    order: NeighborOrder,
) -> Result<NeighborTable> {
    if k == 0 {
        return Err(Error::config("neighbor size K must be at least 1"));
    }
    let n = topology.num_vertices();
    let mut indices = vec![PAD_INDEX; n * k];
    let mut rng = match order {
        NeighborOrder::SeededShuffle { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        NeighborOrder::ByIndex => None,
    };
    for i in 0..n {
        let row = &mut indices[i * k..(i + 1) * k];
        row[0] = i as u32;
        let ring = topology.neighbors(i);
        let keep = ring.len().min(k - 1);
        for (slot, &v) in row[1..=keep].iter_mut().zip(ring) {
            *slot = v as u32;
        }
        if let Some(rng) = rng.as_mut() {
            row[1..=keep].shuffle(rng);
        }
    }
    Ok(NeighborTable {
        num_vertices: n,
        k,
        indices,
        order,
    })
}

impl NeighborTable {
    /// Builds a table directly from rows; used by tests and tools that
    /// construct receptive fields by hand.
    pub fn from_rows(k: usize, rows: &[Vec<Option<usize>>], order: NeighborOrder) -> Result<Self> {
        let mut indices = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k || row[0] != Some(i) {
                return Err(Error::shape(format!("row {i} must have width {k} and start with {i}")));
            }
            indices.extend(row.iter().map(|s| s.map_or(PAD_INDEX, |v| v as u32)));
        }
        Ok(NeighborTable {
            num_vertices: rows.len(),
            k,
            indices,
            order,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn order(&self) -> NeighborOrder {
        self.order
    }

    pub fn raw_row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let v = self.indices[i * self.k + j];
        (v != PAD_INDEX).then_some(v as usize)
    }

    pub fn mask(&self, i: usize, j: usize) -> bool {
        self.indices[i * self.k + j] != PAD_INDEX
    }

    pub fn valid_count(&self, i: usize) -> usize {
        self.raw_row(i).iter().filter(|&&v| v != PAD_INDEX).count()
    }

    /// Writes the binary blob (`N`, `K`, then `N*K` indices, all `u32`
    /// little-endian) and a `.json` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 + 4 * self.indices.len());
        bytes.extend_from_slice(&(self.num_vertices as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.k as u32).to_le_bytes());
        for &v in &self.indices {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = Sidecar {
            num_vertices: self.num_vertices,
            k: self.k,
            order: self.order,
            pad_index: PAD_INDEX,
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 {
            return Err(Error::Format("neighbor table blob too short".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let (n, k) = (word(0) as usize, word(1) as usize);
        if bytes.len() != 8 + 4 * n * k {
            return Err(Error::Format(format!(
                "neighbor table blob has {} bytes, expected {}",
                bytes.len(),
                8 + 4 * n * k
            )));
        }
        let indices: Vec<u32> = (0..n * k).map(|i| word(i + 2)).collect();
        let side = sidecar_path(path);
        let order = match fs::read(&side) {
            Ok(b) => serde_json::from_slice::<Sidecar>(&b)?.order,
            Err(_) => NeighborOrder::ByIndex,
        };
        for i in 0..n {
            if indices[i * k] != i as u32 {
                return Err(Error::Format(format!("row {i} does not start with its center")));
            }
            if let Some(&bad) = indices[i * k..(i + 1) * k]
                .iter()
                .find(|&&v| v != PAD_INDEX && v as usize >= n)
            {
                return Err(Error::Format(format!("row {i} references vertex {bad}")));
            }
        }
        Ok(NeighborTable {
            num_vertices: n,
            k,
            indices,
            order,
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn batch_dims<T: Real>(x: &Tensor<T>, n: usize) -> Result<(usize, usize)> {
    match *x.shape() {
        [b, nn, d] if nn == n => Ok((b, d)),
        _ => Err(Error::shape(format!(
            "expected [B, {n}, D] features, got {:?}",
            x.shape()
        ))),
    }
}

/// `[B, N, D] -> [B, N, K, D]`: slot `j` of vertex `i` holds the features of
/// neighbor `table.slot(i, j)`, or zeros for padding.
///
/// The neighbor block of each vertex is stored slot-major, so the flattened
/// `K * D` row is the column-major vectorization of the `D x K` block.
pub fn gather_neighbors<T: Real>(x: &Tensor<T>, table: &NeighborTable) -> Result<Tensor<T>> {
    let (n, k) = (table.num_vertices, table.k);
    let (b, d) = batch_dims(x, n)?;
    let mut out = Tensor::zeros(&[b, n, k, d]);
    let src = x.data();
    let dst = out.data_mut();
    for bi in 0..b {
        let xb = &src[bi * n * d..(bi + 1) * n * d];
        for i in 0..n {
            for (j, &v) in table.raw_row(i).iter().enumerate() {
                if v == PAD_INDEX {
                    continue;
                }
                let v = v as usize;
                let o = ((bi * n + i) * k + j) * d;
                dst[o..o + d].copy_from_slice(&xb[v * d..(v + 1) * d]);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`gather_neighbors`]: scatter-adds slot gradients back onto
/// vertices. Padded slots are dropped.
pub fn scatter_neighbors<T: Real>(g: &Tensor<T>, table: &NeighborTable) -> Result<Tensor<T>> {
    let (n, k) = (table.num_vertices, table.k);
    let (b, d) = match *g.shape() {
        [b, nn, kk, d] if nn == n && kk == k => (b, d),
        _ => {
            return Err(Error::shape(format!(
                "expected [B, {n}, {k}, D] gradient, got {:?}",
                g.shape()
            )))
        }
    };
    let mut out = Tensor::zeros(&[b, n, d]);
    let src = g.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for i in 0..n {
            for (j, &v) in table.raw_row(i).iter().enumerate() {
                if v == PAD_INDEX {
                    continue;
                }
                let o = ((bi * n + i) * k + j) * d;
                let t = (bi * n + v as usize) * d;
                for c in 0..d {
                    dst[t + c] += src[o + c];
                }
            }
        }
    }
    Ok(out)
}
