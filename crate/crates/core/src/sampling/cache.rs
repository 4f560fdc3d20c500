//! On-disk sampling operators: `u32` LE header length, JSON header, then
//! COO triplets (`u32` row, `u32` col, `f64` value, little-endian) of the
//! down matrix followed by the up matrix.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SamplingOperator, SparseMatrix};
use crate::error::{Error, Result};
use crate::mesh::MeshTopology;

#[derive(Serialize, Deserialize)]
struct Header {
    fine_n: usize,
    coarse_m: usize,
    factor: usize,
    down_nnz: usize,
    up_nnz: usize,
    kept: Vec<usize>,
    coarse_faces: Vec<[usize; 3]>,
    coarse_positions: Vec<[f64; 3]>,
}

const TRIPLET_BYTES: usize = 16;

fn push_triplets(out: &mut Vec<u8>, m: &SparseMatrix) {
    for (r, c, v) in m.triplets() {
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_triplets(bytes: &[u8]) -> Vec<(usize, usize, f64)> {
    bytes
        .chunks_exact(TRIPLET_BYTES)
        .map(|t| {
            let r = u32::from_le_bytes(t[0..4].try_into().unwrap()) as usize;
            let c = u32::from_le_bytes(t[4..8].try_into().unwrap()) as usize;
            let v = f64::from_le_bytes(t[8..16].try_into().unwrap());
            (r, c, v)
        })
        .collect()
}

pub fn save_operator(path: &Path, op: &SamplingOperator) -> Result<()> {
    let header = Header {
        fine_n: op.fine_vertices(),
        coarse_m: op.coarse_vertices(),
        factor: op.factor,
        down_nnz: op.down.nnz(),
        up_nnz: op.up.nnz(),
        kept: op.kept.clone(),
        coarse_faces: op.coarse.faces().to_vec(),
        coarse_positions: op.coarse.require_positions()?.to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(4 + json.len() + TRIPLET_BYTES * (header.down_nnz + header.up_nnz));
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    push_triplets(&mut out, &op.down);
    push_triplets(&mut out, &op.up);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_operator(path: &Path) -> Result<SamplingOperator> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 4 {
        return Err(bad("truncated header length"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = bytes.get(4..4 + hlen).ok_or_else(|| bad("truncated header"))?;
    let h: Header = serde_json::from_slice(body)?;
    let payload = &bytes[4 + hlen..];
    if payload.len() != TRIPLET_BYTES * (h.down_nnz + h.up_nnz) {
        return Err(bad("triplet payload size does not match header"));
    }
    if h.kept.len() != h.coarse_m || h.coarse_positions.len() != h.coarse_m {
        return Err(bad("coarse vertex count does not match header"));
    }
    let (down, up) = payload.split_at(TRIPLET_BYTES * h.down_nnz);
    let down = SparseMatrix::from_triplets(h.coarse_m, h.fine_n, &read_triplets(down))?;
    let up = SparseMatrix::from_triplets(h.fine_n, h.coarse_m, &read_triplets(up))?;
    let coarse = MeshTopology::new(h.coarse_m, h.coarse_faces, Some(h.coarse_positions))?;
    Ok(SamplingOperator {
        factor: h.factor,
        down,
        up,
        kept: h.kept,
        coarse,
    })
}

fn level_path(dir: &Path, level: usize) -> PathBuf {
    dir.join(format!("sampling_{level}.bin"))
}

/// Writes `sampling_0.bin`, `sampling_1.bin`, ... into `dir`.
pub fn save_hierarchy(dir: &Path, ops: &[SamplingOperator]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, op) in ops.iter().enumerate() {
        save_operator(&level_path(dir, i), op)?;
    }
    Ok(())
}

/// Reads `levels` operators written by [`save_hierarchy`].
pub fn load_hierarchy(dir: &Path, levels: usize) -> Result<Vec<SamplingOperator>> {
    let ops: Vec<SamplingOperator> = (0..levels)
        .map(|i| load_operator(&level_path(dir, i)))
        .collect::<Result<_>>()?;
    for w in ops.windows(2) {
        if w[0].coarse_vertices() != w[1].fine_vertices() {
            return Err(Error::Format(format!("sampling levels in {} do not chain", dir.display())));
        }
    }
    Ok(ops)
}
