//! Fixed-topology triangle meshes and the padded neighbor tables built on them.

mod io;
mod neighbors;
mod shapes;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use io::{
    load_mesh, parse_mesh, save_mesh, write_mesh, write_ply_with_scalar, MeshFormat,
};
pub use neighbors::{
    build_neighbor_table, gather_neighbors, scatter_neighbors, NeighborOrder, NeighborTable,
    PAD_INDEX,
};
pub use shapes::{grid, icosahedron, icosphere};

/// Template connectivity shared by every shape in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTopology {
    num_vertices: usize,
    faces: Vec<[usize; 3]>,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    positions: Option<Vec<[f64; 3]>>,
}

impl MeshTopology {
    pub fn new(
        num_vertices: usize,
        faces: Vec<[usize; 3]>,
        positions: Option<Vec<[f64; 3]>>,
    ) -> Result<Self> {
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&v| v >= num_vertices) {
                return Err(Error::IndexOutOfRange {
                    face: fi,
                    index: bad,
                    num_vertices,
                });
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::DegenerateFace {
                    face: fi,
                    indices: *f,
                });
            }
        }
        if let Some(p) = &positions {
            if p.len() != num_vertices {
                return Err(Error::shape(format!(
                    "{} positions for {num_vertices} vertices",
                    p.len()
                )));
            }
        }
        let mut edges: Vec<(usize, usize)> = faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let mut adjacency = vec![Vec::new(); num_vertices];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for row in &mut adjacency {
            row.sort_unstable();
        }
        Ok(MeshTopology {
            num_vertices,
            faces,
            edges,
            adjacency,
            positions,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Undirected edges as `(min, max)` pairs, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// One-ring neighbors of `v` (excluding `v`), ascending.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn positions(&self) -> Option<&[[f64; 3]]> {
        self.positions.as_deref()
    }

    pub fn with_positions(mut self, positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.len() != self.num_vertices {
            return Err(Error::shape(format!(
                "{} positions for {} vertices",
                positions.len(),
                self.num_vertices
            )));
        }
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn require_positions(&self) -> Result<&[[f64; 3]]> {
        self.positions()
            .ok_or_else(|| Error::config("mesh has no vertex positions"))
    }

    fn edge_face_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Edges incident to exactly one face.
    pub fn boundary_edges(&self) -> Vec<(usize, usize)> {
        self.edge_face_counts()
            .into_iter()
            .filter_map(|(e, c)| (c == 1).then_some(e))
            .collect()
    }

    /// Edges incident to more than two faces.
    pub fn non_manifold_edges(&self) -> Vec<(usize, usize)> {
        self.edge_face_counts()
            .into_iter()
            .filter_map(|(e, c)| (c > 2).then_some(e))
            .collect()
    }

    /// Every edge has exactly two incident faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_face_counts().values().all(|&c| c == 2)
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.num_vertices as i64 - self.edges.len() as i64 + self.faces.len() as i64
    }

    /// Length of the bounding box diagonal, zero without positions.
    pub fn bbox_diagonal(&self) -> f64 {
        let Some(p) = self.positions() else {
            return 0.0;
        };
        if p.is_empty() {
            return 0.0;
        }
        let mut lo = p[0];
        let mut hi = p[0];
        for q in p {
            for c in 0..3 {
                lo[c] = lo[c].min(q[c]);
                hi[c] = hi[c].max(q[c]);
            }
        }
        (0..3).map(|c| (hi[c] - lo[c]).powi(2)).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_triangle_edges() {
        let m = MeshTopology::new(3, vec![[0, 1, 2]], None).unwrap();
        assert_eq!(m.edges(), &[(0, 1), (0, 2), (1, 2)]);
        assert_eq!(m.neighbors(0), &[1, 2]);
        assert_eq!(m.boundary_edges().len(), 3);
        assert!(!m.is_watertight());
    }

    #[test]
    fn rejects_out_of_range_and_degenerate() {
        assert!(matches!(
            MeshTopology::new(3, vec![[0, 1, 3]], None),
            Err(Error::IndexOutOfRange { index: 3, .. })
        ));
        assert!(matches!(
            MeshTopology::new(3, vec![[0, 1, 1]], None),
            Err(Error::DegenerateFace { .. })
        ));
    }

    #[test]
    fn edges_are_symmetric_in_adjacency() {
        let m = icosphere(1, 1.0);
        for &(a, b) in m.edges() {
            assert!(m.has_edge(a, b) && m.has_edge(b, a));
        }
        let total: usize = (0..m.num_vertices()).map(|v| m.neighbors(v).len()).sum();
        assert_eq!(total, 2 * m.edges().len());
    }

    #[test]
    fn isolated_vertices_are_allowed() {
        let m = MeshTopology::new(4, vec![[0, 1, 2]], None).unwrap();
        assert!(m.neighbors(3).is_empty());
    }
}
