use std::collections::HashMap;

use super::MeshTopology;

/// Regular icosahedron with outward-facing counter-clockwise faces.
pub fn icosahedron(radius: f64) -> MeshTopology {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let positions = raw.iter().map(|p| project(*p, radius)).collect();
    MeshTopology::new(12, faces, Some(positions)).expect("icosahedron is valid")
}

fn project(p: [f64; 3], radius: f64) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n * radius, p[1] / n * radius, p[2] / n * radius]
}

/// Icosahedron refined `subdivisions` times by 1-to-4 midpoint splits, with
/// new vertices pushed onto the sphere. Vertex count is `10 * 4^s + 2`.
pub fn icosphere(subdivisions: u32, radius: f64) -> MeshTopology {
    let base = icosahedron(radius);
    let mut positions: Vec<[f64; 3]> = base.positions().unwrap().to_vec();
    let mut faces: Vec<[usize; 3]> = base.faces().to_vec();
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, positions: &mut Vec<[f64; 3]>| -> usize {
            *midpoint.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let (pa, pb) = (positions[a], positions[b]);
                let m = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0, (pa[2] + pb[2]) / 2.0];
                positions.push(project(m, radius));
                positions.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut positions);
            let bc = mid(b, c, &mut positions);
            let ca = mid(c, a, &mut positions);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    MeshTopology::new(positions.len(), faces, Some(positions)).expect("icosphere is valid")
}

/// Open `w x h` vertex grid in the z = 0 plane, two triangles per cell.
pub fn grid(w: usize, h: usize, spacing: f64) -> MeshTopology {
    assert!(w >= 2 && h >= 2, "grid needs at least 2x2 vertices");
    let positions = (0..h)
        .flat_map(|r| (0..w).map(move |c| [c as f64 * spacing, r as f64 * spacing, 0.0]))
        .collect();
    let mut faces = Vec::with_capacity(2 * (w - 1) * (h - 1));
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let v = r * w + c;
            faces.push([v, v + 1, v + w + 1]);
            faces.push([v, v + w + 1, v + w]);
        }
    }
    MeshTopology::new(w * h, faces, Some(positions)).expect("grid is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        for (s, v, f) in [(0, 12, 20), (1, 42, 80), (2, 162, 320), (3, 642, 1280)] {
            let m = icosphere(s, 1.0);
            assert_eq!(m.num_vertices(), v);
            assert_eq!(m.faces().len(), f);
            assert_eq!(m.euler_characteristic(), 2);
            assert!(m.is_watertight());
        }
    }

    #[test]
    fn icosphere_vertices_lie_on_sphere() {
        let m = icosphere(2, 100.0);
        for p in m.positions().unwrap() {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_is_open_disk() {
        let g = grid(4, 3, 1.0);
        assert_eq!(g.num_vertices(), 12);
        assert_eq!(g.faces().len(), 12);
        assert_eq!(g.euler_characteristic(), 1);
        assert_eq!(g.boundary_edges().len(), 2 * (3 + 2));
    }
}
