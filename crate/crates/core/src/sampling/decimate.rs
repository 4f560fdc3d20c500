use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use super::SparseMatrix;
use crate::error::{Error, Result};
use crate::mesh::MeshTopology;

/// Weight of the perpendicular planes pinning open boundaries, in units of
/// the squared bounding box diagonal.
const BOUNDARY_WEIGHT: f64 = 1e3;

/// Result of greedy quadric edge collapse.
#[derive(Debug, Clone)]
pub struct Decimation {
    pub coarse: MeshTopology,
    /// `M x N` selection matrix.
    pub down: SparseMatrix,
    /// Surviving fine vertices, ascending; coarse vertex `r` is `kept[r]`.
    pub kept: Vec<usize>,
    /// Cost of every collapse in the order performed.
    pub costs: Vec<f64>,
    /// Index into `costs` where collapses that ignore the link condition
    /// start, if the target could not be reached without them.
    pub unconstrained_from: Option<usize>,
}

type Quadric = [f64; 10];

fn plane_quadric(n: [f64; 3], d: f64, w: f64) -> Quadric {
    let [a, b, c] = n;
    [
        w * a * a,
        w * a * b,
        w * a * c,
        w * a * d,
        w * b * b,
        w * b * c,
        w * b * d,
        w * c * c,
        w * c * d,
        w * d * d,
    ]
}

fn add_into(q: &mut Quadric, o: &Quadric) {
    for (a, b) in q.iter_mut().zip(o) {
        *a += b;
    }
}

fn eval(q: &Quadric, p: [f64; 3]) -> f64 {
    let [x, y, z] = p;
    q[0] * x * x + 2.0 * q[1] * x * y + 2.0 * q[2] * x * z + 2.0 * q[3] * x + q[4] * y * y
        + 2.0 * q[5] * y * z
        + 2.0 * q[6] * y
        + q[7] * z * z
        + 2.0 * q[8] * z
        + q[9]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 0.0).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    cost: f64,
    edge: (usize, usize),
    /// Endpoint that survives.
    keep: usize,
    stamps: (u64, u64),
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        self.cost.total_cmp(&o.cost).then(self.edge.cmp(&o.edge))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

struct State<'a> {
    pos: &'a [[f64; 3]],
    quadrics: Vec<Quadric>,
    adj: Vec<BTreeSet<usize>>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vert_faces: Vec<BTreeSet<usize>>,
    alive: Vec<bool>,
    stamp: Vec<u64>,
    boundary: Vec<bool>,
}

impl State<'_> {
    fn candidate(&self, a: usize, b: usize) -> Candidate {
        let (a, b) = (a.min(b), a.max(b));
        let mut q = self.quadrics[a];
        add_into(&mut q, &self.quadrics[b]);
        let (ca, cb) = (eval(&q, self.pos[a]), eval(&q, self.pos[b]));
        let (cost, keep) = if cb < ca { (cb, b) } else { (ca, a) };
        Candidate {
            cost,
            edge: (a, b),
            keep,
            stamps: (self.stamp[a], self.stamp[b]),
        }
    }

    fn is_current(&self, c: &Candidate) -> bool {
        let (a, b) = c.edge;
        self.alive[a]
            && self.alive[b]
            && self.stamp[a] == c.stamps.0
            && self.stamp[b] == c.stamps.1
            && self.adj[a].contains(&b)
    }

    fn edge_faces(&self, a: usize, b: usize) -> Vec<usize> {
        self.vert_faces[a]
            .iter()
            .copied()
            .filter(|&f| self.faces[f].contains(&b))
            .collect()
    }

    /// Collapsing keeps the surface a manifold with the same Euler
    /// characteristic: the shared neighbors are exactly the apexes of the
    /// edge's faces, and an interior edge does not join two boundary loops.
    fn link_ok(&self, a: usize, b: usize) -> bool {
        let shared = self.adj[a].intersection(&self.adj[b]).count();
        let faces = self.edge_faces(a, b);
        if shared != faces.len() {
            return false;
        }
        if faces.len() == 2 && self.boundary[a] && self.boundary[b] {
            return false;
        }
        // A closed tetrahedron cannot lose a vertex and stay a surface.
        let live_faces = self.face_alive.iter().filter(|&&f| f).count();
        !(faces.len() == 2 && live_faces <= 4)
    }

    fn collapse(&mut self, keep: usize, gone: usize) {
        let q = self.quadrics[gone];
        add_into(&mut self.quadrics[keep], &q);
        for f in std::mem::take(&mut self.vert_faces[gone]) {
            if self.faces[f].contains(&keep) {
                self.face_alive[f] = false;
                for v in self.faces[f] {
                    self.vert_faces[v].remove(&f);
                }
            } else {
                for v in self.faces[f].iter_mut() {
                    if *v == gone {
                        *v = keep;
                    }
                }
                self.vert_faces[keep].insert(f);
            }
        }
        for n in std::mem::take(&mut self.adj[gone]) {
            self.adj[n].remove(&gone);
            if n != keep {
                self.adj[n].insert(keep);
                self.adj[keep].insert(n);
            }
        }
        self.boundary[keep] |= self.boundary[gone];
        self.alive[gone] = false;
        self.stamp[keep] += 1;
        self.stamp[gone] += 1;
    }

    fn push_edges_of(&self, v: usize, heap: &mut BinaryHeap<Reverse<Candidate>>) {
        for &n in &self.adj[v] {
            heap.push(Reverse(self.candidate(v, n)));
        }
    }
}

fn initial_quadrics(mesh: &MeshTopology, pos: &[[f64; 3]]) -> Vec<Quadric> {
    let mut quadrics = vec![[0.0; 10]; pos.len()];
    let mut face_normal = Vec::with_capacity(mesh.faces().len());
    for f in mesh.faces() {
        let n = normalize(cross(sub(pos[f[1]], pos[f[0]]), sub(pos[f[2]], pos[f[0]])));
        face_normal.push(n);
        if let Some(n) = n {
            let q = plane_quadric(n, -dot(n, pos[f[0]]), 1.0);
            for &v in f {
                add_into(&mut quadrics[v], &q);
            }
        }
    }
    let boundary: HashSet<(usize, usize)> = mesh.boundary_edges().into_iter().collect();
    if boundary.is_empty() {
        return quadrics;
    }
    let diag = mesh.bbox_diagonal();
    let weight = BOUNDARY_WEIGHT * diag * diag;
    for (fi, f) in mesh.faces().iter().enumerate() {
        let Some(n) = face_normal[fi] else { continue };
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            if !boundary.contains(&(a.min(b), a.max(b))) {
                continue;
            }
            if let Some(m) = normalize(cross(sub(pos[b], pos[a]), n)) {
                let q = plane_quadric(m, -dot(m, pos[a]), weight);
                add_into(&mut quadrics[a], &q);
                add_into(&mut quadrics[b], &q);
            }
        }
    }
    quadrics
}

/// Collapses edges in order of increasing quadric error until `ceil(N / p)`
/// vertices remain. Each collapse moves an edge onto whichever endpoint has
/// the lower combined error, so coarse vertices are a subset of the fine
/// ones. Ties go to the lexicographically smaller edge.
pub fn quadric_decimate(mesh: &MeshTopology, factor: usize) -> Result<Decimation> {
    if factor == 0 {
        return Err(Error::config("sampling factor must be at least 1"));
    }
    let pos = mesh.require_positions()?;
    let n = mesh.num_vertices();
    if n == 0 {
        return Err(Error::config("cannot decimate an empty mesh"));
    }
    let target = n.div_ceil(factor);
    let mut vert_faces = vec![BTreeSet::new(); n];
    for (fi, f) in mesh.faces().iter().enumerate() {
        for &v in f {
            vert_faces[v].insert(fi);
        }
    }
    let mut boundary = vec![false; n];
    for (a, b) in mesh.boundary_edges() {
        boundary[a] = true;
        boundary[b] = true;
    }
    let mut st = State {
        pos,
        quadrics: initial_quadrics(mesh, pos),
        adj: (0..n).map(|v| mesh.neighbors(v).iter().copied().collect()).collect(),
        faces: mesh.faces().to_vec(),
        face_alive: vec![true; mesh.faces().len()],
        vert_faces,
        alive: vec![true; n],
        stamp: vec![0; n],
        boundary,
    };

    let mut remaining = n;
    let mut costs = Vec::new();
    let mut unconstrained_from = None;
    let mut constrained = true;
    while remaining > target {
        let mut heap = BinaryHeap::new();
        for v in (0..n).filter(|&v| st.alive[v]) {
            for &w in st.adj[v].range(v + 1..) {
                heap.push(Reverse(st.candidate(v, w)));
            }
        }
        let before = remaining;
        while remaining > target {
            let Some(Reverse(c)) = heap.pop() else { break };
            if !st.is_current(&c) {
                continue;
            }
            let (a, b) = c.edge;
            if constrained && !st.link_ok(a, b) {
                continue;
            }
            let gone = if c.keep == a { b } else { a };
            st.collapse(c.keep, gone);
            costs.push(c.cost);
            remaining -= 1;
            st.push_edges_of(c.keep, &mut heap);
        }
        if remaining > target && remaining == before {
            if !constrained {
                log::warn!("decimation stopped at {remaining} vertices (target {target}): no edges left");
                break;
            }
            log::warn!(
                "decimation reached {remaining} vertices (target {target}) under the link condition; continuing without it"
            );
            constrained = false;
            unconstrained_from = Some(costs.len());
        }
    }

    let kept: Vec<usize> = (0..n).filter(|&v| st.alive[v]).collect();
    let mut rank = vec![usize::MAX; n];
    for (r, &v) in kept.iter().enumerate() {
        rank[v] = r;
    }
    let mut seen = HashSet::new();
    let mut faces = Vec::new();
    for (f, alive) in st.faces.iter().zip(&st.face_alive) {
        if !alive || f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            continue;
        }
        let mut key = *f;
        key.sort_unstable();
        if seen.insert(key) {
            faces.push([rank[f[0]], rank[f[1]], rank[f[2]]]);
        }
    }
    let positions = kept.iter().map(|&v| pos[v]).collect();
    let coarse = MeshTopology::new(kept.len(), faces, Some(positions))?;
    let triplets: Vec<_> = kept.iter().enumerate().map(|(r, &v)| (r, v, 1.0)).collect();
    let down = SparseMatrix::from_triplets(kept.len(), n, &triplets)?;
    Ok(Decimation {
        coarse,
        down,
        kept,
        costs,
        unconstrained_from,
    })
}
