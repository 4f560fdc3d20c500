use super::SparseMatrix;
use crate::error::{Error, Result};
use crate::mesh::MeshTopology;

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// Closest point of triangle `abc` to `p`, returned as barycentric weights
/// `(wa, wb, wc)` summing to one.
pub fn closest_point_on_triangle(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

fn combine(ws: &[f64], ps: &[[f64; 3]]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (w, p) in ws.iter().zip(ps) {
        for c in 0..3 {
            out[c] += w * p[c];
        }
    }
    out
}

/// Interpolation weights of one point on the coarse mesh: nearest face,
/// else nearest edge, else nearest vertex. Ties keep the first candidate.
fn project(p: [f64; 3], coarse: &MeshTopology, cpos: &[[f64; 3]]) -> Vec<(usize, f64)> {
    let mut best: Option<(f64, Vec<(usize, f64)>)> = None;
    let mut consider = |d: f64, entry: Vec<(usize, f64)>| {
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, entry));
        }
    };
    if !coarse.faces().is_empty() {
        for f in coarse.faces() {
            let corners = [cpos[f[0]], cpos[f[1]], cpos[f[2]]];
            let w = closest_point_on_triangle(p, corners[0], corners[1], corners[2]);
            consider(dist2(p, combine(&w, &corners)), f.iter().copied().zip(w).collect());
        }
    } else if !coarse.edges().is_empty() {
        for &(a, b) in coarse.edges() {
            let ab = sub(cpos[b], cpos[a]);
            let len2 = dot(ab, ab);
            let t = if len2 > 0.0 { (dot(sub(p, cpos[a]), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let w = [1.0 - t, t];
            consider(dist2(p, combine(&w, &[cpos[a], cpos[b]])), vec![(a, w[0]), (b, w[1])]);
        }
    } else {
        for (v, &q) in cpos.iter().enumerate() {
            consider(dist2(p, q), vec![(v, 1.0)]);
        }
    }
    best.map(|(_, e)| e).unwrap_or_default()
}

/// `N x M` matrix mapping coarse vertices back onto the fine template.
/// Rows of kept vertices are one-hot; every other fine vertex takes the
/// barycentric weights of its closest point on the coarse surface.
pub fn build_upsampler(coarse: &MeshTopology, fine: &MeshTopology, kept: &[usize]) -> Result<SparseMatrix> {
    let m = coarse.num_vertices();
    if m == 0 {
        return Err(Error::config("cannot up-sample from an empty coarse mesh"));
    }
    if kept.len() != m {
        return Err(Error::shape(format!("{} kept vertices for a coarse mesh of {m}", kept.len())));
    }
    let cpos = coarse.require_positions()?;
    let fpos = fine.require_positions()?;
    let n = fine.num_vertices();
    let mut rank = vec![None; n];
    for (r, &v) in kept.iter().enumerate() {
        if v >= n {
            return Err(Error::shape(format!("kept vertex {v} outside fine mesh of {n}")));
        }
        rank[v] = Some(r);
    }
    let mut triplets = Vec::new();
    for (v, &p) in fpos.iter().enumerate() {
        if let Some(r) = rank[v] {
            triplets.push((v, r, 1.0));
            continue;
        }
        for (c, w) in project(p, coarse, cpos) {
            if w > 0.0 {
                triplets.push((v, c, w));
            }
        }
    }
    SparseMatrix::from_triplets(n, m, &triplets)
}
