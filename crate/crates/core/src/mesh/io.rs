//! OBJ, OFF and ASCII PLY readers and writers.
//!
//! Coordinates are written with Rust's shortest round-trip formatting, so a
//! load/save/load cycle reproduces positions bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MeshTopology;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshFormat {
    Obj,
    Off,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("off") => Ok(MeshFormat::Off),
            Some("ply") => Ok(MeshFormat::Ply),
            _ => Err(Error::Unsupported(format!(
                "cannot infer mesh format of {}",
                path.display()
            ))),
        }
    }
}

pub fn load_mesh(path: &Path, format: Option<MeshFormat>) -> Result<MeshTopology> {
    let format = match format {
        Some(f) => f,
        None => MeshFormat::from_path(path)?,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh(&text, format, path)
}

pub fn parse_mesh(text: &str, format: MeshFormat, origin: &Path) -> Result<MeshTopology> {
    let (positions, polygons) = match format {
        MeshFormat::Obj => parse_obj(text, origin)?,
        MeshFormat::Off => parse_off(text, origin)?,
        MeshFormat::Ply => parse_ply(text, origin)?,
    };
    let n = positions.len();
    let mut faces = Vec::with_capacity(polygons.len());
    for poly in &polygons {
        triangulate(poly, &mut faces);
    }
    let mesh = MeshTopology::new(n, faces, Some(positions))?;
    let bad = mesh.non_manifold_edges();
    if !bad.is_empty() {
        log::warn!(
            "{}: {} non-manifold edges (first: {:?})",
            origin.display(),
            bad.len(),
            bad[0]
        );
    }
    Ok(mesh)
}

/// Triangles as-is, quads split along (0, 2), larger polygons fanned from
/// their first corner.
fn triangulate(poly: &[usize], out: &mut Vec<[usize; 3]>) {
    for i in 1..poly.len().saturating_sub(1) {
        out.push([poly[0], poly[i], poly[i + 1]]);
    }
}

fn parse_err(origin: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(tok: Option<&str>, origin: &Path, line: usize) -> Result<f64> {
    tok.ok_or_else(|| parse_err(origin, line, "missing coordinate"))?
        .parse()
        .map_err(|_| parse_err(origin, line, "bad coordinate"))
}

fn parse_usize(tok: Option<&str>, origin: &Path, line: usize) -> Result<usize> {
    tok.ok_or_else(|| parse_err(origin, line, "missing integer"))?
        .parse()
        .map_err(|_| parse_err(origin, line, "bad integer"))
}

type Parsed = (Vec<[f64; 3]>, Vec<Vec<usize>>);

fn parse_obj(text: &str, origin: &Path) -> Result<Parsed> {
    let mut positions = Vec::new();
    let mut raw_faces: Vec<(usize, Vec<i64>)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64(toks.next(), origin, line_no)?;
                let y = parse_f64(toks.next(), origin, line_no)?;
                let z = parse_f64(toks.next(), origin, line_no)?;
                positions.push([x, y, z]);
            }
            Some("f") => {
                let idx = toks
                    .map(|t| {
                        t.split('/')
                            .next()
                            .and_then(|s| s.parse::<i64>().ok())
                            .ok_or_else(|| parse_err(origin, line_no, format!("bad face index {t:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(parse_err(origin, line_no, "face with fewer than 3 vertices"));
                }
                raw_faces.push((line_no, idx));
            }
            _ => {}
        }
    }
    let n = positions.len() as i64;
    let polygons = raw_faces
        .into_iter()
        .enumerate()
        .map(|(fi, (_, idx))| {
            idx.into_iter()
                .map(|i| {
                    let resolved = if i < 0 { n + i } else { i - 1 };
                    if resolved < 0 || resolved >= n {
                        Err(Error::IndexOutOfRange {
                            face: fi,
                            index: resolved.max(0) as usize,
                            num_vertices: n as usize,
                        })
                    } else {
                        Ok(resolved as usize)
                    }
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    Ok((positions, polygons))
}

/// Non-empty lines with `#` comments stripped, paired with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn check_indices(poly: &[usize], face: usize, n: usize) -> Result<()> {
    match poly.iter().find(|&&i| i >= n) {
        Some(&bad) => Err(Error::IndexOutOfRange {
            face,
            index: bad,
            num_vertices: n,
        }),
        None => Ok(()),
    }
}

fn parse_off(text: &str, origin: &Path) -> Result<Parsed> {
    let mut lines = content_lines(text);
    let (ln, header) = lines
        .next()
        .ok_or_else(|| parse_err(origin, 1, "empty OFF file"))?;
    // Counts may share the header line ("OFF 8 12 0").
    let counts_line = match header.strip_prefix("OFF") {
        Some(rest) if !rest.trim().is_empty() => (ln, rest.trim()),
        Some(_) => lines
            .next()
            .ok_or_else(|| parse_err(origin, ln, "missing OFF counts"))?,
        None => return Err(parse_err(origin, ln, "missing OFF header")),
    };
    let mut toks = counts_line.1.split_whitespace();
    let nv = parse_usize(toks.next(), origin, counts_line.0)?;
    let nf = parse_usize(toks.next(), origin, counts_line.0)?;
    let mut positions = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(origin, counts_line.0, "truncated vertex list"))?;
        let mut t = l.split_whitespace();
        positions.push([
            parse_f64(t.next(), origin, ln)?,
            parse_f64(t.next(), origin, ln)?,
            parse_f64(t.next(), origin, ln)?,
        ]);
    }
    let mut polygons = Vec::with_capacity(nf);
    for fi in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(origin, counts_line.0, "truncated face list"))?;
        let mut t = l.split_whitespace();
        let k = parse_usize(t.next(), origin, ln)?;
        let poly = (0..k)
            .map(|_| parse_usize(t.next(), origin, ln))
            .collect::<Result<Vec<_>>>()?;
        if k < 3 {
            return Err(parse_err(origin, ln, "face with fewer than 3 vertices"));
        }
        check_indices(&poly, fi, nv)?;
        polygons.push(poly);
    }
    Ok((positions, polygons))
}

#[derive(Debug)]
enum PlyProperty {
    Scalar(String),
    List(String),
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

fn parse_ply(text: &str, origin: &Path) -> Result<Parsed> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(origin, 1, "missing ply magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut last_line = 1;
    loop {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(origin, last_line, "unterminated header"))?;
        last_line = ln;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", ..] => {}
            ["format", other, ..] => {
                return Err(Error::Unsupported(format!("PLY format {other} (only ascii)")))
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(origin, ln, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] => elements
                .last_mut()
                .ok_or_else(|| parse_err(origin, ln, "property before element"))?
                .props
                .push(PlyProperty::List(name.to_string())),
            ["property", _, name] => elements
                .last_mut()
                .ok_or_else(|| parse_err(origin, ln, "property before element"))?
                .props
                .push(PlyProperty::Scalar(name.to_string())),
            _ => {}
        }
    }

    let mut positions = Vec::new();
    let mut polygons = Vec::new();
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for el in &elements {
        for _ in 0..el.count {
            let (ln, l) = body
                .next()
                .ok_or_else(|| parse_err(origin, last_line, format!("truncated {} data", el.name)))?;
            let mut toks = l.split_whitespace();
            let mut xyz = [None; 3];
            let mut list: Option<Vec<usize>> = None;
            for p in &el.props {
                match p {
                    PlyProperty::Scalar(name) => {
                        let v = parse_f64(toks.next(), origin, ln)?;
                        match name.as_str() {
                            "x" => xyz[0] = Some(v),
                            "y" => xyz[1] = Some(v),
                            "z" => xyz[2] = Some(v),
                            _ => {}
                        }
                    }
                    PlyProperty::List(name) => {
                        let k = parse_usize(toks.next(), origin, ln)?;
                        let items = (0..k)
                            .map(|_| parse_usize(toks.next(), origin, ln))
                            .collect::<Result<Vec<_>>>()?;
                        if list.is_none() && (name == "vertex_indices" || name == "vertex_index") {
                            list = Some(items);
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => match xyz {
                    [Some(x), Some(y), Some(z)] => positions.push([x, y, z]),
                    _ => return Err(parse_err(origin, ln, "vertex without x/y/z")),
                },
                "face" => {
                    let poly = list.ok_or_else(|| parse_err(origin, ln, "face without vertex_indices"))?;
                    if poly.len() < 3 {
                        return Err(parse_err(origin, ln, "face with fewer than 3 vertices"));
                    }
                    polygons.push(poly);
                }
                _ => {}
            }
        }
    }
    for (fi, poly) in polygons.iter().enumerate() {
        check_indices(poly, fi, positions.len())?;
    }
    Ok((positions, polygons))
}

/// Serializes faces and positions in `format`.
pub fn write_mesh(positions: &[[f64; 3]], faces: &[[usize; 3]], format: MeshFormat) -> String {
    let mut s = String::new();
    match format {
        MeshFormat::Obj => {
            for p in positions {
                let _ = writeln!(s, "v {} {} {}", p[0], p[1], p[2]);
            }
            for f in faces {
                let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
            }
        }
        MeshFormat::Off => {
            let _ = writeln!(s, "OFF\n{} {} 0", positions.len(), faces.len());
            for p in positions {
                let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
            }
            for f in faces {
                let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
            }
        }
        MeshFormat::Ply => write_ply(&mut s, positions, faces, None),
    }
    s
}

fn write_ply(s: &mut String, positions: &[[f64; 3]], faces: &[[usize; 3]], scalar: Option<(&str, &[f64])>) {
    let _ = writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", positions.len());
    let _ = writeln!(s, "property double x\nproperty double y\nproperty double z");
    if let Some((name, _)) = scalar {
        let _ = writeln!(s, "property double {name}");
    }
    let _ = writeln!(
        s,
        "element face {}\nproperty list uchar int vertex_indices\nend_header",
        faces.len()
    );
    for (i, p) in positions.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some((_, values)) = scalar {
            let _ = write!(s, " {}", values[i]);
        }
        s.push('\n');
    }
    for f in faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
}

pub fn save_mesh(path: &Path, mesh: &MeshTopology, format: Option<MeshFormat>) -> Result<()> {
    let format = match format {
        Some(f) => f,
        None => MeshFormat::from_path(path)?,
    };
    let text = write_mesh(mesh.require_positions()?, mesh.faces(), format);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// ASCII PLY with one extra per-vertex `double` property.
pub fn write_ply_with_scalar(
    path: &Path,
    positions: &[[f64; 3]],
    faces: &[[usize; 3]],
    name: &str,
    values: &[f64],
) -> Result<()> {
    if values.len() != positions.len() {
        return Err(Error::shape(format!(
            "{} scalar values for {} vertices",
            values.len(),
            positions.len()
        )));
    }
    let mut s = String::new();
    write_ply(&mut s, positions, faces, Some((name, values)));
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
