//! Boundary meshes as connectivity-free face soups.
//!
//! Only three quantities per face ever reach the model: centroid, unit normal
//! and area. Faces may overlap, intersect or leave gaps; nothing here checks
//! topology, and nothing downstream reads adjacency.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;

/// Unit-length tolerance accepted when reading normals from text.
const NORMAL_READ_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub centroid: Vec<f64>,
    pub normal: Vec<f64>,
    pub area: f64,
}

impl Face {
    /// Builds a face, normalizing `normal`. Fails on a zero normal or a
    /// negative / non-finite area.
    pub fn new(centroid: Vec<f64>, normal: Vec<f64>, area: f64) -> Result<Self> {
        if centroid.len() != normal.len() {
            return Err(Error::Shape(format!(
                "centroid has {} components, normal has {}",
                centroid.len(),
                normal.len()
            )));
        }
        if !(area.is_finite() && area >= 0.0) {
            return Err(Error::Domain(format!("face area must be finite and >= 0, got {area}")));
        }
        let n = norm(&normal);
        if !(n.is_finite() && n > 0.0) || centroid.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("face normal must be finite and nonzero".into()));
        }
        Ok(Face {
            centroid,
            normal: normal.iter().map(|c| c / n).collect(),
            area,
        })
    }

    pub fn dim(&self) -> usize {
        self.centroid.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMesh {
    pub dim: usize,
    pub bc: String,
    pub faces: Vec<Face>,
}

impl BoundaryMesh {
    pub fn new(dim: usize, bc: impl Into<String>, faces: Vec<Face>) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::Domain(format!("spatial dimension must be 2 or 3, got {dim}")));
        }
        if let Some(f) = faces.iter().find(|f| f.dim() != dim) {
            return Err(Error::Shape(format!(
                "face of dimension {} in a {dim}-D mesh",
                f.dim()
            )));
        }
        Ok(BoundaryMesh {
            dim,
            bc: bc.into(),
            faces,
        })
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        crate::sum::neumaier(self.faces.iter().map(|f| f.area))
    }

    /// Face centroids as an `[n, d]` array.
    pub fn centroids(&self) -> Array2<f64> {
        self.stack(|f| &f.centroid)
    }

    /// Unit normals as an `[n, d]` array.
    pub fn normals(&self) -> Array2<f64> {
        self.stack(|f| &f.normal)
    }

    pub fn areas(&self) -> Array1<f64> {
        self.faces.iter().map(|f| f.area).collect()
    }

    fn stack(&self, get: impl Fn(&Face) -> &Vec<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.faces.len(), self.dim));
        for (mut row, f) in out.rows_mut().into_iter().zip(&self.faces) {
            for (o, v) in row.iter_mut().zip(get(f)) {
                *o = *v;
            }
        }
        out
    }

    /// Applies `x -> m x + t` to centroids and `n -> m n` to normals.
    /// `m` must be orthogonal for normals to stay unit length.
    pub fn transformed(&self, m: &Array2<f64>, t: &[f64]) -> BoundaryMesh {
        let faces = self
            .faces
            .iter()
            .map(|f| Face {
                centroid: affine(m, &f.centroid, Some(t)),
                normal: affine(m, &f.normal, None),
                area: f.area,
            })
            .collect();
        BoundaryMesh {
            dim: self.dim,
            bc: self.bc.clone(),
            faces,
        }
    }

    /// Multiplies every length by `factor`: centroids scale linearly, areas
    /// by `factor^(d-1)`.
    pub fn scaled(&self, factor: f64) -> BoundaryMesh {
        let area_factor = factor.powi(self.dim as i32 - 1);
        let faces = self
            .faces
            .iter()
            .map(|f| Face {
                centroid: f.centroid.iter().map(|c| c * factor).collect(),
                normal: f.normal.clone(),
                area: f.area * area_factor,
            })
            .collect();
        BoundaryMesh {
            dim: self.dim,
            bc: self.bc.clone(),
            faces,
        }
    }
}

fn affine(m: &Array2<f64>, v: &[f64], t: Option<&[f64]>) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let mut acc = 0.0;
            for (j, vj) in v.iter().enumerate() {
                acc += m[[i, j]] * vj;
            }
            acc + t.map_or(0.0, |t| t[i])
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Triangles in 3-D, each given by its three vertices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleSoup {
    pub triangles: Vec<[[f64; 3]; 3]>,
}

/// Line segments in 2-D; the 2-D analogue of a triangle soup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentSoup {
    pub segments: Vec<[[f64; 2]; 2]>,
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn bbox_diagonal<const D: usize>(points: impl Iterator<Item = [f64; D]>) -> f64 {
    let mut lo = [f64::INFINITY; D];
    let mut hi = [f64::NEG_INFINITY; D];
    for p in points {
        for k in 0..D {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (0..D).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}

/// One face per triangle: centroid is the vertex mean, the normal follows the
/// right-hand rule on the vertex winding, and the area comes from the cross
/// product.
pub fn faces_from_triangles(soup: &TriangleSoup, bc: &str) -> Result<BoundaryMesh> {
    let diag = bbox_diagonal(soup.triangles.iter().flat_map(|t| t.iter().copied()));
    let min_area = 1e-14 * diag * diag;
    let mut faces = Vec::with_capacity(soup.triangles.len());
    for (index, &[a, b, c]) in soup.triangles.iter().enumerate() {
        let n = cross3(sub3(b, a), sub3(c, a));
        let twice_area = norm(&n);
        let area = 0.5 * twice_area;
        if !(area > min_area) {
            return Err(Error::DegenerateTriangle { index });
        }
        faces.push(Face {
            centroid: (0..3).map(|k| (a[k] + b[k] + c[k]) / 3.0).collect(),
            normal: n.iter().map(|x| x / twice_area).collect(),
            area,
        });
    }
    BoundaryMesh::new(3, bc, faces)
}

/// One face per segment: midpoint centroid, length as area, and the normal
/// pointing to the right of the direction of travel (outward for a
/// counter-clockwise loop).
pub fn faces_from_segments(soup: &SegmentSoup, bc: &str) -> Result<BoundaryMesh> {
    let diag = bbox_diagonal(soup.segments.iter().flat_map(|s| s.iter().copied()));
    let mut faces = Vec::with_capacity(soup.segments.len());
    for (index, &[a, b]) in soup.segments.iter().enumerate() {
        let t = [b[0] - a[0], b[1] - a[1]];
        let len = norm(&t);
        if !(len > 1e-14 * diag) {
            return Err(Error::DegenerateSegment { index });
        }
        faces.push(Face {
            centroid: vec![0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])],
            normal: vec![t[1] / len, -t[0] / len],
            area: len,
        });
    }
    BoundaryMesh::new(2, bc, faces)
}

/// Removes `floor(drop_fraction * n)` faces chosen uniformly at random and
/// multiplies the surviving areas by `1 / (1 - drop_fraction)`. Survivors
/// keep their relative order, centroids and normals.
pub fn decimate_expand(mesh: &BoundaryMesh, drop_fraction: f64, rng_seed: u64) -> Result<BoundaryMesh> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Domain(format!(
            "drop_fraction must lie in [0, 1), got {drop_fraction}"
        )));
    }
    let n = mesh.len();
    let n_drop = (drop_fraction * n as f64).floor() as usize;
    let mut rng = rng::stream(rng_seed, "decimate");
    let mut dropped = vec![false; n];
    for i in index::sample(&mut rng, n, n_drop) {
        dropped[i] = true;
    }
    let expand = 1.0 / (1.0 - drop_fraction);
    let faces = mesh
        .faces
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(f, _)| Face {
            area: f.area * expand,
            ..f.clone()
        })
        .collect();
    Ok(BoundaryMesh {
        dim: mesh.dim,
        bc: mesh.bc.clone(),
        faces,
    })
}

/// Concatenates faces of meshes sharing a boundary-condition label, in input
/// order.
pub fn merge_by_bc(meshes: &[BoundaryMesh]) -> Result<BTreeMap<String, BoundaryMesh>> {
    let mut out: BTreeMap<String, BoundaryMesh> = BTreeMap::new();
    for m in meshes {
        match out.get_mut(&m.bc) {
            Some(acc) => {
                if acc.dim != m.dim {
                    return Err(Error::Shape(format!(
                        "meshes labelled {:?} mix dimensions {} and {}",
                        m.bc, acc.dim, m.dim
                    )));
                }
                acc.faces.extend(m.faces.iter().cloned());
            }
            None => {
                out.insert(m.bc.clone(), m.clone());
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// text format

/// Writes the `f` records of a mesh (no header).
pub(crate) fn write_face_records(mesh: &BoundaryMesh, out: &mut String) {
    for f in &mesh.faces {
        out.push('f');
        for v in f.centroid.iter().chain(&f.normal) {
            let _ = write!(out, " {v:?}");
        }
        let _ = writeln!(out, " {:?}", f.area);
    }
}

/// Serializes a mesh in the `globe-mesh v1` text format.
pub fn write_mesh_string(mesh: &BoundaryMesh) -> String {
    let mut out = format!("globe-mesh v1 d={} bc={}\n", mesh.dim, mesh.bc);
    write_face_records(mesh, &mut out);
    out
}

pub fn write_mesh(mesh: &BoundaryMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_mesh_string(mesh)).map_err(|e| Error::io(path, e))
}

pub fn read_mesh(path: impl AsRef<Path>) -> Result<BoundaryMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh(&text)
}

/// Strips a `#` comment and surrounding whitespace.
pub(crate) fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

pub(crate) fn parse_floats(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("not a number: {s:?}"),
            })
        })
        .collect()
}

/// Parses `key=value` tokens from a header line.
pub(crate) fn header_value<'a>(tokens: &[&'a str], key: &str) -> Option<&'a str> {
    tokens
        .iter()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

pub fn parse_mesh(text: &str) -> Result<BoundaryMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, strip_comment(l)))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty mesh file".into(),
    })?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() < 2 || tokens[0] != "globe-mesh" || tokens[1] != "v1" {
        return Err(Error::Parse {
            line: hline,
            msg: format!("expected `globe-mesh v1` header, got {header:?}"),
        });
    }
    let dim = parse_dim(&tokens, hline)?;
    let bc = header_value(&tokens, "bc").ok_or(Error::Parse {
        line: hline,
        msg: "header is missing bc=<label>".into(),
    })?;
    let mut parser = FaceRecords::new(dim);
    for (ln, l) in lines {
        parser.push_line(l, ln)?;
    }
    parser.finish(bc)
}

pub(crate) fn parse_dim(tokens: &[&str], line: usize) -> Result<usize> {
    match header_value(tokens, "d") {
        Some("2") => Ok(2),
        Some("3") => Ok(3),
        other => Err(Error::Parse {
            line,
            msg: format!("expected d=2 or d=3, got {other:?}"),
        }),
    }
}

/// Accumulates `f`, `tri` and `seg` records for one mesh.
pub(crate) struct FaceRecords {
    dim: usize,
    faces: Vec<Face>,
    tris: TriangleSoup,
    segs: SegmentSoup,
}

impl FaceRecords {
    pub(crate) fn new(dim: usize) -> Self {
        FaceRecords {
            dim,
            faces: Vec::new(),
            tris: TriangleSoup::default(),
            segs: SegmentSoup::default(),
        }
    }

    pub(crate) fn push_line(&mut self, l: &str, ln: usize) -> Result<()> {
        let fields: Vec<&str> = l.split_whitespace().collect();
        let d = self.dim;
        let bad = |msg: String| Error::Parse { line: ln, msg };
        match fields[0] {
            "f" => {
                let v = parse_floats(&fields[1..], ln)?;
                if v.len() != 2 * d + 1 {
                    return Err(bad(format!("face record needs {} values, got {}", 2 * d + 1, v.len())));
                }
                let n = norm(&v[d..2 * d]);
                if (n - 1.0).abs() > NORMAL_READ_TOL {
                    return Err(bad(format!("normal has length {n}, expected 1")));
                }
                let face = Face::new(v[..d].to_vec(), v[d..2 * d].to_vec(), v[2 * d])
                    .map_err(|e| bad(e.to_string()))?;
                self.faces.push(face);
            }
            "tri" if d == 3 => {
                let v = parse_floats(&fields[1..], ln)?;
                if v.len() != 9 {
                    return Err(bad(format!("tri record needs 9 values, got {}", v.len())));
                }
                self.tris
                    .triangles
                    .push([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]);
            }
            "seg" if d == 2 => {
                let v = parse_floats(&fields[1..], ln)?;
                if v.len() != 4 {
                    return Err(bad(format!("seg record needs 4 values, got {}", v.len())));
                }
                self.segs.segments.push([[v[0], v[1]], [v[2], v[3]]]);
            }
            other => return Err(bad(format!("unknown record {other:?} for d={d}"))),
        }
        Ok(())
    }

    pub(crate) fn finish(mut self, bc: &str) -> Result<BoundaryMesh> {
        if !self.tris.triangles.is_empty() {
            self.faces.extend(faces_from_triangles(&self.tris, bc)?.faces);
        }
        if !self.segs.segments.is_empty() {
            self.faces.extend(faces_from_segments(&self.segs, bc)?.faces);
        }
        BoundaryMesh::new(self.dim, bc, self.faces)
    }
}
