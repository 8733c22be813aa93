//! Triangle mesh representation, OBJ/PLY I/O, and input preprocessing
//! (bounding-box centering, vertex shuffling, neighbor extraction).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// A triangle mesh. Vertex order is part of the mesh's identity: operations
/// that must preserve it (warping, refinement) say so explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    /// Vertex coordinates in model units.
    pub vertices: Vec<[f64; 3]>,
    /// Triangles as 0-based vertex index triples.
    pub faces: Vec<[usize; 3]>,
    /// Text label, used in manifests and error messages.
    pub name: String,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>, name: impl Into<String>) -> Result<Self> {
        let mesh = Mesh { vertices, faces, name: name.into() };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Check the structural invariants: every face index in range, all three
    /// indices of a face distinct.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (k, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "mesh '{}': face {} references vertex out of range (n={})",
                    self.name, k, n
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "mesh '{}': face {} has repeated vertex indices {:?}",
                    self.name, k, f
                )));
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Axis-aligned bounding box as (min, max), or None for an empty mesh.
    pub fn bounding_box(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        let mut min = first;
        let mut max = first;
        for v in &self.vertices {
            for a in 0..3 {
                min[a] = min[a].min(v[a]);
                max[a] = max[a].max(v[a]);
            }
        }
        Some((min, max))
    }

    /// Multiset of edge lengths (each undirected edge once), sorted.
    pub fn edge_lengths(&self) -> Vec<f64> {
        let mut lens: Vec<f64> = undirected_edges(&self.faces)
            .iter()
            .map(|&[u, v]| dist(self.vertices[u], self.vertices[v]))
            .collect();
        lens.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lens
    }

    /// Multiset of face areas, sorted.
    pub fn face_areas(&self) -> Vec<f64> {
        let mut areas: Vec<f64> = self
            .faces
            .iter()
            .map(|&[i, j, k]| triangle_area(self.vertices[i], self.vertices[j], self.vertices[k]))
            .collect();
        areas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        areas
    }
}

/// Edge-adjacency of a mesh: for each vertex, the sorted set of vertices
/// sharing an edge with it. Symmetric and self-loop-free by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn vertex_count(&self) -> usize {
        self.neighbors.len()
    }

    /// Directed edge list: (u,v) and (v,u) for every undirected edge. This is
    /// the double-counting convention the edge loss is defined with.
    pub fn directed_edges(&self) -> Vec<[usize; 2]> {
        let mut edges = Vec::new();
        for (v, ns) in self.neighbors.iter().enumerate() {
            for &u in ns {
                edges.push([v, u]);
            }
        }
        edges
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let cx = u[1] * v[2] - u[2] * v[1];
    let cy = u[2] * v[0] - u[0] * v[2];
    let cz = u[0] * v[1] - u[1] * v[0];
    0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
}

fn undirected_edges(faces: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut set = BTreeSet::new();
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            set.insert([a.min(b), a.max(b)]);
        }
    }
    set.into_iter().collect()
}

/// Load a Wavefront OBJ file. Only `v` and `f` records are interpreted;
/// normals, texture coordinates, and other records are ignored. Polygons with
/// more than three vertices are fan-triangulated. Face indices are converted
/// from 1-based to 0-based.
pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mesh".to_string());
    parse_obj(&text, path, name)
}

fn parse_obj(text: &str, path: &Path, name: String) -> Result<Mesh> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut coord = [0.0f64; 3];
                for c in coord.iter_mut() {
                    let tok = parts.next().ok_or_else(|| Error::Parse {
                        path: path.into(),
                        line: line_no,
                        msg: "vertex record has fewer than 3 coordinates".into(),
                    })?;
                    *c = tok.parse().map_err(|_| Error::Parse {
                        path: path.into(),
                        line: line_no,
                        msg: format!("non-numeric coordinate '{tok}'"),
                    })?;
                }
                vertices.push(coord);
            }
            Some("f") => {
                let mut idxs: Vec<usize> = Vec::new();
                for tok in parts {
                    // `f 3/1/2` style: the vertex index is before the first '/'.
                    let vtok = tok.split('/').next().unwrap_or(tok);
                    let one_based: i64 = vtok.parse().map_err(|_| Error::Parse {
                        path: path.into(),
                        line: line_no,
                        msg: format!("non-numeric face index '{vtok}'"),
                    })?;
                    if one_based < 1 || one_based as usize > vertices.len() {
                        return Err(Error::Parse {
                            path: path.into(),
                            line: line_no,
                            msg: format!("face index out of range at line {line_no}: {one_based}"),
                        });
                    }
                    idxs.push(one_based as usize - 1);
                }
                if idxs.len() < 3 {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: line_no,
                        msg: "face record has fewer than 3 indices".into(),
                    });
                }
                // Fan triangulation for quads and larger polygons.
                for k in 1..idxs.len() - 1 {
                    faces.push([idxs[0], idxs[k], idxs[k + 1]]);
                }
            }
            _ => {} // vn, vt, o, g, usemtl, ...
        }
    }

    Mesh::new(vertices, faces, name)
}

/// Write a mesh as OBJ. Coordinates are written with 9 fractional digits, so
/// a load/save round trip preserves them to 1e-9.
pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for v in &mesh.vertices {
        writeln!(out, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2]).unwrap();
    }
    for f in &mesh.faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    fs::write(path, out).map_err(|source| Error::Io { path: path.into(), source })
}

/// Write an ASCII PLY with per-vertex RGB, used to visualize correspondences.
pub fn save_ply_colored(mesh: &Mesh, colors: &[[u8; 3]], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if colors.len() != mesh.vertex_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} colors for {} vertices",
            colors.len(),
            mesh.vertex_count()
        )));
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", mesh.vertex_count()).unwrap();
    out.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n",
    );
    writeln!(out, "element face {}", mesh.face_count()).unwrap();
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for (v, c) in mesh.vertices.iter().zip(colors) {
        writeln!(out, "{:.9} {:.9} {:.9} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]).unwrap();
    }
    for f in &mesh.faces {
        writeln!(out, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    fs::write(path, out).map_err(|source| Error::Io { path: path.into(), source })
}

/// Translate the mesh so its bounding-box center sits at the origin.
pub fn center_mesh(mesh: &Mesh) -> Mesh {
    let Some((min, max)) = mesh.bounding_box() else {
        return mesh.clone();
    };
    let c = [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0, (min[2] + max[2]) / 2.0];
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| [v[0] - c[0], v[1] - c[1], v[2] - c[2]])
        .collect();
    Mesh { vertices, faces: mesh.faces.clone(), name: mesh.name.clone() }
}

/// Permute the vertex order with a seeded shuffle, rewriting face indices so
/// the geometry is unchanged. Returns the permutation mapping old index to
/// new index.
pub fn shuffle_vertices(mesh: &Mesh, seed: u64) -> (Mesh, Vec<usize>) {
    let n = mesh.vertex_count();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    (apply_permutation(mesh, &perm), perm)
}

/// Reorder vertices by an old-index -> new-index permutation.
pub fn apply_permutation(mesh: &Mesh, perm: &[usize]) -> Mesh {
    let n = mesh.vertex_count();
    assert_eq!(perm.len(), n, "permutation length must match vertex count");
    let mut vertices = vec![[0.0f64; 3]; n];
    for (old, &new) in perm.iter().enumerate() {
        vertices[new] = mesh.vertices[old];
    }
    let faces = mesh.faces.iter().map(|f| [perm[f[0]], perm[f[1]], perm[f[2]]]).collect();
    Mesh { vertices, faces, name: mesh.name.clone() }
}

/// Invert an old->new permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (old, &new) in perm.iter().enumerate() {
        inv[new] = old;
    }
    inv
}

/// Edge neighbors of every vertex: u is in N(v) iff some face contains the
/// edge (u, v). Sets come out deduplicated and sorted; isolated vertices get
/// empty sets.
pub fn vertex_neighbors(mesh: &Mesh) -> Adjacency {
    let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); mesh.vertex_count()];
    for f in &mesh.faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            sets[a].insert(b);
            sets[b].insert(a);
        }
    }
    Adjacency { neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect() }
}
