//! Face-adjacency graph and per-face input features for the graph encoder.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::mesh::{cross, dot, norm, sub, DiscreteMesh};

/// Default positional-encoding octave count.
pub const DEFAULT_FREQUENCIES: usize = 8;

/// Faces as nodes; an undirected edge joins faces that share exactly one mesh edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceGraph {
    pub nodes: usize,
    /// Sorted `(a, b)` pairs with `a < b`.
    pub edges: Vec<(usize, usize)>,
}

impl FaceGraph {
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }
}

pub fn build_face_graph(mesh: &DiscreteMesh) -> FaceGraph {
    let mut incident: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            incident.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }
    let mut shared: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for faces in incident.values() {
        for (i, &a) in faces.iter().enumerate() {
            for &b in &faces[i + 1..] {
                if a != b {
                    *shared.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
        }
    }
    FaceGraph {
        nodes: mesh.faces.len(),
        edges: shared
            .into_iter()
            .filter(|&(_, count)| count == 1)
            .map(|(pair, _)| pair)
            .collect(),
    }
}

/// `N x width` row-major feature matrix:
/// `[posenc(9 coords), normal(3), angles(3), area(1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFeatures {
    pub rows: usize,
    pub width: usize,
    pub data: Vec<f64>,
    /// Faces with zero area, whose normal and angles are conventional.
    pub degenerate: Vec<bool>,
}

impl FaceFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

pub fn feature_width(frequencies: usize) -> usize {
    9 * (2 * frequencies + 1) + 7
}

/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(F-1) pi x), cos(2^(F-1) pi x)]`.
pub fn posenc(x: f64, frequencies: usize, out: &mut Vec<f64>) {
    out.push(x);
    for k in 0..frequencies {
        let w = (1u64 << k) as f64 * PI * x;
        out.push(w.sin());
        out.push(w.cos());
    }
}

/// Normal, interior angles at each corner, and area of a triangle.
/// Degenerate triangles get normal 0 and angles `(0, 0, pi)`.
pub fn triangle_geometry(tri: [[f64; 3]; 3]) -> ([f64; 3], [f64; 3], f64, bool) {
    let c = cross(sub(tri[1], tri[0]), sub(tri[2], tri[0]));
    let len = norm(c);
    if len < 1e-12 {
        return ([0.0; 3], [0.0, 0.0, PI], 0.0, true);
    }
    let normal = [c[0] / len, c[1] / len, c[2] / len];
    let mut angles = [0.0; 3];
    for (k, angle) in angles.iter_mut().enumerate() {
        let p = tri[k];
        let u = sub(tri[(k + 1) % 3], p);
        let v = sub(tri[(k + 2) % 3], p);
        *angle = norm(cross(u, v)).atan2(dot(u, v));
    }
    (normal, angles, 0.5 * len, false)
}

/// Features from bin-center coordinates, vertices in stored cyclic order.
pub fn compute_face_features(mesh: &DiscreteMesh, frequencies: usize) -> FaceFeatures {
    let coords = mesh.undiscretize().vertices;
    let width = feature_width(frequencies);
    let mut data = Vec::with_capacity(mesh.faces.len() * width);
    let mut degenerate = Vec::with_capacity(mesh.faces.len());
    for f in &mesh.faces {
        let tri = f.map(|i| coords[i]);
        for p in &tri {
            for &x in p {
                posenc(x, frequencies, &mut data);
            }
        }
        let (normal, angles, area, flat) = triangle_geometry(tri);
        data.extend_from_slice(&normal);
        data.extend_from_slice(&angles);
        data.push(area);
        degenerate.push(flat);
    }
    FaceFeatures {
        rows: mesh.faces.len(),
        width,
        data,
        degenerate,
    }
}
