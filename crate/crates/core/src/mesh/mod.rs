//! Triangle meshes, their 128-bin discretization and canonical ordering.

mod canonical;
mod obj;

use std::collections::HashMap;

pub use canonical::canonicalize;
pub use obj::{load_obj, parse_obj, save_obj, write_obj};

use crate::error::{Error, Result};

/// Number of discrete positions per axis.
pub const BINS: usize = 128;

/// Indexed triangle mesh in model units.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

/// Mesh whose vertices are bin indices in `0..BINS` per axis.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct DiscreteMesh {
    pub vertices: Vec<[u8; 3]>,
    pub faces: Vec<[usize; 3]>,
}

fn is_degenerate(f: &[usize; 3]) -> bool {
    f[0] == f[1] || f[1] == f[2] || f[0] == f[2]
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Mesh { vertices, faces };
        mesh.check_indices()?;
        Ok(mesh)
    }

    fn check_indices(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some((i, f)) = self
            .faces
            .iter()
            .enumerate()
            .find(|(_, f)| f.iter().any(|&v| v >= n))
        {
            return Err(Error::Mesh(format!(
                "face {i} {f:?} references a vertex beyond {n}"
            )));
        }
        Ok(())
    }

    /// Index range, finiteness and no repeated index within a face.
    pub fn validate(&self) -> Result<()> {
        self.check_indices()?;
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Mesh("non-finite vertex coordinate".into()));
        }
        if let Some(i) = self.faces.iter().position(is_degenerate) {
            return Err(Error::Mesh(format!("face {i} is degenerate")));
        }
        Ok(())
    }

    pub fn bounding_box(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    pub fn extents(&self) -> [f64; 3] {
        self.bounding_box()
            .map_or([0.0; 3], |(lo, hi)| [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]])
    }

    /// Center the bounding box at the origin and scale its longest side to 1.
    pub fn normalize(&self) -> Result<Mesh> {
        let (lo, hi) = self
            .bounding_box()
            .ok_or_else(|| Error::Mesh("cannot normalize a mesh without vertices".into()))?;
        let longest = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        if !(longest > 0.0) || !longest.is_finite() {
            return Err(Error::Mesh("cannot normalize a zero-extent mesh".into()));
        }
        let center = [
            (lo[0] + hi[0]) / 2.0,
            (lo[1] + hi[1]) / 2.0,
            (lo[2] + hi[2]) / 2.0,
        ];
        let vertices = self
            .vertices
            .iter()
            .map(|v| {
                let mut out = [0.0; 3];
                for a in 0..3 {
                    out[a] = ((v[a] - center[a]) / longest).clamp(-0.5, 0.5);
                }
                out
            })
            .collect();
        Ok(Mesh {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// Quantize to `BINS` classes per axis, merging vertices that share a bin
    /// and dropping faces that collapse.
    pub fn discretize(&self) -> Result<DiscreteMesh> {
        const TOL: f64 = 1e-6;
        self.check_indices()?;
        let mut remap = Vec::with_capacity(self.vertices.len());
        let mut index: HashMap<[u8; 3], usize> = HashMap::new();
        let mut vertices = Vec::new();
        for v in &self.vertices {
            if v.iter().any(|&c| !(-0.5 - TOL..=0.5 + TOL).contains(&c)) {
                return Err(Error::Mesh(format!(
                    "vertex {v:?} lies outside the normalized cube; normalize first"
                )));
            }
            let bins = [bin_of(v[0]), bin_of(v[1]), bin_of(v[2])];
            let id = *index.entry(bins).or_insert_with(|| {
                vertices.push(bins);
                vertices.len() - 1
            });
            remap.push(id);
        }
        let faces = self
            .faces
            .iter()
            .map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]])
            .filter(|f| !is_degenerate(f))
            .collect();
        Ok(DiscreteMesh { vertices, faces })
    }

    /// Weld vertices that snap to the same cell of an `epsilon` grid, keeping
    /// the first vertex of each cell, and drop faces that collapse.
    ///
    /// `epsilon == 0` merges exact duplicates only.
    pub fn merge_vertices(&self, epsilon: f64) -> Mesh {
        let key = |v: &[f64; 3]| -> [i64; 3] {
            let mut k = [0i64; 3];
            for a in 0..3 {
                k[a] = if epsilon > 0.0 {
                    (v[a] / epsilon).round() as i64
                } else {
                    // +0.0 and -0.0 are the same point.
                    (v[a] + 0.0).to_bits() as i64
                };
            }
            k
        };
        let mut index: HashMap<[i64; 3], usize> = HashMap::new();
        let mut vertices = Vec::new();
        let remap: Vec<usize> = self
            .vertices
            .iter()
            .map(|v| {
                *index.entry(key(v)).or_insert_with(|| {
                    vertices.push(*v);
                    vertices.len() - 1
                })
            })
            .collect();
        let faces = self
            .faces
            .iter()
            .map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]])
            .filter(|f| !is_degenerate(f))
            .collect();
        Mesh { vertices, faces }
    }

    /// Same mesh with every face owning three fresh vertices.
    pub fn to_soup(&self) -> Mesh {
        let mut vertices = Vec::with_capacity(self.faces.len() * 3);
        let mut faces = Vec::with_capacity(self.faces.len());
        for f in &self.faces {
            let base = vertices.len();
            vertices.extend(f.iter().map(|&i| self.vertices[i]));
            faces.push([base, base + 1, base + 2]);
        }
        Mesh { vertices, faces }
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        let u = sub(b, a);
        let v = sub(c, a);
        0.5 * norm(cross(u, v))
    }
}

/// Bin index of a normalized coordinate.
pub fn bin_of(x: f64) -> u8 {
    ((x + 0.5) * BINS as f64).floor().clamp(0.0, (BINS - 1) as f64) as u8
}

/// Coordinate of a bin center.
pub fn bin_center(bin: u8) -> f64 {
    (bin as f64 + 0.5) / BINS as f64 - 0.5
}

impl DiscreteMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(v) = self
            .vertices
            .iter()
            .find(|v| v.iter().any(|&b| b as usize >= BINS))
        {
            return Err(Error::Mesh(format!("vertex bins {v:?} out of range")));
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::Mesh(format!("face {i} {f:?} out of range")));
            }
            if is_degenerate(f) {
                return Err(Error::Mesh(format!("face {i} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// The nine bin coordinates of face `f`, vertex by vertex in stored order.
    pub fn face_bins(&self, f: usize) -> [u8; 9] {
        let mut out = [0u8; 9];
        for (slot, &v) in self.faces[f].iter().enumerate() {
            out[slot * 3..slot * 3 + 3].copy_from_slice(&self.vertices[v]);
        }
        out
    }

    /// Build a triangle soup from per-face bin coordinates, welding equal bins.
    pub fn from_face_bins(faces: &[[u8; 9]]) -> DiscreteMesh {
        let mut index: HashMap<[u8; 3], usize> = HashMap::new();
        let mut vertices = Vec::new();
        let mut out = Vec::with_capacity(faces.len());
        for bins in faces {
            let mut f = [0usize; 3];
            for (slot, id) in f.iter_mut().enumerate() {
                let v = [bins[slot * 3], bins[slot * 3 + 1], bins[slot * 3 + 2]];
                *id = *index.entry(v).or_insert_with(|| {
                    vertices.push(v);
                    vertices.len() - 1
                });
            }
            out.push(f);
        }
        DiscreteMesh {
            vertices,
            faces: out,
        }
    }

    pub fn undiscretize(&self) -> Mesh {
        Mesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| [bin_center(v[0]), bin_center(v[1]), bin_center(v[2])])
                .collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn canonicalize(&self) -> DiscreteMesh {
        canonicalize(self)
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube() -> Mesh {
        let mut vertices = Vec::new();
        for z in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for x in [0.0, 1.0] {
                    vertices.push([x, y, z]);
                }
            }
        }
        Mesh {
            vertices,
            faces: vec![[0, 1, 3], [0, 3, 2]],
        }
    }

    #[test]
    fn normalize_unit_cube() {
        let m = unit_cube().normalize().unwrap();
        let (lo, hi) = m.bounding_box().unwrap();
        assert_eq!(lo, [-0.5; 3]);
        assert_eq!(hi, [0.5; 3]);
    }

    #[test]
    fn normalize_scales_longest_side() {
        let m = Mesh::new(vec![[0.0, 0.0, 0.0], [2.0, 1.0, 1.0]], vec![]).unwrap();
        let n = m.normalize().unwrap();
        let e = n.extents();
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!((e[1] - 0.5).abs() < 1e-12);
        assert!((e[2] - 0.5).abs() < 1e-12);
        let again = n.normalize().unwrap();
        for (a, b) in n.vertices.iter().zip(&again.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalize_rejects_zero_extent() {
        let m = Mesh::new(vec![[1.0, 1.0, 1.0]; 3], vec![]).unwrap();
        assert!(m.normalize().is_err());
        assert!(Mesh::default().normalize().is_err());
    }

    #[test]
    fn bin_endpoints_and_center() {
        assert_eq!(bin_of(-0.5), 0);
        assert_eq!(bin_of(0.5), 127);
        assert_eq!(bin_of(0.0), 64);
        assert_eq!(bin_center(0), -0.49609375);
        assert_eq!(bin_center(64), 0.00390625);
        for b in 0..128u8 {
            assert_eq!(bin_of(bin_center(b)), b);
        }
    }

    #[test]
    fn discretize_merges_close_vertices() {
        let m = Mesh::new(
            vec![
                [0.1, 0.1, 0.1],
                [0.1001, 0.1001, 0.1001],
                [0.3, 0.1, 0.1],
                [0.1, 0.3, 0.1],
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let d = m.discretize().unwrap();
        assert_eq!(d.vertices.len(), 3);
        assert_eq!(d.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn discretize_rejects_unnormalized() {
        let m = Mesh::new(vec![[0.0, 0.0, 0.7]], vec![]).unwrap();
        assert!(m.discretize().is_err());
    }

    #[test]
    fn merge_triangle_soup() {
        let soup = Mesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0 + 1e-5, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0 + 1e-5, 0.0],
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let merged = soup.merge_vertices(1e-3);
        assert_eq!(merged.vertices.len(), 4);
        assert_eq!(merged.faces.len(), 2);

        let exact = soup.merge_vertices(0.0);
        assert_eq!(exact.vertices.len(), 6);
    }

    #[test]
    fn merge_leaves_single_triangle_untouched() {
        let tri = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert_eq!(tri.merge_vertices(1e-3), tri);
    }

    #[test]
    fn validate_flags_degenerate_faces() {
        let m = Mesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0]],
            faces: vec![[0, 1, 1]],
        };
        assert!(m.validate().is_err());
        assert!(Mesh::new(vec![[0.0; 3]], vec![[0, 1, 2]]).is_err());
    }
}
