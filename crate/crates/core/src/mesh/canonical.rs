use std::collections::HashMap;

use super::DiscreteMesh;

/// Canonical sequencing of a discretized mesh.
///
/// Vertices are merged by bin, sorted by `(z, y, x)` and re-indexed. Each face
/// is rotated (never reflected) so its smallest index comes first, and faces
/// are sorted by their sorted index triple, ties broken by the rotated triple.
pub fn canonicalize(mesh: &DiscreteMesh) -> DiscreteMesh {
    let mut unique: Vec<[u8; 3]> = mesh.vertices.clone();
    unique.sort_by_key(|v| (v[2], v[1], v[0]));
    unique.dedup();
    let position: HashMap<[u8; 3], usize> =
        unique.iter().enumerate().map(|(i, v)| (*v, i)).collect();

    let mut faces: Vec<[usize; 3]> = mesh
        .faces
        .iter()
        .map(|f| f.map(|i| position[&mesh.vertices[i]]))
        .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
        .map(rotate_lowest_first)
        .collect();
    faces.sort_by_key(|f| {
        let mut key = *f;
        key.sort_unstable();
        (key, *f)
    });

    DiscreteMesh {
        vertices: unique,
        faces,
    }
}

fn rotate_lowest_first(f: [usize; 3]) -> [usize; 3] {
    let lowest = (0..3).min_by_key(|&k| f[k]).unwrap_or(0);
    [f[lowest], f[(lowest + 1) % 3], f[(lowest + 2) % 3]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_sorted_vertices_and_rotates_faces() {
        // Vertices given as (x, y, z); keys (z,y,x) are already ascending.
        let m = DiscreteMesh {
            vertices: vec![[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
            faces: vec![[3, 1, 2]],
        };
        let c = canonicalize(&m);
        assert_eq!(c.vertices, m.vertices);
        assert_eq!(c.faces, vec![[1, 2, 3]]);
    }

    #[test]
    fn orders_faces_by_lowest_index() {
        let m = DiscreteMesh {
            vertices: vec![[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
            faces: vec![[1, 2, 3], [0, 1, 2]],
        };
        assert_eq!(canonicalize(&m).faces, vec![[0, 1, 2], [1, 2, 3]]);
    }

    #[test]
    fn sorts_by_z_then_y_then_x() {
        let m = DiscreteMesh {
            vertices: vec![[5, 0, 1], [0, 9, 0], [9, 0, 0]],
            faces: vec![[0, 1, 2]],
        };
        let c = canonicalize(&m);
        assert_eq!(c.vertices, vec![[9, 0, 0], [0, 9, 0], [5, 0, 1]]);
        // original face (A,B,C) -> (2,1,0) -> rotated to (0,2,1)
        assert_eq!(c.faces, vec![[0, 2, 1]]);
    }
}
