use std::collections::BTreeSet;

use meshgpt::mesh::{bin_center, bin_of, DiscreteMesh, Mesh, BINS};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn discrete_mesh() -> impl Strategy<Value = DiscreteMesh> {
    prop::collection::btree_set(prop::array::uniform3(0u8..BINS as u8), 3..24).prop_flat_map(|verts| {
        let vertices: Vec<[u8; 3]> = verts.into_iter().collect();
        let n = vertices.len();
        let face = prop::array::uniform3(0..n).prop_filter("distinct corners", |f| {
            f[0] != f[1] && f[1] != f[2] && f[0] != f[2]
        });
        prop::collection::vec(face, 1..30).prop_map(move |faces| DiscreteMesh {
            vertices: vertices.clone(),
            faces,
        })
    })
}

fn permute_vertices(m: &DiscreteMesh, seed: u64) -> DiscreteMesh {
    let mut order: Vec<usize> = (0..m.vertices.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut new_index = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    DiscreteMesh {
        vertices: order.iter().map(|&o| m.vertices[o]).collect(),
        faces: m.faces.iter().map(|f| f.map(|v| new_index[v])).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn canonicalize_is_idempotent(m in discrete_mesh()) {
        let c = m.canonicalize();
        prop_assert_eq!(c.canonicalize(), c);
    }

    #[test]
    fn canonicalize_ignores_vertex_order(m in discrete_mesh(), seed in any::<u64>()) {
        prop_assert_eq!(permute_vertices(&m, seed).canonicalize(), m.canonicalize());
    }

    #[test]
    fn canonicalize_ignores_face_order(m in discrete_mesh(), seed in any::<u64>()) {
        let mut shuffled = m.clone();
        shuffled.faces.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(shuffled.canonicalize(), m.canonicalize());
    }

    #[test]
    fn canonicalize_ignores_cyclic_rotation(m in discrete_mesh(), turns in prop::collection::vec(0usize..3, 30)) {
        let mut rotated = m.clone();
        for (f, &t) in rotated.faces.iter_mut().zip(&turns) {
            f.rotate_left(t);
        }
        prop_assert_eq!(rotated.canonicalize(), m.canonicalize());
    }

    #[test]
    fn canonical_faces_start_at_their_lowest_index(m in discrete_mesh()) {
        let c = m.canonicalize();
        for f in &c.faces {
            prop_assert!(f[0] < f[1] && f[0] < f[2]);
        }
        let keys: Vec<(u8, u8, u8)> = c.vertices.iter().map(|v| (v[2], v[1], v[0])).collect();
        prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bin_centers_are_within_half_a_bin(x in -0.5f64..=0.5) {
        prop_assert!((bin_center(bin_of(x)) - x).abs() <= 1.0 / 256.0 + 1e-12);
    }

    #[test]
    fn discretize_round_trip(points in prop::collection::vec(prop::array::uniform3(-0.5f64..=0.5), 3..40)) {
        let n = points.len();
        let mesh = Mesh {
            vertices: points.clone(),
            faces: (0..n - 2).map(|i| [i, i + 1, i + 2]).collect(),
        };
        let d = mesh.discretize().unwrap();
        let back = d.undiscretize();
        for p in &points {
            let bins = p.map(bin_of);
            prop_assert!(d.vertices.contains(&bins));
            let c = bins.map(bin_center);
            for a in 0..3 {
                prop_assert!((c[a] - p[a]).abs() <= 1.0 / 256.0 + 1e-12);
            }
        }
        // bins survive a second pass unchanged
        let again = back.discretize().unwrap();
        prop_assert_eq!(again.vertices, d.vertices);
        let faces_a: BTreeSet<_> = again.faces.iter().collect();
        let faces_b: BTreeSet<_> = d.faces.iter().collect();
        prop_assert_eq!(faces_a, faces_b);
    }
}
