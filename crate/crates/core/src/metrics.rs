//! Surface sampling and shape-set metrics over point clouds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite point".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `m` points, faces picked proportionally to area, uniform inside each face.
pub fn sample_surface_points(mesh: &Mesh, m: usize, seed: u64) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Mesh("no face with positive area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(m);
    for _ in 0..m {
        let u = rng.random::<f64>() * total;
        let f = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let w = [1.0 - s, s * (1.0 - r2), s * r2];
        let corners = mesh.faces[f].map(|v| mesh.vertices[v]);
        let mut p = [0.0; 3];
        for (wi, c) in w.iter().zip(&corners) {
            for k in 0..3 {
                p[k] += wi * c[k];
            }
        }
        points.push(p);
    }
    PointCloud::new(points)
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn one_way(x: &PointCloud, y: &PointCloud) -> f64 {
    let sum: f64 = x
        .points
        .iter()
        .map(|p| y.points.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    sum / x.len() as f64
}

/// Symmetric squared-distance Chamfer distance with mean aggregation.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> f64 {
    one_way(x, y) + one_way(y, x)
}

/// `out[i][j] = chamfer(a[i], b[j])`.
pub fn distance_matrix(a: &[PointCloud], b: &[PointCloud]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| b.iter().map(|y| chamfer(x, y)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetMetrics {
    pub mmd: f64,
    /// Percent of reference clouds covered.
    pub cov: f64,
    /// Leave-one-out 1-NN accuracy in percent.
    pub nna: f64,
}

/// Lowest-index minimum of an iterator of (index, value).
fn nearest(values: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.expect("non-empty candidates").0
}

pub fn shape_set_metrics(generated: &[PointCloud], reference: &[PointCloud]) -> Result<SetMetrics> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Empty("point cloud set"));
    }
    let gr = distance_matrix(generated, reference);
    let gg = distance_matrix(generated, generated);
    let rr = distance_matrix(reference, reference);
    Ok(metrics_from_distances(&gr, &gg, &rr))
}

/// Metrics from precomputed Chamfer matrices (generated×reference,
/// generated×generated, reference×reference).
pub fn metrics_from_distances(gr: &[Vec<f64>], gg: &[Vec<f64>], rr: &[Vec<f64>]) -> SetMetrics {
    let (g, r) = (gg.len(), rr.len());
    let mmd = (0..r)
        .map(|j| (0..g).map(|i| gr[i][j]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / r as f64;

    let mut covered = vec![false; r];
    for row in gr {
        covered[nearest(row.iter().copied().enumerate())] = true;
    }
    let cov = 100.0 * covered.iter().filter(|&&c| c).count() as f64 / r as f64;

    // union order: generated (set 0) then reference (set 1)
    let dist = |a: usize, b: usize| -> f64 {
        match (a < g, b < g) {
            (true, true) => gg[a][b],
            (true, false) => gr[a][b - g],
            (false, true) => gr[b][a - g],
            (false, false) => rr[a - g][b - g],
        }
    };
    let n = g + r;
    let correct = (0..n)
        .filter(|&a| {
            let nn = nearest((0..n).filter(|&b| b != a).map(|b| (b, dist(a, b))));
            (nn < g) == (a < g)
        })
        .count();
    let nna = 100.0 * correct as f64 / n as f64;
    SetMetrics { mmd, cov, nna }
}

/// Mean vertex and face counts.
pub fn compactness(meshes: &[Mesh]) -> Result<(f64, f64)> {
    if meshes.is_empty() {
        return Err(Error::Empty("mesh set"));
    }
    let n = meshes.len() as f64;
    let v = meshes.iter().map(|m| m.vertices.len()).sum::<usize>() as f64 / n;
    let f = meshes.iter().map(|m| m.faces.len()).sum::<usize>() as f64 / n;
    Ok((v, f))
}

/// `metric<TAB>value` lines.
pub fn report(set: &SetMetrics, compact: Option<(f64, f64)>) -> String {
    let mut out = format!("mmd\t{:?}\ncov\t{:?}\n1-nna\t{:?}\n", set.mmd, set.cov, set.nna);
    if let Some((v, f)) = compact {
        out += &format!("avg_vertices\t{v:.1}\navg_faces\t{f:.1}\n");
    }
    out
}
