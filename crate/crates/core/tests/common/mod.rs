//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use meshgpt::metrics::PointCloud;
use rand::Rng;

/// Greedy residual coding by exhaustive search, lowest index on ties.
pub fn rq_codes(codebook: &[Vec<f64>], vector: &[f64], depth: usize) -> Vec<usize> {
    let mut residual = vector.to_vec();
    let mut codes = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, e) in codebook.iter().enumerate() {
            let mut d = 0.0;
            for i in 0..residual.len() {
                d += (residual[i] - e[i]) * (residual[i] - e[i]);
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        for i in 0..residual.len() {
            residual[i] -= codebook[best][i];
        }
        codes.push(best);
    }
    codes
}

/// `sum_d ||z - sum_{l <= d} e_l||^2`.
pub fn commitment(codebook: &[Vec<f64>], vector: &[f64], codes: &[usize]) -> f64 {
    let mut partial = vec![0.0; vector.len()];
    let mut total = 0.0;
    for &c in codes {
        for i in 0..partial.len() {
            partial[i] += codebook[c][i];
        }
        total += vector.iter().zip(&partial).map(|(z, p)| (z - p) * (z - p)).sum::<f64>();
    }
    total
}

pub fn random_cloud(rng: &mut impl Rng, max_points: usize) -> PointCloud {
    let n = rng.random_range(1..=max_points);
    PointCloud::new(
        (0..n)
            .map(|_| [0; 3].map(|_| rng.random_range(-0.5..0.5)))
            .collect(),
    )
    .unwrap()
}

pub fn chamfer(x: &PointCloud, y: &PointCloud) -> f64 {
    let one = |a: &PointCloud, b: &PointCloud| {
        let mut sum = 0.0;
        for p in &a.points {
            let mut best = f64::INFINITY;
            for q in &b.points {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            sum += best;
        }
        sum / a.points.len() as f64
    };
    one(x, y) + one(y, x)
}

/// (MMD, COV %, 1-NNA %) by brute force over the labelled union.
pub fn set_metrics(generated: &[PointCloud], reference: &[PointCloud]) -> (f64, f64, f64) {
    let mut mmd = 0.0;
    for r in reference {
        let mut best = f64::INFINITY;
        for g in generated {
            best = best.min(chamfer(g, r));
        }
        mmd += best;
    }
    mmd /= reference.len() as f64;

    let mut covered = vec![false; reference.len()];
    for g in generated {
        let mut best = (f64::INFINITY, 0);
        for (j, r) in reference.iter().enumerate() {
            let d = chamfer(g, r);
            if d < best.0 {
                best = (d, j);
            }
        }
        covered[best.1] = true;
    }
    let cov = 100.0 * covered.iter().filter(|c| **c).count() as f64 / reference.len() as f64;

    // (set, index, cloud); generated is set 0
    let union: Vec<(usize, usize, &PointCloud)> = generated
        .iter()
        .enumerate()
        .map(|(i, c)| (0, i, c))
        .chain(reference.iter().enumerate().map(|(i, c)| (1, i, c)))
        .collect();
    let mut correct = 0;
    for a in &union {
        let mut best: Option<(f64, usize, usize)> = None;
        for b in &union {
            if (a.0, a.1) == (b.0, b.1) {
                continue;
            }
            let d = chamfer(a.2, b.2);
            let better = match best {
                None => true,
                Some((bd, bs, bi)) => d < bd || (d == bd && (b.0, b.1) < (bs, bi)),
            };
            if better {
                best = Some((d, b.0, b.1));
            }
        }
        if best.unwrap().1 == a.0 {
            correct += 1;
        }
    }
    (mmd, cov, 100.0 * correct as f64 / union.len() as f64)
}
