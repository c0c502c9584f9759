use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};
use crate::mesh::{DiscreteMesh, BINS};

/// Gaussian weights over bins around `target`, truncated at `4 sigma` and
/// renormalized to sum to one.
pub fn smoothed_target(target: usize, sigma: f64, bins: usize) -> Vec<f64> {
    let mut w = vec![0.0; bins];
    let reach = (4.0 * sigma).floor() as isize;
    let t = target as isize;
    for b in (t - reach).max(0)..=(t + reach).min(bins as isize - 1) {
        let d = (b - t) as f64;
        w[b as usize] = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// `[targets.len(), BINS]` soft-target rows for per-coordinate bins.
pub fn soft_targets<T: Element>(targets: &[u8], sigma: f64) -> Tensor<T> {
    let mut data = Vec::with_capacity(targets.len() * BINS);
    let mut cache: Vec<Option<Vec<T>>> = vec![None; BINS];
    for &t in targets {
        let row = cache[t as usize].get_or_insert_with(|| {
            smoothed_target(t as usize, sigma, BINS)
                .into_iter()
                .map(T::lit)
                .collect()
        });
        data.extend_from_slice(row);
    }
    Tensor::new(&[targets.len(), BINS], data).expect("row count matches")
}

/// Per-row argmax of `[rows, BINS]` logits, ties to the lowest bin.
pub fn argmax_bins<T: Element>(logits: &[T]) -> Vec<u8> {
    logits
        .chunks_exact(BINS)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Percentage of faces whose nine bin coordinates all match.
pub fn triangle_accuracy(predicted: &DiscreteMesh, target: &DiscreteMesh) -> Result<f64> {
    if predicted.faces.len() != target.faces.len() {
        return Err(Error::Invalid(format!(
            "face counts differ: {} vs {}",
            predicted.faces.len(),
            target.faces.len()
        )));
    }
    if target.faces.is_empty() {
        return Ok(100.0);
    }
    let hits = (0..target.faces.len())
        .filter(|&f| predicted.face_bins(f) == target.face_bins(f))
        .count();
    Ok(100.0 * hits as f64 / target.faces.len() as f64)
}

/// Count faces whose nine predicted bins (row-major, 9 per face) match.
pub fn matching_faces(predicted: &[u8], target: &[u8]) -> usize {
    predicted
        .chunks_exact(9)
        .zip(target.chunks_exact(9))
        .filter(|(a, b)| a == b)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_one_at_boundary() {
        let w = smoothed_target(0, 1.0, BINS);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w[5..].iter().all(|&v| v == 0.0));
        assert!(w[4] > 0.0);
    }

    #[test]
    fn tiny_sigma_is_one_hot() {
        let w = smoothed_target(17, 1e-6, BINS);
        assert_eq!(w[17], 1.0);
        assert_eq!(w.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn accuracy_counts_faces() {
        let a = DiscreteMesh {
            vertices: vec![[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
            faces: vec![[0, 1, 2], [0, 1, 3]],
        };
        let mut b = a.clone();
        assert_eq!(triangle_accuracy(&a, &b).unwrap(), 100.0);
        b.vertices[3] = [0, 0, 2];
        assert_eq!(triangle_accuracy(&a, &b).unwrap(), 50.0);
    }
}
