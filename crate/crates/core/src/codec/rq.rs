use rand::Rng;

use crate::autodiff::{Element, Tape, Var};
use crate::error::{Error, Result};

/// Shared embedding table with exponential-moving-average statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub dim: usize,
    /// `[K, dim]` row-major.
    pub embed: Vec<T>,
    pub cluster_size: Vec<T>,
    /// `[K, dim]` running sums of assigned features.
    pub embed_sum: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaConfig {
    pub decay: f64,
    pub laplace_eps: f64,
    pub dead_threshold: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            decay: 0.99,
            laplace_eps: 1e-5,
            dead_threshold: 1e-3,
        }
    }
}

impl<T: Element> Codebook<T> {
    /// Codebook whose entries are the given rows, each with unit EMA size.
    pub fn from_rows(dim: usize, embed: Vec<T>) -> Result<Self> {
        if dim == 0 || embed.is_empty() || !embed.len().is_multiple_of(dim) {
            return Err(Error::Invalid(format!(
                "codebook data of length {} is not a non-empty multiple of {dim}",
                embed.len()
            )));
        }
        let k = embed.len() / dim;
        Ok(Codebook {
            dim,
            embed_sum: embed.clone(),
            embed,
            cluster_size: vec![T::one(); k],
        })
    }

    pub fn len(&self) -> usize {
        self.cluster_size.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_size.is_empty()
    }

    pub fn entry(&self, k: usize) -> &[T] {
        &self.embed[k * self.dim..(k + 1) * self.dim]
    }

    /// Overwrite every entry with a random row of `pool` (rows of width `dim`).
    pub fn seed_from(&mut self, pool: &[T], rng: &mut impl Rng) {
        let rows = pool.len() / self.dim;
        for k in 0..self.len() {
            let r = rng.random_range(0..rows);
            self.reseed(k, &pool[r * self.dim..(r + 1) * self.dim]);
        }
    }

    fn reseed(&mut self, k: usize, row: &[T]) {
        let d = self.dim;
        self.embed[k * d..(k + 1) * d].copy_from_slice(row);
        self.embed_sum[k * d..(k + 1) * d].copy_from_slice(row);
        self.cluster_size[k] = T::one();
    }

    /// One EMA step from `features` (rows of width `dim`) assigned to `codes`.
    /// Entries whose size falls below the dead threshold are re-seeded from a
    /// random row of `pool`. Returns the number of re-seeded entries.
    pub fn ema_update(
        &mut self,
        features: &[T],
        codes: &[usize],
        pool: &[T],
        config: &EmaConfig,
        rng: &mut impl Rng,
    ) -> usize {
        let (k_total, d) = (self.len(), self.dim);
        debug_assert_eq!(features.len(), codes.len() * d);
        let mut counts = vec![0.0f64; k_total];
        let mut sums = vec![0.0f64; k_total * d];
        for (row, &c) in features.chunks_exact(d).zip(codes) {
            counts[c] += 1.0;
            for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                *s += x.as_f64();
            }
        }
        let g = config.decay;
        for k in 0..k_total {
            let size = g * self.cluster_size[k].as_f64() + (1.0 - g) * counts[k];
            self.cluster_size[k] = T::lit(size);
            for j in 0..d {
                let i = k * d + j;
                self.embed_sum[i] = T::lit(g * self.embed_sum[i].as_f64() + (1.0 - g) * sums[i]);
            }
        }
        let n: f64 = self.cluster_size.iter().map(|s| s.as_f64()).sum();
        let eps = config.laplace_eps;
        for k in 0..k_total {
            let smoothed = (self.cluster_size[k].as_f64() + eps) / (n + k_total as f64 * eps) * n;
            for j in 0..d {
                let i = k * d + j;
                self.embed[i] = T::lit(self.embed_sum[i].as_f64() / smoothed);
            }
        }
        let rows = pool.len() / d;
        let mut reseeded = 0;
        if rows > 0 {
            for k in 0..k_total {
                if self.cluster_size[k].as_f64() < config.dead_threshold {
                    let r = rng.random_range(0..rows);
                    self.reseed(k, &pool[r * d..(r + 1) * d]);
                    reseeded += 1;
                }
            }
        }
        reseeded
    }
}

/// Result of residual quantization of `rows` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RqOutput<T> {
    pub depth: usize,
    /// `[rows, depth]` chosen entries.
    pub codes: Vec<usize>,
    /// Cumulative reconstructions: `partials[d]` is the sum of the first
    /// `d + 1` chosen embeddings, `[rows, dim]`.
    pub partials: Vec<Vec<T>>,
    /// Residual entering each level: `residuals[d]` is `r^d`, `[rows, dim]`.
    pub residuals: Vec<Vec<T>>,
}

impl<T: Element> RqOutput<T> {
    pub fn quantized(&self) -> &[T] {
        &self.partials[self.depth - 1]
    }
}

pub fn squared_distance<T: Element>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Sampling of codes in proportion to `softmax(-distance / temperature)`.
/// Only the first `levels` levels sample; deeper levels stay greedy.
pub struct Stochastic<'a, R> {
    pub rng: &'a mut R,
    pub temperature: f64,
    pub levels: usize,
}

/// Greedy (or sampled) residual quantization over a shared codebook.
pub fn rq_quantize<T: Element, R: Rng>(
    codebook: &Codebook<T>,
    vectors: &[T],
    depth: usize,
    mut stochastic: Option<Stochastic<'_, R>>,
) -> Result<RqOutput<T>> {
    let dim = codebook.dim;
    if codebook.is_empty() {
        return Err(Error::Empty("codebook"));
    }
    if depth == 0 || !vectors.len().is_multiple_of(dim) {
        return Err(Error::shape(
            "rq_quantize",
            format!("{} values, dim {dim}, depth {depth}", vectors.len()),
        ));
    }
    let rows = vectors.len() / dim;
    let k_total = codebook.len();
    let mut codes = vec![0usize; rows * depth];
    let mut partials = Vec::with_capacity(depth);
    let mut residuals = Vec::with_capacity(depth);
    let mut residual = vectors.to_vec();
    let mut acc = vec![T::zero(); vectors.len()];
    let mut dists = vec![T::zero(); k_total];
    for level in 0..depth {
        residuals.push(residual.clone());
        for r in 0..rows {
            let rv = &residual[r * dim..(r + 1) * dim];
            for (k, d) in dists.iter_mut().enumerate() {
                *d = squared_distance(rv, codebook.entry(k));
            }
            let code = match stochastic.as_mut() {
                Some(s) if level < s.levels => sample_code(&dists, s.temperature, s.rng),
                _ => argmin(&dists),
            };
            codes[r * depth + level] = code;
            let e = codebook.entry(code);
            for j in 0..dim {
                acc[r * dim + j] += e[j];
                residual[r * dim + j] -= e[j];
            }
        }
        partials.push(acc.clone());
    }
    Ok(RqOutput {
        depth,
        codes,
        partials,
        residuals,
    })
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin<T: Element>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn sample_code<T: Element>(dists: &[T], temperature: f64, rng: &mut impl Rng) -> usize {
    let tau = temperature.max(1e-12);
    let min = dists[argmin(dists)].as_f64();
    let weights: Vec<f64> = dists
        .iter()
        .map(|d| (-(d.as_f64() - min) / tau).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    argmin(dists)
}

/// `sum_d sum_rows ||z - zhat^(d)||^2` over cumulative reconstructions.
pub fn commitment<T: Element>(vectors: &[T], rq: &RqOutput<T>) -> f64 {
    rq.partials
        .iter()
        .map(|p| squared_distance(vectors, p).as_f64())
        .sum()
}

/// `sum_d ||z - partial_d||^2` on the tape. The partial sums are expected
/// to be constants, so gradient reaches `z` only.
pub fn commitment_loss<T: Element>(tape: &mut Tape<T>, z: Var, partials: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in partials {
        let diff = tape.sub(z, p)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    total.ok_or(Error::Empty("partial sums"))
}
