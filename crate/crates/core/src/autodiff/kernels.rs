//! Slice-level numeric kernels shared by the tape and the tape-free inference path.

use super::Element;

/// `c = op(a) * op(b) + beta * c` where `op` optionally transposes.
///
/// `a` is stored `[m, k]` (or `[k, m]` when `ta`), `b` is stored `[k, n]`
/// (or `[n, k]` when `tb`), `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every addressed element.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<T: Element>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, a, false, b, false, T::zero(), &mut c);
    c
}

/// Numerically stable softmax along the middle axis of `[outer, n, inner]`.
pub fn softmax_axis<T: Element>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                y[at(j)] /= total;
            }
        }
    }
    y
}

/// Row-wise layer norm; returns `(y, mean, rstd)`.
pub fn layer_norm_rows<T: Element>(
    x: &[T],
    width: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = if width == 0 { 0 } else { x.len() / width };
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_n = T::one() / T::lit(width as f64);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            y[r * width + j] = (v - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Element>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Geometry of a segment-aware 1D convolution over `[length, channels]` rows.
///
/// Each segment is convolved independently with zero padding at its own
/// boundaries, so several sequences can share one GEMM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvPlan {
    pub kernel: usize,
    pub pad: usize,
    pub in_segments: Vec<usize>,
    pub out_segments: Vec<usize>,
}

impl ConvPlan {
    pub fn in_len(&self) -> usize {
        self.in_segments.iter().sum()
    }

    pub fn out_len(&self) -> usize {
        self.out_segments.iter().sum()
    }

    /// `[out_len, kernel * channels]` patch matrix.
    pub fn im2col<T: Element>(&self, x: &[T], channels: usize) -> Vec<T> {
        let kc = self.kernel * channels;
        let mut col = vec![T::zero(); self.out_len() * kc];
        let (mut in_off, mut out_off) = (0usize, 0usize);
        for (&lin, &lout) in self.in_segments.iter().zip(&self.out_segments) {
            for p in 0..lout {
                let dst = &mut col[(out_off + p) * kc..(out_off + p + 1) * kc];
                for tap in 0..self.kernel {
                    let src = p as isize + tap as isize - self.pad as isize;
                    if src >= 0 && (src as usize) < lin {
                        let s = (in_off + src as usize) * channels;
                        dst[tap * channels..(tap + 1) * channels]
                            .copy_from_slice(&x[s..s + channels]);
                    }
                }
            }
            in_off += lin;
            out_off += lout;
        }
        col
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add patches back to rows.
    pub fn col2im_add<T: Element>(&self, col: &[T], channels: usize, dx: &mut [T]) {
        let kc = self.kernel * channels;
        let (mut in_off, mut out_off) = (0usize, 0usize);
        for (&lin, &lout) in self.in_segments.iter().zip(&self.out_segments) {
            for p in 0..lout {
                let src_row = &col[(out_off + p) * kc..(out_off + p + 1) * kc];
                for tap in 0..self.kernel {
                    let src = p as isize + tap as isize - self.pad as isize;
                    if src >= 0 && (src as usize) < lin {
                        let d = (in_off + src as usize) * channels;
                        for (o, &g) in dx[d..d + channels]
                            .iter_mut()
                            .zip(&src_row[tap * channels..(tap + 1) * channels])
                        {
                            *o += g;
                        }
                    }
                }
            }
            in_off += lin;
            out_off += lout;
        }
    }
}

/// Sparse row aggregation `y_r = sum_j w_rj * x_j` with a fixed pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows<T> {
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Element> SparseRows<T> {
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, T)>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for &(c, w) in row {
                assert!(c < cols, "sparse column {c} out of range {cols}");
                indices.push(c);
                weights.push(w);
            }
            row_ptr.push(indices.len());
        }
        SparseRows {
            cols,
            row_ptr,
            indices,
            weights,
        }
    }

    /// Mean over each row's listed columns; rows with no entries produce zeros.
    pub fn mean_of(cols: usize, rows: &[Vec<usize>]) -> Self {
        let weighted: Vec<Vec<(usize, T)>> = rows
            .iter()
            .map(|r| {
                let w = if r.is_empty() {
                    T::zero()
                } else {
                    T::one() / T::lit(r.len() as f64)
                };
                r.iter().map(|&c| (c, w)).collect()
            })
            .collect();
        Self::from_rows(cols, &weighted)
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn apply(&self, x: &[T], width: usize) -> Vec<T> {
        let mut y = vec![T::zero(); self.rows() * width];
        for r in 0..self.rows() {
            let dst = &mut y[r * width..(r + 1) * width];
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                let (c, w) = (self.indices[e], self.weights[e]);
                for (o, &v) in dst.iter_mut().zip(&x[c * width..(c + 1) * width]) {
                    *o += w * v;
                }
            }
        }
        y
    }

    pub fn apply_transpose_add(&self, dy: &[T], width: usize, dx: &mut [T]) {
        for r in 0..self.rows() {
            let src = &dy[r * width..(r + 1) * width];
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                let (c, w) = (self.indices[e], self.weights[e]);
                for (o, &g) in dx[c * width..(c + 1) * width].iter_mut().zip(src) {
                    *o += w * g;
                }
            }
        }
    }
}
