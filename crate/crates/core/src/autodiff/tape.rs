use std::rc::Rc;

use super::kernels::{self, ConvPlan, SparseRows};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length (odd kernels only).
    Same,
    /// No padding; each segment shrinks by `kernel - 1`.
    Valid,
}

/// Targets for [`Tape::softmax_cross_entropy`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    Classes(Vec<usize>),
    /// `[rows, classes]` probability rows, each summing to one.
    Soft(Tensor<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand repeats over `outer` leading blocks.
    Right(usize),
    /// Left operand repeats over `outer` leading blocks.
    Left(usize),
}

#[derive(Debug, Clone, Copy)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    rhs_batched: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    MatMul(Var, Var, MatDims),
    Conv1d {
        x: Var,
        w: Var,
        plan: ConvPlan,
        col: Vec<T>,
        cin: usize,
        cout: usize,
    },
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        in_chunk: usize,
        offset: usize,
        chunk: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Scale(Var, T),
    Sparse {
        x: Var,
        rows: Rc<SparseRows<T>>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Targets<T>,
        rows: usize,
        classes: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and `backward` walks it once in reverse.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn slot<'a, T: Element>(
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
) -> &'a mut [T] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing is differentiable.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Broadcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((sa.to_vec(), Broadcast::Same));
        }
        if sb.len() < sa.len() && sa.ends_with(sb) {
            let outer = sa[..sa.len() - sb.len()].iter().product();
            return Ok((sa.to_vec(), Broadcast::Right(outer)));
        }
        if sa.len() < sb.len() && sb.ends_with(sa) {
            let outer = sb[..sb.len() - sa.len()].iter().product();
            return Ok((sb.to_vec(), Broadcast::Left(outer)));
        }
        Err(Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}")))
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let (shape, bc) = self.broadcast(op, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = match bc {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Right(_) => {
                let nb = db.len();
                da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect()
            }
            Broadcast::Left(_) => {
                let na = da.len();
                db.iter().enumerate().map(|(i, &y)| f(da[i % na], y)).collect()
            }
        };
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, make(a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Scale(x, c), rg))
    }

    fn mat_dims(&self, a: Var, b: Var) -> Result<(MatDims, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: inner dims differ")));
        }
        let n = sb[sb.len() - 1];
        let mut out = sa[..sa.len() - 1].to_vec();
        out.push(n);
        if sb.len() == 2 {
            let m = sa[..sa.len() - 1].iter().product();
            return Ok((
                MatDims {
                    batch: 1,
                    m,
                    k,
                    n,
                    rhs_batched: false,
                },
                out,
            ));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: batch dims differ")));
        }
        let batch = sa[..sa.len() - 2].iter().product();
        Ok((
            MatDims {
                batch,
                m: sa[sa.len() - 2],
                k,
                n,
                rhs_batched: true,
            },
            out,
        ))
    }

    /// Matrix product over the last two axes; leading axes are batch axes.
    /// A rank-2 right operand is shared across the whole batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (d, shape) = self.mat_dims(a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        for bi in 0..d.batch {
            let bs = if d.rhs_batched { bi * d.k * d.n } else { 0 };
            kernels::gemm(
                d.m,
                d.k,
                d.n,
                &av[bi * d.m * d.k..],
                false,
                &bv[bs..],
                false,
                T::zero(),
                &mut out[bi * d.m * d.n..],
            );
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b, d), rg))
    }

    /// 1D convolution of `x: [length, c_in]` with `w: [kernel, c_in, c_out]`.
    ///
    /// `segments` splits the rows into independent sequences (empty = one).
    pub fn conv1d(&mut self, x: Var, w: Var, padding: Padding, segments: &[usize]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::shape("conv1d", format!("x {sx:?}, w {sw:?}")));
        }
        let (kernel, cin, cout) = (sw[0], sw[1], sw[2]);
        let in_segments = if segments.is_empty() {
            vec![sx[0]]
        } else {
            segments.to_vec()
        };
        if in_segments.iter().sum::<usize>() != sx[0] {
            return Err(Error::shape("conv1d", "segments do not cover input rows"));
        }
        let (pad, out_segments) = match padding {
            Padding::Same => {
                if kernel % 2 == 0 {
                    return Err(Error::shape("conv1d", "same padding requires an odd kernel"));
                }
                ((kernel - 1) / 2, in_segments.clone())
            }
            Padding::Valid => {
                if in_segments.iter().any(|&l| l < kernel) {
                    return Err(Error::shape("conv1d", "segment shorter than kernel"));
                }
                (0, in_segments.iter().map(|&l| l + 1 - kernel).collect())
            }
        };
        let plan = ConvPlan {
            kernel,
            pad,
            in_segments,
            out_segments,
        };
        let col = plan.im2col(self.value(x).data(), cin);
        let lout = plan.out_len();
        let out = kernels::matmul(&col, lout, kernel * cin, self.value(w).data(), cout);
        let rg = self.any_grad(&[x, w]);
        let value = Tensor::new(&[lout, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                plan,
                col,
                cin,
                cout,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::gelu);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Gelu(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = kernels::softmax_axis(self.value(x).data(), outer, n, inner);
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {shape:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (y, mean, rstd) = kernels::layer_norm_rows(
            self.value(x).data(),
            width,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Rows of `table: [vocab, dim]` selected by `ids`, giving `[ids.len(), dim]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather", format!("table {shape:?} must be rank 2")));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("gather", format!("id {bad} >= vocab {vocab}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let rg = self.any_grad(&[table]);
        let value = Tensor::new(&[ids.len(), dim], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let chunks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let (in_chunk, offset, chunk) = (n * inner, start * inner, len * inner);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            out.extend_from_slice(&src[o * in_chunk + offset..o * in_chunk + offset + chunk]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                outer,
                in_chunk,
                offset,
                chunk,
            },
            rg,
        ))
    }

    /// General axis permutation; `perm[i]` is the input axis placed at output axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("perm {perm:?} for {shape:?}")));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `y = S x` for a fixed sparse `S` over the rows of `x: [cols, dim]`.
    pub fn sparse_rows(&mut self, rows: Rc<SparseRows<T>>, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != rows.cols {
            return Err(Error::shape(
                "sparse_rows",
                format!("x {shape:?} for {} sparse columns", rows.cols),
            ));
        }
        let out = rows.apply(self.value(x).data(), shape[1]);
        let value = Tensor::new(&[rows.rows(), shape[1]], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Sparse { x, rows }, rg))
    }

    /// Mean over rows of `-sum_k target_k * log softmax(logits)_k`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Targets<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::shape("cross_entropy", format!("logits {shape:?}")));
        }
        let (rows, classes) = (shape[0], shape[1]);
        match &targets {
            Targets::Classes(ids) => {
                if ids.len() != rows || ids.iter().any(|&c| c >= classes) {
                    return Err(Error::shape("cross_entropy", "class targets do not match logits"));
                }
            }
            Targets::Soft(t) => {
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("soft targets {:?} vs logits {shape:?}", t.shape()),
                    ));
                }
                for r in 0..rows {
                    let s: f64 = t.row(r).iter().map(|v| v.as_f64()).sum();
                    if (s - 1.0).abs() > 1e-6 {
                        return Err(Error::Invalid(format!(
                            "soft target row {r} sums to {s}, expected 1"
                        )));
                    }
                }
            }
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_axis(x, rows, classes, 1);
        let mut total = T::zero();
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            match &targets {
                Targets::Classes(ids) => total += lse - row[ids[r]],
                Targets::Soft(t) => {
                    for (&w, &v) in t.row(r).iter().zip(row) {
                        if w != T::zero() {
                            total += w * (lse - v);
                        }
                    }
                }
            }
        }
        let loss = total / T::lit(rows as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                rows,
                classes,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        }
        for i in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.backprop(i, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, lower: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                self.bcast_grad(*a, *bc, true, gd, |k| gd[k], lower, &wants);
                self.bcast_grad(*b, *bc, false, gd, |k| sign * gd[k], lower, &wants);
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (av.len(), bv.len());
                self.bcast_grad(*a, *bc, true, gd, |k| gd[k] * bv[k % nb], lower, &wants);
                self.bcast_grad(*b, *bc, false, gd, |k| gd[k] * av[k % na], lower, &wants);
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    let dst = slot(lower, *x, self.shape(*x));
                    for (o, &v) in dst.iter_mut().zip(gd) {
                        *o += v * *c;
                    }
                }
            }
            Op::MatMul(a, b, d) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let dst = slot(lower, *a, self.shape(*a));
                    for bi in 0..d.batch {
                        let bs = if d.rhs_batched { bi * d.k * d.n } else { 0 };
                        kernels::gemm(
                            d.m,
                            d.n,
                            d.k,
                            &gd[bi * d.m * d.n..],
                            false,
                            &bv[bs..],
                            true,
                            T::one(),
                            &mut dst[bi * d.m * d.k..],
                        );
                    }
                }
                if wants(*b) {
                    let dst = slot(lower, *b, self.shape(*b));
                    if d.rhs_batched {
                        for bi in 0..d.batch {
                            kernels::gemm(
                                d.k,
                                d.m,
                                d.n,
                                &av[bi * d.m * d.k..],
                                true,
                                &gd[bi * d.m * d.n..],
                                false,
                                T::one(),
                                &mut dst[bi * d.k * d.n..],
                            );
                        }
                    } else {
                        kernels::gemm(d.k, d.m, d.n, av, true, gd, false, T::one(), dst);
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                plan,
                col,
                cin,
                cout,
            } => {
                let kc = plan.kernel * cin;
                let lout = plan.out_len();
                if wants(*w) {
                    let dst = slot(lower, *w, self.shape(*w));
                    kernels::gemm(kc, lout, *cout, col, true, gd, false, T::one(), dst);
                }
                if wants(*x) {
                    let mut dcol = vec![T::zero(); lout * kc];
                    kernels::gemm(
                        lout,
                        *cout,
                        kc,
                        gd,
                        false,
                        self.value(*w).data(),
                        true,
                        T::zero(),
                        &mut dcol,
                    );
                    let dst = slot(lower, *x, self.shape(*x));
                    plan.col2im_add(&dcol, *cin, dst);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = self.value(*x).data();
                    let dst = slot(lower, *x, self.shape(*x));
                    for ((o, &v), &gv) in dst.iter_mut().zip(xv).zip(gd) {
                        if v > T::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = self.value(*x).data();
                    let dst = slot(lower, *x, self.shape(*x));
                    for ((o, &v), &gv) in dst.iter_mut().zip(xv).zip(gd) {
                        *o += gv * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if wants(*x) {
                    let y = node.value.data();
                    let dst = slot(lower, *x, self.shape(*x));
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot = (0..*n).map(|j| y[at(j)] * gd[at(j)]).sum::<T>();
                            for j in 0..*n {
                                dst[at(j)] += y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let width = gam.len();
                let rows = mean.len();
                let xhat = |r: usize, j: usize| (xv[r * width + j] - mean[r]) * rstd[r];
                if wants(*gamma) {
                    let dst = slot(lower, *gamma, &[width]);
                    for r in 0..rows {
                        for j in 0..width {
                            dst[j] += gd[r * width + j] * xhat(r, j);
                        }
                    }
                }
                if wants(*beta) {
                    let dst = slot(lower, *beta, &[width]);
                    for r in 0..rows {
                        for j in 0..width {
                            dst[j] += gd[r * width + j];
                        }
                    }
                }
                if wants(*x) {
                    let inv_n = T::one() / T::lit(width as f64);
                    let dst = slot(lower, *x, self.shape(*x));
                    for r in 0..rows {
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for j in 0..width {
                            let dy = gd[r * width + j] * gam[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat(r, j);
                        }
                        for j in 0..width {
                            let dy = gd[r * width + j] * gam[j];
                            dst[r * width + j] += rstd[r]
                                * (dy - sum_dy * inv_n - xhat(r, j) * sum_dy_xhat * inv_n);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let dim = self.shape(*table)[1];
                    let dst = slot(lower, *table, self.shape(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in dst[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&gd[r * dim..(r + 1) * dim])
                        {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if wants(*x) {
                    let n = self.value(*x).numel();
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        T::one() / T::lit(n as f64)
                    } else {
                        T::one()
                    };
                    let gv = gd[0] * scale;
                    for o in slot(lower, *x, self.shape(*x)).iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if wants(v) {
                        let dst = slot(lower, v, self.shape(v));
                        for o in 0..*outer {
                            let src = &gd[o * total + offset..o * total + offset + c];
                            for (d, &s) in dst[o * c..(o + 1) * c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice {
                x,
                outer,
                in_chunk,
                offset,
                chunk,
            } => {
                if wants(*x) {
                    let dst = slot(lower, *x, self.shape(*x));
                    for o in 0..*outer {
                        let base = o * in_chunk + offset;
                        for (d, &s) in dst[base..base + chunk]
                            .iter_mut()
                            .zip(&gd[o * chunk..(o + 1) * chunk])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if wants(*x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let back = permute_data(gd, g.shape(), &inverse);
                    for (d, s) in slot(lower, *x, self.shape(*x)).iter_mut().zip(back) {
                        *d += s;
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    for (d, &s) in slot(lower, *x, self.shape(*x)).iter_mut().zip(gd) {
                        *d += s;
                    }
                }
            }
            Op::Sparse { x, rows } => {
                if wants(*x) {
                    let width = self.shape(*x)[1];
                    rows.apply_transpose_add(gd, width, slot(lower, *x, self.shape(*x)));
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                rows,
                classes,
            } => {
                if wants(*logits) {
                    let scale = gd[0] / T::lit(*rows as f64);
                    let dst = slot(lower, *logits, self.shape(*logits));
                    for (o, &p) in dst.iter_mut().zip(probs) {
                        *o += scale * p;
                    }
                    match targets {
                        Targets::Classes(ids) => {
                            for (r, &c) in ids.iter().enumerate() {
                                dst[r * classes + c] -= scale;
                            }
                        }
                        Targets::Soft(t) => {
                            for (o, &w) in dst.iter_mut().zip(t.data()) {
                                *o -= scale * w;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulate the gradient of one operand of a broadcasting binary op.
    /// `contrib(k)` gives the contribution at output element `k`.
    #[allow(clippy::too_many_arguments)]
    fn bcast_grad(
        &self,
        v: Var,
        bc: Broadcast,
        is_left: bool,
        gd: &[T],
        contrib: impl Fn(usize) -> T,
        lower: &mut [Option<Tensor<T>>],
        wants: &impl Fn(Var) -> bool,
    ) {
        if !wants(v) {
            return;
        }
        let dst = slot(lower, v, self.shape(v));
        let repeated = matches!((bc, is_left), (Broadcast::Right(_), false) | (Broadcast::Left(_), true));
        if repeated {
            let n = dst.len();
            for k in 0..gd.len() {
                dst[k % n] += contrib(k);
            }
        } else {
            for (k, d) in dst.iter_mut().enumerate() {
                *d += contrib(k);
            }
        }
    }
}
