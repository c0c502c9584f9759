//! Central-difference verification of tape gradients.

use std::rc::Rc;
use std::str::FromStr;

use super::kernels::SparseRows;
use super::{Padding, Tape, Targets, Tensor, Var};
use crate::error::{Error, Result};

/// Op kinds understood by [`grad_check`]; non-tensor arguments travel with the kind.
#[derive(Debug, Clone)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Conv1d { padding: Padding, segments: Vec<usize> },
    Relu,
    Gelu,
    Softmax { axis: usize },
    LayerNorm,
    EmbeddingGather { ids: Vec<usize> },
    Sum,
    Mean,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Transpose,
    Permute { perm: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Scale { factor: f64 },
    SparseRows { rows: Rc<SparseRows<f64>> },
    SoftmaxCrossEntropy { targets: Targets<f64> },
}

impl FromStr for OpKind {
    type Err = Error;

    /// Parameter-free kinds by name; parameterised kinds get simple defaults.
    fn from_str(name: &str) -> Result<Self> {
        Ok(match name {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "matmul" => OpKind::MatMul,
            "conv1d" => OpKind::Conv1d {
                padding: Padding::Same,
                segments: Vec::new(),
            },
            "relu" => OpKind::Relu,
            "gelu" => OpKind::Gelu,
            "softmax" => OpKind::Softmax { axis: 1 },
            "layer_norm" => OpKind::LayerNorm,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "transpose" => OpKind::Transpose,
            "scale" => OpKind::Scale { factor: 2.5 },
            other => return Err(Error::Invalid(format!("unknown op kind '{other}'"))),
        })
    }
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv1d { .. } => "conv1d",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::EmbeddingGather { .. } => "embedding_gather",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Permute { .. } => "permute",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Scale { .. } => "scale",
            OpKind::SparseRows { .. } => "sparse_rows",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    /// Record this op on `tape` over `inputs`.
    pub fn apply(&self, tape: &mut Tape<f64>, inputs: &[Var]) -> Result<Var> {
        let arg = |i: usize| {
            inputs
                .get(i)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("{} expects input #{i}", self.name())))
        };
        match self {
            OpKind::Add => tape.add(arg(0)?, arg(1)?),
            OpKind::Sub => tape.sub(arg(0)?, arg(1)?),
            OpKind::Mul => tape.mul(arg(0)?, arg(1)?),
            OpKind::MatMul => tape.matmul(arg(0)?, arg(1)?),
            OpKind::Conv1d { padding, segments } => {
                tape.conv1d(arg(0)?, arg(1)?, *padding, segments)
            }
            OpKind::Relu => tape.relu(arg(0)?),
            OpKind::Gelu => tape.gelu(arg(0)?),
            OpKind::Softmax { axis } => tape.softmax(arg(0)?, *axis),
            OpKind::LayerNorm => tape.layer_norm(arg(0)?, arg(1)?, arg(2)?, 1e-5),
            OpKind::EmbeddingGather { ids } => tape.gather(arg(0)?, ids),
            OpKind::Sum => tape.sum(arg(0)?),
            OpKind::Mean => tape.mean(arg(0)?),
            OpKind::Concat { axis } => tape.concat(inputs, *axis),
            OpKind::Slice { axis, start, len } => tape.slice(arg(0)?, *axis, *start, *len),
            OpKind::Transpose => tape.transpose(arg(0)?),
            OpKind::Permute { perm } => tape.permute(arg(0)?, perm),
            OpKind::Reshape { shape } => tape.reshape(arg(0)?, shape),
            OpKind::Scale { factor } => tape.scale(arg(0)?, *factor),
            OpKind::SparseRows { rows } => tape.sparse_rows(rows.clone(), arg(0)?),
            OpKind::SoftmaxCrossEntropy { targets } => {
                tape.softmax_cross_entropy(arg(0)?, targets.clone())
            }
        }
    }
}

/// Max relative gradient error of one op, probed through a fixed random projection.
pub fn grad_check(kind: &OpKind, inputs: &[Tensor<f64>], step: f64) -> Result<f64> {
    grad_check_fn(|tape, vars| kind.apply(tape, vars), inputs, step)
}

fn projection_weights(n: usize) -> Vec<f64> {
    // Fixed, sign-varying weights so no output element is probed with zero weight.
    (0..n)
        .map(|i| {
            let x = ((i as f64 + 1.0) * 0.618_033_988_749_895).fract();
            0.5 + x * if i % 2 == 0 { 1.0 } else { -1.0 }
        })
        .collect()
}

/// Max over all input elements of `|a - n| / max(1, |a|, |n|)` comparing the
/// analytic gradient `a` against a central difference `n` of step `step`.
///
/// Non-scalar outputs are reduced with a fixed weighted sum first.
pub fn grad_check_fn<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let scalar_loss = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let out = f(tape, vars)?;
        if tape.value(out).numel() == 1 {
            return Ok(out);
        }
        let shape = tape.shape(out).to_vec();
        let n = tape.value(out).numel();
        let w = tape.constant(Tensor::new(&shape, projection_weights(n))?);
        let weighted = tape.mul(out, w)?;
        tape.sum(weighted)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = scalar_loss(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let l = scalar_loss(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.map_or(0.0, |g| g.data()[j]);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
