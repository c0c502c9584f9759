//! Gradient verification over every op kind and every layer, on randomized
//! shapes, in f64.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_fn, OpKind, Padding, SparseRows, Tape, Targets, Tensor, Var};
use crate::codec::soft_targets;
use crate::error::Result;
use crate::gpt::{Gpt, GptConfig, InputMode, Vocab};
use crate::nn::{
    attention_forward, Activation, AttentionBlock, Bound, Linear, ParamStore, ResNet1D, ResNet1DConfig,
    SageConvLayer,
};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Composite layer rather than a single op.
    pub layer: bool,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero so kinks are never straddled.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, rng).map(|v| if v < 0.0 { v - 0.05 } else { v + 0.05 })
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(2..6)
}

fn segments(total: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = total;
    while left > 0 {
        let s = rng.random_range(1..=left);
        out.push(s);
        left -= s;
    }
    out
}

fn softmax_rows(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = uniform(shape, rng).map(|v| v.exp());
    let w = shape[1];
    for row in t.data_mut().chunks_mut(w) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Op cases: name, kind and inputs.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(String, OpKind, Vec<Tensor<f64>>)> {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let len = rng.random_range(4..9);
    let kernel = [1, 3, 5][rng.random_range(0..3)];
    let segs = segments(len, rng);
    let vocab = dim(rng) + 2;
    let ids: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..vocab)).collect();
    let sparse_rows: Vec<Vec<(usize, f64)>> = (0..m)
        .map(|_| {
            (0..rng.random_range(0..4))
                .map(|_| (rng.random_range(0..n), rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let classes: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let start = rng.random_range(0..n - 1);
    let (a, b, c) = (dim(rng), dim(rng), dim(rng));
    vec![
        ("add".into(), OpKind::Add, vec![uniform(&[m, n], rng), uniform(&[m, n], rng)]),
        ("add_broadcast".into(), OpKind::Add, vec![uniform(&[m, n], rng), uniform(&[n], rng)]),
        ("sub".into(), OpKind::Sub, vec![uniform(&[m, n], rng), uniform(&[n], rng)]),
        ("mul".into(), OpKind::Mul, vec![uniform(&[m, n], rng), uniform(&[m, n], rng)]),
        ("mul_broadcast".into(), OpKind::Mul, vec![uniform(&[a, m, n], rng), uniform(&[m, n], rng)]),
        ("matmul".into(), OpKind::MatMul, vec![uniform(&[m, k], rng), uniform(&[k, n], rng)]),
        (
            "conv1d_same".into(),
            OpKind::Conv1d {
                padding: Padding::Same,
                segments: segs.clone(),
            },
            vec![uniform(&[len, k], rng), uniform(&[kernel, k, n], rng)],
        ),
        (
            "conv1d_valid".into(),
            OpKind::Conv1d {
                padding: Padding::Valid,
                segments: vec![],
            },
            vec![uniform(&[len + kernel, k], rng), uniform(&[kernel, k, n], rng)],
        ),
        ("relu".into(), OpKind::Relu, vec![off_zero(&[m, n], rng)]),
        ("gelu".into(), OpKind::Gelu, vec![uniform(&[m, n], rng).map(|v| 3.0 * v)]),
        ("softmax_rows".into(), OpKind::Softmax { axis: 1 }, vec![uniform(&[m, n], rng)]),
        ("softmax_cols".into(), OpKind::Softmax { axis: 0 }, vec![uniform(&[m, n], rng)]),
        (
            "layer_norm".into(),
            OpKind::LayerNorm,
            vec![uniform(&[m, n], rng), uniform(&[n], rng), uniform(&[n], rng)],
        ),
        (
            "embedding_gather".into(),
            OpKind::EmbeddingGather { ids },
            vec![uniform(&[vocab, n], rng)],
        ),
        ("sum".into(), OpKind::Sum, vec![uniform(&[a, b, c], rng)]),
        ("mean".into(), OpKind::Mean, vec![uniform(&[a, b], rng)]),
        (
            "concat_rows".into(),
            OpKind::Concat { axis: 0 },
            vec![uniform(&[m, n], rng), uniform(&[k, n], rng)],
        ),
        (
            "concat_cols".into(),
            OpKind::Concat { axis: 1 },
            vec![uniform(&[m, n], rng), uniform(&[m, k], rng), uniform(&[m, 1], rng)],
        ),
        (
            "slice".into(),
            OpKind::Slice {
                axis: 1,
                start,
                len: n - start,
            },
            vec![uniform(&[m, n], rng)],
        ),
        ("transpose".into(), OpKind::Transpose, vec![uniform(&[m, n], rng)]),
        (
            "permute".into(),
            OpKind::Permute { perm: vec![2, 0, 1] },
            vec![uniform(&[a, b, c], rng)],
        ),
        (
            "reshape".into(),
            OpKind::Reshape { shape: vec![a * b, c] },
            vec![uniform(&[a, b, c], rng)],
        ),
        (
            "scale".into(),
            OpKind::Scale {
                factor: rng.random_range(-2.0..2.0),
            },
            vec![uniform(&[m, n], rng)],
        ),
        (
            "sparse_rows".into(),
            OpKind::SparseRows {
                rows: Rc::new(SparseRows::from_rows(n, &sparse_rows)),
            },
            vec![uniform(&[n, k], rng)],
        ),
        (
            "softmax_cross_entropy_classes".into(),
            OpKind::SoftmaxCrossEntropy {
                targets: Targets::Classes(classes),
            },
            vec![uniform(&[m, n], rng)],
        ),
        (
            "softmax_cross_entropy_soft".into(),
            OpKind::SoftmaxCrossEntropy {
                targets: Targets::Soft(softmax_rows(&[m, n], rng)),
            },
            vec![uniform(&[m, n], rng)],
        ),
    ]
}

/// Randomizes every parameter, including zero-initialized ones.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
}

/// Checks `f(x, params)` over the input and all parameters.
fn layer_check<F>(name: &str, x: Tensor<f64>, store: &ParamStore<f64>, f: F) -> Result<Check>
where
    F: Fn(&mut Tape<f64>, Var, &Bound) -> Result<Var>,
{
    let mut inputs = vec![x];
    inputs.extend(store.tensors().iter().cloned());
    let error = grad_check_fn(
        |tape, vars| {
            let p = Bound::from_vars(vars[1..].to_vec());
            f(tape, vars[0], &p)
        },
        &inputs,
        STEP,
    )?;
    Ok(Check {
        name: name.to_string(),
        layer: true,
        error,
        tolerance: LAYER_TOLERANCE,
    })
}

fn layer_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let (rows, input, output) = (dim(rng) + 1, dim(rng), dim(rng));

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", input, output, 0.5, rng);
    randomize(&mut store, rng);
    out.push(layer_check("linear", uniform(&[rows, input], rng), &store, |t, x, p| {
        lin.forward(t, p, x)
    })?);

    let mut store = ParamStore::new();
    let sage = SageConvLayer::new(&mut store, "sage", input, output, rng);
    randomize(&mut store, rng);
    let neighbors: Vec<Vec<usize>> = (0..rows)
        .map(|i| (0..rows).filter(|&j| j != i && rng.random_bool(0.5)).collect())
        .collect();
    let agg = Rc::new(SparseRows::mean_of(rows, &neighbors));
    out.push(layer_check("sage_conv", uniform(&[rows, input], rng), &store, |t, x, p| {
        sage.forward(t, p, x, &agg)
    })?);

    for (label, activation) in [("relu", Activation::Relu), ("gelu", Activation::Gelu)] {
        let mut store = ParamStore::new();
        let net = ResNet1D::new(
            &mut store,
            "res",
            ResNet1DConfig {
                input_width: input,
                stage_widths: vec![dim(rng), dim(rng)],
                blocks_per_stage: vec![1, 2],
                kernel: 3,
                output_width: Some(output),
                activation,
            },
            rng,
        )?;
        randomize(&mut store, rng);
        let len = rng.random_range(4..8);
        let segs = segments(len, rng);
        out.push(layer_check(
            &format!("resnet1d_{label}"),
            uniform(&[len, input], rng),
            &store,
            |t, x, p| net.forward(t, p, x, &segs),
        )?);
    }

    for causal in [true, false] {
        let mut store = ParamStore::new();
        let heads = rng.random_range(1..3);
        let width = heads * dim(rng);
        let block = AttentionBlock::new(&mut store, "att", width, heads, 2 * width, 0.5, rng)?;
        randomize(&mut store, rng);
        let len = rng.random_range(2..7);
        let segs = segments(len, rng);
        let name = if causal { "attention_causal" } else { "attention_bidirectional" };
        out.push(layer_check(name, uniform(&[len, width], rng), &store, |t, x, p| {
            attention_forward(t, p, x, std::slice::from_ref(&block), &segs, causal, 64)
        })?);
    }

    // linear logits against Gaussian-smoothed coordinate targets
    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "head", input, crate::mesh::BINS, 0.5, rng);
    randomize(&mut store, rng);
    let bins: Vec<u8> = (0..3).map(|_| rng.random_range(0..128)).collect();
    let soft: Tensor<f64> = soft_targets(&bins, 1.0);
    out.push(layer_check("smoothed_coordinate_loss", uniform(&[3, input], rng), &store, |t, x, p| {
        let logits = head.forward(t, p, x)?;
        t.softmax_cross_entropy(logits, Targets::Soft(soft.clone()))
    })?);

    for input_mode in [InputMode::Learned, InputMode::Codebook] {
        let embeddings = (input_mode == InputMode::Codebook).then(|| uniform(&[5, 3], rng));
        let mut gpt = Gpt::<f64>::new(
            GptConfig {
                layers: 2,
                heads: 2,
                width: 4,
                ff_mult: 2,
                context: 16,
                input: input_mode,
                init_std: 0.5,
                ..GptConfig::default()
            },
            Vocab {
                size: 5,
                tokens_per_face: 2,
                embeddings,
            },
        )?;
        randomize(&mut gpt.params, rng);
        let tokens: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let seq = gpt.sequence(&tokens)?;
        let inputs: Vec<Tensor<f64>> = gpt.params.tensors().to_vec();
        let error = grad_check_fn(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let logits = gpt.logits_var(tape, &p, &[&seq.slots[..seq.len() - 1]])?;
                tape.softmax_cross_entropy(logits, Targets::Classes(seq.targets.clone()))
            },
            &inputs,
            STEP,
        )?;
        out.push(Check {
            name: format!("gpt_{}", input_mode.name()),
            layer: true,
            error,
            tolerance: LAYER_TOLERANCE,
        });
    }
    Ok(out)
}

/// Every op kind and every layer once, shapes drawn from `seed`.
pub fn grad_check_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, kind, inputs) in op_cases(&mut rng) {
        out.push(Check {
            name,
            layer: false,
            error: grad_check(&kind, &inputs, STEP)?,
            tolerance: OP_TOLERANCE,
        });
    }
    out.extend(layer_checks(&mut rng)?);
    Ok(out)
}
