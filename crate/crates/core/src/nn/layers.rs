use std::rc::Rc;

use rand::Rng;

use super::params::{normal, Bound, ParamId, ParamStore};
use crate::autodiff::{Element, Padding, SparseRows, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::FaceGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Element>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// `y = x W + b` over the last axis; `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), normal(&[input, output], std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[output])),
            input,
            output,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add(y, p.var(self.b))
    }
}

/// Row-mean neighbor aggregation; isolated nodes aggregate to zero.
pub fn neighbor_mean<T: Element>(graph: &FaceGraph) -> SparseRows<T> {
    SparseRows::mean_of(graph.nodes, &graph.neighbors())
}

/// GraphSAGE layer with mean aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SageConvLayer {
    pub w_self: ParamId,
    pub w_neigh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl SageConvLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / input as f64).sqrt();
        SageConvLayer {
            w_self: store.add(format!("{name}.w_self"), normal(&[input, output], std, rng)),
            w_neigh: store.add(format!("{name}.w_neigh"), normal(&[input, output], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output])),
            input,
            output,
        }
    }

    /// `x W_self + mean_neighbors(x) W_neigh + b`, without activation.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        aggregate: &Rc<SparseRows<T>>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input || shape[0] != aggregate.rows() {
            return Err(Error::shape(
                "sage_conv",
                format!(
                    "features {shape:?}, layer input {}, graph nodes {}",
                    self.input,
                    aggregate.rows()
                ),
            ));
        }
        let own = tape.matmul(x, p.var(self.w_self))?;
        let agg = tape.sparse_rows(Rc::clone(aggregate), x)?;
        let neigh = tape.matmul(agg, p.var(self.w_neigh))?;
        let y = tape.add(own, neigh)?;
        tape.add(y, p.var(self.bias))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResNet1DConfig {
    pub input_width: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub kernel: usize,
    /// Final linear head width; `None` returns the last stage's features.
    pub output_width: Option<usize>,
    pub activation: Activation,
}

impl ResNet1DConfig {
    pub fn resnet34(input_width: usize, stage_widths: Vec<usize>, output_width: usize) -> Self {
        ResNet1DConfig {
            input_width,
            stage_widths,
            blocks_per_stage: vec![3, 4, 6, 3],
            kernel: 3,
            output_width: Some(output_width),
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResBlock {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    /// 1x1 projection `[in, out]` used when the width changes.
    pub projection: Option<ParamId>,
}

/// Stride-1, same-padded 1D residual network over `[length, channels]` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResNet1D {
    pub config: ResNet1DConfig,
    pub blocks: Vec<ResBlock>,
    pub head: Option<Linear>,
}

impl ResNet1D {
    /// The second convolution of each block starts at zero, so every block
    /// initially reduces to `act(shortcut(x))`.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        config: ResNet1DConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.stage_widths.len() != config.blocks_per_stage.len()
            || config.stage_widths.is_empty()
            || config.kernel.is_multiple_of(2)
        {
            return Err(Error::Config(format!("invalid resnet layout {config:?}")));
        }
        let k = config.kernel;
        let mut blocks = Vec::new();
        let mut width = config.input_width;
        for (s, (&w, &n)) in config
            .stage_widths
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            for b in 0..n {
                let pre = format!("{name}.s{s}.b{b}");
                let std = (2.0 / (k * width) as f64).sqrt();
                let conv1 = (
                    store.add(format!("{pre}.conv1.w"), normal(&[k, width, w], std, rng)),
                    store.add(format!("{pre}.conv1.b"), Tensor::zeros(&[w])),
                );
                let conv2 = (
                    store.add(format!("{pre}.conv2.w"), Tensor::zeros(&[k, w, w])),
                    store.add(format!("{pre}.conv2.b"), Tensor::zeros(&[w])),
                );
                let projection = (width != w).then(|| {
                    let std = (1.0 / width as f64).sqrt();
                    store.add(format!("{pre}.proj"), normal(&[width, w], std, rng))
                });
                blocks.push(ResBlock {
                    conv1,
                    conv2,
                    projection,
                });
                width = w;
            }
        }
        let head = config.output_width.map(|out| {
            Linear::new(
                store,
                &format!("{name}.head"),
                width,
                out,
                (1.0 / width as f64).sqrt(),
                rng,
            )
        });
        Ok(ResNet1D {
            config,
            blocks,
            head,
        })
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        segments: &[usize],
    ) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.config.input_width || shape[0] == 0 {
            return Err(Error::shape(
                "resnet1d",
                format!("input {shape:?}, expected [N>=1, {}]", self.config.input_width),
            ));
        }
        let act = self.config.activation;
        let mut h = x;
        for block in &self.blocks {
            let c1 = tape.conv1d(h, p.var(block.conv1.0), Padding::Same, segments)?;
            let c1 = tape.add(c1, p.var(block.conv1.1))?;
            let c1 = act.apply(tape, c1)?;
            let c2 = tape.conv1d(c1, p.var(block.conv2.0), Padding::Same, segments)?;
            let c2 = tape.add(c2, p.var(block.conv2.1))?;
            let shortcut = match block.projection {
                Some(w) => tape.matmul(h, p.var(w))?,
                None => h,
            };
            let y = tape.add(shortcut, c2)?;
            h = act.apply(tape, y)?;
        }
        match &self.head {
            Some(head) => head.forward(tape, p, h),
            None => Ok(h),
        }
    }
}

/// Keys and values of previously processed positions for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    pub len: usize,
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

impl<T> Default for KvCache<T> {
    fn default() -> Self {
        KvCache {
            len: 0,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionBlock {
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub ln1: (ParamId, ParamId),
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: (ParamId, ParamId),
    pub ff1: Linear,
    pub ff2: Linear,
}

const LN_EPS: f64 = 1e-5;

impl AttentionBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        let ln = |store: &mut ParamStore<T>, n: &str| {
            (
                store.add(format!("{name}.{n}.g"), Tensor::full(&[width], T::one())),
                store.add(format!("{name}.{n}.b"), Tensor::zeros(&[width])),
            )
        };
        let ln1 = ln(store, "ln1");
        let ln2 = ln(store, "ln2");
        Ok(AttentionBlock {
            heads,
            width,
            ff_width,
            ln1,
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, std, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, std, rng),
            ln2,
            ff1: Linear::new(store, &format!("{name}.ff1"), width, ff_width, std, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_width, width, std, rng),
        })
    }

    /// Full forward over independent sequences of lengths `segments`.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        segments: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let segs = if segments.is_empty() {
            vec![rows]
        } else {
            segments.to_vec()
        };
        let h = self.pre_norm(tape, p, x, self.ln1)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let mut outs = Vec::with_capacity(segs.len());
        let mut start = 0;
        for &len in &segs {
            let part = tape.slice(qkv, 0, start, len)?;
            let (q, k, v) = self.split_qkv(tape, part)?;
            let (o, _) = self.attend(tape, q, k, v, 0, causal)?;
            outs.push(o);
            start += len;
        }
        let attn = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 0)?
        };
        self.finish(tape, p, x, attn)
    }

    /// Attention weights `[heads, L, L]` of a single sequence, for inspection.
    pub fn attention_weights<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        causal: bool,
    ) -> Result<Var> {
        let h = self.pre_norm(tape, p, x, self.ln1)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let (q, k, v) = self.split_qkv(tape, qkv)?;
        Ok(self.attend(tape, q, k, v, 0, causal)?.1)
    }

    /// Process new rows `x` of one sequence after the positions held in
    /// `cache`, then append their keys and values to it.
    pub fn forward_cached<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        cache: &mut KvCache<T>,
    ) -> Result<Var> {
        let n = tape.shape(x)[0];
        let w = self.width;
        let h = self.pre_norm(tape, p, x, self.ln1)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let (q, k_new, v_new) = self.split_qkv(tape, qkv)?;
        let (k, v) = if cache.len == 0 {
            (k_new, v_new)
        } else {
            let pk = tape.constant(Tensor::new(&[cache.len, w], cache.keys.clone())?);
            let pv = tape.constant(Tensor::new(&[cache.len, w], cache.values.clone())?);
            (tape.concat(&[pk, k_new], 0)?, tape.concat(&[pv, v_new], 0)?)
        };
        cache.keys.extend_from_slice(tape.value(k_new).data());
        cache.values.extend_from_slice(tape.value(v_new).data());
        let offset = cache.len;
        cache.len += n;
        let (o, _) = self.attend(tape, q, k, v, offset, true)?;
        self.finish(tape, p, x, o)
    }

    fn pre_norm<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        ln: (ParamId, ParamId),
    ) -> Result<Var> {
        tape.layer_norm(x, p.var(ln.0), p.var(ln.1), T::lit(LN_EPS))
    }

    fn split_qkv<T: Element>(&self, tape: &mut Tape<T>, qkv: Var) -> Result<(Var, Var, Var)> {
        let w = self.width;
        Ok((
            tape.slice(qkv, 1, 0, w)?,
            tape.slice(qkv, 1, w, w)?,
            tape.slice(qkv, 1, 2 * w, w)?,
        ))
    }

    /// Multi-head attention of queries `q: [n, W]` (absolute positions
    /// `offset..offset+n`) over keys/values `[offset+n, W]`.
    fn attend<T: Element>(
        &self,
        tape: &mut Tape<T>,
        q: Var,
        k: Var,
        v: Var,
        offset: usize,
        causal: bool,
    ) -> Result<(Var, Var)> {
        let (hn, dh) = (self.heads, self.width / self.heads);
        let n = tape.shape(q)[0];
        let m = tape.shape(k)[0];
        let heads = |tape: &mut Tape<T>, x: Var, len: usize| -> Result<Var> {
            let x = tape.reshape(x, &[len, hn, dh])?;
            tape.permute(x, &[1, 0, 2])
        };
        let qh = heads(tape, q, n)?;
        let kh = heads(tape, k, m)?;
        let vh = heads(tape, v, m)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
        if causal && m > 1 {
            let mut mask = vec![T::zero(); n * m];
            for i in 0..n {
                for j in offset + i + 1..m {
                    mask[i * m + j] = T::neg_infinity();
                }
            }
            let mask = tape.constant(Tensor::new(&[n, m], mask)?);
            scores = tape.add(scores, mask)?;
        }
        let weights = tape.softmax(scores, 2)?;
        let o = tape.matmul(weights, vh)?;
        let o = tape.permute(o, &[1, 0, 2])?;
        Ok((tape.reshape(o, &[n, self.width])?, weights))
    }

    fn finish<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, attn: Var) -> Result<Var> {
        let a = self.out.forward(tape, p, attn)?;
        let x = tape.add(x, a)?;
        let h = self.pre_norm(tape, p, x, self.ln2)?;
        let h = self.ff1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.ff2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Run a block stack over sequences no longer than `context`.
pub fn attention_forward<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    blocks: &[AttentionBlock],
    segments: &[usize],
    causal: bool,
    context: usize,
) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let longest = segments.iter().copied().max().unwrap_or(rows);
    if longest > context {
        return Err(Error::Context {
            len: longest,
            context,
        });
    }
    let mut h = x;
    for block in blocks {
        h = block.forward(tape, p, h, segments, causal)?;
    }
    Ok(h)
}
