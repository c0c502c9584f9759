//! Decoder-only transformer over flattened face tokens.

mod sample;
mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use sample::{
    complete, decode_generation, generate, Generation, Sampler, SamplerMode, TokenDecoder, MERGE_EPSILON,
};
pub use train::{GptStepStats, GptTrainer};

use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{attention_forward, normal, AttentionBlock, Bound, KvCache, Linear, ParamId, ParamStore};

/// What a token's input row is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Frozen codebook vector through a learned projection.
    Codebook,
    /// Learned table indexed by token id.
    Learned,
    /// Nine discretized coordinates per face as tokens, learned table.
    RawCoordinates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_mult: usize,
    pub context: usize,
    pub input: InputMode,
    pub init_std: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Steps on the mixed pool before fine-tuning; 0 skips pretraining.
    pub pretrain_steps: usize,
    pub seed: u64,
}

impl Default for GptConfig {
    fn default() -> Self {
        GptConfig {
            layers: 6,
            heads: 8,
            width: 256,
            ff_mult: 4,
            context: 512,
            input: InputMode::Codebook,
            init_std: 0.02,
            lr: 1e-3,
            batch_size: 8,
            steps: 5000,
            pretrain_steps: 0,
            seed: 0,
        }
    }
}

impl GptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0 || self.ff_mult == 0 || self.batch_size == 0 || self.context < 3 {
            return Err(Error::Config("layers, ff_mult, batch_size must be positive and context >= 3".into()));
        }
        Ok(())
    }

    /// Largest face count whose flat sequence fits the context.
    pub fn max_faces(&self, tokens_per_face: usize) -> usize {
        self.context.saturating_sub(2) / tokens_per_face
    }
}

/// Vocabulary the transformer predicts over (plus one stop id).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab<T> {
    pub size: usize,
    pub tokens_per_face: usize,
    /// `[size, dim]` frozen input vectors for [`InputMode::Codebook`].
    pub embeddings: Option<Tensor<T>>,
}

impl<T> Vocab<T> {
    pub fn stop(&self) -> usize {
        self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Start,
    Token { id: usize, face: usize, intra: usize },
    Stop,
}

/// `start, tokens..., stop` with per-token face and intra-face ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatSequence {
    pub slots: Vec<Slot>,
    /// Next-token targets for every slot but the last.
    pub targets: Vec<usize>,
}

impl FlatSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Token { id, .. } => Some(*id),
                _ => None,
            })
            .collect()
    }
}

/// Flatten `tokens` (a whole number of faces) into a training sequence.
pub fn build_token_sequence(
    tokens: &[usize],
    tokens_per_face: usize,
    vocab_size: usize,
    context: usize,
) -> Result<FlatSequence> {
    if !tokens.len().is_multiple_of(tokens_per_face) {
        return Err(Error::Invalid(format!(
            "{} tokens is not a whole number of {tokens_per_face}-token faces",
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Invalid(format!("token {bad} outside vocabulary of {vocab_size}")));
    }
    let len = tokens.len() + 2;
    if len > context {
        return Err(Error::Context { len, context });
    }
    let mut slots = Vec::with_capacity(len);
    slots.push(Slot::Start);
    for (i, &id) in tokens.iter().enumerate() {
        slots.push(Slot::Token {
            id,
            face: i / tokens_per_face,
            intra: i % tokens_per_face,
        });
    }
    slots.push(Slot::Stop);
    let mut targets = tokens.to_vec();
    targets.push(vocab_size);
    Ok(FlatSequence { slots, targets })
}

pub struct Gpt<T> {
    pub config: GptConfig,
    pub vocab: Vocab<T>,
    pub params: ParamStore<T>,
    input_proj: Option<ParamId>,
    token_table: Option<ParamId>,
    face_table: ParamId,
    intra_table: ParamId,
    blocks: Vec<AttentionBlock>,
    ln_f: (ParamId, ParamId),
    head: Linear,
}

impl<T: Element> Gpt<T> {
    pub fn new(config: GptConfig, vocab: Vocab<T>) -> Result<Self> {
        config.validate()?;
        let p = vocab.tokens_per_face;
        if p == 0 || vocab.size == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        if config.max_faces(p) == 0 {
            return Err(Error::Config(format!(
                "context {} cannot hold a single face",
                config.context
            )));
        }
        if (config.input == InputMode::Codebook) != vocab.embeddings.is_some() {
            return Err(Error::Config(
                "codebook input mode requires vocabulary embeddings (and only it)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = config.init_std;
        let w = config.width;
        let mut params = ParamStore::new();
        let (input_proj, token_table) = match &vocab.embeddings {
            Some(e) => {
                let dim = e.shape()[1];
                (Some(params.add("in.proj", normal(&[dim, w], std, &mut rng))), None)
            }
            None => (
                None,
                Some(params.add("in.tokens", normal(&[vocab.size + 2, w], std, &mut rng))),
            ),
        };
        // two extra rows in each table hold the start and stop embeddings
        let face_table = params.add(
            "in.face",
            normal(&[config.max_faces(p) + 2, w], std, &mut rng),
        );
        let intra_table = params.add("in.intra", normal(&[p + 2, w], std, &mut rng));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            blocks.push(AttentionBlock::new(
                &mut params,
                &format!("blk.{l}"),
                w,
                config.heads,
                config.ff_mult * w,
                std,
                &mut rng,
            )?);
        }
        let ln_f = (
            params.add("ln_f.g", Tensor::full(&[w], T::one())),
            params.add("ln_f.b", Tensor::zeros(&[w])),
        );
        let head = Linear::new(&mut params, "head", w, vocab.size + 1, std, &mut rng);
        Ok(Gpt {
            config,
            vocab,
            params,
            input_proj,
            token_table,
            face_table,
            intra_table,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn tokens_per_face(&self) -> usize {
        self.vocab.tokens_per_face
    }

    pub fn max_faces(&self) -> usize {
        self.config.max_faces(self.vocab.tokens_per_face)
    }

    /// Flatten one mesh's tokens against this model's vocabulary and context.
    pub fn sequence(&self, tokens: &[usize]) -> Result<FlatSequence> {
        build_token_sequence(tokens, self.tokens_per_face(), self.vocab.size, self.config.context)
    }

    /// `[rows, width]` input embeddings of `slots`.
    pub(crate) fn embed(&self, tape: &mut Tape<T>, p: &Bound, slots: &[Slot]) -> Result<Var> {
        let (faces, tpf) = (self.max_faces(), self.tokens_per_face());
        let mut face_ids = Vec::with_capacity(slots.len());
        let mut intra_ids = Vec::with_capacity(slots.len());
        let mut token_ids = Vec::with_capacity(slots.len());
        for s in slots {
            let (f, i, t) = match *s {
                Slot::Start => (faces, tpf, self.vocab.size),
                Slot::Stop => (faces + 1, tpf + 1, self.vocab.size + 1),
                Slot::Token { id, face, intra } => {
                    if face >= faces {
                        return Err(Error::Context {
                            len: (face + 1) * tpf + 2,
                            context: self.config.context,
                        });
                    }
                    (face, intra, id)
                }
            };
            face_ids.push(f);
            intra_ids.push(i);
            token_ids.push(t);
        }
        let content = match (&self.vocab.embeddings, self.input_proj, self.token_table) {
            (Some(e), Some(proj), _) => {
                let dim = e.shape()[1];
                let mut rows = vec![T::zero(); slots.len() * dim];
                for (r, &t) in token_ids.iter().enumerate() {
                    if t < self.vocab.size {
                        rows[r * dim..(r + 1) * dim].copy_from_slice(e.row(t));
                    }
                }
                let rows = tape.constant(Tensor::new(&[slots.len(), dim], rows)?);
                tape.matmul(rows, p.var(proj))?
            }
            (_, _, Some(table)) => tape.gather(p.var(table), &token_ids)?,
            _ => unreachable!("constructor sets one input path"),
        };
        let fpos = tape.gather(p.var(self.face_table), &face_ids)?;
        let ipos = tape.gather(p.var(self.intra_table), &intra_ids)?;
        let x = tape.add(content, fpos)?;
        tape.add(x, ipos)
    }

    fn output(&self, tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<Var> {
        let h = tape.layer_norm(h, p.var(self.ln_f.0), p.var(self.ln_f.1), T::lit(1e-5))?;
        self.head.forward(tape, p, h)
    }

    /// Logits `[rows, V + 1]` for several slot sequences, each processed
    /// causally and independently.
    pub(crate) fn logits_var(&self, tape: &mut Tape<T>, p: &Bound, seqs: &[&[Slot]]) -> Result<Var> {
        let all: Vec<Slot> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let segments: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let x = self.embed(tape, p, &all)?;
        let h = attention_forward(tape, p, x, &self.blocks, &segments, true, self.config.context)?;
        self.output(tape, p, h)
    }

    /// Per-position logits `[len, V + 1]` of one slot sequence.
    pub fn forward(&self, slots: &[Slot]) -> Result<Tensor<T>> {
        if slots.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let logits = self.logits_var(&mut tape, &p, &[slots])?;
        Ok(tape.value(logits).clone())
    }

    /// Incremental decoding state.
    pub fn start_cache(&self) -> Vec<KvCache<T>> {
        vec![KvCache::default(); self.blocks.len()]
    }

    /// Feed `slots` after the positions already in `cache`; logits of the
    /// last fed position.
    pub fn step(&self, slots: &[Slot], cache: &mut [KvCache<T>]) -> Result<Vec<T>> {
        let fed = cache.first().map_or(0, |c| c.len);
        if fed + slots.len() > self.config.context {
            return Err(Error::Context {
                len: fed + slots.len(),
                context: self.config.context,
            });
        }
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let mut h = self.embed(&mut tape, &p, slots)?;
        for (block, c) in self.blocks.iter().zip(cache.iter_mut()) {
            h = block.forward_cached(&mut tape, &p, h, c)?;
        }
        let n = slots.len();
        let last = tape.slice(h, 0, n - 1, 1)?;
        let logits = self.output(&mut tape, &p, last)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Mean next-token cross-entropy over the given sequences.
    pub fn loss(&self, seqs: &[FlatSequence]) -> Result<f64> {
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let inputs: Vec<&[Slot]> = seqs.iter().map(|s| &s.slots[..s.len() - 1]).collect();
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s.targets.iter().copied()).collect();
        let logits = self.logits_var(&mut tape, &p, &inputs)?;
        let loss = tape.softmax_cross_entropy(logits, crate::autodiff::Targets::Classes(targets))?;
        Ok(tape.value(loss).item().as_f64())
    }

    pub fn tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        if let Some(e) = &self.vocab.embeddings {
            out.push(("vocab.embeddings".into(), e.clone()));
        }
        out
    }

    /// Rebuild from config and named tensors. `size` and `tokens_per_face`
    /// describe the vocabulary; embeddings are read from the tensors.
    pub fn from_tensors(
        config: GptConfig,
        size: usize,
        tokens_per_face: usize,
        named: &[(String, Tensor<T>)],
    ) -> Result<Self> {
        let map: BTreeMap<&str, &Tensor<T>> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let embeddings = map.get("vocab.embeddings").map(|t| (*t).clone());
        let mut gpt = Gpt::new(
            config,
            Vocab {
                size,
                tokens_per_face,
                embeddings,
            },
        )?;
        let specs: Vec<(String, Vec<usize>)> = gpt
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (slot, (name, shape)) in gpt.params.tensors_mut().iter_mut().zip(&specs) {
            let t = map
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != &shape[..] {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            *slot = (*t).clone();
        }
        Ok(gpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(input: InputMode) -> Gpt<f64> {
        let config = GptConfig {
            layers: 2,
            heads: 2,
            width: 8,
            context: 20,
            input,
            ..GptConfig::default()
        };
        let embeddings = (input == InputMode::Codebook).then(|| {
            let data: Vec<f64> = (0..10 * 3).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
            Tensor::new(&[10, 3], data).unwrap()
        });
        Gpt::new(
            config,
            Vocab {
                size: 10,
                tokens_per_face: 6,
                embeddings,
            },
        )
        .unwrap()
    }

    #[test]
    fn sequence_lengths() {
        let s = build_token_sequence(&[1, 2, 3, 4, 5, 6], 6, 10, 512).unwrap();
        assert_eq!(s.len(), 8);
        let s = build_token_sequence(&vec![0; 600], 6, 10, 4608).unwrap();
        assert_eq!(s.len(), 602);
        let faces: Vec<usize> = s
            .slots
            .iter()
            .filter_map(|x| match x {
                Slot::Token { face, .. } => Some(*face),
                _ => None,
            })
            .collect();
        assert!(faces.chunks(6).enumerate().all(|(i, c)| c.iter().all(|&f| f == i)));
        assert_eq!(GptConfig::default().max_faces(6), 85);
        assert!(matches!(
            build_token_sequence(&vec![0; 516], 6, 10, 512),
            Err(Error::Context { len: 518, .. })
        ));
    }

    #[test]
    fn start_only_gives_one_row() {
        let g = tiny(InputMode::Codebook);
        let l = g.forward(&[Slot::Start]).unwrap();
        assert_eq!(l.shape(), &[1, 11]);
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        for mode in [InputMode::Codebook, InputMode::Learned] {
            let g = tiny(mode);
            let seq = g.sequence(&[3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8]).unwrap();
            let full = g.forward(&seq.slots).unwrap();
            let mut cache = g.start_cache();
            let first = g.step(&seq.slots[..5], &mut cache).unwrap();
            let v = 11;
            for (a, b) in first.iter().zip(&full.data()[4 * v..5 * v]) {
                assert!((a - b).abs() < 1e-12);
            }
            for pos in 5..seq.len() {
                let row = g.step(&seq.slots[pos..pos + 1], &mut cache).unwrap();
                for (a, b) in row.iter().zip(&full.data()[pos * v..(pos + 1) * v]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn suffix_changes_leave_prefix_logits() {
        let g = tiny(InputMode::Learned);
        let a = g.sequence(&[3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8]).unwrap();
        let b = g.sequence(&[3, 1, 4, 1, 5, 9, 2, 0, 0, 0, 0, 0]).unwrap();
        let (la, lb) = (g.forward(&a.slots).unwrap(), g.forward(&b.slots).unwrap());
        // slots 0..=7 are identical (start + 7 tokens)
        assert_eq!(&la.data()[..8 * 11], &lb.data()[..8 * 11]);
        assert_ne!(&la.data()[8 * 11..9 * 11], &lb.data()[8 * 11..9 * 11]);
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let g = tiny(InputMode::Codebook);
        let seq = g.sequence(&[3, 1, 4, 1, 5, 9]).unwrap();
        let loss = g.loss(&[seq]).unwrap();
        assert!((loss - (11f64).ln()).abs() < 0.1, "{loss}");
    }
}
