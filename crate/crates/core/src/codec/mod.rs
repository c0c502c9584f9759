//! Triangle vocabulary: graph encoder, residual quantizer, 1D ResNet decoder.

mod loss;
mod rq;
mod train;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use loss::{argmax_bins, matching_faces, smoothed_target, soft_targets, triangle_accuracy};
pub use rq::{
    argmin, commitment, commitment_loss, rq_quantize, squared_distance, Codebook, EmaConfig, RqOutput, Stochastic,
};
pub use train::{CodecTrainer, StepStats};

use crate::autodiff::{Element, SparseRows, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{build_face_graph, compute_face_features, feature_width};
use crate::mesh::{DiscreteMesh, BINS};
use crate::nn::{
    normal, Activation, Bound, ParamStore, ResNet1D, ResNet1DConfig,
    SageConvLayer,
};

/// How encoder features are split before quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantization {
    /// Three vertex slots, each quantized with `depth` levels.
    PerVertex,
    /// The whole face feature quantized with `3 * depth` levels.
    PerFace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub frequencies: usize,
    pub encoder_widths: Vec<usize>,
    pub quantization: Quantization,
    /// Levels per vertex slot.
    pub depth: usize,
    pub codebook_size: usize,
    pub ema: EmaConfig,
    pub stochastic: bool,
    pub stochastic_all_depths: bool,
    pub temperature: f64,
    /// Fraction of training at the end that quantizes greedily.
    pub anneal_fraction: f64,
    pub sigma: f64,
    pub commitment_weight: f64,
    pub decoder_widths: Vec<usize>,
    pub decoder_blocks: Vec<usize>,
    pub kernel: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub accumulate: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            frequencies: crate::features::DEFAULT_FREQUENCIES,
            encoder_widths: vec![128, 192, 256, 384, 576],
            quantization: Quantization::PerVertex,
            depth: 2,
            codebook_size: 512,
            ema: EmaConfig::default(),
            stochastic: true,
            stochastic_all_depths: true,
            temperature: 1.0,
            anneal_fraction: 0.1,
            sigma: 1.0,
            commitment_weight: 0.25,
            decoder_widths: vec![64, 96, 128, 192],
            decoder_blocks: vec![3, 4, 6, 3],
            kernel: 3,
            lr: 1e-3,
            batch_size: 8,
            accumulate: 1,
            steps: 20_000,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    pub fn tokens_per_face(&self) -> usize {
        3 * self.depth
    }

    /// Width of one codebook entry.
    pub fn code_dim(&self) -> usize {
        match self.quantization {
            Quantization::PerVertex => self.feature_dim() / 3,
            Quantization::PerFace => self.feature_dim(),
        }
    }

    fn levels(&self) -> usize {
        match self.quantization {
            Quantization::PerVertex => self.depth,
            Quantization::PerFace => 3 * self.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.encoder_widths.is_empty() || !self.feature_dim().is_multiple_of(3) {
            return bad("final encoder width must be a positive multiple of 3");
        }
        if self.depth == 0 || self.codebook_size == 0 {
            return bad("depth and codebook_size must be positive");
        }
        if self.decoder_widths.len() != self.decoder_blocks.len() || self.decoder_widths.is_empty()
        {
            return bad("decoder_widths and decoder_blocks must have equal non-zero length");
        }
        if self.batch_size == 0 || self.accumulate == 0 {
            return bad("batch_size and accumulate must be positive");
        }
        if self.sigma <= 0.0 || self.temperature <= 0.0 {
            return bad("sigma and temperature must be positive");
        }
        Ok(())
    }
}

/// Per-face token ids, `tokens_per_face` per face in canonical face order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStack {
    pub tokens_per_face: usize,
    pub ids: Vec<usize>,
}

impl TokenStack {
    pub fn faces(&self) -> usize {
        self.ids.len() / self.tokens_per_face.max(1)
    }

    pub fn face(&self, i: usize) -> &[usize] {
        &self.ids[i * self.tokens_per_face..(i + 1) * self.tokens_per_face]
    }
}

/// Encoder features of one mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    /// `[N, n_z]` raw face features.
    pub z: Tensor<T>,
    /// `[N, 3, n_z / 3]` slot features after shared-vertex averaging.
    pub per_vertex: Tensor<T>,
}

/// A canonical mesh with everything the codec needs precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub mesh: DiscreteMesh,
    pub features: Vec<f64>,
    pub neighbors: Vec<Vec<usize>>,
    /// Nine target bins per face.
    pub targets: Vec<u8>,
}

impl Prepared {
    pub fn new(mesh: &DiscreteMesh, frequencies: usize) -> Result<Self> {
        let mesh = mesh.canonicalize();
        if mesh.faces.is_empty() {
            return Err(Error::Empty("mesh has no faces"));
        }
        let features = compute_face_features(&mesh, frequencies).data;
        let neighbors = build_face_graph(&mesh).neighbors();
        let targets = (0..mesh.faces.len()).flat_map(|f| mesh.face_bins(f)).collect();
        Ok(Prepared {
            mesh,
            features,
            neighbors,
            targets,
        })
    }

    pub fn faces(&self) -> usize {
        self.mesh.faces.len()
    }
}

/// Several prepared meshes stacked along the face axis.
pub(crate) struct Batch<T> {
    pub features: Tensor<T>,
    pub aggregate: Rc<SparseRows<T>>,
    /// `[U, 3N]` mean over the slots of each mesh vertex.
    pub vertex_mean: Rc<SparseRows<T>>,
    /// `[3N, U]` copies each vertex row back to its slots.
    pub vertex_gather: Rc<SparseRows<T>>,
    pub slot_vertex: Vec<usize>,
    pub segments: Vec<usize>,
    pub targets: Vec<u8>,
}

impl<T: Element> Batch<T> {
    pub fn new(items: &[&Prepared], feature_width: usize) -> Result<Self> {
        let n: usize = items.iter().map(|p| p.faces()).sum();
        let mut features = Vec::with_capacity(n * feature_width);
        let mut neighbors = Vec::with_capacity(n);
        let mut slots_of_vertex: Vec<Vec<usize>> = Vec::new();
        let mut slot_vertex = Vec::with_capacity(3 * n);
        let mut segments = Vec::with_capacity(items.len());
        let mut targets = Vec::with_capacity(9 * n);
        let mut face_off = 0;
        for p in items {
            if p.features.len() != p.faces() * feature_width {
                return Err(Error::shape("codec batch", "feature width mismatch"));
            }
            features.extend(p.features.iter().map(|&x| T::lit(x)));
            for nb in &p.neighbors {
                neighbors.push(nb.iter().map(|&j| j + face_off).collect());
            }
            let vert_off = slots_of_vertex.len();
            slots_of_vertex.resize(vert_off + p.mesh.vertices.len(), Vec::new());
            for (fi, f) in p.mesh.faces.iter().enumerate() {
                for (j, &v) in f.iter().enumerate() {
                    let slot = 3 * (face_off + fi) + j;
                    slots_of_vertex[vert_off + v].push(slot);
                    slot_vertex.push(vert_off + v);
                }
            }
            targets.extend_from_slice(&p.targets);
            segments.push(p.faces());
            face_off += p.faces();
        }
        // Vertices referenced by no face would give empty rows; compact them out.
        let mut remap = vec![usize::MAX; slots_of_vertex.len()];
        let mut used = Vec::new();
        for (v, slots) in slots_of_vertex.into_iter().enumerate() {
            if !slots.is_empty() {
                remap[v] = used.len();
                used.push(slots);
            }
        }
        let slot_vertex: Vec<usize> = slot_vertex.into_iter().map(|v| remap[v]).collect();
        let gather: Vec<Vec<(usize, T)>> = slot_vertex.iter().map(|&u| vec![(u, T::one())]).collect();
        Ok(Batch {
            features: Tensor::new(&[n, feature_width], features)?,
            aggregate: Rc::new(SparseRows::mean_of(n, &neighbors)),
            vertex_mean: Rc::new(SparseRows::mean_of(3 * n, &used)),
            vertex_gather: Rc::new(SparseRows::from_rows(used.len(), &gather)),
            slot_vertex,
            segments,
            targets,
        })
    }

    pub fn faces(&self) -> usize {
        self.segments.iter().sum()
    }
}

/// Differentiable quantities of one codec forward pass.
pub(crate) struct Forward {
    pub loss: Var,
    pub recon: Var,
    pub commitment: Var,
    pub logits: Var,
}

pub struct Codec<T> {
    pub config: CodecConfig,
    pub params: ParamStore<T>,
    pub encoder: Vec<SageConvLayer>,
    pub decoder: ResNet1D,
    pub codebook: Codebook<T>,
}

impl<T: Element> Codec<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut encoder = Vec::new();
        let mut width = feature_width(config.frequencies);
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            encoder.push(SageConvLayer::new(&mut params, &format!("enc.{i}"), width, w, &mut rng));
            width = w;
        }
        let decoder = ResNet1D::new(
            &mut params,
            "dec",
            ResNet1DConfig {
                input_width: width,
                stage_widths: config.decoder_widths.clone(),
                blocks_per_stage: config.decoder_blocks.clone(),
                kernel: config.kernel,
                output_width: Some(9 * BINS),
                activation: Activation::Relu,
            },
            &mut rng,
        )?;
        let dim = config.code_dim();
        let embed = normal::<T>(&[config.codebook_size, dim], 1.0 / (dim as f64).sqrt(), &mut rng);
        let codebook = Codebook::from_rows(dim, embed.into_data())?;
        Ok(Codec {
            config,
            params,
            encoder,
            decoder,
            codebook,
        })
    }

    /// `Z = E(M)`: stacked SAGE layers with ReLU between them.
    pub(crate) fn encode_var(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<Var> {
        let mut h = tape.constant(batch.features.clone());
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(tape, p, h, &batch.aggregate)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Rows handed to the quantizer: averaged per mesh vertex, or whole faces.
    pub(crate) fn quantizer_input(&self, tape: &mut Tape<T>, z: Var, batch: &Batch<T>) -> Result<Var> {
        match self.config.quantization {
            Quantization::PerVertex => {
                let n = batch.faces();
                let slots = tape.reshape(z, &[3 * n, self.config.code_dim()])?;
                tape.sparse_rows(Rc::clone(&batch.vertex_mean), slots)
            }
            Quantization::PerFace => Ok(z),
        }
    }

    /// Quantizer rows back to `[N, n_z]` decoder input.
    pub(crate) fn to_faces(&self, tape: &mut Tape<T>, rows: Var, batch: &Batch<T>) -> Result<Var> {
        match self.config.quantization {
            Quantization::PerVertex => {
                let slots = tape.sparse_rows(Rc::clone(&batch.vertex_gather), rows)?;
                tape.reshape(slots, &[batch.faces(), self.config.feature_dim()])
            }
            Quantization::PerFace => Ok(rows),
        }
    }

    /// Full training/evaluation graph. `rq` must quantize the values of the
    /// quantizer input of this batch.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        batch: &Batch<T>,
        zq_in: Var,
        rq: &RqOutput<T>,
        meshes: usize,
    ) -> Result<Forward> {
        let rows = tape.shape(zq_in).to_vec();
        let current = tape.value(zq_in).data().to_vec();
        // straight-through: forward value is the quantization, gradient is identity
        let delta: Vec<T> = rq.quantized().iter().zip(&current).map(|(&q, &z)| q - z).collect();
        let delta = tape.constant(Tensor::new(&rows, delta)?);
        let st = tape.add(zq_in, delta)?;
        let dec_in = self.to_faces(tape, st, batch)?;

        let z_faces = self.to_faces(tape, zq_in, batch)?;
        let targets = rq
            .partials
            .iter()
            .map(|partial| {
                let t = tape.constant(Tensor::new(&rows, partial.clone())?);
                self.to_faces(tape, t, batch)
            })
            .collect::<Result<Vec<_>>>()?;
        let commit_sum = commitment_loss(tape, z_faces, &targets)?;
        let commit = tape.scale(commit_sum, T::lit(1.0 / meshes as f64))?;

        let logits = self.decode_var(tape, p, dec_in, &batch.segments)?;
        let targets = soft_targets::<T>(&batch.targets, self.config.sigma);
        let recon = tape.softmax_cross_entropy(logits, crate::autodiff::Targets::Soft(targets))?;
        // the objective uses the per-element mean so that the weight is
        // independent of mesh size and feature width
        let elements = tape.value(z_faces).numel() as f64;
        let weighted = tape.scale(commit_sum, T::lit(self.config.commitment_weight / elements))?;
        let loss = tape.add(recon, weighted)?;
        Ok(Forward {
            loss,
            recon,
            commitment: commit,
            logits,
        })
    }

    /// `[N, n_z]` decoder input to `[9N, BINS]` logits.
    pub(crate) fn decode_var(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        zq: Var,
        segments: &[usize],
    ) -> Result<Var> {
        let n: usize = tape.shape(zq)[0];
        let out = self.decoder.forward(tape, p, zq, segments)?;
        tape.reshape(out, &[9 * n, BINS])
    }

    fn inference_batch(&self, mesh: &DiscreteMesh) -> Result<(Prepared, Batch<T>)> {
        let prepared = Prepared::new(mesh, self.config.frequencies)?;
        let batch = Batch::new(&[&prepared], feature_width(self.config.frequencies))?;
        Ok((prepared, batch))
    }

    pub fn encode_faces(&self, mesh: &DiscreteMesh) -> Result<EncoderOutput<T>> {
        let (_, batch) = self.inference_batch(mesh)?;
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let z = self.encode_var(&mut tape, &p, &batch)?;
        let n = batch.faces();
        let dv = self.config.feature_dim() / 3;
        let slots = tape.reshape(z, &[3 * n, dv])?;
        let verts = tape.sparse_rows(Rc::clone(&batch.vertex_mean), slots)?;
        let back = tape.sparse_rows(Rc::clone(&batch.vertex_gather), verts)?;
        let per_vertex = tape.value(back).clone().reshape(&[n, 3, dv])?;
        Ok(EncoderOutput {
            z: tape.value(z).clone(),
            per_vertex,
        })
    }

    /// Deterministic tokens of the canonical form of `mesh`.
    pub fn tokenize(&self, mesh: &DiscreteMesh) -> Result<(DiscreteMesh, TokenStack)> {
        let (prepared, batch) = self.inference_batch(mesh)?;
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let z = self.encode_var(&mut tape, &p, &batch)?;
        let q = self.quantizer_input(&mut tape, z, &batch)?;
        let rq = rq_quantize::<T, ChaCha8Rng>(
            &self.codebook,
            tape.value(q).data(),
            self.config.levels(),
            None,
        )?;
        let tokens = self.tokens_from_rows(&rq, &batch);
        Ok((prepared.mesh, tokens))
    }

    pub(crate) fn tokens_from_rows(&self, rq: &RqOutput<T>, batch: &Batch<T>) -> TokenStack {
        let levels = rq.depth;
        let ids = match self.config.quantization {
            Quantization::PerVertex => batch
                .slot_vertex
                .iter()
                .flat_map(|&u| rq.codes[u * levels..(u + 1) * levels].iter().copied())
                .collect(),
            Quantization::PerFace => rq.codes.clone(),
        };
        TokenStack {
            tokens_per_face: self.config.tokens_per_face(),
            ids,
        }
    }

    /// `[N, n_z]` decoder input: per slot, the sum of its code embeddings.
    pub fn embed_tokens(&self, tokens: &TokenStack) -> Result<Tensor<T>> {
        let tpf = self.config.tokens_per_face();
        if tokens.tokens_per_face != tpf || !tokens.ids.len().is_multiple_of(tpf) {
            return Err(Error::Invalid(format!(
                "expected {tpf} tokens per face, got {}",
                tokens.tokens_per_face
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= self.codebook.len()) {
            return Err(Error::Invalid(format!(
                "token {bad} out of range for codebook of {}",
                self.codebook.len()
            )));
        }
        let n = tokens.faces();
        let width = self.config.feature_dim();
        let dim = self.codebook.dim;
        let per_group = self.config.levels();
        let mut out = vec![T::zero(); n * width];
        for (g, group) in tokens.ids.chunks_exact(per_group).enumerate() {
            let dst = &mut out[g * dim..(g + 1) * dim];
            for &t in group {
                for (o, &e) in dst.iter_mut().zip(self.codebook.entry(t)) {
                    *o += e;
                }
            }
        }
        Tensor::new(&[n, width], out)
    }

    /// `[N, 9, BINS]` logits for a token stack.
    pub fn decode_tokens(&self, tokens: &TokenStack) -> Result<Tensor<T>> {
        let zq = self.embed_tokens(tokens)?;
        let n = zq.shape()[0];
        if n == 0 {
            return Err(Error::Empty("token stack"));
        }
        let mut tape = Tape::inference();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(zq);
        let logits = self.decode_var(&mut tape, &p, x, &[])?;
        tape.value(logits).clone().reshape(&[n, 9, BINS])
    }

    /// Per-coordinate argmax of the decoded logits, as a welded mesh.
    pub fn reconstruct(&self, tokens: &TokenStack) -> Result<DiscreteMesh> {
        let logits = self.decode_tokens(tokens)?;
        Ok(bins_to_mesh(&argmax_bins(logits.data())))
    }

    /// Encode, quantize, decode, and score against the canonical input.
    pub fn roundtrip(&self, mesh: &DiscreteMesh) -> Result<(DiscreteMesh, f64)> {
        let (canonical, tokens) = self.tokenize(mesh)?;
        let logits = self.decode_tokens(&tokens)?;
        let bins = argmax_bins(logits.data());
        let target: Vec<u8> = (0..canonical.faces.len())
            .flat_map(|f| canonical.face_bins(f))
            .collect();
        let acc = 100.0 * matching_faces(&bins, &target) as f64 / canonical.faces.len() as f64;
        Ok((bins_to_mesh(&bins), acc))
    }

    /// Parameter and codebook tensors under stable names.
    pub fn tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let (k, d) = (self.codebook.len(), self.codebook.dim);
        let cb = &self.codebook;
        out.push(("codebook.embed".into(), Tensor::new(&[k, d], cb.embed.clone()).expect("k*d")));
        out.push(("codebook.size".into(), Tensor::new(&[k], cb.cluster_size.clone()).expect("k")));
        out.push(("codebook.sum".into(), Tensor::new(&[k, d], cb.embed_sum.clone()).expect("k*d")));
        out
    }

    /// Rebuild from `config` and overwrite every tensor from `named`.
    pub fn from_tensors(config: CodecConfig, named: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut codec = Codec::new(config)?;
        let map: BTreeMap<&str, &Tensor<T>> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok((*t).clone())
        };
        let specs: Vec<(String, Vec<usize>)> = codec
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (slot, (name, shape)) in codec.params.tensors_mut().iter_mut().zip(&specs) {
            *slot = fetch(name, shape)?;
        }
        let (k, d) = (codec.codebook.len(), codec.codebook.dim);
        codec.codebook.embed = fetch("codebook.embed", &[k, d])?.into_data();
        codec.codebook.cluster_size = fetch("codebook.size", &[k])?.into_data();
        codec.codebook.embed_sum = fetch("codebook.sum", &[k, d])?.into_data();
        Ok(codec)
    }
}

/// Nine bins per face to a welded discrete mesh.
pub fn bins_to_mesh(bins: &[u8]) -> DiscreteMesh {
    let faces: Vec<[u8; 9]> = bins
        .chunks_exact(9)
        .map(|c| c.try_into().expect("chunk of 9"))
        .collect();
    DiscreteMesh::from_face_bins(&faces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CodecConfig {
        CodecConfig {
            encoder_widths: vec![12, 24],
            decoder_widths: vec![8],
            decoder_blocks: vec![1],
            codebook_size: 16,
            ..CodecConfig::default()
        }
    }

    fn two_faces() -> DiscreteMesh {
        DiscreteMesh {
            vertices: vec![[0, 0, 0], [10, 0, 0], [0, 10, 0], [10, 10, 5]],
            faces: vec![[0, 1, 2], [1, 3, 2]],
        }
    }

    #[test]
    fn shapes_of_single_face() {
        let codec = Codec::<f64>::new(CodecConfig::default()).unwrap();
        let m = DiscreteMesh {
            vertices: vec![[0, 0, 0], [10, 0, 0], [0, 10, 0]],
            faces: vec![[0, 1, 2]],
        };
        let out = codec.encode_faces(&m).unwrap();
        assert_eq!(out.z.shape(), &[1, 576]);
        assert_eq!(out.per_vertex.shape(), &[1, 3, 192]);
        let (_, tokens) = codec.tokenize(&m).unwrap();
        assert_eq!(tokens.ids.len(), 6);
        assert_eq!(codec.decode_tokens(&tokens).unwrap().shape(), &[1, 9, BINS]);
    }

    #[test]
    fn shared_vertex_slots_are_equal() {
        let codec = Codec::<f64>::new(small_config()).unwrap();
        let m = two_faces().canonicalize();
        let out = codec.encode_faces(&m).unwrap();
        let dv = 8;
        let slot = |f: usize, j: usize| &out.per_vertex.data()[(f * 3 + j) * dv..(f * 3 + j + 1) * dv];
        for (fa, a) in m.faces.iter().enumerate() {
            for (fb, b) in m.faces.iter().enumerate() {
                for ja in 0..3 {
                    for jb in 0..3 {
                        if a[ja] == b[jb] {
                            assert_eq!(slot(fa, ja), slot(fb, jb));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_encoder_gives_bias_rows() {
        let mut codec = Codec::<f64>::new(small_config()).unwrap();
        let last = codec.encoder[1];
        for l in codec.encoder.clone() {
            for id in [l.w_self, l.w_neigh] {
                let s = codec.params.get(id).shape().to_vec();
                *codec.params.get_mut(id) = Tensor::zeros(&s);
            }
        }
        let bias: Vec<f64> = (0..24).map(|i| i as f64).collect();
        *codec.params.get_mut(last.bias) = Tensor::from_f64(&[24], &bias).unwrap();
        let out = codec.encode_faces(&two_faces()).unwrap();
        assert_eq!(&out.z.data()[..24], &bias[..]);
        assert_eq!(&out.z.data()[24..], &bias[..]);
    }

    #[test]
    fn token_range_is_checked() {
        let codec = Codec::<f64>::new(small_config()).unwrap();
        let bad = TokenStack {
            tokens_per_face: 6,
            ids: vec![0, 1, 2, 3, 4, 99],
        };
        assert!(codec.decode_tokens(&bad).is_err());
    }

    #[test]
    fn per_face_mode_shapes() {
        let codec = Codec::<f64>::new(CodecConfig {
            quantization: Quantization::PerFace,
            ..small_config()
        })
        .unwrap();
        assert_eq!(codec.codebook.dim, 24);
        let (_, tokens) = codec.tokenize(&two_faces()).unwrap();
        assert_eq!(tokens.ids.len(), 12);
        assert_eq!(codec.decode_tokens(&tokens).unwrap().shape(), &[2, 9, BINS]);
    }

    #[test]
    fn tensors_round_trip() {
        let codec = Codec::<f32>::new(small_config()).unwrap();
        let named = codec.tensors();
        let again = Codec::from_tensors(small_config(), &named).unwrap();
        assert_eq!(again.tensors(), named);
    }
}
