use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax_bins, matching_faces, rq_quantize, Batch, Codec, Prepared, Stochastic};
use crate::autodiff::{Element, Tape, Tensor};
use crate::error::{Error, Result};
use crate::features::feature_width;
use crate::nn::{AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub commitment: f64,
    /// Batch triangle accuracy in percent.
    pub accuracy: f64,
    pub reseeded: usize,
}

/// Owns a codec, its optimizer state and the training meshes.
pub struct CodecTrainer<T> {
    pub codec: Codec<T>,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    data: Vec<Prepared>,
    order: Vec<usize>,
    cursor: usize,
    pub step: usize,
    seeded: bool,
}

impl<T: Element> CodecTrainer<T> {
    pub fn new(codec: Codec<T>, data: Vec<Prepared>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let adam = AdamState::new(
            codec.params.tensors(),
            AdamConfig {
                lr: codec.config.lr,
                ..AdamConfig::default()
            },
        );
        let rng = ChaCha8Rng::seed_from_u64(codec.config.seed.wrapping_add(0x5eed));
        Ok(CodecTrainer {
            codec,
            adam,
            rng,
            data,
            order: Vec::new(),
            cursor: 0,
            step: 0,
            seeded: false,
        })
    }

    pub fn data(&self) -> &[Prepared] {
        &self.data
    }

    pub fn into_codec(self) -> Codec<T> {
        self.codec
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let size = self.codec.config.batch_size.min(self.data.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn stochastic_now(&self) -> bool {
        let c = &self.codec.config;
        c.stochastic && (self.step as f64) < (1.0 - c.anneal_fraction) * c.steps as f64
    }

    /// One optimizer update over `accumulate` micro-batches.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let config = self.codec.config.clone();
        let levels = config.levels();
        let stochastic = self.stochastic_now();
        let mut grads: Option<Vec<Tensor<T>>> = None;
        let mut stats = StepStats {
            step: self.step + 1,
            loss: 0.0,
            recon: 0.0,
            commitment: 0.0,
            accuracy: 0.0,
            reseeded: 0,
        };
        let (mut hits, mut faces) = (0usize, 0usize);
        for _ in 0..config.accumulate {
            let picks = self.next_batch();
            let items: Vec<&Prepared> = picks.iter().map(|&i| &self.data[i]).collect();
            let batch = Batch::<T>::new(&items, feature_width(config.frequencies))?;
            let mut tape = Tape::new();
            let p = self.codec.params.bind(&mut tape);
            let z = self.codec.encode_var(&mut tape, &p, &batch)?;
            let q = self.codec.quantizer_input(&mut tape, z, &batch)?;
            let q_values = tape.value(q).data().to_vec();
            if !self.seeded {
                self.codec.codebook.seed_from(&q_values, &mut self.rng);
                self.seeded = true;
            }
            let sampler = stochastic.then_some(Stochastic {
                rng: &mut self.rng,
                temperature: config.temperature,
                levels: if config.stochastic_all_depths { levels } else { 1 },
            });
            let rq = rq_quantize(&self.codec.codebook, &q_values, levels, sampler)?;
            let fwd = self.codec.forward(&mut tape, &p, &batch, q, &rq, items.len())?;

            let mut g = tape.backward(fwd.loss)?;
            let micro = self.codec.params.collect_grads(&p, &mut g);
            match grads.as_mut() {
                None => grads = Some(micro),
                Some(acc) => {
                    for (a, m) in acc.iter_mut().zip(&micro) {
                        for (x, &y) in a.data_mut().iter_mut().zip(m.data()) {
                            *x += y;
                        }
                    }
                }
            }

            // EMA over the residual entering every level
            let dim = self.codec.codebook.dim;
            let rows = q_values.len() / dim;
            let mut feats = Vec::with_capacity(levels * q_values.len());
            let mut codes = Vec::with_capacity(levels * rows);
            for (level, residual) in rq.residuals.iter().enumerate() {
                feats.extend_from_slice(residual);
                codes.extend((0..rows).map(|r| rq.codes[r * levels + level]));
            }
            stats.reseeded += self.codec.codebook.ema_update(
                &feats,
                &codes,
                &q_values,
                &config.ema,
                &mut self.rng,
            );

            stats.loss += tape.value(fwd.loss).item().as_f64();
            stats.recon += tape.value(fwd.recon).item().as_f64();
            stats.commitment += tape.value(fwd.commitment).item().as_f64();
            let bins = argmax_bins(tape.value(fwd.logits).data());
            hits += matching_faces(&bins, &batch.targets);
            faces += batch.faces();
        }
        let mut grads = grads.expect("accumulate >= 1");
        let a = config.accumulate as f64;
        if config.accumulate > 1 {
            let inv = T::lit(1.0 / a);
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
        }
        self.adam.step(self.codec.params.tensors_mut(), &grads)?;
        self.step += 1;
        stats.loss /= a;
        stats.recon /= a;
        stats.commitment /= a;
        stats.accuracy = 100.0 * hits as f64 / faces as f64;
        Ok(stats)
    }

    /// Greedy-quantization triangle accuracy over the whole training set.
    pub fn evaluate(&self) -> Result<f64> {
        let config = &self.codec.config;
        let (mut hits, mut faces) = (0usize, 0usize);
        for chunk in self.data.chunks(config.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().collect();
            let batch = Batch::<T>::new(&items, feature_width(config.frequencies))?;
            let mut tape = Tape::inference();
            let p = self.codec.params.bind_frozen(&mut tape);
            let z = self.codec.encode_var(&mut tape, &p, &batch)?;
            let q = self.codec.quantizer_input(&mut tape, z, &batch)?;
            let rq = rq_quantize::<T, ChaCha8Rng>(
                &self.codec.codebook,
                tape.value(q).data(),
                config.levels(),
                None,
            )?;
            let zq = tape.constant(Tensor::new(tape.shape(q), rq.quantized().to_vec())?);
            let dec_in = self.codec.to_faces(&mut tape, zq, &batch)?;
            let logits = self.codec.decode_var(&mut tape, &p, dec_in, &batch.segments)?;
            let bins = argmax_bins(tape.value(logits).data());
            hits += matching_faces(&bins, &batch.targets);
            faces += batch.faces();
        }
        Ok(100.0 * hits as f64 / faces as f64)
    }
}
