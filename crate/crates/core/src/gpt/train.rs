use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FlatSequence, Gpt, Slot};
use crate::autodiff::{Element, Tape, Targets};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GptStepStats {
    pub step: usize,
    pub loss: f64,
    /// Next-token argmax accuracy over the batch, in percent.
    pub accuracy: f64,
}

/// Teacher-forced training over a fixed set of token sequences.
pub struct GptTrainer<T> {
    pub gpt: Gpt<T>,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    data: Vec<FlatSequence>,
    order: Vec<usize>,
    cursor: usize,
    pub step: usize,
}

impl<T: Element> GptTrainer<T> {
    pub fn new(gpt: Gpt<T>, data: Vec<FlatSequence>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let adam = AdamState::new(
            gpt.params.tensors(),
            AdamConfig {
                lr: gpt.config.lr,
                ..AdamConfig::default()
            },
        );
        let rng = ChaCha8Rng::seed_from_u64(gpt.config.seed.wrapping_add(0x6e7));
        Ok(GptTrainer {
            gpt,
            adam,
            rng,
            data,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    /// Swap the training set, keeping weights and optimizer moments
    /// (used to fine-tune after pretraining).
    pub fn set_data(&mut self, data: Vec<FlatSequence>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        self.data = data;
        self.order.clear();
        self.cursor = 0;
        Ok(())
    }

    pub fn data(&self) -> &[FlatSequence] {
        &self.data
    }

    pub fn into_gpt(self) -> Gpt<T> {
        self.gpt
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let size = self.gpt.config.batch_size.min(self.data.len());
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

    pub fn train_step(&mut self) -> Result<GptStepStats> {
        let picks = self.next_batch();
        let inputs: Vec<&[Slot]> = picks
            .iter()
            .map(|&i| &self.data[i].slots[..self.data[i].len() - 1])
            .collect();
        let targets: Vec<usize> = picks
            .iter()
            .flat_map(|&i| self.data[i].targets.iter().copied())
            .collect();
        let mut tape = Tape::new();
        let p = self.gpt.params.bind(&mut tape);
        let logits = self.gpt.logits_var(&mut tape, &p, &inputs)?;
        let loss = tape.softmax_cross_entropy(logits, Targets::Classes(targets.clone()))?;
        let width = tape.shape(logits)[1];
        let hits = tape
            .value(logits)
            .data()
            .chunks(width)
            .zip(&targets)
            .filter(|(row, &t)| argmax(row) == t)
            .count();
        let loss_value = tape.value(loss).item().as_f64();
        let mut g = tape.backward(loss)?;
        let grads = self.gpt.params.collect_grads(&p, &mut g);
        self.adam.step(self.gpt.params.tensors_mut(), &grads)?;
        self.step += 1;
        Ok(GptStepStats {
            step: self.step,
            loss: loss_value,
            accuracy: 100.0 * hits as f64 / targets.len() as f64,
        })
    }

    /// Mean cross-entropy over the whole training set.
    pub fn evaluate(&self) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in self.data.chunks(self.gpt.config.batch_size.max(1)) {
            let n: usize = chunk.iter().map(|s| s.targets.len()).sum();
            total += self.gpt.loss(chunk)? * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
