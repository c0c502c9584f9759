use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Gpt, Slot};
use crate::autodiff::Element;
use crate::codec::{bins_to_mesh, Codec, TokenStack};
use crate::error::{Error, Result};
use crate::mesh::{DiscreteMesh, Mesh, BINS};
use crate::nn::KvCache;

/// Vertex-merge tolerance applied to decoded meshes: half a bin.
pub const MERGE_EPSILON: f64 = 1.0 / 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Greedy,
    Nucleus,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampler {
    pub mode: SamplerMode,
    /// Nucleus mass.
    pub p: f64,
    /// Top-k cut before the nucleus; 0 disables it.
    pub k: usize,
    pub beam_width: usize,
    /// Beam candidates are ranked with Gumbel-perturbed scores when set.
    pub stochastic_beam: bool,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler {
            mode: SamplerMode::Nucleus,
            p: 0.95,
            k: 0,
            beam_width: 4,
            stochastic_beam: true,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prefix followed by generated tokens, whole faces only.
    pub tokens: Vec<usize>,
    /// Log-probability of the generated part plus the stop token under the
    /// legality-masked model distribution at temperature 1.
    pub log_prob: f64,
    /// The context filled up while the model still preferred to continue.
    pub truncated: bool,
}

struct Legal {
    stop: bool,
    tokens: bool,
}

fn legality<T: Element>(gpt: &Gpt<T>, n: usize) -> Legal {
    let tpf = gpt.tokens_per_face();
    let ctx = gpt.config.context;
    let boundary = n.is_multiple_of(tpf);
    Legal {
        stop: boundary && n >= tpf,
        // a new face may only begin if all of it and the stop slot still fit
        tokens: if boundary { n + tpf + 2 <= ctx } else { true },
    }
}

/// Masked log-softmax at the given temperature; illegal entries are -inf.
fn log_probs<T: Element>(logits: &[T], legal: &Legal, stop: usize, temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-12);
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ok = if i == stop { legal.stop } else { legal.tokens };
            if ok {
                v.as_f64() / t
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in &mut out {
        *v -= lse;
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn nucleus(lp: &[f64], p: f64, k: usize, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
    order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    if k > 0 {
        order.truncate(k.max(1));
    }
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += lp[i].exp();
        if mass >= p {
            break;
        }
    }
    let mut u = rng.random::<f64>() * mass;
    for &i in &kept {
        u -= lp[i].exp();
        if u < 0.0 {
            return i;
        }
    }
    *kept.last().expect("at least one legal token")
}

fn slot_for(n: usize, id: usize, tpf: usize) -> Slot {
    Slot::Token {
        id,
        face: n / tpf,
        intra: n % tpf,
    }
}

fn prefill<T: Element>(gpt: &Gpt<T>, prefix: &[usize]) -> Result<(Vec<KvCache<T>>, Vec<T>)> {
    let tpf = gpt.tokens_per_face();
    if !prefix.len().is_multiple_of(tpf) {
        return Err(Error::Invalid("prefix must hold whole faces".into()));
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= gpt.vocab.size) {
        return Err(Error::Invalid(format!("prefix token {bad} outside vocabulary")));
    }
    if prefix.len() + 2 > gpt.config.context {
        return Err(Error::Context {
            len: prefix.len() + 2,
            context: gpt.config.context,
        });
    }
    let mut slots = vec![Slot::Start];
    slots.extend(prefix.iter().enumerate().map(|(n, &t)| slot_for(n, t, tpf)));
    let mut cache = gpt.start_cache();
    let logits = gpt.step(&slots, &mut cache)?;
    Ok((cache, logits))
}

/// Autoregressive continuation of `prefix` (whole faces) until stop or the
/// context is exhausted.
pub fn generate<T: Element>(gpt: &Gpt<T>, prefix: &[usize], sampler: &Sampler) -> Result<Generation> {
    match sampler.mode {
        SamplerMode::Greedy | SamplerMode::Nucleus => single_path(gpt, prefix, sampler),
        SamplerMode::Beam => {
            let beam = beam_search(gpt, prefix, sampler)?;
            if sampler.stochastic_beam {
                return Ok(beam);
            }
            // deterministic beams keep the greedy path as a fallback candidate
            let greedy = single_path(
                gpt,
                prefix,
                &Sampler {
                    mode: SamplerMode::Greedy,
                    ..*sampler
                },
            )?;
            Ok(if greedy.log_prob > beam.log_prob { greedy } else { beam })
        }
    }
}

fn single_path<T: Element>(gpt: &Gpt<T>, prefix: &[usize], sampler: &Sampler) -> Result<Generation> {
    let tpf = gpt.tokens_per_face();
    let stop = gpt.vocab.stop();
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let (mut cache, mut logits) = prefill(gpt, prefix)?;
    let mut tokens = prefix.to_vec();
    let mut log_prob = 0.0;
    loop {
        let legal = legality(gpt, tokens.len());
        // no room for another face: the model either stops here or is cut off
        let full = !legal.tokens;
        let view = if full { Legal { stop: true, tokens: true } } else { legal };
        let scores = log_probs(&logits, &view, stop, 1.0);
        let choice = match sampler.mode {
            SamplerMode::Greedy => argmax(&scores),
            _ => {
                let tempered = log_probs(&logits, &view, stop, sampler.temperature);
                nucleus(&tempered, sampler.p, sampler.k, &mut rng)
            }
        };
        if choice == stop {
            return Ok(Generation {
                tokens,
                log_prob: log_prob + scores[choice],
                truncated: false,
            });
        }
        if full {
            return Ok(truncated(tokens, tpf, log_prob + scores[stop]));
        }
        log_prob += scores[choice];
        let slot = slot_for(tokens.len(), choice, tpf);
        tokens.push(choice);
        logits = gpt.step(&[slot], &mut cache)?;
    }
}

fn truncated(mut tokens: Vec<usize>, tpf: usize, log_prob: f64) -> Generation {
    tokens.truncate(tokens.len() / tpf * tpf);
    Generation {
        tokens,
        log_prob,
        truncated: true,
    }
}

struct Hyp<T> {
    tokens: Vec<usize>,
    cache: Vec<KvCache<T>>,
    logits: Vec<T>,
    score: f64,
}

fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(1e-300);
    -(-u.ln()).ln()
}

fn beam_search<T: Element>(gpt: &Gpt<T>, prefix: &[usize], sampler: &Sampler) -> Result<Generation> {
    let width = sampler.beam_width.max(1);
    let tpf = gpt.tokens_per_face();
    let stop = gpt.vocab.stop();
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let (cache, logits) = prefill(gpt, prefix)?;
    let mut alive = vec![Hyp {
        tokens: prefix.to_vec(),
        cache,
        logits,
        score: 0.0,
    }];
    let mut finished: Vec<Generation> = Vec::new();
    while !alive.is_empty() {
        // (hyp, token, score, ranking key)
        let mut cands: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let legal = legality(gpt, hyp.tokens.len());
            if !legal.tokens {
                // out of room: close the beam, flagged unless stop was preferred
                let all = log_probs(&hyp.logits, &Legal { stop: true, tokens: true }, stop, 1.0);
                finished.push(Generation {
                    tokens: hyp.tokens.clone(),
                    log_prob: hyp.score + all[stop],
                    truncated: argmax(&all) != stop,
                });
                continue;
            }
            let lp = log_probs(&hyp.logits, &legal, stop, 1.0);
            let mut local: Vec<(usize, f64, f64)> = lp
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(t, &v)| {
                    let key = if sampler.stochastic_beam {
                        hyp.score + v / sampler.temperature.max(1e-12) + gumbel(&mut rng)
                    } else {
                        hyp.score + v
                    };
                    (t, hyp.score + v, key)
                })
                .collect();
            local.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            local.truncate(width);
            cands.extend(local.into_iter().map(|(t, s, k)| (h, t, s, k)));
        }
        cands.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (h, t, score, _) in cands {
            let parent = &alive[h];
            if t == stop {
                finished.push(Generation {
                    tokens: parent.tokens.clone(),
                    log_prob: score,
                    truncated: false,
                });
                continue;
            }
            let mut cache = parent.cache.clone();
            let slot = slot_for(parent.tokens.len(), t, tpf);
            let logits = gpt.step(&[slot], &mut cache)?;
            let mut tokens = parent.tokens.clone();
            tokens.push(t);
            next.push(Hyp {
                tokens,
                cache,
                logits,
                score,
            });
        }
        alive = next;
        let best_done = finished.iter().map(|g| g.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        // scores never increase, so no live beam can overtake a finished one
        if finished.len() >= width && best_done >= best_alive {
            break;
        }
    }
    finished
        .into_iter()
        .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
        .ok_or(Error::Empty("beam produced no sequence"))
}

/// Turns generated tokens back into coordinates.
pub enum TokenDecoder<'a, T> {
    Codec(&'a Codec<T>),
    /// Tokens are discretized coordinates, nine per face.
    Raw,
}

impl<T: Element> TokenDecoder<'_, T> {
    /// Nine bins per face, in generation order.
    pub fn bins(&self, tokens: &[usize], tokens_per_face: usize) -> Result<Vec<u8>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        match self {
            TokenDecoder::Codec(codec) => {
                let stack = TokenStack {
                    tokens_per_face,
                    ids: tokens.to_vec(),
                };
                let logits = codec.decode_tokens(&stack)?;
                Ok(crate::codec::argmax_bins(logits.data()))
            }
            TokenDecoder::Raw => {
                if tokens_per_face != 9 || tokens.iter().any(|&t| t >= BINS) {
                    return Err(Error::Invalid("raw tokens must be nine bins per face".into()));
                }
                Ok(tokens.iter().map(|&t| t as u8).collect())
            }
        }
    }

    /// Tokens of the canonical form of `mesh`.
    pub fn tokenize(&self, mesh: &DiscreteMesh) -> Result<(DiscreteMesh, Vec<usize>)> {
        match self {
            TokenDecoder::Codec(codec) => {
                let (canonical, stack) = codec.tokenize(mesh)?;
                Ok((canonical, stack.ids))
            }
            TokenDecoder::Raw => {
                let c = mesh.canonicalize();
                let ids = (0..c.faces.len())
                    .flat_map(|f| c.face_bins(f))
                    .map(usize::from)
                    .collect();
                Ok((c, ids))
            }
        }
    }
}

/// Discrete mesh in generation order and the merged output mesh.
pub fn decode_generation<T: Element>(
    decoder: &TokenDecoder<'_, T>,
    tokens: &[usize],
    tokens_per_face: usize,
) -> Result<(DiscreteMesh, Mesh)> {
    let bins = decoder.bins(tokens, tokens_per_face)?;
    let discrete = bins_to_mesh(&bins);
    let mesh = discrete.undiscretize().merge_vertices(MERGE_EPSILON);
    Ok((discrete, mesh))
}

/// `count` continuations of a partial mesh (normalized coordinates). The
/// partial mesh's canonical faces are kept verbatim at the start of every
/// output; sampler seeds are `seed, seed + 1, ...`.
pub fn complete<T: Element>(
    gpt: &Gpt<T>,
    decoder: &TokenDecoder<'_, T>,
    partial: &Mesh,
    count: usize,
    sampler: &Sampler,
) -> Result<Vec<(DiscreteMesh, Mesh, Generation)>> {
    let tpf = gpt.tokens_per_face();
    let (prefix_mesh, prefix) = if partial.faces.is_empty() {
        (DiscreteMesh::default(), Vec::new())
    } else {
        decoder.tokenize(&partial.discretize()?)?
    };
    let kept = prefix_mesh.faces.len();
    let prefix_bins: Vec<u8> = (0..kept).flat_map(|f| prefix_mesh.face_bins(f)).collect();
    (0..count)
        .map(|i| {
            let s = Sampler {
                seed: sampler.seed.wrapping_add(i as u64),
                ..*sampler
            };
            let generation = generate(gpt, &prefix, &s)?;
            let mut bins = decoder.bins(&generation.tokens, tpf)?;
            bins[..prefix_bins.len()].copy_from_slice(&prefix_bins);
            let discrete = bins_to_mesh(&bins);
            let mesh = discrete.undiscretize().merge_vertices(MERGE_EPSILON);
            Ok((discrete, mesh, generation))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpt::{GptConfig, InputMode, Vocab};

    fn tiny() -> Gpt<f64> {
        Gpt::new(
            GptConfig {
                layers: 1,
                heads: 2,
                width: 8,
                context: 26,
                input: InputMode::Learned,
                init_std: 0.5,
                ..GptConfig::default()
            },
            Vocab {
                size: 5,
                tokens_per_face: 6,
                embeddings: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn outputs_are_whole_faces() {
        let g = tiny();
        for seed in 0..10 {
            let out = generate(&g, &[], &Sampler { seed, ..Sampler::default() }).unwrap();
            assert_eq!(out.tokens.len() % 6, 0);
            assert!(out.tokens.len() + 2 <= 26);
            if out.truncated {
                assert_eq!(out.tokens.len(), 24);
            }
        }
    }

    #[test]
    fn seeded_sampling_repeats() {
        let g = tiny();
        let s = Sampler { seed: 9, ..Sampler::default() };
        assert_eq!(generate(&g, &[], &s).unwrap(), generate(&g, &[], &s).unwrap());
    }

    #[test]
    fn deterministic_beam_is_at_least_greedy() {
        let g = tiny();
        let greedy = generate(&g, &[], &Sampler { mode: SamplerMode::Greedy, ..Sampler::default() }).unwrap();
        let beam = generate(
            &g,
            &[],
            &Sampler {
                mode: SamplerMode::Beam,
                stochastic_beam: false,
                ..Sampler::default()
            },
        )
        .unwrap();
        assert!(beam.log_prob >= greedy.log_prob);
    }

    #[test]
    fn prefix_is_kept() {
        let g = tiny();
        let prefix = [1, 2, 3, 4, 0, 1];
        let out = generate(&g, &prefix, &Sampler::default()).unwrap();
        assert_eq!(&out.tokens[..6], &prefix);
    }

    #[test]
    fn overlong_prefix_is_rejected() {
        let g = tiny();
        assert!(matches!(
            generate(&g, &[0; 30], &Sampler::default()),
            Err(Error::Context { .. })
        ));
    }
}
