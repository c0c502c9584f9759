//! End-to-end stages shared by the command-line tool and the tests: data
//! generation, codec and transformer training, checkpoints and sampling.

use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, CodecTrainer, Prepared};
use crate::config::{Config, DataConfig};
use crate::datasets::{augment, generate_synthetic, DatasetManifest, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gpt::{
    decode_generation, generate, Generation, Gpt, GptTrainer, InputMode, Sampler, TokenDecoder, Vocab,
};
use crate::mesh::{load_obj, save_obj, Mesh, BINS};

/// A mesh tagged with its family name.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub family: String,
    pub mesh: Mesh,
}

/// The synthetic pool described by `data`: `count` meshes per family plus
/// `augment_copies` augmented variants of each.
pub fn synthetic_pool(data: &DataConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (fi, &family) in data.families.iter().enumerate() {
        let spec = SyntheticSpec {
            family,
            count: data.count,
            seed: data.seed.wrapping_mul(1000).wrapping_add(fi as u64),
        };
        for (i, mesh) in generate_synthetic(&spec).into_iter().enumerate() {
            for j in 0..data.augment_copies {
                let seed = spec.seed.wrapping_mul(7919).wrapping_add((i * 131 + j) as u64);
                out.push(Sample {
                    name: format!("{family}_{i:03}_aug{j}"),
                    family: family.to_string(),
                    mesh: augment(&mesh, seed)?,
                });
            }
            out.push(Sample {
                name: format!("{family}_{i:03}"),
                family: family.to_string(),
                mesh,
            });
        }
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes every sample as OBJ plus a manifest into `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample], data: &DataConfig) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let file = format!("{}.obj", s.name);
        save_obj(&s.mesh, dir.join(&file))?;
        items.push((file, s.family.clone(), s.mesh.faces.len()));
    }
    let manifest = DatasetManifest::build(&items, data.max_faces, data.split_ratio, data.seed);
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Meshes of one split listed in `dir`'s manifest, in manifest order.
pub fn read_dataset(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::load(dir.join(MANIFEST_FILE))?;
    manifest
        .split(split)
        .map(|e| {
            Ok(Sample {
                name: e.path.trim_end_matches(".obj").to_string(),
                family: e.family.clone(),
                mesh: load_obj(dir.join(&e.path))?,
            })
        })
        .collect()
}

/// Header of a training log: command, seed and the full config, then the
/// column names.
pub fn write_log_header(log: &mut dyn Write, command: &str, seed: u64, config: &Config) -> Result<()> {
    writeln!(log, "# {command}")?;
    writeln!(log, "# seed {seed}")?;
    for line in config.to_text().lines() {
        writeln!(log, "# {line}")?;
    }
    writeln!(log, "step\tloss\taccuracy")?;
    Ok(())
}

fn log_row(log: &mut dyn Write, step: usize, loss: f64, accuracy: f64) -> Result<()> {
    writeln!(log, "{step}\t{loss:.6}\t{accuracy:.2}")?;
    Ok(())
}

pub fn prepare(config: &Config, meshes: &[Mesh]) -> Result<Vec<Prepared>> {
    meshes
        .iter()
        .map(|m| Prepared::new(&m.normalize()?.discretize()?, config.codec.frequencies))
        .collect()
}

/// Trains a codec for `config.codec.steps` steps, one log row per step.
pub fn train_codec(config: &Config, meshes: &[Mesh], log: &mut dyn Write) -> Result<Codec<f32>> {
    write_log_header(log, "train-codec", config.codec.seed, config)?;
    let codec = Codec::new(config.codec.clone())?;
    let mut trainer = CodecTrainer::new(codec, prepare(config, meshes)?)?;
    for _ in 0..config.codec.steps {
        let s = trainer.train_step()?;
        log_row(log, s.step, s.loss, s.accuracy)?;
        if s.step % 100 == 0 {
            log::info!("codec step {} loss {:.4} accuracy {:.2}", s.step, s.loss, s.accuracy);
        }
    }
    Ok(trainer.into_codec())
}

pub fn codec_checkpoint(codec: &Codec<f32>, config: &Config) -> Checkpoint {
    Checkpoint::with_tensors(config.to_text(), &codec.tensors())
}

/// Codec and the config it was trained under. With `expected`, the codec
/// sections must agree.
pub fn load_codec(ckpt: &Checkpoint, expected: Option<&Config>) -> Result<(Codec<f32>, Config)> {
    let config = Config::parse(&ckpt.config)?;
    if let Some(e) = expected {
        config.ensure_matches(e, &["codec"])?;
    }
    let codec = Codec::from_tensors(config.codec.clone(), &ckpt.tensors()?)?;
    Ok((codec, config))
}

/// Vocabulary size and tokens per face implied by a config.
pub fn vocab_shape(config: &Config) -> (usize, usize) {
    match config.gpt.input {
        InputMode::RawCoordinates => (BINS, 9),
        _ => (config.codec.codebook_size, config.codec.tokens_per_face()),
    }
}

pub fn vocab(config: &Config, codec: Option<&Codec<f32>>) -> Result<Vocab<f32>> {
    let (size, tokens_per_face) = vocab_shape(config);
    let embeddings = match config.gpt.input {
        InputMode::Codebook => {
            let c = codec.ok_or_else(|| Error::Config("codebook input needs a codec".into()))?;
            Some(Tensor::new(&[c.codebook.len(), c.codebook.dim], c.codebook.embed.clone())?)
        }
        _ => None,
    };
    Ok(Vocab {
        size,
        tokens_per_face,
        embeddings,
    })
}

pub fn decoder<'a>(config: &Config, codec: Option<&'a Codec<f32>>) -> Result<TokenDecoder<'a, f32>> {
    match (config.gpt.input, codec) {
        (InputMode::RawCoordinates, _) => Ok(TokenDecoder::Raw),
        (_, Some(c)) => Ok(TokenDecoder::Codec(c)),
        (_, None) => Err(Error::Config("token input mode needs a codec".into())),
    }
}

/// Canonical token sequences for meshes that fit the context; the rest are
/// skipped with a warning.
pub fn token_sequences(
    gpt: &Gpt<f32>,
    decoder: &TokenDecoder<'_, f32>,
    meshes: &[&Mesh],
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for m in meshes {
        if m.faces.len() > gpt.max_faces() {
            log::warn!("skipping mesh with {} faces (limit {})", m.faces.len(), gpt.max_faces());
            continue;
        }
        let (_, tokens) = decoder.tokenize(&m.normalize()?.discretize()?)?;
        out.push(tokens);
    }
    if out.is_empty() {
        return Err(Error::Empty("token sequences within context"));
    }
    Ok(out)
}

/// Transformer training. With `pretrain_steps > 0` the whole pool is used
/// first, then `steps` more on `finetune_family` (or the pool again).
/// Without pretraining, only the fine-tuning set is used.
pub fn train_gpt(
    config: &Config,
    codec: Option<&Codec<f32>>,
    samples: &[Sample],
    log: &mut dyn Write,
) -> Result<Gpt<f32>> {
    write_log_header(log, "train-gpt", config.gpt.seed, config)?;
    let gpt = Gpt::new(config.gpt.clone(), vocab(config, codec)?)?;
    let dec = decoder(config, codec)?;
    let all: Vec<&Mesh> = samples.iter().map(|s| &s.mesh).collect();
    let focus: Vec<&Mesh> = match config.data.finetune_family {
        Some(f) => samples
            .iter()
            .filter(|s| s.family == f.name())
            .map(|s| &s.mesh)
            .collect(),
        None => all.clone(),
    };
    let to_flat = |gpt: &Gpt<f32>, meshes: &[&Mesh]| -> Result<Vec<_>> {
        token_sequences(gpt, &dec, meshes)?
            .iter()
            .map(|t| gpt.sequence(t))
            .collect()
    };
    let pool = to_flat(&gpt, &all)?;
    let tuned = to_flat(&gpt, &focus)?;
    let pretrain = config.gpt.pretrain_steps;
    let mut trainer = GptTrainer::new(gpt, if pretrain > 0 { pool } else { tuned.clone() })?;
    for i in 0..pretrain + config.gpt.steps {
        if pretrain > 0 && i == pretrain {
            trainer.set_data(tuned.clone())?;
        }
        let s = trainer.train_step()?;
        log_row(log, s.step, s.loss, s.accuracy)?;
        if s.step % 100 == 0 {
            log::info!("gpt step {} loss {:.4} accuracy {:.2}", s.step, s.loss, s.accuracy);
        }
    }
    Ok(trainer.into_gpt())
}

pub fn gpt_checkpoint(gpt: &Gpt<f32>, config: &Config) -> Checkpoint {
    Checkpoint::with_tensors(config.to_text(), &gpt.tensors())
}

pub fn load_gpt(ckpt: &Checkpoint) -> Result<(Gpt<f32>, Config)> {
    let config = Config::parse(&ckpt.config)?;
    let (size, tpf) = vocab_shape(&config);
    let gpt = Gpt::from_tensors(config.gpt.clone(), size, tpf, &ckpt.tensors()?)?;
    Ok((gpt, config))
}

/// `n` samples with seeds `sampler.seed, sampler.seed + 1, ...`.
pub fn sample_meshes(
    gpt: &Gpt<f32>,
    decoder: &TokenDecoder<'_, f32>,
    sampler: &Sampler,
    n: usize,
) -> Result<Vec<(Generation, Mesh)>> {
    (0..n)
        .map(|i| {
            let s = Sampler {
                seed: sampler.seed.wrapping_add(i as u64),
                ..*sampler
            };
            let g = generate(gpt, &[], &s)?;
            if g.truncated {
                log::warn!("sample {i} hit the context limit and was truncated");
            }
            let (_, mesh) = decode_generation(decoder, &g.tokens, gpt.tokens_per_face())?;
            Ok((g, mesh))
        })
        .collect()
}
