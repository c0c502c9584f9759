//! `key = value` run configuration with `[codec]`, `[gpt]`, `[data]` and
//! `[sampler]` sections.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::codec::{CodecConfig, Quantization};
use crate::datasets::Family;
use crate::error::{Error, Result};
use crate::gpt::{GptConfig, InputMode, Sampler, SamplerMode};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Families in the synthetic pool.
    pub families: Vec<Family>,
    /// Meshes generated per family.
    pub count: usize,
    /// Augmented copies added per generated mesh.
    pub augment_copies: usize,
    pub max_faces: usize,
    pub split_ratio: f64,
    /// Family used for fine-tuning after pool pretraining; `none` trains on
    /// the whole pool.
    pub finetune_family: Option<Family>,
    /// Points per cloud when evaluating.
    pub eval_points: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            families: Family::ALL.to_vec(),
            count: 4,
            augment_copies: 0,
            max_faces: 800,
            split_ratio: 0.9,
            finetune_family: None,
            eval_points: 2048,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub codec: CodecConfig,
    pub gpt: GptConfig,
    pub data: DataConfig,
    pub sampler: Sampler,
}

pub const SECTIONS: [&str; 4] = ["codec", "gpt", "data", "sampler"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("bad value for {key}: {value:?} (true/false)"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

fn list<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

impl Quantization {
    pub fn name(self) -> &'static str {
        match self {
            Quantization::PerVertex => "per-vertex",
            Quantization::PerFace => "per-face",
        }
    }
}

impl FromStr for Quantization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-vertex" => Ok(Quantization::PerVertex),
            "per-face" => Ok(Quantization::PerFace),
            _ => Err(Error::Config(format!("unknown quantization {s:?}"))),
        }
    }
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::Codebook => "codebook",
            InputMode::Learned => "learned",
            InputMode::RawCoordinates => "raw",
        }
    }
}

impl FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "codebook" => Ok(InputMode::Codebook),
            "learned" => Ok(InputMode::Learned),
            "raw" => Ok(InputMode::RawCoordinates),
            _ => Err(Error::Config(format!("unknown input mode {s:?}"))),
        }
    }
}

impl SamplerMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::Greedy => "greedy",
            SamplerMode::Nucleus => "nucleus",
            SamplerMode::Beam => "beam",
        }
    }
}

impl FromStr for SamplerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(SamplerMode::Greedy),
            "nucleus" => Ok(SamplerMode::Nucleus),
            "beam" => Ok(SamplerMode::Beam),
            _ => Err(Error::Config(format!("unknown sampler mode {s:?}"))),
        }
    }
}

impl Config {
    /// Set one `section.key`; unknown names are errors.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value;
        match section {
            "codec" => {
                let c = &mut self.codec;
                match key {
                    "frequencies" => c.frequencies = parse(key, v)?,
                    "encoder_widths" => c.encoder_widths = parse_list(key, v)?,
                    "quantization" => c.quantization = v.parse()?,
                    "depth" => c.depth = parse(key, v)?,
                    "codebook_size" => c.codebook_size = parse(key, v)?,
                    "ema_decay" => c.ema.decay = parse(key, v)?,
                    "laplace_eps" => c.ema.laplace_eps = parse(key, v)?,
                    "dead_threshold" => c.ema.dead_threshold = parse(key, v)?,
                    "stochastic" => c.stochastic = parse_bool(key, v)?,
                    "stochastic_all_depths" => c.stochastic_all_depths = parse_bool(key, v)?,
                    "temperature" => c.temperature = parse(key, v)?,
                    "anneal_fraction" => c.anneal_fraction = parse(key, v)?,
                    "sigma" => c.sigma = parse(key, v)?,
                    "commitment_weight" => c.commitment_weight = parse(key, v)?,
                    "decoder_widths" => c.decoder_widths = parse_list(key, v)?,
                    "decoder_blocks" => c.decoder_blocks = parse_list(key, v)?,
                    "kernel" => c.kernel = parse(key, v)?,
                    "lr" => c.lr = parse(key, v)?,
                    "batch_size" => c.batch_size = parse(key, v)?,
                    "accumulate" => c.accumulate = parse(key, v)?,
                    "steps" => c.steps = parse(key, v)?,
                    "seed" => c.seed = parse(key, v)?,
                    _ => return Err(unknown(section, key)),
                }
            }
            "gpt" => {
                let g = &mut self.gpt;
                match key {
                    "layers" => g.layers = parse(key, v)?,
                    "heads" => g.heads = parse(key, v)?,
                    "width" => g.width = parse(key, v)?,
                    "ff_mult" => g.ff_mult = parse(key, v)?,
                    "context" => g.context = parse(key, v)?,
                    "input" => g.input = v.parse()?,
                    "init_std" => g.init_std = parse(key, v)?,
                    "lr" => g.lr = parse(key, v)?,
                    "batch_size" => g.batch_size = parse(key, v)?,
                    "steps" => g.steps = parse(key, v)?,
                    "pretrain_steps" => g.pretrain_steps = parse(key, v)?,
                    "seed" => g.seed = parse(key, v)?,
                    _ => return Err(unknown(section, key)),
                }
            }
            "data" => {
                let d = &mut self.data;
                match key {
                    "families" => d.families = parse_list(key, v)?,
                    "count" => d.count = parse(key, v)?,
                    "augment_copies" => d.augment_copies = parse(key, v)?,
                    "max_faces" => d.max_faces = parse(key, v)?,
                    "split_ratio" => d.split_ratio = parse(key, v)?,
                    "finetune_family" => {
                        d.finetune_family = if v == "none" { None } else { Some(parse(key, v)?) }
                    }
                    "eval_points" => d.eval_points = parse(key, v)?,
                    "seed" => d.seed = parse(key, v)?,
                    _ => return Err(unknown(section, key)),
                }
            }
            "sampler" => {
                let s = &mut self.sampler;
                match key {
                    "mode" => s.mode = v.parse()?,
                    "p" => s.p = parse(key, v)?,
                    "k" => s.k = parse(key, v)?,
                    "beam_width" => s.beam_width = parse(key, v)?,
                    "stochastic_beam" => s.stochastic_beam = parse_bool(key, v)?,
                    "temperature" => s.temperature = parse(key, v)?,
                    "seed" => s.seed = parse(key, v)?,
                    _ => return Err(unknown(section, key)),
                }
            }
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Every `(section, key, value)` in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let c = &self.codec;
        let g = &self.gpt;
        let d = &self.data;
        let s = &self.sampler;
        vec![
            ("codec", "frequencies", c.frequencies.to_string()),
            ("codec", "encoder_widths", list(&c.encoder_widths)),
            ("codec", "quantization", c.quantization.name().into()),
            ("codec", "depth", c.depth.to_string()),
            ("codec", "codebook_size", c.codebook_size.to_string()),
            ("codec", "ema_decay", float(c.ema.decay)),
            ("codec", "laplace_eps", float(c.ema.laplace_eps)),
            ("codec", "dead_threshold", float(c.ema.dead_threshold)),
            ("codec", "stochastic", c.stochastic.to_string()),
            ("codec", "stochastic_all_depths", c.stochastic_all_depths.to_string()),
            ("codec", "temperature", float(c.temperature)),
            ("codec", "anneal_fraction", float(c.anneal_fraction)),
            ("codec", "sigma", float(c.sigma)),
            ("codec", "commitment_weight", float(c.commitment_weight)),
            ("codec", "decoder_widths", list(&c.decoder_widths)),
            ("codec", "decoder_blocks", list(&c.decoder_blocks)),
            ("codec", "kernel", c.kernel.to_string()),
            ("codec", "lr", float(c.lr)),
            ("codec", "batch_size", c.batch_size.to_string()),
            ("codec", "accumulate", c.accumulate.to_string()),
            ("codec", "steps", c.steps.to_string()),
            ("codec", "seed", c.seed.to_string()),
            ("gpt", "layers", g.layers.to_string()),
            ("gpt", "heads", g.heads.to_string()),
            ("gpt", "width", g.width.to_string()),
            ("gpt", "ff_mult", g.ff_mult.to_string()),
            ("gpt", "context", g.context.to_string()),
            ("gpt", "input", g.input.name().into()),
            ("gpt", "init_std", float(g.init_std)),
            ("gpt", "lr", float(g.lr)),
            ("gpt", "batch_size", g.batch_size.to_string()),
            ("gpt", "steps", g.steps.to_string()),
            ("gpt", "pretrain_steps", g.pretrain_steps.to_string()),
            ("gpt", "seed", g.seed.to_string()),
            ("data", "families", list(&d.families)),
            ("data", "count", d.count.to_string()),
            ("data", "augment_copies", d.augment_copies.to_string()),
            ("data", "max_faces", d.max_faces.to_string()),
            ("data", "split_ratio", float(d.split_ratio)),
            (
                "data",
                "finetune_family",
                d.finetune_family.map_or("none".into(), |f| f.to_string()),
            ),
            ("data", "eval_points", d.eval_points.to_string()),
            ("data", "seed", d.seed.to_string()),
            ("sampler", "mode", s.mode.name().into()),
            ("sampler", "p", float(s.p)),
            ("sampler", "k", s.k.to_string()),
            ("sampler", "beam_width", s.beam_width.to_string()),
            ("sampler", "stochastic_beam", s.stochastic_beam.to_string()),
            ("sampler", "temperature", float(s.temperature)),
            ("sampler", "seed", s.seed.to_string()),
        ]
    }

    /// Defaults overridden by the given text.
    pub fn parse(text: &str) -> Result<Config> {
        let mut config = Config::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            let section = section
                .as_deref()
                .ok_or_else(|| err("key outside of a section".into()))?;
            config
                .set(section, key.trim(), value.trim())
                .map_err(|e| err(e.to_string()))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.gpt.validate()?;
        let d = &self.data;
        if d.families.is_empty() || d.count == 0 {
            return Err(Error::Config("data needs at least one family and count >= 1".into()));
        }
        if !(d.split_ratio > 0.0 && d.split_ratio <= 1.0) {
            return Err(Error::Config("split_ratio must lie in (0, 1]".into()));
        }
        if d.eval_points == 0 {
            return Err(Error::Config("eval_points must be positive".into()));
        }
        let s = &self.sampler;
        if !(s.p > 0.0 && s.p <= 1.0) || !(s.temperature > 0.0) || s.beam_width == 0 {
            return Err(Error::Config(
                "sampler needs 0 < p <= 1, temperature > 0 and beam_width >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Canonical text holding every key; parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out += &format!("[{section}]\n");
                current = section;
            }
            out += &format!("{key} = {value}\n");
        }
        out
    }

    /// `section.key: ours != theirs` for every differing key in `sections`.
    pub fn diff(&self, other: &Config, sections: &[&str]) -> Vec<String> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|((s, _, a), (_, _, b))| sections.contains(s) && a != b)
            .map(|((s, k, a), (_, _, b))| format!("{s}.{k}: {a} != {b}"))
            .collect()
    }

    /// Fails with the list of differences when `sections` disagree.
    pub fn ensure_matches(&self, other: &Config, sections: &[&str]) -> Result<()> {
        let diff = self.diff(other, sections);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(diff))
        }
    }
}

fn unknown(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown key {key:?} in [{section}]"))
}
