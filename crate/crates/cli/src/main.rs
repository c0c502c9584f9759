use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use meshgpt::checkpoint::Checkpoint;
use meshgpt::config::Config;
use meshgpt::datasets::{load_obj_dir, Split};
use meshgpt::gpt::{complete, Sampler, SamplerMode};
use meshgpt::mesh::{load_obj, save_obj, Mesh};
use meshgpt::metrics::{compactness, report, sample_surface_points, shape_set_metrics};
use meshgpt::pipeline;
use meshgpt::verify::grad_check_suite;

#[derive(Parser)]
#[command(name = "meshgpt", version, about = "Triangle-mesh tokenization and generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the triangle codec on a dataset's training split.
    TrainCodec {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log; defaults to the checkpoint path with `.log` appended.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the transformer on codec tokens (or raw coordinates).
    TrainGpt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sample meshes from a trained transformer.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Complete a partial mesh.
    Complete {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        prefix: PathBuf,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Shape-set metrics between two directories of OBJ files.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as `key = value` lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode, quantize and decode one mesh and report triangle accuracy.
    Roundtrip {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Write the reconstruction here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient verification suite.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of randomized repetitions.
        #[arg(long, default_value_t = 1)]
        rounds: u64,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    codec: Option<PathBuf>,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// greedy, nucleus or beam.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

impl SamplerArgs {
    fn apply(&self, mut s: Sampler) -> Result<Sampler> {
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(m) = &self.mode {
            s.mode = m.parse::<SamplerMode>()?;
        }
        if let Some(v) = self.p {
            s.p = v;
        }
        if let Some(v) = self.k {
            s.k = v;
        }
        if let Some(v) = self.beam_width {
            s.beam_width = v;
        }
        if let Some(v) = self.temperature {
            s.temperature = v;
        }
        if !(s.p > 0.0 && s.p <= 1.0) || !(s.temperature > 0.0) || s.beam_width == 0 {
            bail!("sampler needs 0 < p <= 1, temperature > 0 and beam width >= 1");
        }
        Ok(s)
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn open_log(log: Option<&Path>, ckpt: &Path) -> Result<BufWriter<File>> {
    let path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = ckpt.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    });
    let file = File::create(&path).with_context(|| format!("creating log {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_model(args: &ModelArgs) -> Result<(meshgpt::gpt::Gpt<f32>, Config, Option<meshgpt::codec::Codec<f32>>)> {
    let (gpt, config) = pipeline::load_gpt(&load_checkpoint(&args.model)?)?;
    let codec = match &args.codec {
        Some(p) => Some(pipeline::load_codec(&load_checkpoint(p)?, Some(&config))?.0),
        None => None,
    };
    Ok((gpt, config, codec))
}

fn write_meshes(dir: &Path, prefix: &str, meshes: &[Mesh]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, m) in meshes.iter().enumerate() {
        let path = dir.join(format!("{prefix}_{i:03}.obj"));
        save_obj(m, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn clouds(dir: &Path, points: usize, seed: u64) -> Result<(Vec<meshgpt::metrics::PointCloud>, Vec<Mesh>)> {
    let meshes: Vec<Mesh> = load_obj_dir(dir)
        .with_context(|| format!("reading meshes from {}", dir.display()))?
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    if meshes.is_empty() {
        bail!("no OBJ files in {}", dir.display());
    }
    let clouds = meshes
        .iter()
        .enumerate()
        .map(|(i, m)| sample_surface_points(&m.normalize()?, points, seed.wrapping_add(i as u64)))
        .collect::<meshgpt::Result<Vec<_>>>()?;
    Ok((clouds, meshes))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let config = load_config(config.as_deref())?;
            let pool = pipeline::synthetic_pool(&config.data)?;
            let manifest = pipeline::write_dataset(&out, &pool, &config.data)?;
            let train = manifest.split(Split::Train).count();
            println!("meshes\t{}", manifest.entries.len());
            println!("train\t{train}");
            println!("test\t{}", manifest.entries.len() - train);
        }
        Command::TrainCodec {
            config,
            data,
            out,
            log,
        } => {
            let config = load_config(config.as_deref())?;
            let meshes: Vec<Mesh> = pipeline::read_dataset(&data, Split::Train)?
                .into_iter()
                .map(|s| s.mesh)
                .collect();
            let mut log = open_log(log.as_deref(), &out)?;
            let codec = pipeline::train_codec(&config, &meshes, &mut log)?;
            log.flush()?;
            pipeline::codec_checkpoint(&codec, &config).save(&out)?;
        }
        Command::TrainGpt {
            config,
            data,
            codec,
            out,
            log,
        } => {
            let config = load_config(config.as_deref())?;
            let codec = match codec {
                Some(p) => Some(pipeline::load_codec(&load_checkpoint(&p)?, Some(&config))?.0),
                None => None,
            };
            let samples = pipeline::read_dataset(&data, Split::Train)?;
            let mut log = open_log(log.as_deref(), &out)?;
            let gpt = pipeline::train_gpt(&config, codec.as_ref(), &samples, &mut log)?;
            log.flush()?;
            pipeline::gpt_checkpoint(&gpt, &config).save(&out)?;
        }
        Command::Sample {
            model,
            n,
            out,
            sampler,
        } => {
            let (gpt, config, codec) = load_model(&model)?;
            let sampler = sampler.apply(config.sampler)?;
            let decoder = pipeline::decoder(&config, codec.as_ref())?;
            let results = pipeline::sample_meshes(&gpt, &decoder, &sampler, n)?;
            for (i, (g, m)) in results.iter().enumerate() {
                println!(
                    "sample_{i:03}\tfaces {}\tlog_prob {:.4}{}",
                    m.faces.len(),
                    g.log_prob,
                    if g.truncated { "\ttruncated" } else { "" }
                );
            }
            let meshes: Vec<Mesh> = results.into_iter().map(|(_, m)| m).collect();
            write_meshes(&out, "sample", &meshes)?;
        }
        Command::Complete {
            model,
            prefix,
            n,
            out,
            sampler,
        } => {
            let (gpt, config, codec) = load_model(&model)?;
            let sampler = sampler.apply(config.sampler)?;
            let decoder = pipeline::decoder(&config, codec.as_ref())?;
            let partial = load_obj(&prefix).with_context(|| format!("reading {}", prefix.display()))?;
            // prefixes already in the normalized cube are used as they are
            let partial = if partial.faces.is_empty() || partial.discretize().is_ok() {
                partial
            } else {
                partial.normalize()?
            };
            let results = complete(&gpt, &decoder, &partial, n, &sampler)?;
            for (i, (_, m, g)) in results.iter().enumerate() {
                println!(
                    "completion_{i:03}\tfaces {}{}",
                    m.faces.len(),
                    if g.truncated { "\ttruncated" } else { "" }
                );
            }
            let meshes: Vec<Mesh> = results.into_iter().map(|(_, m, _)| m).collect();
            write_meshes(&out, "completion", &meshes)?;
        }
        Command::Eval {
            generated,
            reference,
            points,
            seed,
            out,
        } => {
            if points == 0 {
                bail!("--points must be positive");
            }
            let (g, meshes) = clouds(&generated, points, seed)?;
            let (r, _) = clouds(&reference, points, seed)?;
            let metrics = shape_set_metrics(&g, &r)?;
            let text = report(&metrics, Some(compactness(&meshes)?));
            print!("{text}");
            if let Some(path) = out {
                let kv: String = text
                    .lines()
                    .filter_map(|l| l.split_once('\t'))
                    .map(|(k, v)| format!("{k} = {v}\n"))
                    .collect();
                std::fs::write(&path, kv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Roundtrip { mesh, codec, out } => {
            let (codec, _) = pipeline::load_codec(&load_checkpoint(&codec)?, None)?;
            let input = load_obj(&mesh).with_context(|| format!("reading {}", mesh.display()))?;
            let discrete = input.normalize()?.discretize()?;
            let (recon, accuracy) = codec.roundtrip(&discrete)?;
            println!("triangle_accuracy {accuracy:.2}");
            if let Some(path) = out {
                save_obj(&recon.undiscretize().merge_vertices(meshgpt::gpt::MERGE_EPSILON), &path)?;
            }
        }
        Command::GradCheck { seed, rounds } => {
            let mut failed = 0;
            for round in 0..rounds.max(1) {
                for c in grad_check_suite(seed.wrapping_add(round))? {
                    let status = if c.passed() { "ok" } else { "FAIL" };
                    println!("{}\t{:.3e}\t{:.0e}\t{status}", c.name, c.error, c.tolerance);
                    failed += usize::from(!c.passed());
                }
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
