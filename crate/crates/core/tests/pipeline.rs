use meshgpt::checkpoint::Checkpoint;
use meshgpt::codec::{Codec, CodecConfig, CodecTrainer, Prepared};
use meshgpt::config::Config;
use meshgpt::datasets::{generate_synthetic, Family, SyntheticSpec};
use meshgpt::gpt::{
    complete, decode_generation, generate, Gpt, GptConfig, GptTrainer, InputMode, Sampler, SamplerMode,
    TokenDecoder, Vocab,
};
use meshgpt::mesh::{DiscreteMesh, Mesh};
use meshgpt::{pipeline, Error};

fn tiny_codec_config() -> CodecConfig {
    CodecConfig {
        codebook_size: 64,
        encoder_widths: vec![32, 48],
        decoder_widths: vec![16, 32],
        decoder_blocks: vec![1, 1],
        batch_size: 1,
        steps: 300,
        lr: 3e-3,
        ..CodecConfig::default()
    }
}

fn one_box() -> Mesh {
    generate_synthetic(&SyntheticSpec {
        family: Family::Box,
        count: 1,
        seed: 5,
    })
    .remove(0)
}

fn overfit_codec(mesh: &Mesh) -> Codec<f32> {
    let cfg = tiny_codec_config();
    let data = vec![Prepared::new(&mesh.discretize().unwrap(), cfg.frequencies).unwrap()];
    let mut tr = CodecTrainer::new(Codec::new(cfg.clone()).unwrap(), data).unwrap();
    for _ in 0..cfg.steps {
        tr.train_step().unwrap();
    }
    tr.into_codec()
}

fn canonical_bins(d: &DiscreteMesh) -> Vec<u8> {
    (0..d.faces.len()).flat_map(|f| d.face_bins(f)).collect()
}

#[test]
fn overfit_codec_reproduces_its_mesh() {
    let mesh = one_box();
    let codec = overfit_codec(&mesh);
    let d = mesh.discretize().unwrap();
    let (recon, acc) = codec.roundtrip(&d).unwrap();
    assert_eq!(acc, 100.0);
    let (canonical, tokens) = codec.tokenize(&d).unwrap();
    assert_eq!(tokens.ids.len(), 6 * canonical.faces.len());
    let bins = meshgpt::codec::argmax_bins(codec.decode_tokens(&tokens).unwrap().data());
    assert_eq!(bins, canonical_bins(&canonical));
    assert_eq!(recon.canonicalize(), canonical);
}

fn raw_gpt(mesh: &Mesh) -> (Gpt<f32>, Vec<usize>) {
    let gpt = Gpt::new(
        GptConfig {
            layers: 2,
            heads: 2,
            width: 32,
            context: 128,
            input: InputMode::RawCoordinates,
            lr: 3e-3,
            batch_size: 1,
            ..GptConfig::default()
        },
        Vocab {
            size: 128,
            tokens_per_face: 9,
            embeddings: None,
        },
    )
    .unwrap();
    let (_, tokens) = TokenDecoder::<f32>::Raw.tokenize(&mesh.discretize().unwrap()).unwrap();
    let seq = gpt.sequence(&tokens).unwrap();
    let mut tr = GptTrainer::new(gpt, vec![seq]).unwrap();
    for _ in 0..300 {
        tr.train_step().unwrap();
    }
    assert!(tr.evaluate().unwrap() < 0.05, "loss {}", tr.evaluate().unwrap());
    (tr.into_gpt(), tokens)
}

#[test]
fn overfit_transformer_regenerates_its_mesh() {
    let mesh = one_box();
    let (gpt, tokens) = raw_gpt(&mesh);
    let greedy = Sampler {
        mode: SamplerMode::Greedy,
        ..Sampler::default()
    };

    // argmax chain from start reproduces the sequence and then stops
    let g = generate(&gpt, &[], &greedy).unwrap();
    assert_eq!(g.tokens, tokens);
    assert!(!g.truncated);
    let (discrete, decoded) = decode_generation(&TokenDecoder::<f32>::Raw, &g.tokens, 9).unwrap();
    assert_eq!(discrete.canonicalize(), mesh.discretize().unwrap().canonicalize());
    assert_eq!(decoded.faces.len(), mesh.faces.len());

    // the whole mesh as prefix: stops at once, prefix untouched
    let full = generate(&gpt, &tokens, &greedy).unwrap();
    assert_eq!(&full.tokens[..tokens.len()], &tokens[..]);
    assert_eq!(full.tokens.len() % 9, 0);

    // an empty prefix behaves like plain sampling
    let s = Sampler { seed: 4, ..Sampler::default() };
    let empty = Mesh { vertices: vec![], faces: vec![] };
    let c = complete(&gpt, &TokenDecoder::Raw, &empty, 1, &s).unwrap();
    assert_eq!(c[0].2, generate(&gpt, &[], &s).unwrap());

    // half the faces as prefix are kept bin for bin
    let canonical = mesh.discretize().unwrap().canonicalize();
    let half = canonical.faces.len() / 2;
    let prefix = DiscreteMesh {
        vertices: canonical.vertices.clone(),
        faces: canonical.faces[..half].to_vec(),
    };
    let outs = complete(&gpt, &TokenDecoder::Raw, &prefix.undiscretize(), 3, &s).unwrap();
    assert_eq!(outs.len(), 3);
    let expect = canonical_bins(&canonical);
    for (d, _, g) in &outs {
        assert_eq!(&canonical_bins(d)[..9 * half], &expect[..9 * half]);
        assert_eq!(&g.tokens[..9 * half], &tokens[..9 * half]);
    }
}

#[test]
fn beam_scores_at_least_greedy() {
    let mesh = one_box();
    let (gpt, _) = raw_gpt(&mesh);
    let greedy = generate(
        &gpt,
        &[],
        &Sampler {
            mode: SamplerMode::Greedy,
            ..Sampler::default()
        },
    )
    .unwrap();
    let beam = generate(
        &gpt,
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

fn small_config() -> Config {
    let mut c = Config::parse(
        "[codec]\ncodebook_size = 32\nencoder_widths = 16,24\ndecoder_widths = 8,16\n\
         decoder_blocks = 1,1\nsteps = 15\nbatch_size = 2\n\
         [gpt]\nlayers = 1\nheads = 2\nwidth = 16\nsteps = 10\nbatch_size = 2\n\
         [data]\nfamilies = box,wedge-lamp\ncount = 2\n",
    )
    .unwrap();
    c.sampler.seed = 3;
    c
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    let codec = Codec::<f32>::new(config.codec.clone()).unwrap();
    let ckpt = pipeline::codec_checkpoint(&codec, &config);
    let path = dir.path().join("c.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config, config.to_text());
    let (back, _) = pipeline::load_codec(&loaded, Some(&config)).unwrap();
    for ((n1, a), (n2, b)) in codec.tensors().iter().zip(back.tensors().iter()) {
        assert_eq!(n1, n2);
        let bits = |t: &meshgpt::autodiff::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{n1}");
    }
    let resaved = dir.path().join("c2.ckpt");
    pipeline::codec_checkpoint(&back, &config).save(&resaved).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&resaved).unwrap());
}

#[test]
fn checkpoint_from_other_config_is_refused_with_diff() {
    let a = small_config();
    let mut b = a.clone();
    b.codec.codebook_size = 16;
    b.codec.sigma = 2.0;
    let codec = Codec::<f32>::new(a.codec.clone()).unwrap();
    let ckpt = pipeline::codec_checkpoint(&codec, &a);
    match pipeline::load_codec(&ckpt, Some(&b)) {
        Err(Error::ConfigMismatch(diff)) => {
            assert_eq!(diff.len(), 2);
            assert!(diff.iter().any(|d| d.starts_with("codec.codebook_size")));
            assert!(diff.iter().any(|d| d.starts_with("codec.sigma")));
        }
        other => panic!("expected a mismatch, got {:?}", other.map(|_| ())),
    }
    // transformer settings do not matter for the codec
    b = a.clone();
    b.gpt.layers = 5;
    assert!(pipeline::load_codec(&ckpt, Some(&b)).is_ok());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
}

#[test]
fn training_runs_are_reproducible() {
    let config = small_config();
    let run = || {
        let pool = pipeline::synthetic_pool(&config.data).unwrap();
        let meshes: Vec<Mesh> = pool.iter().map(|s| s.mesh.clone()).collect();
        let mut codec_log = Vec::new();
        let codec = pipeline::train_codec(&config, &meshes, &mut codec_log).unwrap();
        let mut gpt_log = Vec::new();
        let gpt = pipeline::train_gpt(&config, Some(&codec), &pool, &mut gpt_log).unwrap();
        let decoder = pipeline::decoder(&config, Some(&codec)).unwrap();
        let samples = pipeline::sample_meshes(&gpt, &decoder, &config.sampler, 2).unwrap();
        let objs: Vec<String> = samples.iter().map(|(_, m)| meshgpt::mesh::write_obj(m)).collect();
        (
            codec_log,
            gpt_log,
            pipeline::codec_checkpoint(&codec, &config).to_bytes().unwrap(),
            pipeline::gpt_checkpoint(&gpt, &config).to_bytes().unwrap(),
            objs,
        )
    };
    let a = run();
    let b = run();
    assert!(a == b);
    let log = String::from_utf8(a.0).unwrap();
    assert!(log.starts_with("# train-codec\n# seed 0\n"));
    assert!(log.contains("\nstep\tloss\taccuracy\n1\t"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 1 + config.codec.steps);
}

#[test]
fn gpt_checkpoint_restores_the_model() {
    let config = small_config();
    let pool = pipeline::synthetic_pool(&config.data).unwrap();
    let mut sink = Vec::new();
    let codec = Codec::<f32>::new(config.codec.clone()).unwrap();
    let gpt = pipeline::train_gpt(&config, Some(&codec), &pool, &mut sink).unwrap();
    let bytes = pipeline::gpt_checkpoint(&gpt, &config).to_bytes().unwrap();
    let (back, cfg) = pipeline::load_gpt(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(cfg, config);
    let seq = gpt.sequence(&[1, 2, 3, 4, 5, 6]).unwrap();
    let a = gpt.forward(&seq.slots).unwrap();
    let b = back.forward(&seq.slots).unwrap();
    assert_eq!(a, b);
}
