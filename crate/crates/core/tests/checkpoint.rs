use rtmae::masking::Gate;
use rtmae::model::ModelConfig;
use rtmae::synth::{generate_corpus, CorpusSpec};
use rtmae::tokenizer::quantize_attributes;
use rtmae::trainer::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, train, Checkpoint,
    TrainConfig,
};
use rtmae::Error;

fn small_run() -> (Checkpoint, rtmae::synth::Corpus) {
    let spec = CorpusSpec {
        frames: 4,
        bins: 8,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(24, 11, 0.5, &spec).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        model: ModelConfig::tiny(),
        ..TrainConfig::desk()
    };
    let out = train(&cfg, &corpus, &mut std::io::sink()).unwrap();
    (out.checkpoint, corpus)
}

#[test]
fn round_trip_is_byte_identical_and_preserves_inference() {
    let (ckpt, corpus) = small_run();
    let bytes = encode_checkpoint(&ckpt);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back), bytes);
    assert_eq!(back.epoch, 2);
    assert_eq!(back.rng, ckpt.rng);
    assert_eq!(back.config_text, ckpt.config_text);
    assert_eq!(back.model.residual_examples, ckpt.model.residual_examples);

    for s in corpus.samples.iter().take(10) {
        let attrs = quantize_attributes(&s.factors, &corpus.spec.ranges);
        let a = ckpt.model.generate_tokens(&attrs, None, Gate::Drop, true).unwrap();
        let b = back.model.generate_tokens(&attrs, None, Gate::Drop, true).unwrap();
        assert_eq!(a, b);
        let ga = ckpt.model.analyze_attributes(&s.grid, &ckpt.quantizer).unwrap();
        let gb = back.model.analyze_attributes(&s.grid, &back.quantizer).unwrap();
        assert_eq!(ga, gb);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(encode_checkpoint(&load_checkpoint(&path).unwrap()), bytes);
}

#[test]
fn damaged_files_are_rejected() {
    let (ckpt, _) = small_run();
    let bytes = encode_checkpoint(&ckpt);
    for cut in [0, 4, 8, 12, bytes.len() / 2, bytes.len() - 1] {
        match decode_checkpoint(&bytes[..cut]) {
            Err(Error::Corrupt { .. }) | Err(Error::VersionMismatch { .. }) => {}
            other => panic!("truncation at {cut} gave {other:?}", other = other.map(|_| ())),
        }
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(decode_checkpoint(&bad_magic), Err(Error::Corrupt { .. })));
    let mut bad_version = bytes.clone();
    bad_version[8] = bad_version[8].wrapping_add(1);
    assert!(matches!(
        decode_checkpoint(&bad_version),
        Err(Error::VersionMismatch { .. })
    ));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(decode_checkpoint(&trailing).is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_checkpoint(std::path::Path::new("/nonexistent/dir/m.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}
