use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtmae::masking::{sample_training_masks, Gate, MaskConfig, MaskMode, MaskRatios};
use rtmae::model::{ModelConfig, RtMae, TokenizedExample};
use rtmae::tokenizer::AttributeTokens;

fn example(c: &ModelConfig, seed: usize) -> TokenizedExample {
    TokenizedExample {
        mel: Array2::from_shape_fn((c.frames, c.bins), |(t, f)| (t * 3 + f + seed) % c.mel_vocab),
        attrs: AttributeTokens {
            streams: std::array::from_fn(|k| {
                (0..c.frames).map(|t| (t + k + seed) % c.attr_vocab[k]).collect()
            }),
            vocab: c.attr_vocab,
        },
    }
}

#[test]
fn paper_scale_grid_has_1024_cells() {
    let c = ModelConfig::paper_scale();
    assert!(c.validate().is_ok());
    assert_eq!(c.frames * c.bins, 1024);
    assert_eq!(c.discrete_slots(), 1024 + 4 * 32);
    assert_eq!((c.d, c.enc_layers, c.dec_layers, c.n_residual), (512, 6, 6, 25));
}

#[test]
fn invalid_configs_rejected() {
    let mut c = ModelConfig::tiny();
    c.heads = 3;
    assert!(RtMae::<f64>::new(c, 0).is_err());
    let mut c = ModelConfig::tiny();
    c.n_residual = 0;
    assert!(RtMae::<f64>::new(c, 0).is_err());
}

#[test]
fn zero_layer_encoder_is_identity() {
    let mut c = ModelConfig::tiny();
    c.enc_layers = 0;
    let m = RtMae::<f64>::new(c, 1).unwrap();
    let x = Array2::from_shape_fn((5, c.d), |(i, j)| (i * 7 + j) as f64 * 0.1 - 1.0);
    assert_eq!(m.encode(&x).unwrap(), x);
}

#[test]
fn single_row_and_empty_inputs() {
    let c = ModelConfig::tiny();
    let m = RtMae::<f64>::new(c, 2).unwrap();
    let x = Array2::from_elem((1, c.d), 0.3);
    let y = m.encode(&x).unwrap();
    assert_eq!(y.dim(), (1, c.d));
    assert!(y.iter().all(|v| v.is_finite()));
    assert!(m.encode(&Array2::zeros((0, c.d))).is_err());
}

#[test]
fn fully_masked_example_has_no_visible_embeddings() {
    let c = ModelConfig::tiny();
    let m = RtMae::<f64>::new(c, 3).unwrap();
    let ex = example(&c, 0);
    let mask = MaskConfig::uniform(c.frames, c.bins, true, true, MaskMode::Train);
    assert_eq!(m.embed_streams(&ex, &mask).unwrap().nrows(), 0);
    let visible = MaskConfig::uniform(c.frames, c.bins, false, false, MaskMode::Train);
    assert_eq!(m.embed_streams(&ex, &visible).unwrap().nrows(), c.discrete_slots());
    // Nothing visible and residuals dropped leaves the decoder with mask tokens only.
    let (logits, _) = m.forward(&ex, &mask, Gate::Drop, Gate::Drop).unwrap();
    assert_eq!(logits.count(), c.discrete_slots());
    assert!(logits.is_finite());
}

#[test]
fn residual_tokens_have_fixed_shape() {
    let c = ModelConfig::desk();
    let m = RtMae::<f32>::new(c, 4).unwrap();
    let set = m.extract_residuals(&example(&c, 1)).unwrap();
    assert_eq!(set.residual.dim(), (c.n_residual, c.d));
    assert_eq!(set.noise.unwrap().dim(), (c.n_noise, c.d));
}

#[test]
fn untrained_residual_streams_are_ignored() {
    let c = ModelConfig::tiny();
    let mut m = RtMae::<f64>::new(c, 5).unwrap();
    let ex = example(&c, 2);
    let set = m.extract_residuals(&example(&c, 3)).unwrap();
    let with = m.generate_tokens(&ex.attrs, Some(&set), Gate::Keep, true).unwrap();
    let without = m.generate_tokens(&ex.attrs, None, Gate::Keep, true).unwrap();
    assert_eq!(with, without);
    m.residual_examples = 1;
    let logits_with = m.generate_tokens(&ex.attrs, Some(&set), Gate::Keep, true).unwrap();
    assert_eq!(logits_with.dim(), (c.frames, c.bins));
}

#[test]
fn same_seed_same_model() {
    let a = RtMae::<f64>::new(ModelConfig::tiny(), 7).unwrap();
    let b = RtMae::<f64>::new(ModelConfig::tiny(), 7).unwrap();
    let c = RtMae::<f64>::new(ModelConfig::tiny(), 8).unwrap();
    assert_eq!(a.mel_codebook.value, b.mel_codebook.value);
    assert_ne!(a.mel_codebook.value, c.mel_codebook.value);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_cover_exactly_the_masked_slots(seed in any::<u64>(), mel in 0.0f64..1.0, attr in 0.0f64..1.0) {
        let c = ModelConfig::tiny();
        let m = RtMae::<f64>::new(c, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ratios = MaskRatios { mel, attrs: [attr; 4] };
        let mask = sample_training_masks(&ratios, c.frames, c.bins, &mut rng);
        let ex = example(&c, seed as usize % 5);
        let (logits, cache) = m.forward(&ex, &mask, Gate::Keep, Gate::Drop).unwrap();
        prop_assert_eq!(logits.count(), mask.masked_count());
        prop_assert!(logits.is_finite());
        prop_assert!(cache.residual_kept());
        prop_assert!(!cache.noise_kept());
    }

    #[test]
    fn untimed_encoder_is_permutation_equivariant(seed in any::<u64>(), rot in 1usize..6) {
        let c = ModelConfig::tiny();
        let m = RtMae::<f64>::new(c, seed).unwrap();
        let n = 6;
        let x = Array2::from_shape_fn((n, c.d), |(i, j)| ((i * 13 + j * 7 + seed as usize % 11) % 17) as f64 / 9.0 - 1.0);
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let px = x.select(ndarray::Axis(0), &perm);
        let y = m.encode(&x).unwrap().select(ndarray::Axis(0), &perm);
        let py = m.encode(&px).unwrap();
        for (a, b) in y.iter().zip(py.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
