use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtmae::club::{club_estimate, pool_tokens, ConditionalModel};
use rtmae::gradcheck::check_batch;
use rtmae::masking::{sample_training_masks, Gate, MaskConfig, MaskMode, MaskRatios};
use rtmae::model::{ModelConfig, RtMae, TokenizedExample};
use rtmae::tokenizer::AttributeTokens;
use rtmae::trainer::BatchItem;

fn random_example(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> TokenizedExample {
    TokenizedExample {
        mel: Array2::from_shape_simple_fn((cfg.frames, cfg.bins), || rng.gen_range(0..cfg.mel_vocab)),
        attrs: AttributeTokens {
            streams: std::array::from_fn(|k| {
                (0..cfg.frames).map(|_| rng.gen_range(0..cfg.attr_vocab[k])).collect()
            }),
            vocab: cfg.attr_vocab,
        },
    }
}

/// A tiny model, conditional, and batch whose CLUB estimate is positive, so
/// every parameter group receives gradient.
fn setup(seed: u64) -> Option<(RtMae<f64>, ConditionalModel<f64>, Vec<TokenizedExample>, Vec<MaskConfig>)> {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = RtMae::<f64>::new(cfg, seed).unwrap();
    let q = ConditionalModel::new(cfg.d, cfg.d, 6, &mut rng);
    let examples: Vec<_> = (0..3).map(|_| random_example(&cfg, &mut rng)).collect();
    let masks: Vec<_> = (0..3)
        .map(|_| sample_training_masks(&MaskRatios::default(), cfg.frames, cfg.bins, &mut rng))
        .collect();
    let mut x = Array2::zeros((3, cfg.d));
    let mut y = Array2::zeros((3, cfg.d));
    for (i, ex) in examples.iter().enumerate() {
        let set = model.extract_residuals(ex).unwrap();
        x.row_mut(i).assign(&pool_tokens(&set.residual).unwrap());
        y.row_mut(i).assign(&pool_tokens(set.noise.as_ref().unwrap()).unwrap());
    }
    let any_masked = masks.iter().all(|m| m.masked_count() > 0);
    (club_estimate(&x, &y, &q).unwrap() > 1e-3 && any_masked).then_some((model, q, examples, masks))
}

#[test]
fn every_group_matches_finite_differences() {
    let (model, q, examples, masks) = (0..200).find_map(setup).expect("a seed with positive CLUB");
    let batch: Vec<BatchItem> = examples
        .iter()
        .zip(&masks)
        .map(|(ex, m)| BatchItem {
            example: ex,
            mask: m.clone(),
            residual: Gate::Keep,
            noise: Gate::Keep,
        })
        .collect();
    let reports = check_batch(&model, &q, &batch, 0.1, (1.0, 1.0), 1e-5).unwrap();
    let mut worst = 0.0f64;
    for r in &reports {
        assert!(r.analytic_norm > 0.0, "{} has no gradient", r.name);
        assert!(r.rel_error <= 1e-4, "{}: rel error {:.3e}", r.name, r.rel_error);
        worst = worst.max(r.rel_error);
    }
    assert!(reports.iter().any(|r| r.name == "residual/queries"));
    assert!(reports.iter().any(|r| r.name.starts_with("club/")));
    eprintln!("{} groups, worst rel error {worst:.2e}", reports.len());
}

#[test]
fn dropped_residual_gives_zero_query_gradient() {
    use rtmae::nn::Parameters;
    let (mut model, mut q, examples, masks) = (0..200).find_map(setup).unwrap();
    let batch = vec![BatchItem {
        example: &examples[0],
        mask: masks[0].clone(),
        residual: Gate::Drop,
        noise: Gate::Drop,
    }];
    rtmae::trainer::batch_loss_and_grads(&mut model, &mut q, &batch, 0.1, (1.0, 1.0)).unwrap();
    for (name, p) in model.named_params() {
        if name.starts_with("residual/") || name.starts_with("noise/") {
            assert!(p.grad.iter().all(|&g| g == 0.0), "{name}");
        }
    }
    let _ = MaskMode::Train;
}
