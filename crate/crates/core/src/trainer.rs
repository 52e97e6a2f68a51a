//! Training loop, loss, and checkpoint persistence.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::club::{club_backward, pool_tokens, ClubEstimator, ConditionalModel};
use crate::error::{invalid, io_err, Error, Result};
use crate::masking::{
    inference_mask, residual_dropout_gate, sample_training_masks, DropoutGate, Gate, MaskConfig,
    MaskMode, MaskRatios,
};
use crate::model::{Logits, ModelConfig, RtMae, TokenizedExample};
use crate::nn::ops::cross_entropy;
use crate::nn::Parameters;
use crate::optim::{AdamConfig, AdamW};
use crate::real::Real;
use crate::synth::{mix64, read_corpus, Corpus};
use crate::tokenizer::{
    attribute_vocab, fit_mel_quantizer, quantize_attributes, quantize_mel, MelQuantizer,
    ATTRIBUTE_COUNT,
};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RTMAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const SPLIT_SALT: u64 = 0x6865_6c64_6f75_7421;

/// How `R_noise` is gated on noisy training examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseGatePolicy {
    /// Present only when the sample is noisy and the residual draw keeps `R`.
    Shared,
    /// Present on every noisy sample, independent of the residual draw.
    Independent,
}

impl NoiseGatePolicy {
    pub fn name(self) -> &'static str {
        match self {
            NoiseGatePolicy::Shared => "shared",
            NoiseGatePolicy::Independent => "independent",
        }
    }

    pub fn gate(self, noisy: bool, residual: Gate) -> Gate {
        let keep = noisy
            && match self {
                NoiseGatePolicy::Shared => residual.kept(),
                NoiseGatePolicy::Independent => true,
            };
        if keep {
            Gate::Keep
        } else {
            Gate::Drop
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_ratios: MaskRatios,
    pub tau: f64,
    /// CLUB penalty weight.
    pub lambda: f64,
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    /// Probability that an example uses one of the inference-shaped masks
    /// (analysis, generation, or both streams hidden) instead of i.i.d. masking.
    pub task_mix: f64,
    /// Leading epochs in which every example uses the generation mask.
    pub gen_warmup: usize,
    pub noise_gate: NoiseGatePolicy,
    pub mel_weight: f64,
    pub attr_weight: f64,
    pub club_lr: f64,
    pub club_hidden: usize,
    /// Width, depth and vocabulary; frames, bins and attribute vocabularies
    /// are taken from the corpus.
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            weight_decay: 0.01,
            mask_ratios: MaskRatios::default(),
            tau: 0.5,
            lambda: 0.1,
            seed: 0,
            corpus: None,
            checkpoint: None,
            metrics: None,
            task_mix: 0.75,
            gen_warmup: 6,
            noise_gate: NoiseGatePolicy::Shared,
            mel_weight: 1.0,
            attr_weight: 1.0,
            club_lr: 1e-3,
            club_hidden: 64,
            model: ModelConfig::desk(),
        }
    }

    /// Batch 128 for 400 epochs on the large network.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 400,
            batch_size: 128,
            club_hidden: 512,
            model: ModelConfig::paper_scale(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        for (name, v) in [("tau", self.tau), ("task_mix", self.task_mix)] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} = {v} outside [0, 1]"));
            }
        }
        self.mask_ratios.validate()?;
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.lambda < 0.0 || !(self.club_lr > 0.0)
        {
            return invalid("lr and club_lr must be positive; weight_decay and lambda non-negative");
        }
        if self.mel_weight < 0.0 || self.attr_weight < 0.0 {
            return invalid("loss weights must be non-negative");
        }
        if self.club_hidden == 0 {
            return invalid("club_hidden must be positive");
        }
        Ok(())
    }

    /// Flat `key=value` lines, one per field that has a value.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("mask_mel", self.mask_ratios.mel.to_string());
        for (k, r) in self.mask_ratios.attrs.iter().enumerate() {
            put(&format!("mask_attr{k}"), r.to_string());
        }
        put("tau", self.tau.to_string());
        put("lambda", self.lambda.to_string());
        put("seed", self.seed.to_string());
        put("task_mix", self.task_mix.to_string());
        put("gen_warmup", self.gen_warmup.to_string());
        put("noise_gate", self.noise_gate.name().to_string());
        put("mel_weight", self.mel_weight.to_string());
        put("attr_weight", self.attr_weight.to_string());
        put("club_lr", self.club_lr.to_string());
        put("club_hidden", self.club_hidden.to_string());
        put("d", m.d.to_string());
        put("heads", m.heads.to_string());
        put("enc_layers", m.enc_layers.to_string());
        put("dec_layers", m.dec_layers.to_string());
        put("ff_hidden", m.ff_hidden.to_string());
        put("n_residual", m.n_residual.to_string());
        put("n_noise", m.n_noise.to_string());
        put("v_bins", m.mel_vocab.to_string());
        s
    }

    /// Sets one key; returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad value `{v}` for `{key}`")))
        }
        let m = &mut self.model;
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "mask_mel" => self.mask_ratios.mel = num(key, value)?,
            "mask_attr" => self.mask_ratios.attrs = [num(key, value)?; ATTRIBUTE_COUNT],
            k if k.starts_with("mask_attr") => {
                let idx: usize = num(key, &k["mask_attr".len()..])?;
                if idx >= ATTRIBUTE_COUNT {
                    return invalid(format!("unknown key `{key}`"));
                }
                self.mask_ratios.attrs[idx] = num(key, value)?;
            }
            "tau" => self.tau = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "task_mix" => self.task_mix = num(key, value)?,
            "gen_warmup" => self.gen_warmup = num(key, value)?,
            "noise_gate" => {
                self.noise_gate = match value.trim() {
                    "shared" => NoiseGatePolicy::Shared,
                    "independent" => NoiseGatePolicy::Independent,
                    other => return invalid(format!("noise_gate `{other}`: shared|independent")),
                }
            }
            "mel_weight" => self.mel_weight = num(key, value)?,
            "attr_weight" => self.attr_weight = num(key, value)?,
            "club_lr" => self.club_lr = num(key, value)?,
            "club_hidden" => self.club_hidden = num(key, value)?,
            "d" => m.d = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "enc_layers" => m.enc_layers = num(key, value)?,
            "dec_layers" => m.dec_layers = num(key, value)?,
            "ff_hidden" => m.ff_hidden = num(key, value)?,
            "n_residual" => m.n_residual = num(key, value)?,
            "n_noise" => m.n_noise = num(key, value)?,
            "v_bins" => m.mel_vocab = num(key, value)?,
            "corpus" => self.corpus = Some(PathBuf::from(value.trim())),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value.trim())),
            "metrics" => self.metrics = Some(PathBuf::from(value.trim())),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Documented keys, for `--help`.
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("epochs", "passes over the training split (0 writes the initialization)"),
        ("batch_size", "examples per optimizer step"),
        ("lr", "AdamW learning rate"),
        ("weight_decay", "decoupled weight decay coefficient"),
        ("mask_mel", "i.i.d. masking probability of mel cells"),
        ("mask_attr", "i.i.d. masking probability of every attribute stream"),
        ("mask_attr0..3", "per-stream attribute masking probability"),
        ("tau", "probability of dropping the whole residual set"),
        ("lambda", "weight of the mutual-information penalty"),
        ("seed", "master seed"),
        ("task_mix", "fraction of examples using inference-shaped masks"),
        ("gen_warmup", "leading epochs trained on the generation mask only"),
        ("noise_gate", "R_noise gating on noisy samples: shared|independent"),
        ("mel_weight", "weight of the mel cross-entropy term"),
        ("attr_weight", "weight of the attribute cross-entropy term"),
        ("club_lr", "learning rate of the conditional density model"),
        ("club_hidden", "hidden width of the conditional density model"),
        ("d", "embedding width"),
        ("heads", "attention heads"),
        ("enc_layers", "encoder blocks"),
        ("dec_layers", "decoder blocks"),
        ("ff_hidden", "feed-forward hidden width"),
        ("n_residual", "residual token count"),
        ("n_noise", "noise residual token count (0 disables)"),
        ("v_bins", "mel quantizer bins"),
        ("corpus", "input corpus file"),
        ("checkpoint", "output checkpoint file"),
        ("metrics", "output metrics log (one JSON record per epoch)"),
    ];
}

/// Mean cross-entropy terms of one example.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mel: f64,
    /// Over all masked attribute positions.
    pub attr: f64,
    pub per_attr: [f64; ATTRIBUTE_COUNT],
    pub club_term: f64,
}

/// Weighted cross-entropy at masked positions plus `λ·max(0, club)`.
/// Returns the breakdown and `dL/dlogits`.
pub fn compute_loss<R: Real>(
    logits: &Logits<R>,
    targets: &TokenizedExample,
    mask: &MaskConfig,
    club_value: f64,
    lambda: f64,
    weights: (f64, f64),
) -> Result<(LossBreakdown, Logits<R>)> {
    let mel_expected: Vec<(usize, usize)> = mask
        .mel_mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|(ix, _)| ix)
        .collect();
    if logits.mel_slots != mel_expected || logits.mel.nrows() != mel_expected.len() {
        return invalid("mel logits do not cover exactly the masked positions");
    }
    if targets.mel.dim() != mask.mel_mask.dim() {
        return invalid("target grid shape differs from the mask");
    }
    let mel_targets: Vec<usize> = mel_expected.iter().map(|&ix| targets.mel[ix]).collect();
    let (mel_sum, mut dmel) = ce_sum(&logits.mel, &mel_targets)?;
    let mut attr_sum = 0.0;
    let mut attr_count = 0usize;
    let mut per_attr = [0.0; ATTRIBUTE_COUNT];
    let mut dattrs: [Array2<R>; ATTRIBUTE_COUNT] =
        std::array::from_fn(|k| Array2::zeros((0, logits.attrs[k].ncols())));
    for k in 0..ATTRIBUTE_COUNT {
        let expected: Vec<usize> = (0..mask.attr_masks[k].len())
            .filter(|&t| mask.attr_masks[k][t])
            .collect();
        if logits.attr_slots[k] != expected || logits.attrs[k].nrows() != expected.len() {
            return invalid(format!("attribute {k} logits do not cover the masked positions"));
        }
        let stream = &targets.attrs.streams[k];
        if expected.iter().any(|&t| t >= stream.len()) {
            return invalid(format!("attribute {k} target stream too short"));
        }
        let tk: Vec<usize> = expected.iter().map(|&t| stream[t]).collect();
        let (s, d) = ce_sum(&logits.attrs[k], &tk)?;
        per_attr[k] = if tk.is_empty() { 0.0 } else { s / tk.len() as f64 };
        attr_sum += s;
        attr_count += tk.len();
        dattrs[k] = d;
    }
    let mel = if mel_targets.is_empty() {
        0.0
    } else {
        mel_sum / mel_targets.len() as f64
    };
    let attr = if attr_count == 0 {
        0.0
    } else {
        attr_sum / attr_count as f64
    };
    let (wm, wa) = weights;
    let mel_scale = if mel_targets.is_empty() {
        0.0
    } else {
        wm / mel_targets.len() as f64
    };
    let attr_scale = if attr_count == 0 {
        0.0
    } else {
        wa / attr_count as f64
    };
    dmel.mapv_inplace(|v| v * R::of(mel_scale));
    for d in &mut dattrs {
        d.mapv_inplace(|v| v * R::of(attr_scale));
    }
    let club_term = lambda * club_value.max(0.0);
    Ok((
        LossBreakdown {
            total: wm * mel + wa * attr + club_term,
            mel,
            attr,
            per_attr,
            club_term,
        },
        Logits {
            mel_slots: logits.mel_slots.clone(),
            mel: dmel,
            attr_slots: logits.attr_slots.clone(),
            attrs: dattrs,
        },
    ))
}

/// Summed (not averaged) cross-entropy and its gradient.
fn ce_sum<R: Real>(logits: &Array2<R>, targets: &[usize]) -> Result<(f64, Array2<R>)> {
    if targets.is_empty() {
        return Ok((0.0, Array2::zeros(logits.raw_dim())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.ncols()) {
        return invalid(format!("target {bad} outside vocabulary {}", logits.ncols()));
    }
    let n = targets.len() as f64;
    let (mean, mut d) = cross_entropy(logits, targets);
    d.mapv_inplace(|v| v * R::of(n));
    Ok((mean * n, d))
}

/// One example's inputs to a batch step.
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub example: &'a TokenizedExample,
    pub mask: MaskConfig,
    pub residual: Gate,
    pub noise: Gate,
}

#[derive(Clone, Debug)]
pub struct BatchOutcome<R> {
    /// Mean over the batch of the weighted cross-entropy, plus the penalty.
    pub loss: f64,
    pub mel: f64,
    pub attr: f64,
    pub club: Option<f64>,
    pub club_term: f64,
    /// Pooled `(R, R_noise)` pairs that entered the estimator.
    pub pairs: Option<(Array2<R>, Array2<R>)>,
    pub residual_kept: usize,
    pub noise_kept: usize,
}

/// Total batch objective `mean_b CE_b + λ·max(0, CLUB)` with gradients
/// accumulated into `model` and `q` (the latter only for checks; training
/// fits `q` on its own likelihood).
pub fn batch_loss_and_grads<R: Real>(
    model: &mut RtMae<R>,
    q: &mut ConditionalModel<R>,
    batch: &[BatchItem<'_>],
    lambda: f64,
    weights: (f64, f64),
) -> Result<BatchOutcome<R>> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let d = model.config.d;
    // Pass 1: pooled residual pairs for the estimator.
    let pair_idx: Vec<usize> = (0..batch.len())
        .filter(|&i| batch[i].residual.kept() && batch[i].noise.kept() && model.noise.is_some())
        .collect();
    let mut direct: Vec<Option<(Array2<R>, Array2<R>)>> = vec![None; batch.len()];
    let mut club = None;
    let mut pairs = None;
    let mut club_term = 0.0;
    if pair_idx.len() >= 2 {
        let mut x = Array2::zeros((pair_idx.len(), d));
        let mut y = Array2::zeros((pair_idx.len(), d));
        for (row, &i) in pair_idx.iter().enumerate() {
            let set = model.extract_residuals(batch[i].example)?;
            x.row_mut(row).assign(&pool_tokens(&set.residual)?);
            y.row_mut(row)
                .assign(&pool_tokens(set.noise.as_ref().expect("noise extractor present"))?);
        }
        let value = crate::club::club_estimate(&x, &y, q)?;
        let dvalue = if value > 0.0 { lambda } else { 0.0 };
        let (value, dx, dy) = club_backward(&x, &y, q, dvalue)?;
        club_term = lambda * value.max(0.0);
        if dvalue != 0.0 {
            let n_r = model.config.n_residual;
            let n_n = model.config.n_noise;
            for (row, &i) in pair_idx.iter().enumerate() {
                let spread = |g: ndarray::ArrayView1<R>, n: usize| {
                    let scaled = g.mapv(|v| v / R::of(n as f64));
                    let mut m = Array2::zeros((n, d));
                    for mut r in m.rows_mut() {
                        r.assign(&scaled);
                    }
                    m
                };
                direct[i] = Some((spread(dx.row(row), n_r), spread(dy.row(row), n_n)));
            }
        }
        club = Some(value);
        pairs = Some((x, y));
    }
    // Pass 2: per-example forward/backward of the cross-entropy.
    let b = batch.len() as f64;
    let mut out = BatchOutcome {
        loss: 0.0,
        mel: 0.0,
        attr: 0.0,
        club,
        club_term,
        pairs,
        residual_kept: 0,
        noise_kept: 0,
    };
    for (i, item) in batch.iter().enumerate() {
        let (logits, cache) = model.forward(item.example, &item.mask, item.residual, item.noise)?;
        let (parts, mut dlogits) = compute_loss(&logits, item.example, &item.mask, 0.0, 0.0, weights)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite {
                epoch: 0,
                step: 0,
                detail: format!("cross-entropy {} on batch item {i}", parts.total),
            });
        }
        let inv_b = R::of(1.0 / b);
        dlogits.mel.mapv_inplace(|v| v * inv_b);
        for a in &mut dlogits.attrs {
            a.mapv_inplace(|v| v * inv_b);
        }
        let (dr, dn) = match &direct[i] {
            Some((dr, dn)) => (Some(dr), Some(dn)),
            None => (None, None),
        };
        model.backward(&cache, &dlogits, dr, dn);
        out.loss += parts.total / b;
        out.mel += parts.mel / b;
        out.attr += parts.attr / b;
        out.residual_kept += cache.residual_kept() as usize;
        out.noise_kept += cache.noise_kept() as usize;
    }
    out.loss += club_term;
    Ok(out)
}

/// Tokenized corpus with its fitted quantizer.
#[derive(Clone, Debug)]
pub struct TokenizedCorpus {
    pub quantizer: MelQuantizer,
    pub examples: Vec<TokenizedExample>,
    pub noisy: Vec<bool>,
}

pub fn tokenize_corpus(corpus: &Corpus, quantizer: MelQuantizer) -> TokenizedCorpus {
    let ranges = &corpus.spec.ranges;
    TokenizedCorpus {
        quantizer,
        examples: corpus
            .samples
            .iter()
            .map(|s| TokenizedExample {
                mel: quantize_mel(&s.grid, &quantizer),
                attrs: quantize_attributes(&s.factors, ranges),
            })
            .collect(),
        noisy: corpus.samples.iter().map(|s| s.factors.noise_present).collect(),
    }
}

/// Roughly 10% of indices, chosen by a fixed hash of the index.
pub fn is_heldout(index: usize) -> bool {
    mix64(index as u64 ^ SPLIT_SALT) % 10 == 0
}

pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| !is_heldout(i))
}

/// A model config whose grid and vocabularies match `corpus`.
pub fn model_config_for(base: &ModelConfig, corpus: &Corpus) -> ModelConfig {
    ModelConfig {
        frames: corpus.spec.frames,
        bins: corpus.spec.bins,
        attr_vocab: attribute_vocab(&corpus.spec.ranges),
        ..*base
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: RtMae<f32>,
    pub club: ConditionalModel<f32>,
    pub quantizer: MelQuantizer,
    /// `key=value` snapshot of the training configuration.
    pub config_text: String,
    pub epoch: u64,
    pub rng: RngState,
}

/// The conditional density model's hidden width.
fn club_hidden_of(q: &ConditionalModel<f32>) -> usize {
    q.hidden.w.value.ncols()
}

// Checkpoint layout (little-endian):
//
//   magic "RTMAECKP" | version u32 | config_text str
//   d heads enc_layers dec_layers ff_hidden n_residual n_noise mel_vocab
//   attr_vocab×4 frames bins club_hidden   (all u32)
//   quantizer: v_bins u32 | lo f64 | hi f64
//   epoch u64 | rng seed [u8;32] | stream u64 | word_pos lo u64 | hi u64
//   residual_examples u64 | noise_examples u64
//   block count u32, then per block: name str | rows u32 | cols u32 | f64×rows·cols

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&ckpt.config_text);
    let c = &ckpt.model.config;
    for v in [
        c.d,
        c.heads,
        c.enc_layers,
        c.dec_layers,
        c.ff_hidden,
        c.n_residual,
        c.n_noise,
        c.mel_vocab,
    ]
    .into_iter()
    .chain(c.attr_vocab)
    .chain([c.frames, c.bins, club_hidden_of(&ckpt.club)])
    {
        w.u32(v as u32);
    }
    w.u32(ckpt.quantizer.v_bins as u32);
    w.f64(ckpt.quantizer.lo);
    w.f64(ckpt.quantizer.hi);
    w.u64(ckpt.epoch);
    w.bytes(&ckpt.rng.seed);
    w.u64(ckpt.rng.stream);
    w.u64(ckpt.rng.word_pos as u64);
    w.u64((ckpt.rng.word_pos >> 64) as u64);
    w.u64(ckpt.model.residual_examples);
    w.u64(ckpt.model.noise_examples);
    let mut blocks = ckpt.model.named_params();
    let mut q = Vec::new();
    ckpt.club.collect("club", &mut q);
    blocks.extend(q);
    w.u32(blocks.len() as u32);
    for (name, p) in blocks {
        w.str(&name);
        w.u32(p.value.nrows() as u32);
        w.u32(p.value.ncols() as u32);
        for &v in p.value.iter() {
            w.f64(v as f64);
        }
    }
    w.buf
}

pub fn decode_checkpoint(data: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(data);
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt {
            field: "magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            field: "version".into(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let config_text = r.str("config_text")?;
    let mut u = |field: &str| -> Result<usize> { Ok(r.u32(field)? as usize) };
    let d = u("d")?;
    let heads = u("heads")?;
    let enc_layers = u("enc_layers")?;
    let dec_layers = u("dec_layers")?;
    let ff_hidden = u("ff_hidden")?;
    let n_residual = u("n_residual")?;
    let n_noise = u("n_noise")?;
    let mel_vocab = u("mel_vocab")?;
    let mut attr_vocab = [0; ATTRIBUTE_COUNT];
    for v in &mut attr_vocab {
        *v = u("attr_vocab")?;
    }
    let frames = u("frames")?;
    let bins = u("bins")?;
    let club_hidden = u("club_hidden")?;
    let config = ModelConfig {
        d,
        heads,
        enc_layers,
        dec_layers,
        ff_hidden,
        n_residual,
        n_noise,
        mel_vocab,
        attr_vocab,
        frames,
        bins,
    };
    config.validate().map_err(|_| Error::Corrupt {
        field: "model_config".into(),
    })?;
    if club_hidden == 0 {
        return Err(Error::Corrupt {
            field: "club_hidden".into(),
        });
    }
    let v_bins = r.u32("quantizer.v_bins")? as usize;
    let lo = r.f64("quantizer.lo")?;
    let hi = r.f64("quantizer.hi")?;
    let quantizer = MelQuantizer::new(v_bins, lo, hi).map_err(|_| Error::Corrupt {
        field: "quantizer".into(),
    })?;
    let epoch = r.u64("epoch")?;
    let seed: [u8; 32] = r.take(32, "rng.seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng.stream")?;
    let lo_pos = r.u64("rng.word_pos")? as u128;
    let hi_pos = r.u64("rng.word_pos")? as u128;
    let residual_examples = r.u64("residual_examples")?;
    let noise_examples = r.u64("noise_examples")?;
    let mut model = RtMae::<f32>::new(config, 0)?;
    model.residual_examples = residual_examples;
    model.noise_examples = noise_examples;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut club = ConditionalModel::<f32>::new(d, d, club_hidden, &mut rng);
    let count = r.u32("block_count")? as usize;
    {
        let mut targets = model.named_params_mut();
        let mut q = Vec::new();
        club.collect_mut("club", &mut q);
        targets.extend(q);
        if count != targets.len() {
            return Err(Error::Corrupt {
                field: "block_count".into(),
            });
        }
        for (expected, p) in targets {
            let name = r.str("block.name")?;
            if name != expected {
                return Err(Error::Corrupt { field: name });
            }
            let rows = r.u32(&name)? as usize;
            let cols = r.u32(&name)? as usize;
            if (rows, cols) != p.value.dim() {
                return Err(Error::Corrupt { field: name });
            }
            for v in p.value.iter_mut() {
                *v = r.f64(&name)? as f32;
            }
        }
    }
    if !r.is_empty() {
        return Err(Error::Corrupt {
            field: "trailing bytes".into(),
        });
    }
    Ok(Checkpoint {
        model,
        club,
        quantizer,
        config_text,
        epoch,
        rng: RngState {
            seed,
            stream,
            word_pos: lo_pos | hi_pos << 64,
        },
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&data)
}

/// One metrics record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub ce_mel: f64,
    pub ce_attr: f64,
    pub club: f64,
    pub club_nll: f64,
    pub residual_kept: f64,
    pub noise_kept: f64,
    pub heldout_ce_mel: f64,
}

impl EpochMetrics {
    pub fn to_json(&self) -> String {
        let mut m = serde_json::Map::new();
        let mut put = |k: &str, v: f64| {
            m.insert(k.to_string(), serde_json::json!(v));
        };
        put("epoch", self.epoch as f64);
        put("loss", self.loss);
        put("ce_mel", self.ce_mel);
        put("ce_attr", self.ce_attr);
        put("club", self.club);
        put("club_nll", self.club_nll);
        put("residual_kept", self.residual_kept);
        put("noise_kept", self.noise_kept);
        put("heldout_ce_mel", self.heldout_ce_mel);
        serde_json::Value::Object(m).to_string()
    }
}

fn training_mask<G: Rng>(
    cfg: &TrainConfig,
    epoch: usize,
    frames: usize,
    bins: usize,
    rng: &mut G,
) -> MaskConfig {
    if epoch < cfg.gen_warmup {
        let mut m = inference_mask(MaskMode::Generation, frames, bins).expect("inference mode");
        m.mode = MaskMode::Train;
        m
    } else if cfg.task_mix > 0.0 && rng.gen::<f64>() < cfg.task_mix {
        let mode = [MaskMode::Analysis, MaskMode::Generation, MaskMode::AblateROnly]
            [rng.gen_range(0..3)];
        let mut m = inference_mask(mode, frames, bins).expect("inference mode");
        m.mode = MaskMode::Train;
        m
    } else {
        sample_training_masks(&cfg.mask_ratios, frames, bins, rng)
    }
}

/// Mean mel cross-entropy on held-out examples with mel fully masked and
/// attributes visible (no residual).
fn heldout_mel_ce(model: &RtMae<f32>, data: &TokenizedCorpus, heldout: &[usize]) -> Result<f64> {
    if heldout.is_empty() {
        return Ok(0.0);
    }
    let c = &model.config;
    let mask = inference_mask(MaskMode::AblateAOnly, c.frames, c.bins)?;
    let mut total = 0.0;
    for &i in heldout {
        let (logits, _) = model.forward(&data.examples[i], &mask, Gate::Drop, Gate::Drop)?;
        let (parts, _) = compute_loss(&logits, &data.examples[i], &mask, 0.0, 0.0, (1.0, 0.0))?;
        total += parts.mel;
    }
    Ok(total / heldout.len() as f64)
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains on the non-held-out split of `corpus`, writing one JSON record per
/// epoch to `log`.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, log: &mut dyn Write) -> Result<TrainOutput> {
    cfg.validate()?;
    let model_cfg = model_config_for(&cfg.model, corpus);
    model_cfg.validate()?;
    let (train_idx, heldout_idx) = split_indices(corpus.len());
    if train_idx.is_empty() {
        return invalid("training split is empty");
    }
    let quantizer = fit_mel_quantizer(
        train_idx.iter().map(|&i| &corpus.samples[i].grid),
        model_cfg.mel_vocab,
    )?;
    let data = tokenize_corpus(corpus, quantizer);
    let mut model = RtMae::<f32>::new(model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut club = ClubEstimator::<f32>::new(model_cfg.d, cfg.club_hidden, cfg.club_lr, &mut rng);
    let mut opt = AdamW::<f32>::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let gate = DropoutGate::new(cfg.tau)?;
    let weights = (cfg.mel_weight, cfg.attr_weight);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = EpochMetrics {
            epoch: epoch + 1,
            loss: 0.0,
            ce_mel: 0.0,
            ce_attr: 0.0,
            club: 0.0,
            club_nll: 0.0,
            residual_kept: 0.0,
            noise_kept: 0.0,
            heldout_ce_mel: 0.0,
        };
        let mut steps = 0usize;
        let mut club_steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| {
                    let mask = training_mask(cfg, epoch, model_cfg.frames, model_cfg.bins, &mut rng);
                    let residual = residual_dropout_gate(gate, rng.gen::<f64>())
                        .expect("draw in [0, 1)");
                    let noise = cfg.noise_gate.gate(data.noisy[i], residual);
                    BatchItem {
                        example: &data.examples[i],
                        mask,
                        residual,
                        noise,
                    }
                })
                .collect();
            model.zero_grad();
            let out = batch_loss_and_grads(&mut model, &mut club.q, &batch, cfg.lambda, weights)
                .map_err(|e| match e {
                    Error::NonFinite { detail, .. } => Error::NonFinite {
                        epoch: epoch + 1,
                        step,
                        detail,
                    },
                    other => other,
                })?;
            if !out.loss.is_finite() {
                let _ = writeln!(
                    log,
                    "{{\"epoch\":{},\"step\":{},\"non_finite\":1}}",
                    epoch + 1,
                    step
                );
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    step,
                    detail: format!("batch loss {}", out.loss),
                });
            }
            opt.step(&mut model);
            model.residual_examples += out.residual_kept as u64;
            model.noise_examples += out.noise_kept as u64;
            if let Some((x, y)) = &out.pairs {
                sums.club_nll += club.fit_conditional_step(x, y)?;
                sums.club += out.club.unwrap_or(0.0);
                club_steps += 1;
            }
            sums.loss += out.loss;
            sums.ce_mel += out.mel;
            sums.ce_attr += out.attr;
            sums.residual_kept += out.residual_kept as f64;
            sums.noise_kept += out.noise_kept as f64;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        sums.loss /= n;
        sums.ce_mel /= n;
        sums.ce_attr /= n;
        if club_steps > 0 {
            sums.club /= club_steps as f64;
            sums.club_nll /= club_steps as f64;
        }
        sums.residual_kept /= order.len() as f64;
        sums.noise_kept /= order.len() as f64;
        sums.heldout_ce_mel = heldout_mel_ce(&model, &data, &heldout_idx)?;
        writeln!(log, "{}", sums.to_json()).map_err(io_err("metrics log"))?;
        metrics.push(sums);
    }
    model.zero_grad();
    club.q.zero_grad();
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            model,
            club: club.q,
            quantizer,
            config_text: cfg.to_kv(),
            epoch: cfg.epochs as u64,
            rng: RngState::capture(&rng),
        },
        metrics,
    })
}

/// Reads the corpus named in `cfg`, trains, and writes the checkpoint and
/// metrics log to their configured paths.
pub fn train_from_paths(cfg: &TrainConfig) -> Result<TrainOutput> {
    let corpus_path = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("no corpus path given".into()))?;
    let ckpt_path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("no checkpoint path given".into()))?;
    let corpus = read_corpus(corpus_path)?;
    let mut log = Vec::new();
    let result = train(cfg, &corpus, &mut log);
    if let Some(p) = &cfg.metrics {
        std::fs::write(p, &log).map_err(io_err(p))?;
    }
    let out = result?;
    save_checkpoint(&out.checkpoint, ckpt_path)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::AttributeTokens;

    fn example(frames: usize, bins: usize) -> TokenizedExample {
        TokenizedExample {
            mel: Array2::from_shape_fn((frames, bins), |(t, f)| (t + f) % 4),
            attrs: AttributeTokens {
                streams: std::array::from_fn(|k| (0..frames).map(|t| (t + k) % 2).collect()),
                vocab: [4, 3, 2, 4],
            },
        }
    }

    fn logits_for(mask: &MaskConfig, v: usize, fill: impl Fn(usize, usize) -> f64) -> Logits<f64> {
        let mel_slots: Vec<_> = mask
            .mel_mask
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(|(ix, _)| ix)
            .collect();
        let mel = Array2::from_shape_fn((mel_slots.len(), v), |(i, j)| fill(i, j));
        let attr_slots: [Vec<usize>; 4] = std::array::from_fn(|k| {
            (0..mask.attr_masks[k].len())
                .filter(|&t| mask.attr_masks[k][t])
                .collect()
        });
        let attrs = std::array::from_fn(|k| Array2::zeros((attr_slots[k].len(), [4, 3, 2, 4][k])));
        Logits {
            mel_slots,
            mel,
            attr_slots,
            attrs,
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mask = MaskConfig::uniform(4, 4, true, false, MaskMode::Train);
        let mut ex = example(4, 4);
        ex.mel.mapv_inplace(|t| t % 4);
        let logits = logits_for(&mask, 64, |_, _| 0.0);
        let ex64 = TokenizedExample {
            mel: ex.mel.mapv(|t| t * 10),
            ..ex
        };
        let (parts, _) = compute_loss(&logits, &ex64, &mask, 0.0, 0.1, (1.0, 1.0)).unwrap();
        assert!((parts.mel - 64f64.ln()).abs() < 1e-12);
        assert!((parts.mel - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn perfect_logits_give_zero() {
        let mask = MaskConfig::uniform(4, 4, true, false, MaskMode::Train);
        let ex = example(4, 4);
        let targets: Vec<usize> = ex.mel.iter().copied().collect();
        let logits = logits_for(&mask, 4, |i, j| if targets[i] == j { 60.0 } else { 0.0 });
        let (parts, _) = compute_loss(&logits, &ex, &mask, -3.0, 0.1, (1.0, 1.0)).unwrap();
        assert!(parts.total < 1e-20);
    }

    #[test]
    fn empty_masks_leave_only_penalty() {
        let mask = MaskConfig::uniform(4, 4, false, false, MaskMode::Train);
        let logits = logits_for(&mask, 4, |_, _| 0.0);
        let ex = example(4, 4);
        let (parts, _) = compute_loss(&logits, &ex, &mask, 0.7, 0.1, (1.0, 1.0)).unwrap();
        assert_eq!(parts.total, 0.1 * 0.7);
        let (neg, _) = compute_loss(&logits, &ex, &mask, -0.7, 0.1, (1.0, 1.0)).unwrap();
        assert_eq!(neg.total, 0.0);
    }

    #[test]
    fn position_mismatch_rejected() {
        let mask = MaskConfig::uniform(4, 4, true, false, MaskMode::Train);
        let other = MaskConfig::uniform(4, 4, false, false, MaskMode::Train);
        let logits = logits_for(&other, 4, |_, _| 0.0);
        assert!(compute_loss(&logits, &example(4, 4), &mask, 0.0, 0.1, (1.0, 1.0)).is_err());
    }

    #[test]
    fn split_is_about_ten_percent() {
        let (train, held) = split_indices(2000);
        assert_eq!(train.len() + held.len(), 2000);
        assert!((150..250).contains(&held.len()), "{}", held.len());
        assert_eq!(split_indices(2000).1, held);
    }

    #[test]
    fn warmup_epochs_use_the_generation_mask() {
        let cfg = TrainConfig {
            gen_warmup: 2,
            task_mix: 0.0,
            ..TrainConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for epoch in 0..2 {
            let m = training_mask(&cfg, epoch, 4, 4, &mut rng);
            assert!(m.mel_mask.iter().all(|&b| b));
            assert!(m.attr_masks.iter().flatten().all(|&b| !b));
            assert_eq!(m.mode, MaskMode::Train);
        }
        let later: usize = (0..20)
            .map(|_| training_mask(&cfg, 2, 4, 4, &mut rng).masked_count())
            .sum();
        assert!(later < 20 * 32, "i.i.d. masks after the warm-up");
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = TrainConfig::desk();
        cfg.tau = 0.25;
        cfg.gen_warmup = 3;
        cfg.noise_gate = NoiseGatePolicy::Independent;
        let mut back = TrainConfig {
            epochs: 1,
            lambda: 0.0,
            ..TrainConfig::desk()
        };
        for line in cfg.to_kv().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set(k, v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert!(!back.set("nope", "1").unwrap());
        assert!(back.set("tau", "abc").is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: [u64; 7] = rng.gen();
        let mut back = RngState::capture(&rng).restore();
        assert_eq!(rng.gen::<u64>(), back.gen::<u64>());
    }
}
