//! The residual-token masked autoencoder.
//!
//! Sequence layout, shared by the encoder (visible subset) and the decoder
//! (complete sequence):
//!
//! ```text
//! [ mel cells, row-major T·F | pitch T | loudness T | speaker T | content T | R (N) | R_noise (N_noise) ]
//! ```
//!
//! Residual tokens come from single-head cross-attention of learned queries
//! over the embeddings of the full, unmasked mel grid. They are encoder
//! inputs only; no head predicts them.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::masking::{Gate, MaskConfig};
use crate::nn::ops::argmax_rows;
use crate::nn::{
    join, CrossAttention, CrossAttentionCache, Linear, Param, Parameters, Stack, StackCache,
    TimeLayout,
};
use crate::real::Real;
use crate::synth::MelGrid;
use crate::tokenizer::{
    dequantize_mel, quantize_mel, AttributeTokens, MelQuantizer, MelTokenGrid, ATTRIBUTE_COUNT,
};

pub const STREAM_MEL: usize = 0;
/// Attribute `k` uses stream type `STREAM_ATTR0 + k`.
pub const STREAM_ATTR0: usize = 1;
pub const STREAM_RESIDUAL: usize = 5;
pub const STREAM_NOISE: usize = 6;
pub const STREAM_TYPES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_hidden: usize,
    /// Residual token count N.
    pub n_residual: usize,
    pub n_noise: usize,
    pub mel_vocab: usize,
    pub attr_vocab: [usize; ATTRIBUTE_COUNT],
    pub frames: usize,
    pub bins: usize,
}

impl ModelConfig {
    /// CPU-sized default.
    pub fn desk() -> Self {
        Self {
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff_hidden: 128,
            n_residual: 8,
            n_noise: 4,
            mel_vocab: 64,
            attr_vocab: [16, 8, 8, 16],
            frames: 16,
            bins: 16,
        }
    }

    /// 6+6 layers, N = 25 residual vectors of width 512.
    pub fn paper_scale() -> Self {
        Self {
            d: 512,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            ff_hidden: 2048,
            n_residual: 25,
            n_noise: 1,
            mel_vocab: 64,
            attr_vocab: [16, 8, 8, 16],
            frames: 32,
            bins: 32,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_hidden: 16,
            n_residual: 2,
            n_noise: 2,
            mel_vocab: 4,
            attr_vocab: [4, 3, 2, 4],
            frames: 4,
            bins: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return invalid(format!("d = {} not divisible by heads = {}", self.d, self.heads));
        }
        if self.n_residual == 0 {
            return invalid("at least one residual token is required");
        }
        if self.mel_vocab < 2 || self.attr_vocab.iter().any(|&v| v == 0) {
            return invalid("vocabularies must be non-empty (mel needs at least 2 bins)");
        }
        if self.frames == 0 || self.bins == 0 || self.ff_hidden == 0 {
            return invalid("frames, bins and ff_hidden must be positive");
        }
        Ok(())
    }

    pub fn discrete_slots(&self) -> usize {
        self.frames * self.bins + ATTRIBUTE_COUNT * self.frames
    }
}

/// Continuous residual tokens `R` and optional `R_noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTokenSet<R> {
    pub residual: Array2<R>,
    pub noise: Option<Array2<R>>,
}

/// Keys, values and attention weights of one residual extraction.
pub type CrossAttentionTrace<R> = CrossAttentionCache<R>;

/// A tokenized utterance: mel tokens and the four attribute streams.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedExample {
    pub mel: MelTokenGrid,
    pub attrs: AttributeTokens,
}

/// Vocabulary logits at every masked discrete position.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<R> {
    pub mel_slots: Vec<(usize, usize)>,
    pub mel: Array2<R>,
    pub attr_slots: [Vec<usize>; ATTRIBUTE_COUNT],
    pub attrs: [Array2<R>; ATTRIBUTE_COUNT],
}

impl<R: Real> Logits<R> {
    pub fn count(&self) -> usize {
        self.mel_slots.len() + self.attr_slots.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.mel.iter().chain(self.attrs.iter().flatten()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Mel(usize, usize),
    Attr(usize, usize),
}

#[derive(Clone, Debug)]
struct Layout {
    slots: Vec<Slot>,
    /// Row of each slot in the encoder input, if visible.
    enc_row: Vec<Option<usize>>,
    visible: usize,
}

impl Slot {
    fn frame(self) -> usize {
        match self {
            Slot::Mel(t, _) | Slot::Attr(_, t) => t,
        }
    }
}

impl Layout {
    /// Frames of the encoder rows: visible slots, then `extra` untimed tokens.
    fn encoder_times(&self, extra: usize) -> TimeLayout {
        let mut times = vec![None; self.visible + extra];
        for (slot, row) in self.slots.iter().zip(&self.enc_row) {
            if let Some(r) = row {
                times[*r] = Some(slot.frame());
            }
        }
        TimeLayout::new(&times)
    }

    /// Frames of the decoder rows: every slot, then `extra` untimed tokens.
    fn decoder_times(&self, extra: usize) -> TimeLayout {
        let times: Vec<Option<usize>> = self
            .slots
            .iter()
            .map(|s| Some(s.frame()))
            .chain(std::iter::repeat(None).take(extra))
            .collect();
        TimeLayout::new(&times)
    }

    fn new(mask: &MaskConfig) -> Self {
        let (frames, bins) = mask.mel_mask.dim();
        let mut slots = Vec::with_capacity(frames * bins + ATTRIBUTE_COUNT * frames);
        let mut enc_row = Vec::with_capacity(slots.capacity());
        let mut visible = 0;
        let mut push = |slot: Slot, masked: bool| {
            slots.push(slot);
            if masked {
                enc_row.push(None);
            } else {
                enc_row.push(Some(visible));
                visible += 1;
            }
        };
        for t in 0..frames {
            for f in 0..bins {
                push(Slot::Mel(t, f), mask.mel_mask[[t, f]]);
            }
        }
        for (k, m) in mask.attr_masks.iter().enumerate() {
            for (t, &masked) in m.iter().enumerate() {
                push(Slot::Attr(k, t), masked);
            }
        }
        Self {
            slots,
            enc_row,
            visible,
        }
    }
}

#[derive(Clone, Debug)]
struct CoreCache<R> {
    layout: Layout,
    n_residual: usize,
    n_noise: usize,
    encoder: Option<StackCache<R>>,
    decoder: StackCache<R>,
    /// Decoder output rows feeding each head, in logit order.
    mel_head_in: Array2<R>,
    attr_head_in: [Array2<R>; ATTRIBUTE_COUNT],
    mel_rows: Vec<usize>,
    attr_rows: [Vec<usize>; ATTRIBUTE_COUNT],
    tokens: TokenizedExample,
}

/// Everything [`RtMae::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<R> {
    core: CoreCache<R>,
    residual: Option<CrossAttentionCache<R>>,
    noise: Option<CrossAttentionCache<R>>,
    /// The residual tokens that entered the sequence.
    pub tokens: Option<ResidualTokenSet<R>>,
}

impl<R> ForwardCache<R> {
    pub fn residual_kept(&self) -> bool {
        self.residual.is_some()
    }

    pub fn noise_kept(&self) -> bool {
        self.noise.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct RtMae<R> {
    pub config: ModelConfig,
    pub mel_codebook: Param<R>,
    pub attr_codebooks: [Param<R>; ATTRIBUTE_COUNT],
    pub time_pos: Param<R>,
    pub freq_pos: Param<R>,
    pub stream_emb: Param<R>,
    pub mask_emb: Param<R>,
    pub residual: CrossAttention<R>,
    pub noise: Option<CrossAttention<R>>,
    pub encoder: Stack<R>,
    pub decoder: Stack<R>,
    pub mel_head: Linear<R>,
    pub attr_heads: [Linear<R>; ATTRIBUTE_COUNT],
    /// Training examples in which `R` / `R_noise` entered the sequence. A
    /// residual stream that never did is ignored by the inference entry points.
    pub residual_examples: u64,
    pub noise_examples: u64,
}

const EMBED_STD: f64 = 0.3;

/// Cross-attention of the latent queries over `grid_embeddings`.
pub fn residual_extract<R: Real>(
    grid_embeddings: &Array2<R>,
    extractor: &CrossAttention<R>,
) -> Result<(Array2<R>, CrossAttentionTrace<R>)> {
    if grid_embeddings.nrows() == 0 {
        return invalid("residual extraction needs a non-empty input sequence");
    }
    if grid_embeddings.ncols() != extractor.queries.value.ncols() {
        return invalid("grid embedding width differs from query width");
    }
    Ok(extractor.forward(grid_embeddings))
}

impl<R: Real> RtMae<R> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let emb = |rows: usize, rng: &mut ChaCha8Rng| Param::normal(rows, d, EMBED_STD, true, rng);
        let mel_codebook = emb(config.mel_vocab, &mut rng);
        let attr_codebooks = std::array::from_fn(|k| emb(config.attr_vocab[k], &mut rng));
        let time_pos = emb(config.frames, &mut rng);
        let freq_pos = emb(config.bins, &mut rng);
        let stream_emb = emb(STREAM_TYPES, &mut rng);
        let mask_emb = emb(1, &mut rng);
        let residual = CrossAttention::new(config.n_residual, d, &mut rng);
        let noise = (config.n_noise > 0).then(|| CrossAttention::new(config.n_noise, d, &mut rng));
        let encoder = Stack::new(config.enc_layers, d, config.heads, config.ff_hidden, &mut rng);
        let decoder = Stack::new(config.dec_layers, d, config.heads, config.ff_hidden, &mut rng);
        let mel_head = Linear::new(d, config.mel_vocab, &mut rng);
        let attr_heads = std::array::from_fn(|k| Linear::new(d, config.attr_vocab[k], &mut rng));
        Ok(Self {
            config,
            mel_codebook,
            attr_codebooks,
            time_pos,
            freq_pos,
            stream_emb,
            mask_emb,
            residual,
            noise,
            encoder,
            decoder,
            mel_head,
            attr_heads,
            residual_examples: 0,
            noise_examples: 0,
        })
    }

    fn check_example(&self, ex: &TokenizedExample) -> Result<()> {
        let c = &self.config;
        if ex.mel.dim() != (c.frames, c.bins) {
            return invalid(format!(
                "mel grid {:?} does not match model {}x{}",
                ex.mel.dim(),
                c.frames,
                c.bins
            ));
        }
        if let Some(&bad) = ex.mel.iter().find(|&&t| t >= c.mel_vocab) {
            return invalid(format!("mel token {bad} outside vocabulary {}", c.mel_vocab));
        }
        if ex.attrs.frames() != c.frames {
            return invalid("attribute streams do not match the model frame count");
        }
        for k in 0..ATTRIBUTE_COUNT {
            let s = &ex.attrs.streams[k];
            if s.len() != c.frames {
                return invalid(format!("attribute stream {k} has wrong length"));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= c.attr_vocab[k]) {
                return invalid(format!(
                    "attribute {k} token {bad} outside vocabulary {}",
                    c.attr_vocab[k]
                ));
            }
        }
        Ok(())
    }

    fn check_mask(&self, mask: &MaskConfig) -> Result<()> {
        let c = &self.config;
        if mask.mel_mask.dim() != (c.frames, c.bins)
            || mask.attr_masks.iter().any(|m| m.len() != c.frames)
        {
            return invalid("mask configuration does not match the model sequence layout");
        }
        Ok(())
    }

    fn slot_position(&self, slot: Slot) -> Array2<R> {
        let mut e = Array2::zeros((1, self.config.d));
        let mut row = e.row_mut(0);
        match slot {
            Slot::Mel(t, f) => {
                row += &self.time_pos.value.row(t);
                row += &self.freq_pos.value.row(f);
                row += &self.stream_emb.value.row(STREAM_MEL);
            }
            Slot::Attr(k, t) => {
                row += &self.time_pos.value.row(t);
                row += &self.stream_emb.value.row(STREAM_ATTR0 + k);
            }
        }
        e
    }

    fn slot_embedding(&self, slot: Slot, ex: &TokenizedExample) -> Array2<R> {
        let mut e = self.slot_position(slot);
        let mut row = e.row_mut(0);
        match slot {
            Slot::Mel(t, f) => row += &self.mel_codebook.value.row(ex.mel[[t, f]]),
            Slot::Attr(k, t) => row += &self.attr_codebooks[k].value.row(ex.attrs.streams[k][t]),
        }
        e
    }

    fn scatter_position(&mut self, slot: Slot, g: ArrayView1<R>) {
        match slot {
            Slot::Mel(t, f) => {
                self.time_pos.scatter_row(t, g);
                self.freq_pos.scatter_row(f, g);
                self.stream_emb.scatter_row(STREAM_MEL, g);
            }
            Slot::Attr(k, t) => {
                self.time_pos.scatter_row(t, g);
                self.stream_emb.scatter_row(STREAM_ATTR0 + k, g);
            }
        }
    }

    fn scatter_embedding(&mut self, slot: Slot, ex: &TokenizedExample, g: ArrayView1<R>) {
        self.scatter_position(slot, g);
        match slot {
            Slot::Mel(t, f) => self.mel_codebook.scatter_row(ex.mel[[t, f]], g),
            Slot::Attr(k, t) => self.attr_codebooks[k].scatter_row(ex.attrs.streams[k][t], g),
        }
    }

    /// One embedding per visible token, in layout order.
    pub fn embed_streams(&self, ex: &TokenizedExample, mask: &MaskConfig) -> Result<Array2<R>> {
        self.check_example(ex)?;
        self.check_mask(mask)?;
        let layout = Layout::new(mask);
        Ok(self.embed_visible(&layout, ex))
    }

    fn embed_visible(&self, layout: &Layout, ex: &TokenizedExample) -> Array2<R> {
        let mut out = Array2::zeros((layout.visible, self.config.d));
        for (slot, row) in layout.slots.iter().zip(&layout.enc_row) {
            if let Some(r) = row {
                out.row_mut(*r).assign(&self.slot_embedding(*slot, ex).row(0));
            }
        }
        out
    }

    /// Embeddings of every mel cell of the unmasked grid (row-major).
    pub fn grid_embeddings(&self, ex: &TokenizedExample) -> Array2<R> {
        let c = &self.config;
        let mut out = Array2::zeros((c.frames * c.bins, c.d));
        for t in 0..c.frames {
            for f in 0..c.bins {
                out.row_mut(t * c.bins + f)
                    .assign(&self.slot_embedding(Slot::Mel(t, f), ex).row(0));
            }
        }
        out
    }

    /// Residual (and noise) tokens of an utterance; always computed from the
    /// complete mel grid.
    pub fn extract_residuals(&self, ex: &TokenizedExample) -> Result<ResidualTokenSet<R>> {
        self.check_example(ex)?;
        let grid = self.grid_embeddings(ex);
        let (residual, _) = residual_extract(&grid, &self.residual)?;
        let noise = match &self.noise {
            Some(n) => Some(residual_extract(&grid, n)?.0),
            None => None,
        };
        Ok(ResidualTokenSet { residual, noise })
    }

    /// Runs the encoder stack on rows without frame positions, so only the
    /// untimed attention offset applies. Output length equals input length.
    pub fn encode(&self, seq: &Array2<R>) -> Result<Array2<R>> {
        if seq.nrows() == 0 {
            return invalid("cannot encode an empty sequence");
        }
        Ok(self.encoder.forward(seq, TimeLayout::untimed(seq.nrows())).0)
    }

    /// Completes `encoded` with mask tokens and decodes. `encoded` holds the
    /// visible discrete tokens in layout order followed by `extra_tokens`
    /// residual rows.
    pub fn decode_with_masks(
        &self,
        encoded: &Array2<R>,
        mask: &MaskConfig,
        extra_tokens: usize,
    ) -> Result<Logits<R>> {
        self.check_mask(mask)?;
        let layout = Layout::new(mask);
        if encoded.nrows() != layout.visible + extra_tokens {
            return invalid(format!(
                "encoded sequence has {} rows, mask layout expects {}",
                encoded.nrows(),
                layout.visible + extra_tokens
            ));
        }
        Ok(self.decode(layout, encoded, extra_tokens).0)
    }

    fn decode(
        &self,
        layout: Layout,
        encoded: &Array2<R>,
        extra: usize,
    ) -> (Logits<R>, StackCache<R>, Array2<R>, [Array2<R>; ATTRIBUTE_COUNT], Vec<usize>, [Vec<usize>; ATTRIBUTE_COUNT], Layout) {
        let d = self.config.d;
        let n_slots = layout.slots.len();
        let mut dec_in = Array2::zeros((n_slots + extra, d));
        let mut mel_slots = Vec::new();
        let mut mel_rows = Vec::new();
        let mut attr_slots: [Vec<usize>; ATTRIBUTE_COUNT] = Default::default();
        let mut attr_rows: [Vec<usize>; ATTRIBUTE_COUNT] = Default::default();
        for (i, (slot, enc)) in layout.slots.iter().zip(&layout.enc_row).enumerate() {
            let mut row = dec_in.row_mut(i);
            match enc {
                Some(r) => row.assign(&encoded.row(*r)),
                None => {
                    row.assign(&self.mask_emb.value.row(0));
                    row += &self.slot_position(*slot).row(0);
                    match *slot {
                        Slot::Mel(t, f) => {
                            mel_slots.push((t, f));
                            mel_rows.push(i);
                        }
                        Slot::Attr(k, t) => {
                            attr_slots[k].push(t);
                            attr_rows[k].push(i);
                        }
                    }
                }
            }
        }
        for j in 0..extra {
            dec_in.row_mut(n_slots + j).assign(&encoded.row(layout.visible + j));
        }
        let (dec_out, dec_cache) = self.decoder.forward(&dec_in, layout.decoder_times(extra));
        let gather = |rows: &[usize]| {
            let mut m = Array2::zeros((rows.len(), d));
            for (o, &r) in rows.iter().enumerate() {
                m.row_mut(o).assign(&dec_out.row(r));
            }
            m
        };
        let mel_in = gather(&mel_rows);
        let attr_in: [Array2<R>; ATTRIBUTE_COUNT] = std::array::from_fn(|k| gather(&attr_rows[k]));
        let mel = self.mel_head.forward(&mel_in);
        let attrs = std::array::from_fn(|k| self.attr_heads[k].forward(&attr_in[k]));
        (
            Logits {
                mel_slots,
                mel,
                attr_slots,
                attrs,
            },
            dec_cache,
            mel_in,
            attr_in,
            mel_rows,
            attr_rows,
            layout,
        )
    }

    fn run(
        &self,
        ex: &TokenizedExample,
        mask: &MaskConfig,
        residual: Option<&Array2<R>>,
        noise: Option<&Array2<R>>,
    ) -> Result<(Logits<R>, CoreCache<R>)> {
        let layout = Layout::new(mask);
        let d = self.config.d;
        let n_residual = residual.map_or(0, |r| r.nrows());
        let n_noise = noise.map_or(0, |r| r.nrows());
        let mut seq = Array2::zeros((layout.visible + n_residual + n_noise, d));
        seq.slice_mut(ndarray::s![..layout.visible, ..])
            .assign(&self.embed_visible(&layout, ex));
        let extras = [
            (residual, STREAM_RESIDUAL, layout.visible),
            (noise, STREAM_NOISE, layout.visible + n_residual),
        ];
        for (tokens, stream, start) in extras {
            if let Some(tokens) = tokens {
                for (j, r) in tokens.rows().into_iter().enumerate() {
                    let mut row = seq.row_mut(start + j);
                    row.assign(&r);
                    row += &self.stream_emb.value.row(stream);
                }
            }
        }
        let (encoded, encoder) = if seq.nrows() == 0 {
            (seq, None)
        } else {
            let (e, c) = self
                .encoder
                .forward(&seq, layout.encoder_times(n_residual + n_noise));
            (e, Some(c))
        };
        let (logits, decoder, mel_head_in, attr_head_in, mel_rows, attr_rows, layout) =
            self.decode(layout, &encoded, n_residual + n_noise);
        Ok((
            logits,
            CoreCache {
                layout,
                n_residual,
                n_noise,
                encoder,
                decoder,
                mel_head_in,
                attr_head_in,
                mel_rows,
                attr_rows,
                tokens: ex.clone(),
            },
        ))
    }

    /// Full training-time forward pass. Residual tokens are extracted from the
    /// complete grid; a dropped gate omits them from the sequence entirely.
    pub fn forward(
        &self,
        ex: &TokenizedExample,
        mask: &MaskConfig,
        residual_gate: Gate,
        noise_gate: Gate,
    ) -> Result<(Logits<R>, ForwardCache<R>)> {
        self.check_example(ex)?;
        self.check_mask(mask)?;
        let want_noise = noise_gate.kept() && self.noise.is_some();
        let (residual, noise) = if residual_gate.kept() || want_noise {
            let grid = self.grid_embeddings(ex);
            let r = residual_gate
                .kept()
                .then(|| residual_extract(&grid, &self.residual))
                .transpose()?;
            let n = match (&self.noise, want_noise) {
                (Some(n), true) => Some(residual_extract(&grid, n)?),
                _ => None,
            };
            (r, n)
        } else {
            (None, None)
        };
        let (logits, core) = self.run(
            ex,
            mask,
            residual.as_ref().map(|r| &r.0),
            noise.as_ref().map(|n| &n.0),
        )?;
        let tokens = match (&residual, &noise) {
            (None, None) => None,
            _ => Some(ResidualTokenSet {
                residual: residual
                    .as_ref()
                    .map_or_else(|| Array2::zeros((0, self.config.d)), |r| r.0.clone()),
                noise: noise.as_ref().map(|n| n.0.clone()),
            }),
        };
        Ok((
            logits,
            ForwardCache {
                core,
                residual: residual.map(|r| r.1),
                noise: noise.map(|n| n.1),
                tokens,
            },
        ))
    }

    /// Backpropagates logit gradients (plus optional direct gradients on the
    /// residual token matrices) into every parameter's gradient buffer.
    pub fn backward(
        &mut self,
        cache: &ForwardCache<R>,
        dlogits: &Logits<R>,
        d_residual: Option<&Array2<R>>,
        d_noise: Option<&Array2<R>>,
    ) {
        let core = &cache.core;
        let d = self.config.d;
        let n_slots = core.layout.slots.len();
        let extra = core.n_residual + core.n_noise;
        let mut d_dec_out = Array2::zeros((n_slots + extra, d));
        let dmel = self.mel_head.backward(&core.mel_head_in, &dlogits.mel);
        for (o, &r) in core.mel_rows.iter().enumerate() {
            d_dec_out.row_mut(r).assign(&dmel.row(o));
        }
        for k in 0..ATTRIBUTE_COUNT {
            let da = self.attr_heads[k].backward(&core.attr_head_in[k], &dlogits.attrs[k]);
            for (o, &r) in core.attr_rows[k].iter().enumerate() {
                d_dec_out.row_mut(r).assign(&da.row(o));
            }
        }
        let d_dec_in = self.decoder.backward(&core.decoder, &d_dec_out);
        let visible = core.layout.visible;
        let mut d_encoded = Array2::zeros((visible + extra, d));
        for (i, (slot, enc)) in core.layout.slots.iter().zip(&core.layout.enc_row).enumerate() {
            let g = d_dec_in.row(i);
            match enc {
                Some(r) => d_encoded.row_mut(*r).assign(&g),
                None => {
                    self.mask_emb.scatter_row(0, g);
                    self.scatter_position(*slot, g);
                }
            }
        }
        for j in 0..extra {
            d_encoded
                .row_mut(visible + j)
                .assign(&d_dec_in.row(n_slots + j));
        }
        let d_seq = match &core.encoder {
            Some(c) => self.encoder.backward(c, &d_encoded),
            None => d_encoded,
        };
        for (slot, enc) in core.layout.slots.iter().zip(&core.layout.enc_row) {
            if let Some(r) = enc {
                self.scatter_embedding(*slot, &core.tokens, d_seq.row(*r));
            }
        }
        let mut d_grid: Option<Array2<R>> = None;
        let ranges = [
            (cache.residual.as_ref(), d_residual, visible, core.n_residual, STREAM_RESIDUAL, false),
            (cache.noise.as_ref(), d_noise, visible + core.n_residual, core.n_noise, STREAM_NOISE, true),
        ];
        for (xcache, direct, start, n, stream, is_noise) in ranges {
            let Some(xcache) = xcache else { continue };
            let mut dr = d_seq.slice(ndarray::s![start..start + n, ..]).to_owned();
            for row in dr.rows() {
                self.stream_emb.scatter_row(stream, row);
            }
            if let Some(direct) = direct {
                dr += direct;
            }
            let extractor = if is_noise {
                self.noise.as_mut().expect("noise extractor present")
            } else {
                &mut self.residual
            };
            let dg = extractor.backward(xcache, &dr);
            match &mut d_grid {
                Some(acc) => *acc += &dg,
                None => d_grid = Some(dg),
            }
        }
        if let Some(dg) = d_grid {
            let bins = self.config.bins;
            for (i, row) in dg.rows().into_iter().enumerate() {
                self.scatter_embedding(Slot::Mel(i / bins, i % bins), &core.tokens, row);
            }
        }
    }

    fn effective<'a>(
        &self,
        residual: Option<&'a ResidualTokenSet<R>>,
        noise_gate: Gate,
    ) -> (Option<&'a Array2<R>>, Option<&'a Array2<R>>) {
        let Some(set) = residual else {
            return (None, None);
        };
        let r = (self.residual_examples > 0 && set.residual.nrows() > 0).then_some(&set.residual);
        let n = if noise_gate.kept() && self.noise_examples > 0 {
            set.noise.as_ref()
        } else {
            None
        };
        (r, n)
    }

    /// Predicted mel tokens from attributes (and optionally residual tokens),
    /// with the whole mel stream masked. Greedy argmax decoding.
    pub fn generate_tokens(
        &self,
        attrs: &AttributeTokens,
        residual: Option<&ResidualTokenSet<R>>,
        noise_gate: Gate,
        attrs_visible: bool,
    ) -> Result<MelTokenGrid> {
        let c = &self.config;
        let ex = TokenizedExample {
            mel: MelTokenGrid::zeros((c.frames, c.bins)),
            attrs: attrs.clone(),
        };
        self.check_example(&ex)?;
        let mode = if attrs_visible {
            crate::masking::MaskMode::Generation
        } else {
            crate::masking::MaskMode::AblateROnly
        };
        let mask = MaskConfig::uniform(c.frames, c.bins, true, !attrs_visible, mode);
        let (r, n) = self.effective(residual, noise_gate);
        let (logits, _) = self.run(&ex, &mask, r, n)?;
        let mut tokens = MelTokenGrid::zeros((c.frames, c.bins));
        for (&(t, f), tok) in logits.mel_slots.iter().zip(argmax_rows(&logits.mel)) {
            tokens[[t, f]] = tok;
        }
        Ok(tokens)
    }

    /// Reconstructs a grid from attributes and, if given, residual tokens.
    pub fn generate_mel(
        &self,
        attrs: &AttributeTokens,
        residual: Option<&ResidualTokenSet<R>>,
        quantizer: &MelQuantizer,
    ) -> Result<MelGrid> {
        let tokens = self.generate_tokens(attrs, residual, Gate::Keep, true)?;
        dequantize_mel(&tokens, quantizer)
    }

    /// Predicts the attribute streams from a grid (attributes fully masked).
    pub fn analyze_attributes(
        &self,
        grid: &MelGrid,
        quantizer: &MelQuantizer,
    ) -> Result<AttributeTokens> {
        let c = &self.config;
        let mel = quantize_mel(grid, quantizer);
        let placeholder = AttributeTokens {
            streams: std::array::from_fn(|_| vec![0; c.frames]),
            vocab: c.attr_vocab,
        };
        let ex = TokenizedExample {
            mel,
            attrs: placeholder,
        };
        self.check_example(&ex)?;
        let mask = crate::masking::inference_mask(crate::masking::MaskMode::Analysis, c.frames, c.bins)?;
        let residual = (self.residual_examples > 0)
            .then(|| self.extract_residuals(&ex).map(|s| s.residual))
            .transpose()?;
        let (logits, _) = self.run(&ex, &mask, residual.as_ref(), None)?;
        let mut streams: [Vec<usize>; ATTRIBUTE_COUNT] =
            std::array::from_fn(|_| vec![0; c.frames]);
        for k in 0..ATTRIBUTE_COUNT {
            for (&t, tok) in logits.attr_slots[k].iter().zip(argmax_rows(&logits.attrs[k])) {
                streams[k][t] = tok;
            }
        }
        Ok(AttributeTokens {
            streams,
            vocab: c.attr_vocab,
        })
    }

    /// Element-wise conversion to another precision.
    pub fn cast<S: Real>(&self) -> RtMae<S> {
        let mut out = RtMae::<S>::new(self.config, 0).expect("config already validated");
        out.residual_examples = self.residual_examples;
        out.noise_examples = self.noise_examples;
        for ((_, dst), (_, src)) in out.named_params_mut().into_iter().zip(self.named_params()) {
            dst.value = src.value.mapv(|v| S::of(v.f64()));
        }
        out
    }
}

impl<R: Real> Parameters<R> for RtMae<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        out.push((join(prefix, "embed/mel_codebook"), &self.mel_codebook));
        for (k, p) in self.attr_codebooks.iter().enumerate() {
            out.push((join(prefix, &format!("embed/attr{k}_codebook")), p));
        }
        out.push((join(prefix, "embed/time_pos"), &self.time_pos));
        out.push((join(prefix, "embed/freq_pos"), &self.freq_pos));
        out.push((join(prefix, "embed/stream"), &self.stream_emb));
        out.push((join(prefix, "embed/mask"), &self.mask_emb));
        self.residual.collect(&join(prefix, "residual"), out);
        if let Some(n) = &self.noise {
            n.collect(&join(prefix, "noise"), out);
        }
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.decoder.collect(&join(prefix, "decoder"), out);
        self.mel_head.collect(&join(prefix, "head/mel"), out);
        for (k, h) in self.attr_heads.iter().enumerate() {
            h.collect(&join(prefix, &format!("head/attr{k}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        out.push((join(prefix, "embed/mel_codebook"), &mut self.mel_codebook));
        for (k, p) in self.attr_codebooks.iter_mut().enumerate() {
            out.push((join(prefix, &format!("embed/attr{k}_codebook")), p));
        }
        out.push((join(prefix, "embed/time_pos"), &mut self.time_pos));
        out.push((join(prefix, "embed/freq_pos"), &mut self.freq_pos));
        out.push((join(prefix, "embed/stream"), &mut self.stream_emb));
        out.push((join(prefix, "embed/mask"), &mut self.mask_emb));
        self.residual.collect_mut(&join(prefix, "residual"), out);
        if let Some(n) = &mut self.noise {
            n.collect_mut(&join(prefix, "noise"), out);
        }
        self.encoder.collect_mut(&join(prefix, "encoder"), out);
        self.decoder.collect_mut(&join(prefix, "decoder"), out);
        self.mel_head.collect_mut(&join(prefix, "head/mel"), out);
        for (k, h) in self.attr_heads.iter_mut().enumerate() {
            h.collect_mut(&join(prefix, &format!("head/attr{k}")), out);
        }
    }
}
