//! Uniform scalar quantization of grids and identity tokenization of the
//! explicit attribute tracks.

use ndarray::Array2;

use crate::error::{invalid, Result};
use crate::synth::{FactorRanges, FactorSpec, MelGrid};

/// Width added on each side of a degenerate (constant) fitted range.
pub const DEGENERATE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelQuantizer {
    pub v_bins: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Token form of a grid; every entry lies in `[0, v_bins)`.
pub type MelTokenGrid = Array2<usize>;

impl MelQuantizer {
    pub fn new(v_bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if v_bins < 2 {
            return invalid(format!("v_bins = {v_bins}, need at least 2"));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return invalid(format!("quantizer range [{lo}, {hi}] is empty"));
        }
        Ok(Self { v_bins, lo, hi })
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.v_bins as f64
    }

    pub fn quantize_value(&self, x: f64) -> usize {
        let pos = ((x - self.lo) / (self.hi - self.lo) * self.v_bins as f64).floor();
        if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(self.v_bins - 1)
        }
    }

    pub fn dequantize_value(&self, token: usize) -> f64 {
        self.lo + (token as f64 + 0.5) * self.step()
    }
}

/// Fits `[lo, hi]` to the global extremes of the corpus.
pub fn fit_mel_quantizer<'a, I>(corpus: I, v_bins: usize) -> Result<MelQuantizer>
where
    I: IntoIterator<Item = &'a MelGrid>,
{
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut seen = false;
    for grid in corpus {
        for &v in grid {
            lo = lo.min(v);
            hi = hi.max(v);
            seen = true;
        }
    }
    if !seen {
        return invalid("cannot fit a quantizer to an empty corpus");
    }
    if lo == hi {
        lo -= DEGENERATE_EPS;
        hi += DEGENERATE_EPS;
    }
    MelQuantizer::new(v_bins, lo, hi)
}

pub fn quantize_mel(grid: &MelGrid, q: &MelQuantizer) -> MelTokenGrid {
    grid.mapv(|x| q.quantize_value(x))
}

pub fn dequantize_mel(tokens: &MelTokenGrid, q: &MelQuantizer) -> Result<MelGrid> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= q.v_bins) {
        return invalid(format!("mel token {bad} outside [0, {})", q.v_bins));
    }
    Ok(tokens.mapv(|t| q.dequantize_value(t)))
}

/// Attribute stream order inside [`AttributeTokens::streams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    Pitch = 0,
    Loudness = 1,
    Speaker = 2,
    Content = 3,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Pitch,
        Attribute::Loudness,
        Attribute::Speaker,
        Attribute::Content,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Pitch => "pitch",
            Attribute::Loudness => "loudness",
            Attribute::Speaker => "speaker",
            Attribute::Content => "content",
        }
    }
}

pub const ATTRIBUTE_COUNT: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeTokens {
    /// One length-T token sequence per [`Attribute`].
    pub streams: [Vec<usize>; ATTRIBUTE_COUNT],
    pub vocab: [usize; ATTRIBUTE_COUNT],
}

impl AttributeTokens {
    pub fn frames(&self) -> usize {
        self.streams[0].len()
    }

    pub fn stream(&self, a: Attribute) -> &[usize] {
        &self.streams[a as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let frames = self.frames();
        for a in Attribute::ALL {
            let s = &self.streams[a as usize];
            if s.len() != frames {
                return invalid(format!("{} stream length {} != {frames}", a.name(), s.len()));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.vocab[a as usize]) {
                return invalid(format!(
                    "{} token {bad} outside [0, {})",
                    a.name(),
                    self.vocab[a as usize]
                ));
            }
        }
        Ok(())
    }
}

pub fn attribute_vocab(ranges: &FactorRanges) -> [usize; ATTRIBUTE_COUNT] {
    [
        ranges.pitch_bins,
        ranges.loudness_bins,
        ranges.speakers,
        ranges.contents,
    ]
}

/// Synthetic factors are already discrete, so this is the identity map with
/// the speaker broadcast along time.
pub fn quantize_attributes(factors: &FactorSpec, ranges: &FactorRanges) -> AttributeTokens {
    let frames = factors.frames();
    AttributeTokens {
        streams: [
            factors.pitch_track.clone(),
            factors.loudness_track.clone(),
            vec![factors.speaker_id; frames],
            factors.content_seq.clone(),
        ],
        vocab: attribute_vocab(ranges),
    }
}
