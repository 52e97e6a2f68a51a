//! Stream visibility: random training masks, the whole-set residual dropout
//! gate, and the named inference configurations.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::tokenizer::ATTRIBUTE_COUNT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskMode {
    Train,
    Analysis,
    Generation,
    AblateNone,
    AblateAOnly,
    AblateROnly,
    AblateBoth,
}

impl MaskMode {
    pub const ABLATIONS: [MaskMode; 4] = [
        MaskMode::AblateNone,
        MaskMode::AblateAOnly,
        MaskMode::AblateROnly,
        MaskMode::AblateBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Train => "TRAIN",
            MaskMode::Analysis => "ANALYSIS",
            MaskMode::Generation => "GENERATION",
            MaskMode::AblateNone => "ABLATE_NONE",
            MaskMode::AblateAOnly => "ABLATE_A_ONLY",
            MaskMode::AblateROnly => "ABLATE_R_ONLY",
            MaskMode::AblateBoth => "ABLATE_BOTH",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            MaskMode::Train,
            MaskMode::Analysis,
            MaskMode::Generation,
            MaskMode::AblateNone,
            MaskMode::AblateAOnly,
            MaskMode::AblateROnly,
            MaskMode::AblateBoth,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::InvalidInput(format!("unknown mask mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Keep,
    Drop,
}

impl Gate {
    pub fn kept(self) -> bool {
        self == Gate::Keep
    }
}

/// `true` marks a masked (hidden) position.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub mel_mask: Array2<bool>,
    pub attr_masks: [Vec<bool>; ATTRIBUTE_COUNT],
    pub mode: MaskMode,
    /// Residual availability implied by the mode; training overrides it per
    /// example with the dropout gate.
    pub residual: Gate,
}

impl MaskConfig {
    pub fn frames(&self) -> usize {
        self.mel_mask.nrows()
    }

    pub fn bins(&self) -> usize {
        self.mel_mask.ncols()
    }

    pub fn uniform(frames: usize, bins: usize, mel: bool, attrs: bool, mode: MaskMode) -> Self {
        Self {
            mel_mask: Array2::from_elem((frames, bins), mel),
            attr_masks: std::array::from_fn(|_| vec![attrs; frames]),
            mode,
            residual: Gate::Keep,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mel_mask.iter().filter(|&&m| m).count()
            + self
                .attr_masks
                .iter()
                .map(|m| m.iter().filter(|&&x| x).count())
                .sum::<usize>()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let t = self.frames();
        if self.attr_masks.iter().any(|m| m.len() != t) {
            return invalid("attribute mask length differs from mel frame count");
        }
        let mel_all = self.mel_mask.iter().all(|&m| m);
        let mel_none = self.mel_mask.iter().all(|&m| !m);
        let attrs_all = self.attr_masks.iter().all(|m| m.iter().all(|&x| x));
        let attrs_none = self.attr_masks.iter().all(|m| m.iter().all(|&x| !x));
        let ok = match self.mode {
            MaskMode::Train => true,
            MaskMode::Analysis => mel_none && attrs_all,
            MaskMode::Generation => mel_all,
            MaskMode::AblateNone => mel_all && attrs_all && !self.residual.kept(),
            MaskMode::AblateAOnly => mel_all && attrs_none && !self.residual.kept(),
            MaskMode::AblateROnly => mel_all && attrs_all && self.residual.kept(),
            MaskMode::AblateBoth => mel_all && attrs_none && self.residual.kept(),
        };
        if ok {
            Ok(())
        } else {
            invalid(format!("mask violates the {} layout", self.mode))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskRatios {
    pub mel: f64,
    pub attrs: [f64; ATTRIBUTE_COUNT],
}

impl Default for MaskRatios {
    fn default() -> Self {
        Self {
            mel: 0.5,
            attrs: [0.5; ATTRIBUTE_COUNT],
        }
    }
}

impl MaskRatios {
    pub fn validate(&self) -> Result<()> {
        if std::iter::once(self.mel)
            .chain(self.attrs)
            .any(|r| !(0.0..=1.0).contains(&r))
        {
            return invalid("mask ratios must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Independent Bernoulli masking of every mel cell and attribute position.
pub fn sample_training_masks<R: Rng>(
    ratios: &MaskRatios,
    frames: usize,
    bins: usize,
    rng: &mut R,
) -> MaskConfig {
    let mel_mask = Array2::from_shape_simple_fn((frames, bins), || rng.gen::<f64>() < ratios.mel);
    let attr_masks = std::array::from_fn(|k| {
        (0..frames)
            .map(|_| rng.gen::<f64>() < ratios.attrs[k])
            .collect()
    });
    MaskConfig {
        mel_mask,
        attr_masks,
        mode: MaskMode::Train,
        residual: Gate::Keep,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutGate {
    tau: f64,
}

impl DropoutGate {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return invalid(format!("tau = {tau} outside [0, 1]"));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Default for DropoutGate {
    fn default() -> Self {
        Self { tau: 0.5 }
    }
}

/// Drops the entire residual token set when `u < τ`.
pub fn residual_dropout_gate(gate: DropoutGate, u: f64) -> Result<Gate> {
    if !(0.0..1.0).contains(&u) {
        return invalid(format!("gate draw {u} outside [0, 1)"));
    }
    Ok(if u < gate.tau { Gate::Drop } else { Gate::Keep })
}

pub fn inference_mask(mode: MaskMode, frames: usize, bins: usize) -> Result<MaskConfig> {
    let (mel, attrs, residual) = match mode {
        MaskMode::Train => return invalid("TRAIN is not an inference mode"),
        MaskMode::Analysis => (false, true, Gate::Keep),
        MaskMode::Generation => (true, false, Gate::Keep),
        MaskMode::AblateNone => (true, true, Gate::Drop),
        MaskMode::AblateAOnly => (true, false, Gate::Drop),
        MaskMode::AblateROnly => (true, true, Gate::Keep),
        MaskMode::AblateBoth => (true, false, Gate::Keep),
    };
    let mut m = MaskConfig::uniform(frames, bins, mel, attrs, mode);
    m.residual = residual;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ratio_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = MaskRatios {
            mel: 0.0,
            attrs: [0.0; 4],
        };
        assert_eq!(sample_training_masks(&none, 16, 16, &mut rng).masked_count(), 0);
        let all = MaskRatios {
            mel: 1.0,
            attrs: [1.0; 4],
        };
        assert_eq!(
            sample_training_masks(&all, 16, 16, &mut rng).masked_count(),
            16 * 16 + 4 * 16
        );
    }

    #[test]
    fn mel_ratio_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = MaskRatios::default();
        let m = sample_training_masks(&r, 400, 250, &mut rng);
        let frac = m.mel_mask.iter().filter(|&&x| x).count() as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn gate_boundaries() {
        let keep = DropoutGate::new(0.0).unwrap();
        let drop = DropoutGate::new(1.0).unwrap();
        for u in [0.0, 0.3, 0.999_999] {
            assert_eq!(residual_dropout_gate(keep, u).unwrap(), Gate::Keep);
            assert_eq!(residual_dropout_gate(drop, u).unwrap(), Gate::Drop);
        }
        assert!(residual_dropout_gate(keep, 1.0).is_err());
        assert!(residual_dropout_gate(keep, -0.1).is_err());
        assert!(DropoutGate::new(1.5).is_err());
    }

    #[test]
    fn ablation_layouts() {
        let both = inference_mask(MaskMode::AblateBoth, 8, 8).unwrap();
        assert!(both.mel_mask.iter().all(|&m| m));
        assert!(both.attr_masks.iter().all(|m| m.iter().all(|&x| !x)));
        assert_eq!(both.residual, Gate::Keep);
        let analysis = inference_mask(MaskMode::Analysis, 8, 8).unwrap();
        assert!(analysis.mel_mask.iter().all(|&m| !m));
        assert!(analysis.attr_masks.iter().all(|m| m.iter().all(|&x| x)));
        let none = inference_mask(MaskMode::AblateNone, 8, 8).unwrap();
        assert_eq!(none.masked_count(), 64 + 32);
        assert_eq!(none.residual, Gate::Drop);
        for mode in MaskMode::ABLATIONS {
            inference_mask(mode, 8, 8).unwrap().check_invariants().unwrap();
        }
        assert!(inference_mask(MaskMode::Train, 8, 8).is_err());
        assert!("ABLATE_SOME".parse::<MaskMode>().is_err());
        assert_eq!("ABLATE_R_ONLY".parse::<MaskMode>().unwrap(), MaskMode::AblateROnly);
    }

    proptest! {
        #[test]
        fn gate_is_monotone_in_tau(a in 0.0f64..=1.0, b in 0.0f64..=1.0, u in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let d_lo = residual_dropout_gate(DropoutGate::new(lo).unwrap(), u).unwrap();
            let d_hi = residual_dropout_gate(DropoutGate::new(hi).unwrap(), u).unwrap();
            prop_assert!(d_lo == Gate::Keep || d_hi == Gate::Drop);
        }
    }
}
