//! Held-out evaluation against the generator's ground truth: ablation grid,
//! dropout sweep, pitch manipulation and denoising.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::masking::{Gate, MaskMode};
use crate::model::{ResidualTokenSet, RtMae, TokenizedExample};
use crate::synth::{
    generate_sample, noise_energy_projection, pitch_bump, style_basis, unclamped_grid, Corpus,
    FactorRanges, FactorSpec, MelGrid, SyntheticSample,
};
use crate::tokenizer::{
    dequantize_mel, quantize_attributes, quantize_mel, MelQuantizer, MelTokenGrid,
    ATTRIBUTE_COUNT,
};
use crate::trainer::{is_heldout, train, Checkpoint, EpochMetrics, TrainConfig};

pub fn reconstruction_error(grid: &MelGrid, grid_hat: &MelGrid) -> Result<f64> {
    if grid.dim() != grid_hat.dim() {
        return invalid(format!(
            "grid shapes differ: {:?} vs {:?}",
            grid.dim(),
            grid_hat.dim()
        ));
    }
    if grid.is_empty() {
        return invalid("empty grids");
    }
    let sum: f64 = grid
        .iter()
        .zip(grid_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / grid.len() as f64)
}

fn token_accuracy(a: &MelTokenGrid, b: &MelTokenGrid) -> f64 {
    let hits = a.iter().zip(b.iter()).filter(|(x, y)| x == y).count();
    hits as f64 / a.len() as f64
}

/// Held-out samples of a corpus, in index order.
pub fn heldout_samples(corpus: &Corpus) -> Vec<&SyntheticSample> {
    corpus
        .samples
        .iter()
        .enumerate()
        .filter(|(i, _)| is_heldout(*i))
        .map(|(_, s)| s)
        .collect()
}

/// Order-preserving map over `items` on up to `workers` scoped threads.
pub fn par_map<T: Sync, U: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// A model with its quantizer, evaluated on samples from `ranges`.
#[derive(Clone, Copy)]
pub struct Evaluator<'a> {
    pub model: &'a RtMae<f32>,
    pub quantizer: &'a MelQuantizer,
    pub ranges: FactorRanges,
    pub workers: usize,
}

impl<'a> Evaluator<'a> {
    pub fn from_checkpoint(ckpt: &'a Checkpoint, ranges: FactorRanges, workers: usize) -> Self {
        Self {
            model: &ckpt.model,
            quantizer: &ckpt.quantizer,
            ranges,
            workers,
        }
    }

    pub fn tokenize(&self, sample: &SyntheticSample) -> TokenizedExample {
        TokenizedExample {
            mel: quantize_mel(&sample.grid, self.quantizer),
            attrs: quantize_attributes(&sample.factors, &self.ranges),
        }
    }

    /// Residual tokens of `source`; `R_noise` only rides along when the
    /// source is noise-annotated.
    pub fn residuals_of(&self, source: &SyntheticSample) -> Result<ResidualTokenSet<f32>> {
        let mut set = self.model.extract_residuals(&self.tokenize(source))?;
        if !source.factors.noise_present {
            set.noise = None;
        }
        Ok(set)
    }

    /// Generation under one of the four ablation layouts. Residual tokens are
    /// always taken from the evaluated sample's own grid.
    pub fn generate_mode(
        &self,
        sample: &SyntheticSample,
        mode: MaskMode,
    ) -> Result<(MelTokenGrid, MelGrid)> {
        let (attrs_visible, with_residual) = match mode {
            MaskMode::AblateNone => (false, false),
            MaskMode::AblateAOnly => (true, false),
            MaskMode::AblateROnly => (false, true),
            MaskMode::AblateBoth => (true, true),
            other => return invalid(format!("{other} is not an ablation mode")),
        };
        let ex = self.tokenize(sample);
        let residual = with_residual.then(|| self.residuals_of(sample)).transpose()?;
        let tokens =
            self.model
                .generate_tokens(&ex.attrs, residual.as_ref(), Gate::Keep, attrs_visible)?;
        let grid = dequantize_mel(&tokens, self.quantizer)?;
        Ok((tokens, grid))
    }

    pub fn ablation_table(&self, samples: &[&SyntheticSample]) -> Result<Vec<AblationRow>> {
        self.ablation_rows(samples, &MaskMode::ABLATIONS)
    }

    pub fn ablation_rows(
        &self,
        samples: &[&SyntheticSample],
        modes: &[MaskMode],
    ) -> Result<Vec<AblationRow>> {
        if samples.is_empty() {
            return invalid("no samples to evaluate");
        }
        modes
            .iter()
            .map(|&mode| {
                let per = par_map(samples, self.workers, |s| self.ablation_sample(s, mode))?;
                Ok(AblationRow::aggregate(mode, &per))
            })
            .collect()
    }

    fn ablation_sample(&self, s: &SyntheticSample, mode: MaskMode) -> Result<SampleScores> {
        let (tokens, grid) = self.generate_mode(s, mode)?;
        let truth = self.tokenize(s);
        let analyzed = self.model.analyze_attributes(&grid, self.quantizer)?;
        let mut attr_acc = [0.0; ATTRIBUTE_COUNT];
        for (k, acc) in attr_acc.iter_mut().enumerate() {
            let (a, b) = (&analyzed.streams[k], &truth.attrs.streams[k]);
            *acc = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64;
        }
        let noise = if s.factors.noise_present {
            Some(noise_energy_projection(&grid, s.factors.noise_seed)?)
        } else {
            None
        };
        Ok(SampleScores {
            mse: reconstruction_error(&s.grid, &grid)?,
            token_accuracy: token_accuracy(&truth.mel, &tokens),
            attr_acc,
            style_error: (style_estimate(&grid, &s.factors, &self.ranges) - s.factors.style_scalar)
                .abs(),
            noise,
        })
    }

    /// Mean MSE with attributes visible, with and without residual tokens.
    pub fn kept_dropped_mse(&self, samples: &[&SyntheticSample]) -> Result<(f64, f64)> {
        let per = par_map(samples, self.workers, |s| {
            let kept = reconstruction_error(&s.grid, &self.generate_mode(s, MaskMode::AblateBoth)?.1)?;
            let dropped =
                reconstruction_error(&s.grid, &self.generate_mode(s, MaskMode::AblateAOnly)?.1)?;
            Ok((kept, dropped))
        })?;
        let n = per.len() as f64;
        Ok((
            per.iter().map(|p| p.0).sum::<f64>() / n,
            per.iter().map(|p| p.1).sum::<f64>() / n,
        ))
    }

    pub fn pitch_shift_eval(
        &self,
        samples: &[&SyntheticSample],
        shift_percent: f64,
    ) -> Result<PitchShiftRow> {
        if samples.is_empty() {
            return invalid("no samples to evaluate");
        }
        let bins = samples[0].grid.ncols();
        let frames = samples[0].grid.nrows();
        let per = par_map(samples, self.workers, |s| {
            let mut shifted = s.factors.clone();
            shifted.pitch_track = shift_track(&s.factors.pitch_track, shift_percent, &self.ranges);
            let target = generate_sample(&shifted, &self.ranges, frames, bins)?;
            let attrs = quantize_attributes(&shifted, &self.ranges);
            let residual = self.residuals_of(s)?;
            let mut out = [(0.0, 0.0, 0.0); 2];
            for (slot, r) in [Some(&residual), None].into_iter().enumerate() {
                let tokens = self.model.generate_tokens(&attrs, r, Gate::Keep, true)?;
                let grid = dequantize_mel(&tokens, self.quantizer)?;
                let realized = detect_pitch(&grid, &shifted, &self.ranges);
                let aae = realized
                    .iter()
                    .zip(&shifted.pitch_track)
                    .map(|(&a, &b)| (a as f64 - b as f64).abs())
                    .sum::<f64>()
                    / frames as f64;
                let mean = realized.iter().sum::<usize>() as f64 / frames as f64;
                out[slot] = (aae, mean, reconstruction_error(&target.grid, &grid)?);
            }
            let target_mean = shifted.pitch_track.iter().sum::<usize>() as f64 / frames as f64;
            Ok((target_mean, out))
        })?;
        let n = per.len() as f64;
        let mean = |f: &dyn Fn(&(f64, [(f64, f64, f64); 2])) -> f64| per.iter().map(f).sum::<f64>() / n;
        Ok(PitchShiftRow {
            shift_percent,
            target_mean: mean(&|p| p.0),
            realized_mean_kept: mean(&|p| p.1[0].1),
            realized_mean_dropped: mean(&|p| p.1[1].1),
            aae_kept: mean(&|p| p.1[0].0),
            aae_dropped: mean(&|p| p.1[1].0),
            mse_kept: mean(&|p| p.1[0].2),
            mse_dropped: mean(&|p| p.1[1].2),
        })
    }

    /// Generation from attributes + `R` (+ `R_noise` when annotated) versus
    /// with `R_noise` deactivated, scored against the clean grid.
    pub fn denoise_eval(&self, samples: &[&SyntheticSample]) -> Result<DenoiseReport> {
        let noisy: Vec<&SyntheticSample> = samples
            .iter()
            .copied()
            .filter(|s| s.factors.noise_present)
            .collect();
        if noisy.is_empty() {
            return invalid("no noise-annotated samples");
        }
        let per = par_map(&noisy, self.workers, |s| {
            let (frames, bins) = s.grid.dim();
            let clean_factors = FactorSpec {
                noise_present: false,
                ..s.factors.clone()
            };
            let clean = generate_sample(&clean_factors, &self.ranges, frames, bins)?;
            let attrs = quantize_attributes(&s.factors, &self.ranges);
            let residual = self.residuals_of(s)?;
            let mut out = [(0.0, 0.0); 2];
            for (slot, gate) in [Gate::Keep, Gate::Drop].into_iter().enumerate() {
                let tokens = self.model.generate_tokens(&attrs, Some(&residual), gate, true)?;
                let grid = dequantize_mel(&tokens, self.quantizer)?;
                out[slot] = (
                    noise_energy_projection(&grid, s.factors.noise_seed)?,
                    reconstruction_error(&clean.grid, &grid)?,
                );
            }
            Ok((
                out,
                noise_energy_projection(&s.grid, s.factors.noise_seed)?,
                noise_energy_projection(&clean.grid, s.factors.noise_seed)?,
            ))
        })?;
        let n = per.len() as f64;
        let mean = |f: &dyn Fn(&([(f64, f64); 2], f64, f64)) -> f64| per.iter().map(f).sum::<f64>() / n;
        Ok(DenoiseReport {
            samples: per.len(),
            energy_kept: mean(&|p| p.0[0].0),
            energy_off: mean(&|p| p.0[1].0),
            clean_mse_kept: mean(&|p| p.0[0].1),
            clean_mse_off: mean(&|p| p.0[1].1),
            energy_input: mean(&|p| p.1),
            energy_clean: mean(&|p| p.2),
        })
    }
}

struct SampleScores {
    mse: f64,
    token_accuracy: f64,
    attr_acc: [f64; ATTRIBUTE_COUNT],
    style_error: f64,
    noise: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: MaskMode,
    pub mse: f64,
    pub token_accuracy: f64,
    /// Model analysis of the generated grid against the true attributes.
    pub attr_accuracy: [f64; ATTRIBUTE_COUNT],
    /// Mean `|ŝ − s|` of the style scalar read back from the output.
    pub style_error: f64,
    /// Mean noise-projection energy over noise-annotated samples (0 if none).
    pub noise_energy: f64,
}

impl AblationRow {
    fn aggregate(mode: MaskMode, per: &[SampleScores]) -> Self {
        let n = per.len() as f64;
        let mut attr_accuracy = [0.0; ATTRIBUTE_COUNT];
        for (k, a) in attr_accuracy.iter_mut().enumerate() {
            *a = per.iter().map(|p| p.attr_acc[k]).sum::<f64>() / n;
        }
        let noisy: Vec<f64> = per.iter().filter_map(|p| p.noise).collect();
        Self {
            mode,
            mse: per.iter().map(|p| p.mse).sum::<f64>() / n,
            token_accuracy: per.iter().map(|p| p.token_accuracy).sum::<f64>() / n,
            attr_accuracy,
            style_error: per.iter().map(|p| p.style_error).sum::<f64>() / n,
            noise_energy: if noisy.is_empty() {
                0.0
            } else {
                noisy.iter().sum::<f64>() / noisy.len() as f64
            },
        }
    }
}

pub const ABLATION_HEADER: &str = "mode,mse,token_accuracy,pitch_accuracy,loudness_accuracy,speaker_accuracy,content_accuracy,style_error,noise_energy";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let a = r.attr_accuracy;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.mode, r.mse, r.token_accuracy, a[0], a[1], a[2], a[3], r.style_error, r.noise_energy
        );
    }
    s
}

pub fn ablation_json(rows: &[AblationRow]) -> String {
    let records: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "mode": r.mode.name(),
                "mse": r.mse,
                "token_accuracy": r.token_accuracy,
                "pitch_accuracy": r.attr_accuracy[0],
                "loudness_accuracy": r.attr_accuracy[1],
                "speaker_accuracy": r.attr_accuracy[2],
                "content_accuracy": r.attr_accuracy[3],
                "style_error": r.style_error,
                "noise_energy": r.noise_energy,
            })
        })
        .collect();
    serde_json::Value::Array(records).to_string()
}

/// Least-squares style coefficient of `grid` relative to the style-free
/// rendering of the same factors.
pub fn style_estimate(grid: &MelGrid, factors: &FactorSpec, ranges: &FactorRanges) -> f64 {
    let bins = grid.ncols();
    let reference = unclamped_grid(
        &FactorSpec {
            style_scalar: 0.0,
            ..factors.clone()
        },
        ranges,
        bins,
    );
    let mut num = 0.0;
    let mut den = 0.0;
    for ((t, f), &g) in grid.indexed_iter() {
        let b = style_basis(f, bins);
        num += (g - reference[[t, f]]) * b;
        den += b * b;
    }
    num / den
}

/// `clamp(round(p·(1 + shift/100)))` per frame.
pub fn shift_track(track: &[usize], shift_percent: f64, ranges: &FactorRanges) -> Vec<usize> {
    let top = ranges.pitch_bins as f64 - 1.0;
    track
        .iter()
        .map(|&p| (p as f64 * (1.0 + shift_percent / 100.0)).round().clamp(0.0, top) as usize)
        .collect()
}

/// Matched-filter pitch detection: subtract the known non-pitch part of the
/// frame and pick the bump template with the largest normalized correlation.
pub fn detect_pitch(grid: &MelGrid, factors: &FactorSpec, ranges: &FactorRanges) -> Vec<usize> {
    let (frames, bins) = grid.dim();
    let templates: Vec<Vec<f64>> = (0..ranges.pitch_bins)
        .map(|p| (0..bins).map(|f| pitch_bump(p, f, ranges.pitch_bins, bins)).collect())
        .collect();
    let norms: Vec<f64> = templates
        .iter()
        .map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let no_pitch = FactorSpec {
        pitch_track: vec![0; frames],
        ..factors.clone()
    };
    // Subtracting the p = 0 rendering leaves bump(p) − bump(0), scaled.
    let base = unclamped_grid(&no_pitch, ranges, bins);
    (0..frames)
        .map(|t| {
            let scale = 0.5 + 0.5 * factors.loudness_track[t] as f64 / ranges.loudness_bins as f64;
            let resid: Vec<f64> = (0..bins)
                .map(|f| grid[[t, f]] - base[[t, f]] + scale * templates[0][f])
                .collect();
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (p, tmpl) in templates.iter().enumerate() {
                let score = resid.iter().zip(tmpl).map(|(a, b)| a * b).sum::<f64>() / norms[p];
                if score > best_score {
                    best_score = score;
                    best = p;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PitchShiftRow {
    pub shift_percent: f64,
    pub target_mean: f64,
    pub realized_mean_kept: f64,
    pub realized_mean_dropped: f64,
    pub aae_kept: f64,
    pub aae_dropped: f64,
    pub mse_kept: f64,
    pub mse_dropped: f64,
}

pub const PITCH_HEADER: &str = "shift_percent,target_mean,realized_mean_kept,realized_mean_dropped,aae_kept,aae_dropped,mse_kept,mse_dropped";

pub fn pitch_csv(rows: &[PitchShiftRow]) -> String {
    let mut s = format!("{PITCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.shift_percent,
            r.target_mean,
            r.realized_mean_kept,
            r.realized_mean_dropped,
            r.aae_kept,
            r.aae_dropped,
            r.mse_kept,
            r.mse_dropped
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseReport {
    pub samples: usize,
    pub energy_kept: f64,
    pub energy_off: f64,
    pub clean_mse_kept: f64,
    pub clean_mse_off: f64,
    /// Energies of the noisy inputs and of their clean versions, for scale.
    pub energy_input: f64,
    pub energy_clean: f64,
}

pub const DENOISE_HEADER: &str = "setting,noise_energy,clean_mse";

impl DenoiseReport {
    pub fn csv(&self) -> String {
        format!(
            "{DENOISE_HEADER}\nnoise_kept,{},{}\nnoise_off,{},{}\n",
            self.energy_kept, self.clean_mse_kept, self.energy_off, self.clean_mse_off
        )
    }

    pub fn json(&self) -> String {
        serde_json::json!({
            "samples": self.samples,
            "energy_kept": self.energy_kept,
            "energy_off": self.energy_off,
            "clean_mse_kept": self.clean_mse_kept,
            "clean_mse_off": self.clean_mse_off,
            "energy_input": self.energy_input,
            "energy_clean": self.energy_clean,
        })
        .to_string()
    }
}

/// One trained model of a dropout sweep and its two evaluation curves.
pub struct TauPoint {
    pub tau: f64,
    /// Attributes + residual tokens.
    pub kept_mse: f64,
    /// Attributes only.
    pub dropped_mse: f64,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

pub fn tau_sweep(
    taus: &[f64],
    cfg: &TrainConfig,
    corpus: &Corpus,
    workers: usize,
) -> Result<Vec<TauPoint>> {
    if let Some(bad) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return invalid(format!("tau {bad} outside [0, 1]"));
    }
    let held = heldout_samples(corpus);
    taus.iter()
        .map(|&tau| {
            let run = TrainConfig { tau, ..cfg.clone() };
            let out = train(&run, corpus, &mut std::io::sink())?;
            let ev = Evaluator::from_checkpoint(&out.checkpoint, corpus.spec.ranges, workers);
            let (kept_mse, dropped_mse) = ev.kept_dropped_mse(&held)?;
            Ok(TauPoint {
                tau,
                kept_mse,
                dropped_mse,
                checkpoint: out.checkpoint,
                metrics: out.metrics,
            })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "tau,kept_mse,dropped_mse";

pub fn sweep_csv(points: &[TauPoint]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.tau, p.kept_mse, p.dropped_mse);
    }
    s
}
