//! Command surface of the `rtmae` binary. Every command takes its settings
//! as flat `key=value` pairs, from `--config FILE` and then from `--key value`
//! flags, which win.
//!
//! Seeds: one `--seed S` per invocation. `gen-data` draws the corpus from
//! `S + CORPUS_SEED_OFFSET`; `train` and `sweep-tau` initialize and shuffle
//! from `S + TRAIN_SEED_OFFSET`. Evaluation commands are deterministic and
//! take no seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Arg, ArgAction, Command};

use rtmae::eval::{ablation_csv, ablation_json, heldout_samples, sweep_csv, tau_sweep, Evaluator};
use rtmae::masking::{Gate, MaskMode};
use rtmae::model::TokenizedExample;
use rtmae::synth::{generate_corpus, read_corpus, write_corpus, CorpusSpec, MelGrid};
use rtmae::tokenizer::{dequantize_mel, quantize_mel, AttributeTokens, Attribute, ATTRIBUTE_COUNT};
use rtmae::trainer::{load_checkpoint, model_config_for, train_from_paths, Checkpoint, TrainConfig};

pub const CORPUS_SEED_OFFSET: u64 = 0;
pub const TRAIN_SEED_OFFSET: u64 = 1;

const COMMANDS: &[(&str, &str)] = &[
    ("gen-data", "write a synthetic corpus and its manifest"),
    ("train", "train a model on a corpus; writes a checkpoint and a metrics log"),
    ("analyze", "predict attribute tokens from a grid file"),
    ("synthesize", "generate a grid from attribute tokens and an optional residual source"),
    ("ablate", "score the four ablation modes on the held-out split"),
    ("sweep-tau", "train one model per dropout threshold and compare MSE curves"),
    ("denoise", "compare generation with R_noise kept and deactivated"),
];

const COMMON_KEYS: &[(&str, &str)] = &[
    ("seed", "master seed"),
    ("workers", "threads for per-sample evaluation (default 1)"),
];

const GEN_KEYS: &[(&str, &str)] = &[
    ("n", "number of samples (default 2000)"),
    ("noise_fraction", "fraction of noise-annotated samples (default 0.5)"),
    ("frames", "frames per grid (default 16)"),
    ("bins", "frequency bins per grid (default 16)"),
    ("out", "output corpus file; the manifest goes next to it"),
];

const ANALYZE_KEYS: &[(&str, &str)] = &[
    ("checkpoint", "trained checkpoint"),
    ("grid", "input grid CSV, one frame per row"),
    ("out", "output attribute token CSV"),
];

const SYNTH_KEYS: &[(&str, &str)] = &[
    ("checkpoint", "trained checkpoint"),
    ("attrs", "attribute token CSV (required unless the mode hides attributes)"),
    ("residual_source", "grid CSV whose residual tokens are injected"),
    ("mode", "ABLATE_BOTH | ABLATE_A_ONLY | ABLATE_R_ONLY | ABLATE_NONE"),
    ("noise", "R_noise from the residual source: keep | drop (default drop)"),
    ("out", "output grid CSV"),
];

const ABLATE_KEYS: &[(&str, &str)] = &[
    ("checkpoint", "trained checkpoint"),
    ("corpus", "corpus whose held-out split is scored"),
    ("modes", "comma-separated mode names (default all four)"),
    ("out_dir", "directory for the CSV and JSON tables"),
];

const SWEEP_KEYS: &[(&str, &str)] = &[
    ("taus", "comma-separated dropout thresholds (default 0,0.5,1)"),
    ("out_dir", "directory for the summary, curves and per-tau checkpoints"),
];

const DENOISE_KEYS: &[(&str, &str)] = &[
    ("checkpoint", "trained checkpoint"),
    ("corpus", "corpus whose noisy held-out samples are scored"),
    ("out_dir", "directory for the CSV and JSON tables"),
];

fn keys_of(command: &str) -> Vec<(String, &'static str)> {
    let specific: Vec<(String, &'static str)> = match command {
        "gen-data" => table(GEN_KEYS),
        "train" => train_keys(true),
        "analyze" => table(ANALYZE_KEYS),
        "synthesize" => table(SYNTH_KEYS),
        "ablate" => table(ABLATE_KEYS),
        "sweep-tau" => {
            let mut k = train_keys(false);
            k.extend(table(SWEEP_KEYS));
            k
        }
        "denoise" => table(DENOISE_KEYS),
        _ => Vec::new(),
    };
    let mut all = table(COMMON_KEYS);
    for (k, h) in specific {
        if !all.iter().any(|(a, _)| *a == k) {
            all.push((k, h));
        }
    }
    all
}

fn table(t: &[(&str, &'static str)]) -> Vec<(String, &'static str)> {
    t.iter().map(|(k, h)| (k.to_string(), *h)).collect()
}

/// Training keys with the per-stream mask entry expanded. `seed` is common.
fn train_keys(with_outputs: bool) -> Vec<(String, &'static str)> {
    let mut out = Vec::new();
    for (k, h) in TrainConfig::KEYS {
        match *k {
            "seed" => {}
            "checkpoint" | "metrics" if !with_outputs => {}
            "mask_attr0..3" => out.extend((0..ATTRIBUTE_COUNT).map(|i| (format!("mask_attr{i}"), *h))),
            _ => out.push((k.to_string(), *h)),
        }
    }
    out
}

fn command_for(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name)
        .about(about)
        .disable_version_flag(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key=value file; flags override its values"),
        );
    for (key, help) in keys_of(name) {
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(key)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(help),
        );
    }
    cmd
}

fn cli() -> Command {
    let mut root = Command::new("rtmae")
        .about("Residual-token masked autoencoder: data, training, analysis and evaluation")
        .subcommand_required(true)
        .disable_version_flag(true);
    for (name, about) in COMMANDS {
        root = root.subcommand(command_for(name, about));
    }
    root
}

enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

/// Entry point. Returns the process exit status: 0 on success, 2 on usage
/// errors, 1 on everything else.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let matches = match cli().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    if e.kind() == ErrorKind::DisplayHelp {
                        0
                    } else {
                        2
                    }
                }
                _ => {
                    let text = e.to_string();
                    let line = text.lines().next().unwrap_or("usage error");
                    eprintln!("rtmae: {}", line.trim_start_matches("error: "));
                    2
                }
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = collect_settings(name, sub).and_then(|s| run(name, s));
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("rtmae {name}: {msg}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("rtmae {name}: {e:#}");
            1
        }
    }
}

/// Parses a flat `key=value` file. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

type Settings = BTreeMap<String, String>;

fn collect_settings(name: &str, sub: &clap::ArgMatches) -> Result<Settings, Failure> {
    let known = keys_of(name);
    let mut settings = Settings::new();
    if let Some(path) = sub.get_one::<String>("config") {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {path}"))?;
        for (k, v) in parse_config_text(&text).map_err(|e| Failure::Usage(format!("{path}: {e}")))? {
            if !known.iter().any(|(a, _)| *a == k) {
                return usage(format!("{path}: unknown key `{k}`"));
            }
            settings.insert(k, v);
        }
    }
    for (k, _) in &known {
        if let Some(v) = sub.get_one::<String>(k) {
            settings.insert(k.clone(), v.clone());
        }
    }
    Ok(settings)
}

fn get<T: std::str::FromStr>(s: &Settings, key: &str, default: T) -> Result<T, Failure> {
    match s.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .or_else(|_| usage(format!("bad value `{v}` for `{key}`"))),
    }
}

fn path(s: &Settings, key: &str) -> Result<PathBuf, Failure> {
    match s.get(key) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => usage(format!("missing required `--{}`", key)),
    }
}

fn run(name: &str, s: Settings) -> Result<(), Failure> {
    match name {
        "gen-data" => gen_data(&s),
        "train" => train_cmd(&s),
        "analyze" => analyze(&s),
        "synthesize" => synthesize(&s),
        "ablate" => ablate(&s),
        "sweep-tau" => sweep(&s),
        "denoise" => denoise(&s),
        other => usage(format!("unknown command `{other}`")),
    }
}

fn gen_data(s: &Settings) -> Result<(), Failure> {
    let n: usize = get(s, "n", 2000)?;
    let seed: u64 = get(s, "seed", 0)?;
    let noise_fraction: f64 = get(s, "noise_fraction", 0.5)?;
    let spec = CorpusSpec {
        frames: get(s, "frames", 16)?,
        bins: get(s, "bins", 16)?,
        ..CorpusSpec::default()
    };
    let out = path(s, "out")?;
    let corpus_seed = seed.wrapping_add(CORPUS_SEED_OFFSET);
    let corpus = generate_corpus(n, corpus_seed, noise_fraction, &spec).map_err(lib_err)?;
    let provenance = [
        ("seed", seed.to_string()),
        ("noise_fraction", noise_fraction.to_string()),
        ("generator", format!("rtmae {}", env!("CARGO_PKG_VERSION"))),
    ];
    write_corpus(&out, &corpus, &provenance).map_err(lib_err)?;
    println!("wrote {} samples ({} noisy) to {}", corpus.len(), corpus.noisy_count(), out.display());
    Ok(())
}

/// Library errors: bad values are usage errors, the rest are runtime.
fn lib_err(e: rtmae::Error) -> Failure {
    match e {
        rtmae::Error::InvalidInput(msg) => Failure::Usage(msg),
        other => Failure::Run(other.into()),
    }
}

fn train_config(s: &Settings) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::desk();
    for (k, v) in s {
        if matches!(k.as_str(), "workers" | "taus" | "out_dir" | "seed") {
            continue;
        }
        match cfg.set(k, v) {
            Ok(true) => {}
            Ok(false) => return usage(format!("unknown key `{k}`")),
            Err(e) => return Err(lib_err(e)),
        }
    }
    let seed: u64 = get(s, "seed", 0)?;
    cfg.seed = seed.wrapping_add(TRAIN_SEED_OFFSET);
    cfg.validate().map_err(lib_err)?;
    Ok(cfg)
}

fn train_cmd(s: &Settings) -> Result<(), Failure> {
    let cfg = train_config(s)?;
    path(s, "corpus")?;
    path(s, "checkpoint")?;
    path(s, "metrics")?;
    let out = train_from_paths(&cfg).map_err(lib_err)?;
    match out.metrics.last() {
        Some(m) => println!(
            "trained {} epochs: loss {:.4}, held-out mel CE {:.4}",
            out.metrics.len(),
            m.loss,
            m.heldout_ce_mel
        ),
        None => println!("wrote initial checkpoint (0 epochs)"),
    }
    Ok(())
}

fn load(s: &Settings) -> Result<Checkpoint, Failure> {
    load_checkpoint(&path(s, "checkpoint")?).map_err(lib_err)
}

/// τ recorded in a checkpoint's configuration snapshot.
fn checkpoint_tau(ckpt: &Checkpoint) -> String {
    ckpt.config_text
        .lines()
        .find_map(|l| l.strip_prefix("tau="))
        .unwrap_or("unknown")
        .to_string()
}

pub fn read_grid(path: &Path) -> anyhow::Result<MelGrid> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("non-numeric cell in {}", path.display()))?;
        rows.push(row);
    }
    let bins = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || bins == 0 {
        bail!("{} holds no grid", path.display());
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    MelGrid::from_shape_vec((flat.len() / bins, bins), flat)
        .map_err(|_| anyhow!("{}: rows have different lengths", path.display()))
}

pub fn write_grid(path: &Path, grid: &MelGrid) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in grid.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_attrs(path: &Path, vocab: [usize; ATTRIBUTE_COUNT]) -> anyhow::Result<AttributeTokens> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let expected: Vec<&str> = Attribute::ALL.iter().map(|a| a.name()).collect();
    if header != expected {
        bail!("{}: header must be {}", path.display(), expected.join(","));
    }
    let mut streams: [Vec<usize>; ATTRIBUTE_COUNT] = Default::default();
    for rec in reader.records() {
        let rec = rec?;
        for (k, v) in rec.iter().enumerate().take(ATTRIBUTE_COUNT) {
            streams[k].push(v.trim().parse().with_context(|| format!("bad token `{v}`"))?);
        }
    }
    let attrs = AttributeTokens { streams, vocab };
    attrs.validate()?;
    Ok(attrs)
}

pub fn write_attrs(path: &Path, attrs: &AttributeTokens) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(Attribute::ALL.iter().map(|a| a.name()))?;
    for t in 0..attrs.frames() {
        w.write_record(attrs.streams.iter().map(|s| s[t].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn analyze(s: &Settings) -> Result<(), Failure> {
    let ckpt = load(s)?;
    let out = path(s, "out")?;
    let grid = read_grid(&path(s, "grid")?)?;
    let attrs = ckpt
        .model
        .analyze_attributes(&grid, &ckpt.quantizer)
        .map_err(lib_err)?;
    write_attrs(&out, &attrs)?;
    Ok(())
}

fn synthesize(s: &Settings) -> Result<(), Failure> {
    let ckpt = load(s)?;
    let out = path(s, "out")?;
    let c = &ckpt.model.config;
    let source = match s.get("residual_source") {
        Some(p) => Some(read_grid(Path::new(p))?),
        None => None,
    };
    let default_mode = if source.is_some() { "ABLATE_BOTH" } else { "ABLATE_A_ONLY" };
    let mode: MaskMode = s
        .get("mode")
        .map_or(default_mode, String::as_str)
        .parse()
        .map_err(lib_err)?;
    let (attrs_visible, with_residual) = match mode {
        MaskMode::AblateNone => (false, false),
        MaskMode::AblateAOnly => (true, false),
        MaskMode::AblateROnly => (false, true),
        MaskMode::AblateBoth => (true, true),
        other => return usage(format!("{other} is not a synthesis mode")),
    };
    let noise_gate = match s.get("noise").map_or("drop", String::as_str) {
        "keep" => Gate::Keep,
        "drop" => Gate::Drop,
        other => return usage(format!("noise `{other}`: keep|drop")),
    };
    let placeholder = || AttributeTokens {
        streams: std::array::from_fn(|_| vec![0; c.frames]),
        vocab: c.attr_vocab,
    };
    let attrs = match s.get("attrs") {
        Some(p) => read_attrs(Path::new(p), c.attr_vocab)?,
        None if !attrs_visible => placeholder(),
        None => return usage(format!("{mode} needs `--attrs`")),
    };
    let residual = if with_residual {
        let grid = source.ok_or_else(|| Failure::Usage(format!("{mode} needs `--residual_source`")))?;
        let ex = TokenizedExample {
            mel: quantize_mel(&grid, &ckpt.quantizer),
            attrs: attrs.clone(),
        };
        Some(ckpt.model.extract_residuals(&ex).map_err(lib_err)?)
    } else {
        None
    };
    let tokens = ckpt
        .model
        .generate_tokens(&attrs, residual.as_ref(), noise_gate, attrs_visible)
        .map_err(lib_err)?;
    let grid = dequantize_mel(&tokens, &ckpt.quantizer).map_err(lib_err)?;
    write_grid(&out, &grid)?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(s: &Settings) -> Result<PathBuf, Failure> {
    let dir = path(s, "out_dir")?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn ablate(s: &Settings) -> Result<(), Failure> {
    let ckpt = load(s)?;
    let corpus = read_corpus(&path(s, "corpus")?).map_err(lib_err)?;
    let dir = out_dir(s)?;
    let workers: usize = get(s, "workers", 1)?;
    let (modes, tag) = match s.get("modes") {
        None => (MaskMode::ABLATIONS.to_vec(), "all".to_string()),
        Some(list) => {
            let modes = list
                .split(',')
                .map(|m| m.trim().parse::<MaskMode>())
                .collect::<rtmae::Result<Vec<_>>>()
                .map_err(lib_err)?;
            if let Some(bad) = modes.iter().find(|m| !MaskMode::ABLATIONS.contains(m)) {
                return usage(format!("{bad} is not an ablation mode"));
            }
            let tag = modes.iter().map(|m| m.name()).collect::<Vec<_>>().join("+");
            (modes, tag)
        }
    };
    check_corpus(&ckpt, &corpus)?;
    let held = heldout_samples(&corpus);
    let ev = Evaluator::from_checkpoint(&ckpt, corpus.spec.ranges, workers);
    let rows = ev.ablation_rows(&held, &modes).map_err(lib_err)?;
    let stem = format!("ablate_{tag}_tau{}", checkpoint_tau(&ckpt));
    write_file(&dir.join(format!("{stem}.csv")), &ablation_csv(&rows))?;
    write_file(&dir.join(format!("{stem}.json")), &ablation_json(&rows))?;
    for r in &rows {
        println!("{:<14} mse {:.6}", r.mode.name(), r.mse);
    }
    Ok(())
}

fn check_corpus(ckpt: &Checkpoint, corpus: &rtmae::synth::Corpus) -> Result<(), Failure> {
    let c = &ckpt.model.config;
    if (c.frames, c.bins) != (corpus.spec.frames, corpus.spec.bins)
        || c.attr_vocab != model_config_for(c, corpus).attr_vocab
    {
        return usage("corpus shape or factor ranges differ from the checkpoint's");
    }
    Ok(())
}

fn sweep(s: &Settings) -> Result<(), Failure> {
    let cfg = train_config(s)?;
    let corpus = read_corpus(&path(s, "corpus")?).map_err(lib_err)?;
    let dir = out_dir(s)?;
    let workers: usize = get(s, "workers", 1)?;
    let taus = s
        .get("taus")
        .map_or("0,0.5,1", String::as_str)
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .or_else(|_| usage("`taus` must be a comma-separated list of numbers"))?;
    let points = tau_sweep(&taus, &cfg, &corpus, workers).map_err(lib_err)?;
    let mut curves = String::from("tau,epoch,loss,ce_mel,ce_attr,heldout_ce_mel\n");
    for p in &points {
        for m in &p.metrics {
            let _ = writeln!(
                curves,
                "{},{},{},{},{},{}",
                p.tau, m.epoch, m.loss, m.ce_mel, m.ce_attr, m.heldout_ce_mel
            );
        }
        rtmae::trainer::save_checkpoint(&p.checkpoint, &dir.join(format!("ckpt_tau{}.bin", p.tau)))
            .map_err(lib_err)?;
        println!("tau {}: kept {:.6} dropped {:.6}", p.tau, p.kept_mse, p.dropped_mse);
    }
    write_file(&dir.join("sweep_tau.csv"), &sweep_csv(&points))?;
    write_file(&dir.join("sweep_tau_curves.csv"), &curves)?;
    Ok(())
}

fn denoise(s: &Settings) -> Result<(), Failure> {
    let ckpt = load(s)?;
    let corpus = read_corpus(&path(s, "corpus")?).map_err(lib_err)?;
    let dir = out_dir(s)?;
    let workers: usize = get(s, "workers", 1)?;
    check_corpus(&ckpt, &corpus)?;
    let held = heldout_samples(&corpus);
    let ev = Evaluator::from_checkpoint(&ckpt, corpus.spec.ranges, workers);
    let report = ev.denoise_eval(&held).map_err(lib_err)?;
    let stem = format!("denoise_tau{}", checkpoint_tau(&ckpt));
    write_file(&dir.join(format!("{stem}.csv")), &report.csv())?;
    write_file(&dir.join(format!("{stem}.json")), &report.json())?;
    println!(
        "noise energy kept {:.6} off {:.6}; clean MSE kept {:.6} off {:.6}",
        report.energy_kept, report.energy_off, report.clean_mse_kept, report.clean_mse_off
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_parsing() {
        let parsed = parse_config_text("# top\nepochs = 3\n\nlr=1e-3 # trailing\n").unwrap();
        assert_eq!(
            parsed,
            vec![("epochs".into(), "3".into()), ("lr".into(), "1e-3".into())]
        );
        assert!(parse_config_text("no equals sign").is_err());
    }

    #[test]
    fn every_key_documented() {
        for (name, _) in COMMANDS {
            for (k, h) in keys_of(name) {
                assert!(!h.is_empty(), "{name}: {k}");
            }
        }
        assert!(keys_of("train").iter().any(|(k, _)| k == "mask_attr3"));
        assert!(!keys_of("sweep-tau").iter().any(|(k, _)| k == "checkpoint"));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(dispatch(["rtmae", "gen-data", "--bogus", "1"]), 2);
        assert_eq!(dispatch(["rtmae", "nonsense"]), 2);
        assert_eq!(dispatch(["rtmae", "gen-data", "--n", "ten", "--out", "x"]), 2);
    }
}
