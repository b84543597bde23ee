//! The `bragg` command line: `simulate | localize | train | eval | ablate | bench`.
//!
//! Any `--section.key value` (or `--section.key=value`) argument overrides the
//! config file; `--seed` and `--threads` are shorthands for the top-level keys.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::braggnn::{load_weights_expecting, save_weights, ArchSpec, BraggError, ModelWeights};
use crate::config::{ConfigError, RunConfig};
use crate::evaluator::{
    bench_patches, bench_throughput, euclidean_errors, localize_patches, percentile_report, run_ablation, summary_table,
    write_summary_csv, AblationKind, EvalError, Localizer, Method,
};
use crate::frame_io::{read_frames, read_peaks, write_frames, write_peaks, FrameIoError, PeakRecord};
use crate::segment::segment_stack;
use crate::synth::{render_scene, SceneConfig, SynthError};
use crate::trainer::{self, AdamHyper, AdamState, AugmentConfig, Dataset, DatasetConfig, LabelSource, Start, TrainConfig, TrainError};
use crate::voigtfit::LMOptions;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    FrameIo(#[from] FrameIoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] BraggError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "bragg", version, about = "Sub-pixel Bragg peak localization: pseudo-Voigt fitting and BraggNN")]
struct Cli {
    /// TOML config file; `[section]` tables map to `section.key` names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for every parallel stage (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Render a seeded frame stack and its ground-truth peak list.
    Simulate,
    /// Segment frames and localize every single-maximum peak.
    Localize,
    /// Train BraggNN on frames with known peak centers.
    Train,
    /// Compare a peak list against a reference peak list.
    Eval,
    /// Train a with/without pair for one switch and compare them.
    Ablate,
    /// Time the patch -> center step for each method.
    Bench,
    /// Print the effective configuration.
    Config,
}

/// Splits `--a.b value` / `--a.b=value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(name) = a.strip_prefix("--").filter(|n| n.split('=').next().unwrap_or("").contains('.')) else {
            rest.push(a);
            continue;
        };
        match name.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| ConfigError::MissingValue(name.to_string()))?;
                overrides.push((name.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

/// Parses `args` (including the program name) and runs the subcommand,
/// writing human-readable output to `out` and diagnostics to `err`.
pub fn run(args: Vec<String>, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    for (k, v) in &overrides {
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(t) = cli.threads {
        cfg.set("threads", &t.to_string())?;
    }
    let threads = match cfg.usize("threads") {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    pool.install(|| match cli.cmd {
        Cmd::Simulate => simulate(&cfg, out),
        Cmd::Localize => localize(&cfg, out, err),
        Cmd::Train => train(&cfg, out),
        Cmd::Eval => eval(&cfg, out),
        Cmd::Ablate => ablate(&cfg, out),
        Cmd::Bench => bench(&cfg, threads, out),
        Cmd::Config => Ok(write!(out, "{}", cfg.dump())?),
    })
}

fn invalid(key: &str, reason: impl std::fmt::Display) -> CliError {
    ConfigError::Invalid { key: key.to_string(), reason: reason.to_string() }.into()
}

fn path(cfg: &RunConfig, key: &str) -> PathBuf {
    PathBuf::from(cfg.str(key))
}

pub fn scene_config(cfg: &RunConfig) -> SceneConfig {
    SceneConfig {
        n_frames: cfg.usize("synth.n_frames"),
        n_peaks: cfg.usize("synth.n_peaks"),
        width: cfg.usize("synth.width"),
        height: cfg.usize("synth.height"),
        amp_range: (cfg.float("synth.amp_min"), cfg.float("synth.amp_max")),
        sigma_range: (cfg.float("synth.sigma_min"), cfg.float("synth.sigma_max")),
        eta_range: (cfg.float("synth.eta_min"), cfg.float("synth.eta_max")),
        bg: cfg.float("synth.bg"),
        min_separation: cfg.float("synth.min_separation"),
        margin: cfg.float("synth.margin"),
        poisson_noise: cfg.bool("synth.poisson_noise"),
        seed: cfg.int("seed"),
    }
}

pub fn arch_spec(cfg: &RunConfig) -> Result<ArchSpec, CliError> {
    let arch = ArchSpec {
        patch_size: cfg.usize("model.patch_size"),
        conv_channels: cfg.list("model.conv_channels"),
        fc_sizes: cfg.list("model.fc_sizes"),
        attention_enabled: cfg.bool("model.attention"),
        attention_bottleneck: cfg.usize("model.attention_bottleneck"),
    };
    arch.validate().map_err(|e| invalid("model", e))?;
    Ok(arch)
}

fn threshold(cfg: &RunConfig) -> Result<Option<f64>, CliError> {
    match cfg.str("segment.threshold") {
        "auto" => Ok(None),
        s => s.parse().map(Some).map_err(|_| invalid("segment.threshold", format!("expected `auto` or a number, got `{s}`"))),
    }
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig, CliError> {
    let t = TrainConfig {
        batch_size: cfg.usize("train.batch_size"),
        max_iterations: cfg.int("train.max_iterations"),
        adam: AdamHyper {
            lr: cfg.float("train.lr"),
            beta1: cfg.float("train.beta1"),
            beta2: cfg.float("train.beta2"),
            eps: cfg.float("train.eps"),
        },
        validate_every: cfg.int("train.validate_every"),
        patience: cfg.usize("train.patience"),
        seed: cfg.int("seed"),
    };
    t.validate()?;
    Ok(t)
}

fn augment_config(cfg: &RunConfig) -> AugmentConfig {
    AugmentConfig { enabled: cfg.bool("augment.enabled"), max_offset: cfg.usize("augment.max_offset") }
}

fn dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let stack = read_frames(path(cfg, "io.frames"))?;
    let truth = read_peaks(path(cfg, "io.truth"))?;
    let dc = DatasetConfig {
        patch_size: cfg.usize("model.patch_size"),
        threshold: threshold(cfg)?,
        label_source: cfg.parsed::<LabelSource>("data.label_source")?,
        train_frac: cfg.float("data.train_frac"),
        val_frac: cfg.float("data.val_frac"),
        seed: cfg.int("seed"),
    };
    Ok(Dataset::from_truth(stack, &truth, &dc)?)
}

fn simulate(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let sc = scene_config(cfg);
    let scene = render_scene(&sc)?;
    write_frames(&scene.stack, path(cfg, "io.frames"))?;
    write_peaks(&scene.truth, path(cfg, "io.truth"))?;
    writeln!(
        out,
        "simulated {} frames ({}x{}), {} peaks -> {}, {}",
        scene.stack.len(),
        sc.width,
        sc.height,
        scene.truth.len(),
        cfg.str("io.frames"),
        cfg.str("io.truth")
    )?;
    Ok(())
}

fn localize(cfg: &RunConfig, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let method = cfg.parsed::<Method>("localize.method")?;
    let size = cfg.usize("model.patch_size");
    let weights;
    let loc = match method {
        Method::Maxima => Localizer::Maxima,
        Method::VoigtFit => Localizer::VoigtFit(LMOptions { max_iterations: cfg.usize("fit.max_iterations"), ..Default::default() }),
        Method::BraggNN => {
            let p = path(cfg, "io.weights");
            if !p.exists() {
                return Err(invalid("io.weights", format!("braggnn needs trained weights; {} does not exist", p.display())));
            }
            weights = load_weights_expecting(&p, &arch_spec(cfg)?)?;
            Localizer::BraggNN(&weights)
        }
    };
    let stack = read_frames(path(cfg, "io.frames"))?;
    let candidates = segment_stack(&stack, threshold(cfg)?, size);
    let mut peaks: Vec<PeakRecord> = Vec::new();
    let mut failed = 0;
    for (frame, cand) in stack.frames.iter().zip(&candidates) {
        let s = &cand.summary;
        writeln!(
            err,
            "frame {}: {} regions, {} patches, {} multi-maxima, {} at border, {} too small, {} overlapping",
            frame.frame_index, s.regions, s.emitted, s.multi_maxima, s.border, s.small, s.overlap
        )?;
    }
    let patches: Vec<_> = candidates.into_iter().flat_map(|c| c.patches).collect();
    for r in localize_patches(&loc, &patches)? {
        match r {
            Some(r) => peaks.push(r),
            None => failed += 1,
        }
    }
    write_peaks(&peaks, path(cfg, "io.peaks"))?;
    writeln!(out, "{}: {} peaks from {} frames -> {}", method, peaks.len(), stack.len(), cfg.str("io.peaks"))?;
    if failed > 0 {
        writeln!(err, "{failed} patches could not be localized")?;
    }
    Ok(())
}

fn adam_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}

fn train(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let arch = arch_spec(cfg)?;
    let tc = train_config(cfg)?;
    let data = dataset(cfg)?;
    let wpath = path(cfg, "io.weights");
    let start = if cfg.bool("train.resume") {
        let w = load_weights_expecting(&wpath, &arch)?;
        let adam = AdamState::load(adam_path(&wpath))?;
        if adam.m.arch != arch {
            return Err(invalid("train.resume", "optimizer state does not match the weights"));
        }
        Start::Resume(w, adam)
    } else {
        Start::Init(arch)
    };
    writeln!(
        out,
        "dataset: {} peaks (train {}, val {}, test {}), {} unmatched maxima, {} failed label fits",
        data.entries.len(),
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len(),
        data.unmatched,
        data.fit_failures
    )?;
    let result = trainer::train(&data, start, &tc, &augment_config(cfg))?;
    save_weights(&result.weights, &wpath)?;
    result.adam.save(adam_path(&wpath))?;
    result.history.write_csv(path(cfg, "io.history"))?;
    let h = &result.history;
    writeln!(
        out,
        "best validation loss {:.6e} at iteration {}; stopped at {}{} -> {}",
        h.best_val_loss,
        h.best_iteration,
        h.stopped_at,
        if h.early_stopped { " (early stop)" } else { "" },
        wpath.display()
    )?;
    Ok(())
}

fn eval(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let pred = read_peaks(cfg.str("eval.pred"))?;
    let reference = read_peaks(cfg.str("eval.reference"))?;
    let label = |v: &[PeakRecord], fallback: &str| v.first().map_or(fallback.to_string(), |r| r.source.to_string());
    let m = euclidean_errors(&pred, &reference)?;
    let report = percentile_report(&m, &label(&pred, "pred"), &label(&reference, "reference"))?;
    write_summary_csv(&[&report], std::fs::File::create(path(cfg, "io.report"))?)?;
    report.write_errors_csv(std::fs::File::create(path(cfg, "io.errors"))?)?;
    write!(out, "{}", summary_table(&[&report]))?;
    writeln!(out, "unmatched: {} predictions, {} references", report.unmatched_pred, report.unmatched_ref)?;
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let kind = cfg.parsed::<AblationKind>("ablate.kind")?;
    let arch = arch_spec(cfg)?;
    let tc = train_config(cfg)?;
    let data = dataset(cfg)?;
    let max_test = cfg.usize("ablate.max_test");
    let r = run_ablation(kind, &data, &arch, &tc, &augment_config(cfg), Some(max_test).filter(|&n| n > 0))?;
    r.write_csv(std::fs::File::create(path(cfg, "io.report"))?)?;
    write!(out, "{}", r.table())?;
    Ok(())
}

fn bench(cfg: &RunConfig, threads: usize, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let methods: Vec<Method> = cfg
        .str("bench.methods")
        .split(',')
        .map(|s| s.trim().parse().map_err(|e| invalid("bench.methods", e)))
        .collect::<Result<_, _>>()?;
    let arch = arch_spec(cfg)?;
    let wpath = path(cfg, "io.weights");
    let weights = if methods.contains(&Method::BraggNN) && wpath.exists() {
        load_weights_expecting(&wpath, &arch)?
    } else {
        ModelWeights::init(&arch, cfg.int("seed"))?
    };
    let patches = bench_patches(cfg.usize("bench.n_patches"), arch.patch_size, cfg.int("seed"));
    let mut file = std::fs::File::create(path(cfg, "io.bench"))?;
    writeln!(out, "{:<10}  {:>9}  {:>7}  {:>10}  {:>12}", "method", "patches", "threads", "wall_s", "patches/s")?;
    for m in methods {
        let loc = match m {
            Method::VoigtFit => Localizer::VoigtFit(LMOptions { max_iterations: cfg.usize("fit.max_iterations"), ..Default::default() }),
            Method::BraggNN => Localizer::BraggNN(&weights),
            Method::Maxima => Localizer::Maxima,
        };
        let r = bench_throughput(&loc, &patches, threads, cfg.usize("bench.repetitions"))?;
        r.write_json_line(&mut file)?;
        writeln!(out, "{:<10}  {:>9}  {:>7}  {:>10.4}  {:>12.1}", m, r.n_patches, r.threads, r.wall_s, r.patches_per_s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let (rest, ov) = split_overrides(strings(&["bragg", "--seed", "3", "simulate", "--synth.n_peaks", "0", "--io.frames=a.bfrm"])).unwrap();
        assert_eq!(rest, strings(&["bragg", "--seed", "3", "simulate"]));
        assert_eq!(ov, vec![("synth.n_peaks".into(), "0".into()), ("io.frames".into(), "a.bfrm".into())]);
        assert!(split_overrides(strings(&["bragg", "simulate", "--synth.n_peaks"])).is_err());
    }

    #[test]
    fn unknown_override_is_rejected_by_name() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let err = run(strings(&["bragg", "config", "--synth.peaks", "3"]), &mut o, &mut e).unwrap_err();
        assert!(err.to_string().contains("synth.peaks"), "{err}");
    }

    #[test]
    fn config_dump_reflects_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "seed = 5\n[train]\nbatch_size = 64\n").unwrap();
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let args = ["bragg", "config", "--config", file.to_str().unwrap(), "--train.batch_size", "8", "--seed", "9"];
        run(strings(&args), &mut o, &mut e).unwrap();
        let text = String::from_utf8(o).unwrap();
        assert!(text.contains("train.batch_size = 8\n"));
        assert!(text.contains("seed = 9\n"));
    }
}
