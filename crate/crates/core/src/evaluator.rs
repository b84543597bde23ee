//! Error reports against a reference peak list, the integer-maximum baseline,
//! the attention and augmentation ablations, and localization throughput.

use std::fmt::{self, Write as _};
use std::io::{self, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::RngExt;
use serde::Serialize;
use thiserror::Error;

use crate::braggnn::{self, ArchSpec, BraggError, ModelWeights};
use crate::frame_io::{PeakRecord, PeakSource};
use crate::segment::{to_frame_coords, Patch};
use crate::synth::{stream_rng, STREAM_TEST_OFFSETS};
use crate::trainer::{self, augment_crop, AugmentConfig, Dataset, Start, TrainConfig, TrainError, TrainingHistory};
use crate::voigtfit::{fit_patch, LMOptions};

/// Predictions farther than this (pixels) from every reference are unmatched.
pub const MATCH_RADIUS: f64 = 2.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no errors to summarize")]
    Empty,
    #[error("predictions {first} and {second} are both nearest to reference {reference} in frame {frame}")]
    Ambiguous { frame: usize, reference: usize, first: usize, second: usize },
    #[error("weights expect {expected}x{expected} patches, got {found}x{found}")]
    PatchSize { expected: usize, found: usize },
    #[error("benchmark needs at least {min} patches, got {found}")]
    TooFewPatches { min: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] BraggError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Signed and Euclidean error of one matched pair (`pred - ref`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeakError {
    pub pred: usize,
    pub reference: usize,
    pub frame_index: usize,
    pub dy: f64,
    pub dz: f64,
    pub dist: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matching {
    /// In prediction order.
    pub errors: Vec<PeakError>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_ref: Vec<usize>,
}

/// Pairs every prediction with the nearest reference in the same frame
/// (within [`MATCH_RADIUS`]) and returns the per-pair errors.
pub fn euclidean_errors(pred: &[PeakRecord], reference: &[PeakRecord]) -> Result<Matching, EvalError> {
    let mut by_frame: std::collections::HashMap<usize, Vec<usize>> = Default::default();
    for (i, r) in reference.iter().enumerate() {
        by_frame.entry(r.frame_index).or_default().push(i);
    }
    let mut owner: Vec<Option<usize>> = vec![None; reference.len()];
    let mut out = Matching::default();
    for (pi, p) in pred.iter().enumerate() {
        let nearest = by_frame
            .get(&p.frame_index)
            .into_iter()
            .flatten()
            .map(|&ri| (ri, (p.center_y - reference[ri].center_y).hypot(p.center_z - reference[ri].center_z)))
            .filter(|&(_, d)| d <= MATCH_RADIUS)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let Some((ri, dist)) = nearest else {
            out.unmatched_pred.push(pi);
            continue;
        };
        if let Some(first) = owner[ri] {
            return Err(EvalError::Ambiguous { frame: p.frame_index, reference: ri, first, second: pi });
        }
        owner[ri] = Some(pi);
        let r = &reference[ri];
        out.errors.push(PeakError {
            pred: pi,
            reference: ri,
            frame_index: p.frame_index,
            dy: p.center_y - r.center_y,
            dz: p.center_z - r.center_z,
            dist,
        });
    }
    out.unmatched_ref = owner.iter().enumerate().filter(|(_, o)| o.is_none()).map(|(i, _)| i).collect();
    Ok(out)
}

/// Linear interpolation between order statistics at zero-based index
/// `p (n - 1)`; `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let x = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (x - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub reference: String,
    pub n_peaks: usize,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub unmatched_pred: usize,
    pub unmatched_ref: usize,
    #[serde(skip)]
    pub errors: Vec<PeakError>,
}

/// Summarizes matched errors; fails on an empty set.
pub fn percentile_report(matching: &Matching, method: &str, reference: &str) -> Result<EvalReport, EvalError> {
    if matching.errors.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut d: Vec<f64> = matching.errors.iter().map(|e| e.dist).collect();
    d.sort_by(f64::total_cmp);
    Ok(EvalReport {
        method: method.to_string(),
        reference: reference.to_string(),
        n_peaks: d.len(),
        p50: percentile(&d, 0.50),
        p75: percentile(&d, 0.75),
        p95: percentile(&d, 0.95),
        unmatched_pred: matching.unmatched_pred.len(),
        unmatched_ref: matching.unmatched_ref.len(),
        errors: matching.errors.clone(),
    })
}

impl EvalReport {
    /// Per-peak errors as CSV.
    pub fn write_errors_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["frame_index", "pred", "reference", "dy", "dz", "dist"]).map_err(csv_err)?;
        for e in &self.errors {
            w.write_record([
                e.frame_index.to_string(),
                e.pred.to_string(),
                e.reference.to_string(),
                format!("{:.8}", e.dy),
                format!("{:.8}", e.dz),
                format!("{:.8}", e.dist),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> EvalError {
    EvalError::Io(io::Error::other(e))
}

/// Summary rows (one per report) as CSV.
pub fn write_summary_csv<W: Write>(reports: &[&EvalReport], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "reference", "n_peaks", "p50", "p75", "p95", "unmatched_pred", "unmatched_ref"])
        .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.reference.clone(),
            r.n_peaks.to_string(),
            format!("{:.6}", r.p50),
            format!("{:.6}", r.p75),
            format!("{:.6}", r.p95),
            r.unmatched_pred.to_string(),
            r.unmatched_ref.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned text table of report summaries.
pub fn summary_table(reports: &[&EvalReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$}  {:>7}  {:>8}  {:>8}  {:>8}  reference\n", "method", "n", "P50", "P75", "P95");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>7}  {:>8.4}  {:>8.4}  {:>8.4}  {}",
            r.method, r.n_peaks, r.p50, r.p75, r.p95, r.reference
        );
    }
    s
}

/// Integer coordinates of each patch's brightest pixel (first in raster
/// order on ties), in frame coordinates.
pub fn maxima_baseline(patches: &[Patch]) -> Vec<PeakRecord> {
    patches
        .iter()
        .map(|p| {
            let (i, &v) = p.values.iter().enumerate().fold((0, &f64::NEG_INFINITY), |best, (i, v)| if *v > *best.1 { (i, v) } else { best });
            let (y, z) = to_frame_coords(p, (i % p.size) as f64, (i / p.size) as f64);
            PeakRecord { frame_index: p.frame_index, center_y: y, center_z: z, amplitude: v, source: PeakSource::Maxima }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    VoigtFit,
    #[serde(rename = "braggnn")]
    BraggNN,
    Maxima,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::VoigtFit => "voigt_fit",
            Self::BraggNN => "braggnn",
            Self::Maxima => "maxima",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "voigt" | "voigt_fit" => Ok(Self::VoigtFit),
            "braggnn" => Ok(Self::BraggNN),
            "maxima" => Ok(Self::Maxima),
            _ => Err(format!("unknown method {s:?} (expected voigt, braggnn or maxima)")),
        }
    }
}

/// A method plus whatever it needs to run.
#[derive(Debug, Clone, Copy)]
pub enum Localizer<'a> {
    VoigtFit(LMOptions),
    BraggNN(&'a ModelWeights),
    Maxima,
}

impl Localizer<'_> {
    pub fn method(&self) -> Method {
        match self {
            Self::VoigtFit(_) => Method::VoigtFit,
            Self::BraggNN(_) => Method::BraggNN,
            Self::Maxima => Method::Maxima,
        }
    }
}

/// Localizes every patch on the current rayon pool. Failed fits, and fits
/// whose center lands outside the patch, yield `None`.
pub fn localize_patches(loc: &Localizer, patches: &[Patch]) -> Result<Vec<Option<PeakRecord>>, EvalError> {
    use rayon::prelude::*;
    match loc {
        Localizer::Maxima => Ok(maxima_baseline(patches).into_iter().map(Some).collect()),
        Localizer::VoigtFit(opts) => Ok(patches
            .par_iter()
            .map(|p| {
                let inside = |v: f64| v >= -0.5 && v <= p.size as f64 - 0.5;
                fit_patch(p, opts).ok().filter(|r| inside(r.center_in_patch.0) && inside(r.center_in_patch.1)).map(|r| {
                    let (y, z) = to_frame_coords(p, r.center_in_patch.0, r.center_in_patch.1);
                    PeakRecord { frame_index: p.frame_index, center_y: y, center_z: z, amplitude: r.params.amp, source: PeakSource::VoigtFit }
                })
            })
            .collect()),
        Localizer::BraggNN(w) => {
            let size = w.arch.patch_size;
            if let Some(p) = patches.iter().find(|p| p.size != size) {
                return Err(EvalError::PatchSize { expected: size, found: p.size });
            }
            let flat: Vec<f64> = patches.iter().flat_map(|p| p.values.iter().copied()).collect();
            let pred = braggnn::predict(w, &flat, patches.len())?;
            Ok(patches
                .iter()
                .zip(pred.chunks_exact(2))
                .map(|(p, c)| {
                    let (y, z) = to_frame_coords(p, c[0], c[1]);
                    let (lo, hi) = p.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                    Some(PeakRecord { frame_index: p.frame_index, center_y: y, center_z: z, amplitude: hi - lo, source: PeakSource::BraggNN })
                })
                .collect())
        }
    }
}

/// Test crops for `indices`: centered, or shifted by offsets drawn uniformly
/// from `{-1, 0, 1}^2` (redrawn when a shift would leave the frame).
pub fn test_patches(data: &Dataset, indices: &[usize], shifted: bool, seed: u64) -> Result<Vec<Patch>, EvalError> {
    let mut rng = stream_rng(seed, STREAM_TEST_OFFSETS, 0);
    indices
        .iter()
        .map(|&i| {
            let e = &data.entries[i];
            let (m, n) = if shifted { data.sample_offset(i, 1, &mut rng)? } else { (0, 0) };
            Ok(augment_crop(data.frame(e), e.maxima, e.label, m, n, data.patch_size)?)
        })
        .collect()
}

/// Reference records (exact truth) for `indices`.
pub fn truth_records(data: &Dataset, indices: &[usize]) -> Vec<PeakRecord> {
    indices
        .iter()
        .map(|&i| {
            let e = &data.entries[i];
            PeakRecord {
                frame_index: data.stack.frames[e.frame].frame_index,
                center_y: e.truth.0,
                center_z: e.truth.1,
                amplitude: e.amplitude,
                source: PeakSource::GroundTruth,
            }
        })
        .collect()
}

/// Localizes `patches` and scores them against `reference`.
pub fn evaluate(loc: &Localizer, patches: &[Patch], reference: &[PeakRecord], label: &str) -> Result<EvalReport, EvalError> {
    let pred: Vec<PeakRecord> = localize_patches(loc, patches)?.into_iter().flatten().collect();
    percentile_report(&euclidean_errors(&pred, reference)?, label, "ground_truth")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Attention,
    Augmentation,
}

impl FromStr for AblationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "attention" => Ok(Self::Attention),
            "augmentation" => Ok(Self::Augmentation),
            _ => Err(format!("unknown ablation {s:?} (expected attention or augmentation)")),
        }
    }
}

/// One arm of an ablation.
#[derive(Debug, Clone)]
pub struct AblationArm {
    pub label: String,
    pub report: EvalReport,
    pub history: TrainingHistory,
    pub initial_checksum: u64,
    pub initial_backbone_checksum: u64,
    pub weights: ModelWeights,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub with: AblationArm,
    pub without: AblationArm,
    /// Test peaks shared by both arms.
    pub n_test: usize,
}

impl AblationReport {
    /// `with / without` for P50, P75, P95.
    pub fn ratios(&self) -> [f64; 3] {
        let (a, b) = (&self.with.report, &self.without.report);
        [a.p50 / b.p50, a.p75 / b.p75, a.p95 / b.p95]
    }

    pub fn table(&self) -> String {
        let mut s = summary_table(&[&self.with.report, &self.without.report]);
        let [r50, r75, r95] = self.ratios();
        let _ = writeln!(s, "{:<14}  {:>7}  {:>8.4}  {:>8.4}  {:>8.4}", "ratio", "", r50, r75, r95);
        let _ = writeln!(
            s,
            "initial backbone checksum: {:016x} / {:016x}",
            self.with.initial_backbone_checksum, self.without.initial_backbone_checksum
        );
        s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["ablation", "arm", "n_peaks", "p50", "p75", "p95", "best_iteration", "initial_checksum", "initial_backbone_checksum"])
            .map_err(csv_err)?;
        let kind = match self.kind {
            AblationKind::Attention => "attention",
            AblationKind::Augmentation => "augmentation",
        };
        for arm in [&self.with, &self.without] {
            let r = &arm.report;
            w.write_record([
                kind.to_string(),
                arm.label.clone(),
                r.n_peaks.to_string(),
                format!("{:.6}", r.p50),
                format!("{:.6}", r.p75),
                format!("{:.6}", r.p95),
                arm.history.best_iteration.to_string(),
                format!("{:016x}", arm.initial_checksum),
                format!("{:016x}", arm.initial_backbone_checksum),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains two models that differ in one switch (same data, same seed) and
/// scores both on the same test crops. The augmentation ablation tests on
/// crops shifted by offsets from `{-1, 0, 1}^2`; the attention ablation on
/// centered crops.
pub fn run_ablation(
    kind: AblationKind,
    data: &Dataset,
    arch: &ArchSpec,
    train_cfg: &TrainConfig,
    aug: &AugmentConfig,
    max_test: Option<usize>,
) -> Result<AblationReport, EvalError> {
    let test: Vec<usize> = data.split.test.iter().take(max_test.unwrap_or(usize::MAX)).copied().collect();
    if test.is_empty() {
        return Err(TrainError::EmptySplit("test").into());
    }
    let shifted = kind == AblationKind::Augmentation;
    let patches = test_patches(data, &test, shifted, train_cfg.seed)?;
    let reference = truth_records(data, &test);
    let arm = |label: &str, arch: &ArchSpec, aug: &AugmentConfig| -> Result<AblationArm, EvalError> {
        let init = ModelWeights::init(arch, train_cfg.seed)?;
        let out = trainer::train(data, Start::Init(arch.clone()), train_cfg, aug)?;
        let report = evaluate(&Localizer::BraggNN(&out.weights), &patches, &reference, label)?;
        Ok(AblationArm {
            label: label.to_string(),
            report,
            history: out.history,
            initial_checksum: out.initial_checksum,
            initial_backbone_checksum: init.backbone_checksum(),
            weights: out.weights,
        })
    };
    let (with, without) = match kind {
        AblationKind::Attention => {
            let on = ArchSpec { attention_enabled: true, ..arch.clone() };
            let off = ArchSpec { attention_enabled: false, ..arch.clone() };
            (arm("with_attention", &on, aug)?, arm("without_attention", &off, aug)?)
        }
        AblationKind::Augmentation => {
            let off = AugmentConfig { enabled: false, ..*aug };
            let on = AugmentConfig { enabled: true, ..*aug };
            (arm("with_augmentation", arch, &on)?, arm("without_augmentation", arch, &off)?)
        }
    };
    Ok(AblationReport { kind, with, without, n_test: test.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub method: Method,
    pub n_patches: usize,
    /// Median wall time of the timed repetitions.
    pub wall_s: f64,
    pub patches_per_s: f64,
    pub threads: usize,
    pub repetitions: usize,
}

impl BenchResult {
    pub fn write_json_line<W: Write>(&self, mut out: W) -> Result<(), EvalError> {
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

pub const MIN_BENCH_PATCHES: usize = 1000;
/// Patches localized in the untimed warm-up pass.
pub const WARMUP_PATCHES: usize = 1024;

/// Times patch -> center for one method on a dedicated pool of `threads`
/// workers: one untimed warm-up pass over the first [`WARMUP_PATCHES`],
/// then `repetitions` timed passes; the median is reported.
pub fn bench_throughput(loc: &Localizer, patches: &[Patch], threads: usize, repetitions: usize) -> Result<BenchResult, EvalError> {
    if patches.len() < MIN_BENCH_PATCHES {
        return Err(EvalError::TooFewPatches { min: MIN_BENCH_PATCHES, found: patches.len() });
    }
    if threads == 0 || repetitions < 3 {
        return Err(EvalError::Config(format!("need threads >= 1 and repetitions >= 3, got {threads} and {repetitions}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))?;
    pool.install(|| {
        localize_patches(loc, &patches[..WARMUP_PATCHES.min(patches.len())])?;
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            let out = localize_patches(loc, patches)?;
            times.push(t.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
        times.sort_by(f64::total_cmp);
        let wall_s = times[times.len() / 2];
        Ok(BenchResult {
            method: loc.method(),
            n_patches: patches.len(),
            wall_s,
            patches_per_s: patches.len() as f64 / wall_s,
            threads,
            repetitions,
        })
    })
}

/// Random centered test patches for benchmarking: one peak per patch at a
/// uniformly drawn sub-pixel position near the center.
pub fn bench_patches(n: usize, size: usize, seed: u64) -> Vec<Patch> {
    use crate::synth::{poissonize, render_patch, PeakParams};
    use crate::frame_io::Frame;
    let mut rng = stream_rng(seed, STREAM_TEST_OFFSETS, 1);
    let c = (size / 2) as f64;
    (0..n)
        .map(|i| {
            let p = PeakParams {
                bg: 10.0,
                amp: rng.random_range(200.0..2000.0),
                eta: rng.random_range(0.0..1.0),
                mu_y: c + rng.random_range(-0.5..0.5),
                mu_z: c + rng.random_range(-0.5..0.5),
                sigma_y: rng.random_range(0.6..1.6),
                sigma_z: rng.random_range(0.6..1.6),
            };
            let clean: Vec<f32> = render_patch(&p, size).into_iter().map(|v| v as f32).collect();
            let frame = Frame::new(size, size, clean, i).expect("size x size");
            let noisy = poissonize(&frame, seed).expect("non-negative means");
            let values = noisy.counts.iter().map(|&v| v as f64).collect();
            Patch { size, values, origin: (0, 0), label_center: Some((p.mu_y, p.mu_z)), frame_index: i, maxima: (size / 2, size / 2) }
        })
        .collect()
}
