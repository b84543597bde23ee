//! Dataset assembly, offset augmentation, Adam, and the training loop with
//! validation-based early stopping.
//!
//! All randomness is drawn from per-purpose ChaCha8 streams keyed by the
//! training seed (shuffle streams by epoch, offset streams by iteration), so a
//! run is a pure function of its inputs and seed.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::braggnn::{self, read_weights_from, write_weights_to, ArchSpec, BraggError, ModelWeights, WeightGradients};
use crate::frame_io::{Frame, FrameStack, PeakRecord};
use crate::segment::{crop_at, segment_stack, Patch};
use crate::synth::{stream_rng, STREAM_AUGMENT, STREAM_SHUFFLE, STREAM_SPLIT};
use crate::voigtfit::{fit_batch, LMOptions};

/// Offset draws per sample before a crop is declared impossible.
pub const MAX_OFFSET_RETRIES: usize = 10;
/// Largest distance (pixels) between a maximum and the truth it is paired with.
pub const MATCH_RADIUS: f64 = 2.0;

const ADAM_MAGIC: [u8; 4] = *b"BNNA";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("crop at origin ({row}, {col}) leaves the {width}x{height} frame")]
    OutOfBounds { row: isize, col: isize, width: usize, height: usize },
    #[error("maximum at ({row}, {col}) in frame {frame} is too close to the border for any offset")]
    BorderPeak { frame: usize, row: usize, col: usize },
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("non-finite training loss at iteration {0}")]
    NonFiniteLoss(u64),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad optimizer state file magic {0:?}")]
    BadMagic([u8; 4]),
    #[error(transparent)]
    Model(#[from] BraggError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where training labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    GroundTruth,
    /// Pseudo-Voigt fit of the centered patch, as in the original protocol.
    VoigtFit,
}

impl std::str::FromStr for LabelSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ground_truth" => Ok(Self::GroundTruth),
            "voigt_fit" => Ok(Self::VoigtFit),
            _ => Err(format!("unknown label source {s:?} (expected ground_truth or voigt_fit)")),
        }
    }
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GroundTruth => "ground_truth",
            Self::VoigtFit => "voigt_fit",
        })
    }
}

/// One usable peak: a segmented maximum paired with its true center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    /// Index into `Dataset::stack.frames`.
    pub frame: usize,
    /// `(row, col)` of the maximum pixel.
    pub maxima: (usize, usize),
    /// Exact center `(y, z)` in frame coordinates.
    pub truth: (f64, f64),
    /// Training target `(y, z)` in frame coordinates.
    pub label: (f64, f64),
    pub amplitude: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Shuffles `0..n` and cuts it at `round(train_frac n)` and
    /// `round((train_frac + val_frac) n)`.
    pub fn random(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Result<Self, TrainError> {
        if !(train_frac >= 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
            return Err(TrainError::Config(format!("split fractions {train_frac} + {val_frac} must lie in [0, 1]")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, STREAM_SPLIT, 0));
        let a = (train_frac * n as f64).round() as usize;
        let b = (((train_frac + val_frac) * n as f64).round() as usize).max(a).min(n);
        let test = order.split_off(b);
        let val = order.split_off(a);
        Ok(Self { train: order, val, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub patch_size: usize,
    /// Segmentation threshold; `None` uses the per-frame robust default.
    pub threshold: Option<f64>,
    pub label_source: LabelSource,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            patch_size: 11,
            threshold: None,
            label_source: LabelSource::GroundTruth,
            train_frac: 0.8,
            val_frac: 0.09,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub stack: FrameStack,
    pub entries: Vec<Entry>,
    pub split: Split,
    pub patch_size: usize,
    /// Segmented maxima without a true peak within [`MATCH_RADIUS`].
    pub unmatched: usize,
    /// Maxima dropped because the label fit failed.
    pub fit_failures: usize,
}

impl Dataset {
    /// Segments every frame, pairs each single-maximum candidate with the
    /// nearest unclaimed true center in its frame, and splits the result.
    pub fn from_truth(stack: FrameStack, truth: &[PeakRecord], cfg: &DatasetConfig) -> Result<Self, TrainError> {
        if cfg.patch_size % 2 == 0 || cfg.patch_size < 3 {
            return Err(TrainError::Config(format!("patch size {} must be odd and >= 3", cfg.patch_size)));
        }
        let frame_pos: std::collections::HashMap<usize, usize> =
            stack.frames.iter().enumerate().map(|(i, f)| (f.frame_index, i)).collect();
        let mut by_frame: Vec<Vec<&PeakRecord>> = vec![Vec::new(); stack.len()];
        for t in truth {
            if let Some(&i) = frame_pos.get(&t.frame_index) {
                by_frame[i].push(t);
            }
        }
        let candidates = segment_stack(&stack, cfg.threshold, cfg.patch_size);
        let mut entries = Vec::new();
        let mut patches: Vec<Patch> = Vec::new();
        let mut unmatched = 0;
        for (fi, cand) in candidates.into_iter().enumerate() {
            let mut claimed = vec![false; by_frame[fi].len()];
            for patch in cand.patches {
                let (row, col) = patch.maxima;
                let nearest = by_frame[fi]
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| !claimed[*k])
                    .map(|(k, t)| (k, (t.center_y - col as f64).hypot(t.center_z - row as f64)))
                    .filter(|&(_, d)| d <= MATCH_RADIUS)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                let Some((k, _)) = nearest else {
                    unmatched += 1;
                    continue;
                };
                claimed[k] = true;
                let t = by_frame[fi][k];
                entries.push(Entry {
                    frame: fi,
                    maxima: (row, col),
                    truth: (t.center_y, t.center_z),
                    label: (t.center_y, t.center_z),
                    amplitude: t.amplitude,
                });
                patches.push(patch);
            }
        }
        let mut fit_failures = 0;
        if cfg.label_source == LabelSource::VoigtFit {
            let fits = fit_batch(&patches, &LMOptions::default());
            let mut kept = Vec::with_capacity(entries.len());
            for ((mut e, patch), fit) in entries.into_iter().zip(&patches).zip(fits) {
                match fit {
                    Ok(r) if r.converged => {
                        let (cy, cz) = r.center_in_patch;
                        e.label = (patch.origin.1 as f64 + cy, patch.origin.0 as f64 + cz);
                        kept.push(e);
                    }
                    _ => fit_failures += 1,
                }
            }
            entries = kept;
        }
        let split = Split::random(entries.len(), cfg.train_frac, cfg.val_frac, cfg.seed)?;
        Ok(Self { stack, entries, split, patch_size: cfg.patch_size, unmatched, fit_failures })
    }

    pub fn frame(&self, e: &Entry) -> &Frame {
        &self.stack.frames[e.frame]
    }

    /// Patches for `indices` with the given per-sample offsets, plus their
    /// labels in patch coordinates, flattened for the network.
    pub fn batch(&self, indices: &[usize], offsets: &[(isize, isize)]) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
        let area = self.patch_size * self.patch_size;
        let mut x = Vec::with_capacity(indices.len() * area);
        let mut y = Vec::with_capacity(indices.len() * 2);
        for (&i, &(m, n)) in indices.iter().zip(offsets) {
            let e = &self.entries[i];
            let p = augment_crop(self.frame(e), e.maxima, e.label, m, n, self.patch_size)?;
            let (ly, lz) = p.label_center.expect("set by augment_crop");
            x.extend_from_slice(&p.values);
            y.extend_from_slice(&[ly, lz]);
        }
        Ok((x, y))
    }

    /// Draws an admissible offset for entry `i`, retrying out-of-frame draws.
    pub fn sample_offset(&self, i: usize, max_offset: usize, rng: &mut ChaCha8Rng) -> Result<(isize, isize), TrainError> {
        let e = &self.entries[i];
        let f = self.frame(e);
        let k = max_offset as isize;
        let half = (self.patch_size / 2) as isize;
        for _ in 0..MAX_OFFSET_RETRIES {
            let (m, n) = (rng.random_range(-k as i64..=k as i64) as isize, rng.random_range(-k as i64..=k as i64) as isize);
            let (r0, c0) = (e.maxima.0 as isize + m - half, e.maxima.1 as isize + n - half);
            if r0 >= 0 && c0 >= 0 && r0 as usize + self.patch_size <= f.height && c0 as usize + self.patch_size <= f.width {
                return Ok((m, n));
            }
        }
        Err(TrainError::BorderPeak { frame: f.frame_index, row: e.maxima.0, col: e.maxima.1 })
    }
}

/// Crops with origin `maxima + (m, n) - half`, so the maximum lands at
/// `(half - m, half - n)`; the label is `truth - origin` in patch coordinates.
pub fn augment_crop(
    frame: &Frame,
    maxima: (usize, usize),
    truth: (f64, f64),
    m: isize,
    n: isize,
    patch_size: usize,
) -> Result<Patch, TrainError> {
    let half = (patch_size / 2) as isize;
    let origin = (maxima.0 as isize + m - half, maxima.1 as isize + n - half);
    let mut patch = crop_at(frame, origin, patch_size).ok_or(TrainError::OutOfBounds {
        row: origin.0,
        col: origin.1,
        width: frame.width,
        height: frame.height,
    })?;
    patch.maxima = maxima;
    patch.label_center = Some((truth.0 - patch.origin.1 as f64, truth.1 - patch.origin.0 as f64));
    Ok(patch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub max_offset: usize,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_offset: 2, enabled: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iterations: u64,
    pub adam: AdamHyper,
    /// Iterations between validation checks.
    pub validate_every: u64,
    /// Checks without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            max_iterations: 80_000,
            adam: AdamHyper::default(),
            validate_every: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const DESK_MAX_ITERATIONS: u64 = 3_000;

    pub fn validate(&self) -> Result<(), TrainError> {
        let a = &self.adam;
        let checks = [
            ("batch_size", self.batch_size as f64),
            ("max_iterations", self.max_iterations as f64),
            ("validate_every", self.validate_every as f64),
            ("patience", self.patience as f64),
            ("lr", a.lr),
            ("beta1", a.beta1),
            ("beta2", a.beta2),
            ("eps", a.eps),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if a.beta1 >= 1.0 || a.beta2 >= 1.0 {
            return Err(TrainError::Config("Adam betas must be below 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelWeights,
    pub v: ModelWeights,
    pub step: u64,
}

impl AdamState {
    pub fn new(w: &ModelWeights) -> Self {
        Self { m: w.zeros_like(), v: w.zeros_like(), step: 0 }
    }

    /// `"BNNA"`, u64 step, then `m` and `v` as two `BNNW` bodies.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), TrainError> {
        out.write_all(&ADAM_MAGIC)?;
        out.write_all(&self.step.to_le_bytes())?;
        write_weights_to(&self.m, &mut out)?;
        write_weights_to(&self.v, &mut out)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, TrainError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if magic != ADAM_MAGIC {
            return Err(TrainError::BadMagic(magic));
        }
        let mut step = [0u8; 8];
        input.read_exact(&mut step)?;
        let m = read_weights_from(&mut input)?;
        let v = read_weights_from(&mut input)?;
        if m.arch != v.arch {
            return Err(TrainError::Shape("optimizer moments disagree on architecture".into()));
        }
        Ok(Self { m, v, step: u64::from_le_bytes(step) })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(w: &mut ModelWeights, grads: &WeightGradients, state: &mut AdamState, hyper: &AdamHyper) -> Result<(), TrainError> {
    if grads.arch != w.arch || state.m.arch != w.arch || state.v.arch != w.arch {
        return Err(TrainError::Shape("weights, gradients and optimizer state must share an architecture".into()));
    }
    for (name, g) in grads.tensor_names().into_iter().zip(grads.tensors()) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - hyper.beta1.powf(t);
    let c2 = 1.0 - hyper.beta2.powf(t);
    let AdamState { m, v, .. } = state;
    for (((w, g), m), v) in w.tensors_mut().into_iter().zip(grads.tensors()).zip(m.tensors_mut()).zip(v.tensors_mut()) {
        for i in 0..w.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            w[i] -= hyper.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iteration: u64,
    /// Mean mini-batch loss since the previous row.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub rows: Vec<HistoryRow>,
    pub best_iteration: u64,
    pub best_val_loss: f64,
    /// Last iteration run (global step count).
    pub stopped_at: u64,
    pub early_stopped: bool,
}

impl TrainingHistory {
    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        let io_err = |e: csv::Error| TrainError::Io(io::Error::other(e));
        w.write_record(["iteration", "train_loss", "val_loss"]).map_err(io_err)?;
        for r in &self.rows {
            w.write_record([r.iteration.to_string(), format!("{:.9e}", r.train_loss), format!("{:.9e}", r.val_loss)])
                .map_err(io_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        self.write_csv_to(BufWriter::new(File::create(path)?))
    }
}

/// Everything [`train`] produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights at the best validation check.
    pub weights: ModelWeights,
    /// Optimizer state matching `weights`, for resuming.
    pub adam: AdamState,
    pub history: TrainingHistory,
    /// Checksum of the weights before the first update.
    pub initial_checksum: u64,
}

/// Where training starts from.
#[derive(Debug, Clone)]
pub enum Start {
    /// Fresh weights from `ModelWeights::init(arch, seed)`.
    Init(ArchSpec),
    Resume(ModelWeights, AdamState),
}

/// Offsets for one mini-batch. Streams are keyed by global iteration, so a
/// resumed run draws what an uninterrupted run would have drawn.
fn batch_offsets(
    data: &Dataset,
    indices: &[usize],
    aug: &AugmentConfig,
    seed: u64,
    iteration: u64,
) -> Result<Vec<(isize, isize)>, TrainError> {
    if !aug.enabled || aug.max_offset == 0 {
        return Ok(vec![(0, 0); indices.len()]);
    }
    let mut rng = stream_rng(seed, STREAM_AUGMENT, iteration);
    indices.iter().map(|&i| data.sample_offset(i, aug.max_offset, &mut rng)).collect()
}

fn epoch_order(train: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut stream_rng(seed, STREAM_SHUFFLE, epoch));
    order
}

/// Mean squared error on clean (unshifted) crops of `indices`.
pub fn clean_loss(w: &ModelWeights, data: &Dataset, indices: &[usize]) -> Result<f64, TrainError> {
    let (x, y) = data.batch(indices, &vec![(0, 0); indices.len()])?;
    let pred = braggnn::predict(w, &x, indices.len())?;
    Ok(braggnn::loss_mse(&pred, &y)?.0)
}

/// Mini-batch Adam on the train split with per-epoch shuffling and online
/// offset augmentation; stops after `patience` validation checks without
/// improvement and returns the best checkpoint.
pub fn train(data: &Dataset, start: Start, cfg: &TrainConfig, aug: &AugmentConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.split.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let (mut w, mut adam) = match start {
        Start::Init(arch) => {
            let w = ModelWeights::init(&arch, cfg.seed)?;
            let adam = AdamState::new(&w);
            (w, adam)
        }
        Start::Resume(w, adam) => (w, adam),
    };
    if w.arch.patch_size != data.patch_size {
        return Err(TrainError::Shape(format!(
            "model patch size {} does not match dataset patch size {}",
            w.arch.patch_size, data.patch_size
        )));
    }
    let initial_checksum = w.checksum();
    let first = adam.step;
    let last = first + cfg.max_iterations;
    let n_train = data.split.train.len() as u64;
    let batch = cfg.batch_size;

    let mut best = (w.clone(), adam.clone());
    let mut history = TrainingHistory { best_val_loss: clean_loss(&w, data, &data.split.val)?, best_iteration: first, ..Default::default() };
    let mut stale = 0;
    let mut window = (0.0, 0u64);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = u64::MAX;

    let mut indices = Vec::with_capacity(batch);
    for it in first + 1..=last {
        // Sample positions are global, so resuming continues the same epoch sequence.
        indices.clear();
        for s in 0..batch as u64 {
            let pos = (it - 1) * batch as u64 + s;
            let e = pos / n_train;
            if e != epoch {
                epoch = e;
                order = epoch_order(&data.split.train, cfg.seed, e);
            }
            indices.push(order[(pos % n_train) as usize]);
        }
        let offsets = batch_offsets(data, &indices, aug, cfg.seed, it)?;
        let (x, y) = data.batch(&indices, &offsets)?;
        let (loss, grads) = braggnn::loss_and_gradient(&w, &x, &y, batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(it));
        }
        adam_step(&mut w, &grads, &mut adam, &cfg.adam)?;
        window.0 += loss;
        window.1 += 1;
        history.stopped_at = it;

        if (it - first) % cfg.validate_every == 0 || it == last {
            let val = clean_loss(&w, data, &data.split.val)?;
            history.rows.push(HistoryRow { iteration: it, train_loss: window.0 / window.1 as f64, val_loss: val });
            window = (0.0, 0);
            if val < history.best_val_loss {
                history.best_val_loss = val;
                history.best_iteration = it;
                best = (w.clone(), adam.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    history.early_stopped = true;
                    break;
                }
            }
        }
    }
    let (weights, adam) = best;
    Ok(TrainOutcome { weights, adam, history, initial_checksum })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::to_frame_coords;
    use crate::synth::{render_scene, SceneConfig};
    use proptest::prelude::*;

    fn ramp_frame(w: usize, h: usize) -> Frame {
        let counts = (0..w * h).map(|i| i as f32).collect();
        Frame::new(w, h, counts, 3).unwrap()
    }

    #[test]
    fn zero_offset_on_pixel_center_labels_the_patch_center() {
        let f = ramp_frame(32, 32);
        let p = augment_crop(&f, (12, 17), (17.0, 12.0), 0, 0, 11).unwrap();
        assert_eq!(p.label_center, Some((5.0, 5.0)));
        assert_eq!(p.origin, (7, 12));
    }

    #[test]
    fn row_shift_moves_label_the_other_way() {
        let f = ramp_frame(32, 32);
        let a = augment_crop(&f, (12, 17), (17.3, 12.6), 0, 0, 11).unwrap().label_center.unwrap();
        let b = augment_crop(&f, (12, 17), (17.3, 12.6), 1, 0, 11).unwrap().label_center.unwrap();
        let c = augment_crop(&f, (12, 17), (17.3, 12.6), 0, 1, 11).unwrap().label_center.unwrap();
        assert_eq!((b.0 - a.0, b.1 - a.1), (0.0, -1.0));
        assert_eq!((c.0 - a.0, c.1 - a.1), (-1.0, 0.0));
    }

    #[test]
    fn out_of_frame_crop_is_an_error() {
        let f = ramp_frame(16, 16);
        assert!(matches!(augment_crop(&f, (5, 8), (8.0, 5.0), -1, 0, 11), Err(TrainError::OutOfBounds { .. })));
    }

    proptest! {
        #[test]
        fn augment_round_trip_is_exact(
            row in 7usize..57, col in 7usize..57,
            dy in -0.5f64..0.5, dz in -0.5f64..0.5,
            m in -2isize..=2, n in -2isize..=2,
        ) {
            let f = ramp_frame(64, 64);
            let truth = (col as f64 + dy, row as f64 + dz);
            let p = augment_crop(&f, (row, col), truth, m, n, 11).unwrap();
            let (ly, lz) = p.label_center.unwrap();
            prop_assert_eq!(to_frame_coords(&p, ly, lz), truth);
            prop_assert_eq!(p.values[(5 - m) as usize * 11 + (5 - n) as usize], f.get(row, col) as f64);
        }
    }

    #[test]
    fn split_of_69347_entries() {
        let s = Split::random(69_347, 0.8, 0.09, 1).unwrap();
        assert_eq!(s.train.len(), 55_478);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 69_347);
        assert!((s.val.len() as f64 - 6_000.0).abs() / 6_000.0 < 0.05, "{}", s.val.len());
        assert!((s.test.len() as f64 - 7_869.0).abs() / 7_869.0 < 0.05, "{}", s.test.len());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert!(all.iter().enumerate().all(|(i, &v)| i == v));
    }

    fn one_tensor_state(g: f64) -> (ModelWeights, ModelWeights, AdamState) {
        let arch = ArchSpec { patch_size: 5, conv_channels: vec![1], fc_sizes: vec![2], attention_enabled: false, attention_bottleneck: 1 };
        let w = ModelWeights::zeros(&arch).unwrap();
        let mut grads = w.zeros_like();
        grads.fcs[0].bias[0] = g;
        let adam = AdamState::new(&w);
        (w, grads, adam)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let arch = ArchSpec { patch_size: 7, conv_channels: vec![4, 2], fc_sizes: vec![8, 2], attention_enabled: true, attention_bottleneck: 2 };
        let mut w = ModelWeights::init(&arch, 3).unwrap();
        let before = w.clone();
        let g = w.zeros_like();
        let mut s = AdamState::new(&w);
        for _ in 0..5 {
            adam_step(&mut w, &g, &mut s, &AdamHyper::default()).unwrap();
        }
        assert_eq!(w, before);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut w, g, mut s) = one_tensor_state(1.0);
        let h = AdamHyper::default();
        adam_step(&mut w, &g, &mut s, &h).unwrap();
        let expect = h.lr / (1.0 + h.eps);
        assert!((w.fcs[0].bias[0] + expect).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        // Iterate the moment recurrences directly and compare with the optimizer.
        let (mut w, g, mut s) = one_tensor_state(-0.37);
        let h = AdamHyper::default();
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut prev = 0.0;
        for t in 1..=3000 {
            adam_step(&mut w, &g, &mut s, &h).unwrap();
            m = h.beta1 * m + (1.0 - h.beta1) * -0.37;
            v = h.beta2 * v + (1.0 - h.beta2) * 0.37 * 0.37;
            let step = h.lr * (m / (1.0 - h.beta1.powi(t))) / ((v / (1.0 - h.beta2.powi(t))).sqrt() + h.eps);
            let now = w.fcs[0].bias[0];
            assert!(((now - prev) + step).abs() < 1e-9 * h.lr);
            prev = now;
            if t == 3000 {
                assert!((step.abs() - h.lr).abs() < 1e-6 * h.lr);
                assert!(step < 0.0);
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let (mut w, mut g, mut s) = one_tensor_state(0.0);
        g.fcs[0].weight[1] = f64::NAN;
        let err = adam_step(&mut w, &g, &mut s, &AdamHyper::default()).unwrap_err();
        assert!(err.to_string().contains("fc0.weight"), "{err}");
        assert_eq!(s.step, 0);
    }

    #[test]
    fn adam_state_round_trips() {
        let (mut w, g, mut s) = one_tensor_state(0.5);
        adam_step(&mut w, &g, &mut s, &AdamHyper::default()).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(AdamState::read_from(&buf[..]).unwrap(), s);
    }

    fn small_dataset(noise: bool) -> Dataset {
        let cfg = SceneConfig { n_frames: 24, n_peaks: 12, width: 96, height: 96, poisson_noise: noise, seed: 5, ..Default::default() };
        let scene = render_scene(&cfg).unwrap();
        Dataset::from_truth(scene.stack, &scene.truth, &DatasetConfig { train_frac: 0.8, val_frac: 0.1, ..Default::default() }).unwrap()
    }

    fn tiny_arch() -> ArchSpec {
        ArchSpec { patch_size: 11, conv_channels: vec![8, 4], fc_sizes: vec![16, 2], attention_enabled: false, attention_bottleneck: 4 }
    }

    #[test]
    fn entries_pair_maxima_with_nearby_truth() {
        let d = small_dataset(false);
        assert!(d.entries.len() > 150, "{}", d.entries.len());
        for e in &d.entries {
            let dist = (e.truth.0 - e.maxima.1 as f64).hypot(e.truth.1 - e.maxima.0 as f64);
            assert!(dist <= 0.75, "{e:?}");
        }
    }

    #[test]
    fn voigt_fit_labels_sit_near_truth_on_clean_frames() {
        let scene = render_scene(&SceneConfig { n_frames: 4, poisson_noise: false, seed: 2, ..Default::default() }).unwrap();
        let cfg = DatasetConfig { label_source: LabelSource::VoigtFit, ..Default::default() };
        let d = Dataset::from_truth(scene.stack, &scene.truth, &cfg).unwrap();
        assert!(!d.entries.is_empty());
        let close = d.entries.iter().filter(|e| (e.label.0 - e.truth.0).hypot(e.label.1 - e.truth.1) < 0.1).count();
        assert!(close * 10 >= d.entries.len() * 8, "{close} of {}", d.entries.len());
    }

    #[test]
    fn clean_batches_repeat_exactly_across_epochs() {
        let d = small_dataset(true);
        let idx: Vec<usize> = d.split.train.iter().take(40).copied().collect();
        let aug = AugmentConfig { enabled: false, max_offset: 2 };
        let a = d.batch(&idx, &batch_offsets(&d, &idx, &aug, 1, 1).unwrap()).unwrap();
        let b = d.batch(&idx, &batch_offsets(&d, &idx, &aug, 1, 99).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_run_reduces_loss_and_is_deterministic() {
        let d = small_dataset(false);
        let cfg = TrainConfig { batch_size: 32, max_iterations: 200, validate_every: 20, patience: 100, seed: 4, ..Default::default() };
        let aug = AugmentConfig::default();
        let a = train(&d, Start::Init(tiny_arch()), &cfg, &aug).unwrap();
        let rows = &a.history.rows;
        assert_eq!(rows.len(), 10);
        assert!(rows.last().unwrap().train_loss < rows[0].train_loss, "{rows:?}");
        let b = train(&d, Start::Init(tiny_arch()), &cfg, &aug).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn best_checkpoint_is_returned_not_the_last_iterate() {
        let d = small_dataset(false);
        // A huge learning rate makes validation loss wander after the first checks.
        let cfg = TrainConfig {
            batch_size: 16,
            max_iterations: 120,
            validate_every: 10,
            patience: 3,
            seed: 1,
            adam: AdamHyper { lr: 0.05, ..Default::default() },
        };
        let out = train(&d, Start::Init(tiny_arch()), &cfg, &AugmentConfig::default()).unwrap();
        let h = &out.history;
        let min = h.rows.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert!(h.best_val_loss <= min);
        assert_eq!(clean_loss(&out.weights, &d, &d.split.val).unwrap(), h.best_val_loss);
        assert_eq!(out.adam.step, h.best_iteration);
    }

    #[test]
    fn resume_continues_step_counter_and_sample_stream() {
        let d = small_dataset(false);
        let cfg = TrainConfig { batch_size: 16, max_iterations: 40, validate_every: 20, patience: 100, seed: 2, ..Default::default() };
        let aug = AugmentConfig::default();
        let full = train(&d, Start::Init(tiny_arch()), &cfg, &aug).unwrap();
        let half_cfg = TrainConfig { max_iterations: 20, ..cfg };
        let first = train(&d, Start::Init(tiny_arch()), &half_cfg, &aug).unwrap();
        assert_eq!(first.adam.step, 20);
        let second = train(&d, Start::Resume(first.weights, first.adam), &half_cfg, &aug).unwrap();
        assert_eq!(second.history.rows[0].iteration, 40);
        assert_eq!(second.history.rows[0].val_loss, full.history.rows[1].val_loss);
    }

    #[test]
    fn empty_validation_split_is_rejected() {
        let mut d = small_dataset(false);
        d.split.val.clear();
        let err = train(&d, Start::Init(tiny_arch()), &TrainConfig::default(), &AugmentConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::EmptySplit("validation")));
    }
}
