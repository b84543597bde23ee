//! Synthetic diffraction frames with exact ground truth.
//!
//! The peak model is an axis-aligned elliptical pseudo-Voigt on a constant
//! background:
//!
//! ```text
//! I(y, z) = bg + amp * (eta * L(r2) + (1 - eta) * G(r2))
//! G(r2) = exp(-r2 / 2),  L(r2) = 1 / (1 + r2)
//! r2 = ((y - mu_y) / sigma_y)^2 + ((z - mu_z) / sigma_z)^2
//! ```
//!
//! Randomness comes from ChaCha8 seeded with the scene seed; every frame gets
//! its own stream (`purpose << 48 | frame_index`), so frames can be rendered
//! in any order or in parallel and produce identical bytes.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::frame_io::{Frame, FrameStack, PeakRecord, PeakSource};

/// Gaussian support radius (in sigmas, squared) used when rendering.
pub const GAUSS_SUPPORT_R2: f64 = 36.0;

const STREAM_PLACEMENT: u64 = 1;
const STREAM_NOISE: u64 = 2;
pub(crate) const STREAM_SHUFFLE: u64 = 3;
pub(crate) const STREAM_AUGMENT: u64 = 4;
pub(crate) const STREAM_SPLIT: u64 = 5;
pub(crate) const STREAM_TEST_OFFSETS: u64 = 6;
const MAX_PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid peak parameters: {0}")]
    InvalidParams(String),
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("frame {frame}: placed only {placed} of {requested} peaks with the required separation")]
    Placement { frame: usize, placed: usize, requested: usize },
    #[error("negative count {value} at pixel {index}")]
    NegativeCount { index: usize, value: f32 },
}

/// Pseudo-Voigt peak parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakParams {
    pub bg: f64,
    pub amp: f64,
    pub eta: f64,
    pub mu_y: f64,
    pub mu_z: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
}

impl PeakParams {
    pub const N: usize = 7;

    pub fn validate(&self) -> Result<(), SynthError> {
        let all = self.to_array();
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SynthError::InvalidParams(format!("non-finite value in {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(SynthError::InvalidParams(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.sigma_y <= 0.0 || self.sigma_z <= 0.0 {
            return Err(SynthError::InvalidParams("sigmas must be positive".into()));
        }
        if self.amp <= 0.0 {
            return Err(SynthError::InvalidParams("amplitude must be positive".into()));
        }
        Ok(())
    }

    /// Order: bg, amp, eta, mu_y, mu_z, sigma_y, sigma_z.
    pub fn to_array(&self) -> [f64; 7] {
        [self.bg, self.amp, self.eta, self.mu_y, self.mu_z, self.sigma_y, self.sigma_z]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self { bg: a[0], amp: a[1], eta: a[2], mu_y: a[3], mu_z: a[4], sigma_y: a[5], sigma_z: a[6] }
    }

    #[inline]
    pub fn r2(&self, y: f64, z: f64) -> f64 {
        let dy = (y - self.mu_y) / self.sigma_y;
        let dz = (z - self.mu_z) / self.sigma_z;
        dy * dy + dz * dz
    }
}

/// Unit-height profile `eta * L(r2) + (1 - eta) * G(r2)`.
#[inline]
pub fn pv_shape(eta: f64, r2: f64) -> f64 {
    eta / (1.0 + r2) + (1.0 - eta) * (-0.5 * r2).exp()
}

#[inline]
pub fn pv_value(p: &PeakParams, y: f64, z: f64) -> f64 {
    p.bg + p.amp * pv_shape(p.eta, p.r2(y, z))
}

/// Evaluates the model on a `size x size` grid, row-major, pixel `(r, c)` at `(y, z) = (c, r)`.
pub fn render_patch(p: &PeakParams, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            out.push(pv_value(p, c as f64, r as f64));
        }
    }
    out
}

/// Adds one peak (without its background) into an f64 accumulator raster.
fn splat_peak(acc: &mut [f64], width: usize, height: usize, p: &PeakParams) {
    let lorentz = p.amp * p.eta;
    let gauss = p.amp * (1.0 - p.eta);
    if lorentz > 0.0 {
        for row in 0..height {
            for col in 0..width {
                acc[row * width + col] += lorentz / (1.0 + p.r2(col as f64, row as f64));
            }
        }
    }
    if gauss > 0.0 {
        let reach = GAUSS_SUPPORT_R2.sqrt();
        let span = |mu: f64, sigma: f64, n: usize| {
            let lo = (mu - reach * sigma).ceil().max(0.0) as usize;
            let hi = ((mu + reach * sigma).floor() as i64).min(n as i64 - 1);
            (lo, hi)
        };
        let (c0, c1) = span(p.mu_y, p.sigma_y, width);
        let (r0, r1) = span(p.mu_z, p.sigma_z, height);
        if c1 < c0 as i64 || r1 < r0 as i64 {
            return;
        }
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                let r2 = p.r2(col as f64, row as f64);
                if r2 <= GAUSS_SUPPORT_R2 {
                    acc[row * width + col] += gauss * (-0.5 * r2).exp();
                }
            }
        }
    }
}

/// Renders explicitly placed peaks on a constant background (no noise).
pub fn render_peaks(width: usize, height: usize, bg: f64, peaks: &[PeakParams], frame_index: usize) -> Frame {
    let mut acc = vec![bg; width * height];
    for p in peaks {
        splat_peak(&mut acc, width, height, p);
    }
    Frame {
        width,
        height,
        counts: acc.into_iter().map(|v| v as f32).collect(),
        frame_index,
    }
}

/// Scene sampling intervals. `min_separation > 0` requests non-overlapping peaks.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_frames: usize,
    /// Peaks per frame.
    pub n_peaks: usize,
    pub width: usize,
    pub height: usize,
    pub amp_range: (f64, f64),
    pub sigma_range: (f64, f64),
    pub eta_range: (f64, f64),
    pub bg: f64,
    pub min_separation: f64,
    /// Peak centers stay at least this far from every frame edge.
    pub margin: f64,
    pub poisson_noise: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_frames: 1,
            n_peaks: 16,
            width: 128,
            height: 128,
            amp_range: (200.0, 2000.0),
            sigma_range: (0.6, 1.6),
            eta_range: (0.0, 1.0),
            bg: 10.0,
            min_separation: 12.0,
            margin: 7.0,
            poisson_noise: true,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.width == 0 || self.height == 0 {
            return bad("frame dimensions must be positive".into());
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.amp_range) || self.amp_range.0 <= 0.0 {
            return bad(format!("amp range {:?} must be positive and ordered", self.amp_range));
        }
        if !ordered(self.sigma_range) || self.sigma_range.0 <= 0.0 {
            return bad(format!("sigma range {:?} must be positive and ordered", self.sigma_range));
        }
        if !ordered(self.eta_range) || self.eta_range.0 < 0.0 || self.eta_range.1 > 1.0 {
            return bad(format!("eta range {:?} must lie in [0, 1]", self.eta_range));
        }
        if !(self.bg.is_finite() && self.bg >= 0.0) {
            return bad(format!("bg {} must be finite and non-negative", self.bg));
        }
        if self.min_separation > 0.0 && self.min_separation < 6.0 * self.sigma_range.1 {
            return bad(format!(
                "min_separation {} is below 6 x max sigma ({})",
                self.min_separation,
                6.0 * self.sigma_range.1
            ));
        }
        if self.margin < 0.0 || 2.0 * self.margin > (self.width.min(self.height) as f64 - 1.0) {
            return bad(format!("margin {} leaves no room for peaks", self.margin));
        }
        Ok(())
    }
}

/// Output of [`render_scene`].
#[derive(Debug, Clone)]
pub struct Scene {
    pub stack: FrameStack,
    /// Ground-truth centers, frame-major, in placement order.
    pub truth: Vec<PeakRecord>,
    /// Full parameters for every entry of `truth`.
    pub params: Vec<PeakParams>,
}

pub(crate) fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | (index & 0xFFFF_FFFF_FFFF));
    rng
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn place_frame(cfg: &SceneConfig, frame_index: usize) -> Result<Vec<PeakParams>, SynthError> {
    let mut rng = stream_rng(cfg.seed, STREAM_PLACEMENT, frame_index as u64);
    let y_range = (cfg.margin, cfg.width as f64 - 1.0 - cfg.margin);
    let z_range = (cfg.margin, cfg.height as f64 - 1.0 - cfg.margin);
    let sep2 = cfg.min_separation * cfg.min_separation;
    let mut peaks: Vec<PeakParams> = Vec::with_capacity(cfg.n_peaks);
    for _ in 0..cfg.n_peaks {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let (y, z) = (uniform(&mut rng, y_range), uniform(&mut rng, z_range));
            let clear = peaks.iter().all(|q| {
                let (dy, dz) = (q.mu_y - y, q.mu_z - z);
                dy * dy + dz * dz >= sep2
            });
            if clear {
                placed = Some((y, z));
                break;
            }
        }
        let Some((mu_y, mu_z)) = placed else {
            return Err(SynthError::Placement { frame: frame_index, placed: peaks.len(), requested: cfg.n_peaks });
        };
        peaks.push(PeakParams {
            bg: cfg.bg,
            amp: uniform(&mut rng, cfg.amp_range),
            eta: uniform(&mut rng, cfg.eta_range),
            mu_y,
            mu_z,
            sigma_y: uniform(&mut rng, cfg.sigma_range),
            sigma_z: uniform(&mut rng, cfg.sigma_range),
        });
    }
    Ok(peaks)
}

fn render_frame(cfg: &SceneConfig, frame_index: usize) -> Result<(Frame, Vec<PeakParams>), SynthError> {
    let peaks = place_frame(cfg, frame_index)?;
    let mut frame = render_peaks(cfg.width, cfg.height, cfg.bg, &peaks, frame_index);
    if cfg.poisson_noise {
        frame = poissonize_with(&frame, &mut stream_rng(cfg.seed, STREAM_NOISE, frame_index as u64))?;
    }
    Ok((frame, peaks))
}

/// Renders `cfg.n_frames` frames. Output is identical for any rayon pool size.
pub fn render_scene(cfg: &SceneConfig) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let rendered: Vec<(Frame, Vec<PeakParams>)> = (0..cfg.n_frames)
        .into_par_iter()
        .map(|i| render_frame(cfg, i))
        .collect::<Result<_, _>>()?;
    let mut stack = Vec::with_capacity(rendered.len());
    let mut truth = Vec::new();
    let mut params = Vec::new();
    for (frame, peaks) in rendered {
        for p in &peaks {
            truth.push(PeakRecord {
                frame_index: frame.frame_index,
                center_y: p.mu_y,
                center_z: p.mu_z,
                amplitude: p.amp,
                source: PeakSource::GroundTruth,
            });
        }
        params.extend(peaks);
        stack.push(frame);
    }
    Ok(Scene { stack: FrameStack::new(stack), truth, params })
}

fn poissonize_with(frame: &Frame, rng: &mut ChaCha8Rng) -> Result<Frame, SynthError> {
    let mut counts = Vec::with_capacity(frame.counts.len());
    for (index, &mean) in frame.counts.iter().enumerate() {
        if !(mean >= 0.0) {
            return Err(SynthError::NegativeCount { index, value: mean });
        }
        let draw = if mean == 0.0 {
            0.0
        } else {
            Poisson::new(mean as f64).expect("finite positive mean").sample(rng)
        };
        counts.push(draw as f32);
    }
    Ok(Frame { counts, ..frame.clone() })
}

/// Replaces each pixel by a Poisson draw with that pixel as its mean.
pub fn poissonize(frame: &Frame, seed: u64) -> Result<Frame, SynthError> {
    poissonize_with(frame, &mut stream_rng(seed, STREAM_NOISE, frame.frame_index as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn peak(eta: f64) -> PeakParams {
        PeakParams { bg: 0.0, amp: 1.0, eta, mu_y: 3.0, mu_z: 4.0, sigma_y: 1.0, sigma_z: 1.0 }
    }

    #[test]
    fn value_at_center_is_bg_plus_amp() {
        for eta in [0.0, 0.3, 1.0] {
            let p = PeakParams { amp: 10.0, ..peak(eta) };
            assert_eq!(pv_value(&p, 3.0, 4.0), 10.0);
        }
    }

    #[test]
    fn unit_radius_limits() {
        assert!((pv_value(&peak(0.0), 4.0, 4.0) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((pv_value(&peak(0.0), 4.0, 4.0) - 0.606531).abs() < 1e-6);
        assert!((pv_value(&peak(1.0), 4.0, 4.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_is_constant_background() {
        let cfg = SceneConfig { n_peaks: 0, n_frames: 2, width: 16, height: 12, bg: 7.0, margin: 0.0, poisson_noise: false, ..Default::default() };
        let scene = render_scene(&cfg).unwrap();
        assert!(scene.truth.is_empty());
        assert!(scene.stack.frames.iter().all(|f| f.counts.iter().all(|&v| v == 7.0)));
    }

    #[test]
    fn single_peak_argmax_is_nearest_pixel() {
        for seed in 0..20 {
            let cfg = SceneConfig { n_peaks: 1, width: 32, height: 24, poisson_noise: false, seed, ..Default::default() };
            let scene = render_scene(&cfg).unwrap();
            let f = &scene.stack.frames[0];
            let (idx, _) = f
                .counts
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            let t = scene.truth[0];
            assert_eq!(idx % f.width, t.center_y.round() as usize);
            assert_eq!(idx / f.width, t.center_z.round() as usize);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SceneConfig { n_frames: 3, seed: 99, ..Default::default() };
        let a = render_scene(&cfg).unwrap();
        let b = render_scene(&cfg).unwrap();
        assert_eq!(a.stack, b.stack);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn parallel_render_matches_single_frame_render() {
        let cfg = SceneConfig { n_frames: 4, seed: 5, ..Default::default() };
        let scene = render_scene(&cfg).unwrap();
        let (frame, _) = render_frame(&cfg, 2).unwrap();
        assert_eq!(scene.stack.frames[2], frame);
    }

    #[test]
    fn separation_is_enforced() {
        let cfg = SceneConfig { n_peaks: 20, seed: 3, ..Default::default() };
        let scene = render_scene(&cfg).unwrap();
        for (i, a) in scene.params.iter().enumerate() {
            for b in &scene.params[i + 1..] {
                assert!((a.mu_y - b.mu_y).hypot(a.mu_z - b.mu_z) >= cfg.min_separation);
            }
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let cfg = SceneConfig { n_peaks: 500, width: 32, height: 32, ..Default::default() };
        assert!(matches!(render_scene(&cfg), Err(SynthError::Placement { .. })));
    }

    #[test]
    fn overlap_config_rejected() {
        let cfg = SceneConfig { min_separation: 3.0, sigma_range: (1.0, 2.0), ..Default::default() };
        assert!(matches!(cfg.validate(), Err(SynthError::InvalidConfig(_))));
    }

    #[test]
    fn noiseless_truth_is_exact() {
        let cfg = SceneConfig { n_peaks: 1, poisson_noise: false, eta_range: (0.0, 0.0), seed: 11, ..Default::default() };
        let scene = render_scene(&cfg).unwrap();
        let p = scene.params[0];
        assert_eq!(pv_value(&p, scene.truth[0].center_y, scene.truth[0].center_z), p.bg + p.amp);
        // The nearest pixel carries the model value to f32 precision.
        let (col, row) = (p.mu_y.round() as usize, p.mu_z.round() as usize);
        let expect = pv_value(&p, col as f64, row as f64);
        assert!((scene.stack.frames[0].get(row, col) as f64 - expect).abs() <= expect * 1e-6);
    }

    #[test]
    fn poisson_of_zero_is_zero() {
        let f = Frame::filled(8, 8, 0.0, 0);
        assert!(poissonize(&f, 1).unwrap().counts.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_mean_within_clt_bound() {
        let f = Frame::filled(64, 64, 10_000.0, 0);
        let out = poissonize(&f, 42).unwrap();
        let mean = out.counts.iter().map(|&v| v as f64).sum::<f64>() / out.counts.len() as f64;
        // sd of the mean = sqrt(10000) / sqrt(4096) = 100 / 64
        assert!((mean - 10_000.0).abs() <= 3.0 * 100.0 / 64.0, "mean {mean}");
    }

    #[test]
    fn poisson_deterministic_and_rejects_negative() {
        let f = Frame::filled(8, 8, 3.5, 0);
        assert_eq!(poissonize(&f, 9).unwrap(), poissonize(&f, 9).unwrap());
        let mut g = f.clone();
        g.counts[5] = -1.0;
        assert!(matches!(poissonize(&g, 9), Err(SynthError::NegativeCount { index: 5, .. })));
    }

    fn arb_params() -> impl Strategy<Value = PeakParams> {
        (0.0..100.0f64, 0.1..1e4f64, 0.0..=1.0f64, -10.0..10.0f64, -10.0..10.0f64, 0.2..5.0f64, 0.2..5.0f64)
            .prop_map(|(bg, amp, eta, mu_y, mu_z, sigma_y, sigma_z)| PeakParams { bg, amp, eta, mu_y, mu_z, sigma_y, sigma_z })
    }

    proptest! {
        #[test]
        fn symmetric_about_center(p in arb_params(), d in -8.0..8.0f64) {
            let a = pv_value(&p, p.mu_y + d, p.mu_z);
            let b = pv_value(&p, p.mu_y - d, p.mu_z);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            let a = pv_value(&p, p.mu_y, p.mu_z + d);
            let b = pv_value(&p, p.mu_y, p.mu_z - d);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn monotone_in_radius(eta in 0.0..=1.0f64, r2a in 0.0..50.0f64, dr in 0.0..50.0f64) {
            prop_assert!(pv_shape(eta, r2a + dr) <= pv_shape(eta, r2a));
        }

        #[test]
        fn pure_limits_match_closed_forms(p in arb_params(), y in -10.0..10.0f64, z in -10.0..10.0f64) {
            let r2 = p.r2(y, z);
            let g = pv_value(&PeakParams { eta: 0.0, ..p }, y, z);
            let l = pv_value(&PeakParams { eta: 1.0, ..p }, y, z);
            prop_assert!((g - (p.bg + p.amp * (-r2 / 2.0).exp())).abs() <= 1e-12 * g.abs().max(1.0));
            prop_assert!((l - (p.bg + p.amp / (1.0 + r2))).abs() <= 1e-12 * l.abs().max(1.0));
            prop_assert!(pv_value(&p, y, z) >= p.bg);
            prop_assert!(pv_value(&p, y, z) <= pv_value(&p, p.mu_y, p.mu_z));
        }
    }
}
