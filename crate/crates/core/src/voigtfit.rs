//! Pseudo-Voigt least-squares fitting of a single peak patch.
//!
//! Levenberg-Marquardt with Marquardt diagonal scaling, an analytic Jacobian,
//! and initialization from intensity moments. Parameters are projected back
//! onto the valid set (`0 <= eta <= 1`, positive widths and amplitude) after
//! every trial step.

use rayon::prelude::*;
use thiserror::Error;

use crate::segment::Patch;
use crate::synth::{PeakParams, SynthError};

const N: usize = PeakParams::N;
const MIN_SIGMA: f64 = 1e-3;
const MIN_AMP: f64 = 1e-9;
const MAX_REJECTIONS: usize = 40;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("patch is flat (max == min); nothing to fit")]
    FlatPatch,
    #[error("patch has {len} values, expected {size}x{size}")]
    Shape { len: usize, size: usize },
    #[error("patch contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Params(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LMOptions {
    pub max_iterations: usize,
    /// Relative cost decrease below which an accepted step counts as converged.
    pub cost_tolerance: f64,
    /// Step length (relative to the parameter norm) below which iteration stops.
    pub step_tolerance: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
}

impl Default for LMOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            cost_tolerance: 1e-10,
            step_tolerance: 1e-8,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
        }
    }
}

impl LMOptions {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("max_iterations", self.max_iterations as f64),
            ("cost_tolerance", self.cost_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("initial_damping", self.initial_damping),
            ("damping_up", self.damping_up),
            ("damping_down", self.damping_down),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub params: PeakParams,
    pub converged: bool,
    pub n_iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// `(y, z)` in patch coordinates.
    pub center_in_patch: (f64, f64),
}

fn check_patch(values: &[f64], size: usize) -> Result<(), FitError> {
    if values.len() != size * size || size == 0 {
        return Err(FitError::Shape { len: values.len(), size });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    Ok(())
}

/// Residuals `model - data` and the analytic Jacobian (rows of
/// `d model / d (bg, amp, eta, mu_y, mu_z, sigma_y, sigma_z)`).
pub fn pv_residual_jacobian(p: &PeakParams, values: &[f64], size: usize) -> (Vec<f64>, Vec<[f64; N]>) {
    let mut residual = Vec::with_capacity(values.len());
    let mut jac = Vec::with_capacity(values.len());
    for r in 0..size {
        for c in 0..size {
            let (res, row) = model_and_gradient(p, c as f64, r as f64);
            residual.push(res - values[r * size + c]);
            jac.push(row);
        }
    }
    (residual, jac)
}

#[inline]
fn model_and_gradient(p: &PeakParams, y: f64, z: f64) -> (f64, [f64; N]) {
    let (isy, isz) = (1.0 / p.sigma_y, 1.0 / p.sigma_z);
    let (uy, uz) = ((y - p.mu_y) * isy, (z - p.mu_z) * isz);
    let r2 = uy * uy + uz * uz;
    let l = 1.0 / (1.0 + r2);
    let g = (-0.5 * r2).exp();
    let shape = p.eta * l + (1.0 - p.eta) * g;
    // d shape / d r2
    let ds = -p.eta * l * l - 0.5 * (1.0 - p.eta) * g;
    let k = p.amp * ds;
    let grad = [
        1.0,
        shape,
        p.amp * (l - g),
        k * (-2.0 * uy * isy),
        k * (-2.0 * uz * isz),
        k * (-2.0 * uy * uy * isy),
        k * (-2.0 * uz * uz * isz),
    ];
    (p.bg + p.amp * shape, grad)
}

fn cost_of(p: &PeakParams, values: &[f64], size: usize) -> f64 {
    let mut cost = 0.0;
    for r in 0..size {
        for c in 0..size {
            let d = p.bg + p.amp * crate::synth::pv_shape(p.eta, p.r2(c as f64, r as f64)) - values[r * size + c];
            cost += d * d;
        }
    }
    cost
}

/// Moment-based starting point: background = min, amplitude = range,
/// center = weighted centroid, widths from second moments, `eta = 0.5`.
pub fn init_from_moments(values: &[f64], size: usize) -> Result<PeakParams, FitError> {
    check_patch(values, size)?;
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi <= lo {
        return Err(FitError::FlatPatch);
    }
    let (mut sw, mut sy, mut sz) = (0.0, 0.0, 0.0);
    for r in 0..size {
        for c in 0..size {
            let w = values[r * size + c] - lo;
            sw += w;
            sy += w * c as f64;
            sz += w * r as f64;
        }
    }
    let (cy, cz) = (sy / sw, sz / sw);
    let (mut vy, mut vz) = (0.0, 0.0);
    for r in 0..size {
        for c in 0..size {
            let w = values[r * size + c] - lo;
            vy += w * (c as f64 - cy).powi(2);
            vz += w * (r as f64 - cz).powi(2);
        }
    }
    let clamp = |v: f64| (v / sw).sqrt().clamp(0.3, size as f64);
    Ok(PeakParams { bg: lo, amp: hi - lo, eta: 0.5, mu_y: cy, mu_z: cz, sigma_y: clamp(vy), sigma_z: clamp(vz) })
}

fn project(a: [f64; N]) -> [f64; N] {
    let mut p = a;
    p[1] = p[1].max(MIN_AMP);
    p[2] = p[2].clamp(0.0, 1.0);
    p[5] = p[5].max(MIN_SIGMA);
    p[6] = p[6].max(MIN_SIGMA);
    p
}

/// Solves `m x = b` for symmetric positive definite `m` by Cholesky.
fn cholesky_solve(m: &[[f64; N]; N], b: &[f64; N]) -> Option<[f64; N]> {
    let mut l = [[0.0; N]; N];
    for i in 0..N {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; N];
    for i in 0..N {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; N];
    for i in (0..N).rev() {
        let mut s = y[i];
        for k in i + 1..N {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

fn normal_equations(p: &PeakParams, values: &[f64], size: usize) -> ([[f64; N]; N], [f64; N], f64) {
    let mut jtj = [[0.0; N]; N];
    let mut jtr = [0.0; N];
    let mut cost = 0.0;
    for r in 0..size {
        for c in 0..size {
            let (model, g) = model_and_gradient(p, c as f64, r as f64);
            let res = model - values[r * size + c];
            cost += res * res;
            for i in 0..N {
                jtr[i] += g[i] * res;
                for j in 0..=i {
                    jtj[i][j] += g[i] * g[j];
                }
            }
        }
    }
    for i in 0..N {
        for j in 0..i {
            jtj[j][i] = jtj[i][j];
        }
    }
    (jtj, jtr, cost)
}

/// Fits a pseudo-Voigt to a row-major `size x size` patch.
///
/// Non-convergence is reported through `FitResult::converged`, never as an error.
pub fn fit_values(values: &[f64], size: usize, opts: &LMOptions) -> Result<FitResult, FitError> {
    let start = init_from_moments(values, size)?;
    let mut x = start.to_array();
    let mut lambda = opts.initial_damping;
    let mut cost = cost_of(&start, values, size);
    let initial_cost = cost;
    let mut converged = cost == 0.0;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let p = PeakParams::from_array(x);
        let (jtj, jtr, _) = normal_equations(&p, values, size);
        let neg_grad: [f64; N] = std::array::from_fn(|i| -jtr[i]);
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();

        let mut accepted = false;
        for _ in 0..MAX_REJECTIONS {
            let mut damped = jtj;
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(1e-12);
            }
            let Some(step) = cholesky_solve(&damped, &neg_grad) else {
                lambda *= opts.damping_up;
                continue;
            };
            let trial = project(std::array::from_fn(|i| x[i] + step[i]));
            let moved = trial.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let trial_cost = cost_of(&PeakParams::from_array(trial), values, size);
            if trial_cost.is_finite() && trial_cost < cost {
                let decrease = cost - trial_cost;
                x = trial;
                cost = trial_cost;
                lambda = (lambda * opts.damping_down).max(1e-15);
                accepted = true;
                if decrease <= opts.cost_tolerance * (cost + decrease) || moved <= opts.step_tolerance * (x_norm + opts.step_tolerance) {
                    converged = true;
                }
                break;
            }
            if moved <= opts.step_tolerance * (x_norm + opts.step_tolerance) {
                // No representable step lowers the cost: stationary to working precision.
                converged = true;
                break;
            }
            lambda *= opts.damping_up;
        }
        if !accepted && !converged {
            break;
        }
        if cost == 0.0 {
            converged = true;
        }
    }

    let params = PeakParams::from_array(x);
    Ok(FitResult {
        params,
        converged,
        n_iterations: iterations,
        initial_cost,
        final_cost: cost,
        center_in_patch: (params.mu_y, params.mu_z),
    })
}

pub fn fit_patch(patch: &Patch, opts: &LMOptions) -> Result<FitResult, FitError> {
    fit_values(&patch.values, patch.size, opts)
}

/// Fits every patch on the current rayon pool; output order matches input.
pub fn fit_batch(patches: &[Patch], opts: &LMOptions) -> Vec<Result<FitResult, FitError>> {
    patches.par_iter().map(|p| fit_patch(p, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{poissonize, render_patch};
    use crate::frame_io::Frame;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(mu_y: f64, mu_z: f64, sy: f64, sz: f64, eta: f64) -> PeakParams {
        PeakParams { bg: 10.0, amp: 500.0, eta, mu_y, mu_z, sigma_y: sy, sigma_z: sz }
    }

    #[test]
    fn bg_column_is_one() {
        let p = pv(5.2, 4.9, 1.1, 1.4, 0.3);
        let (_, jac) = pv_residual_jacobian(&p, &vec![0.0; 121], 11);
        assert!(jac.iter().all(|row| row[0] == 1.0));
    }

    #[test]
    fn eta_derivative_at_unit_radius() {
        let p = PeakParams { bg: 0.0, amp: 1.0, eta: 0.5, mu_y: 0.0, mu_z: 1.0, sigma_y: 1.0, sigma_z: 1.0 };
        // pixel (r=1, c=1) sits at r2 = 1
        let (_, jac) = pv_residual_jacobian(&p, &[0.0; 4], 2);
        assert!((jac[3][2] - (0.5 - (-0.5f64).exp())).abs() < 1e-12);
        assert!((jac[3][2] + 0.106531).abs() < 1e-6);
    }

    /// Central differences of the model, independent of the analytic path.
    fn fd_column(p: &PeakParams, y: f64, z: f64, k: usize, h: f64) -> f64 {
        let mut a = p.to_array();
        let mut b = p.to_array();
        a[k] += h;
        b[k] -= h;
        let f = |q: [f64; 7]| crate::synth::pv_value(&PeakParams::from_array(q), y, z);
        (f(a) - f(b)) / (2.0 * h)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let p = PeakParams {
                bg: rng.random_range(0.0..50.0),
                amp: rng.random_range(10.0..1000.0),
                eta: rng.random_range(0.05..0.95),
                mu_y: rng.random_range(3.0..7.0),
                mu_z: rng.random_range(3.0..7.0),
                sigma_y: rng.random_range(0.5..2.5),
                sigma_z: rng.random_range(0.5..2.5),
            };
            let (y, z) = (rng.random_range(0..11) as f64, rng.random_range(0..11) as f64);
            let (_, analytic) = model_and_gradient(&p, y, z);
            for k in 0..7 {
                let fd = fd_column(&p, y, z, k, 1e-6);
                let scale = analytic[k].abs().max(fd.abs()).max(1e-6);
                assert!((analytic[k] - fd).abs() / scale < 1e-5, "param {k}: {} vs {fd}", analytic[k]);
            }
        }
    }

    #[test]
    fn moments_find_symmetric_center() {
        let values = render_patch(&pv(5.0, 5.0, 1.3, 1.0, 0.4), 11);
        let p = init_from_moments(&values, 11).unwrap();
        assert!((p.mu_y - 5.0).abs() < 0.2 && (p.mu_z - 5.0).abs() < 0.2);
        assert_eq!(p.eta, 0.5);
        assert!((0.3..=11.0).contains(&p.sigma_y));
    }

    #[test]
    fn flat_patch_errors() {
        assert_eq!(init_from_moments(&[3.0; 121], 11), Err(FitError::FlatPatch));
        assert_eq!(fit_values(&[3.0; 121], 11, &LMOptions::default()), Err(FitError::FlatPatch));
    }

    #[test]
    fn recovers_offset_noiseless_peak() {
        let truth = pv(5.3, 4.8, 1.2, 1.6, 0.4);
        let fit = fit_values(&render_patch(&truth, 11), 11, &LMOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.center_in_patch.0 - 5.3).abs() < 1e-3);
        assert!((fit.center_in_patch.1 - 4.8).abs() < 1e-3);
        assert!(fit.final_cost <= fit.initial_cost);
    }

    #[test]
    fn symmetric_peak_fits_to_geometric_center() {
        let fit = fit_values(&render_patch(&pv(5.0, 5.0, 1.1, 1.4, 0.6), 11), 11, &LMOptions::default()).unwrap();
        assert!((fit.center_in_patch.0 - 5.0).abs() < 1e-6);
        assert!((fit.center_in_patch.1 - 5.0).abs() < 1e-6);
    }

    #[test]
    fn integer_shift_is_equivariant() {
        let base = pv(6.3, 7.7, 1.0, 1.3, 0.35);
        let opts = LMOptions::default();
        let a = fit_values(&render_patch(&base, 15), 15, &opts).unwrap();
        let shifted = PeakParams { mu_y: base.mu_y - 2.0, mu_z: base.mu_z + 1.0, ..base };
        let b = fit_values(&render_patch(&shifted, 15), 15, &opts).unwrap();
        assert!((b.center_in_patch.0 - (a.center_in_patch.0 - 2.0)).abs() < 1e-6);
        assert!((b.center_in_patch.1 - (a.center_in_patch.1 + 1.0)).abs() < 1e-6);
    }

    #[test]
    fn noisy_peaks_mostly_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let opts = LMOptions::default();
        let mut good = 0;
        for i in 0..500 {
            let truth = PeakParams {
                bg: 10.0,
                amp: 500.0,
                eta: rng.random_range(0.0..1.0),
                mu_y: 5.0 + rng.random_range(-0.5..0.5),
                mu_z: 5.0 + rng.random_range(-0.5..0.5),
                sigma_y: rng.random_range(0.8..1.6),
                sigma_z: rng.random_range(0.8..1.6),
            };
            let clean = render_patch(&truth, 11);
            let frame = Frame::new(11, 11, clean.iter().map(|&v| v as f32).collect(), i).unwrap();
            let noisy: Vec<f64> = poissonize(&frame, 77).unwrap().counts.iter().map(|&v| v as f64).collect();
            let fit = fit_values(&noisy, 11, &opts).unwrap();
            let err = (fit.center_in_patch.0 - truth.mu_y).hypot(fit.center_in_patch.1 - truth.mu_z);
            if err <= 0.15 {
                good += 1;
            }
        }
        assert!(good >= 475, "{good} / 500 within 0.15 px");
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut m = [[0.0; N]; N];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = if i == 3 { -1.0 } else { 1.0 };
        }
        assert!(cholesky_solve(&m, &[1.0; N]).is_none());
    }
}
