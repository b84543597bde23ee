//! The peak-localization network: forward pass, hand-written backward pass,
//! and the `BNNW` weight format.
//!
//! Data flow for one patch:
//!
//! ```text
//! min-max normalize -> conv 3x3 + ReLU -> [non-local block] ->
//! (conv 3x3 + ReLU)* -> flatten -> (dense + ReLU)* -> dense (2 outputs)
//! ```
//!
//! All convolutions are "valid" cross-correlations, so every conv shrinks the
//! map by two pixels per axis. Activations are NHWC, row-major; conv kernels
//! are stored `[di][dj][c_in][c_out]` and dense weights `[n_in][n_out]`, so a
//! whole batch runs as one matrix product per layer.
//!
//! The non-local block is the embedded-Gaussian form with a residual output:
//! `z = x + softmax(theta(x) phi(x)^T) g(x) W_out + b_out`, softmax over the
//! second position index.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{add_col_sums, add_row_bias, gemm};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"BNNW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Samples per work unit for batched inference and gradient computation.
/// Chunk boundaries are fixed, so results do not depend on the thread count.
pub const CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum BraggError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cache does not match these weights: {0}")]
    StaleCache(String),
    #[error("layer {layer}: expected {expected} values, file has {found}")]
    LayerShape { layer: String, expected: usize, found: usize },
    #[error("bad magic bytes {0:?}, expected \"BNNW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported weights version {0}")]
    Version(u32),
    #[error("weight file holds {found} tensors, architecture needs {expected}")]
    TensorCount { expected: usize, found: usize },
    #[error("weights file is truncated")]
    Truncated,
    #[error("non-finite value in tensor {0}")]
    NonFinite(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub patch_size: usize,
    pub conv_channels: Vec<usize>,
    pub fc_sizes: Vec<usize>,
    pub attention_enabled: bool,
    pub attention_bottleneck: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            patch_size: 11,
            conv_channels: vec![64, 32, 8],
            fc_sizes: vec![64, 32, 2],
            attention_enabled: true,
            attention_bottleneck: 32,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), BraggError> {
        let bad = |m: String| Err(BraggError::Arch(m));
        if self.patch_size % 2 == 0 {
            return bad(format!("patch size {} must be odd", self.patch_size));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("need at least one conv layer, all widths positive".into());
        }
        if self.patch_size < 2 * self.conv_channels.len() + 3 {
            return bad(format!(
                "{} valid convs on a {}-pixel patch leave less than a 3x3 map",
                self.conv_channels.len(),
                self.patch_size
            ));
        }
        if self.fc_sizes.last() != Some(&2) || self.fc_sizes.contains(&0) {
            return bad(format!("dense sizes {:?} must be positive and end in 2", self.fc_sizes));
        }
        if self.attention_enabled && (self.attention_bottleneck == 0 || self.attention_bottleneck > self.conv_channels[0]) {
            return bad(format!(
                "attention bottleneck {} must be in 1..={}",
                self.attention_bottleneck, self.conv_channels[0]
            ));
        }
        Ok(())
    }

    /// Spatial side after conv layer `k` (0-based).
    pub fn side_after(&self, k: usize) -> usize {
        self.patch_size - 2 * (k + 1)
    }

    pub fn flat_len(&self) -> usize {
        let side = self.side_after(self.conv_channels.len() - 1);
        side * side * self.conv_channels.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub c_in: usize,
    pub c_out: usize,
    /// `[3][3][c_in][c_out]`
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    fn zeros(c_in: usize, c_out: usize) -> Self {
        Self { c_in, c_out, kernel: vec![0.0; 9 * c_in * c_out], bias: vec![0.0; c_out] }
    }
}

/// Fully connected layer; also used for the 1x1 projections of the attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    /// `[n_in][n_out]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, weight: vec![0.0; n_in * n_out], bias: vec![0.0; n_out] }
    }

    /// `out = x W + b` for `rows` inputs.
    fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.n_out];
        gemm(rows, self.n_in, self.n_out, 1.0, x, false, &self.weight, false, 0.0, &mut out);
        add_row_bias(&mut out, &self.bias);
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `d x` when asked.
    fn backprop(&self, x: &[f64], d_out: &[f64], rows: usize, grad: &mut Dense, want_input: bool) -> Option<Vec<f64>> {
        gemm(self.n_in, rows, self.n_out, 1.0, x, true, d_out, false, 1.0, &mut grad.weight);
        add_col_sums(&mut grad.bias, d_out, self.n_out);
        want_input.then(|| {
            let mut dx = vec![0.0; rows * self.n_in];
            gemm(rows, self.n_out, self.n_in, 1.0, d_out, false, &self.weight, true, 0.0, &mut dx);
            dx
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonLocal {
    pub theta: Dense,
    pub phi: Dense,
    pub g: Dense,
    pub out: Dense,
}

/// Every learnable tensor of the network plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub arch: ArchSpec,
    pub convs: Vec<Conv>,
    pub attention: Option<NonLocal>,
    pub fcs: Vec<Dense>,
}

fn hash_tensors<'a>(tensors: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        h = (h ^ t.len() as u64).wrapping_mul(0x0100_0000_01b3);
        for v in t {
            h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Gradients share the layout of the weights they belong to.
pub type WeightGradients = ModelWeights;

impl ModelWeights {
    pub fn zeros(arch: &ArchSpec) -> Result<Self, BraggError> {
        arch.validate()?;
        let mut convs = Vec::new();
        let mut c_in = 1;
        for &c in &arch.conv_channels {
            convs.push(Conv::zeros(c_in, c));
            c_in = c;
        }
        let attention = arch.attention_enabled.then(|| {
            let (c, b) = (arch.conv_channels[0], arch.attention_bottleneck);
            NonLocal { theta: Dense::zeros(c, b), phi: Dense::zeros(c, b), g: Dense::zeros(c, b), out: Dense::zeros(b, c) }
        });
        let mut fcs = Vec::new();
        let mut n_in = arch.flat_len();
        for &n in &arch.fc_sizes {
            fcs.push(Dense::zeros(n_in, n));
            n_in = n;
        }
        Ok(Self { arch: arch.clone(), convs, attention, fcs })
    }

    /// Fan-in scaled normal init (`sqrt(2 / fan_in)` for ReLU layers,
    /// `sqrt(1 / fan_in)` for the attention embeddings), zero biases, zero
    /// attention output projection (the block starts as the identity), and
    /// the output bias at the geometric patch center.
    ///
    /// The attention block draws from its own stream, so the same seed gives
    /// the same convolution and dense weights with or without attention.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self, BraggError> {
        let mut w = Self::zeros(arch)?;
        let fill = |rng: &mut ChaCha8Rng, buf: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            buf.iter_mut().for_each(|v| *v = normal.sample(rng));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &mut w.convs {
            fill(&mut rng, &mut conv.kernel, (2.0 / (9 * conv.c_in) as f64).sqrt());
        }
        for fc in &mut w.fcs {
            fill(&mut rng, &mut fc.weight, (2.0 / fc.n_in as f64).sqrt());
        }
        if let Some(att) = &mut w.attention {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let std = (1.0 / att.theta.n_in as f64).sqrt();
            fill(&mut rng, &mut att.theta.weight, std);
            fill(&mut rng, &mut att.phi.weight, std);
            fill(&mut rng, &mut att.g.weight, std);
        }
        let center = (arch.patch_size / 2) as f64;
        w.fcs.last_mut().unwrap().bias.iter_mut().for_each(|b| *b = center);
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch).expect("arch already validated")
    }

    /// Tensor names in declaration (and file) order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, _) in self.convs.iter().enumerate() {
            names.push(format!("conv{i}.kernel"));
            names.push(format!("conv{i}.bias"));
            if i == 0 && self.attention.is_some() {
                for p in ["theta", "phi", "g", "out"] {
                    names.push(format!("attention.{p}.weight"));
                    names.push(format!("attention.{p}.bias"));
                }
            }
        }
        for (i, _) in self.fcs.iter().enumerate() {
            names.push(format!("fc{i}.weight"));
            names.push(format!("fc{i}.bias"));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push(&conv.kernel);
            out.push(&conv.bias);
            if i == 0 {
                if let Some(att) = &self.attention {
                    for d in [&att.theta, &att.phi, &att.g, &att.out] {
                        out.push(&d.weight);
                        out.push(&d.bias);
                    }
                }
            }
        }
        for fc in &self.fcs {
            out.push(&fc.weight);
            out.push(&fc.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mut attention = self.attention.as_mut();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            out.push(&mut conv.kernel);
            out.push(&mut conv.bias);
            if i == 0 {
                if let Some(att) = attention.take() {
                    for d in [&mut att.theta, &mut att.phi, &mut att.g, &mut att.out] {
                        out.push(&mut d.weight);
                        out.push(&mut d.bias);
                    }
                }
            }
        }
        for fc in &mut self.fcs {
            out.push(&mut fc.weight);
            out.push(&mut fc.bias);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// FNV-1a style hash over the bit patterns of every tensor (one 64-bit
    /// word per value), in file order.
    pub fn checksum(&self) -> u64 {
        hash_tensors(self.tensors())
    }

    /// Checksum of the convolution and dense tensors only, which an
    /// attention on/off pair initialized from one seed has in common.
    pub fn backbone_checksum(&self) -> u64 {
        let convs = self.convs.iter().flat_map(|c| [&c.kernel[..], &c.bias[..]]);
        let fcs = self.fcs.iter().flat_map(|f| [&f.weight[..], &f.bias[..]]);
        hash_tensors(convs.chain(fcs))
    }

    pub fn add_assign(&mut self, other: &ModelWeights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Subgradient of ReLU, with the value at exactly zero defined as 0.
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Scales every patch to `[0, 1]` by its own min and max; flat patches become zeros.
pub fn normalize_patches(patches: &[f64], size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(patches.len());
    for p in patches.chunks_exact(size * size) {
        let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = hi - lo;
        if range > 0.0 {
            out.extend(p.iter().map(|v| (v - lo) / range));
        } else {
            out.extend(std::iter::repeat(0.0).take(p.len()));
        }
    }
    out
}

/// Unfolds an NHWC batch into rows of 3x3 neighborhoods: `(n*ho*wo) x (9*c)`.
fn im2col(input: &[f64], n: usize, side: usize, c: usize) -> Vec<f64> {
    let out_side = side - 2;
    let mut cols = Vec::with_capacity(n * out_side * out_side * 9 * c);
    for s in 0..n {
        let base = s * side * side * c;
        for i in 0..out_side {
            for j in 0..out_side {
                for di in 0..3 {
                    let start = base + ((i + di) * side + j) * c;
                    cols.extend_from_slice(&input[start..start + 3 * c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(d_cols: &[f64], n: usize, side: usize, c: usize) -> Vec<f64> {
    let out_side = side - 2;
    let mut d_input = vec![0.0; n * side * side * c];
    let mut rows = d_cols.chunks_exact(9 * c);
    for s in 0..n {
        let base = s * side * side * c;
        for i in 0..out_side {
            for j in 0..out_side {
                let row = rows.next().expect("row count");
                for di in 0..3 {
                    let start = base + ((i + di) * side + j) * c;
                    d_input[start..start + 3 * c]
                        .iter_mut()
                        .zip(&row[di * 3 * c..(di + 1) * 3 * c])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    d_input
}

/// Valid 3x3 cross-correlation of an NHWC batch (`n` samples of `side x side x c_in`).
/// Returns `(cols, out)` where `out` is `n x (side-2) x (side-2) x c_out`.
pub fn conv2d_valid(input: &[f64], n: usize, side: usize, conv: &Conv) -> Result<(Vec<f64>, Vec<f64>), BraggError> {
    if side < 3 {
        return Err(BraggError::Shape(format!("conv input side {side} is below 3")));
    }
    if input.len() != n * side * side * conv.c_in {
        return Err(BraggError::Shape(format!(
            "conv input has {} values, expected {n}x{side}x{side}x{}",
            input.len(),
            conv.c_in
        )));
    }
    let out_side = side - 2;
    let rows = n * out_side * out_side;
    let cols = im2col(input, n, side, conv.c_in);
    let mut out = vec![0.0; rows * conv.c_out];
    gemm(rows, 9 * conv.c_in, conv.c_out, 1.0, &cols, false, &conv.kernel, false, 0.0, &mut out);
    add_row_bias(&mut out, &conv.bias);
    Ok((cols, out))
}

/// Intermediate values of the attention block.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub input: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub g: Vec<f64>,
    /// Row-stochastic `positions x positions` matrix per sample.
    pub attention: Vec<f64>,
    pub y: Vec<f64>,
}

fn softmax_rows(s: &mut [f64], width: usize) {
    for row in s.chunks_exact_mut(width) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            // exp below -700 would be subnormal; those weights are zero to working precision.
            let e = *v - m;
            *v = if e < -700.0 { 0.0 } else { e.exp() };
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Non-local block over `n` samples of `positions x channels` features.
pub fn nonlocal_block(block: &NonLocal, x: &[f64], n: usize, positions: usize) -> (Vec<f64>, AttentionCache) {
    let b = block.theta.n_out;
    let rows = n * positions;
    let theta = block.theta.apply(x, rows);
    let phi = block.phi.apply(x, rows);
    let g = block.g.apply(x, rows);
    let mut attention = vec![0.0; n * positions * positions];
    let mut y = vec![0.0; rows * b];
    for s in 0..n {
        let fb = s * positions * b..(s + 1) * positions * b;
        let att = &mut attention[s * positions * positions..(s + 1) * positions * positions];
        gemm(positions, b, positions, 1.0, &theta[fb.clone()], false, &phi[fb.clone()], true, 0.0, att);
        softmax_rows(att, positions);
        gemm(positions, positions, b, 1.0, att, false, &g[fb.clone()], false, 0.0, &mut y[fb]);
    }
    let mut z = block.out.apply(&y, rows);
    z.iter_mut().zip(x).for_each(|(a, b)| *a += b);
    (z, AttentionCache { input: x.to_vec(), theta, phi, g, attention, y })
}

fn nonlocal_backward(block: &NonLocal, cache: &AttentionCache, d_z: &[f64], n: usize, positions: usize, grad: &mut NonLocal) -> Vec<f64> {
    let b = block.theta.n_out;
    let rows = n * positions;
    let mut d_x = d_z.to_vec();
    let d_y = block.out.backprop(&cache.y, d_z, rows, &mut grad.out, true).unwrap();

    let mut d_theta = vec![0.0; rows * b];
    let mut d_phi = vec![0.0; rows * b];
    let mut d_g = vec![0.0; rows * b];
    let mut d_att = vec![0.0; positions * positions];
    for s in 0..n {
        let fb = s * positions * b..(s + 1) * positions * b;
        let att = &cache.attention[s * positions * positions..(s + 1) * positions * positions];
        // dA = dY g^T, dg = A^T dY
        gemm(positions, b, positions, 1.0, &d_y[fb.clone()], false, &cache.g[fb.clone()], true, 0.0, &mut d_att);
        gemm(positions, positions, b, 1.0, att, true, &d_y[fb.clone()], false, 0.0, &mut d_g[fb.clone()]);
        // softmax backward, row by row: dS = A * (dA - <dA, A>)
        for (ds_row, a_row) in d_att.chunks_exact_mut(positions).zip(att.chunks_exact(positions)) {
            let dot: f64 = ds_row.iter().zip(a_row).map(|(d, a)| d * a).sum();
            ds_row.iter_mut().zip(a_row).for_each(|(d, a)| *d = a * (*d - dot));
        }
        // S = theta phi^T
        gemm(positions, positions, b, 1.0, &d_att, false, &cache.phi[fb.clone()], false, 0.0, &mut d_theta[fb.clone()]);
        gemm(positions, positions, b, 1.0, &d_att, true, &cache.theta[fb.clone()], false, 0.0, &mut d_phi[fb]);
    }
    for (proj, d, g) in [
        (&block.theta, &d_theta, &mut grad.theta),
        (&block.phi, &d_phi, &mut grad.phi),
        (&block.g, &d_g, &mut grad.g),
    ] {
        let dx = proj.backprop(&cache.input, d, rows, g, true).unwrap();
        d_x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }
    d_x
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub cols: Vec<f64>,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub arch: ArchSpec,
    pub n: usize,
    pub weights_checksum: u64,
    /// Normalized input batch.
    pub input: Vec<f64>,
    pub convs: Vec<ConvCache>,
    pub attention: Option<AttentionCache>,
    pub flat: Vec<f64>,
    pub fcs: Vec<DenseCache>,
}

fn check_batch(w: &ModelWeights, patches: &[f64], n: usize) -> Result<(), BraggError> {
    let area = w.arch.patch_size * w.arch.patch_size;
    if patches.len() != n * area {
        let side = if n > 0 { ((patches.len() / n) as f64).sqrt() } else { 0.0 };
        return Err(BraggError::Shape(format!(
            "batch of {n} patches has {} values (~{side:.0}x{side:.0} each), model expects {}x{}",
            patches.len(),
            w.arch.patch_size,
            w.arch.patch_size
        )));
    }
    Ok(())
}

/// Runs the network on `n` row-major patches; returns `n x 2` centers `(y, z)`
/// in patch coordinates plus the cache for [`backward`].
pub fn forward(w: &ModelWeights, patches: &[f64], n: usize) -> Result<(Vec<f64>, ForwardCache), BraggError> {
    let (out, cache) = run(w, patches, n, true)?;
    Ok((out, cache.expect("cache requested")))
}

/// Forward pass without keeping intermediates.
pub fn infer(w: &ModelWeights, patches: &[f64], n: usize) -> Result<Vec<f64>, BraggError> {
    Ok(run(w, patches, n, false)?.0)
}

fn run(w: &ModelWeights, patches: &[f64], n: usize, keep: bool) -> Result<(Vec<f64>, Option<ForwardCache>), BraggError> {
    check_batch(w, patches, n)?;
    let arch = &w.arch;
    let input = normalize_patches(patches, arch.patch_size);
    let mut convs = Vec::with_capacity(w.convs.len());
    let mut attention = None;
    let mut side = arch.patch_size;
    let mut feat = input;
    let mut input = None;
    for (k, conv) in w.convs.iter().enumerate() {
        let (cols, mut pre) = conv2d_valid(&feat, n, side, conv)?;
        side -= 2;
        if k == 0 && keep {
            input = Some(std::mem::take(&mut feat));
        }
        if keep {
            feat = pre.iter().map(|&v| relu(v)).collect();
            convs.push(ConvCache { cols, pre, post: feat.clone() });
        } else {
            pre.iter_mut().for_each(|v| *v = relu(*v));
            feat = pre;
        }
        if k == 0 {
            if let Some(block) = &w.attention {
                let (z, cache) = nonlocal_block(block, &feat, n, side * side);
                feat = z;
                attention = keep.then_some(cache);
            }
        }
    }
    let mut fcs = Vec::with_capacity(w.fcs.len());
    let last = w.fcs.len() - 1;
    let mut h = feat;
    let flat = if keep { h.clone() } else { Vec::new() };
    for (l, fc) in w.fcs.iter().enumerate() {
        let pre = fc.apply(&h, n);
        if keep {
            let next = if l == last { pre.clone() } else { pre.iter().map(|&v| relu(v)).collect() };
            fcs.push(DenseCache { input: std::mem::replace(&mut h, next), pre });
        } else {
            h = if l == last { pre } else { pre.into_iter().map(relu).collect() };
        }
    }
    let cache = keep.then(|| ForwardCache {
        arch: arch.clone(),
        n,
        weights_checksum: w.checksum(),
        input: input.unwrap_or_default(),
        convs,
        attention,
        flat,
        fcs,
    });
    Ok((h, cache))
}

/// Gradients of `sum(grad_pred * pred)` with respect to every weight.
pub fn backward(w: &ModelWeights, cache: &ForwardCache, grad_pred: &[f64]) -> Result<WeightGradients, BraggError> {
    if cache.arch != w.arch {
        return Err(BraggError::StaleCache("architecture differs".into()));
    }
    if cache.weights_checksum != w.checksum() {
        return Err(BraggError::StaleCache("weights changed since the forward pass".into()));
    }
    let n = cache.n;
    if grad_pred.len() != 2 * n {
        return Err(BraggError::Shape(format!("grad_pred has {} values, expected {}", grad_pred.len(), 2 * n)));
    }
    let mut grads = w.zeros_like();
    let last = w.fcs.len() - 1;
    let mut d = grad_pred.to_vec();
    for l in (0..w.fcs.len()).rev() {
        let fc = &w.fcs[l];
        let c = &cache.fcs[l];
        if l != last {
            d.iter_mut().zip(&c.pre).for_each(|(g, &p)| *g *= relu_grad(p));
        }
        d = fc.backprop(&c.input, &d, n, &mut grads.fcs[l], true).unwrap();
    }

    // `d` now holds the gradient w.r.t. the flattened final feature map.
    let arch = &w.arch;
    for k in (0..w.convs.len()).rev() {
        let conv = &w.convs[k];
        let c = &cache.convs[k];
        let out_side = arch.side_after(k);
        let in_side = out_side + 2;
        if k == 0 {
            if let (Some(block), Some(att_cache)) = (&w.attention, &cache.attention) {
                d = nonlocal_backward(block, att_cache, &d, n, out_side * out_side, grads.attention.as_mut().unwrap());
            }
        }
        d.iter_mut().zip(&c.pre).for_each(|(g, &p)| *g *= relu_grad(p));
        let rows = n * out_side * out_side;
        let gk = &mut grads.convs[k];
        gemm(9 * conv.c_in, rows, conv.c_out, 1.0, &c.cols, true, &d, false, 1.0, &mut gk.kernel);
        add_col_sums(&mut gk.bias, &d, conv.c_out);
        if k > 0 {
            let mut d_cols = vec![0.0; rows * 9 * conv.c_in];
            gemm(rows, conv.c_out, 9 * conv.c_in, 1.0, &d, false, &conv.kernel, true, 0.0, &mut d_cols);
            d = col2im(&d_cols, n, in_side, conv.c_in);
        }
    }
    Ok(grads)
}

/// Mean squared Euclidean error and its gradient: `(1/N) sum |p - t|^2`, `(2/N)(p - t)`.
pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), BraggError> {
    if pred.len() != target.len() || pred.len() % 2 != 0 {
        return Err(BraggError::Shape(format!("pred has {} values, target {}", pred.len(), target.len())));
    }
    let n = (pred.len() / 2).max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Inference over any number of patches, chunked across the current rayon pool.
pub fn predict(w: &ModelWeights, patches: &[f64], n: usize) -> Result<Vec<f64>, BraggError> {
    check_batch(w, patches, n)?;
    let area = w.arch.patch_size * w.arch.patch_size;
    let parts: Vec<Vec<f64>> = patches
        .par_chunks(CHUNK * area)
        .map(|chunk| infer(w, chunk, chunk.len() / area))
        .collect::<Result<_, _>>()?;
    Ok(parts.concat())
}

/// Batch loss and full-batch gradient. Chunks are processed in parallel and
/// their gradients summed in chunk order.
pub fn loss_and_gradient(w: &ModelWeights, patches: &[f64], targets: &[f64], n: usize) -> Result<(f64, WeightGradients), BraggError> {
    check_batch(w, patches, n)?;
    if targets.len() != 2 * n {
        return Err(BraggError::Shape(format!("{} targets for {n} patches", targets.len())));
    }
    let area = w.arch.patch_size * w.arch.patch_size;
    let scale = 2.0 / n as f64;
    let parts: Vec<(f64, WeightGradients)> = patches
        .par_chunks(CHUNK * area)
        .zip(targets.par_chunks(CHUNK * 2))
        .map(|(x, t)| {
            let m = x.len() / area;
            let (pred, cache) = forward(w, x, m)?;
            let mut sq = 0.0;
            let grad_pred: Vec<f64> = pred
                .iter()
                .zip(t)
                .map(|(p, t)| {
                    sq += (p - t) * (p - t);
                    scale * (p - t)
                })
                .collect();
            Ok((sq, backward(w, &cache, &grad_pred)?))
        })
        .collect::<Result<_, BraggError>>()?;
    let mut total = w.zeros_like();
    let mut sq = 0.0;
    for (s, g) in &parts {
        sq += s;
        total.add_assign(g);
    }
    Ok((sq / n as f64, total))
}

fn write_u32<W: Write>(out: &mut W, v: u32) -> io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, BraggError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(eof_as_truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn eof_as_truncated(e: io::Error) -> BraggError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        BraggError::Truncated
    } else {
        BraggError::Io(e)
    }
}

/// Layout: `"BNNW"`, u32 version, arch (u32 patch_size, u32 n_conv, widths,
/// u32 n_fc, sizes, u32 attention flag, u32 bottleneck), u32 tensor count,
/// then per tensor a u64 length and that many little-endian f64.
pub fn write_weights_to<W: Write>(w: &ModelWeights, mut out: W) -> Result<(), BraggError> {
    out.write_all(&WEIGHTS_MAGIC)?;
    write_u32(&mut out, WEIGHTS_VERSION)?;
    let a = &w.arch;
    write_u32(&mut out, a.patch_size as u32)?;
    write_u32(&mut out, a.conv_channels.len() as u32)?;
    for &c in &a.conv_channels {
        write_u32(&mut out, c as u32)?;
    }
    write_u32(&mut out, a.fc_sizes.len() as u32)?;
    for &c in &a.fc_sizes {
        write_u32(&mut out, c as u32)?;
    }
    write_u32(&mut out, a.attention_enabled as u32)?;
    write_u32(&mut out, a.attention_bottleneck as u32)?;
    let tensors = w.tensors();
    write_u32(&mut out, tensors.len() as u32)?;
    let mut buf = Vec::new();
    for t in tensors {
        buf.clear();
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<(), BraggError> {
    write_weights_to(w, BufWriter::new(File::create(path)?))
}

pub fn read_weights_from<R: Read>(mut input: R) -> Result<ModelWeights, BraggError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(eof_as_truncated)?;
    if magic != WEIGHTS_MAGIC {
        return Err(BraggError::BadMagic(magic));
    }
    let version = read_u32(&mut input)?;
    if version != WEIGHTS_VERSION {
        return Err(BraggError::Version(version));
    }
    let patch_size = read_u32(&mut input)? as usize;
    let n_conv = read_u32(&mut input)? as usize;
    if n_conv > 64 {
        return Err(BraggError::Arch(format!("{n_conv} conv layers")));
    }
    let conv_channels = (0..n_conv).map(|_| read_u32(&mut input).map(|v| v as usize)).collect::<Result<_, _>>()?;
    let n_fc = read_u32(&mut input)? as usize;
    if n_fc > 64 {
        return Err(BraggError::Arch(format!("{n_fc} dense layers")));
    }
    let fc_sizes = (0..n_fc).map(|_| read_u32(&mut input).map(|v| v as usize)).collect::<Result<_, _>>()?;
    let attention_enabled = read_u32(&mut input)? != 0;
    let attention_bottleneck = read_u32(&mut input)? as usize;
    let arch = ArchSpec { patch_size, conv_channels, fc_sizes, attention_enabled, attention_bottleneck };
    let mut w = ModelWeights::zeros(&arch)?;
    let names = w.tensor_names();
    let count = read_u32(&mut input)? as usize;
    if count != names.len() {
        return Err(BraggError::TensorCount { expected: names.len(), found: count });
    }
    for (name, t) in names.iter().zip(w.tensors_mut()) {
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(eof_as_truncated)?;
        let len = u64::from_le_bytes(len) as usize;
        if len != t.len() {
            return Err(BraggError::LayerShape { layer: name.clone(), expected: t.len(), found: len });
        }
        let mut raw = vec![0u8; len * 8];
        input.read_exact(&mut raw).map_err(eof_as_truncated)?;
        for (v, b) in t.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(BraggError::NonFinite(name.clone()));
        }
    }
    Ok(w)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights, BraggError> {
    read_weights_from(BufReader::new(File::open(path)?))
}

/// Loads weights and checks them against an expected architecture, naming
/// the first layer whose shape differs.
pub fn load_weights_expecting(path: impl AsRef<Path>, expected: &ArchSpec) -> Result<ModelWeights, BraggError> {
    let w = load_weights(path)?;
    check_arch(&w, expected)?;
    Ok(w)
}

pub fn check_arch(w: &ModelWeights, expected: &ArchSpec) -> Result<(), BraggError> {
    if &w.arch == expected {
        return Ok(());
    }
    let want = ModelWeights::zeros(expected)?;
    let (want_names, got_names) = (want.tensor_names(), w.tensor_names());
    for ((name, a), (got_name, b)) in want_names.iter().zip(want.tensors()).zip(got_names.iter().zip(w.tensors())) {
        if name != got_name || a.len() != b.len() {
            return Err(BraggError::LayerShape { layer: name.clone(), expected: a.len(), found: b.len() });
        }
    }
    if want_names.len() != got_names.len() {
        return Err(BraggError::TensorCount { expected: want_names.len(), found: got_names.len() });
    }
    Err(BraggError::Arch(format!("weights are for {:?}, expected {:?}", w.arch, expected)))
}
