//! Layered perceptual distance over channel-normalized hierarchical features,
//! plus the per-pixel baselines it is meant to replace.
//!
//! Features come from a fixed, seeded bank of orthonormal 3×3 filters. Each
//! level convolves the rectified output of the previous level, rectifies,
//! and halves the resolution with a binomial low-pass before subsampling.
//! Without the low-pass a one-pixel translation lands on a different
//! sampling phase and scrambles every deeper level. First-level filters
//! are zero-sum per input channel, so features describe local structure
//! rather than absolute brightness. What is stored in the [`FeatureStack`]
//! is the channel-normalized copy of every level's output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];
pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
/// Channel vectors shorter than this normalize to zero.
pub const NORM_FLOOR: f64 = 1e-5;
/// Separable low-pass applied before subsampling.
const BINOMIAL: [f32; 3] = [0.25, 0.5, 0.25];

/// One level of the filter bank: `out × in × 3 × 3` weights, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLevel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub weights: Vec<f32>,
}

impl ConvLevel {
    fn fan_in(&self) -> usize {
        self.in_channels * KERNEL * KERNEL
    }

    pub fn filter(&self, out: usize) -> &[f32] {
        let n = self.fan_in();
        &self.weights[out * n..(out + 1) * n]
    }
}

/// Deterministic stand-in for a pretrained classification backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub seed: u64,
    pub levels: Vec<ConvLevel>,
}

impl FilterBank {
    pub fn channel_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.out_channels).collect()
    }

    /// Identifier recorded in feature files so stores built by different
    /// extractors are never mixed.
    pub fn embedder_id(&self) -> String {
        let chans: Vec<String> = self.channel_counts().iter().map(usize::to_string).collect();
        format!("filterbank-v1:seed={}:channels={}", self.seed, chans.join(","))
    }
}

/// Builds the default three-level bank (16, 32, 64 channels).
pub fn build_filter_bank(seed: u64) -> FilterBank {
    build_filter_bank_with(seed, &DEFAULT_CHANNELS)
}

pub fn build_filter_bank_with(seed: u64, channels: &[usize]) -> FilterBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels = Vec::with_capacity(channels.len());
    let mut in_channels = 3;
    for &out_channels in channels {
        let fan_in = in_channels * KERNEL * KERNEL;
        let mut rows: Vec<Vec<f64>> = (0..out_channels)
            .map(|_| (0..fan_in).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        if levels.is_empty() {
            remove_channel_means(&mut rows, in_channels);
        }
        orthonormalize(&mut rows);
        let weights = rows.iter().flatten().map(|&v| v as f32).collect();
        levels.push(ConvLevel {
            out_channels,
            in_channels,
            weights,
        });
        in_channels = out_channels;
    }
    FilterBank { seed, levels }
}

/// Makes each filter's taps sum to zero within every input channel.
fn remove_channel_means(rows: &mut [Vec<f64>], in_channels: usize) {
    let taps = KERNEL * KERNEL;
    for row in rows.iter_mut() {
        for ch in row.chunks_mut(taps).take(in_channels) {
            let mean = ch.iter().sum::<f64>() / taps as f64;
            ch.iter_mut().for_each(|v| *v -= mean);
        }
    }
}

/// Modified Gram-Schmidt (two passes) over as many rows as the dimension
/// allows; any surplus rows are only unit-normalized.
fn orthonormalize(rows: &mut [Vec<f64>]) {
    let dim = rows.first().map_or(0, Vec::len);
    let basis = rows.len().min(dim);
    for i in 0..rows.len() {
        if i < basis {
            for _ in 0..2 {
                for j in 0..i {
                    let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    let (head, tail) = rows.split_at_mut(i);
                    for (v, b) in tail[0].iter_mut().zip(&head[j]) {
                        *v -= dot * b;
                    }
                }
            }
        }
        let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// One level of activations, `channels × h × w`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLevel {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureLevel {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.positions();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Scales the channel vector at every position to unit length. Vectors
    /// shorter than [`NORM_FLOOR`] are set to zero: in flat regions the
    /// activations are rounding residue, and normalizing would turn that
    /// into a full-size feature.
    fn normalize_channels(&mut self) {
        let n = self.positions();
        for p in 0..n {
            let norm_sq: f64 = (0..self.channels)
                .map(|c| {
                    let v = self.data[c * n + p] as f64;
                    v * v
                })
                .sum();
            let inv = if norm_sq.sqrt() < NORM_FLOOR { 0.0 } else { 1.0 / norm_sq.sqrt() };
            for c in 0..self.channels {
                let v = &mut self.data[c * n + p];
                *v = (*v as f64 * inv) as f32;
            }
        }
    }
}

/// Channel-normalized activations for every level of the bank.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub levels: Vec<FeatureLevel>,
}

impl FeatureStack {
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels.iter().map(FeatureLevel::shape).collect()
    }
}

/// Runs the image through every level of `bank`.
pub fn extract_features(img: &ImageTensor, bank: &FilterBank) -> Result<FeatureStack> {
    let first = bank
        .levels
        .first()
        .ok_or_else(|| Error::Config("filter bank has no levels".into()))?;
    if first.in_channels != 3 {
        return Err(Error::Config(format!(
            "level-0 filters expect {} input channels, images have 3",
            first.in_channels
        )));
    }
    let divisor = 1usize << bank.levels.len();
    if !img.height().is_multiple_of(divisor) || !img.width().is_multiple_of(divisor) {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by {divisor} for a {}-level bank",
            img.width(),
            img.height(),
            bank.levels.len()
        )));
    }

    // Interleaved RGB -> channel planes.
    let (h, w) = (img.height(), img.width());
    let mut input = FeatureLevel::zeros(3, h, w);
    for (p, px) in img.data().chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            input.data[c * h * w + p] = v;
        }
    }

    let mut levels = Vec::with_capacity(bank.levels.len());
    for conv in &bank.levels {
        if conv.in_channels != input.channels {
            return Err(Error::Config(format!(
                "filters expect {} input channels, previous level produced {}",
                conv.in_channels, input.channels
            )));
        }
        let raw = conv_relu(&input, conv);
        let mut normalized = raw.clone();
        normalized.normalize_channels();
        levels.push(normalized);
        input = raw;
    }
    Ok(FeatureStack { levels })
}

/// Dense 3×3 convolution with one pixel of zero padding, rectified, then
/// low-passed and subsampled by [`STRIDE`].
fn conv_relu(input: &FeatureLevel, conv: &ConvLevel) -> FeatureLevel {
    let (h, w) = (input.height, input.width);
    let mut dense = FeatureLevel::zeros(conv.out_channels, h, w);
    // zero-padded copy so the receptive-field gather needs no bounds checks
    let (ph, pw) = (h + 2, w + 2);
    let mut padded = vec![0.0f32; conv.in_channels * ph * pw];
    for i in 0..conv.in_channels {
        for (y, row) in input.channel(i).chunks_exact(w).enumerate() {
            let start = i * ph * pw + (y + 1) * pw + 1;
            padded[start..start + w].copy_from_slice(row);
        }
    }
    let mut patch = vec![0.0f32; conv.fan_in()];
    for y in 0..h {
        for x in 0..w {
            // gather the receptive field once, in filter layout
            for i in 0..conv.in_channels {
                for ky in 0..KERNEL {
                    let src = i * ph * pw + (y + ky) * pw + x;
                    let dst = (i * KERNEL + ky) * KERNEL;
                    patch[dst..dst + KERNEL].copy_from_slice(&padded[src..src + KERNEL]);
                }
            }
            for o in 0..conv.out_channels {
                let acc = dot(conv.filter(o), &patch);
                dense.data[o * h * w + y * w + x] = acc.max(0.0);
            }
        }
    }
    downsample(&dense)
}

/// Dot product over eight independent lanes so the loop vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

/// Binomial low-pass (zero padding) sampled at every other position.
fn downsample(level: &FeatureLevel) -> FeatureLevel {
    let (h, w) = (level.height, level.width);
    let (oh, ow) = (h / STRIDE, w / STRIDE);
    let mut out = FeatureLevel::zeros(level.channels, oh, ow);
    let mut rows = vec![0.0f32; oh * w];
    for c in 0..level.channels {
        let plane = level.channel(c);
        // vertical pass
        for y in 0..oh {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &k) in BINOMIAL.iter().enumerate() {
                    if let Some(sy) = (y * STRIDE + t).checked_sub(1).filter(|&sy| sy < h) {
                        acc += k * plane[sy * w + x];
                    }
                }
                rows[y * w + x] = acc;
            }
        }
        // horizontal pass
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for (t, &k) in BINOMIAL.iter().enumerate() {
                    if let Some(sx) = (x * STRIDE + t).checked_sub(1).filter(|&sx| sx < w) {
                        acc += k * rows[y * w + sx];
                    }
                }
                dst[y * ow + x] = acc;
            }
        }
    }
    out
}

/// Per-level, per-channel nonnegative weights applied to feature differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationWeights {
    pub levels: Vec<Vec<f64>>,
}

impl CalibrationWeights {
    pub fn ones(channels: &[usize]) -> Self {
        Self {
            levels: channels.iter().map(|&c| vec![1.0; c]).collect(),
        }
    }

    pub fn ones_for(stack: &FeatureStack) -> Self {
        Self::ones(&stack.levels.iter().map(|l| l.channels).collect::<Vec<_>>())
    }

    pub fn new(levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.iter().flatten().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Metric("calibration weights must be finite and nonnegative".into()));
        }
        Ok(Self { levels })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| l.iter().map(|w| w * factor).collect())
                .collect(),
        }
    }
}

fn check_shapes(a: &FeatureStack, b: &FeatureStack, w: &CalibrationWeights) -> Result<()> {
    if a.shapes() != b.shapes() {
        return Err(Error::Metric(format!(
            "feature stacks differ in shape: {:?} vs {:?}",
            a.shapes(),
            b.shapes()
        )));
    }
    let wshape: Vec<usize> = w.levels.iter().map(Vec::len).collect();
    let fshape: Vec<usize> = a.levels.iter().map(|l| l.channels).collect();
    if wshape != fshape {
        return Err(Error::Metric(format!(
            "weights have channel layout {wshape:?}, features {fshape:?}"
        )));
    }
    Ok(())
}

/// Per-level, per-channel spatial mean of squared feature differences.
/// `lpips_distance` is the weighted sum of these with squared weights.
pub fn channel_distances(a: &FeatureStack, b: &FeatureStack) -> Result<Vec<Vec<f64>>> {
    if a.shapes() != b.shapes() {
        return Err(Error::Metric("feature stacks differ in shape".into()));
    }
    Ok(a.levels
        .iter()
        .zip(&b.levels)
        .map(|(la, lb)| {
            let n = la.positions() as f64;
            (0..la.channels)
                .map(|c| {
                    let sum: f64 = la
                        .channel(c)
                        .iter()
                        .zip(lb.channel(c))
                        .map(|(&x, &y)| {
                            let d = x as f64 - y as f64;
                            d * d
                        })
                        .sum();
                    sum / n
                })
                .collect()
        })
        .collect())
}

/// `Σ_levels (1/(h·w)) Σ_positions ‖w ⊙ (a − b)‖²`.
pub fn lpips_distance(a: &FeatureStack, b: &FeatureStack, w: &CalibrationWeights) -> Result<f64> {
    check_shapes(a, b, w)?;
    let mut total = 0.0;
    for ((la, lb), lw) in a.levels.iter().zip(&b.levels).zip(&w.levels) {
        let mut level = 0.0;
        for (c, &wc) in lw.iter().enumerate() {
            for (&x, &y) in la.channel(c).iter().zip(lb.channel(c)) {
                let d = wc * (x as f64 - y as f64);
                level += d * d;
            }
        }
        total += level / la.positions() as f64;
    }
    Ok(total)
}

fn check_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Metric(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Mean squared difference over every sample.
pub fn mse_distance(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// PSNR in decibels for a peak value of 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psnr {
    Finite(f64),
    /// Identical inputs.
    Infinite,
}

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (1.0 / mse).log10())
    }
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<Psnr> {
    mse_distance(a, b).map(psnr_from_mse)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityLabel {
    Similar,
    Dissimilar,
}

impl SimilarityLabel {
    /// Regression target: similar pairs should have distance 0, dissimilar 1.
    pub fn target(self) -> f64 {
        match self {
            SimilarityLabel::Similar => 0.0,
            SimilarityLabel::Dissimilar => 1.0,
        }
    }
}

impl std::str::FromStr for SimilarityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "similar" => Ok(Self::Similar),
            "dissimilar" => Ok(Self::Dissimilar),
            other => Err(Error::InvalidArgument(format!(
                "label must be `similar` or `dissimilar`, got `{other}`"
            ))),
        }
    }
}

pub const FIT_ITERATIONS: usize = 500;
pub const FIT_STEP: f64 = 1e-2;

/// Fits channel weights from labeled pairs by nonnegative least squares on
/// the per-channel distances.
///
/// The fitted quantity is the squared weight, since that is what the
/// distance is linear in; the returned weights are its square root.
pub fn fit_calibration_weights(
    pairs: &[(FeatureStack, FeatureStack, SimilarityLabel)],
) -> Result<CalibrationWeights> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateCalibration(format!(
            "need at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let has = |l| pairs.iter().any(|p| p.2 == l);
    if !has(SimilarityLabel::Similar) || !has(SimilarityLabel::Dissimilar) {
        return Err(Error::DegenerateCalibration(
            "both similar and dissimilar pairs are required".into(),
        ));
    }
    let layout: Vec<usize> = pairs[0].0.levels.iter().map(|l| l.channels).collect();
    let mut design = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for (a, b, label) in pairs {
        if a.shapes() != pairs[0].0.shapes() {
            return Err(Error::Metric("calibration pairs have mixed feature shapes".into()));
        }
        design.push(channel_distances(a, b)?.into_iter().flatten().collect::<Vec<_>>());
        targets.push(label.target());
    }
    let squared = nnls_projected_gradient(&design, &targets, FIT_ITERATIONS, FIT_STEP);

    let mut flat = squared.into_iter().map(f64::sqrt);
    let levels = layout
        .iter()
        .map(|&c| flat.by_ref().take(c).collect())
        .collect();
    Ok(CalibrationWeights { levels })
}

/// Projected gradient descent on `(1/n) Σ (x·v − y)²` subject to `v ≥ 0`,
/// starting from zero.
pub(crate) fn nnls_projected_gradient(
    design: &[Vec<f64>],
    targets: &[f64],
    iterations: usize,
    step: f64,
) -> Vec<f64> {
    let dim = design.first().map_or(0, Vec::len);
    let n = design.len() as f64;
    let mut v = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    for _ in 0..iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (row, &y) in design.iter().zip(targets) {
            let residual: f64 = row.iter().zip(&v).map(|(x, w)| x * w).sum::<f64>() - y;
            for (g, x) in grad.iter_mut().zip(row) {
                *g += 2.0 * residual * x / n;
            }
        }
        for (w, g) in v.iter_mut().zip(&grad) {
            *w = (*w - step * g).max(0.0);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(side: usize) -> ImageTensor {
        ImageTensor::from_fn(side, side, |r, c| {
            [
                (r * side + c) as f32 / (side * side) as f32,
                c as f32 / side as f32,
                1.0 - r as f32 / side as f32,
            ]
        })
    }

    #[test]
    fn bank_is_deterministic_and_seed_sensitive() {
        assert_eq!(build_filter_bank(7), build_filter_bank(7));
        assert_ne!(build_filter_bank(1).levels, build_filter_bank(2).levels);
    }

    #[test]
    fn bank_filters_are_orthonormal() {
        let bank = build_filter_bank(42);
        assert_eq!(bank.channel_counts(), vec![16, 32, 64]);
        for level in &bank.levels {
            for i in 0..level.out_channels {
                // independent summation order: reversed
                let norm_sq: f64 = level.filter(i).iter().rev().map(|&v| (v as f64).powi(2)).sum();
                assert!((norm_sq.sqrt() - 1.0).abs() < 1e-6);
                for j in 0..i {
                    let dot: f64 = level
                        .filter(i)
                        .iter()
                        .zip(level.filter(j))
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum();
                    assert!(dot.abs() < 1e-5, "rows {i},{j} dot {dot}");
                }
            }
        }
    }

    #[test]
    fn surplus_rows_are_unit_normalized() {
        let mut rows = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![4.0, 0.0]];
        orthonormalize(&mut rows);
        for r in &rows {
            assert!((r.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(rows[2], vec![1.0, 0.0]);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let bank = build_filter_bank(3);
        let stack = extract_features(&ImageTensor::constant(64, 64, 0.0), &bank).unwrap();
        let sizes: Vec<_> = stack.shapes();
        assert_eq!(sizes, vec![(16, 32, 32), (32, 16, 16), (64, 8, 8)]);
        assert!(stack.levels.iter().all(|l| l.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn features_are_deterministic_and_normalized() {
        let bank = build_filter_bank(42);
        let a = extract_features(&ramp(64), &bank).unwrap();
        let b = extract_features(&ramp(64), &bank).unwrap();
        assert_eq!(a, b);
        for level in &a.levels {
            let n = level.positions();
            for p in 0..n {
                let norm: f64 = (0..level.channels)
                    .map(|c| (level.data[c * n + p] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-5, "norm {norm}");
            }
        }
    }

    #[test]
    fn extraction_rejects_bad_geometry() {
        let bank = build_filter_bank(0);
        assert!(matches!(
            extract_features(&ImageTensor::constant(12, 12, 0.2), &bank),
            Err(Error::Config(_))
        ));
        let mut odd = bank.clone();
        odd.levels[0].in_channels = 1;
        assert!(matches!(
            extract_features(&ImageTensor::constant(64, 64, 0.2), &odd),
            Err(Error::Config(_))
        ));
    }

    fn toy_stack(values: [[f32; 2]; 4]) -> FeatureStack {
        // level 0: 2 channels at 1x2 positions; level 1: 2 channels at 1x1 (twice)
        FeatureStack {
            levels: vec![
                FeatureLevel {
                    channels: 2,
                    height: 1,
                    width: 2,
                    data: vec![values[0][0], values[1][0], values[0][1], values[1][1]],
                },
                FeatureLevel {
                    channels: 2,
                    height: 1,
                    width: 1,
                    data: vec![values[2][0], values[2][1]],
                },
            ],
        }
    }

    #[test]
    fn lpips_hand_computed() {
        // level 0 positions p0=(a:[1,0]) p1=(a:[0.6,0.8]); b p0=[0,1] p1=[0.6,0.8]
        let a = toy_stack([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [0.0, 0.0]]);
        let b = toy_stack([[0.0, 1.0], [0.6, 0.8], [1.0, 0.0], [0.0, 0.0]]);
        let w = CalibrationWeights::ones(&[2, 2]);
        // level 0: (1 + 1 + 0 + 0) / 2 = 1; level 1: (1 + 1) / 1 = 2
        let d = lpips_distance(&a, &b, &w).unwrap();
        assert!((d - 3.0).abs() < 1e-12);
        assert_eq!(lpips_distance(&a, &a, &w).unwrap(), 0.0);
        assert_eq!(d, lpips_distance(&b, &a, &w).unwrap());

        let w = CalibrationWeights::new(vec![vec![2.0, 0.0], vec![1.0, 0.5]]).unwrap();
        // level 0: channel 0 only: (4·1 + 0)/2 = 2; level 1: 1 + 0.25 = 1.25
        assert!((lpips_distance(&a, &b, &w).unwrap() - 3.25).abs() < 1e-12);
    }

    #[test]
    fn lpips_shape_mismatch() {
        let a = toy_stack([[1.0, 0.0]; 4]);
        let w = CalibrationWeights::ones(&[2, 3]);
        assert!(matches!(lpips_distance(&a, &a, &w), Err(Error::Metric(_))));
        assert!(CalibrationWeights::new(vec![vec![-1.0]]).is_err());
    }

    #[test]
    fn mse_and_psnr_values() {
        let zeros = ImageTensor::constant(8, 8, 0.0);
        let ones = ImageTensor::constant(8, 8, 1.0);
        let half = ImageTensor::constant(8, 8, 0.5);
        assert_eq!(mse_distance(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(mse_distance(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(mse_distance(&zeros, &half).unwrap(), 0.25);
        assert_eq!(psnr(&half, &half).unwrap(), Psnr::Infinite);
        assert_eq!(psnr(&zeros, &ones).unwrap(), Psnr::Finite(0.0));
        match psnr_from_mse(0.01) {
            Psnr::Finite(db) => assert!((db - 20.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert!(mse_distance(&zeros, &ImageTensor::constant(8, 9, 0.0)).is_err());
    }

    #[test]
    fn nnls_stays_at_zero_without_signal() {
        let design = vec![vec![0.0; 4]; 6];
        let v = nnls_projected_gradient(&design, &[0.0; 6], FIT_ITERATIONS, FIT_STEP);
        assert!(v.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn fit_requires_both_labels() {
        let s = toy_stack([[1.0, 0.0]; 4]);
        let pairs = vec![
            (s.clone(), s.clone(), SimilarityLabel::Similar),
            (s.clone(), s.clone(), SimilarityLabel::Similar),
        ];
        assert!(matches!(
            fit_calibration_weights(&pairs),
            Err(Error::DegenerateCalibration(_))
        ));
        assert!(fit_calibration_weights(&pairs[..1]).is_err());
    }

    /// Straight-line f64 forward pass written from the definition: zero-padded
    /// 3×3 convolution, rectify, binomial blur, keep every other sample.
    #[allow(clippy::needless_range_loop)] // index loops mirror the formula
    fn naive_forward(img: &ImageTensor, bank: &FilterBank) -> Vec<Vec<Vec<Vec<f64>>>> {
        let (h, w) = (img.height(), img.width());
        let mut input: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|c| (0..h).map(|r| (0..w).map(|x| img.pixel(r, x)[c] as f64).collect()).collect())
            .collect();
        let mut out = Vec::new();
        for level in &bank.levels {
            let (ih, iw) = (input[0].len(), input[0][0].len());
            let at = |plane: &Vec<Vec<f64>>, y: isize, x: isize| {
                if y < 0 || x < 0 || y >= ih as isize || x >= iw as isize {
                    0.0
                } else {
                    plane[y as usize][x as usize]
                }
            };
            let mut dense = vec![vec![vec![0.0; iw]; ih]; level.out_channels];
            for o in 0..level.out_channels {
                let f = level.filter(o);
                for y in 0..ih {
                    for x in 0..iw {
                        let mut acc = 0.0;
                        for i in 0..level.in_channels {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let tap = f[i * 9 + ky * 3 + kx] as f64;
                                    acc += tap * at(&input[i], y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                }
                            }
                        }
                        dense[o][y][x] = acc.max(0.0);
                    }
                }
            }
            let k = [0.25, 0.5, 0.25];
            let (oh, ow) = (ih / 2, iw / 2);
            let mut down = vec![vec![vec![0.0; ow]; oh]; level.out_channels];
            for c in 0..level.out_channels {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for a in 0..3 {
                            for b in 0..3 {
                                acc += k[a] * k[b] * at(&dense[c], 2 * y as isize + a as isize - 1, 2 * x as isize + b as isize - 1);
                            }
                        }
                        down[c][y][x] = acc;
                    }
                }
            }
            out.push(down.clone());
            input = down;
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let bank = build_filter_bank(11);
        let img = ramp(8);
        let stack = extract_features(&img, &bank).unwrap();
        let oracle = naive_forward(&img, &bank);
        for (level, raw) in stack.levels.iter().zip(&oracle) {
            let (h, w) = (raw[0].len(), raw[0][0].len());
            assert_eq!(level.shape(), (raw.len(), h, w));
            for y in 0..h {
                for x in 0..w {
                    let norm = raw.iter().map(|ch| ch[y][x].powi(2)).sum::<f64>().sqrt();
                    for (c, ch) in raw.iter().enumerate() {
                        let want = if norm >= NORM_FLOOR { ch[y][x] / norm } else { 0.0 };
                        let got = level.data[c * h * w + y * w + x] as f64;
                        assert!((got - want).abs() < 1e-5, "channel {c} at ({y},{x}): {got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn first_level_filters_ignore_flat_colour() {
        // zero-sum taps: a constant image only responds at the padded border
        let bank = build_filter_bank(5);
        let stack = extract_features(&ImageTensor::constant(64, 64, 0.6), &bank).unwrap();
        let level = &stack.levels[0];
        let centre = 16 * 32 + 16;
        assert!((0..level.channels).all(|c| level.data[c * 1024 + centre] == 0.0));
    }

    #[test]
    fn weight_scaling_is_quadratic() {
        let bank = build_filter_bank(2);
        let a = extract_features(&ramp(64), &bank).unwrap();
        let b = extract_features(&ImageTensor::constant(64, 64, 0.3), &bank).unwrap();
        let w = CalibrationWeights::ones_for(&a);
        let d = lpips_distance(&a, &b, &w).unwrap();
        assert!(d > 0.0);
        for c in [0.5, 2.0, 3.7] {
            let scaled = lpips_distance(&a, &b, &w.scaled(c)).unwrap();
            assert!((scaled - c * c * d).abs() <= 1e-12 * scaled.max(1.0));
        }
    }

    fn three_channel(values: [f32; 3]) -> FeatureStack {
        FeatureStack {
            levels: vec![FeatureLevel {
                channels: 3,
                height: 1,
                width: 1,
                data: values.to_vec(),
            }],
        }
    }

    #[test]
    fn fit_weights_follow_the_separating_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pairs: Vec<_> = (0..40)
            .map(|i| {
                let label = if i % 2 == 0 { SimilarityLabel::Similar } else { SimilarityLabel::Dissimilar };
                let gap = if label == SimilarityLabel::Similar { 0.0 } else { 1.0 };
                let a = three_channel([0.0, rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)]);
                let b = three_channel([gap, rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)]);
                (a, b, label)
            })
            .collect();
        let w = fit_calibration_weights(&pairs).unwrap();
        let w = &w.levels[0];
        assert!(w[0] > w[1] && w[0] > w[2], "{w:?}");
    }
}
