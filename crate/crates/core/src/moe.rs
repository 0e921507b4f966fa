//! Frequency-band mixture of experts.
//!
//! The spectrum of the normalized input is split into `N` contiguous bands by
//! learnable boundaries. Each band is one expert; a softmax gate driven by the
//! channel-averaged magnitude spectrum weighs the bands, and the weighted
//! spectrum is transformed back to the time domain.

use num_complex::Complex64;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamSlice, ParamSliceMut, Parameterized};
use crate::rng::Rng;
use crate::series::TimeSeriesBatch;
use crate::spectral::{self, DftPlan, Spectrum};

pub const DEFAULT_TEMPERATURE: f64 = 0.02;

/// How band masks are formed from the boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MaskMode {
    /// Indicator masks over floor-mapped bin ranges. Boundaries get no gradient.
    Hard,
    /// Sigmoid-edged masks while training; hard masks at evaluation.
    Soft { temperature: f64 },
}

impl Default for MaskMode {
    fn default() -> Self {
        MaskMode::Soft {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Softmax of a linear map of the magnitude spectrum.
    #[default]
    Gated,
    /// Softmax of a learnable vector, identical for every input.
    Fixed,
}

/// Sorted band edges in `[0, 1]` and the bin index each one maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPartition {
    pub boundaries: Vec<f64>,
    pub index_cuts: Vec<usize>,
}

impl BandPartition {
    pub fn experts(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Relative width `b_i - b_{i-1}` of every band.
    pub fn bandwidths(&self) -> Vec<f64> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Interior boundaries `σ(θ)` in ascending order, with `perm[j]` the index
/// of the logit that produced the `j`-th sorted boundary. Ties keep their
/// original order.
fn sorted_interior(theta: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let squashed: Vec<f64> = theta.iter().map(|&t| sigmoid(t)).collect();
    let mut perm: Vec<usize> = (0..theta.len()).collect();
    perm.sort_by(|&a, &b| squashed[a].total_cmp(&squashed[b]));
    (perm.iter().map(|&i| squashed[i]).collect(), perm)
}

/// Maps boundary logits to a band partition over `bins` spectrum indices.
pub fn compute_partition(theta: &[f64], bins: usize) -> BandPartition {
    let (interior, _) = sorted_interior(theta);
    let mut boundaries = Vec::with_capacity(theta.len() + 2);
    boundaries.push(0.0);
    boundaries.extend(interior);
    boundaries.push(1.0);
    let last = boundaries.len() - 1;
    let index_cuts = boundaries
        .iter()
        .enumerate()
        .map(|(i, &b)| match i {
            0 => 0,
            i if i == last => bins,
            _ => ((b * bins as f64).floor() as usize).min(bins),
        })
        .collect();
    BandPartition {
        boundaries,
        index_cuts,
    }
}

/// Indicator masks: expert `i` owns bins `[cut_i, cut_{i+1})`.
pub fn build_masks(partition: &BandPartition, bins: usize) -> Vec<Vec<f64>> {
    partition
        .index_cuts
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0].min(bins), w[1].min(bins));
            (0..bins)
                .map(|k| if k >= lo && k < hi { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Position of bin `k` on the `[0, 1]` boundary axis. Using `(k + 1) / F`
/// makes the sharp-temperature limit of the soft masks coincide with the
/// floor-mapped hard masks.
fn bin_position(k: usize, bins: usize) -> f64 {
    (k + 1) as f64 / bins as f64
}

struct SoftMaskParts {
    interior: Vec<f64>,
    perm: Vec<usize>,
    /// Lower-edge factor per expert and bin (1 for the first expert).
    lower: Vec<Vec<f64>>,
    /// Upper-edge factor per expert and bin (1 for the last expert).
    upper: Vec<Vec<f64>>,
    /// Per-bin sum of the unnormalized masks.
    total: Vec<f64>,
    masks: Vec<Vec<f64>>,
}

fn soft_mask_parts(theta: &[f64], bins: usize, temperature: f64) -> SoftMaskParts {
    let n = theta.len() + 1;
    let (interior, perm) = sorted_interior(theta);
    let mut lower = vec![vec![1.0; bins]; n];
    let mut upper = vec![vec![1.0; bins]; n];
    for i in 0..n {
        for k in 0..bins {
            let u = bin_position(k, bins);
            if i > 0 {
                lower[i][k] = sigmoid((u - interior[i - 1]) / temperature);
            }
            if i + 1 < n {
                upper[i][k] = sigmoid((interior[i] - u) / temperature);
            }
        }
    }
    let mut total = vec![0.0; bins];
    let mut masks = vec![vec![0.0; bins]; n];
    for i in 0..n {
        for k in 0..bins {
            masks[i][k] = lower[i][k] * upper[i][k];
            total[k] += masks[i][k];
        }
    }
    for row in masks.iter_mut() {
        row.iter_mut().zip(&total).for_each(|(m, s)| *m /= s);
    }
    SoftMaskParts {
        interior,
        perm,
        lower,
        upper,
        total,
        masks,
    }
}

/// Smooth masks `σ((u − b_{i−1})/τ)·σ((b_i − u)/τ)`, renormalized to sum to
/// one at each bin. The fixed outer edges at 0 and 1 contribute no factor.
pub fn soft_masks(theta: &[f64], bins: usize, temperature: f64) -> Vec<Vec<f64>> {
    soft_mask_parts(theta, bins, temperature).masks
}

/// Gradient of a loss with respect to the boundary logits, given its
/// gradient with respect to the soft masks.
fn soft_masks_backward(
    theta: &[f64],
    bins: usize,
    temperature: f64,
    grad_masks: &[Vec<f64>],
) -> Vec<f64> {
    let n = theta.len() + 1;
    let parts = soft_mask_parts(theta, bins, temperature);
    let mut grad_interior = vec![0.0; theta.len()];
    for k in 0..bins {
        let dot: f64 = (0..n).map(|i| grad_masks[i][k] * parts.masks[i][k]).sum();
        for i in 0..n {
            let g_raw = (grad_masks[i][k] - dot) / parts.total[k];
            let raw = parts.lower[i][k] * parts.upper[i][k];
            if i > 0 {
                grad_interior[i - 1] -= g_raw * raw * (1.0 - parts.lower[i][k]) / temperature;
            }
            if i + 1 < n {
                grad_interior[i] += g_raw * raw * (1.0 - parts.upper[i][k]) / temperature;
            }
        }
    }
    let mut grad_theta = vec![0.0; theta.len()];
    for (j, &src) in parts.perm.iter().enumerate() {
        let b = parts.interior[j];
        grad_theta[src] = grad_interior[j] * b * (1.0 - b);
    }
    grad_theta
}

/// Channel-averaged magnitude spectrum of one sample.
pub fn gate_input(channels: &[Spectrum]) -> Vec<f64> {
    let bins = channels.first().map_or(0, Spectrum::len);
    let mut g = vec![0.0; bins];
    for s in channels {
        g.iter_mut().zip(&s.bins).for_each(|(a, z)| *a += z.norm());
    }
    let c = channels.len().max(1) as f64;
    g.iter_mut().for_each(|a| *a /= c);
    g
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gate weights, one simplex row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GateScores {
    pub batch: usize,
    pub experts: usize,
    pub weights: Vec<f64>,
}

impl GateScores {
    pub fn row(&self, b: usize) -> &[f64] {
        &self.weights[b * self.experts..(b + 1) * self.experts]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeBlock {
    pub theta: Vec<f64>,
    /// `bins × experts`, row-major.
    pub gate_weights: Vec<f64>,
    pub gate_bias: Vec<f64>,
    /// Learnable logits used instead of the gate layer in fixed mode.
    pub fixed_logits: Vec<f64>,
    series_len: usize,
    bins: usize,
    experts: usize,
    mask_mode: MaskMode,
    gate_mode: GateMode,
}

/// Activations of one sample kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct MoeCache {
    spectrum: Vec<Complex64>,
    gate_input: Vec<f64>,
    weights: Vec<f64>,
    masks: Vec<Vec<f64>>,
    soft: bool,
}

impl MoeCache {
    pub(crate) fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl MoeBlock {
    /// Equal-width bands (`θ_i = logit(i/N)`) and a gate layer initialized
    /// uniformly in `±1/sqrt(F)`.
    pub fn new(
        series_len: usize,
        experts: usize,
        mask_mode: MaskMode,
        gate_mode: GateMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        if series_len < 2 {
            return Err(Error::invalid(format!(
                "series length must be at least 2, got {series_len}"
            )));
        }
        if experts == 0 {
            return Err(Error::invalid("a mixture needs at least one expert"));
        }
        if let MaskMode::Soft { temperature } = mask_mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::invalid(format!(
                    "soft-mask temperature must be positive, got {temperature}"
                )));
            }
        }
        let bins = spectral::bin_count(series_len);
        let theta = (1..experts)
            .map(|i| logit(i as f64 / experts as f64))
            .collect();
        let (gate_weights, gate_bias, fixed_logits) = match gate_mode {
            GateMode::Gated => {
                let bound = 1.0 / (bins as f64).sqrt();
                let w = (0..bins * experts)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let b = (0..experts)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                (w, b, Vec::new())
            }
            GateMode::Fixed => (Vec::new(), Vec::new(), vec![0.0; experts]),
        };
        Ok(MoeBlock {
            theta,
            gate_weights,
            gate_bias,
            fixed_logits,
            series_len,
            bins,
            experts,
            mask_mode,
            gate_mode,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn series_len(&self) -> usize {
        self.series_len
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.mask_mode
    }

    pub fn gate_mode(&self) -> GateMode {
        self.gate_mode
    }

    pub fn partition(&self) -> BandPartition {
        compute_partition(&self.theta, self.bins)
    }

    /// Masks used for a forward pass: soft only while training in soft mode.
    pub fn masks(&self, training: bool) -> Vec<Vec<f64>> {
        match (self.mask_mode, training) {
            (MaskMode::Soft { temperature }, true) => {
                soft_masks(&self.theta, self.bins, temperature)
            }
            _ => build_masks(&self.partition(), self.bins),
        }
    }

    fn logits(&self, g: &[f64]) -> Vec<f64> {
        match self.gate_mode {
            GateMode::Fixed => self.fixed_logits.clone(),
            GateMode::Gated => {
                let mut out = self.gate_bias.clone();
                for (k, &gk) in g.iter().enumerate() {
                    if gk == 0.0 {
                        continue;
                    }
                    let row = &self.gate_weights[k * self.experts..(k + 1) * self.experts];
                    out.iter_mut().zip(row).for_each(|(o, w)| *o += gk * w);
                }
                out
            }
        }
    }

    pub fn gate_row(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.bins {
            return Err(Error::invalid(format!(
                "gate input has {} bins, gate expects {}",
                g.len(),
                self.bins
            )));
        }
        Ok(softmax(&self.logits(g)))
    }

    pub fn gate_scores(&self, g: &[Vec<f64>]) -> Result<GateScores> {
        let mut weights = Vec::with_capacity(g.len() * self.experts);
        for row in g {
            weights.extend(self.gate_row(row)?);
        }
        Ok(GateScores {
            batch: g.len(),
            experts: self.experts,
            weights,
        })
    }

    /// Band-weighted reconstruction of every sample plus the gate scores.
    pub fn forward(
        &self,
        x: &TimeSeriesBatch,
        training: bool,
    ) -> Result<(TimeSeriesBatch, GateScores)> {
        let (b, c, l) = x.shape();
        if l != self.series_len {
            return Err(Error::invalid(format!(
                "series length {l} does not match mixture length {}",
                self.series_len
            )));
        }
        let mut out = TimeSeriesBatch::zeros(b, c, l);
        let mut weights = Vec::with_capacity(b * self.experts);
        for bi in 0..b {
            let (y, cache) = self.forward_sample(x.sample(bi), c, training)?;
            out.sample_mut(bi).copy_from_slice(&y);
            weights.extend_from_slice(&cache.weights);
        }
        Ok((
            out,
            GateScores {
                batch: b,
                experts: self.experts,
                weights,
            },
        ))
    }

    pub(crate) fn forward_sample(
        &self,
        x: &[f64],
        channels: usize,
        training: bool,
    ) -> Result<(Vec<f64>, MoeCache)> {
        let len = self.series_len;
        let bins = self.bins;
        let plan = DftPlan::cached(len)?;
        let mut spectrum = vec![Complex64::new(0.0, 0.0); channels * bins];
        let mut gate_input = vec![0.0; bins];
        for c in 0..channels {
            let spec = &mut spectrum[c * bins..(c + 1) * bins];
            plan.forward_into(&x[c * len..(c + 1) * len], spec);
            gate_input.iter_mut().zip(spec.iter()).for_each(|(g, z)| *g += z.norm());
        }
        gate_input.iter_mut().for_each(|g| *g /= channels as f64);

        let weights = softmax(&self.logits(&gate_input));
        let soft = training && matches!(self.mask_mode, MaskMode::Soft { .. });
        let masks = self.masks(training);
        let combined = combine_masks(&weights, &masks, bins);

        let mut out = vec![0.0; channels * len];
        let mut scratch = vec![Complex64::new(0.0, 0.0); bins];
        for c in 0..channels {
            let spec = &spectrum[c * bins..(c + 1) * bins];
            scratch
                .iter_mut()
                .zip(spec)
                .zip(&combined)
                .for_each(|((s, z), m)| *s = z * m);
            plan.inverse_into(&scratch, &mut out[c * len..(c + 1) * len]);
        }
        Ok((
            out,
            MoeCache {
                spectrum,
                gate_input,
                weights,
                masks,
                soft,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` given `∂L/∂output`.
    pub(crate) fn backward_sample(
        &self,
        cache: &MoeCache,
        grad_out: &[f64],
        grads: &mut MoeBlock,
    ) -> Result<()> {
        let len = self.series_len;
        let bins = self.bins;
        let channels = grad_out.len() / len;
        let plan = DftPlan::cached(len)?;

        // ∂L/∂m_k where the combined mask m multiplies every channel's bin k.
        let mut grad_combined = vec![0.0; bins];
        let mut partials = vec![Complex64::new(0.0, 0.0); bins];
        for c in 0..channels {
            plan.inverse_pullback_into(&grad_out[c * len..(c + 1) * len], &mut partials);
            let spec = &cache.spectrum[c * bins..(c + 1) * bins];
            for ((g, p), z) in grad_combined.iter_mut().zip(&partials).zip(spec) {
                *g += p.re * z.re + p.im * z.im;
            }
        }

        let grad_weights: Vec<f64> = cache
            .masks
            .iter()
            .map(|m| m.iter().zip(&grad_combined).map(|(a, b)| a * b).sum())
            .collect();

        if cache.soft {
            if let MaskMode::Soft { temperature } = self.mask_mode {
                let grad_masks: Vec<Vec<f64>> = cache
                    .weights
                    .iter()
                    .map(|w| grad_combined.iter().map(|g| w * g).collect())
                    .collect();
                let g_theta = soft_masks_backward(&self.theta, bins, temperature, &grad_masks);
                grads.theta.iter_mut().zip(g_theta).for_each(|(a, b)| *a += b);
            }
        }

        let dot: f64 = cache
            .weights
            .iter()
            .zip(&grad_weights)
            .map(|(w, g)| w * g)
            .sum();
        let grad_logits: Vec<f64> = cache
            .weights
            .iter()
            .zip(&grad_weights)
            .map(|(w, g)| w * (g - dot))
            .collect();

        match self.gate_mode {
            GateMode::Fixed => {
                grads
                    .fixed_logits
                    .iter_mut()
                    .zip(&grad_logits)
                    .for_each(|(a, b)| *a += b);
            }
            GateMode::Gated => {
                grads
                    .gate_bias
                    .iter_mut()
                    .zip(&grad_logits)
                    .for_each(|(a, b)| *a += b);
                for (k, &gk) in cache.gate_input.iter().enumerate() {
                    let row = &mut grads.gate_weights[k * self.experts..(k + 1) * self.experts];
                    row.iter_mut().zip(&grad_logits).for_each(|(a, b)| *a += gk * b);
                }
            }
        }
        Ok(())
    }
}

fn combine_masks(weights: &[f64], masks: &[Vec<f64>], bins: usize) -> Vec<f64> {
    let mut combined = vec![0.0; bins];
    for (w, m) in weights.iter().zip(masks) {
        combined.iter_mut().zip(m).for_each(|(c, v)| *c += w * v);
    }
    combined
}

impl Parameterized for MoeBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], ParamSlice<'_>)) {
        f("moe.theta", &[self.theta.len()], ParamSlice::Real(&self.theta));
        match self.gate_mode {
            GateMode::Gated => {
                f(
                    "moe.gate.weight",
                    &[self.bins, self.experts],
                    ParamSlice::Real(&self.gate_weights),
                );
                f("moe.gate.bias", &[self.experts], ParamSlice::Real(&self.gate_bias));
            }
            GateMode::Fixed => {
                f(
                    "moe.gate.fixed",
                    &[self.experts],
                    ParamSlice::Real(&self.fixed_logits),
                );
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamSliceMut<'_>)) {
        f("moe.theta", ParamSliceMut::Real(&mut self.theta));
        match self.gate_mode {
            GateMode::Gated => {
                f("moe.gate.weight", ParamSliceMut::Real(&mut self.gate_weights));
                f("moe.gate.bias", ParamSliceMut::Real(&mut self.gate_bias));
            }
            GateMode::Fixed => {
                f("moe.gate.fixed", ParamSliceMut::Real(&mut self.fixed_logits));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn block(len: usize, experts: usize, mask: MaskMode, gate: GateMode) -> MoeBlock {
        MoeBlock::new(len, experts, mask, gate, &mut substream(3, "moe", &[])).unwrap()
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn partition_examples() {
        let p = compute_partition(&[0.0], 49);
        assert_eq!(p.boundaries, vec![0.0, 0.5, 1.0]);
        assert_eq!(p.index_cuts, vec![0, 24, 49]);

        let p = compute_partition(&[], 17);
        assert_eq!(p.boundaries, vec![0.0, 1.0]);
        assert_eq!(p.index_cuts, vec![0, 17]);

        let p = compute_partition(&[-(4f64.ln()), 4f64.ln()], 100);
        assert!((p.boundaries[1] - 0.2).abs() < 1e-12);
        assert!((p.boundaries[2] - 0.8).abs() < 1e-12);
        assert_eq!(p.index_cuts, vec![0, 20, 80, 100]);
    }

    #[test]
    fn partition_sorts_unordered_logits() {
        let p = compute_partition(&[2.0, -2.0, 0.0], 64);
        assert!(p.boundaries.windows(2).all(|w| w[0] <= w[1]));
        assert!(p.index_cuts.windows(2).all(|w| w[0] <= w[1]));
        assert!((p.bandwidths().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_examples() {
        let p = compute_partition(&[0.0], 49);
        let m = build_masks(&p, 49);
        assert!((0..24).all(|k| m[0][k] == 1.0 && m[1][k] == 0.0));
        assert!((24..49).all(|k| m[0][k] == 0.0 && m[1][k] == 1.0));

        let degenerate = BandPartition {
            boundaries: vec![0.0, 0.2, 0.2, 1.0],
            index_cuts: vec![0, 10, 10, 49],
        };
        let m = build_masks(&degenerate, 49);
        assert!(m[1].iter().all(|&v| v == 0.0));
        for k in 0..49 {
            assert_eq!(m.iter().map(|r| r[k]).sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn soft_masks_sharpen_to_hard_masks() {
        let theta = [-0.9, 0.35, 1.7];
        let hard = build_masks(&compute_partition(&theta, 49), 49);
        let soft = soft_masks(&theta, 49, 1e-4);
        for (h, s) in hard.iter().zip(&soft) {
            for (a, b) in h.iter().zip(s) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gate_input_examples() {
        let single = Spectrum {
            bins: vec![c(3.0, 4.0), c(0.0, 0.0), c(1.0, 0.0)],
            origin_length: 4,
        };
        assert_eq!(gate_input(&[single]), vec![5.0, 0.0, 1.0]);

        let a = Spectrum {
            bins: vec![c(2.0, 0.0), c(0.0, 0.0)],
            origin_length: 2,
        };
        let b = Spectrum {
            bins: vec![c(0.0, 4.0), c(-6.0, 0.0)],
            origin_length: 2,
        };
        assert_eq!(gate_input(&[a, b]), vec![3.0, 3.0]);
        assert_eq!(gate_input(&[Spectrum::zeros(6)]), vec![0.0; 4]);
    }

    #[test]
    fn gate_score_examples() {
        let mut blk = block(8, 3, MaskMode::Hard, GateMode::Gated);
        blk.gate_weights.fill(0.0);
        blk.gate_bias.fill(0.0);
        let s = blk.gate_scores(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]).unwrap();
        assert!(s.row(0).iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));

        let w = softmax(&[2f64.ln(), 0.0]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);

        assert!(blk.gate_scores(&[vec![1.0; 3]]).is_err());
    }

    #[test]
    fn single_expert_is_identity() {
        let blk = block(16, 1, MaskMode::default(), GateMode::Gated);
        let data: Vec<f64> = (0..32).map(|t| (t as f64 * 0.7).sin() * 3.0 - 0.2).collect();
        let x = TimeSeriesBatch::new(1, 2, 16, data).unwrap();
        for training in [true, false] {
            let (y, gates) = blk.forward(&x, training).unwrap();
            assert_eq!(gates.row(0), &[1.0]);
            for (a, b) in y.as_slice().iter().zip(x.as_slice()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    /// Per-bin oracle: scale each bin by Σ_i w_i M_i[k] and invert with the
    /// full-spectrum inverse DFT written out directly.
    fn band_oracle(x: &[f64], scale: &[f64]) -> Vec<f64> {
        let n = x.len();
        let half: Vec<Complex64> = (0..n / 2 + 1)
            .map(|k| {
                let z: Complex64 = x
                    .iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                        c(v * a.cos(), v * a.sin())
                    })
                    .sum();
                z * scale[k]
            })
            .collect();
        (0..n)
            .map(|t| {
                (0..n)
                    .map(|k| {
                        let z = if k < half.len() { half[k] } else { half[n - k].conj() };
                        let a = 2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                        (z * c(a.cos(), a.sin())).re
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .collect()
    }

    #[test]
    fn uniform_gates_match_per_bin_oracle() {
        let mut blk = block(20, 3, MaskMode::Hard, GateMode::Gated);
        blk.gate_weights.fill(0.0);
        blk.gate_bias.fill(0.0);
        let x: Vec<f64> = (0..20).map(|t| ((t * t) % 7) as f64 - 3.0).collect();
        let batch = TimeSeriesBatch::new(1, 1, 20, x.clone()).unwrap();
        let (y, _) = blk.forward(&batch, false).unwrap();
        let masks = build_masks(&blk.partition(), 11);
        let scale: Vec<f64> = (0..11)
            .map(|k| masks.iter().map(|m| m[k] / 3.0).sum())
            .collect();
        let expected = band_oracle(&x, &scale);
        for (a, b) in y.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
        // Hard masks partition the spectrum, so uniform gates scale by 1/N.
        for (a, b) in y.as_slice().iter().zip(&x) {
            assert!((a - b / 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn one_hot_gate_is_band_pass() {
        let mut blk = block(24, 2, MaskMode::Hard, GateMode::Fixed);
        blk.fixed_logits = vec![800.0, 0.0];
        let x: Vec<f64> = (0..24)
            .map(|t| (0.3 * t as f64).sin() + (2.5 * t as f64).cos())
            .collect();
        let batch = TimeSeriesBatch::new(1, 1, 24, x.clone()).unwrap();
        let (y, g) = blk.forward(&batch, false).unwrap();
        assert_eq!(g.row(0), &[1.0, 0.0]);
        let masks = build_masks(&blk.partition(), 13);
        let expected = band_oracle(&x, &masks[0]);
        for (a, b) in y.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn hard_masks_give_zero_theta_gradient() {
        let blk = block(16, 3, MaskMode::Hard, GateMode::Gated);
        let x: Vec<f64> = (0..16).map(|t| (t as f64).sqrt()).collect();
        let (_, cache) = blk.forward_sample(&x, 1, true).unwrap();
        let mut grads = blk.zeros_like();
        blk.backward_sample(&cache, &[1.0; 16], &mut grads).unwrap();
        assert!(grads.theta.iter().all(|&g| g == 0.0));
        assert!(grads.gate_bias.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn gate_bias_gradient_sums_to_zero() {
        let blk = block(16, 4, MaskMode::default(), GateMode::Gated);
        let x: Vec<f64> = (0..32).map(|t| (t as f64 * 0.4).cos() + 0.1 * t as f64).collect();
        let (_, cache) = blk.forward_sample(&x, 2, true).unwrap();
        let mut grads = blk.zeros_like();
        let g: Vec<f64> = (0..32).map(|t| ((t * 5) % 3) as f64 - 1.0).collect();
        blk.backward_sample(&cache, &g, &mut grads).unwrap();
        assert!(grads.gate_bias.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn soft_mask_gradient_matches_finite_differences() {
        let mut blk = block(18, 3, MaskMode::Soft { temperature: 0.1 }, GateMode::Gated);
        blk.theta = vec![-0.4, 0.9];
        let x: Vec<f64> = (0..36).map(|t| (t as f64 * 0.9).sin() + (t as f64 * 0.13).cos()).collect();
        let g: Vec<f64> = (0..36).map(|t| ((t * 7) % 5) as f64 * 0.3 - 0.6).collect();
        let loss = |b: &MoeBlock| -> f64 {
            let (y, _) = b.forward_sample(&x, 2, true).unwrap();
            y.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = blk.forward_sample(&x, 2, true).unwrap();
        let mut grads = blk.zeros_like();
        blk.backward_sample(&cache, &g, &mut grads).unwrap();

        let base = blk.flatten();
        let an = grads.flatten();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = blk.clone();
            let mut v = base.clone();
            v[i] += h;
            p.load_flat(&v);
            let lp = loss(&p);
            v[i] -= 2.0 * h;
            p.load_flat(&v);
            let lm = loss(&p);
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - an[i]).abs() / fd.abs().max(an[i].abs()).max(1e-7);
            assert!(err < 1e-4 || (fd - an[i]).abs() < 1e-7, "param {i}: fd {fd} vs {}", an[i]);
        }
    }

    #[test]
    fn relabeling_experts_preserves_output() {
        let blk = block(20, 3, MaskMode::Hard, GateMode::Gated);
        let x: Vec<f64> = (0..20).map(|t| (t as f64 * 1.3).sin()).collect();
        let batch = TimeSeriesBatch::new(1, 1, 20, x).unwrap();
        let (y, _) = blk.forward(&batch, false).unwrap();

        // Reverse the logits. The sorted bands are unchanged, so gate columns
        // stay attached to the same bands.
        let mut swapped = blk.clone();
        swapped.theta.reverse();
        let (y2, _) = swapped.forward(&batch, false).unwrap();
        assert_eq!(y, y2);
    }

    proptest! {
        #[test]
        fn masks_partition_unity(
            theta in prop::collection::vec(-6.0f64..6.0, 0..9),
            bins in 2usize..80,
        ) {
            let hard = build_masks(&compute_partition(&theta, bins), bins);
            prop_assert_eq!(hard.len(), theta.len() + 1);
            for k in 0..bins {
                prop_assert_eq!(hard.iter().map(|m| m[k]).sum::<f64>(), 1.0);
            }
            let soft = soft_masks(&theta, bins, 0.02);
            for k in 0..bins {
                let s: f64 = soft.iter().map(|m| m[k]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn gate_rows_on_simplex(g in prop::collection::vec(0.0f64..50.0, 9), seed in 0u64..1000) {
            let blk = MoeBlock::new(16, 4, MaskMode::Hard, GateMode::Gated, &mut substream(seed, "g", &[])).unwrap();
            let w = blk.gate_row(&g).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn output_energy_bounded_by_largest_weight(
            x in prop::collection::vec(-5.0f64..5.0, 24),
            seed in 0u64..1000,
        ) {
            let blk = MoeBlock::new(24, 3, MaskMode::Hard, GateMode::Gated, &mut substream(seed, "e", &[])).unwrap();
            let batch = TimeSeriesBatch::new(1, 1, 24, x.clone()).unwrap();
            let (y, gates) = blk.forward(&batch, false).unwrap();
            let wmax = gates.row(0).iter().copied().fold(0.0, f64::max);
            let ey = spectral::rfft(y.as_slice()).unwrap();
            let ex = spectral::rfft(&x).unwrap();
            let norm = |s: &Spectrum| s.bins.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            prop_assert!(norm(&ey) <= wmax * norm(&ex) + 1e-9);
        }
    }
}
