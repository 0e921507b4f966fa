//! Residual-stacked frequency-domain prediction blocks.
//!
//! Each block lifts the `s`-step residual to the spectrum of an `s + p` step
//! series with two complex linear layers, returns to the time domain, and
//! rescales by `(s + p) / s` to undo the length change in the inverse
//! transform. The first `s` outputs reconstruct the block's input and are
//! subtracted to form the next residual; the last `p` are summed across
//! blocks into the forecast.

use num_complex::Complex64;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::params::{ParamSlice, ParamSliceMut, Parameterized};
use crate::rng::Rng;
use crate::series::TimeSeriesBatch;
use crate::spectral::{self, DftPlan};

pub const DEFAULT_DROPOUT: f64 = 0.3;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexLinear {
    pub out_dim: usize,
    pub in_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weights: Vec<Complex64>,
    pub bias: Vec<Complex64>,
}

impl ComplexLinear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        ComplexLinear {
            out_dim,
            in_dim,
            weights: vec![ZERO; out_dim * in_dim],
            bias: vec![ZERO; out_dim],
        }
    }

    /// Real and imaginary parts uniform in `±1/sqrt(in_dim)`.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || Complex64::new(rng.random_range(-bound..bound), rng.random_range(-bound..bound));
        let weights = (0..out_dim * in_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        ComplexLinear {
            out_dim,
            in_dim,
            weights,
            bias,
        }
    }

    pub fn apply(&self, z: &[Complex64]) -> Result<Vec<Complex64>> {
        if z.len() != self.in_dim {
            return Err(Error::invalid(format!(
                "complex linear expects {} inputs, got {}",
                self.in_dim,
                z.len()
            )));
        }
        let mut out = vec![ZERO; self.out_dim];
        self.apply_into(z, &mut out);
        Ok(out)
    }

    fn apply_into(&self, z: &[Complex64], out: &mut [Complex64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.weights[j * self.in_dim..(j + 1) * self.in_dim];
            let mut re = self.bias[j].re;
            let mut im = self.bias[j].im;
            for (w, x) in row.iter().zip(z) {
                re += w.re * x.re - w.im * x.im;
                im += w.re * x.im + w.im * x.re;
            }
            *o = Complex64::new(re, im);
        }
    }

    /// Given `P = ∂L/∂Re out + i·∂L/∂Im out`, accumulates weight and bias
    /// partials into `grads` and writes the same quantity for the input.
    fn backward_into(
        &self,
        input: &[Complex64],
        grad_out: &[Complex64],
        grads: &mut ComplexLinear,
        grad_in: &mut [Complex64],
    ) {
        grad_in.fill(ZERO);
        for (j, p) in grad_out.iter().enumerate() {
            if *p == ZERO {
                continue;
            }
            grads.bias[j] += p;
            let span = j * self.in_dim..(j + 1) * self.in_dim;
            let row = &self.weights[span.clone()];
            let grow = &mut grads.weights[span];
            for (((w, g), x), gi) in row.iter().zip(grow).zip(input).zip(grad_in.iter_mut()) {
                // ∂L/∂W = P·conj(x); ∂L/∂x = conj(W)·P
                g.re += p.re * x.re + p.im * x.im;
                g.im += p.im * x.re - p.re * x.im;
                gi.re += w.re * p.re + w.im * p.im;
                gi.im += w.re * p.im - w.im * p.re;
            }
        }
    }
}

/// Split activation `ReLU(Re z) + i·ReLU(Im z)`.
pub fn complex_relu(z: &[Complex64]) -> Vec<Complex64> {
    z.iter()
        .map(|v| Complex64::new(v.re.max(0.0), v.im.max(0.0)))
        .collect()
}

/// Drops whole complex entries with probability `rate` and rescales the
/// survivors by `1/(1 − rate)`. Identity outside training.
pub fn complex_dropout(z: &[Complex64], rate: f64, training: bool, rng: &mut Rng) -> Vec<Complex64> {
    if !training || rate == 0.0 {
        return z.to_vec();
    }
    let keep = 1.0 / (1.0 - rate);
    z.iter()
        .map(|v| if rng.random::<f64>() < rate { ZERO } else { v * keep })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBlock {
    pub up1: ComplexLinear,
    pub up2: ComplexLinear,
    pub dropout: f64,
    lookback: usize,
    horizon: usize,
    activation: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    input_spec: Vec<Complex64>,
    hidden_pre: Vec<Complex64>,
    /// Dropout multiplier per hidden entry (0 or 1/(1−rate)); empty when
    /// dropout was inactive.
    keep: Vec<f64>,
    hidden: Vec<Complex64>,
}

impl PredictionBlock {
    pub fn new(lookback: usize, horizon: usize, dropout: f64, rng: &mut Rng) -> Result<Self> {
        check_shapes(lookback, horizon, dropout)?;
        let f_in = spectral::bin_count(lookback);
        let f_out = spectral::bin_count(lookback + horizon);
        let up1 = ComplexLinear::init(f_out, f_in, rng);
        let up2 = ComplexLinear::init(f_out, f_out, rng);
        Ok(PredictionBlock {
            up1,
            up2,
            dropout,
            lookback,
            horizon,
            activation: true,
        })
    }

    pub fn zeros(lookback: usize, horizon: usize, dropout: f64) -> Result<Self> {
        check_shapes(lookback, horizon, dropout)?;
        let f_in = spectral::bin_count(lookback);
        let f_out = spectral::bin_count(lookback + horizon);
        Ok(PredictionBlock {
            up1: ComplexLinear::zeros(f_out, f_in),
            up2: ComplexLinear::zeros(f_out, f_out),
            dropout,
            lookback,
            horizon,
            activation: true,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// Replaces the complex ReLU with the identity, making the block affine.
    pub fn without_activation(mut self) -> Self {
        self.activation = false;
        self
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn output_len(&self) -> usize {
        self.lookback + self.horizon
    }

    /// Amplitude correction `s_out / s` for the longer inverse transform.
    pub fn amplitude_scale(&self) -> f64 {
        self.output_len() as f64 / self.lookback as f64
    }

    pub fn forward(&self, r: &TimeSeriesBatch, training: bool, rng: &mut Rng) -> Result<TimeSeriesBatch> {
        let (b, c, l) = r.shape();
        if l != self.lookback {
            return Err(Error::invalid(format!(
                "block expects length {}, got {l}",
                self.lookback
            )));
        }
        let mut out = TimeSeriesBatch::zeros(b, c, self.output_len());
        for bi in 0..b {
            let (y, _) = self.forward_sample(r.sample(bi), c, training, rng)?;
            out.sample_mut(bi).copy_from_slice(&y);
        }
        Ok(out)
    }

    pub(crate) fn forward_sample(
        &self,
        r: &[f64],
        channels: usize,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<BlockCache>)> {
        let s = self.lookback;
        let s_out = self.output_len();
        let f_in = self.up1.in_dim;
        let f_out = self.up1.out_dim;
        let plan_in = DftPlan::cached(s)?;
        let plan_out = DftPlan::cached(s_out)?;
        let scale = self.amplitude_scale();
        let use_dropout = training && self.dropout > 0.0;
        let keep_scale = 1.0 / (1.0 - self.dropout);

        let mut y = vec![0.0; channels * s_out];
        let mut caches = Vec::with_capacity(channels);
        let mut out_spec = vec![ZERO; f_out];
        for c in 0..channels {
            let mut input_spec = vec![ZERO; f_in];
            plan_in.forward_into(&r[c * s..(c + 1) * s], &mut input_spec);
            let mut hidden_pre = vec![ZERO; f_out];
            self.up1.apply_into(&input_spec, &mut hidden_pre);
            let mut hidden = if self.activation {
                complex_relu(&hidden_pre)
            } else {
                hidden_pre.clone()
            };
            let keep = if use_dropout {
                let keep: Vec<f64> = (0..f_out)
                    .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep_scale })
                    .collect();
                hidden.iter_mut().zip(&keep).for_each(|(h, k)| *h *= k);
                keep
            } else {
                Vec::new()
            };
            self.up2.apply_into(&hidden, &mut out_spec);
            let yc = &mut y[c * s_out..(c + 1) * s_out];
            plan_out.inverse_into(&out_spec, yc);
            yc.iter_mut().for_each(|v| *v *= scale);
            caches.push(BlockCache {
                input_spec,
                hidden_pre,
                keep,
                hidden,
            });
        }
        Ok((y, caches))
    }

    /// Accumulates parameter gradients and returns `∂L/∂r` given `∂L/∂y`.
    pub(crate) fn backward_sample(
        &self,
        caches: &[BlockCache],
        grad_y: &[f64],
        grads: &mut PredictionBlock,
    ) -> Result<Vec<f64>> {
        let s = self.lookback;
        let s_out = self.output_len();
        let f_in = self.up1.in_dim;
        let f_out = self.up1.out_dim;
        let plan_in = DftPlan::cached(s)?;
        let plan_out = DftPlan::cached(s_out)?;
        let scale = self.amplitude_scale();

        let mut grad_r = vec![0.0; caches.len() * s];
        let mut scaled = vec![0.0; s_out];
        let mut g_out_spec = vec![ZERO; f_out];
        let mut g_hidden = vec![ZERO; f_out];
        let mut g_in_spec = vec![ZERO; f_in];
        for (c, cache) in caches.iter().enumerate() {
            scaled
                .iter_mut()
                .zip(&grad_y[c * s_out..(c + 1) * s_out])
                .for_each(|(a, g)| *a = g * scale);
            plan_out.inverse_pullback_into(&scaled, &mut g_out_spec);
            self.up2
                .backward_into(&cache.hidden, &g_out_spec, &mut grads.up2, &mut g_hidden);
            if !cache.keep.is_empty() {
                g_hidden.iter_mut().zip(&cache.keep).for_each(|(g, k)| *g *= k);
            }
            if self.activation {
                for (g, h) in g_hidden.iter_mut().zip(&cache.hidden_pre) {
                    if h.re <= 0.0 {
                        g.re = 0.0;
                    }
                    if h.im <= 0.0 {
                        g.im = 0.0;
                    }
                }
            }
            self.up1
                .backward_into(&cache.input_spec, &g_hidden, &mut grads.up1, &mut g_in_spec);
            plan_in.forward_pullback_into(&g_in_spec, &mut grad_r[c * s..(c + 1) * s]);
        }
        Ok(grad_r)
    }

    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], ParamSlice<'_>)) {
        for (name, layer) in [("up1", &self.up1), ("up2", &self.up2)] {
            f(
                &format!("{prefix}.{name}.weight"),
                &[layer.out_dim, layer.in_dim],
                ParamSlice::Complex(&layer.weights),
            );
            f(
                &format!("{prefix}.{name}.bias"),
                &[layer.out_dim],
                ParamSlice::Complex(&layer.bias),
            );
        }
    }

    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamSliceMut<'_>)) {
        for (name, layer) in [("up1", &mut self.up1), ("up2", &mut self.up2)] {
            f(
                &format!("{prefix}.{name}.weight"),
                ParamSliceMut::Complex(&mut layer.weights),
            );
            f(
                &format!("{prefix}.{name}.bias"),
                ParamSliceMut::Complex(&mut layer.bias),
            );
        }
    }
}

impl Parameterized for PredictionBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], ParamSlice<'_>)) {
        self.visit_prefixed("block", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamSliceMut<'_>)) {
        self.visit_prefixed_mut("block", f);
    }
}

fn check_shapes(lookback: usize, horizon: usize, dropout: f64) -> Result<()> {
    if lookback < 2 {
        return Err(Error::invalid(format!("lookback must be at least 2, got {lookback}")));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon must be positive"));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::invalid(format!("dropout must be in [0, 1), got {dropout}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorStack {
    pub blocks: Vec<PredictionBlock>,
    lookback: usize,
    horizon: usize,
}

/// Output of a stack forward pass for one batch.
#[derive(Debug, Clone)]
pub struct StackOutput {
    pub forecast: TimeSeriesBatch,
    /// Reconstruction (first `s` outputs) of each block, in order.
    pub reconstructions: Vec<TimeSeriesBatch>,
    /// Residual left after the last block.
    pub residual: TimeSeriesBatch,
}

pub(crate) struct StackCache {
    blocks: Vec<Vec<BlockCache>>,
}

impl PredictorStack {
    pub fn new(lookback: usize, horizon: usize, n_blocks: usize, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::invalid("a predictor stack needs at least one block"));
        }
        let blocks = (0..n_blocks)
            .map(|_| PredictionBlock::new(lookback, horizon, dropout, rng))
            .collect::<Result<_>>()?;
        Ok(PredictorStack {
            blocks,
            lookback,
            horizon,
        })
    }

    pub fn from_blocks(blocks: Vec<PredictionBlock>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::invalid("a predictor stack needs at least one block"))?;
        let (lookback, horizon) = (first.lookback, first.horizon);
        if blocks.iter().any(|b| b.lookback != lookback || b.horizon != horizon) {
            return Err(Error::invalid("all blocks must share lookback and horizon"));
        }
        Ok(PredictorStack {
            blocks,
            lookback,
            horizon,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn forward(&self, r0: &TimeSeriesBatch, training: bool, rng: &mut Rng) -> Result<StackOutput> {
        let (b, c, l) = r0.shape();
        if l != self.lookback {
            return Err(Error::invalid(format!(
                "stack expects length {}, got {l}",
                self.lookback
            )));
        }
        let mut forecast = TimeSeriesBatch::zeros(b, c, self.horizon);
        let mut reconstructions = vec![TimeSeriesBatch::zeros(b, c, l); self.blocks.len()];
        let mut residual = r0.clone();
        for bi in 0..b {
            let (f, recon, res, _) = self.forward_sample(r0.sample(bi), c, training, rng)?;
            forecast.sample_mut(bi).copy_from_slice(&f);
            for (dst, src) in reconstructions.iter_mut().zip(&recon) {
                dst.sample_mut(bi).copy_from_slice(src);
            }
            residual.sample_mut(bi).copy_from_slice(&res);
        }
        Ok(StackOutput {
            forecast,
            reconstructions,
            residual,
        })
    }

    /// Returns `(forecast, reconstructions, final residual, cache)` for one
    /// sample laid out channel-major.
    #[allow(clippy::type_complexity)]
    pub(crate) fn forward_sample(
        &self,
        r0: &[f64],
        channels: usize,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>, StackCache)> {
        let s = self.lookback;
        let p = self.horizon;
        let s_out = s + p;
        let mut residual = r0.to_vec();
        let mut forecast = vec![0.0; channels * p];
        let mut recons = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, cache) = blk.forward_sample(&residual, channels, training, rng)?;
            let mut recon = vec![0.0; channels * s];
            for c in 0..channels {
                let yc = &y[c * s_out..(c + 1) * s_out];
                recon[c * s..(c + 1) * s].copy_from_slice(&yc[..s]);
                forecast[c * p..(c + 1) * p]
                    .iter_mut()
                    .zip(&yc[s..])
                    .for_each(|(f, v)| *f += v);
            }
            residual.iter_mut().zip(&recon).for_each(|(r, v)| *r -= v);
            recons.push(recon);
            caches.push(cache);
        }
        Ok((forecast, recons, residual, StackCache { blocks: caches }))
    }

    /// Accumulates parameter gradients given `∂L/∂forecast`; returns `∂L/∂r0`.
    pub(crate) fn backward_sample(
        &self,
        cache: &StackCache,
        grad_forecast: &[f64],
        grads: &mut PredictorStack,
    ) -> Result<Vec<f64>> {
        let s = self.lookback;
        let p = self.horizon;
        let s_out = s + p;
        let channels = grad_forecast.len() / p;
        // Gradient w.r.t. the residual entering the block being processed.
        let mut grad_res = vec![0.0; channels * s];
        let mut grad_y = vec![0.0; channels * s_out];
        for (i, blk) in self.blocks.iter().enumerate().rev() {
            for c in 0..channels {
                let gy = &mut grad_y[c * s_out..(c + 1) * s_out];
                gy[..s]
                    .iter_mut()
                    .zip(&grad_res[c * s..(c + 1) * s])
                    .for_each(|(a, g)| *a = -g);
                gy[s..].copy_from_slice(&grad_forecast[c * p..(c + 1) * p]);
            }
            let through = blk.backward_sample(&cache.blocks[i], &grad_y, &mut grads.blocks[i])?;
            grad_res.iter_mut().zip(&through).for_each(|(a, b)| *a += b);
        }
        Ok(grad_res)
    }
}

impl Parameterized for PredictorStack {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], ParamSlice<'_>)) {
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit_prefixed(&format!("blocks.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamSliceMut<'_>)) {
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_prefixed_mut(&format!("blocks.{i}"), f);
        }
    }
}
