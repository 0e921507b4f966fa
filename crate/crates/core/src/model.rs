//! Full forecasting models: instance normalization, optional frequency
//! mixture, and either the residual predictor stack or a linear head.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{GateMode, MaskMode, MoeBlock, MoeCache};
use crate::normalization::{normalize_series, DEFAULT_EPS};
use crate::params::{pairwise_sum, ParamSlice, ParamSliceMut, Parameterized};
use crate::predictor::{PredictorStack, StackCache, DEFAULT_DROPOUT};
use crate::rng::{substream, Rng};
use crate::series::TimeSeriesBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ModelKind {
    #[default]
    #[serde(rename = "freqmoe")]
    FreqMoe,
    #[serde(rename = "dlinear")]
    DLinear,
    #[serde(rename = "dlinear+moe")]
    DLinearMoe,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::FreqMoe => "freqmoe",
            ModelKind::DLinear => "dlinear",
            ModelKind::DLinearMoe => "dlinear+moe",
        })
    }
}

/// Architecture of a model; everything needed to rebuild its parameter
/// containers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub lookback: usize,
    pub horizon: usize,
    /// Number of frequency experts; 0 bypasses the mixture entirely.
    pub experts: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub mask_mode: MaskMode,
    pub gate_mode: GateMode,
    pub eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::FreqMoe,
            lookback: 96,
            horizon: 96,
            experts: 3,
            blocks: 1,
            dropout: DEFAULT_DROPOUT,
            mask_mode: MaskMode::default(),
            gate_mode: GateMode::Gated,
            eps: DEFAULT_EPS,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lookback < 2 {
            return Err(Error::config("lookback", "must be at least 2"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if let MaskMode::Soft { temperature } = self.mask_mode {
            if !(temperature > 0.0) {
                return Err(Error::config("mask_mode.temperature", "must be positive"));
            }
        }
        match self.kind {
            ModelKind::FreqMoe if self.blocks == 0 => {
                Err(Error::config("blocks", "freqmoe needs at least one block"))
            }
            ModelKind::DLinearMoe if self.experts == 0 => {
                Err(Error::config("experts", "dlinear+moe needs at least one expert"))
            }
            _ => Ok(()),
        }
    }

    fn has_moe(&self) -> bool {
        match self.kind {
            ModelKind::FreqMoe | ModelKind::DLinearMoe => self.experts > 0,
            ModelKind::DLinear => false,
        }
    }
}

/// One real linear map from `lookback` to `horizon` steps, shared by all
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let bound = 1.0 / (in_dim as f64).sqrt();
        LinearHead {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            bias: (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.weight[j * self.in_dim..(j + 1) * self.in_dim];
            *o = self.bias[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut LinearHead, grad_in: &mut [f64]) {
        for (j, g) in grad_out.iter().enumerate() {
            grads.bias[j] += g;
            let span = j * self.in_dim..(j + 1) * self.in_dim;
            let row = &self.weight[span.clone()];
            let grow = &mut grads.weight[span];
            for (((w, gw), v), gi) in row.iter().zip(grow).zip(x).zip(grad_in.iter_mut()) {
                *gw += g * v;
                *gi += g * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    pub moe: Option<MoeBlock>,
    pub stack: Option<PredictorStack>,
    pub head: Option<LinearHead>,
}

/// Forward activations of one window.
pub(crate) struct SampleTrace {
    channels: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    /// Normalized-space forecast, channel-major `C × p`.
    forecast: Vec<f64>,
    moe: Option<MoeCache>,
    mixed: Vec<f64>,
    stack: Option<StackCache>,
}

impl SampleTrace {
    pub(crate) fn gate_weights(&self) -> Option<&[f64]> {
        self.moe.as_ref().map(MoeCache::weights)
    }
}

/// Loss and flat parameter gradient for one minibatch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: Vec<f64>,
}

impl Model {
    /// Builds and initializes a model. Initialization draws from the `init`
    /// substream of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = substream(seed, "init", &[]);
        let moe = if spec.has_moe() {
            Some(MoeBlock::new(
                spec.lookback,
                spec.experts,
                spec.mask_mode,
                spec.gate_mode,
                &mut rng,
            )?)
        } else {
            None
        };
        let (stack, head) = match spec.kind {
            ModelKind::FreqMoe => (
                Some(PredictorStack::new(
                    spec.lookback,
                    spec.horizon,
                    spec.blocks,
                    spec.dropout,
                    &mut rng,
                )?),
                None,
            ),
            ModelKind::DLinear | ModelKind::DLinearMoe => {
                (None, Some(LinearHead::new(spec.lookback, spec.horizon, &mut rng)))
            }
        };
        Ok(Model {
            spec,
            moe,
            stack,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// Forward pass on one raw window laid out channel-major (`C × s`).
    pub(crate) fn trace_sample(
        &self,
        input: &[f64],
        channels: usize,
        training: bool,
        rng: &mut Rng,
    ) -> Result<SampleTrace> {
        let s = self.spec.lookback;
        let p = self.spec.horizon;
        if channels == 0 || input.len() != channels * s {
            return Err(Error::invalid(format!(
                "window of {} values does not hold {channels} channels of length {s}",
                input.len()
            )));
        }
        let mut normed = input.to_vec();
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for c in 0..channels {
            let (m, sd) = normalize_series(&mut normed[c * s..(c + 1) * s], self.spec.eps);
            mean.push(m);
            std.push(sd);
        }
        let (mixed, moe) = match &self.moe {
            Some(moe) => {
                let (y, cache) = moe.forward_sample(&normed, channels, training)?;
                (y, Some(cache))
            }
            None => (normed, None),
        };
        let mut forecast = vec![0.0; channels * p];
        let stack = match (&self.stack, &self.head) {
            (Some(stack), _) => {
                let (f, _, _, cache) = stack.forward_sample(&mixed, channels, training, rng)?;
                forecast = f;
                Some(cache)
            }
            (None, Some(head)) => {
                for c in 0..channels {
                    head.forward_into(&mixed[c * s..(c + 1) * s], &mut forecast[c * p..(c + 1) * p]);
                }
                None
            }
            (None, None) => return Err(Error::Invariant("model has no prediction head".into())),
        };
        Ok(SampleTrace {
            channels,
            mean,
            std,
            forecast,
            moe,
            mixed,
            stack,
        })
    }

    /// Accumulates parameter gradients given `∂L/∂forecast` in normalized space.
    pub(crate) fn backward_sample(&self, trace: &SampleTrace, grad_forecast: &[f64], grads: &mut Model) -> Result<()> {
        let s = self.spec.lookback;
        let p = self.spec.horizon;
        let channels = trace.channels;
        let grad_mixed = match (&self.stack, &self.head) {
            (Some(stack), _) => {
                let cache = trace
                    .stack
                    .as_ref()
                    .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
                let g = grads.stack.as_mut().expect("gradient buffer mirrors model");
                stack.backward_sample(cache, grad_forecast, g)?
            }
            (None, Some(head)) => {
                let g = grads.head.as_mut().expect("gradient buffer mirrors model");
                let mut grad_in = vec![0.0; channels * s];
                for c in 0..channels {
                    head.backward(
                        &trace.mixed[c * s..(c + 1) * s],
                        &grad_forecast[c * p..(c + 1) * p],
                        g,
                        &mut grad_in[c * s..(c + 1) * s],
                    );
                }
                grad_in
            }
            (None, None) => return Err(Error::Invariant("model has no prediction head".into())),
        };
        if let (Some(moe), Some(cache)) = (&self.moe, &trace.moe) {
            let g = grads.moe.as_mut().expect("gradient buffer mirrors model");
            moe.backward_sample(cache, &grad_mixed, g)?;
        }
        Ok(())
    }

    /// Denormalized forecasts for a batch of raw windows (evaluation mode).
    pub fn predict(&self, input: &TimeSeriesBatch) -> Result<TimeSeriesBatch> {
        let (b, c, l) = input.shape();
        if l != self.spec.lookback {
            return Err(Error::invalid(format!(
                "input length {l} does not match lookback {}",
                self.spec.lookback
            )));
        }
        let p = self.spec.horizon;
        let rows: Vec<Vec<f64>> = (0..b)
            .into_par_iter()
            .map(|bi| self.predict_window(input.sample(bi), c))
            .collect::<Result<_>>()?;
        TimeSeriesBatch::new(b, c, p, rows.concat())
    }

    /// Denormalized forecast for one raw window (`C × s`, channel-major).
    pub fn predict_window(&self, input: &[f64], channels: usize) -> Result<Vec<f64>> {
        let p = self.spec.horizon;
        // Evaluation draws no randomness; the generator is never advanced.
        let mut rng = substream(0, "eval", &[]);
        let trace = self.trace_sample(input, channels, false, &mut rng)?;
        let mut out = trace.forecast;
        for c in 0..channels {
            out[c * p..(c + 1) * p]
                .iter_mut()
                .for_each(|v| *v = *v * trace.std[c] + trace.mean[c]);
        }
        Ok(out)
    }

    /// Gate weights of one raw window in evaluation mode, if the model has a
    /// mixture.
    pub fn gate_weights(&self, input: &[f64], channels: usize) -> Result<Option<Vec<f64>>> {
        let mut rng = substream(0, "eval", &[]);
        let trace = self.trace_sample(input, channels, false, &mut rng)?;
        Ok(trace.gate_weights().map(<[f64]>::to_vec))
    }

    /// Mean squared error over the forecast horizon in instance-normalized
    /// space, and its gradient with respect to every parameter.
    ///
    /// `rngs` supplies one dropout generator per window. Per-window
    /// gradients are computed in parallel and summed pairwise in window
    /// order, so the result does not depend on thread scheduling.
    pub fn batch_gradient(
        &self,
        windows: &[(&[f64], &[f64])],
        channels: usize,
        training: bool,
        rngs: Vec<Rng>,
    ) -> Result<BatchGradient> {
        if windows.is_empty() {
            return Err(Error::invalid("empty minibatch"));
        }
        if rngs.len() != windows.len() {
            return Err(Error::invalid("one generator per window is required"));
        }
        let p = self.spec.horizon;
        let count = (windows.len() * channels * p) as f64;
        let parts: Vec<(f64, Vec<f64>)> = windows
            .par_iter()
            .zip(rngs.into_par_iter())
            .map(|(&(input, target), mut rng)| -> Result<(f64, Vec<f64>)> {
                if target.len() != channels * p {
                    return Err(Error::invalid("target does not match horizon"));
                }
                let trace = self.trace_sample(input, channels, training, &mut rng)?;
                let mut loss = 0.0;
                let mut grad = vec![0.0; channels * p];
                for c in 0..channels {
                    let (m, sd) = (trace.mean[c], trace.std[c]);
                    for t in 0..p {
                        let i = c * p + t;
                        let err = trace.forecast[i] - (target[i] - m) / sd;
                        loss += err * err;
                        grad[i] = 2.0 * err / count;
                    }
                }
                let mut grads = self.zeros_like();
                self.backward_sample(&trace, &grad, &mut grads)?;
                Ok((loss, grads.flatten()))
            })
            .collect::<Result<_>>()?;
        let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / count;
        let grads = pairwise_sum(parts.into_iter().map(|(_, g)| g).collect())
            .ok_or_else(|| Error::Invariant("no gradients produced".into()))?;
        Ok(BatchGradient { loss, grads })
    }

    /// Normalized-space horizon MSE without gradients.
    pub fn batch_loss(
        &self,
        windows: &[(&[f64], &[f64])],
        channels: usize,
        training: bool,
        rngs: Vec<Rng>,
    ) -> Result<f64> {
        let p = self.spec.horizon;
        let count = (windows.len() * channels * p) as f64;
        let total: Vec<f64> = windows
            .par_iter()
            .zip(rngs.into_par_iter())
            .map(|(&(input, target), mut rng)| -> Result<f64> {
                let trace = self.trace_sample(input, channels, training, &mut rng)?;
                let mut loss = 0.0;
                for c in 0..channels {
                    let (m, sd) = (trace.mean[c], trace.std[c]);
                    for t in 0..p {
                        let i = c * p + t;
                        let err = trace.forecast[i] - (target[i] - m) / sd;
                        loss += err * err;
                    }
                }
                Ok(loss)
            })
            .collect::<Result<_>>()?;
        Ok(total.iter().sum::<f64>() / count)
    }
}

impl Parameterized for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], ParamSlice<'_>)) {
        if let Some(moe) = &self.moe {
            moe.visit(f);
        }
        if let Some(stack) = &self.stack {
            stack.visit(f);
        }
        if let Some(head) = &self.head {
            f("linear.weight", &[head.out_dim, head.in_dim], ParamSlice::Real(&head.weight));
            f("linear.bias", &[head.out_dim], ParamSlice::Real(&head.bias));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamSliceMut<'_>)) {
        if let Some(moe) = &mut self.moe {
            moe.visit_mut(f);
        }
        if let Some(stack) = &mut self.stack {
            stack.visit_mut(f);
        }
        if let Some(head) = &mut self.head {
            f("linear.weight", ParamSliceMut::Real(&mut head.weight));
            f("linear.bias", ParamSliceMut::Real(&mut head.bias));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ModelKind, experts: usize) -> Model {
        let spec = ModelSpec {
            kind,
            lookback: 16,
            horizon: 8,
            experts,
            blocks: 2,
            ..ModelSpec::default()
        };
        Model::new(spec, 1).unwrap()
    }

    #[test]
    fn manifest_names_follow_composition() {
        let names = |m: &Model| m.manifest().into_iter().map(|e| e.name).collect::<Vec<_>>();
        let fm = names(&small(ModelKind::FreqMoe, 2));
        assert_eq!(fm[..3], ["moe.theta", "moe.gate.weight", "moe.gate.bias"]);
        assert!(fm.contains(&"blocks.1.up2.bias".to_string()));

        let plugin = names(&small(ModelKind::DLinearMoe, 3));
        assert!(plugin.contains(&"moe.gate.weight".to_string()));
        assert!(plugin.contains(&"linear.weight".to_string()));

        let plain = names(&small(ModelKind::DLinear, 0));
        assert_eq!(plain, ["linear.weight", "linear.bias"]);

        let no_moe = names(&small(ModelKind::FreqMoe, 0));
        assert!(no_moe.iter().all(|n| n.starts_with("blocks.")));
    }

    #[test]
    fn forecast_length_is_horizon() {
        let m = small(ModelKind::FreqMoe, 3);
        let x = TimeSeriesBatch::new(3, 2, 16, (0..96).map(|v| (v as f64 * 0.3).sin()).collect()).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), (3, 2, 8));
        assert!(m.predict(&TimeSeriesBatch::zeros(1, 1, 15)).is_err());
    }

    #[test]
    fn perfect_targets_give_zero_gradient() {
        let m = small(ModelKind::FreqMoe, 2);
        let input: Vec<f64> = (0..32).map(|v| (v as f64 * 0.4).cos() * 2.0 + 1.0).collect();
        let target = m.predict_window(&input, 2).unwrap();
        let g = m
            .batch_gradient(&[(&input, &target)], 2, false, vec![substream(0, "d", &[])])
            .unwrap();
        assert!(g.loss < 1e-24);
        assert!(g.grads.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dlinear_moe_gradients_match_finite_differences() {
        let m = small(ModelKind::DLinearMoe, 3);
        let input: Vec<f64> = (0..32).map(|v| (v as f64 * 0.7).sin() + 0.05 * v as f64).collect();
        let target: Vec<f64> = (0..16).map(|v| (v as f64 * 0.5).cos()).collect();
        let windows = [(&input[..], &target[..])];
        let g = m.batch_gradient(&windows, 2, true, vec![substream(0, "d", &[])]).unwrap();
        let base = m.flatten();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut mm = m.clone();
            let mut v = base.clone();
            v[i] += h;
            mm.load_flat(&v);
            let lp = mm.batch_loss(&windows, 2, true, vec![substream(0, "d", &[])]).unwrap();
            v[i] -= 2.0 * h;
            mm.load_flat(&v);
            let lm = mm.batch_loss(&windows, 2, true, vec![substream(0, "d", &[])]).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let diff = (fd - g.grads[i]).abs();
            assert!(diff <= 1e-7f64.max(1e-4 * fd.abs().max(g.grads[i].abs())), "param {i}: {fd} vs {}", g.grads[i]);
        }
    }
}
