//! Forecast metrics, parameter/MAC accounting and gate-trace export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, ModelSpec};
use crate::moe::GateMode;
use crate::spectral::bin_count;

/// Ground-truth magnitudes at or below this are left out of MAPE.
pub const MAPE_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub rmse: f64,
    pub windows: usize,
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "dataset,horizon,seed,config_hash,windows,mse,mae,mape,rmse"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.horizon,
            self.seed,
            self.config_hash,
            self.windows,
            self.mse,
            self.mae,
            self.mape,
            self.rmse
        )
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, format!("{}\n{}\n", Self::csv_header(), self.csv_row()))
            .map_err(|e| Error::io(path, e))
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "dataset   {}", self.dataset)?;
        writeln!(f, "horizon   {}", self.horizon)?;
        writeln!(f, "windows   {}", self.windows)?;
        writeln!(f, "MSE       {:.6}", self.mse)?;
        writeln!(f, "MAE       {:.6}", self.mae)?;
        writeln!(f, "MAPE (%)  {:.4}  (|truth| > {MAPE_THRESHOLD:e})", self.mape)?;
        write!(f, "RMSE      {:.6}", self.rmse)
    }
}

/// Running sums for the metric set; merging is order-sensitive only in the
/// last bits of floating-point rounding.
#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    sq: f64,
    abs: f64,
    pct: f64,
    n: usize,
    n_pct: usize,
}

impl Sums {
    fn add(&mut self, pred: &[f64], truth: &[f64]) {
        for (p, t) in pred.iter().zip(truth) {
            let e = p - t;
            self.sq += e * e;
            self.abs += e.abs();
            self.n += 1;
            if t.abs() > MAPE_THRESHOLD {
                self.pct += (e / t).abs();
                self.n_pct += 1;
            }
        }
    }

    fn report(&self, windows: usize) -> MetricReport {
        let n = self.n.max(1) as f64;
        let mse = self.sq / n;
        MetricReport {
            mse,
            mae: self.abs / n,
            mape: if self.n_pct == 0 {
                0.0
            } else {
                100.0 * self.pct / self.n_pct as f64
            },
            rmse: mse.sqrt(),
            windows,
            dataset: String::new(),
            horizon: 0,
            seed: 0,
            config_hash: String::new(),
        }
    }
}

/// Mean squared error over all elements.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_same_len(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute error over all elements.
pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_same_len(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

fn check_same_len(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::invalid(format!(
            "prediction has {} values, target has {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("cannot score an empty prediction"));
    }
    Ok(())
}

/// Metric set for paired predictions and truths.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<MetricReport> {
    check_same_len(pred, truth)?;
    let mut s = Sums::default();
    s.add(pred, truth);
    Ok(s.report(1))
}

/// Denormalized-space metrics of `model` over every window, in window order.
pub fn evaluate(model: &Model, windows: &WindowSet) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    check_windows(model, windows)?;
    let per_window: Vec<Sums> = (0..windows.len())
        .into_par_iter()
        .map(|i| -> Result<Sums> {
            let (x, y) = windows.pair(i);
            let pred = model.predict_window(x, windows.channels)?;
            let mut s = Sums::default();
            s.add(&pred, y);
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let total = per_window.iter().fold(Sums::default(), |mut acc, s| {
        acc.sq += s.sq;
        acc.abs += s.abs;
        acc.pct += s.pct;
        acc.n += s.n;
        acc.n_pct += s.n_pct;
        acc
    });
    let mut report = total.report(windows.len());
    report.horizon = windows.horizon;
    Ok(report)
}

fn check_windows(model: &Model, windows: &WindowSet) -> Result<()> {
    let spec = model.spec();
    if windows.lookback != spec.lookback || windows.horizon != spec.horizon {
        return Err(Error::Compatibility(format!(
            "model is {}→{}, windows are {}→{}",
            spec.lookback, spec.horizon, windows.lookback, windows.horizon
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EfficiencyReport {
    /// Complex parameters counted once each.
    pub param_count: usize,
    /// Complex parameters counted as two reals.
    pub real_param_count: usize,
    pub channels: usize,
    /// Complex multiply-accumulates of the spectral linear layers (or real
    /// MACs of the linear head), all channels, one window.
    pub linear_macs: usize,
    /// Real MACs of the gate layer.
    pub gate_macs: usize,
    /// `0.5·L·log2(L)` complex MACs per transform, rounded to integers.
    pub fft_macs: usize,
    pub convention: String,
}

impl EfficiencyReport {
    pub fn total_macs(&self) -> usize {
        self.linear_macs + self.gate_macs + self.fft_macs
    }

    /// Real floating-point operations of the spectral linear layers: four real
    /// MACs per complex MAC and two operations per real MAC.
    pub fn linear_flops(&self) -> usize {
        8 * self.linear_macs
    }
}

fn with_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl std::fmt::Display for EfficiencyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{} complex-counted parameters ({:.1}K)",
            with_thousands(self.param_count),
            self.param_count as f64 / 1000.0
        )?;
        writeln!(f, "{} real-valued parameters", with_thousands(self.real_param_count))?;
        writeln!(
            f,
            "{} linear MACs over {} channel(s); {} FLOPs at 8 per complex MAC",
            with_thousands(self.linear_macs),
            self.channels,
            with_thousands(self.linear_flops())
        )?;
        writeln!(f, "{} gate MACs, {} FFT MACs", with_thousands(self.gate_macs), with_thousands(self.fft_macs))?;
        writeln!(f, "{} total MACs", with_thousands(self.total_macs()))?;
        write!(f, "convention: {}", self.convention)
    }
}

const CONVENTION: &str = "complex weights count as one parameter; linear MACs are complex \
    multiply-accumulates of both spectral layers per channel; each FFT costs 0.5*L*log2(L) \
    complex MACs; the gate adds F*N real MACs per window";

/// Parameter counts derived from layer shapes alone.
pub fn count_params(spec: &ModelSpec) -> EfficiencyReport {
    let f = bin_count(spec.lookback);
    let f_out = bin_count(spec.lookback + spec.horizon);
    let has_moe = matches!(spec.kind, ModelKind::FreqMoe | ModelKind::DLinearMoe) && spec.experts > 0;
    let n = spec.experts;
    let (moe_params, moe_real) = if has_moe {
        let gate = match spec.gate_mode {
            GateMode::Gated => f * n + n,
            GateMode::Fixed => n,
        };
        (gate + n - 1, gate + n - 1)
    } else {
        (0, 0)
    };
    let (head, head_real) = match spec.kind {
        ModelKind::FreqMoe => {
            let per_block = f * f_out + f_out + f_out * f_out + f_out;
            (spec.blocks * per_block, 2 * spec.blocks * per_block)
        }
        ModelKind::DLinear | ModelKind::DLinearMoe => {
            let lin = spec.lookback * spec.horizon + spec.horizon;
            (lin, lin)
        }
    };
    EfficiencyReport {
        param_count: moe_params + head,
        real_param_count: moe_real + head_real,
        channels: 0,
        linear_macs: 0,
        gate_macs: 0,
        fft_macs: 0,
        convention: CONVENTION.into(),
    }
}

fn fft_cost(len: usize) -> f64 {
    0.5 * len as f64 * (len as f64).log2()
}

/// Parameter counts plus multiply-accumulate counts for one window of
/// `channels` channels.
pub fn count_macs(spec: &ModelSpec, channels: usize) -> EfficiencyReport {
    let mut report = count_params(spec);
    let s = spec.lookback;
    let f = bin_count(s);
    let f_out = bin_count(s + spec.horizon);
    let has_moe = matches!(spec.kind, ModelKind::FreqMoe | ModelKind::DLinearMoe) && spec.experts > 0;
    let mut fft = 0.0;
    if has_moe {
        fft += 2.0 * fft_cost(s) * channels as f64;
        if spec.gate_mode == GateMode::Gated && channels > 0 {
            report.gate_macs = f * spec.experts;
        }
    }
    match spec.kind {
        ModelKind::FreqMoe => {
            report.linear_macs = channels * spec.blocks * (f * f_out + f_out * f_out);
            fft += spec.blocks as f64 * (fft_cost(s) + fft_cost(s + spec.horizon)) * channels as f64;
        }
        ModelKind::DLinear | ModelKind::DLinearMoe => {
            report.linear_macs = channels * s * spec.horizon;
        }
    }
    report.channels = channels;
    report.fft_macs = fft.round() as usize;
    report
}

/// Per-window gate weights with the learned band layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    /// One simplex row per window, in window order.
    pub weights: Vec<Vec<f64>>,
    pub boundaries: Vec<f64>,
    pub bandwidths: Vec<f64>,
    pub mean_coeff: Vec<f64>,
}

/// Runs the mixture over `windows` in order, collecting gate rows.
pub fn gate_trace(model: &Model, windows: &WindowSet) -> Result<GateTrace> {
    let moe = model
        .moe
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no frequency mixture to trace"))?;
    check_windows(model, windows)?;
    let weights: Vec<Vec<f64>> = (0..windows.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            model
                .gate_weights(&windows.inputs[i], windows.channels)?
                .ok_or_else(|| Error::Invariant("mixture produced no gate weights".into()))
        })
        .collect::<Result<_>>()?;
    let partition = moe.partition();
    let n = moe.experts();
    let mut mean_coeff = vec![0.0; n];
    for row in &weights {
        mean_coeff.iter_mut().zip(row).for_each(|(m, w)| *m += w);
    }
    let count = weights.len().max(1) as f64;
    mean_coeff.iter_mut().for_each(|m| *m /= count);
    Ok(GateTrace {
        weights,
        bandwidths: partition.bandwidths(),
        boundaries: partition.boundaries,
        mean_coeff,
    })
}

/// [`gate_trace`] plus a CSV: header `window_index,expert_0..`, one row per
/// window, then `boundary_i`, `bandwidth_i` and `mean_coeff_i` footer rows.
pub fn export_gate_trace(model: &Model, windows: &WindowSet, out_path: impl AsRef<Path>) -> Result<GateTrace> {
    let trace = gate_trace(model, windows)?;
    let path = out_path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        let n = trace.mean_coeff.len();
        let header: Vec<String> = (0..n).map(|i| format!("expert_{i}")).collect();
        writeln!(w, "window_index,{}", header.join(","))?;
        for (i, row) in trace.weights.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{i},{}", cells.join(","))?;
        }
        for (i, b) in trace.boundaries.iter().enumerate() {
            writeln!(w, "boundary_{i},{b}")?;
        }
        for (i, b) in trace.bandwidths.iter().enumerate() {
            writeln!(w, "bandwidth_{i},{b}")?;
        }
        for (i, m) in trace.mean_coeff.iter().enumerate() {
            writeln!(w, "mean_coeff_{i},{m}")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Parameterized;

    fn spec(blocks: usize, experts: usize) -> ModelSpec {
        ModelSpec {
            blocks,
            experts,
            ..ModelSpec::default()
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[2.0, 6.0]).unwrap(), 20.0);
        assert_eq!(mae_loss(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(mae_loss(&[2.0, 6.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert!(mse_loss(&[0.0], &[1.0, 2.0]).is_err());
        assert!(mae_loss(&[], &[]).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[0.0], &[2.0]).unwrap();
        assert_eq!((m.mse, m.mae, m.rmse, m.mape), (4.0, 2.0, 2.0, 100.0));
        let z = metrics(&[1.0, -3.0], &[1.0, -3.0]).unwrap();
        assert_eq!((z.mse, z.mae, z.rmse, z.mape), (0.0, 0.0, 0.0, 0.0));
        // Near-zero truth is excluded from MAPE only.
        let m = metrics(&[1.0, 3.0], &[0.0, 2.0]).unwrap();
        assert_eq!(m.mape, 50.0);
        assert_eq!(m.mse, 1.0);
    }

    #[test]
    fn parameter_counts_match_shape_arithmetic() {
        assert_eq!(count_params(&spec(1, 3)).param_count, 14_508);
        assert_eq!(count_params(&spec(3, 3)).param_count, 43_220);
        assert_eq!(count_params(&spec(5, 3)).param_count, 71_932);
        assert_eq!(count_params(&spec(1, 1)).param_count, 14_406);
        assert_eq!(count_params(&spec(1, 3)).real_param_count, 2 * 14_356 + 152);
    }

    #[test]
    fn parameter_counts_match_model_containers() {
        for kind in [ModelKind::FreqMoe, ModelKind::DLinear, ModelKind::DLinearMoe] {
            for experts in [1, 2, 3] {
                for gate_mode in [GateMode::Gated, GateMode::Fixed] {
                    let s = ModelSpec {
                        kind,
                        experts,
                        gate_mode,
                        blocks: 2,
                        lookback: 24,
                        horizon: 12,
                        ..ModelSpec::default()
                    };
                    let m = Model::new(s, 0).unwrap();
                    let r = count_params(&s);
                    assert_eq!(r.param_count, m.complex_counted_len(), "{s:?}");
                    assert_eq!(r.real_param_count, m.real_len(), "{s:?}");
                }
            }
        }
    }

    #[test]
    fn mac_examples() {
        let r = count_macs(&spec(1, 3), 7);
        assert_eq!(r.linear_macs, 99_134);
        assert_eq!(count_macs(&spec(2, 3), 7).linear_macs, 2 * 99_134);
        let zero = count_macs(&spec(1, 3), 0);
        assert_eq!(zero.total_macs(), 0);
        // 8 FLOPs per complex MAC over the spectral layers.
        assert_eq!(r.linear_flops(), 793_072);
    }

    #[test]
    fn thousands_separator() {
        assert_eq!(with_thousands(14_508), "14,508");
        assert_eq!(with_thousands(999), "999");
        assert_eq!(with_thousands(1_000_000), "1,000,000");
    }
}
