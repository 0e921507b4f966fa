//! Dataset loading, chronological splits, sliding windows and the
//! alternating-frequency synthetic benchmark.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Column name that carries the synthetic segment label instead of a channel.
pub const PARITY_COLUMN: &str = "segment_parity";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub frequency: String,
    pub channel_names: Vec<String>,
    /// One series per channel, all of equal length.
    pub channels: Vec<Vec<f64>>,
    /// Per-step parity of the synthetic segment (0 = low-frequency dominant).
    pub segment_parity: Option<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }
}

fn frequency_label(name: &str) -> &'static str {
    let lower = name.to_ascii_lowercase();
    if lower.starts_with("etth") {
        "1h"
    } else if lower.starts_with("ettm") {
        "15min"
    } else if lower.starts_with("weather") {
        "10min"
    } else if lower.starts_with("exchange") {
        "1d"
    } else if lower.starts_with("synthetic") {
        "1"
    } else {
        "unknown"
    }
}

/// Reads a header-first CSV whose first column is a timestamp and whose
/// remaining columns are numeric channels. A column named `segment_parity`
/// is read as the synthetic label rather than a channel.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            column: 0,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            column: headers.len(),
            message: "expected a timestamp column and at least one numeric column".into(),
        });
    }
    let parity_col = headers.iter().position(|h| h == PARITY_COLUMN).filter(|&i| i > 0);
    let channel_cols: Vec<usize> = (1..headers.len()).filter(|&i| Some(i) != parity_col).collect();
    let channel_names = channel_cols.iter().map(|&i| headers[i].to_string()).collect();
    let mut channels = vec![Vec::new(); channel_cols.len()];
    let mut parity = parity_col.map(|_| Vec::new());

    for (idx, record) in reader.records().enumerate() {
        // Line 1 is the header.
        let row = idx + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: record.len() + 1,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let parse = |col: usize| -> Result<f64> {
            let cell = &record[col];
            let bad = |message: String| Error::Parse {
                row,
                column: col + 1,
                message,
            };
            if cell.is_empty() {
                return Err(bad(format!("empty cell in column `{}`", &headers[col])));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| bad(format!("`{cell}` in column `{}` is not a number", &headers[col])))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value `{cell}` in column `{}`", &headers[col])));
            }
            Ok(v)
        };
        for (series, &col) in channels.iter_mut().zip(&channel_cols) {
            series.push(parse(col)?);
        }
        if let (Some(labels), Some(col)) = (parity.as_mut(), parity_col) {
            labels.push(if parse(col)? == 0.0 { 0 } else { 1 });
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        frequency: frequency_label(&name).to_string(),
        name,
        channel_names,
        channels,
        segment_parity: parity,
    })
}

/// Chronological split ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const SIX_TWO_TWO: SplitRatios = SplitRatios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    pub const SEVEN_TWO_ONE: SplitRatios = SplitRatios {
        train: 0.7,
        val: 0.2,
        test: 0.1,
    };

    /// 6:2:2 for the ETTh and PEMS families, 7:2:1 otherwise.
    pub fn default_for(dataset_name: &str) -> SplitRatios {
        let lower = dataset_name.to_ascii_lowercase();
        if lower.starts_with("etth") || lower.starts_with("pems") {
            SplitRatios::SIX_TWO_TWO
        } else {
            SplitRatios::SEVEN_TWO_ONE
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous train/val/test ranges with cumulative floor cut points; the
/// test range absorbs the remainder. Every range must fit at least one
/// window of `window_len` steps.
pub fn split(total: usize, ratios: SplitRatios, window_len: usize) -> Result<SplitRanges> {
    let parts = [ratios.train, ratios.val, ratios.test];
    if parts.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::config("split", "ratios must be positive"));
    }
    if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split", "ratios must sum to 1"));
    }
    // The small offset keeps e.g. (0.7 + 0.2) * 10000 from flooring to 8999.
    let cut = |frac: f64| ((frac * total as f64) + 1e-9).floor() as usize;
    let train_end = cut(ratios.train).min(total);
    let val_end = cut(ratios.train + ratios.val).clamp(train_end, total);
    let ranges = SplitRanges {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..total,
    };
    for (name, r) in [("train", &ranges.train), ("val", &ranges.val), ("test", &ranges.test)] {
        if r.len() < window_len {
            return Err(Error::config(
                "split",
                format!(
                    "{name} range has {} steps, fewer than lookback + horizon = {window_len}",
                    r.len()
                ),
            ));
        }
    }
    Ok(ranges)
}

/// Per-channel z-scoring fitted on the training range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(ds: &Dataset, range: Range<usize>) -> Result<Self> {
        if range.len() < 2 || range.end > ds.len() {
            return Err(Error::invalid("scaler range must hold at least two in-bounds steps"));
        }
        let n = range.len() as f64;
        let mut mean = Vec::with_capacity(ds.n_channels());
        let mut std = Vec::with_capacity(ds.n_channels());
        for series in &ds.channels {
            let part = &series[range.clone()];
            let m = part.iter().sum::<f64>() / n;
            let var = part.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            // Constant channels are centred but not scaled.
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Ok(StandardScaler { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        StandardScaler {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn transform(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for ((series, m), s) in out.channels.iter_mut().zip(&self.mean).zip(&self.std) {
            series.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out
    }
}

/// Input/target pairs cut from one split, channel-major per window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Absolute start index of every window in the source series.
    pub starts: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn pair(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.inputs[i], &self.targets[i])
    }

    /// First `n` windows (all if fewer).
    pub fn truncated(&self, n: usize) -> WindowSet {
        let n = n.min(self.len());
        WindowSet {
            channels: self.channels,
            lookback: self.lookback,
            horizon: self.horizon,
            starts: self.starts[..n].to_vec(),
            inputs: self.inputs[..n].to_vec(),
            targets: self.targets[..n].to_vec(),
        }
    }
}

/// Every stride-1 window `[t, t + lookback + horizon)` inside `range`.
pub fn make_windows(ds: &Dataset, range: Range<usize>, lookback: usize, horizon: usize) -> Result<WindowSet> {
    if range.end > ds.len() {
        return Err(Error::config(
            "split",
            format!("range end {} exceeds dataset length {}", range.end, ds.len()),
        ));
    }
    let span = lookback + horizon;
    if range.len() < span {
        return Err(Error::config(
            "horizon",
            format!(
                "range of {} steps cannot hold lookback {lookback} + horizon {horizon}",
                range.len()
            ),
        ));
    }
    let count = range.len() - span + 1;
    let c = ds.n_channels();
    let mut set = WindowSet {
        channels: c,
        lookback,
        horizon,
        starts: Vec::with_capacity(count),
        inputs: Vec::with_capacity(count),
        targets: Vec::with_capacity(count),
    };
    for t in range.start..range.start + count {
        let mut input = Vec::with_capacity(c * lookback);
        let mut target = Vec::with_capacity(c * horizon);
        for series in &ds.channels {
            input.extend_from_slice(&series[t..t + lookback]);
            target.extend_from_slice(&series[t + lookback..t + span]);
        }
        set.starts.push(t);
        set.inputs.push(input);
        set.targets.push(target);
    }
    Ok(set)
}

/// Parameters of the alternating low/high-frequency benchmark series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub total_len: usize,
    pub segment_len: usize,
    pub n_segments: usize,
    pub f_low: f64,
    pub f_high: f64,
    pub amp_main: f64,
    pub amp_noise: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            total_len: 10_000,
            segment_len: 500,
            n_segments: 20,
            f_low: 0.05,
            f_high: 0.4,
            amp_main: 1.0,
            amp_noise: 0.3,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_len != self.segment_len * self.n_segments {
            return Err(Error::config(
                "synthetic.total_len",
                "must equal segment_len * n_segments",
            ));
        }
        for (field, f) in [("synthetic.f_low", self.f_low), ("synthetic.f_high", self.f_high)] {
            if !(f > 0.0 && f < 0.5) {
                return Err(Error::config(field, "frequencies must lie in (0, 0.5)"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("synthetic.noise_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

/// Single-channel series whose segments alternate between a dominant low
/// frequency (even segments) and a dominant high frequency (odd segments).
/// Time runs globally, so phase is continuous across segment boundaries.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "synthetic", &[]);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::config("synthetic.noise_sigma", e.to_string()))?;
    let tau = std::f64::consts::TAU;
    let mut values = Vec::with_capacity(spec.total_len);
    let mut parity = Vec::with_capacity(spec.total_len);
    for t in 0..spec.total_len {
        let odd = (t / spec.segment_len) % 2 == 1;
        let (f_main, f_noise) = if odd {
            (spec.f_high, spec.f_low)
        } else {
            (spec.f_low, spec.f_high)
        };
        let tt = t as f64;
        let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        values.push(spec.amp_main * (tau * f_main * tt).sin() + spec.amp_noise * (tau * f_noise * tt).sin() + eps);
        parity.push(odd as u8);
    }
    Ok(Dataset {
        name: "synthetic".into(),
        frequency: frequency_label("synthetic").into(),
        channel_names: vec!["value".into()],
        channels: vec![values],
        segment_parity: Some(parity),
    })
}

/// Writes `date,value,segment_parity` with an integer date index.
pub fn write_synthetic_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let values = ds
        .channels
        .first()
        .ok_or_else(|| Error::invalid("synthetic dataset has no channel"))?;
    let parity = ds
        .segment_parity
        .as_ref()
        .ok_or_else(|| Error::invalid("synthetic dataset has no parity labels"))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "date,value,{PARITY_COLUMN}")?;
        for (t, (v, p)) in values.iter().zip(parity).enumerate() {
            writeln!(w, "{t},{v},{p}")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Majority segment parity over `range`; ties go to the even label.
pub fn majority_parity(parity: &[u8], range: Range<usize>) -> u8 {
    let odd = parity[range.clone()].iter().filter(|&&p| p == 1).count();
    (2 * odd > range.len()) as u8
}
