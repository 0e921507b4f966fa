use crate::error::{Error, Result};

/// Dense `(batch, channels, len)` block of real samples, row-major with time
/// as the fastest axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesBatch {
    batch: usize,
    channels: usize,
    len: usize,
    data: Vec<f64>,
}

impl TimeSeriesBatch {
    pub fn new(batch: usize, channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * len {
            return Err(Error::invalid(format!(
                "buffer of {} values cannot hold shape ({batch}, {channels}, {len})",
                data.len()
            )));
        }
        Ok(TimeSeriesBatch {
            batch,
            channels,
            len,
            data,
        })
    }

    pub fn zeros(batch: usize, channels: usize, len: usize) -> Self {
        TimeSeriesBatch {
            batch,
            channels,
            len,
            data: vec![0.0; batch * channels * len],
        }
    }

    /// Single-sample batch from per-channel rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::invalid("rows have unequal lengths"));
        }
        let data = rows.iter().flatten().copied().collect();
        TimeSeriesBatch::new(1, rows.len(), len, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.len)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn series(&self, b: usize, c: usize) -> &[f64] {
        let start = (b * self.channels + c) * self.len;
        &self.data[start..start + self.len]
    }

    pub fn series_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = (b * self.channels + c) * self.len;
        &mut self.data[start..start + self.len]
    }

    /// All channels of sample `b`, contiguous.
    pub fn sample(&self, b: usize) -> &[f64] {
        let width = self.channels * self.len;
        &self.data[b * width..(b + 1) * width]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let width = self.channels * self.len;
        &mut self.data[b * width..(b + 1) * width]
    }
}
