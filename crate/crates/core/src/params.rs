//! Named parameter containers and their flat real-valued view.
//!
//! Every learnable tensor is either real or complex. The flat view stores
//! complex entries as interleaved `(re, im)` pairs in visiting order, which is
//! what the optimizer, gradient checker and checkpoint payload operate on.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    C64,
}

pub enum ParamSlice<'a> {
    Real(&'a [f64]),
    Complex(&'a [Complex64]),
}

pub enum ParamSliceMut<'a> {
    Real(&'a mut [f64]),
    Complex(&'a mut [Complex64]),
}

impl ParamSlice<'_> {
    /// Entries counted the way the efficiency report does: one per complex number.
    pub fn count(&self) -> usize {
        match self {
            ParamSlice::Real(v) => v.len(),
            ParamSlice::Complex(v) => v.len(),
        }
    }

    pub fn real_len(&self) -> usize {
        match self {
            ParamSlice::Real(v) => v.len(),
            ParamSlice::Complex(v) => 2 * v.len(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            ParamSlice::Real(_) => Dtype::F64,
            ParamSlice::Complex(_) => Dtype::C64,
        }
    }
}

/// A model (or model-shaped gradient buffer) exposing its tensors by name.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], ParamSlice<'_>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamSliceMut<'_>));

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, p| match p {
            ParamSlice::Real(v) => out.extend_from_slice(v),
            ParamSlice::Complex(v) => out.extend(v.iter().flat_map(|z| [z.re, z.im])),
        });
        out
    }

    /// Overwrites every parameter from a flat buffer produced by [`flatten`].
    ///
    /// Panics if `flat` is shorter than [`real_len`](Parameterized::real_len).
    fn load_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut(&mut |_, p| match p {
            ParamSliceMut::Real(v) => {
                v.copy_from_slice(&flat[pos..pos + v.len()]);
                pos += v.len();
            }
            ParamSliceMut::Complex(v) => {
                for z in v.iter_mut() {
                    *z = Complex64::new(flat[pos], flat[pos + 1]);
                    pos += 2;
                }
            }
        });
    }

    fn real_len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, p| n += p.real_len());
        n
    }

    /// Parameter count with complex entries counted once.
    fn complex_counted_len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, p| n += p.count());
        n
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, p| match p {
            ParamSliceMut::Real(v) => v.fill(0.0),
            ParamSliceMut::Complex(v) => v.fill(Complex64::new(0.0, 0.0)),
        });
    }

    fn manifest(&self) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit(&mut |name, shape, p| {
            let bytes = 8 * p.real_len();
            out.push(ManifestEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                dtype: p.dtype(),
                offset,
            });
            offset += bytes;
        });
        out
    }
}

/// One tensor in a checkpoint payload; `offset` is in bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: usize,
}

impl ManifestEntry {
    pub fn byte_len(&self) -> usize {
        let n: usize = self.shape.iter().product();
        match self.dtype {
            Dtype::F64 => 8 * n,
            Dtype::C64 => 16 * n,
        }
    }
}

/// Pairwise (cascade) sum of equally sized vectors, in index order.
///
/// The result depends only on the order of `parts`, never on how they were
/// produced, so parallel producers give bitwise-reproducible totals.
pub fn pairwise_sum(mut parts: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}
