//! Real-input discrete Fourier transform, its inverse, and their adjoints.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the `1/L` factor, so `irfft(rfft(x), L) == x`.
//!
//! Gradients with respect to a half spectrum come in two flavours:
//!
//! * [`rfft_vjp`] / [`irfft_vjp`] treat the half spectrum as a stand-in for the
//!   full Hermitian spectrum. A gradient on an interior bin also accounts for
//!   its mirror image, so interior bins count twice and DC/Nyquist once.
//! * [`rfft_pullback`] / [`irfft_pullback`] are the plain chain rule on the
//!   real and imaginary parts of the stored bins. The model's backward pass uses
//!   these, because the complex linear layers mix bins and the Hermitian
//!   weighting would not commute with them.
//!
//! The two pairs differ only by the diagonal weights from [`hermitian_weights`].

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Half spectrum of a real series of length `origin_length`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
    pub origin_length: usize,
}

impl Spectrum {
    pub fn zeros(origin_length: usize) -> Self {
        Spectrum {
            bins: vec![Complex64::new(0.0, 0.0); bin_count(origin_length)],
            origin_length,
        }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

/// Number of bins in the half spectrum of a length-`len` real series.
pub fn bin_count(len: usize) -> usize {
    len / 2 + 1
}

/// Multiplicity of each half-spectrum bin in the full spectrum: 1 for DC and
/// (even lengths) Nyquist, 2 for everything in between.
pub fn hermitian_weights(len: usize) -> Vec<f64> {
    let f = bin_count(len);
    (0..f)
        .map(|k| {
            if k == 0 || (len % 2 == 0 && k == len / 2) {
                1.0
            } else {
                2.0
            }
        })
        .collect()
}

/// Precomputed cosine / negative-sine tables for one transform length.
///
/// Row `k` holds `cos(2πkt/L)` and `-sin(2πkt/L)` for `t = 0..L`, i.e. the real
/// and imaginary parts of the forward twiddle `exp(-2πikt/L)`.
#[derive(Debug)]
pub struct DftPlan {
    len: usize,
    bins: usize,
    cos: Vec<f64>,
    nsin: Vec<f64>,
    weights: Vec<f64>,
}

impl DftPlan {
    pub fn new(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::invalid(format!(
                "transform length must be at least 2, got {len}"
            )));
        }
        let bins = bin_count(len);
        let mut cos = Vec::with_capacity(bins * len);
        let mut nsin = Vec::with_capacity(bins * len);
        for k in 0..bins {
            for t in 0..len {
                // Reduce k*t mod L first so large products keep full accuracy.
                let angle = 2.0 * PI * ((k * t) % len) as f64 / len as f64;
                cos.push(angle.cos());
                nsin.push(-angle.sin());
            }
        }
        Ok(DftPlan {
            len,
            bins,
            cos,
            nsin,
            weights: hermitian_weights(len),
        })
    }

    /// Shared plan for `len`, built on first use.
    pub fn cached(len: usize) -> Result<Arc<DftPlan>> {
        static PLANS: OnceLock<RwLock<HashMap<usize, Arc<DftPlan>>>> = OnceLock::new();
        let plans = PLANS.get_or_init(Default::default);
        if let Some(plan) = plans.read().expect("plan cache poisoned").get(&len) {
            return Ok(Arc::clone(plan));
        }
        let plan = Arc::new(DftPlan::new(len)?);
        let mut guard = plans.write().expect("plan cache poisoned");
        Ok(Arc::clone(guard.entry(len).or_insert(plan)))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn row(&self, k: usize) -> (&[f64], &[f64]) {
        let span = k * self.len..(k + 1) * self.len;
        (&self.cos[span.clone()], &self.nsin[span])
    }

    /// Forward transform into a caller-provided buffer of `bins()` entries.
    pub fn forward_into(&self, x: &[f64], out: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.len);
        debug_assert_eq!(out.len(), self.bins);
        for (k, slot) in out.iter_mut().enumerate() {
            let (c, s) = self.row(k);
            let mut re = 0.0;
            let mut im = 0.0;
            for ((&xv, &cv), &sv) in x.iter().zip(c).zip(s) {
                re += xv * cv;
                im += xv * sv;
            }
            *slot = Complex64::new(re, im);
        }
    }

    /// Weighted synthesis `out[t] = scale * Σ_k w_k Re(X_k e^{+iθ})` where the
    /// per-bin weight `w_k` is supplied by `weight(k)`.
    fn synthesize_into(
        &self,
        spec: &[Complex64],
        scale: f64,
        weight: impl Fn(usize) -> f64,
        out: &mut [f64],
    ) {
        debug_assert_eq!(spec.len(), self.bins);
        debug_assert_eq!(out.len(), self.len);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, z) in spec.iter().enumerate() {
            let w = weight(k) * scale;
            let a = w * z.re;
            let b = w * z.im;
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let (c, s) = self.row(k);
            for ((o, &cv), &sv) in out.iter_mut().zip(c).zip(s) {
                *o += a * cv + b * sv;
            }
        }
    }

    /// Inverse transform; imaginary parts of DC and Nyquist are ignored.
    pub fn inverse_into(&self, spec: &[Complex64], out: &mut [f64]) {
        let scale = 1.0 / self.len as f64;
        self.synthesize_into(spec, scale, |k| self.weights[k], out);
    }

    /// Plain chain rule through the forward transform: given `∂L/∂Re X_k +
    /// i·∂L/∂Im X_k`, returns `∂L/∂x`.
    pub fn forward_pullback_into(&self, partials: &[Complex64], out: &mut [f64]) {
        self.synthesize_into(partials, 1.0, |_| 1.0, out);
    }

    /// Plain chain rule through the inverse transform: given `∂L/∂x`, returns
    /// `∂L/∂Re X_k + i·∂L/∂Im X_k`.
    pub fn inverse_pullback_into(&self, grad: &[f64], out: &mut [Complex64]) {
        self.forward_into(grad, out);
        let scale = 1.0 / self.len as f64;
        for ((z, &w), k) in out.iter_mut().zip(&self.weights).zip(0..) {
            *z *= w * scale;
            // DC and Nyquist imaginary parts never reach the output.
            if w == 1.0 {
                debug_assert!(k == 0 || k == self.bins - 1);
                z.im = 0.0;
            }
        }
    }
}

fn check_series(x: &[f64]) -> Result<()> {
    if x.len() < 2 {
        return Err(Error::invalid(format!(
            "series length must be at least 2, got {}",
            x.len()
        )));
    }
    Ok(())
}

fn check_bins(spec: &Spectrum, len: usize) -> Result<()> {
    if len < 2 {
        return Err(Error::invalid(format!(
            "series length must be at least 2, got {len}"
        )));
    }
    if spec.bins.len() != bin_count(len) {
        return Err(Error::invalid(format!(
            "{} bins is inconsistent with length {len} (expected {})",
            spec.bins.len(),
            bin_count(len)
        )));
    }
    Ok(())
}

/// Unnormalized forward transform of a real series.
pub fn rfft(x: &[f64]) -> Result<Spectrum> {
    check_series(x)?;
    let plan = DftPlan::cached(x.len())?;
    let mut bins = vec![Complex64::new(0.0, 0.0); plan.bins()];
    plan.forward_into(x, &mut bins);
    Ok(Spectrum {
        bins,
        origin_length: x.len(),
    })
}

/// Inverse of [`rfft`], including the `1/len` factor.
pub fn irfft(spec: &Spectrum, len: usize) -> Result<Vec<f64>> {
    check_bins(spec, len)?;
    let plan = DftPlan::cached(len)?;
    let mut out = vec![0.0; len];
    plan.inverse_into(&spec.bins, &mut out);
    Ok(out)
}

/// Adjoint of [`rfft`] under the Hermitian inner product
/// `⟨X, S⟩ = Σ_k w_k Re(conj(X_k) S_k)`.
pub fn rfft_vjp(grad_out: &Spectrum, len: usize) -> Result<Vec<f64>> {
    check_bins(grad_out, len)?;
    let plan = DftPlan::cached(len)?;
    let mut out = vec![0.0; len];
    plan.synthesize_into(&grad_out.bins, 1.0, |k| plan.weights[k], &mut out);
    Ok(out)
}

/// Adjoint of [`irfft`] under the same Hermitian inner product; equals
/// `rfft(grad_out) / len`.
pub fn irfft_vjp(grad_out: &[f64]) -> Result<Spectrum> {
    check_series(grad_out)?;
    let len = grad_out.len();
    let plan = DftPlan::cached(len)?;
    let mut bins = vec![Complex64::new(0.0, 0.0); plan.bins()];
    plan.forward_into(grad_out, &mut bins);
    let scale = 1.0 / len as f64;
    bins.iter_mut().for_each(|z| *z *= scale);
    Ok(Spectrum {
        bins,
        origin_length: len,
    })
}

/// Plain chain rule through [`rfft`].
pub fn rfft_pullback(partials: &Spectrum, len: usize) -> Result<Vec<f64>> {
    check_bins(partials, len)?;
    let plan = DftPlan::cached(len)?;
    let mut out = vec![0.0; len];
    plan.forward_pullback_into(&partials.bins, &mut out);
    Ok(out)
}

/// Plain chain rule through [`irfft`].
pub fn irfft_pullback(grad_out: &[f64]) -> Result<Spectrum> {
    check_series(grad_out)?;
    let plan = DftPlan::cached(grad_out.len())?;
    let mut bins = vec![Complex64::new(0.0, 0.0); plan.bins()];
    plan.inverse_pullback_into(grad_out, &mut bins);
    Ok(Spectrum {
        bins,
        origin_length: grad_out.len(),
    })
}
