//! The differentiable correlation-filter layer.
//!
//! A filter is solved in closed form from template features `x` and a label
//! `y`, sharing one energy denominator across channels:
//!
//! ```text
//! Ŵ_c = X_c ⊙ conj(Ŷ) / (Σ_c' |X_c'|² + λ)
//! R   = idft2(Σ_c conj(Ŵ_c) ⊙ Z_c)
//! ```
//!
//! Labels peak at cell `(0, 0)` for a target at the patch center, so a
//! response peak at `(r, c)` is a circular displacement of the target.

use std::sync::Arc;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::features::Precision;
use crate::imgproc::gaussian_label;
use crate::planes::{FeatureMap, Planes};
use crate::spectral::{
    dft2, dft2_packed_into, dft2_planes, dft2_planes_into, idft2_re, idft2_re_planes, unpack_pair, ComplexPlane,
    RealPlane,
};

/// Ridge regularization of the filter solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    pub lambda: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig { lambda: 1e-4 }
    }
}

impl RegConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let r = RegConfig { lambda };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda > 0.0 && self.lambda.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)))
        }
    }
}

/// Per-channel spectra of a (windowed) feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpectrum {
    height: usize,
    width: usize,
    channels: Vec<ComplexPlane>,
}

impl FeatureSpectrum {
    /// Transforms `feat`, multiplying each channel by `window` first.
    pub fn new(feat: &FeatureMap, window: Option<&RealPlane>) -> Result<Self> {
        Ok(FeatureSpectrum {
            height: feat.height(),
            width: feat.width(),
            channels: dft2_planes(feat, window)?,
        })
    }

    /// Recomputes the spectra of `feat` in place, reusing storage when the
    /// shape is unchanged.
    pub fn refill(&mut self, feat: &FeatureMap, window: Option<&RealPlane>) -> Result<()> {
        let (ch, h, w) = feat.shape();
        if self.channels.len() != ch || self.dims() != (h, w) {
            *self = Self::new(feat, window)?;
            return Ok(());
        }
        dft2_planes_into(feat, window, &mut self.channels)
    }

    pub fn channels(&self) -> &[ComplexPlane] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn check_compatible(&self, other_dims: (usize, usize), other_channels: usize) -> Result<()> {
        if self.dims() != other_dims || self.num_channels() != other_channels {
            return Err(Error::dims(
                format!("{}x{:?}", self.num_channels(), self.dims()),
                format!("{other_channels}x{other_dims:?}"),
            ));
        }
        Ok(())
    }
}

/// A multi-channel filter in the Fourier domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFilter {
    height: usize,
    width: usize,
    channels: Vec<ComplexPlane>,
}

impl SpectralFilter {
    pub fn channels(&self) -> &[ComplexPlane] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().all(|c| c.is_finite())
    }
}

fn inverse_denominator(x: &FeatureSpectrum, lambda: f64) -> Vec<f64> {
    let n = x.height * x.width;
    let mut d = vec![lambda; n];
    for ch in &x.channels {
        for (acc, v) in d.iter_mut().zip(ch.data()) {
            *acc += v.norm_sqr();
        }
    }
    d.iter_mut().for_each(|v| *v = 1.0 / *v);
    d
}

/// Solves the filter from pre-transformed features and label spectrum.
pub fn solve_filter_spectral(
    x: &FeatureSpectrum,
    label_hat: &ComplexPlane,
    reg: &RegConfig,
) -> Result<SpectralFilter> {
    reg.validate()?;
    if label_hat.dims() != x.dims() {
        return Err(Error::dims(format!("{:?}", x.dims()), format!("{:?}", label_hat.dims())));
    }
    let inv = inverse_denominator(x, reg.lambda);
    let channels = x
        .channels
        .iter()
        .map(|xc| {
            let data = xc
                .data()
                .iter()
                .zip(label_hat.data())
                .zip(&inv)
                .map(|((xv, yv), k)| xv * yv.conj() * k)
                .collect();
            ComplexPlane::from_raw(x.height, x.width, data)
        })
        .collect();
    Ok(SpectralFilter {
        height: x.height,
        width: x.width,
        channels,
    })
}

/// Solves the filter for `feat` (already windowed, if desired) and `label`.
pub fn solve_filter(feat: &FeatureMap, label: &RealPlane, reg: &RegConfig) -> Result<SpectralFilter> {
    reg.validate()?;
    if label.dims() != (feat.height(), feat.width()) {
        return Err(Error::dims(
            format!("{}x{}", feat.height(), feat.width()),
            format!("{:?}", label.dims()),
        ));
    }
    let x = FeatureSpectrum::new(feat, None)?;
    solve_filter_spectral(&x, &dft2(label)?, reg)
}

/// `Σ_c conj(Ŵ_c) ⊙ Z_c`.
pub fn response_spectrum(filter: &SpectralFilter, z: &FeatureSpectrum) -> Result<ComplexPlane> {
    z.check_compatible(filter.dims(), filter.num_channels())?;
    let mut acc = vec![Complex64::new(0.0, 0.0); filter.height * filter.width];
    for (wc, zc) in filter.channels.iter().zip(&z.channels) {
        for ((a, wv), zv) in acc.iter_mut().zip(wc.data()).zip(zc.data()) {
            *a += wv.conj() * zv;
        }
    }
    Ok(ComplexPlane::from_raw(filter.height, filter.width, acc))
}

/// Response of a filter on pre-transformed search features.
pub fn respond_spectral(filter: &SpectralFilter, z: &FeatureSpectrum) -> Result<RealPlane> {
    Ok(idft2_re(&response_spectrum(filter, z)?))
}

/// Response of a filter on `feat` (already windowed, if desired).
pub fn respond(filter: &SpectralFilter, feat: &FeatureMap) -> Result<RealPlane> {
    respond_spectral(filter, &FeatureSpectrum::new(feat, None)?)
}

/// Gaussian label peaked at the response maximum (row-major first on ties).
///
/// The result is a constant for differentiation purposes.
pub fn pseudo_label(r: &RealPlane, sigma: f64) -> RealPlane {
    let (pr, pc) = r.argmax();
    gaussian_label(r.height(), r.width(), pr, pc, sigma)
}

/// `(1 − α)·prev + α·fresh`.
pub fn update_filter(prev: &SpectralFilter, fresh: &SpectralFilter, alpha: f64) -> Result<SpectralFilter> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if prev.dims() != fresh.dims() || prev.num_channels() != fresh.num_channels() {
        return Err(Error::dims(
            format!("{}x{:?}", prev.num_channels(), prev.dims()),
            format!("{}x{:?}", fresh.num_channels(), fresh.dims()),
        ));
    }
    let channels = prev
        .channels
        .iter()
        .zip(&fresh.channels)
        .map(|(p, f)| {
            let data = p
                .data()
                .iter()
                .zip(f.data())
                .map(|(a, b)| a * (1.0 - alpha) + b * alpha)
                .collect();
            ComplexPlane::from_raw(prev.height, prev.width, data)
        })
        .collect();
    Ok(SpectralFilter {
        height: prev.height,
        width: prev.width,
        channels,
    })
}

/// In-place `prev ← (1 − α)·prev + α·solve(x, label)`; equal to
/// [`update_filter`] applied to [`solve_filter_spectral`] without
/// materializing the fresh filter.
pub fn blend_filter(
    prev: &mut SpectralFilter,
    x: &FeatureSpectrum,
    label_hat: &ComplexPlane,
    reg: &RegConfig,
    alpha: f64,
) -> Result<()> {
    reg.validate()?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    x.check_compatible(prev.dims(), prev.num_channels())?;
    if label_hat.dims() != x.dims() {
        return Err(Error::dims(format!("{:?}", x.dims()), format!("{:?}", label_hat.dims())));
    }
    let inv = inverse_denominator(x, reg.lambda);
    for (pc, xc) in prev.channels.iter_mut().zip(&x.channels) {
        for (((p, xv), yv), k) in pc.data_mut().iter_mut().zip(xc.data()).zip(label_hat.data()).zip(&inv) {
            *p = *p * (1.0 - alpha) + xv * yv.conj() * k * alpha;
        }
    }
    Ok(())
}

/// Spectra of channel pairs `x[2p] + i·x[2p+1]`, kept packed.
///
/// Because every channel is real, the shared denominator, the filter
/// solve, the blend and the summed response can all be evaluated on the
/// packed pairs, halving the work of the per-channel form.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSpectrum {
    height: usize,
    width: usize,
    channels: usize,
    precision: Precision,
    pairs: Vec<ComplexPlane>,
}

impl PackedSpectrum {
    pub fn new(feat: &FeatureMap, window: Option<&RealPlane>) -> Result<Self> {
        Self::with_precision(feat, window, Precision::F64)
    }

    /// Like [`PackedSpectrum::new`]; `F32` runs the transforms in single
    /// precision, here and on every [`PackedSpectrum::refill`].
    pub fn with_precision(feat: &FeatureMap, window: Option<&RealPlane>, precision: Precision) -> Result<Self> {
        let (ch, h, w) = feat.shape();
        let mut pairs = vec![ComplexPlane::zeros(h, w); ch.div_ceil(2)];
        dft2_packed_into(feat, window, &mut pairs, precision == Precision::F32)?;
        Ok(PackedSpectrum {
            height: h,
            width: w,
            channels: ch,
            precision,
            pairs,
        })
    }

    /// Recomputes the spectra in place, reusing storage when possible.
    pub fn refill(&mut self, feat: &FeatureMap, window: Option<&RealPlane>) -> Result<()> {
        let (ch, h, w) = feat.shape();
        if self.channels != ch || self.dims() != (h, w) {
            *self = Self::with_precision(feat, window, self.precision)?;
            return Ok(());
        }
        dft2_packed_into(feat, window, &mut self.pairs, self.precision == Precision::F32)
    }

    pub fn pairs(&self) -> &[ComplexPlane] {
        &self.pairs
    }

    pub fn num_channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `1 / (Σ_c |X_c|² + λ)`, using `|A|² + |B|² = (|P(k)|² + |P(−k)|²)/2`.
    fn inverse_denominator(&self, lambda: f64) -> Vec<f64> {
        let (h, w) = self.dims();
        let mut e = vec![0.0; h * w];
        for p in &self.pairs {
            for (acc, v) in e.iter_mut().zip(p.data()) {
                *acc += v.norm_sqr();
            }
        }
        let mut inv = vec![0.0; h * w];
        for r in 0..h {
            let nr = (h - r) % h;
            for c in 0..w {
                let j = nr * w + (w - c) % w;
                inv[r * w + c] = 1.0 / (0.5 * (e[r * w + c] + e[j]) + lambda);
            }
        }
        inv
    }
}

/// A filter stored as packed channel pairs `Ŵ_{2p} + i·Ŵ_{2p+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedFilter {
    height: usize,
    width: usize,
    channels: usize,
    pairs: Vec<ComplexPlane>,
}

fn check_label(dims: (usize, usize), label_hat: &ComplexPlane) -> Result<()> {
    if label_hat.dims() != dims {
        return Err(Error::dims(format!("{dims:?}"), format!("{:?}", label_hat.dims())));
    }
    Ok(())
}

impl PackedFilter {
    /// Solves the filter from packed template spectra.
    pub fn solve(x: &PackedSpectrum, label_hat: &ComplexPlane, reg: &RegConfig) -> Result<Self> {
        reg.validate()?;
        check_label(x.dims(), label_hat)?;
        let inv = x.inverse_denominator(reg.lambda);
        let pairs = x
            .pairs
            .iter()
            .map(|xp| {
                let data = xp
                    .data()
                    .iter()
                    .zip(label_hat.data())
                    .zip(&inv)
                    .map(|((xv, yv), k)| xv * yv.conj() * k)
                    .collect();
                ComplexPlane::from_raw(x.height, x.width, data)
            })
            .collect();
        Ok(PackedFilter {
            height: x.height,
            width: x.width,
            channels: x.channels,
            pairs,
        })
    }

    /// In-place `self ← (1 − α)·self + α·solve(x, label)`.
    pub fn blend(&mut self, x: &PackedSpectrum, label_hat: &ComplexPlane, reg: &RegConfig, alpha: f64) -> Result<()> {
        reg.validate()?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidInput(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        self.check_compatible(x)?;
        check_label(x.dims(), label_hat)?;
        let inv = x.inverse_denominator(reg.lambda);
        for (pp, xp) in self.pairs.iter_mut().zip(&x.pairs) {
            for (((p, xv), yv), k) in pp.data_mut().iter_mut().zip(xp.data()).zip(label_hat.data()).zip(&inv) {
                *p = *p * (1.0 - alpha) + xv * yv.conj() * k * alpha;
            }
        }
        Ok(())
    }

    /// `Σ_c conj(Ŵ_c) ⊙ Z_c`, the same spectrum as [`response_spectrum`]
    /// on the separated channels.
    pub fn response_spectrum(&self, z: &PackedSpectrum) -> Result<ComplexPlane> {
        self.check_compatible(z)?;
        let (h, w) = self.dims();
        let mut acc = vec![Complex64::new(0.0, 0.0); h * w];
        for (q, p) in self.pairs.iter().zip(&z.pairs) {
            for ((a, qv), pv) in acc.iter_mut().zip(q.data()).zip(p.data()) {
                *a += qv.conj() * pv;
            }
        }
        // The cross terms between the two halves of a pair are
        // anti-Hermitian; keeping the Hermitian part removes them.
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for r in 0..h {
            let nr = (h - r) % h;
            for c in 0..w {
                let j = nr * w + (w - c) % w;
                out[r * w + c] = (acc[r * w + c] + acc[j].conj()) * 0.5;
            }
        }
        Ok(ComplexPlane::from_raw(h, w, out))
    }

    pub fn respond(&self, z: &PackedSpectrum) -> Result<RealPlane> {
        Ok(idft2_re(&self.response_spectrum(z)?))
    }

    /// The filter with its channels separated.
    pub fn unpack(&self) -> SpectralFilter {
        let mut channels = Vec::with_capacity(self.channels);
        for p in &self.pairs {
            let (a, b) = unpack_pair(p);
            channels.push(a);
            if channels.len() < self.channels {
                channels.push(b);
            }
        }
        SpectralFilter {
            height: self.height,
            width: self.width,
            channels,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_finite(&self) -> bool {
        self.pairs.iter().all(|c| c.is_finite())
    }

    fn check_compatible(&self, x: &PackedSpectrum) -> Result<()> {
        if self.dims() != x.dims() || self.channels != x.channels {
            return Err(Error::dims(
                format!("{}x{:?}", self.channels, self.dims()),
                format!("{}x{:?}", x.channels, x.dims()),
            ));
        }
        Ok(())
    }
}

/// Intermediate values of one solve-then-respond evaluation.
#[derive(Debug, Clone)]
pub struct DcfCache {
    x: Arc<FeatureSpectrum>,
    z: Arc<FeatureSpectrum>,
    label_hat: ComplexPlane,
    inv_denom: Vec<f64>,
    cross: Vec<Complex64>,
}

/// Solves on template spectra `x` with label spectrum `label_hat` and
/// responds on search spectra `z`, keeping what [`dcf_backward`] needs.
pub fn dcf_forward(
    x: Arc<FeatureSpectrum>,
    label_hat: &ComplexPlane,
    z: Arc<FeatureSpectrum>,
    reg: &RegConfig,
) -> Result<(RealPlane, DcfCache)> {
    reg.validate()?;
    z.check_compatible(x.dims(), x.num_channels())?;
    if label_hat.dims() != x.dims() {
        return Err(Error::dims(format!("{:?}", x.dims()), format!("{:?}", label_hat.dims())));
    }
    let (h, w) = x.dims();
    let inv_denom = inverse_denominator(&x, reg.lambda);
    // N = Σ_c conj(X_c)·Z_c
    let mut cross = vec![Complex64::new(0.0, 0.0); h * w];
    for (xc, zc) in x.channels.iter().zip(&z.channels) {
        for ((n, xv), zv) in cross.iter_mut().zip(xc.data()).zip(zc.data()) {
            *n += xv.conj() * zv;
        }
    }
    let r_hat: Vec<Complex64> = cross
        .iter()
        .zip(label_hat.data())
        .zip(&inv_denom)
        .map(|((n, y), k)| y * n * k)
        .collect();
    let r = idft2_re(&ComplexPlane::from_raw(h, w, r_hat));
    Ok((
        r,
        DcfCache {
            x,
            z,
            label_hat: label_hat.clone(),
            inv_denom,
            cross,
        },
    ))
}

/// Gradients of [`dcf_forward`] with respect to the template and search
/// feature maps (after windowing), given `∂L/∂R`.
pub fn dcf_backward(upstream: &RealPlane, cache: &DcfCache) -> Result<(FeatureMap, FeatureMap)> {
    let (h, w) = cache.x.dims();
    if upstream.dims() != (h, w) {
        return Err(Error::StaleCache(format!(
            "upstream {:?} does not match cached response {:?}",
            upstream.dims(),
            (h, w)
        )));
    }
    let g = dft2(upstream)?;
    let g = g.data();
    let y = cache.label_hat.data();
    let k = &cache.inv_denom;
    let n = &cache.cross;

    // Search branch: Ŵ_c ⊙ Ĝ, with Ŵ_c = X_c·conj(Y)·k.
    let mut dz = Vec::with_capacity(cache.x.num_channels());
    // Template branch:
    //   conj(Ĝ)·Y·Z_c·k − X_c·(conj(Ĝ)·Y·N + Ĝ·conj(Y)·conj(N))·k²
    let mut dx = Vec::with_capacity(cache.x.num_channels());
    let a: Vec<Complex64> = (0..h * w).map(|i| g[i].conj() * y[i] * k[i]).collect();
    let b: Vec<f64> = (0..h * w)
        .map(|i| 2.0 * (g[i].conj() * y[i] * n[i]).re * k[i] * k[i])
        .collect();
    for (xc, zc) in cache.x.channels.iter().zip(&cache.z.channels) {
        let (xd, zd) = (xc.data(), zc.data());
        let wz = (0..h * w)
            .map(|i| xd[i] * y[i].conj() * k[i] * g[i])
            .collect();
        dz.push(ComplexPlane::from_raw(h, w, wz));
        let gx = (0..h * w).map(|i| a[i] * zd[i] - xd[i] * b[i]).collect();
        dx.push(ComplexPlane::from_raw(h, w, gx));
    }
    Ok((idft2_re_planes(&dx)?, idft2_re_planes(&dz)?))
}

/// Multiplies every channel by `window`, the backward rule of windowing.
pub fn window_grad(grad: &mut Planes, window: &RealPlane) {
    crate::imgproc::apply_window_in_place(grad, window);
}
