//! 2-D discrete Fourier transforms over real and complex planes.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[k,l] = sum_{m,n} x[m,n] exp(-2πi (km/H + ln/W))`, and the inverse
//! carries the `1/(H·W)` factor. With these conventions
//! `idft2(conj(dft2(a)) ⊙ dft2(b))[s] = sum_m a[m] b[m + s]` (circular
//! cross-correlation).
//!
//! Gradients with respect to complex quantities are represented as
//! `∂L/∂Re + i·∂L/∂Im`. Under that convention the gradient of a real
//! input `x` given the gradient of `dft2(x)` is `Re(Fᴴ g)`, see
//! [`grad_through_dft`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::{Complex32, Complex64};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::planes::Planes;

/// Relative asymmetry above which [`idft2`] refuses to return a real plane.
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;

/// A real-valued `height × width` plane stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealPlane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// A complex-valued `height × width` plane stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexPlane {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidInput(format!(
            "plane dims must be at least 1x1, got {height}x{width}"
        )));
    }
    Ok(())
}

impl RealPlane {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "plane dims must be at least 1x1");
        RealPlane {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        let mut p = Self::zeros(height, width);
        p.data.fill(value);
        p
    }

    /// Builds a plane from row-major values, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::dims(height * width, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("real plane".into()));
        }
        Ok(RealPlane {
            height,
            width,
            data,
        })
    }

    /// Wraps raw values without validation; callers guarantee the length.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        RealPlane {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut p = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                p.data[r * width + c] = f(r, c);
            }
        }
        p
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Circularly shifts content so that `out[(r+dr) mod H, (c+dc) mod W] = self[r, c]`.
    pub fn circshift(&self, dr: isize, dc: isize) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = Self::zeros(self.height, self.width);
        for r in 0..h {
            let rr = (r + dr).rem_euclid(h) as usize;
            for c in 0..w {
                let cc = (c + dc).rem_euclid(w) as usize;
                out.data[rr * self.width + cc] = self.data[(r * w + c) as usize];
            }
        }
        out
    }

    /// Position of the maximum; ties resolve to the first cell in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `sum (self - other)^2`.
    pub fn squared_distance(&self, other: &RealPlane) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

impl ComplexPlane {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "plane dims must be at least 1x1");
        ComplexPlane {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::dims(height * width, data.len()));
        }
        if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("complex plane".into()));
        }
        Ok(ComplexPlane {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        ComplexPlane {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> Complex64,
    ) -> Self {
        let mut p = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                p.data[r * width + c] = f(r, c);
            }
        }
        p
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.data[row * self.width + col] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest `|X[k] - conj(X[-k])|`, i.e. how far the plane is from
    /// being the spectrum of a real plane.
    pub fn max_asymmetry(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        let mut worst = 0.0f64;
        for r in 0..h {
            let nr = (h - r) % h;
            for c in 0..w {
                let nc = (w - c) % w;
                let d = self.data[r * w + c] - self.data[nr * w + nc].conj();
                worst = worst.max(d.norm());
            }
        }
        worst
    }
}

/// Row/column FFT plans for one plane size.
pub(crate) struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scratch_len: usize,
    // FFT scratch and transpose buffer, reused across calls.
    work: RefCell<(Vec<Complex64>, Vec<Complex64>)>,
}

impl Fft2 {
    fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        let row_fwd = planner.plan_fft_forward(width);
        let row_inv = planner.plan_fft_inverse(width);
        let col_fwd = planner.plan_fft_forward(height);
        let col_inv = planner.plan_fft_inverse(height);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Fft2 {
            height,
            width,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch_len,
            work: RefCell::new((Vec::new(), Vec::new())),
        }
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(buf.len(), h * w);
        let mut work = self.work.borrow_mut();
        let (scratch, t) = &mut *work;
        scratch.resize(self.scratch_len, Complex64::new(0.0, 0.0));
        t.resize(h * w, Complex64::new(0.0, 0.0));
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        if w > 1 {
            rows.process_with_scratch(buf, scratch);
        }
        if h > 1 {
            transpose(buf, t, h, w);
            cols.process_with_scratch(t, scratch);
            transpose(t, buf, w, h);
        }
    }

    /// Unnormalized forward transform of an input stored transposed
    /// (`width` rows of `height`); the spectrum comes back in natural
    /// layout. Saves one transpose over [`Fft2::forward`].
    fn forward_transposed(&self, buf: &mut Vec<Complex64>) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(buf.len(), h * w);
        let mut work = self.work.borrow_mut();
        let (scratch, t) = &mut *work;
        scratch.resize(self.scratch_len, Complex64::new(0.0, 0.0));
        t.resize(h * w, Complex64::new(0.0, 0.0));
        if h > 1 {
            self.col_fwd.process_with_scratch(buf, scratch);
        }
        transpose(buf, t, w, h);
        if w > 1 {
            self.row_fwd.process_with_scratch(t, scratch);
        }
        std::mem::swap(buf, t);
    }

    /// Unnormalized forward transform in place.
    pub(crate) fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, false);
    }

    /// Unnormalized inverse transform (no `1/(H·W)`) in place.
    pub(crate) fn inverse_unnormalized(&self, buf: &mut [Complex64]) {
        self.run(buf, true);
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const BLOCK: usize = 16;
    for rb in (0..rows).step_by(BLOCK) {
        for cb in (0..cols).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(rows) {
                for c in cb..(cb + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Single-precision forward plans; results are widened to f64.
struct Fft2Single {
    height: usize,
    width: usize,
    row: Arc<dyn Fft<f32>>,
    col: Arc<dyn Fft<f32>>,
    work: RefCell<(Vec<Complex32>, Vec<Complex32>, Vec<Complex32>)>,
}

impl Fft2Single {
    fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::<f32>::new();
        Fft2Single {
            height,
            width,
            row: planner.plan_fft_forward(width),
            col: planner.plan_fft_forward(height),
            work: RefCell::new((Vec::new(), Vec::new(), Vec::new())),
        }
    }

    /// Transforms the plane produced by `fill` (called with a row-major
    /// buffer) and writes the spectrum into `out`.
    fn forward(&self, fill: impl FnOnce(&mut [Complex32]), out: &mut [Complex64]) {
        let (h, w) = (self.height, self.width);
        let mut work = self.work.borrow_mut();
        let (scratch, buf, t) = &mut *work;
        let len = self.row.get_inplace_scratch_len().max(self.col.get_inplace_scratch_len());
        scratch.resize(len, Complex32::new(0.0, 0.0));
        buf.resize(h * w, Complex32::new(0.0, 0.0));
        t.resize(h * w, Complex32::new(0.0, 0.0));
        fill(buf);
        if w > 1 {
            self.row.process_with_scratch(buf, scratch);
        }
        transpose_with(t, (h, w), |i| buf[i]);
        if h > 1 {
            self.col.process_with_scratch(t, scratch);
        }
        transpose_with(out, (w, h), |i| Complex64::new(t[i].re as f64, t[i].im as f64));
    }
}

thread_local! {
    static PLANS_SINGLE: RefCell<HashMap<(usize, usize), Rc<Fft2Single>>> = RefCell::new(HashMap::new());
}

fn plan_single(height: usize, width: usize) -> Rc<Fft2Single> {
    PLANS_SINGLE.with(|p| {
        p.borrow_mut()
            .entry((height, width))
            .or_insert_with(|| Rc::new(Fft2Single::new(height, width)))
            .clone()
    })
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Rc<Fft2>>> = RefCell::new(HashMap::new());
}

/// Plans are cached per thread and size; the cache is invisible to callers.
pub(crate) fn plan(height: usize, width: usize) -> Rc<Fft2> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((height, width))
            .or_insert_with(|| Rc::new(Fft2::new(height, width)))
            .clone()
    })
}

fn to_complex(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Forward 2-D DFT of a real plane.
pub fn dft2(x: &RealPlane) -> Result<ComplexPlane> {
    if !x.is_finite() {
        return Err(Error::NonFinite("dft2 input".into()));
    }
    Ok(dft2_unchecked(x))
}

pub(crate) fn dft2_unchecked(x: &RealPlane) -> ComplexPlane {
    let mut buf = to_complex(&x.data);
    plan(x.height, x.width).forward(&mut buf);
    ComplexPlane {
        height: x.height,
        width: x.width,
        data: buf,
    }
}

/// Transforms two real planes with a single complex FFT.
///
/// Packs `a + i·b`, transforms, and separates the halves using
/// `A[k] = (C[k] + conj(C[-k]))/2` and `B[k] = (C[k] - conj(C[-k]))/(2i)`.
pub fn dft2_pair(a: &RealPlane, b: &RealPlane) -> Result<(ComplexPlane, ComplexPlane)> {
    if a.dims() != b.dims() {
        return Err(Error::dims(
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    let (h, w) = a.dims();
    let mut buf: Vec<Complex64> = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&re, &im)| Complex64::new(re, im))
        .collect();
    plan(h, w).forward(&mut buf);
    let mut fa = vec![Complex64::new(0.0, 0.0); h * w];
    unpack_pair_in_place(&mut fa, &mut buf, h, w);
    Ok((
        ComplexPlane::from_raw(h, w, fa),
        ComplexPlane::from_raw(h, w, buf),
    ))
}

/// Splits the spectrum of `a + i·b`, held in `fb`, into the spectra of `a`
/// (written to `fa`) and `b` (overwriting `fb`).
fn unpack_pair_in_place(fa: &mut [Complex64], fb: &mut [Complex64], h: usize, w: usize) {
    // Each index is visited together with its mirror.
    for r in 0..h {
        let nr = (h - r) % h;
        for c in 0..w {
            let nc = (w - c) % w;
            let i = r * w + c;
            let j = nr * w + nc;
            if j < i {
                continue;
            }
            let (zi, zj) = (fb[i], fb[j]);
            fa[i] = (zi + zj.conj()) * 0.5;
            fa[j] = (zj + zi.conj()) * 0.5;
            // (z - conj(z_mirror)) / 2i
            let di = (zi - zj.conj()) * 0.5;
            let dj = (zj - zi.conj()) * 0.5;
            fb[i] = Complex64::new(di.im, -di.re);
            fb[j] = Complex64::new(dj.im, -dj.re);
        }
    }
}

/// `herm(a) + i·herm(b)`, where `herm` keeps the conjugate-symmetric part.
fn pack_hermitian_pair(a: &[Complex64], b: Option<&[Complex64]>, h: usize, w: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        let nr = (h - r) % h;
        for c in 0..w {
            let nc = (w - c) % w;
            let i = r * w + c;
            let j = nr * w + nc;
            let sa = (a[i] + a[j].conj()) * 0.5;
            buf[i] = match b {
                Some(b) => {
                    let sb = (b[i] + b[j].conj()) * 0.5;
                    Complex64::new(sa.re - sb.im, sa.im + sb.re)
                }
                None => sa,
            };
        }
    }
    buf
}

/// Spectra of every channel of `x`, each multiplied by `window` first.
/// Channels are transformed two at a time.
pub fn dft2_planes(x: &Planes, window: Option<&RealPlane>) -> Result<Vec<ComplexPlane>> {
    let (ch, h, w) = x.shape();
    let mut out = vec![ComplexPlane::zeros(h, w); ch];
    dft2_planes_into(x, window, &mut out)?;
    Ok(out)
}

/// [`dft2_planes`] writing into existing spectra of matching size.
pub fn dft2_planes_into(x: &Planes, window: Option<&RealPlane>, out: &mut [ComplexPlane]) -> Result<()> {
    let (ch, h, w) = x.shape();
    if let Some(win) = window {
        if win.dims() != (h, w) {
            return Err(Error::dims(format!("{h}x{w} window"), format!("{:?}", win.dims())));
        }
    }
    if out.len() != ch || out.iter().any(|o| o.dims() != (h, w)) {
        return Err(Error::dims(format!("{ch} spectra of {h}x{w}"), format!("{} spectra", out.len())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("dft2 input".into()));
    }
    let fft = plan(h, w);
    for c in (0..ch).step_by(2) {
        let a = x.channel(c);
        let b = (c + 1 < ch).then(|| x.channel(c + 1));
        let (lo, hi) = out.split_at_mut(c + 1);
        let fa = &mut lo[c].data;
        // The packed transform runs in the second output's storage when
        // there is one.
        let buf = match hi.first_mut() {
            Some(fb) if b.is_some() => &mut fb.data,
            _ => &mut *fa,
        };
        fill_packed(buf, a, b, window.map(RealPlane::data));
        fft.forward(buf);
        if b.is_some() {
            unpack_pair_in_place(fa, &mut hi[0].data, h, w);
        }
    }
    Ok(())
}

/// Writes `win·a + i·win·b` into `buf`; a missing `b` or window acts as zero
/// or one respectively.
fn fill_packed(buf: &mut [Complex64], a: &[f64], b: Option<&[f64]>, window: Option<&[f64]>) {
    match (b, window) {
        (Some(b), Some(win)) => {
            for (((d, &x), &y), &k) in buf.iter_mut().zip(a).zip(b).zip(win) {
                *d = Complex64::new(x * k, y * k);
            }
        }
        (Some(b), None) => {
            for ((d, &x), &y) in buf.iter_mut().zip(a).zip(b) {
                *d = Complex64::new(x, y);
            }
        }
        (None, Some(win)) => {
            for ((d, &x), &k) in buf.iter_mut().zip(a).zip(win) {
                *d = Complex64::new(x * k, 0.0);
            }
        }
        (None, None) => {
            for (d, &x) in buf.iter_mut().zip(a) {
                *d = Complex64::new(x, 0.0);
            }
        }
    }
}

/// [`fill_packed`] writing the `h × w` result transposed.
fn fill_packed_transposed(
    buf: &mut [Complex64],
    (a, b): (&[f64], Option<&[f64]>),
    window: Option<&[f64]>,
    (h, w): (usize, usize),
) {
    match (b, window) {
        (Some(b), Some(win)) => transpose_with(buf, (h, w), |i| Complex64::new(a[i] * win[i], b[i] * win[i])),
        (Some(b), None) => transpose_with(buf, (h, w), |i| Complex64::new(a[i], b[i])),
        (None, Some(win)) => transpose_with(buf, (h, w), |i| Complex64::new(a[i] * win[i], 0.0)),
        (None, None) => transpose_with(buf, (h, w), |i| Complex64::new(a[i], 0.0)),
    }
}

/// `dst[c·h + r] = f(r·w + c)`, in cache blocks.
#[inline]
fn transpose_with<T>(dst: &mut [T], (h, w): (usize, usize), f: impl Fn(usize) -> T) {
    const BLOCK: usize = 16;
    for rb in (0..h).step_by(BLOCK) {
        for cb in (0..w).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(h) {
                for c in cb..(cb + BLOCK).min(w) {
                    dst[c * h + r] = f(r * w + c);
                }
            }
        }
    }
}

/// Spectra of channel pairs `x[2p] + i·x[2p+1]` (windowed first), without
/// separating them. An odd last channel is paired with zero.
///
/// With `single` set the transforms run in f32 (relative error near 1e-6)
/// and are widened on output.
pub fn dft2_packed_into(
    x: &Planes,
    window: Option<&RealPlane>,
    out: &mut [ComplexPlane],
    single: bool,
) -> Result<()> {
    let (ch, h, w) = x.shape();
    if let Some(win) = window {
        if win.dims() != (h, w) {
            return Err(Error::dims(format!("{h}x{w} window"), format!("{:?}", win.dims())));
        }
    }
    let pairs = ch.div_ceil(2);
    if out.len() != pairs || out.iter().any(|o| o.dims() != (h, w)) {
        return Err(Error::dims(format!("{pairs} spectra of {h}x{w}"), format!("{} spectra", out.len())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("dft2 input".into()));
    }
    if single {
        let fft = plan_single(h, w);
        let win = window.map(RealPlane::data);
        for (p, o) in out.iter_mut().enumerate() {
            let a = x.channel(2 * p);
            let b = (2 * p + 1 < ch).then(|| x.channel(2 * p + 1));
            fft.forward(
                |buf| {
                    for (i, d) in buf.iter_mut().enumerate() {
                        let k = win.map_or(1.0, |win| win[i]);
                        let im = b.map_or(0.0, |b| b[i] * k);
                        *d = Complex32::new((a[i] * k) as f32, im as f32);
                    }
                },
                &mut o.data,
            );
        }
        return Ok(());
    }
    let fft = plan(h, w);
    for (p, o) in out.iter_mut().enumerate() {
        let b = (2 * p + 1 < ch).then(|| x.channel(2 * p + 1));
        fill_packed_transposed(&mut o.data, (x.channel(2 * p), b), window.map(RealPlane::data), (h, w));
        fft.forward_transposed(&mut o.data);
    }
    Ok(())
}

/// Separates the spectrum of `a + i·b` into the spectra of `a` and `b`.
pub fn unpack_pair(packed: &ComplexPlane) -> (ComplexPlane, ComplexPlane) {
    let (h, w) = packed.dims();
    let mut fa = vec![Complex64::new(0.0, 0.0); h * w];
    let mut fb = packed.data.clone();
    unpack_pair_in_place(&mut fa, &mut fb, h, w);
    (ComplexPlane::from_raw(h, w, fa), ComplexPlane::from_raw(h, w, fb))
}

/// `Re idft2(s)` for every spectrum, stacked as channels. Spectra are
/// transformed two at a time.
pub fn idft2_re_planes(spectra: &[ComplexPlane]) -> Result<Planes> {
    let first = spectra
        .first()
        .ok_or_else(|| Error::InvalidInput("no spectra".into()))?;
    let (h, w) = first.dims();
    if let Some(bad) = spectra.iter().find(|s| s.dims() != (h, w)) {
        return Err(Error::dims(format!("{h}x{w}"), format!("{:?}", bad.dims())));
    }
    let fft = plan(h, w);
    let n = (h * w) as f64;
    let mut out = Planes::zeros(spectra.len(), h, w);
    for c in (0..spectra.len()).step_by(2) {
        let b = spectra.get(c + 1).map(|s| s.data.as_slice());
        let mut buf = pack_hermitian_pair(&spectra[c].data, b, h, w);
        fft.inverse_unnormalized(&mut buf);
        for (d, v) in out.channel_mut(c).iter_mut().zip(&buf) {
            *d = v.re / n;
        }
        if b.is_some() {
            for (d, v) in out.channel_mut(c + 1).iter_mut().zip(&buf) {
                *d = v.im / n;
            }
        }
    }
    Ok(out)
}

/// Spectra of a stack of real planes, pairing channels two at a time.
pub fn dft2_many(planes: &[RealPlane]) -> Result<Vec<ComplexPlane>> {
    let mut out = Vec::with_capacity(planes.len());
    let mut chunks = planes.chunks_exact(2);
    for pair in &mut chunks {
        let (a, b) = dft2_pair(&pair[0], &pair[1])?;
        out.push(a);
        out.push(b);
    }
    for p in chunks.remainder() {
        out.push(dft2(p)?);
    }
    Ok(out)
}

/// Inverse 2-D DFT of a conjugate-symmetric spectrum.
///
/// Fails with [`Error::SymmetryViolation`] when the relative asymmetry
/// exceeds [`SYMMETRY_TOLERANCE`].
pub fn idft2(x: &ComplexPlane) -> Result<RealPlane> {
    if !x.is_finite() {
        return Err(Error::NonFinite("idft2 input".into()));
    }
    let scale = x.max_abs();
    if scale > 0.0 {
        let rel = x.max_asymmetry() / scale;
        if rel > SYMMETRY_TOLERANCE {
            return Err(Error::SymmetryViolation(rel));
        }
    }
    Ok(idft2_re(x))
}

/// Real part of the normalized inverse DFT, without a symmetry check.
pub fn idft2_re(x: &ComplexPlane) -> RealPlane {
    let mut buf = x.data.clone();
    plan(x.height, x.width).inverse_unnormalized(&mut buf);
    let n = (x.height * x.width) as f64;
    RealPlane {
        height: x.height,
        width: x.width,
        data: buf.into_iter().map(|v| v.re / n).collect(),
    }
}

/// `(Re idft2(a), Re idft2(b))` computed with one complex FFT.
///
/// Each input is first projected onto its Hermitian part, whose inverse
/// transform is exactly the real part of the original inverse.
pub fn idft2_re_pair(a: &ComplexPlane, b: &ComplexPlane) -> Result<(RealPlane, RealPlane)> {
    if a.dims() != b.dims() {
        return Err(Error::dims(
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    let (h, w) = a.dims();
    let mut buf = pack_hermitian_pair(&a.data, Some(&b.data), h, w);
    plan(h, w).inverse_unnormalized(&mut buf);
    let n = (h * w) as f64;
    let ra = buf.iter().map(|v| v.re / n).collect();
    let rb = buf.iter().map(|v| v.im / n).collect();
    Ok((
        RealPlane {
            height: h,
            width: w,
            data: ra,
        },
        RealPlane {
            height: h,
            width: w,
            data: rb,
        },
    ))
}

/// Element-wise product `a ⊙ b`, or `conj(a) ⊙ b` when `conj_a` is set.
pub fn hadamard(a: &ComplexPlane, b: &ComplexPlane, conj_a: bool) -> Result<ComplexPlane> {
    if a.dims() != b.dims() {
        return Err(Error::dims(
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| if conj_a { x.conj() * y } else { x * y })
        .collect();
    Ok(ComplexPlane {
        height: a.height,
        width: a.width,
        data,
    })
}

/// Gradient of a real input given the gradient of its spectrum.
///
/// `upstream[k] = ∂L/∂Re X[k] + i·∂L/∂Im X[k]` where `X = dft2(x)`; the
/// result is `∂L/∂x = Re(Fᴴ upstream)`, the unnormalized inverse DFT
/// restricted to its real part. The real part collects both conjugate
/// partners `upstream[k]` and `conj(upstream[-k])`.
pub fn grad_through_dft(upstream: &ComplexPlane) -> RealPlane {
    let mut buf = upstream.data.clone();
    plan(upstream.height, upstream.width).inverse_unnormalized(&mut buf);
    RealPlane {
        height: upstream.height,
        width: upstream.width,
        data: buf.into_iter().map(|v| v.re).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_plane(rng: &mut impl Rng, h: usize, w: usize) -> RealPlane {
        RealPlane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_dft(x: &RealPlane) -> ComplexPlane {
        let (h, w) = x.dims();
        ComplexPlane::from_fn(h, w, |k, l| {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..h {
                for n in 0..w {
                    let ang = -2.0 * PI * ((k * m) as f64 / h as f64 + (l * n) as f64 / w as f64);
                    acc += Complex64::from_polar(x.get(m, n), ang);
                }
            }
            acc
        })
    }

    fn max_diff_c(a: &ComplexPlane, b: &ComplexPlane) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    fn max_diff(a: &RealPlane, b: &RealPlane) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zeros_transform_to_zeros() {
        let f = dft2(&RealPlane::zeros(4, 4)).unwrap();
        assert!(f.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn impulse_transforms_to_ones() {
        let mut x = RealPlane::zeros(4, 4);
        x.set(0, 0, 1.0);
        let f = dft2(&x).unwrap();
        for v in f.data() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn matches_naive_dft_on_5x7() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_plane(&mut rng, 5, 7);
        let fast = dft2(&x).unwrap();
        assert!(max_diff_c(&fast, &naive_dft(&x)) < 1e-9);
        let dc: f64 = x.sum();
        assert!((fast.get(0, 0).re - dc).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = RealPlane::zeros(2, 2);
        x.data_mut()[1] = f64::NAN;
        assert!(matches!(dft2(&x), Err(Error::NonFinite(_))));
        assert!(RealPlane::from_vec(1, 2, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn round_trip_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_plane(&mut rng, 8, 8);
        let back = idft2(&dft2(&x).unwrap()).unwrap();
        assert!(max_diff(&x, &back) < 1e-9);
    }

    #[test]
    fn ones_invert_to_impulse() {
        let ones = ComplexPlane::from_fn(4, 4, |_, _| Complex64::new(1.0, 0.0));
        let x = idft2(&ones).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = if (r, c) == (0, 0) { 1.0 } else { 0.0 };
                assert!((x.get(r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        let mut s = ComplexPlane::zeros(4, 4);
        s.set(0, 1, Complex64::new(1.0, 0.0));
        assert!(matches!(idft2(&s), Err(Error::SymmetryViolation(_))));
    }

    #[test]
    fn conj_product_is_cross_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (6, 6);
        let a = random_plane(&mut rng, h, w);
        let b = random_plane(&mut rng, h, w);
        let prod = hadamard(&dft2(&a).unwrap(), &dft2(&b).unwrap(), true).unwrap();
        let got = idft2(&prod).unwrap();
        let want = RealPlane::from_fn(h, w, |sr, sc| {
            let mut acc = 0.0;
            for m in 0..h {
                for n in 0..w {
                    acc += a.get(m, n) * b.get((m + sr) % h, (n + sc) % w);
                }
            }
            acc
        });
        assert!(max_diff(&got, &want) < 1e-9);
    }

    #[test]
    fn hadamard_identity_and_modulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = dft2(&random_plane(&mut rng, 3, 3)).unwrap();
        let ones = ComplexPlane::from_fn(3, 3, |_, _| Complex64::new(1.0, 0.0));
        assert_eq!(hadamard(&a, &ones, false).unwrap(), a);
        let m = hadamard(&a, &a, true).unwrap();
        for (v, x) in m.data().iter().zip(a.data()) {
            assert!(v.im.abs() < 1e-12);
            assert!(v.re >= 0.0);
            assert!((v.re - x.norm_sqr()).abs() < 1e-12);
        }
    }

    #[test]
    fn hadamard_matches_scalar_products() {
        let a = ComplexPlane::from_fn(3, 3, |r, c| Complex64::new(r as f64 - 1.0, c as f64 * 0.5));
        let b = ComplexPlane::from_fn(3, 3, |r, c| Complex64::new(0.25 * c as f64, 2.0 - r as f64));
        let p = hadamard(&a, &b, false).unwrap();
        let q = hadamard(&a, &b, true).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let (x, y) = (a.get(r, c), b.get(r, c));
                let plain = Complex64::new(x.re * y.re - x.im * y.im, x.re * y.im + x.im * y.re);
                let conj = Complex64::new(x.re * y.re + x.im * y.im, x.re * y.im - x.im * y.re);
                assert!((p.get(r, c) - plain).norm() < 1e-15);
                assert!((q.get(r, c) - conj).norm() < 1e-15);
            }
        }
        assert!(hadamard(&a, &ComplexPlane::zeros(2, 3), false).is_err());
    }

    #[test]
    fn grad_of_half_energy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_plane(&mut rng, 4, 4);
        let loss = |p: &RealPlane| {
            dft2(p)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.norm_sqr())
                .sum::<f64>()
                / 2.0
        };
        // d/dRe + i d/dIm of |X|^2/2 is X itself.
        let g = grad_through_dft(&dft2(&x).unwrap());
        let eps = 1e-4;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs());
            assert!(rel < 1e-6, "coord {i}: fd {fd} analytic {}", g.data()[i]);
        }
    }

    #[test]
    fn grad_of_zero_upstream_is_zero() {
        let g = grad_through_dft(&ComplexPlane::zeros(3, 5));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_of_dc_real_part_is_ones() {
        let mut up = ComplexPlane::zeros(4, 4);
        up.set(0, 0, Complex64::new(1.0, 0.0));
        let g = grad_through_dft(&up);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn paired_transforms_match_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_plane(&mut rng, 5, 6);
        let b = random_plane(&mut rng, 5, 6);
        let (fa, fb) = dft2_pair(&a, &b).unwrap();
        assert!(max_diff_c(&fa, &dft2(&a).unwrap()) < 1e-12);
        assert!(max_diff_c(&fb, &dft2(&b).unwrap()) < 1e-12);

        let mut ca = fa.clone();
        ca.data_mut()[3] += Complex64::new(0.3, -0.2);
        let (ra, rb) = idft2_re_pair(&ca, &fb).unwrap();
        assert!(max_diff(&ra, &idft2_re(&ca)) < 1e-12);
        assert!(max_diff(&rb, &b) < 1e-12);
    }

    #[test]
    fn many_handles_odd_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let planes: Vec<_> = (0..3).map(|_| random_plane(&mut rng, 4, 3)).collect();
        let specs = dft2_many(&planes).unwrap();
        assert_eq!(specs.len(), 3);
        for (p, s) in planes.iter().zip(&specs) {
            assert!(max_diff_c(s, &dft2(p).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_first_row_major() {
        let p = RealPlane::filled(3, 3, 2.0);
        assert_eq!(p.argmax(), (0, 0));
        let mut q = RealPlane::zeros(3, 4);
        q.set(2, 1, 5.0);
        q.set(1, 3, 5.0);
        assert_eq!(q.argmax(), (1, 3));
    }

    #[test]
    fn circshift_moves_content() {
        let mut p = RealPlane::zeros(4, 5);
        p.set(1, 1, 1.0);
        let s = p.circshift(-2, 4);
        assert_eq!(s.get(3, 0), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn plane_strategy(max: usize) -> impl Strategy<Value = RealPlane> {
            (1..=max, 1..=max).prop_flat_map(|(h, w)| {
                proptest::collection::vec(-10.0f64..10.0, h * w)
                    .prop_map(move |d| RealPlane::from_vec(h, w, d).unwrap())
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn parseval(x in plane_strategy(16)) {
                let energy: f64 = x.data().iter().map(|v| v * v).sum();
                let spec: f64 = dft2(&x).unwrap().data().iter().map(|v| v.norm_sqr()).sum();
                let n = x.len() as f64;
                prop_assert!((energy - spec / n).abs() <= 1e-9 * energy.max(1e-300));
            }

            #[test]
            fn linearity(x in plane_strategy(9), alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (h, w) = x.dims();
                let y = random_plane(&mut rng, h, w);
                let combo = RealPlane::from_fn(h, w, |r, c| alpha * x.get(r, c) + beta * y.get(r, c));
                let lhs = dft2(&combo).unwrap();
                let fx = dft2(&x).unwrap();
                let fy = dft2(&y).unwrap();
                for i in 0..lhs.len() {
                    let rhs = fx.data()[i] * alpha + fy.data()[i] * beta;
                    prop_assert!((lhs.data()[i] - rhs).norm() < 1e-9);
                }
            }

            #[test]
            fn round_trip(x in plane_strategy(12)) {
                let back = idft2(&dft2(&x).unwrap()).unwrap();
                prop_assert!(max_diff(&back, &x) < 1e-9);
            }
        }
    }

    #[test]
    fn parseval_on_125() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_plane(&mut rng, 125, 125);
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spec: f64 = dft2(&x).unwrap().data().iter().map(|v| v.norm_sqr()).sum();
        assert!((energy - spec / (125.0 * 125.0)).abs() / energy < 1e-9);
    }

    #[test]
    fn unit_variance_gradient_check_with_small_step() {
        // L = sum_k w_k |X_k|^2 with random positive weights.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_plane(&mut rng, 5, 4);
        let weights: Vec<f64> = (0..20).map(|_| rng.random_range(0.1..2.0)).collect();
        let loss = |p: &RealPlane| {
            dft2(p)
                .unwrap()
                .data()
                .iter()
                .zip(&weights)
                .map(|(v, w)| w * v.norm_sqr())
                .sum::<f64>()
        };
        let spec = dft2(&x).unwrap();
        let up = ComplexPlane::from_fn(5, 4, |r, c| spec.get(r, c) * (2.0 * weights[r * 4 + c]));
        let g = grad_through_dft(&up);
        let eps = 1e-4;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs());
            assert!(rel < 1e-5);
        }
    }

    #[test]
    fn stacked_transforms_match_single_plane_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for ch in [1, 2, 5] {
            let x = Planes::from_fn(ch, 6, 7, |_, _, _| rng.random_range(-1.0..1.0));
            let win = random_plane(&mut rng, 6, 7);
            let spectra = dft2_planes(&x, Some(&win)).unwrap();
            for c in 0..ch {
                let mut wc = x.to_plane(c);
                wc.data_mut().iter_mut().zip(win.data()).for_each(|(v, k)| *v *= k);
                let want = dft2(&wc).unwrap();
                let err = spectra[c]
                    .data()
                    .iter()
                    .zip(want.data())
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                assert!(err < 1e-12);
            }
            // Arbitrary (non-Hermitian) spectra invert to their real parts.
            let arb: Vec<ComplexPlane> = (0..ch)
                .map(|_| {
                    ComplexPlane::from_fn(6, 7, |_, _| {
                        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                    })
                })
                .collect();
            let back = idft2_re_planes(&arb).unwrap();
            for c in 0..ch {
                let want = idft2_re(&arb[c]);
                let err = back
                    .channel(c)
                    .iter()
                    .zip(want.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-12);
            }
        }
    }
}
