//! The shallow Siamese feature extractor and its optimizer.
//!
//! Architecture: `conv3x3(3→mid) → ReLU → conv3x3(mid→out) → LRN`, stride 1
//! and zero padding 1 on both convolutions so feature maps keep the patch
//! size. Weights are stored `[out][in][ky][kx]`.
//!
//! # Model file
//!
//! ```text
//! LUDT1\n
//! tensors 4\n
//! conv1.weight <mid> 3 3 3\n
//! conv1.bias <mid>\n
//! conv2.weight <out> <mid> 3 3\n
//! conv2.bias <out>\n
//! <row-major little-endian f32 values of the four tensors, in header order>
//! ```
//!
//! Header lines are ASCII, single-space separated and newline terminated.
//! No padding separates the header from the payload, and nothing follows it.

use std::cell::RefCell;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::planes::{FeatureMap, Patch, Planes};
use crate::winograd::{self, WinogradScratch};

/// Input channels of the first convolution.
pub const IN_CHANNELS: usize = 3;
const K: usize = 3;
const TAPS: usize = K * K;

pub const MODEL_MAGIC: &[u8] = b"LUDT1\n";

/// Channel widths of the two convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub mid: usize,
    pub out: usize,
}

impl NetShape {
    /// 32 channels on both layers.
    pub const FULL: NetShape = NetShape { mid: 32, out: 32 };

    pub fn new(mid: usize, out: usize) -> Self {
        NetShape { mid, out }
    }
}

/// Network weights (or a gradient with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    shape: NetShape,
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
}

impl NetParams {
    pub fn zeros(shape: NetShape) -> Self {
        NetParams {
            shape,
            conv1_w: vec![0.0; shape.mid * IN_CHANNELS * TAPS],
            conv1_b: vec![0.0; shape.mid],
            conv2_w: vec![0.0; shape.out * shape.mid * TAPS],
            conv2_b: vec![0.0; shape.out],
        }
    }

    /// He-style initialization: kernels ~ N(0, 2/fan_in), zero biases.
    pub fn init(shape: NetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(shape);
        let std1 = (2.0 / (IN_CHANNELS * TAPS) as f64).sqrt();
        let std2 = (2.0 / (shape.mid * TAPS) as f64).sqrt();
        let n1 = Normal::new(0.0, std1).expect("valid std");
        let n2 = Normal::new(0.0, std2).expect("valid std");
        p.conv1_w.iter_mut().for_each(|v| *v = n1.sample(&mut rng));
        p.conv2_w.iter_mut().for_each(|v| *v = n2.sample(&mut rng));
        p
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    /// `(name, dims, values)` for each tensor in file order.
    pub fn tensors(&self) -> [(&'static str, Vec<usize>, &[f64]); 4] {
        let s = self.shape;
        [
            ("conv1.weight", vec![s.mid, IN_CHANNELS, K, K], &self.conv1_w),
            ("conv1.bias", vec![s.mid], &self.conv1_b),
            ("conv2.weight", vec![s.out, s.mid, K, K], &self.conv2_w),
            ("conv2.bias", vec![s.out], &self.conv2_b),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.conv1_w.len() + self.conv1_b.len() + self.conv2_w.len() + self.conv2_b.len()
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (t, (_, _, v)) in self.tensors().iter().enumerate() {
            if i < v.len() {
                return (t, i);
            }
            i -= v.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `i` in flattened file order.
    pub fn get_flat(&self, i: usize) -> f64 {
        let (t, j) = self.locate(i);
        self.tensors()[t].2[j]
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        let (t, j) = self.locate(i);
        self.tensors_mut()[t][j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &NetParams) {
        assert_eq!(self.shape, other.shape, "parameter shapes differ");
        let src = other.tensors();
        for (dst, (_, _, s)) in self.tensors_mut().into_iter().zip(src.iter()) {
            for (d, v) in dst.iter_mut().zip(s.iter()) {
                *d += alpha * v;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Rounds every value to the nearest `f32`, as storing does.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.num_params());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(b"tensors 4\n");
        for (name, dims, _) in self.tensors() {
            let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            out.extend_from_slice(format!("{name} {}\n", dims.join(" ")).as_bytes());
        }
        for (_, _, values) in self.tensors() {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        let rest = bytes
            .strip_prefix(MODEL_MAGIC)
            .ok_or_else(|| bad("missing LUDT1 magic"))?;
        let mut pos = 0;
        let mut next_line = || -> Result<String> {
            let end = rest[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[pos..pos + end])
                .map_err(|_| bad("header is not ASCII"))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != "tensors 4" {
            return Err(bad("expected 'tensors 4'"));
        }
        let mut dims = Vec::new();
        for expected in ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"] {
            let line = next_line()?;
            let mut parts = line.split(' ');
            if parts.next() != Some(expected) {
                return Err(bad(&format!("expected tensor {expected}")));
            }
            let d: Vec<usize> = parts
                .map(|p| p.parse().map_err(|_| bad("bad dimension")))
                .collect::<Result<_>>()?;
            dims.push(d);
        }
        let mid = dims[1].first().copied().unwrap_or(0);
        let out = dims[3].first().copied().unwrap_or(0);
        let shape = NetShape::new(mid, out);
        let mut params = NetParams::zeros(shape);
        let expected_dims: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.1.clone()).collect();
        if mid == 0 || out == 0 || dims != expected_dims {
            return Err(bad("inconsistent tensor shapes"));
        }
        let payload = &rest[pos..];
        if payload.len() != 4 * params.num_params() {
            return Err(bad(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                4 * params.num_params()
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        if !params.is_finite() {
            return Err(bad("non-finite weights"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Cross-channel local response normalization
/// `y_c = x_c / (kappa + alpha·Σ_{|c'-c| ≤ size/2} x_{c'}²)^beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lrn {
    pub size: usize,
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Lrn {
    pub const CLASSIC: Lrn = Lrn {
        size: 5,
        kappa: 2.0,
        alpha: 1e-4,
        beta: 0.75,
    };

    fn neighbours(&self, c: usize, channels: usize) -> std::ops::Range<usize> {
        let half = self.size / 2;
        c.saturating_sub(half)..(c + half + 1).min(channels)
    }

    /// Per-element denominators `s` and scales `s^-beta`.
    fn scales(&self, x: &Planes) -> (Vec<f64>, Vec<f64>) {
        let (ch, _, _) = x.shape();
        let n = x.plane_len();
        let sq: Vec<f64> = x.data().iter().map(|v| v * v).collect();
        let mut s = vec![0.0; ch * n];
        for c in 0..ch {
            let dst = &mut s[c * n..(c + 1) * n];
            dst.fill(self.kappa);
            for cc in self.neighbours(c, ch) {
                for (d, q) in dst.iter_mut().zip(&sq[cc * n..(cc + 1) * n]) {
                    *d += self.alpha * q;
                }
            }
        }
        let scale = if self.beta == 0.75 {
            s.iter()
                .map(|&v| {
                    let r = v.sqrt();
                    1.0 / (r * r.sqrt())
                })
                .collect()
        } else {
            s.iter().map(|&v| v.powf(-self.beta)).collect()
        };
        (s, scale)
    }
}

/// Applies [`Lrn`] to a feature map.
pub fn lrn(x: &FeatureMap, params: &Lrn) -> FeatureMap {
    let (_, scale) = params.scales(x);
    let mut y = x.clone();
    y.data_mut()
        .iter_mut()
        .zip(&scale)
        .for_each(|(v, s)| *v *= s);
    y
}

fn lrn_backward(upstream: &Planes, x: &Planes, s: &[f64], scale: &[f64], params: &Lrn) -> Planes {
    // dx_j = g_j s_j^-b - 2ab x_j Σ_{c∈N(j)} g_c x_c s_c^(-b-1)
    let (ch, _, _) = x.shape();
    let n = x.plane_len();
    let t: Vec<f64> = (0..ch * n)
        .map(|i| upstream.data()[i] * x.data()[i] * scale[i] / s[i])
        .collect();
    let mut dx = Planes::zeros(ch, x.height(), x.width());
    let k = 2.0 * params.alpha * params.beta;
    for c in 0..ch {
        let mut acc = vec![0.0; n];
        for cc in params.neighbours(c, ch) {
            for (a, v) in acc.iter_mut().zip(&t[cc * n..(cc + 1) * n]) {
                *a += v;
            }
        }
        let xs = x.channel(c);
        let gs = upstream.channel(c);
        let sc = &scale[c * n..(c + 1) * n];
        for (i, d) in dx.channel_mut(c).iter_mut().enumerate() {
            *d = gs[i] * sc[i] - k * xs[i] * acc[i];
        }
    }
    dx
}

/// Floating-point width of the convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Everything in f64.
    #[default]
    F64,
    /// Convolution products in f32; other steps stay in f64. Inference only.
    F32,
}

/// Settings for [`extract`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    pub lrn: Option<Lrn>,
    pub precision: Precision,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            lrn: Some(Lrn::CLASSIC),
            precision: Precision::F64,
        }
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    shape: NetShape,
    conv1_w: Vec<f64>,
    conv2_w: Vec<f64>,
    input: Patch,
    act1: Planes,
    pre_lrn: Planes,
    lrn: Option<(Lrn, Vec<f64>, Vec<f64>)>,
}

/// Writes the 3×3/pad-1 column matrix `[cin·9][h·w]` of a channel-major
/// `cin × h × w` buffer.
fn im2col<S: Copy, T: Copy + Default>(
    src: &[S],
    (cin, h, w): (usize, usize, usize),
    cols: &mut [T],
    cast: impl Fn(S) -> T,
) {
    let p = h * w;
    debug_assert_eq!(cols.len(), cin * TAPS * p);
    for ci in 0..cin {
        let plane = &src[ci * p..(ci + 1) * p];
        for ky in 0..K {
            for kx in 0..K {
                let row = (ci * TAPS + ky * K + kx) * p;
                let dst = &mut cols[row..row + p];
                for (y, out) in dst.chunks_exact_mut(w).enumerate() {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::default());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::default();
                            for (o, &v) in out[1..].iter_mut().zip(&srow[..w - 1]) {
                                *o = cast(v);
                            }
                        }
                        1 => {
                            for (o, &v) in out.iter_mut().zip(srow) {
                                *o = cast(v);
                            }
                        }
                        _ => {
                            for (o, &v) in out[..w - 1].iter_mut().zip(&srow[1..]) {
                                *o = cast(v);
                            }
                            out[w - 1] = T::default();
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates a column-matrix gradient back onto image positions.
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize) -> Planes {
    let p = h * w;
    let mut out = Planes::zeros(cin, h, w);
    for ci in 0..cin {
        let plane = out.channel_mut(ci);
        for ky in 0..K {
            for kx in 0..K {
                let row = (ci * TAPS + ky * K + kx) * p;
                let src = &cols[row..row + p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s = &src[y * w..(y + 1) * w];
                    match kx {
                        0 => (1..w).for_each(|x| drow[x - 1] += s[x]),
                        1 => (0..w).for_each(|x| drow[x] += s[x]),
                        _ => (0..w - 1).for_each(|x| drow[x + 1] += s[x]),
                    }
                }
            }
        }
    }
    out
}

struct Mat<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

fn check_extent<T>(m: &Mat<'_, T>, rows: usize, cols: usize) {
    let last = (rows - 1) * m.rs + (cols - 1) * m.cs;
    assert!(last < m.data.len(), "matrix view out of bounds");
}

/// `c = a·b + beta·c`, with `c` a contiguous row-major `m × n` matrix.
fn gemm64(m: usize, k: usize, n: usize, a: Mat<'_, f64>, b: Mat<'_, f64>, beta: f64, c: &mut [f64]) {
    check_extent(&a, m, k);
    check_extent(&b, k, n);
    assert!(c.len() >= m * n);
    // SAFETY: extents were checked against the slice lengths above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gemm32(m: usize, k: usize, n: usize, a: Mat<'_, f32>, b: Mat<'_, f32>, c: &mut [f32]) {
    check_extent(&a, m, k);
    check_extent(&b, k, n);
    assert!(c.len() >= m * n);
    // SAFETY: extents were checked against the slice lengths above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

thread_local! {
    static SCRATCH64: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reused per-thread buffer of `len` elements (contents unspecified).
fn with_scratch64<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH64.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

fn conv_forward(input: &Planes, weight: &[f64], bias: &[f64]) -> Planes {
    let (cin, h, w) = input.shape();
    let cout = bias.len();
    let kk = cin * TAPS;
    let p = h * w;
    let mut out = Planes::zeros(cout, h, w);
    with_scratch64(kk * p, |cols| {
        im2col(input.data(), input.shape(), cols, |v| v);
        gemm64(
            cout,
            kk,
            p,
            Mat { data: weight, rs: kk, cs: 1 },
            Mat { data: cols, rs: p, cs: 1 },
            0.0,
            out.data_mut(),
        );
    });
    for (c, b) in bias.iter().enumerate() {
        out.channel_mut(c).iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Buffers of the single-precision inference path.
#[derive(Default)]
struct Infer32 {
    cols: Vec<f32>,
    act1: Vec<f32>,
    pre: Vec<f32>,
    w1: Vec<f32>,
    wino: WinogradScratch,
}

thread_local! {
    static INFER32: RefCell<Infer32> = RefCell::new(Infer32::default());
}

/// `out[c] = W·im2col(src) + b[c]` in f32; `out` is resized to fit.
fn conv32<S: Copy>(
    src: &[S],
    shape: (usize, usize, usize),
    weight: &[f32],
    bias: &[f64],
    cols: &mut Vec<f32>,
    out: &mut Vec<f32>,
    cast: impl Fn(S) -> f32,
) {
    let (cin, h, w) = shape;
    let (kk, p, cout) = (cin * TAPS, h * w, bias.len());
    cols.resize(kk * p, 0.0);
    out.resize(cout * p, 0.0);
    im2col(src, shape, cols, cast);
    gemm32(
        cout,
        kk,
        p,
        Mat { data: weight, rs: kk, cs: 1 },
        Mat { data: cols, rs: p, cs: 1 },
        out,
    );
    for (o, &b) in out.chunks_exact_mut(p).zip(bias) {
        let b = b as f32;
        o.iter_mut().for_each(|v| *v += b);
    }
}

fn extract32(p: &Patch, theta: &NetParams, lrn_params: Option<&Lrn>, out: &mut FeatureMap) {
    let (_, h, w) = p.shape();
    let n = h * w;
    let (mid, och) = (theta.shape.mid, theta.shape.out);
    INFER32.with(|cell| {
        let buf = &mut *cell.borrow_mut();
        buf.w1.clear();
        buf.w1.extend(theta.conv1_w.iter().map(|&v| v as f32));
        conv32(p.data(), p.shape(), &buf.w1, &theta.conv1_b, &mut buf.cols, &mut buf.act1, |v| v as f32);
        buf.act1.iter_mut().for_each(|v| *v = v.max(0.0));
        winograd::conv3x3(&buf.act1, (mid, h, w), &theta.conv2_w, &theta.conv2_b, &mut buf.pre, &mut buf.wino);
        let pre = &buf.pre;
        let dst = out.data_mut();
        match lrn_params {
            None => dst.iter_mut().zip(pre).for_each(|(d, &v)| *d = v as f64),
            Some(l) => {
                // Reuse the column buffer for the windowed sums of squares.
                buf.cols.resize(n, 0.0);
                let sums = &mut buf.cols[..n];
                let (kappa, alpha, beta) = (l.kappa as f32, l.alpha as f32, l.beta as f32);
                // Running window sum: add the channel entering, drop the one leaving.
                sums.fill(0.0);
                let mut window = 0..0;
                for c in 0..och {
                    let next = l.neighbours(c, och);
                    for cc in window.end..next.end {
                        for (s, &v) in sums.iter_mut().zip(&pre[cc * n..(cc + 1) * n]) {
                            *s += v * v;
                        }
                    }
                    for cc in window.start..next.start {
                        for (s, &v) in sums.iter_mut().zip(&pre[cc * n..(cc + 1) * n]) {
                            *s = (*s - v * v).max(0.0);
                        }
                    }
                    window = next;
                    let src = &pre[c * n..(c + 1) * n];
                    let d = &mut dst[c * n..(c + 1) * n];
                    if l.beta == 0.75 {
                        for ((d, &v), &s) in d.iter_mut().zip(src).zip(sums.iter()) {
                            let r = (kappa + alpha * s).sqrt();
                            *d = (v / (r * r.sqrt())) as f64;
                        }
                    } else {
                        for ((d, &v), &s) in d.iter_mut().zip(src).zip(sums.iter()) {
                            *d = (v * (kappa + alpha * s).powf(-beta)) as f64;
                        }
                    }
                }
            }
        }
    });
}

/// Returns `(dW, db, dInput)`; the input gradient is skipped when not wanted.
fn conv_backward(
    upstream: &Planes,
    input: &Planes,
    weight: &[f64],
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Option<Planes>) {
    let (cin, h, w) = input.shape();
    let cout = upstream.channels();
    let kk = cin * TAPS;
    let p = h * w;
    let db = (0..cout).map(|c| upstream.channel(c).iter().sum()).collect();
    with_scratch64(kk * p, |cols| {
        im2col(input.data(), input.shape(), cols, |v| v);
        let mut dw = vec![0.0; cout * kk];
        gemm64(
            cout,
            p,
            kk,
            Mat { data: upstream.data(), rs: p, cs: 1 },
            Mat { data: cols, rs: 1, cs: p },
            0.0,
            &mut dw,
        );
        let dinput = want_input.then(|| {
            // The column buffer now holds the column-space gradient.
            gemm64(
                kk,
                cout,
                p,
                Mat { data: weight, rs: 1, cs: kk },
                Mat { data: upstream.data(), rs: p, cs: 1 },
                0.0,
                cols,
            );
            col2im(cols, cin, h, w)
        });
        (dw, db, dinput)
    })
}

fn check_input(p: &Patch, theta: &NetParams) -> Result<()> {
    if p.channels() != IN_CHANNELS {
        return Err(Error::dims(
            format!("{IN_CHANNELS} input channels"),
            format!("{} channels", p.channels()),
        ));
    }
    if theta.conv1_w.len() != theta.shape.mid * IN_CHANNELS * TAPS
        || theta.conv2_w.len() != theta.shape.out * theta.shape.mid * TAPS
        || theta.conv1_b.len() != theta.shape.mid
        || theta.conv2_b.len() != theta.shape.out
    {
        return Err(Error::InvalidInput("parameter tensors do not match their shape".into()));
    }
    if !p.is_finite() {
        return Err(Error::NonFinite("patch".into()));
    }
    Ok(())
}

fn relu_in_place(x: &mut Planes) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Forward pass with the classic LRN, keeping a cache for [`backward`].
pub fn forward(p: &Patch, theta: &NetParams) -> Result<(FeatureMap, ActivationCache)> {
    forward_with(p, theta, Some(&Lrn::CLASSIC))
}

/// Forward pass with an optional LRN stage.
pub fn forward_with(
    p: &Patch,
    theta: &NetParams,
    lrn_params: Option<&Lrn>,
) -> Result<(FeatureMap, ActivationCache)> {
    check_input(p, theta)?;
    let mut act1 = conv_forward(p, &theta.conv1_w, &theta.conv1_b);
    relu_in_place(&mut act1);
    let pre_lrn = conv_forward(&act1, &theta.conv2_w, &theta.conv2_b);
    let (out, lrn_cache) = match lrn_params {
        Some(l) => {
            let (s, scale) = l.scales(&pre_lrn);
            let mut y = pre_lrn.clone();
            y.data_mut()
                .iter_mut()
                .zip(&scale)
                .for_each(|(v, k)| *v *= k);
            (y, Some((*l, s, scale)))
        }
        None => (pre_lrn.clone(), None),
    };
    let cache = ActivationCache {
        shape: theta.shape,
        conv1_w: theta.conv1_w.clone(),
        conv2_w: theta.conv2_w.clone(),
        input: p.clone(),
        act1,
        pre_lrn,
        lrn: lrn_cache,
    };
    Ok((out, cache))
}

/// Inference-only forward pass; no cache is kept.
pub fn extract(p: &Patch, theta: &NetParams, opts: &ExtractOptions) -> Result<FeatureMap> {
    let mut out = Planes::zeros(theta.shape.out, p.height(), p.width());
    extract_into(p, theta, opts, &mut out)?;
    Ok(out)
}

/// [`extract`] writing into a caller-owned map of shape `(out, h, w)`.
pub fn extract_into(
    p: &Patch,
    theta: &NetParams,
    opts: &ExtractOptions,
    out: &mut FeatureMap,
) -> Result<()> {
    check_input(p, theta)?;
    let want = (theta.shape.out, p.height(), p.width());
    if out.shape() != want {
        return Err(Error::dims(format!("{want:?}"), format!("{:?}", out.shape())));
    }
    match opts.precision {
        Precision::F32 => extract32(p, theta, opts.lrn.as_ref(), out),
        Precision::F64 => {
            let mut act1 = conv_forward(p, &theta.conv1_w, &theta.conv1_b);
            relu_in_place(&mut act1);
            let mut pre = conv_forward(&act1, &theta.conv2_w, &theta.conv2_b);
            if let Some(l) = &opts.lrn {
                pre = lrn(&pre, l);
            }
            out.data_mut().copy_from_slice(pre.data());
        }
    }
    Ok(())
}

fn backward_impl(
    upstream: &FeatureMap,
    cache: &ActivationCache,
    want_input: bool,
) -> Result<(Option<Patch>, NetParams)> {
    let expected = (cache.shape.out, cache.input.height(), cache.input.width());
    if upstream.shape() != expected {
        return Err(Error::StaleCache(format!(
            "upstream {:?} does not match cached forward {:?}",
            upstream.shape(),
            expected
        )));
    }
    let d_pre = match &cache.lrn {
        Some((l, s, scale)) => lrn_backward(upstream, &cache.pre_lrn, s, scale, l),
        None => upstream.clone(),
    };
    let (dw2, db2, d_act1) = conv_backward(&d_pre, &cache.act1, &cache.conv2_w, true);
    let mut d_pre1 = d_act1.expect("requested");
    d_pre1
        .data_mut()
        .iter_mut()
        .zip(cache.act1.data())
        .for_each(|(g, &a)| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
    let (dw1, db1, d_input) = conv_backward(&d_pre1, &cache.input, &cache.conv1_w, want_input);
    let grads = NetParams {
        shape: cache.shape,
        conv1_w: dw1,
        conv1_b: db1,
        conv2_w: dw2,
        conv2_b: db2,
    };
    Ok((d_input, grads))
}

/// Reverse-mode gradients of [`forward`] with respect to the patch and weights.
pub fn backward(upstream: &FeatureMap, cache: &ActivationCache) -> Result<(Patch, NetParams)> {
    let (dp, g) = backward_impl(upstream, cache, true)?;
    Ok((dp.expect("requested"), g))
}

/// Like [`backward`] but only the weight gradients are computed.
pub fn backward_params(upstream: &FeatureMap, cache: &ActivationCache) -> Result<NetParams> {
    Ok(backward_impl(upstream, cache, false)?.1)
}

/// Momentum and weight decay of the optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 0.005,
        }
    }
}

/// Momentum buffers and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: SgdConfig,
    pub velocity: NetParams,
    pub steps: u64,
}

impl OptimState {
    pub fn new(shape: NetShape, config: SgdConfig) -> Self {
        OptimState {
            config,
            velocity: NetParams::zeros(shape),
            steps: 0,
        }
    }
}

/// `v ← m·v + g + wd·θ; θ ← θ − lr·v`.
///
/// Non-finite gradients abort the step and leave `theta` and `opt` untouched.
pub fn sgd_step(theta: &mut NetParams, grads: &NetParams, opt: &mut OptimState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if theta.shape != grads.shape || theta.shape != opt.velocity.shape {
        return Err(Error::dims(format!("{:?}", theta.shape), format!("{:?}", grads.shape)));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients; optimizer step aborted".into()));
    }
    let SgdConfig {
        momentum,
        weight_decay,
    } = opt.config;
    let g = grads.tensors();
    let v = opt.velocity.tensors_mut();
    let t = theta.tensors_mut();
    for ((tv, vv), (_, _, gv)) in t.into_iter().zip(v).zip(g.iter()) {
        for i in 0..tv.len() {
            vv[i] = momentum * vv[i] + gv[i] + weight_decay * tv[i];
            tv[i] -= lr * vv[i];
        }
    }
    opt.steps += 1;
    Ok(())
}

/// Exponential learning-rate decay between two endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            start: 1e-2,
            end: 1e-5,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.start;
        }
        let t = epoch as f64 / (total - 1) as f64;
        self.start * (self.end / self.start).powf(t)
    }
}

/// `1e-2 · (1e-3)^(epoch/(total−1))`.
pub fn lr_schedule(epoch: usize, total: usize) -> f64 {
    LrSchedule::default().at(epoch, total)
}
